//! Command-line front end. Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure, 1 anything else (I/O, malformed files).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use lavrentiev::basis::build_basis;
use lavrentiev::data::{add_noise, assemble_boundary_data, BoundaryDataSet};
use lavrentiev::error::{Error, Result};
use lavrentiev::forward::{load_trace_dir, run_forward_to_dir};
use lavrentiev::geometry::{build_layout, DomainConfig, MeasurementFace};
use lavrentiev::pipeline::{
    convergence_csv, convergence_experiment, invert, oracle_data, reproduce_test, write_inversion, DataSource,
    ReferenceCache, RunManifest, RunOptions, Scale,
};
use lavrentiev::qrm::SolverKind;
use lavrentiev::recon::{compute_metrics, export_field, make_phantom, read_volume, PhantomKind, PhantomShape};

#[derive(Parser, Debug)]
#[command(name = "lavrentiev", version, about = "Wave-speed coefficient reconstruction from boundary data")]
struct Cli {
    /// JSON run configuration; omitted fields take the full-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the reduced desk profile instead of the full-scale defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory (meaning depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time-domain forward solves; writes traces and a manifest into --out.
    Forward {
        #[arg(long, default_value = "letter-c")]
        phantom: String,
        /// Source range `a..b` (end exclusive); default all sources.
        #[arg(long)]
        sources: Option<String>,
    },
    /// Boundary data from a trace directory or by quadrature; writes --out.
    MakeData {
        #[arg(long, value_enum)]
        from: From,
        /// Trace directory written by `forward` (for --from fdtd).
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Phantom kind (for --from oracle).
        #[arg(long, default_value = "letter-c")]
        phantom: String,
    },
    /// Adds multiplicative per-source noise to a data file; writes --out.
    AddNoise {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        delta: f64,
    },
    /// Reconstructs q from a data file; writes volumes, slices and logs into --out.
    Invert {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        /// 1: data on the face nearest the sources, 2: on the opposite face.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        bvp: Option<u8>,
        #[command(flatten)]
        solver: SolverArg,
        /// Leave the normal derivative free on the face opposite to the data.
        #[arg(long)]
        free_far_neumann: bool,
    },
    /// Samples a phantom on the inversion grid; writes volume and slices into --out.
    Phantom {
        #[arg(long)]
        kind: String,
        /// Grid step (default: the inversion step).
        #[arg(long)]
        step: Option<f64>,
    },
    /// Compares a recovered volume with the true one and prints JSON metrics.
    Metrics {
        #[arg(long)]
        rec: PathBuf,
        #[arg(long = "true")]
        truth: PathBuf,
        #[arg(long, default_value = "backscattering")]
        face: String,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Runs one of the numbered tests end to end.
    ReproduceTest {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
        id: u8,
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, value_enum, default_value_t = From::Fdtd)]
        source: From,
        #[command(flatten)]
        solver: SolverArg,
    },
    /// Noise-level sweep with γ = δ²; writes a CSV table to --out or stdout.
    Convergence {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.03, 0.05])]
        deltas: Vec<f64>,
        #[arg(long, default_value = "letter-c")]
        phantom: String,
        #[arg(long, value_enum, default_value_t = From::Fdtd)]
        source: From,
        #[command(flatten)]
        solver: SolverArg,
    },
    /// Prints the orthonormal basis and its derivative matrix as CSV.
    Basis {
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum From {
    Fdtd,
    Oracle,
}

impl From {
    fn source(self) -> DataSource {
        match self {
            From::Fdtd => DataSource::Fdtd,
            From::Oracle => DataSource::Oracle,
        }
    }
}

#[derive(Args, Debug)]
struct SolverArg {
    #[arg(long, value_enum, default_value_t = Solver::Auto)]
    solver: Solver,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Solver {
    Auto,
    Direct,
    Iterative,
}

impl SolverArg {
    fn kind(&self) -> SolverKind {
        match self.solver {
            Solver::Auto => SolverKind::Auto,
            Solver::Direct => SolverKind::Direct,
            Solver::Iterative => SolverKind::Iterative,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<DomainConfig> {
    let cfg = match &cli.config {
        Some(p) => DomainConfig::from_json_file(p)?,
        None if cli.desk => DomainConfig::desk(),
        None => DomainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn need_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::Config("this subcommand needs --out".into()))
}

fn parse_kind(s: &str) -> Result<PhantomKind> {
    s.parse()
}

fn parse_face(s: &str) -> Result<MeasurementFace> {
    match s {
        "backscattering" | "bsc" => Ok(MeasurementFace::Backscattering),
        "transmitted" | "tr" => Ok(MeasurementFace::Transmitted),
        other => Err(Error::Config(format!("unknown face '{other}'"))),
    }
}

fn parse_range(s: &str, n: usize) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("source range '{s}' is not of the form a..b within 0..{n}"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: usize = a.parse().map_err(|_| bad())?;
    let b: usize = b.parse().map_err(|_| bad())?;
    if a >= b || b > n {
        return Err(bad());
    }
    Ok((a..b).collect())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Forward { phantom, sources } => {
            let out = need_out(cli)?;
            let layout = build_layout(&cfg)?;
            let n = layout.sources.len();
            let sources = match sources {
                Some(r) => parse_range(r, n)?,
                None => (0..n).collect(),
            };
            let ph = make_phantom(parse_kind(phantom)?, &cfg, &cfg.forward_grid()?)?;
            let m = run_forward_to_dir(&ph, &sources, &cfg, &layout, out)?;
            info!("{} trace files listed in {}", m.files.len(), out.display());
        }
        Command::MakeData { from, traces, phantom } => {
            let out = need_out(cli)?;
            let data = match from {
                From::Fdtd => {
                    let dir = traces.as_deref().ok_or_else(|| Error::Config("--from fdtd needs --traces".into()))?;
                    let (manifest, store) = load_trace_dir(dir)?;
                    let layout = build_layout(&manifest.config)?;
                    assemble_boundary_data(&store, &layout, &manifest.config)?
                }
                From::Oracle => {
                    let layout = build_layout(&cfg)?;
                    oracle_data(&PhantomShape::new(parse_kind(phantom)?), &cfg, &layout)?
                }
            };
            data.write(out)?;
            info!("wrote {} ({} detectors × {} sources)", out.display(), data.n_detectors, data.n_sources);
        }
        Command::AddNoise { data, delta } => {
            let out = need_out(cli)?;
            let noisy = add_noise(&BoundaryDataSet::read(data)?, *delta, cli.seed)?;
            noisy.write(out)?;
        }
        Command::Invert { data, gamma, bvp, solver, free_far_neumann } => {
            let out = need_out(cli)?;
            let mut cfg = cfg.clone();
            if let Some(g) = gamma {
                cfg.gamma = *g;
            }
            match bvp {
                Some(1) => cfg.measurement_face = MeasurementFace::Backscattering,
                Some(2) => cfg.measurement_face = MeasurementFace::Transmitted,
                _ => {}
            }
            cfg.free_far_neumann |= *free_far_neumann;
            cfg.validate()?;
            let layout = build_layout(&cfg)?;
            let mut manifest = RunManifest::new("invert", &cfg, cli.seed);
            manifest.add_input(data)?;
            let d = BoundaryDataSet::read(data)?;
            let inv = manifest.time("inversion", || invert(&d, &cfg, &layout, solver.kind()))?;
            let names = write_inversion(out, &inv, &cfg)?;
            manifest.add_outputs(out, &names)?;
            manifest.write(out)?;
            println!("{}", serde_json::to_string_pretty(&inv.solution.stats)?);
        }
        Command::Phantom { kind, step } => {
            let out = need_out(cli)?;
            let grid = match step {
                Some(h) => cfg.omega_grid(*h)?,
                None => cfg.inversion_grid()?,
            };
            let ph = make_phantom(parse_kind(kind)?, &cfg, &grid)?;
            let stem = kind.replace('-', "_");
            export_field(&ph.q_field, out, &stem, &ph.description)?;
        }
        Command::Metrics { rec, truth, face, epsilon } => {
            let (q_rec, _) = read_volume(rec)?;
            let (q_true, _) = read_volume(truth)?;
            let m = compute_metrics(&q_rec, &q_true, epsilon.unwrap_or(cfg.omega_eps), parse_face(face)?)?;
            let text = serde_json::to_string_pretty(&m)?;
            match &cli.out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        Command::ReproduceTest { id, scale, source, solver } => {
            let scale: Scale = scale.parse()?;
            if cli.config.is_some() {
                log::warn!("reproduce-test uses the parameters of --scale; --config is ignored");
            }
            let opts = RunOptions { source: source.source(), seed: cli.seed, solver: solver.kind(), out: cli.out.clone() };
            let (result, manifest) = reproduce_test(*id, scale, &opts, &ReferenceCache::new())?;
            println!("{}", serde_json::to_string_pretty(&result.metrics)?);
            println!("digest {}", manifest.content_digest()?);
        }
        Command::Convergence { deltas, phantom, source, solver } => {
            let opts = RunOptions { source: source.source(), seed: cli.seed, solver: solver.kind(), out: None };
            let shape = PhantomShape::new(parse_kind(phantom)?);
            let rows = convergence_experiment(deltas, &shape, &cfg, &opts, &ReferenceCache::new())?;
            let csv = convergence_csv(&rows);
            match &cli.out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Basis { dump } => {
            let basis = build_basis(cfg.n_basis, cfg.d)?;
            if *dump {
                print!("{}", basis.to_csv());
            } else {
                println!("N = {}, d = {}, cond(M) = {:.3e}", cfg.n_basis, cfg.d, basis.m_condition());
            }
        }
    }
    Ok(())
}
