//! End-to-end drivers: data → boundary vectors → QRM → `q`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, BasisSet};
use crate::data::{add_noise, assemble_boundary_data, direct_oracle_data, BoundaryDataSet};
use crate::error::{Error, Result};
use crate::forward::{file_sha256, solve_all, Phantom, SourceSolve, TraceStore};
use crate::geometry::{build_layout, DomainConfig, FreeSpaceTerm, MeasurementFace, ScalarField3, SourceDetectorLayout};
use crate::qrm::{
    h2_distance, profile_csv, solve_qrm, weighted_residual_profile, QrmProblem, QrmSolution, SolverKind, SolverStats,
};
use crate::recon::{
    compute_metrics, export_field, make_phantom_shape, recover_q, Metrics, PhantomKind, PhantomShape, Recovered,
};
use crate::system::{assemble_coefficients, build_extension, project_boundary_data, BoundaryVectors};

/// Every intermediate product of one inversion.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub basis: BasisSet,
    pub boundary: BoundaryVectors,
    pub problem: QrmProblem,
    pub solution: QrmSolution,
    pub recovered: Recovered,
}

/// Inverts boundary data with `cfg.gamma`.
pub fn invert(
    data: &BoundaryDataSet,
    cfg: &DomainConfig,
    layout: &SourceDetectorLayout,
    solver: SolverKind,
) -> Result<Inversion> {
    cfg.validate()?;
    let basis = build_basis(cfg.n_basis, cfg.d)?;
    let grid = cfg.inversion_grid()?;
    let boundary = project_boundary_data(data, &basis, layout)?;
    let coeffs = assemble_coefficients(&basis, &grid, layout)?;
    let f = build_extension(&boundary, &grid, cfg)?;
    let problem = QrmProblem::new(coeffs, f, cfg.gamma, cfg)?;
    let solution = solve_qrm(&problem, solver)?;
    let recovered = recover_q(&solution.u, &basis, layout, cfg.x0_eval)?;
    info!(
        "inversion: max q {:.3e}, {} nodes clamped",
        recovered.q.max_abs(),
        recovered.clamped_nodes
    );
    Ok(Inversion { basis, boundary, problem, solution, recovered })
}

/// Parameter profile of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// The full-scale parameter set. Forward runs take hours.
    Paper,
    /// Reduced forward profile, see [`DomainConfig::desk`].
    Desk,
}

impl Scale {
    pub fn config(self) -> DomainConfig {
        match self {
            Scale::Paper => DomainConfig::default(),
            Scale::Desk => DomainConfig::desk(),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::config(format!("unknown scale '{other}' (paper or desk)"))),
        }
    }
}

/// How boundary data are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Time-domain forward solves and time moments.
    Fdtd,
    /// Direct quadrature of the integral representation.
    Oracle,
}

impl FromStr for DataSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fdtd" => Ok(DataSource::Fdtd),
            "oracle" => Ok(DataSource::Oracle),
            other => Err(Error::config(format!("unknown data source '{other}' (fdtd or oracle)"))),
        }
    }
}

/// Grid step of the phantom used by the quadrature oracle.
pub const ORACLE_STEP: f64 = 0.025;

/// Parameters of one of the eight numbered tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub id: u8,
    pub phantom: PhantomKind,
    pub face: MeasurementFace,
    pub delta: f64,
    pub gamma: f64,
}

pub fn test_spec(id: u8) -> Result<TestSpec> {
    let phantom = match id {
        1 | 5 => PhantomKind::DigitOne,
        2 | 6 => PhantomKind::ThreeBalls,
        3 | 4 | 7 | 8 => PhantomKind::LetterC,
        _ => return Err(Error::config(format!("test id {id} outside 1..=8"))),
    };
    let face = if id <= 4 { MeasurementFace::Backscattering } else { MeasurementFace::Transmitted };
    let noisy = id == 4 || id == 8;
    Ok(TestSpec {
        id,
        phantom,
        face,
        delta: if noisy { 0.05 } else { 0.0 },
        gamma: if noisy { 1e-8 } else { 0.0 },
    })
}

impl TestSpec {
    /// `base` with the face and `γ` of this test.
    pub fn apply(&self, base: &DomainConfig) -> DomainConfig {
        DomainConfig { measurement_face: self.face, gamma: self.gamma, ..base.clone() }
    }
}

/// Reference (`q = 0`) traces keyed by the forward configuration, so repeated
/// runs with the same forward setup solve the background problem once.
#[derive(Debug, Default)]
pub struct ReferenceCache {
    runs: Mutex<HashMap<String, Vec<SourceSolve>>>,
}

impl ReferenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(cfg: &DomainConfig) -> Result<String> {
        // Inversion-only fields do not affect the forward solves.
        let fwd = DomainConfig {
            gamma: 0.0,
            n_basis: 0,
            inv_h: 0.0,
            omega_eps: 0.0,
            free_far_neumann: false,
            x0_eval: 0.0,
            ..cfg.clone()
        };
        Ok(sha256_hex(serde_json::to_string(&fwd)?.as_bytes()))
    }

    fn get_or_solve(&self, cfg: &DomainConfig, layout: &SourceDetectorLayout) -> Result<Vec<SourceSolve>> {
        let key = Self::key(cfg)?;
        if let Some(r) = self.runs.lock().unwrap().get(&key) {
            return Ok(r.clone());
        }
        let zero = Phantom::zero(&cfg.forward_grid()?);
        let all: Vec<usize> = (0..layout.sources.len()).collect();
        let solves = solve_all(&zero, &all, cfg, layout)?;
        self.runs.lock().unwrap().insert(key, solves.clone());
        Ok(solves)
    }
}

/// Boundary data of `shape` from forward solves on the `Φ` grid.
pub fn fdtd_data(
    shape: &PhantomShape,
    cfg: &DomainConfig,
    layout: &SourceDetectorLayout,
    cache: &ReferenceCache,
) -> Result<BoundaryDataSet> {
    let phantom = make_phantom_shape(shape, cfg, &cfg.forward_grid()?)?;
    let all: Vec<usize> = (0..layout.sources.len()).collect();
    let mut store = TraceStore::new(all.len());
    let solves = solve_all(&phantom, &all, cfg, layout)?;
    let unconverged = solves.iter().filter(|s| !s.converged).count();
    if unconverged > 0 {
        warn!("{unconverged} forward solves reached t_max before the stopping threshold");
    }
    for s in solves {
        store.insert(s, false);
    }
    if cfg.free_space == FreeSpaceTerm::Reference {
        for s in cache.get_or_solve(cfg, layout)? {
            store.insert(s, true);
        }
    }
    assemble_boundary_data(&store, layout, cfg)
}

/// Boundary data of `shape` by quadrature on a grid of step [`ORACLE_STEP`].
pub fn oracle_data(shape: &PhantomShape, cfg: &DomainConfig, layout: &SourceDetectorLayout) -> Result<BoundaryDataSet> {
    let phantom = make_phantom_shape(shape, cfg, &cfg.omega_grid(ORACLE_STEP)?)?;
    direct_oracle_data(&phantom, layout)
}

pub fn generate_data(
    shape: &PhantomShape,
    cfg: &DomainConfig,
    layout: &SourceDetectorLayout,
    source: DataSource,
    cache: &ReferenceCache,
) -> Result<BoundaryDataSet> {
    match source {
        DataSource::Fdtd => fdtd_data(shape, cfg, layout, cache),
        DataSource::Oracle => oracle_data(shape, cfg, layout),
    }
}

/// Recovered coefficient with metrics against the true phantom.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub q_rec: ScalarField3,
    /// `q_rec + 1`.
    pub c_rec: ScalarField3,
    pub q_true: ScalarField3,
    pub metrics: Metrics,
    /// Stages that produced `q_rec`, in order.
    pub provenance: Vec<String>,
}

impl ReconstructionResult {
    fn new(q_rec: ScalarField3, q_true: ScalarField3, cfg: &DomainConfig, provenance: Vec<String>) -> Result<Self> {
        let metrics = compute_metrics(&q_rec, &q_true, cfg.omega_eps, cfg.measurement_face)?;
        let c_rec = ScalarField3 { grid: q_rec.grid.clone(), values: q_rec.values.iter().map(|v| v + 1.0).collect() };
        Ok(ReconstructionResult { q_rec, c_rec, q_true, metrics, provenance })
    }
}

/// Digest of one file written by a stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to re-run a stage: configuration, seed, inputs and
/// outputs with digests, timings and versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: DomainConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<TestSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_source: Option<DataSource>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timings: Vec<StageTiming>,
    /// SHA-256 of the boundary data used for inversion.
    pub data_sha256: String,
    /// SHA-256 of the recovered `q` values.
    pub result_sha256: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: impl Into<String>, config: &DomainConfig, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            seed,
            test: None,
            data_source: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            data_sha256: String::new(),
            result_sha256: String::new(),
        }
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| stage_error(stage, e))?;
        self.timings.push(StageTiming { stage: stage.into(), seconds: start.elapsed().as_secs_f64() });
        Ok(out)
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest_of(path)?);
        Ok(())
    }

    /// Records every file in `names` (relative to `dir`).
    pub fn add_outputs(&mut self, dir: &Path, names: &[String]) -> Result<()> {
        for n in names {
            self.outputs.push(FileDigest { file: n.clone(), sha256: file_sha256(&dir.join(n))? });
        }
        Ok(())
    }

    /// Digest over configuration, seed, data, result and output files,
    /// leaving out timings and the solver log (which records wall time);
    /// equal for two runs that produced bit-identical results.
    pub fn content_digest(&self) -> Result<String> {
        let outputs: Vec<&FileDigest> = self.outputs.iter().filter(|f| f.file != RUN_LOG).collect();
        let key = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "test": self.test,
            "data": self.data_sha256,
            "result": self.result_sha256,
            "outputs": outputs,
        });
        Ok(sha256_hex(serde_json::to_string(&key)?.as_bytes()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn digest_of(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest { file: path.display().to_string(), sha256: file_sha256(path)? })
}

/// Prefixes numerical and configuration errors with the failing stage.
fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{stage}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{stage}: {m}")),
        other => other,
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn field_sha256(f: &ScalarField3) -> String {
    let bytes: Vec<u8> = f.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

pub(crate) fn data_sha256(d: &BoundaryDataSet) -> String {
    let bytes: Vec<u8> = d.g0.iter().chain(&d.g1).flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Options shared by the end-to-end drivers.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub source: DataSource,
    pub seed: u64,
    pub solver: SolverKind,
    /// Directory for volumes, slices, logs and the manifest.
    pub out: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { source: DataSource::Fdtd, seed: 0, solver: SolverKind::Auto, out: None }
    }
}

/// Full run for one phantom: data, optional noise, inversion, metrics.
pub fn run_phantom(
    shape: &PhantomShape,
    delta: f64,
    cfg: &DomainConfig,
    opts: &RunOptions,
    cache: &ReferenceCache,
    manifest: &mut RunManifest,
) -> Result<(ReconstructionResult, Inversion)> {
    cfg.validate()?;
    manifest.data_source = Some(opts.source);
    let layout = manifest.time("layout", || build_layout(cfg))?;
    let clean = manifest.time("data", || generate_data(shape, cfg, &layout, opts.source, cache))?;
    let data = manifest.time("noise", || add_noise(&clean, delta, opts.seed))?;
    manifest.data_sha256 = data_sha256(&data);
    let inv = manifest.time("inversion", || invert(&data, cfg, &layout, opts.solver))?;
    let q_true = make_phantom_shape(shape, cfg, &cfg.inversion_grid()?)?.q_field;
    let provenance = vec![
        format!("phantom: {}", shape.description()),
        format!("data: {:?} ({})", opts.source, layout.layout_ref()),
        format!("noise: delta {delta}, seed {}", opts.seed),
        format!("qrm: {} with gamma {:e}", inv.solution.stats.method, inv.solution.gamma_used),
        format!("recovery at x0 = {}", cfg.x0_eval),
    ];
    let result = ReconstructionResult::new(inv.recovered.q.clone(), q_true, cfg, provenance)?;
    manifest.result_sha256 = field_sha256(&result.q_rec);
    if let Some(dir) = &opts.out {
        write_outputs(dir, &data, &inv, &result, manifest)?;
    }
    info!(
        "{}: peak {:.3} at {:?}, rel L2 {:?}",
        shape.description(),
        result.metrics.peak_value,
        result.metrics.peak_location,
        result.metrics.rel_l2_error
    );
    Ok((result, inv))
}

/// Writes data, volumes, slices, metrics, solver log and manifest into `dir`.
pub fn write_outputs(
    dir: &Path,
    data: &BoundaryDataSet,
    inv: &Inversion,
    result: &ReconstructionResult,
    manifest: &mut RunManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut names = vec!["data.bin".to_string(), "data.bin.json".to_string()];
    data.write(&dir.join("data.bin"))?;
    names.extend(write_inversion(dir, inv, &manifest.config)?);
    names.extend(export_field(&result.q_true, dir, "q_true", "true q on the inversion grid")?);
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&result.metrics)?)?;
    names.push("metrics.json".into());
    names.sort();
    manifest.outputs.clear();
    manifest.add_outputs(dir, &names)?;
    manifest.write(dir)
}

/// Writes the recovered volumes, solver log and residual profile of `inv`;
/// returns the file names.
pub fn write_inversion(dir: &Path, inv: &Inversion, cfg: &DomainConfig) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let q = &inv.recovered.q;
    let c = ScalarField3 { grid: q.grid.clone(), values: q.values.iter().map(|v| v + 1.0).collect() };
    let mut names = export_field(q, dir, "q_rec", "recovered q")?;
    names.extend(export_field(&c, dir, "c_rec", "recovered c = q + 1")?);
    names.extend(export_field(&inv.recovered.q_pre_clamp, dir, "q_pre_clamp", "recovered q before clamping")?);
    append_run_log(&dir.join(RUN_LOG), &inv.solution.stats)?;
    names.push(RUN_LOG.into());
    // Weight largest at the measurement face.
    let variant = match cfg.measurement_face {
        MeasurementFace::Backscattering => 1,
        MeasurementFace::Transmitted => 2,
    };
    let profile = weighted_residual_profile(&inv.solution, 1.0, 2.0 * cfg.half_width, variant);
    std::fs::write(dir.join("residual_profile.csv"), profile_csv(&profile))?;
    names.push("residual_profile.csv".into());
    Ok(names)
}

pub const RUN_LOG: &str = "solver_log.json";

/// Appends `stats` to the JSON array stored in `path`.
pub fn append_run_log(path: &Path, stats: &SolverStats) -> Result<()> {
    let mut log: Vec<SolverStats> = if path.exists() {
        serde_json::from_str(&std::fs::read_to_string(path)?)?
    } else {
        Vec::new()
    };
    log.push(stats.clone());
    std::fs::write(path, serde_json::to_string_pretty(&log)?)?;
    Ok(())
}

/// Runs test `id` with the parameters of its scale.
pub fn reproduce_test(
    id: u8,
    scale: Scale,
    opts: &RunOptions,
    cache: &ReferenceCache,
) -> Result<(ReconstructionResult, RunManifest)> {
    let spec = test_spec(id)?;
    let cfg = spec.apply(&scale.config());
    let mut manifest = RunManifest::new(format!("reproduce-test {id} --scale {scale:?}").to_lowercase(), &cfg, opts.seed);
    manifest.test = Some(spec.clone());
    let (result, _) = run_phantom(&PhantomShape::new(spec.phantom), spec.delta, &cfg, opts, cache, &mut manifest)?;
    Ok((result, manifest))
}

/// One row of the noise-convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub delta: f64,
    pub gamma: f64,
    /// Discrete H² distance between `U` at this noise level and the noiseless `U`.
    pub h2_distance: f64,
    /// Relative L2 error of the recovered `q` on `Ω_ε`.
    pub l2_error: Option<f64>,
}

/// For each `δ`, inverts noisy data with `γ = δ²` and compares with the
/// noiseless (`δ = 0`, `γ = 0`) run. Noise for every level is drawn from `seed`.
pub fn convergence_experiment(
    deltas: &[f64],
    shape: &PhantomShape,
    cfg: &DomainConfig,
    opts: &RunOptions,
    cache: &ReferenceCache,
) -> Result<Vec<ConvergenceRow>> {
    let layout = build_layout(cfg)?;
    let clean = generate_data(shape, cfg, &layout, opts.source, cache)?;
    let q_true = make_phantom_shape(shape, cfg, &cfg.inversion_grid()?)?.q_field;
    convergence_from_data(&clean, &q_true, deltas, cfg, &layout, opts)
}

/// [`convergence_experiment`] on given noiseless data.
pub fn convergence_from_data(
    clean: &BoundaryDataSet,
    q_true: &ScalarField3,
    deltas: &[f64],
    cfg: &DomainConfig,
    layout: &SourceDetectorLayout,
    opts: &RunOptions,
) -> Result<Vec<ConvergenceRow>> {
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("noise levels must be sorted ascending"));
    }
    if deltas.iter().any(|d| !(0.0..1.0).contains(d)) {
        return Err(Error::config("noise levels must lie in [0, 1)"));
    }
    let base = invert(clean, &DomainConfig { gamma: 0.0, ..cfg.clone() }, layout, opts.solver)?;
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let gamma = delta * delta;
        let data = add_noise(clean, delta, opts.seed)?;
        let run_cfg = DomainConfig { gamma, ..cfg.clone() };
        let inv = invert(&data, &run_cfg, layout, opts.solver)?;
        let metrics = compute_metrics(&inv.recovered.q, q_true, cfg.omega_eps, cfg.measurement_face)?;
        let row = ConvergenceRow {
            delta,
            gamma,
            h2_distance: h2_distance(&inv.solution.u, &base.solution.u)?,
            l2_error: metrics.rel_l2_error,
        };
        info!("delta {delta}: H2 distance {:.4e}, rel L2 {:?}", row.h2_distance, row.l2_error);
        rows.push(row);
    }
    Ok(rows)
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = String::from("delta,gamma,h2_distance,rel_l2_error\n");
    for r in rows {
        let e = r.l2_error.map_or(String::new(), |v| format!("{v:.10e}"));
        s.push_str(&format!("{},{:e},{:.10e},{e}\n", r.delta, r.gamma, r.h2_distance));
    }
    s
}
