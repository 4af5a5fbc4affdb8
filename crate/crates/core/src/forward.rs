//! Finite-difference solver for `c(x) u_tt = Δu` on the simulation cube `Φ`.
//!
//! The point source is replaced by a mollified bump normalized to unit
//! discrete mass and enters through the initial velocity. Faces of `Φ` carry
//! first-order Engquist-Majda absorbing conditions (Mur discretization).
//! Detector traces of `u` and of its outward normal derivative are recorded
//! at every step.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, DomainConfig, Grid3, ScalarField3, SourceDetectorLayout, TimeScheme, Vec3};

/// Bump approximating `δ(x - x_s)`:
/// `(1/eps) exp(-1 / (1 - |x - x_s|^2 / eps))` inside `|x - x_s|^2 < eps`, 0 outside.
pub fn mollified_delta(x: Vec3, x_s: Vec3, eps: f64) -> f64 {
    let r2 = (x[0] - x_s[0]).powi(2) + (x[1] - x_s[1]).powi(2) + (x[2] - x_s[2]).powi(2);
    if r2 < eps {
        (-1.0 / (1.0 - r2 / eps)).exp() / eps
    } else {
        0.0
    }
}

/// Coefficient `q = c - 1` sampled on a grid covering `Ω`.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub q_field: ScalarField3,
    pub description: String,
}

impl Phantom {
    /// Checks nonnegativity and that the support stays at least two cells
    /// away from the faces of the grid.
    pub fn new(q_field: ScalarField3, description: impl Into<String>) -> Result<Self> {
        let g = &q_field.grid;
        for (idx, &v) in q_field.values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("phantom value {v} at node {idx} is not a finite nonnegative number")));
            }
            if v != 0.0 {
                let ijk = g.ijk(idx);
                if (0..3).any(|a| ijk[a] < 2 || ijk[a] + 2 >= g.counts[a]) {
                    return Err(Error::config(format!(
                        "phantom support reaches node {ijk:?}, closer than 2 cells to ∂Ω"
                    )));
                }
            }
        }
        Ok(Phantom { q_field, description: description.into() })
    }

    pub fn zero(grid: &Grid3) -> Self {
        Phantom { q_field: ScalarField3::zeros(grid), description: "zero".into() }
    }

    pub fn is_zero(&self) -> bool {
        self.q_field.values.iter().all(|&v| v == 0.0)
    }
}

/// Detector time series for one (source, detector) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveTrace {
    pub source_index: usize,
    pub detector_index: usize,
    pub dt: f64,
    pub samples_u: Vec<f64>,
    pub samples_dnu: Vec<f64>,
}

/// Result of one source solve.
#[derive(Debug, Clone)]
pub struct SourceSolve {
    pub source_index: usize,
    pub traces: Vec<WaveTrace>,
    /// Final time reached.
    pub stop_time: f64,
    /// Whether the max-norm stopping rule was met before `t_max`.
    pub converged: bool,
}

/// Nodes of `grid` and weights that reproduce a detector value and its
/// outward normal derivative.
#[derive(Debug, Clone)]
struct Probe {
    value: Vec<(usize, f64)>,
    normal: Vec<(usize, f64)>,
}

fn build_probes(grid: &Grid3, layout: &SourceDetectorLayout) -> Result<Vec<Probe>> {
    let h = grid.step;
    let zf = layout.detectors[0][2];
    let kf = grid
        .find_plane(2, zf)
        .ok_or_else(|| Error::config("measurement face is not a plane of the forward grid"))?;
    // Inward direction along z.
    let inward: i64 = if layout.face_normal[2] < 0.0 { 1 } else { -1 };
    let plane = |off: i64| -> Result<usize> {
        let k = kf as i64 + inward * off;
        if k < 0 || k as usize >= grid.counts[2] {
            return Err(Error::config("forward grid too small around the measurement face"));
        }
        Ok(k as usize)
    };
    let planes = [plane(0)?, plane(1)?, plane(2)?];
    // Outward derivative = -(inward derivative) = (3 u0 - 4 u1 + u2) / (2h).
    let normal_weights = [3.0 / (2.0 * h), -4.0 / (2.0 * h), 1.0 / (2.0 * h)];

    layout
        .detectors
        .iter()
        .map(|p| {
            let mut bil = Vec::with_capacity(4);
            let mut base = [0usize; 2];
            let mut frac = [0.0; 2];
            for a in 0..2 {
                let r = (p[a] - grid.origin[a]) / grid.step;
                if r < 0.0 || r > (grid.counts[a] - 1) as f64 {
                    return Err(Error::config("detector outside the forward grid"));
                }
                let mut i = r.floor() as usize;
                if i + 1 >= grid.counts[a] {
                    i = grid.counts[a] - 2;
                }
                base[a] = i;
                frac[a] = r - i as f64;
                if frac[a] < 1e-9 {
                    frac[a] = 0.0;
                }
                if (1.0 - frac[a]).abs() < 1e-9 {
                    frac[a] = 1.0;
                }
            }
            for dj in 0..2 {
                for di in 0..2 {
                    let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dj == 1 { frac[1] } else { 1.0 - frac[1] });
                    if w != 0.0 {
                        bil.push((base[0] + di, base[1] + dj, w));
                    }
                }
            }
            let value = bil.iter().map(|&(i, j, w)| (grid.index(i, j, planes[0]), w)).collect();
            let normal = bil
                .iter()
                .flat_map(|&(i, j, w)| {
                    planes
                        .iter()
                        .zip(normal_weights)
                        .map(move |(&k, nw)| (grid.index(i, j, k), w * nw))
                })
                .collect();
            Ok(Probe { value, normal })
        })
        .collect()
}

/// `1 / c` on the forward grid.
fn inverse_speed_squared(grid: &Grid3, phantom: &Phantom) -> Result<Vec<f64>> {
    let pg = &phantom.q_field.grid;
    if (pg.step - grid.step).abs() > 1e-12 * grid.step {
        return Err(Error::config(format!(
            "phantom grid step {} does not match forward_h {}",
            pg.step, grid.step
        )));
    }
    let mut offset = [0usize; 3];
    for a in 0..3 {
        offset[a] = grid
            .find_plane(a, pg.origin[a])
            .ok_or_else(|| Error::config("phantom grid is not aligned with the forward grid"))?;
        if offset[a] + pg.counts[a] > grid.counts[a] {
            return Err(Error::config("phantom grid extends beyond Φ"));
        }
    }
    let mut inv_c = vec![1.0; grid.len()];
    for k in 0..pg.counts[2] {
        for j in 0..pg.counts[1] {
            for i in 0..pg.counts[0] {
                let q = phantom.q_field.at(i, j, k);
                if q != 0.0 {
                    inv_c[grid.index(i + offset[0], j + offset[1], k + offset[2])] = 1.0 / (1.0 + q);
                }
            }
        }
    }
    Ok(inv_c)
}

/// Mollified source sampled on the grid and scaled to unit discrete mass.
fn source_field(grid: &Grid3, source: Vec3, eps: f64) -> Result<Vec<(usize, f64)>> {
    let radius = eps.sqrt();
    let h = grid.step;
    let mut range = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = ((source[a] - radius - grid.origin[a]) / h).floor();
        let hi = ((source[a] + radius - grid.origin[a]) / h).ceil();
        if lo < 1.0 || hi >= (grid.counts[a] - 1) as f64 {
            return Err(Error::config("source support touches the boundary of Φ"));
        }
        range[a] = (lo as usize, hi as usize);
    }
    let mut entries = Vec::new();
    let mut mass = 0.0;
    for k in range[2].0..=range[2].1 {
        for j in range[1].0..=range[1].1 {
            for i in range[0].0..=range[0].1 {
                let v = mollified_delta(grid.node(i, j, k), source, eps);
                if v > 0.0 {
                    entries.push((grid.index(i, j, k), v));
                    mass += v * h * h * h;
                }
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::config("mollified source has no grid nodes in its support; reduce forward_h"));
    }
    entries.iter_mut().for_each(|e| e.1 /= mass);
    Ok(entries)
}

/// Stability check for the chosen scheme.
pub fn check_stability(cfg: &DomainConfig) -> Result<()> {
    if cfg.scheme == TimeScheme::Explicit {
        let limit = cfg.forward_h / 3f64.sqrt();
        if cfg.forward_tau > limit {
            return Err(Error::config(format!(
                "explicit scheme unstable: tau = {} exceeds h / sqrt(3) = {limit:.5}",
                cfg.forward_tau
            )));
        }
    }
    Ok(())
}

/// Solves the forward problem for one source and records all detector traces.
pub fn solve_wave(
    phantom: &Phantom,
    source_index: usize,
    cfg: &DomainConfig,
    layout: &SourceDetectorLayout,
) -> Result<SourceSolve> {
    solve_wave_with_amplitude(phantom, source_index, cfg, layout, 1.0)
}

/// As [`solve_wave`], with the initial velocity scaled by `amplitude`.
pub fn solve_wave_with_amplitude(
    phantom: &Phantom,
    source_index: usize,
    cfg: &DomainConfig,
    layout: &SourceDetectorLayout,
    amplitude: f64,
) -> Result<SourceSolve> {
    check_stability(cfg)?;
    let grid = cfg.forward_grid()?;
    let source = *layout
        .sources
        .get(source_index)
        .ok_or_else(|| Error::config(format!("source index {source_index} out of range")))?;
    let inv_c = inverse_speed_squared(&grid, phantom)?;
    let probes = build_probes(&grid, layout)?;
    let src = source_field(&grid, source, cfg.mollifier_eps)?;

    let tau = cfg.forward_tau;
    let max_steps = (cfg.t_max / tau).floor() as usize;
    // The stopping rule is only consulted once the direct wave has passed
    // every detector.
    let earliest_stop = layout
        .detectors
        .iter()
        .map(|d| dist(*d, source))
        .fold(0.0, f64::max)
        + cfg.mollifier_eps.sqrt()
        + 4.0 * grid.step;

    let mut stepper: Box<dyn Stepper> = match cfg.scheme {
        TimeScheme::Explicit => Box::new(LeapFrog::new(&grid, inv_c, tau)),
        TimeScheme::Implicit => Box::new(AverageAcceleration::new(&grid, inv_c, tau)),
    };

    let nd = layout.detectors.len();
    let mut u_rec: Vec<Vec<f64>> = vec![Vec::with_capacity(max_steps + 1); nd];
    let mut dn_rec: Vec<Vec<f64>> = vec![Vec::with_capacity(max_steps + 1); nd];
    let mut record = |field: &[f64]| {
        for (d, p) in probes.iter().enumerate() {
            u_rec[d].push(p.value.iter().map(|&(i, w)| w * field[i]).sum());
            dn_rec[d].push(p.normal.iter().map(|&(i, w)| w * field[i]).sum());
        }
    };

    // u^0 = 0, u^1 = tau * f.
    record(stepper.current());
    let mut u1 = vec![0.0; grid.len()];
    for &(i, v) in &src {
        u1[i] = amplitude * tau * v;
    }
    let initial_max = u1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    stepper.set_initial(u1);
    record(stepper.current());

    let mut steps = 1;
    let mut converged = false;
    while steps < max_steps {
        let max_abs = stepper.step()?;
        steps += 1;
        record(stepper.current());
        if !max_abs.is_finite() || max_abs > 1e6 * initial_max.max(f64::MIN_POSITIVE) {
            return Err(Error::numerical(format!(
                "forward solve for source {source_index} unstable at t = {:.3} (max |u| = {max_abs:.3e})",
                steps as f64 * tau
            )));
        }
        let t = steps as f64 * tau;
        if t >= earliest_stop && max_abs <= cfg.stop_threshold * amplitude.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    let stop_time = steps as f64 * tau;
    if !converged {
        warn!(
            "source {source_index}: stopping rule not met by t_max = {}; traces truncated",
            cfg.t_max
        );
    }
    debug!("source {source_index}: stopped at t = {stop_time:.3}");

    let traces = u_rec
        .into_iter()
        .zip(dn_rec)
        .enumerate()
        .map(|(d, (u, dn))| WaveTrace {
            source_index,
            detector_index: d,
            dt: tau,
            samples_u: u,
            samples_dnu: dn,
        })
        .collect();
    Ok(SourceSolve { source_index, traces, stop_time, converged })
}

/// Runs [`solve_wave`] for every source index in `sources` as a parallel map.
pub fn solve_all(
    phantom: &Phantom,
    sources: &[usize],
    cfg: &DomainConfig,
    layout: &SourceDetectorLayout,
) -> Result<Vec<SourceSolve>> {
    sources
        .par_iter()
        .map(|&s| solve_wave(phantom, s, cfg, layout))
        .collect()
}

trait Stepper: Send {
    fn current(&self) -> &[f64];
    fn set_initial(&mut self, u1: Vec<f64>);
    /// Advances one step and returns the max-norm of the new field.
    fn step(&mut self) -> Result<f64>;
}

struct LeapFrog {
    nx: usize,
    ny: usize,
    nz: usize,
    /// `tau^2 / (c h^2)`.
    coef: Vec<f64>,
    mur: f64,
    prev: Vec<f64>,
    cur: Vec<f64>,
    next: Vec<f64>,
}

impl LeapFrog {
    fn new(grid: &Grid3, inv_c: Vec<f64>, tau: f64) -> Self {
        let r2 = (tau / grid.step).powi(2);
        let coef = inv_c.into_iter().map(|ic| ic * r2).collect();
        let n = grid.len();
        LeapFrog {
            nx: grid.counts[0],
            ny: grid.counts[1],
            nz: grid.counts[2],
            coef,
            mur: (tau - grid.step) / (tau + grid.step),
            prev: vec![0.0; n],
            cur: vec![0.0; n],
            next: vec![0.0; n],
        }
    }
}

impl Stepper for LeapFrog {
    fn current(&self) -> &[f64] {
        &self.cur
    }

    fn set_initial(&mut self, u1: Vec<f64>) {
        self.cur = u1;
    }

    fn step(&mut self) -> Result<f64> {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        let sx = 1;
        let sy = nx;
        let sz = nx * ny;
        let cur = &self.cur;
        let prev = &self.prev;
        let coef = &self.coef;
        let next = &mut self.next;
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                let row = j * sy + k * sz;
                for idx in row + 1..row + nx - 1 {
                    let c = cur[idx];
                    let lap = cur[idx - sx] + cur[idx + sx] + cur[idx - sy] + cur[idx + sy] + cur[idx - sz]
                        + cur[idx + sz]
                        - 6.0 * c;
                    next[idx] = 2.0 * c - prev[idx] + coef[idx] * lap;
                }
            }
        }
        apply_mur(next, cur, [nx, ny, nz], self.mur);
        std::mem::swap(&mut self.prev, &mut self.cur);
        std::mem::swap(&mut self.cur, &mut self.next);
        Ok(self.cur.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }
}

/// First-order absorbing update `u0^{n+1} = u1^n + k (u1^{n+1} - u0^n)` on
/// every face of the box. Interior values of `next` must already be set.
fn apply_mur(next: &mut [f64], cur: &[f64], n: [usize; 3], k: f64) {
    let [nx, ny, nz] = n;
    let idx = |i: usize, j: usize, l: usize| i + nx * (j + ny * l);
    // x faces
    for l in 0..nz {
        for j in 0..ny {
            let (b, i1) = (idx(0, j, l), idx(1, j, l));
            next[b] = cur[i1] + k * (next[i1] - cur[b]);
            let (b, i1) = (idx(nx - 1, j, l), idx(nx - 2, j, l));
            next[b] = cur[i1] + k * (next[i1] - cur[b]);
        }
    }
    // y faces
    for l in 0..nz {
        for i in 0..nx {
            let (b, i1) = (idx(i, 0, l), idx(i, 1, l));
            next[b] = cur[i1] + k * (next[i1] - cur[b]);
            let (b, i1) = (idx(i, ny - 1, l), idx(i, ny - 2, l));
            next[b] = cur[i1] + k * (next[i1] - cur[b]);
        }
    }
    // z faces
    for j in 0..ny {
        for i in 0..nx {
            let (b, i1) = (idx(i, j, 0), idx(i, j, 1));
            next[b] = cur[i1] + k * (next[i1] - cur[b]);
            let (b, i1) = (idx(i, j, nz - 1), idx(i, j, nz - 2));
            next[b] = cur[i1] + k * (next[i1] - cur[b]);
        }
    }
}

/// Trapezoidal-in-time scheme
/// `c (u+ - 2u + u-) / tau^2 = Δ_h (u+ + 2u + u-) / 4`,
/// unconditionally stable. Each step solves
/// `(c - tau^2/4 Δ_h) u+ = rhs` by Jacobi-preconditioned CG with the
/// boundary values supplied by the absorbing condition.
struct AverageAcceleration {
    n: [usize; 3],
    c: Vec<f64>,
    /// `tau^2 / (4 h^2)`.
    beta: f64,
    mur: f64,
    prev: Vec<f64>,
    cur: Vec<f64>,
}

impl AverageAcceleration {
    fn new(grid: &Grid3, inv_c: Vec<f64>, tau: f64) -> Self {
        let len = grid.len();
        AverageAcceleration {
            n: grid.counts,
            c: inv_c.into_iter().map(|v| 1.0 / v).collect(),
            beta: tau * tau / (4.0 * grid.step * grid.step),
            mur: (tau - grid.step) / (tau + grid.step),
            prev: vec![0.0; len],
            cur: vec![0.0; len],
        }
    }

    fn for_interior(&self, mut f: impl FnMut(usize)) {
        let [nx, ny, nz] = self.n;
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                let row = nx * (j + ny * k);
                for idx in row + 1..row + nx - 1 {
                    f(idx);
                }
            }
        }
    }

    fn lap(&self, u: &[f64], idx: usize) -> f64 {
        let [nx, ny, _] = self.n;
        let sz = nx * ny;
        u[idx - 1] + u[idx + 1] + u[idx - nx] + u[idx + nx] + u[idx - sz] + u[idx + sz] - 6.0 * u[idx]
    }
}

impl Stepper for AverageAcceleration {
    fn current(&self) -> &[f64] {
        &self.cur
    }

    fn set_initial(&mut self, u1: Vec<f64>) {
        self.cur = u1;
    }

    fn step(&mut self) -> Result<f64> {
        let len = self.cur.len();
        // Boundary values from the absorbing condition, using an extrapolated
        // interior neighbor.
        let mut guess: Vec<f64> = self.cur.iter().zip(&self.prev).map(|(c, p)| 2.0 * c - p).collect();
        let mut next = guess.clone();
        apply_mur(&mut next, &self.cur, self.n, self.mur);

        let mut rhs = vec![0.0; len];
        self.for_interior(|idx| {
            let two_u_plus_prev: f64 = 2.0 * self.lap(&self.cur, idx) + self.lap(&self.prev, idx);
            rhs[idx] = self.c[idx] * (2.0 * self.cur[idx] - self.prev[idx]) + self.beta * two_u_plus_prev;
        });
        // Move known boundary contributions to the right-hand side.
        let mut boundary_only = vec![0.0; len];
        let mut is_interior = vec![false; len];
        self.for_interior(|idx| is_interior[idx] = true);
        for idx in 0..len {
            if !is_interior[idx] {
                boundary_only[idx] = next[idx];
            }
        }
        self.for_interior(|idx| rhs[idx] += self.beta * (self.lap(&boundary_only, idx) + 6.0 * boundary_only[idx]));

        // CG on interior unknowns: (c + 6 beta) x - beta * sum(neighbors) = rhs.
        let apply = |x: &[f64], out: &mut [f64]| {
            self.for_interior(|idx| {
                let mut s = 0.0;
                let [nx, ny, _] = self.n;
                let sz = nx * ny;
                for nb in [idx - 1, idx + 1, idx - nx, idx + nx, idx - sz, idx + sz] {
                    if is_interior[nb] {
                        s += x[nb];
                    }
                }
                out[idx] = (self.c[idx] + 6.0 * self.beta) * x[idx] - self.beta * s;
            });
        };
        for idx in 0..len {
            if !is_interior[idx] {
                guess[idx] = 0.0;
            }
        }
        let mut x = guess;
        let mut ax = vec![0.0; len];
        apply(&x, &mut ax);
        let mut r = vec![0.0; len];
        let mut z = vec![0.0; len];
        let mut rhs_norm = 0.0;
        self.for_interior(|idx| {
            r[idx] = rhs[idx] - ax[idx];
            z[idx] = r[idx] / (self.c[idx] + 6.0 * self.beta);
            rhs_norm += rhs[idx] * rhs[idx];
        });
        let rhs_norm = rhs_norm.sqrt().max(f64::MIN_POSITIVE);
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        for _ in 0..500 {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn <= 1e-12 * rhs_norm {
                break;
            }
            apply(&p, &mut ax);
            let pap: f64 = p.iter().zip(&ax).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return Err(Error::numerical("implicit step: operator not positive definite"));
            }
            let alpha = rz / pap;
            for i in 0..len {
                x[i] += alpha * p[i];
                r[i] -= alpha * ax[i];
            }
            self.for_interior(|idx| z[idx] = r[idx] / (self.c[idx] + 6.0 * self.beta));
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let b = rz_new / rz;
            rz = rz_new;
            for i in 0..len {
                p[i] = z[i] + b * p[i];
            }
        }
        for idx in 0..len {
            if !is_interior[idx] {
                x[idx] = next[idx];
            }
        }
        // Re-apply the absorbing update with the solved interior neighbors.
        apply_mur(&mut x, &self.cur, self.n, self.mur);
        self.prev = std::mem::replace(&mut self.cur, x);
        Ok(self.cur.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }
}

// ---------------------------------------------------------------------------
// Trace store

/// Entry of the trace-store manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceFileEntry {
    pub source_index: usize,
    pub file: String,
    /// `true` for the `q = 0` reference run.
    pub reference: bool,
    pub stop_time: f64,
    pub converged: bool,
    pub sha256: String,
}

/// JSON manifest accompanying the per-source binary trace files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceManifest {
    pub layout_ref: String,
    pub n_sources: usize,
    pub n_detectors: usize,
    pub phantom: String,
    pub config: DomainConfig,
    pub files: Vec<TraceFileEntry>,
}

pub const TRACE_MANIFEST: &str = "traces.json";

/// Writes one source's traces.
///
/// Layout (little-endian): `u64 source_index, f64 dt, u64 detector_count,
/// u64 sample_count`, then per detector `sample_count` values of `u` followed
/// by `sample_count` values of `∂_n u`.
pub fn write_trace_file(path: &Path, solve: &SourceSolve) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let nd = solve.traces.len();
    let ns = solve.traces.first().map_or(0, |t| t.samples_u.len());
    let dt = solve.traces.first().map_or(0.0, |t| t.dt);
    w.write_all(&(solve.source_index as u64).to_le_bytes())?;
    w.write_all(&dt.to_le_bytes())?;
    w.write_all(&(nd as u64).to_le_bytes())?;
    w.write_all(&(ns as u64).to_le_bytes())?;
    for t in &solve.traces {
        for v in t.samples_u.iter().chain(&t.samples_dnu) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_file(path: &Path) -> Result<Vec<WaveTrace>> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 32 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| -> [u8; 8] { bytes[8 * i..8 * i + 8].try_into().unwrap() };
    let source_index = u64::from_le_bytes(word(0)) as usize;
    let dt = f64::from_le_bytes(word(1));
    let nd = u64::from_le_bytes(word(2)) as usize;
    let ns = u64::from_le_bytes(word(3)) as usize;
    if bytes.len() != 32 + 16 * nd * ns {
        return Err(bad("payload size does not match header"));
    }
    let mut pos = 4;
    let mut next = |n: usize| -> Vec<f64> {
        let out = (0..n).map(|i| f64::from_le_bytes(word(pos + i))).collect();
        pos += n;
        out
    };
    Ok((0..nd)
        .map(|d| WaveTrace {
            source_index,
            detector_index: d,
            dt,
            samples_u: next(ns),
            samples_dnu: next(ns),
        })
        .collect())
}

pub(crate) fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Traces of every source, plus optional reference traces, in memory.
#[derive(Debug, Clone, Default)]
pub struct TraceStore {
    /// Indexed by source.
    pub traces: Vec<Option<Vec<WaveTrace>>>,
    pub reference: Vec<Option<Vec<WaveTrace>>>,
}

impl TraceStore {
    pub fn new(n_sources: usize) -> Self {
        TraceStore { traces: vec![None; n_sources], reference: vec![None; n_sources] }
    }

    pub fn insert(&mut self, solve: SourceSolve, reference: bool) {
        let slot = if reference { &mut self.reference } else { &mut self.traces };
        let i = solve.source_index;
        slot[i] = Some(solve.traces);
    }
}

/// Runs the forward stage for `sources` and writes traces plus manifest into
/// `out`. When the configuration asks for reference subtraction, the `q = 0`
/// run is stored alongside.
pub fn run_forward_to_dir(
    phantom: &Phantom,
    sources: &[usize],
    cfg: &DomainConfig,
    layout: &SourceDetectorLayout,
    out: &Path,
) -> Result<TraceManifest> {
    std::fs::create_dir_all(out)?;
    let mut jobs: Vec<(usize, bool)> = sources.iter().map(|&s| (s, false)).collect();
    if cfg.free_space == crate::geometry::FreeSpaceTerm::Reference {
        jobs.extend(sources.iter().map(|&s| (s, true)));
    }
    let zero = Phantom::zero(&phantom.q_field.grid);
    let entries: Vec<TraceFileEntry> = jobs
        .par_iter()
        .map(|&(s, reference)| -> Result<TraceFileEntry> {
            let ph = if reference { &zero } else { phantom };
            let solve = solve_wave(ph, s, cfg, layout)?;
            let name = format!("{}_{s:04}.bin", if reference { "ref" } else { "src" });
            let path: PathBuf = out.join(&name);
            write_trace_file(&path, &solve)?;
            Ok(TraceFileEntry {
                source_index: s,
                file: name,
                reference,
                stop_time: solve.stop_time,
                converged: solve.converged,
                sha256: file_sha256(&path)?,
            })
        })
        .collect::<Result<_>>()?;

    let manifest_path = out.join(TRACE_MANIFEST);
    let mut manifest = if manifest_path.exists() {
        let m: TraceManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if m.layout_ref != layout.layout_ref() {
            return Err(Error::config("existing trace manifest belongs to a different layout"));
        }
        m
    } else {
        TraceManifest {
            layout_ref: layout.layout_ref(),
            n_sources: layout.sources.len(),
            n_detectors: layout.detectors.len(),
            phantom: phantom.description.clone(),
            config: cfg.clone(),
            files: Vec::new(),
        }
    };
    for e in entries {
        manifest.files.retain(|f| !(f.source_index == e.source_index && f.reference == e.reference));
        manifest.files.push(e);
    }
    manifest.files.sort_by_key(|f| (f.reference, f.source_index));
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads every trace file listed in the manifest of `dir`, verifying digests.
pub fn load_trace_dir(dir: &Path) -> Result<(TraceManifest, TraceStore)> {
    let manifest: TraceManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(TRACE_MANIFEST))?)?;
    let mut store = TraceStore::new(manifest.n_sources);
    for e in &manifest.files {
        let path = dir.join(&e.file);
        if file_sha256(&path)? != e.sha256 {
            return Err(Error::Format { path, reason: "digest mismatch".into() });
        }
        let traces = read_trace_file(&path)?;
        let slot = if e.reference { &mut store.reference } else { &mut store.traces };
        slot[e.source_index] = Some(traces);
    }
    Ok((manifest, store))
}
