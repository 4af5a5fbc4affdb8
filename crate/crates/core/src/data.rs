//! Boundary data `g0 = v|_S`, `g1 = ∂_n v|_S` of the integral equation.
//!
//! With `w(x, k) = ∫ u e^{ikt} dt`, the scattered part of `w` at order `k^2`
//! is `v / (4π)` exactly, while the same coefficient equals `-(1/2) ∫ t^2 u_sc dt`.
//! Hence
//!
//! ```text
//! g0 = -2π ∫ t^2 (u - u_free) dt,   g1 = -2π ∫ t^2 (∂_n u - ∂_n u_free) dt,
//! ```
//!
//! with `∫ t^2 u_free dt = |x - x0| / (4π)` for the point source.
//!
//! The scattered field has vanishing zeroth and first time moments, so `t^2`
//! may be replaced by `(t - T0)^2` for any `T0`. Recorded traces use
//! `T0 = |x - x0|`, which removes the large cancellation between the total
//! and free-space moments, and are integrated only until the first wave that
//! touched both `Ω` and the outer boundary can reach the detector. The weight
//! is rolled off smoothly there (see [`MomentWindow`]).

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{mollified_delta, Phantom, TraceStore, WaveTrace};
use crate::geometry::{dist, dot, sub, DomainConfig, FreeSpaceTerm, Grid3, SourceDetectorLayout, Vec3};

/// Where a data set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Fdtd,
    Oracle,
    File,
}

/// `g0`, `g1` for every (detector, source) pair; entry `d * n_sources + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryDataSet {
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub n_detectors: usize,
    pub n_sources: usize,
    pub layout_ref: String,
    pub provenance: Provenance,
    pub noise_delta: f64,
    pub noise_seed: Option<u64>,
}

/// JSON sidecar of the binary data file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataHeader {
    pub n_detectors: usize,
    pub n_sources: usize,
    pub layout_ref: String,
    pub provenance: Provenance,
    pub noise_delta: f64,
    pub noise_seed: Option<u64>,
    /// Noise draws are independent between `g0` and `g1`.
    pub noise_model: String,
    pub sha256: String,
}

impl BoundaryDataSet {
    pub fn zeros(layout: &SourceDetectorLayout, provenance: Provenance) -> Self {
        let n = layout.detectors.len() * layout.sources.len();
        BoundaryDataSet {
            g0: vec![0.0; n],
            g1: vec![0.0; n],
            n_detectors: layout.detectors.len(),
            n_sources: layout.sources.len(),
            layout_ref: layout.layout_ref(),
            provenance,
            noise_delta: 0.0,
            noise_seed: None,
        }
    }

    #[inline]
    pub fn g0(&self, detector: usize, source: usize) -> f64 {
        self.g0[detector * self.n_sources + source]
    }

    #[inline]
    pub fn g1(&self, detector: usize, source: usize) -> f64 {
        self.g1[detector * self.n_sources + source]
    }

    pub fn max_abs_g0(&self) -> f64 {
        self.g0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_g1(&self) -> f64 {
        self.g1.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multiplies both data arrays by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.g0.iter_mut().for_each(|v| *v *= s);
        out.g1.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn check_layout(&self, layout: &SourceDetectorLayout) -> Result<()> {
        if self.layout_ref != layout.layout_ref()
            || self.n_detectors != layout.detectors.len()
            || self.n_sources != layout.sources.len()
        {
            return Err(Error::config(format!(
                "data set belongs to layout {} but the configuration gives {}",
                self.layout_ref,
                layout.layout_ref()
            )));
        }
        Ok(())
    }

    /// Writes `path` (little-endian f64: all of `g0`, then all of `g1`) and
    /// `path.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 * self.g0.len());
        for v in self.g0.iter().chain(&self.g1) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, &bytes)?;
        let header = DataHeader {
            n_detectors: self.n_detectors,
            n_sources: self.n_sources,
            layout_ref: self.layout_ref.clone(),
            provenance: self.provenance,
            noise_delta: self.noise_delta,
            noise_seed: self.noise_seed,
            noise_model: "uniform[-1,1] per source, independent draws for g0 and g1".into(),
            sha256: sha256_hex(&bytes),
        };
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    /// Reads a data set written by [`BoundaryDataSet::write`]. The provenance
    /// recorded in memory becomes `file`.
    pub fn read(path: &Path) -> Result<Self> {
        let header: DataHeader = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        let bytes = std::fs::read(path)?;
        let n = header.n_detectors * header.n_sources;
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        if bytes.len() != 16 * n {
            return Err(bad("size does not match header"));
        }
        if sha256_hex(&bytes) != header.sha256 {
            return Err(bad("digest mismatch"));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite entries"));
        }
        Ok(BoundaryDataSet {
            g0: vals[..n].to_vec(),
            g1: vals[n..].to_vec(),
            n_detectors: header.n_detectors,
            n_sources: header.n_sources,
            layout_ref: header.layout_ref,
            provenance: Provenance::File,
            noise_delta: header.noise_delta,
            noise_seed: header.noise_seed,
        })
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Trapezoidal approximation of `∫_0^T t^2 p(t) dt` with `p` sampled at `k dt`.
pub fn time_moment(trace: &[f64], dt: f64) -> f64 {
    let n = trace.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for (k, &p) in trace.iter().enumerate() {
        let t = k as f64 * dt;
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        s += w * t * t * p;
    }
    s * dt
}

/// Free-space moments `∫ t^2 u_free dt` and `∫ t^2 ∂_n u_free dt` of the point source.
pub fn free_space_moments(x: Vec3, x0: Vec3, normal: Vec3) -> (f64, f64) {
    let r = dist(x, x0);
    let four_pi = 4.0 * std::f64::consts::PI;
    (r / four_pi, dot(normal, sub(x, x0)) / (r * four_pi))
}

/// Time weight for the moments of a recorded trace:
/// `(t - t0)^2` rolled off to zero by a `cos^2` taper ending at `t_end`, then
/// averaged against a Gaussian of width `smoothing`.
///
/// The average leaves `∫ (t - t0)^2 p dt` unchanged for any `p` with vanishing
/// zeroth moment, and it suppresses the grid-scale ringing that a plain cutoff
/// picks up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentWindow {
    pub t0: f64,
    pub t_end: f64,
    pub taper: f64,
    pub smoothing: f64,
}

impl MomentWindow {
    /// Plain `(t - t0)^2` up to `t_end`.
    pub fn sharp(t0: f64, t_end: f64) -> Self {
        MomentWindow { t0, t_end, taper: 0.0, smoothing: 0.0 }
    }

    /// Widths tied to the source pulse: the taper spans a few pulse widths and
    /// the smoothing a third of one.
    pub fn for_pulse(t0: f64, t_end: f64, eps: f64) -> Self {
        let w = eps.sqrt();
        MomentWindow { t0, t_end, taper: 3.4 * w, smoothing: w / 3.0 }
    }

    /// Time after which the weight is zero.
    pub fn support_end(&self) -> f64 {
        self.t_end + 4.0 * self.smoothing
    }

    /// Start of the taper minus the smoothing reach: before this time the
    /// weight is exactly `(t - t0)^2 + variance`.
    pub fn flat_end(&self) -> f64 {
        self.t_end - self.taper - 4.0 * self.smoothing
    }

    fn raw(&self, t: f64) -> f64 {
        let roll = if t >= self.t_end {
            0.0
        } else if t <= self.t_end - self.taper {
            1.0
        } else {
            let x = (t - (self.t_end - self.taper)) / self.taper;
            (0.5 * std::f64::consts::PI * x).cos().powi(2)
        };
        let s = t - self.t0;
        s * s * roll
    }

    /// Offsets and normalized Gaussian weights of the smoothing average.
    fn kernel(&self) -> Vec<(f64, f64)> {
        if self.smoothing <= 0.0 {
            return vec![(0.0, 1.0)];
        }
        const M: i32 = 24;
        let step = 4.0 * self.smoothing / M as f64;
        let mut k: Vec<(f64, f64)> = (-M..=M)
            .map(|j| {
                let tau = j as f64 * step;
                (tau, (-0.5 * (tau / self.smoothing).powi(2)).exp())
            })
            .collect();
        let total: f64 = k.iter().map(|p| p.1).sum();
        k.iter_mut().for_each(|p| p.1 /= total);
        k
    }

    /// Variance of the smoothing kernel.
    pub fn variance(&self) -> f64 {
        self.kernel().iter().map(|&(tau, g)| g * tau * tau).sum()
    }

    /// Weight at time `t`.
    pub fn weight(&self, t: f64) -> f64 {
        self.kernel().iter().map(|&(tau, g)| g * self.raw(t + tau)).sum()
    }

    /// Trapezoidal `∫ W(t) p(t) dt` with `p` sampled at `k dt`.
    pub fn moment(&self, trace: &[f64], dt: f64) -> f64 {
        let n = trace.len();
        if n < 2 {
            return 0.0;
        }
        let kernel = self.kernel();
        let last = ((self.support_end() / dt).ceil() as usize).min(n - 1);
        let mut s = 0.0;
        for (k, &p) in trace.iter().enumerate().take(last + 1) {
            let t = k as f64 * dt;
            let w: f64 = kernel.iter().map(|&(tau, g)| g * self.raw(t + tau)).sum();
            let end = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            s += end * w * p;
        }
        s * dt
    }
}

/// Free-space values of `∫ W u dt` and `∫ W ∂_n u dt` for the mollified source
/// centered at `x0`, by midpoint quadrature over its support. The direct pulse
/// must lie where `W = (t - t0)^2 + variance`; with `t0 = |x - x0|` and no
/// smoothing both values vanish for a point source.
pub fn free_space_window_moments(x: Vec3, x0: Vec3, normal: Vec3, eps: f64, window: &MomentWindow) -> (f64, f64) {
    let (t0, var) = (window.t0, window.variance());
    const M: usize = 24;
    let rad = eps.sqrt();
    let step = 2.0 * rad / M as f64;
    let (mut w, mut m0, mut m1) = (0.0, 0.0, 0.0);
    for i in 0..M {
        for j in 0..M {
            for k in 0..M {
                let off = [i, j, k].map(|n| -rad + (n as f64 + 0.5) * step);
                let xi = [x0[0] + off[0], x0[1] + off[1], x0[2] + off[2]];
                let f = mollified_delta(xi, x0, eps);
                if f == 0.0 {
                    continue;
                }
                let rho = dist(x, xi);
                let e = rho - t0;
                w += f;
                m0 += f * (e * e + var) / rho;
                // d/dρ [((ρ - t0)^2 + var) / ρ] along n.
                let drho = dot(normal, sub(x, xi)) / rho;
                m1 += f * (2.0 * e / rho - (e * e + var) / (rho * rho)) * drho;
            }
        }
    }
    let four_pi = 4.0 * std::f64::consts::PI;
    (m0 / (w * four_pi), m1 / (w * four_pi))
}

/// Mirror images of `p` across the six faces of the box `[lo, hi]^3`.
fn mirrors(p: Vec3, lo: Vec3, hi: Vec3) -> [Vec3; 6] {
    let mut out = [p; 6];
    for a in 0..3 {
        out[2 * a][a] = 2.0 * lo[a] - p[a];
        out[2 * a + 1][a] = 2.0 * hi[a] - p[a];
    }
    out
}

/// Earliest arrival at `x` of a wave from `x0` that both reflects once off the
/// box `[lo, hi]^3` and passes through one of `hits`, in either order.
pub fn reflection_free_time(x0: Vec3, x: Vec3, hits: &[Vec3], lo: Vec3, hi: Vec3) -> f64 {
    let src_img = mirrors(x0, lo, hi);
    let det_img = mirrors(x, lo, hi);
    let mut best = f64::INFINITY;
    for &xi in hits {
        let out_leg = det_img.iter().map(|&m| dist(xi, m)).fold(f64::INFINITY, f64::min);
        let in_leg = src_img.iter().map(|&m| dist(xi, m)).fold(f64::INFINITY, f64::min);
        best = best.min(dist(x0, xi) + out_leg).min(in_leg + dist(xi, x));
    }
    best
}

/// Surface nodes of a grid.
fn surface_nodes(g: &Grid3) -> Vec<Vec3> {
    let [nx, ny, nz] = g.counts;
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz {
                    out.push(g.node(i, j, k));
                }
            }
        }
    }
    out
}

/// Builds `g0`, `g1` from recorded traces.
///
/// With [`FreeSpaceTerm::Reference`] the stored `q = 0` run is subtracted
/// sample by sample; with [`FreeSpaceTerm::Analytic`] the free-space moments
/// of the mollified source are.
pub fn assemble_boundary_data(
    traces: &TraceStore,
    layout: &SourceDetectorLayout,
    cfg: &DomainConfig,
) -> Result<BoundaryDataSet> {
    let nd = layout.detectors.len();
    let ns = layout.sources.len();
    let use_reference = cfg.free_space == FreeSpaceTerm::Reference;

    let mut missing = Vec::new();
    fn lookup(set: &[Option<Vec<WaveTrace>>], s: usize, d: usize) -> Option<&WaveTrace> {
        set.get(s)?.as_ref()?.get(d)
    }
    for s in 0..ns {
        for d in 0..nd {
            let absent = lookup(&traces.traces, s, d).is_none()
                || (use_reference && lookup(&traces.reference, s, d).is_none());
            if absent {
                missing.push((d, s));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTraces(missing));
    }

    let phi = cfg.forward_grid()?;
    let lo = phi.origin;
    let hi = [0, 1, 2].map(|a| phi.coord(a, phi.counts[a] - 1));
    let hits = surface_nodes(&cfg.inversion_grid()?);
    // The pulse has width sqrt(eps) and the reflection is a grid face, not a plane.
    let guard = cfg.mollifier_eps.sqrt() + 2.0 * cfg.forward_h + cfg.inv_h;

    let two_pi = 2.0 * std::f64::consts::PI;
    let eps = cfg.mollifier_eps;
    let mut out = BoundaryDataSet::zeros(layout, Provenance::Fdtd);
    let (mut shortest, mut cut, mut crowded) = (f64::INFINITY, 0usize, 0usize);
    for d in 0..nd {
        for s in 0..ns {
            let (x, x0) = (layout.detectors[d], layout.sources[s]);
            let t = lookup(&traces.traces, s, d).unwrap();
            let mut n = t.samples_u.len();
            if use_reference {
                let r = lookup(&traces.reference, s, d).unwrap();
                if (r.dt - t.dt).abs() > 1e-12 * t.dt {
                    return Err(Error::config("reference traces use a different time step"));
                }
                n = n.min(r.samples_u.len());
            }
            let record = n.saturating_sub(1) as f64 * t.dt;
            let reflected = reflection_free_time(x0, x, &hits, lo, hi) - guard;
            let mut window = MomentWindow::for_pulse(dist(x, x0), reflected, eps);
            // Keep the smoothed weight inside the record.
            window.t_end = window.t_end.min(record - 4.0 * window.smoothing);
            if reflected < record {
                cut += 1;
            }
            // The direct pulse should end before the taper starts.
            if window.flat_end() < window.t0 + eps.sqrt() {
                crowded += 1;
            }
            shortest = shortest.min(window.t_end);
            let (m0, m1) = if use_reference {
                let r = lookup(&traces.reference, s, d).unwrap();
                let du: Vec<f64> = (0..n).map(|k| t.samples_u[k] - r.samples_u[k]).collect();
                let dn: Vec<f64> = (0..n).map(|k| t.samples_dnu[k] - r.samples_dnu[k]).collect();
                (window.moment(&du, t.dt), window.moment(&dn, t.dt))
            } else {
                let (f0, f1) = free_space_window_moments(x, x0, layout.face_normal, eps, &window);
                (window.moment(&t.samples_u, t.dt) - f0, window.moment(&t.samples_dnu, t.dt) - f1)
            };
            out.g0[d * ns + s] = -two_pi * m0;
            out.g1[d * ns + s] = -two_pi * m1;
        }
    }
    info!("time moments: {cut} of {} traces cut before outer reflections, shortest window {shortest:.2}", nd * ns);
    if crowded > 0 {
        warn!("{crowded} time windows end within a taper length of the direct pulse; enlarge phi_half_width or t_max");
    }
    if out.g0.iter().chain(&out.g1).any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite boundary data"));
    }
    Ok(out)
}

/// Data by direct quadrature of
/// `v(x, x0) = (1/4π) ∫ q(ξ) / (|x - ξ| |ξ - x0|) dξ`
/// (midpoint rule on the phantom grid) and of its analytic normal derivative.
pub fn direct_oracle_data(phantom: &Phantom, layout: &SourceDetectorLayout) -> Result<BoundaryDataSet> {
    let g = &phantom.q_field.grid;
    let cell = g.step.powi(3);
    let points: Vec<(Vec3, f64)> = phantom
        .q_field
        .values
        .iter()
        .enumerate()
        .filter(|(_, &q)| q != 0.0)
        .map(|(idx, &q)| {
            let [i, j, k] = g.ijk(idx);
            (g.node(i, j, k), q * cell)
        })
        .collect();
    oracle_from_points(&points, g.step, layout)
}

/// As [`direct_oracle_data`] on a grid refined `factor` times per axis, with
/// `q` taken from trilinear interpolation of the phantom.
pub fn direct_oracle_data_refined(
    phantom: &Phantom,
    layout: &SourceDetectorLayout,
    factor: usize,
) -> Result<BoundaryDataSet> {
    let g = &phantom.q_field.grid;
    let f = factor.max(1);
    let h = g.step / f as f64;
    let cell = h.powi(3);
    let upper = g.upper();
    let n: Vec<usize> = (0..3).map(|a| ((upper[a] - g.origin[a]) / h).round() as usize + 1).collect();
    let mut points = Vec::new();
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let p = [
                    g.origin[0] + i as f64 * h,
                    g.origin[1] + j as f64 * h,
                    g.origin[2] + k as f64 * h,
                ];
                let q = phantom.q_field.interpolate(p);
                if q != 0.0 {
                    points.push((p, q * cell));
                }
            }
        }
    }
    oracle_from_points(&points, g.step, layout)
}

/// Quadrature of the kernel for weighted points `(ξ, q(ξ) dξ)`.
pub fn oracle_from_points(
    points: &[(Vec3, f64)],
    min_distance: f64,
    layout: &SourceDetectorLayout,
) -> Result<BoundaryDataSet> {
    let ns = layout.sources.len();
    let n = layout.face_normal;
    for (d, x) in layout.detectors.iter().enumerate() {
        if points.iter().any(|(p, _)| dist(*p, *x) < min_distance * (1.0 - 1e-9)) {
            return Err(Error::config(format!(
                "detector {d} lies within {min_distance} of supp q; kernel too close to singular"
            )));
        }
    }
    let four_pi = 4.0 * std::f64::consts::PI;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = layout
        .detectors
        .par_iter()
        .map(|&x| {
            let mut g0 = vec![0.0; ns];
            let mut g1 = vec![0.0; ns];
            for &(xi, w) in points {
                let dx = sub(x, xi);
                let r1 = dot(dx, dx).sqrt();
                let kernel = w / (four_pi * r1);
                // ∂_n (1/|x - ξ|) = -n·(x - ξ)/|x - ξ|^3
                let dkernel = -w * dot(n, dx) / (four_pi * r1 * r1 * r1);
                for (s, x0) in layout.sources.iter().enumerate() {
                    let inv_r2 = 1.0 / dist(xi, *x0);
                    g0[s] += kernel * inv_r2;
                    g1[s] += dkernel * inv_r2;
                }
            }
            (g0, g1)
        })
        .collect();
    let mut out = BoundaryDataSet::zeros(layout, Provenance::Oracle);
    for (d, (g0, g1)) in rows.into_iter().enumerate() {
        out.g0[d * ns..(d + 1) * ns].copy_from_slice(&g0);
        out.g1[d * ns..(d + 1) * ns].copy_from_slice(&g1);
    }
    Ok(out)
}

/// Adds `delta * max|g| * ξ_s` with one uniform `ξ_s ∈ [-1, 1]` per source,
/// shared by all detectors, drawn independently for `g0` and `g1`.
pub fn add_noise(data: &BoundaryDataSet, delta: f64, seed: u64) -> Result<BoundaryDataSet> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::config(format!("noise level {delta} outside [0, 1)")));
    }
    let mut out = data.clone();
    if delta == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = data.n_sources;
    let xi0: Vec<f64> = (0..ns).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let xi1: Vec<f64> = (0..ns).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let (m0, m1) = (data.max_abs_g0(), data.max_abs_g1());
    for d in 0..data.n_detectors {
        for s in 0..ns {
            out.g0[d * ns + s] += delta * m0 * xi0[s];
            out.g1[d * ns + s] += delta * m1 * xi1[s];
        }
    }
    if data.noise_delta != 0.0 {
        warn!("adding noise to data that already carries noise level {}", data.noise_delta);
    }
    out.noise_delta = delta;
    out.noise_seed = Some(seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_layout, ScalarField3};

    #[test]
    fn moment_of_zero_and_unit_pulse() {
        assert_eq!(time_moment(&[0.0; 10], 0.1), 0.0);
        let dt = 1e-3;
        let p: Vec<f64> = (0..2001).map(|k| if k <= 1000 { 1.0 } else { 0.0 }).collect();
        // Trapezoid error from the jump is dt/2 * 1 at t = 1.
        assert!((time_moment(&p, dt) - 1.0 / 3.0).abs() < 1e-3);
        let p: Vec<f64> = (0..1001).map(|_| 1.0).collect();
        assert!((time_moment(&p, dt) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn moment_of_free_space_pulse() {
        // Smooth pulse of unit time-integral centered at t = r, amplitude 1/(4π r).
        let r = 5.0;
        let dt = 1e-3;
        let sigma = 0.05f64;
        let p: Vec<f64> = (0..10001)
            .map(|k| {
                let t = k as f64 * dt;
                (-(t - r).powi(2) / (2.0 * sigma * sigma)).exp()
                    / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                    / (4.0 * std::f64::consts::PI * r)
            })
            .collect();
        let m = time_moment(&p, dt);
        // ∫ t^2 pulse = (r^2 + sigma^2) / (4π r).
        let exact = (r * r + sigma * sigma) / (4.0 * std::f64::consts::PI * r);
        assert!((m - exact).abs() < 1e-9);
        assert!((m - 0.3979).abs() < 1e-4);
    }

    fn small_config() -> DomainConfig {
        DomainConfig {
            n_sources: 5,
            detector_grid: [4, 4],
            forward_h: 0.1,
            ..DomainConfig::desk()
        }
    }

    fn ball(cfg: &DomainConfig, radius: f64, value: f64) -> Phantom {
        let g = cfg.omega_grid(cfg.forward_h).unwrap();
        let f = ScalarField3::from_fn(&g, |p| if crate::geometry::norm(p) <= radius { value } else { 0.0 });
        Phantom::new(f, "ball").unwrap()
    }

    #[test]
    fn oracle_of_zero_phantom_is_zero() {
        let cfg = small_config();
        let layout = build_layout(&cfg).unwrap();
        let g = cfg.omega_grid(cfg.forward_h).unwrap();
        let d = direct_oracle_data(&Phantom::zero(&g), &layout).unwrap();
        assert!(d.g0.iter().chain(&d.g1).all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_matches_monopole_far_field() {
        let cfg = small_config();
        let layout = build_layout(&cfg).unwrap();
        let ph = ball(&cfg, 0.2, 1.0);
        let d = direct_oracle_data(&ph, &layout).unwrap();
        let g = &ph.q_field.grid;
        let volume = ph.q_field.values.iter().filter(|&&v| v > 0.0).count() as f64 * g.step.powi(3);
        for det in 0..layout.detectors.len() {
            for s in 0..layout.sources.len() {
                let r1 = crate::geometry::norm(layout.detectors[det]);
                let r2 = crate::geometry::norm(layout.sources[s]);
                let mono = volume / (4.0 * std::f64::consts::PI * r1 * r2);
                // Detectors are about 4 ball radii away: monopole within 5%.
                assert!((d.g0(det, s) - mono).abs() < 0.05 * mono);
            }
        }
    }

    #[test]
    fn oracle_refinement_converges_for_smooth_phantom() {
        let cfg = small_config();
        let layout = build_layout(&cfg).unwrap();
        let g = cfg.omega_grid(cfg.forward_h).unwrap();
        let f = ScalarField3::from_fn(&g, |p| {
            let r2 = crate::geometry::dot(p, p);
            if r2 < 0.25 {
                (1.0 - r2 / 0.25).powi(3)
            } else {
                0.0
            }
        });
        let ph = Phantom::new(f, "bump").unwrap();
        let a = direct_oracle_data(&ph, &layout).unwrap();
        let b = direct_oracle_data_refined(&ph, &layout, 2).unwrap();
        let c = direct_oracle_data_refined(&ph, &layout, 4).unwrap();
        let diff = |x: &BoundaryDataSet, y: &BoundaryDataSet| {
            x.g0.iter().zip(&y.g0).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())) / y.max_abs_g0()
        };
        assert!(diff(&a, &c) < 0.01);
        assert!(diff(&b, &c) < diff(&a, &c));
    }

    #[test]
    fn oracle_normal_derivative_matches_finite_difference() {
        let cfg = small_config();
        let layout = build_layout(&cfg).unwrap();
        let ph = ball(&cfg, 0.3, 1.0);
        let d = direct_oracle_data(&ph, &layout).unwrap();
        let eps = 1e-4;
        let shifted = |delta: f64| {
            let mut l = layout.clone();
            for p in &mut l.detectors {
                p[2] += delta * l.face_normal[2];
            }
            direct_oracle_data(&ph, &l).unwrap()
        };
        let (up, down) = (shifted(eps), shifted(-eps));
        for i in 0..d.g1.len() {
            let fd = (up.g0[i] - down.g0[i]) / (2.0 * eps);
            assert!((fd - d.g1[i]).abs() < 1e-6 * d.max_abs_g1());
        }
    }

    #[test]
    fn kernel_is_symmetric_in_its_arguments() {
        let cfg = small_config();
        let layout = build_layout(&cfg).unwrap();
        let ph = ball(&cfg, 0.3, 1.0);
        let x = [0.3, -0.2, -0.75];
        let x0 = [0.5, 0.0, -5.75];
        let one = |a: Vec3, b: Vec3| {
            let mut l = layout.clone();
            l.detectors = vec![a];
            l.sources = vec![b];
            direct_oracle_data(&ph, &l).unwrap().g0[0]
        };
        assert!((one(x, x0) - one(x0, x)).abs() < 1e-15);
    }

    #[test]
    fn oracle_rejects_detector_on_support() {
        let cfg = small_config();
        let mut layout = build_layout(&cfg).unwrap();
        layout.detectors[0] = [0.0, 0.0, 0.0];
        assert!(direct_oracle_data(&ball(&cfg, 0.3, 1.0), &layout).is_err());
    }

    fn synthetic(layout: &SourceDetectorLayout) -> BoundaryDataSet {
        let mut d = BoundaryDataSet::zeros(layout, Provenance::Oracle);
        for (i, v) in d.g0.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        for (i, v) in d.g1.iter_mut().enumerate() {
            *v = 3.0 * (i as f64 * 0.11).cos();
        }
        d
    }

    #[test]
    fn noise_is_bounded_deterministic_and_shared_per_source() {
        let layout = build_layout(&small_config()).unwrap();
        let d = synthetic(&layout);
        assert_eq!(add_noise(&d, 0.0, 1).unwrap(), d);
        let a = add_noise(&d, 0.05, 42).unwrap();
        let b = add_noise(&d, 0.05, 42).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&d, 0.05, 43).unwrap();
        assert_ne!(a.g0, c.g0);
        let m0 = d.max_abs_g0();
        let ns = d.n_sources;
        for i in 0..d.g0.len() {
            assert!((a.g0[i] - d.g0[i]).abs() <= 0.05 * m0 + 1e-15);
        }
        for s in 0..ns {
            let e0 = a.g0[s] - d.g0[s];
            for det in 1..d.n_detectors {
                assert!((a.g0[det * ns + s] - d.g0[det * ns + s] - e0).abs() < 1e-14);
            }
        }
        assert_eq!(a.layout_ref, d.layout_ref);
        assert!(add_noise(&d, 1.0, 0).is_err());
    }

    #[test]
    fn file_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let layout = build_layout(&small_config()).unwrap();
        let d = add_noise(&synthetic(&layout), 0.01, 7).unwrap();
        let p = dir.path().join("data.bin");
        d.write(&p).unwrap();
        let r = BoundaryDataSet::read(&p).unwrap();
        assert_eq!(r.g0, d.g0);
        assert_eq!(r.g1, d.g1);
        assert_eq!(r.provenance, Provenance::File);
        assert_eq!(r.noise_seed, Some(7));
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(BoundaryDataSet::read(&p).is_err());
    }

    #[test]
    fn missing_traces_are_listed() {
        let cfg = small_config();
        let layout = build_layout(&cfg).unwrap();
        let store = TraceStore::new(layout.sources.len());
        match assemble_boundary_data(&store, &layout, &cfg) {
            Err(Error::MissingTraces(v)) => assert_eq!(v.len(), 80),
            other => panic!("expected missing traces, got {other:?}"),
        }
    }

    #[test]
    fn data_is_affine_in_the_traces() {
        let cfg = DomainConfig { free_space: FreeSpaceTerm::Analytic, ..small_config() };
        let layout = build_layout(&cfg).unwrap();
        let ns = layout.sources.len();
        let mk = |scale: f64| {
            let mut store = TraceStore::new(ns);
            for s in 0..ns {
                let traces = (0..layout.detectors.len())
                    .map(|d| WaveTrace {
                        source_index: s,
                        detector_index: d,
                        dt: 0.1,
                        samples_u: (0..50).map(|k| scale * ((k + d + s) as f64 * 0.3).sin()).collect(),
                        samples_dnu: (0..50).map(|k| scale * ((k * s + d) as f64 * 0.1).cos()).collect(),
                    })
                    .collect();
                store.traces[s] = Some(traces);
            }
            assemble_boundary_data(&store, &layout, &cfg).unwrap()
        };
        let (one, two, zero) = (mk(1.0), mk(2.0), mk(0.0));
        for i in 0..one.g0.len() {
            // g(2p) - g(p) = g(p) - g(0)
            assert!(((two.g0[i] - one.g0[i]) - (one.g0[i] - zero.g0[i])).abs() < 1e-12);
            assert!(((two.g1[i] - one.g1[i]) - (one.g1[i] - zero.g1[i])).abs() < 1e-12);
        }
        // Zero traces leave only the free-space term, positive once smoothed.
        assert!(zero.g0.iter().all(|&v| v > 0.0 && v < 0.1));
    }

    /// Second derivative of a Gaussian: zero mass and zero first moment.
    fn balanced_pulse(dt: f64, c: f64, s: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| {
                let z = (k as f64 * dt - c) / s;
                (z * z - 1.0) * (-0.5 * z * z).exp()
            })
            .collect()
    }

    #[test]
    fn window_moment_agrees_for_pulses_without_low_moments() {
        let dt = 1e-3;
        let p = balanced_pulse(dt, 4.0, 0.3, 10001);
        let full = time_moment(&p, dt);
        assert!(full.abs() > 0.1);
        // Any shift, any taper or smoothing that leaves the pulse alone.
        for t0 in [0.0, 2.5, 4.0, 7.0] {
            let sharp = MomentWindow::sharp(t0, 8.0).moment(&p, dt);
            assert!((sharp - full).abs() < 1e-6, "t0 = {t0}");
            let soft = MomentWindow { t0, t_end: 8.5, taper: 2.0, smoothing: 0.2 }.moment(&p, dt);
            assert!((soft - full).abs() < 1e-6, "t0 = {t0}: {soft} vs {full}");
        }
        // A window past the record is clipped.
        let long = MomentWindow::sharp(0.0, 100.0).moment(&p, dt);
        assert!((long - full).abs() < 1e-12);
    }

    #[test]
    fn window_weight_is_the_shifted_square_before_the_taper() {
        let w = MomentWindow { t0: 3.0, t_end: 9.0, taper: 1.5, smoothing: 0.15 };
        let var = w.variance();
        assert!((var - 0.15f64.powi(2)).abs() < 1e-3 * var);
        for t in [0.0, 2.0, 3.0, 5.5, w.flat_end()] {
            assert!((w.weight(t) - ((t - 3.0).powi(2) + var)).abs() < 1e-10, "t = {t}");
        }
        assert!(w.weight(8.0) < (8.0 - 3.0f64).powi(2));
        assert_eq!(w.weight(w.support_end() + 1e-9), 0.0);
        // Without smoothing and taper it is the plain shifted moment.
        let ones = vec![1.0; 101];
        let m = MomentWindow::sharp(0.0, 2.0).moment(&ones, 0.01);
        assert!((m - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn free_space_window_moments_vanish_as_the_source_shrinks() {
        let (x, x0, n) = ([0.3, 0.2, -0.75], [0.0, 0.0, -5.75], [0.0, 0.0, -1.0]);
        let r = dist(x, x0);
        let w = MomentWindow::sharp(r, 2.0 * r);
        let big = free_space_window_moments(x, x0, n, 0.04, &w);
        let small = free_space_window_moments(x, x0, n, 0.0004, &w);
        assert!(big.0 > 0.0 && big.0 < 0.04 / r);
        assert!(small.0.abs() < big.0 / 50.0);
        assert!(small.1.abs() < big.1.abs() / 10.0 + 1e-12);
        // Smoothing adds variance / (4π r) to the value.
        let soft = MomentWindow { smoothing: 0.1, taper: 1.0, ..w };
        let extra = free_space_window_moments(x, x0, n, 0.0004, &soft).0 - small.0;
        let expected = soft.variance() / (4.0 * std::f64::consts::PI * r);
        assert!((extra - expected).abs() < 1e-3 * expected);
    }

    #[test]
    fn reflection_window_matches_a_single_wall() {
        // Only the face z = 1 is near; one hit point on the axis.
        let (lo, hi) = ([-1e3; 3], [1e3, 1e3, 1.0]);
        let t = reflection_free_time([0.0, 0.0, -2.0], [0.0, 0.0, -1.0], &[[0.0, 0.0, 0.0]], lo, hi);
        // Source to hit (2), then to the wall and back to the detector (1 + 2).
        assert!((t - 5.0).abs() < 1e-12);
    }
}
