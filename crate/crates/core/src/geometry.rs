//! Domain geometry, grids and the run configuration.
//!
//! The unknown coefficient lives in the cube `Ω = (-A, A)^3`. Point sources sit
//! on a line parallel to the x axis, `{(x0, 0, z_src) : -d <= x0 <= d}`, at a
//! fixed distance below the face `z = -A`. Measurements are taken either on
//! that face (backscattering) or on the opposite face `z = +A` (transmitted).
//!
//! All grids are aligned to the lattice `-A + k h` so that every face of `Ω`
//! is a grid plane for both the forward and the inversion discretizations.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Which face of `Ω` carries the Cauchy data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementFace {
    /// The face nearest to the source line (`z = -A`).
    Backscattering,
    /// The face opposite to the source line (`z = +A`).
    Transmitted,
}

impl MeasurementFace {
    /// z coordinate of the face.
    pub fn z(self, half_width: f64) -> f64 {
        match self {
            MeasurementFace::Backscattering => -half_width,
            MeasurementFace::Transmitted => half_width,
        }
    }

    /// Outward unit normal of `Ω` on this face.
    pub fn outward_normal(self) -> Vec3 {
        match self {
            MeasurementFace::Backscattering => [0.0, 0.0, -1.0],
            MeasurementFace::Transmitted => [0.0, 0.0, 1.0],
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            MeasurementFace::Backscattering => MeasurementFace::Transmitted,
            MeasurementFace::Transmitted => MeasurementFace::Backscattering,
        }
    }
}

/// Time integrator of the forward solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// Leap-frog, 7-point Laplacian. Requires `tau <= h / sqrt(3)`.
    Explicit,
    /// Average-acceleration (trapezoidal) scheme, one CG solve per step.
    Implicit,
}

/// How the incident (free-space) contribution is removed from the time moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeSpaceTerm {
    /// Subtract the closed-form moments `r / (4 pi)` and their normal derivative.
    Analytic,
    /// Subtract the moments of a `q = 0` run on the same grid.
    Reference,
}

/// Run configuration. The defaults are the full-scale experiment;
/// [`DomainConfig::desk`] gives a reduced profile that runs in
/// minutes on a workstation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    /// Half-width `A` of `Ω`.
    #[serde(rename = "A")]
    pub half_width: f64,
    /// Distance `b` between the source line and the face `z = -A`. Only the
    /// magnitude is used.
    pub source_offset: f64,
    /// Half-length of the source line.
    pub d: f64,
    /// Half-width of the simulation cube `Φ`.
    pub phi_half_width: f64,
    pub n_sources: usize,
    pub detector_grid: [usize; 2],
    pub forward_h: f64,
    pub forward_tau: f64,
    pub inv_h: f64,
    /// Number of basis functions in the `x0` expansion.
    #[serde(rename = "N")]
    pub n_basis: usize,
    pub gamma: f64,
    pub measurement_face: MeasurementFace,
    /// Width parameter of the mollified point source.
    pub mollifier_eps: f64,
    /// Forward integration stops once `max |u| <= stop_threshold`.
    pub stop_threshold: f64,
    /// Hard cap on the forward integration time.
    pub t_max: f64,
    pub scheme: TimeScheme,
    pub free_space: FreeSpaceTerm,
    /// Thickness of the slab next to the far face excluded from the metrics.
    pub omega_eps: f64,
    /// Leave the normal derivative of `V` free on the face opposite to the
    /// measurement face.
    pub free_far_neumann: bool,
    /// Source position used when recovering `q` from the expansion.
    pub x0_eval: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            half_width: 0.75,
            source_offset: 5.0,
            d: 1.0,
            phi_half_width: 10.0,
            n_sources: 101,
            detector_grid: [10, 10],
            forward_h: 1.0 / 20.0,
            forward_tau: 1.0 / 100.0,
            inv_h: 1.0 / 10.0,
            n_basis: 6,
            gamma: 0.0,
            measurement_face: MeasurementFace::Backscattering,
            mollifier_eps: 0.05,
            stop_threshold: 1e-3,
            t_max: 20.0,
            scheme: TimeScheme::Explicit,
            free_space: FreeSpaceTerm::Reference,
            omega_eps: 0.15,
            free_far_neumann: false,
            x0_eval: 0.0,
        }
    }
}

impl DomainConfig {
    /// Reduced profile: coarser forward grid, smaller `Φ`, fewer sources and
    /// detectors than the full-scale defaults.
    pub fn desk() -> Self {
        DomainConfig {
            // Far enough from the source line that outer reflections reach
            // Ω only after the scattered pulse has passed the detectors.
            phi_half_width: 6.0,
            n_sources: 21,
            detector_grid: [6, 6],
            forward_h: 0.1,
            forward_tau: 0.04,
            // Same number of cells across the source as the full profile.
            mollifier_eps: 0.2,
            t_max: 11.0,
            ..DomainConfig::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: DomainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Source line distance from `Ω`.
    pub fn source_distance(&self) -> f64 {
        self.source_offset.abs()
    }

    /// z coordinate of the source line.
    pub fn source_z(&self) -> f64 {
        -self.half_width - self.source_distance()
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.half_width;
        let positive = [
            ("A", a),
            ("d", self.d),
            ("forward_h", self.forward_h),
            ("forward_tau", self.forward_tau),
            ("inv_h", self.inv_h),
            ("mollifier_eps", self.mollifier_eps),
            ("stop_threshold", self.stop_threshold),
            ("t_max", self.t_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.source_distance() > 0.0) {
            return Err(Error::config("source line must lie strictly outside Ω (source_offset != 0)"));
        }
        if !(self.phi_half_width > a) {
            return Err(Error::config("phi_half_width must exceed A"));
        }
        if self.n_sources < 2 {
            return Err(Error::config("n_sources must be at least 2"));
        }
        if self.detector_grid.iter().any(|&n| n < 2) {
            return Err(Error::config("detector grid needs at least 2 detectors per axis"));
        }
        if self.n_basis < 1 {
            return Err(Error::config("N must be at least 1"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma must be nonnegative"));
        }
        if !(self.omega_eps >= 0.0 && self.omega_eps < 2.0 * a) {
            return Err(Error::config("omega_eps must lie in [0, 2A)"));
        }
        if self.x0_eval.abs() >= self.d {
            return Err(Error::config("x0_eval must lie inside (-d, d)"));
        }
        lattice_count(2.0 * a, self.inv_h).ok_or_else(|| {
            Error::config(format!("inv_h = {} does not divide 2A = {}", self.inv_h, 2.0 * a))
        })?;
        lattice_count(2.0 * a, self.forward_h).ok_or_else(|| {
            Error::config(format!("forward_h = {} does not divide 2A = {}", self.forward_h, 2.0 * a))
        })?;
        Ok(())
    }

    /// Grid on `Ω` (faces included) with step `inv_h`.
    pub fn inversion_grid(&self) -> Result<Grid3> {
        self.omega_grid(self.inv_h)
    }

    /// Grid on `Ω` (faces included) with the given step, which must divide `2A`.
    pub fn omega_grid(&self, step: f64) -> Result<Grid3> {
        let a = self.half_width;
        let cells = lattice_count(2.0 * a, step)
            .ok_or_else(|| Error::config(format!("step {step} does not divide 2A = {}", 2.0 * a)))?;
        Grid3::new([-a, -a, -a], step, [cells + 1; 3])
    }

    /// Margin kept between the source support and the boundary of `Φ`, and
    /// between `Ω` and that boundary.
    fn phi_margin(&self) -> f64 {
        self.mollifier_eps.sqrt() + 4.0 * self.forward_h
    }

    /// Grid covering `Φ`, aligned with the faces of `Ω`.
    ///
    /// `Φ` is centered at the origin when that leaves the source line and `Ω`
    /// inside with the required margin; otherwise it is shifted along z to the
    /// middle of the admissible range of centers.
    pub fn forward_grid(&self) -> Result<Grid3> {
        self.validate()?;
        let a = self.half_width;
        let h = self.forward_h;
        let big = self.phi_half_width;
        let m = self.phi_margin();
        if big < self.d.max(a) + m {
            return Err(Error::config(format!(
                "phi_half_width {big} too small to hold the source line and Ω with margin {m:.3}"
            )));
        }
        let z_src = self.source_z();
        let lo = a + m - big;
        let hi = z_src - m + big;
        if lo > hi {
            return Err(Error::config(format!(
                "Φ of half-width {big} cannot contain both Ω and the source line at z = {z_src}"
            )));
        }
        let zc = if lo <= 0.0 && 0.0 <= hi { 0.0 } else { 0.5 * (lo + hi) };
        let snap_lo = |x: f64| ((x + a) / h + 1e-9).floor() as i64;
        let snap_hi = |x: f64| ((x + a) / h - 1e-9).ceil() as i64;
        let kx = (snap_lo(-big), snap_hi(big));
        let kz = (snap_lo(zc - big), snap_hi(zc + big));
        let node = |k: i64| -a + k as f64 * h;
        Grid3::new(
            [node(kx.0), node(kx.0), node(kz.0)],
            h,
            [(kx.1 - kx.0 + 1) as usize, (kx.1 - kx.0 + 1) as usize, (kz.1 - kz.0 + 1) as usize],
        )
    }
}

/// Number of cells of width `step` in `length`, if it is (numerically) an integer.
fn lattice_count(length: f64, step: f64) -> Option<usize> {
    let r = length / step;
    let n = r.round();
    ((r - n).abs() < 1e-8 * r.max(1.0) && n >= 1.0).then_some(n as usize)
}

/// Regular 3D grid. Node `(i, j, k)` sits at `origin + (i, j, k) * step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub origin: Vec3,
    pub step: f64,
    pub counts: [usize; 3],
}

impl Grid3 {
    pub fn new(origin: Vec3, step: f64, counts: [usize; 3]) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::config("grid step must be positive"));
        }
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::config("grid needs at least 2 nodes per axis"));
        }
        Ok(Grid3 { origin, step, counts })
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.counts[0] * (j + self.counts[1] * k)
    }

    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.counts[0];
        let r = idx / self.counts[0];
        [i, r % self.counts[1], r / self.counts[1]]
    }

    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.step
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [self.coord(0, i), self.coord(1, j), self.coord(2, k)]
    }

    /// Index of the node whose coordinate along `axis` equals `x`, if any.
    pub fn find_plane(&self, axis: usize, x: f64) -> Option<usize> {
        let r = (x - self.origin[axis]) / self.step;
        let k = r.round();
        ((r - k).abs() < 1e-6 && k >= 0.0 && (k as usize) < self.counts[axis]).then_some(k as usize)
    }

    /// Upper corner of the grid.
    pub fn upper(&self) -> Vec3 {
        [
            self.coord(0, self.counts[0] - 1),
            self.coord(1, self.counts[1] - 1),
            self.coord(2, self.counts[2] - 1),
        ]
    }

    /// Short content hash used as a cache key.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.origin {
            h.update(v.to_le_bytes());
        }
        h.update(self.step.to_le_bytes());
        for c in self.counts {
            h.update((c as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Scalar function sampled on the nodes of a [`Grid3`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField3 {
    pub grid: Grid3,
    pub values: Vec<f64>,
}

impl ScalarField3 {
    pub fn zeros(grid: &Grid3) -> Self {
        ScalarField3 { grid: grid.clone(), values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: &Grid3, f: impl Fn(Vec3) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|idx| {
                let [i, j, k] = grid.ijk(idx);
                f(grid.node(i, j, k))
            })
            .collect();
        ScalarField3 { grid: grid.clone(), values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.index(i, j, k)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Trilinear interpolation; points outside the grid are clamped to it.
    pub fn interpolate(&self, p: Vec3) -> f64 {
        let g = &self.grid;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let r = ((p[a] - g.origin[a]) / g.step).clamp(0.0, (g.counts[a] - 1) as f64);
            let i = (r.floor() as usize).min(g.counts[a] - 2);
            base[a] = i;
            frac[a] = r - i as f64;
        }
        let mut acc = 0.0;
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
                    if w != 0.0 {
                        acc += w * self.at(base[0] + di, base[1] + dj, base[2] + dk);
                    }
                }
            }
        }
        acc
    }
}

/// Source and detector positions for one measurement configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDetectorLayout {
    /// Points on the source line, ordered by increasing `x0`.
    pub sources: Vec<Vec3>,
    /// Detector points on the measurement face, x-index fastest.
    pub detectors: Vec<Vec3>,
    pub detector_dims: [usize; 2],
    /// Outward normal of `Ω` on the measurement face.
    pub face_normal: Vec3,
    pub face: MeasurementFace,
    pub half_width: f64,
    pub d: f64,
}

impl SourceDetectorLayout {
    /// `x0` coordinates of the sources.
    pub fn source_x0(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s[0]).collect()
    }

    pub fn source_z(&self) -> f64 {
        self.sources[0][2]
    }

    /// 1D detector coordinates along x (`axis = 0`) or y (`axis = 1`).
    pub fn detector_axis(&self, axis: usize) -> Vec<f64> {
        let [nx, ny] = self.detector_dims;
        match axis {
            0 => (0..nx).map(|i| self.detectors[i][0]).collect(),
            _ => (0..ny).map(|j| self.detectors[j * nx][1]).collect(),
        }
    }

    /// Content hash identifying the layout.
    pub fn layout_ref(&self) -> String {
        let mut h = Sha256::new();
        for p in self.sources.iter().chain(self.detectors.iter()) {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        for v in self.face_normal {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// True when every detector coincides with a node of `grid`.
    pub fn detectors_on_nodes(&self, grid: &Grid3) -> bool {
        self.detectors
            .iter()
            .all(|p| (0..3).all(|a| grid.find_plane(a, p[a]).is_some()))
    }
}

/// Places the sources and detectors for `cfg`.
///
/// Sources are equispaced on `[-d, d]` including both endpoints, at
/// `y = 0`, `z = -A - b`. Detectors form a uniform grid on the measurement
/// face including its edges.
pub fn build_layout(cfg: &DomainConfig) -> Result<SourceDetectorLayout> {
    cfg.validate()?;
    // Φ must hold the whole source line.
    cfg.forward_grid()?;
    let a = cfg.half_width;
    let z_src = cfg.source_z();
    if z_src >= -a {
        return Err(Error::config("source line intersects Ω"));
    }
    let ns = cfg.n_sources;
    let sources = (0..ns)
        .map(|i| [-cfg.d + 2.0 * cfg.d * i as f64 / (ns - 1) as f64, 0.0, z_src])
        .collect();
    let [nx, ny] = cfg.detector_grid;
    let zf = cfg.measurement_face.z(a);
    let mut detectors = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = -a + 2.0 * a * i as f64 / (nx - 1) as f64;
            let y = -a + 2.0 * a * j as f64 / (ny - 1) as f64;
            detectors.push([x, y, zf]);
        }
    }
    Ok(SourceDetectorLayout {
        sources,
        detectors,
        detector_dims: [nx, ny],
        face_normal: cfg.measurement_face.outward_normal(),
        face: cfg.measurement_face,
        half_width: a,
        d: cfg.d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_layout_has_101_sources_spaced_002() {
        let cfg = DomainConfig::default();
        let layout = build_layout(&cfg).unwrap();
        assert_eq!(layout.sources.len(), 101);
        let x0 = layout.source_x0();
        for w in x0.windows(2) {
            assert!((w[1] - w[0] - 0.02).abs() < 1e-12);
        }
        assert!(layout.sources.iter().all(|s| s[1] == 0.0 && s[2] == -5.75));
    }

    #[test]
    fn two_sources_sit_at_the_endpoints() {
        let cfg = DomainConfig { n_sources: 2, ..DomainConfig::desk() };
        let layout = build_layout(&cfg).unwrap();
        assert_eq!(layout.source_x0(), vec![-1.0, 1.0]);
    }

    #[test]
    fn backscattering_detectors_lie_on_the_near_face() {
        let cfg = DomainConfig::default();
        let layout = build_layout(&cfg).unwrap();
        assert_eq!(layout.detectors.len(), 100);
        assert!(layout.detectors.iter().all(|p| p[2] == -0.75));
        assert_eq!(layout.face_normal, [0.0, 0.0, -1.0]);
        let near = layout.detectors[0][2] - layout.source_z();
        let tr = build_layout(&DomainConfig { measurement_face: MeasurementFace::Transmitted, ..cfg }).unwrap();
        assert!(tr.detectors.iter().all(|p| p[2] == 0.75));
        assert!(tr.detectors[0][2] - tr.source_z() > near);
    }

    #[test]
    fn negative_offset_keeps_distance() {
        let cfg = DomainConfig { source_offset: -5.0, ..DomainConfig::default() };
        assert_eq!(cfg.source_z(), -5.75);
        assert!(build_layout(&cfg).is_ok());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = DomainConfig::desk();
        assert!(build_layout(&DomainConfig { source_offset: 0.0, ..base.clone() }).is_err());
        assert!(build_layout(&DomainConfig { n_sources: 1, ..base.clone() }).is_err());
        assert!(build_layout(&DomainConfig { phi_half_width: 0.5, ..base.clone() }).is_err());
        assert!(build_layout(&DomainConfig { phi_half_width: 2.0, ..base.clone() }).is_err());
        assert!(build_layout(&DomainConfig { inv_h: 0.07, ..base.clone() }).is_err());
        assert!(build_layout(&DomainConfig { gamma: -1.0, ..base }).is_err());
    }

    #[test]
    fn grids_align_with_omega_faces() {
        for cfg in [DomainConfig::default(), DomainConfig::desk()] {
            let fg = cfg.forward_grid().unwrap();
            for z in [-0.75, 0.75, cfg.source_z()] {
                assert!(fg.find_plane(2, z).is_some(), "z = {z}");
            }
            assert!(fg.find_plane(0, -0.75).is_some());
            let ig = cfg.inversion_grid().unwrap();
            assert_eq!(ig.counts, [16, 16, 16]);
            assert_eq!(ig.upper(), [0.75, 0.75, 0.75]);
        }
    }

    #[test]
    fn desk_phi_is_shifted_to_hold_the_sources() {
        let cfg = DomainConfig::desk();
        let g = cfg.forward_grid().unwrap();
        assert!(g.origin[2] < cfg.source_z() - 0.5);
        assert!(g.upper()[2] > 0.75 + 0.5);
        let full = DomainConfig::default().forward_grid().unwrap();
        assert!((full.origin[2] + 10.0).abs() < 0.051);
    }

    #[test]
    fn detectors_on_nodes_when_spacing_divides() {
        let cfg = DomainConfig::desk();
        let layout = build_layout(&cfg).unwrap();
        assert!(layout.detectors_on_nodes(&cfg.inversion_grid().unwrap()));
        let full = build_layout(&DomainConfig::default()).unwrap();
        assert!(!full.detectors_on_nodes(&cfg.inversion_grid().unwrap()));
    }

    #[test]
    fn node_coordinates_have_no_drift() {
        let g = Grid3::new([-0.75; 3], 0.1, [16; 3]).unwrap();
        assert_eq!(g.coord(0, 15), -0.75 + 15.0 * 0.1);
        let idx = g.index(3, 7, 11);
        assert_eq!(g.ijk(idx), [3, 7, 11]);
    }

    #[test]
    fn trilinear_interpolation_is_exact_for_linear_fields() {
        let g = Grid3::new([0.0; 3], 0.5, [4, 5, 3]).unwrap();
        let f = ScalarField3::from_fn(&g, |p| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2]);
        let p = [0.3, 1.7, 0.9];
        assert!((f.interpolate(p) - (1.0 + 0.6 - 1.7 + 0.45)).abs() < 1e-12);
    }

    #[test]
    fn config_json_round_trip_uses_spec_names() {
        let cfg = DomainConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"A\":0.75") && text.contains("\"N\":6"));
        let back: DomainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: DomainConfig = serde_json::from_str(r#"{"N": 4}"#).unwrap();
        assert_eq!(partial.n_basis, 4);
        assert_eq!(partial.n_sources, 101);
        assert!(serde_json::from_str::<DomainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
