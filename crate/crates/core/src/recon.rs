//! Recovery of `q` from the QRM solution, test phantoms and quality metrics.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::forward::Phantom;
use crate::geometry::{DomainConfig, Grid3, MeasurementFace, ScalarField3, SourceDetectorLayout, Vec3};

/// Recovered coefficient before and after the nonnegativity clamp.
#[derive(Debug, Clone)]
pub struct Recovered {
    pub q: ScalarField3,
    pub q_pre_clamp: ScalarField3,
    pub clamped_nodes: usize,
}

/// First derivative along `axis` at `ijk`: centered inside, one-sided
/// second order on the faces.
fn d1(f: &ScalarField3, ijk: [usize; 3], axis: usize) -> f64 {
    let n = f.grid.counts[axis];
    let at = |i: usize| {
        let mut p = ijk;
        p[axis] = i;
        f.at(p[0], p[1], p[2])
    };
    let i = ijk[axis];
    let h = f.grid.step;
    if i == 0 {
        (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
    } else if i + 1 == n {
        (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
    } else {
        (at(i + 1) - at(i - 1)) / (2.0 * h)
    }
}

fn d2(f: &ScalarField3, ijk: [usize; 3], axis: usize) -> f64 {
    let n = f.grid.counts[axis];
    let at = |i: usize| {
        let mut p = ijk;
        p[axis] = i;
        f.at(p[0], p[1], p[2])
    };
    let i = ijk[axis];
    let h2 = f.grid.step * f.grid.step;
    if i == 0 {
        (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / h2
    } else if i + 1 == n {
        (2.0 * at(n - 1) - 5.0 * at(n - 2) + 4.0 * at(n - 3) - at(n - 4)) / h2
    } else {
        (at(i + 1) - 2.0 * at(i) + at(i - 1)) / h2
    }
}

/// `q = -[Δu - 2 ((x - x0) u_x + y u_y + ζ u_z) / r^2]` for
/// `u = Σ u_n Ψ_n(x0_eval)`, with the source at `(x0_eval, 0, z_src)`.
pub fn recover_q(
    u: &crate::system::VectorField,
    basis: &BasisSet,
    layout: &SourceDetectorLayout,
    x0_eval: f64,
) -> Result<Recovered> {
    let (psi, _) = basis.eval(x0_eval)?;
    let w = u.contract(&psi);
    let g = w.grid.clone();
    if g.counts.iter().any(|&c| c < 4) {
        return Err(Error::config("recovery needs at least 4 nodes per axis"));
    }
    let src = [x0_eval, 0.0, layout.source_z()];
    let mut pre = ScalarField3::zeros(&g);
    let mut bad = Vec::new();
    for idx in 0..g.len() {
        let ijk = g.ijk(idx);
        let p = g.node(ijk[0], ijk[1], ijk[2]);
        let s = [p[0] - src[0], p[1] - src[1], p[2] - src[2]];
        let r2 = s[0] * s[0] + s[1] * s[1] + s[2] * s[2];
        let lap: f64 = (0..3).map(|a| d2(&w, ijk, a)).sum();
        let adv: f64 = (0..3).map(|a| s[a] * d1(&w, ijk, a)).sum();
        let q = -(lap - 2.0 * adv / r2);
        if !q.is_finite() {
            bad.push(ijk);
        }
        pre.values[idx] = q;
    }
    if !bad.is_empty() {
        return Err(Error::numerical(format!(
            "non-finite derivatives at {} nodes, first {:?}",
            bad.len(),
            &bad[..bad.len().min(5)]
        )));
    }
    let clamped_nodes = pre.values.iter().filter(|&&v| v < 0.0).count();
    let q = ScalarField3 { grid: g, values: pre.values.iter().map(|&v| v.max(0.0)).collect() };
    Ok(Recovered { q, q_pre_clamp: pre, clamped_nodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Zero,
    Ball,
    ThreeBalls,
    DigitOne,
    LetterC,
    /// Smooth `cos²` bump of height 0.5.
    Bump,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "zero" => PhantomKind::Zero,
            "ball" => PhantomKind::Ball,
            "three_balls" => PhantomKind::ThreeBalls,
            "digit_one" => PhantomKind::DigitOne,
            "letter_c" => PhantomKind::LetterC,
            "bump" => PhantomKind::Bump,
            other => return Err(Error::config(format!("unknown phantom kind '{other}'"))),
        })
    }
}

pub const STROKE_WIDTH: f64 = 0.15;
/// Extent of the planar shapes along `z`.
pub const SHAPE_THICKNESS: f64 = 0.3;
pub const BALL_RADIUS: f64 = 0.2;
pub const THREE_BALL_RADIUS: f64 = 0.15;
pub const THREE_BALL_CENTERS: [Vec3; 3] = [[-0.35, -0.25, 0.0], [0.35, -0.25, 0.0], [0.0, 0.35, 0.0]];
pub const BUMP_RADIUS: f64 = 0.4;

/// Analytic description of a phantom; `value` is the contrast inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomShape {
    pub kind: PhantomKind,
    pub value: f64,
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / (ab[0] * ab[0] + ab[1] * ab[1])).clamp(0.0, 1.0);
    ((ap[0] - t * ab[0]).powi(2) + (ap[1] - t * ab[1]).powi(2)).sqrt()
}

/// Centerline of the digit in the `xy` plane; the bounding box of the stroked
/// shape is `[-0.25, 0.25] × [-0.35, 0.35]`.
fn digit_one_segments() -> Vec<([f64; 2], [f64; 2])> {
    let r = STROKE_WIDTH / 2.0;
    vec![([0.1, -0.35 + r], [0.1, 0.35 - r]), ([0.1, 0.35 - r], [-0.25 + r, 0.125])]
}

/// Elliptic arc open towards `+x`, 24 segments.
fn letter_c_segments() -> Vec<([f64; 2], [f64; 2])> {
    let r = STROKE_WIDTH / 2.0;
    let (ax, ay) = (0.25 - r, 0.35 - r);
    let (t0, t1) = (0.25 * std::f64::consts::PI, 1.75 * std::f64::consts::PI);
    let pts: Vec<[f64; 2]> = (0..=24)
        .map(|i| {
            let t = t0 + (t1 - t0) * i as f64 / 24.0;
            [ax * t.cos(), ay * t.sin()]
        })
        .collect();
    pts.windows(2).map(|w| (w[0], w[1])).collect()
}

impl PhantomShape {
    pub fn new(kind: PhantomKind) -> Self {
        let value = match kind {
            PhantomKind::Zero => 0.0,
            PhantomKind::ThreeBalls => 3.0,
            PhantomKind::Ball => 0.1,
            PhantomKind::Bump => 0.5,
            PhantomKind::DigitOne | PhantomKind::LetterC => 1.0,
        };
        PhantomShape { kind, value }
    }

    pub fn with_value(kind: PhantomKind, value: f64) -> Self {
        PhantomShape { kind, value }
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        let stroke = |segs: Vec<([f64; 2], [f64; 2])>| {
            if p[2].abs() > SHAPE_THICKNESS / 2.0 {
                return 0.0;
            }
            let d = segs.iter().map(|&(a, b)| segment_distance([p[0], p[1]], a, b)).fold(f64::INFINITY, f64::min);
            if d <= STROKE_WIDTH / 2.0 { self.value } else { 0.0 }
        };
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        match self.kind {
            PhantomKind::Zero => 0.0,
            PhantomKind::Ball => {
                if r <= BALL_RADIUS { self.value } else { 0.0 }
            }
            PhantomKind::Bump => {
                if r < BUMP_RADIUS {
                    self.value * (std::f64::consts::FRAC_PI_2 * r / BUMP_RADIUS).cos().powi(2)
                } else {
                    0.0
                }
            }
            PhantomKind::ThreeBalls => {
                let inside = THREE_BALL_CENTERS.iter().any(|c| {
                    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= THREE_BALL_RADIUS
                });
                if inside { self.value } else { 0.0 }
            }
            PhantomKind::DigitOne => stroke(digit_one_segments()),
            PhantomKind::LetterC => stroke(letter_c_segments()),
        }
    }

    /// Largest distance of the support from the origin along any axis.
    pub fn extent(&self) -> f64 {
        match self.kind {
            PhantomKind::Zero => 0.0,
            PhantomKind::Ball => BALL_RADIUS,
            PhantomKind::Bump => BUMP_RADIUS,
            PhantomKind::ThreeBalls => 0.35 + THREE_BALL_RADIUS,
            PhantomKind::DigitOne | PhantomKind::LetterC => 0.35,
        }
    }

    pub fn description(&self) -> String {
        format!("{:?} value {}", self.kind, self.value).to_lowercase()
    }
}

/// Samples a phantom on `grid`. The support must stay inside `Ω` at least two
/// inversion cells away from `∂Ω`.
pub fn make_phantom(kind: PhantomKind, cfg: &DomainConfig, grid: &Grid3) -> Result<Phantom> {
    make_phantom_shape(&PhantomShape::new(kind), cfg, grid)
}

pub fn make_phantom_shape(shape: &PhantomShape, cfg: &DomainConfig, grid: &Grid3) -> Result<Phantom> {
    if shape.extent() > cfg.half_width - 2.0 * cfg.inv_h + 1e-12 {
        return Err(Error::config(format!(
            "phantom extent {} leaves less than two cells inside Ω of half-width {}",
            shape.extent(),
            cfg.half_width
        )));
    }
    if !(shape.value >= 0.0) {
        return Err(Error::config("phantom contrast must be nonnegative"));
    }
    Phantom::new(ScalarField3::from_fn(grid, |p| shape.eval(p)), shape.description())
}

/// Connected components of `{f > threshold}` under 6-connectivity.
pub fn connected_components(f: &ScalarField3, threshold: f64) -> Vec<Vec<usize>> {
    let g = &f.grid;
    let mut seen = vec![false; g.len()];
    let mut out = Vec::new();
    for start in 0..g.len() {
        if seen[start] || f.values[start] <= threshold {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(idx) = queue.pop_front() {
            comp.push(idx);
            let ijk = g.ijk(idx);
            for axis in 0..3 {
                for delta in [-1i64, 1] {
                    let c = ijk[axis] as i64 + delta;
                    if c < 0 || c >= g.counts[axis] as i64 {
                        continue;
                    }
                    let mut p = ijk;
                    p[axis] = c as usize;
                    let nb = g.index(p[0], p[1], p[2]);
                    if !seen[nb] && f.values[nb] > threshold {
                        seen[nb] = true;
                        queue.push_back(nb);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Positive local maxima over the 26-neighbourhood (ties broken by index),
/// largest first, restricted to nodes accepted by `mask`.
pub fn local_maxima(f: &ScalarField3, mask: impl Fn(usize) -> bool) -> Vec<(usize, f64)> {
    let g = &f.grid;
    let mut out = Vec::new();
    for idx in 0..g.len() {
        let v = f.values[idx];
        if v <= 0.0 || !mask(idx) {
            continue;
        }
        let ijk = g.ijk(idx);
        let mut is_max = true;
        'nb: for dk in -1i64..=1 {
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let p = [ijk[0] as i64 + di, ijk[1] as i64 + dj, ijk[2] as i64 + dk];
                    if (0..3).any(|a| p[a] < 0 || p[a] >= g.counts[a] as i64) {
                        continue;
                    }
                    let nb = g.index(p[0] as usize, p[1] as usize, p[2] as usize);
                    if nb == idx || !mask(nb) {
                        continue;
                    }
                    let w = f.values[nb];
                    if w > v || (w == v && nb < idx) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
        }
        if is_max {
            out.push((idx, v));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// Whether node `idx` of `grid` lies within `cells` grid steps (Chebyshev
/// distance in nodes) of the support of `q_true`.
pub fn within_dilated_support(q_true: &ScalarField3, idx: usize, cells: usize) -> bool {
    let g = &q_true.grid;
    let ijk = g.ijk(idx);
    let lo = |a: usize| ijk[a].saturating_sub(cells);
    let hi = |a: usize| (ijk[a] + cells).min(g.counts[a] - 1);
    for k in lo(2)..=hi(2) {
        for j in lo(1)..=hi(1) {
            for i in lo(0)..=hi(0) {
                if q_true.at(i, j, k) > 0.0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Nodes of `Ω_ε`: `Ω` without the slab of thickness `ε` at the face opposite
/// the measurement face.
pub fn omega_eps_mask(grid: &Grid3, epsilon: f64, face: MeasurementFace) -> Vec<bool> {
    let zmax = grid.upper()[2];
    let zmin = grid.origin[2];
    let tol = 1e-9 * grid.step;
    (0..grid.len())
        .map(|idx| {
            let z = grid.coord(2, grid.ijk(idx)[2]);
            match face {
                MeasurementFace::Backscattering => z < zmax - epsilon - tol,
                MeasurementFace::Transmitted => z > zmin + epsilon + tol,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub peak_value: f64,
    pub peak_location: Vec3,
    /// `‖q_rec - q_true‖ / ‖q_true‖` on `Ω_ε`; absent when `q_true = 0` there.
    pub rel_l2_error: Option<f64>,
    pub l2_error: f64,
    /// Dice overlap of the half-peak sets.
    pub support_overlap: f64,
    pub epsilon: f64,
    pub nodes_in_omega_eps: usize,
}

pub fn compute_metrics(
    q_rec: &ScalarField3,
    q_true: &ScalarField3,
    epsilon: f64,
    face: MeasurementFace,
) -> Result<Metrics> {
    if q_rec.grid != q_true.grid {
        return Err(Error::config("metrics need both fields on the same grid"));
    }
    let g = &q_rec.grid;
    let mask = omega_eps_mask(g, epsilon, face);
    let (mut num, mut den, mut count) = (0.0, 0.0, 0);
    let (mut peak, mut peak_idx) = (f64::NEG_INFINITY, 0);
    let (mut peak_true, mut peak_rec_all) = (0.0f64, 0.0f64);
    for idx in (0..g.len()).filter(|&i| mask[i]) {
        let (r, t) = (q_rec.values[idx], q_true.values[idx]);
        num += (r - t) * (r - t);
        den += t * t;
        count += 1;
        if r > peak {
            peak = r;
            peak_idx = idx;
        }
        peak_true = peak_true.max(t);
        peak_rec_all = peak_rec_all.max(r);
    }
    if count == 0 {
        return Err(Error::config("Ω_ε contains no nodes"));
    }
    let set = |f: &ScalarField3, p: f64| -> Vec<bool> {
        (0..g.len()).map(|i| mask[i] && p > 0.0 && f.values[i] > 0.5 * p).collect()
    };
    let a = set(q_rec, peak_rec_all);
    let b = set(q_true, peak_true);
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    let dice = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
    let ijk = g.ijk(peak_idx);
    Ok(Metrics {
        peak_value: peak,
        peak_location: g.node(ijk[0], ijk[1], ijk[2]),
        rel_l2_error: if den > 0.0 { Some((num / den).sqrt()) } else { None },
        l2_error: (num * g.step.powi(3)).sqrt(),
        support_overlap: dice,
        epsilon,
        nodes_in_omega_eps: count,
    })
}

/// Header written next to raw volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub origin: Vec3,
    pub step: f64,
    pub counts: [usize; 3],
    /// Index order of the raw file.
    pub layout: String,
    pub dtype: String,
    pub description: String,
    pub sha256: String,
}

/// Writes `path` (little-endian f64, x fastest) and `path.json`.
pub fn write_volume(field: &ScalarField3, path: &Path, description: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * field.values.len());
    for v in &field.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &bytes)?;
    let header = VolumeHeader {
        origin: field.grid.origin,
        step: field.grid.step,
        counts: field.grid.counts,
        layout: "x_fastest".into(),
        dtype: "f64_le".into(),
        description: description.into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    fs::write(sidecar(path), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn read_volume(path: &Path) -> Result<(ScalarField3, VolumeHeader)> {
    let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    let bytes = fs::read(path)?;
    let format = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    if hex::encode(Sha256::digest(&bytes)) != header.sha256 {
        return Err(format("checksum mismatch".into()));
    }
    let grid = Grid3::new(header.origin, header.step, header.counts)?;
    if bytes.len() != 8 * grid.len() {
        return Err(format(format!("expected {} values, found {} bytes", grid.len(), bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((ScalarField3 { grid, values }, header))
}

/// Mid-plane slice normal to `axis` as CSV with columns of the other two
/// coordinates and the value.
pub fn slice_csv(field: &ScalarField3, axis: usize) -> String {
    let g = &field.grid;
    let mid = g.counts[axis] / 2;
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let names = ["x", "y", "z"];
    let mut s = format!("{},{},q\n", names[a], names[b]);
    for jb in 0..g.counts[b] {
        for ja in 0..g.counts[a] {
            let mut p = [0; 3];
            p[axis] = mid;
            p[a] = ja;
            p[b] = jb;
            s.push_str(&format!("{:.6},{:.6},{:.9e}\n", g.coord(a, ja), g.coord(b, jb), field.at(p[0], p[1], p[2])));
        }
    }
    s
}

/// Writes `<stem>.raw` with its header and the three mid-plane slices.
pub fn export_field(field: &ScalarField3, dir: &Path, stem: &str, description: &str) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = vec![format!("{stem}.raw"), format!("{stem}.raw.json")];
    write_volume(field, &dir.join(format!("{stem}.raw")), description)?;
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let file = format!("{stem}_slice_{name}.csv");
        let mut f = fs::File::create(dir.join(&file))?;
        f.write_all(slice_csv(field, axis).as_bytes())?;
        files.push(file);
    }
    Ok(files)
}
