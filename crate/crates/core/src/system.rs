//! Reduction of the integral equation to a coupled elliptic system for the
//! Fourier coefficients of `u(x, x0) = v(x, x0) |x - x0|` in `x0`.
//!
//! Since `Δ_x v = -q(x) / |x - x0|`, the function `u` satisfies
//!
//! ```text
//! q(x) = -[Δu - 2 ((x - x0) u_x + y u_y + ζ u_z) / r^2],   ζ = z - z_src,
//! ```
//!
//! for every source. The right side is independent of `x0`, so its `x0`
//! derivative vanishes. Inserting `u = Σ u_n(x) Ψ_n(x0)` and projecting onto
//! `Ψ_m` gives
//!
//! ```text
//! M ΔU - 2 B U_x - 2 y C U_y - 2 ζ C U_z = 0,
//! B_mn = ∫ ∂_x0[Ψ_n (x - x0) / r^2] Ψ_m dx0,   C_mn = ∫ ∂_x0[Ψ_n / r^2] Ψ_m dx0,
//! ```
//!
//! and after multiplication by `M^{-1}`:
//! `ΔU + A1 U_x + A2 U_y + A3 U_z + A0 U = 0` with `A0 = 0`.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::data::BoundaryDataSet;
use crate::error::{Error, Result};
use crate::geometry::{dist, dot, sub, DomainConfig, Grid3, MeasurementFace, ScalarField3, SourceDetectorLayout};
use crate::interp::{tensor_spline, CubicSpline};

/// Row-major `N × N` matrix.
pub type SmallMat = Vec<f64>;

/// Per-node coefficient matrices of the reduced system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientMatrices {
    pub grid: Grid3,
    pub n: usize,
    /// Coefficients of `U_x`, `U_y`, `U_z`, `U` at every node.
    pub a1: Vec<SmallMat>,
    pub a2: Vec<SmallMat>,
    pub a3: Vec<SmallMat>,
    pub a0: Vec<SmallMat>,
}

impl CoefficientMatrices {
    /// Largest entry magnitude over all nodes and matrices.
    pub fn max_entry(&self) -> f64 {
        self.a1
            .iter()
            .chain(&self.a2)
            .chain(&self.a3)
            .chain(&self.a0)
            .flat_map(|m| m.iter())
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// `N` scalar fields on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub components: Vec<ScalarField3>,
}

impl VectorField {
    pub fn zeros(grid: &Grid3, n: usize) -> Self {
        VectorField { components: vec![ScalarField3::zeros(grid); n] }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.components[0].grid
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    /// Component-wise `self + other`.
    pub fn add(&self, other: &VectorField) -> VectorField {
        VectorField {
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| ScalarField3 {
                    grid: a.grid.clone(),
                    values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
                })
                .collect(),
        }
    }

    /// `Σ_n u_n Ψ_n(x0)` for basis values `psi`.
    pub fn contract(&self, psi: &[f64]) -> ScalarField3 {
        let mut out = ScalarField3::zeros(self.grid());
        for (c, &p) in self.components.iter().zip(psi) {
            for (o, v) in out.values.iter_mut().zip(&c.values) {
                *o += p * v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.is_finite())
    }
}

/// A face of the cube `Ω`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Face {
    XLow,
    XHigh,
    YLow,
    YHigh,
    ZLow,
    ZHigh,
}

/// Fourier coefficients of the Cauchy data at the detectors.
#[derive(Debug, Clone)]
pub struct BoundaryVectors {
    pub face: MeasurementFace,
    /// Detector coordinates along x and y.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `phi0[d][n]`: coefficients of `u` at detector `d`.
    pub phi0: Vec<Vec<f64>>,
    /// `phi1[d][n]`: coefficients of `∂_n u` at detector `d`.
    pub phi1: Vec<Vec<f64>>,
    /// Faces on which `∂_n U = 0` is imposed.
    pub zero_neumann_faces: Vec<Face>,
    /// Per detector, max over sources of `|u - Σ u_n Ψ_n| / max|u|`.
    pub truncation_residual: Vec<f64>,
}

/// Faces other than the measurement face, which carry `∂_n U = 0`.
pub fn zero_neumann_faces(face: MeasurementFace) -> Vec<Face> {
    let measured = match face {
        MeasurementFace::Backscattering => Face::ZLow,
        MeasurementFace::Transmitted => Face::ZHigh,
    };
    [Face::XLow, Face::XHigh, Face::YLow, Face::YHigh, Face::ZLow, Face::ZHigh]
        .into_iter()
        .filter(|f| *f != measured)
        .collect()
}

/// Projects the data onto the basis at every detector.
///
/// `u = g0 |x - x0|` and `∂_n u = g1 |x - x0| + g0 ∂_n|x - x0|` are known at
/// the source samples; they are interpolated in `x0` by a natural cubic spline
/// and integrated against `Ψ_n` with the basis quadrature rule.
pub fn project_boundary_data(
    data: &BoundaryDataSet,
    basis: &BasisSet,
    layout: &SourceDetectorLayout,
) -> Result<BoundaryVectors> {
    data.check_layout(layout)?;
    let ns = layout.sources.len();
    let x0s = layout.source_x0();
    if (x0s[0] + basis.d).abs() > 1e-9 || (x0s[ns - 1] - basis.d).abs() > 1e-9 {
        return Err(Error::config("source line does not span the basis interval [-d, d]"));
    }
    if ns < 2 * basis.n {
        warn!(
            "{ns} source samples for N = {}: expect aliasing in the x0 projection (sample spacing {:.3})",
            basis.n,
            2.0 * basis.d / (ns - 1) as f64
        );
    }
    let psi_at_nodes: Vec<Vec<f64>> = basis.quad_nodes.iter().map(|&x| basis.eval_unchecked(x).0).collect();
    let psi_at_samples: Vec<Vec<f64>> = x0s.iter().map(|&x| basis.eval_unchecked(x).0).collect();
    let project = |samples: &[f64]| -> Result<Vec<f64>> {
        let spline = CubicSpline::new(&x0s, samples)?;
        let mut c = vec![0.0; basis.n];
        for ((&x, &w), psi) in basis.quad_nodes.iter().zip(&basis.quad_weights).zip(&psi_at_nodes) {
            let f = spline.eval(x);
            for (cn, p) in c.iter_mut().zip(psi) {
                *cn += w * f * p;
            }
        }
        Ok(c)
    };
    let normal = layout.face_normal;
    let mut phi0 = Vec::with_capacity(layout.detectors.len());
    let mut phi1 = Vec::with_capacity(layout.detectors.len());
    let mut residual = Vec::with_capacity(layout.detectors.len());
    for (d, &x) in layout.detectors.iter().enumerate() {
        let mut u = Vec::with_capacity(ns);
        let mut du = Vec::with_capacity(ns);
        for (s, &x0) in layout.sources.iter().enumerate() {
            let r = dist(x, x0);
            let dn_r = dot(normal, sub(x, x0)) / r;
            u.push(data.g0(d, s) * r);
            du.push(data.g1(d, s) * r + data.g0(d, s) * dn_r);
        }
        let c0 = project(&u)?;
        let scale = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let trunc = u
            .iter()
            .zip(&psi_at_samples)
            .map(|(v, psi)| (v - c0.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>()).abs())
            .fold(0.0, f64::max)
            / scale.max(f64::MIN_POSITIVE);
        debug!("detector {d}: x0 truncation residual {trunc:.3e}");
        residual.push(if scale > 0.0 { trunc } else { 0.0 });
        phi0.push(c0);
        phi1.push(project(&du)?);
    }
    Ok(BoundaryVectors {
        face: layout.face,
        xs: layout.detector_axis(0),
        ys: layout.detector_axis(1),
        phi0,
        phi1,
        zero_neumann_faces: zero_neumann_faces(layout.face),
        truncation_residual: residual,
    })
}

/// Matrices `B` and `C` at the point `(x, y, ζ)`, row-major, by the basis rule.
fn projected_kernels(basis: &BasisSet, x: f64, y: f64, zeta: f64) -> (SmallMat, SmallMat) {
    let n = basis.n;
    let mut b = vec![0.0; n * n];
    let mut c = vec![0.0; n * n];
    let yz = y * y + zeta * zeta;
    for (&x0, &w) in basis.quad_nodes.iter().zip(&basis.quad_weights) {
        let (psi, dpsi) = basis.eval_unchecked(x0);
        let s = x - x0;
        let r2 = s * s + yz;
        let inv_r2 = 1.0 / r2;
        let inv_r4 = inv_r2 * inv_r2;
        // ∂_x0 [(x - x0)/r^2] = (2 s^2 - r^2)/r^4,  ∂_x0 [1/r^2] = 2 s / r^4
        let kb0 = s * inv_r2;
        let kb1 = (2.0 * s * s - r2) * inv_r4;
        let kc0 = inv_r2;
        let kc1 = 2.0 * s * inv_r4;
        for col in 0..n {
            let fb = dpsi[col] * kb0 + psi[col] * kb1;
            let fc = dpsi[col] * kc0 + psi[col] * kc1;
            for row in 0..n {
                b[row * n + col] += w * fb * psi[row];
                c[row * n + col] += w * fc * psi[row];
            }
        }
    }
    (b, c)
}

/// Upper bound on the entries of `A1..A3` when every node is at least
/// `min_distance` from the source line and `|y|, ζ <= max_extent`.
pub fn coefficient_bound(basis: &BasisSet, min_distance: f64, max_extent: f64) -> f64 {
    let minv = basis.m_inverse();
    let row_sum = minv.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let (mut p, mut dp) = (0.0f64, 0.0f64);
    for &x in &basis.quad_nodes {
        let (v, d) = basis.eval_unchecked(x);
        p = p.max(v.iter().fold(0.0, |m, v| m.max(v.abs())));
        dp = dp.max(d.iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let len = 2.0 * basis.d;
    let r = min_distance;
    // |s|/r^2 <= 1/r, |2 s^2 - r^2|/r^4 <= 1/r^2, 2|s|/r^4 <= 2/r^3.
    let b = len * (dp * p / r + p * p / (r * r));
    let c = len * (dp * p / (r * r) + 2.0 * p * p / (r * r * r));
    2.0 * row_sum * b.max(max_extent * c)
}

/// Assembles `A1..A3, A0` at every node of `grid`.
pub fn assemble_coefficients(
    basis: &BasisSet,
    grid: &Grid3,
    layout: &SourceDetectorLayout,
) -> Result<CoefficientMatrices> {
    let n = basis.n;
    for i in 0..n {
        if (basis.m[i][i] - 1.0).abs() > 1e-8 {
            return Err(Error::numerical("Laplacian coefficient matrix is not unit triangular"));
        }
    }
    let minv = basis.m_inverse();
    let z_src = layout.source_z();
    let y_src = layout.sources[0][1];
    let apply = |m: &SmallMat, scale: f64| -> SmallMat {
        let mut out = vec![0.0; n * n];
        for row in 0..n {
            for col in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += minv[row][k] * m[k * n + col];
                }
                out[row * n + col] = scale * s;
            }
        }
        out
    };
    let mats: Vec<(SmallMat, SmallMat, SmallMat)> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.ijk(idx);
            let p = grid.node(i, j, k);
            let y = p[1] - y_src;
            let zeta = p[2] - z_src;
            let (b, c) = projected_kernels(basis, p[0], y, zeta);
            (apply(&b, -2.0), apply(&c, -2.0 * y), apply(&c, -2.0 * zeta))
        })
        .collect();
    let mut out = CoefficientMatrices {
        grid: grid.clone(),
        n,
        a1: Vec::with_capacity(mats.len()),
        a2: Vec::with_capacity(mats.len()),
        a3: Vec::with_capacity(mats.len()),
        a0: vec![vec![0.0; n * n]; mats.len()],
    };
    for (a1, a2, a3) in mats {
        out.a1.push(a1);
        out.a2.push(a2);
        out.a3.push(a3);
    }
    let lo = grid.origin;
    let hi = grid.upper();
    let min_distance = (lo[2] - z_src).min(hi[2] - z_src).abs();
    let extent = (lo[1] - y_src).abs().max((hi[1] - y_src).abs()).max((hi[2] - z_src).abs());
    let bound = coefficient_bound(basis, min_distance, extent);
    let max = out.max_entry();
    if !max.is_finite() || max > bound {
        return Err(Error::numerical(format!("coefficient entry {max:.3e} exceeds bound {bound:.3e}")));
    }
    Ok(out)
}

/// `χ0(ζ) = 1 - smoothstep5(ζ/L)`: `χ0(0) = 1`, first and second derivatives
/// vanish at 0; zero with two vanishing derivatives for `ζ >= L`.
pub fn cutoff0(zeta: f64, l: f64) -> f64 {
    let s = (zeta / l).clamp(0.0, 1.0);
    1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// `χ1(ζ) = ζ χ0(ζ)`: `χ1(0) = 0`, slope 1 and vanishing second and third
/// derivatives at 0; zero with two vanishing derivatives for `ζ >= L`.
pub fn cutoff1(zeta: f64, l: f64) -> f64 {
    zeta.max(0.0) * cutoff0(zeta, l)
}

/// Cutoff pair sampled at `ζ = k h`, adjusted so that the one-sided stencil
/// `(-3 f0 + 4 f1 - f2) / (2h)` returns exactly 0 for `χ0` and 1 for `χ1`.
/// The discrete Cauchy data of the extension then coincide with the data.
pub fn discrete_cutoffs(h: f64, l: f64, count: usize) -> (Vec<f64>, Vec<f64>) {
    let c0: Vec<f64> = (0..count).map(|k| cutoff0(k as f64 * h, l)).collect();
    let c1: Vec<f64> = (0..count).map(|k| cutoff1(k as f64 * h, l)).collect();
    if count < 3 {
        return (c0, c1);
    }
    let d = |f: &[f64]| (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h);
    let s1 = d(&c1);
    let c1: Vec<f64> = c1.iter().map(|v| v / s1).collect();
    let s0 = d(&c0);
    let c0 = c0.iter().zip(&c1).map(|(a, b)| a - s0 * b).collect();
    (c0, c1)
}

/// Extension `F = Φ0 χ0(ζ) - Φ1 χ1(ζ)` of the Cauchy data into `Ω`, where `ζ`
/// is the distance from the measurement face and `Φ0`, `Φ1` are the boundary
/// vectors interpolated to the face nodes. `F = φ0` on the face, the discrete
/// outward derivative of `F` equals `φ1`, and `F` vanishes for `ζ >= A/2`.
pub fn build_extension(bv: &BoundaryVectors, grid: &Grid3, cfg: &DomainConfig) -> Result<VectorField> {
    if bv.face != cfg.measurement_face {
        return Err(Error::config("boundary vectors belong to the other measurement face"));
    }
    let n = bv.phi0.first().map_or(0, |v| v.len());
    if n == 0 {
        return Err(Error::config("empty boundary vectors"));
    }
    let a = cfg.half_width;
    let l = 0.5 * a;
    let px: Vec<f64> = (0..grid.counts[0]).map(|i| grid.coord(0, i)).collect();
    let py: Vec<f64> = (0..grid.counts[1]).map(|j| grid.coord(1, j)).collect();
    let zf = cfg.measurement_face.z(a);
    let (chi0, chi1) = discrete_cutoffs(grid.step, l, grid.counts[2]);
    let mut out = VectorField::zeros(grid, n);
    for comp in 0..n {
        let d0: Vec<f64> = bv.phi0.iter().map(|v| v[comp]).collect();
        let d1: Vec<f64> = bv.phi1.iter().map(|v| v[comp]).collect();
        let face0 = tensor_spline(&bv.xs, &bv.ys, &d0, &px, &py)?;
        let face1 = tensor_spline(&bv.xs, &bv.ys, &d1, &px, &py)?;
        let field = &mut out.components[comp];
        for k in 0..grid.counts[2] {
            let depth = ((grid.coord(2, k) - zf).abs() / grid.step).round() as usize;
            let (c0, c1) = (chi0[depth], chi1[depth]);
            if c0 == 0.0 && c1 == 0.0 {
                continue;
            }
            for j in 0..grid.counts[1] {
                for i in 0..grid.counts[0] {
                    let f = j * px.len() + i;
                    field.values[grid.index(i, j, k)] = face0[f] * c0 - face1[f] * c1;
                }
            }
        }
    }
    Ok(out)
}

/// Reference evaluation of the left side of the projected system at one point:
/// returns `M^{-1}`-normalized `ΔU + A1 U_x + A2 U_y + A3 U_z + A0 U` given the
/// values of `U` derivatives there.
pub fn apply_operator_at(
    coeffs: &CoefficientMatrices,
    node: usize,
    lap: &[f64],
    ux: &[f64],
    uy: &[f64],
    uz: &[f64],
    u: &[f64],
) -> Vec<f64> {
    let n = coeffs.n;
    (0..n)
        .map(|m| {
            let mut s = lap[m];
            for k in 0..n {
                s += coeffs.a1[node][m * n + k] * ux[k]
                    + coeffs.a2[node][m * n + k] * uy[k]
                    + coeffs.a3[node][m * n + k] * uz[k]
                    + coeffs.a0[node][m * n + k] * u[k];
            }
            s
        })
        .collect()
}

/// Same reduction with the `x0` derivative taken by fourth-order central
/// differences of `Ψ_n(x0) (x - x0)/r^2` and `Ψ_n(x0)/r^2` instead of the
/// closed-form kernels. Used for cross-validation.
pub fn projected_kernels_fd(basis: &BasisSet, x: f64, y: f64, zeta: f64, step: f64) -> (SmallMat, SmallMat) {
    let n = basis.n;
    let mut b = vec![0.0; n * n];
    let mut c = vec![0.0; n * n];
    let yz = y * y + zeta * zeta;
    let terms = |x0: f64| -> (Vec<f64>, Vec<f64>) {
        let (psi, _) = basis.eval_unchecked(x0);
        let s = x - x0;
        let r2 = s * s + yz;
        (psi.iter().map(|p| p * s / r2).collect(), psi.iter().map(|p| p / r2).collect())
    };
    for (&x0, &w) in basis.quad_nodes.iter().zip(&basis.quad_weights) {
        let (psi, _) = basis.eval_unchecked(x0);
        let pts = [x0 - 2.0 * step, x0 - step, x0 + step, x0 + 2.0 * step];
        let coef = [1.0, -8.0, 8.0, -1.0];
        let mut db = vec![0.0; n];
        let mut dc = vec![0.0; n];
        for (&p, &cf) in pts.iter().zip(&coef) {
            let (tb, tc) = terms(p);
            for col in 0..n {
                db[col] += cf * tb[col] / (12.0 * step);
                dc[col] += cf * tc[col] / (12.0 * step);
            }
        }
        for col in 0..n {
            for row in 0..n {
                b[row * n + col] += w * db[col] * psi[row];
                c[row * n + col] += w * dc[col] * psi[row];
            }
        }
    }
    (b, c)
}

/// Exposes the closed-form kernels for tests and diagnostics.
pub fn projected_kernels_exact(basis: &BasisSet, x: f64, y: f64, zeta: f64) -> (SmallMat, SmallMat) {
    projected_kernels(basis, x, y, zeta)
}
