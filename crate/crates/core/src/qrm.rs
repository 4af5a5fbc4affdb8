//! Quasi-reversibility: minimizes
//!
//! ```text
//! J(V) = Σ_interior |L(V + F)|^2 + γ ‖V‖²_{H²}
//! ```
//!
//! over grid vectors `V` that vanish together with their discrete normal
//! derivative on the measurement face and have zero discrete normal
//! derivative on the other faces. `L U = ΔU + A1 U_x + A2 U_y + A3 U_z + A0 U`
//! is discretized by second-order centered differences.
//!
//! Constraints are eliminated exactly: along every axis the node values are a
//! fixed linear combination of free values (a 1D constraint map), and the 3D
//! map is their tensor product. The least-squares problem in the free values
//! is solved through its normal equations.

use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DomainConfig, Grid3, MeasurementFace, ScalarField3};
use crate::system::{CoefficientMatrices, VectorField};

/// Condition imposed at one end of an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndCondition {
    /// No constraint.
    Free,
    /// `(-3 v0 + 4 v1 - v2) / (2h) = 0`, i.e. `v0 = (4 v1 - v2) / 3`.
    Neumann,
    /// `v0 = 0` and the Neumann condition, i.e. `v1 = v2 / 4`.
    Cauchy,
}

/// Node values along one axis as combinations of free values.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisMap {
    pub low: EndCondition,
    pub high: EndCondition,
    /// Node index of each free value.
    pub free_nodes: Vec<usize>,
    /// For each node, `(free index, weight)` pairs.
    pub node_weights: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    pub fn new(n: usize, low: EndCondition, high: EndCondition) -> Result<Self> {
        if n < 6 {
            return Err(Error::config("constraint maps need at least 6 nodes per axis"));
        }
        let eliminated = |c: EndCondition| match c {
            EndCondition::Free => 0,
            EndCondition::Neumann => 1,
            EndCondition::Cauchy => 2,
        };
        let lo = eliminated(low);
        let hi = eliminated(high);
        let free_nodes: Vec<usize> = (lo..n - hi).collect();
        let free_of = |node: usize| node - lo;
        let mut node_weights: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &node in &free_nodes {
            node_weights[node] = vec![(free_of(node), 1.0)];
        }
        // `near`, `next` are the first and second nodes in from the end.
        let mut fill = |cond: EndCondition, end: usize, near: usize, next: usize, after: usize| match cond {
            EndCondition::Free => {}
            EndCondition::Neumann => {
                node_weights[end] = vec![(free_of(near), 4.0 / 3.0), (free_of(next), -1.0 / 3.0)];
            }
            EndCondition::Cauchy => {
                node_weights[end] = Vec::new();
                node_weights[near] = vec![(free_of(after), 0.25)];
                let _ = next;
            }
        };
        fill(low, 0, 1, 2, 2);
        fill(high, n - 1, n - 2, n - 3, n - 3);
        Ok(AxisMap { low, high, free_nodes, node_weights })
    }

    pub fn free_count(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn node_count(&self) -> usize {
        self.node_weights.len()
    }

    /// Node values for the given free values.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        self.node_weights
            .iter()
            .map(|w| w.iter().map(|&(f, c)| c * free[f]).sum())
            .collect()
    }
}

/// Tensor product of three axis maps, applied to each of `n` components.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMap {
    pub axes: [AxisMap; 3],
    pub components: usize,
}

impl ConstraintMap {
    /// Constraint set of the boundary value problem for `cfg`.
    pub fn for_config(grid: &Grid3, cfg: &DomainConfig) -> Result<Self> {
        let far = if cfg.free_far_neumann { EndCondition::Free } else { EndCondition::Neumann };
        let (zlo, zhi) = match cfg.measurement_face {
            MeasurementFace::Backscattering => (EndCondition::Cauchy, far),
            MeasurementFace::Transmitted => (far, EndCondition::Cauchy),
        };
        Ok(ConstraintMap {
            axes: [
                AxisMap::new(grid.counts[0], EndCondition::Neumann, EndCondition::Neumann)?,
                AxisMap::new(grid.counts[1], EndCondition::Neumann, EndCondition::Neumann)?,
                AxisMap::new(grid.counts[2], zlo, zhi)?,
            ],
            components: cfg.n_basis,
        })
    }

    pub fn free_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.free_count()).product()
    }

    pub fn free_count(&self) -> usize {
        self.free_nodes() * self.components
    }

    /// Column of free value `(a, b, c)` of component `m`.
    #[inline]
    fn column(&self, a: usize, b: usize, c: usize, m: usize) -> usize {
        let fx = self.axes[0].free_count();
        let fy = self.axes[1].free_count();
        ((c * fy + b) * fx + a) * self.components + m
    }

    /// Adds `weight * V_m(i, j, k)` to `row` in terms of free values.
    fn push_node(&self, row: &mut Vec<(usize, f64)>, ijk: [usize; 3], m: usize, weight: f64) {
        for &(a, wa) in &self.axes[0].node_weights[ijk[0]] {
            for &(b, wb) in &self.axes[1].node_weights[ijk[1]] {
                for &(c, wc) in &self.axes[2].node_weights[ijk[2]] {
                    row.push((self.column(a, b, c, m), weight * wa * wb * wc));
                }
            }
        }
    }

    /// Grid field of the free vector `x`.
    pub fn expand(&self, x: &[f64], grid: &Grid3) -> VectorField {
        let [fx, fy, fz] = [self.axes[0].free_count(), self.axes[1].free_count(), self.axes[2].free_count()];
        let mut out = VectorField::zeros(grid, self.components);
        for m in 0..self.components {
            // Expand axis by axis.
            let mut stage: Vec<f64> = (0..fx * fy * fz)
                .map(|idx| x[idx * self.components + m])
                .collect();
            let mut dims = [fx, fy, fz];
            for axis in 0..3 {
                let n_out = self.axes[axis].node_count();
                let mut next_dims = dims;
                next_dims[axis] = n_out;
                let mut next = vec![0.0; next_dims.iter().product()];
                let stride_in: [usize; 3] = [1, dims[0], dims[0] * dims[1]];
                let stride_out: [usize; 3] = [1, next_dims[0], next_dims[0] * next_dims[1]];
                for k in 0..next_dims[2] {
                    for j in 0..next_dims[1] {
                        for i in 0..next_dims[0] {
                            let pos = [i, j, k];
                            let mut s = 0.0;
                            for &(f, w) in &self.axes[axis].node_weights[pos[axis]] {
                                let mut src = pos;
                                src[axis] = f;
                                s += w * stage[src[0] * stride_in[0] + src[1] * stride_in[1] + src[2] * stride_in[2]];
                            }
                            next[i * stride_out[0] + j * stride_out[1] + k * stride_out[2]] = s;
                        }
                    }
                }
                stage = next;
                dims = next_dims;
            }
            out.components[m].values = stage;
        }
        out
    }
}

pub const DEFAULT_CG_TOL: f64 = 2e-11;

/// Inputs of one quasi-reversibility solve.
#[derive(Debug, Clone)]
pub struct QrmProblem {
    pub coeffs: CoefficientMatrices,
    pub f: VectorField,
    pub gamma: f64,
    pub constraints: ConstraintMap,
    pub grid: Grid3,
    /// Relative residual at which the iterative solver stops.
    pub cg_tol: f64,
}

impl QrmProblem {
    pub fn new(coeffs: CoefficientMatrices, f: VectorField, gamma: f64, cfg: &DomainConfig) -> Result<Self> {
        let grid = coeffs.grid.clone();
        if f.grid() != &grid || f.n() != coeffs.n {
            return Err(Error::config("extension and coefficients live on different grids"));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config("gamma must be a nonnegative number"));
        }
        let constraints = ConstraintMap::for_config(&grid, &DomainConfig { n_basis: coeffs.n, ..cfg.clone() })?;
        Ok(QrmProblem { coeffs, f, gamma, constraints, grid, cg_tol: DEFAULT_CG_TOL })
    }
}

/// Sparse least-squares system `min ‖A x - b‖²` in compressed-row form.
#[derive(Debug, Clone)]
pub struct QrmSystem {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Rows holding the discretized operator; the rest are penalty rows.
    pub operator_rows: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl QrmSystem {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows)
            .into_par_iter()
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|e| self.values[e] * x[self.col_idx[e]])
                    .sum()
            })
            .collect()
    }

    /// `Aᵀ y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for r in 0..self.n_rows {
            let yr = y[r];
            if yr != 0.0 {
                for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                    out[self.col_idx[e]] += self.values[e] * yr;
                }
            }
        }
        out
    }

    /// `AᵀA` as a compressed sparse column matrix (lower and upper parts).
    pub fn normal_matrix(&self) -> Result<SparseColMat<usize, f64>> {
        let triplets: Vec<Triplet<usize, usize, f64>> = (0..self.n_rows)
            .flat_map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |e| (r, e)))
            .map(|(r, e)| Triplet::new(r, self.col_idx[e], self.values[e]))
            .collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(self.n_rows, self.n_cols, &triplets)
            .map_err(|e| Error::numerical(format!("sparse assembly failed: {e:?}")))?;
        let at_triplets: Vec<Triplet<usize, usize, f64>> =
            triplets.iter().map(|t| Triplet::new(t.col, t.row, t.val)).collect();
        let at = SparseColMat::<usize, f64>::try_new_from_triplets(self.n_cols, self.n_rows, &at_triplets)
            .map_err(|e| Error::numerical(format!("sparse assembly failed: {e:?}")))?;
        faer::sparse::linalg::matmul::sparse_sparse_matmul(at.as_ref(), a.as_ref(), 1.0, faer::Par::Seq)
            .map_err(|e| Error::numerical(format!("normal matrix product failed: {e:?}")))
    }

    /// Squared column norms, the diagonal of `AᵀA`.
    pub fn column_norms_sq(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_cols];
        for (&c, &v) in self.col_idx.iter().zip(&self.values) {
            d[c] += v * v;
        }
        d
    }
}

/// Collapses duplicate columns of a row.
fn compress(mut row: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    row.sort_unstable_by_key(|e| e.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(row.len());
    for (c, v) in row {
        match out.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => out.push((c, v)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    out
}

/// Discrete `L W` at interior node `(i, j, k)` for node values given by `value`.
/// Returns one entry per component.
fn apply_l_at<F: Fn(usize, [usize; 3]) -> f64>(
    coeffs: &CoefficientMatrices,
    ijk: [usize; 3],
    value: F,
) -> Vec<f64> {
    let n = coeffs.n;
    let g = &coeffs.grid;
    let h = g.step;
    let node = g.index(ijk[0], ijk[1], ijk[2]);
    let shifted = |axis: usize, delta: i64| {
        let mut p = ijk;
        p[axis] = (p[axis] as i64 + delta) as usize;
        p
    };
    let mats = [&coeffs.a1[node], &coeffs.a2[node], &coeffs.a3[node]];
    let mut grads = vec![[0.0; 3]; n];
    let mut out = vec![0.0; n];
    for k in 0..n {
        let c = value(k, ijk);
        let mut lap = -6.0 * c;
        for (axis, g) in grads[k].iter_mut().enumerate() {
            let (p, q) = (value(k, shifted(axis, 1)), value(k, shifted(axis, -1)));
            lap += p + q;
            *g = (p - q) / (2.0 * h);
        }
        out[k] += lap / (h * h);
        for m in 0..n {
            out[m] += coeffs.a0[node][m * n + k] * c;
        }
    }
    for m in 0..n {
        for k in 0..n {
            for axis in 0..3 {
                out[m] += mats[axis][m * n + k] * grads[k][axis];
            }
        }
    }
    out
}

/// Discrete `L U` at every interior node; zero on the boundary.
pub fn apply_operator(coeffs: &CoefficientMatrices, u: &VectorField) -> VectorField {
    let g = &coeffs.grid;
    let n = coeffs.n;
    let mut out = VectorField::zeros(g, n);
    let rows: Vec<(usize, Vec<f64>)> = interior_nodes(g)
        .into_par_iter()
        .map(|ijk| {
            let v = apply_l_at(coeffs, ijk, |k, p| u.components[k].at(p[0], p[1], p[2]));
            (g.index(ijk[0], ijk[1], ijk[2]), v)
        })
        .collect();
    for (idx, v) in rows {
        for m in 0..n {
            out.components[m].values[idx] = v[m];
        }
    }
    out
}

fn interior_nodes(g: &Grid3) -> Vec<[usize; 3]> {
    let mut v = Vec::new();
    for k in 1..g.counts[2] - 1 {
        for j in 1..g.counts[1] - 1 {
            for i in 1..g.counts[0] - 1 {
                v.push([i, j, k]);
            }
        }
    }
    v
}

/// Discretizes the functional as a least-squares system in the free values.
pub fn build_qrm_system(problem: &QrmProblem) -> Result<QrmSystem> {
    let g = &problem.grid;
    let n = problem.coeffs.n;
    let cm = &problem.constraints;
    let interior = interior_nodes(g);
    if interior.is_empty() || cm.free_count() == 0 {
        return Err(Error::config("inversion grid has no interior nodes"));
    }
    let h = g.step;
    let lf = apply_operator(&problem.coeffs, &problem.f);

    // Operator rows: the action of L on unit vectors, collected per node.
    let op_rows: Vec<Vec<(Vec<(usize, f64)>, f64)>> = interior
        .par_iter()
        .map(|&ijk| {
            let node = g.index(ijk[0], ijk[1], ijk[2]);
            let mats = [&problem.coeffs.a1[node], &problem.coeffs.a2[node], &problem.coeffs.a3[node]];
            (0..n)
                .map(|m| {
                    let mut row = Vec::with_capacity(64);
                    cm.push_node(&mut row, ijk, m, -6.0 / (h * h));
                    for axis in 0..3 {
                        for delta in [-1i64, 1] {
                            let mut p = ijk;
                            p[axis] = (p[axis] as i64 + delta) as usize;
                            cm.push_node(&mut row, p, m, 1.0 / (h * h));
                            for k in 0..n {
                                let a = mats[axis][m * n + k];
                                if a != 0.0 {
                                    cm.push_node(&mut row, p, k, delta as f64 * a / (2.0 * h));
                                }
                            }
                        }
                    }
                    for k in 0..n {
                        let a = problem.coeffs.a0[node][m * n + k];
                        if a != 0.0 {
                            cm.push_node(&mut row, ijk, k, a);
                        }
                    }
                    (compress(row), -lf.components[m].values[node])
                })
                .collect()
        })
        .collect();

    let mut sys = QrmSystem {
        n_rows: 0,
        n_cols: cm.free_count(),
        operator_rows: 0,
        row_ptr: vec![0],
        col_idx: Vec::new(),
        values: Vec::new(),
        rhs: Vec::new(),
    };
    let push = |sys: &mut QrmSystem, row: Vec<(usize, f64)>, b: f64| {
        for (c, v) in row {
            sys.col_idx.push(c);
            sys.values.push(v);
        }
        sys.row_ptr.push(sys.col_idx.len());
        sys.rhs.push(b);
        sys.n_rows += 1;
    };
    for node_rows in op_rows {
        for (row, b) in node_rows {
            push(&mut sys, row, b);
        }
    }
    sys.operator_rows = sys.n_rows;

    if problem.gamma > 0.0 {
        // Discrete H² penalty: values, centered first and second differences.
        let s = problem.gamma.sqrt();
        for k in 0..g.counts[2] {
            for j in 0..g.counts[1] {
                for i in 0..g.counts[0] {
                    let ijk = [i, j, k];
                    for m in 0..n {
                        let mut row = Vec::new();
                        cm.push_node(&mut row, ijk, m, s);
                        push(&mut sys, compress(row), 0.0);
                        for axis in 0..3 {
                            if ijk[axis] == 0 || ijk[axis] + 1 == g.counts[axis] {
                                continue;
                            }
                            let mut plus = ijk;
                            plus[axis] += 1;
                            let mut minus = ijk;
                            minus[axis] -= 1;
                            let mut d1 = Vec::new();
                            cm.push_node(&mut d1, plus, m, s / (2.0 * h));
                            cm.push_node(&mut d1, minus, m, -s / (2.0 * h));
                            push(&mut sys, compress(d1), 0.0);
                            let mut d2 = Vec::new();
                            cm.push_node(&mut d2, plus, m, s / (h * h));
                            cm.push_node(&mut d2, ijk, m, -2.0 * s / (h * h));
                            cm.push_node(&mut d2, minus, m, s / (h * h));
                            push(&mut sys, compress(d2), 0.0);
                        }
                    }
                }
            }
        }
    }
    Ok(sys)
}

/// How the normal equations are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Direct below [`DIRECT_LIMIT`] free unknowns, iterative above.
    Auto,
    Direct,
    Iterative,
}

/// Largest free-unknown count solved by sparse factorization under `Auto`.
pub const DIRECT_LIMIT: usize = 60_000;

/// Solver statistics for the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverStats {
    pub method: String,
    pub rows: usize,
    pub free_unknowns: usize,
    pub nonzeros: usize,
    pub normal_nonzeros: usize,
    pub iterations: usize,
    pub residual_l: f64,
    pub residual_normal_eq: f64,
    pub gamma: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct QrmSolution {
    pub v: VectorField,
    /// `U = V + F`.
    pub u: VectorField,
    /// Free values of `V`.
    pub x: Vec<f64>,
    /// `h^3 Σ_interior |L U|^2`.
    pub residual_l: f64,
    /// `‖Aᵀ(b - A x)‖ / ‖Aᵀ b‖`.
    pub residual_normal_eq: f64,
    pub gamma_used: f64,
    /// `Σ_m |L U|_m^2` per node.
    pub residual_density: ScalarField3,
    pub stats: SolverStats,
}

/// Builds and solves the least-squares problem.
pub fn solve_qrm(problem: &QrmProblem, kind: SolverKind) -> Result<QrmSolution> {
    let sys = build_qrm_system(problem)?;
    solve_system(problem, &sys, kind)
}

/// Solves an already built system.
pub fn solve_system(problem: &QrmProblem, sys: &QrmSystem, kind: SolverKind) -> Result<QrmSolution> {
    let start = Instant::now();
    let direct = match kind {
        SolverKind::Direct => true,
        SolverKind::Iterative => false,
        SolverKind::Auto => sys.n_cols <= DIRECT_LIMIT,
    };
    let atb = sys.apply_transpose(&sys.rhs);
    let atb_norm = norm2(&atb);
    let (x, iterations, method, normal_nnz) = if atb_norm == 0.0 {
        (vec![0.0; sys.n_cols], 0, "trivial".to_string(), 0)
    } else if direct {
        let (x, nnz, method) = solve_direct(sys, &atb)?;
        (x, 0, method, nnz)
    } else {
        let (x, it) = solve_pcg_ic(sys, problem.cg_tol, 20 * sys.n_cols.max(100))?;
        (x, it, "pcg_ic0".to_string(), 0)
    };
    let r: Vec<f64> = sys.apply(&x).iter().zip(&sys.rhs).map(|(a, b)| b - a).collect();
    let residual_normal_eq = if atb_norm == 0.0 { 0.0 } else { norm2(&sys.apply_transpose(&r)) / atb_norm };

    let v = problem.constraints.expand(&x, &problem.grid);
    let u = v.add(&problem.f);
    let lu = apply_operator(&problem.coeffs, &u);
    let mut density = ScalarField3::zeros(&problem.grid);
    for c in &lu.components {
        for (d, val) in density.values.iter_mut().zip(&c.values) {
            *d += val * val;
        }
    }
    let residual_l = density.values.iter().sum::<f64>() * problem.grid.step.powi(3);
    let stats = SolverStats {
        method,
        rows: sys.n_rows,
        free_unknowns: sys.n_cols,
        nonzeros: sys.nnz(),
        normal_nonzeros: normal_nnz,
        iterations,
        residual_l,
        residual_normal_eq,
        gamma: problem.gamma,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    info!(
        "qrm: {} rows, {} unknowns, {} ({} it), normal residual {:.2e}, {:.1}s",
        stats.rows, stats.free_unknowns, stats.method, iterations, residual_normal_eq, stats.wall_seconds
    );
    if !v.is_finite() {
        return Err(Error::numerical("non-finite QRM solution"));
    }
    Ok(QrmSolution {
        v,
        u,
        x,
        residual_l,
        residual_normal_eq,
        gamma_used: problem.gamma,
        residual_density: density,
        stats,
    })
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sparse Cholesky of `AᵀA` with iterative refinement; falls back to sparse
/// QR of `A` when the factorization breaks down (semidefinite system).
fn solve_direct(sys: &QrmSystem, atb: &[f64]) -> Result<(Vec<f64>, usize, String)> {
    let ata = sys.normal_matrix()?;
    let nnz = ata.compute_nnz();
    match ata.sp_cholesky(Side::Lower) {
        Ok(llt) => {
            let solve = |rhs: &[f64]| -> Vec<f64> {
                let b = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
                let x = llt.solve(&b);
                (0..rhs.len()).map(|i| x[(i, 0)]).collect()
            };
            let mut x = solve(atb);
            // Refinement against the normal equations.
            for _ in 0..3 {
                let ax = sys.apply(&x);
                let r: Vec<f64> = ax.iter().zip(&sys.rhs).map(|(a, b)| b - a).collect();
                let nr = sys.apply_transpose(&r);
                if norm2(&nr) <= 1e-14 * norm2(atb) {
                    break;
                }
                let dx = solve(&nr);
                x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
            Ok((x, nnz, "sparse_cholesky".into()))
        }
        Err(e) => {
            warn!("Cholesky of the normal equations failed ({e:?}); using sparse QR");
            solve_qr(sys).map(|x| (x, nnz, "sparse_qr".into()))
        }
    }
}

fn solve_qr(sys: &QrmSystem) -> Result<Vec<f64>> {
    use faer::linalg::solvers::SolveLstsq;
    let triplets: Vec<Triplet<usize, usize, f64>> = (0..sys.n_rows)
        .flat_map(|r| (sys.row_ptr[r]..sys.row_ptr[r + 1]).map(move |e| (r, e)))
        .map(|(r, e)| Triplet::new(r, sys.col_idx[e], sys.values[e]))
        .collect();
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(sys.n_rows, sys.n_cols, &triplets)
        .map_err(|e| Error::numerical(format!("sparse assembly failed: {e:?}")))?;
    let qr = a.sp_qr().map_err(|e| Error::numerical(format!("sparse QR failed: {e:?}")))?;
    let b = Mat::<f64>::from_fn(sys.n_rows, 1, |i, _| sys.rhs[i]);
    let x = qr.solve_lstsq(&b);
    Ok((0..sys.n_cols).map(|i| x[(i, 0)]).collect())
}

/// Symmetric matrix in compressed sparse row form (full pattern, sorted).
struct SymCsr {
    n: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl SymCsr {
    fn from_faer(m: &SparseColMat<usize, f64>) -> Self {
        // Symmetric, so the columns of the CSC form are the rows.
        let n = m.ncols();
        let sym = m.symbolic();
        let (cp, ri, v) = (sym.col_ptr(), sym.row_idx(), m.val());
        let mut ptr = vec![0];
        let mut idx = Vec::with_capacity(v.len());
        let mut val = Vec::with_capacity(v.len());
        for j in 0..n {
            let mut col: Vec<(usize, f64)> = (cp[j]..cp[j + 1]).map(|e| (ri[e], v[e])).collect();
            col.sort_unstable_by_key(|e| e.0);
            for (i, x) in col {
                idx.push(i);
                val.push(x);
            }
            ptr.push(idx.len());
        }
        SymCsr { n, ptr, idx, val }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .into_par_iter()
            .map(|i| (self.ptr[i]..self.ptr[i + 1]).map(|e| self.val[e] * x[self.idx[e]]).sum())
            .collect()
    }
}

/// Zero fill-in incomplete Cholesky factor `L` (lower triangle by rows,
/// diagonal last in each row) of `K + shift diag(K)`.
struct Ic0 {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Ic0 {
    fn new(k: &SymCsr, shift: f64) -> Option<Self> {
        let mut ptr = vec![0];
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for i in 0..k.n {
            for e in k.ptr[i]..k.ptr[i + 1] {
                let j = k.idx[e];
                if j <= i {
                    idx.push(j);
                    val.push(if j == i { k.val[e] * (1.0 + shift) } else { k.val[e] });
                }
            }
            ptr.push(idx.len());
        }
        for i in 0..k.n {
            let (ri0, ri1) = (ptr[i], ptr[i + 1]);
            for e in ri0..ri1 {
                let j = idx[e];
                // Sparse dot product of rows i and j over columns < j.
                let (mut a, mut b) = (ri0, ptr[j]);
                let mut s = 0.0;
                while a < e && b < ptr[j + 1] && idx[b] < j {
                    match idx[a].cmp(&idx[b]) {
                        std::cmp::Ordering::Less => a += 1,
                        std::cmp::Ordering::Greater => b += 1,
                        std::cmp::Ordering::Equal => {
                            s += val[a] * val[b];
                            a += 1;
                            b += 1;
                        }
                    }
                }
                if j < i {
                    val[e] = (val[e] - s) / val[ptr[j + 1] - 1];
                } else {
                    let d = val[e] - s;
                    if !(d > 0.0) {
                        return None;
                    }
                    val[e] = d.sqrt();
                }
            }
        }
        Some(Ic0 { ptr, idx, val })
    }

    /// `(L Lᵀ)^{-1} r`.
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        let mut y = r.to_vec();
        for i in 0..n {
            let last = self.ptr[i + 1] - 1;
            let mut s = y[i];
            for e in self.ptr[i]..last {
                s -= self.val[e] * y[self.idx[e]];
            }
            y[i] = s / self.val[last];
        }
        for i in (0..n).rev() {
            let last = self.ptr[i + 1] - 1;
            y[i] /= self.val[last];
            let yi = y[i];
            for e in self.ptr[i]..last {
                y[self.idx[e]] -= self.val[e] * yi;
            }
        }
        y
    }
}

/// Preconditioned conjugate gradients on `AᵀA x = Aᵀb`, with an incomplete
/// Cholesky preconditioner (diagonal shift increased on breakdown), stopped
/// at relative residual `tol`.
pub fn solve_pcg_ic(sys: &QrmSystem, tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
    let k = SymCsr::from_faer(&sys.normal_matrix()?);
    let b = sys.apply_transpose(&sys.rhs);
    let b_norm = norm2(&b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; k.n], 0));
    }
    let mut shift = 0.0;
    let pre = loop {
        if let Some(p) = Ic0::new(&k, shift) {
            break p;
        }
        shift = if shift == 0.0 { 1e-6 } else { shift * 10.0 };
        if shift > 1.0 {
            return Err(Error::numerical("incomplete Cholesky broke down; normal matrix not definite"));
        }
        debug!("IC(0) breakdown, retrying with diagonal shift {shift:e}");
    };
    let n = k.n;
    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z = pre.apply(&r);
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for it in 1..=max_iter {
        let kp = k.apply(&p);
        let pkp: f64 = p.iter().zip(&kp).map(|(a, b)| a * b).sum();
        if !(pkp > 0.0) {
            return Err(Error::numerical("CG met a non-positive curvature; try gamma > 0"));
        }
        let alpha = rz / pkp;
        x.iter_mut().zip(&p).for_each(|(a, b)| *a += alpha * b);
        r.iter_mut().zip(&kp).for_each(|(a, b)| *a -= alpha * b);
        if norm2(&r) <= tol * b_norm {
            return Ok((x, it));
        }
        z = pre.apply(&r);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(a, b)| *a = b + beta * *a);
    }
    Err(Error::numerical(format!(
        "CG did not reach relative residual {tol:e} in {max_iter} iterations; try gamma > 0"
    )))
}

/// Discrete H² distance between two fields on the same grid: values, forward
/// first differences and second differences (pure and mixed), summed over
/// components with weight `h^3`.
pub fn h2_distance(a: &VectorField, b: &VectorField) -> Result<f64> {
    if a.grid() != b.grid() || a.n() != b.n() {
        return Err(Error::config("H² distance needs fields on the same grid"));
    }
    let g = a.grid();
    let h = g.step;
    let [nx, ny, nz] = g.counts;
    let n = [nx, ny, nz];
    let mut total = 0.0;
    for (ca, cb) in a.components.iter().zip(&b.components) {
        let d: Vec<f64> = ca.values.iter().zip(&cb.values).map(|(x, y)| x - y).collect();
        let at = |i: [usize; 3]| d[g.index(i[0], i[1], i[2])];
        let step = |mut i: [usize; 3], ax: usize, by: usize| {
            i[ax] += by;
            i
        };
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = [i, j, k];
                    let v = at(p);
                    total += v * v;
                    for ax in 0..3 {
                        if p[ax] + 1 < n[ax] {
                            let t = (at(step(p, ax, 1)) - v) / h;
                            total += t * t;
                        }
                        if p[ax] + 2 < n[ax] {
                            let t = (at(step(p, ax, 2)) - 2.0 * at(step(p, ax, 1)) + v) / (h * h);
                            total += t * t;
                        }
                        for bx in ax + 1..3 {
                            if p[ax] + 1 < n[ax] && p[bx] + 1 < n[bx] {
                                let q = step(p, ax, 1);
                                let t = (at(step(q, bx, 1)) - at(q) - at(step(p, bx, 1)) + v) / (h * h);
                                // Mixed terms appear twice in the Hessian.
                                total += 2.0 * t * t;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((total * h.powi(3)).sqrt())
}

/// `exp(λ (z - R)^2)` (variant 1, decreasing on `[-A, A]`) or
/// `exp(λ (z + R)^2)` (variant 2, increasing).
pub fn carleman_weight(z: f64, lambda: f64, r: f64, variant: u8) -> f64 {
    match variant {
        1 => (lambda * (z - r).powi(2)).exp(),
        _ => (lambda * (z + r).powi(2)).exp(),
    }
}

/// Per z-slice sum of `μ²(z) |L U|^2`, as `(z, mass)` pairs.
pub fn weighted_residual_profile(sol: &QrmSolution, lambda: f64, r: f64, variant: u8) -> Vec<(f64, f64)> {
    let g = &sol.residual_density.grid;
    (0..g.counts[2])
        .map(|k| {
            let z = g.coord(2, k);
            let mu = carleman_weight(z, lambda, r, variant);
            let mut mass = 0.0;
            for j in 0..g.counts[1] {
                for i in 0..g.counts[0] {
                    mass += sol.residual_density.at(i, j, k);
                }
            }
            (z, mu * mu * mass)
        })
        .collect()
}

pub fn profile_csv(profile: &[(f64, f64)]) -> String {
    let mut s = String::from("z,weighted_residual\n");
    for (z, m) in profile {
        s.push_str(&format!("{z:.6},{m:.9e}\n"));
    }
    s
}
