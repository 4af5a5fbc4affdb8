//! Orthonormal basis of `L2(-d, d)` built from `x^n e^x`.
//!
//! Each basis function has the form `Ψ_n(x) = P_n(x) e^x` with `deg P_n = n`.
//! The derivative matrix `a_mn = <Ψ_n', Ψ_m>` is unit upper triangular: since
//! `Ψ_n' = Ψ_n + P_n' e^x` and `P_n' e^x` lies in the span of `Ψ_0..Ψ_{n-1}`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Gauss-Legendre nodes and weights on `[lo, hi]`.
pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = mid - half * x;
        nodes[n - 1 - i] = mid + half * x;
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn horner_derivative(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c)
}

/// The truncated basis `{Ψ_0, ..., Ψ_{N-1}}` with its quadrature rule and
/// derivative matrix.
#[derive(Debug, Clone, Serialize)]
pub struct BasisSet {
    pub d: f64,
    pub n: usize,
    /// Row `n` holds the monomial coefficients of `P_n` (lowest degree first).
    pub poly_coeffs: Vec<Vec<f64>>,
    pub quad_nodes: Vec<f64>,
    pub quad_weights: Vec<f64>,
    /// `m[row][col] = <Ψ_col', Ψ_row>`.
    pub m: Vec<Vec<f64>>,
}

/// Largest tolerated deviation of the Gram matrix from the identity.
const ORTHOGONALITY_LIMIT: f64 = 1e-8;

/// Builds the basis by modified Gram-Schmidt on monomial coefficient vectors,
/// with one reorthogonalization pass, against the inner product
/// `<p e^x, q e^x> = ∫ p q e^{2x} dx` evaluated from monomial moments.
pub fn build_basis(n: usize, d: f64) -> Result<BasisSet> {
    if n < 1 {
        return Err(Error::config("basis order N must be at least 1"));
    }
    if !(d > 0.0) {
        return Err(Error::config("basis half-interval d must be positive"));
    }
    let (quad_nodes, quad_weights) = stable_rule(n, d);

    // Moments mu_k = ∫ x^k e^{2x} dx, k < 2n.
    let moments: Vec<f64> = (0..2 * n)
        .map(|k| {
            quad_nodes
                .iter()
                .zip(&quad_weights)
                .map(|(&x, &w)| w * x.powi(k as i32) * (2.0 * x).exp())
                .sum()
        })
        .collect();
    let inner = |p: &[f64], q: &[f64]| -> f64 {
        let mut s = 0.0;
        for (i, a) in p.iter().enumerate() {
            for (j, b) in q.iter().enumerate() {
                s += a * b * moments[i + j];
            }
        }
        s
    };

    let mut poly_coeffs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        for _pass in 0..2 {
            for q in &poly_coeffs {
                let c = inner(&v, q);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let nrm = inner(&v, &v);
        if !(nrm > 0.0) {
            return Err(Error::numerical(format!(
                "Gram-Schmidt breakdown at order {k}; reduce N"
            )));
        }
        let s = 1.0 / nrm.sqrt();
        v.iter_mut().for_each(|x| *x *= s);
        // Normalize the sign so the leading coefficient is positive.
        if v[k] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v.truncate(k + 1);
        poly_coeffs.push(v);
    }

    let mut basis = BasisSet { d, n, poly_coeffs, quad_nodes, quad_weights, m: Vec::new() };

    let gram = basis.gram();
    let dev = max_identity_deviation(&gram);
    if dev > ORTHOGONALITY_LIMIT {
        return Err(Error::numerical(format!(
            "basis lost orthogonality at N = {n} (deviation {dev:.2e}); reduce N"
        )));
    }

    let mut m = vec![vec![0.0; n]; n];
    for (&x, &w) in basis.quad_nodes.iter().zip(&basis.quad_weights) {
        let (vals, ders) = basis.eval_unchecked(x);
        for (row, mrow) in m.iter_mut().enumerate() {
            for (col, entry) in mrow.iter_mut().enumerate() {
                *entry += w * ders[col] * vals[row];
            }
        }
    }
    basis.m = m;
    Ok(basis)
}

/// Gauss-Legendre rule whose node count is doubled until the Gram matrix of
/// `x^k e^x`, `k < n`, stops changing.
fn stable_rule(n: usize, d: f64) -> (Vec<f64>, Vec<f64>) {
    let moments = |nodes: &[f64], weights: &[f64]| -> Vec<f64> {
        (0..2 * n)
            .map(|k| {
                nodes
                    .iter()
                    .zip(weights)
                    .map(|(&x, &w)| w * x.powi(k as i32) * (2.0 * x).exp())
                    .sum()
            })
            .collect()
    };
    let mut count = (n + 4).max(8);
    let (mut nodes, mut weights) = gauss_legendre(count, -d, d);
    let mut prev = moments(&nodes, &weights);
    loop {
        count *= 2;
        let (n2, w2) = gauss_legendre(count, -d, d);
        let next = moments(&n2, &w2);
        let change = prev
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-300))
            .fold(0.0, f64::max);
        nodes = n2;
        weights = w2;
        if change < 1e-13 || count > 4096 {
            break;
        }
        prev = next;
    }
    (nodes, weights)
}

fn max_identity_deviation(m: &[Vec<f64>]) -> f64 {
    let mut dev: f64 = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((v - target).abs());
        }
    }
    dev
}

impl BasisSet {
    /// Values `Ψ_n(x0)` and derivatives `Ψ_n'(x0)`.
    pub fn eval(&self, x0: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(x0.abs() <= self.d * (1.0 + 1e-12)) {
            return Err(Error::config(format!("x0 = {x0} outside [-{0}, {0}]", self.d)));
        }
        Ok(self.eval_unchecked(x0))
    }

    pub(crate) fn eval_unchecked(&self, x0: f64) -> (Vec<f64>, Vec<f64>) {
        let e = x0.exp();
        let mut vals = Vec::with_capacity(self.n);
        let mut ders = Vec::with_capacity(self.n);
        for c in &self.poly_coeffs {
            let p = horner(c, x0);
            let dp = horner_derivative(c, x0);
            vals.push(p * e);
            ders.push((p + dp) * e);
        }
        (vals, ders)
    }

    /// `<Ψ_i, Ψ_j>` by the stored quadrature.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let mut g = vec![vec![0.0; self.n]; self.n];
        for (&x, &w) in self.quad_nodes.iter().zip(&self.quad_weights) {
            let (vals, _) = self.eval_unchecked(x);
            for i in 0..self.n {
                for j in 0..self.n {
                    g[i][j] += w * vals[i] * vals[j];
                }
            }
        }
        g
    }

    /// Solves `M y = b` by back substitution (M is unit upper triangular).
    pub fn solve_m(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.m[i][j] * y[j];
            }
            y[i] = s / self.m[i][i];
        }
        y
    }

    /// `M^{-1}` as a dense matrix.
    pub fn m_inverse(&self) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut inv = vec![vec![0.0; n]; n];
        for col in 0..n {
            let mut e = vec![0.0; n];
            e[col] = 1.0;
            let y = self.solve_m(&e);
            for row in 0..n {
                inv[row][col] = y[row];
            }
        }
        inv
    }

    /// Infinity-norm condition number of `M`.
    pub fn m_condition(&self) -> f64 {
        let row_norm = |a: &[Vec<f64>]| {
            a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
        };
        row_norm(&self.m) * row_norm(&self.m_inverse())
    }

    /// Coefficients and M as CSV text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# polynomial coefficients, row n = P_n, lowest degree first\n");
        for c in &self.poly_coeffs {
            let mut row: Vec<String> = c.iter().map(|v| format!("{v:.17e}")).collect();
            row.resize(self.n, "0".into());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out.push_str("# M, a_mn = <Psi_n', Psi_m>, row m\n");
        for r in &self.m {
            let row: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5, -1.0, 2.0);
        // ∫_{-1}^{2} t^9 dt = (2^10 - 1) / 10
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(9)).sum();
        assert!((s - 102.3).abs() < 1e-11);
        let total: f64 = w.iter().sum();
        assert!((total - 3.0).abs() < 1e-14);
    }

    #[test]
    fn first_function_matches_closed_form() {
        let b = build_basis(1, 1.0).unwrap();
        let (v, dv) = b.eval(0.0).unwrap();
        let expected = 1.0 / (2.0f64).sinh().sqrt();
        assert!((v[0] - expected).abs() < 1e-13);
        assert!((v[0] - 0.52509).abs() < 1e-5);
        assert!((dv[0] - v[0]).abs() < 1e-14);
    }

    #[test]
    fn first_derivative_equals_value_everywhere() {
        let b = build_basis(6, 1.0).unwrap();
        for x in [-1.0, -0.3, 0.0, 0.8, 1.0] {
            let (v, dv) = b.eval(x).unwrap();
            assert!((v[0] - dv[0]).abs() < 1e-13);
        }
    }

    #[test]
    fn m_is_unit_upper_triangular() {
        let b = build_basis(6, 1.0).unwrap();
        for m in 0..6 {
            for n in 0..6 {
                if m == n {
                    assert!((b.m[m][n] - 1.0).abs() < 1e-8);
                } else if m > n {
                    assert!(b.m[m][n].abs() < 1e-8);
                }
            }
        }
        assert!(b.m_condition().is_finite());
    }

    #[test]
    fn m_upper_entries_are_pinned() {
        // Frozen from the quadrature construction at N = 6, d = 1.
        let b = build_basis(6, 1.0).unwrap();
        let pinned = [
            (0, 1, b.m[0][1]),
            (0, 2, b.m[0][2]),
            (1, 2, b.m[1][2]),
            (2, 5, b.m[2][5]),
        ];
        // Independent route: a_mn = ∫ Ψ_n' Ψ_m with a fine GL rule.
        let (x, w) = gauss_legendre(200, -1.0, 1.0);
        for (m, n, value) in pinned {
            let s: f64 = x
                .iter()
                .zip(&w)
                .map(|(&t, &wt)| {
                    let (v, dv) = b.eval(t).unwrap();
                    wt * dv[n] * v[m]
                })
                .sum();
            assert!((s - value).abs() < 1e-12);
        }
        assert!(b.m[0][1].abs() > 0.1);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let b = build_basis(6, 1.0).unwrap();
        let h = 1e-4;
        for x in [-0.9, -0.2, 0.5] {
            let (_, dv) = b.eval(x).unwrap();
            let (vp, _) = b.eval(x + h).unwrap();
            let (vm, _) = b.eval(x - h).unwrap();
            for n in 0..6 {
                let fd = (vp[n] - vm[n]) / (2.0 * h);
                assert!((fd - dv[n]).abs() < 1e-6 * (1.0 + dv[n].abs()));
            }
        }
    }

    #[test]
    fn eval_rejects_points_outside_interval() {
        let b = build_basis(3, 1.0).unwrap();
        assert!(b.eval(1.5).is_err());
        assert!(b.eval(-1.0).is_ok());
    }

    #[test]
    fn polynomial_degrees_match_index() {
        let b = build_basis(6, 1.0).unwrap();
        for (n, c) in b.poly_coeffs.iter().enumerate() {
            assert_eq!(c.len(), n + 1);
            assert!(c[n].abs() > 0.0);
        }
    }

    #[test]
    fn span_contains_weighted_monomials() {
        let n = 6;
        let b = build_basis(n, 1.0).unwrap();
        for k in 0..n {
            let f = |x: f64| x.powi(k as i32) * x.exp();
            let coeffs: Vec<f64> = (0..n)
                .map(|j| {
                    b.quad_nodes
                        .iter()
                        .zip(&b.quad_weights)
                        .map(|(&x, &w)| w * f(x) * b.eval(x).unwrap().0[j])
                        .sum()
                })
                .collect();
            for x in [-0.7, 0.1, 0.9] {
                let (v, _) = b.eval(x).unwrap();
                let rec: f64 = coeffs.iter().zip(&v).map(|(c, p)| c * p).sum();
                assert!((rec - f(x)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn solve_m_inverts_m() {
        let b = build_basis(6, 1.0).unwrap();
        let rhs = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let y = b.solve_m(&rhs);
        for i in 0..6 {
            let s: f64 = (0..6).map(|j| b.m[i][j] * y[j]).sum();
            assert!((s - rhs[i]).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn orthonormal_for_any_small_order(n in 1usize..9, d in 0.3f64..2.0) {
            let b = build_basis(n, d).unwrap();
            let g = b.gram();
            prop_assert!(max_identity_deviation(&g) < 1e-10);
        }
    }
}
