//! Natural cubic splines in one variable and their tensor product on a
//! rectangular 2D grid.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    /// Natural spline through `(xs[i], ys[i])`; `xs` strictly increasing.
    /// Two knots give the linear interpolant.
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(Error::config("spline needs at least two knots and matching values"));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("spline knots must be strictly increasing"));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let h0 = xs[i + 1] - xs[i];
                let h1 = xs[i + 2] - xs[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
            }
            for i in 1..k {
                let lower = xs[i + 1] - xs[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(CubicSpline { xs: xs.to_vec(), ys: ys.to_vec(), m })
    }

    /// Value at `x`; outside the knot range the end cubic is extended.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Interpolates values given on the tensor grid `xs × ys` (x index fastest)
/// at every point of the tensor grid `px × py` (x index fastest).
pub fn tensor_spline(xs: &[f64], ys: &[f64], values: &[f64], px: &[f64], py: &[f64]) -> Result<Vec<f64>> {
    let (nx, ny) = (xs.len(), ys.len());
    if values.len() != nx * ny {
        return Err(Error::config("tensor spline values do not match the grid"));
    }
    // Along x for each data row, then along y for each output column.
    let mut rows = vec![0.0; px.len() * ny];
    for j in 0..ny {
        let s = CubicSpline::new(xs, &values[j * nx..(j + 1) * nx])?;
        for (i, &x) in px.iter().enumerate() {
            rows[j * px.len() + i] = s.eval(x);
        }
    }
    let mut out = vec![0.0; px.len() * py.len()];
    let mut column = vec![0.0; ny];
    for i in 0..px.len() {
        for j in 0..ny {
            column[j] = rows[j * px.len() + i];
        }
        let s = CubicSpline::new(ys, &column)?;
        for (j, &y) in py.iter().enumerate() {
            out[j * px.len() + i] = s.eval(y);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reproduces_knots_and_lines() {
        let xs = [0.0, 0.3, 1.0, 1.2, 2.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let s = CubicSpline::new(&xs, &ys).unwrap();
        for x in [0.0, 0.1, 0.77, 1.5, 2.0] {
            assert!((s.eval(x) - (2.0 * x - 1.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn two_knots_are_linear() {
        let s = CubicSpline::new(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((s.eval(0.5) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn converges_on_smooth_function() {
        let err = |n: usize| {
            let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
            let ys: Vec<f64> = xs.iter().map(|x: &f64| x.exp()).collect();
            let s = CubicSpline::new(&xs, &ys).unwrap();
            (0..200)
                .map(|k| -0.8 + 1.6 * k as f64 / 199.0)
                .map(|x| (s.eval(x) - x.exp()).abs())
                .fold(0.0, f64::max)
        };
        // Away from the natural end conditions the error is fourth order.
        assert!(err(41) < err(21) / 10.0);
        assert!(err(41) < 1e-5);
    }

    #[test]
    fn tensor_spline_is_exact_on_bilinear() {
        let xs = [-1.0, -0.2, 0.5, 1.0];
        let ys = [-1.0, 0.0, 1.0];
        let f = |x: f64, y: f64| 1.0 + x - 2.0 * y + 0.5 * x * y;
        let mut v = Vec::new();
        for &y in &ys {
            for &x in &xs {
                v.push(f(x, y));
            }
        }
        let px = [-0.9, 0.1, 0.7];
        let py = [-0.5, 0.25];
        let out = tensor_spline(&xs, &ys, &v, &px, &py).unwrap();
        for (j, &y) in py.iter().enumerate() {
            for (i, &x) in px.iter().enumerate() {
                assert!((out[j * 3 + i] - f(x, y)).abs() < 1e-13);
            }
        }
    }

    proptest! {
        #[test]
        fn interpolates_data_at_knots(ys in proptest::collection::vec(-10.0f64..10.0, 3..12)) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64 * 0.7).collect();
            let s = CubicSpline::new(&xs, &ys).unwrap();
            for (x, y) in xs.iter().zip(&ys) {
                prop_assert!((s.eval(*x) - y).abs() < 1e-12);
            }
        }
    }
}
