//! Sampled functions on an interval with linear or monotone-cubic
//! interpolation. This is the representation the integral-equation solver
//! iterates on.

use crate::error::{PsrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Linear,
    /// C1 cubic Hermite with limited slopes: monotone data produce a
    /// monotone interpolant. On uniform grids the slopes are fourth-order
    /// finite differences clamped into the monotonicity region, so the
    /// interpolant is O(h^4) where the data are smooth and monotone.
    CubicMonotone,
}

/// A function sampled on strictly increasing nodes.
#[derive(Debug, Clone)]
pub struct GridFunction {
    nodes: Vec<f64>,
    values: Vec<f64>,
    interp: Interp,
    /// Hermite slopes, empty for linear interpolation.
    slopes: Vec<f64>,
    /// Uniform spacing if the grid is uniform, else None.
    step: Option<f64>,
}

impl GridFunction {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>, interp: Interp) -> Result<Self> {
        if nodes.len() != values.len() || nodes.len() < 2 {
            return Err(PsrError::domain(format!(
                "grid needs matching nodes/values with at least 2 points, got {}/{}",
                nodes.len(),
                values.len()
            )));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || nodes.iter().any(|v| !v.is_finite()) {
            return Err(PsrError::domain("grid nodes must be finite and strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PsrError::domain("grid values must be finite"));
        }
        let span = nodes[nodes.len() - 1] - nodes[0];
        let h0 = nodes[1] - nodes[0];
        let uniform = nodes
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h0).abs() <= 1e-9 * span);
        let mut g = GridFunction {
            nodes,
            values,
            interp,
            slopes: Vec::new(),
            step: if uniform { Some(h0) } else { None },
        };
        if interp == Interp::CubicMonotone {
            g.slopes = g.limited_slopes();
        }
        Ok(g)
    }

    /// Samples `f` on `n` uniformly spaced nodes over [lo, hi].
    pub fn from_fn(lo: f64, hi: f64, n: usize, interp: Interp, f: impl Fn(f64) -> f64) -> Result<Self> {
        if !(hi > lo) || n < 2 {
            return Err(PsrError::domain(format!(
                "from_fn needs hi > lo and n >= 2, got [{lo}, {hi}], n={n}"
            )));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + i as f64 * h })
            .collect();
        let values = nodes.iter().map(|&x| f(x)).collect();
        GridFunction::new(nodes, values, interp)
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interp(&self) -> Interp {
        self.interp
    }

    /// Replaces the sampled values, recomputing slopes. Node count must
    /// match; used by the Picard sweep to avoid reallocation.
    pub(crate) fn set_values(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.values.len());
        self.values.copy_from_slice(values);
        if self.interp == Interp::CubicMonotone {
            self.slopes = self.limited_slopes();
        }
    }

    /// Interpolated value at `x` in [lo, hi].
    pub fn eval(&self, x: f64) -> Result<f64> {
        let slack = 1e-9 * (self.hi() - self.lo());
        if x < self.lo() - slack || x > self.hi() + slack {
            return Err(PsrError::domain(format!(
                "evaluation point {x} outside grid [{}, {}]",
                self.lo(),
                self.hi()
            )));
        }
        Ok(self.eval_raw(x))
    }

    /// `eval` without the range check; callers guarantee x in [lo, hi]
    /// up to rounding (the argument is clamped).
    pub(crate) fn eval_raw(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        let x = x.clamp(self.lo(), self.hi());
        let i = match self.step {
            Some(h) => (((x - self.lo()) / h) as usize).min(n - 2),
            None => match self.nodes.partition_point(|&v| v <= x) {
                0 => 0,
                j => (j - 1).min(n - 2),
            },
        };
        let (x0, x1) = (self.nodes[i], self.nodes[i + 1]);
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        let h = x1 - x0;
        let t = ((x - x0) / h).clamp(0.0, 1.0);
        match self.interp {
            Interp::Linear => v0 + (v1 - v0) * t,
            Interp::CubicMonotone => {
                let (m0, m1) = (self.slopes[i], self.slopes[i + 1]);
                let t2 = t * t;
                let t3 = t2 * t;
                (2.0 * t3 - 3.0 * t2 + 1.0) * v0
                    + (t3 - 2.0 * t2 + t) * h * m0
                    + (-2.0 * t3 + 3.0 * t2) * v1
                    + (t3 - t2) * h * m1
            }
        }
    }

    /// Slopes for the Hermite form. High-order estimates clamped into the
    /// monotonicity region [0, 3 min(|d_left|, |d_right|)] relative to the
    /// adjacent secants; zero at local extrema of the data.
    fn limited_slopes(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let d: Vec<f64> = (0..n - 1)
            .map(|i| (self.values[i + 1] - self.values[i]) / (self.nodes[i + 1] - self.nodes[i]))
            .collect();
        if n == 2 {
            return vec![d[0], d[0]];
        }
        let mut m = vec![0.0; n];
        for i in 0..n {
            let raw = match self.step {
                Some(h) if n >= 4 => self.uniform_slope(i, h),
                _ if i == 0 => self.one_sided_slope(0, 1, 2),
                _ if i == n - 1 => self.one_sided_slope(n - 1, n - 2, n - 3),
                _ => {
                    // Secant average weighted by opposite interval lengths.
                    let (h0, h1) = (
                        self.nodes[i] - self.nodes[i - 1],
                        self.nodes[i + 1] - self.nodes[i],
                    );
                    (h1 * d[i - 1] + h0 * d[i]) / (h0 + h1)
                }
            };
            m[i] = limit_slope(
                raw,
                if i == 0 { d[0] } else { d[i - 1] },
                if i == n - 1 { d[n - 2] } else { d[i] },
            );
        }
        m
    }

    /// Finite-difference slope on a uniform grid, exact for cubics at the
    /// edges and fourth-order in the interior.
    fn uniform_slope(&self, i: usize, h: f64) -> f64 {
        let v = &self.values;
        let n = v.len();
        if i == 0 {
            (-11.0 * v[0] + 18.0 * v[1] - 9.0 * v[2] + 2.0 * v[3]) / (6.0 * h)
        } else if i == 1 {
            (-2.0 * v[0] - 3.0 * v[1] + 6.0 * v[2] - v[3]) / (6.0 * h)
        } else if i == n - 1 {
            (11.0 * v[n - 1] - 18.0 * v[n - 2] + 9.0 * v[n - 3] - 2.0 * v[n - 4]) / (6.0 * h)
        } else if i == n - 2 {
            (2.0 * v[n - 1] + 3.0 * v[n - 2] - 6.0 * v[n - 3] + v[n - 4]) / (6.0 * h)
        } else {
            (v[i - 2] - 8.0 * v[i - 1] + 8.0 * v[i + 1] - v[i + 2]) / (12.0 * h)
        }
    }

    /// Quadratic one-sided slope estimate at node i0 using i1, i2.
    fn one_sided_slope(&self, i0: usize, i1: usize, i2: usize) -> f64 {
        if self.nodes.len() < 3 {
            return (self.values[1] - self.values[0]) / (self.nodes[1] - self.nodes[0]);
        }
        let (x0, x1, x2) = (self.nodes[i0], self.nodes[i1], self.nodes[i2]);
        let (v0, v1, v2) = (self.values[i0], self.values[i1], self.values[i2]);
        v0 * (2.0 * x0 - x1 - x2) / ((x0 - x1) * (x0 - x2))
            + v1 * (x0 - x2) / ((x1 - x0) * (x1 - x2))
            + v2 * (x0 - x1) / ((x2 - x0) * (x2 - x1))
    }
}

/// Clamp a slope estimate so the Hermite piece stays monotone with respect
/// to the neighboring secants (slope/secant in [0,3] suffices).
fn limit_slope(raw: f64, d_left: f64, d_right: f64) -> f64 {
    if d_left * d_right < 0.0 {
        return 0.0;
    }
    let d = if d_left.abs() < d_right.abs() { d_left } else { d_right };
    if d == 0.0 {
        return 0.0;
    }
    if raw * d <= 0.0 {
        0.0
    } else if raw.abs() > 3.0 * d.abs() {
        3.0 * d
    } else {
        raw
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn reproduces_nodes_and_rejects_outside() {
        let g = GridFunction::from_fn(0.0, 2.0, 21, Interp::CubicMonotone, |x| x * x).unwrap();
        for (i, &x) in g.nodes().iter().enumerate() {
            assert_eq!(g.eval(x).unwrap(), g.values()[i]);
        }
        assert!(g.eval(-0.1).is_err());
        assert!(g.eval(2.1).is_err());
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(GridFunction::new(vec![0.0, 0.0, 1.0], vec![1.0; 3], Interp::Linear).is_err());
        assert!(GridFunction::new(vec![0.0, 1.0], vec![1.0; 3], Interp::Linear).is_err());
        assert!(GridFunction::new(vec![0.0], vec![1.0], Interp::Linear).is_err());
    }

    #[test]
    fn linear_is_exact_on_linear_data() {
        let g = GridFunction::from_fn(-1.0, 3.0, 9, Interp::Linear, |x| 2.5 * x - 1.0).unwrap();
        for i in 0..=40 {
            let x = -1.0 + 4.0 * i as f64 / 40.0;
            assert_abs_diff_eq!(g.eval(x).unwrap(), 2.5 * x - 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cubic_accuracy_on_smooth_function() {
        // exp is smooth and monotone; the limiter stays inactive and the
        // uniform-grid slopes give near fourth-order accuracy.
        let g = GridFunction::from_fn(0.0, 1.0, 101, Interp::CubicMonotone, f64::exp).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            worst = worst.max((g.eval(x).unwrap() - x.exp()).abs());
        }
        assert!(worst < 1e-8, "cubic error {worst:.3e}");
    }

    #[test]
    fn non_uniform_grid_interpolates() {
        let nodes = vec![0.0, 0.1, 0.35, 0.5, 1.1, 2.0];
        let values: Vec<f64> = nodes.iter().map(|&x: &f64| (2.0 * x).sin()).collect();
        let g = GridFunction::new(nodes, values, Interp::CubicMonotone).unwrap();
        assert_abs_diff_eq!(g.eval(0.4).unwrap(), (0.8f64).sin(), epsilon = 2e-2);
    }

    proptest! {
        #[test]
        fn monotone_data_give_monotone_interpolant(
            incs in proptest::collection::vec(0.0f64..2.0, 4..24),
            scale in 0.1f64..10.0,
        ) {
            let mut v = 0.0;
            let values: Vec<f64> = incs.iter().map(|d| { v += d; v }).collect();
            let nodes: Vec<f64> = (0..values.len()).map(|i| scale * i as f64 / values.len() as f64).collect();
            let g = GridFunction::new(nodes.clone(), values, Interp::CubicMonotone).unwrap();
            let mut prev = g.eval(nodes[0]).unwrap();
            let steps = 400;
            for s in 1..=steps {
                let x = nodes[0] + (g.hi() - g.lo()) * s as f64 / steps as f64;
                let cur = g.eval(x).unwrap();
                prop_assert!(cur >= prev - 1e-9, "not monotone at {x}: {cur} < {prev}");
                prev = cur;
            }
        }
    }
}
