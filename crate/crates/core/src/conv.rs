//! Second analytic route for both barriers on the nonnegative axis. The
//! renewal series is expanded in iterated convolutions of geometrically
//! rescaled scale functions; the resulting operator sums are finite when
//! the lower barrier is positive and truncate super-geometrically when it
//! is zero, so no fixed-point iteration is involved. Values obtained here
//! cross-check the kernel-solver route end to end.

use crate::error::{PsrError, Result};
use crate::exit::clamp_unit;
use crate::grid::{GridFunction, Interp};
use crate::levy::ProcessSpec;
use crate::scale::ScaleContext;

/// Rescaled scale function p^n W(p^n x) at the table's killing rate.
pub fn w_n(spec: ProcessSpec, q: f64, p: f64, n: u32, x: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PsrError::domain(format!(
            "retention fraction p must lie in (0, 1), got {p}"
        )));
    }
    let ctx = ScaleContext::new(spec, q)?;
    let pn = p.powi(n as i32);
    Ok(pn * ctx.w(pn * x))
}

/// Highest node count allowed for a level grid.
const MAX_LEVEL_POINTS: usize = 8193;
/// Levels the zero-barrier series may consume before the tail bound must
/// have triggered.
const MAX_LEVELS: usize = 48;
/// Relative size at which series terms count as exhausted.
const TERM_EPS: f64 = 1e-12;

/// Uniform-grid cache of the iterated convolutions
/// C_n = w_0 * w_1 * ... * w_n on [0, x_max], built level by level with
/// composite quadrature. Immutable once built; reads are concurrent-safe.
pub struct ConvTable {
    ctx: ScaleContext,
    p: f64,
    x_max: f64,
    levels: Vec<GridFunction>,
}

impl ConvTable {
    /// Builds levels 0..=n_max with `points` nodes each. Level 0 is the
    /// plain scale function; each next level is one convolution against
    /// the next rescaling.
    pub fn new(
        spec: ProcessSpec,
        q: f64,
        p: f64,
        x_max: f64,
        n_max: usize,
        points: usize,
    ) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(PsrError::domain(format!(
                "retention fraction p must lie in (0, 1), got {p}"
            )));
        }
        if !(x_max > 0.0) || !x_max.is_finite() {
            return Err(PsrError::domain(format!(
                "x_max must be positive and finite, got {x_max}"
            )));
        }
        if points < 33 || points % 2 == 0 || points > MAX_LEVEL_POINTS {
            return Err(PsrError::domain(format!(
                "level grids need an odd node count in [33, {MAX_LEVEL_POINTS}], got {points}"
            )));
        }
        if n_max >= MAX_LEVELS {
            return Err(PsrError::domain(format!(
                "requested {n_max} convolution levels, cap is {}",
                MAX_LEVELS - 1
            )));
        }
        let ctx = ScaleContext::new(spec, q)?;
        let h = x_max / (points - 1) as f64;
        let nodes: Vec<f64> = (0..points)
            .map(|i| {
                if i == points - 1 {
                    x_max
                } else {
                    i as f64 * h
                }
            })
            .collect();

        let mut levels: Vec<GridFunction> = Vec::with_capacity(n_max + 1);
        let mut prev: Vec<f64> = nodes.iter().map(|&x| ctx.w(x)).collect();
        levels.push(GridFunction::new(
            nodes.clone(),
            prev.clone(),
            Interp::CubicMonotone,
        )?);
        for n in 1..=n_max {
            // w_n sampled at the grid offsets once; the convolution then
            // reads both factors from caches.
            let pn = p.powi(n as i32);
            let wn: Vec<f64> = nodes.iter().map(|&d| pn * ctx.w(pn * d)).collect();
            let mut cur = vec![0.0f64; points];
            for (j, slot) in cur.iter_mut().enumerate() {
                *slot = prefix_convolution(&wn, &prev, h, j);
            }
            levels.push(GridFunction::new(
                nodes.clone(),
                cur.clone(),
                Interp::CubicMonotone,
            )?);
            prev = cur;
        }
        Ok(ConvTable {
            ctx,
            p,
            x_max,
            levels,
        })
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_max(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn rate(&self) -> f64 {
        self.ctx.q
    }

    pub fn retention(&self) -> f64 {
        self.p
    }

    /// Cached convolution level n at x.
    pub fn conv_level(&self, n: usize, x: f64) -> Result<f64> {
        if n >= self.levels.len() {
            return Err(PsrError::domain(format!(
                "level {n} beyond cached range 0..={}",
                self.levels.len() - 1
            )));
        }
        if !(0.0..=self.x_max * (1.0 + 1e-12)).contains(&x) {
            return Err(PsrError::domain(format!(
                "x={x} outside cached range [0, {}]",
                self.x_max
            )));
        }
        Ok(self.levels[n].eval_raw(x.min(self.x_max)))
    }

    fn level_at(&self, n: usize, x: f64) -> f64 {
        self.levels[n].eval_raw(x.clamp(0.0, self.x_max))
    }
}

/// Integral of wn(x_j - y) prev(y) over [0, x_j] on the uniform grid:
/// composite Simpson for an even panel count, Simpson plus a 3/8 block
/// for an odd one, a single trapezoid for one panel.
fn prefix_convolution(wn: &[f64], prev: &[f64], h: f64, j: usize) -> f64 {
    let f = |i: usize| wn[j - i] * prev[i];
    match j {
        0 => 0.0,
        1 => 0.5 * h * (f(0) + f(1)),
        _ => {
            let mut acc = 0.0;
            let simpson_end = if j % 2 == 0 { j } else { j - 3 };
            if simpson_end >= 2 {
                let mut s = f(0) + f(simpson_end);
                let mut i = 1;
                while i < simpson_end {
                    s += 4.0 * f(i);
                    if i + 1 < simpson_end {
                        s += 2.0 * f(i + 1);
                    }
                    i += 2;
                }
                acc += s * h / 3.0;
            }
            if j % 2 == 1 {
                let base = j - 3;
                acc += 3.0 * h / 8.0
                    * (f(base) + 3.0 * f(base + 1) + 3.0 * f(base + 2) + f(j));
            }
            acc
        }
    }
}

/// Composite Simpson over [lo, hi] with an odd node count.
fn simpson(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    debug_assert!(n >= 3 && n % 2 == 1);
    if hi <= lo {
        return 0.0;
    }
    let h = (hi - lo) / (n - 1) as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n - 1 {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// Odd node count proportional to the interval length.
fn odd_nodes(len: f64, per_unit: f64, min_n: usize) -> usize {
    let wanted = (len * per_unit).ceil() as usize + 1;
    let n = wanted.clamp(min_n, 513);
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// Series operator sum_k gamma^k int_0^{x - u p^{-k}} h(p^k (x-y) - z)
/// C_{k-1}(y) dy, with the k = 0 term read as h(x - z). For u > 0 the sum
/// is finite since the upper limits turn negative; for u = 0 it truncates
/// once terms fall below a relative tail threshold.
pub fn g_operator(
    table: &ConvTable,
    h: &impl Fn(f64) -> f64,
    gamma: f64,
    x: f64,
    u: f64,
    z: f64,
) -> Result<f64> {
    if !(x >= 0.0) || !(u >= 0.0) || !x.is_finite() || !u.is_finite() || !z.is_finite() {
        return Err(PsrError::domain(format!(
            "operator arguments need x, u >= 0 and finite z, got x={x}, u={u}, z={z}"
        )));
    }
    if x > table.x_max * (1.0 + 1e-12) {
        return Err(PsrError::domain(format!(
            "x={x} outside cached range [0, {}]",
            table.x_max
        )));
    }
    let mut acc = h(x - z);
    if gamma == 0.0 {
        return Ok(acc);
    }
    let mut gamma_k = 1.0;
    let mut small_streak = 0usize;
    for k in 1..=MAX_LEVELS {
        let upper = x - u * table.p.powi(-(k as i32));
        if upper <= 0.0 {
            // The remaining terms integrate over empty ranges; the sum
            // is complete.
            return Ok(acc);
        }
        if k - 1 > table.n_max() {
            return Err(PsrError::domain(format!(
                "series needs convolution level {} beyond cached range 0..={}",
                k - 1,
                table.n_max()
            )));
        }
        gamma_k *= gamma;
        let pk = table.p.powi(k as i32);
        let integrand = |y: f64| h(pk * (x - y) - z) * table.level_at(k - 1, y);
        // The driver may vanish or kink where its argument crosses 0, at
        // y = x - z p^{-k}; integrate the two sides separately.
        let kink = x - z / pk;
        let mut term = 0.0;
        if kink > 0.0 && kink < upper {
            term += simpson(&integrand, 0.0, kink, odd_nodes(kink, 256.0, 65));
            term += simpson(&integrand, kink, upper, odd_nodes(upper - kink, 256.0, 65));
        } else {
            term += simpson(&integrand, 0.0, upper, odd_nodes(upper, 256.0, 65));
        }
        term *= gamma_k;
        acc += term;
        if term.abs() <= TERM_EPS * (1.0 + acc.abs()) {
            small_streak += 1;
            if small_streak >= 2 {
                return Ok(acc);
            }
        } else {
            small_streak = 0;
        }
    }
    // Every level budget was spent with terms still above the tail
    // threshold and nonempty ranges.
    Err(PsrError::domain(
        "series did not exhaust within the cached convolution levels".to_string(),
    ))
}

/// Number of cached levels needed so that every series term for
/// arguments up to x_max with lower offset u is available.
fn levels_needed(u: f64, x_max: f64, p: f64) -> usize {
    if u <= 0.0 {
        return MAX_LEVELS - 1;
    }
    let mut k = 0usize;
    let mut bound = u;
    while bound < x_max && k < MAX_LEVELS {
        bound /= p;
        k += 1;
    }
    k
}

struct ConvProblem {
    table: ConvTable,
    ctx: ScaleContext,
    lambda: f64,
    p: f64,
    b: f64,
}

impl ConvProblem {
    fn new(spec: ProcessSpec, q: f64, lambda: f64, p: f64, b: f64, a: f64) -> Result<Self> {
        if !(q > 0.0) || !q.is_finite() || !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(PsrError::domain(format!(
                "rates must satisfy q > 0, lambda >= 0, got q={q}, lambda={lambda}"
            )));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(PsrError::domain(format!(
                "retention fraction p must lie in (0, 1), got {p}"
            )));
        }
        if !(b >= 0.0) || !(a > b) || !a.is_finite() {
            return Err(PsrError::domain(format!(
                "barriers must satisfy a > b >= 0 and be finite, got b={b}, a={a}"
            )));
        }
        let n_max = levels_needed(b, a, p).min(MAX_LEVELS - 1);
        let table = ConvTable::new(spec, q + lambda, p, a, n_max, 2049)?;
        let ctx = table.ctx;
        Ok(ConvProblem {
            table,
            ctx,
            lambda,
            p,
            b,
        })
    }

    fn w_scale(&self, t: f64) -> Result<f64> {
        let ctx = self.ctx;
        g_operator(
            &self.table,
            &|s| ctx.w(s),
            -self.lambda,
            t,
            self.b,
            self.b,
        )
    }

    /// Z-driven series minus the immediate-ruin band: resets from sources
    /// in [b, b/p) land below the barrier, and their weight enters as an
    /// integral of shifted W-series over that band. The shifted series
    /// vanishes for shifts above t, so the band truncates there.
    fn z_scale_with_band(&self, t: f64) -> Result<f64> {
        let ctx = self.ctx;
        let z_part = g_operator(
            &self.table,
            &|s| ctx.z(s),
            -self.lambda,
            t,
            self.b,
            self.b,
        )?;
        if self.lambda == 0.0 || self.b == 0.0 {
            return Ok(z_part);
        }
        let hi = (self.b / self.p).min(t);
        if hi <= self.b {
            return Ok(z_part);
        }
        // Each series term switches on at u = t p^k; cut the quadrature
        // there so every piece is smooth.
        let mut cuts = vec![self.b, hi];
        let mut c = t;
        loop {
            c *= self.p;
            if c <= self.b {
                break;
            }
            if c < hi {
                cuts.push(c);
            }
        }
        cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut band = 0.0;
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi - lo <= 1e-14 {
                continue;
            }
            // Arguments u in (b, t) stay inside the cached range, so the
            // inner series cannot fail; keep the closure total for the
            // quadrature regardless.
            let f = |u: f64| {
                g_operator(&self.table, &|s| ctx.w(s), -self.lambda, t, u, u).unwrap_or(0.0)
            };
            band += simpson(&f, lo, hi, odd_nodes(hi - lo, 256.0, 65));
        }
        Ok(z_part - self.lambda * band)
    }
}

/// E_x[e^{-q tau_a^+}; up before down] for 0 <= b < a via the convolution
/// series: the ratio of the W-driven series at x and a.
pub fn conv_exit_up(
    spec: ProcessSpec,
    q: f64,
    lambda: f64,
    p: f64,
    b: f64,
    a: f64,
    x: f64,
) -> Result<f64> {
    let prob = ConvProblem::new(spec, q, lambda, p, b, a)?;
    check_start(b, a, x)?;
    Ok(clamp_unit(prob.w_scale(x)? / prob.w_scale(a)?))
}

/// E_x[e^{-q tau_b^-}; down before up] for 0 <= b < a via the convolution
/// series: the banded Z-series combination vanishing at a.
pub fn conv_exit_down(
    spec: ProcessSpec,
    q: f64,
    lambda: f64,
    p: f64,
    b: f64,
    a: f64,
    x: f64,
) -> Result<f64> {
    let prob = ConvProblem::new(spec, q, lambda, p, b, a)?;
    check_start(b, a, x)?;
    let s_x = prob.z_scale_with_band(x)?;
    let s_a = prob.z_scale_with_band(a)?;
    let ratio = prob.w_scale(x)? / prob.w_scale(a)?;
    Ok(clamp_unit(s_x - ratio * s_a))
}

fn check_start(b: f64, a: f64, x: f64) -> Result<()> {
    if !(x >= b && x <= a) {
        return Err(PsrError::domain(format!("x={x} outside [{b}, {a}]")));
    }
    Ok(())
}
