//! Fixed-point solver for renewal equations of the form
//!
//! ```text
//! g(x) = h(x) + gamma int_{u1}^{u2} r(x,y) g(p y) dy
//! ```
//!
//! where r is a `KernelHandle`. The integral operator is a contraction when
//! |gamma| times its largest row mass is below 1 (for gamma in (-q, q) this
//! holds automatically since masses are bounded by 1/q), so Picard iteration
//! converges geometrically.
//!
//! The operator is discretized once per solve: one shared partition of
//! [u1, u2] whose boundaries include every grid node (each row's kernel has
//! a kink or jump at y = x, and every row abscissa is a node) and every
//! point y = node/p (where the composed argument p y crosses a node of the
//! iterate), refined to a panel width that resolves the kernel's exponential
//! scales. Row weights are kernel values times quadrature weights; sweeps
//! are then dense dot products against the iterate sampled at p y.

use crate::error::{PsrError, Result};
use crate::grid::GridFunction;
use crate::kernel::{KernelHandle, KernelKind};
use rayon::prelude::*;

pub use crate::grid::Interp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrature {
    Trapezoid,
    Simpson,
}

/// Discretization and iteration controls for the fixed-point solver.
#[derive(Debug, Clone, Copy)]
pub struct SolveConfig {
    /// Nodes for grids built by higher-level drivers; at least 33.
    pub grid_points: usize,
    pub quadrature: Quadrature,
    pub interp: Interp,
    /// Largest per-node relative change between sweeps that counts as
    /// converged; scale-free so solutions with a wide dynamic range
    /// converge at every magnitude.
    pub picard_tol: f64,
    pub max_iter: usize,
    /// Neglected-tail target when an unbounded domain is truncated.
    pub truncation_eps: f64,
    /// Multiplier on the truncation length, for robustness sweeps.
    pub truncation_scale: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            grid_points: 401,
            quadrature: Quadrature::Simpson,
            interp: Interp::CubicMonotone,
            picard_tol: 1e-10,
            max_iter: 200,
            truncation_eps: 1e-10,
            truncation_scale: 1.0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 33 {
            return Err(PsrError::domain(format!(
                "grid_points must be at least 33, got {}",
                self.grid_points
            )));
        }
        if matches!(self.quadrature, Quadrature::Simpson) && self.grid_points % 2 == 0 {
            return Err(PsrError::domain(format!(
                "grid_points must be odd under Simpson quadrature, got {}",
                self.grid_points
            )));
        }
        if !(self.picard_tol > 0.0) || !(self.truncation_eps > 0.0) {
            return Err(PsrError::domain("tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(PsrError::domain("max_iter must be positive"));
        }
        if !(self.truncation_scale >= 1.0) {
            return Err(PsrError::domain("truncation_scale must be at least 1"));
        }
        Ok(())
    }
}

/// A converged fixed point with its convergence diagnostics.
#[derive(Debug, Clone)]
pub struct Solved {
    pub g: GridFunction,
    /// Operator applications performed, including the residual check.
    pub iterations: usize,
    /// Sup-norm of one extra operator application on the returned iterate.
    pub residual: f64,
    /// Largest observed ratio of consecutive sweep changes.
    pub rate_estimate: f64,
    /// Largest closed-form row mass of the kernel over the grid.
    pub sup_mass: f64,
    /// Whether |gamma| < q held, the a-priori contraction condition.
    pub literal_contraction: bool,
}

fn validate_problem(
    k: &KernelHandle,
    h: &GridFunction,
    p: f64,
    u1: f64,
    u2: f64,
) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(PsrError::domain(format!(
            "retention fraction p must lie in (0, 1], got {p}"
        )));
    }
    if !(u1 <= u2) || !u1.is_finite() || !u2.is_finite() {
        return Err(PsrError::domain(format!(
            "integration interval [{u1}, {u2}] must be finite and ordered"
        )));
    }
    let slack = 1e-9 * (h.hi() - h.lo()).max(1.0);
    for (label, v) in [("u1", u1), ("u2", u2), ("p*u1", p * u1), ("p*u2", p * u2)] {
        if v < h.lo() - slack || v > h.hi() + slack {
            return Err(PsrError::domain(format!(
                "{label}={v} outside the grid domain [{}, {}]",
                h.lo(),
                h.hi()
            )));
        }
    }
    if h.lo() < k.b - slack || h.hi() > k.a + slack {
        return Err(PsrError::domain(format!(
            "grid domain [{}, {}] exceeds kernel domain [{}, {}]",
            h.lo(),
            h.hi(),
            k.b,
            k.a
        )));
    }
    Ok(())
}

/// Partition [lo, hi] with boundaries at every interior kink, subdivided to
/// panels no wider than `max_w`.
fn build_partition(lo: f64, hi: f64, kinks: &[f64], max_w: f64) -> Vec<f64> {
    let mut b: Vec<f64> = Vec::with_capacity(kinks.len() + 2);
    b.push(lo);
    b.push(hi);
    b.extend(kinks.iter().copied().filter(|&v| v > lo && v < hi));
    b.sort_by(f64::total_cmp);
    b.dedup_by(|a, prev| (*a - *prev).abs() <= 1e-12 * (1.0 + prev.abs()));
    let mut out = Vec::with_capacity(b.len() * 2);
    for w in b.windows(2) {
        let (s0, s1) = (w[0], w[1]);
        let parts = (((s1 - s0) / max_w).ceil()).max(1.0) as usize;
        for j in 0..parts {
            out.push(s0 + (s1 - s0) * j as f64 / parts as f64);
        }
    }
    out.push(hi);
    out
}

/// Quadrature points of the operator, shared by all rows, with panel
/// extents retained so rows can take the correct one-sided kernel limit at
/// panel boundaries.
struct RowPoints {
    ys: Vec<f64>,
    pys: Vec<f64>,
    wts: Vec<f64>,
    panel_lo: Vec<f64>,
    panel_hi: Vec<f64>,
}

fn row_points(bounds: &[f64], p: f64, quadrature: Quadrature) -> RowPoints {
    let mut pts = RowPoints {
        ys: Vec::new(),
        pys: Vec::new(),
        wts: Vec::new(),
        panel_lo: Vec::new(),
        panel_hi: Vec::new(),
    };
    for w in bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let d = hi - lo;
        if d <= 0.0 {
            continue;
        }
        let (ys, wts): (&[f64], &[f64]) = match quadrature {
            Quadrature::Simpson => (
                &[lo, 0.5 * (lo + hi), hi],
                &[d / 6.0, 4.0 * d / 6.0, d / 6.0],
            ),
            Quadrature::Trapezoid => (&[lo, hi], &[d / 2.0, d / 2.0]),
        };
        for (&y, &wt) in ys.iter().zip(wts) {
            pts.ys.push(y);
            pts.pys.push(p * y);
            pts.wts.push(wt);
            pts.panel_lo.push(lo);
            pts.panel_hi.push(hi);
        }
    }
    pts
}

/// Kernel value at (x, y) taking the limit from the side of x the enclosing
/// panel lies on, so panel-boundary points at the diagonal stay consistent
/// with the panel's integrand branch.
fn kernel_sided(k: &KernelHandle, x: f64, y: f64, panel_lo: f64, panel_hi: f64) -> f64 {
    if panel_hi <= x {
        k.eval_below(x, y)
    } else if panel_lo >= x {
        k.eval_above(x, y)
    } else {
        k.eval_raw(x, y)
    }
}

struct OperatorRows {
    pts: RowPoints,
    /// Row-major kernel-times-weight table, nodes x points.
    wk: Vec<f64>,
}

fn build_rows(
    k: &KernelHandle,
    nodes: &[f64],
    u1: f64,
    u2: f64,
    p: f64,
    cfg: &SolveConfig,
) -> OperatorRows {
    let ctx = &k.ctx;
    let rate = ctx.phi.max(-ctx.secondary_exponent()).max(1.0);
    let mean_h = (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64;
    let max_w = mean_h.min(0.25 / rate);
    let mut kinks: Vec<f64> = nodes.to_vec();
    if p < 1.0 {
        kinks.extend(nodes.iter().map(|&v| v / p));
    }
    let bounds = build_partition(u1, u2, &kinks, max_w);
    let pts = row_points(&bounds, p, cfg.quadrature);
    let jn = pts.ys.len();
    let mut wk = vec![0.0; nodes.len() * jn];
    wk.par_chunks_mut(jn).enumerate().for_each(|(i, row)| {
        let xi = nodes[i];
        for j in 0..jn {
            row[j] = pts.wts[j]
                * kernel_sided(k, xi, pts.ys[j], pts.panel_lo[j], pts.panel_hi[j]);
        }
    });
    OperatorRows { pts, wk }
}

/// One application of the operator to `f`: h + gamma K f on h's nodes.
pub fn apply_operator(
    k: &KernelHandle,
    h: &GridFunction,
    f: &GridFunction,
    gamma: f64,
    p: f64,
    u1: f64,
    u2: f64,
    cfg: &SolveConfig,
) -> Result<GridFunction> {
    cfg.validate()?;
    validate_problem(k, h, p, u1, u2)?;
    let slack = 1e-9 * (f.hi() - f.lo()).max(1.0);
    if p * u1 < f.lo() - slack || p * u2 > f.hi() + slack {
        return Err(PsrError::domain(format!(
            "composed arguments [{}, {}] outside the argument grid [{}, {}]",
            p * u1,
            p * u2,
            f.lo(),
            f.hi()
        )));
    }
    if gamma == 0.0 || u2 - u1 <= 0.0 {
        return Ok(h.clone());
    }
    let rows = build_rows(k, h.nodes(), u1, u2, p, cfg);
    let jn = rows.pts.ys.len();
    let fvals: Vec<f64> = rows.pts.pys.iter().map(|&z| f.eval_raw(z)).collect();
    let values: Vec<f64> = h
        .values()
        .iter()
        .enumerate()
        .map(|(i, &hv)| {
            let row = &rows.wk[i * jn..(i + 1) * jn];
            hv + gamma * dot(row, &fvals)
        })
        .collect();
    GridFunction::new(h.nodes().to_vec(), values, h.interp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Picard iteration to the fixed point g = h + gamma K(g(p .)).
pub fn solve_fixed_point(
    k: &KernelHandle,
    h: &GridFunction,
    gamma: f64,
    p: f64,
    u1: f64,
    u2: f64,
    cfg: &SolveConfig,
) -> Result<Solved> {
    cfg.validate()?;
    validate_problem(k, h, p, u1, u2)?;
    let literal_contraction = gamma.abs() < k.ctx.q;
    if gamma == 0.0 || u2 - u1 <= 0.0 {
        return Ok(Solved {
            g: h.clone(),
            iterations: 0,
            residual: 0.0,
            rate_estimate: 0.0,
            sup_mass: 0.0,
            literal_contraction,
        });
    }
    let sup_mass = h
        .nodes()
        .iter()
        .map(|&x| k.mass_raw(x, u1, u2))
        .fold(0.0f64, f64::max);
    let rho = gamma.abs() * sup_mass;
    if rho >= 1.0 - 1e-9 {
        return Err(PsrError::Convergence {
            iterations: 0,
            residual: rho,
            history: vec![],
        });
    }
    let rows = build_rows(k, h.nodes(), u1, u2, p, cfg);
    let jn = rows.pts.ys.len();
    let n = h.nodes().len();
    let mut g = h.clone();
    let mut new_vals = vec![0.0; n];
    let mut fvals = vec![0.0; jn];
    let mut history: Vec<f64> = Vec::new();
    let scale = h.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Nodes below this magnitude count as converged in absolute terms;
    // keeps exact zeros from stalling the relative test.
    let rel_floor = 1e-60 * scale.max(1.0);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_iter {
        sweeps += 1;
        for (fv, &z) in fvals.iter_mut().zip(&rows.pts.pys) {
            *fv = g.eval_raw(z);
        }
        let mut delta = 0.0f64;
        let mut delta_rel = 0.0f64;
        for i in 0..n {
            let row = &rows.wk[i * jn..(i + 1) * jn];
            new_vals[i] = h.values()[i] + gamma * dot(row, &fvals);
            let step = (new_vals[i] - g.values()[i]).abs();
            delta = delta.max(step);
            // Judge convergence per node relative to its own magnitude, so
            // exponentially small regions converge fully even when the
            // absolute sup-norm is carried by order-one nodes elsewhere.
            delta_rel = delta_rel.max(step / new_vals[i].abs().max(rel_floor));
        }
        g.set_values(&new_vals);
        history.push(delta);
        if delta_rel <= cfg.picard_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PsrError::Convergence {
            iterations: sweeps,
            residual: *history.last().unwrap(),
            history,
        });
    }
    // One extra application measures the residual and refines the iterate.
    for (fv, &z) in fvals.iter_mut().zip(&rows.pts.pys) {
        *fv = g.eval_raw(z);
    }
    let mut residual = 0.0f64;
    for i in 0..n {
        let row = &rows.wk[i * jn..(i + 1) * jn];
        new_vals[i] = h.values()[i] + gamma * dot(row, &fvals);
        residual = residual.max((new_vals[i] - g.values()[i]).abs());
    }
    g.set_values(&new_vals);
    let floor = 1e-13 * scale.max(1.0);
    let mut rate_estimate: f64 = 0.0;
    let mut usable = 0;
    for w in history.windows(2) {
        if w[0] > floor && w[1] > floor {
            rate_estimate = rate_estimate.max(w[1] / w[0]);
            usable += 1;
        }
    }
    if usable == 0 {
        rate_estimate = rho;
    }
    Ok(Solved {
        g,
        iterations: sweeps + 1,
        residual,
        rate_estimate,
        sup_mass,
        literal_contraction,
    })
}

/// The operator row at an arbitrary abscissa: h(x) + gamma int r(x,y) g(p y).
///
/// Used to read a solved fixed point off its own equation at a query point
/// instead of interpolating, which keeps the final value quadrature-exact.
pub fn operator_value_at(
    k: &KernelHandle,
    g: &GridFunction,
    h_at_x: f64,
    gamma: f64,
    p: f64,
    u1: f64,
    u2: f64,
    x: f64,
    cfg: &SolveConfig,
) -> Result<f64> {
    cfg.validate()?;
    if gamma == 0.0 || u2 - u1 <= 0.0 {
        return Ok(h_at_x);
    }
    validate_problem(k, g, p, u1, u2)?;
    let ctx = &k.ctx;
    let rate = ctx.phi.max(-ctx.secondary_exponent()).max(1.0);
    let mean_h = (g.hi() - g.lo()) / (g.nodes().len() - 1) as f64;
    let max_w = mean_h.min(0.25 / rate);
    let mut kinks: Vec<f64> = g.nodes().to_vec();
    kinks.push(x);
    if p < 1.0 {
        kinks.extend(g.nodes().iter().map(|&v| v / p));
    }
    let bounds = build_partition(u1, u2, &kinks, max_w);
    let pts = row_points(&bounds, p, cfg.quadrature);
    let mut acc = 0.0;
    for j in 0..pts.ys.len() {
        acc += pts.wts[j]
            * kernel_sided(k, x, pts.ys[j], pts.panel_lo[j], pts.panel_hi[j])
            * g.eval_raw(pts.pys[j]);
    }
    Ok(h_at_x + gamma * acc)
}

/// Truncated Neumann series h + sum_{k=1}^{terms} gamma^k K^k h by nested
/// Gauss-Legendre quadrature, splitting every level's integral at its own
/// diagonal. Independent of the Picard/interpolation machinery; cost grows
/// like J^terms per output node, so `terms` is capped at 4.
pub fn series_sum(
    k: &KernelHandle,
    h: &GridFunction,
    gamma: f64,
    p: f64,
    u1: f64,
    u2: f64,
    terms: usize,
) -> Result<GridFunction> {
    if terms > 4 {
        return Err(PsrError::domain(format!(
            "series_sum supports at most 4 terms, got {terms}"
        )));
    }
    validate_problem(k, h, p, u1, u2)?;
    let (gl_x, gl_w) = gauss_legendre(12);
    let max_w = (u2 - u1) / 4.0;
    let values: Vec<f64> = h
        .nodes()
        .par_iter()
        .zip(h.values().par_iter())
        .map(|(&x, &hv)| {
            let mut acc = hv;
            let mut coef = 1.0;
            for depth in 1..=terms {
                coef *= gamma;
                acc += coef * nested_level(k, h, p, u1, u2, x, depth, max_w, &gl_x, &gl_w);
            }
            acc
        })
        .collect();
    GridFunction::new(h.nodes().to_vec(), values, h.interp())
}

/// int_{u1}^{u2} r(z,y) F_{depth-1}(p y) dy with F_0 = h, by composite
/// Gauss-Legendre split at y = z.
#[allow(clippy::too_many_arguments)]
fn nested_level(
    k: &KernelHandle,
    h: &GridFunction,
    p: f64,
    u1: f64,
    u2: f64,
    z: f64,
    depth: usize,
    max_w: f64,
    gl_x: &[f64],
    gl_w: &[f64],
) -> f64 {
    let s = z.clamp(u1, u2);
    let mut acc = 0.0;
    for (lo, hi, below) in [(u1, s, true), (s, u2, false)] {
        if hi - lo <= 0.0 {
            continue;
        }
        let parts = (((hi - lo) / max_w).ceil()).max(1.0) as usize;
        for c in 0..parts {
            let clo = lo + (hi - lo) * c as f64 / parts as f64;
            let chi = lo + (hi - lo) * (c + 1) as f64 / parts as f64;
            let half = 0.5 * (chi - clo);
            let mid = 0.5 * (chi + clo);
            for (&t, &w) in gl_x.iter().zip(gl_w) {
                let y = mid + half * t;
                let kv = if below { k.eval_below(z, y) } else { k.eval_above(z, y) };
                let inner = if depth == 1 {
                    h.eval_raw(p * y)
                } else {
                    nested_level(k, h, p, u1, u2, p * y, depth - 1, max_w, gl_x, gl_w)
                };
                acc += w * half * kv * inner;
            }
        }
    }
    acc
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (pn, dpn) = legendre(n, x);
            let dx = pn / dpn;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dpn) = legendre(n, x);
        xs[i] = x;
        ws[i] = 2.0 / ((1.0 - x * x) * dpn * dpn);
    }
    (xs, ws)
}

/// P_n(x) and P_n'(x) via the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for m in 2..=n {
        let m = m as f64;
        let p2 = ((2.0 * m - 1.0) * x * p1 - (m - 1.0) * p0) / m;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Upper truncation point for a solve on a down-kernel's unbounded domain:
/// the smallest T = base + L with lambda times the neglected tail mass,
/// probed at the largest consumed abscissa max(p T, base), below
/// `truncation_eps`. Requires p < 1 so the contaminated top band (p T, T]
/// is never consumed by the operator.
pub fn truncated_upper_limit(
    k: &KernelHandle,
    gamma: f64,
    p: f64,
    base: f64,
    cfg: &SolveConfig,
) -> Result<f64> {
    cfg.validate()?;
    if k.kind != KernelKind::OneSidedDown {
        return Err(PsrError::domain("upper truncation needs a down kernel"));
    }
    let rate = k.ctx.phi.min(-k.ctx.secondary_exponent());
    let mut ell = 5.0 / rate;
    for _ in 0..200 {
        let t = base + ell;
        let probe = (p * t).max(base);
        let tail = gamma.abs() * k.mass_raw(probe, t, f64::INFINITY);
        if tail <= cfg.truncation_eps {
            // The tail only shrinks further out, so scaling the accepted
            // length keeps the bound.
            return Ok(base + ell * cfg.truncation_scale);
        }
        ell *= 1.4;
    }
    Err(PsrError::Convergence {
        iterations: 0,
        residual: f64::INFINITY,
        history: vec![],
    })
}

/// Lower truncation point for a solve on an up-kernel's unbounded domain;
/// mirror of `truncated_upper_limit`.
pub fn truncated_lower_limit(
    k: &KernelHandle,
    gamma: f64,
    p: f64,
    base: f64,
    cfg: &SolveConfig,
) -> Result<f64> {
    cfg.validate()?;
    if k.kind != KernelKind::OneSidedUp {
        return Err(PsrError::domain("lower truncation needs an up kernel"));
    }
    let rate = k.ctx.phi.min(-k.ctx.secondary_exponent());
    let mut ell = 5.0 / rate;
    for _ in 0..200 {
        let s = base - ell;
        let probe = (p * s).min(base);
        let tail = gamma.abs() * k.mass_raw(probe, f64::NEG_INFINITY, s);
        if tail <= cfg.truncation_eps {
            // The tail only shrinks further out, so scaling the accepted
            // length keeps the bound.
            return Ok(base - ell * cfg.truncation_scale);
        }
        ell *= 1.4;
    }
    Err(PsrError::Convergence {
        iterations: 0,
        residual: f64::INFINITY,
        history: vec![],
    })
}
