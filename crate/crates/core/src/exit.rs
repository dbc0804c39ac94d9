//! First-passage identities under partial resetting.
//!
//! Every query reduces to fixed-point solves of
//! g = h + lambda * int r(x,y) g(p y) dy on a region-dependent interval,
//! plus closed-form corrections for resets that exit immediately. All
//! kernels and scale functions run at the killing rate q + lambda; drivers
//! are normalised so iterates stay order one even on wide domains.

use crate::error::{PsrError, Result};
use crate::grid::{GridFunction, Interp};
use crate::kernel::KernelHandle;
use crate::levy::ProcessSpec;
use crate::resolvent::{
    operator_value_at, solve_fixed_point, truncated_lower_limit, truncated_upper_limit,
    SolveConfig, Solved,
};
use crate::scale::{classical_exit_down, classical_exit_up, ScaleContext};

/// Which barrier is hit first, and whether the other barrier is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    UpTwoSided,
    DownTwoSided,
    UpOneSided,
    DownOneSided,
}

/// Sign pattern of the barriers, which decides where resets can land.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Both barriers nonnegative: every reset lands at or below b.
    PosPos,
    /// Barriers straddle the origin: resets stay inside (b, a).
    PosNeg,
    /// Both barriers nonpositive: every reset lands at or above a.
    NegNeg,
}

/// Rate of the kernel supplying the immediate-exit mass inside the
/// two-sided corrections. `Shifted` follows the derivation (q + lambda);
/// `LiteralQ` reproduces a variant with the plain rate q for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerRate {
    Shifted,
    LiteralQ,
}

/// Switches between the derived identities and literal variants kept
/// around for adjudication.
#[derive(Debug, Clone, Copy)]
pub struct ExitOptions {
    pub hk_inner_rate: InnerRate,
    /// Multiply the one-sided-down renewal term by an extra lambda.
    pub one_sided_literal_lambda: bool,
}

impl Default for ExitOptions {
    fn default() -> Self {
        ExitOptions {
            hk_inner_rate: InnerRate::Shifted,
            one_sided_literal_lambda: false,
        }
    }
}

/// A single exit-probability query. Missing barriers are infinities.
#[derive(Debug, Clone, Copy)]
pub struct ExitQuery {
    pub spec: ProcessSpec,
    pub q: f64,
    pub lambda: f64,
    pub p: f64,
    pub b: f64,
    pub a: f64,
    pub x: f64,
    pub side: Side,
}

impl ExitQuery {
    pub fn up_two_sided(
        spec: ProcessSpec,
        q: f64,
        lambda: f64,
        p: f64,
        b: f64,
        a: f64,
        x: f64,
    ) -> Result<Self> {
        let query = ExitQuery {
            spec,
            q,
            lambda,
            p,
            b,
            a,
            x,
            side: Side::UpTwoSided,
        };
        query.validate()?;
        Ok(query)
    }

    pub fn down_two_sided(
        spec: ProcessSpec,
        q: f64,
        lambda: f64,
        p: f64,
        b: f64,
        a: f64,
        x: f64,
    ) -> Result<Self> {
        let query = ExitQuery {
            spec,
            q,
            lambda,
            p,
            b,
            a,
            x,
            side: Side::DownTwoSided,
        };
        query.validate()?;
        Ok(query)
    }

    pub fn up_one_sided(
        spec: ProcessSpec,
        q: f64,
        lambda: f64,
        p: f64,
        a: f64,
        x: f64,
    ) -> Result<Self> {
        let query = ExitQuery {
            spec,
            q,
            lambda,
            p,
            b: f64::NEG_INFINITY,
            a,
            x,
            side: Side::UpOneSided,
        };
        query.validate()?;
        Ok(query)
    }

    pub fn down_one_sided(
        spec: ProcessSpec,
        q: f64,
        lambda: f64,
        p: f64,
        b: f64,
        x: f64,
    ) -> Result<Self> {
        let query = ExitQuery {
            spec,
            q,
            lambda,
            p,
            b,
            a: f64::INFINITY,
            x,
            side: Side::DownOneSided,
        };
        query.validate()?;
        Ok(query)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0) || !self.q.is_finite() {
            return Err(PsrError::domain(format!(
                "killing rate q must be positive, got {}",
                self.q
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(PsrError::domain(format!(
                "reset rate lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(PsrError::domain(format!(
                "retention fraction p must lie strictly in (0, 1), got {}",
                self.p
            )));
        }
        if !self.x.is_finite() {
            return Err(PsrError::domain("starting point x must be finite"));
        }
        match self.side {
            Side::UpTwoSided | Side::DownTwoSided => {
                if !self.b.is_finite() || !self.a.is_finite() || !(self.b < self.a) {
                    return Err(PsrError::domain(format!(
                        "two-sided query needs finite b < a, got b={}, a={}",
                        self.b, self.a
                    )));
                }
                if self.x < self.b || self.x > self.a {
                    return Err(PsrError::domain(format!(
                        "x={} outside [{}, {}]",
                        self.x, self.b, self.a
                    )));
                }
            }
            Side::UpOneSided => {
                if !self.a.is_finite() || self.b != f64::NEG_INFINITY {
                    return Err(PsrError::domain(
                        "up-one-sided query needs finite a and b = -inf",
                    ));
                }
                if self.x > self.a {
                    return Err(PsrError::domain(format!(
                        "x={} above the barrier a={}",
                        self.x, self.a
                    )));
                }
            }
            Side::DownOneSided => {
                if !self.b.is_finite() || self.a != f64::INFINITY {
                    return Err(PsrError::domain(
                        "down-one-sided query needs finite b and a = +inf",
                    ));
                }
                if self.x < self.b {
                    return Err(PsrError::domain(format!(
                        "x={} below the barrier b={}",
                        self.x, self.b
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An evaluated query with solver diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct ExitValue {
    pub value: f64,
    /// Reset-crossing correction: the extra solve for two-sided queries in
    /// the all-negative (up) or all-positive (down) region, or the
    /// immediate reset-exit mass for one-sided queries; 0 when absent.
    pub correction: f64,
    /// Largest fixed-point residual among the solves involved.
    pub solver_residual: f64,
    pub region: Region,
}

/// Region of the barrier pair; 0 counts as nonnegative, so b = 0 is
/// classified PosPos and a = 0 (with b < 0) NegNeg.
pub fn classify_region(b: f64, a: f64) -> Region {
    if b >= 0.0 {
        Region::PosPos
    } else if a <= 0.0 {
        Region::NegNeg
    } else {
        Region::PosNeg
    }
}

/// Interval of reset sources y whose image p y stays inside (b, a):
/// [b max (b/p min a), a min (a/p max b)]. Outside it a reset exits
/// immediately, which the corrections account for.
fn renewal_interval(b: f64, a: f64, p: f64) -> (f64, f64) {
    let l = b.max((b / p).min(a));
    let u = a.min((a / p).max(b));
    (l, u)
}

/// Snap values a hair outside [0,1] back in; genuine violations pass
/// through untouched so the invariant tests can see them.
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v < 0.0 && v > -1e-9 {
        0.0
    } else if v > 1.0 && v < 1.0 + 1e-9 {
        1.0
    } else {
        v
    }
}

/// Grid sizes scale with the domain so wide (truncated one-sided) solves
/// keep the node density that `grid_points` implies on a span of 4, capped
/// to bound the quadrature tables.
const MAX_GRID_POINTS: usize = 8193;

fn span_grid_points(cfg: &SolveConfig, span: f64) -> usize {
    let per_unit = (cfg.grid_points - 1) as f64 / 4.0;
    let wanted = (span * per_unit).ceil() as usize + 1;
    let n = wanted.clamp(cfg.grid_points, MAX_GRID_POINTS);
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

fn sample(
    lo: f64,
    hi: f64,
    n: usize,
    interp: Interp,
    f: impl Fn(f64) -> Result<f64>,
) -> Result<GridFunction> {
    let step = (hi - lo) / (n - 1) as f64;
    let mut nodes = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let t = if i == n - 1 { hi } else { lo + step * i as f64 };
        nodes.push(t);
        values.push(f(t)?);
    }
    GridFunction::new(nodes, values, interp)
}

/// E_x[e^{-q tau_b^-}], no upper barrier, no resetting:
/// Z(x-b) - (q/Phi) W(x-b). The growing e^{Phi t} parts of the two terms
/// cancel exactly and the constant part vanishes by the partial-fraction
/// identity q (A/r1 + B/r2) = 1, leaving one decaying exponential.
pub(crate) fn classical_ruin(ctx: &ScaleContext, t: f64) -> f64 {
    let (_, cb) = ctx.coefficients();
    let r1 = ctx.phi;
    let r2 = ctx.secondary_exponent();
    ctx.q * cb * (r1 - r2) / (r1 * r2) * f64::exp(r2 * t.max(0.0))
}

/// Shared state for the two-sided identities at one parameter set: the
/// solved scale-function pieces can then be read at any x.
pub struct TwoSidedEngine {
    lambda: f64,
    p: f64,
    b: f64,
    a: f64,
    region: Region,
    cfg: SolveConfig,
    ctx: ScaleContext,
    kernel: KernelHandle,
    /// Kernel supplying the immediate-exit mass in the corrections.
    source: KernelHandle,
    l: f64,
    u: f64,
    w: Option<Solved>,
    z: Option<Solved>,
    /// Solve driven by the classical down identity directly. By linearity
    /// it equals Z(a-b) (z - w) of the two solves above, but without the
    /// subtraction, which for wide domains would demand more cancellation
    /// than doubles carry.
    d: Option<Solved>,
    corr: Option<Solved>,
}

struct Parts {
    w: bool,
    z: bool,
    d: bool,
    corr: bool,
}

impl TwoSidedEngine {
    /// Builds every piece needed by both up and down queries.
    pub fn new(
        spec: ProcessSpec,
        q: f64,
        lambda: f64,
        p: f64,
        b: f64,
        a: f64,
        cfg: &SolveConfig,
        opts: &ExitOptions,
    ) -> Result<Self> {
        Self::build(
            spec,
            q,
            lambda,
            p,
            b,
            a,
            cfg,
            opts,
            Parts {
                w: true,
                z: true,
                d: true,
                corr: true,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        spec: ProcessSpec,
        q: f64,
        lambda: f64,
        p: f64,
        b: f64,
        a: f64,
        cfg: &SolveConfig,
        opts: &ExitOptions,
        parts: Parts,
    ) -> Result<Self> {
        cfg.validate()?;
        let probe = ExitQuery {
            spec,
            q,
            lambda,
            p,
            b,
            a,
            x: b,
            side: Side::UpTwoSided,
        };
        probe.validate()?;
        let ctx = ScaleContext::new(spec, q + lambda)?;
        let kernel = KernelHandle::two_sided(ctx, b, a)?;
        let source = match opts.hk_inner_rate {
            InnerRate::Shifted => kernel,
            InnerRate::LiteralQ => KernelHandle::two_sided(ScaleContext::new(spec, q)?, b, a)?,
        };
        let (l, u) = renewal_interval(b, a, p);
        let region = classify_region(b, a);
        // With lambda = 0 or an empty renewal interval the solves are
        // skipped and every piece reads its driver exactly.
        let active = lambda > 0.0 && u - l > 1e-12 * (a - b);
        let mut engine = TwoSidedEngine {
            lambda,
            p,
            b,
            a,
            region,
            cfg: *cfg,
            ctx,
            kernel,
            source,
            l,
            u,
            w: None,
            z: None,
            d: None,
            corr: None,
        };
        if active {
            let n = span_grid_points(cfg, a - b);
            if parts.w {
                let h = sample(b, a, n, cfg.interp, |t| classical_exit_up(&ctx, b, a, t))?;
                engine.w = Some(solve_fixed_point(&kernel, &h, lambda, p, l, u, cfg)?);
            }
            if parts.z {
                let za = ctx.z(a - b);
                let h = sample(b, a, n, cfg.interp, |t| Ok(ctx.z(t - b) / za))?;
                engine.z = Some(solve_fixed_point(&kernel, &h, lambda, p, l, u, cfg)?);
            }
            if parts.d {
                let h = sample(b, a, n, cfg.interp, |t| classical_exit_down(&ctx, b, a, t))?;
                engine.d = Some(solve_fixed_point(&kernel, &h, lambda, p, l, u, cfg)?);
            }
            if parts.corr && !matches!(region, Region::PosNeg) {
                let h = sample(b, a, n, cfg.interp, |t| engine.correction_driver(t))?;
                engine.corr = Some(solve_fixed_point(&kernel, &h, lambda, p, l, u, cfg)?);
            }
        }
        Ok(engine)
    }

    fn check_x(&self, x: f64) -> Result<()> {
        if x < self.b || x > self.a {
            return Err(PsrError::domain(format!(
                "x={} outside [{}, {}]",
                x, self.b, self.a
            )));
        }
        Ok(())
    }

    /// Sources whose reset image exits immediately: above a in the
    /// all-negative region, below b in the all-positive region.
    fn correction_bounds(&self) -> (f64, f64) {
        match self.region {
            Region::NegNeg => (self.u, self.a),
            Region::PosPos => (self.b, self.l),
            Region::PosNeg => (self.b, self.b),
        }
    }

    fn correction_driver(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.correction_bounds();
        if hi <= lo {
            return Ok(0.0);
        }
        Ok(self.lambda * self.source.mass(t, lo, hi)?)
    }

    /// Operator row at x for a solved piece, or the driver itself when the
    /// solves are inactive.
    fn row(&self, solved: &Option<Solved>, h_at_x: f64, x: f64) -> Result<(f64, f64)> {
        match solved {
            None => Ok((h_at_x, 0.0)),
            Some(s) => {
                let v = operator_value_at(
                    &self.kernel,
                    &s.g,
                    h_at_x,
                    self.lambda,
                    self.p,
                    self.l,
                    self.u,
                    x,
                    &self.cfg,
                )?;
                Ok((v, s.residual))
            }
        }
    }

    /// W_p at x, normalised by W(a-b); equals W_p(x)/W_p(a) since the
    /// kernel row at a vanishes.
    fn w_ratio_at(&self, x: f64) -> Result<(f64, f64)> {
        self.row(&self.w, classical_exit_up(&self.ctx, self.b, self.a, x)?, x)
    }

    fn z_ratio_at(&self, x: f64) -> Result<(f64, f64)> {
        let za = self.ctx.z(self.a - self.b);
        let h = self.ctx.z((x - self.b).clamp(0.0, self.a - self.b)) / za;
        self.row(&self.z, h, x)
    }

    fn correction_at(&self, x: f64) -> Result<(f64, f64)> {
        self.row(&self.corr, self.correction_driver(x)?, x)
    }

    /// Partial-resetting scale function W_p(x; b, a).
    pub fn scale_w_at(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        let (ratio, _) = self.w_ratio_at(x)?;
        Ok(self.ctx.w(self.a - self.b) * ratio)
    }

    /// Partial-resetting scale function Z_p(x; b, a).
    pub fn scale_z_at(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        let (ratio, _) = self.z_ratio_at(x)?;
        Ok(self.ctx.z(self.a - self.b) * ratio)
    }

    /// E_x[e^{-q tau_a^+}; up before down], with the reset-crossing term in
    /// the all-negative region.
    pub fn up_at(&self, x: f64) -> Result<ExitValue> {
        self.check_x(x)?;
        let (ratio, rw) = self.w_ratio_at(x)?;
        let (corr, rc) = if matches!(self.region, Region::NegNeg) {
            self.correction_at(x)?
        } else {
            (0.0, 0.0)
        };
        Ok(ExitValue {
            value: clamp_unit(ratio + corr),
            correction: corr,
            solver_residual: rw.max(rc),
            region: self.region,
        })
    }

    /// E_x[e^{-q tau_b^-}; down before up], with the reset-crossing term in
    /// the all-positive region.
    pub fn down_at(&self, x: f64) -> Result<ExitValue> {
        self.check_x(x)?;
        let (corr, rc) = if matches!(self.region, Region::PosPos) {
            self.correction_at(x)?
        } else {
            (0.0, 0.0)
        };
        // Z_p(x) - (W_p(x)/W_p(a)) Z_p(a) evaluated through one solve on the
        // classical down driver; linearity makes the two forms equal while
        // the single solve never subtracts nearly equal large terms.
        let (pure, rs) = self.row(
            &self.d,
            classical_exit_down(&self.ctx, self.b, self.a, x)?,
            x,
        )?;
        Ok(ExitValue {
            value: clamp_unit(pure + corr),
            correction: corr,
            solver_residual: rs.max(rc),
            region: self.region,
        })
    }
}

/// Partial-resetting scale function W_p(x; b, a) at rate q + lambda.
#[allow(clippy::too_many_arguments)]
pub fn scale_w_p(
    spec: ProcessSpec,
    q: f64,
    lambda: f64,
    p: f64,
    b: f64,
    a: f64,
    x: f64,
    cfg: &SolveConfig,
) -> Result<f64> {
    let opts = ExitOptions::default();
    let engine = TwoSidedEngine::build(
        spec,
        q,
        lambda,
        p,
        b,
        a,
        cfg,
        &opts,
        Parts {
            w: true,
            z: false,
            d: false,
            corr: false,
        },
    )?;
    engine.scale_w_at(x)
}

/// Partial-resetting scale function Z_p(x; b, a) at rate q + lambda.
#[allow(clippy::too_many_arguments)]
pub fn scale_z_p(
    spec: ProcessSpec,
    q: f64,
    lambda: f64,
    p: f64,
    b: f64,
    a: f64,
    x: f64,
    cfg: &SolveConfig,
) -> Result<f64> {
    let opts = ExitOptions::default();
    let engine = TwoSidedEngine::build(
        spec,
        q,
        lambda,
        p,
        b,
        a,
        cfg,
        &opts,
        Parts {
            w: false,
            z: true,
            d: false,
            corr: false,
        },
    )?;
    engine.scale_z_at(x)
}

fn expect_side(query: &ExitQuery, side: Side) -> Result<()> {
    if query.side != side {
        return Err(PsrError::domain(format!(
            "query side {:?} does not match the requested identity {:?}",
            query.side, side
        )));
    }
    Ok(())
}

pub fn exit_up_two_sided(
    query: &ExitQuery,
    cfg: &SolveConfig,
    opts: &ExitOptions,
) -> Result<ExitValue> {
    query.validate()?;
    expect_side(query, Side::UpTwoSided)?;
    let engine = TwoSidedEngine::build(
        query.spec,
        query.q,
        query.lambda,
        query.p,
        query.b,
        query.a,
        cfg,
        opts,
        Parts {
            w: true,
            z: false,
            d: false,
            corr: true,
        },
    )?;
    engine.up_at(query.x)
}

pub fn exit_down_two_sided(
    query: &ExitQuery,
    cfg: &SolveConfig,
    opts: &ExitOptions,
) -> Result<ExitValue> {
    query.validate()?;
    expect_side(query, Side::DownTwoSided)?;
    let engine = TwoSidedEngine::build(
        query.spec,
        query.q,
        query.lambda,
        query.p,
        query.b,
        query.a,
        cfg,
        opts,
        Parts {
            w: false,
            z: false,
            d: true,
            corr: true,
        },
    )?;
    engine.down_at(query.x)
}

/// E_x[e^{-q tau_b^-}; tau_b^- < inf], no upper barrier. The unbounded
/// domain is truncated where the neglected kernel tail mass drops below
/// the configured target.
pub fn exit_down_one_sided(
    query: &ExitQuery,
    cfg: &SolveConfig,
    opts: &ExitOptions,
) -> Result<ExitValue> {
    query.validate()?;
    cfg.validate()?;
    expect_side(query, Side::DownOneSided)?;
    let (spec, q, lambda, p, b, x) = (
        query.spec,
        query.q,
        query.lambda,
        query.p,
        query.b,
        query.x,
    );
    let region = classify_region(b, f64::INFINITY);
    let ctx = ScaleContext::new(spec, q + lambda)?;
    let kernel = KernelHandle::one_sided_down(ctx, b)?;
    // Sources in [b, u1] reset to or below b and exit at once.
    let u1 = b.max(b / p);
    let driver = |t: f64| -> Result<f64> {
        let mut v = classical_ruin(&ctx, t - b);
        if u1 > b {
            v += lambda * kernel.mass(t, b, u1)?;
        }
        Ok(v)
    };
    let correction = if u1 > b {
        lambda * kernel.mass(x, b, u1)?
    } else {
        0.0
    };
    if lambda == 0.0 {
        return Ok(ExitValue {
            value: clamp_unit(driver(x)?),
            correction,
            solver_residual: 0.0,
            region,
        });
    }
    let cut = truncated_upper_limit(&kernel, lambda, p, x.max(u1).max(0.0), cfg)?;
    let n = span_grid_points(cfg, cut - b);
    let h = sample(b, cut, n, cfg.interp, driver)?;
    let solved = solve_fixed_point(&kernel, &h, lambda, p, u1, cut, cfg)?;
    let h_x = driver(x)?;
    let fixed = operator_value_at(&kernel, &solved.g, h_x, lambda, p, u1, cut, x, cfg)?;
    let value = if opts.one_sided_literal_lambda {
        // Literal display variant: an extra factor lambda on the renewal
        // term. Kept only for comparison against the derived form.
        h_x + lambda * (fixed - h_x)
    } else {
        fixed
    };
    Ok(ExitValue {
        value: clamp_unit(value),
        correction,
        solver_residual: solved.residual,
        region,
    })
}

/// E_x[e^{-q tau_a^+}], no lower barrier; mirror of the downward case.
pub fn exit_up_one_sided(
    query: &ExitQuery,
    cfg: &SolveConfig,
    _opts: &ExitOptions,
) -> Result<ExitValue> {
    query.validate()?;
    cfg.validate()?;
    expect_side(query, Side::UpOneSided)?;
    let (spec, q, lambda, p, a, x) = (
        query.spec,
        query.q,
        query.lambda,
        query.p,
        query.a,
        query.x,
    );
    let region = classify_region(f64::NEG_INFINITY, a);
    let ctx = ScaleContext::new(spec, q + lambda)?;
    let kernel = KernelHandle::one_sided_up(ctx, a)?;
    // Sources in [u2, a] reset to or above a and exit at once.
    let u2 = a.min(a / p);
    let driver = |t: f64| -> Result<f64> {
        let mut v = f64::exp(-ctx.phi * (a - t).max(0.0));
        if u2 < a {
            v += lambda * kernel.mass(t, u2, a)?;
        }
        Ok(v)
    };
    let correction = if u2 < a {
        lambda * kernel.mass(x, u2, a)?
    } else {
        0.0
    };
    if lambda == 0.0 {
        return Ok(ExitValue {
            value: clamp_unit(driver(x)?),
            correction,
            solver_residual: 0.0,
            region,
        });
    }
    let cut = truncated_lower_limit(&kernel, lambda, p, x.min(u2).min(0.0), cfg)?;
    let n = span_grid_points(cfg, a - cut);
    let h = sample(cut, a, n, cfg.interp, driver)?;
    let solved = solve_fixed_point(&kernel, &h, lambda, p, cut, u2, cfg)?;
    let value = operator_value_at(&kernel, &solved.g, driver(x)?, lambda, p, cut, u2, x, cfg)?;
    Ok(ExitValue {
        value: clamp_unit(value),
        correction,
        solver_residual: solved.residual,
        region,
    })
}

/// Evaluates a query with the packaged identities.
pub fn evaluate(query: &ExitQuery, cfg: &SolveConfig, opts: &ExitOptions) -> Result<ExitValue> {
    match query.side {
        Side::UpTwoSided => exit_up_two_sided(query, cfg, opts),
        Side::DownTwoSided => exit_down_two_sided(query, cfg, opts),
        Side::UpOneSided => exit_up_one_sided(query, cfg, opts),
        Side::DownOneSided => exit_down_one_sided(query, cfg, opts),
    }
}

/// Independent assembly of the two-sided identities: one solve whose
/// driver carries the classical exit identity plus the region's
/// immediate reset-exit mass, bypassing the scale-function decomposition
/// and its corrections. Must agree with the packaged path.
pub fn direct_exit_two_sided(query: &ExitQuery, cfg: &SolveConfig) -> Result<ExitValue> {
    query.validate()?;
    cfg.validate()?;
    let up = match query.side {
        Side::UpTwoSided => true,
        Side::DownTwoSided => false,
        _ => {
            return Err(PsrError::domain(
                "direct assembly only covers two-sided queries",
            ))
        }
    };
    let (spec, q, lambda, p, b, a, x) = (
        query.spec,
        query.q,
        query.lambda,
        query.p,
        query.b,
        query.a,
        query.x,
    );
    let region = classify_region(b, a);
    let ctx = ScaleContext::new(spec, q + lambda)?;
    let kernel = KernelHandle::two_sided(ctx, b, a)?;
    let (l, u) = renewal_interval(b, a, p);
    let mass_bounds = match (up, region) {
        (true, Region::NegNeg) => Some((u, a)),
        (false, Region::PosPos) => Some((b, l)),
        _ => None,
    };
    let driver = |t: f64| -> Result<f64> {
        let mut v = if up {
            classical_exit_up(&ctx, b, a, t)?
        } else {
            classical_exit_down(&ctx, b, a, t)?
        };
        if let Some((lo, hi)) = mass_bounds {
            if hi > lo {
                v += lambda * kernel.mass(t, lo, hi)?;
            }
        }
        Ok(v)
    };
    let correction = match mass_bounds {
        Some((lo, hi)) if hi > lo => lambda * kernel.mass(x, lo, hi)?,
        _ => 0.0,
    };
    let active = lambda > 0.0 && u - l > 1e-12 * (a - b);
    if !active {
        return Ok(ExitValue {
            value: clamp_unit(driver(x)?),
            correction,
            solver_residual: 0.0,
            region,
        });
    }
    let n = span_grid_points(cfg, a - b);
    let h = sample(b, a, n, cfg.interp, driver)?;
    let solved = solve_fixed_point(&kernel, &h, lambda, p, l, u, cfg)?;
    let value = operator_value_at(&kernel, &solved.g, driver(x)?, lambda, p, l, u, x, cfg)?;
    Ok(ExitValue {
        value: clamp_unit(value),
        correction,
        solver_residual: solved.residual,
        region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolvent::series_sum;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bm(mu: f64, sigma: f64) -> ProcessSpec {
        ProcessSpec::brownian(mu, sigma).unwrap()
    }

    fn cl() -> ProcessSpec {
        ProcessSpec::cramer_lundberg(2.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn rejects_malformed_queries() {
        let s = bm(0.0, 1.0);
        assert!(ExitQuery::up_two_sided(s, 0.0, 0.1, 0.5, 0.0, 1.0, 0.5).is_err());
        assert!(ExitQuery::up_two_sided(s, 0.5, -0.1, 0.5, 0.0, 1.0, 0.5).is_err());
        assert!(ExitQuery::up_two_sided(s, 0.5, 0.1, 1.0, 0.0, 1.0, 0.5).is_err());
        assert!(ExitQuery::up_two_sided(s, 0.5, 0.1, 0.5, 1.0, 0.0, 0.5).is_err());
        assert!(ExitQuery::up_two_sided(s, 0.5, 0.1, 0.5, 0.0, 1.0, 1.5).is_err());
        assert!(ExitQuery::up_one_sided(s, 0.5, 0.1, 0.5, 1.0, 2.0).is_err());
        assert!(ExitQuery::down_one_sided(s, 0.5, 0.1, 0.5, 1.0, 0.0).is_err());

        let query = ExitQuery::down_two_sided(s, 0.5, 0.1, 0.5, 0.0, 1.0, 0.5).unwrap();
        let cfg = SolveConfig::default();
        assert!(exit_up_two_sided(&query, &cfg, &ExitOptions::default()).is_err());
    }

    #[test]
    fn region_tie_break_counts_zero_as_nonnegative() {
        assert_eq!(classify_region(0.0, 1.0), Region::PosPos);
        assert_eq!(classify_region(-1.0, 0.0), Region::NegNeg);
        assert_eq!(classify_region(-1.0, 1.0), Region::PosNeg);
        assert_eq!(classify_region(f64::NEG_INFINITY, 0.5), Region::PosNeg);
        assert_eq!(classify_region(0.5, f64::INFINITY), Region::PosPos);
    }

    #[test]
    fn lambda_zero_matches_classical_identities() {
        let cfg = SolveConfig::default();
        let opts = ExitOptions::default();
        for spec in [bm(0.3, 1.2), cl()] {
            let (q, b, a) = (0.45, -0.4, 1.1);
            let ctx = ScaleContext::new(spec, q).unwrap();
            for i in 0..5 {
                let x = b + (a - b) * i as f64 / 4.0;
                let up = ExitQuery::up_two_sided(spec, q, 0.0, 0.5, b, a, x).unwrap();
                let down = ExitQuery::down_two_sided(spec, q, 0.0, 0.5, b, a, x).unwrap();
                let got_up = evaluate(&up, &cfg, &opts).unwrap();
                let got_down = evaluate(&down, &cfg, &opts).unwrap();
                let want_up = classical_exit_up(&ctx, b, a, x).unwrap();
                let want_down = classical_exit_down(&ctx, b, a, x).unwrap();
                assert_abs_diff_eq!(got_up.value, want_up, epsilon = 1e-12);
                assert_abs_diff_eq!(got_down.value, want_down, epsilon = 1e-12);
                assert_eq!(got_up.solver_residual, 0.0);

                let up1 = ExitQuery::up_one_sided(spec, q, 0.0, 0.5, a, x).unwrap();
                let got = evaluate(&up1, &cfg, &opts).unwrap();
                assert_abs_diff_eq!(
                    got.value,
                    f64::exp(-ctx.phi * (a - x)),
                    epsilon = 1e-12
                );

                let down1 = ExitQuery::down_one_sided(spec, q, 0.0, 0.5, b, x).unwrap();
                let got = evaluate(&down1, &cfg, &opts).unwrap();
                let naive = ctx.z(x - b) - ctx.q / ctx.phi * ctx.w(x - b);
                assert_abs_diff_eq!(got.value, naive, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn stable_ruin_formula_matches_naive_difference() {
        for spec in [bm(0.3, 1.2), bm(-0.4, 0.8), cl()] {
            let ctx = ScaleContext::new(spec, 0.37).unwrap();
            for t in [0.0, 0.3, 1.5, 4.0] {
                let naive = ctx.z(t) - ctx.q / ctx.phi * ctx.w(t);
                assert_abs_diff_eq!(classical_ruin(&ctx, t), naive, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn barrier_starts_are_exact() {
        let cfg = SolveConfig::default();
        let opts = ExitOptions::default();
        let s = bm(0.0, 1.0);

        let up = ExitQuery::up_two_sided(s, 0.5, 0.2, 0.5, -0.5, 1.0, 1.0).unwrap();
        assert_eq!(evaluate(&up, &cfg, &opts).unwrap().value, 1.0);

        let down = ExitQuery::down_two_sided(s, 0.5, 0.2, 0.5, -0.5, 1.0, -0.5).unwrap();
        assert_abs_diff_eq!(evaluate(&down, &cfg, &opts).unwrap().value, 1.0, epsilon = 1e-14);

        let up1 = ExitQuery::up_one_sided(s, 0.5, 0.2, 0.5, 0.75, 0.75).unwrap();
        assert_eq!(evaluate(&up1, &cfg, &opts).unwrap().value, 1.0);

        let down1 = ExitQuery::down_one_sided(s, 0.5, 0.2, 0.5, 0.25, 0.25).unwrap();
        assert_abs_diff_eq!(evaluate(&down1, &cfg, &opts).unwrap().value, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn empty_renewal_interval_collapses_to_plain_scale_functions() {
        // b p^{-1} = 2 > a, so every reset from [b, a] lands below b and
        // the renewal interval [a, a] carries no integral.
        let cfg = SolveConfig::default();
        let opts = ExitOptions::default();
        let (s, q, lambda, p, b, a) = (bm(0.0, 1.0), 0.5, 0.2, 0.5, 1.0, 1.5);
        let ctx = ScaleContext::new(s, q + lambda).unwrap();
        let x = 1.2;

        let w = scale_w_p(s, q, lambda, p, b, a, x, &cfg).unwrap();
        assert_abs_diff_eq!(w, ctx.w(x - b), epsilon = 1e-12 * ctx.w(x - b));
        let z = scale_z_p(s, q, lambda, p, b, a, x, &cfg).unwrap();
        assert_abs_diff_eq!(z, ctx.z(x - b), epsilon = 1e-12 * ctx.z(x - b));

        let up = ExitQuery::up_two_sided(s, q, lambda, p, b, a, x).unwrap();
        let got = evaluate(&up, &cfg, &opts).unwrap();
        let want = classical_exit_up(&ctx, b, a, x).unwrap();
        assert_abs_diff_eq!(got.value, want, epsilon = 1e-12);

        // Every reset exits below, so the down identity gains the full
        // interval mass on top of the classical value.
        let down = ExitQuery::down_two_sided(s, q, lambda, p, b, a, x).unwrap();
        let got = evaluate(&down, &cfg, &opts).unwrap();
        let kernel = KernelHandle::two_sided(ctx, b, a).unwrap();
        let want = classical_exit_down(&ctx, b, a, x).unwrap()
            + lambda * kernel.mass(x, b, a).unwrap();
        assert_abs_diff_eq!(got.value, want, epsilon = 1e-12);
        assert!(got.correction > 0.0);
    }

    #[test]
    fn active_renewal_changes_the_classical_value() {
        let cfg = SolveConfig::default();
        let opts = ExitOptions::default();
        let (s, q, lambda, p, b, a, x) = (bm(0.0, 1.0), 0.5, 0.2, 0.5, 0.0, 2.0, 1.0);
        let ctx = ScaleContext::new(s, q + lambda).unwrap();
        let up = ExitQuery::up_two_sided(s, q, lambda, p, b, a, x).unwrap();
        let got = evaluate(&up, &cfg, &opts).unwrap();
        let classical = classical_exit_up(&ctx, b, a, x).unwrap();
        assert!((got.value - classical).abs() > 1e-4);
        assert!(got.solver_residual > 0.0 && got.solver_residual < 1e-9);
    }

    #[test]
    fn w_p_solve_matches_series_oracle() {
        let (s, q, lambda, p, b, a) = (bm(0.0, 1.0), 0.5, 0.1, 0.5, 0.0, 2.0);
        let cfg = SolveConfig {
            grid_points: 201,
            ..SolveConfig::default()
        };
        let ctx = ScaleContext::new(s, q + lambda).unwrap();
        let kernel = KernelHandle::two_sided(ctx, b, a).unwrap();
        let (l, u) = renewal_interval(b, a, p);
        let h = sample(b, a, 201, cfg.interp, |t| {
            classical_exit_up(&ctx, b, a, t)
        })
        .unwrap();
        let solved = solve_fixed_point(&kernel, &h, lambda, p, l, u, &cfg).unwrap();
        let series = series_sum(&kernel, &h, lambda, p, l, u, 3).unwrap();
        let rho = lambda / (q + lambda);
        let tail = rho.powi(4) / (1.0 - rho);
        let worst = solved
            .g
            .values()
            .iter()
            .zip(series.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= tail + 1e-6, "worst {worst} vs tail bound {tail}");

        // The packaged scale function is the same solve rescaled by W(a-b).
        let w_at_x = scale_w_p(s, q, lambda, p, b, a, 1.0, &cfg).unwrap();
        let direct = ctx.w(a - b) * solved.g.eval(1.0).unwrap();
        assert_abs_diff_eq!(w_at_x, direct, epsilon = 1e-8 * direct.abs());
    }

    #[test]
    fn direct_assembly_agrees_with_packaged_identities() {
        let cfg = SolveConfig::default();
        let opts = ExitOptions::default();
        let cases = [
            (bm(0.0, 1.0), 0.5, 0.2, 0.5, 0.25, 2.0, 1.0),
            (bm(0.2, 1.0), 0.4, 0.3, 0.6, -2.0, -0.25, -1.0),
            (cl(), 0.3, 0.2, 0.5, -1.0, 1.5, 0.4),
        ];
        for (s, q, lambda, p, b, a, x) in cases {
            let up = ExitQuery::up_two_sided(s, q, lambda, p, b, a, x).unwrap();
            let packaged = evaluate(&up, &cfg, &opts).unwrap();
            let direct = direct_exit_two_sided(&up, &cfg).unwrap();
            assert_abs_diff_eq!(packaged.value, direct.value, epsilon = 1e-5);

            let down = ExitQuery::down_two_sided(s, q, lambda, p, b, a, x).unwrap();
            let packaged = evaluate(&down, &cfg, &opts).unwrap();
            let direct = direct_exit_two_sided(&down, &cfg).unwrap();
            assert_abs_diff_eq!(packaged.value, direct.value, epsilon = 1e-5);
        }
    }

    #[test]
    fn down_value_matches_scale_function_decomposition() {
        let cfg = SolveConfig::default();
        let opts = ExitOptions::default();
        let cases = [
            (bm(0.0, 1.0), 0.5, 0.3, 0.5, 0.25, 2.0, 1.0),
            (cl(), 0.3, 0.2, 0.6, -1.0, 1.5, 0.4),
        ];
        for (s, q, lambda, p, b, a, x) in cases {
            let wp_x = scale_w_p(s, q, lambda, p, b, a, x, &cfg).unwrap();
            let wp_a = scale_w_p(s, q, lambda, p, b, a, a, &cfg).unwrap();
            let zp_x = scale_z_p(s, q, lambda, p, b, a, x, &cfg).unwrap();
            let zp_a = scale_z_p(s, q, lambda, p, b, a, a, &cfg).unwrap();
            let query = ExitQuery::down_two_sided(s, q, lambda, p, b, a, x).unwrap();
            let got = evaluate(&query, &cfg, &opts).unwrap();
            // The solves behind the scale functions and behind the fused
            // driver share grid and quadrature, so the identity holds to
            // solver tolerance, not merely discretisation error.
            let composed = zp_x - (wp_x / wp_a) * zp_a;
            assert_abs_diff_eq!(got.value - got.correction, composed, epsilon = 1e-9);
        }
    }

    #[test]
    fn literal_variants_are_computable_and_bounded() {
        let cfg = SolveConfig::default();
        let shifted = ExitOptions::default();
        let literal_rate = ExitOptions {
            hk_inner_rate: InnerRate::LiteralQ,
            ..shifted
        };
        let (s, q, lambda, p) = (bm(0.0, 1.0), 0.5, 0.3, 0.5);

        let down = ExitQuery::down_two_sided(s, q, lambda, p, 0.25, 2.0, 1.0).unwrap();
        let v_shifted = evaluate(&down, &cfg, &shifted).unwrap();
        let v_literal = evaluate(&down, &cfg, &literal_rate).unwrap();
        assert!(v_literal.value >= 0.0 && v_literal.value <= 1.0);
        // The rate-q mass dominates the rate-(q+lambda) mass, so the
        // literal correction is at least the derived one.
        assert!(v_literal.correction >= v_shifted.correction - 1e-12);

        let literal_lambda = ExitOptions {
            one_sided_literal_lambda: true,
            ..shifted
        };
        let down1 = ExitQuery::down_one_sided(s, q, lambda, p, 0.0, 1.0).unwrap();
        let v_default = evaluate(&down1, &cfg, &shifted).unwrap();
        let v_lit = evaluate(&down1, &cfg, &literal_lambda).unwrap();
        assert!(v_lit.value >= 0.0 && v_lit.value <= 1.0);
        // lambda < 1 shrinks the (positive) renewal term.
        assert!(v_lit.value <= v_default.value + 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]
        #[test]
        fn bounds_hold_and_sides_sum_below_one(
            mu in -0.5f64..0.5,
            q in 0.2f64..1.0,
            lambda in 0.0f64..0.5,
            p in 0.1f64..0.9,
            b in -1.5f64..0.75,
            width in 0.5f64..2.5,
            frac in 0.05f64..0.95,
        ) {
            let cfg = SolveConfig { grid_points: 101, ..SolveConfig::default() };
            let opts = ExitOptions::default();
            let a = b + width;
            let x = b + frac * width;
            let engine = TwoSidedEngine::new(bm(mu, 1.0), q, lambda, p, b, a, &cfg, &opts).unwrap();
            let up = engine.up_at(x).unwrap();
            let down = engine.down_at(x).unwrap();
            prop_assert!(up.value >= 0.0 && up.value <= 1.0 + 1e-9);
            prop_assert!(down.value >= 0.0 && down.value <= 1.0 + 1e-9);
            prop_assert!(up.value + down.value <= 1.0 + 1e-8);
        }
    }
}
