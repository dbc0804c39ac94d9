//! Exit identities when every reset sends the process exactly to 0, the
//! limiting regime of vanishing retention. Everything here is closed form:
//! the renewal series collapses to a geometric series in the kernel mass,
//! so these values double as small-retention oracles for the solver.

use crate::error::{PsrError, Result};
use crate::exit::{classical_ruin, clamp_unit, classify_region, ExitValue, Region};
use crate::kernel::KernelHandle;
use crate::levy::ProcessSpec;
use crate::scale::{classical_exit_down, classical_exit_up, ScaleContext};

/// Barrier pair and rates for the reset-to-zero identities.
///
/// `lambda = 0` is allowed and reduces every operation to its classical
/// no-resetting counterpart.
#[derive(Debug, Clone, Copy)]
pub struct TotalResetContext {
    pub spec: ProcessSpec,
    pub q: f64,
    pub lambda: f64,
    pub b: f64,
    pub a: f64,
}

impl TotalResetContext {
    pub fn new(spec: ProcessSpec, q: f64, lambda: f64, b: f64, a: f64) -> Result<Self> {
        let ctx = TotalResetContext {
            spec,
            q,
            lambda,
            b,
            a,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        check_rates(self.q, self.lambda)?;
        if !self.b.is_finite() || !self.a.is_finite() || !(self.a > self.b) {
            return Err(PsrError::domain(format!(
                "barriers must be finite with a > b, got b={}, a={}",
                self.b, self.a
            )));
        }
        Ok(())
    }

    fn scale_ctx(&self) -> Result<ScaleContext> {
        ScaleContext::new(self.spec, self.q + self.lambda)
    }

    fn kernel(&self) -> Result<KernelHandle> {
        KernelHandle::two_sided(self.scale_ctx()?, self.b, self.a)
    }
}

fn check_rates(q: f64, lambda: f64) -> Result<()> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(PsrError::domain(format!("q must be positive, got {q}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(PsrError::domain(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    Ok(())
}

/// Geometric series over reset cycles started from x: each cycle
/// contributes lambda times the kernel mass and every reset restarts at 0.
/// The denominator stays at least q/(q+lambda) because the per-cycle mass
/// is at most lambda/(q+lambda); violating that means the closed forms
/// degenerated and the value cannot be trusted.
fn reset_series(k: &KernelHandle, lambda: f64, x: f64, u1: f64, u2: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let num = lambda * k.mass(x, u1, u2)?;
    let den = 1.0 - lambda * k.mass(0.0, u1, u2)?;
    let rate = k.ctx.q;
    let floor = (rate - lambda) / rate - 1e-12;
    if den < floor {
        return Err(PsrError::domain(format!(
            "reset series denominator {den} fell below its geometric bound {floor}"
        )));
    }
    Ok(num / den)
}

/// Expected discounted number of resets weighted by the restart point,
/// R(x; b, a). Defined only when 0 lies in [b, a], since that is where
/// every reset lands.
pub fn ratio_r(ctx: &TotalResetContext, x: f64) -> Result<f64> {
    ctx.validate()?;
    let k = ctx.kernel()?;
    reset_series(&k, ctx.lambda, x, ctx.b, ctx.a)
}

/// Probability-like weight of a reset happening before the exit,
/// J(x; b, a) = lambda times the two-sided kernel mass.
fn reset_mass(k: &KernelHandle, lambda: f64, x: f64, u1: f64, u2: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(lambda * k.mass(x, u1, u2)?)
}

/// E_x[e^{-q tau_a^+}; up before down] under reset-to-zero.
///
/// With both barriers above 0 a reset lands below b, so only paths that
/// never reset can win upward and the classical ratio survives. With both
/// below 0 a reset lands above a and counts as the upward passage itself.
/// Straddling barriers feed the geometric restart series into the scale
/// ratio instead.
pub fn total_exit_up(ctx: &TotalResetContext, x: f64) -> Result<ExitValue> {
    ctx.validate()?;
    let sc = ctx.scale_ctx()?;
    let classical = classical_exit_up(&sc, ctx.b, ctx.a, x)?;
    let region = classify_region(ctx.b, ctx.a);
    let corr = match region {
        Region::PosPos => 0.0,
        Region::NegNeg => {
            let k = ctx.kernel()?;
            reset_mass(&k, ctx.lambda, x, ctx.b, ctx.a)?
        }
        Region::PosNeg => {
            // Augmented ratio (W(x-b) + W(-b) R(x)) / (W(a-b) + W(-b) R(a));
            // the kernel row at a vanishes, so R(a) = 0 and the denominator
            // is exactly W(a-b).
            let k = ctx.kernel()?;
            let r = reset_series(&k, ctx.lambda, x, ctx.b, ctx.a)?;
            sc.w(-ctx.b) / sc.w(ctx.a - ctx.b) * r
        }
    };
    Ok(ExitValue {
        value: clamp_unit(classical + corr),
        correction: corr,
        solver_residual: 0.0,
        region,
    })
}

/// E_x[e^{-q tau_b^-}; down before up] under reset-to-zero, the mirror of
/// `total_exit_up`: resets count as the downward passage when both
/// barriers sit above 0, and restart the process from 0 when the barriers
/// straddle it.
pub fn total_exit_down(ctx: &TotalResetContext, x: f64) -> Result<ExitValue> {
    ctx.validate()?;
    let sc = ctx.scale_ctx()?;
    let classical = classical_exit_down(&sc, ctx.b, ctx.a, x)?;
    let region = classify_region(ctx.b, ctx.a);
    let corr = match region {
        Region::PosPos => {
            let k = ctx.kernel()?;
            reset_mass(&k, ctx.lambda, x, ctx.b, ctx.a)?
        }
        Region::NegNeg => 0.0,
        Region::PosNeg => {
            // The augmented Z and W combinations share the same R term, so
            // the assembled expression collapses to the classical bracket
            // at x plus R(x) times that bracket at the restart point 0.
            let k = ctx.kernel()?;
            let r = reset_series(&k, ctx.lambda, x, ctx.b, ctx.a)?;
            r * classical_exit_down(&sc, ctx.b, ctx.a, 0.0)?
        }
    };
    Ok(ExitValue {
        value: clamp_unit(classical + corr),
        correction: corr,
        solver_residual: 0.0,
        region,
    })
}

fn check_one_sided(label: &str, barrier: f64, x: f64, above: bool) -> Result<()> {
    if !barrier.is_finite() || !x.is_finite() {
        return Err(PsrError::domain(format!(
            "{label} requires finite barrier and start, got {barrier} and {x}"
        )));
    }
    let ok = if above { x <= barrier } else { x >= barrier };
    if !ok {
        return Err(PsrError::domain(format!(
            "start x={x} on the wrong side of barrier {barrier}"
        )));
    }
    Ok(())
}

/// E_x[e^{-q tau_a^+}] with no lower barrier, under reset-to-zero. For
/// a > 0 resets restart below the barrier and feed the geometric series
/// weighted by the restart value e^{-Phi a}; for a <= 0 a reset lands at
/// or above the barrier and is itself the passage.
pub fn total_exit_one_sided_up(
    spec: ProcessSpec,
    q: f64,
    lambda: f64,
    a: f64,
    x: f64,
) -> Result<ExitValue> {
    check_rates(q, lambda)?;
    check_one_sided("one-sided up", a, x, true)?;
    let sc = ScaleContext::new(spec, q + lambda)?;
    let direct = f64::exp(-sc.phi * (a - x));
    let corr = if lambda == 0.0 {
        0.0
    } else {
        let k = KernelHandle::one_sided_up(sc, a)?;
        if a > 0.0 {
            f64::exp(-sc.phi * a) * reset_series(&k, lambda, x, f64::NEG_INFINITY, a)?
        } else {
            reset_mass(&k, lambda, x, f64::NEG_INFINITY, a)?
        }
    };
    Ok(ExitValue {
        value: clamp_unit(direct + corr),
        correction: corr,
        solver_residual: 0.0,
        region: classify_region(f64::NEG_INFINITY, a),
    })
}

/// E_x[e^{-q tau_b^-}] with no upper barrier, under reset-to-zero. For
/// b >= 0 a reset lands at or below the barrier and is itself the ruin;
/// for b < 0 resets restart above the barrier, so the geometric series is
/// weighted by the no-reset ruin value from 0.
pub fn total_exit_one_sided_down(
    spec: ProcessSpec,
    q: f64,
    lambda: f64,
    b: f64,
    x: f64,
) -> Result<ExitValue> {
    one_sided_down_impl(spec, q, lambda, b, x, false)
}

/// Variant of `total_exit_one_sided_down` that weights the restart series
/// by Z(-b) alone instead of the full ruin value at 0, dropping the
/// negative W part of the bracket. Kept so tests can adjudicate the two
/// forms against simulation and the small-retention limit; they coincide
/// when b >= 0.
pub fn total_exit_one_sided_down_z_coeff(
    spec: ProcessSpec,
    q: f64,
    lambda: f64,
    b: f64,
    x: f64,
) -> Result<ExitValue> {
    one_sided_down_impl(spec, q, lambda, b, x, true)
}

fn one_sided_down_impl(
    spec: ProcessSpec,
    q: f64,
    lambda: f64,
    b: f64,
    x: f64,
    z_coeff: bool,
) -> Result<ExitValue> {
    check_rates(q, lambda)?;
    check_one_sided("one-sided down", b, x, false)?;
    let sc = ScaleContext::new(spec, q + lambda)?;
    let direct = classical_ruin(&sc, x - b);
    let corr = if lambda == 0.0 {
        0.0
    } else {
        let k = KernelHandle::one_sided_down(sc, b)?;
        if b >= 0.0 {
            reset_mass(&k, lambda, x, b, f64::INFINITY)?
        } else {
            let restart = if z_coeff {
                sc.z(-b)
            } else {
                classical_ruin(&sc, -b)
            };
            restart * reset_series(&k, lambda, x, b, f64::INFINITY)?
        }
    };
    Ok(ExitValue {
        value: clamp_unit(direct + corr),
        correction: corr,
        solver_residual: 0.0,
        region: classify_region(b, f64::INFINITY),
    })
}
