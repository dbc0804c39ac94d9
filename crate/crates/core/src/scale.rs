//! Closed-form scale functions W, Z, bivariate Z, and the classical
//! two-barrier exit formulas built from them.
//!
//! For both supported families 1/psi_q has exactly two simple real poles
//! r2 < 0 < r1 = Phi(q) once q > 0, so
//!
//!   W(x) = A e^{r1 x} + B e^{r2 x},  x >= 0,
//!
//! with A = 1/psi_q'(r1), B = 1/psi_q'(r2) from partial fractions. All
//! quantities derived from W (its running integral, Z, the bivariate Z,
//! kernel masses) therefore reduce to exponential antiderivatives; nothing
//! in this module integrates numerically.

use crate::error::{PsrError, Result};
use crate::levy::{phi, Family, ProcessSpec};

/// Scale-function evaluator at a fixed killing rate `q > 0`.
///
/// Downstream resetting code passes `q + lambda` here. Immutable after
/// construction; cheap to copy.
///
/// # Examples
///
/// ```
/// use psr_core::levy::ProcessSpec;
/// use psr_core::scale::ScaleContext;
/// let spec = ProcessSpec::brownian(0.0, 1.0).unwrap();
/// let ctx = ScaleContext::new(spec, 0.5).unwrap();
/// let e = std::f64::consts::E;
/// assert!((ctx.w(1.0) - (e - 1.0 / e)).abs() < 1e-12);
/// ```
#[derive(Debug, Clone, Copy)]
pub struct ScaleContext {
    pub spec: ProcessSpec,
    pub q: f64,
    /// Leading exponent r1 = Phi(q) > 0.
    pub phi: f64,
    /// Secondary exponent r2 < 0.
    r2: f64,
    /// Partial-fraction coefficient on e^{r1 x}.
    coeff_a: f64,
    /// Partial-fraction coefficient on e^{r2 x}; equals w0 - coeff_a.
    coeff_b: f64,
    /// W(0+): 0 for unbounded variation, 1/c for Cramer-Lundberg.
    w0: f64,
}

/// Stable (e^{d x} - 1)/d, returning x as d -> 0.
fn em1(d: f64, x: f64) -> f64 {
    if (d * x).abs() < 1e-8 {
        x * (1.0 + 0.5 * d * x)
    } else {
        f64::exp_m1(d * x) / d
    }
}

impl ScaleContext {
    pub fn new(spec: ProcessSpec, q: f64) -> Result<Self> {
        if !(q > 0.0) || !q.is_finite() {
            return Err(PsrError::domain(format!(
                "scale context requires q > 0, got {q}"
            )));
        }
        let mut r1 = phi(&spec, q)?;
        // Polish the root to full precision; phi() certifies 1e-12 relative.
        for _ in 0..3 {
            let f = spec.psi_raw(r1) - q;
            let d = spec.psi_prime_raw(r1);
            if d > 0.0 {
                r1 -= f / d;
            }
        }
        let (r2, coeff_a, w0) = match spec.family {
            Family::BrownianDrift => {
                let s2 = spec.sigma * spec.sigma;
                // Root sum is -2 mu / sigma^2; psi_q'(r1) = mu + sigma^2 r1.
                let r2 = -r1 - 2.0 * spec.mu / s2;
                let a = 1.0 / (spec.mu + s2 * r1);
                (r2, a, 0.0)
            }
            Family::CramerLundbergExp => {
                let beta = spec.jump_mean_inv;
                // Vieta on c t^2 + (c beta - eta - q) t - q beta = 0.
                let r2 = -q * beta / (spec.c * r1);
                let a = (beta + r1) / (spec.c * (r1 - r2));
                (r2, a, 1.0 / spec.c)
            }
        };
        debug_assert!(r1 > 0.0 && r2 < 0.0 && r2 < r1);
        Ok(ScaleContext {
            spec,
            q,
            phi: r1,
            r2,
            coeff_a,
            coeff_b: w0 - coeff_a,
            w0,
        })
    }

    /// psi(theta) - q.
    pub fn psi_q(&self, theta: f64) -> f64 {
        self.spec.psi_raw(theta) - self.q
    }

    /// psi'(theta).
    pub fn psi_prime(&self, theta: f64) -> f64 {
        self.spec.psi_prime_raw(theta)
    }

    /// Secondary (negative) exponent of the two-exponential form.
    pub fn secondary_exponent(&self) -> f64 {
        self.r2
    }

    /// Partial-fraction coefficients (A, B) with W(x) = A e^{r1 x} + B e^{r2 x}.
    pub(crate) fn coefficients(&self) -> (f64, f64) {
        (self.coeff_a, self.coeff_b)
    }

    /// W^(q)(x). Zero for x < 0, nonnegative and nondecreasing on [0, inf).
    ///
    /// Evaluated as e^{r2 x}(A expm1((r1-r2)x) + W(0+)), which is exact
    /// algebra on the two-exponential form and cancellation-free for all x;
    /// both summands are nonnegative.
    pub fn w(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        f64::exp(self.r2 * x) * (self.coeff_a * f64::exp_m1((self.phi - self.r2) * x) + self.w0)
    }

    /// Running integral of W: int_0^t W(y) dy, zero for t <= 0.
    pub fn w_integral(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.coeff_a * em1(self.phi, t) + self.coeff_b * em1(self.r2, t)
    }

    /// Z^(q)(x) = 1 + q int_0^x W; equals 1 for x <= 0 and is >= 1 always.
    pub fn z(&self, x: f64) -> f64 {
        1.0 + self.q * self.w_integral(x)
    }

    /// Bivariate Z^(q)(x, theta) = e^{theta x}(1 - psi_q(theta) int_0^x
    /// e^{-theta y} W(y) dy); equals e^{theta x} for x <= 0, Z(x) at
    /// theta = 0, and e^{Phi_q x} at theta = Phi_q.
    pub fn z_biv(&self, x: f64, theta: f64) -> Result<f64> {
        if !(theta >= 0.0) {
            return Err(PsrError::domain(format!(
                "bivariate Z requires theta >= 0, got {theta}"
            )));
        }
        if x <= 0.0 {
            return Ok(f64::exp(theta * x));
        }
        let integral =
            self.coeff_a * em1(self.phi - theta, x) + self.coeff_b * em1(self.r2 - theta, x);
        Ok(f64::exp(theta * x) * (1.0 - self.psi_q(theta) * integral))
    }
}

fn check_barriers(b: f64, a: f64, x: f64) -> Result<()> {
    if !(a > b) {
        return Err(PsrError::domain(format!(
            "barriers must satisfy a > b, got b={b}, a={a}"
        )));
    }
    let slack = 1e-12 * (a - b).max(1.0);
    if x < b - slack || x > a + slack {
        return Err(PsrError::domain(format!(
            "start point x={x} outside barrier interval [{b}, {a}]"
        )));
    }
    Ok(())
}

impl ScaleContext {
    /// W(xp)/W(ap) for 0 <= xp <= ap, with every exponent nonpositive.
    /// Writing W(t) = e^{r1 t}(A + B e^{(r2-r1)t}) makes the ratio
    /// e^{-r1(ap-xp)} times a bounded factor, so no large intermediates
    /// appear even when r1 * ap is in the hundreds.
    fn w_ratio(&self, xp: f64, ap: f64) -> f64 {
        let d = self.r2 - self.phi;
        f64::exp(-self.phi * (ap - xp)) * (self.coeff_a + self.coeff_b * f64::exp(d * xp))
            / (self.coeff_a + self.coeff_b * f64::exp(d * ap))
    }
}

/// P-style Laplace transform of the event "exit above a before below b",
/// for the process without resetting: W(x-b)/W(a-b).
pub fn classical_exit_up(ctx: &ScaleContext, b: f64, a: f64, x: f64) -> Result<f64> {
    check_barriers(b, a, x)?;
    let ap = a - b;
    let xp = (x - b).clamp(0.0, ap);
    Ok(ctx.w_ratio(xp, ap))
}

/// Companion transform of "exit below b before above a":
/// Z(x-b) - (W(x-b)/W(a-b)) Z(a-b).
///
/// Evaluated in a rearranged form in which the e^{r1}-growing parts of the
/// two products cancel algebraically; the naive difference loses all
/// precision once r1 (a-b) exceeds roughly 35.
pub fn classical_exit_down(ctx: &ScaleContext, b: f64, a: f64, x: f64) -> Result<f64> {
    check_barriers(b, a, x)?;
    let ap = a - b;
    let xp = (x - b).clamp(0.0, ap);
    let (ca, cb) = (ctx.coeff_a, ctx.coeff_b);
    let (r1, r2, q) = (ctx.phi, ctx.r2, ctx.q);
    let ratio = ctx.w_ratio(xp, ap);
    // Z(t) = kappa + (qA/r1) e^{r1 t} + (qB/r2) e^{r2 t}; the exponential
    // parts of Z(xp) - ratio * Z(ap) collapse to the bracket below, whose
    // exponents are all nonpositive on 0 <= xp <= ap.
    let kappa = 1.0 - q * (ca / r1 + cb / r2);
    let denom = ca + cb * f64::exp((r2 - r1) * ap);
    let bracket = f64::exp(r1 * (xp - ap) + r2 * ap) - f64::exp(r2 * xp);
    Ok(kappa * (1.0 - ratio) + q * ca * cb * (1.0 / r1 - 1.0 / r2) / denom * bracket)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn bm(mu: f64, sigma: f64, q: f64) -> ScaleContext {
        ScaleContext::new(ProcessSpec::brownian(mu, sigma).unwrap(), q).unwrap()
    }

    fn cl(c: f64, eta: f64, rate: f64, q: f64) -> ScaleContext {
        ScaleContext::new(ProcessSpec::cramer_lundberg(c, eta, rate).unwrap(), q).unwrap()
    }

    #[test]
    fn w_frozen_values() {
        let ctx = bm(0.0, 1.0, 0.5);
        assert_eq!(ctx.w(-1.0), 0.0);
        assert_eq!(ctx.w(0.0), 0.0);
        // Phi = 1, W(x) = e^x - e^{-x}.
        assert_abs_diff_eq!(ctx.w(1.0), E - 1.0 / E, epsilon = 1e-12);
        assert_abs_diff_eq!(ctx.phi, 1.0, epsilon = 1e-12);

        let ctx = cl(2.0, 1.0, 1.0, 0.1);
        assert_abs_diff_eq!(ctx.w(0.0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ctx.w(1e-12), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn z_frozen_values() {
        let ctx = bm(0.0, 1.0, 0.5);
        assert_eq!(ctx.z(-3.0), 1.0);
        assert_abs_diff_eq!(ctx.z(1.0), f64::cosh(1.0), epsilon = 1e-12);
        let ctx = cl(2.0, 1.0, 1.0, 0.1);
        assert_eq!(ctx.z(0.0), 1.0);
    }

    #[test]
    fn z_matches_quadrature_of_w() {
        // Oracle for Z: Simpson quadrature of 1 + q int_0^x W, independent
        // of the analytic antiderivative.
        for ctx in [bm(0.5, 1.3, 0.7), cl(2.0, 1.0, 1.0, 0.3)] {
            let x = 1.7;
            let n = 4000;
            let h = x / n as f64;
            let mut acc = ctx.w(0.0) + ctx.w(x);
            for i in 1..n {
                let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += weight * ctx.w(i as f64 * h);
            }
            let integral = acc * h / 3.0;
            assert_abs_diff_eq!(ctx.z(x), 1.0 + ctx.q * integral, epsilon = 1e-9);
        }
    }

    #[test]
    fn z_biv_frozen_values() {
        let ctx = bm(0.0, 1.0, 0.5);
        // x <= 0 is a pure exponential in theta.
        assert_abs_diff_eq!(
            ctx.z_biv(-2.0, 0.3).unwrap(),
            f64::exp(-0.6),
            epsilon = 1e-15
        );
        // theta = 0 reduces to Z.
        assert_abs_diff_eq!(ctx.z_biv(1.0, 0.0).unwrap(), ctx.z(1.0), epsilon = 1e-12);
        // theta = Phi_q kills the integral term.
        assert_abs_diff_eq!(ctx.z_biv(1.0, ctx.phi).unwrap(), E, epsilon = 1e-12);
        assert!(ctx.z_biv(1.0, -0.2).is_err());
    }

    /// Simpson quadrature of int_0^T e^{-theta x} f(x) dx.
    fn laplace_quad(f: impl Fn(f64) -> f64, theta: f64, t_end: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = t_end / n as f64;
        let g = |x: f64| f64::exp(-theta * x) * f(x);
        let mut acc = g(0.0) + g(t_end);
        for i in 1..n {
            let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += weight * g(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn w_laplace_transform() {
        // int_0^inf e^{-theta x} W(x) dx = 1/psi_q(theta) for theta > Phi.
        for ctx in [bm(0.0, 1.0, 0.5), bm(-0.7, 0.8, 0.4), cl(2.0, 1.0, 1.0, 0.3)] {
            let theta = ctx.phi + 1.0;
            // Tail past T is below e^{(Phi-theta)T} / (psi'(Phi)(theta-Phi)).
            let t_end = (1e10 / ctx.psi_prime(ctx.phi)).ln() + 2.0;
            let lhs = laplace_quad(|x| ctx.w(x), theta, t_end, 60_000);
            assert_abs_diff_eq!(lhs, 1.0 / ctx.psi_q(theta), epsilon = 1e-8);
        }
    }

    #[test]
    fn z_laplace_transform() {
        // int_0^inf e^{-theta x} Z(x) dx = psi(theta)/(theta psi_q(theta)).
        for ctx in [bm(0.3, 1.0, 0.5), cl(2.0, 1.0, 1.0, 0.3)] {
            let theta = ctx.phi + 1.0;
            let t_end = (1e10 / ctx.psi_prime(ctx.phi)).ln() + 4.0;
            let lhs = laplace_quad(|x| ctx.z(x), theta, t_end, 80_000);
            let rhs = ctx.spec.psi_raw(theta) / (theta * ctx.psi_q(theta));
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8);
        }
    }

    #[test]
    fn z_biv_laplace_transform_both_branches() {
        // int_0^inf e^{-v x} Z(x,theta) dx = (psi(v)-psi(theta))/((v-theta) psi_q(v)),
        // with the v = theta branch reading psi'(theta)/psi_q(theta).
        let ctx = bm(0.2, 1.0, 0.6);
        let t_end = (1e10 / ctx.psi_prime(ctx.phi)).ln() + 4.0;

        let theta = 0.3; // below Phi, distinct from v
        let v = ctx.phi + 1.0;
        let lhs = laplace_quad(|x| ctx.z_biv(x, theta).unwrap(), v, t_end, 80_000);
        let rhs = (ctx.spec.psi_raw(v) - ctx.spec.psi_raw(theta)) / ((v - theta) * ctx.psi_q(v));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8);

        // Equal-argument branch: transform variable equals theta.
        let theta = ctx.phi + 1.0;
        let lhs = laplace_quad(|x| ctx.z_biv(x, theta).unwrap(), theta, t_end, 80_000);
        let rhs = ctx.psi_prime(theta) / ctx.psi_q(theta);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8);
    }

    #[test]
    fn asymptotic_limit_relations() {
        for ctx in [bm(0.4, 1.0, 0.5), bm(-0.4, 1.2, 0.8), cl(2.0, 1.0, 1.0, 0.3)] {
            let a = 30.0 / ctx.phi;
            for i in 0..=4 {
                let x = i as f64 * 0.25;
                assert_abs_diff_eq!(
                    ctx.w(a + x) / ctx.w(a),
                    f64::exp(ctx.phi * x),
                    epsilon = 1e-6
                );
            }
            assert_abs_diff_eq!(ctx.z(a) / ctx.w(a), ctx.q / ctx.phi, epsilon = 1e-6);
        }
    }

    #[test]
    fn classical_exit_frozen_values() {
        let ctx = bm(0.0, 1.0, 0.5);
        // Driftless Brownian oracle: up = sinh(w x)/sinh(w a) with
        // w = sqrt(2q)/sigma, here w = 1. Independent of the W code path.
        let up = classical_exit_up(&ctx, 0.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(up, f64::sinh(1.0) / f64::sinh(2.0), epsilon = 1e-12);
        assert_abs_diff_eq!(up, 0.324027, epsilon = 1e-6);

        assert_eq!(classical_exit_up(&ctx, 0.0, 2.0, 2.0).unwrap(), 1.0);
        assert_eq!(classical_exit_down(&ctx, 0.0, 2.0, 2.0).unwrap(), 0.0);
        assert_eq!(classical_exit_up(&ctx, 0.0, 2.0, 0.0).unwrap(), 0.0);
        assert_eq!(classical_exit_down(&ctx, 0.0, 2.0, 0.0).unwrap(), 1.0);
        assert!(classical_exit_up(&ctx, 0.0, 2.0, 2.5).is_err());
        assert!(classical_exit_up(&ctx, 2.0, 0.0, 1.0).is_err());
    }

    fn arb_ctx() -> impl Strategy<Value = ScaleContext> {
        prop_oneof![
            (-2.0f64..2.0, 0.3f64..2.0, 0.05f64..3.0)
                .prop_map(|(mu, s, q)| bm(mu, s, q)),
            (0.3f64..3.0, 0.0f64..2.0, 0.3f64..3.0, 0.05f64..3.0)
                .prop_map(|(c, eta, r, q)| cl(c, eta, r, q)),
        ]
    }

    proptest! {
        #[test]
        fn w_nonnegative_nondecreasing_z_at_least_one(ctx in arb_ctx(), x in -1.0f64..6.0, h in 0.0f64..1.0) {
            let w0 = ctx.w(x);
            let w1 = ctx.w(x + h);
            prop_assert!(w0 >= 0.0);
            prop_assert!(w1 >= w0 - 1e-12 * (1.0 + w1.abs()));
            prop_assert!(ctx.z(x) >= 1.0);
        }

        #[test]
        fn exit_probabilities_sum_below_one(ctx in arb_ctx(), t in 0.01f64..0.99, span in 0.5f64..4.0, b in -2.0f64..2.0) {
            let a = b + span;
            let x = b + t * span;
            let up = classical_exit_up(&ctx, b, a, x).unwrap();
            let down = classical_exit_down(&ctx, b, a, x).unwrap();
            prop_assert!(up >= -1e-12 && down >= -1e-12);
            prop_assert!(up + down <= 1.0 + 1e-9);
        }
    }
}
