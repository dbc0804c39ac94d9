//! Process parameterization, Laplace exponent, and its right inverse.
//!
//! Two spectrally negative families are supported:
//!
//! * `BrownianDrift`: X_t = mu t + sigma B_t, with
//!   psi(theta) = mu theta + sigma^2 theta^2 / 2.
//! * `CramerLundbergExp`: X_t = c t - sum of exp(rate) jumps arriving at
//!   Poisson rate eta, with psi(theta) = c theta - eta theta / (rate + theta).
//!
//! Both exponents are convex on [0, inf) with psi(0) = 0 and psi(inf) = inf,
//! so for q >= 0 the largest root of psi = q is well defined; `phi` computes
//! it by bracketing plus safeguarded Newton.

use serde::Deserialize;

use crate::error::{PsrError, Result};

/// Supported process families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    BrownianDrift,
    CramerLundbergExp,
}

/// Parameters of the driving process.
///
/// Fields irrelevant to the selected family are kept at zero. Use the
/// constructors; they validate positivity constraints.
///
/// # Examples
///
/// ```
/// use psr_core::levy::{ProcessSpec, laplace_exponent};
/// let spec = ProcessSpec::brownian(0.0, 1.0).unwrap();
/// assert_eq!(laplace_exponent(&spec, 2.0).unwrap(), 2.0);
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessSpec {
    pub family: Family,
    /// Drift of the Brownian family.
    pub mu: f64,
    /// Volatility of the Brownian family, > 0.
    pub sigma: f64,
    /// Upward drift of the Cramer-Lundberg family, > 0.
    pub c: f64,
    /// Jump arrival rate of the Cramer-Lundberg family, >= 0.
    pub eta: f64,
    /// Rate of the exponential jump sizes (inverse mean), > 0.
    pub jump_mean_inv: f64,
}

/// JSON wire form. `jump_rate` maps to `jump_mean_inv`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    family: String,
    mu: Option<f64>,
    sigma: Option<f64>,
    c: Option<f64>,
    eta: Option<f64>,
    jump_rate: Option<f64>,
}

impl ProcessSpec {
    pub fn brownian(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(PsrError::domain(format!(
                "brownian family needs finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(ProcessSpec {
            family: Family::BrownianDrift,
            mu,
            sigma,
            c: 0.0,
            eta: 0.0,
            jump_mean_inv: 0.0,
        })
    }

    pub fn cramer_lundberg(c: f64, eta: f64, jump_mean_inv: f64) -> Result<Self> {
        if !(c > 0.0) || !(eta >= 0.0) || !(jump_mean_inv > 0.0) {
            return Err(PsrError::domain(format!(
                "cramer-lundberg family needs c > 0, eta >= 0, jump rate > 0, \
                 got c={c}, eta={eta}, jump_rate={jump_mean_inv}"
            )));
        }
        if !(c.is_finite() && eta.is_finite() && jump_mean_inv.is_finite()) {
            return Err(PsrError::domain("non-finite cramer-lundberg parameter"));
        }
        Ok(ProcessSpec {
            family: Family::CramerLundbergExp,
            mu: 0.0,
            sigma: 0.0,
            c,
            eta,
            jump_mean_inv,
        })
    }

    /// Parses the JSON wire form, e.g.
    /// `{"family":"bm","mu":0.0,"sigma":1.0}` or
    /// `{"family":"cl","c":2.0,"eta":1.0,"jump_rate":1.0}`.
    /// Unknown fields and fields from the wrong family are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSpec =
            serde_json::from_str(text).map_err(|e| PsrError::parse(e.to_string()))?;
        match raw.family.as_str() {
            "bm" => {
                if raw.c.is_some() || raw.eta.is_some() || raw.jump_rate.is_some() {
                    return Err(PsrError::parse(
                        "family \"bm\" accepts only mu and sigma".to_string(),
                    ));
                }
                let mu = raw
                    .mu
                    .ok_or_else(|| PsrError::parse("family \"bm\" requires mu"))?;
                let sigma = raw
                    .sigma
                    .ok_or_else(|| PsrError::parse("family \"bm\" requires sigma"))?;
                ProcessSpec::brownian(mu, sigma)
            }
            "cl" => {
                if raw.mu.is_some() || raw.sigma.is_some() {
                    return Err(PsrError::parse(
                        "family \"cl\" accepts only c, eta, jump_rate".to_string(),
                    ));
                }
                let c = raw
                    .c
                    .ok_or_else(|| PsrError::parse("family \"cl\" requires c"))?;
                let eta = raw
                    .eta
                    .ok_or_else(|| PsrError::parse("family \"cl\" requires eta"))?;
                let rate = raw
                    .jump_rate
                    .ok_or_else(|| PsrError::parse("family \"cl\" requires jump_rate"))?;
                ProcessSpec::cramer_lundberg(c, eta, rate)
            }
            other => Err(PsrError::parse(format!(
                "unknown family {other:?}, expected \"bm\" or \"cl\""
            ))),
        }
    }

    /// Serializes to the JSON wire form, emitting only the fields of the
    /// active family.
    pub fn to_json(&self) -> String {
        match self.family {
            Family::BrownianDrift => format!(
                "{{\"family\":\"bm\",\"mu\":{},\"sigma\":{}}}",
                self.mu, self.sigma
            ),
            Family::CramerLundbergExp => format!(
                "{{\"family\":\"cl\",\"c\":{},\"eta\":{},\"jump_rate\":{}}}",
                self.c, self.eta, self.jump_mean_inv
            ),
        }
    }

    /// Laplace exponent without the domain check. Callers guarantee that the
    /// exponent is defined at `theta` (theta > -jump_mean_inv for the
    /// Cramer-Lundberg family).
    pub(crate) fn psi_raw(&self, theta: f64) -> f64 {
        match self.family {
            Family::BrownianDrift => self.mu * theta + 0.5 * self.sigma * self.sigma * theta * theta,
            Family::CramerLundbergExp => {
                self.c * theta - self.eta * theta / (self.jump_mean_inv + theta)
            }
        }
    }

    /// Derivative of the Laplace exponent.
    pub(crate) fn psi_prime_raw(&self, theta: f64) -> f64 {
        match self.family {
            Family::BrownianDrift => self.mu + self.sigma * self.sigma * theta,
            Family::CramerLundbergExp => {
                let d = self.jump_mean_inv + theta;
                self.c - self.eta * self.jump_mean_inv / (d * d)
            }
        }
    }
}

/// Laplace exponent psi(theta) for theta >= 0.
pub fn laplace_exponent(spec: &ProcessSpec, theta: f64) -> Result<f64> {
    if !(theta >= 0.0) {
        return Err(PsrError::domain(format!(
            "laplace exponent defined for theta >= 0, got {theta}"
        )));
    }
    Ok(spec.psi_raw(theta))
}

/// Derivative psi'(theta) for theta >= 0.
pub fn laplace_exponent_prime(spec: &ProcessSpec, theta: f64) -> Result<f64> {
    if !(theta >= 0.0) {
        return Err(PsrError::domain(format!(
            "laplace exponent derivative defined for theta >= 0, got {theta}"
        )));
    }
    Ok(spec.psi_prime_raw(theta))
}

/// Largest nonnegative root Phi(q) of psi(theta) = q, for q >= 0.
///
/// Bracketing by doubling, then Newton safeguarded by bisection. The result
/// satisfies |psi(Phi(q)) - q| <= 1e-12 * max(1, q).
///
/// # Examples
///
/// ```
/// use psr_core::levy::{ProcessSpec, phi};
/// let spec = ProcessSpec::brownian(1.0, 1.0).unwrap();
/// let root = phi(&spec, 0.5).unwrap();
/// assert!((root - (2f64.sqrt() - 1.0)).abs() < 1e-12);
/// ```
pub fn phi(spec: &ProcessSpec, q: f64) -> Result<f64> {
    if !(q >= 0.0) || !q.is_finite() {
        return Err(PsrError::domain(format!("phi defined for q >= 0, got {q}")));
    }
    let tol = 1e-12 * q.max(1.0);

    // Left end of the search: the point where psi starts increasing. psi is
    // convex, so past theta_min it increases to infinity and the largest
    // root of psi = q lives in [theta_min, inf).
    let theta_min = match spec.family {
        Family::BrownianDrift => (-spec.mu / (spec.sigma * spec.sigma)).max(0.0),
        Family::CramerLundbergExp => {
            if spec.psi_prime_raw(0.0) >= 0.0 {
                0.0
            } else {
                // psi'(t) = 0 at (rate + t)^2 = eta rate / c.
                ((spec.eta * spec.jump_mean_inv / spec.c).sqrt() - spec.jump_mean_inv).max(0.0)
            }
        }
    };

    if q == 0.0 && spec.psi_prime_raw(0.0) >= 0.0 {
        return Ok(0.0);
    }
    if (spec.psi_raw(theta_min) - q).abs() <= tol && theta_min == 0.0 && q == 0.0 {
        // Drifting-down case with q = 0 falls through to the solver below.
    }

    // Bracket [lo, hi] with psi(lo) <= q <= psi(hi).
    let mut lo = theta_min;
    let mut hi = theta_min.max(1.0);
    let mut guard = 0;
    while spec.psi_raw(hi) < q {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(PsrError::domain(format!("failed to bracket phi({q})")));
        }
    }

    // Newton from the upper end (psi convex, so iterates stay right of the
    // root and decrease monotonically), bisection fallback.
    let mut x = hi;
    for _ in 0..200 {
        let f = spec.psi_raw(x) - q;
        if f.abs() <= tol {
            return Ok(x);
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = spec.psi_prime_raw(x);
        let newton = x - f / d;
        x = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let residual = (spec.psi_raw(x) - q).abs();
    if residual <= tol {
        Ok(x)
    } else {
        Err(PsrError::Convergence {
            iterations: 200,
            residual,
            history: vec![residual],
        })
    }
}
