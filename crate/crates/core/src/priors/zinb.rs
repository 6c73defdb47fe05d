//! Zero-inflated negative binomial counts.
//!
//! Mean/inverse-dispersion parameterization: `NB(y | μ, θ)` has mean `μ` and
//! variance `μ + μ²/θ`; the mixture puts an extra mass `π` at zero.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Per-entry ZINB parameters; all three matrices share one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ZinbParams {
    pub mu: Tensor2,
    pub theta: Tensor2,
    pub pi: Tensor2,
}

impl ZinbParams {
    pub fn new(mu: Tensor2, theta: Tensor2, pi: Tensor2) -> Result<Self> {
        if !mu.same_shape(&theta) || !mu.same_shape(&pi) {
            return Err(Error::shape(
                "zinb params",
                format!("mu {:?}, theta {:?}, pi {:?}", mu.shape(), theta.shape(), pi.shape()),
            ));
        }
        if mu.data().iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Validation("ZINB mean must be positive and finite".into()));
        }
        if theta.data().iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Validation("ZINB dispersion must be positive and finite".into()));
        }
        if pi.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Validation("ZINB zero-inflation must lie in [0, 1]".into()));
        }
        Ok(Self { mu, theta, pi })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu.shape()
    }
}

/// Spot- and gene-constant ZINB used when no learned prior is available.
///
/// `total_count` is the NB dispersion, `logits` the log-odds of the NB
/// success probability (so the mean is `total_count · e^logits`), and
/// `zi_logits` the log-odds of a structural zero.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FixedZinbConfig {
    pub total_count: f64,
    pub logits: f64,
    pub zi_logits: f64,
}

impl Default for FixedZinbConfig {
    fn default() -> Self {
        Self {
            total_count: 1.0,
            logits: 0.1,
            zi_logits: 0.0,
        }
    }
}

impl FixedZinbConfig {
    pub fn mu(&self) -> f64 {
        self.total_count * self.logits.exp()
    }

    pub fn theta(&self) -> f64 {
        self.total_count
    }

    pub fn pi(&self) -> f64 {
        crate::numerics::graph::sigmoid(self.zi_logits)
    }

    pub fn params(&self, rows: usize, cols: usize) -> ZinbParams {
        ZinbParams {
            mu: Tensor2::filled(rows, cols, self.mu()),
            theta: Tensor2::filled(rows, cols, self.theta()),
            pi: Tensor2::filled(rows, cols, self.pi()),
        }
    }
}

/// Rejects negative, fractional or non-finite counts.
pub fn validate_counts(counts: &Tensor2) -> Result<()> {
    for (idx, &y) in counts.data().iter().enumerate() {
        if !(y.is_finite() && y >= 0.0 && y.fract() == 0.0) {
            return Err(Error::Validation(format!(
                "count at flat index {idx} is {y}; expected a nonnegative integer"
            )));
        }
    }
    Ok(())
}

fn nb_log_zero(mu: f64, theta: f64) -> f64 {
    -theta * (mu / theta).ln_1p()
}

/// `log NB(y | μ, θ)`.
pub fn nb_log_pmf(y: u64, mu: f64, theta: f64) -> f64 {
    let yf = y as f64;
    let log_ratio = -(mu / theta).ln_1p(); // ln(θ/(θ+μ))
    if y == 0 {
        return theta * log_ratio;
    }
    let log_mu_frac = (mu / (theta + mu)).ln();
    ln_gamma(yf + theta) - ln_gamma(theta) - ln_gamma(yf + 1.0) + theta * log_ratio + yf * log_mu_frac
}

/// `log[π·1{y=0} + (1−π)·NB(y | μ, θ)]`. Returns `−∞` for `π = 1, y > 0`.
pub fn zinb_log_pmf(y: u64, mu: f64, theta: f64, pi: f64) -> f64 {
    if y > 0 {
        if pi >= 1.0 {
            return f64::NEG_INFINITY;
        }
        return (-pi).ln_1p() + nb_log_pmf(y, mu, theta);
    }
    if pi <= 0.0 {
        return nb_log_zero(mu, theta);
    }
    if pi >= 1.0 {
        return 0.0;
    }
    let a = pi.ln();
    let b = (-pi).ln_1p() + nb_log_zero(mu, theta);
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Partial derivatives of [`zinb_log_pmf`] with respect to `(μ, θ, π)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZinbGrad {
    pub d_mu: f64,
    pub d_theta: f64,
    pub d_pi: f64,
}

/// `ψ(y+θ) − ψ(θ)`; exact telescoping sum for small `y`.
fn digamma_shift(y: u64, theta: f64) -> f64 {
    if y <= 64 {
        (0..y).map(|k| 1.0 / (theta + k as f64)).sum()
    } else {
        digamma(y as f64 + theta) - digamma(theta)
    }
}

pub fn zinb_log_pmf_grad(y: u64, mu: f64, theta: f64, pi: f64) -> ZinbGrad {
    let yf = y as f64;
    let log_ratio = -(mu / theta).ln_1p();
    let tm = theta + mu;
    if y > 0 {
        return ZinbGrad {
            d_mu: yf / mu - (yf + theta) / tm,
            d_theta: digamma_shift(y, theta) + log_ratio + (mu - yf) / tm,
            d_pi: -1.0 / (1.0 - pi),
        };
    }
    let lnb0 = theta * log_ratio;
    let nb0 = lnb0.exp();
    let lp = zinb_log_pmf(0, mu, theta, pi);
    // (1−π)·NB(0)/p, evaluated in log space so that it stays finite when p is tiny.
    let w = ((-pi).ln_1p() + lnb0 - lp).exp();
    ZinbGrad {
        d_mu: w * (-theta / tm),
        d_theta: w * (log_ratio + mu / tm),
        d_pi: (1.0 - nb0) * (-lp).exp(),
    }
}

/// `E[Y]` of the mixture.
pub fn zinb_mean(mu: f64, pi: f64) -> f64 {
    (1.0 - pi) * mu
}

/// `Var[Y] = (1−π)·μ·(1 + μ/θ + π·μ)`.
pub fn zinb_variance(mu: f64, theta: f64, pi: f64) -> f64 {
    (1.0 - pi) * mu * (1.0 + mu / theta + pi * mu)
}

/// One count: a structural zero with probability `π`, otherwise a
/// Gamma(θ, μ/θ)–Poisson draw.
pub fn sample_count<R: Rng + ?Sized>(mu: f64, theta: f64, pi: f64, rng: &mut R) -> u64 {
    if rng.random::<f64>() < pi {
        return 0;
    }
    let rate = Gamma::new(theta, mu / theta)
        .expect("valid gamma parameters")
        .sample(rng);
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive poisson rate").sample(rng) as u64
}

/// Draws a count matrix from `params`.
pub fn sample_counts<R: Rng + ?Sized>(params: &ZinbParams, rng: &mut R) -> Tensor2 {
    let (r, c) = params.shape();
    let mut out = Tensor2::zeros(r, c);
    for (idx, o) in out.data_mut().iter_mut().enumerate() {
        *o = sample_count(params.mu.data()[idx], params.theta.data()[idx], params.pi.data()[idx], rng) as f64;
    }
    out
}

/// Flow start matrix: ZINB counts mapped through `log1p`.
pub fn zinb_sample<R: Rng + ?Sized>(params: &ZinbParams, rng: &mut R) -> Tensor2 {
    sample_counts(params, rng).map(f64::ln_1p)
}
