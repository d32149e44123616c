//! Closed-form Gaussian kernels of the σ-indexed inference family.
//!
//! All covariances are isotropic, so a kernel is a mean matrix plus one
//! scalar variance shared by every coordinate.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{check_shape, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::state::StateBatch;

/// Round-off slack allowed on radicands that should be exactly zero.
pub(crate) const RADICAND_SLACK: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Array2<f64>,
    pub var: f64,
}

impl GaussianParams {
    /// Row-wise `log N(x; mean, var·I)`.
    pub fn log_density(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        check_shape(self.mean.shape(), x.shape())?;
        if self.var <= 0.0 {
            return Err(Error::domain("log density of a degenerate Gaussian"));
        }
        let d = x.ncols() as f64;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * self.var).ln();
        let sq = (&x - &self.mean).mapv(|v| v * v).sum_axis(Axis(1));
        Ok(sq.mapv(|s| norm - 0.5 * s / self.var))
    }
}

/// `sqrt(r)` for a radicand that may be a hair below zero from round-off.
pub(crate) fn checked_sqrt(r: f64, what: &str) -> Result<f64> {
    if r >= 0.0 {
        Ok(r.sqrt())
    } else if r > -RADICAND_SLACK {
        Ok(0.0)
    } else {
        Err(Error::domain(format!("{what}: negative radicand {r:e}")))
    }
}

/// `q(x_t | x_0) = N(√α_t x_0, (1 − α_t) I)`.
pub fn forward_marginal_params(schedule: &NoiseSchedule, x0: &StateBatch, t: usize) -> Result<GaussianParams> {
    let a = schedule.alpha(t)?;
    Ok(GaussianParams {
        mean: &x0.data * a.sqrt(),
        var: 1.0 - a,
    })
}

/// `x_t = √α_t x_0 + √(1 − α_t) ε`.
pub fn forward_marginal_sample(
    schedule: &NoiseSchedule,
    x0: &StateBatch,
    t: usize,
    noise: &Array2<f64>,
) -> Result<StateBatch> {
    if x0.t != 0 {
        return Err(Error::param(format!("x0 must be at t = 0, got t = {}", x0.t)));
    }
    check_shape(x0.data.shape(), noise.shape())?;
    let a = schedule.alpha(t)?;
    let data = &x0.data * a.sqrt() + noise * (1.0 - a).sqrt();
    StateBatch::new(data, t)
}

/// Mean and variance of `q_σ(x_{t_to} | x_{t_from}, x_0)`:
/// `√α_to x_0 + √(1 − α_to − σ²)·(x_t − √α_from x_0)/√(1 − α_from)`, variance `σ²`.
///
/// `t_to = 0` is accepted (the kernel then collapses onto `x_0`).
pub fn reverse_conditional_params(
    schedule: &NoiseSchedule,
    x_t: &StateBatch,
    x0: &StateBatch,
    t_from: usize,
    t_to: usize,
    sigma: f64,
) -> Result<GaussianParams> {
    if t_to >= t_from {
        return Err(Error::param(format!("need t_to < t_from, got {t_to} >= {t_from}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::param(format!("sigma must be nonnegative, got {sigma}")));
    }
    check_shape(x_t.data.shape(), x0.data.shape())?;
    let a_from = schedule.alpha(t_from)?;
    let a_to = schedule.alpha(t_to)?;
    let dir = checked_sqrt(1.0 - a_to - sigma * sigma, "reverse conditional direction")?;
    let residual = (&x_t.data - &(&x0.data * a_from.sqrt())) / (1.0 - a_from).sqrt();
    Ok(GaussianParams {
        mean: &x0.data * a_to.sqrt() + residual * dir,
        var: sigma * sigma,
    })
}

/// Posterior variance `β̃_t = (1 − α_{t−1})/(1 − α_t)·β_t` of the Markovian chain.
pub fn ddpm_posterior_variance(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let (beta, _) = schedule.stepwise(t)?;
    let a = schedule.alphas();
    Ok((1.0 - a[t - 1]) / (1.0 - a[t]) * beta)
}

/// `q(x_{t−1} | x_t, x_0)` of the Markovian forward process, written with
/// the stepwise `β_t` and `α_t/α_{t−1}`.
pub fn ddpm_posterior_params(
    schedule: &NoiseSchedule,
    x_t: &StateBatch,
    x0: &StateBatch,
    t: usize,
) -> Result<GaussianParams> {
    check_shape(x_t.data.shape(), x0.data.shape())?;
    let (beta, step) = schedule.stepwise(t)?;
    let a = schedule.alphas();
    let c0 = a[t - 1].sqrt() * beta / (1.0 - a[t]);
    let ct = step.sqrt() * (1.0 - a[t - 1]) / (1.0 - a[t]);
    Ok(GaussianParams {
        mean: &x0.data * c0 + &x_t.data * ct,
        var: ddpm_posterior_variance(schedule, t)?,
    })
}

/// The σ_t that makes the forward process Markovian (the DDPM member).
pub fn sigma_ddpm(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let (_, step) = schedule.stepwise(t)?;
    let a = schedule.alphas();
    Ok(((1.0 - a[t - 1]) / (1.0 - a[t])).sqrt() * (1.0 - step).sqrt())
}

/// Forward kernel `q_σ(x_t | x_{t−1}, x_0)` obtained from Bayes' rule on the
/// reverse conditional and the two marginals.
///
/// With `u = x_t − √α_t x_0` and `k = √(1 − α_{t−1} − σ²)/√(1 − α_t)`, the
/// reverse kernel observes `x_{t−1} − √α_{t−1} x_0 = k·u + σ·noise` under the
/// prior `u ~ N(0, 1 − α_t)`; conditioning gives the result.
pub fn bayes_forward_params(
    schedule: &NoiseSchedule,
    x_prev: &StateBatch,
    x0: &StateBatch,
    t: usize,
    sigma: f64,
) -> Result<GaussianParams> {
    if t < 2 || t > schedule.len() {
        return Err(Error::param(format!("bayes forward kernel needs 2 <= t <= {}, got {t}", schedule.len())));
    }
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "sigma = 0 makes x_t a deterministic function of (x_{t-1}, x_0); no density",
        ));
    }
    check_shape(x_prev.data.shape(), x0.data.shape())?;
    let a_t = schedule.alphas()[t];
    let a_prev = schedule.alphas()[t - 1];
    let k = checked_sqrt(1.0 - a_prev - sigma * sigma, "bayes forward kernel")? / (1.0 - a_t).sqrt();
    let gain = k * (1.0 - a_t) / (1.0 - a_prev);
    let obs = &x_prev.data - &(&x0.data * a_prev.sqrt());
    Ok(GaussianParams {
        mean: &x0.data * a_t.sqrt() + obs * gain,
        var: sigma * sigma * (1.0 - a_t) / (1.0 - a_prev),
    })
}
