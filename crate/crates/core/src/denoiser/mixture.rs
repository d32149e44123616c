//! Gaussian-mixture data and its Bayes-optimal noise predictor.
//!
//! Under `x_0 ~ Σ_k w_k N(m_k, s² I)` the noisy marginal is
//! `x_t ~ Σ_k w_k N(√α m_k, v I)` with `v = α s² + 1 − α`, and the optimal
//! predictor is `ε* = −√(1 − α)·∇ log p_t(x_t) = √(1 − α) Σ_k r_k (x_t − √α m_k)/v`
//! with `r_k` the component responsibilities.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserKind};
use crate::error::{Error, Result};
use crate::rng::{NoiseStream, Purpose};
use crate::schedule::NoiseSchedule;
use crate::state::StateBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    component_std: f64,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, component_std: f64) -> Result<Self> {
        let spec = Self { weights, means, component_std };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.means.len() {
            return Err(Error::param("mixture needs one mean per weight and at least one component"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::param("mixture weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param(format!("mixture weights sum to {total}, not 1")));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::param("mixture means must share a nonzero dimension"));
        }
        if !(self.component_std > 0.0 && self.component_std.is_finite()) {
            return Err(Error::param("component_std must be positive"));
        }
        Ok(())
    }

    /// Equal-weight mixture with `k` components on a circle of radius `radius`.
    pub fn ring(k: usize, radius: f64, component_std: f64) -> Result<Self> {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(vec![1.0 / k as f64; k], means, component_std)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn component_std(&self) -> f64 {
        self.component_std
    }
}

/// Clean-data distribution: a Gaussian mixture or a uniform point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSpec {
    Mixture(MixtureSpec),
    Points {
        points: Vec<Vec<f64>>,
    },
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataSpec::Mixture(m) => m.validate(),
            DataSpec::Points { points } => {
                let d = points.first().map_or(0, Vec::len);
                if d == 0 || points.iter().any(|p| p.len() != d) {
                    return Err(Error::param("point set must be non-empty with a shared nonzero dimension"));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataSpec::Mixture(m) => m.dim(),
            DataSpec::Points { points } => points[0].len(),
        }
    }

    /// `(weights, means, std)`; a point set is a zero-width mixture.
    fn components(&self) -> (Vec<f64>, Array2<f64>, f64) {
        let (weights, rows, std) = match self {
            DataSpec::Mixture(m) => (m.weights.clone(), &m.means, m.component_std),
            DataSpec::Points { points } => (vec![1.0 / points.len() as f64; points.len()], points, 0.0),
        };
        let d = rows[0].len();
        let flat = rows.iter().flatten().copied().collect();
        (weights, Array2::from_shape_vec((rows.len(), d), flat).expect("validated"), std)
    }

    /// Draws `x_0` for each chain id in `chains`; chain `c` always gets the same point.
    pub fn sample(&self, noise: &NoiseStream, chains: std::ops::Range<u64>) -> Array2<f64> {
        let (weights, means, std) = self.components();
        let n = (chains.end - chains.start) as usize;
        let mut out = Array2::zeros((n, means.ncols()));
        for (mut row, chain) in out.rows_mut().into_iter().zip(chains) {
            let mut rng = noise.rng(Purpose::Data, chain, 0);
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = weights[0];
            while u >= acc && k + 1 < weights.len() {
                k += 1;
                acc += weights[k];
            }
            for (j, v) in row.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v = means[[k, j]] + std * z;
            }
        }
        out
    }

    pub fn mean(&self) -> Array1<f64> {
        let (w, means, _) = self.components();
        means.t().dot(&Array1::from(w))
    }

    pub fn covariance(&self) -> Array2<f64> {
        let (w, means, std) = self.components();
        let mu = means.t().dot(&Array1::from(w.clone()));
        let d = means.ncols();
        let mut cov = Array2::eye(d) * (std * std);
        for (k, wk) in w.iter().enumerate() {
            let diff = &means.row(k) - &mu;
            for i in 0..d {
                for j in 0..d {
                    cov[[i, j]] += wk * diff[i] * diff[j];
                }
            }
        }
        cov
    }
}

/// Exact `E[ε | x_t]` for mixture data under a given schedule.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    schedule: NoiseSchedule,
    log_weights: Vec<f64>,
    means: Array2<f64>,
    std: f64,
}

impl AnalyticDenoiser {
    pub fn new(data: &DataSpec, schedule: NoiseSchedule) -> Result<Self> {
        data.validate()?;
        let (w, means, std) = data.components();
        Ok(Self {
            schedule,
            log_weights: w.iter().map(|w| w.ln()).collect(),
            means,
            std,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Component responsibilities `r_k(x_t)`, shape `(batch, K)`.
    fn responsibilities(&self, x: ArrayView2<'_, f64>, a: f64, v: f64) -> Array2<f64> {
        let k = self.means.nrows();
        let mut logits = Array2::zeros((x.nrows(), k));
        for (i, row) in x.rows().into_iter().enumerate() {
            for c in 0..k {
                let sq: f64 = row
                    .iter()
                    .zip(self.means.row(c))
                    .map(|(xv, m)| (xv - a.sqrt() * m).powi(2))
                    .sum();
                logits[[i, c]] = self.log_weights[c] - 0.5 * sq / v;
            }
        }
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|l| (l - max).exp());
            let z = row.sum();
            row /= z;
        }
        logits
    }

    fn check_t(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 {
            return Err(Error::domain("optimal noise prediction undefined at t = 0 (1 - alpha_0 = 0)"));
        }
        let a = self.schedule.alpha(t)?;
        Ok((a, a * self.std * self.std + 1.0 - a))
    }

    /// Posterior mean `E[x_0 | x_t]`.
    pub fn posterior_mean(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        let (a, v) = self.check_t(t)?;
        let r = self.responsibilities(x, a, v);
        let shrink = a.sqrt() * self.std * self.std / v;
        // Σ_k r_k (m_k + shrink·(x − √α m_k)) = shrink·x + (1 − shrink·√α)·Σ_k r_k m_k
        let mixed = r.dot(&self.means);
        Ok(&x * shrink + mixed * (1.0 - shrink * a.sqrt()))
    }

    /// `∇ log p_t(x_t)` of the noisy marginal.
    pub fn score(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        let (a, v) = self.check_t(t)?;
        let r = self.responsibilities(x, a, v);
        let centre = r.dot(&self.means) * a.sqrt();
        Ok((&centre - &x) / v)
    }
}

impl Denoiser for AnalyticDenoiser {
    fn eval(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        let (a, _) = self.check_t(t)?;
        Ok(self.score(x, t)? * -(1.0 - a).sqrt())
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::AnalyticMixture
    }
}

/// Bayes-optimal `ε*(x_t)` for mixture data.
pub fn mixture_optimal_eps(
    spec: &MixtureSpec,
    schedule: &NoiseSchedule,
    x_t: &StateBatch,
    t: usize,
) -> Result<Array2<f64>> {
    AnalyticDenoiser::new(&DataSpec::Mixture(spec.clone()), schedule.clone())?.eval(x_t.view(), t)
}
