//! Categorical analogue of the non-Markovian forward process.
//!
//! `q(x_t|x_0) = Cat(α_t x_0 + (1 − α_t)·u)` with `u` uniform, and the reverse
//! conditional mixes `x_t`, `x_0` and `u` with weights
//! `σ_t`, `α_{t−1} − σ_t α_t` and `(1 − α_{t−1}) − (1 − α_t)σ_t`.

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-12;
const WEIGHT_SLACK: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalState {
    probs: Vec<f64>,
}

impl CategoricalState {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::param("a categorical needs at least one category"));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0 && p.is_finite())) {
            return Err(Error::domain(format!("probability {p} is not in [0, inf)")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::domain(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::param(format!("index {index} out of range for {k} categories")));
        }
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("a categorical needs at least one category"));
        }
        Ok(Self { probs: vec![1.0 / k as f64; k] })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn is_one_hot(&self) -> bool {
        self.probs.iter().filter(|&&p| p == 1.0).count() == 1 && self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    fn same_k(&self, other: &Self) -> Result<()> {
        if self.k() != other.k() {
            return Err(Error::Shape { expected: vec![self.k()], got: vec![other.k()] });
        }
        Ok(())
    }
}

/// `α_0 = 1 ≥ α_1 ≥ … ≥ α_T = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    alphas: Vec<f64>,
}

impl DiscreteSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::param("need at least alpha_0 and alpha_T"));
        }
        if alphas[0] != 1.0 || *alphas.last().unwrap() != 0.0 {
            return Err(Error::param("alphas must start at exactly 1 and end at exactly 0"));
        }
        if let Some(w) = alphas.windows(2).position(|w| !(w[1] <= w[0])) {
            return Err(Error::param(format!("alphas increase at t = {}", w + 1)));
        }
        Ok(Self { alphas })
    }

    /// `α_t = 1 − t/T`.
    pub fn linear(steps: usize) -> Result<Self> {
        Self::new((0..=steps).map(|t| 1.0 - t as f64 / steps as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas
            .get(t)
            .copied()
            .ok_or_else(|| Error::param(format!("t = {t} outside 0..={}", self.len())))
    }

    /// Largest σ_t keeping every reverse mixture weight nonnegative.
    pub fn sigma_max(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::param("reverse steps start at t = 1"));
        }
        let (prev, cur) = (self.alpha(t - 1)?, self.alpha(t)?);
        let x0_cap = if cur > 0.0 { prev / cur } else { f64::INFINITY };
        let u_cap = if cur < 1.0 { (1.0 - prev) / (1.0 - cur) } else { f64::INFINITY };
        Ok(x0_cap.min(u_cap))
    }

    /// Mixture weights on `(x_t, x_0, u)`.
    pub fn reverse_weights(&self, t: usize, sigma: f64) -> Result<[f64; 3]> {
        if t == 0 {
            return Err(Error::param("reverse steps start at t = 1"));
        }
        let (prev, cur) = (self.alpha(t - 1)?, self.alpha(t)?);
        let w = [sigma, prev - sigma * cur, (1.0 - prev) - (1.0 - cur) * sigma];
        for (name, v) in ["x_t", "x_0", "uniform"].iter().zip(w) {
            if !(v >= -WEIGHT_SLACK) {
                return Err(Error::domain(format!(
                    "sigma_{t} = {sigma} makes the weight on {name} negative ({v}); feasible range is [0, {}]",
                    self.sigma_max(t)?
                )));
            }
        }
        Ok(w.map(|v| v.max(0.0)))
    }
}

fn mix(weights: [f64; 3], parts: [&[f64]; 3]) -> Result<CategoricalState> {
    let k = parts[0].len();
    let probs = (0..k)
        .map(|i| weights[0] * parts[0][i] + weights[1] * parts[1][i] + weights[2] * parts[2][i])
        .collect();
    CategoricalState::new(probs)
}

pub fn cat_forward_marginal(schedule: &DiscreteSchedule, x0: &CategoricalState, t: usize) -> Result<CategoricalState> {
    let a = schedule.alpha(t)?;
    let u = 1.0 / x0.k() as f64;
    CategoricalState::new(x0.probs.iter().map(|p| a * p + (1.0 - a) * u).collect())
}

pub fn cat_reverse_conditional(
    schedule: &DiscreteSchedule,
    x_t: &CategoricalState,
    x0: &CategoricalState,
    t: usize,
    sigma: f64,
) -> Result<CategoricalState> {
    x_t.same_k(x0)?;
    let w = schedule.reverse_weights(t, sigma)?;
    let u = CategoricalState::uniform(x_t.k())?;
    mix(w, [&x_t.probs, &x0.probs, &u.probs])
}

/// Reverse step with `x_0` replaced by the prediction `f(x_t, t)`.
pub fn cat_reverse_model<F>(
    schedule: &DiscreteSchedule,
    x_t: &CategoricalState,
    t: usize,
    f: F,
    sigma: f64,
) -> Result<CategoricalState>
where
    F: Fn(&CategoricalState, usize) -> Vec<f64>,
{
    let pred = CategoricalState::new(f(x_t, t))?;
    cat_reverse_conditional(schedule, x_t, &pred, t, sigma)
}

/// Predicts `x_0 = x_t`.
pub fn identity_guess(x_t: &CategoricalState, _t: usize) -> Vec<f64> {
    x_t.probs.clone()
}

/// `KL(Cat(p) ‖ Cat(q))`, `+inf` when `q` misses mass of `p`.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(&pi, &qi)| if qi > 0.0 { pi * (pi / qi).ln() } else { f64::INFINITY })
        .sum()
}

/// `KL(q(x_{t−1}|x_t, x_0) ‖ p(x_{t−1}|x_t))` and its convexity bound
/// `(α_{t−1} − σ_t α_t)·KL(Cat(x_0) ‖ Cat(f(x_t)))`.
pub fn cat_kl_and_bound<F>(
    schedule: &DiscreteSchedule,
    x_t: &CategoricalState,
    x0: &CategoricalState,
    t: usize,
    sigma: f64,
    f: F,
) -> Result<(f64, f64)>
where
    F: Fn(&CategoricalState, usize) -> Vec<f64>,
{
    let pred = CategoricalState::new(f(x_t, t))?;
    let q = cat_reverse_conditional(schedule, x_t, x0, t, sigma)?;
    let p = cat_reverse_conditional(schedule, x_t, &pred, t, sigma)?;
    let w = schedule.reverse_weights(t, sigma)?[1];
    let inner = categorical_kl(&x0.probs, &pred.probs);
    let bound = if w == 0.0 { 0.0 } else { w * inner };
    Ok((categorical_kl(&q.probs, &p.probs), bound))
}
