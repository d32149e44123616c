//! Noise schedules `α_{0..T}` and sampling trajectories over them.
//!
//! `alphas[t]` is the cumulative signal fraction (the "alpha bar" of DDPM
//! codebases); `alphas[0] == 1` always.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end`, `alphas[t] = Π_{s≤t} (1 − β_s)`.
    pub fn linear_beta(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut alphas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        let mut acc = 1.0;
        for t in 1..=steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas.push(acc);
        }
        Self::from_alphas(alphas)
    }

    /// Builds a schedule from explicit values. A leading `1.0` is taken as
    /// `α_0`; otherwise `α_0 = 1` is prepended.
    pub fn from_alphas(mut alphas: Vec<f64>) -> Result<Self> {
        if alphas.first() != Some(&1.0) {
            alphas.insert(0, 1.0);
        }
        if alphas.len() < 2 {
            return Err(Error::param("schedule needs at least one step"));
        }
        for t in 1..alphas.len() {
            let a = alphas[t];
            if !(a > 0.0 && a <= 1.0) || !a.is_finite() {
                return Err(Error::param(format!("alpha[{t}] = {a} outside (0, 1]")));
            }
            if a >= alphas[t - 1] {
                return Err(Error::param(format!(
                    "alphas must strictly decrease: alpha[{t}] = {a} >= alpha[{}] = {}",
                    t - 1,
                    alphas[t - 1]
                )));
            }
        }
        Ok(Self { alphas })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas
            .get(t)
            .copied()
            .ok_or_else(|| Error::param(format!("timestep {t} outside [0, {}]", self.len())))
    }

    /// Stepwise `(β_t, α_t / α_{t−1})` for `1 ≤ t ≤ T`.
    pub fn stepwise(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 || t > self.len() {
            return Err(Error::param(format!("stepwise needs 1 <= t <= {}, got {t}", self.len())));
        }
        let ratio = self.alphas[t] / self.alphas[t - 1];
        Ok((1.0 - ratio, ratio))
    }

    /// Short content hash used to tag files produced under this schedule.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for a in &self.alphas {
            hasher.update(a.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SubsequenceMode {
    #[default]
    Linear,
    Quadratic,
}

impl std::str::FromStr for SubsequenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::param(format!("unknown subsequence mode `{other}`"))),
        }
    }
}

/// Increasing timestep subsequence `τ_1 < … < τ_S = T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    indices: Vec<usize>,
}

impl Trajectory {
    pub fn new(indices: Vec<usize>, total_steps: usize) -> Result<Self> {
        let Some(&last) = indices.last() else {
            return Err(Error::param("trajectory is empty"));
        };
        if last != total_steps {
            return Err(Error::param(format!("trajectory must end at T = {total_steps}, ends at {last}")));
        }
        if indices[0] == 0 {
            return Err(Error::param("trajectory indices start at 1"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("trajectory must be strictly increasing"));
        }
        Ok(Self { indices })
    }

    /// The full trajectory `[1, …, T]`.
    pub fn full(total_steps: usize) -> Result<Self> {
        Self::new((1..=total_steps).collect(), total_steps)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `τ_i` for `0 ≤ i ≤ S`, with `τ_0 = 0`.
    pub fn at(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.indices[i - 1]
        }
    }

    pub fn last(&self) -> usize {
        *self.indices.last().expect("non-empty by construction")
    }
}

/// Picks `S` timesteps out of `1..=T` with `τ_i = ⌊c·i⌋` (linear, `c = T/S`)
/// or `τ_i = ⌊c·i²⌋` (quadratic, `c = T/S²`).
///
/// After flooring the values are clamped to `[1, T]`, the last is forced to
/// `T`, duplicates are dropped, and any shortfall is filled with the largest
/// unused indices below `T`.
pub fn select_subsequence(total_steps: usize, len: usize, mode: SubsequenceMode) -> Result<Trajectory> {
    if len == 0 || len > total_steps {
        return Err(Error::param(format!(
            "subsequence length must be in [1, {total_steps}], got {len}"
        )));
    }
    let (t, s) = (total_steps as u128, len as u128);
    let mut raw: Vec<usize> = (1..=s)
        .map(|i| match mode {
            SubsequenceMode::Linear => (t * i / s) as usize,
            SubsequenceMode::Quadratic => (t * i * i / (s * s)) as usize,
        })
        .map(|v| v.clamp(1, total_steps))
        .collect();
    *raw.last_mut().expect("len >= 1") = total_steps;

    let mut taken = vec![false; total_steps + 1];
    for &v in &raw {
        taken[v] = true;
    }
    let mut count = taken.iter().filter(|&&b| b).count();
    let mut candidate = total_steps;
    while count < len {
        candidate -= 1;
        if !taken[candidate] {
            taken[candidate] = true;
            count += 1;
        }
    }
    raw = (1..=total_steps).filter(|&v| taken[v]).collect();
    Trajectory::new(raw, total_steps)
}
