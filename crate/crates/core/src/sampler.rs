//! The generalized generative step over a trajectory, for every member of
//! the σ family: DDIM (η = 0), DDPM (η = 1), the over-dispersed σ̂ variant,
//! and arbitrary explicit per-transition noise scales.

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;

use crate::denoiser::{predict_x0, Denoiser};
use crate::error::{check_shape, Error, Result};
use crate::gaussian::checked_sqrt;
use crate::rng::{NoiseStream, Purpose};
use crate::schedule::{NoiseSchedule, Trajectory};
use crate::state::StateBatch;

#[derive(Debug, Clone, PartialEq)]
pub enum SigmaPolicy {
    /// `σ(η) = η·σ_DDPM` on each transition.
    Eta(f64),
    /// Noise `√(1 − α_{τ_i}/α_{τ_{i−1}})`; the direction term keeps `σ(1)`.
    SigmaHat,
    /// One value per transition, indexed by `i − 1`.
    Explicit(Vec<f64>),
}

impl SigmaPolicy {
    pub const DDIM: SigmaPolicy = SigmaPolicy::Eta(0.0);
    pub const DDPM: SigmaPolicy = SigmaPolicy::Eta(1.0);

    /// Short tag for metrics rows, e.g. `eta=0` or `sigma_hat`.
    pub fn tag(&self) -> String {
        match self {
            SigmaPolicy::Eta(e) => format!("eta={e}"),
            SigmaPolicy::SigmaHat => "sigma_hat".into(),
            SigmaPolicy::Explicit(_) => "explicit".into(),
        }
    }

    /// `(direction σ, noise σ)` for transition `i` (from `τ_i` to `τ_{i−1}`).
    pub fn resolve(&self, schedule: &NoiseSchedule, traj: &Trajectory, i: usize) -> Result<(f64, f64)> {
        check_transition(traj, i)?;
        match self {
            SigmaPolicy::Eta(eta) => {
                if !(*eta >= 0.0 && eta.is_finite()) {
                    return Err(Error::param(format!("eta must be finite and nonnegative, got {eta}")));
                }
                let s = sigma_eta(schedule, traj, i, *eta)?;
                Ok((s, s))
            }
            SigmaPolicy::SigmaHat => Ok((sigma_eta(schedule, traj, i, 1.0)?, sigma_hat(schedule, traj, i)?)),
            SigmaPolicy::Explicit(v) => {
                if v.len() != traj.len() {
                    return Err(Error::param(format!(
                        "explicit sigma vector has {} entries for {} transitions",
                        v.len(),
                        traj.len()
                    )));
                }
                let s = v[i - 1];
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::param(format!("sigma[{i}] = {s} must be finite and nonnegative")));
                }
                Ok((s, s))
            }
        }
    }

    /// Checks the policy against every transition of `traj`.
    pub fn validate(&self, schedule: &NoiseSchedule, traj: &Trajectory) -> Result<()> {
        for i in 2..=traj.len() {
            let (dir, _) = self.resolve(schedule, traj, i)?;
            let a_prev = schedule.alpha(traj.at(i - 1))?;
            checked_sqrt(1.0 - a_prev - dir * dir, &format!("policy {} at transition {i}", self.tag()))?;
        }
        if traj.len() >= 1 {
            self.resolve(schedule, traj, 1)?;
        }
        Ok(())
    }
}

fn check_transition(traj: &Trajectory, i: usize) -> Result<()> {
    if i == 0 || i > traj.len() {
        return Err(Error::param(format!("transition index must be in [1, {}], got {i}", traj.len())));
    }
    Ok(())
}

fn alpha_pair(schedule: &NoiseSchedule, traj: &Trajectory, i: usize) -> Result<(f64, f64)> {
    check_transition(traj, i)?;
    Ok((schedule.alpha(traj.at(i - 1))?, schedule.alpha(traj.at(i))?))
}

/// `σ_{τ_i}(η) = η·√((1 − α_{τ_{i−1}})/(1 − α_{τ_i}))·√(1 − α_{τ_i}/α_{τ_{i−1}})`.
pub fn sigma_eta(schedule: &NoiseSchedule, traj: &Trajectory, i: usize, eta: f64) -> Result<f64> {
    let (a_prev, a_cur) = alpha_pair(schedule, traj, i)?;
    Ok(eta * ((1.0 - a_prev) / (1.0 - a_cur)).sqrt() * (1.0 - a_cur / a_prev).sqrt())
}

/// `σ̂_{τ_i} = √(1 − α_{τ_i}/α_{τ_{i−1}})`.
pub fn sigma_hat(schedule: &NoiseSchedule, traj: &Trajectory, i: usize) -> Result<f64> {
    let (a_prev, a_cur) = alpha_pair(schedule, traj, i)?;
    Ok((1.0 - a_cur / a_prev).sqrt())
}

/// One generative transition from `τ_i` to `τ_{i−1}`:
/// `√α_prev·f(x) + √(1 − α_prev − σ_dir²)·ε̂ + σ_noise·noise`.
///
/// On the final transition (`τ_{i−1} = 0`) the direction term is absent and
/// the result is `f(x) + σ·noise`.
pub fn generalized_step(
    schedule: &NoiseSchedule,
    x: &StateBatch,
    traj: &Trajectory,
    i: usize,
    model: &dyn Denoiser,
    policy: &SigmaPolicy,
    noise: Option<&Array2<f64>>,
) -> Result<StateBatch> {
    let (sigma_dir, sigma_noise) = policy.resolve(schedule, traj, i)?;
    let t_cur = traj.at(i);
    let t_prev = traj.at(i - 1);
    if x.t != t_cur {
        return Err(Error::param(format!("state is at t = {}, transition {i} starts at {t_cur}", x.t)));
    }
    let a_prev = schedule.alpha(t_prev)?;
    let eps_hat = model.eval(x.view(), t_cur)?;
    check_shape(x.data.shape(), eps_hat.shape())?;
    let x0_hat = predict_x0(schedule, x, t_cur, &eps_hat)?;

    let mut next = if t_prev == 0 {
        x0_hat
    } else {
        let dir = checked_sqrt(1.0 - a_prev - sigma_dir * sigma_dir, "generalized step direction")?;
        x0_hat * a_prev.sqrt() + eps_hat * dir
    };
    if sigma_noise > 0.0 {
        let noise = noise.ok_or_else(|| Error::param("stochastic step needs a noise draw"))?;
        check_shape(x.data.shape(), noise.shape())?;
        next.scaled_add(sigma_noise, noise);
    }
    StateBatch::new(next, t_prev)
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub x0: StateBatch,
    /// States after each transition, from `x_{τ_S}` down to `x_0`, when requested.
    pub intermediates: Option<Vec<StateBatch>>,
}

/// Runs every transition from `τ_S = T` down to 0. Row `r` of the batch is
/// chain `first_chain + r`; its step noise comes from `(seed, chain, τ_i)`.
pub fn run_trajectory(
    schedule: &NoiseSchedule,
    x_t: &StateBatch,
    traj: &Trajectory,
    model: &dyn Denoiser,
    policy: &SigmaPolicy,
    noise: &NoiseStream,
    first_chain: u64,
    keep_intermediates: bool,
) -> Result<SampleOutput> {
    if x_t.t != traj.last() || traj.last() != schedule.len() {
        return Err(Error::param(format!(
            "sampling starts at T = {} but the state is at t = {} and the trajectory ends at {}",
            schedule.len(),
            x_t.t,
            traj.last()
        )));
    }
    policy.validate(schedule, traj)?;
    let chains = first_chain..first_chain + x_t.batch() as u64;
    let mut state = x_t.clone();
    let mut trail = keep_intermediates.then(|| vec![state.clone()]);
    for i in (1..=traj.len()).rev() {
        let (_, sigma_noise) = policy.resolve(schedule, traj, i)?;
        let draw = (sigma_noise > 0.0)
            .then(|| noise.normal_matrix(Purpose::Step, chains.clone(), traj.at(i) as u64, x_t.dim()));
        state = generalized_step(schedule, &state, traj, i, model, policy, draw.as_ref())?;
        if let Some(trail) = trail.as_mut() {
            trail.push(state.clone());
        }
    }
    Ok(SampleOutput { x0: state, intermediates: trail })
}

/// [`run_trajectory`] split into row chunks run on the rayon pool. Output is
/// bit-identical to the serial run.
pub fn run_trajectory_parallel(
    schedule: &NoiseSchedule,
    x_t: &StateBatch,
    traj: &Trajectory,
    model: &dyn Denoiser,
    policy: &SigmaPolicy,
    noise: &NoiseStream,
    first_chain: u64,
    chunk: usize,
) -> Result<StateBatch> {
    let chunk = chunk.max(1);
    let parts: Vec<Array2<f64>> = x_t
        .data
        .axis_chunks_iter(Axis(0), chunk)
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(k, rows)| {
            let part = StateBatch::new(rows.to_owned(), x_t.t)?;
            let start = first_chain + (k * chunk) as u64;
            run_trajectory(schedule, &part, traj, model, policy, noise, start, false).map(|o| o.x0.data)
        })
        .collect::<Result<_>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let data = concatenate(Axis(0), &views).map_err(|e| Error::param(e.to_string()))?;
    StateBatch::new(data, 0)
}

/// Standard-normal latents `x_T` for chains `first_chain..first_chain + n`.
pub fn draw_latents(schedule: &NoiseSchedule, noise: &NoiseStream, first_chain: u64, n: usize, d: usize) -> Result<StateBatch> {
    let data = noise.normal_matrix(Purpose::Latent, first_chain..first_chain + n as u64, 0, d);
    StateBatch::new(data, schedule.len())
}
