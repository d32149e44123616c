//! DDIM as an Euler discretisation in `(x̄, σ)` coordinates, where
//! `x̄ = x/√α` and `σ = √((1 − α)/α)`.
//!
//! The same iterate runs backwards in `t` to encode data into latents. The
//! probability-flow Euler iterate (steps in `σ²` rather than `σ`) is provided
//! for comparison.

use ndarray::Array2;

use crate::denoiser::Denoiser;
use crate::error::{check_shape, Error, Result};
use crate::schedule::{NoiseSchedule, Trajectory};
use crate::state::StateBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct OdeState {
    pub x_bar: Array2<f64>,
    pub sigma_level: f64,
}

/// `σ(t) = √((1 − α_t)/α_t)`.
pub fn sigma_level(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let a = schedule.alpha(t)?;
    if !(a > 0.0) {
        return Err(Error::domain(format!("alpha_{t} underflowed to zero")));
    }
    Ok(((1.0 - a) / a).sqrt())
}

pub fn to_ode_state(schedule: &NoiseSchedule, x: &StateBatch) -> Result<OdeState> {
    let a = schedule.alpha(x.t)?;
    Ok(OdeState {
        x_bar: &x.data / a.sqrt(),
        sigma_level: sigma_level(schedule, x.t)?,
    })
}

/// Inverse of [`to_ode_state`]: `x = x̄/√(σ² + 1)`.
pub fn from_ode_state(state: &OdeState, t: usize) -> Result<StateBatch> {
    if !(state.sigma_level >= 0.0) {
        return Err(Error::param("sigma level must be nonnegative"));
    }
    StateBatch::new(&state.x_bar / (state.sigma_level.powi(2) + 1.0).sqrt(), t)
}

/// Which Euler discretisation of the ODE to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    /// Steps linear in `σ`.
    Ddim,
    /// Steps linear in `σ²`, scaled by `1/(2σ)` at the start point.
    ProbabilityFlow,
}

/// Timestep at which the model is queried for a step leaving `t_from`.
/// Leaving `t = 0` (encoding) the model has no noise level to read, so the
/// destination's is used.
fn model_time(t_from: usize, t_to: usize) -> usize {
    if t_from == 0 {
        t_to
    } else {
        t_from
    }
}

fn euler_step(
    schedule: &NoiseSchedule,
    x: &StateBatch,
    t_to: usize,
    model: &dyn Denoiser,
    integrator: Integrator,
) -> Result<StateBatch> {
    let t_from = x.t;
    if t_from == t_to {
        return Err(Error::param("Euler step needs t_from != t_to"));
    }
    let s_from = sigma_level(schedule, t_from)?;
    let s_to = sigma_level(schedule, t_to)?;
    let eps = model.eval(x.view(), model_time(t_from, t_to))?;
    check_shape(x.data.shape(), eps.shape())?;
    let increment = match integrator {
        Integrator::Ddim => s_to - s_from,
        Integrator::ProbabilityFlow => {
            if s_from == 0.0 {
                return Err(Error::domain("probability-flow step cannot start at sigma = 0"));
            }
            0.5 * (s_to * s_to - s_from * s_from) / s_from
        }
    };
    let mut x_bar = &x.data / schedule.alpha(t_from)?.sqrt();
    x_bar.scaled_add(increment, &eps);
    StateBatch::new(x_bar * schedule.alpha(t_to)?.sqrt(), t_to)
}

/// `x̄_to = x̄_from + (σ_to − σ_from)·ε̂(x_from)`, mapped back to `x`.
/// Works in either direction of `t`.
pub fn ddim_euler_step(schedule: &NoiseSchedule, x: &StateBatch, t_to: usize, model: &dyn Denoiser) -> Result<StateBatch> {
    euler_step(schedule, x, t_to, model, Integrator::Ddim)
}

/// `x̄_to = x̄_from + ½(σ_to² − σ_from²)/σ_from·ε̂(x_from)`.
pub fn prob_flow_euler_step(schedule: &NoiseSchedule, x: &StateBatch, t_to: usize, model: &dyn Denoiser) -> Result<StateBatch> {
    euler_step(schedule, x, t_to, model, Integrator::ProbabilityFlow)
}

/// Integrates from `x_T` down to `t = 0` along `reversed(τ)`.
pub fn integrate(
    schedule: &NoiseSchedule,
    x_t: &StateBatch,
    traj: &Trajectory,
    model: &dyn Denoiser,
    integrator: Integrator,
) -> Result<StateBatch> {
    if x_t.t != traj.last() {
        return Err(Error::param(format!("state at t = {} but trajectory ends at {}", x_t.t, traj.last())));
    }
    let mut state = x_t.clone();
    for i in (1..=traj.len()).rev() {
        state = euler_step(schedule, &state, traj.at(i - 1), model, integrator)?;
    }
    Ok(state)
}

/// Maps data `x_0` to latents `x_T` by running the DDIM iterate forward in
/// `t` over `0 → τ_1 → … → τ_S`.
pub fn encode(schedule: &NoiseSchedule, x0: &StateBatch, traj: &Trajectory, model: &dyn Denoiser) -> Result<StateBatch> {
    if x0.t != 0 {
        return Err(Error::param(format!("encoding starts from t = 0, got t = {}", x0.t)));
    }
    let mut state = x0.clone();
    for &t in traj.indices() {
        state = ddim_euler_step(schedule, &state, t, model)?;
    }
    Ok(state)
}

/// `∇_x̄ log p_t(x̄) = −ε̂/σ(t)`.
pub fn score_from_eps(schedule: &NoiseSchedule, eps_hat: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(Error::domain("score undefined at t = 0 (sigma = 0)"));
    }
    let s = sigma_level(schedule, t)?;
    Ok(eps_hat / -s)
}

/// Mean over all entries of `(a − b)²`.
pub fn per_dim_mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_shape(a.shape(), b.shape())?;
    Ok((a - b).mapv(|v| v * v).mean().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticDenoiser, ConstantDenoiser, DataSpec, MixtureSpec};
    use crate::rng::{NoiseStream, Purpose};
    use crate::sampler::{generalized_step, run_trajectory, SigmaPolicy};
    use crate::schedule::{select_subsequence, SubsequenceMode};
    use ndarray::array;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear_beta(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn ode_state_examples() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.5]).unwrap();
        let x = StateBatch::new(array![[1.0, -2.0]], 0).unwrap();
        let st = to_ode_state(&s, &x).unwrap();
        assert_eq!(st.x_bar, x.data);
        assert_eq!(st.sigma_level, 0.0);

        let x = StateBatch::new(array![[1.0, -2.0]], 1).unwrap();
        let st = to_ode_state(&s, &x).unwrap();
        assert!((st.sigma_level - 1.0).abs() < 1e-15);
        assert!((st.x_bar[[0, 0]] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ode_state_round_trip() {
        let s = sched();
        let stream = NoiseStream::new(0);
        for k in 0..1000u64 {
            let t = (k as usize * 37) % 1001;
            let x = StateBatch::new(stream.normal_matrix(Purpose::Aux, k..k + 1, 0, 2), t).unwrap();
            let back = from_ode_state(&to_ode_state(&s, &x).unwrap(), t).unwrap();
            let err = (&back.data - &x.data).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(err < 1e-12, "t={t}: {err}");
        }
    }

    #[test]
    fn zero_model_is_pure_rescale() {
        let s = sched();
        let x = StateBatch::new(array![[0.4, -1.0]], 600).unwrap();
        let zero = ConstantDenoiser::default();
        let k = (s.alphas()[200] / s.alphas()[600]).sqrt();
        for step in [ddim_euler_step(&s, &x, 200, &zero).unwrap(), prob_flow_euler_step(&s, &x, 200, &zero).unwrap()] {
            assert!((step.data[[0, 0]] - 0.4 * k).abs() < 1e-14);
            assert!((step.data[[0, 1]] + k).abs() < 1e-14);
        }
        let x0 = StateBatch::new(array![[0.4, -1.0]], 0).unwrap();
        let tr = select_subsequence(1000, 10, SubsequenceMode::Linear).unwrap();
        let xt = encode(&s, &x0, &tr, &zero).unwrap();
        assert!((xt.data[[0, 0]] - 0.4 * s.alphas()[1000].sqrt()).abs() < 1e-14);
        assert_eq!(xt.t, 1000);
    }

    #[test]
    fn euler_step_matches_generalized_step() {
        let s = sched();
        let den = AnalyticDenoiser::new(&DataSpec::Mixture(MixtureSpec::ring(3, 1.0, 0.2).unwrap()), s.clone()).unwrap();
        let stream = NoiseStream::new(4);
        let mut worst: f64 = 0.0;
        for k in 0..1000u64 {
            let t_from = 1 + (k as usize * 389) % 1000;
            let t_to = (k as usize * 13) % t_from;
            let tr = if t_to == 0 {
                Trajectory::new((t_from..=1000).collect(), 1000).unwrap()
            } else {
                let mut v = vec![t_to];
                v.extend(t_from..=1000);
                Trajectory::new(v, 1000).unwrap()
            };
            let i = if t_to == 0 { 1 } else { 2 };
            let x = StateBatch::new(stream.normal_matrix(Purpose::Aux, k..k + 1, 0, 2), t_from).unwrap();
            let a = ddim_euler_step(&s, &x, t_to, &den).unwrap();
            let b = generalized_step(&s, &x, &tr, i, &den, &SigmaPolicy::DDIM, None).unwrap();
            for (p, q) in a.data.iter().zip(b.data.iter()) {
                worst = worst.max((p - q).abs() / q.abs().max(1.0));
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn frozen_slope_step_is_reversible() {
        let s = sched();
        let c = ConstantDenoiser { value: 0.37 };
        let x = StateBatch::new(array![[1.2, -0.3]], 300).unwrap();
        let there = ddim_euler_step(&s, &x, 450, &c).unwrap();
        let back = ddim_euler_step(&s, &there, 300, &c).unwrap();
        assert!((&back.data - &x.data).mapv(f64::abs).iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn coarse_step_integrators_differ() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.9, 0.5]).unwrap();
        let c = ConstantDenoiser { value: 1.0 };
        let x = StateBatch::new(array![[0.0]], 2).unwrap();
        let a = ddim_euler_step(&s, &x, 1, &c).unwrap();
        let b = prob_flow_euler_step(&s, &x, 1, &c).unwrap();
        // sigma goes 1 -> 1/3: increments -2/3 vs -4/9, times sqrt(0.9)
        assert!((a.data[[0, 0]] + 2.0 / 3.0 * 0.9f64.sqrt()).abs() < 1e-15);
        assert!((b.data[[0, 0]] + 4.0 / 9.0 * 0.9f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn score_bridge() {
        let s = sched();
        let zero = Array2::zeros((1, 2));
        assert_eq!(score_from_eps(&s, &zero, 10).unwrap(), zero);
        assert!(score_from_eps(&s, &zero, 0).is_err());

        let unit = NoiseSchedule::from_alphas(vec![1.0, 0.5]).unwrap();
        let v = array![[0.3, -2.0]];
        assert_eq!(score_from_eps(&unit, &v, 1).unwrap(), -&v);

        // single Gaussian: perturbed marginal of x̄ is N(m, (s² + σ²) I)
        let (m, sd) = ([0.5, -1.5], 0.7);
        let data = DataSpec::Mixture(MixtureSpec::new(vec![1.0], vec![m.to_vec()], sd).unwrap());
        let den = AnalyticDenoiser::new(&data, s.clone()).unwrap();
        let xs = NoiseStream::new(3).normal_matrix(Purpose::Aux, 0..20, 0, 2) * 3.0;
        for t in [1, 100, 900] {
            let x = StateBatch::new(xs.clone(), t).unwrap();
            let score = score_from_eps(&s, &den.eval(x.view(), t).unwrap(), t).unwrap();
            let st = to_ode_state(&s, &x).unwrap();
            let var = sd * sd + st.sigma_level.powi(2);
            for r in 0..20 {
                for j in 0..2 {
                    let expected = -(st.x_bar[[r, j]] - m[j]) / var;
                    assert!((score[[r, j]] - expected).abs() < 1e-8 * (1.0 + expected.abs()));
                }
            }
        }
    }

    #[test]
    fn point_data_reconstruction_improves_with_steps() {
        let s = sched();
        let c = vec![0.8, -0.4];
        let den = AnalyticDenoiser::new(&DataSpec::Points { points: vec![c.clone()] }, s.clone()).unwrap();
        let x0 = StateBatch::new(array![[0.8, -0.4]], 0).unwrap();
        let mut last = f64::INFINITY;
        for steps in [10, 100, 1000] {
            let tr = select_subsequence(1000, steps, SubsequenceMode::Linear).unwrap();
            let xt = encode(&s, &x0, &tr, &den).unwrap();
            let back = run_trajectory(&s, &xt, &tr, &den, &SigmaPolicy::DDIM, &NoiseStream::new(0), 0, false).unwrap();
            let mse = per_dim_mse(&back.x0.data, &x0.data).unwrap();
            assert!(mse <= last + 1e-20, "S={steps}: {mse} > {last}");
            last = mse;
        }
        assert!(last < 1e-12);
    }
}
