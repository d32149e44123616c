//! Named end-to-end checks run by `ddim verify`, one per acceptance property.

use std::time::Instant;

use ndarray::{array, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::metrics::{energy_distance, linear_fit};
use super::slerp::slerp;
use crate::denoiser::{gradient_check, predict_x0, AnalyticDenoiser, DataSpec, Denoiser, MixtureSpec, Mlp, MlpShape};
use crate::discrete::{cat_forward_marginal, cat_kl_and_bound, cat_reverse_conditional, CategoricalState, DiscreteSchedule};
use crate::error::Result;
use crate::gaussian::{ddpm_posterior_params, reverse_conditional_params};
use crate::objective::{j_sigma, l_gamma, matched_gamma, SamplePlan};
use crate::ode::{encode, integrate, per_dim_mse, Integrator};
use crate::rng::{NoiseStream, Purpose};
use crate::sampler::{draw_latents, generalized_step, run_trajectory, run_trajectory_parallel, sigma_eta, SigmaPolicy};
use crate::schedule::{select_subsequence, NoiseSchedule, SubsequenceMode, Trajectory};
use crate::state::StateBatch;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn(u64) -> Result<(bool, String)>;

pub const CHECKS: [(&str, CheckFn); 11] = [
    ("marginal_consistency", marginal_consistency),
    ("objective_constancy", objective_constancy),
    ("ddpm_reduction", ddpm_reduction),
    ("deterministic_consistency", deterministic_consistency),
    ("reconstruction_trend", reconstruction_trend),
    ("integrator_refinement", integrator_refinement),
    ("discrete_marginalization", discrete_marginalization),
    ("sigma_hat_degradation", sigma_hat_degradation),
    ("timing_linearity", timing_linearity),
    ("gradient_check", gradient),
    ("slerp_endpoints", slerp_endpoints),
];

pub fn run(name: &'static str, check: CheckFn, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match check(seed) {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Runs the checks whose names are in `only` (all when empty).
pub fn run_all(seed: u64, only: &[String]) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .filter(|(n, _)| only.is_empty() || only.iter().any(|o| o == n))
        .map(|&(n, f)| run(n, f, seed))
        .collect()
}

pub fn standard_schedule() -> Result<NoiseSchedule> {
    NoiseSchedule::linear_beta(1000, 1e-4, 0.02)
}

pub fn ring() -> DataSpec {
    DataSpec::Mixture(MixtureSpec::ring(3, 2.0, 0.3).expect("valid ring"))
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn scalar(v: f64, t: usize) -> Result<StateBatch> {
    StateBatch::new(array![[v]], t)
}

fn marginal_consistency(seed: u64) -> Result<(bool, String)> {
    let s = standard_schedule()?;
    let a = s.alphas();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 0.7;
    let x0 = scalar(c, 0)?;
    let mut worst: f64 = 0.0;
    for t in 1..=s.len() {
        let at_mean = scalar(a[t].sqrt() * c, t)?;
        let shifted = scalar(a[t].sqrt() * c + 1.0, t)?;
        for _ in 0..100 {
            let sigma = rng.random::<f64>() * (1.0 - a[t - 1]).sqrt();
            let p = reverse_conditional_params(&s, &at_mean, &x0, t, t - 1, sigma)?;
            let k = reverse_conditional_params(&s, &shifted, &x0, t, t - 1, sigma)?.mean[[0, 0]] - p.mean[[0, 0]];
            worst = worst
                .max((p.mean[[0, 0]] - a[t - 1].sqrt() * c).abs())
                .max((p.var + k * k * (1.0 - a[t]) - (1.0 - a[t - 1])).abs());
        }
    }
    let stream = NoiseStream::new(seed);
    let n = 200_000u64;
    let x0v = array![1.0, -0.5];
    let mut mc_ok = true;
    let mut mc = String::new();
    for t in [2usize, 500, 1000] {
        let x0m = Array2::from_shape_fn((n as usize, 2), |(_, j)| x0v[j]);
        let x0b = StateBatch::new(x0m, 0)?;
        let eps = stream.normal_matrix(Purpose::Aux, 0..n, t as u64, 2);
        let xt = StateBatch::new(&x0b.data * a[t].sqrt() + &eps * (1.0 - a[t]).sqrt(), t)?;
        let sigma = 0.5 * (1.0 - a[t - 1]).sqrt();
        let p = reverse_conditional_params(&s, &xt, &x0b, t, t - 1, sigma)?;
        let z = stream.normal_matrix(Purpose::Aux, 0..n, 10_000 + t as u64, 2);
        let prev = p.mean + z * sigma;
        let mean = prev.mean_axis(Axis(0)).expect("non-empty");
        let var = prev.var_axis(Axis(0), 1.0);
        for j in 0..2 {
            let dm = (mean[j] - a[t - 1].sqrt() * x0v[j]).abs();
            let dv = (var[j] / (1.0 - a[t - 1]) - 1.0).abs();
            mc_ok &= dm < 0.01 && dv < 0.02;
            mc.push_str(&format!(" t={t}:dm={dm:.1e},dv={dv:.1e}"));
        }
    }
    Ok((worst < 1e-12 && mc_ok, format!("closed-form worst {worst:.2e};{mc}")))
}

fn objective_constancy(seed: u64) -> Result<(bool, String)> {
    let s = NoiseSchedule::linear_beta(10, 1e-2, 0.3)?;
    let plan = SamplePlan::draw(&ring(), &s, 256, seed);
    let models: Vec<Mlp> = (0..5).map(|k| Mlp::init(MlpShape::new(2, 10), seed.wrapping_add(100 + k))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let sigma: Vec<f64> = (1..=10)
            .map(|t| {
                let cap = (1.0 - s.alphas()[if t == 1 { 1 } else { t - 1 }]).sqrt();
                cap * rng.random_range(0.05..1.0)
            })
            .collect();
        let gamma = matched_gamma(&sigma, &s)?;
        let res = models
            .iter()
            .map(|m| Ok(j_sigma(m, &s, &plan, &sigma)?.total() - l_gamma(m, &s, &plan, &gamma)?))
            .collect::<Result<Vec<f64>>>()?;
        let lo = res.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = res.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((hi - lo) / lo.abs().max(hi.abs()));
    }
    Ok((worst < 1e-8, format!("worst relative spread {worst:.2e}")))
}

fn ddpm_reduction(seed: u64) -> Result<(bool, String)> {
    let s = standard_schedule()?;
    let model = AnalyticDenoiser::new(&ring(), s.clone())?;
    let traj = Trajectory::full(s.len())?;
    let stream = NoiseStream::new(seed);
    let mut worst: f64 = 0.0;
    for t in 1..=s.len() {
        let x = StateBatch::new(stream.normal_matrix(Purpose::Aux, 0..8, t as u64, 2), t)?;
        let mean = generalized_step(&s, &x, &traj, t, &model, &SigmaPolicy::DDPM, Some(&Array2::zeros((8, 2))))?;
        let var = sigma_eta(&s, &traj, t, 1.0)?.powi(2);
        let f = StateBatch::new(predict_x0(&s, &x, t, &model.eval(x.view(), t)?)?, 0)?;
        let post = ddpm_posterior_params(&s, &x, &f, t)?;
        let dm = (&mean.data - &post.mean).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        worst = worst.max(dm).max((var - post.var).abs());
    }
    Ok((worst < 1e-10, format!("worst mean/variance difference {worst:.2e}")))
}

fn data_std(data: &DataSpec) -> f64 {
    let cov = data.covariance();
    (cov.diag().sum() / cov.nrows() as f64).sqrt()
}

fn mean_row_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).sum_axis(Axis(1)).mapv(f64::sqrt).mean().unwrap_or(0.0)
}

fn deterministic_consistency(seed: u64) -> Result<(bool, String)> {
    let s = standard_schedule()?;
    let data = ring();
    let model = AnalyticDenoiser::new(&data, s.clone())?;
    let stream = NoiseStream::new(seed);
    let x_t = draw_latents(&s, &stream, 0, 1024, 2)?;
    let run = |steps: usize| -> Result<Array2<f64>> {
        let traj = select_subsequence(s.len(), steps, SubsequenceMode::Linear)?;
        Ok(run_trajectory_parallel(&s, &x_t, &traj, &model, &SigmaPolicy::DDIM, &stream, 0, 64)?.data)
    };
    let a = run(50)?;
    let again = run(50)?;
    let identical = a.iter().zip(again.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    let full = run(1000)?;
    let ratio = mean_row_distance(&a, &full) / data_std(&data);
    Ok((identical && ratio < 0.1, format!("bit-identical {identical}; distance/std {ratio:.4}")))
}

pub const RECONSTRUCTION_STEPS: [usize; 4] = [10, 50, 100, 500];

fn reconstruction_trend(seed: u64) -> Result<(bool, String)> {
    let s = standard_schedule()?;
    let data = ring();
    let model = AnalyticDenoiser::new(&data, s.clone())?;
    let x0 = StateBatch::new(data.sample(&NoiseStream::new(seed), 0..512), 0)?;
    let mse = RECONSTRUCTION_STEPS
        .iter()
        .map(|&steps| {
            let traj = select_subsequence(s.len(), steps, SubsequenceMode::Linear)?;
            let z = encode(&s, &x0, &traj, &model)?;
            per_dim_mse(&x0.data, &integrate(&s, &z, &traj, &model, Integrator::Ddim)?.data)
        })
        .collect::<Result<Vec<f64>>>()?;
    let trend = mse.windows(2).all(|w| w[1] <= 1.05 * w[0]);
    let ratio_ok = mse[3] < mse[0] / 10.0;
    Ok((trend && ratio_ok, format!("per-dim MSE {}", sci(&mse))))
}

pub const REFINEMENT_STEPS: [usize; 4] = [40, 80, 160, 320];

fn integrator_refinement(seed: u64) -> Result<(bool, String)> {
    let s = standard_schedule()?;
    let model = AnalyticDenoiser::new(&ring(), s.clone())?;
    let x_t = draw_latents(&s, &NoiseStream::new(seed), 0, 256, 2)?;
    let gaps = REFINEMENT_STEPS
        .iter()
        .map(|&steps| {
            let traj = select_subsequence(s.len(), steps, SubsequenceMode::Linear)?;
            let a = integrate(&s, &x_t, &traj, &model, Integrator::Ddim)?;
            let b = integrate(&s, &x_t, &traj, &model, Integrator::ProbabilityFlow)?;
            Ok(mean_row_distance(&a.data, &b.data))
        })
        .collect::<Result<Vec<f64>>>()?;
    let ok = gaps.windows(2).all(|w| w[1] < 0.7 * w[0]);
    Ok((ok, format!("gaps {}", sci(&gaps))))
}

fn random_discrete_schedule(rng: &mut ChaCha8Rng, steps: usize) -> Result<DiscreteSchedule> {
    let mut inner: Vec<f64> = (1..steps).map(|_| rng.random::<f64>()).collect();
    inner.sort_by(|a, b| b.total_cmp(a));
    let mut a = vec![1.0];
    a.extend(inner);
    a.push(0.0);
    DiscreteSchedule::new(a)
}

fn discrete_marginalization(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(2..=8);
        let steps = rng.random_range(1..=16);
        let s = random_discrete_schedule(&mut rng, steps)?;
        let x0 = CategoricalState::one_hot(k, rng.random_range(0..k))?;
        for t in 1..=steps {
            let sigma = rng.random::<f64>() * s.sigma_max(t)?;
            let qt = cat_forward_marginal(&s, &x0, t)?;
            let mut acc = vec![0.0; k];
            for j in 0..k {
                let r = cat_reverse_conditional(&s, &CategoricalState::one_hot(k, j)?, &x0, t, sigma)?;
                for (a, p) in acc.iter_mut().zip(r.probs()) {
                    *a += p * qt.probs()[j];
                }
            }
            let want = cat_forward_marginal(&s, &x0, t - 1)?;
            for (a, w) in acc.iter().zip(want.probs()) {
                worst = worst.max((a - w).abs());
            }
        }
    }
    let mut violations = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let s = random_discrete_schedule(&mut rng, 6)?;
        let t = rng.random_range(1..=6);
        let sigma = rng.random::<f64>() * s.sigma_max(t)?.min(1e6);
        let xt = CategoricalState::one_hot(k, rng.random_range(0..k))?;
        let x0 = CategoricalState::one_hot(k, rng.random_range(0..k))?;
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut f: Vec<f64> = raw.iter().map(|v| v / total).collect();
        f[0] = 1.0 - f[1..].iter().sum::<f64>();
        let (kl, bound) = cat_kl_and_bound(&s, &xt, &x0, t, sigma, |_, _| f.clone())?;
        if !(kl <= bound + 1e-12) {
            violations += 1;
        }
    }
    Ok((
        worst <= 1e-12 && violations == 0,
        format!("marginal worst {worst:.2e}; bound violations {violations}"),
    ))
}

/// Energy distance of `samples` generated with `policy` at `steps`, per replicate.
pub fn energy_replicates(
    s: &NoiseSchedule,
    data: &DataSpec,
    model: &dyn Denoiser,
    steps: usize,
    policy: &SigmaPolicy,
    n: usize,
    seeds: std::ops::Range<u64>,
) -> Result<Vec<f64>> {
    let traj = select_subsequence(s.len(), steps, SubsequenceMode::Linear)?;
    seeds
        .map(|seed| {
            let stream = NoiseStream::new(seed);
            let x_t = draw_latents(s, &stream, 0, n, data.dim())?;
            let gen = run_trajectory_parallel(s, &x_t, &traj, model, policy, &stream, 0, 64)?;
            let truth = data.sample(&stream, n as u64..2 * n as u64);
            Ok(energy_distance(&gen.data, &truth))
        })
        .collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

fn sigma_hat_degradation(seed: u64) -> Result<(bool, String)> {
    let s = standard_schedule()?;
    let data = ring();
    let model = AnalyticDenoiser::new(&data, s.clone())?;
    let seeds = seed..seed + 4;
    let ed = |steps, policy: &SigmaPolicy| energy_replicates(&s, &data, &model, steps, policy, 4096, seeds.clone());
    let (hat10, ddim10) = (mean_sd(&ed(10, &SigmaPolicy::SigmaHat)?), mean_sd(&ed(10, &SigmaPolicy::DDIM)?));
    let (hat_t, ddim_t) = (mean_sd(&ed(1000, &SigmaPolicy::SigmaHat)?), mean_sd(&ed(1000, &SigmaPolicy::DDIM)?));
    let worse = hat10.0 > ddim10.0;
    let overlap = (hat_t.0 - ddim_t.0).abs() <= 3.0 * (hat_t.1 + ddim_t.1);
    Ok((
        worse && overlap,
        format!(
            "S=10 sigma_hat {:.2e} vs eta=0 {:.2e}; S=T sigma_hat {:.2e}+-{:.1e} vs eta=0 {:.2e}+-{:.1e}",
            hat10.0, ddim10.0, hat_t.0, hat_t.1, ddim_t.0, ddim_t.1
        ),
    ))
}

pub const TIMING_STEPS: [usize; 4] = [10, 20, 50, 100];

fn timing_linearity(seed: u64) -> Result<(bool, String)> {
    let s = standard_schedule()?;
    let model = AnalyticDenoiser::new(&ring(), s.clone())?;
    let stream = NoiseStream::new(seed);
    let x_t = draw_latents(&s, &stream, 0, 2048, 2)?;
    let mut times = Vec::new();
    for &steps in &TIMING_STEPS {
        let traj = select_subsequence(s.len(), steps, SubsequenceMode::Linear)?;
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let start = Instant::now();
            let out = run_trajectory(&s, &x_t, &traj, &model, &SigmaPolicy::DDIM, &stream, 0, false)?;
            best = best.min(start.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        times.push(best);
    }
    let xs: Vec<f64> = TIMING_STEPS.iter().map(|&v| v as f64).collect();
    let fit = linear_fit(&xs, &times)?;
    Ok((fit.r_squared > 0.99, format!("R2 {:.5}; seconds {}", fit.r_squared, sci(&times))))
}

fn gradient(seed: u64) -> Result<(bool, String)> {
    let s = NoiseSchedule::linear_beta(50, 1e-3, 0.1)?;
    let stream = NoiseStream::new(seed);
    let x0 = ring().sample(&stream, 0..32);
    let eps = stream.normal_matrix(Purpose::Aux, 0..32, 0, 2);
    let ts: Vec<usize> = (0..32).map(|i| 1 + (i * 7) % 50).collect();
    let model = Mlp::init(MlpShape::new(2, 50), seed);
    let worst = gradient_check(&model, &s, x0.view(), eps.view(), &ts, 20, seed);
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e}")))
}

fn slerp_endpoints(_seed: u64) -> Result<(bool, String)> {
    let a = [0.3, -1.2, 2.0];
    let b = [1.0, 0.5, -0.7];
    let ends = slerp(&a, &b, 0.0)? == a && slerp(&a, &b, 1.0)? == b;
    let mid = slerp(&[1.0, 0.0], &[0.0, 1.0], 0.5)?;
    let mid_ok = mid.iter().all(|v| (v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    let anti = slerp(&a, &a.map(|v| -v), 0.5)?.iter().all(|v| v.is_finite());
    Ok((ends && mid_ok && anti, format!("endpoints {ends}; midpoint {mid_ok}; antipodal finite {anti}")))
}
