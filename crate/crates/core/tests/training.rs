use std::sync::OnceLock;

use ddim_core::denoiser::{
    denoising_risk, train_toy_denoiser, AnalyticDenoiser, DataSpec, Denoiser, MixtureSpec, Mlp, TrainConfig,
};
use ddim_core::rng::{NoiseStream, Purpose};
use ddim_core::NoiseSchedule;
use ndarray::Axis;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear_beta(100, 1e-3, 0.2).unwrap()
}

fn ring() -> DataSpec {
    DataSpec::Mixture(MixtureSpec::ring(3, 2.0, 0.3).unwrap())
}

fn trained_ring() -> &'static Mlp {
    static MODEL: OnceLock<Mlp> = OnceLock::new();
    MODEL.get_or_init(|| train_toy_denoiser(&ring(), &schedule(), &TrainConfig::default()).unwrap())
}

/// Held-out risk averaged over every timestep; the evaluation seed is never
/// used by training.
fn avg_risk(model: &dyn Denoiser, s: &NoiseSchedule, data: &DataSpec, n: u64) -> f64 {
    let stream = NoiseStream::new(0xe7a1);
    let total: f64 = (1..=s.len())
        .map(|t| {
            let x0 = data.sample(&stream, t as u64 * n..(t as u64 + 1) * n);
            let eps = stream.normal_matrix(Purpose::Aux, 0..n, t as u64, data.dim());
            denoising_risk(model, s, x0.view(), eps.view(), t).unwrap()
        })
        .sum();
    total / s.len() as f64
}

#[test]
fn trained_risk_close_to_analytic_optimum() {
    let s = schedule();
    let data = ring();
    let optimum = avg_risk(&AnalyticDenoiser::new(&data, s.clone()).unwrap(), &s, &data, 2000);
    let trained = avg_risk(trained_ring(), &s, &data, 2000);
    assert!(trained <= 1.05 * optimum, "trained {trained} vs optimum {optimum}");
}

#[test]
fn four_component_mixture_within_five_percent() {
    let s = schedule();
    let data = DataSpec::Mixture(
        MixtureSpec::new(
            vec![0.1, 0.2, 0.3, 0.4],
            vec![vec![2.0, 0.0], vec![0.0, 2.0], vec![-2.0, 0.0], vec![0.0, -1.0]],
            0.2,
        )
        .unwrap(),
    );
    let optimum = avg_risk(&AnalyticDenoiser::new(&data, s.clone()).unwrap(), &s, &data, 2000);
    let model = train_toy_denoiser(&data, &s, &TrainConfig { seed: 4, ..Default::default() }).unwrap();
    let trained = avg_risk(&model, &s, &data, 2000);
    assert!(trained <= 1.05 * optimum, "trained {trained} vs optimum {optimum}");
}

#[test]
fn single_point_risk_vanishes() {
    let s = schedule();
    let data = DataSpec::Points { points: vec![vec![0.5, -1.0]] };
    let floor = avg_risk(&AnalyticDenoiser::new(&data, s.clone()).unwrap(), &s, &data, 1000);
    assert!(floor < 1e-20);
    let model = train_toy_denoiser(&data, &s, &TrainConfig::default()).unwrap();
    let per_dim = avg_risk(&model, &s, &data, 1000) / 2.0;
    assert!(per_dim < 0.01, "{per_dim}");
}

#[test]
fn analytic_dominates_trained_at_every_t() {
    let s = schedule();
    let data = ring();
    let analytic = AnalyticDenoiser::new(&data, s.clone()).unwrap();
    let stream = NoiseStream::new(0x5eed);
    let n = 4000u64;
    for t in 1..=s.len() {
        let x0 = data.sample(&stream, 0..n);
        let eps = stream.normal_matrix(Purpose::Aux, 0..n, t as u64, 2);
        let a = s.alpha(t).unwrap();
        let xt = &x0 * a.sqrt() + &eps * (1.0 - a).sqrt();
        let err = |m: &dyn Denoiser| (m.eval(xt.view(), t).unwrap() - &eps).mapv(|v| v * v).sum_axis(Axis(1));
        let diff = err(&analytic) - err(trained_ring());
        let mean = diff.mean().unwrap();
        let sd = diff.std(1.0);
        assert!(mean <= 3.0 * sd / (n as f64).sqrt(), "t={t}: analytic worse by {mean} (sd {sd})");
    }
}
