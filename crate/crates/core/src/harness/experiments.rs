//! The `sample`, `encode`, `reconstruct`, `interpolate` and `bench` workflows.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};

use super::config::RunConfig;
use super::metrics::{append_metrics, linear_fit, LinearFit, MetricsRow};
use super::plot::{line_svg, scatter_svg, Series};
use super::slerp::slerp;
use super::tensor_io::Tensor;
use super::OutputGuard;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::ode::{encode, integrate, per_dim_mse, Integrator};
use crate::rng::NoiseStream;
use crate::sampler::{draw_latents, run_trajectory, run_trajectory_parallel, SigmaPolicy};
use crate::schedule::{select_subsequence, NoiseSchedule, Trajectory};
use crate::state::StateBatch;

/// Rows per rayon task when sampling without intermediates.
const CHUNK: usize = 64;

/// Resolved configuration, schedule, model and noise stream.
pub struct Experiment {
    pub config: RunConfig,
    pub schedule: NoiseSchedule,
    pub model: Box<dyn Denoiser>,
    pub stream: NoiseStream,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub rows: Vec<MetricsRow>,
}

fn points(m: &Array2<f64>) -> Vec<(f64, f64)> {
    m.rows().into_iter().map(|r| (r[0], r[1])).collect()
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let model = config.build_model(&schedule)?;
        let stream = NoiseStream::new(config.seed);
        Ok(Self { config, schedule, model, stream })
    }

    fn dim(&self) -> usize {
        self.config.data.dim()
    }

    fn tensor(&self, a: &Array2<f64>) -> Result<Tensor> {
        Tensor::from_matrix(a, &self.schedule.hash(), self.config.seed)
    }

    fn trajectory(&self, steps: usize) -> Result<Trajectory> {
        select_subsequence(self.schedule.len(), steps, self.config.sampler.mode)
    }

    fn data_batch(&self) -> Result<StateBatch> {
        StateBatch::new(self.config.data.sample(&self.stream, 0..self.config.chains as u64), 0)
    }

    fn plot(&self, guard: &mut OutputGuard, name: &str, svg: impl FnOnce() -> String) -> Result<()> {
        if self.config.plot {
            std::fs::write(guard.file(name), svg())?;
        }
        Ok(())
    }

    /// Generates `x_0` from fresh latents; returns the samples.
    pub fn generate(&self, steps: usize, policy: &SigmaPolicy) -> Result<Array2<f64>> {
        let traj = self.trajectory(steps)?;
        let x_t = draw_latents(&self.schedule, &self.stream, 0, self.config.chains, self.dim())?;
        let out = run_trajectory_parallel(&self.schedule, &x_t, &traj, &*self.model, policy, &self.stream, 0, CHUNK)?;
        Ok(out.data)
    }

    pub fn sample(&self) -> Result<Report> {
        let mut guard = OutputGuard::new(&self.config.out)?;
        let traj = self.config.trajectory()?;
        let policy = self.config.policy();
        let x_t = draw_latents(&self.schedule, &self.stream, 0, self.config.chains, self.dim())?;
        let (x0, trail) = if self.config.sampler.intermediates {
            let out = run_trajectory(&self.schedule, &x_t, &traj, &*self.model, &policy, &self.stream, 0, true)?;
            (out.x0.data, out.intermediates)
        } else {
            let x0 = run_trajectory_parallel(&self.schedule, &x_t, &traj, &*self.model, &policy, &self.stream, 0, CHUNK)?;
            (x0.data, None)
        };
        self.tensor(&x0)?.write(&guard.file("samples.tensor"))?;
        if let Some(trail) = trail {
            let (n, d) = x0.dim();
            let mut stack = Array3::<f64>::zeros((trail.len(), n, d));
            for (k, s) in trail.iter().enumerate() {
                stack.index_axis_mut(Axis(0), k).assign(&s.data);
            }
            Tensor::from_array(&stack.into_dyn(), &self.schedule.hash(), self.config.seed)?
                .write(&guard.file("intermediates.tensor"))?;
        }
        if self.dim() == 2 {
            let data = self.config.data.sample(&self.stream, 0..self.config.chains as u64);
            let title = format!("samples, S = {}, {}", traj.len(), policy.tag());
            self.plot(&mut guard, "samples.svg", || {
                scatter_svg(
                    &title,
                    &[Series { label: "data", points: &points(&data) }, Series { label: "samples", points: &points(&x0) }],
                )
            })?;
        }
        Ok(Report { files: guard.commit(), rows: vec![] })
    }

    /// Encodes and decodes a data batch with `steps` deterministic steps;
    /// returns `(latents, reconstruction, per-dim MSE)`.
    pub fn round_trip(&self, x0: &StateBatch, steps: usize) -> Result<(StateBatch, StateBatch, f64)> {
        let traj = self.trajectory(steps)?;
        let latents = encode(&self.schedule, x0, &traj, &*self.model)?;
        let back = integrate(&self.schedule, &latents, &traj, &*self.model, Integrator::Ddim)?;
        let mse = per_dim_mse(&x0.data, &back.data)?;
        Ok((latents, back, mse))
    }

    pub fn encode(&self) -> Result<Report> {
        let mut guard = OutputGuard::new(&self.config.out)?;
        let x0 = self.data_batch()?;
        let steps = self.config.sampler.steps;
        let start = Instant::now();
        let (latents, _, mse) = self.round_trip(&x0, steps)?;
        let rows = vec![MetricsRow {
            experiment: "encode".into(),
            s: steps,
            policy: SigmaPolicy::DDIM.tag(),
            metric: "per_dim_mse".into(),
            value: mse,
            seconds: start.elapsed().as_secs_f64(),
        }];
        self.tensor(&x0.data)?.write(&guard.file("data.tensor"))?;
        self.tensor(&latents.data)?.write(&guard.file("latents.tensor"))?;
        append_metrics(&guard.file("metrics.csv"), &rows)?;
        Ok(Report { files: guard.commit(), rows })
    }

    /// Per-dim reconstruction MSE for each `S` (values above `T` are skipped).
    pub fn reconstruct(&self, s_values: &[usize]) -> Result<Report> {
        let mut guard = OutputGuard::new(&self.config.out)?;
        let x0 = self.data_batch()?;
        let mut rows = Vec::new();
        for &s in s_values.iter().filter(|&&s| s >= 1 && s <= self.schedule.len()) {
            let start = Instant::now();
            let (latents, _, mse) = self.round_trip(&x0, s)?;
            rows.push(MetricsRow {
                experiment: "reconstruct".into(),
                s,
                policy: SigmaPolicy::DDIM.tag(),
                metric: "per_dim_mse".into(),
                value: mse,
                seconds: start.elapsed().as_secs_f64(),
            });
            if s == self.config.sampler.steps {
                self.tensor(&latents.data)?.write(&guard.file("latents.tensor"))?;
            }
        }
        if rows.is_empty() {
            return Err(Error::config("steps", "no S value fits the schedule"));
        }
        append_metrics(&guard.file("metrics.csv"), &rows)?;
        let curve: Vec<(f64, f64)> = rows.iter().map(|r| ((r.s as f64).ln(), r.value.ln())).collect();
        self.plot(&mut guard, "reconstruct.svg", || {
            line_svg("log per-dim MSE vs log S", &[Series { label: "DDIM", points: &curve }])
        })?;
        Ok(Report { files: guard.commit(), rows })
    }

    /// Decodes an `n × n` grid of latents: two pairs slerped with a shared
    /// `α`, then slerped across pairs with an independent `β`.
    pub fn interpolation_grid(&self, n: usize) -> Result<Array3<f64>> {
        if n < 2 {
            return Err(Error::param("the grid needs at least 2 points per side"));
        }
        let d = self.dim();
        let z = draw_latents(&self.schedule, &self.stream, 0, 4, d)?;
        let row = |k: usize| z.data.row(k).to_vec();
        let coef = |i: usize| i as f64 / (n - 1) as f64;
        let mut latents = Array2::<f64>::zeros((n * n, d));
        for i in 0..n {
            let left = slerp(&row(0), &row(1), coef(i))?;
            let right = slerp(&row(2), &row(3), coef(i))?;
            for j in 0..n {
                let v = slerp(&left, &right, coef(j))?;
                latents.row_mut(i * n + j).assign(&ndarray::Array1::from(v));
            }
        }
        let traj = self.config.trajectory()?;
        let x_t = StateBatch::new(latents, self.schedule.len())?;
        let out = run_trajectory(&self.schedule, &x_t, &traj, &*self.model, &self.config.policy(), &self.stream, 0, false)?;
        Ok(out.x0.data.into_shape_with_order((n, n, d)).map_err(|e| Error::param(e.to_string()))?)
    }

    pub fn interpolate(&self) -> Result<Report> {
        const GRID: usize = 11;
        let mut guard = OutputGuard::new(&self.config.out)?;
        let grid = self.interpolation_grid(GRID)?;
        Tensor::from_array(&grid.clone().into_dyn(), &self.schedule.hash(), self.config.seed)?
            .write(&guard.file("interpolation.tensor"))?;
        if self.dim() == 2 {
            let lines: Vec<Vec<(f64, f64)>> = (0..GRID)
                .map(|i| (0..GRID).map(|j| (grid[[i, j, 0]], grid[[i, j, 1]])).collect())
                .collect();
            let labels: Vec<String> = (0..GRID).map(|i| format!("alpha {:.1}", i as f64 / (GRID - 1) as f64)).collect();
            self.plot(&mut guard, "interpolation.svg", || {
                let series: Vec<Series<'_>> =
                    lines.iter().zip(&labels).map(|(p, l)| Series { label: l, points: p }).collect();
                line_svg("decoded slerp grid", &series)
            })?;
        }
        Ok(Report { files: guard.commit(), rows: vec![] })
    }

    /// Single-threaded sampling time for each `S`, best of `repeats`.
    pub fn time_sampling(&self, s_values: &[usize], repeats: usize) -> Result<Vec<(usize, f64)>> {
        let policy = self.config.policy();
        let x_t = draw_latents(&self.schedule, &self.stream, 0, self.config.chains, self.dim())?;
        s_values
            .iter()
            .map(|&s| {
                let traj = self.trajectory(s)?;
                let mut best = f64::INFINITY;
                for _ in 0..repeats.max(1) {
                    let start = Instant::now();
                    let out = run_trajectory(&self.schedule, &x_t, &traj, &*self.model, &policy, &self.stream, 0, false)?;
                    best = best.min(start.elapsed().as_secs_f64());
                    std::hint::black_box(out);
                }
                Ok((s, best))
            })
            .collect()
    }

    pub fn bench(&self, s_values: &[usize], repeats: usize) -> Result<(Report, LinearFit)> {
        let mut guard = OutputGuard::new(&self.config.out)?;
        let times = self.time_sampling(s_values, repeats)?;
        let xs: Vec<f64> = times.iter().map(|(s, _)| *s as f64).collect();
        let ys: Vec<f64> = times.iter().map(|(_, t)| *t).collect();
        let fit = linear_fit(&xs, &ys)?;
        let policy = self.config.policy().tag();
        let mut rows: Vec<MetricsRow> = times
            .iter()
            .map(|&(s, secs)| MetricsRow {
                experiment: "bench".into(),
                s,
                policy: policy.clone(),
                metric: "wall_clock".into(),
                value: secs,
                seconds: secs,
            })
            .collect();
        rows.push(MetricsRow {
            experiment: "bench".into(),
            s: 0,
            policy,
            metric: "r_squared".into(),
            value: fit.r_squared,
            seconds: ys.iter().sum(),
        });
        append_metrics(&guard.file("metrics.csv"), &rows)?;
        let pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
        let line: Vec<(f64, f64)> = xs.iter().map(|&x| (x, fit.slope * x + fit.intercept)).collect();
        self.plot(&mut guard, "bench.svg", || {
            line_svg(
                &format!("seconds vs S, R2 = {:.4}", fit.r_squared),
                &[Series { label: "measured", points: &pts }, Series { label: "fit", points: &line }],
            )
        })?;
        Ok((Report { files: guard.commit(), rows }, fit))
    }
}
