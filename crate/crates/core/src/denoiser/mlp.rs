//! Time-conditioned two-hidden-layer perceptron trained on the unweighted
//! denoising objective, with hand-written backprop and Adam.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataSpec, Denoiser, DenoiserKind};
use crate::error::{Error, Result};
use crate::rng::{NoiseStream, Purpose};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub dim: usize,
    pub hidden: usize,
    /// Number of sinusoid frequencies; each contributes a sin and a cos feature.
    pub time_freqs: usize,
    /// `T`, used to normalise the timestep to `t / T`.
    pub total_steps: usize,
}

impl MlpShape {
    pub fn new(dim: usize, total_steps: usize) -> Self {
        Self { dim, hidden: 64, time_freqs: 8, total_steps }
    }

    fn input_dim(&self) -> usize {
        self.dim + 2 * self.time_freqs
    }

    pub fn param_count(&self) -> usize {
        let (i, h, d) = (self.input_dim(), self.hidden, self.dim);
        i * h + h + h * h + h + h * d + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    shape: MlpShape,
    params: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

fn offsets(shape: &MlpShape) -> Offsets {
    let (i, h, d) = (shape.input_dim(), shape.hidden, shape.dim);
    let w1 = 0;
    let b1 = w1 + i * h;
    let w2 = b1 + h;
    let b2 = w2 + h * h;
    let w3 = b2 + h;
    let b3 = w3 + h * d;
    Offsets { w1, b1, w2, b2, w3, b3, end: b3 + d }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Intermediate activations kept for the backward pass.
struct Tape {
    input: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

impl Mlp {
    /// Random initialisation, weights `N(0, 1/fan_in)`, zero biases.
    pub fn init(shape: MlpShape, seed: u64) -> Self {
        let o = offsets(&shape);
        let mut params = vec![0.0; o.end];
        let mut rng = NoiseStream::new(seed).rng(Purpose::Aux, u64::MAX, 0);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(o.w1..o.b1, shape.input_dim());
        fill(o.w2..o.b2, shape.hidden);
        fill(o.w3..o.b3, shape.hidden);
        Self { shape, params }
    }

    pub fn from_params(shape: MlpShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::param(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn mat(&self, at: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[at..at + rows * cols]).expect("layout")
    }

    fn vec(&self, at: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[at..at + len])
    }

    fn features(&self, x: ArrayView2<'_, f64>, ts: &[usize]) -> Array2<f64> {
        let sh = &self.shape;
        let mut input = Array2::zeros((x.nrows(), sh.input_dim()));
        input.slice_mut(s![.., ..sh.dim]).assign(&x);
        for (mut row, &t) in input.rows_mut().into_iter().zip(ts) {
            let tn = t as f64 / sh.total_steps as f64;
            for k in 0..sh.time_freqs {
                let w = (1u64 << k) as f64 * tn;
                row[sh.dim + 2 * k] = w.sin();
                row[sh.dim + 2 * k + 1] = w.cos();
            }
        }
        input
    }

    fn forward(&self, x: ArrayView2<'_, f64>, ts: &[usize]) -> Tape {
        let sh = &self.shape;
        let o = offsets(sh);
        let (i, h, d) = (sh.input_dim(), sh.hidden, sh.dim);
        let input = self.features(x, ts);
        let z1 = input.dot(&self.mat(o.w1, i, h)) + self.vec(o.b1, h);
        let h1 = z1.mapv(silu);
        let z2 = h1.dot(&self.mat(o.w2, h, h)) + self.vec(o.b2, h);
        let h2 = z2.mapv(silu);
        let out = h2.dot(&self.mat(o.w3, h, d)) + self.vec(o.b3, d);
        Tape { input, z1, h1, z2, h2, out }
    }

    /// Per-sample timesteps variant of [`Denoiser::eval`].
    pub fn eval_multi(&self, x: ArrayView2<'_, f64>, ts: &[usize]) -> Result<Array2<f64>> {
        if x.ncols() != self.shape.dim || ts.len() != x.nrows() {
            return Err(Error::Shape {
                expected: vec![ts.len(), self.shape.dim],
                got: x.shape().to_vec(),
            });
        }
        Ok(self.forward(x, ts).out)
    }

    /// Mean over rows of `‖ε_θ(x_t) − ε‖²` and its gradient, where
    /// `x_t = √α_t x_0 + √(1 − α_t) ε` per row.
    pub fn loss_and_grad(
        &self,
        schedule: &NoiseSchedule,
        x0: ArrayView2<'_, f64>,
        eps: ArrayView2<'_, f64>,
        ts: &[usize],
    ) -> (f64, Vec<f64>) {
        let xt = noisy(schedule, x0, eps, ts);
        let tape = self.forward(xt.view(), ts);
        let n = x0.nrows() as f64;
        let resid = &tape.out - &eps;
        let loss = resid.mapv(|v| v * v).sum() / n;

        let sh = &self.shape;
        let o = offsets(sh);
        let (h, d) = (sh.hidden, sh.dim);
        let mut grad = vec![0.0; o.end];
        let dout = resid * (2.0 / n);
        put(&mut grad, o.w3, &tape.h2.t().dot(&dout));
        put1(&mut grad, o.b3, &dout.sum_axis(Axis(0)));
        let dz2 = dout.dot(&self.mat(o.w3, h, d).t()) * tape.z2.mapv(silu_grad);
        put(&mut grad, o.w2, &tape.h1.t().dot(&dz2));
        put1(&mut grad, o.b2, &dz2.sum_axis(Axis(0)));
        let dz1 = dz2.dot(&self.mat(o.w2, h, h).t()) * tape.z1.mapv(silu_grad);
        put(&mut grad, o.w1, &tape.input.t().dot(&dz1));
        put1(&mut grad, o.b1, &dz1.sum_axis(Axis(0)));
        (loss, grad)
    }

    pub fn loss(&self, schedule: &NoiseSchedule, x0: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>, ts: &[usize]) -> f64 {
        let xt = noisy(schedule, x0, eps, ts);
        let out = self.forward(xt.view(), ts).out;
        (out - eps).mapv(|v| v * v).sum() / x0.nrows() as f64
    }

    /// Writes a one-line JSON header followed by the little-endian f64 parameters.
    pub fn save(&self, path: &Path, schedule_hash: &str, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            architecture: "mlp-silu-2x".into(),
            shape: self.shape,
            schedule_hash: schedule_hash.into(),
            seed,
            param_count: self.params.len(),
        };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut file, &header).map_err(|e| Error::Format(e.to_string()))?;
        file.write_all(b"\n")?;
        for p in &self.params {
            file.write_all(&p.to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        if payload.len() != 8 * header.param_count || header.param_count != header.shape.param_count() {
            return Err(Error::Format(format!(
                "checkpoint payload has {} bytes, header promises {} parameters",
                payload.len(),
                header.param_count
            )));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok((Self::from_params(header.shape, params)?, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub shape: MlpShape,
    pub schedule_hash: String,
    pub seed: u64,
    pub param_count: usize,
}

fn put(grad: &mut [f64], at: usize, m: &Array2<f64>) {
    for (g, v) in grad[at..at + m.len()].iter_mut().zip(m.iter()) {
        *g = *v;
    }
}

fn put1(grad: &mut [f64], at: usize, v: &Array1<f64>) {
    grad[at..at + v.len()].copy_from_slice(v.as_slice().expect("contiguous"));
}

fn noisy(schedule: &NoiseSchedule, x0: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>, ts: &[usize]) -> Array2<f64> {
    let a = schedule.alphas();
    let mut xt = x0.to_owned();
    for ((mut row, e), &t) in xt.rows_mut().into_iter().zip(eps.rows()).zip(ts) {
        let (sa, sn) = (a[t].sqrt(), (1.0 - a[t]).sqrt());
        row.zip_mut_with(&e, |x, &e| *x = sa * *x + sn * e);
    }
    xt
}

impl Denoiser for Mlp {
    fn eval(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        self.eval_multi(x, &vec![t; x.nrows()])
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::Trained
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 4000, batch_size: 256, learning_rate: 3e-3, seed: 0, hidden: 64 }
    }
}

/// Minimises the unweighted denoising loss with Adam under cosine learning-rate decay.
pub fn train_toy_denoiser(data: &DataSpec, schedule: &NoiseSchedule, config: &TrainConfig) -> Result<Mlp> {
    data.validate()?;
    if config.batch_size == 0 || !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::param("training needs batch_size >= 1 and a positive finite learning rate"));
    }
    let shape = MlpShape { hidden: config.hidden, ..MlpShape::new(data.dim(), schedule.len()) };
    let mut model = Mlp::init(shape, config.seed);
    let stream = NoiseStream::new(config.seed);
    let (b1, b2, adam_eps) = (0.9_f64, 0.999_f64, 1e-8);
    let mut m = vec![0.0; model.params.len()];
    let mut v = vec![0.0; model.params.len()];
    let d = data.dim();
    let bs = config.batch_size as u64;

    for step in 0..config.steps {
        let first = step as u64 * bs;
        let x0 = data.sample(&stream, first..first + bs);
        let mut rng = stream.rng(Purpose::Aux, step as u64, 1);
        let ts: Vec<usize> = (0..bs).map(|_| rng.random_range(1..=schedule.len())).collect();
        let eps = Array2::from_shape_fn((bs as usize, d), |_| rng.sample(StandardNormal));

        let (loss, grad) = model.loss_and_grad(schedule, x0.view(), eps.view(), &ts);
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("loss became {loss}") });
        }
        let progress = step as f64 / config.steps as f64;
        let lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let k = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        for (((p, g), m), v) in model.params.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + adam_eps);
        }
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Training { step: config.steps, detail: "non-finite parameters".into() });
    }
    Ok(model)
}

/// Compares backprop against central differences on `coords` random
/// parameters; returns the largest relative error seen.
pub fn gradient_check(
    model: &Mlp,
    schedule: &NoiseSchedule,
    x0: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
    ts: &[usize],
    coords: usize,
    seed: u64,
) -> f64 {
    let (_, grad) = model.loss_and_grad(schedule, x0, eps, ts);
    let mut rng = NoiseStream::new(seed).rng(Purpose::Aux, 0, 0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.random_range(0..grad.len());
        let mut plus = model.clone();
        plus.params[i] += h;
        let mut minus = model.clone();
        minus.params[i] -= h;
        let fd = (plus.loss(schedule, x0, eps, ts) - minus.loss(schedule, x0, eps, ts)) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        if scale < 1e-10 {
            continue;
        }
        worst = worst.max((grad[i] - fd).abs() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::MixtureSpec;

    fn fixture(n: u64) -> (NoiseSchedule, Array2<f64>, Array2<f64>, Vec<usize>) {
        let s = NoiseSchedule::linear_beta(50, 1e-3, 0.1).unwrap();
        let data = DataSpec::Mixture(MixtureSpec::ring(3, 1.5, 0.2).unwrap());
        let stream = NoiseStream::new(5);
        let x0 = data.sample(&stream, 0..n);
        let eps = stream.normal_matrix(Purpose::Aux, 0..n, 0, 2);
        let ts = (0..n as usize).map(|i| 1 + (i * 7) % 50).collect();
        (s, x0, eps, ts)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (s, x0, eps, ts) = fixture(32);
        let model = Mlp::init(MlpShape::new(2, 50), 3);
        let worst = gradient_check(&model, &s, x0.view(), eps.view(), &ts, 20, 1);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_steps_is_initialisation() {
        let s = NoiseSchedule::linear_beta(50, 1e-3, 0.1).unwrap();
        let data = DataSpec::Mixture(MixtureSpec::ring(3, 1.5, 0.2).unwrap());
        let cfg = TrainConfig { steps: 0, seed: 9, ..TrainConfig::default() };
        let model = train_toy_denoiser(&data, &s, &cfg).unwrap();
        assert_eq!(model, Mlp::init(MlpShape::new(2, 50), 9));
    }

    #[test]
    fn training_is_deterministic() {
        let s = NoiseSchedule::linear_beta(50, 1e-3, 0.1).unwrap();
        let data = DataSpec::Mixture(MixtureSpec::ring(3, 1.5, 0.2).unwrap());
        let cfg = TrainConfig { steps: 30, batch_size: 32, seed: 4, ..TrainConfig::default() };
        let a = train_toy_denoiser(&data, &s, &cfg).unwrap();
        let b = train_toy_denoiser(&data, &s, &cfg).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn divergence_is_reported() {
        let s = NoiseSchedule::linear_beta(50, 1e-3, 0.1).unwrap();
        let data = DataSpec::Points { points: vec![vec![1e200, -1e200]] };
        let cfg = TrainConfig { steps: 5, batch_size: 4, ..TrainConfig::default() };
        assert!(matches!(train_toy_denoiser(&data, &s, &cfg), Err(Error::Training { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Mlp::init(MlpShape::new(2, 50), 12);
        model.save(&path, "abc123", 12).unwrap();
        let (back, header) = Mlp::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(header.schedule_hash, "abc123");
        assert_eq!(header.seed, 12);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Mlp::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn eval_rejects_wrong_dim() {
        let model = Mlp::init(MlpShape::new(2, 50), 1);
        assert!(model.eval(Array2::zeros((3, 3)).view(), 5).is_err());
        assert_eq!(model.eval(Array2::zeros((3, 2)).view(), 5).unwrap().shape(), &[3, 2]);
    }
}
