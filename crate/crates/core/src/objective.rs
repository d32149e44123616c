//! The weighted denoising objective `L_γ`, the variational objective `J_σ`
//! through its per-step KL decomposition, and the weights that make them
//! differ by a θ-independent constant.
//!
//! For `t ≥ 2` the two reverse kernels `q_σ(·|x_t, x_0)` and
//! `q_σ(·|x_t, f(x_t))` share the variance `σ_t²`, and their means differ by
//! `c_t·(x_0 − f(x_t))` with
//! `c_t = √α_{t−1} − √(1 − α_{t−1} − σ_t²)·√(α_t/(1 − α_t))`.
//! Since `x_0 − f(x_t) = √((1 − α_t)/α_t)·(ε̂ − ε)`, the KL term is
//! `γ_t‖ε − ε̂‖²` with `γ_t = c_t²(1 − α_t)/(2σ_t²α_t)`. The `t = 1` term
//! is a Gaussian likelihood, giving the same form with `c_1 = 1`.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::denoiser::{predict_x0, DataSpec, Denoiser, DenoiserKind};
use crate::error::{check_shape, Error, Result};
use crate::gaussian::{checked_sqrt, reverse_conditional_params};
use crate::rng::{NoiseStream, Purpose};
use crate::schedule::NoiseSchedule;
use crate::state::StateBatch;

/// Strictly positive per-timestep weights `γ_1..γ_T` (index `t − 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if let Some((i, g)) = gamma.iter().enumerate().find(|(_, g)| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::param(format!("gamma[{}] = {g} must be positive and finite", i + 1)));
        }
        Ok(Self(gamma))
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|g| g * k).collect())
    }
}

/// A fixed batch of clean data and one forward-noise draw per timestep,
/// shared by every objective evaluation in an experiment.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub x0: Array2<f64>,
    /// `eps[t − 1]` is the noise used to build `x_t`.
    pub eps: Vec<Array2<f64>>,
}

impl SamplePlan {
    pub fn new(x0: Array2<f64>, eps: Vec<Array2<f64>>) -> Result<Self> {
        for e in &eps {
            check_shape(x0.shape(), e.shape())?;
        }
        Ok(Self { x0, eps })
    }

    pub fn draw(data: &DataSpec, schedule: &NoiseSchedule, n: usize, seed: u64) -> Self {
        let stream = NoiseStream::new(seed);
        let x0 = data.sample(&stream, 0..n as u64);
        let eps = (1..=schedule.len())
            .map(|t| stream.normal_matrix(Purpose::Plan, 0..n as u64, t as u64, data.dim()))
            .collect();
        Self { x0, eps }
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }

    fn check(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.eps.len() != schedule.len() {
            return Err(Error::param(format!(
                "plan has noise for {} timesteps, schedule has {}",
                self.eps.len(),
                schedule.len()
            )));
        }
        Ok(())
    }

    pub fn noisy(&self, schedule: &NoiseSchedule, t: usize) -> Result<StateBatch> {
        let a = schedule.alpha(t)?;
        StateBatch::new(&self.x0 * a.sqrt() + &self.eps[t - 1] * (1.0 - a).sqrt(), t)
    }
}

fn row_sq_norms(m: &Array2<f64>) -> Array1<f64> {
    m.mapv(|v| v * v).sum_axis(Axis(1))
}

/// Per-timestep mean `‖ε_θ(x_t) − ε_t‖²` over the plan.
pub fn denoising_errors(model: &dyn Denoiser, schedule: &NoiseSchedule, plan: &SamplePlan) -> Result<Vec<f64>> {
    plan.check(schedule)?;
    (1..=schedule.len())
        .map(|t| {
            let xt = plan.noisy(schedule, t)?;
            let pred = model.eval(xt.view(), t)?;
            Ok(row_sq_norms(&(pred - &plan.eps[t - 1])).mean().unwrap_or(0.0))
        })
        .collect()
}

/// `L_γ = Σ_t γ_t·E‖ε_θ(√α_t x_0 + √(1 − α_t) ε_t) − ε_t‖²`, estimated on the plan.
pub fn l_gamma(model: &dyn Denoiser, schedule: &NoiseSchedule, plan: &SamplePlan, gamma: &WeightVector) -> Result<f64> {
    if gamma.0.len() != schedule.len() {
        return Err(Error::param("gamma must have one entry per timestep"));
    }
    let errs = denoising_errors(model, schedule, plan)?;
    Ok(errs.iter().zip(&gamma.0).map(|(e, g)| e * g).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct JSigma {
    /// Sum of the terms that depend on the model.
    pub theta_dependent: f64,
    /// Prior KL and the `t = 1` normaliser; the `C` in `J_σ = L_γ + C`.
    pub theta_independent: f64,
    /// Model-dependent term per timestep (index `t − 1`).
    pub terms: Vec<f64>,
}

impl JSigma {
    pub fn total(&self) -> f64 {
        self.theta_dependent + self.theta_independent
    }
}

fn check_sigma(sigma: &[f64], schedule: &NoiseSchedule) -> Result<()> {
    if sigma.len() != schedule.len() {
        return Err(Error::param(format!(
            "sigma has {} entries for {} timesteps",
            sigma.len(),
            schedule.len()
        )));
    }
    if let Some(t) = sigma.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::domain(format!(
            "sigma_{} = {} but the variational objective needs every sigma > 0",
            t + 1,
            sigma[t]
        )));
    }
    Ok(())
}

/// `J_σ` on the plan via its KL decomposition.
pub fn j_sigma(model: &dyn Denoiser, schedule: &NoiseSchedule, plan: &SamplePlan, sigma: &[f64]) -> Result<JSigma> {
    plan.check(schedule)?;
    check_sigma(sigma, schedule)?;
    let d = plan.dim() as f64;
    let x0 = StateBatch::new(plan.x0.clone(), 0)?;
    let mut terms = Vec::with_capacity(schedule.len());
    for t in 1..=schedule.len() {
        let xt = plan.noisy(schedule, t)?;
        let eps_hat = model.eval(xt.view(), t)?;
        let f = StateBatch::new(predict_x0(schedule, &xt, t, &eps_hat)?, 0)?;
        let s2 = sigma[t - 1] * sigma[t - 1];
        let term = if t == 1 {
            row_sq_norms(&(&x0.data - &f.data)) / (2.0 * s2)
        } else {
            let q = reverse_conditional_params(schedule, &xt, &x0, t, t - 1, sigma[t - 1])?;
            let p = reverse_conditional_params(schedule, &xt, &f, t, t - 1, sigma[t - 1])?;
            row_sq_norms(&(q.mean - p.mean)) / (2.0 * s2)
        };
        terms.push(term.mean().unwrap_or(0.0));
    }

    let a_t = schedule.alphas()[schedule.len()];
    let prior_kl = plan
        .x0
        .rows()
        .into_iter()
        .map(|r| 0.5 * (a_t * r.dot(&r) + d * (1.0 - a_t) - d - d * (1.0 - a_t).ln()))
        .sum::<f64>()
        / plan.x0.nrows() as f64;
    let normaliser = 0.5 * d * (2.0 * std::f64::consts::PI * sigma[0] * sigma[0]).ln();

    Ok(JSigma {
        theta_dependent: terms.iter().sum(),
        theta_independent: prior_kl + normaliser,
        terms,
    })
}

/// Mean-difference factor `c_t` between the reverse kernels conditioned on
/// `x_0` and on a prediction of it; 1 for `t = 1`.
pub fn kernel_mean_factor(schedule: &NoiseSchedule, sigma: &[f64], t: usize) -> Result<f64> {
    if t == 1 {
        return Ok(1.0);
    }
    let a = schedule.alphas();
    let dir = checked_sqrt(1.0 - a[t - 1] - sigma[t - 1] * sigma[t - 1], "kernel mean factor")?;
    Ok(a[t - 1].sqrt() - dir * (a[t] / (1.0 - a[t])).sqrt())
}

/// Weights with `J_σ = L_γ + C` exactly.
pub fn matched_gamma(sigma: &[f64], schedule: &NoiseSchedule) -> Result<WeightVector> {
    check_sigma(sigma, schedule)?;
    let a = schedule.alphas();
    let gamma = (1..=schedule.len())
        .map(|t| {
            let c = kernel_mean_factor(schedule, sigma, t)?;
            let s2 = sigma[t - 1] * sigma[t - 1];
            Ok(c * c * (1.0 - a[t]) / (2.0 * s2 * a[t]))
        })
        .collect::<Result<Vec<_>>>()?;
    WeightVector::new(gamma)
}

/// `γ_t = 1/(2dσ_t²α_t)`, the form that omits `c_t²(1 − α_t)` and divides by
/// the dimension. Kept as a negative control: it does not give a constant
/// `J_σ − L_γ`.
pub fn unscaled_gamma(sigma: &[f64], schedule: &NoiseSchedule, d: usize) -> Result<WeightVector> {
    check_sigma(sigma, schedule)?;
    let a = schedule.alphas();
    WeightVector::new(
        (1..=schedule.len())
            .map(|t| 1.0 / (2.0 * d as f64 * sigma[t - 1] * sigma[t - 1] * a[t]))
            .collect(),
    )
}

/// Markovian-chain bound term `L_{t−1} = β_t²/(2σ_t²(1 − α_t)(α_t/α_{t−1}))·E‖ε − ε̂‖²`.
pub fn ddpm_bound_term(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    plan: &SamplePlan,
    t: usize,
    sigma_t: f64,
) -> Result<f64> {
    if t < 2 {
        return Err(Error::param("the Markovian bound terms start at t = 2"));
    }
    let (beta, step) = schedule.stepwise(t)?;
    let a = schedule.alphas()[t];
    let xt = plan.noisy(schedule, t)?;
    let pred = model.eval(xt.view(), t)?;
    let err = row_sq_norms(&(pred - &plan.eps[t - 1])).mean().unwrap_or(0.0);
    Ok(beta * beta / (2.0 * sigma_t * sigma_t * (1.0 - a) * step) * err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub t: usize,
    pub kl_term: f64,
    pub l_term: f64,
    pub gamma_t: f64,
    pub residual: f64,
}

/// Per-timestep comparison of the `J_σ` terms against `γ_t`-weighted errors.
pub fn verification_report(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    plan: &SamplePlan,
    sigma: &[f64],
) -> Result<Vec<ReportRow>> {
    let j = j_sigma(model, schedule, plan, sigma)?;
    let gamma = matched_gamma(sigma, schedule)?;
    let errs = denoising_errors(model, schedule, plan)?;
    Ok((1..=schedule.len())
        .map(|t| {
            let l_term = gamma.0[t - 1] * errs[t - 1];
            ReportRow {
                t,
                kl_term: j.terms[t - 1],
                l_term,
                gamma_t: gamma.0[t - 1],
                residual: j.terms[t - 1] - l_term,
            }
        })
        .collect())
}

/// Rows as `t,kl_term,l_term,gamma_t,residual` text with a header line.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("t,kl_term,l_term,gamma_t,residual\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.t, r.kl_term, r.l_term, r.gamma_t, r.residual));
    }
    out
}

/// A separate affine map `ε^{(t)}(x) = x·A_t + b_t` for every timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TableDenoiser {
    /// Per timestep a `(d + 1) × d` matrix: `d` rows of `A_t` then `b_t`.
    pub tables: Vec<Array2<f64>>,
}

impl Denoiser for TableDenoiser {
    fn eval(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        let table = self
            .tables
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::param(format!("no table for t = {t}")))?;
        let d = x.ncols();
        check_shape(&[d + 1, d], table.shape())?;
        Ok(x.dot(&table.slice(ndarray::s![..d, ..])) + table.row(d))
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::Table
    }
}

/// Minimises `L_γ` over all per-timestep tables at once by solving the
/// joint normal equations (one dense system over every table entry).
pub fn fit_table_denoiser(schedule: &NoiseSchedule, plan: &SamplePlan, gamma: &WeightVector) -> Result<TableDenoiser> {
    plan.check(schedule)?;
    let d = plan.dim();
    let n = plan.x0.nrows() as f64;
    let block = d + 1;
    let size = schedule.len() * block;
    let mut lhs = Array2::<f64>::zeros((size, size));
    let mut rhs = Array2::<f64>::zeros((size, d));
    for t in 1..=schedule.len() {
        let xt = plan.noisy(schedule, t)?;
        let mut design = Array2::ones((xt.batch(), block));
        design.slice_mut(ndarray::s![.., ..d]).assign(&xt.data);
        let g = gamma.0[t - 1] / n;
        let at = (t - 1) * block;
        lhs.slice_mut(ndarray::s![at..at + block, at..at + block])
            .assign(&(design.t().dot(&design) * g));
        rhs.slice_mut(ndarray::s![at..at + block, ..])
            .assign(&(design.t().dot(&plan.eps[t - 1]) * g));
    }
    let solution = solve_dense(lhs, rhs)?;
    Ok(TableDenoiser {
        tables: (0..schedule.len())
            .map(|k| solution.slice(ndarray::s![k * block..(k + 1) * block, ..]).to_owned())
            .collect(),
    })
}

/// Gauss–Jordan elimination with partial pivoting.
fn solve_dense(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .expect("non-empty range");
        if a[[piv, col]] == 0.0 {
            return Err(Error::domain("singular normal equations"));
        }
        if piv != col {
            for k in 0..n {
                a.swap([col, k], [piv, k]);
            }
            for k in 0..b.ncols() {
                b.swap([col, k], [piv, k]);
            }
        }
        let p = a[[col, col]];
        for row in 0..n {
            if row == col || a[[row, col]] == 0.0 {
                continue;
            }
            let f = a[[row, col]] / p;
            for k in col..n {
                a[[row, k]] -= f * a[[col, k]];
            }
            for k in 0..b.ncols() {
                b[[row, k]] -= f * b[[col, k]];
            }
        }
    }
    for row in 0..n {
        let p = a[[row, row]];
        b.row_mut(row).mapv_inplace(|v| v / p);
    }
    Ok(b)
}

/// Equal-covariance Gaussian KL `‖μ_1 − μ_2‖²/(2σ²)`, row-wise.
pub fn equal_cov_kl(mean_p: &Array2<f64>, mean_q: &Array2<f64>, var: f64) -> Array1<f64> {
    row_sq_norms(&(mean_p - mean_q)) / (2.0 * var)
}
