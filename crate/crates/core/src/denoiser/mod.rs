//! Noise-prediction models `ε_θ^{(t)}` and the denoised-observation predictor.

mod mixture;
mod mlp;

pub use mixture::{mixture_optimal_eps, AnalyticDenoiser, DataSpec, MixtureSpec};
pub use mlp::{gradient_check, train_toy_denoiser, Mlp, MlpShape, TrainConfig};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{check_shape, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::state::StateBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    AnalyticMixture,
    Trained,
    Constant,
    Table,
}

/// A family of noise predictors indexed by timestep. Output has the shape of
/// the input batch.
pub trait Denoiser: Send + Sync {
    fn eval(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>>;

    fn kind(&self) -> DenoiserKind;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn eval(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        (**self).eval(x, t)
    }

    fn kind(&self) -> DenoiserKind {
        (**self).kind()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn eval(&self, x: ArrayView2<'_, f64>, t: usize) -> Result<Array2<f64>> {
        (**self).eval(x, t)
    }

    fn kind(&self) -> DenoiserKind {
        (**self).kind()
    }
}

/// Predicts the same value for every coordinate at every timestep.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantDenoiser {
    pub value: f64,
}

impl Denoiser for ConstantDenoiser {
    fn eval(&self, x: ArrayView2<'_, f64>, _t: usize) -> Result<Array2<f64>> {
        Ok(Array2::from_elem(x.raw_dim(), self.value))
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::Constant
    }
}

/// Smallest `α_t` for which the denoised prediction is attempted.
pub const ALPHA_FLOOR: f64 = 1e-12;

/// `f(x_t) = (x_t − √(1 − α_t)·ε̂) / √α_t`.
pub fn predict_x0(schedule: &NoiseSchedule, x_t: &StateBatch, t: usize, eps_hat: &Array2<f64>) -> Result<Array2<f64>> {
    check_shape(x_t.data.shape(), eps_hat.shape())?;
    if t == 0 {
        return Err(Error::param("predicting x0 needs t >= 1"));
    }
    let a = schedule.alpha(t)?;
    if a < ALPHA_FLOOR {
        return Err(Error::domain(format!("alpha_{t} = {a:e} below floor; x0 prediction unstable")));
    }
    Ok((&x_t.data - &(eps_hat * (1.0 - a).sqrt())) / a.sqrt())
}

/// Mean over rows of `‖ε̂ − ε‖²` for `x_t = √α_t x_0 + √(1 − α_t) ε`.
pub fn denoising_risk(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x0: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
    t: usize,
) -> Result<f64> {
    check_shape(x0.shape(), eps.shape())?;
    let a = schedule.alpha(t)?;
    let xt = &x0 * a.sqrt() + &eps * (1.0 - a).sqrt();
    let pred = model.eval(xt.view(), t)?;
    Ok((pred - eps).mapv(|v| v * v).sum_axis(Axis(1)).mean().unwrap_or(0.0))
}
