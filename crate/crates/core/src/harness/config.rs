//! Run configuration, loaded from TOML and overridden from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{train_toy_denoiser, AnalyticDenoiser, DataSpec, Denoiser, MixtureSpec, Mlp, TrainConfig};
use crate::error::{Error, Result};
use crate::sampler::SigmaPolicy;
use crate::schedule::{select_subsequence, NoiseSchedule, SubsequenceMode, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear_beta(self.steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::config("schedule", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Analytic,
    Checkpoint,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    /// Checkpoint to load when `kind = "checkpoint"`.
    pub path: Option<PathBuf>,
    /// Training parameters when `kind = "train"`.
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    #[serde(default)]
    pub mode: SubsequenceMode,
    pub eta: Option<f64>,
    #[serde(default)]
    pub sigma_hat: bool,
    #[serde(default)]
    pub intermediates: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, mode: SubsequenceMode::Linear, eta: None, sigma_hat: false, intermediates: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_plot")]
    pub plot: bool,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_data")]
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_chains() -> usize {
    256
}

fn default_plot() -> bool {
    true
}

/// Three equal-weight components on a circle of radius 2.
pub fn default_data() -> DataSpec {
    DataSpec::Mixture(MixtureSpec::ring(3, 2.0, 0.3).expect("valid ring"))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: default_out(),
            chains: default_chains(),
            plot: default_plot(),
            schedule: ScheduleConfig::default(),
            data: default_data(),
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Command-line values that replace config fields when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub eta: Option<f64>,
    pub sigma_hat: bool,
    pub mode: Option<SubsequenceMode>,
    pub out: Option<PathBuf>,
    pub chains: Option<usize>,
    pub plot: Option<bool>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .unwrap_or_else(|| "<document>".into());
            Error::config(field, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.steps {
            self.sampler.steps = v;
        }
        if let Some(v) = o.eta {
            self.sampler.eta = Some(v);
            self.sampler.sigma_hat = false;
        }
        if o.sigma_hat {
            self.sampler.sigma_hat = true;
            self.sampler.eta = None;
        }
        if let Some(v) = o.mode {
            self.sampler.mode = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.chains {
            self.chains = v;
        }
        if let Some(v) = o.plot {
            self.plot = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.data.validate().map_err(|e| Error::config("data", e.to_string()))?;
        if self.chains == 0 {
            return Err(Error::config("chains", "must be at least 1"));
        }
        let s = &self.sampler;
        if s.steps == 0 || s.steps > self.schedule.steps {
            return Err(Error::config(
                "sampler.steps",
                format!("must be in 1..={}, got {}", self.schedule.steps, s.steps),
            ));
        }
        if s.sigma_hat && s.eta.is_some() {
            return Err(Error::config("sampler.eta", "set either eta or sigma_hat, not both"));
        }
        if let Some(eta) = s.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::config("sampler.eta", format!("must be a finite value >= 0, got {eta}")));
            }
        }
        match self.model.kind {
            ModelKind::Analytic => {}
            ModelKind::Checkpoint => match &self.model.path {
                None => return Err(Error::config("model.path", "required for a checkpoint model")),
                Some(p) if !p.is_file() => {
                    return Err(Error::config("model.path", format!("{} does not exist", p.display())))
                }
                Some(_) => {}
            },
            ModelKind::Train => {
                if self.model.train.is_none() {
                    return Err(Error::config("model.train", "required when kind = \"train\""));
                }
            }
        }
        Ok(())
    }

    pub fn policy(&self) -> SigmaPolicy {
        if self.sampler.sigma_hat {
            SigmaPolicy::SigmaHat
        } else {
            SigmaPolicy::Eta(self.sampler.eta.unwrap_or(0.0))
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        select_subsequence(self.schedule.steps, self.sampler.steps, self.sampler.mode)
    }

    /// Builds the denoiser; a checkpoint must have been trained on this schedule.
    pub fn build_model(&self, schedule: &NoiseSchedule) -> Result<Box<dyn Denoiser>> {
        match self.model.kind {
            ModelKind::Analytic => Ok(Box::new(AnalyticDenoiser::new(&self.data, schedule.clone())?)),
            ModelKind::Checkpoint => {
                let path = self.model.path.as_ref().ok_or_else(|| Error::config("model.path", "missing"))?;
                let (mlp, header) = Mlp::load(path)?;
                if header.schedule_hash != schedule.hash() {
                    return Err(Error::config(
                        "model.path",
                        format!("checkpoint schedule {} does not match {}", header.schedule_hash, schedule.hash()),
                    ));
                }
                if mlp.shape().dim != self.data.dim() {
                    return Err(Error::config("model.path", "checkpoint dimension differs from the data"));
                }
                Ok(Box::new(mlp))
            }
            ModelKind::Train => {
                let cfg = self.model.train.as_ref().ok_or_else(|| Error::config("model.train", "missing"))?;
                Ok(Box::new(train_toy_denoiser(&self.data, schedule, cfg)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let parsed = RunConfig::from_toml("").unwrap();
        assert_eq!(parsed, RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.sampler.sigma_hat = true;
        c.model.train = Some(TrainConfig::default());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_fields_rejected() {
        let e = RunConfig::from_toml("seed = 1\ncolour = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { .. }), "{e}");
        let e = RunConfig::from_toml("[sampler]\nsteps = 5\nstride = 2\n").unwrap_err();
        assert!(e.to_string().contains("stride"), "{e}");
    }

    #[test]
    fn field_level_errors() {
        let mut c = RunConfig::default();
        c.sampler.steps = 2000;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "sampler.steps"));
        let mut c = RunConfig::default();
        c.model.kind = ModelKind::Checkpoint;
        c.model.path = Some("/nonexistent/model.ckpt".into());
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.path"));
        let mut c = RunConfig::default();
        c.sampler.eta = Some(0.5);
        c.sampler.sigma_hat = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::from_toml("seed = 3\n[sampler]\nsteps = 20\neta = 1.0\n").unwrap();
        c.apply(&Overrides { seed: Some(9), sigma_hat: true, chains: Some(4), ..Default::default() });
        assert_eq!((c.seed, c.sampler.steps, c.chains), (9, 20, 4));
        assert_eq!(c.policy(), SigmaPolicy::SigmaHat);
        c.apply(&Overrides { eta: Some(0.0), ..Default::default() });
        assert_eq!(c.policy(), SigmaPolicy::DDIM);
    }

    #[test]
    fn point_data_parses() {
        let c = RunConfig::from_toml("[data]\npoints = [[0.0, 1.0], [1.0, 0.0]]\n").unwrap();
        assert_eq!(c.data.dim(), 2);
    }
}
