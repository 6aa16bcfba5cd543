//! Experiment configuration. TOML by default; files ending in `.json` are
//! read as JSON with the same keys.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/default"
//! modes = ["fp", "naive", "dmc", "sd2", "dd2"]
//! n_samples = 10000
//!
//! [schedule]
//! steps = 1000
//!
//! [sampler]
//! steps = 50
//! eta = 1.0
//!
//! [injection]
//! mu_delta = 0.1
//! var_delta = 0.04
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::InjectionConfig;
use crate::noisemodel::CollectAlong;
use crate::quantizer::QuantConfig;
use crate::sampler::Mode;
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::toymodel::{Activation, GaussianMixture, MixtureSpec, TimeEmbedding, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub mixture: MixtureSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<InjectionConfig>,
    #[serde(default)]
    pub noise_model: NoiseModelSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

fn default_n_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub covs: Vec<[[f64; 2]; 2]>,
}

impl Default for MixtureSection {
    fn default() -> Self {
        let spec = MixtureSpec::from(GaussianMixture::default());
        Self { weights: spec.weights, means: spec.means, covs: spec.covs }
    }
}

impl MixtureSection {
    pub fn build(&self) -> Result<GaussianMixture> {
        GaussianMixture::new(self.weights.clone(), self.means.clone(), self.covs.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Number of reverse steps.
    pub steps: usize,
    pub eta: f64,
    pub dd2_unconditional_mean: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { steps: 50, eta: 1.0, dd2_unconditional_mean: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    /// Closed-form noise predictor of the mixture.
    #[default]
    Analytic,
    /// Trained network, loaded from `net_path` or trained from `[train]`.
    Net,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub source: ModelSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub net_path: Option<PathBuf>,
    /// Previously calibrated quantized net; skips calibration when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qnet_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embedding: TimeEmbedding,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: vec![32, 32, 32],
            activation: Activation::Silu,
            embedding: TimeEmbedding::Scalar,
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModelSource {
    /// Fitted on collected `(eps_hat, delta)` pairs.
    #[default]
    Fitted,
    /// Ground-truth parameters exported by synthetic injection.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModelSection {
    pub collect_trajectories: usize,
    pub collect_along: CollectAlong,
    pub source: NoiseModelSource,
}

impl Default for NoiseModelSection {
    fn default() -> Self {
        Self { collect_trajectories: 256, collect_along: CollectAlong::Fp, source: NoiseModelSource::Fitted }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            modes: default_modes(),
            n_samples: default_n_samples(),
            mixture: MixtureSection::default(),
            schedule: ScheduleSection::default(),
            sampler: SamplerSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            quantization: None,
            injection: None,
            noise_model: NoiseModelSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&s)
        } else {
            Self::from_toml(&s)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn plan(&self) -> Result<StepPlan> {
        StepPlan::evenly_spaced(self.schedule.steps, self.sampler.steps, self.sampler.eta)
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        self.mixture.build()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.mixture().map_err(|e| Error::Config(format!("mixture: {e}")))?;
        let schedule = self.schedule().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.plan().and_then(|p| p.validate_for(&schedule)).map_err(|e| Error::Config(format!("sampler: {e}")))?;
        if self.modes.is_empty() {
            return bad("modes must not be empty");
        }
        let mut seen = self.modes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modes.len() {
            return bad("modes must not repeat");
        }
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2");
        }
        if self.noise_model.collect_trajectories == 0 {
            return bad("noise_model.collect_trajectories must be positive");
        }
        match (&self.quantization, &self.injection) {
            (Some(_), Some(_)) => return bad("quantization and injection are mutually exclusive"),
            (Some(q), None) => {
                if self.model.source != ModelSource::Net {
                    return bad("quantization requires model.source = \"net\"");
                }
                for b in [Some(q.weight_bits), Some(q.act_bits), q.edge_layer_bits].into_iter().flatten() {
                    if !(2..=16).contains(&b) {
                        return bad("quantization bit widths must lie in 2..=16");
                    }
                }
                if q.grid == 0 || q.calib_trajectories == 0 {
                    return bad("quantization grid and calib_trajectories must be positive");
                }
            }
            (None, Some(i)) => i.validate().map_err(|e| Error::Config(format!("injection: {e}")))?,
            (None, None) => {}
        }
        if self.noise_model.source == NoiseModelSource::Exact && self.injection.is_none() {
            return bad("noise_model.source = \"exact\" requires an [injection] section");
        }
        if self.model.qnet_path.is_some() && self.quantization.is_none() {
            return bad("model.qnet_path requires a [quantization] section");
        }
        if self.model.source == ModelSource::Net {
            if self.train.hidden.is_empty() || self.train.hidden.contains(&0) {
                return bad("train.hidden must list positive widths");
            }
            self.train.train_config(0).validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        }
        Ok(())
    }
}
