//! Experiment configuration: one TOML file drives data, schedule, model,
//! training, quantization, correction, and run settings. Parsing is strict
//! (unknown keys are errors) and the parsed struct serializes back to an
//! equivalent file, so the canonical serialized form doubles as the config
//! hash input for run identifiers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correction::{CorrectionMode, SamplerKind};
use crate::denoiser::FusionStyle;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::quantizer::BitConfig;
use crate::schedule::{NoiseSchedule, SigmaChoice};
use crate::tensor::Tensor;
use crate::train::TrainOpts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl DataConfig {
    pub fn build(&self) -> Result<GaussianMixture> {
        let k = self.means.len();
        if k == 0 {
            return Err(Error::Config("data.means must be nonempty".into()));
        }
        let d = self.means[0].len();
        if self.means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("data.means rows must share a dimension".into()));
        }
        let flat: Vec<f64> = self.means.iter().flatten().copied().collect();
        GaussianMixture::new(self.weights.clone(), Tensor::new(k, d, flat)?, self.stds.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub sigma: SigmaChoice,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end, self.sigma)
    }
}

/// Optional synthetic channel imbalance, standing in for the outlier
/// channels large conditioned models grow on their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceConfig {
    pub channels: Vec<usize>,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    pub groups: usize,
    pub style: FusionStyle,
    /// Load from this container instead of training when it exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<ImbalanceConfig>,
}

fn default_grid() -> usize {
    crate::quantizer::DEFAULT_GRID
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: BitConfig,
    pub calibration_samples: usize,
    pub calibration_seed: u64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub exempt_emb_out: bool,
    /// Stratified calibration timesteps (each t equally often) instead of
    /// uniform draws.
    #[serde(default)]
    pub stratified: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionConfig {
    /// Channel smoothing on/off.
    pub intra: bool,
    /// Probe stages; 0 disables runtime correction.
    pub stages: usize,
    pub mode: CorrectionMode,
    #[serde(default = "default_true")]
    pub antithetic: bool,
}

fn default_projections() -> usize {
    crate::metrics::SWD_PROJECTIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sampler: SamplerKind,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default = "default_projections")]
    pub swd_projections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainOpts,
    pub quant: QuantConfig,
    pub correction: CorrectionConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 8 hex chars of a hash over the canonical serialized form;
    /// prefixes every run id. Output location and the seed list are blanked
    /// first: they select which runs happen and where artifacts land, not
    /// what the experiment computes (the seed reappears in each run id).
    pub fn hash8(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.run.seeds = Vec::new();
        canon.run.out_dir = PathBuf::new();
        let mut h = Sha256::new();
        h.update(canon.to_toml_string()?.as_bytes());
        Ok(format!("{:x}", h.finalize())[..8].to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let d = match self.data.means.first() {
            Some(m) => m.len(),
            None => return cfg_err("data.means must be nonempty".into()),
        };
        self.data.build()?;
        if self.schedule.t_max == 0 {
            return cfg_err("schedule.t_max must be >= 1".into());
        }
        let m = &self.model;
        if m.n_blocks == 0 {
            return cfg_err("model.n_blocks must be >= 1".into());
        }
        if m.emb_dim == 0 || m.emb_dim % 2 != 0 {
            return cfg_err("model.emb_dim must be positive and even".into());
        }
        if m.groups == 0 || m.hidden % m.groups != 0 {
            return cfg_err(format!("model.hidden {} must divide into {} groups", m.hidden, m.groups));
        }
        if let Some(im) = &m.imbalance {
            if im.factor <= 0.0 {
                return cfg_err("model.imbalance.factor must be positive".into());
            }
            if im.channels.iter().any(|&c| c >= m.hidden) {
                return cfg_err("model.imbalance.channels outside the hidden width".into());
            }
        }
        if self.train.phases.is_empty() && m.weights_path.is_none() {
            return cfg_err("train.phases is empty and no model.weights_path given".into());
        }
        if self.quant.calibration_samples == 0 {
            return cfg_err("quant.calibration_samples must be >= 1".into());
        }
        if self.quant.grid == 0 {
            return cfg_err("quant.grid must be >= 1".into());
        }
        if self.quant.stratified && self.quant.calibration_samples % self.schedule.t_max != 0 {
            return cfg_err("stratified calibration needs samples divisible by t_max".into());
        }
        let steps = self
            .run
            .sampler
            .step_sequence(self.schedule.t_max)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.correction.stages > steps.len() {
            return cfg_err(format!(
                "correction.stages {} exceeds the {}-step sequence",
                self.correction.stages,
                steps.len()
            ));
        }
        if self.run.n_samples < 2 {
            return cfg_err("run.n_samples must be >= 2".into());
        }
        if self.correction.antithetic && self.correction.stages > 0 && self.run.n_samples % 2 != 0 {
            return cfg_err("antithetic probing needs an even run.n_samples".into());
        }
        if self.run.seeds.is_empty() {
            return cfg_err("run.seeds must be nonempty".into());
        }
        if self.run.swd_projections == 0 {
            return cfg_err("run.swd_projections must be >= 1".into());
        }
        let _ = d;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
[data]
weights = [0.5, 0.5]
means = [[2.0, 0.0], [-2.0, 0.0]]
stds = [0.3, 0.3]

[schedule]
t_max = 20
beta_start = 1e-4
beta_end = 0.02

[model]
n_blocks = 2
hidden = 8
emb_dim = 6
groups = 2
style = "scale_shift"

[train]
batch = 16
seed = 11

[[train.phases]]
iters = 100
lr = 3e-3

[quant]
bits = "W8A8"
calibration_samples = 40
calibration_seed = 97

[correction]
intra = true
stages = 4
mode = "mean_only"

[run]
sampler = "ddpm"
n_samples = 64
seeds = [1, 2, 3]
out_dir = "out"
"#;

    #[test]
    fn example_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(cfg.quant.grid, 100);
        assert!(!cfg.quant.exempt_emb_out);
        assert!(cfg.correction.antithetic);
        assert_eq!(cfg.run.swd_projections, 128);
        assert_eq!(cfg.run.sampler, SamplerKind::Ddpm);
        assert_eq!(cfg.train.momentum, 0.9);
        assert!(cfg.model.weights_path.is_none());
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        let s = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash8().unwrap(), back.hash8().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = EXAMPLE.replace("[run]", "[run]\nturbo = true");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.is_config(), "{err}");

        let bad = format!("{EXAMPLE}\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for (from, to) in [
            ("sampler = \"ddpm\"", "sampler = \"euler\""),
            ("bits = \"W8A8\"", "bits = \"W3A8\""),
            ("mode = \"mean_only\"", "mode = \"median\""),
            ("seeds = [1, 2, 3]", "seeds = []"),
            ("stages = 4", "stages = 999"),
            ("n_samples = 64", "n_samples = 1"),
        ] {
            let bad = EXAMPLE.replace(from, to);
            assert_ne!(bad, EXAMPLE, "{from}");
            let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
            assert!(err.is_config(), "{from} -> {to}: {err}");
        }
    }

    #[test]
    fn hash_distinguishes_configs() {
        let a = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        let mut b = a.clone();
        b.quant.bits = "W4A8".parse().unwrap();
        assert_ne!(a.hash8().unwrap(), b.hash8().unwrap());
        assert_eq!(a.hash8().unwrap().len(), 8);

        // Same experiment, different seed list or output directory: run ids
        // must stay joinable across invocations.
        let mut c = a.clone();
        c.run.seeds = vec![9];
        c.run.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash8().unwrap(), c.hash8().unwrap());
    }

    #[test]
    fn ddim_sampler_string_round_trips() {
        let with_ddim = EXAMPLE.replace("sampler = \"ddpm\"", "sampler = \"ddim:10\"");
        let cfg = ExperimentConfig::from_toml_str(&with_ddim).unwrap();
        assert_eq!(cfg.run.sampler, SamplerKind::Ddim { steps: 10 });
        let s = cfg.to_toml_string().unwrap();
        assert!(s.contains("sampler = \"ddim:10\""));
    }
}
