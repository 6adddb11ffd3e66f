use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::VaeConfig;
use crate::checkpoint::Manifest;
use crate::diffusion::DenoiserConfig;
use crate::entropy::EntropyConfig;
use crate::error::{Error, Result};
use crate::param_estimator::{EstimatorConfig, TRAINED_LAMBDAS};
use crate::schedule::ScheduleParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    /// Pre-train the toy autoencoder and denoiser, then freeze them.
    Toy,
    /// Load an existing autoencoder and denoiser and keep them frozen.
    FoundationFrozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Directory of PNG/JPEG images; the procedural corpus is used when unset.
    pub directory: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            directory: None,
            synthetic_count: 2000,
            synthetic_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeStage {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub kl_weight: f64,
}

impl Default for VaeStage {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 1e-3,
            batch_size: 16,
            crop: 64,
            kl_weight: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserStage {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training timesteps are drawn uniformly from `1..=max_timestep`.
    pub max_timestep: usize,
    /// Number of fixed crops whose latents form the training set.
    pub latents: usize,
    /// Side of those crops in pixels.
    pub crop: usize,
}

impl Default for DenoiserStage {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 1e-3,
            batch_size: 32,
            max_timestep: 1000,
            latents: 2000,
            crop: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub schedule: ScheduleParams,
    pub vae: VaeConfig,
    pub denoiser: DenoiserConfig,
    pub estimator: EstimatorConfig,
    pub entropy: EntropyConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams::default(),
            vae: VaeConfig::default(),
            denoiser: DenoiserConfig::default(),
            estimator: EstimatorConfig::default(),
            entropy: EntropyConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn manifest(&self) -> Manifest {
        Manifest::new(
            1.0,
            self.schedule,
            self.vae.clone(),
            self.denoiser,
            self.estimator.clone(),
            self.entropy.clone(),
        )
    }
}

/// Settings for the codec stage and the stages before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Codec (estimator and entropy model) optimization steps.
    pub steps: usize,
    pub learning_rate: f64,
    pub crop: usize,
    pub batch_size: usize,
    pub lambda_set: Vec<f64>,
    pub backbone_mode: BackboneMode,
    /// Fixed crops whose latents form the codec training set.
    pub train_crops: usize,
    /// Scale the dequantized latent by `sqrt(alpha_bar)` before the one-step decode.
    pub rescale_input: bool,
    /// Multiplier on the squared pixel error inside the loss; 4 corresponds
    /// to measuring it on images mapped to `[-1, 1]`.
    pub distortion_scale: f64,
    pub log_every: usize,
    /// Checkpoint providing the frozen autoencoder and denoiser in foundation mode.
    pub foundation_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub vae: VaeStage,
    pub denoiser: DenoiserStage,
    pub models: ModelConfig,
}

impl Default for TrainConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 50_000,
            learning_rate: 1e-4,
            crop: 64,
            batch_size: 8,
            lambda_set: TRAINED_LAMBDAS.to_vec(),
            backbone_mode: BackboneMode::Toy,
            train_crops: 2000,
            rescale_input: false,
            distortion_scale: 1.0,
            log_every: 50,
            foundation_dir: None,
            corpus: CorpusConfig::default(),
            vae: VaeStage::default(),
            denoiser: DenoiserStage::default(),
            models: ModelConfig {
                estimator: EstimatorConfig {
                    widths: vec![32, 64, 96, 128],
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

impl TrainConfig {
    /// Full-size settings: 300k steps, 256 px crops, the default estimator widths.
    pub fn paper_scale() -> Self {
        Self {
            steps: 300_000,
            crop: 256,
            corpus: CorpusConfig {
                synthetic_size: 320,
                ..Default::default()
            },
            denoiser: DenoiserStage {
                crop: 256,
                ..Default::default()
            },
            models: ModelConfig::default(),
            ..Default::default()
        }
    }

    /// Narrow models and short schedules that train end to end in about
    /// twenty minutes on one CPU core. The codec sees 128 px crops of 176 px
    /// images; smaller crops leave the estimator and entropy model tuned to
    /// border-dominated latents that do not carry over to whole images.
    pub fn quick() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            crop: 128,
            batch_size: 4,
            train_crops: 400,
            distortion_scale: 4.0,
            log_every: 50,
            corpus: CorpusConfig {
                directory: None,
                synthetic_count: 200,
                synthetic_size: 176,
            },
            vae: VaeStage {
                steps: 800,
                learning_rate: 2e-3,
                batch_size: 16,
                crop: 32,
                ..Default::default()
            },
            denoiser: DenoiserStage {
                steps: 1000,
                learning_rate: 2e-3,
                batch_size: 32,
                max_timestep: 250,
                latents: 400,
                crop: 64,
            },
            models: ModelConfig {
                vae: VaeConfig {
                    channels: vec![8, 16, 32],
                    latent_channels: 4,
                },
                denoiser: DenoiserConfig {
                    base_width: 16,
                    mid_width: 24,
                    time_features: 16,
                    embed_dim: 32,
                    ..Default::default()
                },
                estimator: EstimatorConfig {
                    widths: vec![16, 32],
                    ..Default::default()
                },
                entropy: EntropyConfig {
                    hidden: 16,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Minimal widths and step counts for smoke tests; trains in seconds.
    pub fn smoke() -> Self {
        Self {
            steps: 20,
            learning_rate: 1e-3,
            crop: 32,
            batch_size: 4,
            train_crops: 16,
            log_every: 1,
            corpus: CorpusConfig {
                directory: None,
                synthetic_count: 8,
                synthetic_size: 48,
            },
            vae: VaeStage {
                steps: 5,
                batch_size: 4,
                crop: 32,
                ..Default::default()
            },
            denoiser: DenoiserStage {
                steps: 5,
                batch_size: 8,
                max_timestep: 100,
                latents: 16,
                crop: 32,
                ..Default::default()
            },
            models: ModelConfig {
                vae: VaeConfig {
                    channels: vec![8, 8, 8],
                    latent_channels: 4,
                },
                denoiser: DenoiserConfig {
                    base_width: 8,
                    mid_width: 8,
                    time_features: 8,
                    embed_dim: 8,
                    ..Default::default()
                },
                estimator: EstimatorConfig {
                    widths: vec![8, 8],
                    ..Default::default()
                },
                entropy: EntropyConfig {
                    hidden: 8,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda_set.is_empty() {
            return bad("lambda_set must not be empty".into());
        }
        if let Some(l) = self.lambda_set.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return bad(format!("lambda values must be positive, got {l}"));
        }
        if !(self.distortion_scale.is_finite() && self.distortion_scale > 0.0) {
            return bad("distortion_scale must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.vae.learning_rate > 0.0 && self.denoiser.learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.vae.batch_size == 0 || self.denoiser.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        let f = self.models.vae.factor();
        for (name, crop) in [("crop", self.crop), ("vae.crop", self.vae.crop), ("denoiser.crop", self.denoiser.crop)] {
            if crop == 0 || crop % f != 0 {
                return bad(format!("{name} = {crop} must be a positive multiple of {f}"));
            }
        }
        if self.denoiser.max_timestep == 0 || self.denoiser.max_timestep > self.models.schedule.t_max {
            return bad("denoiser.max_timestep must lie in 1..=T_max".into());
        }
        if self.train_crops == 0 || self.denoiser.latents == 0 {
            return bad("training sets must not be empty".into());
        }
        if self.backbone_mode == BackboneMode::FoundationFrozen && self.foundation_dir.is_none() {
            return bad("foundation_frozen mode needs foundation_dir".into());
        }
        if self.corpus.directory.is_none() && (self.corpus.synthetic_count == 0 || self.corpus.synthetic_size < self.crop.max(self.vae.crop).max(self.denoiser.crop)) {
            return bad("synthetic corpus must be non-empty and at least as large as the crops".into());
        }
        self.models.manifest().validate()
    }
}
