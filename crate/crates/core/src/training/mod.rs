//! End-to-end rate-distortion training with the one-step decode.

pub mod config;
pub mod corpus;
pub mod loss;
pub mod trainer;

pub use config::{BackboneMode, CorpusConfig, DenoiserStage, ModelConfig, TrainConfig, VaeStage};
pub use corpus::{image_files, synthetic_image, write_synthetic, Corpus};
pub use loss::{rd_loss, squared_error};
pub use trainer::{
    calibrate_latent_scale, encode_stack, load_foundation, pretrain_denoiser, pretrain_vae, train, CodecTrainer,
    MetricsLog, StepMetrics, TrainSummary,
};
