//! Metrics, the naive quantize-and-deflate baseline, codec evaluation,
//! Elo ranking of preference logs, timing reports and SVG plots.

pub mod benchmark;
pub mod codec_eval;
pub mod elo;
pub mod metrics;
pub mod naive;
pub mod perceptual;
pub mod plot;
pub mod record;

pub use benchmark::{benchmark, time_decode, BenchImage, BenchReport};
pub use codec_eval::{codec_point, evaluate_codec, CodecPoint};
pub use elo::{elo_rank, synthetic_log, Comparison, ComparisonLog, EloConfig, EloReport, MethodRating, TournamentMode, Winner};
pub use metrics::{ms_ssim, psnr, ssim};
pub use naive::{naive_sweep, read_naive, write_naive, NaiveStream};
pub use perceptual::{fid_like, frechet_distance, lpips_like, perceptual_scores, FeatureExtractor, PerceptualScores, PyramidExtractor};
pub use plot::{elo_box_chart, line_chart, Series};
pub use record::{curve_points, dominance, read_records, write_records, Better, CurvePoint, DominanceCheck, EvalRecord, METHOD_CODEC, METHOD_NAIVE};

#[cfg(test)]
pub(crate) mod fixtures {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::autoencoder::ImageTensor;
    use crate::checkpoint::ModelSet;
    use crate::codec::{CodecContext, CodecOptions};
    use crate::training::{synthetic_image, TrainConfig};

    /// Untrained smoke-size models, saved and reloaded.
    pub fn context(seed: u64) -> CodecContext {
        let set = ModelSet::new(TrainConfig::smoke().models.manifest(), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        CodecContext::load(dir.path(), CodecOptions::default()).unwrap()
    }

    pub fn test_images(n: usize, size: usize, seed: u64) -> Vec<(String, ImageTensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| (format!("img{i}"), synthetic_image(size, size, &mut rng).unwrap()))
            .collect()
    }
}
