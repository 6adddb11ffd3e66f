//! Wall-time and model-size report.

use std::time::Instant;

use serde::Serialize;

use crate::autoencoder::ImageTensor;
use crate::codec::CodecContext;
use crate::error::{invalid, Result};
use crate::param_estimator::RateCondition;

use super::codec_eval::codec_point;

#[derive(Debug, Clone, Serialize)]
pub struct BenchImage {
    pub image_id: String,
    pub timestep: usize,
    pub backbone_calls: usize,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub lambda: f64,
    pub images: Vec<BenchImage>,
    /// Analysis only; entropy coding excluded.
    pub mean_encode_seconds: f64,
    /// Reconstruction only; entropy decoding excluded.
    pub mean_decode_seconds: f64,
    pub mean_timestep: f64,
    pub t_max: usize,
    /// Every decode ran exactly as many denoiser passes as its header timestep.
    pub calls_match_timestep: bool,
    /// Parameter estimator and entropy model.
    pub trained_parameters: usize,
    /// Autoencoder and denoiser.
    pub backbone_parameters: usize,
}

impl BenchReport {
    /// Mean share of the full `T_max`-step generative process run at decode.
    pub fn decode_fraction(&self) -> f64 {
        self.mean_timestep / self.t_max as f64
    }
}

/// Runs one untimed warm-up pass on the first image, then times every image.
pub fn benchmark(ctx: &CodecContext, images: &[(String, ImageTensor)], lambda: f64) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(invalid("benchmark needs at least one image"));
    }
    let lambda = RateCondition::new(lambda)?;
    codec_point(ctx, &images[0].0, &images[0].1, lambda, None)?;
    let mut rows = Vec::with_capacity(images.len());
    for (id, image) in images {
        let p = codec_point(ctx, id, image, lambda, None)?;
        rows.push(BenchImage {
            image_id: id.clone(),
            timestep: p.record.timestep,
            backbone_calls: p.record.backbone_calls,
            encode_seconds: p.record.encode_seconds,
            decode_seconds: p.record.decode_seconds,
        });
    }
    let n = rows.len() as f64;
    Ok(BenchReport {
        lambda: lambda.value(),
        mean_encode_seconds: rows.iter().map(|r| r.encode_seconds).sum::<f64>() / n,
        mean_decode_seconds: rows.iter().map(|r| r.decode_seconds).sum::<f64>() / n,
        mean_timestep: rows.iter().map(|r| r.timestep as f64).sum::<f64>() / n,
        t_max: ctx.schedule().t_max(),
        calls_match_timestep: rows.iter().all(|r| r.backbone_calls == r.timestep),
        images: rows,
        trained_parameters: ctx.trained_parameter_count(),
        backbone_parameters: ctx.backbone_parameter_count(),
    })
}

/// Mean reconstruction time over `repeats` decodes at a forced timestep.
pub fn time_decode(ctx: &CodecContext, image: &ImageTensor, lambda: f64, timestep: usize, repeats: usize) -> Result<f64> {
    let a = ctx.analyze(image, RateCondition::new(lambda)?, Some(timestep))?;
    let rescale = ctx.options().rescale_input;
    ctx.reconstruct(&a.symbols, &a.gamma, timestep, rescale, a.height, a.width)?;
    let start = Instant::now();
    for _ in 0..repeats.max(1) {
        ctx.reconstruct(&a.symbols, &a.gamma, timestep, rescale, a.height, a.width)?;
    }
    Ok(start.elapsed().as_secs_f64() / repeats.max(1) as f64)
}
