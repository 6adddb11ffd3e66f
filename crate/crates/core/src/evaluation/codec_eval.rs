//! Evaluation of the learned codec over a set of images and rate conditions.

use std::time::Instant;

use crate::autoencoder::ImageTensor;
use crate::codec::{CodecContext, FLAG_RESCALE};
use crate::entropy::container;
use crate::error::{Error, Result};
use crate::param_estimator::RateCondition;

use super::perceptual::FeatureExtractor;
use super::record::{format_gamma, EvalRecord, METHOD_CODEC};

/// One encoded and decoded image.
#[derive(Debug, Clone)]
pub struct CodecPoint {
    pub record: EvalRecord,
    pub stream: Vec<u8>,
    pub reconstruction: ImageTensor,
}

/// Encodes `image`, then decodes the serialized bytes. Timings cover
/// analysis and reconstruction; entropy coding is left out of both.
pub fn codec_point(ctx: &CodecContext, id: &str, image: &ImageTensor, lambda: RateCondition, force_timestep: Option<usize>) -> Result<CodecPoint> {
    let start = Instant::now();
    let analyzed = ctx.analyze(image, lambda, force_timestep)?;
    let encode_seconds = start.elapsed().as_secs_f64();
    let encoded = ctx.entropy_encode(&analyzed)?;

    let stream = container::parse(&encoded.bytes)?;
    ctx.check_header(&stream.header)?;
    let h = &stream.header;
    let (lh, lw) = h.latent_shape();
    let symbols = ctx
        .entropy_model()
        .decompress(&stream.hyper, &stream.main, lh, lw, h.symbol_bound as i32)?;
    if symbols.symbols != analyzed.symbols.symbols {
        return Err(Error::Coder(crate::CoderError::MalformedCdf(
            "decoded symbols differ from the encoded ones".into(),
        )));
    }
    let start = Instant::now();
    let (reconstruction, calls) = ctx.reconstruct(
        &symbols,
        &h.gamma,
        h.timestep as usize,
        h.flags & FLAG_RESCALE != 0,
        h.height as usize,
        h.width as usize,
    )?;
    let decode_seconds = start.elapsed().as_secs_f64();

    let record = EvalRecord {
        method: METHOD_CODEC.into(),
        image_id: id.into(),
        lambda: Some(lambda.value()),
        quant_step: None,
        height: image.height(),
        width: image.width(),
        bytes: encoded.bytes.len(),
        bpp: EvalRecord::bpp_of(encoded.bytes.len(), image.height(), image.width()),
        psnr: 0.0,
        ms_ssim: None,
        lpips_like: None,
        encode_seconds,
        decode_seconds,
        timestep: analyzed.timestep,
        tau: Some(analyzed.tau),
        backbone_calls: calls,
        gamma: format_gamma(&analyzed.gamma),
    };
    Ok(CodecPoint {
        record,
        stream: encoded.bytes,
        reconstruction,
    })
}

/// One scored record per image and rate condition, images outermost.
/// Returns the reconstructions alongside, in the same order.
pub fn evaluate_codec(
    ctx: &CodecContext,
    images: &[(String, ImageTensor)],
    lambdas: &[f64],
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<(Vec<EvalRecord>, Vec<ImageTensor>)> {
    let conditions = lambdas.iter().map(|&l| RateCondition::new(l)).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut recons = Vec::new();
    for (id, image) in images {
        for &lambda in &conditions {
            let mut p = codec_point(ctx, id, image, lambda, None)?;
            p.record.score(image, &p.reconstruction, extractor)?;
            records.push(p.record);
            recons.push(p.reconstruction);
        }
    }
    Ok((records, recons))
}
