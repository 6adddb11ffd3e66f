//! Naive latent-diffusion compression baseline: uniform quantization of the
//! autoencoder latent, a general-purpose deflate stream, and a fixed number
//! of denoising steps at the receiver. No learned entropy model or
//! parameter prediction is involved.

use std::io::{Read, Write};
use std::time::Instant;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;

use crate::autoencoder::ImageTensor;
use crate::codec::CodecContext;
use crate::error::{invalid, Error, Result};
use crate::quantization::{quantize, QuantParams, QuantizedLatent};

use super::perceptual::FeatureExtractor;
use super::record::{format_gamma, EvalRecord, METHOD_NAIVE};

pub const NAIVE_MAGIC: [u8; 4] = *b"LDNZ";
/// Symbols are stored as 16-bit integers.
pub const NAIVE_SYMBOL_BOUND: i32 = i16::MAX as i32;
const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 1 + 4 + 2;

/// Decoded contents of a naive stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveStream {
    pub height: usize,
    pub width: usize,
    pub quant_step: f32,
    pub timestep: usize,
    pub symbols: QuantizedLatent,
}

/// Zlib-compressed little-endian `i16` symbols, channel-major.
pub fn deflate_symbols(symbols: &QuantizedLatent) -> Result<Vec<u8>> {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::best());
    for &s in &symbols.symbols {
        enc.write_all(&(s as i16).to_le_bytes())?;
    }
    Ok(enc.finish()?)
}

/// Header followed by the deflated payload.
pub fn write_naive(height: usize, width: usize, factor: usize, quant_step: f32, timestep: usize, symbols: &QuantizedLatent, payload: &[u8]) -> Result<Vec<u8>> {
    if timestep > u16::MAX as usize || factor == 0 || factor > u8::MAX as usize || height.div_ceil(factor) != symbols.height || width.div_ceil(factor) != symbols.width || height > u32::MAX as usize || width > u32::MAX as usize {
        return Err(invalid("naive stream field out of range"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&NAIVE_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.push(symbols.channels as u8);
    out.push(factor as u8);
    out.extend_from_slice(&quant_step.to_le_bytes());
    out.extend_from_slice(&(timestep as u16).to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn read_naive(bytes: &[u8]) -> Result<NaiveStream> {
    if bytes.len() < HEADER_LEN || bytes[..4] != NAIVE_MAGIC {
        return Err(Error::LengthOverrun("not a naive stream".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (height, width) = (u32_at(4), u32_at(8));
    let (channels, factor) = (bytes[12] as usize, bytes[13] as usize);
    let quant_step = f32::from_le_bytes(bytes[14..18].try_into().unwrap());
    let timestep = u16::from_le_bytes(bytes[18..20].try_into().unwrap()) as usize;
    if factor == 0 || channels == 0 || !(quant_step.is_finite() && quant_step > 0.0) {
        return Err(invalid("corrupt naive header"));
    }
    let (lh, lw) = (height.div_ceil(factor), width.div_ceil(factor));
    let n = channels * lh * lw;
    let mut raw = Vec::with_capacity(2 * n);
    ZlibDecoder::new(&bytes[HEADER_LEN..])
        .take(2 * n as u64 + 1)
        .read_to_end(&mut raw)?;
    if raw.len() != 2 * n {
        return Err(Error::LengthOverrun(format!("{} payload bytes for {n} symbols", raw.len())));
    }
    let symbols = raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect();
    Ok(NaiveStream {
        height,
        width,
        quant_step,
        timestep,
        symbols: QuantizedLatent::new(symbols, channels, lh, lw, NAIVE_SYMBOL_BOUND)?,
    })
}

/// Per-channel parameters of a uniform step `q`.
pub fn uniform_params(channels: usize, quant_step: f32) -> Result<QuantParams> {
    if !(quant_step.is_finite() && quant_step > 0.0) {
        return Err(invalid(format!("quantization step {quant_step} must be positive")));
    }
    QuantParams::uniform(channels, 1.0 / quant_step)
}

/// Evaluates every `(quant_step, diffusion_steps)` pair on every image.
/// Each point is decoded from the bytes that define its bpp.
pub fn naive_sweep(
    ctx: &CodecContext,
    images: &[(String, ImageTensor)],
    quant_steps: &[f32],
    diffusion_steps: &[usize],
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<Vec<EvalRecord>> {
    let t_max = ctx.schedule().t_max();
    if let Some(&s) = diffusion_steps.iter().find(|&&s| s > t_max) {
        return Err(invalid(format!("{s} diffusion steps exceed T_max {t_max}")));
    }
    let mut records = Vec::new();
    for (id, image) in images {
        let start = Instant::now();
        let y = ctx.latent(image)?;
        let latent_seconds = start.elapsed().as_secs_f64();
        for &q in quant_steps {
            let gamma = uniform_params(y.channels(), q)?;
            let start = Instant::now();
            let symbols = quantize(&y, &gamma, NAIVE_SYMBOL_BOUND)?;
            let encode_seconds = latent_seconds + start.elapsed().as_secs_f64();
            let payload = deflate_symbols(&symbols)?;
            for &steps in diffusion_steps {
                let bytes = write_naive(image.height(), image.width(), ctx.autoencoder().factor(), q, steps, &symbols, &payload)?;
                let stream = read_naive(&bytes)?;
                let gamma = uniform_params(stream.symbols.channels, stream.quant_step)?;
                let start = Instant::now();
                let (recon, calls) =
                    ctx.reconstruct(&stream.symbols, &gamma, stream.timestep, false, stream.height, stream.width)?;
                let decode_seconds = start.elapsed().as_secs_f64();
                let mut r = EvalRecord {
                    method: METHOD_NAIVE.into(),
                    image_id: id.clone(),
                    lambda: None,
                    quant_step: Some(q as f64),
                    height: image.height(),
                    width: image.width(),
                    bytes: bytes.len(),
                    bpp: EvalRecord::bpp_of(bytes.len(), image.height(), image.width()),
                    psnr: 0.0,
                    ms_ssim: None,
                    lpips_like: None,
                    encode_seconds,
                    decode_seconds,
                    timestep: steps,
                    tau: None,
                    backbone_calls: calls,
                    gamma: format_gamma(&gamma),
                };
                r.score(image, &recon, extractor)?;
                records.push(r);
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::decode_latent;
    use crate::evaluation::fixtures::{context, test_images};
    use crate::quantization::dequantize;

    #[test]
    fn stream_round_trip_and_corruption() {
        let symbols = QuantizedLatent::new(vec![-300, 0, 5, 32767, -32767, 1, 2, 3], 2, 2, 2, 32767).unwrap();
        let payload = deflate_symbols(&symbols).unwrap();
        let bytes = write_naive(15, 16, 8, 0.25, 7, &symbols, &payload).unwrap();
        let back = read_naive(&bytes).unwrap();
        assert_eq!(back.symbols, symbols);
        assert_eq!((back.height, back.width, back.quant_step, back.timestep), (15, 16, 0.25, 7));
        assert!(read_naive(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_naive(b"LDN").is_err());
    }

    #[test]
    fn zero_steps_is_plain_quantize_decode() {
        let ctx = context(1);
        let images = test_images(2, 32, 5);
        let records = naive_sweep(&ctx, &images, &[0.5], &[0], None).unwrap();
        for ((_, img), r) in images.iter().zip(&records) {
            let y = ctx.latent(img).unwrap();
            let g = uniform_params(y.channels(), 0.5).unwrap();
            let z = quantize(&y, &g, NAIVE_SYMBOL_BOUND).unwrap();
            let plain = decode_latent(ctx.autoencoder(), &dequantize(&z, &g).unwrap())
                .unwrap()
                .crop(img.height(), img.width())
                .unwrap();
            let p = crate::evaluation::psnr(img, &plain).unwrap();
            assert_eq!(r.psnr, p);
            assert_eq!(r.backbone_calls, 0);
        }
    }

    #[test]
    fn finer_steps_cost_more_bits() {
        let ctx = context(2);
        let images = test_images(2, 64, 6);
        // Untrained latents are small, hence the fine steps.
        let steps = [0.01, 0.003, 0.001, 0.0003, 0.0001];
        let records = naive_sweep(&ctx, &images, &steps, &[0, 2], None).unwrap();
        for (id, _) in &images {
            for t in [0, 2] {
                let bpp: Vec<f64> = records
                    .iter()
                    .filter(|r| &r.image_id == id && r.timestep == t)
                    .map(|r| r.bpp)
                    .collect();
                assert_eq!(bpp.len(), steps.len());
                assert!(bpp.windows(2).all(|w| w[0] < w[1]), "{bpp:?}");
            }
        }
        assert!(records.iter().all(|r| r.backbone_calls == r.timestep));
        let err = naive_sweep(&ctx, &images, &[1.0], &[ctx.schedule().t_max() + 1], None);
        assert!(err.is_err());
    }
}
