//! End-to-end encoder and decoder.
//!
//! Encoding: pad, `y = E(x)`, `(gamma, tau) = P(y, lambda)`, `z = Q(y, gamma)`,
//! entropy code `z` and write the container. Decoding: parse, entropy decode,
//! `y_t = Q^-1(z, gamma)`, run `t` DDIM steps, `x = D(y_0)`, crop.

use std::path::Path;

use candle_core::Device;

use crate::autoencoder::{decode_latent, encode_image, ImageTensor, LatentAutoencoder, LatentTensor};
use crate::checkpoint::CodecModels;
use crate::diffusion::{denoise_from, rescale_for_timestep, CountingBackbone, DenoiserBackbone};
use crate::entropy::container::{self, CompressedBitstream, StreamHeader, CUSTOM_LAMBDA, FLAG_CONTEXT};
use crate::entropy::EntropyModel;
use crate::error::{invalid, Error, Result};
use crate::param_estimator::{timestep_to_discrete, ParamEstimator, RateCondition};
use crate::quantization::{dequantize, quantize, QuantParams, QuantizedLatent, DEFAULT_SYMBOL_BOUND};
use crate::schedule::NoiseSchedule;

/// Header flag: the dequantized latent is scaled by `sqrt(alpha_bar_t)` before denoising.
pub const FLAG_RESCALE: u8 = 2;

/// Largest image accepted by default, in pixels (2048 x 2048).
pub const DEFAULT_MAX_PIXELS: usize = 2048 * 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecOptions {
    pub symbol_bound: i32,
    pub rescale_input: bool,
    pub max_pixels: usize,
}

impl Default for CodecOptions {
    fn default() -> Self {
        Self {
            symbol_bound: DEFAULT_SYMBOL_BOUND,
            rescale_input: false,
            max_pixels: DEFAULT_MAX_PIXELS,
        }
    }
}

/// Encoder-side result before entropy coding.
#[derive(Debug, Clone)]
pub struct AnalyzedImage {
    pub height: usize,
    pub width: usize,
    pub lambda: RateCondition,
    pub gamma: QuantParams,
    pub tau: f64,
    pub timestep: usize,
    pub symbols: QuantizedLatent,
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub stream: CompressedBitstream,
    pub bytes: Vec<u8>,
    pub tau: f64,
    /// `-log2 P` under the entropy model, hyper and main.
    pub bits_estimate: f64,
    /// Latent elements that saturated at the symbol bound.
    pub clamped: usize,
}

impl EncodeOutput {
    /// Bits per pixel of the serialized stream.
    pub fn bpp(&self) -> f64 {
        self.bytes.len() as f64 * 8.0 / (self.stream.header.height as f64 * self.stream.header.width as f64)
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub image: ImageTensor,
    pub timestep: usize,
    pub backbone_calls: usize,
    pub symbols: QuantizedLatent,
}

pub struct CodecContext {
    vae: Box<dyn LatentAutoencoder>,
    backbone: CountingBackbone<Box<dyn DenoiserBackbone>>,
    estimator: ParamEstimator,
    entropy: EntropyModel,
    model_id: u32,
    options: CodecOptions,
}

impl CodecContext {
    pub fn new(
        vae: Box<dyn LatentAutoencoder>,
        backbone: Box<dyn DenoiserBackbone>,
        estimator: ParamEstimator,
        entropy: EntropyModel,
        model_id: u32,
        options: CodecOptions,
    ) -> Result<Self> {
        let c = vae.latent_channels();
        for (name, other) in [
            ("denoiser", backbone.latent_channels()),
            ("parameter estimator", estimator.config().latent_channels),
            ("entropy model", entropy.config().latent_channels),
        ] {
            if other != c {
                return Err(Error::ComponentMismatch(format!(
                    "{name} has {other} latent channels, autoencoder has {c}"
                )));
            }
        }
        if vae.factor() > u8::MAX as usize || c > u8::MAX as usize {
            return Err(Error::ComponentMismatch("factor and channel count must fit in a byte".into()));
        }
        if backbone.schedule().t_max() > u16::MAX as usize {
            return Err(Error::ComponentMismatch("T_max must fit in 16 bits".into()));
        }
        if !(1..=(u16::MAX as i32 / 2)).contains(&options.symbol_bound) {
            return Err(invalid(format!("symbol bound {} out of range", options.symbol_bound)));
        }
        Ok(Self {
            vae,
            backbone: CountingBackbone::new(backbone),
            estimator,
            entropy,
            model_id,
            options,
        })
    }

    pub fn from_models(models: CodecModels, options: CodecOptions) -> Result<Self> {
        Self::new(
            Box::new(models.vae),
            Box::new(models.denoiser),
            models.estimator,
            models.entropy,
            models.model_id,
            options,
        )
    }

    pub fn load(dir: &Path, options: CodecOptions) -> Result<Self> {
        Self::from_models(CodecModels::load(dir)?, options)
    }

    pub fn options(&self) -> &CodecOptions {
        &self.options
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.backbone.schedule()
    }

    pub fn model_id(&self) -> u32 {
        self.model_id
    }

    pub fn autoencoder(&self) -> &dyn LatentAutoencoder {
        self.vae.as_ref()
    }

    pub fn backbone(&self) -> &dyn DenoiserBackbone {
        &self.backbone
    }

    pub fn estimator(&self) -> &ParamEstimator {
        &self.estimator
    }

    pub fn entropy_model(&self) -> &EntropyModel {
        &self.entropy
    }

    /// Denoiser evaluations since the context was created.
    pub fn backbone_calls(&self) -> usize {
        self.backbone.calls()
    }

    /// Parameters of the modules trained for compression (estimator and entropy model).
    pub fn trained_parameter_count(&self) -> usize {
        self.estimator.parameter_count() + self.entropy.parameter_count()
    }

    /// Parameters of the autoencoder and denoiser.
    pub fn backbone_parameter_count(&self) -> usize {
        self.vae.parameter_count() + self.backbone.parameter_count()
    }

    fn check_size(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(invalid("image has no pixels"));
        }
        let pixels = height.saturating_mul(width);
        if pixels > self.options.max_pixels {
            return Err(invalid(format!(
                "{width}x{height} image exceeds the {} pixel limit; crop or downscale it first",
                self.options.max_pixels
            )));
        }
        if height > u32::MAX as usize || width > u32::MAX as usize {
            return Err(invalid("image dimensions exceed 32 bits"));
        }
        Ok(())
    }

    /// Latent of `image` after reflect-padding to the autoencoder factor.
    pub fn latent(&self, image: &ImageTensor) -> Result<LatentTensor> {
        self.check_size(image.height(), image.width())?;
        let padded = image.pad_to_multiple(self.vae.factor())?;
        encode_image(self.vae.as_ref(), &padded)
    }

    /// Everything up to (not including) entropy coding.
    pub fn analyze(&self, image: &ImageTensor, lambda: RateCondition, force_timestep: Option<usize>) -> Result<AnalyzedImage> {
        let y = self.latent(image)?;
        let predicted = self.estimator.predict_params(&y, lambda)?;
        let t_max = self.schedule().t_max();
        let timestep = match force_timestep {
            Some(t) if t > t_max => return Err(invalid(format!("timestep {t} exceeds T_max {t_max}"))),
            Some(t) => t,
            None => timestep_to_discrete(predicted.tau, t_max),
        };
        let symbols = quantize(&y, &predicted.gamma, self.options.symbol_bound)?;
        Ok(AnalyzedImage {
            height: image.height(),
            width: image.width(),
            lambda,
            gamma: predicted.gamma,
            tau: predicted.tau,
            timestep,
            symbols,
        })
    }

    fn header_for(&self, a: &AnalyzedImage) -> StreamHeader {
        let mut flags = 0;
        if self.entropy.config().context {
            flags |= FLAG_CONTEXT;
        }
        if self.options.rescale_input {
            flags |= FLAG_RESCALE;
        }
        StreamHeader {
            flags,
            height: a.height as u32,
            width: a.width as u32,
            channels: self.vae.latent_channels() as u8,
            factor: self.vae.factor() as u8,
            schedule: self.schedule().params(),
            timestep: a.timestep as u16,
            lambda_index: a.lambda.trained_index().unwrap_or(CUSTOM_LAMBDA),
            symbol_bound: self.options.symbol_bound as u16,
            model_id: self.model_id,
            gamma: a.gamma.clone(),
        }
    }

    /// Entropy codes an analyzed image into a serialized stream.
    pub fn entropy_encode(&self, a: &AnalyzedImage) -> Result<EncodeOutput> {
        let coded = self.entropy.compress(&a.symbols)?;
        let stream = CompressedBitstream {
            header: self.header_for(a),
            hyper: coded.hyper,
            main: coded.main,
        };
        let bytes = container::serialize(&stream)?;
        Ok(EncodeOutput {
            stream,
            bytes,
            tau: a.tau,
            bits_estimate: coded.bits_estimate,
            clamped: a.symbols.clamped,
        })
    }

    pub fn encode(&self, image: &ImageTensor, lambda: RateCondition) -> Result<EncodeOutput> {
        self.entropy_encode(&self.analyze(image, lambda, None)?)
    }

    /// Encodes with a caller-chosen timestep instead of the predicted one.
    pub fn encode_with_timestep(&self, image: &ImageTensor, lambda: RateCondition, timestep: usize) -> Result<EncodeOutput> {
        self.entropy_encode(&self.analyze(image, lambda, Some(timestep))?)
    }

    /// Checks that a header was produced by components compatible with this context.
    pub fn check_header(&self, h: &StreamHeader) -> Result<()> {
        let mismatch = |what: &str| Error::ComponentMismatch(format!("stream {what} does not match the loaded checkpoint"));
        if h.channels as usize != self.vae.latent_channels() {
            return Err(mismatch("latent channel count"));
        }
        if h.factor as usize != self.vae.factor() {
            return Err(mismatch("downsampling factor"));
        }
        if h.schedule != self.schedule().params() {
            return Err(mismatch("noise schedule"));
        }
        if h.model_id != self.model_id {
            return Err(mismatch("model id"));
        }
        if h.context_model() != self.entropy.config().context {
            return Err(mismatch("context-model flag"));
        }
        if h.timestep as usize > self.schedule().t_max() {
            return Err(invalid(format!("timestep {} exceeds T_max", h.timestep)));
        }
        if h.symbol_bound == 0 || h.symbol_bound as i32 > u16::MAX as i32 / 2 {
            return Err(invalid(format!("symbol bound {} out of range", h.symbol_bound)));
        }
        self.check_size(h.height as usize, h.width as usize)
    }

    /// Reconstruction from decoded symbols: dequantize, denoise `timestep`
    /// steps, decode and crop. Returns the image and the denoiser call count.
    pub fn reconstruct(
        &self,
        symbols: &QuantizedLatent,
        gamma: &QuantParams,
        timestep: usize,
        rescale: bool,
        height: usize,
        width: usize,
    ) -> Result<(ImageTensor, usize)> {
        let y_t = dequantize(symbols, gamma)?.batched()?;
        let y_t = if rescale {
            rescale_for_timestep(&y_t, timestep, self.schedule())?
        } else {
            y_t
        };
        let before = self.backbone.calls();
        let y0 = denoise_from(&y_t, timestep, &self.backbone)?;
        let calls = self.backbone.calls() - before;
        let image = decode_latent(self.vae.as_ref(), &LatentTensor::new(y0.squeeze(0)?)?)?;
        Ok((image.crop(height, width)?, calls))
    }

    pub fn decode_stream(&self, stream: &CompressedBitstream) -> Result<DecodeOutput> {
        let h = &stream.header;
        self.check_header(h)?;
        let (lh, lw) = h.latent_shape();
        let symbols = self
            .entropy
            .decompress(&stream.hyper, &stream.main, lh, lw, h.symbol_bound as i32)?;
        let timestep = h.timestep as usize;
        let (image, backbone_calls) = self.reconstruct(
            &symbols,
            &h.gamma,
            timestep,
            h.flags & FLAG_RESCALE != 0,
            h.height as usize,
            h.width as usize,
        )?;
        Ok(DecodeOutput {
            image,
            timestep,
            backbone_calls,
            symbols,
        })
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<DecodeOutput> {
        self.decode_stream(&container::parse(bytes)?)
    }
}

/// The CPU is the only supported device.
pub fn select_device(name: &str) -> Result<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => Err(invalid(format!("unsupported device {other:?}; only \"cpu\" is available"))),
    }
}
