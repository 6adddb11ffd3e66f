//! Image and latent containers plus the variational autoencoder that maps
//! between them.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, VarBuilder};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{conv3x3, conv_params, silu, upsample_to, ResBlock};

/// An RGB image with values in `[0, 1]`, stored channel-first as `(3, H, W)`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    /// Wraps a `(3, H, W)` tensor, clamping values into `[0, 1]`.
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::ShapeMismatch(format!("expected (3, H, W) image, got {dims:?}")));
        }
        let data = data.to_dtype(DType::F32)?.clamp(0f32, 1f32)?;
        Ok(Self { data })
    }

    pub fn from_vec(values: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if values.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a 3x{height}x{width} image",
                values.len()
            )));
        }
        Self::new(Tensor::from_vec(values, (3, height, width), &Device::Cpu)?)
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut values = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                values[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::from_vec(values, h, w)
    }

    /// Quantizes to 8 bits with round-half-away-from-zero.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let (h, w) = (self.height(), self.width());
        let values = self.to_vec()?;
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    (values[c * h * w + y * w + x] * 255.0).round().clamp(0.0, 255.0) as u8
                });
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        Ok(img)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()?.save(path)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Channel-first values.
    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.data.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Reflect-pads the bottom and right edges up to the next multiple of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        if (ph, pw) == (h, w) {
            return Ok(self.clone());
        }
        let src = self.to_vec()?;
        let mut out = vec![0f32; 3 * ph * pw];
        for c in 0..3 {
            for y in 0..ph {
                let sy = reflect_index(y, h);
                for x in 0..pw {
                    let sx = reflect_index(x, w);
                    out[c * ph * pw + y * pw + x] = src[c * h * w + sy * w + sx];
                }
            }
        }
        Self::from_vec(out, ph, pw)
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height() || width > self.width() {
            return Err(invalid("crop larger than image"));
        }
        Self::new(self.data.narrow(1, 0, height)?.narrow(2, 0, width)?.contiguous()?)
    }
}

/// Mirror index for positions past the end; edge-replicates when too small to mirror.
fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        return i;
    }
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// A `(C, h, w)` latent.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    data: Tensor,
}

impl LatentTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::ShapeMismatch(format!("expected (C, h, w) latent, got {:?}", data.dims())));
        }
        Ok(Self {
            data: data.to_dtype(DType::F32)?,
        })
    }

    pub fn from_vec(values: Vec<f32>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} latent",
                values.len()
            )));
        }
        Self::new(Tensor::from_vec(values, (channels, height, width), &Device::Cpu)?)
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.data.flatten_all()?.to_vec1::<f32>()?)
    }

    /// `(1, C, h, w)` view for batched networks.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }
}

/// Maps images to latents and back. Implemented by the toy VAE; a
/// foundation-model VAE adapter would implement the same interface.
pub trait LatentAutoencoder: Send + Sync {
    fn latent_channels(&self) -> usize;

    /// Spatial downsampling factor `f`.
    fn factor(&self) -> usize;

    /// `(B, 3, H, W)` in `[0, 1]` to the deterministic `(B, C, H/f, W/f)` latent.
    fn encode(&self, images: &Tensor) -> Result<Tensor>;

    /// Latent to unclamped images; differentiable.
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;

    fn parameter_count(&self) -> usize;
}

pub fn encode_image<A: LatentAutoencoder + ?Sized>(vae: &A, x: &ImageTensor) -> Result<LatentTensor> {
    let f = vae.factor();
    if x.height() % f != 0 || x.width() % f != 0 {
        return Err(invalid(format!(
            "image {}x{} not divisible by factor {f}; pad first",
            x.height(),
            x.width()
        )));
    }
    let y = vae.encode(&x.tensor().unsqueeze(0)?)?;
    LatentTensor::new(y.squeeze(0)?)
}

/// Decodes and clamps into `[0, 1]`.
pub fn decode_latent<A: LatentAutoencoder + ?Sized>(vae: &A, y0: &LatentTensor) -> Result<ImageTensor> {
    if y0.channels() != vae.latent_channels() {
        return Err(Error::ShapeMismatch(format!(
            "latent has {} channels, autoencoder expects {}",
            y0.channels(),
            vae.latent_channels()
        )));
    }
    let x = vae.decode(&y0.batched()?)?;
    ImageTensor::new(x.squeeze(0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Width after each stride-2 stage; the factor is `2^channels.len()`.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 24, 32],
            latent_channels: 4,
        }
    }
}

impl VaeConfig {
    pub fn factor(&self) -> usize {
        1 << self.channels.len()
    }
}

/// Small convolutional VAE: stride-2 residual stages down to `f = 2^stages`.
pub struct ToyVae {
    config: VaeConfig,
    enc_in: Conv2d,
    enc_stages: Vec<(Conv2d, ResBlock)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: ResBlock,
    dec_stages: Vec<(Conv2d, Option<ResBlock>)>,
    dec_out: Conv2d,
    latent_scale: f64,
    params: usize,
}

impl ToyVae {
    pub fn new(config: VaeConfig, vb: VarBuilder) -> Result<Self> {
        let ch = &config.channels;
        if ch.is_empty() {
            return Err(Error::Config("vae needs at least one stage".into()));
        }
        let c = config.latent_channels;
        let enc_in = conv3x3(3, ch[0], 1, vb.pp("enc_in"))?;
        let mut enc_stages = Vec::new();
        let mut prev = ch[0];
        for (i, &w) in ch.iter().enumerate() {
            let down = conv3x3(prev, w, 2, vb.pp(format!("enc{i}.down")))?;
            let res = ResBlock::new(w, vb.pp(format!("enc{i}.res")))?;
            enc_stages.push((down, res));
            prev = w;
        }
        let enc_out = conv3x3(prev, 2 * c, 1, vb.pp("enc_out"))?;

        let top = *ch.last().unwrap_or(&ch[0]);
        let dec_in = conv3x3(c, top, 1, vb.pp("dec_in"))?;
        let dec_res = ResBlock::new(top, vb.pp("dec_res"))?;
        let mut dec_stages = Vec::new();
        let mut prev = top;
        for i in (0..ch.len()).rev() {
            let w = if i == 0 { ch[0] } else { ch[i - 1] };
            let conv = conv3x3(prev, w, 1, vb.pp(format!("dec{i}.conv")))?;
            let res = if i > 0 {
                Some(ResBlock::new(w, vb.pp(format!("dec{i}.res")))?)
            } else {
                None
            };
            dec_stages.push((conv, res));
            prev = w;
        }
        let dec_out = conv3x3(prev, 3, 1, vb.pp("dec_out"))?;

        let params = conv_params(&enc_in)
            + enc_stages
                .iter()
                .map(|(d, r)| conv_params(d) + r.parameter_count())
                .sum::<usize>()
            + conv_params(&enc_out)
            + conv_params(&dec_in)
            + dec_res.parameter_count()
            + dec_stages
                .iter()
                .map(|(c, r)| conv_params(c) + r.as_ref().map_or(0, |r| r.parameter_count()))
                .sum::<usize>()
            + conv_params(&dec_out);
        Ok(Self {
            config,
            enc_in,
            enc_stages,
            enc_out,
            dec_in,
            dec_res,
            dec_stages,
            dec_out,
            latent_scale: 1.0,
            params,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    /// Multiplier applied to posterior means so latents have roughly unit variance.
    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, scale: f64) {
        self.latent_scale = scale;
    }

    /// Posterior `(mean, log-variance)` in unscaled latent units.
    pub fn posterior(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.enc_in.forward(&images.affine(2.0, -1.0)?)?;
        for (down, res) in &self.enc_stages {
            h = res.forward(&down.forward(&silu(&h)?)?)?;
        }
        let out = self.enc_out.forward(&silu(&h)?)?;
        let c = self.config.latent_channels;
        let mean = out.narrow(1, 0, c)?;
        let logvar = out.narrow(1, c, c)?.clamp(-30f32, 20f32)?;
        Ok((mean, logvar))
    }

    /// Decodes unscaled latents.
    pub fn decode_unscaled(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = latents.dims4()?;
        let mut x = self.dec_res.forward(&self.dec_in.forward(latents)?)?;
        let mut size = (h, w);
        for (conv, res) in &self.dec_stages {
            size = (size.0 * 2, size.1 * 2);
            x = conv.forward(&silu(&upsample_to(&x, size.0, size.1)?)?)?;
            if let Some(res) = res {
                x = res.forward(&x)?;
            }
        }
        let out = self.dec_out.forward(&silu(&x)?)?;
        Ok(out.affine(0.5, 0.5)?)
    }
}

impl LatentAutoencoder for ToyVae {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn factor(&self) -> usize {
        self.config.factor()
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.posterior(images)?;
        Ok(mean.affine(self.latent_scale, 0.0)?)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        self.decode_unscaled(&latents.affine(1.0 / self.latent_scale, 0.0)?)
    }

    fn parameter_count(&self) -> usize {
        self.params
    }
}
