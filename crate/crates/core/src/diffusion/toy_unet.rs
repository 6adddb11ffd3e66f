use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use super::DenoiserBackbone;
use crate::error::{Error, Result};
use crate::nn::{conv3x3, conv_params, linear_params, silu, upsample_to, CondResBlock};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub mid_width: usize,
    /// Size of the sinusoidal timestep features (even).
    pub time_features: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_width: 48,
            mid_width: 64,
            time_features: 32,
            embed_dim: 64,
        }
    }
}

/// A two-level timestep-conditioned UNet predicting the noise in a latent.
///
/// Timesteps are embedded with sinusoids evaluated at the raw (possibly
/// fractional) timestep, so the network is differentiable in `t`.
pub struct ToyDenoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    res_hi: CondResBlock,
    down: Conv2d,
    res_lo: CondResBlock,
    merge: Conv2d,
    res_out: CondResBlock,
    conv_out: Conv2d,
    params: usize,
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, vb: VarBuilder) -> Result<Self> {
        if config.time_features % 2 != 0 {
            return Err(Error::Config("time_features must be even".into()));
        }
        let (c, w0, w1, e) = (
            config.latent_channels,
            config.base_width,
            config.mid_width,
            config.embed_dim,
        );
        let mut s = Self {
            config,
            schedule,
            time_in: candle_nn::linear(config.time_features, e, vb.pp("time_in"))?,
            time_out: candle_nn::linear(e, e, vb.pp("time_out"))?,
            conv_in: conv3x3(c, w0, 1, vb.pp("conv_in"))?,
            res_hi: CondResBlock::new(w0, e, vb.pp("res_hi"))?,
            down: conv3x3(w0, w1, 2, vb.pp("down"))?,
            res_lo: CondResBlock::new(w1, e, vb.pp("res_lo"))?,
            merge: conv3x3(w0 + w1, w0, 1, vb.pp("merge"))?,
            res_out: CondResBlock::new(w0, e, vb.pp("res_out"))?,
            conv_out: conv3x3(w0, c, 1, vb.pp("conv_out"))?,
            params: 0,
        };
        s.params = linear_params(&s.time_in)
            + linear_params(&s.time_out)
            + [&s.conv_in, &s.down, &s.merge, &s.conv_out]
                .iter()
                .map(|c| conv_params(c))
                .sum::<usize>()
            + [&s.res_hi, &s.res_lo, &s.res_out]
                .iter()
                .map(|r| r.parameter_count())
                .sum::<usize>();
        Ok(s)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn embed(&self, timesteps: &Tensor, dtype: DType, device: &Device) -> Result<Tensor> {
        let half = self.config.time_features / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp())
            .collect();
        let freqs = Tensor::from_vec(freqs, (1, half), device)?.to_dtype(dtype)?;
        let args = timesteps.to_dtype(dtype)?.unsqueeze(1)?.broadcast_mul(&freqs)?;
        let feats = Tensor::cat(&[args.sin()?, args.cos()?], D::Minus1)?;
        let h = silu(&self.time_in.forward(&feats)?)?;
        Ok(self.time_out.forward(&h)?)
    }
}

impl DenoiserBackbone for ToyDenoiser {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, latent: &Tensor, timesteps: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = latent.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "denoiser expects {} channels, got {c}",
                self.config.latent_channels
            )));
        }
        if timesteps.dims() != [b] {
            return Err(Error::ShapeMismatch(format!(
                "expected {b} timesteps, got {:?}",
                timesteps.dims()
            )));
        }
        let emb = self.embed(timesteps, latent.dtype(), latent.device())?;
        let x0 = self.conv_in.forward(latent)?;
        let hi = self.res_hi.forward(&x0, &emb)?;
        let lo = self.down.forward(&silu(&hi)?)?;
        let lo = self.res_lo.forward(&lo, &emb)?;
        let up = upsample_to(&lo, h, w)?;
        let merged = self.merge.forward(&Tensor::cat(&[&hi, &up], 1)?)?;
        let out = self.res_out.forward(&merged, &emb)?;
        Ok(self.conv_out.forward(&silu(&out)?)?)
    }

    fn parameter_count(&self) -> usize {
        self.params
    }
}
