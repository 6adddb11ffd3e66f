//! Joint prediction of the quantization parameters and the denoising timestep
//! from a latent and the rate-distortion weight.

use candle_core::{Device, Module, Tensor, D};
use candle_nn::{Conv2d, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::autoencoder::LatentTensor;
use crate::error::{invalid, Error, Result};
use crate::nn::{conv3x3, conv_params, scale_var, set_var, silu};
use crate::quantization::QuantParams;

/// The rate-distortion weights the codec is trained for.
pub const TRAINED_LAMBDAS: [f64; 4] = [1.0, 5.0, 10.0, 20.0];

/// Keeps the timestep sigmoid strictly inside `(0, 1)` when it saturates in f32.
const TAU_MARGIN: f64 = 1e-6;

/// Rate-distortion trade-off weight `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCondition(f64);

impl RateCondition {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive and finite, got {lambda}")));
        }
        Ok(Self(lambda))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Position in [`TRAINED_LAMBDAS`], if this is one of them.
    pub fn trained_index(self) -> Option<u8> {
        TRAINED_LAMBDAS.iter().position(|&l| l == self.0).map(|i| i as u8)
    }

    pub fn is_extrapolation(self) -> bool {
        self.trained_index().is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub latent_channels: usize,
    /// Width of each (stride-2 conv, conv) pair.
    pub widths: Vec<usize>,
    /// Initial log-scale written into the output bias.
    pub init_log_scale: f32,
    /// Initial normalized timestep written into the output bias.
    pub init_tau: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![64, 128, 256, 512],
            init_log_scale: 0.7,
            init_tau: 0.03,
        }
    }
}

impl EstimatorConfig {
    pub fn output_count(&self) -> usize {
        2 * self.latent_channels + 1
    }
}

/// Batched, differentiable estimator output.
#[derive(Debug, Clone)]
pub struct EstimatorOutput {
    /// `(B, C)`
    pub log_scale: Tensor,
    /// `(B, C)`
    pub offset: Tensor,
    /// `(B,)`, strictly inside `(0, 1)`.
    pub tau: Tensor,
    /// `(B, 2C + 1)` pooled values before the timestep sigmoid.
    pub raw: Tensor,
}

/// Per-image prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedParams {
    pub gamma: QuantParams,
    pub tau: f64,
}

impl PredictedParams {
    pub fn parameter_count(&self) -> usize {
        2 * self.gamma.channels() + 1
    }
}

/// Fully convolutional estimator: alternating stride-2 and stride-1 3x3
/// convolutions with SiLU between layers, a final convolution down to
/// `2C + 1` channels, then global mean pooling.
pub struct ParamEstimator {
    config: EstimatorConfig,
    layers: Vec<Conv2d>,
    head: Conv2d,
    params: usize,
}

impl ParamEstimator {
    pub fn new(config: EstimatorConfig, vb: VarBuilder) -> Result<Self> {
        if config.widths.is_empty() {
            return Err(Error::Config("estimator needs at least one stage".into()));
        }
        let mut layers = Vec::new();
        let mut prev = config.latent_channels + 1;
        for (i, &w) in config.widths.iter().enumerate() {
            layers.push(conv3x3(prev, w, 2, vb.pp(format!("down{i}")))?);
            layers.push(conv3x3(w, w, 1, vb.pp(format!("conv{i}")))?);
            prev = w;
        }
        let head = conv3x3(prev, config.output_count(), 1, vb.pp("head"))?;
        let params = layers.iter().map(conv_params).sum::<usize>() + conv_params(&head);
        Ok(Self {
            config,
            layers,
            head,
            params,
        })
    }

    /// Writes the configured starting point into the output head: small
    /// weights and biases giving `log_scale = init_log_scale`, zero offsets
    /// and `tau = init_tau`.
    pub fn init_head(&self, varmap: &VarMap) -> Result<()> {
        scale_var(varmap, "head.weight", 0.1)?;
        let c = self.config.latent_channels;
        let mut bias = vec![self.config.init_log_scale; c];
        bias.extend(std::iter::repeat_n(0.0, c));
        let t = self.config.init_tau;
        bias.push((t / (1.0 - t)).ln() as f32);
        let n = bias.len();
        set_var(varmap, "head.bias", &Tensor::from_vec(bias, n, &Device::Cpu)?)
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params
    }

    /// `latents`: `(B, C, h, w)`; `lambdas`: one weight per batch element.
    pub fn forward(&self, latents: &Tensor, lambdas: &[RateCondition]) -> Result<EstimatorOutput> {
        let (b, c, h, w) = latents.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "estimator expects {} channels, got {c}",
                self.config.latent_channels
            )));
        }
        if lambdas.len() != b {
            return Err(Error::ShapeMismatch(format!("{} lambdas for a batch of {b}", lambdas.len())));
        }
        let logs: Vec<f32> = lambdas.iter().map(|l| l.value().ln() as f32).collect();
        let plane = Tensor::from_vec(logs, (b, 1, 1, 1), latents.device())?
            .to_dtype(latents.dtype())?
            .broadcast_as((b, 1, h, w))?;
        let mut x = Tensor::cat(&[latents, &plane], 1)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = silu(&x)?;
            }
            x = layer.forward(&x)?;
        }
        let out = self.head.forward(&silu(&x)?)?;
        let raw = out.mean(D::Minus1)?.mean(D::Minus1)?;
        let log_scale = raw.narrow(1, 0, c)?;
        let offset = raw.narrow(1, c, c)?;
        let tau = candle_nn::ops::sigmoid(&raw.narrow(1, 2 * c, 1)?.squeeze(1)?)?.clamp(TAU_MARGIN, 1.0 - TAU_MARGIN)?;
        Ok(EstimatorOutput {
            log_scale,
            offset,
            tau,
            raw,
        })
    }

    pub fn predict_params(&self, y: &LatentTensor, lambda: RateCondition) -> Result<PredictedParams> {
        let out = self.forward(&y.batched()?, &[lambda])?;
        let gamma = QuantParams::new(
            out.log_scale.squeeze(0)?.to_vec1::<f32>()?,
            out.offset.squeeze(0)?.to_vec1::<f32>()?,
        )?;
        let tau = out.tau.to_vec1::<f32>()?[0] as f64;
        Ok(PredictedParams { gamma, tau })
    }
}

/// `t = clamp(round(tau * t_max), 1, t_max)`.
pub fn timestep_to_discrete(tau: f64, t_max: usize) -> usize {
    let t = (tau * t_max as f64).round();
    if t.is_nan() || t < 1.0 {
        1
    } else {
        (t as usize).min(t_max)
    }
}
