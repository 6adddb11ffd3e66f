//! Small convolutional building blocks shared by the toy networks.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn conv3x3(in_c: usize, out_c: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(in_c, out_c, 3, cfg, vb)?)
}

pub fn conv_params(conv: &Conv2d) -> usize {
    conv.weight().elem_count() + conv.bias().map_or(0, |b| b.elem_count())
}

pub fn linear_params(linear: &Linear) -> usize {
    linear.weight().elem_count() + linear.bias().map_or(0, |b| b.elem_count())
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// Pre-activation residual block: `x + conv(silu(conv(silu(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv1: conv3x3(channels, channels, 1, vb.pp("conv1"))?,
            conv2: conv3x3(channels, channels, 1, vb.pp("conv2"))?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        conv_params(&self.conv1) + conv_params(&self.conv2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(x)?)?;
        let h = self.conv2.forward(&silu(&h)?)?;
        Ok((x + h)?)
    }
}

/// Residual block whose first convolution is shifted by a per-channel
/// projection of a conditioning embedding.
#[derive(Debug, Clone)]
pub struct CondResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
}

impl CondResBlock {
    pub fn new(channels: usize, emb_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv1: conv3x3(channels, channels, 1, vb.pp("conv1"))?,
            conv2: conv3x3(channels, channels, 1, vb.pp("conv2"))?,
            proj: candle_nn::linear(emb_dim, channels, vb.pp("proj"))?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        conv_params(&self.conv1) + conv_params(&self.conv2) + linear_params(&self.proj)
    }

    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(x)?)?;
        let shift = self.proj.forward(&silu(emb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&shift)?;
        let h = self.conv2.forward(&silu(&h)?)?;
        Ok((x + h)?)
    }
}

/// Nearest-neighbour 2x upsampling cropped to `(h, w)`.
pub fn upsample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    let up = x.upsample_nearest2d(xh * 2, xw * 2)?;
    Ok(up.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

/// Re-initializes every variable from a seeded stream, visiting names in
/// sorted order. Weights use the uniform fan-in bound `1/sqrt(fan_in)`,
/// biases start at zero.
pub fn reseed(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().map_err(|_| poisoned())?;
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let numel: usize = dims.iter().product();
        let values: Vec<f32> = if dims.len() >= 2 {
            let fan_in = numel / dims[0];
            let bound = 1.0 / (fan_in as f32).sqrt();
            (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
        } else {
            vec![0.0; numel]
        };
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Overwrites a named variable; the new value must have the stored shape.
pub fn set_var(varmap: &VarMap, name: &str, value: &Tensor) -> Result<()> {
    let data = varmap.data().lock().map_err(|_| poisoned())?;
    let var = data
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("no variable named {name}")))?;
    var.set(&value.to_dtype(var.dtype())?)?;
    Ok(())
}

/// Multiplies a named variable in place.
pub fn scale_var(varmap: &VarMap, name: &str, factor: f64) -> Result<()> {
    let data = varmap.data().lock().map_err(|_| poisoned())?;
    let var = data
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("no variable named {name}")))?;
    let scaled = var.as_tensor().affine(factor, 0.0)?;
    var.set(&scaled)?;
    Ok(())
}

pub fn parameter_count(varmap: &VarMap) -> usize {
    varmap.all_vars().iter().map(|v| v.elem_count()).sum()
}

/// A fresh variable map plus builder for constructing a trainable module.
pub fn trainable(dtype: DType, device: &Device) -> (VarMap, VarBuilder<'static>) {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, dtype, device);
    (varmap, vb)
}

fn poisoned() -> Error {
    Error::Checkpoint("variable map lock poisoned".into())
}
