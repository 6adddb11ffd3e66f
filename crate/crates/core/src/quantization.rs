//! Per-channel adaptive quantization.
//!
//! Channel `c` is transformed by `z = exp(s_c) * y + b_c` and rounded half away
//! from zero into `[-K, K]`. The inverse is `(z - b_c) / exp(s_c)`. A larger
//! scale means finer steps and more bits.

use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::Rng;

use crate::autoencoder::LatentTensor;
use crate::error::{invalid, Error, Result};

/// Default symbol bound `K`; symbols live in `[-255, 255]`.
pub const DEFAULT_SYMBOL_BOUND: i32 = 255;

/// Side information `gamma`: log-scale and offset per latent channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub log_scale: Vec<f32>,
    pub offset: Vec<f32>,
}

impl QuantParams {
    pub fn new(log_scale: Vec<f32>, offset: Vec<f32>) -> Result<Self> {
        if log_scale.len() != offset.len() {
            return Err(invalid("log_scale and offset lengths differ"));
        }
        if log_scale.iter().chain(&offset).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quantization parameters".into()));
        }
        if log_scale.iter().any(|s| !s.exp().is_normal()) {
            return Err(invalid("quantization scale underflows or overflows"));
        }
        Ok(Self { log_scale, offset })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            log_scale: vec![0.0; channels],
            offset: vec![0.0; channels],
        }
    }

    /// Uniform step `1/scale` on every channel.
    pub fn uniform(channels: usize, scale: f32) -> Result<Self> {
        Self::new(vec![scale.ln(); channels], vec![0.0; channels])
    }

    pub fn channels(&self) -> usize {
        self.log_scale.len()
    }

    /// Effective scale `a_c = exp(s_c)`.
    pub fn scale(&self, channel: usize) -> f32 {
        self.log_scale[channel].exp()
    }

    pub fn mean_scale(&self) -> f32 {
        (0..self.channels()).map(|c| self.scale(c)).sum::<f32>() / self.channels() as f32
    }

    /// `(1, C)` tensors for the batched paths.
    pub fn to_tensors(&self, device: &Device) -> Result<(Tensor, Tensor)> {
        let c = self.channels();
        Ok((
            Tensor::from_vec(self.log_scale.clone(), (1, c), device)?,
            Tensor::from_vec(self.offset.clone(), (1, c), device)?,
        ))
    }
}

/// Integer symbols `z_hat` with their shape and bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub symbols: Vec<i32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bound: i32,
    /// Elements that hit the `[-K, K]` clamp during quantization.
    pub clamped: usize,
}

impl QuantizedLatent {
    pub fn new(symbols: Vec<i32>, channels: usize, height: usize, width: usize, bound: i32) -> Result<Self> {
        if symbols.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} symbols for a {channels}x{height}x{width} latent",
                symbols.len()
            )));
        }
        if let Some(s) = symbols.iter().find(|s| s.abs() > bound) {
            return Err(invalid(format!("symbol {s} outside [-{bound}, {bound}]")));
        }
        Ok(Self {
            symbols,
            channels,
            height,
            width,
            bound,
            clamped: 0,
        })
    }

    pub fn plane(&self, channel: usize) -> &[i32] {
        let n = self.height * self.width;
        &self.symbols[channel * n..(channel + 1) * n]
    }

    /// Symbols as an `(1, C, h, w)` f32 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.symbols.iter().map(|&s| s as f32).collect();
        Ok(Tensor::from_vec(v, (1, self.channels, self.height, self.width), device)?)
    }
}

fn check_channels(y: &LatentTensor, gamma: &QuantParams) -> Result<()> {
    if y.channels() != gamma.channels() {
        return Err(Error::ShapeMismatch(format!(
            "latent has {} channels, parameters cover {}",
            y.channels(),
            gamma.channels()
        )));
    }
    Ok(())
}

/// `z = clamp(round(exp(s_c) * y + b_c), -K, K)`.
pub fn quantize(y: &LatentTensor, gamma: &QuantParams, bound: i32) -> Result<QuantizedLatent> {
    check_channels(y, gamma)?;
    let values = y.to_vec()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent".into()));
    }
    let plane = y.height() * y.width();
    let mut clamped = 0;
    let k = bound as f32;
    let symbols = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            let z = v * gamma.scale(c) + gamma.offset[c];
            let r = z.round();
            if r.abs() > k {
                clamped += 1;
            }
            r.clamp(-k, k) as i32
        })
        .collect();
    Ok(QuantizedLatent {
        symbols,
        channels: y.channels(),
        height: y.height(),
        width: y.width(),
        bound,
        clamped,
    })
}

/// `y = (z - b_c) / exp(s_c)`.
pub fn dequantize(z: &QuantizedLatent, gamma: &QuantParams) -> Result<LatentTensor> {
    if z.channels != gamma.channels() {
        return Err(Error::ShapeMismatch(format!(
            "symbols have {} channels, parameters cover {}",
            z.channels,
            gamma.channels()
        )));
    }
    let plane = z.height * z.width;
    let values = z
        .symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let c = i / plane;
            (s as f32 - gamma.offset[c]) / gamma.scale(c)
        })
        .collect();
    LatentTensor::from_vec(values, z.channels, z.height, z.width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelaxMode {
    /// Hard rounding forward, identity gradient through the rounding.
    StraightThrough,
    /// Uniform noise in `[-0.5, 0.5)` added in the symbol domain.
    AdditiveNoise,
}

impl FromStr for RelaxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight_through" => Ok(RelaxMode::StraightThrough),
            "additive_noise" => Ok(RelaxMode::AdditiveNoise),
            other => Err(invalid(format!("unknown relaxation mode {other:?}"))),
        }
    }
}

/// Output of [`quantize_relaxed`].
#[derive(Debug, Clone)]
pub struct Relaxed {
    /// Latent-domain value fed to the decoder path.
    pub latent: Tensor,
    /// Symbol-domain proxy fed to the entropy model.
    pub symbols: Tensor,
}

fn broadcast_params(log_scale: &Tensor, offset: &Tensor) -> Result<(Tensor, Tensor)> {
    let a = log_scale.exp()?.unsqueeze(2)?.unsqueeze(3)?;
    let b = offset.unsqueeze(2)?.unsqueeze(3)?;
    Ok((a, b))
}

/// Hard symbols for a `(B, C, h, w)` batch with `(B, C)` parameters, as floats.
pub fn quantize_tensor(y: &Tensor, log_scale: &Tensor, offset: &Tensor, bound: i32) -> Result<Tensor> {
    let (a, b) = broadcast_params(log_scale, offset)?;
    let z = y.broadcast_mul(&a)?.broadcast_add(&b)?;
    let k = bound as f64;
    Ok(z.round()?.clamp(-k, k)?)
}

/// Batched inverse transform of float symbols.
pub fn dequantize_tensor(symbols: &Tensor, log_scale: &Tensor, offset: &Tensor) -> Result<Tensor> {
    let (a, b) = broadcast_params(log_scale, offset)?;
    Ok(symbols.broadcast_sub(&b)?.broadcast_div(&a)?)
}

/// Training-time relaxation of `dequantize(quantize(y))`.
///
/// Straight-through returns exactly the hard result in the forward pass and
/// treats rounding as identity for gradients. Additive noise returns
/// `y + u / a_c` with `u ~ U[-0.5, 0.5)` drawn from `rng`.
pub fn quantize_relaxed<R: Rng>(
    y: &Tensor,
    log_scale: &Tensor,
    offset: &Tensor,
    mode: RelaxMode,
    bound: i32,
    rng: &mut R,
) -> Result<Relaxed> {
    let (a, b) = broadcast_params(log_scale, offset)?;
    let z = y.broadcast_mul(&a)?.broadcast_add(&b)?;
    match mode {
        RelaxMode::StraightThrough => {
            let k = bound as f64;
            let rounded = z.detach().round()?.clamp(-k, k)?;
            let hard = rounded.broadcast_sub(&b)?.broadcast_div(&a)?;
            let z_ste = (&z + (&rounded - &z)?.detach())?;
            let soft = z_ste.broadcast_sub(&b)?.broadcast_div(&a)?;
            let latent = (hard.detach() + (&soft - soft.detach())?)?;
            let symbols = (&rounded + (&z - z.detach())?)?;
            Ok(Relaxed { latent, symbols })
        }
        RelaxMode::AdditiveNoise => {
            let n = z.elem_count();
            let noise: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let noise = Tensor::from_vec(noise, z.dims(), z.device())?.to_dtype(z.dtype())?;
            let symbols = (&z + &noise)?;
            let latent = y.add(&noise.broadcast_div(&a)?)?;
            Ok(Relaxed { latent, symbols })
        }
    }
}

/// Largest round-trip error on `channel` when no clamping occurs.
pub fn round_trip_bound(gamma: &QuantParams, channel: usize) -> f32 {
    0.5 / gamma.scale(channel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn latent(values: Vec<f32>, c: usize, h: usize, w: usize) -> LatentTensor {
        LatentTensor::from_vec(values, c, h, w).unwrap()
    }

    #[test]
    fn identity_transform_rounds() {
        let y = latent(vec![0.4, 0.5, -0.5, 1.49, -2.6, 2.5], 1, 2, 3);
        let z = quantize(&y, &QuantParams::identity(1), 255).unwrap();
        assert_eq!(z.symbols, vec![0, 1, -1, 1, -3, 3]);
    }

    #[test]
    fn worked_arithmetic() {
        let gamma = QuantParams::new(vec![4f32.ln()], vec![0.0]).unwrap();
        let y = latent(vec![0.7], 1, 1, 1);
        let z = quantize(&y, &gamma, 255).unwrap();
        assert_eq!(z.symbols, vec![3]);
        let back = dequantize(&z, &gamma).unwrap().to_vec().unwrap();
        assert!((back[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn clamping_is_counted() {
        let y = latent(vec![1000.0, -1000.0, 3.0], 1, 1, 3);
        let z = quantize(&y, &QuantParams::identity(1), 255).unwrap();
        assert_eq!(z.symbols, vec![255, -255, 3]);
        assert_eq!(z.clamped, 2);
    }

    #[test]
    fn golden_rounding_vectors() {
        // Ties go away from zero on every platform.
        let gamma = QuantParams::new(vec![0.0, 0.0], vec![0.25, -0.5]).unwrap();
        let y = latent(vec![0.25, -0.75, 2.25, -2.75, 0.0, 1.0, 2.0, -1.0], 2, 2, 2);
        let z = quantize(&y, &gamma, 255).unwrap();
        assert_eq!(z.symbols, vec![1, -1, 3, -3, -1, 1, 2, -2]);
    }

    #[test]
    fn affine_inverse_without_rounding() {
        let gamma = QuantParams::new(vec![0.7, -1.2], vec![3.0, -0.25]).unwrap();
        let (ls, off) = gamma.to_tensors(&Device::Cpu).unwrap();
        let y = Tensor::new(&[[[[0.3f32, -1.7]], [[2.5, 0.01]]]], &Device::Cpu).unwrap();
        let (a, b) = broadcast_params(&ls, &off).unwrap();
        let z = y.broadcast_mul(&a).unwrap().broadcast_add(&b).unwrap();
        let back = dequantize_tensor(&z, &ls, &off).unwrap();
        let d = (back - &y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn error_bound_shrinks_with_scale() {
        let mut last = f32::INFINITY;
        for a in [0.5f32, 1.0, 2.0, 8.0] {
            let gamma = QuantParams::uniform(1, a).unwrap();
            let b = round_trip_bound(&gamma, 0);
            assert!(b < last);
            last = b;
        }
    }

    #[test]
    fn rejects_bad_params_and_modes() {
        assert!(QuantParams::new(vec![f32::NAN], vec![0.0]).is_err());
        assert!(QuantParams::new(vec![0.0], vec![]).is_err());
        assert!(QuantParams::new(vec![200.0], vec![0.0]).is_err());
        assert!("gumbel".parse::<RelaxMode>().is_err());
        assert_eq!("additive_noise".parse::<RelaxMode>().unwrap(), RelaxMode::AdditiveNoise);
        let y = latent(vec![0.0; 8], 2, 2, 2);
        assert!(quantize(&y, &QuantParams::identity(3), 255).is_err());
    }

    #[test]
    fn straight_through_forward_is_hard_path_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w) = (4, 6, 5);
        let values: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-4.0f32..4.0)).collect();
        let gamma = QuantParams::new(vec![0.3, -0.8, 1.7, 0.0], vec![0.2, -0.4, 0.0, 1.3]).unwrap();
        let y = latent(values, c, h, w);
        let hard = dequantize(&quantize(&y, &gamma, 255).unwrap(), &gamma).unwrap().to_vec().unwrap();
        let (ls, off) = gamma.to_tensors(&Device::Cpu).unwrap();
        let r = quantize_relaxed(&y.batched().unwrap(), &ls, &off, RelaxMode::StraightThrough, 255, &mut rng).unwrap();
        let soft = r.latent.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            hard.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            soft.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let sym = r.symbols.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let z = quantize(&y, &gamma, 255).unwrap();
        assert!(sym.iter().zip(&z.symbols).all(|(a, &b)| *a == b as f32));
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 4, 3, 3), &Device::Cpu).unwrap()).unwrap();
        let ls = Tensor::new(&[[0.5f32, 0.1, -0.3, 1.0], [0.0, 0.2, 0.4, 0.6]], &Device::Cpu).unwrap();
        let off = ls.zeros_like().unwrap();
        let r = quantize_relaxed(y.as_tensor(), &ls, &off, RelaxMode::StraightThrough, 255, &mut rng).unwrap();
        let g = r.latent.mean_all().unwrap().backward().unwrap();
        let gy = g.get(y.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let expected = 1.0 / 72.0;
        assert!(gy.iter().all(|v| (v - expected).abs() < 1e-7));
    }

    #[test]
    fn additive_noise_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = Tensor::randn(0f32, 1.0, (3, 4, 8, 8), &Device::Cpu).unwrap();
        let ls = Tensor::new(&[[1.0f32, 0.0, -1.0, 2.0]], &Device::Cpu)
            .unwrap()
            .broadcast_as((3, 4))
            .unwrap()
            .contiguous()
            .unwrap();
        let off = ls.zeros_like().unwrap();
        let r = quantize_relaxed(&y, &ls, &off, RelaxMode::AdditiveNoise, 255, &mut rng).unwrap();
        let diff = (r.latent - &y).unwrap().abs().unwrap();
        for (c, ls) in [1.0f32, 0.0, -1.0, 2.0].iter().enumerate() {
            let m = diff.narrow(1, c, 1).unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(m <= 0.5 / ls.exp() + 1e-6);
        }
    }

    proptest! {
        #[test]
        fn round_trip_error_bounded(
            values in proptest::collection::vec(-20.0f32..20.0, 16),
            ls in proptest::collection::vec(-2.0f32..3.0, 4),
            off in proptest::collection::vec(-2.0f32..2.0, 4),
        ) {
            let gamma = QuantParams::new(ls, off).unwrap();
            let y = latent(values.clone(), 4, 2, 2);
            let z = quantize(&y, &gamma, 255).unwrap();
            prop_assume!(z.clamped == 0);
            let back = dequantize(&z, &gamma).unwrap().to_vec().unwrap();
            for (i, (a, b)) in values.iter().zip(&back).enumerate() {
                let bound = round_trip_bound(&gamma, i / 4);
                prop_assert!((a - b).abs() <= bound * (1.0 + 1e-5) + 1e-6);
            }
        }
    }
}
