//! Mean-scale hyperprior over the quantized latent, with an optional
//! channel-autoregressive context model.

use std::collections::HashMap;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, VarBuilder};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cdf::QuantizedCdf;
use super::gaussian::{bits, likelihood_tensor, SIGMA_MIN};
use super::range_coder::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::nn::{conv3x3, conv_params, silu, upsample_to};
use crate::quantization::QuantizedLatent;

/// Symbol bound of the hyper-latent.
pub const HYPER_BOUND: i32 = 255;

/// Grid for distribution parameters before CDF construction. Snapping keeps
/// encoder and decoder tables identical even if the network outputs differ
/// in the last bits, and lets tables be shared between elements.
const MEAN_STEPS: f64 = 64.0;
const SCALE_LEVELS: f64 = 160.0;
const SCALE_MAX: f64 = 256.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub hidden: usize,
    /// Condition each latent channel on the previously coded ones.
    pub context: bool,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hyper_channels: 8,
            hidden: 48,
            context: false,
        }
    }
}

fn strided(n: usize) -> usize {
    (n.max(1) - 1) / 2 + 1
}

impl EntropyConfig {
    /// Spatial size of the hyper-latent for an `h x w` latent.
    pub fn hyper_shape(&self, height: usize, width: usize) -> (usize, usize) {
        (strided(strided(height)), strided(strided(width)))
    }
}

/// Per-sample rate of a training batch, in bits.
#[derive(Debug, Clone)]
pub struct RateEstimate {
    /// `(B,)`
    pub main_bits: Tensor,
    /// `(B,)`
    pub hyper_bits: Tensor,
}

impl RateEstimate {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.main_bits + &self.hyper_bits)?)
    }
}

/// Entropy-coded payloads of one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLatent {
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
    /// `-log2 P` of hyper and main symbols under the model, each likelihood
    /// floored as in training.
    pub bits_estimate: f64,
    /// `-log2 P` under the quantized tables the coder used; the ideal code length.
    pub table_bits: f64,
}

impl CompressedLatent {
    pub fn coded_bits(&self) -> usize {
        8 * (self.hyper.len() + self.main.len())
    }
}

pub struct EntropyModel {
    config: EntropyConfig,
    analysis: [Conv2d; 3],
    synthesis: [Conv2d; 3],
    prior_mean: Tensor,
    prior_scale: Tensor,
    context: Vec<Conv2d>,
    params: usize,
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // relu(x) + log(1 + exp(-|x|))
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

fn scale_from_raw(raw: &Tensor) -> Result<Tensor> {
    Ok(softplus(raw)?.affine(1.0, SIGMA_MIN)?)
}

impl EntropyModel {
    pub fn new(config: EntropyConfig, vb: VarBuilder) -> Result<Self> {
        let (c, n, ch) = (config.latent_channels, config.hidden, config.hyper_channels);
        if c == 0 || n == 0 || ch == 0 {
            return Err(Error::Config("entropy model widths must be positive".into()));
        }
        let analysis = [
            conv3x3(c, n, 1, vb.pp("analysis0"))?,
            conv3x3(n, n, 2, vb.pp("analysis1"))?,
            conv3x3(n, ch, 2, vb.pp("analysis2"))?,
        ];
        let synthesis = [
            conv3x3(ch, n, 1, vb.pp("synthesis0"))?,
            conv3x3(n, n, 1, vb.pp("synthesis1"))?,
            conv3x3(n, 2 * c, 1, vb.pp("synthesis2"))?,
        ];
        let prior_mean = vb.get(ch, "prior.mean")?;
        let prior_scale = vb.get(ch, "prior.scale")?;
        let context = if config.context {
            (1..c)
                .map(|k| conv3x3(k, 2, 1, vb.pp(format!("context{k}"))))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let params = analysis.iter().chain(&synthesis).chain(&context).map(conv_params).sum::<usize>() + 2 * ch;
        Ok(Self {
            config,
            analysis,
            synthesis,
            prior_mean,
            prior_scale,
            context,
            params,
        })
    }

    pub fn config(&self) -> &EntropyConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params
    }

    /// `(B, C, h, w)` symbols (as reals) to the unquantized hyper-latent.
    pub fn hyper_analysis(&self, z: &Tensor) -> Result<Tensor> {
        let x = self.analysis[0].forward(z)?;
        let x = self.analysis[1].forward(&silu(&x)?)?;
        Ok(self.analysis[2].forward(&silu(&x)?)?)
    }

    /// Hyper-latent to `(B, 2C, h, w)`: means, then unconstrained scales.
    pub fn hyper_synthesis(&self, h_hat: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let x = self.synthesis[0].forward(h_hat)?;
        let x = upsample_to(&silu(&x)?, strided(height), strided(width))?;
        let x = self.synthesis[1].forward(&x)?;
        let x = upsample_to(&silu(&x)?, height, width)?;
        Ok(self.synthesis[2].forward(&x)?)
    }

    /// Mean and scale of channel `c`, `(B, 1, h, w)` each. `prefix` holds
    /// channels `0..c` and is required when the context model is enabled.
    fn channel_params(&self, raw: &Tensor, prefix: Option<&Tensor>, c: usize) -> Result<(Tensor, Tensor)> {
        let cc = self.config.latent_channels;
        let mut mu = raw.narrow(1, c, 1)?;
        let mut s = raw.narrow(1, cc + c, 1)?;
        if c > 0 && !self.context.is_empty() {
            let prefix = prefix.ok_or_else(|| Error::ShapeMismatch("context model needs decoded channels".into()))?;
            let delta = self.context[c - 1].forward(prefix)?;
            mu = (mu + delta.narrow(1, 0, 1)?)?;
            s = (s + delta.narrow(1, 1, 1)?)?;
        }
        Ok((mu, scale_from_raw(&s)?))
    }

    fn all_params(&self, raw: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut mus = Vec::new();
        let mut sigmas = Vec::new();
        for c in 0..self.config.latent_channels {
            let prefix = if c > 0 { Some(z.narrow(1, 0, c)?) } else { None };
            let (m, s) = self.channel_params(raw, prefix.as_ref(), c)?;
            mus.push(m);
            sigmas.push(s);
        }
        Ok((Tensor::cat(&mus, 1)?, Tensor::cat(&sigmas, 1)?))
    }

    fn prior(&self) -> Result<(Tensor, Tensor)> {
        Ok((self.prior_mean.clone(), scale_from_raw(&self.prior_scale)?))
    }

    /// Differentiable rate of symbol-domain proxies `z_tilde` `(B, C, h, w)`.
    /// The hyper-latent is relaxed with uniform noise drawn from `rng`.
    pub fn rate<R: Rng>(&self, z_tilde: &Tensor, rng: &mut R) -> Result<RateEstimate> {
        let (_, c, height, width) = z_tilde.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "entropy model expects {} channels, got {c}",
                self.config.latent_channels
            )));
        }
        let h = self.hyper_analysis(z_tilde)?;
        let noise: Vec<f32> = (0..h.elem_count()).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let h_tilde = (&h + Tensor::from_vec(noise, h.dims(), h.device())?.to_dtype(h.dtype())?)?;
        let (pm, ps) = self.prior()?;
        let shape = h_tilde.dims();
        let pm = pm.reshape((1, shape[1], 1, 1))?.broadcast_as(shape)?;
        let ps = ps.reshape((1, shape[1], 1, 1))?.broadcast_as(shape)?;
        let hyper_lik = likelihood_tensor(&h_tilde, &pm, &ps)?;
        let raw = self.hyper_synthesis(&h_tilde, height, width)?;
        let (mu, sigma) = self.all_params(&raw, z_tilde)?;
        let main_lik = likelihood_tensor(z_tilde, &mu, &sigma)?;
        let per_sample = |lik: &Tensor| -> Result<Tensor> {
            Ok(lik.log()?.flatten_from(1)?.sum(D::Minus1)?.affine(-1.0 / std::f64::consts::LN_2, 0.0)?)
        };
        Ok(RateEstimate {
            main_bits: per_sample(&main_lik)?,
            hyper_bits: per_sample(&hyper_lik)?,
        })
    }

    /// Total differentiable bits of a batch (sum over samples).
    pub fn total_bits<R: Rng>(&self, z_tilde: &Tensor, rng: &mut R) -> Result<Tensor> {
        let r = self.rate(z_tilde, rng)?;
        Ok(r.total()?.sum_all()?)
    }

    fn hyper_symbols(&self, z: &Tensor) -> Result<(Vec<i32>, Tensor)> {
        let h = self.hyper_analysis(z)?;
        let k = HYPER_BOUND as f64;
        let h_hat = h.round()?.clamp(-k, k)?;
        let symbols = h_hat.flatten_all()?.to_vec1::<f32>()?.iter().map(|&v| v as i32).collect();
        Ok((symbols, h_hat))
    }

    fn prior_values(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let (m, s) = self.prior()?;
        Ok((m.to_dtype(DType::F32)?.to_vec1()?, s.to_dtype(DType::F32)?.to_vec1()?))
    }

    fn prefix_tensor(&self, symbols: &[i32], c: usize, height: usize, width: usize) -> Result<Tensor> {
        let n = c * height * width;
        let v: Vec<f32> = symbols[..n].iter().map(|&s| s as f32).collect();
        Ok(Tensor::from_vec(v, (1, c, height, width), &Device::Cpu)?.to_dtype(self.prior_mean.dtype())?)
    }

    /// Mean and scale of channel `c` as flat vectors for the coder.
    fn coder_params(&self, raw: &Tensor, decoded: &[i32], c: usize, height: usize, width: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let prefix = if c > 0 && self.config.context {
            Some(self.prefix_tensor(decoded, c, height, width)?)
        } else {
            None
        };
        let (m, s) = self.channel_params(raw, prefix.as_ref(), c)?;
        Ok((
            m.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
            s.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        ))
    }

    pub fn compress(&self, z: &QuantizedLatent) -> Result<CompressedLatent> {
        let (c, height, width, bound) = (z.channels, z.height, z.width, z.bound);
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "entropy model expects {} channels, got {c}",
                self.config.latent_channels
            )));
        }
        let zt = z.to_tensor(&Device::Cpu)?.to_dtype(self.prior_mean.dtype())?;
        let (hyper_symbols, h_hat) = self.hyper_symbols(&zt)?;
        let (hh, hw) = self.config.hyper_shape(height, width);
        let plane = hh * hw;
        let (pm, ps) = self.prior_values()?;
        let mut tables = CdfCache::new(HYPER_BOUND);
        let (mut estimate, mut table_bits) = (0.0, 0.0);
        let mut enc = RangeEncoder::new();
        for (i, &s) in hyper_symbols.iter().enumerate() {
            let ch = i / plane;
            let (m, sg) = (pm[ch] as f64, ps[ch] as f64);
            estimate += bits(s, m, sg, HYPER_BOUND);
            let (index, cdf) = ((s + HYPER_BOUND) as usize, tables.get(m, sg)?);
            table_bits += cdf.cost(index);
            enc.encode(index, cdf)?;
        }
        let hyper = enc.finish();

        let raw = self.hyper_synthesis(&h_hat, height, width)?;
        let mut tables = CdfCache::new(bound);
        let mut enc = RangeEncoder::new();
        let n = height * width;
        for ch in 0..c {
            let (mu, sigma) = self.coder_params(&raw, &z.symbols, ch, height, width)?;
            for (i, &s) in z.plane(ch).iter().enumerate() {
                let (m, sg) = (mu[i] as f64, sigma[i] as f64);
                estimate += bits(s, m, sg, bound);
                let (index, cdf) = ((s + bound) as usize, tables.get(m, sg)?);
                table_bits += cdf.cost(index);
                enc.encode(index, cdf)?;
            }
            debug_assert_eq!(mu.len(), n);
        }
        Ok(CompressedLatent {
            hyper,
            main: enc.finish(),
            bits_estimate: estimate,
            table_bits,
        })
    }

    pub fn decompress(
        &self,
        hyper: &[u8],
        main: &[u8],
        height: usize,
        width: usize,
        bound: i32,
    ) -> Result<QuantizedLatent> {
        let c = self.config.latent_channels;
        let (hh, hw) = self.config.hyper_shape(height, width);
        let ch_count = self.config.hyper_channels;
        let (pm, ps) = self.prior_values()?;
        let mut tables = CdfCache::new(HYPER_BOUND);
        let mut dec = RangeDecoder::new(hyper)?;
        let mut hyper_symbols = Vec::with_capacity(ch_count * hh * hw);
        for ch in 0..ch_count {
            let cdf = tables.get(pm[ch] as f64, ps[ch] as f64)?;
            for _ in 0..hh * hw {
                hyper_symbols.push(dec.decode(cdf)? as f32 - HYPER_BOUND as f32);
            }
        }
        let h_hat = Tensor::from_vec(hyper_symbols, (1, ch_count, hh, hw), &Device::Cpu)?
            .to_dtype(self.prior_mean.dtype())?;
        let raw = self.hyper_synthesis(&h_hat, height, width)?;

        let mut tables = CdfCache::new(bound);
        let mut dec = RangeDecoder::new(main)?;
        let mut symbols = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            let (mu, sigma) = self.coder_params(&raw, &symbols, ch, height, width)?;
            for (m, sg) in mu.iter().zip(&sigma) {
                let s = dec.decode(tables.get(*m as f64, *sg as f64)?)?;
                symbols.push(s as i32 - bound);
            }
        }
        QuantizedLatent::new(symbols, c, height, width, bound)
    }
}

/// Tables keyed by snapped `(mu, sigma)`.
struct CdfCache {
    bound: i32,
    tables: HashMap<(i64, i32), QuantizedCdf>,
}

impl CdfCache {
    fn new(bound: i32) -> Self {
        Self {
            bound,
            tables: HashMap::new(),
        }
    }

    fn get(&mut self, mu: f64, sigma: f64) -> Result<&QuantizedCdf> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite("entropy model parameters".into()));
        }
        let b = self.bound as f64;
        let mk = (mu.clamp(-2.0 * b, 2.0 * b) * MEAN_STEPS).round() as i64;
        let step = (SCALE_MAX / SIGMA_MIN).ln() / SCALE_LEVELS;
        let sk = ((sigma.max(SIGMA_MIN) / SIGMA_MIN).ln() / step).round().min(SCALE_LEVELS) as i32;
        let bound = self.bound;
        if !self.tables.contains_key(&(mk, sk)) {
            let cdf = QuantizedCdf::gaussian(mk as f64 / MEAN_STEPS, SIGMA_MIN * (sk as f64 * step).exp(), bound)?;
            self.tables.insert((mk, sk), cdf);
        }
        Ok(&self.tables[&(mk, sk)])
    }
}

/// Codes `z` with `model`; hyper side information first.
pub fn compress_latent(z: &QuantizedLatent, model: &EntropyModel) -> Result<CompressedLatent> {
    model.compress(z)
}

pub fn decompress_latent(
    hyper: &[u8],
    main: &[u8],
    height: usize,
    width: usize,
    bound: i32,
    model: &EntropyModel,
) -> Result<QuantizedLatent> {
    model.decompress(hyper, main, height, width, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{parameter_count, reseed, set_var, trainable};
    use candle_nn::VarMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(context: bool, seed: u64) -> (VarMap, EntropyModel) {
        let (vm, vb) = trainable(DType::F32, &Device::Cpu);
        let cfg = EntropyConfig {
            context,
            hidden: 16,
            ..Default::default()
        };
        let m = EntropyModel::new(cfg, vb).unwrap();
        reseed(&vm, seed).unwrap();
        (vm, m)
    }

    fn random_latent(seed: u64, h: usize, w: usize, spread: f64) -> QuantizedLatent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symbols = (0..4 * h * w)
            .map(|_| {
                let g: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum();
                (g * spread).round().clamp(-255.0, 255.0) as i32
            })
            .collect();
        QuantizedLatent::new(symbols, 4, h, w, 255).unwrap()
    }

    #[test]
    fn hyper_latent_shape() {
        let cfg = EntropyConfig::default();
        assert_eq!(cfg.hyper_shape(32, 32), (8, 8));
        assert_eq!(cfg.hyper_shape(24, 13), (6, 4));
        assert_eq!(cfg.hyper_shape(1, 1), (1, 1));
    }

    #[test]
    fn round_trip_with_and_without_context() {
        for context in [false, true] {
            let (vm, m) = model(context, 5);
            assert_eq!(m.parameter_count(), parameter_count(&vm));
            let z = random_latent(1, 12, 9, 2.0);
            let coded = compress_latent(&z, &m).unwrap();
            let back = decompress_latent(&coded.hyper, &coded.main, 12, 9, 255, &m).unwrap();
            assert_eq!(back.symbols, z.symbols);
        }
    }

    #[test]
    fn extreme_symbols_round_trip() {
        let (_, m) = model(true, 6);
        for fill in [-255, 255] {
            let z = QuantizedLatent::new(vec![fill; 4 * 8 * 8], 4, 8, 8, 255).unwrap();
            let coded = m.compress(&z).unwrap();
            assert_eq!(m.decompress(&coded.hyper, &coded.main, 8, 8, 255).unwrap().symbols, z.symbols);
        }
        let mut alternating = vec![0; 4 * 8 * 8];
        for (i, s) in alternating.iter_mut().enumerate() {
            *s = if i % 2 == 0 { -255 } else { 255 };
        }
        let z = QuantizedLatent::new(alternating, 4, 8, 8, 255).unwrap();
        let coded = m.compress(&z).unwrap();
        assert_eq!(m.decompress(&coded.hyper, &coded.main, 8, 8, 255).unwrap().symbols, z.symbols);
    }

    #[test]
    fn coded_length_tracks_estimate() {
        let (_, m) = model(false, 7);
        let z = random_latent(2, 24, 24, 1.5);
        let coded = m.compress(&z).unwrap();
        let actual = coded.coded_bits() as f64;
        assert!(
            (actual - coded.bits_estimate).abs() <= 0.01 * coded.bits_estimate + 64.0 * 8.0,
            "{actual} vs {}",
            coded.bits_estimate
        );
        // Two flushed range coders add at most a few bytes over the table cost.
        assert!(actual >= coded.table_bits - 1.0 && actual <= coded.table_bits + 2.0 * 64.0, "{actual} vs {}", coded.table_bits);
    }

    #[test]
    fn concentrated_model_codes_zeros_cheaply() {
        let (vm, m) = model(false, 8);
        let last = "synthesis2";
        set_var(&vm, &format!("{last}.weight"), &Tensor::zeros((8, 16, 3, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let mut bias = vec![0f32; 4];
        bias.extend([-30f32; 4]);
        set_var(&vm, &format!("{last}.bias"), &Tensor::new(bias, &Device::Cpu).unwrap()).unwrap();
        set_var(&vm, "prior.scale", &Tensor::new(vec![-30f32; 8], &Device::Cpu).unwrap()).unwrap();
        // Hyper-analysis of zeros with zero biases is exactly zero.
        let z = QuantizedLatent::new(vec![0; 4 * 32 * 32], 4, 32, 32, 255).unwrap();
        let coded = m.compress(&z).unwrap();
        // Every symbol sits at the table peak: about 0.011 bits each.
        let elements = (4 * 32 * 32 + 8 * 8 * 8) as f64;
        let bound_bits = elements * (65536.0f64 / (65536.0 - 510.0)).log2() + 64.0;
        assert!((coded.coded_bits() as f64) <= bound_bits, "{}", coded.coded_bits());
        assert!(coded.bits_estimate < 1e-3);
        assert_eq!(m.decompress(&coded.hyper, &coded.main, 32, 32, 255).unwrap().symbols, z.symbols);
    }

    #[test]
    fn training_rate_is_finite_and_differentiable() {
        let (vm, m) = model(true, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(0f32, 2.0, (2, 4, 8, 8), &Device::Cpu).unwrap();
        let r = m.rate(&z, &mut rng).unwrap();
        assert_eq!(r.main_bits.dims(), &[2]);
        let total = r.total().unwrap().sum_all().unwrap();
        assert!(total.to_scalar::<f32>().unwrap().is_finite());
        let grads = total.backward().unwrap();
        for var in vm.all_vars() {
            let g = grads.get(var.as_tensor()).expect("gradient for every variable");
            let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(norm > 0.0);
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let (_, m) = model(false, 10);
        let z = QuantizedLatent::new(vec![0; 3 * 4 * 4], 3, 4, 4, 255).unwrap();
        assert!(m.compress(&z).is_err());
    }
}
