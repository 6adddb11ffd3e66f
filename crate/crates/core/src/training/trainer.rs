//! Training stages: autoencoder and denoiser pre-training (toy mode), latent
//! scale calibration, and rate-distortion training of the parameter
//! estimator and entropy model against the frozen backbone.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::config::{BackboneMode, DenoiserStage, TrainConfig, VaeStage};
use super::corpus::Corpus;
use super::loss::{rd_loss, squared_error};
use crate::autoencoder::{LatentAutoencoder, ToyVae};
use crate::checkpoint::{frozen_builder, load_into_varmap, load_tensors, read_manifest, Component, ModelSet};
use crate::diffusion::{denoise_loop_invocations, one_step_decode, rescale_for_tau, CountingBackbone, DenoiserBackbone, ToyDenoiser};
use crate::error::{Error, Result};
use crate::param_estimator::RateCondition;
use crate::quantization::{quantize_relaxed, RelaxMode, DEFAULT_SYMBOL_BOUND};

/// Images are encoded in chunks of this many crops when building latent sets.
const ENCODE_CHUNK: usize = 16;

/// Line-delimited JSON metrics sink; a no-op when no path is given.
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn disabled() -> Self {
        Self { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self {
            out: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn record<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, record).map_err(|e| Error::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

/// A pre-training loss sample.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: &'static str,
    pub step: usize,
    pub loss: f64,
}

/// Metrics of one codec training step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub stage: &'static str,
    pub step: usize,
    pub lambda: f64,
    pub loss: f64,
    /// Estimated bits per pixel, main plus hyper.
    pub bpp: f64,
    pub mse: f64,
    /// Batch mean of the predicted normalized timestep.
    pub tau: f64,
    /// Batch mean of the effective quantizer scales `exp(s_c)`.
    pub mean_scale: f64,
    pub skipped: bool,
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn sample_indices<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<Tensor> {
    let idx: Vec<u32> = (0..k).map(|_| rng.random_range(0..n) as u32).collect();
    Ok(Tensor::from_vec(idx, k, &Device::Cpu)?)
}

/// Variables of a map as `(name, var)` sorted by name.
pub fn named_vars(varmap: &VarMap) -> Result<Vec<(String, Var)>> {
    let data = varmap
        .data()
        .lock()
        .map_err(|_| Error::Checkpoint("variable map lock poisoned".into()))?;
    let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(vars)
}

/// Trains the autoencoder on random crops with reconstruction MSE plus a
/// weighted KL term on a reparameterized posterior sample. Returns the loss
/// of every step.
pub fn pretrain_vae<R: Rng>(
    set: &ModelSet,
    corpus: &Corpus,
    stage: &VaeStage,
    rng: &mut R,
    log: &mut MetricsLog,
) -> Result<Vec<f64>> {
    let mut opt = adam(set.vae_vars.all_vars(), stage.learning_rate)?;
    let mut losses = Vec::with_capacity(stage.steps);
    for step in 0..stage.steps {
        let x = corpus.batch(stage.batch_size, stage.crop, rng)?;
        let (mean, logvar) = set.vae.posterior(&x)?;
        let eps = randn(mean.dims(), rng)?;
        let z = mean.add(&logvar.affine(0.5, 0.0)?.exp()?.mul(&eps)?)?;
        let x_hat = set.vae.decode_unscaled(&z)?;
        let mse = x.sub(&x_hat)?.sqr()?.mean_all()?;
        let kl = mean.sqr()?.add(&logvar.exp()?)?.sub(&logvar)?.affine(0.5, -0.5)?.mean_all()?;
        let loss = mse.add(&kl.affine(stage.kl_weight, 0.0)?)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            warn!("vae step {step}: non-finite loss, skipped");
            continue;
        }
        opt.backward_step(&loss)?;
        losses.push(value);
        log.record(&StageRecord {
            stage: "vae",
            step,
            loss: value,
        })?;
    }
    Ok(losses)
}

/// `n` fixed random crops, `(n, 3, crop, crop)`.
pub fn fixed_crops<R: Rng>(corpus: &Corpus, n: usize, crop: usize, rng: &mut R) -> Result<Tensor> {
    corpus.batch(n, crop, rng)
}

/// Encodes a stack of images in chunks, detached from any graph.
pub fn encode_stack<A: LatentAutoencoder + ?Sized>(vae: &A, images: &Tensor) -> Result<Tensor> {
    let n = images.dim(0)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = ENCODE_CHUNK.min(n - start);
        parts.push(vae.encode(&images.narrow(0, start, len)?)?.detach());
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Sets the latent scale so that encoded crops have unit standard deviation.
pub fn calibrate_latent_scale(set: &mut ModelSet, images: &Tensor) -> Result<f64> {
    set.set_latent_scale(1.0);
    let y = encode_stack(&set.vae, images)?.to_dtype(DType::F64)?;
    let mean = scalar(&y.mean_all()?)?;
    let var = scalar(&y.affine(1.0, -mean)?.sqr()?.mean_all()?)?;
    let std = var.sqrt();
    if !(std.is_finite() && std > 1e-8) {
        return Err(Error::NonFinite(format!("latent standard deviation {std}")));
    }
    let scale = 1.0 / std;
    set.set_latent_scale(scale);
    Ok(scale)
}

/// Trains the denoiser to predict the noise in `sqrt(ab) y + sqrt(1 - ab) eps`
/// with `t` uniform in `1..=max_timestep`, over a fixed set of latents.
pub fn pretrain_denoiser<R: Rng>(
    set: &ModelSet,
    latents: &Tensor,
    stage: &DenoiserStage,
    rng: &mut R,
    log: &mut MetricsLog,
) -> Result<Vec<f64>> {
    let schedule = set.schedule.clone();
    let mut opt = adam(set.denoiser_vars.all_vars(), stage.learning_rate)?;
    let n = latents.dim(0)?;
    let mut losses = Vec::with_capacity(stage.steps);
    for step in 0..stage.steps {
        let b = stage.batch_size;
        let y = latents.index_select(&sample_indices(n, b, rng)?, 0)?;
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=stage.max_timestep)).collect();
        let ab: Vec<f32> = ts.iter().map(|&t| schedule.alpha_bar(t) as f32).collect();
        let ab = Tensor::from_vec(ab, (b, 1, 1, 1), &Device::Cpu)?;
        let eps = randn(y.dims(), rng)?;
        let x_t = y
            .broadcast_mul(&ab.sqrt()?)?
            .add(&eps.broadcast_mul(&ab.affine(-1.0, 1.0)?.sqrt()?)?)?;
        let t = Tensor::from_vec(ts.iter().map(|&t| t as f32).collect::<Vec<_>>(), b, &Device::Cpu)?;
        let pred = set.denoiser.predict(&x_t, &t)?;
        let loss = pred.sub(&eps)?.sqr()?.mean_all()?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            warn!("denoiser step {step}: non-finite loss, skipped");
            continue;
        }
        opt.backward_step(&loss)?;
        losses.push(value);
        log.record(&StageRecord {
            stage: "denoiser",
            step,
            loss: value,
        })?;
    }
    Ok(losses)
}

/// The differentiable encode, relax, one-step decode path over frozen
/// autoencoder and denoiser copies.
struct Pipeline<'a> {
    set: &'a ModelSet,
    vae: ToyVae,
    backbone: CountingBackbone<ToyDenoiser>,
    rescale_input: bool,
    distortion_scale: f64,
}

impl Pipeline<'_> {
    fn forward<R: Rng>(&self, x: &Tensor, y: &Tensor, lambda: f64, rng: &mut R) -> Result<(Tensor, StepMetrics)> {
        let b = y.dim(0)?;
        let cond = RateCondition::new(lambda)?;
        let out = self.set.estimator.forward(y, &vec![cond; b])?;
        let bound = DEFAULT_SYMBOL_BOUND;
        let hard = quantize_relaxed(y, &out.log_scale, &out.offset, RelaxMode::StraightThrough, bound, rng)?;
        let noisy = quantize_relaxed(y, &out.log_scale, &out.offset, RelaxMode::AdditiveNoise, bound, rng)?;
        let bits = self.set.entropy.rate(&noisy.symbols, rng)?.total()?;
        let y_t = if self.rescale_input {
            rescale_for_tau(&hard.latent, &out.tau, &self.set.schedule)?
        } else {
            hard.latent
        };
        let y0 = one_step_decode(&y_t, &out.tau, &self.backbone)?;
        let x_hat = self.vae.decode(&y0)?;
        let (_, _, h, w) = x.dims4()?;
        let sse = squared_error(x, &x_hat)?.detach();
        let loss = rd_loss(x, &x_hat, &bits, lambda * self.distortion_scale)?;
        let metrics = StepMetrics {
            stage: "codec",
            step: 0,
            lambda,
            loss: scalar(&loss)?,
            bpp: scalar(&bits.mean_all()?)? / (h * w) as f64,
            mse: scalar(&sse.mean_all()?)? / (3 * h * w) as f64,
            tau: scalar(&out.tau.mean_all()?)?,
            mean_scale: scalar(&out.log_scale.exp()?.mean_all()?)?,
            skipped: false,
        };
        Ok((loss, metrics))
    }
}

/// Rate-distortion training of the estimator and entropy model. The
/// autoencoder and denoiser are rebuilt from detached copies of their
/// weights, so no gradient reaches them.
pub struct CodecTrainer<'a> {
    pipe: Pipeline<'a>,
    images: Tensor,
    latents: Tensor,
    vars: Vec<(String, Var)>,
    opt: AdamW,
    rng: ChaCha8Rng,
    lambda_set: Vec<f64>,
    batch_size: usize,
    step: usize,
}

impl<'a> CodecTrainer<'a> {
    /// `images`: the fixed `(N, 3, H, W)` training crops.
    pub fn new(set: &'a ModelSet, images: Tensor, config: &TrainConfig, seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let mut vae = ToyVae::new(set.manifest.vae.clone(), frozen_builder(&set.vae_vars, &device)?)?;
        vae.set_latent_scale(set.vae.latent_scale());
        let denoiser = ToyDenoiser::new(
            set.manifest.denoiser,
            set.schedule.clone(),
            frozen_builder(&set.denoiser_vars, &device)?,
        )?;
        let latents = encode_stack(&vae, &images)?;
        let mut vars = named_vars(&set.estimator_vars)?
            .into_iter()
            .map(|(k, v)| (format!("estimator.{k}"), v))
            .collect::<Vec<_>>();
        vars.extend(named_vars(&set.entropy_vars)?.into_iter().map(|(k, v)| (format!("entropy.{k}"), v)));
        let opt = adam(vars.iter().map(|(_, v)| v.clone()).collect(), config.learning_rate)?;
        Ok(Self {
            pipe: Pipeline {
                set,
                vae,
                backbone: CountingBackbone::new(denoiser),
                rescale_input: config.rescale_input,
                distortion_scale: config.distortion_scale,
            },
            images,
            latents,
            vars,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            lambda_set: config.lambda_set.clone(),
            batch_size: config.batch_size,
            step: 0,
        })
    }

    /// Denoiser evaluations made so far; exactly one per forward pass.
    pub fn backbone_calls(&self) -> usize {
        self.pipe.backbone.calls()
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Names of every trained variable.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.vars.iter().map(|(k, _)| k.as_str()).collect()
    }

    /// One `lambda` drawn uniformly from the configured set.
    pub fn sample_lambda(&mut self) -> f64 {
        self.lambda_set[self.rng.random_range(0..self.lambda_set.len())]
    }

    fn forward_random(&mut self, lambda: f64) -> Result<(Tensor, StepMetrics)> {
        let idx = sample_indices(self.latents.dim(0)?, self.batch_size, &mut self.rng)?;
        let y = self.latents.index_select(&idx, 0)?;
        let x = self.images.index_select(&idx, 0)?;
        let (loss, m) = self.pipe.forward(&x, &y, lambda, &mut self.rng)?;
        Ok((loss, StepMetrics { step: self.step, ..m }))
    }

    /// One optimizer update with the given `lambda`. A non-finite loss skips
    /// the update and is reported through `skipped`.
    pub fn train_step(&mut self, lambda: f64) -> Result<StepMetrics> {
        let result = self.forward_random(lambda);
        let step = self.step;
        self.step += 1;
        match result {
            Ok((loss, metrics)) => {
                self.opt.backward_step(&loss)?;
                Ok(metrics)
            }
            Err(Error::NonFinite(msg)) => {
                warn!("codec step {step}: {msg}; update skipped");
                Ok(StepMetrics {
                    stage: "codec",
                    step,
                    lambda,
                    loss: f64::NAN,
                    bpp: f64::NAN,
                    mse: f64::NAN,
                    tau: f64::NAN,
                    mean_scale: f64::NAN,
                    skipped: true,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Mean metrics over the whole training set in order, with relaxation
    /// noise drawn from a fixed seed so repeated calls are comparable.
    pub fn evaluate(&self, lambda: f64) -> Result<StepMetrics> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = self.latents.dim(0)?;
        let mut acc = [0f64; 5];
        let mut start = 0;
        while start < n {
            let len = self.batch_size.min(n - start);
            let x = self.images.narrow(0, start, len)?;
            let y = self.latents.narrow(0, start, len)?;
            let (_, m) = self.pipe.forward(&x, &y, lambda, &mut rng)?;
            for (a, v) in acc.iter_mut().zip([m.loss, m.bpp, m.mse, m.tau, m.mean_scale]) {
                *a += v * len as f64;
            }
            start += len;
        }
        let [loss, bpp, mse, tau, mean_scale] = acc.map(|a| a / n as f64);
        Ok(StepMetrics {
            stage: "codec_eval",
            step: self.step,
            lambda,
            loss,
            bpp,
            mse,
            tau,
            mean_scale,
            skipped: false,
        })
    }

    /// Gradient L2 norm of every trained variable on one random batch,
    /// without updating anything.
    pub fn gradient_audit(&mut self, lambda: f64) -> Result<Vec<(String, f64)>> {
        let (loss, _) = self.forward_random(lambda)?;
        let grads = loss.backward()?;
        self.vars
            .iter()
            .map(|(name, var)| {
                let norm = match grads.get(var) {
                    Some(g) => scalar(&g.sqr()?.sum_all()?)?.sqrt(),
                    None => 0.0,
                };
                Ok((name.clone(), norm))
            })
            .collect()
    }
}

/// Outcome of a full training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub vae_losses: Vec<f64>,
    pub denoiser_losses: Vec<f64>,
    pub latent_scale: f64,
    pub codec: Vec<StepMetrics>,
    pub skipped_steps: usize,
    /// Denoiser evaluations during codec training (one per step).
    pub codec_backbone_calls: usize,
    /// Entries into the iterative sampler observed while training.
    pub denoise_loops: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainSummary {
    /// Mean codec loss over the last `n` completed steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let done: Vec<f64> = self.codec.iter().filter(|m| !m.skipped).map(|m| m.loss).collect();
        let tail = &done[done.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Copies the autoencoder and denoiser weights and latent scale of a
/// checkpoint into `set`.
pub fn load_foundation(set: &mut ModelSet, dir: &Path) -> Result<()> {
    let manifest = read_manifest(dir)?;
    if manifest.vae != set.manifest.vae || manifest.denoiser != set.manifest.denoiser || manifest.schedule != set.manifest.schedule {
        return Err(Error::ComponentMismatch(format!(
            "foundation checkpoint {} does not match the configured autoencoder, denoiser and schedule",
            dir.display()
        )));
    }
    for c in [Component::Vae, Component::Denoiser] {
        load_into_varmap(set.varmap(c), &load_tensors(&dir.join(c.file_name()), &Device::Cpu)?)?;
    }
    set.set_latent_scale(manifest.latent_scale);
    Ok(())
}

/// Runs every stage of `config` and returns the trained models. The
/// checkpoint is written to `out` when given, metrics to `metrics` as JSON lines.
pub fn train(config: &TrainConfig, out: Option<&Path>, metrics: Option<&Path>) -> Result<(ModelSet, TrainSummary)> {
    config.validate()?;
    let loops_before = denoise_loop_invocations();
    let mut log = match metrics {
        Some(p) => MetricsLog::create(p)?,
        None => MetricsLog::disabled(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut set = ModelSet::new(config.models.manifest(), config.seed)?;
    set.manifest.rescale_input = config.rescale_input;
    let corpus = Corpus::from_config(&config.corpus, config.seed)?;

    let (mut vae_losses, mut denoiser_losses) = (Vec::new(), Vec::new());
    match config.backbone_mode {
        BackboneMode::Toy => {
            info!("pre-training autoencoder for {} steps", config.vae.steps);
            vae_losses = pretrain_vae(&set, &corpus, &config.vae, &mut rng, &mut log)?;
            let crops = fixed_crops(&corpus, config.denoiser.latents, config.denoiser.crop, &mut rng)?;
            let scale = calibrate_latent_scale(&mut set, &crops)?;
            info!("latent scale {scale:.4}");
            let latents = encode_stack(&set.vae, &crops)?;
            info!("pre-training denoiser for {} steps", config.denoiser.steps);
            denoiser_losses = pretrain_denoiser(&set, &latents, &config.denoiser, &mut rng, &mut log)?;
        }
        BackboneMode::FoundationFrozen => {
            let dir = config
                .foundation_dir
                .as_ref()
                .ok_or_else(|| Error::Config("foundation_frozen mode needs foundation_dir".into()))?;
            load_foundation(&mut set, dir)?;
        }
    }

    let images = fixed_crops(&corpus, config.train_crops, config.crop, &mut rng)?;
    let mut trainer = CodecTrainer::new(&set, images, config, rng.random())?;
    info!("training codec for {} steps", config.steps);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let lambda = trainer.sample_lambda();
        let m = trainer.train_step(lambda)?;
        if m.skipped || step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            log.record(&m)?;
            if !m.skipped {
                info!(
                    "step {step} lambda {lambda} loss {:.2} bpp {:.4} mse {:.5} tau {:.4}",
                    m.loss, m.bpp, m.mse, m.tau
                );
            }
        }
        history.push(m);
    }
    log.flush()?;
    let codec_backbone_calls = trainer.backbone_calls();
    drop(trainer);

    let skipped_steps = history.iter().filter(|m| m.skipped).count();
    if let Some(dir) = out {
        set.save(dir)?;
    }
    let summary = TrainSummary {
        vae_losses,
        denoiser_losses,
        latent_scale: set.vae.latent_scale(),
        codec: history,
        skipped_steps,
        codec_backbone_calls,
        denoise_loops: denoise_loop_invocations() - loops_before,
        checkpoint: out.map(Path::to_path_buf),
    };
    Ok((set, summary))
}
