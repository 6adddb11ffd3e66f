//! Deterministic DDIM machinery: the denoiser interface, the single update,
//! the iterative partial-denoising loop used by the decoder, and the one-step
//! `x0` estimate used during training.
//!
//! Latents are `(batch, channels, height, width)` tensors.

mod toy_unet;

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};

use crate::error::{invalid, Error, Result};
use crate::schedule::NoiseSchedule;

pub use toy_unet::{DenoiserConfig, ToyDenoiser};

static DENOISE_LOOPS: AtomicUsize = AtomicUsize::new(0);

/// Number of times [`denoise_from`] has been entered in this process.
pub fn denoise_loop_invocations() -> usize {
    DENOISE_LOOPS.load(Ordering::SeqCst)
}

/// A noise-prediction network `eps_theta(x_t, t)`.
pub trait DenoiserBackbone: Send + Sync {
    fn latent_channels(&self) -> usize;

    /// Latent height and width must be multiples of this.
    fn spatial_multiple(&self) -> usize {
        1
    }

    fn schedule(&self) -> &NoiseSchedule;

    /// Predicts the noise in `latent`. `timesteps` is a rank-1 tensor with one
    /// entry per batch element; entries may be non-integer during training.
    fn predict(&self, latent: &Tensor, timesteps: &Tensor) -> Result<Tensor>;

    fn parameter_count(&self) -> usize {
        0
    }
}

impl<B: DenoiserBackbone + ?Sized> DenoiserBackbone for &B {
    fn latent_channels(&self) -> usize {
        (**self).latent_channels()
    }
    fn spatial_multiple(&self) -> usize {
        (**self).spatial_multiple()
    }
    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
    fn predict(&self, latent: &Tensor, timesteps: &Tensor) -> Result<Tensor> {
        (**self).predict(latent, timesteps)
    }
    fn parameter_count(&self) -> usize {
        (**self).parameter_count()
    }
}

impl<B: DenoiserBackbone + ?Sized> DenoiserBackbone for Box<B> {
    fn latent_channels(&self) -> usize {
        (**self).latent_channels()
    }
    fn spatial_multiple(&self) -> usize {
        (**self).spatial_multiple()
    }
    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
    fn predict(&self, latent: &Tensor, timesteps: &Tensor) -> Result<Tensor> {
        (**self).predict(latent, timesteps)
    }
    fn parameter_count(&self) -> usize {
        (**self).parameter_count()
    }
}

/// Wraps a backbone and counts `predict` calls.
pub struct CountingBackbone<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: DenoiserBackbone> CountingBackbone<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: DenoiserBackbone> DenoiserBackbone for CountingBackbone<B> {
    fn latent_channels(&self) -> usize {
        self.inner.latent_channels()
    }
    fn spatial_multiple(&self) -> usize {
        self.inner.spatial_multiple()
    }
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }
    fn predict(&self, latent: &Tensor, timesteps: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(latent, timesteps)
    }
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }
}

/// `x0 = (x_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)`.
pub fn estimate_x0(x_t: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(invalid("estimate_x0 at t = 0: nothing to denoise"));
    }
    if t > schedule.t_max() {
        return Err(invalid(format!("timestep {t} exceeds t_max {}", schedule.t_max())));
    }
    check_same_shape(x_t, eps)?;
    let ab = schedule.alpha_bar(t);
    let noise = eps.affine((1.0 - ab).sqrt(), 0.0)?;
    Ok(x_t.sub(&noise)?.affine(1.0 / ab.sqrt(), 0.0)?)
}

/// One deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step<B: DenoiserBackbone + ?Sized>(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    backbone: &B,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(invalid(format!("ddim_step requires t_prev < t, got {t_prev} >= {t}")));
    }
    let schedule = backbone.schedule();
    if t > schedule.t_max() {
        return Err(invalid(format!("timestep {t} exceeds t_max {}", schedule.t_max())));
    }
    let batch = x_t.dim(0)?;
    let timesteps = Tensor::full(t as f32, batch, x_t.device())?.to_dtype(x_t.dtype())?;
    let eps = backbone.predict(x_t, &timesteps)?;
    check_same_shape(x_t, &eps)?;
    let x0 = estimate_x0(x_t, t, &eps, schedule)?;
    let ab_prev = schedule.alpha_bar(t_prev);
    if t_prev == 0 {
        return Ok(x0);
    }
    let signal = x0.affine(ab_prev.sqrt(), 0.0)?;
    let noise = eps.affine((1.0 - ab_prev).sqrt(), 0.0)?;
    Ok(signal.add(&noise)?)
}

/// Runs `ddim_step(n, n - 1)` for `n = t, t - 1, ..., 1`, i.e. exactly `t`
/// backbone evaluations.
pub fn denoise_from<B: DenoiserBackbone + ?Sized>(x_t: &Tensor, t: usize, backbone: &B) -> Result<Tensor> {
    DENOISE_LOOPS.fetch_add(1, Ordering::SeqCst);
    if t > backbone.schedule().t_max() {
        return Err(invalid(format!(
            "timestep {t} exceeds t_max {}",
            backbone.schedule().t_max()
        )));
    }
    let mut x = x_t.clone();
    for n in (1..=t).rev() {
        x = ddim_step(&x, n, n - 1, backbone)?;
    }
    Ok(x)
}

/// Single-pass training decode: evaluates the `x0` estimate at a continuous,
/// differentiable normalized timestep `tau` (rank-1, one per batch element).
pub fn one_step_decode<B: DenoiserBackbone + ?Sized>(x_t: &Tensor, tau: &Tensor, backbone: &B) -> Result<Tensor> {
    let taus = tau.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = taus.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(invalid(format!("one_step_decode requires tau in (0, 1], got {bad}")));
    }
    let schedule = backbone.schedule();
    let timesteps = tau.affine(schedule.t_max() as f64, 0.0)?;
    let eps = backbone.predict(x_t, &timesteps)?;
    check_same_shape(x_t, &eps)?;
    let ab = schedule.alpha_bar_tensor(tau)?.to_dtype(x_t.dtype())?;
    let sqrt_ab = ab.sqrt()?.reshape(((), 1, 1, 1))?;
    let sqrt_one_minus = ab.affine(-1.0, 1.0)?.sqrt()?.reshape(((), 1, 1, 1))?;
    let numer = x_t.sub(&eps.broadcast_mul(&sqrt_one_minus)?)?;
    Ok(numer.broadcast_div(&sqrt_ab)?)
}

/// Optional pre-scaling of the dequantized latent by `sqrt(alpha_bar_t)` before denoising.
pub fn rescale_for_timestep(latent: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    Ok(latent.affine(schedule.alpha_bar(t).sqrt(), 0.0)?)
}

/// Differentiable counterpart of [`rescale_for_timestep`].
pub fn rescale_for_tau(latent: &Tensor, tau: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar_tensor(tau)?.to_dtype(latent.dtype())?;
    Ok(latent.broadcast_mul(&ab.sqrt()?.reshape(((), 1, 1, 1))?)?)
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleParams;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Backbone that always predicts zero noise.
    struct ZeroEps(NoiseSchedule);

    impl DenoiserBackbone for ZeroEps {
        fn latent_channels(&self) -> usize {
            4
        }
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn predict(&self, latent: &Tensor, _t: &Tensor) -> Result<Tensor> {
            Ok(latent.zeros_like()?)
        }
    }

    /// Backbone with a closed form: eps = 0.1 * x * (1 + t / t_max).
    struct LinearEps(NoiseSchedule);

    impl DenoiserBackbone for LinearEps {
        fn latent_channels(&self) -> usize {
            4
        }
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn predict(&self, latent: &Tensor, t: &Tensor) -> Result<Tensor> {
            let k = t.affine(0.1 / self.0.t_max() as f64, 0.1)?.reshape(((), 1, 1, 1))?;
            Ok(latent.broadcast_mul(&k)?)
        }
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleParams::default()).unwrap()
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> (Vec<f64>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = Tensor::from_vec(v.clone(), shape, &Device::Cpu).unwrap();
        (v, t)
    }

    fn max_abs_diff(a: &Tensor, b: &[f64]) -> f64 {
        a.flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn estimate_x0_inverts_forward_process() {
        let s = schedule();
        let (x0, x0_t) = random((2, 4, 3, 5), 1);
        let (eps, eps_t) = random((2, 4, 3, 5), 2);
        for t in [1usize, 50, 500, 1000] {
            let ab = s.alpha_bar(t);
            let xt: Vec<f64> = x0.iter().zip(&eps).map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e).collect();
            let xt = Tensor::from_vec(xt, x0_t.dims(), &Device::Cpu).unwrap();
            let rec = estimate_x0(&xt, t, &eps_t, &s).unwrap();
            assert!(max_abs_diff(&rec, &x0) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn estimate_x0_zero_noise_and_formula() {
        let s = schedule();
        let (x, xt) = random((1, 4, 4, 4), 3);
        let rec = estimate_x0(&xt, 500, &xt.zeros_like().unwrap(), &s).unwrap();
        let expected: Vec<f64> = x.iter().map(|v| v / s.alpha_bar(500).sqrt()).collect();
        assert!(max_abs_diff(&rec, &expected) < 1e-12);

        let (e, et) = random((1, 4, 4, 4), 4);
        let rec = estimate_x0(&xt, 500, &et, &s).unwrap();
        let ab = s.alpha_bar(500);
        let expected: Vec<f64> = x.iter().zip(&e).map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt()).collect();
        assert!(max_abs_diff(&rec, &expected) < 1e-12);
        assert!(estimate_x0(&xt, 0, &et, &s).is_err());
    }

    #[test]
    fn ddim_step_special_cases() {
        let b = ZeroEps(schedule());
        let s = b.schedule();
        let (x, xt) = random((1, 4, 2, 2), 5);
        let out = ddim_step(&xt, 40, 39, &b).unwrap();
        let k = (s.alpha_bar(39) / s.alpha_bar(40)).sqrt();
        let expected: Vec<f64> = x.iter().map(|v| v * k).collect();
        assert!(max_abs_diff(&out, &expected) < 1e-6);

        let lin = LinearEps(schedule());
        let step = ddim_step(&xt, 7, 0, &lin).unwrap();
        let eps = lin.predict(&xt, &Tensor::new(&[7.0f64], &Device::Cpu).unwrap()).unwrap();
        let x0 = estimate_x0(&xt, 7, &eps, lin.schedule()).unwrap();
        assert_eq!(
            step.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x0.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        assert!(ddim_step(&xt, 5, 5, &b).is_err());
        assert!(ddim_step(&xt, 5, 6, &b).is_err());
    }

    #[test]
    fn ddim_step_matches_transcription() {
        let lin = LinearEps(schedule());
        let s = lin.schedule();
        let (x, xt) = random((2, 4, 3, 3), 6);
        let (t, tp) = (120usize, 117usize);
        let out = ddim_step(&xt, t, tp, &lin).unwrap();
        let k = 0.1 * (1.0 + t as f64 / 1000.0);
        let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(tp));
        let expected: Vec<f64> = x
            .iter()
            .map(|&v| {
                let e = k * v;
                let x0 = (v - (1.0 - ab).sqrt() * e) / ab.sqrt();
                abp.sqrt() * x0 + (1.0 - abp).sqrt() * e
            })
            .collect();
        assert!(max_abs_diff(&out, &expected) < 1e-12);
    }

    #[test]
    fn denoise_from_counts_and_telescopes() {
        let b = CountingBackbone::new(ZeroEps(schedule()));
        let (x, xt) = random((1, 4, 3, 3), 7);
        let same = denoise_from(&xt, 0, &b).unwrap();
        assert_eq!(b.calls(), 0);
        assert_eq!(max_abs_diff(&same, &x), 0.0);

        let out = denoise_from(&xt, 5, &b).unwrap();
        assert_eq!(b.calls(), 5);
        let expected: Vec<f64> = x.iter().map(|v| v / b.schedule().alpha_bar(5).sqrt()).collect();
        assert!(max_abs_diff(&out, &expected) < 1e-5);

        let lin = LinearEps(schedule());
        let a = denoise_from(&xt, 1, &lin).unwrap();
        let c = ddim_step(&xt, 1, 0, &lin).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            c.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn unit_norm_input_scales_by_inverse_sqrt_alpha_bar() {
        let b = ZeroEps(schedule());
        let (x, _) = random((1, 4, 4, 4), 8);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = x.iter().map(|v| v / norm).collect();
        let t = Tensor::from_vec(unit, (1, 4, 4, 4), &Device::Cpu).unwrap();
        for steps in [1usize, 10, 70] {
            let out = denoise_from(&t, steps, &b).unwrap();
            let n = out.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
            assert!((n - 1.0 / b.schedule().alpha_bar(steps).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn one_step_decode_agrees_with_discrete_estimate_on_grid() {
        let lin = LinearEps(schedule());
        let (_, xt) = random((2, 4, 3, 3), 9);
        let tau = Tensor::new(&[0.05f64, 0.05], &Device::Cpu).unwrap();
        let one = one_step_decode(&xt, &tau, &lin).unwrap();
        let eps = lin.predict(&xt, &Tensor::new(&[50.0f64, 50.0], &Device::Cpu).unwrap()).unwrap();
        let discrete = estimate_x0(&xt, 50, &eps, lin.schedule()).unwrap();
        let d = discrete.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(max_abs_diff(&one, &d) < 1e-12);
        assert!(one_step_decode(&xt, &Tensor::new(&[0.0f64, 0.1], &Device::Cpu).unwrap(), &lin).is_err());
    }

    #[test]
    fn one_step_decode_gradient_matches_finite_differences() {
        let lin = LinearEps(schedule());
        let (_, xt) = random((1, 4, 3, 3), 10);
        let (w, wt) = random((1, 4, 3, 3), 11);
        let _ = w;
        let objective = |tau: f64| -> f64 {
            let t = Tensor::new(&[tau], &Device::Cpu).unwrap();
            let out = one_step_decode(&xt, &t, &lin).unwrap();
            (out * &wt).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        for tau in [0.0123, 0.0456, 0.0789, 0.3141] {
            let var = Var::new(&[tau], &Device::Cpu).unwrap();
            let out = one_step_decode(&xt, var.as_tensor(), &lin).unwrap();
            let grads = (out * &wt).unwrap().sum_all().unwrap().backward().unwrap();
            let g = grads.get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];
            let h = 1e-7;
            let fd = (objective(tau + h) - objective(tau - h)) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-3 * fd.abs(), "tau={tau} g={g} fd={fd}");
        }
    }

    #[test]
    fn repeated_denoise_is_bitwise_identical() {
        let lin = LinearEps(schedule());
        let (_, xt) = random((1, 4, 5, 5), 12);
        let xt = xt.to_dtype(DType::F32).unwrap();
        let a = denoise_from(&xt, 30, &lin).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = denoise_from(&xt, 30, &lin).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
