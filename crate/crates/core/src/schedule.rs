//! Diffusion noise schedule.
//!
//! The schedule is stored as a table of cumulative signal levels `alpha_bar[t]`
//! for `t = 0..=t_max`, with index 0 the clean boundary. Training needs the same
//! quantity as a differentiable function of a normalized timestep `tau in [0, 1]`,
//! which is provided by interpolating `ln(alpha_bar)` linearly between grid points.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Gap below which a continuous timestep is treated as sitting on a grid point.
const GRID_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::Linear => 0,
            ScheduleKind::ScaledLinear => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScheduleKind::Linear),
            1 => Some(ScheduleKind::ScaledLinear),
            _ => None,
        }
    }
}

/// Parameters that fully determine a schedule; recorded in stream headers and
/// checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    alpha_bar: Vec<f64>,
    log_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        build_schedule(params.kind, params.t_max, params.beta_start, params.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn kind(&self) -> ScheduleKind {
        self.params.kind
    }

    pub fn t_max(&self) -> usize {
        self.params.t_max
    }

    /// The full table, `t_max + 1` entries.
    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar[t]`; panics if `t > t_max`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Continuous extension at normalized timestep `tau in [0, 1]`.
    pub fn alpha_bar_continuous(&self, tau: f64) -> Result<f64> {
        let (index, frac, slope) = self.locate(tau)?;
        if frac == 0.0 {
            return Ok(self.alpha_bar[index]);
        }
        Ok(self.alpha_bar[index] * (frac * slope).exp())
    }

    /// Derivative of [`Self::alpha_bar_continuous`] with respect to `tau`.
    ///
    /// At grid points the right-hand derivative is returned (the left one at `tau = 1`).
    pub fn alpha_bar_derivative(&self, tau: f64) -> Result<f64> {
        let value = self.alpha_bar_continuous(tau)?;
        let (_, _, slope) = self.locate(tau)?;
        Ok(value * slope * self.t_max() as f64)
    }

    /// Differentiable `alpha_bar(tau)` for a rank-1 tensor of normalized timesteps.
    ///
    /// The segment index is taken from the current values and treated as a
    /// constant; gradients flow through the in-segment fraction.
    pub fn alpha_bar_tensor(&self, tau: &Tensor) -> Result<Tensor> {
        let dtype = tau.dtype();
        let values = tau.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let t_max = self.t_max() as f64;
        let mut bases = Vec::with_capacity(values.len());
        let mut starts = Vec::with_capacity(values.len());
        let mut slopes = Vec::with_capacity(values.len());
        for &tau in &values {
            let (index, _, slope) = self.locate(tau)?;
            bases.push(self.alpha_bar[index]);
            starts.push(index as f64);
            slopes.push(slope);
        }
        let device = tau.device();
        let n = values.len();
        let bases = Tensor::from_vec(bases, n, device)?.to_dtype(dtype)?;
        let starts = Tensor::from_vec(starts, n, device)?.to_dtype(dtype)?;
        let slopes = Tensor::from_vec(slopes, n, device)?.to_dtype(dtype)?;
        let frac = tau.affine(t_max, 0.0)?.sub(&starts)?;
        Ok(bases.mul(&frac.mul(&slopes)?.exp()?)?)
    }

    /// Returns `(grid index, fraction past it, log-slope of the segment)`.
    fn locate(&self, tau: f64) -> Result<(usize, f64, f64)> {
        if !(0.0..=1.0).contains(&tau) || tau.is_nan() {
            return Err(invalid(format!("normalized timestep {tau} outside [0, 1]")));
        }
        let t_max = self.t_max();
        let u = tau * t_max as f64;
        let nearest = u.round();
        let (index, frac) = if (u - nearest).abs() < GRID_SNAP {
            (nearest as usize, 0.0)
        } else {
            let floor = u.floor();
            (floor as usize, u - floor)
        };
        let index = index.min(t_max);
        let segment = index.min(t_max - 1);
        let slope = self.log_alpha_bar[segment + 1] - self.log_alpha_bar[segment];
        Ok((index, frac, slope))
    }
}

/// Builds the discrete schedule: `alpha_bar[t] = prod_{s <= t} (1 - beta_s)`.
pub fn build_schedule(
    kind: ScheduleKind,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(invalid("t_max must be at least 1"));
    }
    if t_max > u16::MAX as usize {
        return Err(invalid("t_max must fit in 16 bits"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            match kind {
                ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac,
                ScheduleKind::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let s = a + (b - a) * frac;
                    s * s
                }
            }
        })
        .collect();

    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0f64;
    for beta in &betas {
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    let log_alpha_bar = alpha_bar.iter().map(|a| a.ln()).collect();
    Ok(NoiseSchedule {
        params: ScheduleParams {
            kind,
            t_max,
            beta_start,
            beta_end,
        },
        alpha_bar,
        log_alpha_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleParams::default()).unwrap()
    }

    #[test]
    fn last_entry_matches_iterative_product() {
        // Independent oracle: plain loop over the linear betas.
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let s = default_schedule();
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() < 1e-6);
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(ScheduleKind::Linear, 1, 0.3, 0.3).unwrap();
        assert_eq!(s.table(), &[1.0, 0.7]);
    }

    #[test]
    fn boundary_and_invariants() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = build_schedule(kind, 1000, 8.5e-4, 0.012).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for w in s.table().windows(2) {
                assert!(w[1] < w[0]);
                assert!(w[1] > 0.0 && w[1] <= 1.0);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
        let s = default_schedule();
        assert!(s.alpha_bar_continuous(-0.01).is_err());
        assert!(s.alpha_bar_continuous(1.01).is_err());
        assert!(s.alpha_bar_continuous(f64::NAN).is_err());
    }

    #[test]
    fn continuous_agrees_on_grid() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar_continuous(0.0).unwrap(), 1.0);
        let worst = (0..=1000)
            .map(|t| (s.alpha_bar_continuous(t as f64 / 1000.0).unwrap() - s.alpha_bar(t)).abs())
            .fold(0.0, f64::max);
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn continuous_between_grid_points_tracks_dense_table() {
        let s = default_schedule();
        // Oracle: a table with ten sub-steps per step, each sub-step retaining
        // (1 - beta_t)^(1/10) of the signal, built by iterated multiplication.
        let mut dense = vec![1.0f64];
        let mut acc = 1.0;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            let sub = (1.0 - beta).powf(0.1);
            for _ in 0..10 {
                acc *= sub;
                dense.push(acc);
            }
        }
        for t in [3usize, 57, 400, 999] {
            let lo = s.alpha_bar(t + 1);
            let hi = s.alpha_bar(t);
            for k in 1..10 {
                let tau = (t as f64 + k as f64 / 10.0) / 1000.0;
                let v = s.alpha_bar_continuous(tau).unwrap();
                assert!(v < hi && v > lo, "t={t} k={k}");
                let reference = dense[t * 10 + k];
                assert!((v - reference).abs() / reference < 1e-9, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn tensor_path_matches_scalar_and_gradient() {
        let s = default_schedule();
        let taus = vec![0.0213, 0.05, 0.3337, 0.999, 1.0];
        let var = Var::from_vec(taus.clone(), taus.len(), &Device::Cpu).unwrap();
        let ab = s.alpha_bar_tensor(var.as_tensor()).unwrap();
        let got = ab.to_vec1::<f64>().unwrap();
        let grads = ab.sum_all().unwrap().backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (i, &tau) in taus.iter().enumerate() {
            let expected = s.alpha_bar_continuous(tau).unwrap();
            assert!((got[i] - expected).abs() < 1e-14);
            let d = s.alpha_bar_derivative(tau).unwrap();
            assert!((g[i] - d).abs() <= 1e-10 * d.abs());
        }
    }

    proptest! {
        #[test]
        fn strictly_decreasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!((a - b).abs() > 1e-7);
            let s = default_schedule();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(s.alpha_bar_continuous(lo).unwrap() > s.alpha_bar_continuous(hi).unwrap());
        }

        #[test]
        fn analytic_derivative_matches_finite_differences(tau in 0.001f64..0.999) {
            let s = default_schedule();
            let u = tau * 1000.0;
            let h = 1e-7;
            prop_assume!((u - u.round()).abs() > 2.0 * h * 1000.0);
            let fd = (s.alpha_bar_continuous(tau + h).unwrap() - s.alpha_bar_continuous(tau - h).unwrap()) / (2.0 * h);
            let d = s.alpha_bar_derivative(tau).unwrap();
            prop_assert!((fd - d).abs() <= 1e-4 * d.abs());
        }
    }
}
