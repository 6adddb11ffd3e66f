//! Discretized Gaussian probabilities over the bounded symbol alphabet.

use candle_core::Tensor;

use crate::error::Result;

/// Lower bound on the predicted standard deviation.
pub const SIGMA_MIN: f64 = 0.04;

/// Floor applied to probabilities in the differentiable rate estimate.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability of integer `symbol` under `N(mu, sigma^2)` discretized to unit
/// bins, with the mass beyond `+-(bound - 0.5)` folded into the edge symbols.
///
/// `sigma` is raised to [`SIGMA_MIN`] if smaller.
pub fn likelihood(symbol: i32, mu: f64, sigma: f64, bound: i32) -> f64 {
    let sigma = sigma.max(SIGMA_MIN);
    let s = symbol.clamp(-bound, bound) as f64;
    let upper = (s + 0.5 - mu) / sigma;
    let lower = (s - 0.5 - mu) / sigma;
    if symbol <= -bound {
        return normal_cdf(upper);
    }
    if symbol >= bound {
        return normal_cdf(-lower);
    }
    // Evaluate on the side of the mean where the CDF is small, for accuracy in the tails.
    if s > mu {
        normal_cdf(-lower) - normal_cdf(-upper)
    } else {
        normal_cdf(upper) - normal_cdf(lower)
    }
}

/// Ideal code length in bits, with the likelihood floored at [`LIKELIHOOD_FLOOR`]
/// as in training.
pub fn bits(symbol: i32, mu: f64, sigma: f64, bound: i32) -> f64 {
    -likelihood(symbol, mu, sigma, bound).max(LIKELIHOOD_FLOOR).log2()
}

fn phi(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(std::f64::consts::FRAC_1_SQRT_2, 0.0)?.erf()?.affine(0.5, 0.5)?)
}

/// Differentiable unit-bin Gaussian likelihood of real-valued `x`
/// (used with additive-noise proxies during training), floored at
/// [`LIKELIHOOD_FLOOR`].
pub fn likelihood_tensor(x: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let v = x.sub(mu)?.abs()?;
    let upper = phi(&v.affine(-1.0, 0.5)?.div(sigma)?)?;
    let lower = phi(&v.affine(-1.0, -0.5)?.div(sigma)?)?;
    Ok(upper.sub(&lower)?.clamp(LIKELIHOOD_FLOOR, 1.0)?)
}

/// Total bits `-sum log2 p` over all elements (a scalar tensor).
pub fn bits_tensor(likelihoods: &Tensor) -> Result<Tensor> {
    Ok(likelihoods.log()?.sum_all()?.affine(-1.0 / std::f64::consts::LN_2, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent erf via its Maclaurin series (converges for moderate |x|).
    fn erf_series(x: f64) -> f64 {
        let mut sum = 0.0;
        let mut term = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 {
            sum += term / (2.0 * n + 1.0);
            n += 1.0;
            term *= -x * x / n;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn central_bin_of_standard_normal() {
        let oracle = erf_series(0.5 / std::f64::consts::SQRT_2);
        let p = likelihood(0, 0.0, 1.0, 255);
        assert!((p - oracle).abs() < 1e-12);
        assert!((p - 0.38292).abs() < 1e-5);
    }

    #[test]
    fn concentrates_as_sigma_shrinks() {
        let p = likelihood(3, 3.0, SIGMA_MIN, 255);
        assert!(p > 1.0 - 1e-12);
        assert!(likelihood(3, 3.0, 1e-6, 255) == p);
    }

    #[test]
    fn mass_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mu = rng.random_range(-300.0..300.0);
            let sigma = rng.random_range(SIGMA_MIN..80.0);
            let total: f64 = (-20..=20).map(|s| likelihood(s, mu, sigma, 20)).sum();
            assert!((total - 1.0).abs() < 1e-6, "mu={mu} sigma={sigma} total={total}");
        }
    }

    #[test]
    fn tensor_matches_scalar_inside_alphabet() {
        let x = Tensor::new(&[0.0f64, 1.0, -2.0, 0.3], &Device::Cpu).unwrap();
        let mu = Tensor::new(&[0.0f64, 0.2, -1.5, 0.0], &Device::Cpu).unwrap();
        let sigma = Tensor::new(&[1.0f64, 0.5, 2.0, 0.7], &Device::Cpu).unwrap();
        let p = likelihood_tensor(&x, &mu, &sigma).unwrap().to_vec1::<f64>().unwrap();
        for (i, (s, m, sg)) in [(0, 0.0, 1.0), (1, 0.2, 0.5), (-2, -1.5, 2.0)].iter().enumerate() {
            assert!((p[i] - likelihood(*s, *m, *sg, 255)).abs() < 1e-6);
        }
        let b = bits_tensor(&Tensor::new(&[0.5f64, 0.25], &Device::Cpu).unwrap())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((b - 3.0).abs() < 1e-12);
    }
}
