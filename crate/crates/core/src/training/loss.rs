//! Rate-distortion objective.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Squared L2 distance per batch element of two `(B, ...)` tensors.
pub fn squared_error(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    Ok(x.sub(x_hat)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?)
}

/// `mean_b(bits_b + lambda * ||x_b - x_hat_b||^2)` with `bits` of shape `(B,)`.
///
/// Fails with [`Error::NonFinite`] when either term is not finite, so a
/// caller can skip the update.
pub fn rd_loss(x: &Tensor, x_hat: &Tensor, bits: &Tensor, lambda: f64) -> Result<Tensor> {
    let sse = squared_error(x, x_hat)?;
    if bits.dims() != sse.dims() {
        return Err(Error::ShapeMismatch(format!(
            "bits {:?} for a batch of {:?}",
            bits.dims(),
            sse.dims()
        )));
    }
    let loss = bits.add(&sse.affine(lambda, 0.0)?)?.mean_all()?;
    let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        let b = bits.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        let d = sse.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        return Err(Error::NonFinite(format!("rd loss {value}: bits {b:?}, squared error {d:?}, lambda {lambda}")));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> (Vec<f32>, Tensor) {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let t = Tensor::from_vec(v.clone(), shape, &Device::Cpu).unwrap();
        (v, t)
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn zero_distortion_leaves_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, x) = random(&[2, 3, 4, 4], &mut rng);
        let bits = Tensor::new(&[120.5f32, 80.25], &Device::Cpu).unwrap();
        let loss = rd_loss(&x, &x, &bits, 20.0).unwrap();
        assert_eq!(scalar(&loss), (120.5 + 80.25) / 2.0);
    }

    #[test]
    fn lambda_scales_only_the_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, x) = random(&[3, 3, 4, 4], &mut rng);
        let (_, y) = random(&[3, 3, 4, 4], &mut rng);
        let bits = Tensor::new(&[10f32, 20.0, 30.0], &Device::Cpu).unwrap();
        let l1 = scalar(&rd_loss(&x, &y, &bits, 1.0).unwrap());
        let l2 = scalar(&rd_loss(&x, &y, &bits, 2.0).unwrap());
        let rate = 20.0;
        assert!((((l2 - rate) / (l1 - rate)) - 2.0).abs() < 1e-5);
    }

    #[test]
    fn matches_two_term_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = [4usize, 3, 5, 6];
        let (xv, x) = random(&shape, &mut rng);
        let (yv, y) = random(&shape, &mut rng);
        let bits_v: Vec<f32> = (0..4).map(|_| rng.random_range(0.0..500.0)).collect();
        let bits = Tensor::from_vec(bits_v.clone(), 4, &Device::Cpu).unwrap();
        let lambda = 5.0;
        let per = xv.len() / 4;
        let mut expected = 0.0f64;
        for b in 0..4 {
            let sse: f64 = (0..per)
                .map(|i| (xv[b * per + i] as f64 - yv[b * per + i] as f64).powi(2))
                .sum();
            expected += bits_v[b] as f64 + lambda * sse;
        }
        expected /= 4.0;
        let got = scalar(&rd_loss(&x, &y, &bits, lambda).unwrap());
        assert!((got - expected).abs() / expected < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn non_finite_and_shape_errors() {
        let x = Tensor::zeros((1, 3, 2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        let bits = Tensor::new(&[f32::NAN], &Device::Cpu).unwrap();
        assert!(matches!(rd_loss(&x, &x, &bits, 1.0), Err(Error::NonFinite(_))));
        let inf = Tensor::new(&[f32::INFINITY], &Device::Cpu).unwrap();
        assert!(matches!(rd_loss(&x, &x, &inf, 1.0), Err(Error::NonFinite(_))));
        let y = Tensor::zeros((1, 3, 2, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(rd_loss(&x, &y, &inf, 1.0), Err(Error::ShapeMismatch(_))));
        let two = Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap();
        assert!(matches!(rd_loss(&x, &x, &two, 1.0), Err(Error::ShapeMismatch(_))));
    }
}
