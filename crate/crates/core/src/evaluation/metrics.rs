//! Pixel-wise distortion metrics on images in `[0, 1]`.
//!
//! MS-SSIM follows the common five-scale definition: 11-tap Gaussian window
//! with sigma 1.5 applied without padding, `K = (0.01, 0.03)`, 2x2 average
//! pooling with zero padding on odd sides, and the contrast-structure terms
//! and final SSIM clipped at zero. Channels are averaged at the end.

use crate::autoencoder::ImageTensor;
use crate::error::{invalid, Error, Result};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW_SIZE: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Smallest image side MS-SSIM accepts: each of the five scales must still fit the window.
pub const MS_SSIM_MIN_SIDE: usize = (WINDOW_SIZE - 1) * 16 + 1;

fn check_pair(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.tensor().dims() != y.tensor().dims() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.tensor().dims(),
            y.tensor().dims()
        )));
    }
    Ok(())
}

fn to_f64(img: &ImageTensor) -> Result<Vec<f64>> {
    Ok(img.to_vec()?.into_iter().map(f64::from).collect())
}

/// `10 log10(1 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr_values(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    psnr_values(&to_f64(x)?, &to_f64(y)?)
}

pub fn gaussian_window() -> [f64; WINDOW_SIZE] {
    let half = (WINDOW_SIZE / 2) as f64;
    let mut g = [0.0; WINDOW_SIZE];
    for (i, v) in g.iter_mut().enumerate() {
        let c = i as f64 - half;
        *v = (-(c * c) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.map(|v| v / sum)
}

/// A single-channel plane stored row-major.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Separable valid-mode filtering, rows of the window along height first.
    /// A dimension shorter than the window is left unfiltered.
    fn blur(&self, win: &[f64]) -> Plane {
        let k = win.len();
        let mut cur = self.clone();
        if cur.h >= k {
            let oh = cur.h - k + 1;
            let mut v = vec![0.0; oh * cur.w];
            for i in 0..oh {
                for (t, wt) in win.iter().enumerate() {
                    let row = &cur.v[(i + t) * cur.w..(i + t + 1) * cur.w];
                    for (o, r) in v[i * cur.w..(i + 1) * cur.w].iter_mut().zip(row) {
                        *o += wt * r;
                    }
                }
            }
            cur = Plane { h: oh, w: cur.w, v };
        }
        if cur.w >= k {
            let ow = cur.w - k + 1;
            let mut v = vec![0.0; cur.h * ow];
            for i in 0..cur.h {
                let row = &cur.v[i * cur.w..(i + 1) * cur.w];
                for j in 0..ow {
                    v[i * ow + j] = win.iter().zip(&row[j..j + k]).map(|(a, b)| a * b).sum();
                }
            }
            cur = Plane { h: cur.h, w: ow, v };
        }
        cur
    }

    /// 2x2 average pooling; odd sides get one zero of padding on each end,
    /// and padded cells still count towards the divisor of 4.
    fn pool(&self) -> Plane {
        let (ph, pw) = (self.h % 2, self.w % 2);
        let oh = (self.h + 2 * ph - 2) / 2 + 1;
        let ow = (self.w + 2 * pw - 2) / 2 + 1;
        let at = |i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
                0.0
            } else {
                self.v[i as usize * self.w + j as usize]
            }
        };
        let mut v = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let (si, sj) = ((2 * i) as isize - ph as isize, (2 * j) as isize - pw as isize);
                v[i * ow + j] = (at(si, sj) + at(si, sj + 1) + at(si + 1, sj) + at(si + 1, sj + 1)) / 4.0;
            }
        }
        Plane { h: oh, w: ow, v }
    }
}

/// Mean SSIM and mean contrast-structure term of one channel.
fn ssim_cs(x: &Plane, y: &Plane, win: &[f64]) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mu1 = x.blur(win);
    let mu2 = y.blur(win);
    let xx = x.zip(x, |a, b| a * b).blur(win);
    let yy = y.zip(y, |a, b| a * b).blur(win);
    let xy = x.zip(y, |a, b| a * b).blur(win);
    let n = mu1.v.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (m1, m2) = (mu1.v[i], mu2.v[i]);
        let s1 = xx.v[i] - m1 * m1;
        let s2 = yy.v[i] - m2 * m2;
        let s12 = xy.v[i] - m1 * m2;
        let c = (2.0 * s12 + c2) / (s1 + s2 + c2);
        cs += c;
        ssim += (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1) * c;
    }
    (ssim / n as f64, cs / n as f64)
}

/// MS-SSIM of channel-first `(channels, height, width)` values.
pub fn ms_ssim_values(x: &[f64], y: &[f64], channels: usize, height: usize, width: usize) -> Result<f64> {
    let plane = height * width;
    if x.len() != y.len() || x.len() != channels * plane || channels == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} and {} values for {channels}x{height}x{width}",
            x.len(),
            y.len()
        )));
    }
    if height.min(width) < MS_SSIM_MIN_SIDE {
        return Err(invalid(format!(
            "MS-SSIM needs both sides of at least {MS_SSIM_MIN_SIDE} px, got {width}x{height}"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for c in 0..channels {
        let mut px = Plane {
            h: height,
            w: width,
            v: x[c * plane..(c + 1) * plane].to_vec(),
        };
        let mut py = Plane {
            h: height,
            w: width,
            v: y[c * plane..(c + 1) * plane].to_vec(),
        };
        let mut value = 1.0;
        for (level, weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&px, &py, &win);
            if level + 1 < MS_SSIM_WEIGHTS.len() {
                value *= cs.max(0.0).powf(*weight);
                px = px.pool();
                py = py.pool();
            } else {
                value *= ssim.max(0.0).powf(*weight);
            }
        }
        total += value;
    }
    Ok(total / channels as f64)
}

pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    ms_ssim_values(&to_f64(x)?, &to_f64(y)?, 3, x.height(), x.width())
}

/// Unweighted single-scale SSIM (used for images too small for MS-SSIM).
pub fn ssim_values(x: &[f64], y: &[f64], channels: usize, height: usize, width: usize) -> Result<f64> {
    let plane = height * width;
    if x.len() != y.len() || x.len() != channels * plane || channels == 0 {
        return Err(Error::ShapeMismatch(format!("{} and {} values", x.len(), y.len())));
    }
    let win = gaussian_window();
    let total: f64 = (0..channels)
        .map(|c| {
            let px = Plane {
                h: height,
                w: width,
                v: x[c * plane..(c + 1) * plane].to_vec(),
            };
            let py = Plane {
                h: height,
                w: width,
                v: y[c * plane..(c + 1) * plane].to_vec(),
            };
            ssim_cs(&px, &py, &win).0
        })
        .sum();
    Ok(total / channels as f64)
}

pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    ssim_values(&to_f64(x)?, &to_f64(y)?, 3, x.height(), x.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 64-bit LCG shared with the script that produced the reference values.
    struct Lcg(u64);

    impl Lcg {
        fn next(&mut self) -> f64 {
            self.0 = self
                .0
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (self.0 >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    fn pair(seed: u64, h: usize, w: usize, amp: f64) -> (Vec<f64>, Vec<f64>) {
        let mut r = Lcg(seed);
        let x: Vec<f64> = (0..3 * h * w).map(|_| r.next()).collect();
        let y = x.iter().map(|v| (v + amp * (r.next() - 0.5)).clamp(0.0, 1.0)).collect();
        (x, y)
    }

    /// `(seed, height, width, amplitude, psnr, ms_ssim)` computed with
    /// pytorch_msssim 1.0.0 on float64 tensors, with the window also built in float64.
    const REFERENCE: [(u64, usize, usize, f64, f64, f64); 10] = [
        (1, 161, 161, 0.05, 36.87688366989869, 0.9989719343296267),
        (2, 170, 181, 0.1, 30.92294749984071, 0.9956376181650107),
        (3, 192, 176, 0.2, 24.982958067287772, 0.9834476148786928),
        (4, 165, 200, 0.3, 21.582688751464186, 0.9642660963637182),
        (5, 177, 177, 0.5, 17.396015845070664, 0.9136845783929471),
        (6, 200, 163, 0.8, 13.686356262286335, 0.8002124431020001),
        (7, 168, 171, 1.0, 12.052281333029587, 0.7269732603923207),
        (8, 181, 190, 0.02, 44.77980840769413, 0.9998239941351049),
        (9, 176, 176, 0.15, 27.429150680224467, 0.9907512351681307),
        (10, 163, 199, 0.4, 19.191429292476087, 0.9419894723551602),
    ];

    /// Direct two-dimensional evaluation with a full 11x11 window and
    /// explicit zero-padded pooling, written independently of the separable code.
    fn naive_ms_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let g = gaussian_window();
        let ssim_cs = |a: &[f64], b: &[f64], h: usize, w: usize| -> (f64, f64) {
            let (oh, ow) = (h - 10, w - 10);
            let (mut s, mut c) = (0.0, 0.0);
            for i in 0..oh {
                for j in 0..ow {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for u in 0..11 {
                        for v in 0..11 {
                            let k = g[u] * g[v];
                            let (p, q) = (a[(i + u) * w + j + v], b[(i + u) * w + j + v]);
                            ma += k * p;
                            mb += k * q;
                            aa += k * p * p;
                            bb += k * q * q;
                            ab += k * p * q;
                        }
                    }
                    let cs = (2.0 * (ab - ma * mb) + 0.0009) / ((aa - ma * ma) + (bb - mb * mb) + 0.0009);
                    c += cs;
                    s += (2.0 * ma * mb + 0.0001) / (ma * ma + mb * mb + 0.0001) * cs;
                }
            }
            (s / (oh * ow) as f64, c / (oh * ow) as f64)
        };
        let pool = |a: &[f64], h: usize, w: usize| -> (Vec<f64>, usize, usize) {
            let (ph, pw) = (h % 2, w % 2);
            let (oh, ow) = ((h + ph) / 2, (w + pw) / 2);
            let mut out = vec![0.0; oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let mut sum = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let r = (2 * i + di) as isize - ph as isize;
                            let c = (2 * j + dj) as isize - pw as isize;
                            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                                sum += a[r as usize * w + c as usize];
                            }
                        }
                    }
                    out[i * ow + j] = sum / 4.0;
                }
            }
            (out, oh, ow)
        };
        let plane = h * w;
        let mut total = 0.0;
        for ch in 0..3 {
            let (mut a, mut b) = (x[ch * plane..(ch + 1) * plane].to_vec(), y[ch * plane..(ch + 1) * plane].to_vec());
            let (mut hh, mut ww) = (h, w);
            let mut prod = 1.0;
            for l in 0..5 {
                let (s, c) = ssim_cs(&a, &b, hh, ww);
                if l < 4 {
                    prod *= c.max(0.0).powf(MS_SSIM_WEIGHTS[l]);
                    let (na, nh, nw) = pool(&a, hh, ww);
                    let (nb, _, _) = pool(&b, hh, ww);
                    a = na;
                    b = nb;
                    hh = nh;
                    ww = nw;
                } else {
                    prod *= s.max(0.0).powf(MS_SSIM_WEIGHTS[l]);
                }
            }
            total += prod;
        }
        total / 3.0
    }

    #[test]
    fn reference_pairs_match() {
        for (seed, h, w, amp, psnr_ref, ms_ref) in REFERENCE {
            let (x, y) = pair(seed, h, w, amp);
            let p = psnr_values(&x, &y).unwrap();
            let m = ms_ssim_values(&x, &y, 3, h, w).unwrap();
            assert!((p - psnr_ref).abs() < 1e-6, "seed {seed}: psnr {p} vs {psnr_ref}");
            assert!((m - ms_ref).abs() < 1e-10, "seed {seed}: ms-ssim {m} vs {ms_ref}");
        }
    }

    #[test]
    fn separable_code_matches_direct_evaluation() {
        for (seed, h, w, amp, _, _) in REFERENCE.iter().take(2) {
            let (x, y) = pair(*seed, *h, *w, *amp);
            let fast = ms_ssim_values(&x, &y, 3, *h, *w).unwrap();
            let slow = naive_ms_ssim(&x, &y, *h, *w);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn identity_and_offset() {
        let (x, _) = pair(3, 170, 170, 0.0);
        assert_eq!(psnr_values(&x, &x).unwrap(), f64::INFINITY);
        assert!((ms_ssim_values(&x, &x, 3, 170, 170).unwrap() - 1.0).abs() < 1e-12);

        let gray = ImageTensor::from_vec(vec![0.5; 3 * 32 * 32], 32, 32).unwrap();
        let lighter = ImageTensor::from_vec(vec![0.6; 3 * 32 * 32], 32, 32).unwrap();
        assert!((psnr(&gray, &lighter).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&gray, &gray).unwrap(), f64::INFINITY);
        assert!((ssim(&gray, &gray).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_or_mismatched_inputs() {
        let a = ImageTensor::from_vec(vec![0.5; 3 * 64 * 64], 64, 64).unwrap();
        assert!(ms_ssim(&a, &a).is_err());
        let b = ImageTensor::from_vec(vec![0.5; 3 * 64 * 32], 64, 32).unwrap();
        assert!(matches!(psnr(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(psnr_values(&[], &[]).is_err());
    }
}
