//! Feature-space scores: a pairwise LPIPS-like distance and a Fréchet
//! distance between Gaussian fits of two image sets (FID-like).
//!
//! The extractor is pluggable. The built-in [`PyramidExtractor`] is a fixed
//! multi-scale filter bank, not a pretrained network, so absolute values are
//! only comparable between runs that use the same extractor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autoencoder::ImageTensor;
use crate::error::{invalid, Error, Result};

/// One layer of features, channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    fn feature_maps(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>>;

    /// Fixed-length global descriptor; by default the per-channel mean and
    /// standard deviation of every feature map.
    fn embedding(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for map in self.feature_maps(image)? {
            for c in 0..map.channels {
                let p = map.plane(c);
                let mean = p.iter().sum::<f64>() / p.len() as f64;
                let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.len() as f64;
                out.push(mean);
                out.push(var.sqrt());
            }
        }
        Ok(out)
    }
}

/// Band-pass pyramid over luma and two opponent-colour channels plus four
/// oriented luma gradient magnitudes, at `levels` scales.
#[derive(Debug, Clone)]
pub struct PyramidExtractor {
    pub levels: usize,
}

impl Default for PyramidExtractor {
    fn default() -> Self {
        Self { levels: 4 }
    }
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn blur(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = BINOMIAL
                .iter()
                .enumerate()
                .map(|(k, c)| c * p[i * w + reflect(j as isize + k as isize - 2, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = BINOMIAL
                .iter()
                .enumerate()
                .map(|(k, c)| c * tmp[reflect(i as isize + k as isize - 2, h) * w + j])
                .sum();
        }
    }
    out
}

fn downsample(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            out.push(p[2 * i * w + 2 * j]);
        }
    }
    (out, oh, ow)
}

impl FeatureExtractor for PyramidExtractor {
    fn name(&self) -> &str {
        "pyramid"
    }

    fn feature_maps(&self, image: &ImageTensor) -> Result<Vec<FeatureMap>> {
        if self.levels == 0 {
            return Err(invalid("pyramid needs at least one level"));
        }
        let (mut h, mut w) = (image.height(), image.width());
        let v: Vec<f64> = image.to_vec()?.into_iter().map(f64::from).collect();
        let n = h * w;
        let (r, g, b) = (&v[..n], &v[n..2 * n], &v[2 * n..]);
        let mut planes: [Vec<f64>; 3] = [
            (0..n).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect(),
            (0..n).map(|i| r[i] - g[i]).collect(),
            (0..n).map(|i| 0.5 * (r[i] + g[i]) - b[i]).collect(),
        ];
        let mut maps = Vec::with_capacity(self.levels);
        for level in 0..self.levels {
            let blurred: Vec<Vec<f64>> = planes.iter().map(|p| blur(p, h, w)).collect();
            let mut values = Vec::with_capacity(7 * h * w);
            for (p, bl) in planes.iter().zip(&blurred) {
                values.extend(p.iter().zip(bl).map(|(a, b)| a - b));
            }
            let y = &planes[0];
            let at = |i: isize, j: isize| y[reflect(i, h) * w + reflect(j, w)];
            for (di, dj) in [(0isize, 1isize), (1, 1), (1, 0), (1, -1)] {
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        values.push((at(i + di, j + dj) - at(i - di, j - dj)).abs() * 0.5);
                    }
                }
            }
            maps.push(FeatureMap {
                channels: 7,
                height: h,
                width: w,
                values,
            });
            if level + 1 < self.levels {
                let mut next_hw = (h, w);
                for (p, bl) in planes.iter_mut().zip(blurred) {
                    let (d, oh, ow) = downsample(&bl, h, w);
                    *p = d;
                    next_hw = (oh, ow);
                }
                (h, w) = next_hw;
            }
        }
        Ok(maps)
    }
}

/// Spatially averaged squared distance between channel-normalized features,
/// averaged over channels and summed over layers.
pub fn lpips_like(extractor: &dyn FeatureExtractor, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.tensor().dims() != y.tensor().dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.tensor().dims(), y.tensor().dims())));
    }
    let fx = extractor.feature_maps(x)?;
    let fy = extractor.feature_maps(y)?;
    let mut total = 0.0;
    for (a, b) in fx.iter().zip(&fy) {
        let n = a.height * a.width;
        let mut layer = 0.0;
        for s in 0..n {
            let norm = |m: &FeatureMap| (0..m.channels).map(|c| m.values[c * n + s].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(a), norm(b));
            layer += (0..a.channels)
                .map(|c| (a.values[c * n + s] / na - b.values[c * n + s] / nb).powi(2))
                .sum::<f64>();
        }
        total += layer / (n * a.channels) as f64;
    }
    Ok(total)
}

/// Mean vector and unbiased covariance of row samples.
pub fn gaussian_fit(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(invalid(format!("a covariance needs at least 2 samples, got {n}")));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::ShapeMismatch("samples must share a non-zero dimension".into()));
    }
    let data = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mean = DVector::from_fn(d, |j, _| data.column(j).mean());
    let mut centered = data;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the trace of the
/// square root taken as `tr((sqrt(S1) S2 sqrt(S1))^{1/2})`.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::ShapeMismatch("Gaussian dimensions differ".into()));
    }
    let r1 = sym_sqrt(s1);
    let inner = &r1 * s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (mu1 - mu2).norm_squared();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * tr_cross).max(0.0))
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid_like(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_fit(a)?;
    let (m2, s2) = gaussian_fit(b)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualScores {
    pub extractor: Option<String>,
    /// Per-pair LPIPS-like distances in input order.
    pub lpips_like: Option<Vec<f64>>,
    pub fid_like: Option<f64>,
    pub samples: usize,
    pub notices: Vec<String>,
}

impl PerceptualScores {
    pub fn mean_lpips_like(&self) -> Option<f64> {
        self.lpips_like
            .as_ref()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Scores a set of reconstructions against their originals. Without an
/// extractor both scores are skipped; the FID-like score is skipped when
/// either set is smaller than `min_fid_samples`.
pub fn perceptual_scores(
    originals: &[ImageTensor],
    reconstructions: &[ImageTensor],
    extractor: Option<&dyn FeatureExtractor>,
    min_fid_samples: usize,
) -> Result<PerceptualScores> {
    if originals.len() != reconstructions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let samples = originals.len();
    let Some(ex) = extractor else {
        let notice = "no feature extractor supplied; perceptual scores skipped".to_string();
        log::warn!("{notice}");
        return Ok(PerceptualScores {
            extractor: None,
            lpips_like: None,
            fid_like: None,
            samples,
            notices: vec![notice],
        });
    };
    let mut notices = Vec::new();
    let lpips = originals
        .iter()
        .zip(reconstructions)
        .map(|(x, y)| lpips_like(ex, x, y))
        .collect::<Result<Vec<_>>>()?;
    let fid = if samples >= min_fid_samples.max(2) {
        let ea = originals.iter().map(|x| ex.embedding(x)).collect::<Result<Vec<_>>>()?;
        let eb = reconstructions.iter().map(|x| ex.embedding(x)).collect::<Result<Vec<_>>>()?;
        Some(fid_like(&ea, &eb)?)
    } else {
        let notice = format!(
            "FID-like score skipped: {samples} samples, at least {} required",
            min_fid_samples.max(2)
        );
        log::warn!("{notice}");
        notices.push(notice);
        None
    };
    Ok(PerceptualScores {
        extractor: Some(ex.name().to_string()),
        lpips_like: Some(lpips),
        fid_like: fid,
        samples,
        notices,
    })
}
