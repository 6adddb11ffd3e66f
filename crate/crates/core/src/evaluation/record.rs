//! Per-image evaluation rows, CSV I/O and aggregation into curve points.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autoencoder::ImageTensor;
use crate::error::Result;
use crate::quantization::QuantParams;

use super::metrics::{ms_ssim, psnr, MS_SSIM_MIN_SIDE};
use super::perceptual::{lpips_like, FeatureExtractor};

pub const METHOD_CODEC: &str = "ldc";
pub const METHOD_NAIVE: &str = "naive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub image_id: String,
    pub lambda: Option<f64>,
    /// Uniform quantization step of the naive baseline.
    pub quant_step: Option<f64>,
    pub height: usize,
    pub width: usize,
    /// Length of the stream file.
    pub bytes: usize,
    /// `bytes * 8 / (height * width)`.
    pub bpp: f64,
    pub psnr: f64,
    /// Empty when the image is too small for five scales.
    pub ms_ssim: Option<f64>,
    pub lpips_like: Option<f64>,
    /// Analysis time without entropy coding.
    pub encode_seconds: f64,
    /// Reconstruction time without entropy decoding.
    pub decode_seconds: f64,
    pub timestep: usize,
    pub tau: Option<f64>,
    pub backbone_calls: usize,
    /// Per-channel `scale:offset` pairs separated by `;`.
    pub gamma: String,
}

impl EvalRecord {
    pub fn bpp_of(bytes: usize, height: usize, width: usize) -> f64 {
        bytes as f64 * 8.0 / (height as f64 * width as f64)
    }

    /// Fills PSNR, MS-SSIM and the LPIPS-like distance.
    pub fn score(&mut self, original: &ImageTensor, reconstruction: &ImageTensor, extractor: Option<&dyn FeatureExtractor>) -> Result<()> {
        self.psnr = psnr(original, reconstruction)?;
        self.ms_ssim = if original.height().min(original.width()) >= MS_SSIM_MIN_SIDE {
            Some(ms_ssim(original, reconstruction)?)
        } else {
            None
        };
        self.lpips_like = match extractor {
            Some(ex) => Some(lpips_like(ex, original, reconstruction)?),
            None => None,
        };
        Ok(())
    }
}

pub fn format_gamma(gamma: &QuantParams) -> String {
    (0..gamma.channels())
        .map(|c| format!("{}:{}", gamma.scale(c), gamma.offset[c]))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_records<W: Write>(out: W, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<Vec<EvalRecord>, _>>()?)
}

/// Set-level mean of one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub lambda: Option<f64>,
    pub quant_step: Option<f64>,
    /// Timestep for the naive grid; mean timestep for the codec.
    pub timestep: f64,
    pub images: usize,
    pub bpp: f64,
    /// Mean over finite values; identical reconstructions are left out.
    pub psnr: f64,
    pub ms_ssim: Option<f64>,
    pub lpips_like: Option<f64>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups records by method and operating point; the naive grid is also
/// split by timestep. Points come out sorted by method, then bpp.
pub fn curve_points(records: &[EvalRecord]) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(String, String), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = match (r.lambda, r.quant_step) {
            (Some(l), _) => format!("l{l}"),
            (None, Some(q)) => format!("q{q}/t{}", r.timestep),
            (None, None) => format!("t{}", r.timestep),
        };
        groups.entry((r.method.clone(), key)).or_default().push(r);
    }
    let mut points: Vec<CurvePoint> = groups
        .into_iter()
        .map(|((method, _), rs)| {
            let n = rs.len() as f64;
            let finite: Vec<f64> = rs.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
            CurvePoint {
                method,
                lambda: rs[0].lambda,
                quant_step: rs[0].quant_step,
                timestep: rs.iter().map(|r| r.timestep as f64).sum::<f64>() / n,
                images: rs.len(),
                bpp: rs.iter().map(|r| r.bpp).sum::<f64>() / n,
                psnr: if finite.is_empty() {
                    f64::INFINITY
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                },
                ms_ssim: mean_opt(rs.iter().map(|r| r.ms_ssim)),
                lpips_like: mean_opt(rs.iter().map(|r| r.lpips_like)),
            }
        })
        .collect();
    points.sort_by(|a, b| a.method.cmp(&b.method).then(a.bpp.total_cmp(&b.bpp)));
    points
}

/// Which direction of a metric is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Higher,
    Lower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceCheck {
    /// `(candidate bpp, candidate metric, best baseline metric at or below that bpp)`.
    pub comparisons: Vec<(f64, f64, f64)>,
    /// Candidate points cheaper than every baseline point.
    pub uncovered: usize,
}

impl DominanceCheck {
    /// At least one comparison was possible and the candidate won all of them.
    pub fn dominates(&self, better: Better) -> bool {
        !self.comparisons.is_empty()
            && self.comparisons.iter().all(|&(_, c, b)| match better {
                Better::Higher => c > b,
                Better::Lower => c < b,
            })
    }
}

/// Compares each candidate point with the best baseline point that spends
/// no more bits. Points lacking the metric are ignored.
pub fn dominance(
    candidate: &[CurvePoint],
    baseline: &[CurvePoint],
    metric: impl Fn(&CurvePoint) -> Option<f64>,
    better: Better,
) -> DominanceCheck {
    let mut check = DominanceCheck {
        comparisons: Vec::new(),
        uncovered: 0,
    };
    for c in candidate {
        let Some(cm) = metric(c) else { continue };
        let best = baseline
            .iter()
            .filter(|b| b.bpp <= c.bpp)
            .filter_map(&metric)
            .reduce(|a, b| match better {
                Better::Higher => a.max(b),
                Better::Lower => a.min(b),
            });
        match best {
            Some(b) => check.comparisons.push((c.bpp, cm, b)),
            None => check.uncovered += 1,
        }
    }
    check
}
