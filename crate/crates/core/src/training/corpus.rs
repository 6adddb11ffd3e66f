//! Training images: a seeded procedural corpus or a directory of image files,
//! plus random cropping into batches.

use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::CorpusConfig;
use crate::autoencoder::ImageTensor;
use crate::error::{invalid, Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone)]
pub struct Corpus {
    images: Vec<ImageTensor>,
}

impl Corpus {
    pub fn new(images: Vec<ImageTensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        Ok(Self { images })
    }

    /// `count` procedural `size`x`size` images from `seed`.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count)
            .map(|_| synthetic_image(size, size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images)
    }

    /// Every readable image file directly inside `dir`, in name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let images = image_files(dir)?
            .iter()
            .map(ImageTensor::load)
            .collect::<Result<Vec<_>>>()?;
        Self::new(images)
    }

    pub fn from_config(config: &CorpusConfig, seed: u64) -> Result<Self> {
        match &config.directory {
            Some(dir) => Self::from_dir(dir),
            None => Self::synthetic(config.synthetic_count, config.synthetic_size, seed),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    /// A random `crop`x`crop` window of a random image, as `(3, crop, crop)`.
    /// Images smaller than the crop are reflect-padded first.
    pub fn random_crop<R: Rng>(&self, crop: usize, rng: &mut R) -> Result<Tensor> {
        let img = &self.images[rng.random_range(0..self.images.len())];
        let img = if img.height() < crop || img.width() < crop {
            img.pad_to_multiple(crop)?
        } else {
            img.clone()
        };
        let y = rng.random_range(0..=img.height() - crop);
        let x = rng.random_range(0..=img.width() - crop);
        let t = img.tensor().narrow(1, y, crop)?.narrow(2, x, crop)?.contiguous()?;
        Ok(if rng.random_bool(0.5) { t.flip(&[2])? } else { t })
    }

    /// `(batch, 3, crop, crop)` stack of independent random crops.
    pub fn batch<R: Rng>(&self, batch: usize, crop: usize, rng: &mut R) -> Result<Tensor> {
        let crops = (0..batch)
            .map(|_| self.random_crop(crop, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&crops, 0)?)
    }
}

/// Image files directly inside `dir`, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Writes `count` procedural images as PNG files `synthetic_XXXXX.png`.
pub fn write_synthetic(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("synthetic_{i:05}.png"));
            synthetic_image(size, size, &mut rng)?.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Coverage of a pixel whose centre is at signed distance `d` from an edge:
/// 1 inside, 0 outside, linear across one pixel.
fn coverage(d: f32) -> f32 {
    (0.5 - d).clamp(0.0, 1.0)
}

enum Shape {
    Disc { cx: f32, cy: f32, r: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32, angle: f32 },
    Stripes { cx: f32, cy: f32, r: f32, period: f32, angle: f32 },
}

impl Shape {
    fn random<R: Rng>(h: f32, w: f32, rng: &mut R) -> Self {
        let s = h.min(w);
        match rng.random_range(0..3) {
            0 => Shape::Disc {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                r: rng.random_range(0.05..0.3) * s,
            },
            1 => {
                let cx = rng.random_range(0.0..w);
                let cy = rng.random_range(0.0..h);
                let hw = rng.random_range(0.05..0.3) * s;
                let hh = rng.random_range(0.05..0.3) * s;
                Shape::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                    angle: rng.random_range(-0.6..0.6),
                }
            }
            _ => Shape::Stripes {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                r: rng.random_range(0.1..0.4) * s,
                period: rng.random_range(3.0..12.0),
                angle: rng.random_range(0.0..std::f32::consts::PI),
            },
        }
    }

    /// Coverage in `[0, 1]` and a texture factor at pixel centre `(x, y)`.
    fn sample(&self, x: f32, y: f32) -> (f32, f32) {
        match *self {
            Shape::Disc { cx, cy, r } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r;
                (coverage(d), 1.0)
            }
            Shape::Rect { x0, y0, x1, y1, angle } => {
                let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                let d = (u.abs() - (x1 - x0) / 2.0).max(v.abs() - (y1 - y0) / 2.0);
                (coverage(d), 1.0)
            }
            Shape::Stripes { cx, cy, r, period, angle } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r;
                let (s, c) = angle.sin_cos();
                let phase = (c * x + s * y) * std::f32::consts::TAU / period;
                (coverage(d), 0.5 + 0.5 * phase.sin())
            }
        }
    }
}

/// One procedural image: a tilted two-colour gradient with a low-frequency
/// wave, several soft-edged discs, rectangles and striped patches, and mild
/// sensor-like noise.
pub fn synthetic_image<R: Rng>(height: usize, width: usize, rng: &mut R) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(invalid("synthetic image needs a positive size"));
    }
    let (hf, wf) = (height as f32, width as f32);
    let color = |rng: &mut R| -> [f32; 3] { [0, 1, 2].map(|_| rng.random_range(0.0f32..1.0)) };
    let c0 = color(rng);
    let c1 = color(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    let wave_amp = rng.random_range(0.0f32..0.08);
    let wave_freq = rng.random_range(0.5f32..3.0) * std::f32::consts::TAU / hf.max(wf);
    let wave_angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (wa, wb) = (wave_angle.cos(), wave_angle.sin());

    let n_shapes = rng.random_range(3..9);
    let shapes: Vec<(Shape, [f32; 3])> = (0..n_shapes)
        .map(|_| (Shape::random(hf, wf, rng), color(rng)))
        .collect();
    let noise_sigma = rng.random_range(0.0f32..0.03);

    let plane = height * width;
    let mut px = vec![0f32; 3 * plane];
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let g = (((xf - wf / 2.0) * ga + (yf - hf / 2.0) * gb) / hf.max(wf) + 0.5).clamp(0.0, 1.0);
            let wave = wave_amp * ((xf * wa + yf * wb) * wave_freq).sin();
            let mut rgb = [0, 1, 2].map(|c| c0[c] * (1.0 - g) + c1[c] * g + wave);
            for (shape, col) in &shapes {
                let (cover, tex) = shape.sample(xf, yf);
                if cover > 0.0 {
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - cover) + col[c] * tex * cover;
                    }
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                px[c * plane + y * width + x] = *v;
            }
        }
    }
    if noise_sigma > 0.0 {
        for v in px.iter_mut() {
            let n: f32 = rng.sample(StandardNormal);
            *v += noise_sigma * n;
        }
    }
    ImageTensor::from_vec(px, height, width)
}

/// Deterministic shuffle of `0..n` from `rng`.
pub fn shuffled_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
