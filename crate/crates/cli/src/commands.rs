use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ldc_core::autoencoder::ImageTensor;
use ldc_core::checkpoint::{CodecModels, CHECKPOINT_DIR_ENV};
use ldc_core::codec::{select_device, CodecContext, CodecOptions, DEFAULT_MAX_PIXELS};
use ldc_core::evaluation::{
    benchmark, curve_points, elo_box_chart, elo_rank, evaluate_codec, line_chart, naive_sweep, perceptual_scores, synthetic_log,
    time_decode, write_records, ComparisonLog, CurvePoint, EloConfig, EvalRecord, PyramidExtractor, Series, METHOD_CODEC,
};
use ldc_core::param_estimator::RateCondition;
use ldc_core::training::{image_files, train, write_synthetic, TrainConfig};
use ldc_core::{Error, Result};

use crate::{Cli, Command, Preset};

/// Seed of the bundled comparison log.
pub const BUNDLED_LOG_SEED: u64 = 2024;

/// True ratings behind simulated comparison logs.
const SIMULATED_METHODS: [(&str, f64); 6] = [
    ("ours", 1120.0),
    ("cdc", 1040.0),
    ("illm", 1010.0),
    ("hific", 980.0),
    ("hfd", 950.0),
    ("bpg", 880.0),
];

fn validation(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

fn checkpoint(cli_dir: &Option<PathBuf>) -> Result<&Path> {
    cli_dir.as_deref().ok_or_else(|| {
        validation(format!(
            "no checkpoint directory; pass --checkpoint-dir or set {CHECKPOINT_DIR_ENV}"
        ))
    })
}

fn load_context(dir: &Path, max_pixels: Option<usize>) -> Result<CodecContext> {
    let models = CodecModels::load(dir)?;
    let options = CodecOptions {
        rescale_input: models.manifest.rescale_input,
        max_pixels: max_pixels.unwrap_or(DEFAULT_MAX_PIXELS),
        ..Default::default()
    };
    CodecContext::from_models(models, options)
}

fn lambda(value: f64) -> Result<RateCondition> {
    let l = RateCondition::new(value)?;
    if l.is_extrapolation() {
        log::warn!("lambda {value} is outside the trained set; the estimator extrapolates");
    }
    Ok(l)
}

fn load_images(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(validation(format!("no images in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, ImageTensor::load(p)?))
        })
        .collect()
}

fn write_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_records(BufWriter::new(File::create(path)?), records)
}

fn print_points(points: &[CurvePoint]) {
    println!(
        "{:<6} {:>7} {:>7} {:>7} {:>8} {:>8} {:>8} {:>9}",
        "method", "lambda", "step", "t", "bpp", "psnr", "ms_ssim", "lpips_lk"
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for p in points {
        println!(
            "{:<6} {:>7} {:>7} {:>7.1} {:>8.4} {:>8.2} {:>8} {:>9}",
            p.method,
            p.lambda.map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
            p.quant_step.map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
            p.timestep,
            p.bpp,
            p.psnr,
            opt(p.ms_ssim),
            opt(p.lpips_like)
        );
    }
}

/// PSNR and MS-SSIM against bpp, one series per method and timestep group.
fn rd_plots(dir: &Path, points: &[CurvePoint]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut groups: Vec<(String, Vec<&CurvePoint>)> = Vec::new();
    for p in points {
        let name = if p.method == METHOD_CODEC {
            p.method.clone()
        } else {
            format!("{} t={}", p.method, p.timestep)
        };
        match groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push(p),
            None => groups.push((name, vec![p])),
        }
    }
    let series = |metric: &dyn Fn(&CurvePoint) -> Option<f64>| -> Vec<Series> {
        groups
            .iter()
            .map(|(name, pts)| {
                let mut points: Vec<(f64, f64)> = pts.iter().filter_map(|p| metric(p).map(|m| (p.bpp, m))).collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name: name.clone(),
                    points,
                }
            })
            .filter(|s| !s.points.is_empty())
            .collect()
    };
    fs::write(dir.join("rd_psnr.svg"), line_chart("Rate-distortion", "bpp", "PSNR [dB]", &series(&|p| Some(p.psnr))))?;
    let ms = series(&|p| p.ms_ssim);
    if !ms.is_empty() {
        fs::write(dir.join("rd_ms_ssim.svg"), line_chart("Rate-distortion", "bpp", "MS-SSIM", &ms))?;
    }
    let lp = series(&|p| p.lpips_like);
    if !lp.is_empty() {
        fs::write(dir.join("rd_lpips_like.svg"), line_chart("Rate-perception", "bpp", "LPIPS-like", &lp))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    select_device(&cli.device)?;
    match cli.command {
        Command::Encode {
            input,
            lambda: l,
            out,
            timestep,
            max_pixels,
        } => {
            let ctx = load_context(checkpoint(&cli.checkpoint_dir)?, max_pixels)?;
            let image = ImageTensor::load(&input)?;
            let analyzed = ctx.analyze(&image, lambda(l)?, timestep)?;
            let encoded = ctx.entropy_encode(&analyzed)?;
            fs::write(&out, &encoded.bytes)?;
            let scales: Vec<String> = (0..analyzed.gamma.channels())
                .map(|c| format!("{:.4}", analyzed.gamma.scale(c)))
                .collect();
            println!(
                "{}: {} bytes, {:.4} bpp, t {} (tau {:.5}), scales [{}]",
                out.display(),
                encoded.bytes.len(),
                encoded.bpp(),
                analyzed.timestep,
                analyzed.tau,
                scales.join(", ")
            );
            if encoded.clamped > 0 {
                log::warn!("{} latent values saturated at the symbol bound", encoded.clamped);
            }
        }
        Command::Decode { input, out, max_pixels } => {
            let ctx = load_context(checkpoint(&cli.checkpoint_dir)?, max_pixels)?;
            let bytes = fs::read(&input)?;
            let decoded = ctx.decode(&bytes)?;
            decoded.image.save(&out)?;
            println!(
                "{}: {}x{}, t {}, {} denoiser calls",
                out.display(),
                decoded.image.width(),
                decoded.image.height(),
                decoded.timestep,
                decoded.backbone_calls
            );
        }
        Command::Train {
            config,
            preset,
            steps,
            out,
            metrics,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => match preset {
                    Preset::Default => TrainConfig::default(),
                    Preset::Quick => TrainConfig::quick(),
                    Preset::Smoke => TrainConfig::smoke(),
                    Preset::Paper => TrainConfig::paper_scale(),
                },
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            let (_, summary) = train(&cfg, Some(&out), metrics.as_deref())?;
            fs::write(out.join("train_config.toml"), cfg.to_toml()?)?;
            println!(
                "checkpoint {}: {} codec steps ({} skipped), final loss {:.4}, latent scale {:.4}",
                out.display(),
                summary.codec.len(),
                summary.skipped_steps,
                summary.tail_loss(50.min(summary.codec.len().max(1))),
                summary.latent_scale
            );
        }
        Command::Eval {
            dir,
            lambdas,
            out,
            plots,
            min_fid_samples,
        } => {
            let ctx = load_context(checkpoint(&cli.checkpoint_dir)?, None)?;
            for &l in &lambdas {
                lambda(l)?;
            }
            let images = load_images(&dir)?;
            let ex = PyramidExtractor::default();
            let (records, recons) = evaluate_codec(&ctx, &images, &lambdas, Some(&ex))?;
            write_csv(&out, &records)?;
            let points = curve_points(&records);
            print_points(&points);
            let originals: Vec<ImageTensor> = images.iter().map(|(_, x)| x.clone()).collect();
            for (i, &l) in lambdas.iter().enumerate() {
                let set: Vec<ImageTensor> = recons.iter().skip(i).step_by(lambdas.len()).cloned().collect();
                let scores = perceptual_scores(&originals, &set, Some(&ex), min_fid_samples)?;
                match scores.fid_like {
                    Some(f) => println!("lambda {l}: FID-like {f:.5} over {} images", scores.samples),
                    None => println!("lambda {l}: FID-like skipped ({})", scores.notices.join("; ")),
                }
            }
            if let Some(p) = plots {
                rd_plots(&p, &points)?;
            }
        }
        Command::Sweep {
            dir,
            steps,
            diffusion_steps,
            lambdas,
            out,
            plots,
        } => {
            let ctx = load_context(checkpoint(&cli.checkpoint_dir)?, None)?;
            let images = load_images(&dir)?;
            let ex = PyramidExtractor::default();
            let mut records = naive_sweep(&ctx, &images, &steps, &diffusion_steps, Some(&ex))?;
            if !lambdas.is_empty() {
                for &l in &lambdas {
                    lambda(l)?;
                }
                records.extend(evaluate_codec(&ctx, &images, &lambdas, Some(&ex))?.0);
            }
            write_csv(&out, &records)?;
            let points = curve_points(&records);
            print_points(&points);
            if let Some(p) = plots {
                rd_plots(&p, &points)?;
            }
        }
        Command::Elo {
            log,
            mode,
            iterations,
            k_factor,
            initial_rating,
            methods,
            out,
            plot,
        } => {
            let comparisons = ComparisonLog::read_csv(File::open(&log)?)?;
            let config = EloConfig {
                mode: mode.parse()?,
                k_factor,
                initial_rating,
                iterations,
                seed: cli.seed.unwrap_or(0),
            };
            let known = (!methods.is_empty()).then_some(methods.as_slice());
            let report = elo_rank(&comparisons, &config, known)?;
            print!("{report}");
            if let Some(path) = out {
                report.write_csv(BufWriter::new(File::create(path)?))?;
            }
            if let Some(path) = plot {
                fs::write(path, elo_box_chart(&format!("Elo ({})", config.mode), &report))?;
            }
        }
        Command::Bench {
            dir,
            lambda: l,
            decode_timesteps,
            out,
        } => {
            let ctx = load_context(checkpoint(&cli.checkpoint_dir)?, None)?;
            lambda(l)?;
            let images = load_images(&dir)?;
            let report = benchmark(&ctx, &images, l)?;
            let mut json = serde_json::to_value(&report).map_err(|e| validation(e.to_string()))?;
            let mut forced = Vec::new();
            for &t in &decode_timesteps {
                forced.push(serde_json::json!({"timestep": t, "seconds": time_decode(&ctx, &images[0].1, l, t, 3)?}));
            }
            json["forced_decodes"] = serde_json::Value::Array(forced);
            json["decode_fraction"] = report.decode_fraction().into();
            let text = serde_json::to_string_pretty(&json).map_err(|e| validation(e.to_string()))?;
            println!("{text}");
            if let Some(path) = out {
                fs::write(path, text + "\n")?;
            }
        }
        Command::SyntheticCorpus { dir, count, size } => {
            let files = write_synthetic(&dir, count, size, cli.seed.unwrap_or(0))?;
            println!("wrote {} images to {}", files.len(), dir.display());
        }
        Command::SyntheticLog {
            out,
            rows,
            participants,
            images,
        } => {
            let log = synthetic_log(
                &SIMULATED_METHODS,
                participants,
                images,
                rows,
                cli.seed.unwrap_or(BUNDLED_LOG_SEED),
            )?;
            log.write_csv(BufWriter::new(File::create(&out)?))?;
            println!("wrote {} comparisons to {}", log.rows.len(), out.display());
        }
    }
    Ok(())
}
