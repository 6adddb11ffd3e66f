use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const EXIT_IO: i32 = 74;
const EXIT_VALIDATION: i32 = 65;

fn ldc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldc"))
        .args(args)
        .env_remove("LDC_CHECKPOINT_DIR")
        .output()
        .expect("spawn ldc")
}

fn ok(args: &[&str]) -> String {
    let out = ldc(args);
    assert!(
        out.status.success(),
        "ldc {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A smoke-trained checkpoint and a few images, shared by all tests.
struct Fixture {
    _root: TempDir,
    checkpoint: PathBuf,
    images: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let checkpoint = root.path().join("ckpt");
        let images = root.path().join("images");
        ok(&["train", "--preset", "smoke", "--seed", "3", "--out", s(&checkpoint)]);
        ok(&["synthetic-corpus", s(&images), "--count", "3", "--size", "36", "--seed", "9"]);
        Fixture {
            _root: root,
            checkpoint,
            images,
        }
    })
}

fn first_image(f: &Fixture) -> PathBuf {
    let mut files: Vec<PathBuf> = fs::read_dir(&f.images).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.remove(0)
}

#[test]
fn encode_decode_round_trip_is_deterministic() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("a.ldc");
    let (x1, x2) = (dir.path().join("x1.png"), dir.path().join("x2.png"));
    let ck = s(&f.checkpoint);
    let summary = ok(&["encode", s(&first_image(f)), "--lambda", "5", "--out", s(&stream), "--checkpoint-dir", ck]);
    assert!(summary.contains("bpp") && summary.contains("tau"), "{summary}");
    ok(&["decode", s(&stream), "--out", s(&x1), "--checkpoint-dir", ck]);
    ok(&["decode", s(&stream), "--out", s(&x2), "--checkpoint-dir", ck]);
    assert_eq!(fs::read(&x1).unwrap(), fs::read(&x2).unwrap());
    let img = ldc_core::autoencoder::ImageTensor::load(&x1).unwrap();
    assert_eq!((img.height(), img.width()), (36, 36));

    let again = dir.path().join("b.ldc");
    ok(&["encode", s(&first_image(f)), "--lambda", "5", "--out", s(&again), "--checkpoint-dir", ck]);
    assert_eq!(fs::read(&stream).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn forced_zero_timestep_skips_the_denoiser() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("t0.ldc");
    let ck = s(&f.checkpoint);
    let enc = ok(&["encode", s(&first_image(f)), "--timestep", "0", "--out", s(&stream), "--checkpoint-dir", ck]);
    assert!(enc.contains(" t 0 "), "{enc}");
    let dec = ok(&["decode", s(&stream), "--out", s(&dir.path().join("x.png")), "--checkpoint-dir", ck]);
    assert!(dec.contains("t 0, 0 denoiser calls"), "{dec}");
}

#[test]
fn checkpoint_dir_from_environment() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("e.ldc");
    let out = Command::new(env!("CARGO_BIN_EXE_ldc"))
        .args(["encode", s(&first_image(f)), "--out", s(&stream)])
        .env("LDC_CHECKPOINT_DIR", &f.checkpoint)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(ldc(&["encode", s(&first_image(f)), "--out", s(&stream)]).status.code(), Some(EXIT_VALIDATION));
}

#[test]
fn exit_codes_separate_io_and_validation() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = s(&f.checkpoint);
    let stream = dir.path().join("a.ldc");
    let missing = ldc(&["encode", "/nonexistent/x.png", "--out", s(&stream), "--checkpoint-dir", ck]);
    assert_eq!(missing.status.code(), Some(EXIT_IO));
    let bad_lambda = ldc(&["encode", s(&first_image(f)), "--lambda=-1", "--out", s(&stream), "--checkpoint-dir", ck]);
    assert_eq!(bad_lambda.status.code(), Some(EXIT_VALIDATION));
    let bad_device = ldc(&["encode", s(&first_image(f)), "--device", "cuda", "--out", s(&stream), "--checkpoint-dir", ck]);
    assert_eq!(bad_device.status.code(), Some(EXIT_VALIDATION));

    ok(&["encode", s(&first_image(f)), "--out", s(&stream), "--checkpoint-dir", ck]);
    let mut bytes = fs::read(&stream).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x5a;
    let tampered = dir.path().join("t.ldc");
    fs::write(&tampered, &bytes).unwrap();
    let out = ldc(&["decode", s(&tampered), "--out", s(&dir.path().join("x.png")), "--checkpoint-dir", ck]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "batch_size = 0\n").unwrap();
    let out = ldc(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
}

#[test]
fn eval_emits_one_record_per_image() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("eval.csv");
    let plots = dir.path().join("plots");
    ok(&[
        "eval",
        s(&f.images),
        "--lambda",
        "5",
        "--out",
        s(&csv),
        "--plots",
        s(&plots),
        "--checkpoint-dir",
        s(&f.checkpoint),
    ]);
    let records = ldc_core::evaluation::read_records(fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.lambda == Some(5.0) && r.backbone_calls == r.timestep));
    assert!(plots.join("rd_psnr.svg").exists());
}

#[test]
fn sweep_writes_the_full_grid() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("grid.csv");
    ok(&[
        "sweep",
        s(&f.images),
        "--steps",
        "0.5,0.1,0.02",
        "--diffusion-steps",
        "0,3",
        "--lambda",
        "1,20",
        "--out",
        s(&csv),
        "--checkpoint-dir",
        s(&f.checkpoint),
    ]);
    let records = ldc_core::evaluation::read_records(fs::File::open(&csv).unwrap()).unwrap();
    let naive = records.iter().filter(|r| r.method == "naive").count();
    let codec = records.iter().filter(|r| r.method == "ldc").count();
    assert_eq!((naive, codec), (3 * 3 * 2, 3 * 2));
    assert!(records.iter().filter(|r| r.method == "naive").all(|r| r.backbone_calls == r.timestep));
}

#[test]
fn bench_reports_calls_and_parameters() {
    let f = fixture();
    let out = ok(&[
        "bench",
        s(&f.images),
        "--decode-timesteps",
        "1,4",
        "--checkpoint-dir",
        s(&f.checkpoint),
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["calls_match_timestep"], true);
    assert!(v["trained_parameters"].as_u64().unwrap() > 0);
    assert!(v["backbone_parameters"].as_u64().unwrap() > 0);
    assert_eq!(v["forced_decodes"].as_array().unwrap().len(), 2);
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

#[test]
fn bundled_log_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("log.csv");
    ok(&["synthetic-log", "--out", s(&out)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(data("comparisons_600.csv")).unwrap());
}

#[test]
fn elo_on_bundled_log_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["per_comparison", "per_participant"] {
        let out = dir.path().join(format!("{mode}.csv"));
        let plot = dir.path().join(format!("{mode}.svg"));
        let text = ok(&[
            "elo",
            s(&data("comparisons_600.csv")),
            "--mode",
            mode,
            "--seed",
            "7",
            "--out",
            s(&out),
            "--plot",
            s(&plot),
        ]);
        assert!(text.contains("K 32") && text.contains("chosen defaults"), "{text}");
        let golden = fs::read_to_string(data(&format!("elo_{mode}.csv"))).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), golden, "{mode}");
        assert!(fs::read_to_string(&plot).unwrap().starts_with("<svg"));
    }
    let unknown = ldc(&["elo", s(&data("comparisons_600.csv")), "--methods", "ours,cdc", "--iterations", "10"]);
    assert_eq!(unknown.status.code(), Some(EXIT_VALIDATION));
    let mode = ldc(&["elo", s(&data("comparisons_600.csv")), "--mode", "per_image"]);
    assert_eq!(mode.status.code(), Some(EXIT_VALIDATION));
}
