//! End-to-end CLI tests against the real binary (exit codes, file outputs).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drn::io::png::{png_read, png_write};
use drn::model::named_rng;
use drn::tensor::Tensor;
use rand::Rng;

fn drn_bin() -> &'static str {
    env!("CARGO_BIN_EXE_drn")
}

fn run(args: &[&str]) -> Output {
    Command::new(drn_bin())
        .args(args)
        .env_remove("DRN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_image(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = named_rng(seed, "pipeline.img");
    let mut img = Tensor::zeros([1, 3, size, size]);
    for c in 0..3 {
        let f = rng.gen_range(0.2..1.0);
        let p = rng.gen_range(0.0..6.28);
        for y in 0..size {
            for x in 0..size {
                let v = 0.5
                    + 0.3 * ((x as f32 * f * 0.4) + p).sin()
                    + 0.2 * ((y as f32 * f * 0.3) - p).cos();
                *img.at_mut(0, c, y, x) = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn write_images(dir: &Path, count: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        png_write(&synth_image(size, seed + i as u64), &dir.join(format!("im{i}.png"))).unwrap();
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = run(&["upscale"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage") || stderr(&out).contains("usage"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["count", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("train"));
}

#[test]
fn gradcheck_command_passes() {
    let out = run(&["gradcheck", "--instances", "3", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("result: PASS"));
}

#[test]
fn count_reports_published_scale_sizes() {
    let out = run(&["count", "--preset", "drn-s", "--scale", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("4.84M"), "{text}");
    assert!(text.contains("madds"), "{text}");

    let out = run(&["count", "--preset", "drn-l", "--scale", "8", "--h", "32", "--w", "32"]);
    assert!(stdout(&out).contains("10.06M"), "{}", stdout(&out));
}

#[test]
fn degrade_populates_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    let lr = dir.path().join("lr");
    write_images(&hr, 3, 34, 10);

    let out = run(&[
        "degrade", "--kernel", "bd", "--scale", "2",
        "--in", hr.to_str().unwrap(), "--out", lr.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for i in 0..3 {
        let img = png_read(&lr.join(format!("im{i}.png"))).unwrap();
        // 34 crops to 34 - 34 % 2 = 34, then halves to 17.
        assert_eq!(img.shape(), [1, 3, 17, 17]);
    }

    let out = run(&[
        "degrade", "--kernel", "nearest", "--scale", "8",
        "--in", hr.to_str().unwrap(), "--out", dir.path().join("lr8").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let img = png_read(&dir.path().join("lr8").join("im0.png")).unwrap();
    assert_eq!(img.shape(), [1, 3, 4, 4]);
}

fn train_args<'a>(hr: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--hr", hr, "--out", out,
        "--preset", "drn-t", "--scale", "2",
        "--iterations", "20", "--batch", "2", "--patch", "12",
        "--seed", "3", "--val-every", "10", "--holdout", "1",
    ]
}

#[test]
fn train_infer_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    write_images(&hr, 4, 32, 20);
    let ckpt = dir.path().join("model.ckpt");

    let out = run(&train_args(hr.to_str().unwrap(), ckpt.to_str().unwrap()));
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("model.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("# [model]")), "log header echoes config");
    assert_eq!(log.lines().filter(|l| l.starts_with("iter=")).count(), 20);
    assert!(log.lines().any(|l| l.contains("psnr=")), "validation cadence logged");

    // Degrade the HR set to get LR inputs, then super-resolve them.
    let lr_dir = dir.path().join("lr");
    let out = run(&[
        "degrade", "--kernel", "bicubic", "--scale", "2",
        "--in", hr.to_str().unwrap(), "--out", lr_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));

    let sr_dir = dir.path().join("sr");
    let out = run(&[
        "infer", "--checkpoint", ckpt.to_str().unwrap(),
        "--in", lr_dir.to_str().unwrap(), "--out", sr_dir.to_str().unwrap(),
        "--preset", "drn-t", "--scale", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let sr = png_read(&sr_dir.join("im0.png")).unwrap();
    assert_eq!(sr.shape(), [1, 3, 32, 32]);

    let csv_path = dir.path().join("scores.csv");
    let out = run(&[
        "eval", "--ref", hr.to_str().unwrap(), "--out", sr_dir.to_str().unwrap(),
        "--csv", csv_path.to_str().unwrap(), "--scale", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("protocol: channel=y shave=2"), "{table}");
    assert!(table.contains("mean"), "{table}");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("image,psnr_db,ssim\n"));
    assert!(csv.lines().last().unwrap().starts_with("mean,"));

    // eval can also run inference itself.
    let sr2 = dir.path().join("sr2");
    let out = run(&[
        "eval", "--ref", hr.to_str().unwrap(), "--out", sr2.to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(), "--in", lr_dir.to_str().unwrap(),
        "--preset", "drn-t", "--scale", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(sr2.join("im2.png").exists());
}

#[test]
fn adapt_requires_init_choice_and_runs_scratch() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    let unpaired = dir.path().join("unpaired");
    write_images(&hr, 3, 32, 30);
    write_images(&unpaired, 3, 16, 40);
    let out_ckpt = dir.path().join("adapted.ckpt");

    // Neither --pretrained nor --scratch: usage error.
    let out = run(&[
        "adapt", "--unpaired", unpaired.to_str().unwrap(), "--hr", hr.to_str().unwrap(),
        "--out", out_ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));

    // Missing pretrained checkpoint file: runtime error.
    let out = run(&[
        "adapt", "--unpaired", unpaired.to_str().unwrap(), "--hr", hr.to_str().unwrap(),
        "--out", out_ckpt.to_str().unwrap(),
        "--pretrained", dir.path().join("missing.ckpt").to_str().unwrap(),
        "--preset", "drn-t", "--scale", "2",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    // Scratch mode runs.
    let out = run(&[
        "adapt", "--unpaired", unpaired.to_str().unwrap(), "--hr", hr.to_str().unwrap(),
        "--out", out_ckpt.to_str().unwrap(), "--scratch",
        "--preset", "drn-t", "--scale", "2",
        "--adapt-iterations", "5", "--unpaired-batch", "1", "--paired-batch", "2",
        "--patch", "8", "--seed", "4", "--val-every", "0",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(out_ckpt.exists());
    assert!(stdout(&out).contains("rho = 33.3%"), "{}", stdout(&out));
}

#[test]
fn eval_empty_intersection_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    png_write(&synth_image(16, 1), &a.join("x.png")).unwrap();
    png_write(&synth_image(16, 2), &b.join("y.png")).unwrap();
    let out = run(&["eval", "--ref", a.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn drn_seed_env_is_the_seed_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    write_images(&hr, 2, 24, 50);

    let train = |tag: &str, seed_flag: Option<&str>, env: Option<&str>| -> Vec<u8> {
        let out_path = dir.path().join(format!("{tag}.ckpt"));
        let mut args = vec![
            "train".to_string(), "--hr".into(), hr.to_str().unwrap().into(),
            "--out".into(), out_path.to_str().unwrap().into(),
            "--preset".into(), "drn-t".into(), "--scale".into(), "2".into(),
            "--iterations".into(), "5".into(), "--batch".into(), "1".into(),
            "--patch".into(), "8".into(), "--val-every".into(), "0".into(),
        ];
        if let Some(seed) = seed_flag {
            args.push("--seed".into());
            args.push(seed.into());
        }
        let mut cmd = Command::new(drn_bin());
        cmd.args(&args).env_remove("DRN_SEED");
        if let Some(e) = env {
            cmd.env("DRN_SEED", e);
        }
        let out = cmd.output().unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(&out_path).unwrap()
    };

    let via_flag = train("flag", Some("77"), None);
    let via_env = train("env", None, Some("77"));
    let default0 = train("none", None, None);
    assert_eq!(via_flag, via_env, "env seed fallback differs from flag");
    assert_ne!(via_flag, default0, "defaulted seed should differ from 77");
    // Flag wins over env.
    let flag_and_env = train("both", Some("77"), Some("1234"));
    assert_eq!(flag_and_env, via_flag);
}

#[test]
fn config_file_applies_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path: PathBuf = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "[model]\npreset = drn-t\nscale = 2\nchannels = 4\n").unwrap();

    let out = run(&["count", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let small = stdout(&out);

    let out = run(&["count", "--config", cfg_path.to_str().unwrap(), "--channels", "8"]);
    let big = stdout(&out);
    let grab = |s: &str| -> u64 {
        s.lines()
            .find(|l| l.starts_with("params:"))
            .and_then(|l| l.split_whitespace().nth(6))
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    assert!(grab(&big) > grab(&small), "override did not grow the model: {small} vs {big}");

    std::fs::write(&cfg_path, "[model]\nwidth = 4\n").unwrap();
    let out = run(&["count", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown config key"), "{}", stderr(&out));
}
