use std::path::Path;
use std::process::{Command, Output};

fn platesr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_platesr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = platesr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

const TINY: &str = r#"
[denoiser]
preset = "compact"
base_channels = 8
channel_multipliers = [1, 2, 2, 2]
time_embed_dim = 16
norm_groups = 4

[schedule]
timesteps = 6
beta_start = 1e-3
beta_end = 0.3

[train]
batch_size = 2
crop_size = 32
warmup_steps = 2
checkpoint_every = 2
augment_angles = [5.0]
"#;

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();

    ok(&["synth", s(&d.join("plates")), "--count", "4", "--seed", "3"]);
    assert_eq!(std::fs::read_dir(d.join("plates")).unwrap().count(), 5);
    assert_eq!(manifest(&d.join("plates"))["command"], "synth");

    ok(&["prepare", s(&d.join("plates")), s(&d.join("ds")), "--train-count", "3", "--synthetic"]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ds/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 4);

    ok(&["--config", s(&cfg), "train", s(&d.join("ds")), s(&d.join("run")), "--max-steps", "3", "--seed", "1"]);
    let log = std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].as_f64().unwrap().is_finite());
    }
    let run = manifest(&d.join("run"));
    assert_eq!(run["config"]["timesteps"], 6);
    assert_eq!(run["config"]["train"]["crop_size"], 32);
    assert_eq!(run["seeds"]["train"], 1);
    let ckpt = d.join("run/checkpoint_000003.ckpt");
    assert!(ckpt.is_file() && d.join("run/checkpoint_000002.ckpt").is_file());

    ok(&["--config", s(&cfg), "train", s(&d.join("ds")), s(&d.join("resumed")), "--max-steps", "4",
         "--seed", "1", "--resume", s(&ckpt)]);
    assert!(d.join("resumed/checkpoint_000004.ckpt").is_file());

    let lr_dir = d.join("ds/lr");
    ok(&["sr", s(&ckpt), s(&lr_dir), s(&d.join("sr")), "--seed", "2", "--trace-stride", "6"]);
    ok(&["sr", s(&ckpt), s(&lr_dir), s(&d.join("sr2")), "--seed", "2", "--batch", "3"]);
    let first = std::fs::read_dir(&lr_dir).unwrap().next().unwrap().unwrap().file_name();
    let out = platesr::ImageTensor::load_png(d.join("sr").join(&first)).unwrap();
    assert_eq!(out.dims(), (192, 192, 3));
    assert_eq!(
        std::fs::read(d.join("sr").join(&first)).unwrap(),
        std::fs::read(d.join("sr2").join(&first)).unwrap()
    );
    let stem = Path::new(&first).file_stem().unwrap();
    let frames = std::fs::read_dir(d.join("sr/trace").join(stem)).unwrap().count();
    assert_eq!(frames, 2);

    ok(&["eval", s(&d.join("ds/hr")), "--method", &format!("ours={}", s(&d.join("sr"))),
         "--method", &format!("copy={}", s(&d.join("ds/hr"))), "--out-dir", s(&d.join("eval"))]);
    let csv = std::fs::read_to_string(d.join("eval/report.csv")).unwrap();
    assert!(csv.starts_with("id,method,psnr_db,ssim,ms_ssim"));
    assert!(csv.contains(",copy,inf,1.000000,1.000000"));

    let methods: Vec<String> = ["a=sr", "b=sr2", "c=ds/hr"]
        .iter()
        .map(|m| {
            let (n, p) = m.split_once('=').unwrap();
            format!("{n}={}", s(&d.join(p)))
        })
        .collect();
    let hr = d.join("ds/hr");
    let b3 = d.join("bundle3");
    let mut args = vec!["bundle-study", s(&hr)];
    for m in &methods {
        args.extend(["--method", m.as_str()]);
    }
    let b1 = d.join("bundle1");
    let b2 = d.join("bundle2");
    let mut a1 = args.clone();
    a1.extend(["--questions", "3", "--seed", "4", s(&b1)]);
    ok(&a1);
    let mut a2 = args.clone();
    a2.extend(["--questions", "3", "--seed", "4", s(&b2)]);
    ok(&a2);
    assert_eq!(
        std::fs::read(b1.join("questions.json")).unwrap(),
        std::fs::read(b2.join("questions.json")).unwrap()
    );
    let mut too_many = args.clone();
    too_many.extend(["--questions", "11", s(&b3)]);
    assert!(!platesr(&too_many).status.success());
}

#[test]
fn failures_print_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = platesr(&["prepare", s(&empty), s(&dir.path().join("out"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert!(v["error"].is_string() && v["message"].is_string());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[nonsense]\nx = 1\n").unwrap();
    let out = platesr(&["--config", s(&bad), "synth", s(&dir.path().join("p")), "--count", "1"]);
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "config");
}

#[test]
fn prepare_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", s(&d.join("p")), "--count", "6", "--seed", "1"]);
    ok(&["prepare", s(&d.join("p")), s(&d.join("a")), "--split-ratio", "0.5", "--seed", "9"]);
    ok(&["prepare", s(&d.join("p")), s(&d.join("b")), "--split-ratio", "0.5", "--seed", "9"]);
    assert_eq!(
        std::fs::read(d.join("a/manifest.json")).unwrap(),
        std::fs::read(d.join("b/manifest.json")).unwrap()
    );
}

#[test]
fn short_schedules_need_explicit_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", s(&d.join("plates")), "--count", "2", "--seed", "3"]);
    ok(&["prepare", s(&d.join("plates")), s(&d.join("ds")), "--train-count", "1", "--synthetic"]);
    let cfg = d.join("short.toml");
    std::fs::write(&cfg, TINY.replace("beta_start = 1e-3\nbeta_end = 0.3\n", "")).unwrap();
    let out = platesr(&["--config", s(&cfg), "train", s(&d.join("ds")), s(&d.join("run")), "--max-steps", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("too few"));
}
