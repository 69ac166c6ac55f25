use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC: &str = "videos = 2\nframes_per_video = 6\nimage = 32x32x3\nmissing.expr = 0.2\nseed = 4\n";

fn mttoken(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mttoken"));
    cmd.args(args).env_remove("MTTOKEN_SEED").env("RUST_LOG", "warn");
    cmd
}

fn ok(mut cmd: Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dataset(dir: &TempDir) -> PathBuf {
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, SPEC).unwrap();
    let manifest = dir.path().join("data.jsonl");
    ok(mttoken(&["gen-data", "--spec", p(&spec), "--out", p(&manifest)]));
    manifest
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Command {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--set", "train.steps=5"];
    args.extend_from_slice(extra);
    mttoken(&args)
}

#[test]
fn training_twice_writes_identical_checkpoints() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    ok(train(&data, &a, &["--set", "train.mixup=0.4"]));
    ok(train(&data, &b, &["--set", "train.mixup=0.4"]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn seed_variable_changes_the_model_and_set_wins() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let base = dir.path().join("base.ckpt");
    let env = dir.path().join("env.ckpt");
    let both = dir.path().join("both.ckpt");
    ok(train(&data, &base, &[]));
    let mut cmd = train(&data, &env, &[]);
    cmd.env("MTTOKEN_SEED", "9");
    ok(cmd);
    assert_ne!(fs::read(&base).unwrap(), fs::read(&env).unwrap());

    let mut cmd = train(&data, &both, &["--set", "seed=0"]);
    cmd.env("MTTOKEN_SEED", "9");
    ok(cmd);
    assert_eq!(fs::read(&base).unwrap(), fs::read(&both).unwrap());
}

#[test]
fn predict_smooth_eval_pipeline() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let ckpt = dir.path().join("m.ckpt");
    let trace = dir.path().join("trace.csv");
    ok(train(&data, &ckpt, &["--trace", p(&trace)]));
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 6);

    let raw = dir.path().join("raw.csv");
    ok(mttoken(&["predict", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&raw)]));
    let raw_text = fs::read_to_string(&raw).unwrap();
    assert_eq!(raw_text.lines().count(), 13);
    assert!(raw_text.starts_with("video_id,frame_index,v,a,u_au_1"));

    let smooth = dir.path().join("smooth.csv");
    ok(mttoken(&["smooth", "--in", p(&raw), "--out", p(&smooth), "--window", "3", "--align", "trailing"]));
    let header = fs::read_to_string(&smooth).unwrap().lines().next().unwrap().to_string();
    assert!(header.ends_with("e_hat_8"));

    let report = dir.path().join("report.json");
    let out = ok(mttoken(&["eval", "--pred", p(&smooth), "--truth", p(&data), "--report", p(&report)]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("abaw4_score:"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let sum = json["au_f1"].as_f64().unwrap() + json["expr_f1"].as_f64().unwrap() + json["va_ccc"].as_f64().unwrap();
    assert_eq!(json["abaw4_score"].as_f64().unwrap(), sum);
}

#[test]
fn materialized_images_load_like_seeded_ones() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, SPEC).unwrap();
    let manifest = dir.path().join("data.jsonl");
    let images = dir.path().join("img");
    ok(mttoken(&["gen-data", "--spec", p(&spec), "--out", p(&manifest), "--materialize", p(&images)]));
    assert_eq!(fs::read_dir(&images).unwrap().count(), 12);

    let ckpt = dir.path().join("m.ckpt");
    ok(train(&manifest, &ckpt, &["--set", "train.steps=2"]));
    let preds = dir.path().join("p.csv");
    ok(mttoken(&["predict", "--ckpt", p(&ckpt), "--data", p(&manifest), "--out", p(&preds)]));
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 13);
}

#[test]
fn gradcheck_passes() {
    let out = ok(mttoken(&["gradcheck"]));
    assert!(String::from_utf8(out.stdout).unwrap().contains("max relative error"));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let ckpt = dir.path().join("m.ckpt");
    let cases: Vec<Command> = vec![
        train(&data, &ckpt, &["--set", "optim.lr=-1"]),
        train(&data, &ckpt, &["--set", "no.such.key=1"]),
        {
            let mut c = train(&data, &ckpt, &[]);
            c.env("MTTOKEN_SEED", "abc");
            c
        },
        mttoken(&["predict", "--ckpt", p(&data), "--data", p(&data), "--out", p(&ckpt)]),
        mttoken(&["smooth", "--in", p(&data), "--out", p(&ckpt), "--window", "0"]),
    ];
    for mut cmd in cases {
        let out = cmd.output().unwrap();
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    }
    assert!(!ckpt.exists());
}
