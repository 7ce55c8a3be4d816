use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uie::io::save_image;
use uie::ImageTensor;

fn uie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uie")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let raw = ImageTensor::from_fn(32, 32, |c, y, x| (0.1 + 0.02 * x as f64 + 0.01 * y as f64 * c as f64).min(1.0)).unwrap();
        let label = ImageTensor::from_fn(32, 32, |c, y, x| ((x * 7 + y * 3 + c * 50) % 256) as f64 / 255.0).unwrap();
        save_image(&raw, &root.join("data/raw.ppm")).unwrap();
        save_image(&label, &root.join("data/label.png")).unwrap();
        fs::write(
            root.join("data/pairs.jsonl"),
            "{\"id\": \"p\", \"raw_path\": \"raw.ppm\", \"label_path\": \"label.png\"}\n",
        )
        .unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let manifest = s(&self.path("data/pairs.jsonl"));
        let out = s(&self.path(out));
        let mut args = vec!["train", "--manifest", &manifest, "--size", "32", "--out", &out];
        args.extend_from_slice(extra);
        uie(&args)
    }
}

#[test]
fn config_file_steps_yield_to_flags() {
    let f = Fixture::new();
    let cfg = f.path("run.toml");
    fs::write(&cfg, "steps = 1\nsize = 16\n").unwrap();
    let c = s(&cfg);
    let o = f.train("a", &["--config", &c]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(f.path("a/train_log.jsonl")).unwrap().lines().count(), 1);
    let o = f.train("b", &["--config", &c, "--steps", "2"]);
    assert!(o.status.success());
    let log = fs::read_to_string(f.path("b/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["total"].as_f64().unwrap().is_finite());
}

#[test]
fn unknown_config_key_is_rejected() {
    let f = Fixture::new();
    fs::write(f.path("bad.toml"), "stepz = 3\n").unwrap();
    let o = uie(&["--config", &s(&f.path("bad.toml")), "histogram", &s(&f.path("data/raw.ppm"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}

#[test]
fn enhance_writes_one_image_or_six_with_components() {
    let f = Fixture::new();
    assert!(f.train("t", &["--steps", "1"]).status.success());
    let ck = s(&f.path("t/checkpoint.muie"));
    let input = s(&f.path("data/label.png"));
    let o = uie(&["enhance", "--checkpoint", &ck, "--out", &s(&f.path("e1")), &input]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(listing(&f.path("e1")), ["label.png"]);
    let o = uie(&["enhance", "--dump-components", "--checkpoint", &ck, "--out", &s(&f.path("e2")), &input]);
    assert!(o.status.success());
    assert_eq!(listing(&f.path("e2")).len(), 6);
}

#[test]
fn enhance_without_checkpoint_fails() {
    let f = Fixture::new();
    let o = uie(&["enhance", "--out", &s(&f.path("x")), &s(&f.path("data/raw.ppm"))]);
    assert!(!o.status.success());
    assert!(!f.path("x").exists());
}

#[test]
fn evaluate_reports_pairs_and_flags_missing_files() {
    let f = Fixture::new();
    let out = f.path("ev");
    let o = uie(&["evaluate", "--manifest", &s(&f.path("data/pairs.jsonl")), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(rec["id"], "p");
    assert!(rec["psnr_db"].as_f64().is_some() && rec["uiqm"].as_f64().is_some());

    fs::write(
        f.path("data/broken.jsonl"),
        "{\"id\": \"ok\", \"raw_path\": \"raw.ppm\"}\n{\"id\": \"gone\", \"raw_path\": \"missing.ppm\"}\n",
    )
    .unwrap();
    let out = f.path("ev2");
    let o = uie(&["evaluate", "--manifest", &s(&f.path("data/broken.jsonl")), "--out", &s(&out)]);
    assert!(!o.status.success());
    let text = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(text.contains("\"ok\"") && text.contains("gone"));
}

#[test]
fn gbl_prints_clamped_light() {
    let f = Fixture::new();
    let o = uie(&["gbl", "--image", "--out", &s(&f.path("g")), &s(&f.path("data/raw.ppm"))]);
    assert!(o.status.success());
    let v: Vec<f64> = String::from_utf8_lossy(&o.stdout).split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(v.len(), 3);
    assert!(v.iter().all(|x| (5.0..=250.0).contains(x)));
    assert_eq!(listing(&f.path("g")), ["raw_background_light.ppm"]);
}

#[test]
fn selftest_can_run_one_suite() {
    let o = uie(&["selftest", "--suite", "2"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).all(|l| l.contains("[suite 2]")));
}
