use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "sequences = 1\n[scene]\nn_frames = 10\n[train]\nepochs = 2\n";
const ALIGNED: &str = "\
sequences = 2
[scene]
grid_aligned = true
artifact_rate = 0.0
speed_range = [1.25, 2.5]
n_frames = 10
";

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bevmotion"))
            .arg("--out")
            .arg(self.out())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> PathBuf {
        let o = self.run(args);
        let stderr = String::from_utf8_lossy(&o.stderr);
        assert!(o.status.success(), "{args:?}: {stderr}");
        let dir = stderr.lines().find_map(|l| l.strip_prefix("run directory: ")).unwrap();
        PathBuf::from(dir)
    }

    fn fails(&self, args: &[&str]) -> (i32, String) {
        let o = self.run(args);
        assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
        (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

fn kv(dir: &Path) -> HashMap<String, String> {
    fs::read_to_string(dir.join("metrics.kv"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_then_pseudo_recovers_aligned_motion_exactly() {
    let env = Env::new();
    let cfg = env.config("aligned.toml", ALIGNED);
    let data = env.dir.path().join("data");
    env.ok(&["--config", s(&cfg), "--data", s(&data), "gen"]);
    assert!(data.join("seq_000").join("manifest.toml").exists());
    let run = env.ok(&["--config", s(&cfg), "--data", s(&data), "pseudo"]);
    let m = kv(&run);
    assert_eq!(m["recovery.epe_mean"], "0e0");
    assert_eq!(m["recovery.epe_max"], "0e0");
    assert_eq!(m["recovery.exact_fraction"], "1e0");
    assert!(run.join("pseudo_labels.txt").exists());
}

#[test]
fn oracle_eval_reports_zero_error() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let run = env.ok(&["--config", s(&cfg), "eval", "--oracle"]);
    let m = kv(&run);
    for g in ["static", "slow", "fast"] {
        let v = &m[&format!("{g}.mean_error")];
        assert!(v == "0e0" || v == "absent", "{g}: {v}");
    }
    assert_eq!(m["static.mean_error"], "0e0");
}

#[test]
fn train_then_eval_checkpoint() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let run = env.ok(&["--config", s(&cfg), "train"]);
    for f in ["checkpoint.bin", "loss_curve.csv", "metrics.kv", "report.txt", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let trained = kv(&run);

    let ckpt = run.join("checkpoint.bin");
    let eval = env.ok(&["--config", s(&cfg), "--checkpoint", s(&ckpt), "eval"]);
    let evaluated = kv(&eval);
    // The checkpoint stores f32 weights, so errors agree to single precision.
    let a: f64 = trained["static.mean_error"].parse().unwrap();
    let b: f64 = evaluated["static.mean_error"].parse().unwrap();
    assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn weights_override_changes_results_and_hash() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let full = kv(&env.ok(&["--config", s(&cfg), "--weights", "full", "train"]));
    let sup = kv(&env.ok(&["--config", s(&cfg), "--weights", "sup-only", "train"]));
    assert_ne!(full["config_hash"], sup["config_hash"]);
    assert_ne!(full["final_loss"], sup["final_loss"]);
    assert_eq!(full["samples"], sup["samples"]);
}

#[test]
fn reruns_reproduce_metrics_in_fresh_run_dirs() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let a = env.ok(&["--config", s(&cfg), "--epochs", "1", "train"]);
    let b = env.ok(&["--config", s(&cfg), "--epochs", "1", "train"]);
    assert_ne!(a, b);
    let name = a.file_name().unwrap().to_str().unwrap();
    let hash = &kv(&a)["config_hash"];
    assert!(name.starts_with(&format!("train-{}-", &hash[..16])), "{name}");
    for f in ["metrics.kv", "checkpoint.bin", "loss_curve.csv", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let recorded = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(recorded.contains(hash.as_str()));
    assert!(recorded.contains("epochs = 1"));
}

#[test]
fn seed_override_changes_hash() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let a = kv(&env.ok(&["--config", s(&cfg), "gen"]));
    let b = kv(&env.ok(&["--config", s(&cfg), "--seed", "9", "gen"]));
    assert_ne!(a["config_hash"], b["config_hash"]);
}

#[test]
fn bench_writes_timings() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let run = env.ok(&["--config", s(&cfg), "bench"]);
    let text = fs::read_to_string(run.join("bench.txt")).unwrap();
    assert!(text.contains("sinkhorn 1000x1000 iters=100"), "{text}");
    assert!(text.contains("pseudo-labels samples="));
}

fn assert_error_line(stderr: &str, code: i32, kind: &str) {
    let line = stderr.lines().last().unwrap();
    assert!(line.starts_with(&format!("error code={code} kind={kind} message=")), "{stderr}");
    assert_eq!(stderr.lines().filter(|l| l.starts_with("error ")).count(), 1);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let env = Env::new();
    let cfg = env.config("bad.toml", "[train]\nepochs = 2\nlearning_rate = 0.1\n");
    let (code, err) = env.fails(&["--config", s(&cfg), "gen"]);
    assert_eq!(code, 2);
    assert_error_line(&err, 2, "config");
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn invalid_values_are_config_errors() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let (code, err) = env.fails(&["--config", s(&cfg), "--epochs", "0", "train"]);
    assert_eq!(code, 2);
    assert_error_line(&err, 2, "config");
    let (code, _) = env.fails(&["--config", s(&cfg), "--weights", "1,2", "train"]);
    assert_eq!(code, 2);
    let (code, _) = env.fails(&["--config", s(&cfg), "--epsilon", "-1", "pseudo"]);
    assert_eq!(code, 2);
    let (code, _) = env.fails(&["--config", s(&cfg), "eval"]);
    assert_eq!(code, 2);
    // Not enough frames for a single sample.
    let short = env.config("short.toml", "sequences = 1\n[scene]\nn_frames = 6\n");
    let (code, err) = env.fails(&["--config", s(&short), "pseudo"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn usage_errors_exit_two() {
    let env = Env::new();
    let (code, _) = env.fails(&["frobnicate"]);
    assert_eq!(code, 2);
    let (code, _) = env.fails(&["--epochs", "many", "train"]);
    assert_eq!(code, 2);
}

#[test]
fn missing_files_are_io_errors() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let nowhere = env.dir.path().join("nowhere");
    let (code, err) = env.fails(&["--config", s(&cfg), "--data", s(&nowhere), "pseudo"]);
    assert_eq!(code, 3);
    assert_error_line(&err, 3, "io");
    let (code, _) = env.fails(&["--config", s(&nowhere.join("x.toml")), "gen"]);
    assert_eq!(code, 3);
    let (code, _) = env.fails(&["--config", s(&cfg), "--checkpoint", s(&nowhere), "eval"]);
    assert_eq!(code, 3);
}

#[test]
fn corrupt_data_is_an_io_error() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let data = env.dir.path().join("data");
    env.ok(&["--config", s(&cfg), "--data", s(&data), "gen"]);
    let blob = data.join("seq_000").join("frame_00003.bin");
    let mut bytes = fs::read(&blob).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&blob, &bytes).unwrap();
    let (code, err) = env.fails(&["--config", s(&cfg), "--data", s(&data), "pseudo"]);
    assert_eq!(code, 3);
    assert!(err.contains("checksum"), "{err}");

    let run = env.ok(&["--config", s(&cfg), "--epochs", "1", "train"]);
    let ckpt = run.join("checkpoint.bin");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() - 7]).unwrap();
    let (code, _) = env.fails(&["--config", s(&cfg), "--checkpoint", s(&ckpt), "eval"]);
    assert_eq!(code, 3);
}

#[test]
fn version_mismatch_has_its_own_exit_code() {
    let env = Env::new();
    let cfg = env.config("tiny.toml", TINY);
    let data = env.dir.path().join("data");
    env.ok(&["--config", s(&cfg), "--data", s(&data), "gen"]);
    let manifest = data.join("seq_000").join("manifest.toml");
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("format_major = 1"));
    fs::write(&manifest, text.replace("format_major = 1", "format_major = 0")).unwrap();
    let (code, err) = env.fails(&["--config", s(&cfg), "--data", s(&data), "pseudo"]);
    assert_eq!(code, 5);
    assert_error_line(&err, 5, "version");
}
