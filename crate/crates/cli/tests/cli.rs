use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_msfanet");

fn msfanet(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MSFANET_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const MANIFEST: &str = r#"version = 1

[paths]
data_root = "data"
output_dir = "runs"

[model]
channel_multiplier = 0.0625
stem_window = 4
init = { kind = "he_normal" }

[train]
learning_rate = 1e-3
batch_size = 2
iterations = 2
checkpoint_every = 1
log_wall_time = false

[augmentation]
crop_size = 64
"#;

/// Temp dir with a manifest and a small synthetic dataset in `data/`.
fn workspace(count: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.toml"), MANIFEST).unwrap();
    let n = count.to_string();
    let o = msfanet(dir.path(), &["synth", "--out", "data", "--count", &n, "--height", "64", "--width", "96", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(msfanet(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(msfanet(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(msfanet(dir.path(), &["synth", "--count", "many"]).status.code(), Some(1));
}

#[test]
fn ablation_flag_accepts_only_known_variants() {
    let dir = workspace(1);
    for ab in ["baseline", "sh", "sh_sk", "sh_sk_ploss"] {
        let o = msfanet(dir.path(), &["--manifest", "m.toml", "--dry-run", "train", "--ablation", ab]);
        assert_eq!(o.status.code(), Some(0), "{ab}: {}", stderr(&o));
        assert!(stdout(&o).contains(&format!("ablation = \"{ab}\"")));
    }
    for bad in ["full", "sh+sk", "SH", ""] {
        let o = msfanet(dir.path(), &["--manifest", "m.toml", "--dry-run", "train", "--ablation", bad]);
        assert_eq!(o.status.code(), Some(1), "{bad:?} should be rejected");
    }
}

#[test]
fn dry_run_echo_revalidates_to_the_same_config() {
    let dir = workspace(1);
    let o = msfanet(dir.path(), &["--manifest", "m.toml", "--seed", "9", "--dry-run", "train", "--ablation", "sh"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# parameters = "), "{first}");
    let count: usize = first.trim_start_matches("# parameters = ").parse().unwrap();
    assert!(count > 0);
    assert!(!dir.path().join("runs").exists(), "dry run must not write outputs");

    // Feed the echo back in: it must resolve to exactly the same text.
    std::fs::write(dir.path().join("echo.toml"), &text).unwrap();
    let again = msfanet(dir.path(), &["--manifest", "echo.toml", "--dry-run", "train"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(stdout(&again), text);
}

#[test]
fn invalid_manifest_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let text = MANIFEST.replace("data_root = \"data\"", "data_root = \"missing/frames\"").replace("batch_size = 2", "batch_size = 0");
    std::fs::write(dir.path().join("m.toml"), text).unwrap();
    let o = msfanet(dir.path(), &["--manifest", "m.toml", "train"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("missing/frames"), "{err}");
    assert!(err.contains("batch_size"), "{err}");

    let o = msfanet(dir.path(), &["prepare", "--data", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn unreadable_checkpoint_is_a_runtime_error() {
    let dir = workspace(1);
    std::fs::write(dir.path().join("bad.safetensors"), b"not a checkpoint").unwrap();
    let o = msfanet(dir.path(), &["eval", "--checkpoint", "bad.safetensors", "--data", "data"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic_and_allows_zero() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = msfanet(dir.path(), &["--seed", "4", "synth", "--out", out, "--count", "3", "--profile", "perspective"]);
        assert!(o.status.success());
    }
    for f in ["index.json", "synth-0000.png", "synth-0002.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let index = json(&dir.path().join("a/index.json"));
    for s in index["samples"].as_array().unwrap() {
        let bands: u64 = s["band_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(bands, s["count"].as_u64().unwrap());
    }

    let o = msfanet(dir.path(), &["synth", "--out", "empty", "--count", "0"]);
    assert!(o.status.success());
    assert_eq!(json(&dir.path().join("empty/index.json"))["samples"].as_array().unwrap().len(), 0);
}

#[test]
fn prepare_is_idempotent_and_handles_empty_dirs() {
    let dir = workspace(2);
    let first = msfanet(dir.path(), &["prepare", "--data", "data", "--out", "gt"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("prepared 2, up to date 0"));
    let index = std::fs::read(dir.path().join("gt/index.json")).unwrap();
    let modified = std::fs::metadata(dir.path().join("gt/index.json")).unwrap().modified().unwrap();

    let second = msfanet(dir.path(), &["prepare", "--data", "data", "--out", "gt"]);
    assert!(stdout(&second).contains("prepared 0, up to date 2"));
    assert_eq!(std::fs::read(dir.path().join("gt/index.json")).unwrap(), index);
    assert_eq!(std::fs::metadata(dir.path().join("gt/index.json")).unwrap().modified().unwrap(), modified);

    // A different sigma changes the content hash.
    let third = msfanet(dir.path(), &["prepare", "--data", "data", "--out", "gt", "--sigma", "2.5"]);
    assert!(stdout(&third).contains("prepared 2"));

    std::fs::create_dir(dir.path().join("nothing")).unwrap();
    let o = msfanet(dir.path(), &["prepare", "--data", "nothing", "--out", "gt0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&dir.path().join("gt0/index.json"))["entries"].as_array().unwrap().len(), 0);
}

#[test]
fn output_root_precedence_is_flag_then_env_then_manifest() {
    let dir = workspace(1);
    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(BIN);
        c.args(["--manifest", "m.toml", "--dry-run", "train"]).args(extra).current_dir(dir.path());
        match env {
            Some(v) => c.env("MSFANET_OUTPUT_ROOT", v),
            None => c.env_remove("MSFANET_OUTPUT_ROOT"),
        };
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    assert!(run(&[], None).contains("output_dir = \"runs\""));
    assert!(run(&[], Some("envroot")).contains("output_dir = \"envroot\""));
    assert!(run(&["--output", "flagdir"], Some("envroot")).contains("output_dir = \"flagdir\""));
}

#[test]
fn train_then_eval_with_regions_and_resume() {
    let dir = workspace(3);
    let o = msfanet(dir.path(), &["--manifest", "m.toml", "train", "--ablation", "baseline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("runs/loss.ndjson")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r["objective"] == "euclidean" && r["wall_ms"] == 0));
    assert!(dir.path().join("runs/checkpoints/ckpt-00000001.safetensors").is_file());

    // Resume to 4 iterations; the log grows to match.
    let o = msfanet(dir.path(), &["--manifest", "m.toml", "train", "--ablation", "baseline", "--iterations", "4", "--resume", "runs/checkpoints/ckpt-00000002.safetensors"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("runs/loss.ndjson")).unwrap();
    let its: Vec<u64> = log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["iteration"].as_u64().unwrap()).collect();
    assert_eq!(its, [1, 2, 3, 4]);

    // A checkpoint from a different variant does not match the manifest.
    let o = msfanet(dir.path(), &["--manifest", "m.toml", "train", "--ablation", "sh", "--resume", "runs/checkpoints/ckpt-00000004.safetensors"]);
    assert_eq!(o.status.code(), Some(1));

    let ckpt = "runs/checkpoints/ckpt-00000004.safetensors";
    let plain = msfanet(dir.path(), &["eval", "--checkpoint", ckpt, "--data", "data", "--output", "plain"]);
    assert!(plain.status.success(), "{}", stderr(&plain));
    let report = json(&dir.path().join("plain/report.json"));
    assert_eq!(report["per_image"].as_array().unwrap().len(), 3);
    assert!(report.get("region_mae").is_none_or(Value::is_null));

    let banded = msfanet(dir.path(), &["eval", "--checkpoint", ckpt, "--data", "data", "--output", "banded", "--regions", "--heatmaps"]);
    assert!(banded.status.success(), "{}", stderr(&banded));
    let report = json(&dir.path().join("banded/report.json"));
    let bands = report["region_mae"].as_object().unwrap();
    assert_eq!(bands.keys().collect::<Vec<_>>(), ["far", "mid", "near"]);
    assert!(dir.path().join("banded/heatmaps/synth-0000.png").is_file());
}

#[test]
fn kfold_runs_every_fold_and_reports_the_mean() {
    let dir = workspace(5);
    let o = msfanet(dir.path(), &["--manifest", "m.toml", "eval", "--kfold", "5", "--iterations", "1", "--ablation", "baseline", "--output", "cv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&dir.path().join("cv/kfold.json"));
    let folds = report["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    assert!(folds.iter().all(|f| f["test_images"] == 1 && f["train_images"] == 4));
    let mean: f64 = folds.iter().map(|f| f["mae"].as_f64().unwrap()).sum::<f64>() / 5.0;
    assert!((report["mean_mae"].as_f64().unwrap() - mean).abs() < 1e-12);

    let o = msfanet(dir.path(), &["--manifest", "m.toml", "eval", "--kfold", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn visualize_exports_requested_layers() {
    let dir = workspace(1);
    assert!(msfanet(dir.path(), &["--manifest", "m.toml", "train", "--iterations", "1"]).status.success());
    let ckpt = "runs/checkpoints/ckpt-00000001.safetensors";
    let o = msfanet(dir.path(), &["visualize", "--checkpoint", ckpt, "--sample", "data/synth-0000.json", "--layers", "stem,block3", "--output", "vis"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("vis/synth-0000-density.png").is_file());
    let stem_files = std::fs::read_dir(dir.path().join("vis/synth-0000-features")).unwrap().count();
    assert!(stem_files > 0);

    let o = msfanet(dir.path(), &["visualize", "--checkpoint", ckpt, "--sample", "data/synth-0000.json", "--layers", "block9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("block9"));
}
