//! End-to-end runs of the `dualdomain` binary on a tiny dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY_CONFIG: &str = r#"
[data]
num_subjects = 4
slices_per_subject = 3
height = 16
width = 16
split = [2, 1, 1]

[freq_net]
levels = 1
base_channels = 4
kernel_size = 5
in_channels = 2
out_channels = 2
residual = true

[image_net]
levels = 1
base_channels = 4
kernel_size = 3
in_channels = 1
out_channels = 1
residual = true

[baseline_net]
levels = 1
base_channels = 4
kernel_size = 3
in_channels = 1
out_channels = 1
residual = true

[train]
epochs = 2
batch_size = 2
"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dualdomain"));
    cmd.env("DUALDOMAIN_NUM_THREADS", "1");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    _dir: TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("tiny.toml"), TINY_CONFIG).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    /// generate-data + train into `run`.
    fn trained(&self, run_dir: &str) {
        let cfg = self.s("tiny.toml");
        assert_ok(&run(&["--config", &cfg, "--quiet", "--out", &self.s("data"), "generate-data"]));
        assert_ok(&run(&["--config", &cfg, "--quiet", "--out", &self.s(run_dir), "train", "--data", &self.s("data")]));
    }
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn help_lists_subcommands() {
    let out = run(&["--help"]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["generate-data", "make-masks", "train", "evaluate", "reconstruct"] {
        assert!(text.contains(sub), "missing {sub} in help");
    }
}

#[test]
fn full_workflow() {
    let ws = Workspace::new();
    let cfg = ws.s("tiny.toml");
    ws.trained("run");
    for f in ["experiment.toml", "hybrid.cks", "hybrid_log.csv", "baseline.cks", "baseline_log.csv"] {
        assert!(ws.path("run").join(f).is_file(), "missing {f}");
    }
    assert_eq!(read_csv(&ws.path("run/hybrid_log.csv")).len(), 2);

    assert_ok(&run(&["--config", &cfg, "--quiet", "--out", &ws.s("run"), "evaluate", "--data", &ws.s("data")]));
    let eval = ws.path("run/eval");
    for f in ["report.csv", "report.json", "nrmse_curve.csv", "nrmse_curve.png", "panel.csv", "panel.png"] {
        assert!(eval.join(f).is_file(), "missing {f}");
    }

    // Per-slice rows: one per method and test slice.
    let rows = read_csv(&eval.join("report.csv"));
    let methods = ["zero-filled", "hybrid-frequency-stage", "hybrid", "baseline"];
    assert_eq!(rows.len(), methods.len() * 3);
    for m in methods {
        assert_eq!(rows.iter().filter(|r| r[0] == m).count(), 3, "{m}");
    }

    // JSON aggregates agree with the CSV rows.
    let json: Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let split: Value = serde_json::from_str(&fs::read_to_string(ws.path("data/split.json")).unwrap()).unwrap();
    assert_eq!(json["test_subjects"], split["split"]["test"]);
    assert_eq!(json["test_subjects"].as_array().unwrap().len(), 1);
    assert!(json["nrmse_t_test"].is_object());
    for m in methods {
        let nrmse: Vec<f64> = rows.iter().filter(|r| r[0] == m).map(|r| r[5].parse().unwrap()).collect();
        let mean = 100.0 * nrmse.iter().sum::<f64>() / nrmse.len() as f64;
        let agg = json["aggregates"]
            .as_array()
            .unwrap()
            .iter()
            .find(|a| a["model"] == m && a["level"] == "slice")
            .unwrap();
        let reported = agg["nrmse_percent"]["mean"].as_f64().unwrap();
        assert!((reported - mean).abs() <= 1e-9 * mean.max(1.0), "{m}: {reported} vs {mean}");
    }

    // Masks with previews.
    assert_ok(&run(&["--config", &cfg, "--quiet", "--out", &ws.s("run"), "make-masks", "--accelerations", "4"]));
    let mask = ws.path("run/masks/mask_r4_s0.cks");
    assert!(mask.is_file());
    assert!(ws.path("run/masks/mask_r4_s0.png").is_file());

    // Single-volume reconstruction.
    let out = ws.path("recon/subject_003_mag.cks");
    assert_ok(&run(&[
        "--quiet",
        "reconstruct",
        "--checkpoint",
        &ws.s("run/hybrid.cks"),
        "--input",
        &ws.s("data/volumes/subject_003.cks"),
        "--mask",
        &mask.to_string_lossy(),
        "--output",
        &out.to_string_lossy(),
    ]));
    // 3 slices of 16×16 float64 at the end of the container.
    let bytes = fs::read(&out).unwrap();
    assert!(bytes.len() > 3 * 16 * 16 * 8);
}

#[test]
fn reference_mode_scores_zero_error() {
    let ws = Workspace::new();
    let cfg = ws.s("tiny.toml");
    ws.trained("run");
    assert_ok(&run(&[
        "--config",
        &cfg,
        "--quiet",
        "--out",
        &ws.s("run"),
        "evaluate",
        "--data",
        &ws.s("data"),
        "--reference-mode",
    ]));
    let rows = read_csv(&ws.path("run/eval/report.csv"));
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r[0], "reference");
        assert!((r[4].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r[5].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[6], "inf");
    }
}

#[test]
fn repeated_training_is_byte_identical() {
    let ws = Workspace::new();
    ws.trained("a");
    let cfg = ws.s("tiny.toml");
    assert_ok(&run(&["--config", &cfg, "--quiet", "--out", &ws.s("b"), "train", "--data", &ws.s("data")]));
    for f in ["hybrid.cks", "baseline.cks", "hybrid_log.csv"] {
        let a = fs::read(ws.path("a").join(f)).unwrap();
        let b = fs::read(ws.path("b").join(f)).unwrap();
        // Logs carry wall-clock times; compare everything but that column.
        if f.ends_with(".csv") {
            let strip = |bytes: &[u8]| -> Vec<String> {
                String::from_utf8_lossy(bytes)
                    .lines()
                    .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned())
                    .collect()
            };
            assert_eq!(strip(&a), strip(&b));
        } else {
            assert_eq!(a, b, "{f} differs");
        }
    }
}

#[test]
fn invalid_acceleration_is_a_config_error() {
    let ws = Workspace::new();
    let out = run(&["--quiet", "--out", &ws.s("run"), "make-masks", "--accelerations", "0.5"]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_dataset_is_a_config_error() {
    let ws = Workspace::new();
    let out = run(&["--quiet", "--out", &ws.s("run"), "train", "--data", &ws.s("nowhere")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_is_named() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.toml"), "[train]\nlearning_rte = 0.1\n").unwrap();
    let out = run(&["--config", &ws.s("bad.toml"), "--quiet", "generate-data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rte"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let ws = Workspace::new();
    // A regular file where a directory is expected.
    fs::write(ws.path("blocker"), b"").unwrap();
    let out = run(&["--quiet", "--out", &ws.s("blocker/masks"), "make-masks", "--accelerations", "4"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let ws = Workspace::new();
    ws.trained("run");
    let ck = ws.path("run/hybrid.cks");
    let mut bytes = fs::read(&ck).unwrap();
    let last = bytes.len() - 9;
    bytes[last] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let out = run(&["--quiet", "--out", &ws.s("run"), "evaluate", "--data", &ws.s("data")]);
    assert_eq!(code(&out), 3);
}

#[test]
fn divergent_training_exits_with_code_four() {
    let ws = Workspace::new();
    let cfg = format!("{TINY_CONFIG}learning_rate = 1e300\n");
    fs::write(ws.path("diverge.toml"), cfg).unwrap();
    let c = ws.s("diverge.toml");
    assert_ok(&run(&["--config", &c, "--quiet", "--out", &ws.s("data"), "generate-data"]));
    let out = run(&["--config", &c, "--quiet", "--out", &ws.s("run"), "train", "--data", &ws.s("data")]);
    assert_eq!(code(&out), 4, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
