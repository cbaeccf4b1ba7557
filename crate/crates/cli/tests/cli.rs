use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_bridge::perception::{FrozenNet, PerceptionKind};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_latent-bridge");

/// A workspace with untrained frozen networks and a tiny run config.
struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("nets")).unwrap();
        for (kind, file, seed) in [
            (PerceptionKind::Identity, "identity.lbn", 1),
            (PerceptionKind::Keypoints, "keypoints.lbn", 2),
            (PerceptionKind::EvalEmbedder, "eval-embedder.lbn", 3),
            (PerceptionKind::Pose, "pose.lbn", 4),
        ] {
            FrozenNet::untrained(kind, seed).unwrap().save(&dir.path().join("nets").join(file)).unwrap();
        }
        let config = format!(
            "# tiny run\nn_dataset = 40\nbatch = 3\ntotal_iters = 6\neval_every = 3\ncheckpoint_every = 3\n\
             eval_pairs = 64\n{extra}"
        );
        fs::write(dir.path().join("run.cfg"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], seed: Option<&str>) -> Output {
        let mut cmd = Command::new(BIN);
        cmd.args(args).arg("--config").arg(self.path("run.cfg")).env_remove("LB_SEED");
        if let Some(s) = seed {
            cmd.env("LB_SEED", s);
        }
        cmd.output().unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
}

fn count_ppm(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm")).count()
}

#[test]
fn invalid_invocations_exit_with_one() {
    let ws = Workspace::new("");
    assert_eq!(code(&ws.run(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&ws.run(&["pretrain", "ears"])), 1);
    assert_eq!(code(&ws.run_env(&["train"], Some("not-a-number"))), 1);

    let bad = Workspace::new("frobnicate = 3\n");
    let out = bad.run(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("frobnicate"));

    let missing = Command::new(BIN).args(["train", "--config", "/nonexistent/run.cfg"]).output().unwrap();
    assert_eq!(code(&missing), 1);
    let none = Command::new(BIN).arg("train").output().unwrap();
    assert_eq!(code(&none), 1);
    let help = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(code(&help), 0);
}

#[test]
fn failed_pretraining_exits_with_two_and_reports_the_error() {
    let ws = Workspace::new("pretrain_corpus = 2000\npretrain_epochs = 1\n");
    let out = ws.run(&["pretrain", "identity"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("identity RMSE") && err.contains("above threshold"), "{err}");
}

#[test]
fn training_is_reproducible_resumable_and_recorded() {
    let ws = Workspace::new("");
    let out = ws.run_env(&["train", "--disable-landmark-loss"], Some("11"));
    assert_ok(&out);
    let manifest = fs::read_to_string(ws.path("run/train.manifest")).unwrap();
    assert!(manifest.contains("command = train --disable-landmark-loss"));
    assert!(manifest.contains("seed = 11"));
    assert!(manifest.contains("artifact.checkpoint = "));
    assert!(manifest.contains("artifact.identity_net = "));
    assert!(ws.path("run/checkpoint-000003.lbck").exists());
    let first = fs::read(ws.path("run/final.lbck")).unwrap();
    fs::copy(ws.path("run/checkpoint-000003.lbck"), ws.path("mid.lbck")).unwrap();

    assert_ok(&ws.run_env(&["train", "--disable-landmark-loss"], Some("11")));
    assert_eq!(first, fs::read(ws.path("run/final.lbck")).unwrap());

    assert_ok(&ws.run_env(&["train", "--disable-landmark-loss"], Some("12")));
    assert_ne!(first, fs::read(ws.path("run/final.lbck")).unwrap());

    let mid = ws.path("mid.lbck");
    fs::remove_file(ws.path("run/final.lbck")).unwrap();
    let out = ws.run_env(&["train", "--disable-landmark-loss", "--resume", mid.to_str().unwrap()], Some("11"));
    assert_ok(&out);
    assert_eq!(first, fs::read(ws.path("run/final.lbck")).unwrap());

    // the checkpoint came from a run with different loss weights
    let out = ws.run_env(&["train", "--resume", mid.to_str().unwrap()], Some("11"));
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
}

#[test]
fn evaluate_writes_a_deterministic_report() {
    let ws = Workspace::new("");
    assert_ok(&ws.run(&["train", "--disable-w-discriminator"]));
    let manifest = fs::read_to_string(ws.path("run/train.manifest")).unwrap();
    assert!(manifest.contains("--disable-w-discriminator"));

    let out = ws.run(&["evaluate", "--pairs", "64", "--seed", "5"]);
    assert_ok(&out);
    let report = fs::read_to_string(ws.path("run/report.txt")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.starts_with("| FID"));
    assert!(report.contains("| 64 |"));
    assert!(ws.path("run/evaluate.manifest").exists());

    assert_ok(&ws.run(&["evaluate", "--pairs", "64", "--seed", "5", "--out", ws.path("again").to_str().unwrap()]));
    assert_eq!(report, fs::read_to_string(ws.path("again/report.txt")).unwrap());

    let out = ws.run(&["evaluate", "--pairs", "10"]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    let out = ws.run(&["evaluate", "--checkpoint", ws.path("missing.lbck").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn figures_emit_the_documented_files() {
    let ws = Workspace::new("");
    assert_ok(&ws.run(&["train"]));

    assert_ok(&ws.run(&["figures", "grid", "--ids", "2", "--attrs", "3"]));
    let grid = ws.path("run/figures/grid");
    assert_eq!(count_ppm(&grid), 2 * 3 + 2 + 3);
    for name in ["id-1.ppm", "attr-2.ppm", "out-1-2.ppm", "figures-grid.manifest"] {
        assert!(grid.join(name).exists(), "{name}");
    }

    assert_ok(&ws.run(&["figures", "interp-w", "--steps", "5"]));
    assert_eq!(count_ppm(&ws.path("run/figures/interp-w")), 5);

    assert_ok(&ws.run(&["figures", "interp-z", "--block", "attribute", "--steps", "4"]));
    assert_eq!(count_ppm(&ws.path("run/figures/interp-z")), 4);

    assert_ok(&ws.run(&["figures", "sequence", "--frames", "6"]));
    let csv = fs::read_to_string(ws.path("run/figures/sequence/coherence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let first = fs::read(grid.join("out-1-2.ppm")).unwrap();
    assert_ok(&ws.run(&["figures", "grid", "--ids", "2", "--attrs", "3"]));
    assert_eq!(first, fs::read(grid.join("out-1-2.ppm")).unwrap());
}

#[test]
fn pca_figure_emits_three_point_sets() {
    let ws = Workspace::new("");
    assert_ok(&ws.run(&["train"]));
    let base = ws.path("baseline.lbck");
    fs::copy(ws.path("run/final.lbck"), &base).unwrap();

    let out = ws.run(&["figures", "pca", "--baseline", base.to_str().unwrap(), "--samples", "100"]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));

    assert_ok(&ws.run(&["figures", "pca", "--baseline", base.to_str().unwrap(), "--samples", "10000"]));
    let csv = fs::read_to_string(ws.path("run/figures/pca/pca-points.csv")).unwrap();
    for space in ["generator", "ours", "baseline"] {
        assert_eq!(csv.lines().filter(|l| l.starts_with(&format!("{space},"))).count(), 10_000);
    }
    let summary = fs::read_to_string(ws.path("run/figures/pca/pca-summary.txt")).unwrap();
    assert!(summary.contains("frechet_ours_baseline=0.000000"), "{summary}");
}
