use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_vlo");

fn vlo(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vlo(args);
    assert!(
        out.status.success(),
        "vlo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a frozen file; `VLO_BLESS=1` rewrites it.
fn assert_golden(name: &str, actual: &[u8]) {
    let path = golden(name);
    if std::env::var_os("VLO_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert!(expected == actual, "output differs from {}", path.display());
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

/// Pinned synthetic sequence plus pinned micro weights.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(identity: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        ok(&[
            "--profile", "micro", "--seed", "7", "synth", "--out", root.to_str().unwrap(), "--frames", "3", "--points",
            "256", "--rotation-deg", "2", "--translation", "0.5", "--noise", "0.01",
        ]);
        let w = dir.path().join("w.txt");
        let mut args = vec!["--profile", "micro", "--seed", "7", "init-weights", "--out", w.to_str().unwrap()];
        if identity {
            args.push("--identity");
        }
        ok(&args);
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn run(&self, out: &str, threads: &str) -> Vec<u8> {
        let out = self.path(out);
        ok(&[
            "--profile", "micro", "--threads", threads, "run", "--root", &self.path("data"), "--weights", &self.path("w.txt"),
            "--out", &out,
        ]);
        std::fs::read(out).unwrap()
    }

    fn viz(&self, out: &str, threads: &str) -> Vec<u8> {
        let out = self.path(out);
        ok(&[
            "--profile", "micro", "--threads", threads, "cluster-viz", "--root", &self.path("data"), "--weights",
            &self.path("w.txt"), "--frame", "1", "--out", &out,
        ]);
        std::fs::read(out).unwrap()
    }
}

#[test]
fn identity_weights_give_identity_trajectory() {
    let f = Fixture::new(true);
    let text = String::from_utf8(f.run("traj.txt", "1")).unwrap();
    let identity = "1.000000000000e0 0.000000000000e0 0.000000000000e0 0.000000000000e0 0.000000000000e0 1.000000000000e0 0.000000000000e0 0.000000000000e0 0.000000000000e0 0.000000000000e0 1.000000000000e0 0.000000000000e0";
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l == identity), "{text}");
}

#[test]
fn run_is_deterministic_and_matches_golden() {
    let f = Fixture::new(false);
    let a = f.run("a.txt", "1");
    let b = f.run("b.txt", "1");
    let c = f.run("c.txt", "3");
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_golden("run_micro_seed7.txt", &a);
}

#[test]
fn cluster_viz_is_deterministic_and_matches_golden() {
    let f = Fixture::new(false);
    let a = f.viz("a.ppm", "1");
    let b = f.viz("b.ppm", "1");
    let c = f.viz("c.ppm", "3");
    assert!(a.starts_with(b"P6"));
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_golden("cluster_viz_micro_seed7.fnv", format!("{:016x}\n", fnv1a(&a)).as_bytes());
}

#[test]
fn cluster_viz_to_unwritable_path_fails() {
    let f = Fixture::new(false);
    let out = vlo(&[
        "--profile", "micro", "cluster-viz", "--root", &f.path("data"), "--weights", &f.path("w.txt"), "--out",
        "/nonexistent-dir/x.ppm",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn run_without_weights_fails_with_message() {
    let f = Fixture::new(false);
    let out = vlo(&[
        "--profile", "micro", "run", "--root", &f.path("data"), "--weights", &f.path("missing.txt"), "--out",
        &f.path("t.txt"),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));
}

#[test]
fn run_without_sequence_fails() {
    let f = Fixture::new(false);
    let out = vlo(&[
        "--profile", "micro", "run", "--root", &f.path("nowhere"), "--weights", &f.path("w.txt"), "--out",
        &f.path("t.txt"),
    ]);
    assert!(!out.status.success());
}

fn write_straight(path: &Path, n: usize, step: f64) {
    let text: String = (0..n)
        .map(|i| format!("1 0 0 0 0 1 0 0 0 0 1 {}\n", i as f64 * step))
        .collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn eval_reports_zero_for_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    write_straight(&gt, 900, 1.0);
    let out = ok(&["eval", "--gt", gt.to_str().unwrap(), "--est", gt.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("t_rel=0.000000 r_rel=0.000000"));
}

#[test]
fn eval_reproduces_one_percent_drift() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, est) = (dir.path().join("gt.txt"), dir.path().join("est.txt"));
    write_straight(&gt, 900, 1.0);
    write_straight(&est, 900, 1.01);
    let plot = dir.path().join("plot.png");
    let out = ok(&["eval", "--gt", gt.to_str().unwrap(), "--est", est.to_str().unwrap(), "--plot", plot.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("t_rel=1.000000 r_rel=0.000000"));
    assert!(plot.is_file());
}

#[test]
fn eval_rejects_mismatched_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, est) = (dir.path().join("gt.txt"), dir.path().join("est.txt"));
    write_straight(&gt, 900, 1.0);
    write_straight(&est, 899, 1.0);
    let out = vlo(&["eval", "--gt", gt.to_str().unwrap(), "--est", est.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("differ"));
}

#[test]
fn gradcheck_passes_and_is_thread_independent() {
    let a = ok(&["--seed", "20240611", "--threads", "1", "gradcheck", "--skip-end-to-end"]);
    let b = ok(&["--seed", "20240611", "--threads", "3", "gradcheck", "--skip-end-to-end"]);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    for op in ["dense", "conv", "bilinear", "local_fuse", "global_fuse", "cost_volume", "mask", "regress"] {
        assert!(text.lines().any(|l| l.starts_with(op) && l.contains("max_rel=")), "{op} missing:\n{text}");
    }
}

#[test]
fn gradcheck_end_to_end_passes() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("end_to_end") && l.ends_with("PASS")), "{text}");
}

#[test]
fn gradcheck_flags_corrupted_adjoints() {
    let out = vlo(&["gradcheck", "--skip-end-to-end", "--corrupt", "0.01"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn unknown_flag_prints_usage() {
    let out = vlo(&["run", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn train_reduces_loss_on_a_short_run() {
    let dir = tempfile::tempdir().unwrap();
    let losses = dir.path().join("losses.txt");
    ok(&[
        "--profile", "micro", "train", "--steps", "5", "--points", "128", "--losses", losses.to_str().unwrap(),
    ]);
    let values: Vec<f64> = std::fs::read_to_string(&losses)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(values.len(), 6);
    assert!(values[5] < values[0]);
}
