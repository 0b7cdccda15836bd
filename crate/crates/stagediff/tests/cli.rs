//! End-to-end checks of the command-line interface: file outputs, exit codes,
//! and round trips between subcommands. All runs use a deliberately tiny
//! configuration so the whole suite stays fast.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stagediff"))
}

const TINY: &[&str] = &[
    "--set", "f=8",
    "--set", "n=8",
    "--set", "d=8",
    "--set", "l_b=2",
    "--set", "n_classes=4",
    "--set", "d_ssl=6",
    "--set", "d_h=8",
    "--set", "t_steps=10",
    "--set", "k_tot=40",
    "--set", "batch=4",
    "--set", "n_train=16",
    "--set", "monitor_size=4",
    "--set", "n_eval=4",
    "--set", "delta_k=5",
    "--set", "m=3",
    "--set", "m_interval=20",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    bin().arg("train").args(TINY).args(extra).arg("--out").arg(out).output().unwrap()
}

#[test]
fn train_writes_expected_files_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_tiny(&a, &[]).status.success());
    assert!(train_tiny(&b, &[]).status.success());
    for name in ["train.csv", "monitor.csv", "sampler.csv", "s_snapshot_20.csv", "checkpoint.bin"] {
        assert!(a.join(name).exists(), "missing {}", name);
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{} differs between identical runs", name);
    }
}

#[test]
fn unknown_config_key_exits_1_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(&dir.path().join("x"), &["--set", "bogus_key=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn usage_error_exits_1_and_help_exits_0() {
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn eval_reads_checkpoint_and_enforces_task() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &[]).status.success());
    let ckpt = run.join("checkpoint.bin");

    let out = bin().arg("eval").arg("--checkpoint").arg(&ckpt).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("step=40"));
    assert!(text.contains("diff_loss="));
    assert!(text.contains("ssl_disc="));

    // Stated task must match the checkpoint.
    let out = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--task")
        .arg("super_res")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("task mismatch"));

    // Missing checkpoint is a runtime failure.
    let out = bin().arg("eval").arg("--checkpoint").arg(dir.path().join("nope.bin")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_ref_round_trips_into_structure_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &[]).status.success());

    let s_ref = dir.path().join("s_ref.csv");
    let out = bin()
        .arg("export-ref")
        .arg("--checkpoint")
        .arg(run.join("checkpoint.bin"))
        .arg("--out")
        .arg(&s_ref)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(s_ref.exists());

    let run2 = dir.path().join("run2");
    let out = train_tiny(
        &run2,
        &[
            "--set", "structure_reg_enabled=true",
            "--set", &format!("s_ref_path={}", s_ref.display()),
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // The regularizer leaves a trace in the training log once the gate opens.
    let log = std::fs::read_to_string(run2.join("train.csv")).unwrap();
    let any_beta = log.lines().skip(1).any(|l| {
        l.split(',').nth(3).and_then(|v| v.parse::<f64>().ok()).map(|v| v > 0.0).unwrap_or(false)
    });
    assert!(any_beta, "beta_sp never became positive");

    // Structure training without a reference pattern is a config error.
    let out = train_tiny(&dir.path().join("run3"), &["--set", "structure_reg_enabled=true"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_cka_writes_matrices_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &["--set", "ckpt_every=20"]).status.success());
    let out_dir = dir.path().join("cka");
    let out = bin()
        .arg("analyze-cka")
        .arg(run.join("ckpt_20.bin"))
        .arg(run.join("checkpoint.bin"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out_dir.join("cka_ckpt_20.csv").exists());
    assert!(out_dir.join("cka_checkpoint.csv").exists());
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "checkpoint,offdiag_mean,offdiag_std");
    assert_eq!(lines.len(), 3);

    // Unreadable checkpoints are skipped with a warning; all-bad input fails.
    let out = bin()
        .arg("analyze-cka")
        .arg(dir.path().join("missing.bin"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping"));
}

#[test]
fn plot_data_merges_and_caps_series() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &[]).status.success());
    let plot = dir.path().join("plot.csv");
    let out = bin()
        .arg("plot-data")
        .arg("--run")
        .arg(&run)
        .arg("--out")
        .arg(&plot)
        .arg("--max-rows")
        .arg("10")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&plot).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "series,step,value");
    let count = |name: &str| lines.iter().filter(|l| l.starts_with(&format!("{},", name))).count();
    // 40 train steps capped at 10; monitor columns are sparser.
    assert!(count("diff_loss") <= 10 && count("diff_loss") >= 5);
    assert!(count("ssl_loss") >= 1);
    // The last training step always survives downsampling.
    assert!(lines.iter().any(|l| l.starts_with("diff_loss,39,")));

    let out = bin()
        .arg("plot-data")
        .arg("--run")
        .arg(dir.path().join("empty"))
        .arg("--out")
        .arg(&plot)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
