//! End-to-end checks of the command-line surface: the full small-scale
//! pipeline, exit codes, and output artifacts.

use std::process::Command;

fn iace() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iace"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn iace");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_train_args(cmd: &mut Command) -> &mut Command {
    cmd.args([
        "--learning_rate",
        "3e-4",
        "--epochs",
        "2",
        "--steps_per_epoch",
        "2",
        "--batch_size",
        "2",
        "--chunk_len",
        "5",
        "--d_model",
        "16",
        "--heads",
        "2",
        "--ffn_dim",
        "32",
        "--enc_depth",
        "1",
        "--iace_depth",
        "1",
        "--dec_depth",
        "1",
        "--cvae_depth",
        "1",
        "--z_dim",
        "4",
        "--checkpoint_every",
        "0",
    ])
}

#[test]
fn pipeline_gen_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run_ok(iace().args([
        "gen-data",
        "--task",
        "handover",
        "--count",
        "2",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]));
    assert!(out.contains("manifest.txt"));
    let manifest = data.join("manifest.txt");
    assert!(manifest.exists());

    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.log");
    let out = run_ok(tiny_train_args(iace().args([
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ])));
    assert!(out.contains("checkpoint written"));
    assert!(ckpt.exists() && log.exists());

    let report = dir.path().join("eval.report");
    let out = run_ok(tiny_train_args(iace().args([
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--task",
        "handover",
        "--episodes",
        "2",
        "--seed",
        "5",
        "--report",
        report.to_str().unwrap(),
    ])));
    assert!(out.contains("% overall"));
    assert!(out.contains("latency"));
    assert!(report.exists());

    let report_dir = dir.path().join("reports");
    run_ok(iace().args([
        "report",
        "--reports",
        report.to_str().unwrap(),
        "--logs",
        log.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(report_dir.join("table.csv")).unwrap();
    assert!(table.starts_with("task,variant,seed"));
    assert_eq!(table.lines().count(), 2);
    assert!(report_dir.join("success.svg").exists());
    assert!(report_dir.join("loss_train.svg").exists());
}

#[test]
fn empty_report_input_writes_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("reports");
    run_ok(iace().args(["report", "--out", out_dir.to_str().unwrap()]));
    let table = std::fs::read_to_string(out_dir.join("table.csv")).unwrap();
    assert_eq!(table, "task,variant,seed,overall,latency_s\n");
}

#[test]
fn usage_errors_exit_one() {
    let out = iace().args(["train"]).output().unwrap(); // missing required flags
    assert_eq!(out.status.code(), Some(1));
    let out = iace()
        .args(["gen-data", "--task", "handover", "--count", "some", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    // bad variant value in a config flag
    let dir = tempfile::tempdir().unwrap();
    let out = iace()
        .args([
            "train",
            "--manifest",
            "/nonexistent",
            "--out",
            dir.path().join("x.ckpt").to_str().unwrap(),
            "--variant",
            "both-arms",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn integrity_failures_exit_two() {
    // unknown task
    let dir = tempfile::tempdir().unwrap();
    let out = iace()
        .args([
            "gen-data",
            "--task",
            "towel",
            "--count",
            "1",
            "--out",
            dir.path().join("d").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // tampered episode byte detected when training re-reads the dataset
    let data = dir.path().join("data");
    run_ok(iace().args([
        "gen-data",
        "--task",
        "bar_lift",
        "--count",
        "1",
        "--seed",
        "4",
        "--out",
        data.to_str().unwrap(),
    ]));
    let episode = data.join("bar_lift_000.bin");
    let mut bytes = std::fs::read(&episode).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x20;
    std::fs::write(&episode, &bytes).unwrap();
    let out = tiny_train_args(iace().args([
        "train",
        "--manifest",
        data.join("manifest.txt").to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
    ]))
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("corrupt"), "stderr: {stderr}");
}

#[test]
fn gradcheck_fault_injection_exits_three() {
    let out = iace()
        .args(["gradcheck", "--inject_fault"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn out_root_env_prefixes_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        iace()
            .env("IACE_OUT_ROOT", dir.path())
            .args(["report", "--out", "nested/reports"]),
    );
    assert!(dir.path().join("nested/reports/table.csv").exists());
}

#[test]
fn config_file_applies_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "epochs=1\nsteps_per_epoch=1\nbatch_size=1\nchunk_len=5\nd_model=16\nheads=2\nffn_dim=32\nenc_depth=1\niace_depth=1\ndec_depth=1\ncvae_depth=1\nz_dim=4\nlearning_rate=3e-4\ncheckpoint_every=0\n").unwrap();
    let data = dir.path().join("data");
    run_ok(iace().args([
        "gen-data",
        "--task",
        "handover",
        "--count",
        "1",
        "--seed",
        "6",
        "--out",
        data.to_str().unwrap(),
    ]));
    let ckpt = dir.path().join("m.ckpt");
    // flag overrides the config file's epoch count
    let out = run_ok(iace().args([
        "train",
        "--manifest",
        data.join("manifest.txt").to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--epochs",
        "2",
    ]));
    assert!(out.contains("2 epochs x 1 steps"));
    assert!(ckpt.exists());
}

/// Two CLI train invocations with the same seed must produce identical bytes.
#[test]
fn same_seed_cli_checkpoints_match() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(iace().args([
        "gen-data",
        "--task",
        "handover",
        "--count",
        "1",
        "--seed",
        "8",
        "--out",
        data.to_str().unwrap(),
    ]));
    let manifest = data.join("manifest.txt");
    let run_train = |name: &str| -> Vec<u8> {
        let ckpt = dir.path().join(name);
        run_ok(tiny_train_args(iace().args([
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--seed",
            "42",
        ])));
        std::fs::read(&ckpt).unwrap()
    };
    let a = run_train("a.ckpt");
    let b = run_train("b.ckpt");
    assert_eq!(a, b);
    assert!(!a.is_empty());
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    // a checkpoint trained for a different camera geometry must be refused
    let dir = tempfile::tempdir().unwrap();
    use iace_core::dataset::NormStats;
    use iace_core::policy::{save_checkpoint, PolicyConfig, PolicyModel, PolicyVariant};
    let mut cfg = PolicyConfig::smallest(PolicyVariant::SINGLE_IACE);
    cfg.img_height = 32;
    cfg.img_width = 32;
    let model = PolicyModel::new(cfg, NormStats::identity(8), 0).unwrap();
    let ckpt = dir.path().join("wrong.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let out = iace()
        .args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--task",
            "handover",
            "--episodes",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}
