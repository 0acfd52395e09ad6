use std::path::Path;
use std::process::{Command, Output};

fn less(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_less"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"{
  "data": {"per_task": 6, "shots": 2, "test_per_task": 4},
  "models": {
    "selection": {"vocab_size": 34, "embed_dim": 8, "hidden_dim": 8, "context_window": 8, "bos_token": 32, "lora": {"rank": 2, "alpha": 4.0}},
    "target": {"vocab_size": 34, "embed_dim": 8, "hidden_dim": 8, "context_window": 8, "bos_token": 32},
    "transfer_selection": {"vocab_size": 34, "embed_dim": 4, "hidden_dim": 4, "context_window": 8, "bos_token": 32, "lora": {"rank": 2, "alpha": 4.0}},
    "transfer_target": {"vocab_size": 34, "embed_dim": 12, "hidden_dim": 12, "context_window": 8, "bos_token": 32}
  },
  "projection": {"dim": 16, "seed": 1},
  "warmup_fraction": 0.25,
  "warmup": {"epochs": 2, "batch_size": 4, "peak_lr": 0.01, "schedule": "constant", "seed": 0},
  "target_training": {"epochs": 2, "batch_size": 4, "peak_lr": 0.01, "schedule": "constant", "seed": 0},
  "select_fraction": 0.2,
  "seeds": [0]
}"#;

#[test]
fn stepwise_workflow_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), SMALL).unwrap();
    let c = ["--config", "cfg.json"];
    let run = |extra: &[&str]| ok(&less(d, &[&c[..], extra].concat()));

    assert!(run(&["gen-data", "--out", "data"]).contains("pool 60"));
    run(&["warmup", "--out", "w"]);
    run(&[
        "featurize",
        "--checkpoints",
        "w/checkpoints.bin",
        "--out",
        "stores",
    ]);
    let validated = run(&["datastore", "validate", "stores/features_adam_gamma.bin"]);
    assert!(validated.contains("ok"));
    let dump = run(&["datastore", "dump", "stores/features_sgd_grad.bin"]);
    assert_eq!(dump.lines().count(), 120);
    run(&[
        "score",
        "--checkpoints",
        "w/checkpoints.bin",
        "--store",
        "stores/features_signgd.bin",
        "--kernel",
        "sign_gd_cosine",
        "--out",
        "scored",
    ]);
    assert!(d.join("scored/scores.csv").exists());
    run(&["select", "--method", "tfidf", "--out", "tfidf.json"]);
    run(&[
        "select",
        "--method",
        "rds",
        "--checkpoints",
        "w/checkpoints.bin",
        "--out",
        "rds.json",
    ]);
    let trained = run(&[
        "train",
        "--selection",
        "scored/selection.json",
        "--out",
        "result.json",
    ]);
    assert!(trained.contains("mean test loss"));
    let exp = run(&["experiment", "--out", "exp"]);
    assert!(exp.contains("less_t"));
    assert!(d.join("exp/report.csv").exists());
}

#[test]
fn kernel_store_mismatch_and_bad_input_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), SMALL).unwrap();
    ok(&less(d, &["--config", "cfg.json", "warmup", "--out", "w"]));
    ok(&less(
        d,
        &[
            "--config",
            "cfg.json",
            "featurize",
            "--checkpoints",
            "w/checkpoints.bin",
            "--out",
            "s",
        ],
    ));
    let out = less(
        d,
        &[
            "--config",
            "cfg.json",
            "score",
            "--checkpoints",
            "w/checkpoints.bin",
            "--store",
            "s/features_sgd_grad.bin",
            "--kernel",
            "adam_cosine",
            "--out",
            "x",
        ],
    );
    assert!(!out.status.success());
    // featurizing again must not overwrite the stores
    let again = less(
        d,
        &[
            "--config",
            "cfg.json",
            "featurize",
            "--checkpoints",
            "w/checkpoints.bin",
            "--out",
            "s",
        ],
    );
    assert!(!again.status.success());

    std::fs::write(d.join("bad.json"), r#"{"select_fraction": 0}"#).unwrap();
    assert!(
        !less(d, &["--config", "bad.json", "gen-data", "--out", "g"])
            .status
            .success()
    );
    assert!(!less(d, &["datastore", "validate", "missing.bin"])
        .status
        .success());
}

#[test]
fn corrupted_store_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), SMALL).unwrap();
    ok(&less(d, &["--config", "cfg.json", "warmup", "--out", "w"]));
    ok(&less(
        d,
        &[
            "--config",
            "cfg.json",
            "featurize",
            "--checkpoints",
            "w/checkpoints.bin",
            "--out",
            "s",
        ],
    ));
    let path = d.join("s/features_adam_gamma.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let out = less(d, &["datastore", "validate", "s/features_adam_gamma.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("truncated"));
}

#[test]
fn verify_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = less(dir.path(), &["verify", "--trials", "20", "--out", "v.json"]);
    let text = ok(&out);
    for name in [
        "first_order_sgd_linear",
        "first_order_adam_lm",
        "selection_adam_spearman",
        "length_dot_vs_cosine",
        "projection_mae_halved",
    ] {
        assert!(text.contains(name), "{name}");
    }
    assert!(dir.path().join("v.json").exists());
}
