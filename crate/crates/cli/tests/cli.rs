use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wordqe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wordqe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn synth_vocab_train_predict_score_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (stem, n, seed) in [("train", "200", "1"), ("test", "40", "2")] {
        let out = wordqe(
            &[
                "synth",
                "--out",
                stem,
                "--n",
                n,
                "--seed",
                seed,
                "--vocab-size",
                "12",
            ],
            d,
        );
        assert_eq!(code(&out), 0, "{out:?}");
    }
    let out = wordqe(&["parse", "train", "--json", "train.json"], d);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("200 sentences"), "{}", stdout(&out));
    assert!(d.join("train.json").is_file());
    assert_eq!(code(&wordqe(&["validate", "test"], d)), 0);

    assert_eq!(
        code(&wordqe(&["vocab", "train", "--out", "vocab.json"], d)),
        0
    );
    fs::write(
        d.join("model.json"),
        r#"{"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "dropout": 0.0, "max_seq_length": 40}"#,
    )
    .unwrap();
    fs::write(
        d.join("train_cfg.json"),
        r#"{"learning_rate": 0.01, "epochs": 2, "eval_every_steps": 5}"#,
    )
    .unwrap();
    let out = wordqe(
        &[
            "train",
            "train",
            "--vocab",
            "vocab.json",
            "--out",
            "m.ckpt",
            "--model-config",
            "model.json",
            "--train-config",
            "train_cfg.json",
            "--seed",
            "3",
            "--log",
            "log.jsonl",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(
        fs::read_to_string(d.join("log.jsonl"))
            .unwrap()
            .lines()
            .count()
            > 0
    );

    let out = wordqe(
        &[
            "predict",
            "test",
            "--vocab",
            "vocab.json",
            "--checkpoint",
            "m.ckpt",
            "--out",
            "pred",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(d.join("pred.mt")).unwrap(),
        fs::read_to_string(d.join("test.mt")).unwrap()
    );

    let out = wordqe(&["score", "test", "--pred", "pred"], d);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("target_combined"));
    let out = wordqe(&["score", "test", "--pred", "test", "--json"], d);
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["target_words"]["f1_multi"], 1.0);

    // A checkpoint trained on one vocabulary is refused with another.
    assert_eq!(
        code(&wordqe(
            &["vocab", "test", "--out", "other.json", "--max-size", "10"],
            d
        )),
        0
    );
    let out = wordqe(
        &[
            "predict",
            "test",
            "--vocab",
            "other.json",
            "--checkpoint",
            "m.ckpt",
            "--out",
            "x",
        ],
        d,
    );
    assert_eq!(code(&out), 6);
}

#[test]
fn format_errors_and_missing_files_have_their_own_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.src"), "a b\n").unwrap();
    fs::write(d.join("bad.mt"), "x y\n").unwrap();
    fs::write(d.join("bad.source_tags"), "OK OK\n").unwrap();
    fs::write(d.join("bad.tags"), "OK BAD\n").unwrap();
    let out = wordqe(&["validate", "bad"], d);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("tag count"));
    assert_eq!(code(&wordqe(&["validate", "missing"], d)), 10);
    assert_eq!(code(&wordqe(&["validate", "bad", "--pair", "Xx-Yy"], d)), 3);
    assert_eq!(code(&wordqe(&["frobnicate"], d)), 2);
    assert_eq!(
        code(&wordqe(&["synth", "--out", "s", "--vocab-size", "3"], d)),
        11
    );
}

#[test]
fn experiment_run_writes_artifacts_and_reports_manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = serde_json::json!({
        "name": "cli",
        "mode": "BILINGUAL",
        "dataset_ids": ["sA-sB"],
        "model_cfg": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "dropout": 0.0, "max_seq_length": 40},
        "train_cfg": {"learning_rate": 0.01, "epochs": 1, "eval_every_steps": 10},
        "seed": 1,
        "synth_world": {"vocab_size": 12, "seed": 1, "languages": [{"id": "sA"}, {"id": "sB"}]},
        "datasets": [{"kind": "synth", "id": "sA-sB", "source": "sA", "target": "sB", "n_train": 100,
                      "n_test": 20, "p_substitute": 0.2, "p_delete": 0.1, "seed": 5,
                      "domain": "IT", "mt_type": "NMT"}]
    });
    fs::create_dir(d.join("exp")).unwrap();
    fs::write(d.join("exp/m.json"), manifest.to_string()).unwrap();
    let out = wordqe(
        &[
            "experiment",
            "run",
            "exp/m.json",
            "--out",
            "runs",
            "--format",
            "csv",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("setting,"));
    let runs: Vec<_> = fs::read_dir(d.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);

    let mut bad = manifest.clone();
    bad["held_out"] = "sA-sB".into();
    fs::write(d.join("bad.json"), bad.to_string()).unwrap();
    assert_eq!(code(&wordqe(&["experiment", "run", "bad.json"], d)), 8);

    let mut missing = manifest;
    missing["dataset_ids"] = serde_json::json!(["sA-sZ"]);
    fs::write(d.join("missing.json"), missing.to_string()).unwrap();
    assert_eq!(code(&wordqe(&["experiment", "run", "missing.json"], d)), 9);
}

#[test]
fn gradcheck_passes_on_the_default_config_and_refuses_large_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = wordqe(&["gradcheck"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("max relative error"));
    fs::write(
        dir.path().join("big.json"),
        r#"{"vocab_size": 20, "d_model": 32, "n_layers": 2, "n_heads": 2, "d_ff": 16, "dropout": 0.0, "max_seq_length": 8}"#,
    )
    .unwrap();
    assert_eq!(
        code(&wordqe(&["gradcheck", "--config", "big.json"], dir.path())),
        5
    );
}
