use std::cell::RefCell;
use std::path::Path;

use serde_json::json;

use wordqe_core::corpus::{Dataset, LanguagePairMeta};
use wordqe_core::harness::{
    few_shot_curve, run, run_with_artifacts, DatasetSource, ExperimentManifest, HarnessError,
    ManifestSource, Mode,
};

fn synth(id: &str, domain: &str, mt: &str, seed: u64) -> serde_json::Value {
    let (source, target) = id.split_once('-').unwrap();
    json!({
        "kind": "synth", "id": id, "source": source, "target": target,
        "n_train": 160, "n_test": 40, "p_substitute": 0.2, "p_delete": 0.1,
        "seed": seed, "domain": domain, "mt_type": mt
    })
}

fn manifest(mode: &str, extra: serde_json::Value) -> ExperimentManifest {
    let mut m = json!({
        "name": "tiny",
        "mode": mode,
        "dataset_ids": ["sA-sB", "sA-sC", "sD-sB"],
        "model_cfg": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "dropout": 0.0, "max_seq_length": 40},
        "train_cfg": {"learning_rate": 0.01, "epochs": 2, "eval_every_steps": 10, "patience_evals": 3},
        "seed": 11,
        "few_shot_valid_size": 20,
        "synth_world": {"vocab_size": 14, "seed": 3, "languages": [
            {"id": "sA"}, {"id": "sB"}, {"id": "sC"}, {"id": "sD"}
        ]},
        "datasets": [
            synth("sA-sB", "IT", "NMT", 1),
            synth("sA-sC", "IT", "SMT", 2),
            synth("sD-sB", "Pharmaceutical", "NMT", 3),
            synth("sB-sA", "Pharmaceutical", "SMT", 4)
        ]
    });
    for (k, v) in extra.as_object().unwrap() {
        m[k] = v.clone();
    }
    ExperimentManifest::from_json(&m.to_string()).unwrap()
}

fn source(m: &ExperimentManifest) -> ManifestSource {
    ManifestSource::new(m, Path::new(".")).unwrap()
}

#[test]
fn all_on_one_dataset_is_the_bilingual_run() {
    let all = manifest("ALL", json!({"dataset_ids": ["sA-sB"]}));
    let bi = manifest("BILINGUAL", json!({"dataset_ids": ["sA-sB"]}));
    let a = run(&all, &source(&all)).unwrap();
    let b = run(&bi, &source(&bi)).unwrap();
    assert_eq!(
        a.cell("all", "sA-sB").unwrap().runs,
        b.cell("bilingual:sA-sB", "sA-sB").unwrap().runs
    );
}

#[test]
fn zero_shot_matrix_fills_every_cell_relative_to_the_diagonal() {
    let m = manifest(
        "ZERO_SHOT_MATRIX",
        json!({"dataset_ids": ["sA-sB", "sA-sC"]}),
    );
    let t = run(&m, &source(&m)).unwrap();
    assert_eq!(t.cells.len(), 4);
    for train in ["sA-sB", "sA-sC"] {
        for eval in ["sA-sB", "sA-sC"] {
            let c = t.cell(&format!("bilingual:{train}"), eval).unwrap();
            if train == eval {
                // The diagonal is the reference itself.
                assert_eq!((c.reference.as_deref(), c.delta), (None, None));
            } else {
                let r = t.cell(&format!("bilingual:{eval}"), eval).unwrap();
                assert_eq!(c.reference.as_deref(), Some(r.setting.as_str()));
                assert_eq!(c.delta, Some(c.f1_multi - r.f1_multi));
            }
        }
    }
}

/// Records every labelled-data request so data isolation can be audited.
struct Audited {
    inner: ManifestSource,
    train_requests: RefCell<Vec<String>>,
}

impl DatasetSource for Audited {
    fn meta(&self, id: &str) -> Result<LanguagePairMeta, HarnessError> {
        self.inner.meta(id)
    }
    fn train_portion(&self, id: &str) -> Result<Dataset, HarnessError> {
        self.train_requests.borrow_mut().push(id.to_string());
        self.inner.train_portion(id)
    }
    fn test_portion(&self, id: &str) -> Result<Dataset, HarnessError> {
        self.inner.test_portion(id)
    }
    fn lexicon(&self) -> Vec<String> {
        self.inner.lexicon()
    }
}

#[test]
fn leave_one_out_never_reads_held_out_training_data() {
    let m = manifest(
        "ALL_MINUS_ONE",
        json!({"held_out": "sD-sB", "eval_ids": ["sB-sA"]}),
    );
    let audited = Audited {
        inner: source(&m),
        train_requests: RefCell::new(Vec::new()),
    };
    let t = run(&m, &audited).unwrap();
    let requested = audited.train_requests.borrow();
    assert!(!requested.is_empty());
    assert!(
        requested.iter().all(|id| id != "sD-sB" && id != "sB-sA"),
        "{requested:?}"
    );
    assert_eq!(
        t.cell("all-1:sD-sB", "sD-sB").unwrap().train_ids,
        vec!["sA-sB", "sA-sC"]
    );
    assert!(t.cell("all-1:sD-sB", "sB-sA").is_some());
}

#[test]
fn few_shot_curves_start_at_the_zero_shot_model() {
    let m = manifest(
        "FEW_SHOT",
        json!({"held_out": "sD-sB", "few_shot_sizes": [0, 30, 60]}),
    );
    let t = run(&m, &source(&m)).unwrap();
    let zero_shot = t.cell("all-1:sD-sB", "sD-sB").unwrap();
    let warm0 = t.cell("warm:n=0", "sD-sB").unwrap();
    assert_eq!(warm0.f1_multi, zero_shot.f1_multi);
    for n in [30, 60] {
        assert!(t.cell(&format!("warm:n={n}"), "sD-sB").is_some());
        assert!(t.cell(&format!("cold:n={n}"), "sD-sB").is_some());
    }
    let curves = few_shot_curve(&m, &source(&m)).unwrap();
    assert_eq!(curves.len(), 1);
    assert_eq!(
        curves[0].warm.iter().map(|p| p.n).collect::<Vec<_>>(),
        vec![0, 30, 60]
    );

    let too_many = manifest(
        "FEW_SHOT",
        json!({"held_out": "sD-sB", "few_shot_sizes": [200]}),
    );
    assert!(run(&too_many, &source(&too_many)).is_err());
}

#[test]
fn groupings_partition_the_datasets() {
    for (mode, expected) in [
        (
            "GROUP_DOMAIN",
            vec![
                ("domain:IT", vec!["sA-sB", "sA-sC"]),
                ("domain:Pharmaceutical", vec!["sD-sB"]),
            ],
        ),
        (
            "GROUP_MT_TYPE",
            vec![
                ("mt:NMT", vec!["sA-sB", "sD-sB"]),
                ("mt:SMT", vec!["sA-sC"]),
            ],
        ),
    ] {
        let mut m = manifest(mode, json!({}));
        m.train_cfg.epochs = 1;
        let t = run(&m, &source(&m)).unwrap();
        let mut covered = Vec::new();
        for (setting, members) in expected {
            for id in &members {
                let c = t
                    .cell(setting, id)
                    .unwrap_or_else(|| panic!("{setting} / {id}"));
                assert_eq!(c.train_ids, members);
                covered.push(id.to_string());
            }
        }
        covered.sort();
        assert_eq!(covered, m.dataset_ids);
        assert_eq!(t.cells.len(), 3);
    }
}

#[test]
fn artifacts_directory_is_complete_and_reproducible() {
    let m = manifest(
        "ALL",
        json!({"dataset_ids": ["sA-sB", "sA-sC"], "bilingual_reference": true, "replicates": 2}),
    );
    let dir = tempfile::tempdir().unwrap();
    let (table, run_dir) = run_with_artifacts(&m, &source(&m), dir.path()).unwrap();
    assert!(run_dir.starts_with(dir.path()));
    for f in [
        "manifest.json",
        "vocab.json",
        "result_table.json",
        "report.md",
        "report.csv",
    ] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let logs = std::fs::read_dir(run_dir.join("logs")).unwrap().count();
    let ckpts = std::fs::read_dir(run_dir.join("checkpoints"))
        .unwrap()
        .count();
    // all + two bilingual references, two replicates each
    assert_eq!((logs, ckpts), (6, 6));
    let saved = ExperimentManifest::load(&run_dir.join("manifest.json")).unwrap();
    assert_eq!(saved.hash(), m.hash());
    let first = std::fs::read(run_dir.join("result_table.json")).unwrap();
    assert_eq!(first, table.to_json().into_bytes());

    let (_, again) = run_with_artifacts(&m, &source(&m), dir.path()).unwrap();
    assert_eq!(again, run_dir);
    assert_eq!(
        std::fs::read(again.join("result_table.json")).unwrap(),
        first
    );
    let c = table.cell("all", "sA-sB").unwrap();
    assert_eq!(c.runs.len(), 2);
    assert!(c.delta.is_some());
}

#[test]
fn wmt_datasets_are_read_from_disk_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("BILINGUAL", json!({"dataset_ids": ["sA-sB"]}));
    let src = source(&m);
    src.train_portion("sA-sB")
        .unwrap()
        .write_files(&wordqe_core::corpus::FileSet::from_stem(
            dir.path().join("train"),
        ))
        .unwrap();
    src.test_portion("sA-sB")
        .unwrap()
        .write_files(&wordqe_core::corpus::FileSet::from_stem(
            dir.path().join("test"),
        ))
        .unwrap();
    let wmt = manifest(
        "BILINGUAL",
        json!({
            "dataset_ids": ["en-cs"],
            "synth_world": null,
            "datasets": [{"kind": "wmt", "id": "en-cs", "train": "train", "test": "test",
                          "pair": "En-Cs", "mt_type": "SMT"}]
        }),
    );
    let t = run(&wmt, &ManifestSource::new(&wmt, dir.path()).unwrap()).unwrap();
    let c = t.cell("bilingual:en-cs", "en-cs").unwrap();
    assert!((0.0..=1.0).contains(&c.f1_multi));

    let missing = manifest("BILINGUAL", json!({"dataset_ids": ["nope"]}));
    assert!(matches!(
        ManifestSource::new(&missing, Path::new(".")).and_then(|s| run(&missing, &s)),
        Err(HarnessError::DatasetNotFound(id)) if id == "nope"
    ));
    assert_eq!(wmt.mode, Mode::Bilingual);
}
