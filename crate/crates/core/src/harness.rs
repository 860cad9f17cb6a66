//! Experiment orchestration.
//!
//! A declarative [`ExperimentManifest`] names the datasets, the training
//! regime (bilingual, all pairs, leave-one-out, grouped, zero-shot matrix or
//! few-shot curves), the model shape and the optimizer settings. [`run`]
//! trains every model the mode calls for, scores every requested test set and
//! returns a [`ResultTable`]; [`emit_report`] renders it.
//!
//! Seeds fan out from the manifest's master seed. A training run's seed
//! depends only on the replicate and the *set* of datasets it trains on, so
//! `ALL` over a single dataset is the same run as `BILINGUAL` on it, and the
//! leave-one-out model of a `FEW_SHOT` manifest is the one the matching
//! `ALL_MINUS_ONE` manifest trains.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    lookup, lookup_in_domain, parse_fileset, split_train_validation, CorpusError, Dataset, Domain,
    FileSet, LanguagePairMeta, MtType,
};
use crate::encode::{
    build_vocab_from_words, decode_predictions, encode_example, DecodedTags, EncodeError, Vocab,
};
use crate::metrics::{score_dataset, MetricsError, SurfaceReport};
use crate::model::{
    encode_checkpoint, init_model, load_checkpoint, train, CheckpointError, Model, ModelConfig,
    ModelError, Real, TrainConfig,
};
use crate::synth::{
    generate_pair_corpus, hash_str, make_language_profile, mix_seed, register_concepts,
    synthetic_meta, CorruptionConfig, LanguageProfile, SynthError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset {0:?} not found")]
    DatasetNotFound(String),
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ManifestInvalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Bilingual,
    All,
    AllMinusOne,
    GroupDomain,
    GroupMtType,
    ZeroShotMatrix,
    FewShot,
}

/// Where a dataset's examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// WMT four-file sets; stems are resolved against the manifest directory.
    Wmt {
        id: String,
        train: PathBuf,
        test: PathBuf,
        pair: String,
        mt_type: MtType,
        #[serde(default)]
        domain: Option<Domain>,
    },
    /// A pseudo-language pair from the manifest's `synth_world`. The first
    /// `n_train` generated sentences form the training portion and the next
    /// `n_test` the test set.
    Synth {
        id: String,
        source: String,
        target: String,
        n_train: usize,
        n_test: usize,
        p_substitute: f64,
        p_delete: f64,
        #[serde(default)]
        p_insert: f64,
        seed: u64,
        domain: Domain,
        mt_type: MtType,
    },
}

impl DatasetSpec {
    pub fn id(&self) -> &str {
        match self {
            DatasetSpec::Wmt { id, .. } | DatasetSpec::Synth { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterSpec {
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub id: String,
    /// Restricts what text authored in this language talks about.
    #[serde(default)]
    pub register: Option<RegisterSpec>,
}

/// The pseudo-languages synthetic datasets are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthWorld {
    pub vocab_size: usize,
    pub seed: u64,
    pub languages: Vec<LanguageSpec>,
}

fn one() -> usize {
    1
}
fn default_split_ratio() -> f64 {
    0.8
}
fn default_max_vocab() -> usize {
    8000
}
fn default_few_shot_valid() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    /// Datasets that take part in training (and are evaluated).
    pub dataset_ids: Vec<String>,
    /// Extra datasets that are only ever evaluated.
    #[serde(default)]
    pub eval_ids: Vec<String>,
    #[serde(default)]
    pub held_out: Option<String>,
    #[serde(default)]
    pub few_shot_sizes: Vec<usize>,
    /// Leave-one-out checkpoint for the warm arm; trained in-run when absent.
    #[serde(default)]
    pub warm_start_checkpoint: Option<PathBuf>,
    /// `vocab_size` 0 means "size of the built vocabulary"; `seed` is
    /// replaced by the fanned-out run seed.
    pub model_cfg: ModelConfig,
    #[serde(default)]
    pub train_cfg: TrainConfig,
    /// Optimizer settings for few-shot fine-tuning; `train_cfg` when absent.
    #[serde(default)]
    pub few_shot_train_cfg: Option<TrainConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Independent repetitions with derived seeds; cells report the mean.
    #[serde(default = "one")]
    pub replicates: usize,
    /// Also train a bilingual model for every evaluated dataset and report
    /// deltas against it.
    #[serde(default)]
    pub bilingual_reference: bool,
    /// Caps each dataset's contribution to multilingual training. Off by default.
    #[serde(default)]
    pub per_pair_cap: Option<usize>,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    /// Validation examples used while fine-tuning few-shot models.
    #[serde(default = "default_few_shot_valid")]
    pub few_shot_valid_size: usize,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub synth_world: Option<SynthWorld>,
}

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let m: ExperimentManifest =
            serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        Sha256::digest(bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.dataset_ids.is_empty() {
            return Err(invalid("dataset_ids is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.dataset_ids.iter().chain(&self.eval_ids) {
            if !seen.insert(id.as_str()) {
                return Err(invalid(format!("dataset {id:?} listed twice")));
            }
        }
        let needs_held_out = matches!(self.mode, Mode::AllMinusOne | Mode::FewShot);
        match (&self.held_out, needs_held_out) {
            (None, true) => return Err(invalid(format!("{:?} requires held_out", self.mode))),
            (Some(_), false) => {
                return Err(invalid(format!(
                    "held_out is meaningless in {:?} mode",
                    self.mode
                )))
            }
            (Some(h), true) => {
                if !self.dataset_ids.contains(h) {
                    return Err(invalid(format!("held_out {h:?} is not in dataset_ids")));
                }
                if self.dataset_ids.len() < 2 {
                    return Err(invalid("leaving one out needs at least two datasets"));
                }
            }
            (None, false) => {}
        }
        if self.mode == Mode::FewShot {
            if self.few_shot_sizes.is_empty() {
                return Err(invalid("few_shot_sizes is empty"));
            }
            if self.few_shot_sizes.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid("few_shot_sizes must be strictly increasing"));
            }
            if self.few_shot_valid_size == 0 {
                return Err(invalid("few_shot_valid_size must be positive"));
            }
        } else if !self.few_shot_sizes.is_empty() || self.warm_start_checkpoint.is_some() {
            return Err(invalid("few-shot fields are only valid in FEW_SHOT mode"));
        }
        if self.replicates == 0 {
            return Err(invalid("replicates must be at least 1"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(invalid(format!(
                "split_ratio {} outside (0, 1)",
                self.split_ratio
            )));
        }
        if self.per_pair_cap == Some(0) {
            return Err(invalid("per_pair_cap must be positive"));
        }
        let mut probe = self.model_cfg.clone();
        if probe.vocab_size == 0 {
            probe.vocab_size = crate::encode::NUM_SPECIALS + 1;
        }
        probe.validate().map_err(|e| invalid(e.to_string()))?;
        self.train_cfg
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if let Some(cfg) = &self.few_shot_train_cfg {
            cfg.validate().map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Datasets whose labelled training data builds the shared vocabulary and
    /// the leave-one-out model.
    fn pool(&self) -> Vec<String> {
        self.dataset_ids
            .iter()
            .filter(|id| Some(*id) != self.held_out.as_ref())
            .cloned()
            .collect()
    }
}

/// Supplies datasets by id. The harness asks for exactly what each step
/// needs, which lets tests audit data access.
pub trait DatasetSource {
    fn meta(&self, id: &str) -> Result<LanguagePairMeta, HarnessError>;
    /// Labelled training portion; the harness derives the validation split from it.
    fn train_portion(&self, id: &str) -> Result<Dataset, HarnessError>;
    fn test_portion(&self, id: &str) -> Result<Dataset, HarnessError>;
    /// Unlabelled words every model's tokenizer may know about, independent
    /// of any split (the stand-in for a multilingual pretraining corpus).
    fn lexicon(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Resolves ids against the manifest's own `datasets` catalogue.
pub struct ManifestSource {
    base_dir: PathBuf,
    specs: BTreeMap<String, DatasetSpec>,
    languages: BTreeMap<String, LanguageProfile>,
}

impl ManifestSource {
    /// Relative WMT stems are resolved against `base_dir`.
    pub fn new(manifest: &ExperimentManifest, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut languages = BTreeMap::new();
        if let Some(world) = &manifest.synth_world {
            for lang in &world.languages {
                let mut profile = make_language_profile(&lang.id, world.vocab_size, world.seed)?;
                if let Some(r) = &lang.register {
                    profile = profile.with_register(register_concepts(
                        world.vocab_size,
                        r.size,
                        r.seed,
                    )?)?;
                }
                if languages.insert(lang.id.clone(), profile).is_some() {
                    return Err(invalid(format!("language {:?} declared twice", lang.id)));
                }
            }
        }
        let mut specs = BTreeMap::new();
        for spec in &manifest.datasets {
            if let DatasetSpec::Synth {
                source,
                target,
                n_train,
                n_test,
                ..
            } = spec
            {
                for lang in [source, target] {
                    if !languages.contains_key(lang) {
                        return Err(invalid(format!(
                            "synthetic language {lang:?} is not in synth_world"
                        )));
                    }
                }
                if *n_train == 0 || *n_test == 0 {
                    return Err(invalid(format!(
                        "{}: n_train and n_test must be positive",
                        spec.id()
                    )));
                }
            }
            if specs.insert(spec.id().to_string(), spec.clone()).is_some() {
                return Err(invalid(format!("dataset {:?} declared twice", spec.id())));
            }
        }
        Ok(ManifestSource {
            base_dir: base_dir.to_path_buf(),
            specs,
            languages,
        })
    }

    fn spec(&self, id: &str) -> Result<&DatasetSpec, HarnessError> {
        self.specs
            .get(id)
            .ok_or_else(|| HarnessError::DatasetNotFound(id.to_string()))
    }

    fn synth_portion(&self, spec: &DatasetSpec, test: bool) -> Result<Dataset, HarnessError> {
        let DatasetSpec::Synth {
            source,
            target,
            n_train,
            n_test,
            p_substitute,
            p_delete,
            p_insert,
            seed,
            ..
        } = spec
        else {
            unreachable!("caller checked the kind")
        };
        let corruption = CorruptionConfig {
            p_substitute: *p_substitute,
            p_delete: *p_delete,
            p_insert: *p_insert,
            seed: *seed,
        };
        let meta = self.meta(spec.id())?;
        let corpus = generate_pair_corpus(
            &self.languages[source],
            &self.languages[target],
            n_train + n_test,
            &corruption,
            meta.clone(),
        )?;
        let mut examples = corpus.dataset.examples;
        let examples = if test {
            examples.split_off(*n_train)
        } else {
            examples.truncate(*n_train);
            examples
        };
        Ok(Dataset { meta, examples })
    }

    fn wmt_portion(&self, spec: &DatasetSpec, test: bool) -> Result<Dataset, HarnessError> {
        let DatasetSpec::Wmt { train, test: t, .. } = spec else {
            unreachable!("caller checked the kind")
        };
        let stem = self.base_dir.join(if test { t } else { train });
        let files = FileSet::from_stem(&stem);
        if !files.src.exists() {
            return Err(HarnessError::DatasetNotFound(format!(
                "{} ({})",
                spec.id(),
                stem.display()
            )));
        }
        Ok(parse_fileset(&files, self.meta(spec.id())?)?)
    }

    fn portion(&self, id: &str, test: bool) -> Result<Dataset, HarnessError> {
        let spec = self.spec(id)?;
        match spec {
            DatasetSpec::Synth { .. } => self.synth_portion(spec, test),
            DatasetSpec::Wmt { .. } => self.wmt_portion(spec, test),
        }
    }
}

impl DatasetSource for ManifestSource {
    fn meta(&self, id: &str) -> Result<LanguagePairMeta, HarnessError> {
        match self.spec(id)? {
            DatasetSpec::Wmt {
                pair,
                mt_type,
                domain,
                ..
            } => Ok(match domain {
                Some(d) => lookup_in_domain(pair, *mt_type, *d)?,
                None => lookup(pair, *mt_type)?,
            }),
            DatasetSpec::Synth {
                source,
                target,
                n_train,
                domain,
                mt_type,
                ..
            } => Ok(synthetic_meta(
                &self.languages[source],
                &self.languages[target],
                *domain,
                *mt_type,
                *n_train,
            )),
        }
    }

    fn train_portion(&self, id: &str) -> Result<Dataset, HarnessError> {
        self.portion(id, false)
    }

    fn test_portion(&self, id: &str) -> Result<Dataset, HarnessError> {
        self.portion(id, true)
    }

    fn lexicon(&self) -> Vec<String> {
        self.languages
            .values()
            .flat_map(|p| p.surface.iter().cloned())
            .collect()
    }
}

/// Per-example tag predictions for a whole dataset.
pub fn predict_dataset<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    dataset: &Dataset,
) -> Result<Vec<DecodedTags>, HarnessError> {
    dataset
        .examples
        .iter()
        .map(|e| {
            let enc = encode_example(e, vocab, model.config.max_seq_length)?;
            let classes = model.predict_classes(&enc)?;
            Ok(decode_predictions(&enc, &classes)?)
        })
        .collect()
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    dataset: &Dataset,
) -> Result<SurfaceReport, HarnessError> {
    let preds = predict_dataset(model, vocab, dataset)?;
    Ok(score_dataset(dataset, &preds)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub replicate: usize,
    pub seed: u64,
    pub report: SurfaceReport,
}

/// One (train setting, eval dataset) entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub setting: String,
    pub train_ids: Vec<String>,
    pub eval_id: String,
    pub runs: Vec<SeedRun>,
    /// Seed-mean of the target-combined F1-Multi.
    pub f1_multi: f64,
    /// Setting whose cell on the same eval dataset this one is compared to.
    pub reference: Option<String>,
    /// `f1_multi − reference.f1_multi`.
    pub delta: Option<f64>,
}

impl Cell {
    /// Seed-mean F1-Multi of a named surface.
    pub fn surface_mean(&self, surface: &str) -> f64 {
        let total: f64 = self
            .runs
            .iter()
            .map(|r| {
                r.report
                    .surfaces()
                    .iter()
                    .find(|(name, _)| *name == surface)
                    .map_or(0.0, |(_, rep)| rep.f1_multi)
            })
            .sum();
        total / self.runs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub name: String,
    pub mode: Mode,
    pub manifest_hash: String,
    pub cells: Vec<Cell>,
}

impl ResultTable {
    pub fn cell(&self, setting: &str, eval_id: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.setting == setting && c.eval_id == eval_id)
    }

    pub fn settings(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.setting.as_str()) {
                out.push(&c.setting);
            }
        }
        out
    }

    pub fn eval_ids(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.eval_id.as_str()) {
                out.push(&c.eval_id);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Recomputes every delta from the referenced cells.
    fn link_references(&mut self) {
        let means: HashMap<(String, String), f64> = self
            .cells
            .iter()
            .map(|c| ((c.setting.clone(), c.eval_id.clone()), c.f1_multi))
            .collect();
        for c in &mut self.cells {
            c.delta = c
                .reference
                .as_ref()
                .and_then(|r| means.get(&(r.clone(), c.eval_id.clone())))
                .map(|r| c.f1_multi - r);
            if c.delta.is_none() {
                c.reference = None;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub report: SurfaceReport,
}

/// Warm- and cold-start learning curves of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotCurve {
    pub held_out: String,
    pub replicate: usize,
    pub warm: Vec<CurvePoint>,
    pub cold: Vec<CurvePoint>,
}

struct Trained {
    model: Model<f32>,
    seed: u64,
}

/// Artifacts accumulated during a run and written at the end.
#[derive(Default)]
struct Artifacts {
    files: Vec<(PathBuf, Vec<u8>)>,
}

struct Runner<'a> {
    manifest: &'a ExperimentManifest,
    source: &'a dyn DatasetSource,
    vocab: Vocab,
    model_cfg: ModelConfig,
    trained: HashMap<(Vec<String>, usize), Trained>,
    splits: HashMap<(String, usize), (Dataset, Dataset)>,
    tests: HashMap<String, Dataset>,
    artifacts: Artifacts,
}

fn replicate_seed(master: u64, replicate: usize) -> u64 {
    mix_seed(master, replicate as u64)
}

fn composition_seed(master: u64, replicate: usize, ids: &[String]) -> u64 {
    mix_seed(
        replicate_seed(master, replicate),
        hash_str(&ids.join("\u{1f}")),
    )
}

fn file_stem(ids: &[String]) -> String {
    ids.iter()
        .map(|id| id.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_"))
        .collect::<Vec<_>>()
        .join("+")
}

impl<'a> Runner<'a> {
    fn new(
        manifest: &'a ExperimentManifest,
        source: &'a dyn DatasetSource,
    ) -> Result<Self, HarnessError> {
        manifest.validate()?;
        for id in manifest.dataset_ids.iter().chain(&manifest.eval_ids) {
            source.meta(id)?;
        }
        let mut words = source.lexicon();
        for id in manifest.pool() {
            let ds = source.train_portion(&id)?;
            for e in &ds.examples {
                words.extend(e.source_tokens.iter().cloned());
                words.extend(e.target_tokens.iter().cloned());
            }
        }
        let vocab = build_vocab_from_words(words.iter().map(String::as_str), manifest.max_vocab);
        let mut model_cfg = manifest.model_cfg.clone();
        if model_cfg.vocab_size == 0 {
            model_cfg.vocab_size = vocab.len();
        } else if model_cfg.vocab_size != vocab.len() {
            return Err(invalid(format!(
                "model_cfg.vocab_size {} differs from the built vocabulary ({})",
                model_cfg.vocab_size,
                vocab.len()
            )));
        }
        let mut artifacts = Artifacts::default();
        artifacts
            .files
            .push(("manifest.json".into(), manifest.to_json().into_bytes()));
        artifacts
            .files
            .push(("vocab.json".into(), vocab.to_json().into_bytes()));
        Ok(Runner {
            manifest,
            source,
            vocab,
            model_cfg,
            trained: HashMap::new(),
            splits: HashMap::new(),
            tests: HashMap::new(),
            artifacts,
        })
    }

    /// The dataset's own train/validation split, identical in every setting.
    fn split(&mut self, id: &str, replicate: usize) -> Result<&(Dataset, Dataset), HarnessError> {
        let key = (id.to_string(), replicate);
        if !self.splits.contains_key(&key) {
            let portion = self.source.train_portion(id)?;
            let seed = mix_seed(replicate_seed(self.manifest.seed, replicate), hash_str(id));
            let split = split_train_validation(&portion, self.manifest.split_ratio, seed)?;
            self.splits.insert(key.clone(), split);
        }
        Ok(&self.splits[&key])
    }

    fn test(&mut self, id: &str) -> Result<&Dataset, HarnessError> {
        if !self.tests.contains_key(id) {
            let ds = self.source.test_portion(id)?;
            self.tests.insert(id.to_string(), ds);
        }
        Ok(&self.tests[id])
    }

    fn train_on(&mut self, ids: &[String], replicate: usize) -> Result<&Trained, HarnessError> {
        let mut ids = ids.to_vec();
        ids.sort();
        let key = (ids.clone(), replicate);
        if !self.trained.contains_key(&key) {
            let mut train_set: Option<Dataset> = None;
            let mut valid_set: Option<Dataset> = None;
            for id in &ids {
                let cap = self.manifest.per_pair_cap;
                let (tr, va) = self.split(id, replicate)?;
                let take = cap.unwrap_or(usize::MAX).min(tr.len());
                match (&mut train_set, &mut valid_set) {
                    (Some(t), Some(v)) => {
                        t.examples.extend_from_slice(&tr.examples[..take]);
                        v.examples.extend_from_slice(&va.examples);
                    }
                    _ => {
                        train_set = Some(Dataset {
                            meta: tr.meta.clone(),
                            examples: tr.examples[..take].to_vec(),
                        });
                        valid_set = Some(va.clone());
                    }
                }
            }
            let (train_set, valid_set) = (
                train_set.expect("ids non-empty"),
                valid_set.expect("ids non-empty"),
            );
            let seed = composition_seed(self.manifest.seed, replicate, &ids);
            let mut cfg = self.model_cfg.clone();
            cfg.seed = seed;
            let mut tc = self.manifest.train_cfg.clone();
            tc.seed = seed;
            let mut model: Model<f32> = init_model(&cfg)?;
            let report = train(&mut model, &train_set, &valid_set, &self.vocab, &tc)?;
            let stem = format!("{}.r{replicate}", file_stem(&ids));
            self.artifacts.files.push((
                format!("logs/{stem}.jsonl").into(),
                report.to_jsonl().into_bytes(),
            ));
            self.artifacts.files.push((
                format!("checkpoints/{stem}.ckpt").into(),
                encode_checkpoint(&model, &self.vocab),
            ));
            self.trained.insert(key.clone(), Trained { model, seed });
        }
        Ok(&self.trained[&key])
    }

    fn evaluate_trained(
        &mut self,
        ids: &[String],
        replicate: usize,
        eval_id: &str,
    ) -> Result<SeedRun, HarnessError> {
        self.test(eval_id)?;
        self.train_on(ids, replicate)?;
        let mut key = (ids.to_vec(), replicate);
        key.0.sort();
        let trained = &self.trained[&key];
        Ok(SeedRun {
            replicate,
            seed: trained.seed,
            report: evaluate(&trained.model, &self.vocab, &self.tests[eval_id])?,
        })
    }

    fn warm_model(&mut self, replicate: usize) -> Result<Model<f32>, HarnessError> {
        match &self.manifest.warm_start_checkpoint {
            Some(path) => Ok(load_checkpoint(path, &self.vocab)?),
            None => {
                let pool = self.manifest.pool();
                Ok(self.train_on(&pool, replicate)?.model.clone())
            }
        }
    }

    fn curve(&mut self, replicate: usize) -> Result<FewShotCurve, HarnessError> {
        let m = self.manifest;
        let held_out = m.held_out.clone().expect("validated");
        let master = replicate_seed(m.seed, replicate);
        // The whole training portion, shuffled once: a fixed validation slice
        // first, then the pool whose prefixes are the few-shot training sets.
        let portion = self.source.train_portion(&held_out)?;
        let mut order = portion.examples;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            master,
            hash_str(&format!("few-shot:{held_out}")),
        )));
        let n_valid = m.few_shot_valid_size;
        let largest = *m.few_shot_sizes.last().expect("validated");
        if n_valid + largest > order.len() {
            return Err(invalid(format!(
                "few-shot size {largest} plus {n_valid} validation examples exceeds the {} training examples of {held_out}",
                order.len()
            )));
        }
        let pool = order.split_off(n_valid);
        let valid = Dataset {
            meta: portion.meta,
            examples: order,
        };
        let test = self.test(&held_out)?.clone();
        let warm = self.warm_model(replicate)?;
        let tc_base = m
            .few_shot_train_cfg
            .clone()
            .unwrap_or_else(|| m.train_cfg.clone());
        let mut curve = FewShotCurve {
            held_out: held_out.clone(),
            replicate,
            warm: Vec::new(),
            cold: Vec::new(),
        };
        for &n in &m.few_shot_sizes {
            let seed = mix_seed(master, hash_str(&format!("few-shot:{held_out}:{n}")));
            let subset = Dataset {
                meta: valid.meta.clone(),
                examples: pool[..n].to_vec(),
            };
            let mut cfg = self.model_cfg.clone();
            cfg.seed = seed;
            let mut tc = tc_base.clone();
            tc.seed = seed;
            for (arm, start) in [("warm", warm.clone()), ("cold", init_model::<f32>(&cfg)?)] {
                let mut model = start;
                if n > 0 {
                    let report = train(&mut model, &subset, &valid, &self.vocab, &tc)?;
                    self.artifacts.files.push((
                        format!("logs/few-shot-{arm}-n{n}.r{replicate}.jsonl").into(),
                        report.to_jsonl().into_bytes(),
                    ));
                }
                let point = CurvePoint {
                    n,
                    report: evaluate(&model, &self.vocab, &test)?,
                };
                if arm == "warm" {
                    curve.warm.push(point);
                } else {
                    curve.cold.push(point);
                }
            }
        }
        Ok(curve)
    }
}

struct Setting {
    name: String,
    train_ids: Vec<String>,
    eval_ids: Vec<String>,
}

fn bilingual_name(id: &str) -> String {
    format!("bilingual:{id}")
}

fn settings_for(
    m: &ExperimentManifest,
    source: &dyn DatasetSource,
) -> Result<Vec<Setting>, HarnessError> {
    let ids = &m.dataset_ids;
    let with_extra = |base: Vec<String>| -> Vec<String> {
        let mut out = base;
        out.extend(
            m.eval_ids
                .iter()
                .filter(|e| !out.contains(e))
                .cloned()
                .collect::<Vec<_>>(),
        );
        out
    };
    let grouped = |key: &dyn Fn(&LanguagePairMeta) -> String,
                   prefix: &str|
     -> Result<Vec<Setting>, HarnessError> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for id in ids {
            groups
                .entry(key(&source.meta(id)?))
                .or_default()
                .push(id.clone());
        }
        Ok(groups
            .into_iter()
            .map(|(g, members)| Setting {
                name: format!("{prefix}:{g}"),
                train_ids: members.clone(),
                eval_ids: with_extra(members),
            })
            .collect())
    };
    Ok(match m.mode {
        Mode::Bilingual => ids
            .iter()
            .map(|id| Setting {
                name: bilingual_name(id),
                train_ids: vec![id.clone()],
                eval_ids: with_extra(vec![id.clone()]),
            })
            .collect(),
        Mode::ZeroShotMatrix => ids
            .iter()
            .map(|id| Setting {
                name: bilingual_name(id),
                train_ids: vec![id.clone()],
                eval_ids: with_extra(ids.clone()),
            })
            .collect(),
        Mode::All => vec![Setting {
            name: "all".into(),
            train_ids: ids.clone(),
            eval_ids: with_extra(ids.clone()),
        }],
        Mode::AllMinusOne => {
            let h = m.held_out.clone().expect("validated");
            vec![Setting {
                name: format!("all-1:{h}"),
                train_ids: m.pool(),
                eval_ids: with_extra(vec![h]),
            }]
        }
        Mode::GroupDomain => grouped(&|meta| meta.domain.to_string(), "domain")?,
        Mode::GroupMtType => grouped(&|meta| meta.mt_type.to_string(), "mt")?,
        // The in-run leave-one-out model is reported as the zero-shot row.
        Mode::FewShot if m.warm_start_checkpoint.is_none() => {
            let h = m.held_out.clone().expect("validated");
            vec![Setting {
                name: format!("all-1:{h}"),
                train_ids: m.pool(),
                eval_ids: with_extra(vec![h]),
            }]
        }
        Mode::FewShot => Vec::new(),
    })
}

/// Learning curves for a `FEW_SHOT` manifest, one per replicate.
pub fn few_shot_curve(
    manifest: &ExperimentManifest,
    source: &dyn DatasetSource,
) -> Result<Vec<FewShotCurve>, HarnessError> {
    if manifest.mode != Mode::FewShot {
        return Err(invalid("few_shot_curve needs a FEW_SHOT manifest"));
    }
    let mut runner = Runner::new(manifest, source)?;
    (0..manifest.replicates).map(|r| runner.curve(r)).collect()
}

fn mean_cell(setting: String, train_ids: Vec<String>, eval_id: String, runs: Vec<SeedRun>) -> Cell {
    let f1_multi = runs
        .iter()
        .map(|r| r.report.target_combined.f1_multi)
        .sum::<f64>()
        / runs.len() as f64;
    Cell {
        setting,
        train_ids,
        eval_id,
        runs,
        f1_multi,
        reference: None,
        delta: None,
    }
}

/// Runs the experiment without writing artifacts.
pub fn run(
    manifest: &ExperimentManifest,
    source: &dyn DatasetSource,
) -> Result<ResultTable, HarnessError> {
    Ok(execute(manifest, source)?.0)
}

/// Runs the experiment and writes its artifacts directory under `root`
/// (`run-<manifest hash prefix>`), replacing any previous run of the same
/// manifest. Returns the table and the directory.
pub fn run_with_artifacts(
    manifest: &ExperimentManifest,
    source: &dyn DatasetSource,
    root: &Path,
) -> Result<(ResultTable, PathBuf), HarnessError> {
    let (table, curves, mut artifacts) = execute(manifest, source)?;
    artifacts
        .files
        .push(("result_table.json".into(), table.to_json().into_bytes()));
    if !curves.is_empty() {
        let json = serde_json::to_string_pretty(&curves).expect("curves serialize");
        artifacts
            .files
            .push(("few_shot_curves.json".into(), json.into_bytes()));
    }
    for format in [ReportFormat::Markdown, ReportFormat::Csv] {
        artifacts.files.push((
            format!("report.{}", format.extension()).into(),
            render_report(&table, format).into_bytes(),
        ));
    }
    let dir = root.join(format!("run-{}", &table.manifest_hash[..16]));
    write_dir_atomically(&dir, &artifacts.files)?;
    Ok((table, dir))
}

fn execute(
    manifest: &ExperimentManifest,
    source: &dyn DatasetSource,
) -> Result<(ResultTable, Vec<FewShotCurve>, Artifacts), HarnessError> {
    let mut runner = Runner::new(manifest, source)?;
    let mut cells = Vec::new();
    let mut curves = Vec::new();
    let settings = settings_for(manifest, source)?;
    for s in &settings {
        for eval_id in &s.eval_ids {
            let runs = (0..manifest.replicates)
                .map(|r| runner.evaluate_trained(&s.train_ids, r, eval_id))
                .collect::<Result<Vec<_>, _>>()?;
            cells.push(mean_cell(
                s.name.clone(),
                s.train_ids.clone(),
                eval_id.clone(),
                runs,
            ));
        }
    }
    if manifest.mode == Mode::FewShot {
        for r in 0..manifest.replicates {
            curves.push(runner.curve(r)?);
        }
        let held_out = manifest.held_out.clone().expect("validated");
        for (i, &n) in manifest.few_shot_sizes.iter().enumerate() {
            for arm in ["warm", "cold"] {
                let runs = curves
                    .iter()
                    .map(|c| {
                        let points = if arm == "warm" { &c.warm } else { &c.cold };
                        SeedRun {
                            replicate: c.replicate,
                            seed: mix_seed(
                                replicate_seed(manifest.seed, c.replicate),
                                hash_str(&format!("few-shot:{held_out}:{n}")),
                            ),
                            report: points[i].report,
                        }
                    })
                    .collect();
                let train_ids = if arm == "warm" {
                    let mut ids = manifest.pool();
                    ids.push(held_out.clone());
                    ids
                } else {
                    vec![held_out.clone()]
                };
                cells.push(mean_cell(
                    format!("{arm}:n={n}"),
                    train_ids,
                    held_out.clone(),
                    runs,
                ));
            }
        }
    }
    let needs_reference = manifest.bilingual_reference || manifest.mode == Mode::ZeroShotMatrix;
    if needs_reference {
        let mut evals: Vec<String> = Vec::new();
        for c in &cells {
            if !evals.contains(&c.eval_id) {
                evals.push(c.eval_id.clone());
            }
        }
        for e in &evals {
            let name = bilingual_name(e);
            if !cells.iter().any(|c| c.setting == name && &c.eval_id == e) {
                let ids = vec![e.clone()];
                let runs = (0..manifest.replicates)
                    .map(|r| runner.evaluate_trained(&ids, r, e))
                    .collect::<Result<Vec<_>, _>>()?;
                cells.push(mean_cell(name.clone(), ids, e.clone(), runs));
            }
        }
        for c in &mut cells {
            let name = bilingual_name(&c.eval_id);
            if c.setting != name {
                c.reference = Some(name);
            }
        }
    }
    let mut table = ResultTable {
        name: manifest.name.clone(),
        mode: manifest.mode,
        manifest_hash: manifest.hash(),
        cells,
    };
    table.link_references();
    Ok((table, curves, runner.artifacts))
}

fn write_dir_atomically(dir: &Path, files: &[(PathBuf, Vec<u8>)]) -> Result<(), HarnessError> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = dir
        .file_name()
        .expect("run dir has a name")
        .to_string_lossy();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    for (rel, bytes) in files {
        let path = tmp.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(io_err(p))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

/// `(−0.05)`-style parenthesized difference, two decimals.
pub fn format_delta(delta: f64) -> String {
    let rounded = (delta * 100.0).round() / 100.0;
    if rounded < 0.0 {
        format!("(\u{2212}{:.2})", -rounded)
    } else {
        format!("(+{:.2})", rounded.abs())
    }
}

fn format_cell(c: &Cell) -> String {
    match c.delta {
        Some(d) => format!("{:.4} {}", c.f1_multi, format_delta(d)),
        None => format!("{:.4}", c.f1_multi),
    }
}

pub fn render_report(table: &ResultTable, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => table.to_json(),
        ReportFormat::Csv => render_csv(table),
        ReportFormat::Markdown => render_markdown(table),
    }
}

fn render_csv(table: &ResultTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "setting",
        "train_ids",
        "eval_id",
        "replicates",
        "f1_multi",
        "cell",
        "reference",
        "delta",
        "target_words",
        "target_gaps",
        "source_words",
    ])
    .expect("in-memory write");
    for c in &table.cells {
        w.write_record([
            c.setting.clone(),
            c.train_ids.join(" "),
            c.eval_id.clone(),
            c.runs.len().to_string(),
            format!("{:.6}", c.f1_multi),
            format_cell(c),
            c.reference.clone().unwrap_or_default(),
            c.delta.map(|d| format!("{d:.6}")).unwrap_or_default(),
            format!("{:.6}", c.surface_mean("target_words")),
            format!("{:.6}", c.surface_mean("target_gaps")),
            format!("{:.6}", c.surface_mean("source_words")),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is UTF-8")
}

fn render_markdown(table: &ResultTable) -> String {
    let evals = table.eval_ids();
    let mut out = String::new();
    if !table.name.is_empty() {
        out.push_str(&format!("## {}\n\n", table.name));
    }
    out.push_str("Target-combined F1-Multi");
    if table.cells.iter().any(|c| c.delta.is_some()) {
        out.push_str(" (difference to the bilingual model in parentheses)");
    }
    out.push_str("\n\n| setting |");
    for e in &evals {
        out.push_str(&format!(" {e} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(evals.len()));
    out.push('\n');
    for s in table.settings() {
        out.push_str(&format!("| {s} |"));
        for e in &evals {
            let text = table
                .cell(s, e)
                .map_or_else(|| "\u{2013}".to_string(), format_cell);
            out.push_str(&format!(" {text} |"));
        }
        out.push('\n');
    }
    out
}

/// Writes the rendered report to `path` atomically.
pub fn emit_report(
    table: &ResultTable,
    format: ReportFormat,
    path: &Path,
) -> Result<(), HarnessError> {
    if table.cells.is_empty() {
        return Err(invalid("cannot report an empty table"));
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, render_report(table, format)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::F1MultiReport;

    fn report(f: f64) -> SurfaceReport {
        let r = F1MultiReport {
            f1_ok: 1.0,
            f1_bad: f,
            f1_multi: f,
            support_ok: 1,
            support_bad: 1,
        };
        SurfaceReport {
            target_combined: r,
            target_words: r,
            target_gaps: r,
            source_words: r,
        }
    }

    fn cell(setting: &str, eval: &str, f: f64) -> Cell {
        mean_cell(
            setting.into(),
            vec![eval.into()],
            eval.into(),
            vec![SeedRun {
                replicate: 0,
                seed: 1,
                report: report(f),
            }],
        )
    }

    fn table() -> ResultTable {
        let mut cells = vec![
            cell("bilingual:a", "a", 0.61),
            cell("bilingual:b", "b", 0.44),
            cell("all", "a", 0.5612),
            cell("all", "b", 0.4521),
        ];
        cells[2].reference = Some("bilingual:a".into());
        cells[3].reference = Some("bilingual:b".into());
        let mut t = ResultTable {
            name: "t".into(),
            mode: Mode::All,
            manifest_hash: "00".repeat(32),
            cells,
        };
        t.link_references();
        t
    }

    fn manifest() -> ExperimentManifest {
        ExperimentManifest::from_json(
            r#"{"mode": "ALL", "dataset_ids": ["a", "b"],
                "model_cfg": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16,
                              "dropout": 0.0, "max_seq_length": 32}}"#,
        )
        .unwrap()
    }

    #[test]
    fn deltas_are_exact_differences() {
        let t = table();
        let all_a = t.cell("all", "a").unwrap();
        assert_eq!(all_a.delta, Some(0.5612 - 0.61));
        assert!(t.cell("bilingual:a", "a").unwrap().delta.is_none());
    }

    #[test]
    fn delta_format() {
        assert_eq!(format_delta(-0.0512), "(\u{2212}0.05)");
        assert_eq!(format_delta(0.094), "(+0.09)");
        assert_eq!(format_delta(-0.001), "(+0.00)");
    }

    #[test]
    fn markdown_grid() {
        let md = render_report(&table(), ReportFormat::Markdown);
        assert!(
            md.contains("| all | 0.5612 (\u{2212}0.05) | 0.4521 (+0.01) |"),
            "{md}"
        );
        assert!(md.contains("| bilingual:a | 0.6100 | \u{2013} |"), "{md}");
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let t = table();
        let text = render_report(&t, ReportFormat::Csv);
        assert_eq!(text.lines().count(), t.cells.len() + 1);
        assert!(text.starts_with("setting,train_ids,eval_id,"));
    }

    #[test]
    fn json_round_trip() {
        let t = table();
        assert_eq!(ResultTable::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn manifest_invariants() {
        let m = manifest();
        assert_eq!(m.replicates, 1);
        assert_eq!(m.train_cfg, TrainConfig::default());
        let mut bad = m.clone();
        bad.mode = Mode::AllMinusOne;
        assert!(matches!(
            bad.validate(),
            Err(HarnessError::ManifestInvalid(_))
        ));
        bad.held_out = Some("c".into());
        assert!(matches!(
            bad.validate(),
            Err(HarnessError::ManifestInvalid(_))
        ));
        bad.held_out = Some("b".into());
        bad.validate().unwrap();
        bad.mode = Mode::FewShot;
        assert!(bad.validate().is_err(), "sizes required");
        bad.few_shot_sizes = vec![100, 100];
        assert!(bad.validate().is_err(), "strictly increasing");
        bad.few_shot_sizes = vec![0, 100, 200];
        bad.validate().unwrap();
        let mut dup = m;
        dup.eval_ids = vec!["a".into()];
        assert!(dup.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = ExperimentManifest::from_json(
            r#"{"mode": "ALL", "dataset_ids": ["a"], "modle_cfg": {}}"#,
        );
        assert!(matches!(err, Err(HarnessError::ManifestInvalid(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = manifest();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_dataset_reported() {
        let m = manifest();
        let source = ManifestSource::new(&m, Path::new(".")).unwrap();
        assert!(matches!(run(&m, &source), Err(HarnessError::DatasetNotFound(id)) if id == "a"));
    }
}
