//! Deterministic pseudo-language QE corpora.
//!
//! Every pseudo-language shares a concept inventory (indices into a base
//! vocabulary generated from the profile seed) and renders each concept
//! through its own injective word transform. A clean translation is the
//! word-by-word rendering of the same concept sequence, so alignment is
//! exact and corruption events map to gold tags without noise.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedExample, Dataset, LanguagePairMeta, Tag};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("vocabulary size {0} is below the minimum of 10")]
    VocabTooSmall(usize),
    #[error("language id {0:?} must be non-empty ASCII alphanumeric")]
    InvalidLanguageId(String),
    #[error("corruption probabilities invalid: {0}")]
    InvalidCorruption(String),
    #[error("profiles have different vocabulary sizes ({0} vs {1})")]
    VocabSizeMismatch(usize, usize),
    #[error("sentence length range [{0}, {1}] is invalid")]
    InvalidLengthRange(usize, usize),
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error("register is invalid: {0}")]
    InvalidRegister(String),
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash of a string.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Letter substitution cipher plus a language suffix.
///
/// The cipher is a permutation of `a..=z`, so it is injective on base words;
/// the `_<lang_id>` suffix makes vocabularies of distinct languages disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordTransform {
    pub cipher: [u8; 26],
    pub suffix: String,
}

impl WordTransform {
    fn new(lang_id: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, hash_str(lang_id)));
        let mut cipher: [u8; 26] = std::array::from_fn(|i| b'a' + i as u8);
        for i in (1..26).rev() {
            let j = rng.gen_range(0..=i);
            cipher.swap(i, j);
        }
        WordTransform {
            cipher,
            suffix: format!("_{lang_id}"),
        }
    }

    pub fn apply(&self, word: &str) -> String {
        let mut out: String = word
            .bytes()
            .map(|b| {
                if b.is_ascii_lowercase() {
                    self.cipher[(b - b'a') as usize] as char
                } else {
                    b as char
                }
            })
            .collect();
        out.push_str(&self.suffix);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub lang_id: String,
    /// Base (concept) words; index `i` is concept `i` in every language built with the same seed.
    pub vocab: Vec<String>,
    pub word_transform: WordTransform,
    pub seed: u64,
    /// `vocab` rendered through `word_transform`, cached.
    pub surface: Vec<String>,
    /// Concepts that text authored in this language talks about. Sentences
    /// generated with this profile as the source draw only from these;
    /// `None` means the whole inventory.
    #[serde(default)]
    pub register: Option<Vec<usize>>,
}

impl LanguageProfile {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn word(&self, concept: usize) -> &str {
        &self.surface[concept]
    }

    /// Restricts authored content to `concepts` (sorted, deduplicated).
    pub fn with_register(mut self, mut concepts: Vec<usize>) -> Result<Self, SynthError> {
        concepts.sort_unstable();
        concepts.dedup();
        if concepts.is_empty() {
            return Err(SynthError::InvalidRegister("no concepts".into()));
        }
        if let Some(&c) = concepts.iter().find(|&&c| c >= self.vocab_size()) {
            return Err(SynthError::InvalidRegister(format!(
                "concept {c} outside an inventory of {}",
                self.vocab_size()
            )));
        }
        self.register = Some(concepts);
        Ok(self)
    }

    fn sample_concept(&self, rng: &mut ChaCha8Rng) -> usize {
        match &self.register {
            Some(r) => r[rng.gen_range(0..r.len())],
            None => rng.gen_range(0..self.vocab_size()),
        }
    }
}

/// A pseudo-random subset of `size` concepts out of `vocab_size`, fixed by
/// `register_seed`. Languages given the same register write about the same
/// things.
pub fn register_concepts(
    vocab_size: usize,
    size: usize,
    register_seed: u64,
) -> Result<Vec<usize>, SynthError> {
    if size == 0 || size > vocab_size {
        return Err(SynthError::InvalidRegister(format!(
            "size {size} for an inventory of {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(register_seed, 0x2E6));
    let mut all: Vec<usize> = (0..vocab_size).collect();
    for i in (1..vocab_size).rev() {
        let j = rng.gen_range(0..=i);
        all.swap(i, j);
    }
    all.truncate(size);
    all.sort_unstable();
    Ok(all)
}

fn base_vocab(size: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xBA5E));
    let mut seen = HashSet::with_capacity(size);
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::with_capacity(syllables * 2);
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn make_language_profile(
    lang_id: &str,
    vocab_size: usize,
    seed: u64,
) -> Result<LanguageProfile, SynthError> {
    if lang_id.is_empty() || !lang_id.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(SynthError::InvalidLanguageId(lang_id.to_string()));
    }
    if vocab_size < 10 {
        return Err(SynthError::VocabTooSmall(vocab_size));
    }
    let vocab = base_vocab(vocab_size, seed);
    let word_transform = WordTransform::new(lang_id, seed);
    let surface = vocab.iter().map(|w| word_transform.apply(w)).collect();
    Ok(LanguageProfile {
        lang_id: lang_id.to_string(),
        vocab,
        word_transform,
        seed,
        surface,
        register: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub p_substitute: f64,
    pub p_delete: f64,
    pub p_insert: f64,
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ps = [self.p_substitute, self.p_delete, self.p_insert];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SynthError::InvalidCorruption(format!(
                "{ps:?} outside [0,1]"
            )));
        }
        if ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(SynthError::InvalidCorruption(format!(
                "{ps:?} sums above 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

impl Default for LengthRange {
    fn default() -> Self {
        LengthRange { min: 3, max: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Substitution,
    Deletion,
    Insertion,
}

/// One corruption applied to a clean translation.
///
/// `target_index` is a word index for substitutions and insertions and a gap
/// index for deletions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionEvent {
    pub kind: EventKind,
    pub source_index: Option<usize>,
    pub target_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceEvents {
    pub sentence: usize,
    pub events: Vec<CorruptionEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub events: Vec<SentenceEvents>,
    /// Uncorrupted translations, one per sentence.
    pub clean_targets: Vec<Vec<String>>,
}

/// Generates `n` sentences from `src` into `tgt` with default sentence lengths.
pub fn generate_pair_corpus(
    src: &LanguageProfile,
    tgt: &LanguageProfile,
    n: usize,
    corruption: &CorruptionConfig,
    meta: LanguagePairMeta,
) -> Result<SynthCorpus, SynthError> {
    generate_pair_corpus_with_lengths(src, tgt, n, corruption, LengthRange::default(), meta)
}

pub fn generate_pair_corpus_with_lengths(
    src: &LanguageProfile,
    tgt: &LanguageProfile,
    n: usize,
    corruption: &CorruptionConfig,
    lengths: LengthRange,
    meta: LanguagePairMeta,
) -> Result<SynthCorpus, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    corruption.validate()?;
    if src.vocab_size() != tgt.vocab_size() {
        return Err(SynthError::VocabSizeMismatch(
            src.vocab_size(),
            tgt.vocab_size(),
        ));
    }
    if lengths.min == 0 || lengths.min > lengths.max {
        return Err(SynthError::InvalidLengthRange(lengths.min, lengths.max));
    }
    let mut examples = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    let mut clean_targets = Vec::with_capacity(n);
    for i in 0..n {
        let (example, ev, clean) = generate_sentence(src, tgt, i, corruption, lengths);
        examples.push(example);
        events.push(SentenceEvents {
            sentence: i,
            events: ev,
        });
        clean_targets.push(clean);
    }
    let dataset = Dataset::new(meta, examples).expect("generator emits valid examples");
    Ok(SynthCorpus {
        dataset,
        events,
        clean_targets,
    })
}

fn generate_sentence(
    src: &LanguageProfile,
    tgt: &LanguageProfile,
    index: usize,
    corruption: &CorruptionConfig,
    lengths: LengthRange,
) -> (AnnotatedExample, Vec<CorruptionEvent>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(corruption.seed, index as u64));
    let v = src.vocab_size();
    let len = rng.gen_range(lengths.min..=lengths.max);
    let concepts: Vec<usize> = (0..len).map(|_| src.sample_concept(&mut rng)).collect();

    let source_tokens: Vec<String> = concepts.iter().map(|&c| src.word(c).to_string()).collect();
    let clean: Vec<String> = concepts.iter().map(|&c| tgt.word(c).to_string()).collect();
    let mut source_tags = vec![Tag::Ok; len];
    let mut target_tokens = Vec::with_capacity(len + 2);
    let mut word_tags = Vec::with_capacity(len + 2);
    // Gap `g` sits before target word `g`; a deletion marks the gap at the
    // current end of the emitted target.
    let mut bad_gaps: Vec<usize> = Vec::new();
    let mut events = Vec::new();

    let (ps, pd, pi) = (
        corruption.p_substitute,
        corruption.p_delete,
        corruption.p_insert,
    );
    for (i, &concept) in concepts.iter().enumerate() {
        let u: f64 = rng.gen();
        if u < ps {
            let mut other = rng.gen_range(0..v - 1);
            if other >= concept {
                other += 1;
            }
            events.push(CorruptionEvent {
                kind: EventKind::Substitution,
                source_index: Some(i),
                target_index: target_tokens.len(),
            });
            target_tokens.push(tgt.word(other).to_string());
            word_tags.push(Tag::Bad);
            source_tags[i] = Tag::Bad;
        } else if u < ps + pd {
            events.push(CorruptionEvent {
                kind: EventKind::Deletion,
                source_index: Some(i),
                target_index: target_tokens.len(),
            });
            bad_gaps.push(target_tokens.len());
            source_tags[i] = Tag::Bad;
        } else if u < ps + pd + pi {
            target_tokens.push(tgt.word(concept).to_string());
            word_tags.push(Tag::Ok);
            let spurious = rng.gen_range(0..v);
            events.push(CorruptionEvent {
                kind: EventKind::Insertion,
                source_index: None,
                target_index: target_tokens.len(),
            });
            target_tokens.push(tgt.word(spurious).to_string());
            word_tags.push(Tag::Bad);
        } else {
            target_tokens.push(tgt.word(concept).to_string());
            word_tags.push(Tag::Ok);
        }
    }
    let mut gap_tags = vec![Tag::Ok; target_tokens.len() + 1];
    for g in bad_gaps {
        gap_tags[g] = Tag::Bad;
    }
    let example = AnnotatedExample {
        source_tokens,
        target_tokens,
        source_tags,
        target_word_tags: word_tags,
        target_gap_tags: gap_tags,
    };
    (example, events, clean)
}

/// Builds metadata for a synthetic pair, e.g. `sE-sX`.
pub fn synthetic_meta(
    src: &LanguageProfile,
    tgt: &LanguageProfile,
    domain: crate::corpus::Domain,
    mt_type: crate::corpus::MtType,
    train_size: usize,
) -> LanguagePairMeta {
    LanguagePairMeta {
        pair_id: format!("{}-{}", src.lang_id, tgt.lang_id),
        domain,
        mt_type,
        mt_system: "synthetic".to_string(),
        competition: "synthetic".to_string(),
        train_size,
    }
}
