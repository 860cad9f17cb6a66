//! Word-piece vocabulary and the GAP-token input layout.
//!
//! An example is laid out as
//!
//! ```text
//! BOS s1 .. sk SEP GAP t1 GAP t2 .. tm GAP SEP
//! ```
//!
//! where every word may expand into several pieces. The first piece of a
//! word carries the word's tag, continuation pieces are ignored, and every
//! GAP carries the tag of its gap.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{AnnotatedExample, Dataset, Tag};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const SEP: &str = "[SEP]";
pub const GAP: &str = "<GAP>";
pub const MASK: &str = "<mask>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const GAP_ID: u32 = 4;
pub const MASK_ID: u32 = 5;
pub const NUM_SPECIALS: usize = 6;

const SPECIALS: [&str; NUM_SPECIALS] = [PAD, UNK, BOS, SEP, GAP, MASK];
const CONTINUATION: &str = "##";

/// Smallest sequence budget the layout accepts.
pub const MIN_SEQ_LENGTH: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("max_seq_length {0} cannot hold the fixed frame (minimum {MIN_SEQ_LENGTH})")]
    OverflowUnrepresentable(usize),
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("{predictions} predictions for an encoding of length {length}")]
    LengthMismatch { predictions: usize, length: usize },
    #[error("vocabulary needs at least one corpus")]
    NoCorpora,
    #[error("invalid vocabulary file: {0}")]
    InvalidVocab(String),
}

/// Dense word-piece vocabulary. Ids `0..6` are the specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an id-ordered piece list.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Vocab, EncodeError> {
        if pieces.len() < NUM_SPECIALS || pieces[..NUM_SPECIALS] != SPECIALS {
            return Err(EncodeError::InvalidVocab(
                "specials must occupy the lowest ids".to_string(),
            ));
        }
        let mut id_of = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if id_of.insert(p.clone(), i as u32).is_some() {
                return Err(EncodeError::InvalidVocab(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Vocab { pieces, id_of })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.id_of.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Splits one whitespace word into piece ids: the whole word when known,
    /// otherwise its characters (`c`, `##c`, ...), with UNK for unknown characters.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        if !SPECIALS.contains(&word) {
            if let Some(id) = self.id(word) {
                return vec![id];
            }
        }
        word.chars()
            .enumerate()
            .map(|(i, c)| {
                let piece = if i == 0 {
                    c.to_string()
                } else {
                    format!("{CONTINUATION}{c}")
                };
                self.id(&piece).unwrap_or(UNK_ID)
            })
            .collect()
    }

    /// SHA-256 over the id-ordered piece list.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pieces {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// JSON array of pieces ordered by id.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.pieces).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Vocab, EncodeError> {
        let pieces: Vec<String> =
            serde_json::from_str(text).map_err(|e| EncodeError::InvalidVocab(e.to_string()))?;
        Vocab::from_pieces(pieces)
    }
}

/// Frequency-ranked vocabulary over all source and target words.
///
/// Character pieces for every observed character are always included so
/// that any word over a known alphabet can be spelled out. Whole words fill
/// the remaining budget in order of decreasing frequency, ties broken
/// lexicographically.
pub fn build_vocab(corpora: &[&Dataset], max_size: usize) -> Result<Vocab, EncodeError> {
    if corpora.is_empty() {
        return Err(EncodeError::NoCorpora);
    }
    let words = corpora.iter().flat_map(|ds| {
        ds.examples
            .iter()
            .flat_map(|e| e.source_tokens.iter().chain(&e.target_tokens))
            .map(String::as_str)
    });
    Ok(build_vocab_from_words(words, max_size))
}

/// Frequency-ranked vocabulary over a raw word stream (see [`build_vocab`]).
pub fn build_vocab_from_words<'a>(
    words: impl IntoIterator<Item = &'a str>,
    max_size: usize,
) -> Vocab {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut chars: BTreeSet<String> = BTreeSet::new();
    for w in words {
        *counts.entry(w).or_default() += 1;
        for (i, c) in w.chars().enumerate() {
            chars.insert(if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            });
        }
    }
    let mut words: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !SPECIALS.contains(w))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let budget = max_size.saturating_sub(NUM_SPECIALS + chars.len());
    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut taken: BTreeSet<&str> = BTreeSet::new();
    for (w, _) in words.into_iter().take(budget) {
        pieces.push(w.to_string());
        taken.insert(w);
    }
    for c in &chars {
        if !taken.contains(c.as_str()) {
            pieces.push(c.clone());
        }
    }
    Vocab::from_pieces(pieces).expect("specials first and pieces unique")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Ok,
    Bad,
    Ignore,
}

impl From<Tag> for Label {
    fn from(t: Tag) -> Self {
        match t {
            Tag::Ok => Label::Ok,
            Tag::Bad => Label::Bad,
        }
    }
}

impl Label {
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Ok => Some(0),
            Label::Bad => Some(1),
            Label::Ignore => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    SourceWord,
    TargetWord,
    Gap,
    None,
}

/// Words and gaps that did not fit into the sequence budget.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub source_words: Vec<usize>,
    pub target_words: Vec<usize>,
    pub target_gaps: Vec<usize>,
}

impl TruncationReport {
    pub fn is_empty(&self) -> bool {
        self.source_words.is_empty() && self.target_words.is_empty() && self.target_gaps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    pub labels: Vec<Label>,
    pub surface_of: Vec<Surface>,
    pub word_index_of: Vec<Option<usize>>,
    pub length: usize,
    pub n_source_words: usize,
    pub n_target_words: usize,
    pub truncation: TruncationReport,
}

impl EncodedExample {
    /// True where the position is the scored head of a word or a gap.
    pub fn is_head(&self, p: usize) -> bool {
        match self.surface_of[p] {
            Surface::None => false,
            Surface::Gap => true,
            s => {
                p == 0
                    || self.surface_of[p - 1] != s
                    || self.word_index_of[p - 1] != self.word_index_of[p]
            }
        }
    }

    pub fn labeled_positions(&self) -> usize {
        self.labels.iter().filter(|l| **l != Label::Ignore).count()
    }
}

struct Piece {
    id: u32,
    label: Label,
    surface: Surface,
    word: Option<usize>,
}

pub fn encode_example(
    example: &AnnotatedExample,
    vocab: &Vocab,
    max_seq_length: usize,
) -> Result<EncodedExample, EncodeError> {
    if max_seq_length < MIN_SEQ_LENGTH {
        return Err(EncodeError::OverflowUnrepresentable(max_seq_length));
    }
    example.validate().map_err(EncodeError::InvalidExample)?;

    let mut source = Vec::new();
    for (w, (tok, tag)) in example
        .source_tokens
        .iter()
        .zip(&example.source_tags)
        .enumerate()
    {
        for (k, id) in vocab.tokenize_word(tok).into_iter().enumerate() {
            source.push(Piece {
                id,
                label: if k == 0 { (*tag).into() } else { Label::Ignore },
                surface: Surface::SourceWord,
                word: Some(w),
            });
        }
    }
    let mut target = Vec::new();
    let gap = |g: usize| Piece {
        id: GAP_ID,
        label: example.target_gap_tags[g].into(),
        surface: Surface::Gap,
        word: Some(g),
    };
    for (w, (tok, tag)) in example
        .target_tokens
        .iter()
        .zip(&example.target_word_tags)
        .enumerate()
    {
        target.push(gap(w));
        for (k, id) in vocab.tokenize_word(tok).into_iter().enumerate() {
            target.push(Piece {
                id,
                label: if k == 0 { (*tag).into() } else { Label::Ignore },
                surface: Surface::TargetWord,
                word: Some(w),
            });
        }
    }
    target.push(gap(example.target_tokens.len()));

    // BOS, SEP, SEP
    let frame = 3;
    let available = max_seq_length - frame;
    let mut truncation = TruncationReport::default();
    if source.len() + target.len() > available {
        let keep_source = available.saturating_sub(target.len());
        let keep_target = available - keep_source;
        for dropped in source.drain(keep_source..) {
            push_dropped(&mut truncation, &dropped);
        }
        for dropped in target.drain(keep_target.min(target.len())..) {
            push_dropped(&mut truncation, &dropped);
        }
    }

    let mut pieces = Vec::with_capacity(source.len() + target.len() + frame);
    let special = |id| Piece {
        id,
        label: Label::Ignore,
        surface: Surface::None,
        word: None,
    };
    pieces.push(special(BOS_ID));
    pieces.extend(source);
    pieces.push(special(SEP_ID));
    pieces.extend(target);
    pieces.push(special(SEP_ID));

    let length = pieces.len();
    let mut out = EncodedExample {
        ids: Vec::with_capacity(length),
        labels: Vec::with_capacity(length),
        surface_of: Vec::with_capacity(length),
        word_index_of: Vec::with_capacity(length),
        length,
        n_source_words: example.source_tokens.len(),
        n_target_words: example.target_tokens.len(),
        truncation,
    };
    for p in pieces {
        out.ids.push(p.id);
        out.labels.push(p.label);
        out.surface_of.push(p.surface);
        out.word_index_of.push(p.word);
    }
    Ok(out)
}

fn push_dropped(report: &mut TruncationReport, piece: &Piece) {
    // Only heads count: a word whose first piece survives is still scored.
    if piece.label == Label::Ignore {
        return;
    }
    let w = piece.word.expect("scored pieces carry a word index");
    match piece.surface {
        Surface::SourceWord => report.source_words.push(w),
        Surface::TargetWord => report.target_words.push(w),
        Surface::Gap => report.target_gaps.push(w),
        Surface::None => {}
    }
}

pub fn encode_dataset(
    dataset: &Dataset,
    vocab: &Vocab,
    max_seq_length: usize,
) -> Result<Vec<EncodedExample>, EncodeError> {
    dataset
        .examples
        .iter()
        .map(|e| encode_example(e, vocab, max_seq_length))
        .collect()
}

/// Word-level tags read back from per-position predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedTags {
    pub source_tags: Vec<Tag>,
    pub target_word_tags: Vec<Tag>,
    pub target_gap_tags: Vec<Tag>,
}

/// Reads word and gap tags from the head positions. Words or gaps lost to
/// truncation come back as BAD.
pub fn decode_predictions(
    encoded: &EncodedExample,
    per_position_class: &[Tag],
) -> Result<DecodedTags, EncodeError> {
    if per_position_class.len() != encoded.length {
        return Err(EncodeError::LengthMismatch {
            predictions: per_position_class.len(),
            length: encoded.length,
        });
    }
    let mut out = DecodedTags {
        source_tags: vec![Tag::Bad; encoded.n_source_words],
        target_word_tags: vec![Tag::Bad; encoded.n_target_words],
        target_gap_tags: vec![Tag::Bad; encoded.n_target_words + 1],
    };
    for (p, &class) in per_position_class.iter().enumerate() {
        if !encoded.is_head(p) {
            continue;
        }
        let w = encoded.word_index_of[p].expect("heads carry a word index");
        let slot = match encoded.surface_of[p] {
            Surface::SourceWord => &mut out.source_tags[w],
            Surface::TargetWord => &mut out.target_word_tags[w],
            Surface::Gap => &mut out.target_gap_tags[w],
            Surface::None => unreachable!(),
        };
        *slot = class;
    }
    Ok(out)
}
