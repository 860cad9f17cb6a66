//! Word-level QE datasets in the WMT four-file layout.
//!
//! A dataset is stored as four parallel, line-aligned UTF-8 files:
//!
//! | file           | one line holds                                      |
//! |----------------|-----------------------------------------------------|
//! | `.src`         | whitespace-tokenized source sentence                |
//! | `.mt`          | whitespace-tokenized machine translation (m words)  |
//! | `.source_tags` | one `OK`/`BAD` tag per source word                  |
//! | `.tags`        | `2m+1` tags interleaved `gap word gap ... word gap` |
//!
//! Parsing de-interleaves the target line into separate word and gap tag
//! lists; serialization re-interleaves them.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(
        "line counts differ: src={src}, mt={mt}, source_tags={source_tags}, tags={target_tags}"
    )]
    LineCountMismatch {
        src: usize,
        mt: usize,
        source_tags: usize,
        target_tags: usize,
    },
    #[error("line {line}: {surface} tag count {found} != expected {expected}")]
    TagArityError {
        line: usize,
        surface: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: unknown tag token {token:?} (expected OK or BAD)")]
    UnknownTagToken { line: usize, token: String },
    #[error("example {index}: {reason}")]
    InvalidExample { index: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("split of {n} examples at ratio {ratio} leaves an empty side")]
    DegenerateSplit { n: usize, ratio: f64 },
    #[error("no registry entry for {pair} {mt_type}")]
    UnknownPair { pair: String, mt_type: MtType },
    #[error("{pair} {mt_type} matches {count} registry entries; disambiguate by domain")]
    AmbiguousPair {
        pair: String,
        mt_type: MtType,
        count: usize,
    },
    #[error("invalid dataset json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Binary quality label. Matched case-sensitively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "BAD")]
    Bad,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Ok => "OK",
            Tag::Bad => "BAD",
        }
    }

    pub fn flipped(self) -> Tag {
        match self {
            Tag::Ok => Tag::Bad,
            Tag::Bad => Tag::Ok,
        }
    }

    /// Class index used by the model head: OK = 0, BAD = 1.
    pub fn class_index(self) -> usize {
        match self {
            Tag::Ok => 0,
            Tag::Bad => 1,
        }
    }

    pub fn from_class_index(class: usize) -> Tag {
        if class == 0 {
            Tag::Ok
        } else {
            Tag::Bad
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown tag token {0:?}")]
pub struct ParseTagError(pub String);

impl FromStr for Tag {
    type Err = ParseTagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "OK" => Ok(Tag::Ok),
            "BAD" => Ok(Tag::Bad),
            other => Err(ParseTagError(other.to_string())),
        }
    }
}

/// One source/MT sentence pair with gold tags on all three surfaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub source_tags: Vec<Tag>,
    pub target_word_tags: Vec<Tag>,
    pub target_gap_tags: Vec<Tag>,
}

impl AnnotatedExample {
    /// Builds an example from a `2m+1` interleaved target tag line.
    pub fn from_interleaved(
        source_tokens: Vec<String>,
        target_tokens: Vec<String>,
        source_tags: Vec<Tag>,
        interleaved: &[Tag],
    ) -> Result<Self, String> {
        let m = target_tokens.len();
        if interleaved.len() != 2 * m + 1 {
            return Err(format!("target tag count {} != 2*{m}+1", interleaved.len()));
        }
        let (gaps, words) = deinterleave(interleaved);
        let example = AnnotatedExample {
            source_tokens,
            target_tokens,
            source_tags,
            target_word_tags: words,
            target_gap_tags: gaps,
        };
        example.validate()?;
        Ok(example)
    }

    /// Checks every structural invariant, returning a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.source_tags.len() != self.source_tokens.len() {
            return Err(format!(
                "{} source tags for {} source tokens",
                self.source_tags.len(),
                self.source_tokens.len()
            ));
        }
        if self.target_word_tags.len() != self.target_tokens.len() {
            return Err(format!(
                "{} target word tags for {} target tokens",
                self.target_word_tags.len(),
                self.target_tokens.len()
            ));
        }
        if self.target_gap_tags.len() != self.target_tokens.len() + 1 {
            return Err(format!(
                "{} gap tags for {} target tokens (need m+1)",
                self.target_gap_tags.len(),
                self.target_tokens.len()
            ));
        }
        for token in self.source_tokens.iter().chain(&self.target_tokens) {
            if token.is_empty() {
                return Err("empty token".to_string());
            }
            if token.chars().any(char::is_whitespace) {
                return Err(format!("token {token:?} contains whitespace"));
            }
        }
        Ok(())
    }

    /// The `gap word gap ... word gap` sequence scored as the combined target surface.
    pub fn interleaved_target_tags(&self) -> Vec<Tag> {
        interleave(&self.target_gap_tags, &self.target_word_tags)
    }
}

/// Interleaves `m+1` gap tags with `m` word tags, starting and ending with a gap.
pub fn interleave(gaps: &[Tag], words: &[Tag]) -> Vec<Tag> {
    debug_assert_eq!(gaps.len(), words.len() + 1);
    let mut out = Vec::with_capacity(gaps.len() + words.len());
    for (i, gap) in gaps.iter().enumerate() {
        out.push(*gap);
        if let Some(word) = words.get(i) {
            out.push(*word);
        }
    }
    out
}

/// Splits a `2m+1` line into (gap tags, word tags).
pub fn deinterleave(tags: &[Tag]) -> (Vec<Tag>, Vec<Tag>) {
    let gaps = tags.iter().step_by(2).copied().collect();
    let words = tags.iter().skip(1).step_by(2).copied().collect();
    (gaps, words)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "IT")]
    It,
    Pharmaceutical,
    Wiki,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::It => "IT",
            Domain::Pharmaceutical => "Pharmaceutical",
            Domain::Wiki => "Wiki",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MtType {
    #[serde(rename = "SMT")]
    Smt,
    #[serde(rename = "NMT")]
    Nmt,
}

impl fmt::Display for MtType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MtType::Smt => "SMT",
            MtType::Nmt => "NMT",
        })
    }
}

/// Catalogue entry describing one language pair release.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePairMeta {
    /// ISO 639-1 codes, e.g. `En-Cs`.
    pub pair_id: String,
    pub domain: Domain,
    pub mt_type: MtType,
    /// Free-text description of the MT system that produced the translations.
    pub mt_system: String,
    pub competition: String,
    pub train_size: usize,
}

impl LanguagePairMeta {
    /// Source language code (the part before the dash).
    pub fn source_language(&self) -> &str {
        self.pair_id.split('-').next().unwrap_or(&self.pair_id)
    }

    /// Target language code (the part after the dash).
    pub fn target_language(&self) -> &str {
        self.pair_id.split('-').nth(1).unwrap_or("")
    }
}

fn meta(
    pair_id: &str,
    domain: Domain,
    mt_type: MtType,
    mt_system: &str,
    competition: &str,
    train_size: usize,
) -> LanguagePairMeta {
    LanguagePairMeta {
        pair_id: pair_id.to_string(),
        domain,
        mt_type,
        mt_system: mt_system.to_string(),
        competition: competition.to_string(),
        train_size,
    }
}

/// The nine WMT word-level QE releases, in catalogue order.
pub fn registry() -> Vec<LanguagePairMeta> {
    use Domain::*;
    use MtType::*;
    vec![
        meta(
            "De-En",
            Pharmaceutical,
            Smt,
            "Phrase-based SMT",
            "WMT 2018",
            25_963,
        ),
        meta("En-Cs", It, Smt, "Phrase-based SMT", "WMT 2018", 40_254),
        meta("En-De", Wiki, Nmt, "fairseq-based NMT", "WMT 2020", 7_000),
        meta("En-De", It, Nmt, "fairseq-based NMT", "WMT 2019", 13_442),
        meta("En-De", It, Smt, "Phrase-based SMT", "WMT 2018", 26_273),
        meta("En-Ru", It, Nmt, "Online NMT", "WMT 2019", 15_089),
        meta(
            "En-Lv",
            Pharmaceutical,
            Nmt,
            "Attention-based NMT",
            "WMT 2018",
            12_936,
        ),
        meta(
            "En-Lv",
            Pharmaceutical,
            Smt,
            "Phrase-based SMT",
            "WMT 2018",
            11_251,
        ),
        meta("En-Zh", Wiki, Nmt, "fairseq-based NMT", "WMT 2020", 7_000),
    ]
}

/// Finds the unique registry row for `(pair_id, mt_type)`.
///
/// En-De NMT has two releases (Wiki and IT); use [`lookup_in_domain`] for it.
pub fn lookup(pair_id: &str, mt_type: MtType) -> Result<LanguagePairMeta, CorpusError> {
    let mut hits: Vec<_> = registry()
        .into_iter()
        .filter(|m| m.pair_id == pair_id && m.mt_type == mt_type)
        .collect();
    match hits.len() {
        0 => Err(CorpusError::UnknownPair {
            pair: pair_id.to_string(),
            mt_type,
        }),
        1 => Ok(hits.remove(0)),
        count => Err(CorpusError::AmbiguousPair {
            pair: pair_id.to_string(),
            mt_type,
            count,
        }),
    }
}

pub fn lookup_in_domain(
    pair_id: &str,
    mt_type: MtType,
    domain: Domain,
) -> Result<LanguagePairMeta, CorpusError> {
    registry()
        .into_iter()
        .find(|m| m.pair_id == pair_id && m.mt_type == mt_type && m.domain == domain)
        .ok_or_else(|| CorpusError::UnknownPair {
            pair: pair_id.to_string(),
            mt_type,
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: LanguagePairMeta,
    pub examples: Vec<AnnotatedExample>,
}

/// Paths of the four parallel files making up one dataset split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSet {
    pub src: PathBuf,
    pub mt: PathBuf,
    pub source_tags: PathBuf,
    pub target_tags: PathBuf,
}

impl FileSet {
    /// `<stem>.src`, `<stem>.mt`, `<stem>.source_tags`, `<stem>.tags`.
    pub fn from_stem(stem: impl AsRef<Path>) -> FileSet {
        let stem = stem.as_ref();
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(".");
            s.push(ext);
            PathBuf::from(s)
        };
        FileSet {
            src: with("src"),
            mt: with("mt"),
            source_tags: with("source_tags"),
            target_tags: with("tags"),
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn parse_tags(line: &str, line_no: usize) -> Result<Vec<Tag>, CorpusError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<Tag>()
                .map_err(|_| CorpusError::UnknownTagToken {
                    line: line_no,
                    token: tok.to_string(),
                })
        })
        .collect()
}

impl Dataset {
    pub fn new(
        meta: LanguagePairMeta,
        examples: Vec<AnnotatedExample>,
    ) -> Result<Self, CorpusError> {
        for (index, example) in examples.iter().enumerate() {
            example
                .validate()
                .map_err(|reason| CorpusError::InvalidExample { index, reason })?;
        }
        Ok(Dataset { meta, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Parses already-loaded line contents. Line numbers in errors are 1-based.
    pub fn parse_lines(
        src: &[String],
        mt: &[String],
        source_tags: &[String],
        target_tags: &[String],
        meta: LanguagePairMeta,
    ) -> Result<Dataset, CorpusError> {
        let n = src.len();
        if mt.len() != n || source_tags.len() != n || target_tags.len() != n {
            return Err(CorpusError::LineCountMismatch {
                src: n,
                mt: mt.len(),
                source_tags: source_tags.len(),
                target_tags: target_tags.len(),
            });
        }
        let mut examples = Vec::with_capacity(n);
        for i in 0..n {
            let line = i + 1;
            let source_tokens = tokens(&src[i]);
            let target_tokens = tokens(&mt[i]);
            let stags = parse_tags(&source_tags[i], line)?;
            if stags.len() != source_tokens.len() {
                return Err(CorpusError::TagArityError {
                    line,
                    surface: "source",
                    expected: source_tokens.len(),
                    found: stags.len(),
                });
            }
            let ttags = parse_tags(&target_tags[i], line)?;
            let expected = 2 * target_tokens.len() + 1;
            if ttags.len() != expected {
                return Err(CorpusError::TagArityError {
                    line,
                    surface: "target",
                    expected,
                    found: ttags.len(),
                });
            }
            let example =
                AnnotatedExample::from_interleaved(source_tokens, target_tokens, stags, &ttags)
                    .map_err(|reason| CorpusError::InvalidExample { index: i, reason })?;
            examples.push(example);
        }
        Ok(Dataset { meta, examples })
    }

    /// Serializes into the four line-aligned file contents (src, mt, source_tags, tags).
    pub fn to_lines(&self) -> [Vec<String>; 4] {
        let join_tags = |tags: &[Tag]| {
            tags.iter()
                .map(|t| t.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out: [Vec<String>; 4] = Default::default();
        for e in &self.examples {
            out[0].push(e.source_tokens.join(" "));
            out[1].push(e.target_tokens.join(" "));
            out[2].push(join_tags(&e.source_tags));
            out[3].push(join_tags(&e.interleaved_target_tags()));
        }
        out
    }

    pub fn write_files(&self, files: &FileSet) -> Result<(), CorpusError> {
        let lines = self.to_lines();
        let paths = [
            &files.src,
            &files.mt,
            &files.source_tags,
            &files.target_tags,
        ];
        for (path, content) in paths.into_iter().zip(lines.iter()) {
            let mut text = content.join("\n");
            if !content.is_empty() {
                text.push('\n');
            }
            fs::write(path, text).map_err(|source| CorpusError::Io {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Dataset, CorpusError> {
        let ds: Dataset = serde_json::from_str(text)?;
        Dataset::new(ds.meta, ds.examples)
    }
}

pub fn parse_dataset(
    src_path: &Path,
    mt_path: &Path,
    source_tags_path: &Path,
    target_tags_path: &Path,
    meta: LanguagePairMeta,
) -> Result<Dataset, CorpusError> {
    let src = read_lines(src_path)?;
    let mt = read_lines(mt_path)?;
    let stags = read_lines(source_tags_path)?;
    let ttags = read_lines(target_tags_path)?;
    Dataset::parse_lines(&src, &mt, &stags, &ttags, meta)
}

pub fn parse_fileset(files: &FileSet, meta: LanguagePairMeta) -> Result<Dataset, CorpusError> {
    parse_dataset(
        &files.src,
        &files.mt,
        &files.source_tags,
        &files.target_tags,
        meta,
    )
}

/// Seeded shuffle followed by a prefix/suffix cut at `floor(n * ratio)`.
pub fn split_train_validation(
    dataset: &Dataset,
    ratio: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), CorpusError> {
    if dataset.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let n = dataset.len();
    let cut = (n as f64 * ratio).floor() as usize;
    if cut == 0 || cut == n {
        return Err(CorpusError::DegenerateSplit { n, ratio });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| Dataset {
        meta: dataset.meta.clone(),
        examples: idx.iter().map(|&i| dataset.examples[i].clone()).collect(),
    };
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn en_cs() -> LanguagePairMeta {
        lookup("En-Cs", MtType::Smt).unwrap()
    }

    #[test]
    fn parses_one_line_fixture() {
        let ds = Dataset::parse_lines(
            &s(&["a b"]),
            &s(&["x y"]),
            &s(&["OK BAD"]),
            &s(&["OK OK BAD OK OK"]),
            en_cs(),
        )
        .unwrap();
        let e = &ds.examples[0];
        assert_eq!(e.source_tags, vec![Tag::Ok, Tag::Bad]);
        assert_eq!(e.target_word_tags, vec![Tag::Ok, Tag::Ok]);
        assert_eq!(e.target_gap_tags, vec![Tag::Ok, Tag::Bad, Tag::Ok]);
    }

    #[test]
    fn rejects_word_only_target_line() {
        let err = Dataset::parse_lines(
            &s(&["a b"]),
            &s(&["x y"]),
            &s(&["OK OK"]),
            &s(&["OK OK"]),
            en_cs(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CorpusError::TagArityError {
                line: 1,
                expected: 5,
                found: 2,
                ..
            }
        ));
    }

    #[test]
    fn tags_are_case_sensitive() {
        let err = Dataset::parse_lines(
            &s(&["a"]),
            &s(&["x"]),
            &s(&["ok"]),
            &s(&["OK OK OK"]),
            en_cs(),
        )
        .unwrap_err();
        assert!(
            matches!(err, CorpusError::UnknownTagToken { line: 1, ref token } if token == "ok")
        );
    }

    #[test]
    fn line_count_mismatch() {
        let err = Dataset::parse_lines(
            &s(&["a", "b"]),
            &s(&["x"]),
            &s(&["OK", "OK"]),
            &s(&["OK OK OK", "OK OK OK"]),
            en_cs(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::LineCountMismatch { .. }));
    }

    #[test]
    fn empty_mt_line_has_single_gap() {
        let ds = Dataset::parse_lines(&s(&["a"]), &s(&[""]), &s(&["BAD"]), &s(&["BAD"]), en_cs())
            .unwrap();
        assert_eq!(ds.examples[0].target_gap_tags, vec![Tag::Bad]);
        assert!(ds.examples[0].target_tokens.is_empty());
    }

    #[test]
    fn registry_rows() {
        let cs = lookup("En-Cs", MtType::Smt).unwrap();
        assert_eq!(
            (cs.domain, cs.competition.as_str(), cs.train_size),
            (Domain::It, "WMT 2018", 40_254)
        );
        let de_en = lookup("De-En", MtType::Smt).unwrap();
        assert_eq!(
            (de_en.domain, de_en.train_size),
            (Domain::Pharmaceutical, 25_963)
        );
        let zh = lookup("En-Zh", MtType::Nmt).unwrap();
        assert_eq!((zh.domain, zh.train_size), (Domain::Wiki, 7_000));
        assert!(matches!(
            lookup("En-De", MtType::Nmt),
            Err(CorpusError::AmbiguousPair { count: 2, .. })
        ));
        let wiki = lookup_in_domain("En-De", MtType::Nmt, Domain::Wiki).unwrap();
        assert_eq!(wiki.competition, "WMT 2020");
    }

    #[test]
    fn registry_keys_are_unique_with_domain() {
        let reg = registry();
        for (i, a) in reg.iter().enumerate() {
            for b in &reg[i + 1..] {
                assert!((&a.pair_id, a.mt_type, a.domain) != (&b.pair_id, b.mt_type, b.domain));
            }
        }
    }

    fn numbered(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| AnnotatedExample {
                source_tokens: vec![format!("s{i}")],
                target_tokens: vec![format!("t{i}")],
                source_tags: vec![Tag::Ok],
                target_word_tags: vec![Tag::Ok],
                target_gap_tags: vec![Tag::Ok, Tag::Ok],
            })
            .collect();
        Dataset::new(en_cs(), examples).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = numbered(10);
        let (a, b) = split_train_validation(&ds, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, b2) = split_train_validation(&ds, 0.8, 3).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn split_of_one_is_degenerate() {
        assert!(matches!(
            split_train_validation(&numbered(1), 0.8, 0),
            Err(CorpusError::DegenerateSplit { n: 1, .. })
        ));
        let empty = Dataset::new(en_cs(), vec![]).unwrap();
        assert!(matches!(
            split_train_validation(&empty, 0.8, 0),
            Err(CorpusError::EmptyDataset)
        ));
    }

    #[test]
    fn split_preserves_multiset() {
        let ds = numbered(37);
        let (a, b) = split_train_validation(&ds, 0.8, 11).unwrap();
        let mut all: Vec<_> = a.examples.iter().chain(&b.examples).cloned().collect();
        all.sort_by(|x, y| x.source_tokens.cmp(&y.source_tokens));
        let mut orig = ds.examples.clone();
        orig.sort_by(|x, y| x.source_tokens.cmp(&y.source_tokens));
        assert_eq!(all, orig);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::parse_lines(
            &s(&["a b", "c"]),
            &s(&["x y", ""]),
            &s(&["OK BAD", "BAD"]),
            &s(&["OK OK BAD OK OK", "BAD"]),
            en_cs(),
        )
        .unwrap();
        let files = FileSet::from_stem(dir.path().join("train"));
        ds.write_files(&files).unwrap();
        assert_eq!(parse_fileset(&files, en_cs()).unwrap(), ds);
        assert_eq!(Dataset::from_json(&ds.to_json()).unwrap(), ds);
    }
}
