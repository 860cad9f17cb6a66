//! F1-OK, F1-BAD and F1-Multi over the word-level QE surfaces.
//!
//! Scores are micro-aggregated: tags of all examples are concatenated per
//! surface before counting. Any 0/0 ratio evaluates to 0, so a predictor that
//! never outputs BAD scores an F1-Multi of exactly 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{interleave, Dataset, Tag};
use crate::encode::DecodedTags;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("gold has {gold} tags but prediction has {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("cannot score an empty tag sequence")]
    EmptyInput,
    #[error("example {index}: {surface} prediction has {pred} tags, gold has {gold}")]
    ArityMismatch {
        index: usize,
        surface: &'static str,
        gold: usize,
        pred: usize,
    },
    #[error("{gold} gold examples but {pred} predictions")]
    ExampleCountMismatch { gold: usize, pred: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts for one positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn score(self) -> ClassScore {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScore {
            precision,
            recall,
            f1,
        }
    }
}

fn check(gold: &[Tag], pred: &[Tag]) -> Result<(), MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

fn counts(gold: &[Tag], pred: &[Tag], positive: Tag) -> Counts {
    let mut c = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        match (*g == positive, *p == positive) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

pub fn f1_class(gold: &[Tag], pred: &[Tag], positive: Tag) -> Result<ClassScore, MetricsError> {
    check(gold, pred)?;
    Ok(counts(gold, pred, positive).score())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1MultiReport {
    pub f1_ok: f64,
    pub f1_bad: f64,
    pub f1_multi: f64,
    pub support_ok: usize,
    pub support_bad: usize,
}

pub fn f1_multi(gold: &[Tag], pred: &[Tag]) -> Result<F1MultiReport, MetricsError> {
    check(gold, pred)?;
    let ok = counts(gold, pred, Tag::Ok);
    let bad = counts(gold, pred, Tag::Bad);
    let f1_ok = ok.score().f1;
    let f1_bad = bad.score().f1;
    Ok(F1MultiReport {
        f1_ok,
        f1_bad,
        f1_multi: f1_ok * f1_bad,
        support_ok: ok.tp + ok.fn_,
        support_bad: bad.tp + bad.fn_,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceReport {
    pub target_combined: F1MultiReport,
    pub target_words: F1MultiReport,
    pub target_gaps: F1MultiReport,
    pub source_words: F1MultiReport,
}

impl SurfaceReport {
    pub fn surfaces(&self) -> [(&'static str, &F1MultiReport); 4] {
        [
            ("target_combined", &self.target_combined),
            ("target_words", &self.target_words),
            ("target_gaps", &self.target_gaps),
            ("source_words", &self.source_words),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column plain text, one surface per row.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "surface", "f1_ok", "f1_bad", "f1_multi", "n_ok", "n_bad"
        );
        for (name, r) in self.surfaces() {
            let _ = writeln!(
                out,
                "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8}",
                name, r.f1_ok, r.f1_bad, r.f1_multi, r.support_ok, r.support_bad
            );
        }
        out
    }
}

fn arity(
    index: usize,
    surface: &'static str,
    gold: usize,
    pred: usize,
) -> Result<(), MetricsError> {
    if gold != pred {
        return Err(MetricsError::ArityMismatch {
            index,
            surface,
            gold,
            pred,
        });
    }
    Ok(())
}

/// Micro-aggregated scores over the four surfaces of a corpus.
pub fn score_dataset(
    gold: &Dataset,
    predictions: &[DecodedTags],
) -> Result<SurfaceReport, MetricsError> {
    if gold.examples.len() != predictions.len() {
        return Err(MetricsError::ExampleCountMismatch {
            gold: gold.examples.len(),
            pred: predictions.len(),
        });
    }
    let mut g_src = Vec::new();
    let mut p_src = Vec::new();
    let mut g_words = Vec::new();
    let mut p_words = Vec::new();
    let mut g_gaps = Vec::new();
    let mut p_gaps = Vec::new();
    let mut g_comb = Vec::new();
    let mut p_comb = Vec::new();
    for (i, (g, p)) in gold.examples.iter().zip(predictions).enumerate() {
        arity(i, "source", g.source_tags.len(), p.source_tags.len())?;
        arity(
            i,
            "target word",
            g.target_word_tags.len(),
            p.target_word_tags.len(),
        )?;
        arity(
            i,
            "target gap",
            g.target_gap_tags.len(),
            p.target_gap_tags.len(),
        )?;
        g_src.extend_from_slice(&g.source_tags);
        p_src.extend_from_slice(&p.source_tags);
        g_words.extend_from_slice(&g.target_word_tags);
        p_words.extend_from_slice(&p.target_word_tags);
        g_gaps.extend_from_slice(&g.target_gap_tags);
        p_gaps.extend_from_slice(&p.target_gap_tags);
        g_comb.extend(interleave(&g.target_gap_tags, &g.target_word_tags));
        p_comb.extend(interleave(&p.target_gap_tags, &p.target_word_tags));
    }
    Ok(SurfaceReport {
        target_combined: f1_multi(&g_comb, &p_comb)?,
        target_words: surface_or_empty(&g_words, &p_words)?,
        target_gaps: f1_multi(&g_gaps, &p_gaps)?,
        source_words: surface_or_empty(&g_src, &p_src)?,
    })
}

// A corpus whose MT side is entirely empty still has gaps to score; the word
// surfaces are then reported as all-zero rather than failing the whole report.
fn surface_or_empty(gold: &[Tag], pred: &[Tag]) -> Result<F1MultiReport, MetricsError> {
    if gold.is_empty() && pred.is_empty() {
        return Ok(F1MultiReport {
            f1_ok: 0.0,
            f1_bad: 0.0,
            f1_multi: 0.0,
            support_ok: 0,
            support_bad: 0,
        });
    }
    f1_multi(gold, pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Tag::{Bad as B, Ok as O};

    #[test]
    fn worked_example() {
        let gold = [O, O, B, B];
        let pred = [O, B, B, B];
        let bad = f1_class(&gold, &pred, B).unwrap();
        assert!((bad.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bad.recall, 1.0);
        assert!((bad.f1 - 0.8).abs() < 1e-15);
        let r = f1_multi(&gold, &pred).unwrap();
        assert!((r.f1_ok - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1_multi - 8.0 / 15.0).abs() < 1e-15);
        assert_eq!((r.support_ok, r.support_bad), (2, 2));
    }

    #[test]
    fn perfect_and_complement() {
        let gold = [O, B];
        assert_eq!(f1_multi(&gold, &gold).unwrap().f1_multi, 1.0);
        assert_eq!(f1_class(&gold, &gold, O).unwrap().f1, 1.0);
        assert_eq!(f1_multi(&gold, &[B, O]).unwrap().f1_multi, 0.0);
    }

    #[test]
    fn zero_division_is_zero() {
        let gold = [O, O, O];
        let r = f1_class(&gold, &gold, B).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(f1_multi(&gold, &gold).unwrap().f1_multi, 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            f1_multi(&[O], &[O, B]),
            Err(MetricsError::LengthMismatch { gold: 1, pred: 2 })
        );
        assert_eq!(f1_multi(&[], &[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn text_report_has_four_rows() {
        let r = f1_multi(&[O, B], &[O, B]).unwrap();
        let s = SurfaceReport {
            target_combined: r,
            target_words: r,
            target_gaps: r,
            source_words: r,
        };
        assert_eq!(s.to_text().lines().count(), 5);
    }
}
