//! Word-level machine translation quality estimation.
//!
//! The crate covers the full pipeline: WMT-format corpora and synthetic
//! pseudo-language corpora ([`corpus`], [`synth`]), the GAP-token input
//! encoding ([`encode`]), a small transformer token classifier trained from
//! scratch ([`model`]), F1-Multi scoring ([`metrics`]) and the multilingual,
//! zero-shot and few-shot experiment harness ([`harness`]).

pub mod corpus;
pub mod encode;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod synth;
