//! Finite-difference audit of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_model, Model, ModelConfig, ModelError};
use crate::encode::{EncodedExample, Label, Surface, NUM_SPECIALS};
use crate::synth::mix_seed;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this in magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub parameters_checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `(L(θ_i + h) − L(θ_i − h)) / 2h` for parameter `index`.
pub fn numeric_gradient(
    model: &mut Model<f64>,
    batch: &[EncodedExample],
    index: usize,
    h: f64,
) -> f64 {
    let orig = model.params[index];
    model.params[index] = orig + h;
    let plus = batch_loss(model, batch);
    model.params[index] = orig - h;
    let minus = batch_loss(model, batch);
    model.params[index] = orig;
    (plus - minus) / (2.0 * h)
}

fn batch_loss(model: &Model<f64>, batch: &[EncodedExample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for e in batch {
        let (l, c) = model.example_loss(&e.ids, &e.labels, None, None);
        total += l;
        count += c;
    }
    total / count as f64
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// A fixed pseudo-random batch of two full-length sequences.
pub fn audit_batch(cfg: &ModelConfig) -> Vec<EncodedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6EAD));
    let lengths = [
        cfg.max_seq_length,
        cfg.max_seq_length.saturating_sub(2).max(1),
    ];
    lengths
        .iter()
        .map(|&n| {
            let ids: Vec<u32> = (0..n)
                .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
                .collect();
            let labels: Vec<Label> = (0..n)
                .map(|p| match (p, rng.gen_range(0..3)) {
                    (0, _) => Label::Ok,
                    (_, 0) => Label::Ignore,
                    (_, 1) => Label::Ok,
                    _ => Label::Bad,
                })
                .collect();
            EncodedExample {
                ids,
                labels,
                surface_of: vec![Surface::None; n],
                word_index_of: vec![None; n],
                length: n,
                n_source_words: 0,
                n_target_words: 0,
                truncation: Default::default(),
            }
        })
        .collect()
}

/// Compares analytic gradients of the mean token loss against central
/// differences for every parameter of a tiny double-precision model.
pub fn gradient_check(cfg: &ModelConfig) -> Result<GradCheckReport, ModelError> {
    cfg.validate()?;
    if cfg.dropout != 0.0 {
        return Err(ModelError::GradCheckRefused("dropout must be 0".into()));
    }
    if cfg.n_layers > 1 || cfg.d_model > 16 || cfg.max_seq_length > 8 {
        return Err(ModelError::GradCheckRefused(
            "config must be tiny: n_layers <= 1, d_model <= 16, max_seq_length <= 8".into(),
        ));
    }
    if cfg.vocab_size <= NUM_SPECIALS {
        return Err(ModelError::GradCheckRefused(
            "vocab_size must exceed the specials".into(),
        ));
    }
    let mut model: Model<f64> = init_model(cfg)?;
    // Non-trivial gains and biases so their gradients are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xB1A5));
    for p in model.params.iter_mut() {
        if *p == 0.0 {
            *p = rng.gen_range(-0.1..0.1);
        } else if *p == 1.0 {
            *p = rng.gen_range(0.8..1.2);
        }
    }
    let batch = audit_batch(cfg);
    let (_, analytic) = model.loss_and_grad(&batch)?;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut worst = (0.0, 0);
    for (i, &a) in analytic.iter().enumerate() {
        let n = numeric_gradient(&mut model, &batch, i, STEP);
        let err = relative_error(a, n);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        parameters_checked: analytic.len(),
        analytic,
        numeric,
    })
}
