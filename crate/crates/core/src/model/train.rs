//! Optimization: Adam with linear warmup and linear decay, global-norm
//! gradient clipping, periodic validation with early stopping, and
//! masked-LM pretraining of the backbone.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelError, Real};
use crate::corpus::Dataset;
use crate::encode::{encode_dataset, EncodedExample, Vocab, MASK_ID};
use crate::synth::mix_seed;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_epsilon: f64,
    pub warmup_ratio: f64,
    pub warmup_steps: usize,
    pub max_grad_norm: f64,
    pub gradient_accumulation_steps: usize,
    pub batch_size: usize,
    pub eval_every_steps: usize,
    pub patience_evals: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            epochs: 3,
            adam_epsilon: 1e-8,
            warmup_ratio: 0.1,
            warmup_steps: 0,
            max_grad_norm: 1.0,
            gradient_accumulation_steps: 1,
            batch_size: 16,
            eval_every_steps: 50,
            patience_evals: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidTrainConfig(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.gradient_accumulation_steps == 0 {
            return bad("batch_size and gradient_accumulation_steps must be positive");
        }
        if self.eval_every_steps == 0 || self.patience_evals == 0 {
            return bad("eval_every_steps and patience_evals must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }

    /// Optimizer steps for `n` training examples.
    pub fn total_steps(&self, n: usize) -> usize {
        let batches = n.div_ceil(self.batch_size);
        batches.div_ceil(self.gradient_accumulation_steps) * self.epochs
    }

    /// `warmup_steps` when set, otherwise `ceil(warmup_ratio * total)`.
    pub fn warmup_for(&self, total: usize) -> usize {
        if self.warmup_steps > 0 {
            self.warmup_steps
        } else {
            (self.warmup_ratio * total as f64).ceil() as usize
        }
    }
}

/// Learning rate before optimizer step `step` (0-based): `lr * s / W` while
/// `s <= W`, then `lr * (T - s) / (T - W)`, floored at zero.
pub fn learning_rate_at(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return if step == warmup { base } else { 0.0 };
    }
    base * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    EpochsDone,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global norm of the gradient actually applied.
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub stop_reason: StopReason,
    /// Optimizer step at which the returned parameters were evaluated.
    pub best_step: usize,
    pub best_eval_loss: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl TrainReport {
    /// One JSON object per optimizer step: `step`, `loss`, `lr`, `eval_loss`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let eval = self
                .evals
                .iter()
                .find(|e| e.step == s.step)
                .map(|e| e.eval_loss);
            let line = serde_json::json!({
                "step": s.step,
                "loss": s.loss,
                "lr": s.lr,
                "grad_norm": s.grad_norm,
                "eval_loss": eval,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    eps: T,
}

impl<T: Real> Adam<T> {
    fn new(n: usize, eps: f64) -> Self {
        Adam {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            eps: T::from_f64_lossy(eps),
        }
    }

    /// Updates only `params[range]`; the rest stays frozen.
    fn step(&mut self, params: &mut [T], grads: &[T], lr: f64, range: std::ops::Range<usize>) {
        self.t += 1;
        let b1 = T::from_f64_lossy(BETA1);
        let b2 = T::from_f64_lossy(BETA2);
        let one = T::one();
        let c1 = one - b1.powi(self.t);
        let c2 = one - b2.powi(self.t);
        let lr = T::from_f64_lossy(lr);
        for i in range {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn global_norm<T: Real>(grads: &[T]) -> f64 {
    grads
        .iter()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns (pre-clip norm, applied norm).
fn clip<T: Real>(grads: &mut [T], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = T::from_f64_lossy(max_norm / (norm + 1e-12));
        grads.iter_mut().for_each(|g| *g *= scale);
        (norm, global_norm(grads))
    } else {
        (norm, norm)
    }
}

/// Mean cross-entropy of `model` over all labeled positions of `data`.
pub(crate) fn evaluate_loss<T: Real>(model: &Model<T>, data: &[EncodedExample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for e in data {
        let (l, c) = model.example_loss(&e.ids, &e.labels, None, None);
        total += l.as_f64();
        count += c;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fine-tunes the token classifier and leaves the best validation checkpoint in `model`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    valid: &Dataset,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    let max_len = model.config.max_seq_length;
    let train_enc = encode_dataset(train, vocab, max_len)?;
    let valid_enc = encode_dataset(valid, vocab, max_len)?;
    train_encoded(model, &train_enc, &valid_enc, cfg)
}

pub fn train_encoded<T: Real>(
    model: &mut Model<T>,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if valid.is_empty() {
        return Err(ModelError::EmptyValidationSet);
    }
    for e in train.iter().chain(valid) {
        model.check_ids(&e.ids)?;
    }

    let total = cfg.total_steps(train.len());
    let warmup = cfg.warmup_for(total);
    let n_params = model.params.len();
    let mut adam = Adam::new(n_params, cfg.adam_epsilon);
    let mut grads = vec![T::zero(); n_params];
    let mut best_params = model.params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut since_best = 0;
    let mut steps = Vec::with_capacity(total);
    let mut evals = Vec::new();
    let mut stop_reason = StopReason::EpochsDone;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            epoch as u64,
        )));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in batches.chunks(cfg.gradient_accumulation_steps) {
            grads.iter_mut().for_each(|g| *g = T::zero());
            let mut step_loss = 0.0;
            let micro = T::from_usize(group.len()).unwrap();
            for (b, batch) in group.iter().enumerate() {
                let labeled: usize = batch.iter().map(|&i| train[i].labeled_positions()).sum();
                if labeled == 0 {
                    continue;
                }
                let scale = T::one() / (T::from_usize(labeled).unwrap() * micro);
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    mix_seed(cfg.seed, 0xD20F),
                    (step * cfg.gradient_accumulation_steps + b) as u64,
                ));
                let mut batch_total = T::zero();
                for &i in batch.iter() {
                    let e = &train[i];
                    let (l, _) = model.example_loss(
                        &e.ids,
                        &e.labels,
                        Some(&mut rng),
                        Some((&mut grads, scale)),
                    );
                    batch_total += l;
                }
                step_loss += batch_total.as_f64() / labeled as f64 / group.len() as f64;
            }
            if !step_loss.is_finite() {
                model.params.clone_from(&best_params);
                return Err(ModelError::NonFiniteLoss { step });
            }
            let (grad_norm, clipped_norm) = clip(&mut grads, cfg.max_grad_norm);
            let lr = learning_rate_at(cfg.learning_rate, step, warmup, total);
            adam.step(&mut model.params, &grads, lr, 0..n_params);
            if !model.all_finite() {
                model.params.clone_from(&best_params);
                return Err(ModelError::NonFiniteParameter { step });
            }
            steps.push(StepRecord {
                step,
                loss: step_loss,
                lr,
                grad_norm,
                clipped_norm,
            });
            step += 1;

            if step.is_multiple_of(cfg.eval_every_steps) {
                let eval_loss = evaluate_loss(model, valid);
                evals.push(EvalRecord { step, eval_loss });
                if eval_loss < best_loss {
                    best_loss = eval_loss;
                    best_step = step;
                    best_params.clone_from(&model.params);
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience_evals {
                        stop_reason = StopReason::EarlyStopped;
                        break 'epochs;
                    }
                }
            }
        }
    }
    if stop_reason == StopReason::EpochsDone && evals.last().map(|e| e.step) != Some(step) {
        let eval_loss = evaluate_loss(model, valid);
        evals.push(EvalRecord { step, eval_loss });
        if eval_loss < best_loss {
            best_loss = eval_loss;
            best_step = step;
            best_params.clone_from(&model.params);
        }
    }
    model.params = best_params;
    Ok(TrainReport {
        steps,
        evals,
        stop_reason,
        best_step,
        best_eval_loss: best_loss,
        total_steps: total,
        warmup_steps: warmup,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub steps: Vec<StepRecord>,
    /// Mean masked-token loss per epoch (0 for an epoch with no masked positions).
    pub epoch_losses: Vec<f64>,
    pub masked_positions: usize,
}

/// Masked-LM loss over one sequence through the tied output embedding.
/// Returns (summed loss, masked count); accumulates gradients scaled by `scale`.
#[allow(clippy::too_many_arguments)]
fn mlm_example_loss<T: Real>(
    model: &Model<T>,
    inputs: &[u32],
    targets: &[Option<u32>],
    out_bias: &[T],
    rng: &mut ChaCha8Rng,
    grads: &mut [T],
    bias_grads: &mut [T],
    scale: T,
) -> (T, usize) {
    let (z, cache) = model.forward_hidden(inputs, Some(rng));
    let emb = model.mat(model.layout.token_embedding);
    let mut logits = z.dot(&emb.t());
    for mut row in logits.rows_mut() {
        for (v, b) in row.iter_mut().zip(out_bias) {
            *v += *b;
        }
    }
    let mut total = T::zero();
    let mut count = 0;
    let mut dlogits = Array2::zeros(logits.dim());
    for (i, target) in targets.iter().enumerate() {
        if let Some(t) = target {
            let (lse, probs) = super::ops::log_softmax_row(logits.row(i));
            total += lse - logits[[i, *t as usize]];
            count += 1;
            for (c, p) in probs.into_iter().enumerate() {
                let g = if c == *t as usize { p - T::one() } else { p };
                dlogits[[i, c]] = g * scale;
            }
        }
    }
    if count > 0 {
        for (bg, g) in bias_grads
            .iter_mut()
            .zip(dlogits.sum_axis(ndarray::Axis(0)).iter())
        {
            *bg += *g;
        }
        let demb = dlogits.t().dot(&z);
        let off = model.layout.token_embedding.offset;
        for (acc, g) in grads[off..off + demb.len()].iter_mut().zip(demb.iter()) {
            *acc += *g;
        }
        let dz = dlogits.dot(&emb);
        model.backward_hidden(inputs, &cache, &dz, grads);
    }
    (total, count)
}

/// Trains the backbone to recover masked tokens. Each non-special token is
/// replaced by MASK with probability `mask_prob`; only masked positions
/// contribute to the loss. The classification head is not touched.
pub fn pretrain_mlm<T: Real>(
    model: &mut Model<T>,
    corpora: &[&Dataset],
    vocab: &Vocab,
    cfg: &TrainConfig,
    mask_prob: f64,
) -> Result<MlmReport, ModelError> {
    cfg.validate()?;
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(ModelError::InvalidTrainConfig(format!(
            "mask_prob {mask_prob} outside (0, 1)"
        )));
    }
    let mut sequences = Vec::new();
    for ds in corpora {
        for e in encode_dataset(ds, vocab, model.config.max_seq_length)? {
            model.check_ids(&e.ids)?;
            sequences.push(e.ids);
        }
    }
    if sequences.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }

    let vocab_size = model.config.vocab_size;
    let total = cfg.total_steps(sequences.len());
    let warmup = cfg.warmup_for(total);
    let n_params = model.params.len();
    let head = model.layout.head_range();
    let mut adam = Adam::new(n_params, cfg.adam_epsilon);
    let mut bias_adam = Adam::new(vocab_size, cfg.adam_epsilon);
    let mut out_bias = vec![T::zero(); vocab_size];
    let mut grads = vec![T::zero(); n_params];
    let mut bias_grads = vec![T::zero(); vocab_size];
    let mut steps = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut masked_positions = 0;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..sequences.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x4D4C_4D00 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_count = 0usize;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in batches.chunks(cfg.gradient_accumulation_steps) {
            // Draw masks first so the step's normalizer is known.
            let mut masked: Vec<(Vec<u32>, Vec<Option<u32>>)> = Vec::new();
            for batch in group {
                for &i in batch.iter() {
                    let ids = &sequences[i];
                    let mut inputs = ids.clone();
                    let mut targets = vec![None; ids.len()];
                    for (p, &id) in ids.iter().enumerate() {
                        if !Vocab::is_special(id) && rng.gen::<f64>() < mask_prob {
                            inputs[p] = MASK_ID;
                            targets[p] = Some(id);
                        }
                    }
                    masked.push((inputs, targets));
                }
            }
            let count: usize = masked.iter().map(|(_, t)| t.iter().flatten().count()).sum();
            grads.iter_mut().for_each(|g| *g = T::zero());
            bias_grads.iter_mut().for_each(|g| *g = T::zero());
            let mut step_total = 0.0;
            if count > 0 {
                let scale = T::one() / T::from_usize(count).unwrap();
                for (inputs, targets) in &masked {
                    let (l, _) = mlm_example_loss(
                        model,
                        inputs,
                        targets,
                        &out_bias,
                        &mut rng,
                        &mut grads,
                        &mut bias_grads,
                        scale,
                    );
                    step_total += l.as_f64();
                }
            }
            if !step_total.is_finite() {
                return Err(ModelError::NonFiniteLoss { step });
            }
            let step_loss = if count > 0 {
                step_total / count as f64
            } else {
                0.0
            };
            epoch_total += step_total;
            epoch_count += count;
            masked_positions += count;
            // Head gradients are zero by construction; freeze them explicitly.
            grads[head.clone()].iter_mut().for_each(|g| *g = T::zero());
            let (grad_norm, clipped_norm) = clip(&mut grads, cfg.max_grad_norm);
            let lr = learning_rate_at(cfg.learning_rate, step, warmup, total);
            if count > 0 {
                adam.step(&mut model.params, &grads, lr, 0..head.start);
                let len = bias_grads.len();
                bias_adam.step(&mut out_bias, &bias_grads, lr, 0..len);
            }
            if !model.all_finite() {
                return Err(ModelError::NonFiniteParameter { step });
            }
            steps.push(StepRecord {
                step,
                loss: step_loss,
                lr,
                grad_norm,
                clipped_norm,
            });
            step += 1;
        }
        epoch_losses.push(if epoch_count > 0 {
            epoch_total / epoch_count as f64
        } else {
            0.0
        });
    }
    Ok(MlmReport {
        steps,
        epoch_losses,
        masked_positions,
    })
}
