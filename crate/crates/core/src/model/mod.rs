//! Transformer encoder with a binary token-classification head.
//!
//! The backbone is a pre-LayerNorm encoder with learned positional
//! embeddings and tanh-GELU feed-forward blocks. A single linear head maps
//! every position to OK/BAD logits; source words, target words and GAP
//! positions share it.
//!
//! All parameters live in one flat buffer laid out in declaration order:
//!
//! ```text
//! token_embedding  [V, d]
//! position_embedding [S, d]
//! per layer: ln1.gain [d], ln1.bias [d],
//!            wq [d, d], bq [d], wk [d, d], bk [d], wv [d, d], bv [d], wo [d, d], bo [d],
//!            ln2.gain [d], ln2.bias [d], w1 [d, f], b1 [f], w2 [f, d], b2 [d]
//! final_ln.gain [d], final_ln.bias [d]
//! head.w [d, 2], head.b [2]
//! ```

mod checkpoint;
mod gradcheck;
mod ops;
mod real;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
    FORMAT_VERSION,
};
pub use gradcheck::{gradient_check, numeric_gradient, GradCheckReport};
pub use real::Real;
pub use train::{
    learning_rate_at, pretrain_mlm, train, train_encoded, EvalRecord, MlmReport, StepRecord,
    StopReason, TrainConfig, TrainReport,
};

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{EncodedExample, Label};
use ops::{
    affine, affine_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, LayerNormCache,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {length} exceeds max_seq_length {max}")]
    SequenceTooLong { length: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}; parameters restored to the last good checkpoint")]
    NonFiniteLoss { step: usize },
    #[error(
        "non-finite parameter after step {step}; parameters restored to the last good checkpoint"
    )]
    NonFiniteParameter { step: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("gradient check refused: {0}")]
    GradCheckRefused(String),
    #[error(transparent)]
    Encode(#[from] crate::encode::EncodeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// May be left at 0 in manifests, where it is taken from the built vocabulary.
    #[serde(default)]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_seq_length: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale backbone: d_model 64, 2 layers, 4 heads, d_ff 128, sequences of 128.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.1,
            max_seq_length: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_length == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_gain: Slot,
    pub ln1_bias: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_gain: Slot,
    pub ln2_bias: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub token_embedding: Slot,
    pub position_embedding: Slot,
    pub layers: Vec<LayerSlots>,
    pub final_gain: Slot,
    pub final_bias: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut offset = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let d = cfg.d_model;
        let f = cfg.d_ff;
        let token_embedding = slot(cfg.vocab_size, d);
        let position_embedding = slot(cfg.max_seq_length, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                ln1_gain: slot(1, d),
                ln1_bias: slot(1, d),
                wq: slot(d, d),
                bq: slot(1, d),
                wk: slot(d, d),
                bk: slot(1, d),
                wv: slot(d, d),
                bv: slot(1, d),
                wo: slot(d, d),
                bo: slot(1, d),
                ln2_gain: slot(1, d),
                ln2_bias: slot(1, d),
                w1: slot(d, f),
                b1: slot(1, f),
                w2: slot(f, d),
                b2: slot(1, d),
            })
            .collect();
        let final_gain = slot(1, d);
        let final_bias = slot(1, d);
        let head_w = slot(d, 2);
        let head_b = slot(1, 2);
        Layout {
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
            head_w,
            head_b,
            total: offset,
        }
    }

    /// Range of the classification head (weights then bias).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.head_w.offset..self.head_b.offset + self.head_b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

/// Builds a deterministically initialized model.
///
/// Linear maps are Xavier-uniform, embeddings uniform in ±0.1, layer-norm
/// gains 1 and every bias 0.
pub fn init_model<T: Real>(config: &ModelConfig) -> Result<Model<T>, ModelError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut params = vec![T::zero(); layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fill = |params: &mut [T], s: Slot, bound: f64| {
        for p in &mut params[s.range()] {
            *p = T::from_f64_lossy(rng.gen_range(-bound..bound));
        }
    };
    let xavier = |s: Slot| (6.0 / (s.rows + s.cols) as f64).sqrt();
    fill(&mut params, layout.token_embedding, 0.1);
    fill(&mut params, layout.position_embedding, 0.1);
    for l in &layout.layers {
        for s in [l.wq, l.wk, l.wv, l.wo, l.w1, l.w2] {
            fill(&mut params, s, xavier(s));
        }
        for s in [l.ln1_gain, l.ln2_gain] {
            params[s.range()].fill(T::one());
        }
    }
    params[layout.final_gain.range()].fill(T::one());
    fill(&mut params, layout.head_w, xavier(layout.head_w));
    Ok(Model {
        config: config.clone(),
        layout,
        params,
    })
}

struct LayerCache<T> {
    ln1: LayerNormCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    drop_attn: Option<Array2<T>>,
    ln2: LayerNormCache<T>,
    b: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
    drop_ff: Option<Array2<T>>,
}

pub(crate) struct HiddenCache<T> {
    drop_embed: Option<Array2<T>>,
    layers: Vec<LayerCache<T>>,
    final_ln: LayerNormCache<T>,
}

fn dropout_mask<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

impl<T: Real> Model<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn mat(&self, s: Slot) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.range()]).expect("slot shape")
    }

    pub(crate) fn vec(&self, s: Slot) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.params[s.range()])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.len() > self.config.max_seq_length {
            return Err(ModelError::SequenceTooLong {
                length: ids.len(),
                max: self.config.max_seq_length,
            });
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Backbone forward pass for one sequence. Dropout is applied only when
    /// an RNG is supplied and the configured rate is positive.
    pub(crate) fn forward_hidden(
        &self,
        ids: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<T>, HiddenCache<T>) {
        let n = ids.len();
        let d = self.config.d_model;
        let p = self.config.dropout;
        let mut mask = |shape| match rng.as_deref_mut() {
            Some(r) if p > 0.0 => Some(dropout_mask::<T>(r, shape, p)),
            _ => None,
        };
        let tok = self.mat(self.layout.token_embedding);
        let pos = self.mat(self.layout.position_embedding);
        let mut h = Array2::zeros((n, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = h.row_mut(i);
            row.assign(&tok.row(id as usize));
            row += &pos.row(i);
        }
        let drop_embed = mask((n, d));
        if let Some(m) = &drop_embed {
            h *= m;
        }

        let dh = self.config.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for l in &self.layout.layers {
            let (a, ln1) = layer_norm(&h, self.vec(l.ln1_gain), self.vec(l.ln1_bias));
            let q = affine(&a, self.mat(l.wq), self.vec(l.bq));
            let k = affine(&a, self.mat(l.wk), self.vec(l.bk));
            let v = affine(&a, self.mat(l.wv), self.vec(l.bv));
            let mut ctx = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(self.config.n_heads);
            for head in 0..self.config.n_heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t());
                scores *= scale;
                ops::softmax_rows(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let mut attn = affine(&ctx, self.mat(l.wo), self.vec(l.bo));
            let drop_attn = mask((n, d));
            if let Some(m) = &drop_attn {
                attn *= m;
            }
            h += &attn;

            let (b, ln2) = layer_norm(&h, self.vec(l.ln2_gain), self.vec(l.ln2_bias));
            let pre_act = affine(&b, self.mat(l.w1), self.vec(l.b1));
            let act = pre_act.mapv(gelu);
            let mut ff = affine(&act, self.mat(l.w2), self.vec(l.b2));
            let drop_ff = mask((n, d));
            if let Some(m) = &drop_ff {
                ff *= m;
            }
            h += &ff;
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                drop_attn,
                ln2,
                b,
                pre_act,
                act,
                drop_ff,
            });
        }
        let (z, final_ln) = layer_norm(
            &h,
            self.vec(self.layout.final_gain),
            self.vec(self.layout.final_bias),
        );
        (
            z,
            HiddenCache {
                drop_embed,
                layers,
                final_ln,
            },
        )
    }

    /// Backpropagates `dz` (gradient w.r.t. the final normalized hidden
    /// states) through the backbone, accumulating into `grads`.
    pub(crate) fn backward_hidden(
        &self,
        ids: &[u32],
        cache: &HiddenCache<T>,
        dz: &Array2<T>,
        grads: &mut [T],
    ) {
        let layout = &self.layout;
        let (gain_g, bias_g) = split_pair(grads, layout.final_gain, layout.final_bias);
        let mut dh = layer_norm_backward(
            dz,
            &cache.final_ln,
            self.vec(layout.final_gain),
            gain_g,
            bias_g,
        );

        let n = ids.len();
        let dhd = self.config.head_dim();
        let scale = T::one() / T::from_usize(dhd).unwrap().sqrt();
        for (l, c) in layout.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward branch.
            let mut dff = dh.clone();
            if let Some(m) = &c.drop_ff {
                dff *= m;
            }
            let (w2g, b2g) = split_pair(grads, l.w2, l.b2);
            let mut dact = affine_backward(&c.act, self.mat(l.w2), &dff, w2g, b2g);
            dact.zip_mut_with(&c.pre_act, |g, &x| *g *= gelu_grad(x));
            let (w1g, b1g) = split_pair(grads, l.w1, l.b1);
            let db = affine_backward(&c.b, self.mat(l.w1), &dact, w1g, b1g);
            let (g2, bb2) = split_pair(grads, l.ln2_gain, l.ln2_bias);
            dh += &layer_norm_backward(&db, &c.ln2, self.vec(l.ln2_gain), g2, bb2);

            // Attention branch.
            let mut dattn = dh.clone();
            if let Some(m) = &c.drop_attn {
                dattn *= m;
            }
            let (wog, bog) = split_pair(grads, l.wo, l.bo);
            let dctx = affine_backward(&c.ctx, self.mat(l.wo), &dattn, wog, bog);
            let mut dq = Array2::zeros((n, self.config.d_model));
            let mut dk = Array2::zeros((n, self.config.d_model));
            let mut dv = Array2::zeros((n, self.config.d_model));
            for (head, probs) in c.probs.iter().enumerate() {
                let cols = s![.., head * dhd..(head + 1) * dhd];
                let dctx_h = dctx.slice(cols);
                let dp = dctx_h.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
                let mut ds = dp;
                for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(probs.rows()) {
                    let dot: T = ds_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).sum();
                    ds_row.zip_mut_with(&p_row, |g, &p| *g = p * (*g - dot) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            let (wqg, bqg) = split_pair(grads, l.wq, l.bq);
            let mut da = affine_backward(&c.a, self.mat(l.wq), &dq, wqg, bqg);
            let (wkg, bkg) = split_pair(grads, l.wk, l.bk);
            da += &affine_backward(&c.a, self.mat(l.wk), &dk, wkg, bkg);
            let (wvg, bvg) = split_pair(grads, l.wv, l.bv);
            da += &affine_backward(&c.a, self.mat(l.wv), &dv, wvg, bvg);
            let (g1, bb1) = split_pair(grads, l.ln1_gain, l.ln1_bias);
            dh += &layer_norm_backward(&da, &c.ln1, self.vec(l.ln1_gain), g1, bb1);
        }
        if let Some(m) = &cache.drop_embed {
            dh *= m;
        }
        let d = self.config.d_model;
        for (i, &id) in ids.iter().enumerate() {
            let tok = layout.token_embedding.offset + id as usize * d;
            let pos = layout.position_embedding.offset + i * d;
            for j in 0..d {
                grads[tok + j] += dh[[i, j]];
                grads[pos + j] += dh[[i, j]];
            }
        }
    }

    fn head_logits(&self, z: &Array2<T>) -> Array2<T> {
        affine(
            z,
            self.mat(self.layout.head_w),
            self.vec(self.layout.head_b),
        )
    }

    /// Per-position OK/BAD logits for one id sequence.
    pub fn forward_one(&self, ids: &[u32]) -> Result<Array2<T>, ModelError> {
        self.check_ids(ids)?;
        let (z, _) = self.forward_hidden(ids, None);
        Ok(self.head_logits(&z))
    }

    /// Logits of shape `(batch, longest, 2)`. Positions past an example's
    /// length are zero and excluded from loss by their IGNORE labels.
    pub fn forward(&self, batch: &[EncodedExample]) -> Result<Array3<T>, ModelError> {
        let longest = batch.iter().map(|e| e.length).max().unwrap_or(0);
        let mut out = Array3::zeros((batch.len(), longest, 2));
        for (b, e) in batch.iter().enumerate() {
            let logits = self.forward_one(&e.ids)?;
            out.slice_mut(s![b, ..e.length, ..]).assign(&logits);
        }
        Ok(out)
    }

    /// Argmax class per position.
    pub fn predict_classes(
        &self,
        encoded: &EncodedExample,
    ) -> Result<Vec<crate::corpus::Tag>, ModelError> {
        let logits = self.forward_one(&encoded.ids)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| crate::corpus::Tag::from_class_index(usize::from(r[1] > r[0])))
            .collect())
    }

    /// Summed cross-entropy over labeled positions plus the count of those
    /// positions; when `grads` is given, backpropagates `scale` times the sum.
    pub(crate) fn example_loss(
        &self,
        ids: &[u32],
        labels: &[Label],
        rng: Option<&mut ChaCha8Rng>,
        grads: Option<(&mut [T], T)>,
    ) -> (T, usize) {
        let (z, cache) = self.forward_hidden(ids, rng);
        let logits = self.head_logits(&z);
        let mut total = T::zero();
        let mut count = 0;
        let mut dlogits = Array2::zeros(logits.dim());
        for (i, label) in labels.iter().enumerate() {
            if let Some(class) = label.class_index() {
                let (lse, probs) = ops::log_softmax_row(logits.row(i));
                total += lse - logits[[i, class]];
                count += 1;
                for (c, p) in probs.into_iter().enumerate() {
                    dlogits[[i, c]] = if c == class { p - T::one() } else { p };
                }
            }
        }
        if let Some((grads, scale)) = grads {
            if count > 0 {
                dlogits *= scale;
                let (wg, bg) = split_pair(grads, self.layout.head_w, self.layout.head_b);
                let dz = affine_backward(&z, self.mat(self.layout.head_w), &dlogits, wg, bg);
                self.backward_hidden(ids, &cache, &dz, grads);
            }
        }
        (total, count)
    }

    /// Mean cross-entropy over the labeled positions of a batch and its gradient.
    pub fn loss_and_grad(&self, batch: &[EncodedExample]) -> Result<(T, Vec<T>), ModelError> {
        for e in batch {
            self.check_ids(&e.ids)?;
        }
        let labeled: usize = batch.iter().map(EncodedExample::labeled_positions).sum();
        let mut grads = vec![T::zero(); self.params.len()];
        if labeled == 0 {
            return Ok((T::zero(), grads));
        }
        let scale = T::one() / T::from_usize(labeled).unwrap();
        let mut total = T::zero();
        for e in batch {
            total += self
                .example_loss(&e.ids, &e.labels, None, Some((&mut grads, scale)))
                .0;
        }
        Ok((total * scale, grads))
    }
}

/// Disjoint mutable views of a weight slot and its bias slot.
pub(crate) fn split_pair<T>(grads: &mut [T], a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (left, right) = grads.split_at_mut(b.offset);
    (&mut left[a.range()], &mut right[..b.len()])
}

/// Mean cross-entropy over positions labeled OK or BAD.
///
/// `labels[b]` may be shorter than the padded length; missing positions count
/// as IGNORE. Returns 0 when nothing is labeled.
pub fn loss<T: Real>(logits: ArrayView3<T>, labels: &[Vec<Label>]) -> Result<T, ModelError> {
    let (batch, longest, classes) = logits.dim();
    if classes != 2 {
        return Err(ModelError::ShapeMismatch(format!(
            "{classes} classes, expected 2"
        )));
    }
    if labels.len() != batch {
        return Err(ModelError::ShapeMismatch(format!(
            "{} label rows for a batch of {batch}",
            labels.len()
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (b, row) in labels.iter().enumerate() {
        if row.len() > longest {
            return Err(ModelError::ShapeMismatch(format!(
                "label row {b} has {} positions, logits have {longest}",
                row.len()
            )));
        }
        for (p, label) in row.iter().enumerate() {
            if let Some(class) = label.class_index() {
                let (lse, _) = ops::log_softmax_row(logits.slice(s![b, p, ..]));
                total += lse - logits[[b, p, class]];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(T::zero());
    }
    Ok(total / T::from_usize(count).unwrap())
}
