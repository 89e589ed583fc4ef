//! Named parameters, the shared transformer block, and the full model
//! bundle (text encoder + vision encoder + logit scale).
//!
//! Parameters are plain tensors with stable names; the checkpoint format
//! and the optimizer both key off the order and names produced by
//! [`Model::params`]. Trainability is tracked on the tensors themselves
//! (`requires_grad`), with one refinement: a parameter may restrict
//! training to a row range, which is how prompt-token embedding rows stay
//! trainable inside an otherwise frozen token table.

use crate::error::{Error, Result};
use crate::prompt::Vocabulary;
use crate::rng::Rng;
use crate::tensor::{s, Scalar, Tape, Tensor, TensorId};
use crate::text_encoder::{TextDims, TextEncoderParams};
use crate::vision_encoder::{VisionDims, VisionEncoderParams};

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation for Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

/// Initial logit scale: ln(1/0.07), i.e. temperature 0.07.
pub fn initial_logit_scale() -> f64 {
    (1.0 / 0.07f64).ln()
}

/// Bounds the multiplier exp(logit_scale) is clamped to after each
/// optimizer step.
pub const LOGIT_SCALE_RANGE: (f64, f64) = (1.0, 100.0);

/// A named, optionally trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// When set (and the tensor requires grad), only these rows receive
    /// optimizer updates. Used for prompt-token rows in a frozen table.
    pub trainable_rows: Option<std::ops::Range<usize>>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, tensor: Tensor<S>) -> Self {
        Param { name: name.into(), tensor, trainable_rows: None }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn is_trainable(&self) -> bool {
        self.tensor.requires_grad
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.tensor.requires_grad = trainable;
        if !trainable {
            self.trainable_rows = None;
        }
    }

    /// Number of elements the optimizer may update.
    pub fn trainable_numel(&self) -> usize {
        if !self.tensor.requires_grad {
            return 0;
        }
        match &self.trainable_rows {
            None => self.numel(),
            Some(range) => {
                let cols = self.tensor.dims2().1;
                range.len() * cols
            }
        }
    }

    /// Flat element range the optimizer may touch (whole tensor if no row
    /// restriction applies).
    pub fn trainable_span(&self) -> std::ops::Range<usize> {
        match &self.trainable_rows {
            None => 0..self.numel(),
            Some(range) => {
                let cols = self.tensor.dims2().1;
                range.start * cols..range.end * cols
            }
        }
    }

    /// Puts a copy of the parameter on a tape.
    pub fn mount(&self, tape: &mut Tape<S>) -> TensorId {
        tape.leaf(self.tensor.clone())
    }

    pub fn cast<T: Scalar>(&self) -> Param<T> {
        Param {
            name: self.name.clone(),
            tensor: self.tensor.cast(),
            trainable_rows: self.trainable_rows.clone(),
        }
    }
}

/// Gaussian-initialized tensor, std [`INIT_STD`] by default.
pub fn gaussian<S: Scalar>(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel).map(|_| s(rng.next_normal() * std)).collect();
    Tensor::new(shape, data).expect("static shape")
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
/// The same structure serves the text decoder (with a segment mask) and
/// the vision encoder (unmasked).
#[derive(Debug, Clone)]
pub struct TransformerBlock<S> {
    pub ln1_gain: Param<S>,
    pub ln1_bias: Param<S>,
    pub wq: Param<S>,
    pub bq: Param<S>,
    pub wk: Param<S>,
    pub bk: Param<S>,
    pub wv: Param<S>,
    pub bv: Param<S>,
    pub wo: Param<S>,
    pub bo: Param<S>,
    pub ln2_gain: Param<S>,
    pub ln2_bias: Param<S>,
    pub w_up: Param<S>,
    pub b_up: Param<S>,
    pub w_down: Param<S>,
    pub b_down: Param<S>,
}

impl<S: Scalar> TransformerBlock<S> {
    pub fn new(prefix: &str, width: usize, mlp_hidden: usize, rng: &mut Rng) -> Self {
        let ones = Tensor::new(vec![width], vec![S::one(); width]).expect("static shape");
        let zeros_w = Tensor::zeros(vec![width]).expect("static shape");
        let zeros_mlp = Tensor::zeros(vec![mlp_hidden]).expect("static shape");
        TransformerBlock {
            ln1_gain: Param::new(format!("{prefix}.ln1.gain"), ones.clone()),
            ln1_bias: Param::new(format!("{prefix}.ln1.bias"), zeros_w.clone()),
            wq: Param::new(format!("{prefix}.attn.wq"), gaussian(rng, vec![width, width], INIT_STD)),
            bq: Param::new(format!("{prefix}.attn.bq"), zeros_w.clone()),
            wk: Param::new(format!("{prefix}.attn.wk"), gaussian(rng, vec![width, width], INIT_STD)),
            bk: Param::new(format!("{prefix}.attn.bk"), zeros_w.clone()),
            wv: Param::new(format!("{prefix}.attn.wv"), gaussian(rng, vec![width, width], INIT_STD)),
            bv: Param::new(format!("{prefix}.attn.bv"), zeros_w.clone()),
            wo: Param::new(format!("{prefix}.attn.wo"), gaussian(rng, vec![width, width], INIT_STD)),
            bo: Param::new(format!("{prefix}.attn.bo"), zeros_w.clone()),
            ln2_gain: Param::new(format!("{prefix}.ln2.gain"), ones),
            ln2_bias: Param::new(format!("{prefix}.ln2.bias"), zeros_w.clone()),
            w_up: Param::new(
                format!("{prefix}.mlp.w_up"),
                gaussian(rng, vec![width, mlp_hidden], INIT_STD),
            ),
            b_up: Param::new(format!("{prefix}.mlp.b_up"), zeros_mlp),
            w_down: Param::new(
                format!("{prefix}.mlp.w_down"),
                gaussian(rng, vec![mlp_hidden, width], INIT_STD),
            ),
            b_down: Param::new(format!("{prefix}.mlp.b_down"), zeros_w),
        }
    }

    pub fn params(&self) -> [&Param<S>; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w_up, &self.b_up,
            &self.w_down, &self.b_down,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Param<S>; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w_up, &mut self.b_up,
            &mut self.w_down, &mut self.b_down,
        ]
    }

    pub fn mount(&self, tape: &mut Tape<S>) -> MountedBlock {
        MountedBlock {
            ln1_gain: self.ln1_gain.mount(tape),
            ln1_bias: self.ln1_bias.mount(tape),
            wq: self.wq.mount(tape),
            bq: self.bq.mount(tape),
            wk: self.wk.mount(tape),
            bk: self.bk.mount(tape),
            wv: self.wv.mount(tape),
            bv: self.bv.mount(tape),
            wo: self.wo.mount(tape),
            bo: self.bo.mount(tape),
            ln2_gain: self.ln2_gain.mount(tape),
            ln2_bias: self.ln2_bias.mount(tape),
            w_up: self.w_up.mount(tape),
            b_up: self.b_up.mount(tape),
            w_down: self.w_down.mount(tape),
            b_down: self.b_down.mount(tape),
        }
    }

    pub fn cast<T: Scalar>(&self) -> TransformerBlock<T> {
        TransformerBlock {
            ln1_gain: self.ln1_gain.cast(),
            ln1_bias: self.ln1_bias.cast(),
            wq: self.wq.cast(),
            bq: self.bq.cast(),
            wk: self.wk.cast(),
            bk: self.bk.cast(),
            wv: self.wv.cast(),
            bv: self.bv.cast(),
            wo: self.wo.cast(),
            bo: self.bo.cast(),
            ln2_gain: self.ln2_gain.cast(),
            ln2_bias: self.ln2_bias.cast(),
            w_up: self.w_up.cast(),
            b_up: self.b_up.cast(),
            w_down: self.w_down.cast(),
            b_down: self.b_down.cast(),
        }
    }
}

/// Tape handles for one mounted block.
#[derive(Debug, Clone, Copy)]
pub struct MountedBlock {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub w_up: TensorId,
    pub b_up: TensorId,
    pub w_down: TensorId,
    pub b_down: TensorId,
}

impl MountedBlock {
    /// Handles in [`TransformerBlock::params`] order.
    pub fn ids(&self) -> [TensorId; 16] {
        [
            self.ln1_gain, self.ln1_bias, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.ln2_gain, self.ln2_bias, self.w_up, self.b_up, self.w_down,
            self.b_down,
        ]
    }
}

/// Runs one pre-norm block over `[S×width]` activations. `mask_bias`, when
/// given, is added to every head's attention scores before softmax.
pub fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    block: &MountedBlock,
    x: TensorId,
    heads: usize,
    mask_bias: Option<TensorId>,
) -> Result<TensorId> {
    let rows = tape.shape(x)[0];
    block_forward_batch(tape, block, x, heads, &[(0, rows)], &[mask_bias])
}

/// [`block_forward`] over several sequences stacked into one tall matrix.
/// `spans` gives each sequence's (start row, row count); `mask_biases`
/// holds one optional attention bias per span. All row-wise work — norms,
/// projections, the MLP — runs on the whole stack at once, while attention
/// runs per span on sliced rows, so sequences never attend across each
/// other. Every op here is row-local or row-independent, which makes each
/// span's output rows bit-identical to running that span through
/// [`block_forward`] alone; stacking only changes how many tape nodes and
/// kernel calls the work is split into.
pub fn block_forward_batch<S: Scalar>(
    tape: &mut Tape<S>,
    block: &MountedBlock,
    x: TensorId,
    heads: usize,
    spans: &[(usize, usize)],
    mask_biases: &[Option<TensorId>],
) -> Result<TensorId> {
    let (rows, width) = {
        let shape = tape.shape(x);
        (shape[0], shape[1])
    };
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
    }
    if spans.len() != mask_biases.len() || spans.is_empty() {
        return Err(Error::Contract(format!(
            "{} spans with {} attention biases",
            spans.len(),
            mask_biases.len()
        )));
    }
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let normed = tape.layer_norm(x, block.ln1_gain, block.ln1_bias, LN_EPS)?;
    let q = tape.matmul(normed, block.wq)?;
    let q = tape.add_row(q, block.bq)?;
    let k = tape.matmul(normed, block.wk)?;
    let k = tape.add_row(k, block.bk)?;
    let v = tape.matmul(normed, block.wv)?;
    let v = tape.add_row(v, block.bv)?;

    let mut per_span = Vec::with_capacity(spans.len());
    for (si, &(start, len)) in spans.iter().enumerate() {
        let whole = start == 0 && len == rows;
        let (qs, ks, vs) = if whole {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, start, len)?,
                tape.slice_rows(k, start, len)?,
                tape.slice_rows(v, start, len)?,
            )
        };
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(qs, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(ks, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(vs, h * head_dim, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let scores = match mask_biases[si] {
                Some(bias) => tape.add(scores, bias)?,
                None => scores,
            };
            let weights = tape.softmax_rows(scores)?;
            head_outputs.push(tape.matmul(weights, vh)?);
        }
        per_span.push(tape.concat_cols(&head_outputs)?);
    }
    let merged = if per_span.len() == 1 { per_span[0] } else { tape.concat_rows(&per_span)? };
    let attn = tape.matmul(merged, block.wo)?;
    let attn = tape.add_row(attn, block.bo)?;
    let x = tape.add(x, attn)?;

    let normed2 = tape.layer_norm(x, block.ln2_gain, block.ln2_bias, LN_EPS)?;
    let up = tape.matmul(normed2, block.w_up)?;
    let up = tape.add_row(up, block.b_up)?;
    let act = tape.gelu(up)?;
    let down = tape.matmul(act, block.w_down)?;
    let down = tape.add_row(down, block.b_down)?;
    tape.add(x, down)
}

/// Trainability census for logging and assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Census {
    pub tensors_total: usize,
    pub tensors_trainable: usize,
    pub params_total: usize,
    pub params_trainable: usize,
}

impl std::fmt::Display for Census {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} of {} parameters trainable across {} of {} tensors",
            self.params_trainable, self.params_total, self.tensors_trainable, self.tensors_total
        )
    }
}

/// Tape handles for a fully mounted [`Model`].
pub struct MountedModel {
    pub text: crate::text_encoder::MountedText,
    pub vision: crate::vision_encoder::MountedVision,
    pub logit_scale: TensorId,
}

impl MountedModel {
    /// Handles aligned index-for-index with [`Model::params`].
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = self.text.ids();
        out.extend(self.vision.ids());
        out.push(self.logit_scale);
        out
    }
}

/// The complete trainable system.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub vocab: Vocabulary,
    pub text: TextEncoderParams<S>,
    pub vision: VisionEncoderParams<S>,
    /// Scalar s with similarity multiplier exp(s) (inverse temperature).
    pub logit_scale: Param<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(vocab: Vocabulary, text: TextDims, vision: VisionDims, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let text = TextEncoderParams::new(text, &vocab, &mut rng)?;
        let vision = VisionEncoderParams::new(vision, &mut rng)?;
        let logit_scale =
            Param::new("logit_scale", Tensor::scalar(s(initial_logit_scale())).with_grad());
        Ok(Model { vocab, text, vision, logit_scale })
    }

    /// All parameters in the fixed registry order the optimizer and
    /// checkpoints rely on.
    pub fn params(&self) -> Vec<&Param<S>> {
        let mut out = self.text.params();
        out.extend(self.vision.params());
        out.push(&self.logit_scale);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = self.text.params_mut();
        out.extend(self.vision.params_mut());
        out.push(&mut self.logit_scale);
        out
    }

    /// Puts every parameter on the tape once; forwards share the handles,
    /// so gradients from one backward pass cover the whole model.
    pub fn mount(&self, tape: &mut Tape<S>) -> MountedModel {
        MountedModel {
            text: self.text.mount(tape),
            vision: self.vision.mount(tape),
            logit_scale: self.logit_scale.mount(tape),
        }
    }

    /// Applies the freezing policy: the last `unfrozen_layers` text blocks
    /// (plus final norm and projection) train; earlier text blocks freeze.
    /// Prompt-token embedding rows always train; the rest of the token
    /// table and the position table follow `learnable_vocab`. The vision
    /// encoder and the logit scale are always fully trainable.
    pub fn set_trainable(&mut self, unfrozen_layers: usize, learnable_vocab: bool) -> Result<()> {
        self.text.set_trainable(unfrozen_layers, learnable_vocab, &self.vocab)?;
        self.vision.set_all_trainable();
        self.logit_scale.set_trainable(true);
        Ok(())
    }

    pub fn census(&self) -> Census {
        let params = self.params();
        Census {
            tensors_total: params.len(),
            tensors_trainable: params.iter().filter(|p| p.is_trainable()).count(),
            params_total: params.iter().map(|p| p.numel()).sum(),
            params_trainable: params.iter().map(|p| p.trainable_numel()).sum(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            vocab: self.vocab.clone(),
            text: self.text.cast(),
            vision: self.vision.cast(),
            logit_scale: self.logit_scale.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_model() -> Model<f32> {
        let vocab = Vocabulary::build(3, crate::data::caption_words()).unwrap();
        let text = TextDims {
            vocab_size: vocab.len(),
            hidden: 16,
            heads: 2,
            layers: 2,
            max_seq: 64,
            mlp_hidden: 32,
            joint_dim: 12,
            n_prompts: 3,
            combine: crate::text_encoder::CombineMode::Concat,
        };
        let vision = VisionDims {
            image_size: 16,
            patch_size: 8,
            width: 16,
            heads: 2,
            layers: 1,
            mlp_hidden: 32,
            joint_dim: 12,
            pool_heads: 3,
            max_frames: 4,
            temporal_per_channel: false,
        };
        Model::new(vocab, text, vision, 42).unwrap()
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let m = tiny_model();
        let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
        let set: HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len(), "duplicate parameter name");
        assert_eq!(names.last().unwrap(), "logit_scale");
        assert!(names.iter().any(|n| n == "text.tokens"));
        assert!(names.iter().any(|n| n == "vision.pool.query"));
        // Same seed, same registry.
        let m2 = tiny_model();
        let names2: Vec<String> = m2.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names, names2);
        for (a, b) in m.params().iter().zip(m2.params().iter()) {
            assert_eq!(a.tensor.data, b.tensor.data, "{} init differs across runs", a.name);
        }
    }

    #[test]
    fn init_depends_on_seed() {
        let vocab = Vocabulary::build(3, crate::data::caption_words()).unwrap();
        let dims = |m: &Model<f32>| (m.text.dims, m.vision.dims);
        let m = tiny_model();
        let (td, vd) = dims(&m);
        let other = Model::new(vocab, td, vd, 43).unwrap();
        assert_ne!(
            m.text.token_table.tensor.data, other.text.token_table.tensor.data,
            "different seeds must give different init"
        );
    }

    #[test]
    fn census_tracks_freezing() {
        let mut m = tiny_model();
        m.set_trainable(2, true).unwrap();
        let all = m.census();
        assert_eq!(all.params_total, all.params_trainable, "everything trainable");

        m.set_trainable(1, false).unwrap();
        let partial = m.census();
        assert!(partial.params_trainable < all.params_trainable);
        // Prompt rows stay trainable inside the frozen table.
        let tokens = m.params().into_iter().find(|p| p.name == "text.tokens").unwrap().clone();
        assert!(tokens.is_trainable());
        assert_eq!(tokens.trainable_numel(), 3 * 16);
        let span = tokens.trainable_span();
        assert_eq!(span.len(), 3 * 16);

        m.set_trainable(0, false).unwrap();
        let frozen = m.census();
        assert!(frozen.params_trainable < partial.params_trainable);
        // Vision side and logit scale never freeze.
        assert!(m.logit_scale.is_trainable());
        assert!(m.vision.patch_weight.is_trainable());
    }

    #[test]
    fn too_many_unfrozen_layers_is_an_error() {
        let mut m = tiny_model();
        assert!(m.set_trainable(3, true).is_err());
    }

    #[test]
    fn cast_round_trip_preserves_values() {
        let m = tiny_model();
        let m64: Model<f64> = m.cast();
        let back: Model<f32> = m64.cast();
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.tensor.data, b.tensor.data, "{}", a.name);
            assert_eq!(a.is_trainable(), b.is_trainable());
        }
    }

    #[test]
    fn logit_scale_starts_at_temperature_0_07() {
        let m = tiny_model();
        let inv_tau = (m.logit_scale.tensor.data[0] as f64).exp();
        assert!((inv_tau - 1.0 / 0.07).abs() < 1e-4, "got {inv_tau}");
    }
}
