//! Decoder-only text encoder that reads a caption plus K prompt segments
//! and emits K pooled embeddings in one forward pass.
//!
//! Two routes produce those embeddings:
//!
//! * [`TextEncoderParams::forward_singlepass`] encodes the whole segmented
//!   sequence at once under the segment-aware mask.
//! * [`TextEncoderParams::forward_multipass`] encodes `prefix + segment`
//!   separately per segment under a plain causal mask.
//!
//! With segment-local positions these are equivalent — in this
//! implementation bit-for-bit, because masked attention entries contribute
//! exact zeros and the matmul kernel's per-element accumulation order does
//! not depend on surrounding matrix sizes. The multipass route exists
//! purely as the oracle that proves the single-pass batching is sound, and
//! as the honest baseline for the speedup benchmark.

use crate::error::{Error, Result};
use crate::model::{
    block_forward, block_forward_batch, gaussian, MountedBlock, Param, TransformerBlock, INIT_STD,
    LN_EPS,
};
use crate::prompt::{AttentionMask, SegmentedSequence, Vocabulary};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// How the K projected segment embeddings merge into one joint vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Project each segment to D/K and concatenate (the main design).
    Concat,
    /// Project each segment to D and average (ablation baseline).
    Average,
}

impl CombineMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(CombineMode::Concat),
            "average" => Ok(CombineMode::Average),
            other => Err(Error::Config(format!(
                "unknown combine mode {other:?} (expected concat|average)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CombineMode::Concat => "concat",
            CombineMode::Average => "average",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextDims {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq: usize,
    pub mlp_hidden: usize,
    /// Joint embedding width D shared with the vision encoder.
    pub joint_dim: usize,
    /// Number of prompt segments K.
    pub n_prompts: usize,
    pub combine: CombineMode,
}

impl TextDims {
    /// Output width of the per-segment projection.
    pub fn proj_dim(&self) -> usize {
        match self.combine {
            CombineMode::Concat => self.joint_dim / self.n_prompts,
            CombineMode::Average => self.joint_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide hidden width {}",
                self.heads, self.hidden
            )));
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.max_seq == 0 || self.vocab_size == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        if self.n_prompts == 0 {
            return Err(Error::Config("n_prompts must be at least 1".into()));
        }
        if self.combine == CombineMode::Concat && self.joint_dim % self.n_prompts != 0 {
            return Err(Error::Config(format!(
                "joint dim {} is not divisible by {} prompts (required for concat)",
                self.joint_dim, self.n_prompts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoderParams<S> {
    pub dims: TextDims,
    pub token_table: Param<S>,
    pub position_table: Param<S>,
    pub blocks: Vec<TransformerBlock<S>>,
    pub final_gain: Param<S>,
    pub final_bias: Param<S>,
    pub projection: Param<S>,
}

/// Tape handles for mounted text parameters (one per training step).
pub struct MountedText {
    pub tokens: TensorId,
    pub positions: TensorId,
    pub blocks: Vec<MountedBlock>,
    pub final_gain: TensorId,
    pub final_bias: TensorId,
    pub projection: TensorId,
}

impl MountedText {
    /// Handles in [`TextEncoderParams::params`] order.
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.tokens, self.positions];
        for b in &self.blocks {
            out.extend(b.ids());
        }
        out.extend([self.final_gain, self.final_bias, self.projection]);
        out
    }
}

/// Joint-space views of one caption's prompt embeddings.
pub struct ProjectedText {
    /// `[1×D]`, unit norm: the caption's embedding in the joint space.
    pub joint: TensorId,
    /// `[1×D]`, unit norm: embedding built from the negated segments,
    /// present when the sequence carried them.
    pub negated: Option<TensorId>,
    /// `[K×proj_dim]` raw per-segment projections (diversity loss input).
    pub segment_rows: TensorId,
}

impl<S: Scalar> TextEncoderParams<S> {
    pub fn new(dims: TextDims, vocab: &Vocabulary, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        if dims.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "dims declare vocab size {} but vocabulary holds {}",
                dims.vocab_size,
                vocab.len()
            )));
        }
        if dims.n_prompts > vocab.n_prompts() {
            return Err(Error::Config(format!(
                "{} prompts requested but vocabulary holds {}",
                dims.n_prompts,
                vocab.n_prompts()
            )));
        }
        let h = dims.hidden;
        let blocks = (0..dims.layers)
            .map(|i| TransformerBlock::new(&format!("text.block{i}"), h, dims.mlp_hidden, rng))
            .collect();
        Ok(TextEncoderParams {
            token_table: Param::new(
                "text.tokens",
                gaussian(rng, vec![dims.vocab_size, h], INIT_STD),
            ),
            position_table: Param::new(
                "text.positions",
                gaussian(rng, vec![dims.max_seq, h], INIT_STD),
            ),
            blocks,
            final_gain: Param::new(
                "text.final.gain",
                Tensor::new(vec![h], vec![S::one(); h]).expect("static shape"),
            ),
            final_bias: Param::new("text.final.bias", Tensor::zeros(vec![h]).expect("static shape")),
            projection: Param::new(
                "text.projection",
                gaussian(rng, vec![h, dims.proj_dim()], INIT_STD),
            ),
            dims,
        })
    }

    /// Freezing policy. `unfrozen_layers` = number of final blocks that
    /// train; the final norm trains whenever at least one block does; the
    /// projection always trains. Prompt-token rows always train; the rest
    /// of the token table and the position table follow `learnable_vocab`.
    pub fn set_trainable(
        &mut self,
        unfrozen_layers: usize,
        learnable_vocab: bool,
        vocab: &Vocabulary,
    ) -> Result<()> {
        let layers = self.dims.layers;
        if unfrozen_layers > layers {
            return Err(Error::Config(format!(
                "cannot unfreeze {unfrozen_layers} of {layers} blocks"
            )));
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let trainable = i >= layers - unfrozen_layers;
            for p in block.params_mut() {
                p.set_trainable(trainable);
            }
        }
        self.final_gain.set_trainable(unfrozen_layers > 0);
        self.final_bias.set_trainable(unfrozen_layers > 0);
        self.projection.set_trainable(true);

        self.token_table.set_trainable(true);
        self.token_table.trainable_rows =
            if learnable_vocab { None } else { Some(vocab.prompt_token_range()) };
        self.position_table.set_trainable(learnable_vocab);
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        let mut out = vec![&self.token_table, &self.position_table];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.projection]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = vec![&mut self.token_table, &mut self.position_table];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.projection]);
        out
    }

    pub fn mount(&self, tape: &mut Tape<S>) -> MountedText {
        MountedText {
            tokens: self.token_table.mount(tape),
            positions: self.position_table.mount(tape),
            blocks: self.blocks.iter().map(|b| b.mount(tape)).collect(),
            final_gain: self.final_gain.mount(tape),
            final_bias: self.final_bias.mount(tape),
            projection: self.projection.mount(tape),
        }
    }

    pub fn cast<T: Scalar>(&self) -> TextEncoderParams<T> {
        TextEncoderParams {
            dims: self.dims,
            token_table: self.token_table.cast(),
            position_table: self.position_table.cast(),
            blocks: self.blocks.iter().map(TransformerBlock::cast).collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            projection: self.projection.cast(),
        }
    }

    /// Embeds tokens + positions and runs all blocks under the given mask,
    /// ending with the final layer norm. Returns `[S×hidden]`.
    fn encode(
        &self,
        tape: &mut Tape<S>,
        m: &MountedText,
        ids: &[usize],
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<TensorId> {
        if ids.len() > self.dims.max_seq {
            return Err(Error::Capacity {
                what: "sequence length",
                got: ids.len(),
                max: self.dims.max_seq,
            });
        }
        debug_assert_eq!(ids.len(), positions.len());
        debug_assert_eq!(ids.len(), mask.len());
        let tok = tape.gather_rows(m.tokens, ids)?;
        let pos = tape.gather_rows(m.positions, positions)?;
        let mut x = tape.add(tok, pos)?;
        let n = ids.len();
        let bias = tape.constant(vec![n, n], mask.bias_data())?;
        for block in &m.blocks {
            x = block_forward(tape, block, x, self.dims.heads, Some(bias))?;
        }
        tape.layer_norm(x, m.final_gain, m.final_bias, LN_EPS)
    }

    /// Encodes the full segmented sequence in one pass and pools each
    /// segment's final token: `[n_segments × hidden]`.
    pub fn forward_singlepass(
        &self,
        tape: &mut Tape<S>,
        m: &MountedText,
        seq: &SegmentedSequence,
    ) -> Result<TensorId> {
        seq.validate()?;
        let mask = AttentionMask::for_segments(&seq.segment);
        let hidden = self.encode(tape, m, &seq.ids, &seq.positions, &mask)?;
        tape.gather_rows(hidden, &seq.pool)
    }

    /// [`Self::forward_singlepass`] for a whole batch through one set of
    /// tape ops: sequences stack into one tall matrix for every row-wise op
    /// (embedding, norms, projections, MLPs) while attention runs per
    /// sample on sliced rows. Row independence makes each sample's rows
    /// bit-identical to its solo encoding — this only cuts tape nodes and
    /// kernel launches. Returns one pooled `[n_segments×hidden]` handle per
    /// sequence.
    pub fn forward_singlepass_batch(
        &self,
        tape: &mut Tape<S>,
        m: &MountedText,
        seqs: &[&SegmentedSequence],
    ) -> Result<Vec<TensorId>> {
        if seqs.is_empty() {
            return Err(Error::Contract("batched text encode of zero sequences".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        let mut biases = Vec::with_capacity(seqs.len());
        for seq in seqs {
            seq.validate()?;
            let n = seq.ids.len();
            if n > self.dims.max_seq {
                return Err(Error::Capacity {
                    what: "sequence length",
                    got: n,
                    max: self.dims.max_seq,
                });
            }
            let mask = AttentionMask::for_segments(&seq.segment);
            spans.push((ids.len(), n));
            ids.extend_from_slice(&seq.ids);
            positions.extend_from_slice(&seq.positions);
            biases.push(Some(tape.constant(vec![n, n], mask.bias_data())?));
        }
        let tok = tape.gather_rows(m.tokens, &ids)?;
        let pos = tape.gather_rows(m.positions, &positions)?;
        let mut x = tape.add(tok, pos)?;
        for block in &m.blocks {
            x = block_forward_batch(tape, block, x, self.dims.heads, &spans, &biases)?;
        }
        let x = tape.layer_norm(x, m.final_gain, m.final_bias, LN_EPS)?;
        let mut pool = Vec::new();
        let mut pooled_spans = Vec::with_capacity(seqs.len());
        for (seq, &(start, _)) in seqs.iter().zip(&spans) {
            pooled_spans.push((pool.len(), seq.pool.len()));
            pool.extend(seq.pool.iter().map(|&p| start + p));
        }
        let all_pooled = tape.gather_rows(x, &pool)?;
        pooled_spans
            .into_iter()
            .map(|(start, len)| tape.slice_rows(all_pooled, start, len))
            .collect()
    }

    /// Oracle route: encodes `prefix + segment` separately for every
    /// segment under a plain causal mask with ordinary 0..L-1 positions,
    /// then stacks the per-segment pooled rows. Output matches
    /// [`TextEncoderParams::forward_singlepass`] when the sequence uses
    /// segment-local positions.
    pub fn forward_multipass(
        &self,
        tape: &mut Tape<S>,
        m: &MountedText,
        seq: &SegmentedSequence,
    ) -> Result<TensorId> {
        seq.validate()?;
        let prefix = &seq.ids[..seq.prefix_len];
        let mut pooled = Vec::with_capacity(seq.n_segments());
        for segment_no in 1..=seq.n_segments() {
            let mut ids = prefix.to_vec();
            for (i, &seg) in seq.segment.iter().enumerate() {
                if seg == segment_no {
                    ids.push(seq.ids[i]);
                }
            }
            let positions: Vec<usize> = (0..ids.len()).collect();
            let mask = AttentionMask::causal(ids.len());
            let hidden = self.encode(tape, m, &ids, &positions, &mask)?;
            pooled.push(tape.gather_rows(hidden, &[ids.len() - 1])?);
        }
        tape.concat_rows(&pooled)
    }

    /// Projects pooled segment embeddings into the joint space and merges
    /// them per [`CombineMode`]. `pooled` is `[K×hidden]` (or `[2K×hidden]`
    /// when negated segments are present; they merge into a second vector).
    pub fn project_and_combine(
        &self,
        tape: &mut Tape<S>,
        m: &MountedText,
        pooled: TensorId,
    ) -> Result<ProjectedText> {
        let k = self.dims.n_prompts;
        let rows = tape.shape(pooled)[0];
        if rows != k && rows != 2 * k {
            return Err(Error::Shape {
                op: "project_and_combine",
                detail: format!("{rows} pooled rows for {k} prompts"),
            });
        }
        let proj = tape.matmul(pooled, m.projection)?;
        let segment_rows = tape.slice_rows(proj, 0, k)?;
        let joint = self.combine(tape, segment_rows)?;
        let negated = if rows == 2 * k {
            let neg_rows = tape.slice_rows(proj, k, k)?;
            Some(self.combine(tape, neg_rows)?)
        } else {
            None
        };
        Ok(ProjectedText { joint, negated, segment_rows })
    }

    /// `[K×proj_dim]` segment projections -> `[1×D]` unit vector.
    fn combine(&self, tape: &mut Tape<S>, rows: TensorId) -> Result<TensorId> {
        let merged = match self.dims.combine {
            CombineMode::Concat => {
                let k = self.dims.n_prompts;
                tape.reshape(rows, vec![1, k * self.dims.proj_dim()])?
            }
            CombineMode::Average => tape.mean_rows(rows)?,
        };
        tape.l2_normalize_rows(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{PositionMode, PromptConfig, TemplateMode};

    fn make_encoder(
        k: usize,
        combine: CombineMode,
    ) -> (TextEncoderParams<f32>, Vocabulary) {
        let vocab = Vocabulary::build(k, crate::data::caption_words()).unwrap();
        let dims = TextDims {
            vocab_size: vocab.len(),
            hidden: 32,
            heads: 4,
            layers: 2,
            max_seq: 128,
            mlp_hidden: 64,
            joint_dim: 24,
            n_prompts: k,
            combine,
        };
        let mut rng = Rng::new(99);
        (TextEncoderParams::new(dims, &vocab, &mut rng).unwrap(), vocab)
    }

    const CAPTION: &str = "a red circle on a white background at the left";

    #[test]
    fn singlepass_equals_multipass_bitwise() {
        // The masked single pass and the per-segment passes must agree.
        // With this kernel design they agree exactly, not just within
        // tolerance: masked attention terms are exact zeros and per-element
        // accumulation order is shape-independent.
        for k in [1usize, 3, 6] {
            for negation in [false, true] {
                let (enc, vocab) = make_encoder(k, CombineMode::Concat);
                let cfg = PromptConfig::new(k, TemplateMode::Adaptive, negation);
                let seq = cfg.build_sequence(&vocab, CAPTION).unwrap();
                let mut tape = Tape::new();
                let m = enc.mount(&mut tape);
                let single = enc.forward_singlepass(&mut tape, &m, &seq).unwrap();
                let multi = enc.forward_multipass(&mut tape, &m, &seq).unwrap();
                assert_eq!(tape.shape(single), tape.shape(multi));
                let (a, b) = (tape.data(single), tape.data(multi));
                let max_diff = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f32, f32::max);
                assert_eq!(max_diff, 0.0, "k={k} negation={negation}");
            }
        }
    }

    #[test]
    fn batched_forward_matches_solo_bitwise() {
        // Stacking several sequences into one forward pass must leave each
        // sample's pooled rows bit-identical to encoding it alone: every op
        // outside attention is row-local, attention runs per sample, and the
        // matmul kernels accumulate in a shape-independent order.
        let (enc, vocab) = make_encoder(3, CombineMode::Concat);
        let cfg = PromptConfig::new(3, TemplateMode::Adaptive, true);
        let captions = [
            CAPTION,
            "a blue square on a gray background at the right",
            "two green triangles on a black background at the top",
        ];
        let seqs = captions
            .iter()
            .map(|c| cfg.build_sequence(&vocab, c).unwrap())
            .collect::<Vec<_>>();
        let refs: Vec<&_> = seqs.iter().collect();

        let mut tape = Tape::new();
        let m = enc.mount(&mut tape);
        let batched = enc.forward_singlepass_batch(&mut tape, &m, &refs).unwrap();
        assert_eq!(batched.len(), seqs.len());
        for (seq, &handle) in seqs.iter().zip(&batched) {
            let solo = enc.forward_singlepass(&mut tape, &m, seq).unwrap();
            assert_eq!(tape.shape(handle), tape.shape(solo));
            assert_eq!(tape.data(handle), tape.data(solo));
        }
    }

    #[test]
    fn sequential_positions_break_equivalence() {
        // Negative control: without segment-local position ids the single
        // pass sees different position embeddings than the per-segment
        // passes, so the equivalence must fail. This proves the test above
        // cannot pass vacuously.
        let (enc, vocab) = make_encoder(3, CombineMode::Concat);
        let mut cfg = PromptConfig::new(3, TemplateMode::Adaptive, false);
        cfg.position_mode = PositionMode::Sequential;
        let seq = cfg.build_sequence(&vocab, CAPTION).unwrap();
        let mut tape = Tape::new();
        let m = enc.mount(&mut tape);
        let single = enc.forward_singlepass(&mut tape, &m, &seq).unwrap();
        let multi = enc.forward_multipass(&mut tape, &m, &seq).unwrap();
        let max_diff = tape
            .data(single)
            .iter()
            .zip(tape.data(multi))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-3, "sequential positions should break equivalence, diff {max_diff}");
    }

    #[test]
    fn segments_are_isolated() {
        // Changing segment j's tokens must leave every other pooled row
        // bit-identical (same shapes, masked contributions exactly zero).
        let (enc, vocab) = make_encoder(3, CombineMode::Concat);
        let cfg = PromptConfig::new(3, TemplateMode::Adaptive, false);
        let seq = cfg.build_sequence(&vocab, CAPTION).unwrap();

        let mut perturbed = seq.clone();
        // Replace segment 2's prompt token with a different word id.
        let target = seq
            .segment
            .iter()
            .position(|&s| s == 2)
            .expect("segment 2 exists");
        perturbed.ids[target] = vocab.id("triangle");

        let mut tape = Tape::new();
        let m = enc.mount(&mut tape);
        let base = enc.forward_singlepass(&mut tape, &m, &seq).unwrap();
        let changed = enc.forward_singlepass(&mut tape, &m, &perturbed).unwrap();
        let h = enc.dims.hidden;
        let (a, b) = (tape.data(base), tape.data(changed));
        assert_eq!(a[..h], b[..h], "segment 1 must not see segment 2");
        assert_eq!(a[2 * h..], b[2 * h..], "segment 3 must not see segment 2");
        assert_ne!(a[h..2 * h], b[h..2 * h], "segment 2 itself must change");
    }

    #[test]
    fn caption_changes_all_segments() {
        let (enc, vocab) = make_encoder(2, CombineMode::Concat);
        let cfg = PromptConfig::new(2, TemplateMode::Adaptive, false);
        let seq_a = cfg.build_sequence(&vocab, CAPTION).unwrap();
        let seq_b = cfg
            .build_sequence(&vocab, "a blue square on a gray background at the right")
            .unwrap();
        let mut tape = Tape::new();
        let m = enc.mount(&mut tape);
        let a = enc.forward_singlepass(&mut tape, &m, &seq_a).unwrap();
        let b = enc.forward_singlepass(&mut tape, &m, &seq_b).unwrap();
        let h = enc.dims.hidden;
        let (da, db) = (tape.data(a), tape.data(b));
        assert_ne!(da[..h], db[..h]);
        assert_ne!(da[h..], db[h..]);
    }

    #[test]
    fn projection_produces_unit_vectors() {
        for combine in [CombineMode::Concat, CombineMode::Average] {
            let (enc, vocab) = make_encoder(3, combine);
            let cfg = PromptConfig::new(3, TemplateMode::Adaptive, true);
            let seq = cfg.build_sequence(&vocab, CAPTION).unwrap();
            let mut tape = Tape::new();
            let m = enc.mount(&mut tape);
            let pooled = enc.forward_singlepass(&mut tape, &m, &seq).unwrap();
            let out = enc.project_and_combine(&mut tape, &m, pooled).unwrap();
            assert_eq!(tape.shape(out.joint), &[1, 24]);
            let norm: f32 = tape.data(out.joint).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "{combine:?} norm {norm}");
            let neg = out.negated.expect("negation requested");
            let nnorm: f32 = tape.data(neg).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((nnorm - 1.0).abs() < 1e-5);
            assert_ne!(tape.data(out.joint), tape.data(neg), "negated embedding differs");
            assert_eq!(
                tape.shape(out.segment_rows),
                &[3, enc.dims.proj_dim()],
                "{combine:?} segment rows"
            );
        }
    }

    #[test]
    fn combine_modes_disagree() {
        let (enc_c, vocab) = make_encoder(3, CombineMode::Concat);
        let mut enc_a = enc_c.clone();
        enc_a.dims.combine = CombineMode::Average;
        // Average mode needs a [hidden × D] projection; rebuild it.
        let mut rng = Rng::new(7);
        enc_a.projection = Param::new(
            "text.projection",
            gaussian(&mut rng, vec![enc_a.dims.hidden, enc_a.dims.proj_dim()], INIT_STD),
        );
        let cfg = PromptConfig::new(3, TemplateMode::Adaptive, false);
        let seq = cfg.build_sequence(&vocab, CAPTION).unwrap();
        let mut tape = Tape::new();
        let mc = enc_c.mount(&mut tape);
        let pooled_c = enc_c.forward_singlepass(&mut tape, &mc, &seq).unwrap();
        let out_c = enc_c.project_and_combine(&mut tape, &mc, pooled_c).unwrap();
        let ma = enc_a.mount(&mut tape);
        let pooled_a = enc_a.forward_singlepass(&mut tape, &ma, &seq).unwrap();
        let out_a = enc_a.project_and_combine(&mut tape, &ma, pooled_a).unwrap();
        assert_eq!(tape.shape(out_c.joint), tape.shape(out_a.joint));
        assert_ne!(tape.data(out_c.joint), tape.data(out_a.joint));
    }

    #[test]
    fn frozen_blocks_receive_no_gradients() {
        let (mut enc, vocab) = make_encoder(2, CombineMode::Concat);
        enc.set_trainable(1, false, &vocab).unwrap();
        let cfg = PromptConfig::new(2, TemplateMode::Adaptive, false);
        let seq = cfg.build_sequence(&vocab, CAPTION).unwrap();
        let mut tape = Tape::new();
        let m = enc.mount(&mut tape);
        let pooled = enc.forward_singlepass(&mut tape, &m, &seq).unwrap();
        let out = enc.project_and_combine(&mut tape, &m, pooled).unwrap();
        let sq = tape.mul(out.joint, out.joint).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();

        assert!(tape.grad(m.blocks[0].wq).is_none(), "frozen block got a gradient");
        assert!(tape.grad(m.blocks[1].wq).is_some(), "unfrozen block missing gradient");
        assert!(tape.grad(m.projection).is_some());
        // Token table still flows gradients (prompt rows live there), but
        // the frozen position table does not.
        assert!(tape.grad(m.tokens).is_some());
        assert!(tape.grad(m.positions).is_none());
    }

    #[test]
    fn over_long_sequences_are_rejected() {
        let (mut enc, vocab) = make_encoder(6, CombineMode::Concat);
        enc.dims.max_seq = 32; // tighter than the 54-token layout below
        let cfg = PromptConfig::new(6, TemplateMode::Adaptive, false);
        let seq = cfg.build_sequence(&vocab, CAPTION).unwrap();
        let mut tape = Tape::new();
        let m = enc.mount(&mut tape);
        assert!(matches!(
            enc.forward_singlepass(&mut tape, &m, &seq),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn dims_validation_catches_bad_configs() {
        let (enc, _) = make_encoder(3, CombineMode::Concat);
        let mut dims = enc.dims;
        dims.heads = 5; // 5 does not divide 32
        assert!(dims.validate().is_err());
        let mut dims = enc.dims;
        dims.joint_dim = 25; // not divisible by 3 prompts under concat
        assert!(dims.validate().is_err());
        let mut dims = enc.dims;
        dims.combine = CombineMode::Average;
        dims.joint_dim = 25; // fine under average
        assert!(dims.validate().is_ok());
    }
}
