//! The optimization loop: configuration, learning-rate schedule,
//! decoupled-weight-decay adaptive-moment updates, batch assembly and the
//! step driver. Everything is deterministic given the seed — batches come
//! from one explicit generator, updates run in the fixed parameter
//! registry order, and resuming from a checkpoint replays the exact state.

use crate::data::{caption_words, generate_split, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{Census, Model, Param, LOGIT_SCALE_RANGE};
use crate::prompt::{PromptConfig, TemplateMode, Vocabulary};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape};
use crate::text_encoder::{CombineMode, TextDims};
use crate::vision_encoder::VisionDims;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// What the learning rate does once warmup ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    /// Hold the peak rate until the end.
    Constant,
    /// Cosine from the peak down to zero at `total_steps`.
    Cosine,
}

impl LrDecay {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrDecay::Constant),
            "cosine" => Ok(LrDecay::Cosine),
            other => Err(Error::Config(format!(
                "unknown lr decay {other:?} (expected constant|cosine)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LrDecay::Constant => "constant",
            LrDecay::Cosine => "cosine",
        }
    }
}

/// Every knob of a training run. The same `key = value` lines work in a
/// config file, as CLI overrides and inside checkpoints, so a run's full
/// recipe always travels with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Number of adaptive prompt tokens K.
    pub n_prompts: usize,
    /// Joint embedding width D.
    pub joint_dim: usize,
    /// How many final text blocks train.
    pub unfrozen_layers: usize,
    pub learnable_vocab: bool,
    pub template_mode: TemplateMode,
    pub combine_mode: CombineMode,
    pub include_negation: bool,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_decay: LrDecay,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` leaves gradients untouched.
    pub grad_clip: Option<f64>,
    pub text_hidden: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_seq: usize,
    /// MLP hidden width as a multiple of the block width (both encoders).
    pub mlp_ratio: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub patch_size: usize,
    pub pool_heads: usize,
    pub image_size: usize,
    pub max_frames: usize,
    pub temporal_per_channel: bool,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            n_prompts: 6,
            joint_dim: 96,
            unfrozen_layers: 2,
            learnable_vocab: false,
            template_mode: TemplateMode::Adaptive,
            combine_mode: CombineMode::Concat,
            include_negation: false,
            alpha: 0.1,
            beta: 0.1,
            batch_size: 32,
            peak_lr: 3e-4,
            warmup_steps: 200,
            total_steps: 2000,
            lr_decay: LrDecay::Constant,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            text_hidden: 128,
            text_layers: 4,
            text_heads: 4,
            max_seq: 128,
            mlp_ratio: 2,
            vision_width: 128,
            vision_layers: 4,
            vision_heads: 4,
            patch_size: 8,
            pool_heads: 6,
            image_size: 32,
            max_frames: 4,
            temporal_per_channel: false,
            n_train: 96,
            n_eval: 48,
        }
    }
}

impl TrainConfig {
    /// Applies one `key = value` setting; the keys are exactly the field
    /// names.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("bad value {v:?} for {what}"));
        macro_rules! num {
            ($field:ident) => {
                self.$field = v.parse().map_err(|_| bad(stringify!($field)))?
            };
        }
        match key {
            "seed" => num!(seed),
            "n_prompts" => num!(n_prompts),
            "joint_dim" => num!(joint_dim),
            "unfrozen_layers" => num!(unfrozen_layers),
            "learnable_vocab" => num!(learnable_vocab),
            "template_mode" => self.template_mode = TemplateMode::parse(v)?,
            "combine_mode" => self.combine_mode = CombineMode::parse(v)?,
            "include_negation" => num!(include_negation),
            "alpha" => num!(alpha),
            "beta" => num!(beta),
            "batch_size" => num!(batch_size),
            "peak_lr" => num!(peak_lr),
            "warmup_steps" => num!(warmup_steps),
            "total_steps" => num!(total_steps),
            "lr_decay" => self.lr_decay = LrDecay::parse(v)?,
            "weight_decay" => num!(weight_decay),
            "adam_beta1" => num!(adam_beta1),
            "adam_beta2" => num!(adam_beta2),
            "adam_eps" => num!(adam_eps),
            "grad_clip" => {
                self.grad_clip = if v == "off" {
                    None
                } else {
                    Some(v.parse().map_err(|_| bad("grad_clip"))?)
                }
            }
            "text_hidden" => num!(text_hidden),
            "text_layers" => num!(text_layers),
            "text_heads" => num!(text_heads),
            "max_seq" => num!(max_seq),
            "mlp_ratio" => num!(mlp_ratio),
            "vision_width" => num!(vision_width),
            "vision_layers" => num!(vision_layers),
            "vision_heads" => num!(vision_heads),
            "patch_size" => num!(patch_size),
            "pool_heads" => num!(pool_heads),
            "image_size" => num!(image_size),
            "max_frames" => num!(max_frames),
            "temporal_per_channel" => num!(temporal_per_channel),
            "n_train" => num!(n_train),
            "n_eval" => num!(n_eval),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", no + 1)));
            };
            self.apply_kv(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Serializes every field as `key = value` lines (the same format
    /// [`TrainConfig::apply_text`] reads).
    pub fn to_kv_lines(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_prompts = {}", self.n_prompts);
        let _ = writeln!(s, "joint_dim = {}", self.joint_dim);
        let _ = writeln!(s, "unfrozen_layers = {}", self.unfrozen_layers);
        let _ = writeln!(s, "learnable_vocab = {}", self.learnable_vocab);
        let _ = writeln!(s, "template_mode = {}", self.template_mode.name());
        let _ = writeln!(s, "combine_mode = {}", self.combine_mode.name());
        let _ = writeln!(s, "include_negation = {}", self.include_negation);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "peak_lr = {}", self.peak_lr);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay.name());
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        match self.grad_clip {
            Some(c) => {
                let _ = writeln!(s, "grad_clip = {c}");
            }
            None => {
                let _ = writeln!(s, "grad_clip = off");
            }
        }
        let _ = writeln!(s, "text_hidden = {}", self.text_hidden);
        let _ = writeln!(s, "text_layers = {}", self.text_layers);
        let _ = writeln!(s, "text_heads = {}", self.text_heads);
        let _ = writeln!(s, "max_seq = {}", self.max_seq);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "vision_width = {}", self.vision_width);
        let _ = writeln!(s, "vision_layers = {}", self.vision_layers);
        let _ = writeln!(s, "vision_heads = {}", self.vision_heads);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "pool_heads = {}", self.pool_heads);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "max_frames = {}", self.max_frames);
        let _ = writeln!(s, "temporal_per_channel = {}", self.temporal_per_channel);
        let _ = writeln!(s, "n_train = {}", self.n_train);
        let _ = writeln!(s, "n_eval = {}", self.n_eval);
        s
    }

    pub fn text_dims(&self, vocab_size: usize) -> TextDims {
        TextDims {
            vocab_size,
            hidden: self.text_hidden,
            heads: self.text_heads,
            layers: self.text_layers,
            max_seq: self.max_seq,
            mlp_hidden: self.text_hidden * self.mlp_ratio,
            joint_dim: self.joint_dim,
            n_prompts: self.n_prompts,
            combine: self.combine_mode,
        }
    }

    pub fn vision_dims(&self) -> VisionDims {
        VisionDims {
            image_size: self.image_size,
            patch_size: self.patch_size,
            width: self.vision_width,
            heads: self.vision_heads,
            layers: self.vision_layers,
            mlp_hidden: self.vision_width * self.mlp_ratio,
            joint_dim: self.joint_dim,
            pool_heads: self.pool_heads,
            max_frames: self.max_frames,
            temporal_per_channel: self.temporal_per_channel,
        }
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig::new(self.n_prompts, self.template_mode, self.include_negation)
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.build_vocabulary()?;
        self.text_dims(vocab.len()).validate()?;
        self.vision_dims().validate()?;
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={} (the train split)",
                self.batch_size, self.n_train
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite".into()));
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} must be in [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("adam_eps must be positive, weight_decay nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive or off")));
            }
        }
        Ok(())
    }

    pub fn build_vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.n_prompts, caption_words())
    }

    pub fn build_model(&self) -> Result<Model<f32>> {
        let vocab = self.build_vocabulary()?;
        let text = self.text_dims(vocab.len());
        let mut model = Model::new(vocab, text, self.vision_dims(), self.seed)?;
        model.set_trainable(self.unfrozen_layers, self.learnable_vocab)?;
        Ok(model)
    }
}

/// Linear warmup to the peak rate, then constant or cosine per
/// [`TrainConfig::lr_decay`].
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.lr_decay {
        LrDecay::Constant => cfg.peak_lr,
        LrDecay::Cosine => {
            let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
            let into = (step - cfg.warmup_steps.min(step)) as f64;
            let frac = (into / span).min(1.0);
            cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer. Moment buffers exist
/// only for parameters that have received a gradient; updates touch only
/// each parameter's trainable span, so row-restricted tables (the prompt
/// rows of a frozen vocabulary) update exactly those rows.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Completed update count (bias-correction exponent).
    pub t: u64,
    /// Parameter name → (first moment, second moment), full tensor length.
    pub moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        grad_clip: Option<f64>,
    ) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, grad_clip, t: 0, moments: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay, cfg.grad_clip)
    }

    /// One optimizer step over the full registry: `grads[i]` belongs to
    /// `params[i]`; frozen parameters and parameters without a gradient
    /// are skipped.
    pub fn apply(
        &mut self,
        params: &mut [&mut Param<S>],
        grads: &[Option<Vec<S>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.numel() {
                    return Err(Error::Shape {
                        op: "adamw",
                        detail: format!(
                            "gradient length {} does not match {} ({} elements)",
                            g.len(),
                            p.name,
                            p.numel()
                        ),
                    });
                }
            }
        }
        self.t += 1;
        let scale = self.clip_scale(params, grads);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (crate::tensor::s::<S>(self.beta1), crate::tensor::s::<S>(self.beta2));
        let one = S::one();
        let eps = crate::tensor::s::<S>(self.eps);
        let lr_s = crate::tensor::s::<S>(lr);
        let wd = crate::tensor::s::<S>(self.weight_decay);
        let inv_bc1 = crate::tensor::s::<S>(1.0 / bc1);
        let inv_bc2 = crate::tensor::s::<S>(1.0 / bc2);
        let g_scale = crate::tensor::s::<S>(scale);

        for (p, grad) in params.iter_mut().zip(grads) {
            let (Some(grad), true) = (grad, p.is_trainable()) else { continue };
            let span = p.trainable_span();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![S::zero(); grad.len()], vec![S::zero(); grad.len()]));
            let theta = &mut p.tensor.data;
            for i in span {
                let g = grad[i] * g_scale;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                theta[i] = theta[i] - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
            }
        }
        Ok(())
    }

    /// Global-norm clip factor (1.0 when clipping is off or the norm is
    /// under the limit). The norm runs over trainable spans only.
    fn clip_scale(&self, params: &[&mut Param<S>], grads: &[Option<Vec<S>>]) -> f64 {
        let Some(limit) = self.grad_clip else { return 1.0 };
        let mut sq = 0.0f64;
        for (p, grad) in params.iter().zip(grads) {
            let (Some(grad), true) = (grad, p.is_trainable()) else { continue };
            for i in p.trainable_span() {
                let g = grad[i].to_f64().unwrap_or(0.0);
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        if norm > limit {
            limit / norm
        } else {
            1.0
        }
    }
}

/// Draws `b` distinct indices from `0..n` (a partial Fisher–Yates pass),
/// deterministic given the generator state.
pub fn sample_batch(rng: &mut Rng, n: usize, b: usize) -> Result<Vec<usize>> {
    if b == 0 || b > n {
        return Err(Error::Contract(format!("cannot draw {b} distinct samples from {n}")));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = i + rng.next_below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(b);
    Ok(pool)
}

/// One metric row; also the TSV schema of the metrics log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub l_total: f64,
    pub l_con: f64,
    pub l_div: f64,
    pub l_neg: Option<f64>,
    pub tau: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn tsv_header() -> &'static str {
        "step\tl_total\tl_con\tl_div\tl_neg\ttau\tlr"
    }

    pub fn tsv_line(&self) -> String {
        let neg = match self.l_neg {
            Some(v) => format!("{v:.6}"),
            None => "-".to_string(),
        };
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.4}\t{:.6e}",
            self.step, self.l_total, self.l_con, self.l_div, neg, self.tau, self.lr
        )
    }

    fn from_breakdown(step: usize, bd: &LossBreakdown<f32>, lr: f64) -> Self {
        StepRecord {
            step,
            l_total: bd.l_total as f64,
            l_con: bd.l_con as f64,
            l_div: bd.l_div as f64,
            l_neg: bd.l_neg.map(|v| v as f64),
            tau: bd.tau as f64,
            lr,
        }
    }
}

/// Runs one optimization step on a batch of sample indices: forward both
/// encoders, build the combined objective, backprop, update, clamp the
/// logit scale. Any numerical failure is reported with the step index and
/// whatever component losses were already known.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    samples: &[Sample],
    batch: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown<f32>> {
    let at_step = |e: Error| Error::Contract(format!("step {step}: {e}"));
    let mut tape: Tape<f32> = Tape::new();
    let mounted = model.mount(&mut tape);
    let prompts = cfg.prompt_config();

    let mut picked = Vec::with_capacity(batch.len());
    for &idx in batch {
        picked.push(samples.get(idx).ok_or(Error::Index {
            what: "batch sample index",
            index: idx,
            limit: samples.len(),
        })?);
    }
    let seqs = picked
        .iter()
        .map(|sample| prompts.build_sequence(&model.vocab, &sample.caption))
        .collect::<Result<Vec<_>>>()?;
    let seq_refs: Vec<&_> = seqs.iter().collect();
    let pooled_per_sample = model
        .text
        .forward_singlepass_batch(&mut tape, &mounted.text, &seq_refs)
        .map_err(at_step)?;

    let mut text_rows = Vec::with_capacity(batch.len());
    let mut negated_rows = Vec::with_capacity(batch.len());
    let mut segment_blocks = Vec::with_capacity(batch.len());
    for pooled in pooled_per_sample {
        let projected = model
            .text
            .project_and_combine(&mut tape, &mounted.text, pooled)
            .map_err(at_step)?;
        text_rows.push(projected.joint);
        if cfg.include_negation {
            negated_rows.push(projected.negated.ok_or_else(|| {
                Error::Contract("negation enabled but the sequence had no negated segments".into())
            })?);
        }
        segment_blocks.push(projected.segment_rows);
    }

    let images: Vec<&_> = picked.iter().map(|sample| &sample.image).collect();
    let vision_rows: Vec<_> = model
        .vision
        .encode_images_batch(&mut tape, &mounted.vision, &images)
        .map_err(at_step)?
        .into_iter()
        .map(|e| e.joint)
        .collect();

    let text = tape.concat_rows(&text_rows).map_err(at_step)?;
    let vision = tape.concat_rows(&vision_rows).map_err(at_step)?;
    let negated = if cfg.include_negation {
        Some(tape.concat_rows(&negated_rows).map_err(at_step)?)
    } else {
        None
    };
    let bd = total_loss(
        &mut tape,
        text,
        vision,
        negated,
        &segment_blocks,
        mounted.logit_scale,
        cfg.alpha,
        cfg.beta,
    )
    .map_err(at_step)?;

    tape.backward(bd.total).map_err(|e| {
        Error::Contract(format!(
            "step {step}: backward failed ({e}); l_con={} l_div={} l_neg={:?}",
            bd.l_con, bd.l_div, bd.l_neg
        ))
    })?;

    let ids = mounted.ids();
    let grads: Vec<Option<Vec<f32>>> =
        ids.iter().map(|&id| tape.grad(id).map(<[f32]>::to_vec)).collect();
    let mut params = model.params_mut();
    opt.apply(&mut params, &grads, lr_at(step, cfg)).map_err(at_step)?;

    // Keep the similarity multiplier exp(s) inside its working range.
    let (lo, hi) = LOGIT_SCALE_RANGE;
    let s = &mut model.logit_scale.tensor.data[0];
    *s = s.clamp(lo.ln() as f32, hi.ln() as f32);

    Ok(bd)
}

/// Seed stream for batch sampling, decoupled from the parameter-init
/// stream so changing one never perturbs the other.
pub fn batch_rng(seed: u64) -> Rng {
    Rng::new(seed ^ 0xB47C_5F0A_11E3_77D1)
}

/// Everything a finished run leaves behind.
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps_run: usize,
    pub final_loss: f64,
    pub census: Census,
}

/// Trains from scratch or resumes, writes `checkpoint.camp` and
/// `metrics.tsv` under `out_dir`, and reports each step through
/// `on_step`.
pub fn run_training(
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut opt, mut rng, start_step) = match resume {
        None => (
            cfg.build_model()?,
            AdamW::from_config(cfg),
            batch_rng(cfg.seed),
            0usize,
        ),
        Some(path) => {
            let snap = crate::checkpoint::load(path)?;
            // The architecture and schedule must match; only the horizon
            // may move, so a run can be extended.
            let mut theirs = snap.config.clone();
            theirs.total_steps = cfg.total_steps;
            if theirs != *cfg {
                return Err(Error::Config(format!(
                    "resume config mismatch: checkpoint was trained with\n{}",
                    snap.config.to_kv_lines()
                )));
            }
            if snap.step > cfg.total_steps {
                return Err(Error::Config(format!(
                    "checkpoint is already at step {}, beyond total_steps {}",
                    snap.step, cfg.total_steps
                )));
            }
            (snap.model, snap.optimizer, Rng::from_state(snap.rng_state), snap.step)
        }
    };
    let (train_samples, _) = generate_split(cfg.image_size, cfg.n_train, cfg.n_eval, cfg.seed)?;

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.tsv");
    let mut metrics = String::new();
    metrics.push_str(StepRecord::tsv_header());
    metrics.push('\n');

    let mut final_loss = f64::NAN;
    for step in start_step..cfg.total_steps {
        let batch = sample_batch(&mut rng, cfg.n_train, cfg.batch_size)?;
        let bd = train_step(&mut model, &mut opt, &train_samples, &batch, cfg, step)?;
        let record = StepRecord::from_breakdown(step, &bd, lr_at(step, cfg));
        final_loss = record.l_total;
        metrics.push_str(&record.tsv_line());
        metrics.push('\n');
        on_step(&record);
    }
    std::fs::write(&metrics_path, metrics)?;

    let checkpoint = out_dir.join("checkpoint.camp");
    crate::checkpoint::save(&checkpoint, &model, &opt, cfg, cfg.total_steps, rng.state())?;
    Ok(TrainOutcome {
        checkpoint,
        metrics: metrics_path,
        steps_run: cfg.total_steps - start_step,
        final_loss,
        census: model.census(),
    })
}

/// A deliberately small architecture so unit tests stay fast.
#[cfg(test)]
pub(crate) fn tiny_config() -> TrainConfig {
    TrainConfig {
        n_prompts: 3,
        joint_dim: 24,
        batch_size: 8,
        peak_lr: 1e-3,
        warmup_steps: 5,
        total_steps: 20,
        text_hidden: 32,
        text_layers: 2,
        text_heads: 4,
        max_seq: 64,
        vision_width: 32,
        vision_layers: 1,
        vision_heads: 4,
        pool_heads: 6,
        image_size: 16,
        n_train: 16,
        n_eval: 8,
        ..TrainConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_warms_up_then_holds() {
        let mut cfg = TrainConfig::default();
        cfg.peak_lr = 5e-4;
        cfg.warmup_steps = 10_000;
        cfg.total_steps = 30_000;
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(5_000, &cfg) - 2.5e-4).abs() < 1e-12);
        assert!((lr_at(10_000, &cfg) - 5e-4).abs() < 1e-12);
        assert!((lr_at(20_000, &cfg) - 5e-4).abs() < 1e-12, "constant after warmup");

        cfg.lr_decay = LrDecay::Cosine;
        assert!((lr_at(20_000, &cfg) - 2.5e-4).abs() < 1e-9, "cosine midpoint is half peak");
        assert!(lr_at(30_000, &cfg) < 1e-12, "cosine ends at zero");
        // Monotone decrease after warmup.
        let mut last = lr_at(10_000, &cfg);
        for step in (11_000..30_000).step_by(1_000) {
            let lr = lr_at(step, &cfg);
            assert!(lr < last);
            last = lr;
        }
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        // Single scalar parameter, zero moments: m̂ = g, v̂ = g², so the
        // update is −lr·(g/(|g|+eps) + wd·θ).
        let mut p = Param::new("w", crate::tensor::Tensor::<f64>::scalar(2.0).with_grad());
        let mut opt: AdamW<f64> = AdamW::new(0.9, 0.999, 1e-8, 0.01, None);
        let g = -3.0f64;
        let lr = 0.1;
        let want = 2.0 - lr * (g / (g.abs() + 1e-8) + 0.01 * 2.0);
        opt.apply(&mut [&mut p], &[Some(vec![g])], lr).unwrap();
        let got = p.tensor.data[0];
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut p = Param::new("w", crate::tensor::Tensor::<f64>::scalar(1.5).with_grad());
        let mut opt: AdamW<f64> = AdamW::new(0.9, 0.999, 1e-8, 0.0, None);
        for _ in 0..3 {
            opt.apply(&mut [&mut p], &[Some(vec![0.0])], 0.5).unwrap();
        }
        assert_eq!(p.tensor.data[0], 1.5);
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut p = Param::new(
                "w",
                crate::tensor::Tensor::<f32>::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0])
                    .unwrap()
                    .with_grad(),
            );
            let mut opt: AdamW<f32> = AdamW::new(0.9, 0.999, 1e-8, 0.01, None);
            for step in 0..5 {
                let g: Vec<f32> = (0..4).map(|i| (step * 4 + i) as f32 * 0.1 - 0.3).collect();
                opt.apply(&mut [&mut p], &[Some(g)], 1e-2).unwrap();
            }
            p.tensor.data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adamw_respects_trainable_rows_and_freezing() {
        let mut table = Param::new(
            "table",
            crate::tensor::Tensor::<f64>::new(vec![3, 2], vec![1.0; 6]).unwrap().with_grad(),
        );
        table.trainable_rows = Some(1..2);
        let mut frozen = Param::new("f", crate::tensor::Tensor::<f64>::scalar(7.0));
        let mut opt: AdamW<f64> = AdamW::new(0.9, 0.999, 1e-8, 0.0, None);
        opt.apply(
            &mut [&mut table, &mut frozen],
            &[Some(vec![1.0; 6]), Some(vec![5.0])],
            0.1,
        )
        .unwrap();
        assert_eq!(table.tensor.data[0], 1.0, "row 0 frozen");
        assert_eq!(table.tensor.data[1], 1.0);
        assert!(table.tensor.data[2] < 1.0, "row 1 trains");
        assert!(table.tensor.data[3] < 1.0);
        assert_eq!(table.tensor.data[4], 1.0, "row 2 frozen");
        assert_eq!(frozen.tensor.data[0], 7.0, "requires_grad=false is untouched");
        assert_eq!(opt.moments.len(), 1, "moments exist only for updated parameters");
    }

    #[test]
    fn grad_clip_rescales_updates() {
        // Two equal parameters; one optimizer clips to norm 1, the other
        // does not. The clipped update must be strictly smaller.
        let grad = vec![3.0f64, 4.0]; // norm 5
        let run = |clip: Option<f64>| {
            let mut p = Param::new(
                "w",
                crate::tensor::Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap().with_grad(),
            );
            let mut opt: AdamW<f64> = AdamW::new(0.9, 0.999, 1e-8, 0.0, clip);
            opt.apply(&mut [&mut p], &[Some(grad.clone())], 0.1).unwrap();
            p.tensor.data.clone()
        };
        let free = run(None);
        let clipped = run(Some(1.0));
        // Sign-preserving, magnitude-reducing... with bias correction the
        // first-step update is ±lr regardless of scale, so compare moments
        // indirectly through a second step with opposing gradient instead.
        let run2 = |clip: Option<f64>| {
            let mut p = Param::new(
                "w",
                crate::tensor::Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap().with_grad(),
            );
            let mut opt: AdamW<f64> = AdamW::new(0.9, 0.999, 1e-8, 0.0, clip);
            opt.apply(&mut [&mut p], &[Some(grad.clone())], 0.1).unwrap();
            opt.apply(&mut [&mut p], &[Some(vec![-0.1, 0.1])], 0.1).unwrap();
            p.tensor.data.clone()
        };
        assert_ne!(run2(None), run2(Some(1.0)), "clipping must change the trajectory");
        assert_eq!(free.len(), clipped.len());
    }

    #[test]
    fn batches_are_distinct_and_deterministic() {
        let mut rng = batch_rng(7);
        let batch = sample_batch(&mut rng, 96, 32).unwrap();
        assert_eq!(batch.len(), 32);
        let set: std::collections::HashSet<_> = batch.iter().collect();
        assert_eq!(set.len(), 32, "indices must be distinct");
        assert!(batch.iter().all(|&i| i < 96));

        let mut rng2 = batch_rng(7);
        assert_eq!(sample_batch(&mut rng2, 96, 32).unwrap(), batch);
        assert!(sample_batch(&mut rng, 8, 9).is_err());
    }

    #[test]
    fn config_file_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.n_prompts = 3;
        cfg.alpha = 0.25;
        cfg.grad_clip = Some(1.5);
        cfg.template_mode = TemplateMode::Minimal;
        cfg.lr_decay = LrDecay::Cosine;
        let text = cfg.to_kv_lines();
        let mut back = TrainConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, cfg);

        // Comments and blank lines parse; junk does not.
        let mut c = TrainConfig::default();
        c.apply_text("# comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(c.seed, 9);
        assert!(c.apply_text("nonsense\n").is_err());
        assert!(c.apply_text("unknown_key = 3\n").is_err());
        assert!(c.apply_text("seed = notanumber\n").is_err());
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let good = tiny_config();
        good.validate().unwrap();
        let mut bad = tiny_config();
        bad.batch_size = 17; // > n_train = 16
        assert!(bad.validate().is_err());
        let mut bad = tiny_config();
        bad.joint_dim = 25; // not divisible by 3 prompts
        assert!(bad.validate().is_err());
        let mut bad = tiny_config();
        bad.peak_lr = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = tiny_config();
        bad.grad_clip = Some(-1.0);
        assert!(bad.validate().is_err());
    }

    fn tmp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("camp-train-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn short_run_reduces_the_loss() {
        let dir = tmp_dir("smoke");
        let mut cfg = tiny_config();
        cfg.total_steps = 60;
        let mut losses = Vec::new();
        let outcome = run_training(&cfg, &dir, None, |r| {
            assert!(r.l_total.is_finite(), "step {}: loss {}", r.step, r.l_total);
            assert!(r.tau > 0.0);
            losses.push(r.l_total);
        })
        .unwrap();
        assert_eq!(outcome.steps_run, 60);
        assert!(outcome.checkpoint.exists());
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss should fall: first 5 avg {head}, last 5 avg {tail}");

        let metrics = std::fs::read_to_string(&outcome.metrics).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(lines.next(), Some(StepRecord::tsv_header()));
        assert_eq!(lines.count(), 60);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn frozen_text_blocks_hold_still_while_prompts_move() {
        let mut cfg = tiny_config();
        cfg.unfrozen_layers = 0;
        cfg.learnable_vocab = false;
        cfg.warmup_steps = 0;
        let mut model = cfg.build_model().unwrap();
        let before: std::collections::BTreeMap<String, Vec<f32>> =
            model.params().iter().map(|p| (p.name.clone(), p.tensor.data.clone())).collect();

        let (train, _) = generate_split(cfg.image_size, cfg.n_train, cfg.n_eval, cfg.seed).unwrap();
        let mut opt = AdamW::from_config(&cfg);
        let mut rng = batch_rng(cfg.seed);
        for step in 0..3 {
            let batch = sample_batch(&mut rng, cfg.n_train, cfg.batch_size).unwrap();
            train_step(&mut model, &mut opt, &train, &batch, &cfg, step).unwrap();
        }

        let prompt_rows = model.vocab.prompt_token_range();
        let hidden = cfg.text_hidden;
        for p in model.params() {
            let orig = &before[&p.name];
            if p.name.starts_with("text.block") || p.name == "text.positions" {
                assert_eq!(&p.tensor.data, orig, "{} must stay frozen", p.name);
            } else if p.name == "text.tokens" {
                let span = prompt_rows.start * hidden..prompt_rows.end * hidden;
                assert_ne!(&p.tensor.data[span.clone()], &orig[span.clone()], "prompt rows train");
                assert_eq!(&p.tensor.data[..span.start], &orig[..span.start]);
                assert_eq!(&p.tensor.data[span.end..], &orig[span.end..]);
            } else if p.name.starts_with("vision.") && p.name != "vision.temporal" {
                // Image training never touches the video temporal table,
                // but the rest of the vision encoder must move.
                assert_ne!(&p.tensor.data, orig, "{} should train", p.name);
            }
        }
    }

    #[test]
    fn negation_flag_adds_the_extra_term() {
        let mut cfg = tiny_config();
        cfg.include_negation = true;
        cfg.warmup_steps = 0;
        let mut model = cfg.build_model().unwrap();
        let (train, _) = generate_split(cfg.image_size, cfg.n_train, cfg.n_eval, cfg.seed).unwrap();
        let mut opt = AdamW::from_config(&cfg);
        let mut rng = batch_rng(cfg.seed);
        let batch = sample_batch(&mut rng, cfg.n_train, cfg.batch_size).unwrap();
        let bd = train_step(&mut model, &mut opt, &train, &batch, &cfg, 0).unwrap();
        let l_neg = bd.l_neg.expect("negation term present");
        assert!(l_neg.is_finite());
        assert!(StepRecord::from_breakdown(0, &bd, 1e-3).tsv_line().contains(&format!("{:.6}", f64::from(l_neg))));

        cfg.include_negation = false;
        let mut model = cfg.build_model().unwrap();
        let bd = train_step(&mut model, &mut opt, &train, &batch, &cfg, 0).unwrap();
        assert!(bd.l_neg.is_none());
    }

    #[test]
    fn logit_scale_is_clamped_after_each_step() {
        let mut cfg = tiny_config();
        cfg.warmup_steps = 0;
        cfg.peak_lr = 1e-12;
        let mut model = cfg.build_model().unwrap();
        let (lo, hi) = LOGIT_SCALE_RANGE;
        let (train, _) = generate_split(cfg.image_size, cfg.n_train, cfg.n_eval, cfg.seed).unwrap();
        let mut opt = AdamW::from_config(&cfg);
        let batch: Vec<usize> = (0..cfg.batch_size).collect();

        model.logit_scale.tensor.data[0] = 7.0; // far above ln(100)
        train_step(&mut model, &mut opt, &train, &batch, &cfg, 0).unwrap();
        let s = model.logit_scale.tensor.data[0];
        assert!((s - hi.ln() as f32).abs() < 1e-6, "clamped to the top: {s}");

        model.logit_scale.tensor.data[0] = -3.0; // below ln(1)
        train_step(&mut model, &mut opt, &train, &batch, &cfg, 1).unwrap();
        let s = model.logit_scale.tensor.data[0];
        assert!((s - lo.ln() as f32).abs() < 1e-6, "clamped to the bottom: {s}");
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let mut cfg = tiny_config();
        cfg.total_steps = 4;
        cfg.warmup_steps = 2;
        let dirs = [tmp_dir("det-a"), tmp_dir("det-b")];
        let mut outputs = Vec::new();
        for dir in &dirs {
            run_training(&cfg, dir, None, |_| {}).unwrap();
            outputs.push((
                std::fs::read(dir.join("checkpoint.camp")).unwrap(),
                std::fs::read_to_string(dir.join("metrics.tsv")).unwrap(),
            ));
        }
        assert_eq!(outputs[0], outputs[1], "same seed must reproduce bytes exactly");

        let other_dir = tmp_dir("det-c");
        cfg.seed = 43;
        run_training(&cfg, &other_dir, None, |_| {}).unwrap();
        let other = std::fs::read(other_dir.join("checkpoint.camp")).unwrap();
        assert_ne!(outputs[0].0, other, "a different seed must change the run");
        for dir in dirs.iter().chain([&other_dir]) {
            std::fs::remove_dir_all(dir).unwrap();
        }
    }

    #[test]
    fn metrics_lines_are_tab_separated() {
        let r = StepRecord {
            step: 3,
            l_total: 1.25,
            l_con: 1.0,
            l_div: 0.5,
            l_neg: None,
            tau: 0.07,
            lr: 3e-4,
        };
        let line = r.tsv_line();
        assert_eq!(line.split('\t').count(), 7);
        assert!(line.contains("\t-\t"), "missing negation prints a dash");
        let r2 = StepRecord { l_neg: Some(0.75), ..r };
        assert!(r2.tsv_line().contains("0.750000"));
    }
}
