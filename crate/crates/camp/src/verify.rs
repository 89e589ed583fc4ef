//! Verification and measurement routines shared by the command-line
//! surface and the acceptance suite: the one-pass/multi-pass equivalence
//! sweep, an end-to-end finite-difference gradient check over the whole
//! model (temperature, prompt embeddings and video temporal encodings
//! included), and wall-time benchmarks of the masked single-pass forward
//! against the K-independent-passes baseline.

use crate::data::{caption_words, generate_split, Sample};
use crate::error::{Error, Result};
use crate::losses::{compose_total, contrastive_loss, diversity_loss, negation_loss};
use crate::model::Model;
use crate::prompt::{PositionMode, PromptConfig, TemplateMode, Vocabulary};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};
use crate::text_encoder::{CombineMode, TextDims, TextEncoderParams};
use crate::vision_encoder::VisionDims;
use std::time::{Duration, Instant};

/// Fixed caption pool for verification runs (the corpus is deterministic,
/// so these are too).
fn verification_captions(n: usize) -> Result<Vec<String>> {
    let (train, _) = generate_split(16, n.max(2), 2, 1999)?;
    Ok(train.into_iter().map(|s| s.caption).collect())
}

fn verification_text_encoder(
    k: usize,
    seed: u64,
) -> Result<(TextEncoderParams<f32>, Vocabulary)> {
    let vocab = Vocabulary::build(k, caption_words())?;
    let dims = TextDims {
        vocab_size: vocab.len(),
        hidden: 64,
        heads: 4,
        layers: 2,
        max_seq: 128,
        mlp_hidden: 128,
        joint_dim: 48,
        n_prompts: k,
        combine: CombineMode::Concat,
    };
    let mut rng = Rng::new(seed);
    Ok((TextEncoderParams::new(dims, &vocab, &mut rng)?, vocab))
}

/// Result of one equivalence case: worst absolute difference between the
/// single masked pass and the per-segment multi-pass oracle across seeds.
#[derive(Debug, Clone)]
pub struct EquivOutcome {
    pub k: usize,
    pub negation: bool,
    pub seeds: usize,
    pub max_abs_diff: f64,
}

/// Compares pooled segment embeddings from the two forward routes for
/// every (k, negation) combination over `seeds` freshly initialized
/// encoders and varying captions. `position_mode` should be
/// [`PositionMode::SegmentLocal`]; sequential numbering is accepted so the
/// caller can demonstrate the equivalence breaking without it.
pub fn equivalence_sweep(
    ks: &[usize],
    seeds: usize,
    position_mode: PositionMode,
) -> Result<Vec<EquivOutcome>> {
    if ks.is_empty() || seeds == 0 {
        return Err(Error::Contract("equivalence sweep needs at least one k and seed".into()));
    }
    let captions = verification_captions(seeds)?;
    let mut out = Vec::new();
    for &k in ks {
        for negation in [false, true] {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let (enc, vocab) = verification_text_encoder(k, 2100 + seed as u64)?;
                let mut prompts = PromptConfig::new(k, TemplateMode::Adaptive, negation);
                prompts.position_mode = position_mode;
                let seq = prompts.build_sequence(&vocab, &captions[seed % captions.len()])?;

                let mut tape: Tape<f32> = Tape::new();
                let m = enc.mount(&mut tape);
                let single = enc.forward_singlepass(&mut tape, &m, &seq)?;
                let multi = enc.forward_multipass(&mut tape, &m, &seq)?;
                let a = tape.data(single);
                let b = tape.data(multi);
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((f64::from(*x) - f64::from(*y)).abs());
                }
            }
            out.push(EquivOutcome { k, negation, seeds, max_abs_diff: worst });
        }
    }
    Ok(out)
}

/// One loss term to gradient-check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Con,
    Div,
    Neg,
    Total,
}

impl LossComponent {
    pub const ALL: [LossComponent; 4] =
        [LossComponent::Con, LossComponent::Div, LossComponent::Neg, LossComponent::Total];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "con" => Ok(LossComponent::Con),
            "div" => Ok(LossComponent::Div),
            "neg" => Ok(LossComponent::Neg),
            "total" => Ok(LossComponent::Total),
            other => Err(Error::Config(format!(
                "unknown loss component {other:?} (expected con|div|neg|total)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossComponent::Con => "con",
            LossComponent::Div => "div",
            LossComponent::Neg => "neg",
            LossComponent::Total => "total",
        }
    }
}

/// Worst observed disagreement for one component of the objective.
#[derive(Debug, Clone)]
pub struct GradOutcome {
    pub component: &'static str,
    pub worst_param: String,
    pub max_rel_err: f64,
    /// Number of (parameter, element) pairs compared.
    pub checks: usize,
}

const GRAD_ALPHA: f64 = 0.1;
const GRAD_BETA: f64 = 0.1;
const FD_STEP: f64 = 1e-5;
/// Gradients with both analytic and numeric magnitude under this floor
/// count as agreeing zeros (central differences bottom out in noise there).
const FD_FLOOR: f64 = 1e-7;

/// The small double-precision model the gradient check runs on: 3 prompts,
/// 2 text blocks, a 1-block vision trunk, 2-frame videos with nonzero
/// temporal encodings so their gradients are exercised.
fn gradcheck_model(batch: usize) -> Result<(Model<f64>, Vec<Vec<crate::data::Image>>, Vec<String>, PromptConfig)> {
    let k = 3;
    let vocab = Vocabulary::build(k, caption_words())?;
    let text = TextDims {
        vocab_size: vocab.len(),
        hidden: 32,
        heads: 4,
        layers: 2,
        max_seq: 96,
        mlp_hidden: 64,
        joint_dim: 24,
        n_prompts: k,
        combine: CombineMode::Concat,
    };
    let vision = VisionDims {
        image_size: 16,
        patch_size: 8,
        width: 32,
        heads: 4,
        layers: 1,
        mlp_hidden: 64,
        joint_dim: 24,
        pool_heads: 6,
        max_frames: 2,
        temporal_per_channel: false,
    };
    let mut model = Model::<f64>::new(vocab, text, vision, 31)?;
    model.set_trainable(2, true)?;
    // Zero temporal encodings would make their check vacuous.
    model.vision.temporal.tensor.data = vec![0.05, -0.03];

    let (samples, _) = generate_split(16, batch.max(2), 2, 17)?;
    let samples: Vec<Sample> = samples.into_iter().take(batch).collect();
    if samples.len() < batch {
        return Err(Error::Contract(format!("corpus yielded {} of {batch} samples", samples.len())));
    }
    let videos: Vec<Vec<crate::data::Image>> = samples
        .iter()
        .map(|s| vec![s.image.clone(), s.image.translate_columns(3)])
        .collect();
    let captions: Vec<String> = samples.into_iter().map(|s| s.caption).collect();
    let prompts = PromptConfig::new(k, TemplateMode::Adaptive, true);
    Ok((model, videos, captions, prompts))
}

/// Tape handles for each objective component after one forward pass.
struct ComponentIds {
    con: TensorId,
    div: TensorId,
    neg: TensorId,
    total: TensorId,
}

impl ComponentIds {
    fn get(&self, c: LossComponent) -> TensorId {
        match c {
            LossComponent::Con => self.con,
            LossComponent::Div => self.div,
            LossComponent::Neg => self.neg,
            LossComponent::Total => self.total,
        }
    }
}

/// Forward pass over the verification batch, returning the tape, the
/// mounted parameter handles and the component roots.
fn forward_components(
    model: &Model<f64>,
    videos: &[Vec<crate::data::Image>],
    captions: &[String],
    prompts: &PromptConfig,
) -> Result<(Tape<f64>, Vec<TensorId>, ComponentIds)> {
    let mut tape: Tape<f64> = Tape::new();
    let mounted = model.mount(&mut tape);

    let mut text_rows = Vec::new();
    let mut neg_rows = Vec::new();
    let mut segment_blocks = Vec::new();
    let mut vision_rows = Vec::new();
    for (video, caption) in videos.iter().zip(captions) {
        let seq = prompts.build_sequence(&model.vocab, caption)?;
        let pooled = model.text.forward_singlepass(&mut tape, &mounted.text, &seq)?;
        let projected = model.text.project_and_combine(&mut tape, &mounted.text, pooled)?;
        text_rows.push(projected.joint);
        neg_rows.push(projected.negated.ok_or_else(|| {
            Error::Contract("gradient check requires negated segments".into())
        })?);
        segment_blocks.push(projected.segment_rows);
        let emb = model.vision.encode_video(&mut tape, &mounted.vision, video)?;
        vision_rows.push(emb.joint);
    }
    let text = tape.concat_rows(&text_rows)?;
    let vision = tape.concat_rows(&vision_rows)?;
    let negated = tape.concat_rows(&neg_rows)?;

    let inv_tau = tape.exp(mounted.logit_scale)?;
    let parts = contrastive_loss(&mut tape, text, vision, inv_tau)?;
    let div = diversity_loss(&mut tape, &segment_blocks)?;
    let neg = negation_loss(&mut tape, vision, text, negated, inv_tau)?;
    let total = compose_total(&mut tape, parts.l_con, div, Some(neg), GRAD_ALPHA, GRAD_BETA)?;

    let ids = mounted.ids();
    Ok((tape, ids, ComponentIds { con: parts.l_con, div, neg, total }))
}

/// Evenly spread element indices inside a flat range.
fn spread(range: std::ops::Range<usize>, n: usize) -> Vec<usize> {
    let len = range.len();
    if len == 0 {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..n.min(len))
        .map(|i| range.start + i * (len - 1) / n.saturating_sub(1).max(1))
        .collect();
    out.dedup();
    out
}

/// Which elements the finite-difference probe touches: a cross-section of
/// every parameter family, with the prompt-token rows, the temperature and
/// the temporal encodings explicitly included.
fn fd_targets(model: &Model<f64>) -> Vec<(String, Vec<usize>)> {
    let hidden = model.text.dims.hidden;
    let prompt_rows = model.vocab.prompt_token_range();
    let prompt_span = prompt_rows.start * hidden..prompt_rows.end * hidden;
    let mut targets: Vec<(String, Vec<usize>)> = vec![
        ("logit_scale".into(), vec![0]),
        ("text.tokens".into(), spread(prompt_span, 4)),
        ("text.positions".into(), vec![0, hidden * 3 + 1]),
        ("text.block0.attn.wq".into(), Vec::new()),
        ("text.block1.mlp.w_down".into(), Vec::new()),
        ("text.final.gain".into(), vec![0, hidden / 2]),
        ("text.projection".into(), Vec::new()),
        ("vision.patch.weight".into(), Vec::new()),
        ("vision.block0.attn.wv".into(), Vec::new()),
        ("vision.final.gain".into(), vec![0]),
        ("vision.pool.query".into(), Vec::new()),
        ("vision.pool.wk".into(), Vec::new()),
        ("vision.temporal".into(), vec![0, 1]),
    ];
    for (name, idxs) in &mut targets {
        if idxs.is_empty() {
            let p = model
                .params()
                .into_iter()
                .find(|p| &p.name == name)
                .unwrap_or_else(|| panic!("fd target {name} not in the registry"));
            *idxs = spread(0..p.numel(), 3);
        }
    }
    targets
}

/// Checks analytic gradients of the requested components against central
/// finite differences on a small batch. Every comparison uses relative
/// error with an absolute floor for agreeing zeros.
pub fn gradient_check(components: &[LossComponent], batch: usize) -> Result<Vec<GradOutcome>> {
    if components.is_empty() || batch < 2 {
        return Err(Error::Contract("gradient check needs components and a batch of at least 2".into()));
    }
    let (mut model, videos, captions, prompts) = gradcheck_model(batch)?;
    let targets = fd_targets(&model);

    // Analytic gradients: one fresh forward + backward per component.
    let mut analytic: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    for &c in components {
        let (mut tape, ids, roots) = forward_components(&model, &videos, &captions, &prompts)?;
        tape.backward(roots.get(c))?;
        analytic.push(ids.iter().map(|&id| tape.grad(id).map(<[f64]>::to_vec)).collect());
    }
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();

    // Numeric gradients: each probed element yields all components from
    // the same pair of perturbed forwards.
    let mut outcomes: Vec<GradOutcome> = components
        .iter()
        .map(|c| GradOutcome {
            component: c.name(),
            worst_param: "-".into(),
            max_rel_err: 0.0,
            checks: 0,
        })
        .collect();
    for (name, idxs) in &targets {
        let pi = names.iter().position(|n| n == name).expect("target name in registry");
        for &idx in idxs {
            let original = model.params()[pi].tensor.data[idx];
            let mut eval = |v: f64| -> Result<Vec<f64>> {
                model.params_mut()[pi].tensor.data[idx] = v;
                let (tape, _, roots) = forward_components(&model, &videos, &captions, &prompts)?;
                components.iter().map(|&c| tape.value(roots.get(c))).collect()
            };
            let plus = eval(original + FD_STEP)?;
            let minus = eval(original - FD_STEP)?;
            model.params_mut()[pi].tensor.data[idx] = original;

            for (ci, outcome) in outcomes.iter_mut().enumerate() {
                let fd = (plus[ci] - minus[ci]) / (2.0 * FD_STEP);
                let a = analytic[ci][pi].as_ref().map_or(0.0, |g| g[idx]);
                outcome.checks += 1;
                let scale = a.abs().max(fd.abs());
                if scale < FD_FLOOR {
                    continue;
                }
                let rel = (a - fd).abs() / scale;
                if rel > outcome.max_rel_err {
                    outcome.max_rel_err = rel;
                    outcome.worst_param = name.clone();
                }
            }
        }
    }
    Ok(outcomes)
}

/// Verifies that parameters frozen by the trainability policy receive no
/// gradient at all from a full backward pass.
pub fn frozen_gradient_check() -> Result<GradOutcome> {
    let (mut model, videos, captions, prompts) = gradcheck_model(2)?;
    model.set_trainable(0, false)?;
    let (mut tape, ids, roots) = forward_components(&model, &videos, &captions, &prompts)?;
    tape.backward(roots.total)?;
    let mut checks = 0;
    for (p, &id) in model.params().iter().zip(&ids) {
        if p.is_trainable() {
            continue;
        }
        checks += 1;
        if let Some(g) = tape.grad(id) {
            let worst = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if worst != 0.0 {
                return Ok(GradOutcome {
                    component: "frozen",
                    worst_param: p.name.clone(),
                    max_rel_err: worst,
                    checks,
                });
            }
        }
    }
    Ok(GradOutcome { component: "frozen", worst_param: "-".into(), max_rel_err: 0.0, checks })
}

/// Wall-time measurements for one prompt count.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub k: usize,
    /// One forward over a single-segment sequence (prefix + 1 prompt).
    pub one_prompt: Duration,
    /// One masked forward over the full K-segment sequence.
    pub single_pass: Duration,
    /// K independent forwards (the multi-pass baseline).
    pub k_pass: Duration,
}

impl BenchOutcome {
    /// single-pass time over K-pass time (lower is better).
    pub fn ratio(&self) -> f64 {
        self.single_pass.as_secs_f64() / self.k_pass.as_secs_f64().max(f64::MIN_POSITIVE)
    }

    /// single-pass time against K repetitions of the one-prompt forward.
    pub fn amortization(&self) -> f64 {
        let baseline = self.k as f64 * self.one_prompt.as_secs_f64();
        self.single_pass.as_secs_f64() / baseline.max(f64::MIN_POSITIVE)
    }
}

/// Times the masked single pass against the per-segment baseline for each
/// prompt count, reporting the minimum over `repeats` runs.
pub fn bench_forward(ks: &[usize], repeats: usize) -> Result<Vec<BenchOutcome>> {
    if ks.is_empty() || repeats == 0 {
        return Err(Error::Contract("benchmark needs at least one k and one repeat".into()));
    }
    let caption = verification_captions(1)?.remove(0);
    let mut out = Vec::new();
    for &k in ks {
        let (enc, vocab) = verification_text_encoder(k, 77)?;
        let full = PromptConfig::new(k, TemplateMode::Adaptive, false).build_sequence(&vocab, &caption)?;
        let one = PromptConfig::new(1, TemplateMode::Adaptive, false).build_sequence(&vocab, &caption)?;

        let mut best_one = Duration::MAX;
        let mut best_single = Duration::MAX;
        let mut best_multi = Duration::MAX;
        // One untimed pass warms caches and the allocator.
        for rep in 0..=repeats {
            let mut tape: Tape<f32> = Tape::new();
            let m = enc.mount(&mut tape);
            let t0 = Instant::now();
            enc.forward_singlepass(&mut tape, &m, &one)?;
            let t_one = t0.elapsed();
            let t0 = Instant::now();
            enc.forward_singlepass(&mut tape, &m, &full)?;
            let t_single = t0.elapsed();
            let t0 = Instant::now();
            enc.forward_multipass(&mut tape, &m, &full)?;
            let t_multi = t0.elapsed();
            if rep > 0 {
                best_one = best_one.min(t_one);
                best_single = best_single.min(t_single);
                best_multi = best_multi.min(t_multi);
            }
        }
        out.push(BenchOutcome { k, one_prompt: best_one, single_pass: best_single, k_pass: best_multi });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_sweep_passes_with_local_positions() {
        let cases = equivalence_sweep(&[1, 3], 3, PositionMode::SegmentLocal).unwrap();
        assert_eq!(cases.len(), 4, "each k runs with and without negation");
        for c in &cases {
            assert!(
                c.max_abs_diff < 1e-5,
                "k={} negation={} diff {}",
                c.k,
                c.negation,
                c.max_abs_diff
            );
        }
    }

    #[test]
    fn equivalence_sweep_fails_with_sequential_positions() {
        let cases = equivalence_sweep(&[3], 2, PositionMode::Sequential).unwrap();
        assert!(
            cases.iter().any(|c| c.max_abs_diff > 1e-5),
            "sequential numbering must break the equivalence"
        );
    }

    #[test]
    fn gradients_match_finite_differences_end_to_end() {
        let outcomes = gradient_check(&LossComponent::ALL, 2).unwrap();
        assert_eq!(outcomes.len(), 4);
        for o in &outcomes {
            assert!(o.checks > 20, "{}: only {} checks", o.component, o.checks);
            assert!(
                o.max_rel_err < 1e-3,
                "{}: rel err {} at {}",
                o.component,
                o.max_rel_err,
                o.worst_param
            );
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let o = frozen_gradient_check().unwrap();
        assert!(o.checks > 10, "freezing should cover many tensors, saw {}", o.checks);
        assert_eq!(o.max_rel_err, 0.0, "frozen {} saw gradient", o.worst_param);
    }

    #[test]
    fn bench_reports_sane_timings() {
        let rows = bench_forward(&[1, 3], 2).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.single_pass > Duration::ZERO);
            assert!(r.k_pass > Duration::ZERO);
            assert!(r.one_prompt > Duration::ZERO);
        }
        assert_eq!(rows[0].k, 1);
    }
}
