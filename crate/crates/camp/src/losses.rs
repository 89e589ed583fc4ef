//! Training objectives: symmetric InfoNCE over the joint embeddings, a
//! diversity penalty on the per-prompt projection rows, and an
//! image-to-text loss whose denominator also ranges over negated-caption
//! embeddings. All three are built from tape ops, so one backward pass
//! through the returned total covers every term.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, TensorId};

/// Scalar results of one batch objective, plus the tape node of the total
/// for the backward pass.
#[derive(Debug, Clone)]
pub struct LossBreakdown<S> {
    pub total: TensorId,
    pub l_t2i: S,
    pub l_i2t: S,
    pub l_con: S,
    pub l_div: S,
    pub l_neg: Option<S>,
    pub l_total: S,
    /// Current temperature (reciprocal of the exponentiated logit scale).
    pub tau: S,
}

pub struct ContrastiveParts {
    pub l_t2i: TensorId,
    pub l_i2t: TensorId,
    pub l_con: TensorId,
}

/// How far the worst row of `id` is from unit Euclidean norm.
pub fn max_row_norm_deviation<S: Scalar>(tape: &Tape<S>, id: TensorId) -> f64 {
    let shape = tape.shape(id);
    let cols = *shape.last().expect("tensor rank >= 1");
    let mut worst = 0.0f64;
    for row in tape.data(id).chunks(cols) {
        let norm = row
            .iter()
            .map(|v| {
                let f = v.to_f64().unwrap_or(f64::NAN);
                f * f
            })
            .sum::<f64>()
            .sqrt();
        worst = worst.max((norm - 1.0).abs());
    }
    worst
}

fn warn_if_rows_not_unit<S: Scalar>(tape: &Tape<S>, id: TensorId, what: &str) {
    let dev = max_row_norm_deviation(tape, id);
    if dev > 1e-3 {
        eprintln!("warning: {what} rows are off unit norm by up to {dev:.3e}");
    }
}

fn check_inv_tau<S: Scalar>(tape: &Tape<S>, inv_tau: TensorId) -> Result<()> {
    let v = tape.value(inv_tau)?;
    if v <= S::zero() {
        return Err(Error::Contract(format!(
            "temperature must be positive, got 1/tau = {v}"
        )));
    }
    Ok(())
}

fn check_batch_pair<S: Scalar>(
    tape: &Tape<S>,
    a: TensorId,
    b: TensorId,
    op: &'static str,
) -> Result<(usize, usize)> {
    let sa = tape.shape(a);
    let sb = tape.shape(b);
    if sa != sb || sa.len() != 2 {
        return Err(Error::Shape {
            op,
            detail: format!("embedding batches must share a B×D shape, got {sa:?} and {sb:?}"),
        });
    }
    Ok((sa[0], sa[1]))
}

/// Mean over rows of `logsumexp(row) − row[diagonal]` for a scaled
/// similarity block whose matching pair sits on the diagonal of the
/// leading square.
fn mean_nll<S: Scalar>(tape: &mut Tape<S>, scaled: TensorId) -> Result<TensorId> {
    let rows = tape.shape(scaled)[0];
    let lse = tape.logsumexp_rows(scaled)?;
    let square = if tape.shape(scaled)[1] == rows {
        scaled
    } else {
        tape.slice_cols(scaled, 0, rows)?
    };
    let diag = tape.diag(square)?;
    let delta = tape.sub(lse, diag)?;
    tape.mean_rows(delta)
}

/// Symmetric InfoNCE over unit-norm text rows `P` and vision rows `Q`:
/// tempered similarities `P·Qᵀ / τ`, cross-entropy against the diagonal in
/// both directions, and their mean. `inv_tau` is a positive single-element
/// node (usually the exponentiated logit scale) so the temperature
/// receives gradients.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    text: TensorId,
    vision: TensorId,
    inv_tau: TensorId,
) -> Result<ContrastiveParts> {
    check_batch_pair(tape, text, vision, "contrastive_loss")?;
    check_inv_tau(tape, inv_tau)?;
    warn_if_rows_not_unit(tape, text, "contrastive_loss text");
    warn_if_rows_not_unit(tape, vision, "contrastive_loss vision");
    let qt = tape.transpose(vision)?;
    let logits = tape.matmul(text, qt)?;
    let scaled = tape.mul_scalar(logits, inv_tau)?;
    let l_t2i = mean_nll(tape, scaled)?;
    let flipped = tape.transpose(scaled)?;
    let l_i2t = mean_nll(tape, flipped)?;
    let sum = tape.add(l_t2i, l_i2t)?;
    let l_con = tape.scale(sum, 0.5)?;
    Ok(ContrastiveParts { l_t2i, l_i2t, l_con })
}

/// Mean ordered-pair cosine between a sample's prompt rows, averaged over
/// the batch. Each entry of `segment_rows` is one sample's `[K × width]`
/// raw projection rows; rows are unit-normalized here before the cosine.
/// A single prompt has no pairs, so K = 1 yields a constant 0.
pub fn diversity_loss<S: Scalar>(tape: &mut Tape<S>, segment_rows: &[TensorId]) -> Result<TensorId> {
    let first = *segment_rows.first().ok_or_else(|| {
        Error::Contract("diversity_loss needs at least one sample's segment rows".into())
    })?;
    let k = tape.shape(first)[0];
    for &rows in segment_rows {
        if tape.shape(rows) != tape.shape(first) {
            return Err(Error::Shape {
                op: "diversity_loss",
                detail: format!(
                    "per-sample segment blocks disagree: {:?} vs {:?}",
                    tape.shape(rows),
                    tape.shape(first)
                ),
            });
        }
    }
    if k == 1 {
        return tape.constant(vec![1], vec![S::zero()]);
    }
    let pair_scale = 1.0 / (k * (k - 1)) as f64;
    let mut per_sample = Vec::with_capacity(segment_rows.len());
    for &rows in segment_rows {
        let unit = tape.l2_normalize_rows(rows)?;
        let unit_t = tape.transpose(unit)?;
        let gram = tape.matmul(unit, unit_t)?; // [K×K] of cosines
        let all = tape.sum_all(gram)?;
        let self_sims = tape.diag(gram)?;
        let trace = tape.sum_all(self_sims)?;
        let off_diag = tape.sub(all, trace)?;
        per_sample.push(tape.scale(off_diag, pair_scale)?);
    }
    let stacked = tape.concat_rows(&per_sample)?; // [B×1]
    tape.mean_rows(stacked)
}

/// Image-to-text InfoNCE where each image's denominator ranges over both
/// the positive caption embeddings and the negated-caption embeddings, so
/// a negated caption must score below the true caption to drive the loss
/// down. Positives stay on the diagonal of the `[B × 2B]` block's leading
/// square.
pub fn negation_loss<S: Scalar>(
    tape: &mut Tape<S>,
    vision: TensorId,
    text: TensorId,
    negated: TensorId,
    inv_tau: TensorId,
) -> Result<TensorId> {
    check_batch_pair(tape, vision, text, "negation_loss")?;
    check_batch_pair(tape, text, negated, "negation_loss")?;
    check_inv_tau(tape, inv_tau)?;
    warn_if_rows_not_unit(tape, negated, "negation_loss negated text");
    let all_text = tape.concat_rows(&[text, negated])?; // [2B×D]
    let all_t = tape.transpose(all_text)?;
    let logits = tape.matmul(vision, all_t)?; // [B×2B]
    let scaled = tape.mul_scalar(logits, inv_tau)?;
    mean_nll(tape, scaled)
}

/// Left-associated weighting: `(l_con + alpha·l_div) + beta·l_neg`, the
/// beta term present only when a negation loss exists. Recomputing the
/// same expression from the parts reproduces the total bit for bit.
pub fn compose_total<S: Scalar>(
    tape: &mut Tape<S>,
    l_con: TensorId,
    l_div: TensorId,
    l_neg: Option<TensorId>,
    alpha: f64,
    beta: f64,
) -> Result<TensorId> {
    let weighted_div = tape.scale(l_div, alpha)?;
    let partial = tape.add(l_con, weighted_div)?;
    match l_neg {
        Some(neg) => {
            let weighted_neg = tape.scale(neg, beta)?;
            tape.add(partial, weighted_neg)
        }
        None => Ok(partial),
    }
}

/// Builds every term of the batch objective on the tape and returns the
/// scalar values plus the total's node. `logit_scale` is the learnable
/// parameter s with 1/τ = e^s, so τ gradients flow through `exp`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    text: TensorId,
    vision: TensorId,
    negated: Option<TensorId>,
    segment_rows: &[TensorId],
    logit_scale: TensorId,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown<S>> {
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Config(format!(
            "loss weights must be finite, got alpha={alpha} beta={beta}"
        )));
    }
    let b = tape.shape(text)[0];
    if segment_rows.len() != b {
        return Err(Error::Shape {
            op: "total_loss",
            detail: format!("{} segment blocks for a batch of {b}", segment_rows.len()),
        });
    }
    let inv_tau = tape.exp(logit_scale)?;
    let parts = contrastive_loss(tape, text, vision, inv_tau)?;
    let l_div = diversity_loss(tape, segment_rows)?;
    let l_neg = match negated {
        Some(n) => Some(negation_loss(tape, vision, text, n, inv_tau)?),
        None => None,
    };
    let total = compose_total(tape, parts.l_con, l_div, l_neg, alpha, beta)?;
    Ok(LossBreakdown {
        total,
        l_t2i: tape.value(parts.l_t2i)?,
        l_i2t: tape.value(parts.l_i2t)?,
        l_con: tape.value(parts.l_con)?,
        l_div: tape.value(l_div)?,
        l_neg: match l_neg {
            Some(n) => Some(tape.value(n)?),
            None => None,
        },
        l_total: tape.value(total)?,
        tau: S::one() / tape.value(inv_tau)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{finite_diff_grad, Tensor};

    /// Unit-normalizes each row of a raw matrix, plain f64.
    fn normalize_rows(rows: &mut [Vec<f64>]) {
        for row in rows {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    fn random_unit_rows(rng: &mut Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| rng.next_normal()).collect())
            .collect();
        normalize_rows(&mut rows);
        rows
    }

    fn as_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        let b = rows.len();
        let d = rows[0].len();
        Tensor::new(vec![b, d], rows.iter().flatten().copied().collect()).unwrap()
    }

    /// Independent oracle: InfoNCE via explicit double loops and direct
    /// exponentials (no log-sum-exp trick), f64.
    fn naive_infonce(p: &[Vec<f64>], q: &[Vec<f64>], tau: f64) -> (f64, f64) {
        let b = p.len();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let mut t2i = 0.0;
        let mut i2t = 0.0;
        for i in 0..b {
            let mut denom_t2i = 0.0;
            let mut denom_i2t = 0.0;
            for j in 0..b {
                denom_t2i += (dot(&p[i], &q[j]) / tau).exp();
                denom_i2t += (dot(&q[i], &p[j]) / tau).exp();
            }
            t2i += -((dot(&p[i], &q[i]) / tau).exp() / denom_t2i).ln();
            i2t += -((dot(&q[i], &p[i]) / tau).exp() / denom_i2t).ln();
        }
        (t2i / b as f64, i2t / b as f64)
    }

    /// Independent oracle for the negation objective, f64 double loops.
    fn naive_negation(q: &[Vec<f64>], p: &[Vec<f64>], n: &[Vec<f64>], tau: f64) -> f64 {
        let b = q.len();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let mut total = 0.0;
        for i in 0..b {
            let mut denom = 0.0;
            for j in 0..b {
                denom += (dot(&q[i], &p[j]) / tau).exp();
                denom += (dot(&q[i], &n[j]) / tau).exp();
            }
            total += -((dot(&q[i], &p[i]) / tau).exp() / denom).ln();
        }
        total / b as f64
    }

    fn loss_inputs(
        tape: &mut Tape<f64>,
        p: &[Vec<f64>],
        q: &[Vec<f64>],
        inv_tau: f64,
    ) -> (TensorId, TensorId, TensorId) {
        let pt = tape.leaf(as_tensor(p));
        let qt = tape.leaf(as_tensor(q));
        let it = tape.constant(vec![1], vec![inv_tau]).unwrap();
        (pt, qt, it)
    }

    #[test]
    fn uniform_similarities_give_ln_b() {
        // Every text row identical and every vision row identical makes all
        // B² similarities equal, so both directions are uniform softmaxes.
        let b = 4;
        let p = vec![vec![1.0, 0.0, 0.0]; b];
        let q = vec![vec![0.0, 1.0, 0.0]; b];
        let mut tape = Tape::new();
        let (pt, qt, it) = loss_inputs(&mut tape, &p, &q, 1.0 / 0.07);
        let parts = contrastive_loss(&mut tape, pt, qt, it).unwrap();
        let expect = (b as f64).ln(); // 1.386294…
        assert!((tape.value(parts.l_t2i).unwrap() - expect).abs() < 1e-6);
        assert!((tape.value(parts.l_i2t).unwrap() - expect).abs() < 1e-6);
        assert!((tape.value(parts.l_con).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn near_one_hot_pairs_drive_loss_to_zero() {
        let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let q = p.clone();
        let mut tape = Tape::new();
        let (pt, qt, it) = loss_inputs(&mut tape, &p, &q, 100.0); // tau = 0.01
        let parts = contrastive_loss(&mut tape, pt, qt, it).unwrap();
        assert!(tape.value(parts.l_con).unwrap() < 1e-6);
    }

    #[test]
    fn contrastive_matches_naive_double_loop() {
        let mut rng = Rng::new(11);
        let p = random_unit_rows(&mut rng, 5, 8);
        let q = random_unit_rows(&mut rng, 5, 8);
        let tau = 0.2;
        let (want_t2i, want_i2t) = naive_infonce(&p, &q, tau);
        let mut tape = Tape::new();
        let (pt, qt, it) = loss_inputs(&mut tape, &p, &q, 1.0 / tau);
        let parts = contrastive_loss(&mut tape, pt, qt, it).unwrap();
        assert!((tape.value(parts.l_t2i).unwrap() - want_t2i).abs() < 1e-9);
        assert!((tape.value(parts.l_i2t).unwrap() - want_i2t).abs() < 1e-9);
        let want_con = 0.5 * (want_t2i + want_i2t);
        assert!((tape.value(parts.l_con).unwrap() - want_con).abs() < 1e-9);
    }

    #[test]
    fn contrastive_decreases_as_diagonal_sharpens() {
        // p·q pairs at controllable similarity d, cross terms pinned to 0.
        let build = |d: f64| {
            let c = (1.0 - d * d).sqrt();
            let p = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
            let q = vec![vec![d, 0.0, c, 0.0], vec![0.0, d, 0.0, c]];
            let mut tape = Tape::new();
            let (pt, qt, it) = loss_inputs(&mut tape, &p, &q, 10.0);
            let parts = contrastive_loss(&mut tape, pt, qt, it).unwrap();
            tape.value(parts.l_con).unwrap()
        };
        let mut last = f64::INFINITY;
        for d in [0.0, 0.3, 0.6, 0.9] {
            let loss = build(d);
            assert!(loss < last, "loss must strictly fall as matches sharpen");
            last = loss;
        }
    }

    #[test]
    fn losses_are_batch_permutation_equivariant() {
        let mut rng = Rng::new(23);
        let b = 6;
        let p = random_unit_rows(&mut rng, b, 8);
        let q = random_unit_rows(&mut rng, b, 8);
        let n = random_unit_rows(&mut rng, b, 8);
        let run = |order: &[usize]| {
            let pp: Vec<_> = order.iter().map(|&i| p[i].clone()).collect();
            let qp: Vec<_> = order.iter().map(|&i| q[i].clone()).collect();
            let np: Vec<_> = order.iter().map(|&i| n[i].clone()).collect();
            let mut tape = Tape::new();
            let (pt, qt, it) = loss_inputs(&mut tape, &pp, &qp, 5.0);
            let nt = tape.leaf(as_tensor(&np));
            let parts = contrastive_loss(&mut tape, pt, qt, it).unwrap();
            let neg = negation_loss(&mut tape, qt, pt, nt, it).unwrap();
            (tape.value(parts.l_con).unwrap(), tape.value(neg).unwrap())
        };
        let id: Vec<usize> = (0..b).collect();
        let perm = vec![3, 0, 5, 1, 4, 2];
        let (con_a, neg_a) = run(&id);
        let (con_b, neg_b) = run(&perm);
        assert!((con_a - con_b).abs() < 1e-6);
        assert!((neg_a - neg_b).abs() < 1e-6);
    }

    #[test]
    fn diversity_analytic_cases() {
        let mut tape: Tape<f64> = Tape::new();
        // Identical pair → 1.
        let same = tape
            .constant(vec![2, 3], vec![1.0, 2.0, 2.0, 1.0, 2.0, 2.0])
            .unwrap();
        let l = diversity_loss(&mut tape, &[same]).unwrap();
        assert!((tape.value(l).unwrap() - 1.0).abs() < 1e-6);

        // Orthogonal pair → 0.
        let ortho = tape
            .constant(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 5.0, 0.0])
            .unwrap();
        let l = diversity_loss(&mut tape, &[ortho]).unwrap();
        assert!(tape.value(l).unwrap().abs() < 1e-6);

        // Emb_3 = −Emb_1, Emb_2 orthogonal to both: six ordered pairs with
        // cosines {0, −1, 0, 0, −1, 0} → −1/3.
        let mixed = tape
            .constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0])
            .unwrap();
        let l = diversity_loss(&mut tape, &[mixed]).unwrap();
        assert!((tape.value(l).unwrap() + 1.0 / 3.0).abs() < 1e-6);

        // Batch of two samples averages the per-sample scores: (1 + 0)/2.
        let l = diversity_loss(&mut tape, &[same, ortho]).unwrap();
        assert!((tape.value(l).unwrap() - 0.5).abs() < 1e-6);

        // One prompt → no pairs → 0, and no gradient path.
        let single = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let l = diversity_loss(&mut tape, &[single]).unwrap();
        assert_eq!(tape.value(l).unwrap(), 0.0);
    }

    #[test]
    fn diversity_matches_naive_pairwise_oracle() {
        let mut rng = Rng::new(31);
        let (b, k, d) = (4, 5, 6);
        let samples: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| {
                (0..k)
                    .map(|_| (0..d).map(|_| rng.next_normal()).collect())
                    .collect()
            })
            .collect();
        // Oracle: normalize, then average all ordered pair cosines.
        let mut want = 0.0;
        for sample in &samples {
            let mut rows = sample.clone();
            normalize_rows(&mut rows);
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        acc += rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            want += acc / (k * (k - 1)) as f64;
        }
        want /= b as f64;

        let mut tape = Tape::new();
        let ids: Vec<TensorId> = samples
            .iter()
            .map(|sample| {
                let flat: Vec<f64> = sample.iter().flatten().copied().collect();
                tape.constant(vec![k, d], flat).unwrap()
            })
            .collect();
        let l = diversity_loss(&mut tape, &ids).unwrap();
        assert!((tape.value(l).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn negation_with_mirrored_negatives_adds_ln_two() {
        // If every negated row scores exactly like its positive twin the
        // denominator doubles, shifting the image-to-text loss by ln 2.
        let mut rng = Rng::new(47);
        let p = random_unit_rows(&mut rng, 4, 8);
        let q = random_unit_rows(&mut rng, 4, 8);
        let mut tape = Tape::new();
        let (pt, qt, it) = loss_inputs(&mut tape, &p, &q, 8.0);
        let nt = tape.leaf(as_tensor(&p)); // negated == positive
        let parts = contrastive_loss(&mut tape, pt, qt, it).unwrap();
        let neg = negation_loss(&mut tape, qt, pt, nt, it).unwrap();
        let want = tape.value(parts.l_i2t).unwrap() + std::f64::consts::LN_2;
        assert!((tape.value(neg).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn negation_with_vanishing_negatives_matches_i2t() {
        // All rows equal, negated rows diametrically opposed: at tau = 0.01
        // the negative terms underflow and the loss collapses to l_i2t.
        let b = 3;
        let p = vec![vec![1.0, 0.0]; b];
        let q = vec![vec![1.0, 0.0]; b];
        let n = vec![vec![-1.0, 0.0]; b];
        let mut tape = Tape::new();
        let (pt, qt, it) = loss_inputs(&mut tape, &p, &q, 100.0);
        let nt = tape.leaf(as_tensor(&n));
        let parts = contrastive_loss(&mut tape, pt, qt, it).unwrap();
        let neg = negation_loss(&mut tape, qt, pt, nt, it).unwrap();
        let diff = tape.value(neg).unwrap() - tape.value(parts.l_i2t).unwrap();
        assert!(diff.abs() < 1e-6, "negatives at exp(-200) should vanish, diff {diff}");
    }

    #[test]
    fn negation_matches_naive_double_loop() {
        let mut rng = Rng::new(59);
        let p = random_unit_rows(&mut rng, 4, 8);
        let q = random_unit_rows(&mut rng, 4, 8);
        let n = random_unit_rows(&mut rng, 4, 8);
        let tau = 0.25;
        let want = naive_negation(&q, &p, &n, tau);
        let mut tape = Tape::new();
        let (pt, qt, it) = loss_inputs(&mut tape, &p, &q, 1.0 / tau);
        let nt = tape.leaf(as_tensor(&n));
        let got = negation_loss(&mut tape, qt, pt, nt, it).unwrap();
        assert!((tape.value(got).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn negation_never_beats_plain_i2t() {
        // Finite negative similarities only add mass to the denominator.
        let mut rng = Rng::new(61);
        for trial in 0..20 {
            let b = 2 + (trial % 4);
            let p = random_unit_rows(&mut rng, b, 6);
            let q = random_unit_rows(&mut rng, b, 6);
            let n = random_unit_rows(&mut rng, b, 6);
            let mut tape = Tape::new();
            let (pt, qt, it) = loss_inputs(&mut tape, &p, &q, 12.0);
            let nt = tape.leaf(as_tensor(&n));
            let parts = contrastive_loss(&mut tape, pt, qt, it).unwrap();
            let neg = negation_loss(&mut tape, qt, pt, nt, it).unwrap();
            assert!(tape.value(neg).unwrap() >= tape.value(parts.l_i2t).unwrap());
        }
    }

    #[test]
    fn composition_is_exact_and_weighting_works() {
        let mut tape: Tape<f64> = Tape::new();
        let l_con = tape.constant(vec![1], vec![2.0]).unwrap();
        let l_div = tape.constant(vec![1], vec![0.5]).unwrap();
        let total = compose_total(&mut tape, l_con, l_div, None, 0.1, 0.0).unwrap();
        assert!((tape.value(total).unwrap() - 2.05).abs() < 1e-12);

        // alpha = beta = 0 reproduces l_con exactly, bit for bit.
        let l_neg = tape.constant(vec![1], vec![3.0]).unwrap();
        let total = compose_total(&mut tape, l_con, l_div, Some(l_neg), 0.0, 0.0).unwrap();
        assert_eq!(tape.value(total).unwrap(), tape.value(l_con).unwrap());

        // The breakdown total is the same left-associated float expression.
        let total = compose_total(&mut tape, l_con, l_div, Some(l_neg), 0.1, 0.7).unwrap();
        let want = (2.0 + 0.1 * 0.5) + 0.7 * 3.0;
        assert_eq!(tape.value(total).unwrap(), want);
    }

    #[test]
    fn total_loss_reports_consistent_breakdown() {
        let mut rng = Rng::new(71);
        let b = 4;
        let p = random_unit_rows(&mut rng, b, 8);
        let q = random_unit_rows(&mut rng, b, 8);
        let n = random_unit_rows(&mut rng, b, 8);
        let mut tape = Tape::new();
        let pt = tape.leaf(as_tensor(&p));
        let qt = tape.leaf(as_tensor(&q));
        let nt = tape.leaf(as_tensor(&n));
        let scale = tape.constant(vec![1], vec![(1.0f64 / 0.07).ln()]).unwrap();
        let segments: Vec<TensorId> = (0..b)
            .map(|_| {
                let rows = random_unit_rows(&mut rng, 3, 4);
                tape.leaf(as_tensor(&rows))
            })
            .collect();
        let bd = total_loss(&mut tape, pt, qt, Some(nt), &segments, scale, 0.1, 0.2).unwrap();
        assert_eq!(bd.l_con, 0.5 * (bd.l_t2i + bd.l_i2t));
        let recomputed = (bd.l_con + 0.1 * bd.l_div) + 0.2 * bd.l_neg.unwrap();
        assert_eq!(bd.l_total, recomputed, "breakdown must recompose exactly");
        assert!((bd.tau - 0.07).abs() < 1e-9);

        // Without negation the beta term disappears.
        let bd = total_loss(&mut tape, pt, qt, None, &segments, scale, 0.1, 0.9).unwrap();
        assert!(bd.l_neg.is_none());
        assert_eq!(bd.l_total, bd.l_con + 0.1 * bd.l_div);
    }

    #[test]
    fn contract_violations_are_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let q_bad = tape.constant(vec![3, 3], vec![0.0; 9]).unwrap();
        let bad_tau = tape.constant(vec![1], vec![-2.0]).unwrap();
        let ok_tau = tape.constant(vec![1], vec![5.0]).unwrap();
        assert!(matches!(
            contrastive_loss(&mut tape, p, q_bad, ok_tau),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            contrastive_loss(&mut tape, p, p, bad_tau),
            Err(Error::Contract(_))
        ));
        assert!(diversity_loss(&mut tape, &[]).is_err());
        assert!(total_loss(&mut tape, p, p, None, &[p], ok_tau, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn norm_deviation_is_measured() {
        let mut tape: Tape<f64> = Tape::new();
        let ok = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(max_row_norm_deviation(&tape, ok) < 1e-12);
        let off = tape.constant(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((max_row_norm_deviation(&tape, off) - 1.0).abs() < 1e-12);
    }

    /// End-to-end gradient check of the full objective in f64: leaves are
    /// raw (unnormalized) embedding batches, per-sample segment rows and
    /// the logit scale; the graph normalizes rows on-tape so gradients flow
    /// through the normalization exactly as in training.
    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(83);
        let (b, d, k, pd) = (3, 6, 2, 4);
        let raw_p = as_tensor(&random_unit_rows(&mut rng, b, d));
        let raw_q = as_tensor(&random_unit_rows(&mut rng, b, d));
        let raw_n = as_tensor(&random_unit_rows(&mut rng, b, d));
        let seg: Vec<Tensor<f64>> = (0..b)
            .map(|_| as_tensor(&random_unit_rows(&mut rng, k, pd)))
            .collect();
        let scale = Tensor::new(vec![1], vec![(1.0f64 / 0.3).ln()]).unwrap();

        // leaves order: p, q, n, segments…, logit_scale
        let mut leaves: Vec<Tensor<f64>> = vec![raw_p, raw_q, raw_n];
        leaves.extend(seg);
        leaves.push(scale);

        let run = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, TensorId, Vec<TensorId>)> {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = tensors
                .iter()
                .map(|t| tape.leaf(t.clone().with_grad()))
                .collect();
            let p = tape.l2_normalize_rows(ids[0])?;
            let q = tape.l2_normalize_rows(ids[1])?;
            let n = tape.l2_normalize_rows(ids[2])?;
            let segs = &ids[3..6];
            let bd = total_loss(&mut tape, p, q, Some(n), segs, ids[6], 0.1, 0.1)?;
            Ok((tape, bd.total, ids))
        };

        let (mut tape, total, ids) = run(&leaves).unwrap();
        tape.backward(total).unwrap();

        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = tape.grad(ids[li]).expect("every leaf gets a gradient").to_vec();
            let numeric = finite_diff_grad(
                |probe| {
                    let mut all = leaves.clone();
                    all[li] = probe.clone();
                    let (t, total, _) = run(&all)?;
                    t.value(total)
                },
                leaf,
                1e-5,
            )
            .unwrap();
            for (i, (a, n)) in analytic.iter().zip(numeric.data.iter()).enumerate() {
                let denom = a.abs().max(n.abs()).max(1e-8);
                let rel = (a - n).abs() / denom;
                assert!(
                    rel < 1e-6,
                    "leaf {li} entry {i}: analytic {a} vs numeric {n} (rel {rel})"
                );
            }
        }
    }
}
