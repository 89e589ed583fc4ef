//! Retrieval evaluation: encode caption–image pairs into the joint space
//! and measure recall@k in both directions. Encoding may fan out over
//! worker threads (capped by the `CAMP_THREADS` env var), but results land
//! in per-sample slots, so thread count never changes any reported number.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompt::PromptConfig;
use crate::tensor::{Scalar, Tape};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    TextToImage,
    ImageToText,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::TextToImage => "text_to_image",
            Direction::ImageToText => "image_to_text",
        }
    }
}

/// Recall at 1/5/10 for one retrieval direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub n_queries: usize,
}

impl fmt::Display for RetrievalReport {
    /// One tab-separated row: direction, R@1, R@5, R@10, query count.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.direction.name(),
            self.r1,
            self.r5,
            self.r10,
            self.n_queries
        )
    }
}

/// Fraction of queries whose true gallery item lands in the top k by dot
/// product. Ties rank the lower gallery index first, so results are
/// deterministic under duplicated embeddings.
pub fn recall_at_k<S: Scalar>(
    queries: &[Vec<S>],
    gallery: &[Vec<S>],
    truth: &[usize],
    k: usize,
) -> Result<f64> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Contract("recall_at_k needs non-empty queries and gallery".into()));
    }
    if k == 0 || k > gallery.len() {
        return Err(Error::Index {
            what: "recall cutoff",
            index: k,
            limit: gallery.len(),
        });
    }
    if truth.len() != queries.len() {
        return Err(Error::Contract(format!(
            "{} truth labels for {} queries",
            truth.len(),
            queries.len()
        )));
    }
    let dim = queries[0].len();
    for row in queries.iter().chain(gallery) {
        if row.len() != dim {
            return Err(Error::Shape {
                op: "recall_at_k",
                detail: format!("embedding widths disagree: {} vs {dim}", row.len()),
            });
        }
    }
    let mut hits = 0usize;
    for (qi, q) in queries.iter().enumerate() {
        let t = truth[qi];
        if t >= gallery.len() {
            return Err(Error::Index {
                what: "truth gallery index",
                index: t,
                limit: gallery.len(),
            });
        }
        let score = |g: &[S]| -> f64 {
            q.iter()
                .zip(g)
                .map(|(a, b)| a.to_f64().unwrap_or(f64::NAN) * b.to_f64().unwrap_or(f64::NAN))
                .sum()
        };
        let truth_score = score(&gallery[t]);
        let mut rank = 1usize;
        for (gi, g) in gallery.iter().enumerate() {
            if gi == t {
                continue;
            }
            let s = score(g);
            if s > truth_score || (s == truth_score && gi < t) {
                rank += 1;
            }
        }
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Builds the R@1/5/10 report for aligned query and gallery sets (truth is
/// the identity pairing). Cutoffs larger than the gallery clamp to its
/// size: ranking within the top-10 of an 8-item gallery is certain, so the
/// clamped value (1.0 for a perfect retriever, R@G in general) is the
/// honest reading rather than an error.
pub fn retrieval_report<S: Scalar>(
    queries: &[Vec<S>],
    gallery: &[Vec<S>],
    direction: Direction,
) -> Result<RetrievalReport> {
    let truth: Vec<usize> = (0..queries.len()).collect();
    let at = |k: usize| recall_at_k(queries, gallery, &truth, k.min(gallery.len()));
    Ok(RetrievalReport {
        direction,
        r1: at(1)?,
        r5: at(5)?,
        r10: at(10)?,
        n_queries: queries.len(),
    })
}

/// Joint-space embeddings for a sample set, aligned by index: `text[i]`
/// and `vision[i]` encode the same sample. `segment_rows[i]` holds that
/// sample's K raw projected prompt rows, flattened row-major.
#[derive(Debug, Clone)]
pub struct EncodedSplit<S> {
    pub text: Vec<Vec<S>>,
    pub vision: Vec<Vec<S>>,
    pub segment_rows: Vec<Vec<S>>,
    pub n_prompts: usize,
    pub proj_width: usize,
}

impl<S: Scalar> EncodedSplit<S> {
    /// Batch-mean ordered-pair cosine between each sample's prompt rows —
    /// the quantity the diversity term pushes down. 0 when K = 1.
    pub fn mean_segment_cosine(&self) -> f64 {
        let k = self.n_prompts;
        if k < 2 {
            return 0.0;
        }
        let w = self.proj_width;
        let mut total = 0.0;
        for rows in &self.segment_rows {
            let unit: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    let row: Vec<f64> =
                        rows[i * w..(i + 1) * w].iter().map(|v| v.to_f64().unwrap()).collect();
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    row.into_iter().map(|v| v / norm).collect()
                })
                .collect();
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        acc += unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            total += acc / (k * (k - 1)) as f64;
        }
        total / self.segment_rows.len().max(1) as f64
    }
}

/// Worker-thread cap: `CAMP_THREADS` when set and sane, otherwise the
/// machine's available parallelism.
pub fn worker_threads() -> usize {
    threads_from(std::env::var("CAMP_THREADS").ok().as_deref())
}

fn threads_from(value: Option<&str>) -> usize {
    if let Some(v) = value {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Encodes every sample's caption and image into the joint space,
/// splitting the samples over up to `threads` workers. Each sample is
/// encoded on its own tape, so outputs are identical for any thread count.
pub fn encode_pairs<S: Scalar>(
    model: &Model<S>,
    prompts: &PromptConfig,
    samples: &[Sample],
    threads: usize,
) -> Result<EncodedSplit<S>> {
    if samples.is_empty() {
        return Err(Error::Contract("encode_pairs needs at least one sample".into()));
    }
    let n = samples.len();
    let workers = threads.clamp(1, n);
    type Triple<S> = (Vec<S>, Vec<S>, Vec<S>);
    let encode_range = |range: std::ops::Range<usize>| -> Result<Vec<Triple<S>>> {
        range.map(|i| encode_one(model, prompts, &samples[i])).collect()
    };

    let mut encoded: Vec<Triple<S>> = Vec::with_capacity(n);
    if workers == 1 {
        encoded = encode_range(0..n)?;
    } else {
        let chunk = n.div_ceil(workers);
        let mut chunks: Vec<Result<Vec<Triple<S>>>> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let start = w * chunk;
                let end = (start + chunk).min(n);
                if start >= end {
                    break;
                }
                handles.push(scope.spawn(move || encode_range(start..end)));
            }
            for h in handles {
                chunks.push(h.join().expect("encode worker panicked"));
            }
        });
        for c in chunks {
            encoded.extend(c?);
        }
    }

    let mut text = Vec::with_capacity(n);
    let mut vision = Vec::with_capacity(n);
    let mut segment_rows = Vec::with_capacity(n);
    for (t, v, s) in encoded {
        text.push(t);
        vision.push(v);
        segment_rows.push(s);
    }
    Ok(EncodedSplit {
        text,
        vision,
        segment_rows,
        n_prompts: model.text.dims.n_prompts,
        proj_width: model.text.dims.proj_dim(),
    })
}

fn encode_one<S: Scalar>(
    model: &Model<S>,
    prompts: &PromptConfig,
    sample: &Sample,
) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let mut tape = Tape::new();
    let mt = model.text.mount(&mut tape);
    let mv = model.vision.mount(&mut tape);
    let seq = prompts.build_sequence(&model.vocab, &sample.caption)?;
    let pooled = model.text.forward_singlepass(&mut tape, &mt, &seq)?;
    let projected = model.text.project_and_combine(&mut tape, &mt, pooled)?;
    let image = model.vision.encode_image(&mut tape, &mv, &sample.image)?;
    Ok((
        tape.data(projected.joint).to_vec(),
        tape.data(image.joint).to_vec(),
        tape.data(projected.segment_rows).to_vec(),
    ))
}
