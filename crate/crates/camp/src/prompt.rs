//! Vocabulary, prompt templates and segment-aware attention masks.
//!
//! A text input is laid out as one token sequence: a shared prefix (the
//! caption, tokenized) followed by K prompt segments, each ending in a
//! closing-quote token whose hidden state is read out as that prompt's
//! embedding. The attention mask keeps segments mutually invisible:
//!
//! ```text
//! attend(q, k) = k ≤ q  AND  (segment(k) == 0  OR  segment(k) == segment(q))
//! ```
//!
//! where segment 0 is the prefix. Together with per-segment position ids
//! that restart right after the prefix, every segment sees exactly the
//! sequence it would see if it were encoded alone behind the caption —
//! which is what makes the batched single-pass encoding equivalent to K
//! separate passes.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, MASKED_BIAS};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// Token id reserved for out-of-vocabulary words.
pub const UNK_ID: usize = 0;

/// Words required by the prompt templates, present in every vocabulary
/// directly after [UNK].
const TEMPLATE_WORDS: [&str; 11] =
    [".", "\"", ":", "The", "of", "this", "image", "means", "does", "NOT", "mean"];

/// Fixed word-level vocabulary. Layout: `[UNK]`, the template words, the K
/// adaptive prompt tokens `[APT-1]..[APT-K]`, then corpus words in the order
/// first seen. Construction order is deterministic so two runs over the
/// same corpus produce identical id assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    n_prompts: usize,
}

impl Vocabulary {
    /// Builds a vocabulary with `n_prompts` prompt tokens over the given
    /// corpus words (duplicates are fine and keep first-seen order).
    pub fn build<'a>(n_prompts: usize, corpus_words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        if n_prompts == 0 {
            return Err(Error::Config("vocabulary needs at least one prompt token".into()));
        }
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
            n_prompts,
        };
        vocab.insert("[UNK]")?;
        for w in TEMPLATE_WORDS {
            vocab.insert(w)?;
        }
        for i in 1..=n_prompts {
            vocab.insert(&format!("[APT-{i}]"))?;
        }
        for w in corpus_words {
            vocab.insert(w)?;
        }
        Ok(vocab)
    }

    fn insert(&mut self, word: &str) -> Result<usize> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!(
                "vocabulary word {word:?} is empty or contains whitespace"
            )));
        }
        if let Some(&id) = self.index.get(word) {
            return Ok(id);
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    /// Id for a word; unknown words map to [`UNK_ID`].
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Id that must exist (template internals); error instead of [UNK].
    fn required_id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Contract(format!("word {word:?} missing from vocabulary")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Index { what: "token id", index: id, limit: self.words.len() })
    }

    /// Id of the i-th adaptive prompt token, 1-based.
    pub fn prompt_token(&self, i: usize) -> Result<usize> {
        if i == 0 || i > self.n_prompts {
            return Err(Error::Index { what: "prompt index", index: i, limit: self.n_prompts });
        }
        // Prompt tokens sit directly after [UNK] + template words.
        Ok(1 + TEMPLATE_WORDS.len() + (i - 1))
    }

    /// Token ids of the prompt rows, e.g. for marking them trainable.
    pub fn prompt_token_range(&self) -> std::ops::Range<usize> {
        let start = 1 + TEMPLATE_WORDS.len();
        start..start + self.n_prompts
    }

    /// Whitespace tokenization; unknown words become [UNK].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", self.word(id)?);
        }
        Ok(out)
    }

    /// One word per line. Line order is the id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for w in &self.words {
            body.push_str(w);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    /// Inverse of [`Vocabulary::save`]. The prompt-token count is recovered
    /// from the `[APT-i]` rows, which must be contiguous and start at the
    /// expected offset.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Self::from_word_list(body.lines(), || body.as_str())
    }

    /// Rebuilds a vocabulary from an in-order word list (used by both the
    /// file loader and checkpoint decoding).
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        Self::from_word_list(words.into_iter(), || "")
    }

    fn from_word_list<'a>(
        words: impl Iterator<Item = &'a str>,
        body: impl Fn() -> &'a str,
    ) -> Result<Self> {
        let mut vocab =
            Vocabulary { words: Vec::new(), index: HashMap::new(), n_prompts: 0 };
        let mut offset = 0u64;
        for word in words {
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(Error::Format {
                    offset,
                    message: format!("invalid vocabulary word {word:?}"),
                });
            }
            if vocab.index.contains_key(word) {
                return Err(Error::Format {
                    offset,
                    message: format!("duplicate vocabulary word {word:?}"),
                });
            }
            let id = vocab.words.len();
            vocab.words.push(word.to_string());
            vocab.index.insert(word.to_string(), id);
            offset += word.len() as u64 + 1;
        }
        let _ = body;
        // Validate the fixed layout and recover n_prompts.
        if vocab.words.first().map(String::as_str) != Some("[UNK]") {
            return Err(Error::Format { offset: 0, message: "first word must be [UNK]".into() });
        }
        for (i, w) in TEMPLATE_WORDS.iter().enumerate() {
            if vocab.words.get(1 + i).map(String::as_str) != Some(*w) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("word {} must be {w:?}", 1 + i),
                });
            }
        }
        let start = 1 + TEMPLATE_WORDS.len();
        let mut n_prompts = 0;
        while vocab.words.get(start + n_prompts).map(String::as_str)
            == Some(format!("[APT-{}]", n_prompts + 1).as_str())
        {
            n_prompts += 1;
        }
        if n_prompts == 0 {
            return Err(Error::Format {
                offset: 0,
                message: "no [APT-i] prompt tokens found".into(),
            });
        }
        vocab.n_prompts = n_prompts;
        Ok(vocab)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Which wording surrounds each prompt token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateMode {
    /// `<caption> . The [APT-i] of this image means : "` — the descriptive
    /// wording; its negated form swaps `means` for `does NOT mean`.
    Adaptive,
    /// `<caption> . [APT-i] : "` — ablation wording with no natural-language
    /// scaffold around the prompt token.
    Minimal,
}

impl TemplateMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(TemplateMode::Adaptive),
            "minimal" => Ok(TemplateMode::Minimal),
            other => Err(Error::Config(format!(
                "unknown template mode {other:?} (expected adaptive|minimal)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateMode::Adaptive => "adaptive",
            TemplateMode::Minimal => "minimal",
        }
    }
}

/// How position ids are assigned inside prompt segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    /// Every segment restarts at `prefix_len`, so a segment sees the same
    /// positions it would when encoded alone. This is the correct mode.
    SegmentLocal,
    /// Plain 0..S-1 numbering across the whole sequence. Kept as a
    /// deliberately wrong control: it breaks one-pass/multi-pass
    /// equivalence and lets tests prove the equivalence isn't vacuous.
    Sequential,
}

/// A tokenized caption plus prompt segments, ready for the text encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedSequence {
    pub ids: Vec<usize>,
    /// Segment label per token: 0 = shared prefix, then 1..=n_segments.
    pub segment: Vec<usize>,
    /// Position-table index per token.
    pub positions: Vec<usize>,
    /// For each segment (1-based order), the index of its final token,
    /// whose hidden state is pooled as the segment embedding.
    pub pool: Vec<usize>,
    /// Segments 1..=n_positive are the prompt embeddings; any segments
    /// after that are their negated counterparts.
    pub n_positive: usize,
    pub prefix_len: usize,
}

impl SegmentedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_segments(&self) -> usize {
        self.pool.len()
    }

    pub fn has_negation(&self) -> bool {
        self.pool.len() == 2 * self.n_positive
    }

    /// Structural sanity: parallel arrays agree, segment labels are
    /// monotone 0..=n, every segment is non-empty and `pool[s]` is the last
    /// token of segment s+1.
    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if n == 0 {
            return Err(Error::Contract("empty sequence".into()));
        }
        if self.segment.len() != n || self.positions.len() != n {
            return Err(Error::Contract(format!(
                "parallel arrays disagree: {n} ids, {} segment labels, {} positions",
                self.segment.len(),
                self.positions.len()
            )));
        }
        if self.prefix_len == 0 || self.prefix_len > n {
            return Err(Error::Contract(format!("prefix length {} invalid", self.prefix_len)));
        }
        let n_segments = self.pool.len();
        if self.n_positive == 0 || (n_segments != self.n_positive && n_segments != 2 * self.n_positive)
        {
            return Err(Error::Contract(format!(
                "{} pooled segments for {} prompts",
                n_segments, self.n_positive
            )));
        }
        let mut current = 0usize;
        for (i, &seg) in self.segment.iter().enumerate() {
            let prefix_part = i < self.prefix_len;
            if prefix_part != (seg == 0) {
                return Err(Error::Contract(format!(
                    "token {i}: segment {seg} conflicts with prefix length {}",
                    self.prefix_len
                )));
            }
            if seg != current && seg != current + 1 {
                return Err(Error::Contract(format!(
                    "segment labels must be contiguous and increasing, got {seg} after {current} at {i}"
                )));
            }
            current = seg;
        }
        if current != n_segments {
            return Err(Error::Contract(format!(
                "expected {n_segments} segments, sequence ends in segment {current}"
            )));
        }
        for (s, &p) in self.pool.iter().enumerate() {
            if p >= n || self.segment[p] != s + 1 || (p + 1 < n && self.segment[p + 1] == s + 1) {
                return Err(Error::Contract(format!(
                    "pool index {p} is not the final token of segment {}",
                    s + 1
                )));
            }
        }
        Ok(())
    }
}

/// Prompt layout configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptConfig {
    pub n_prompts: usize,
    pub template: TemplateMode,
    pub include_negation: bool,
    pub position_mode: PositionMode,
}

impl PromptConfig {
    pub fn new(n_prompts: usize, template: TemplateMode, include_negation: bool) -> Self {
        PromptConfig {
            n_prompts,
            template,
            include_negation,
            position_mode: PositionMode::SegmentLocal,
        }
    }

    /// Token layout of the i-th positive segment (without the prompt id
    /// resolved), for K prompts under this template.
    fn segment_words(&self, negated: bool) -> &'static [&'static str] {
        // "{apt}" marks the slot for the prompt token.
        match (self.template, negated) {
            (TemplateMode::Adaptive, false) => {
                &["{apt}", "of", "this", "image", "means", ":", "\""]
            }
            (TemplateMode::Adaptive, true) => {
                &["{apt}", "of", "this", "image", "does", "NOT", "mean", ":", "\""]
            }
            (TemplateMode::Minimal, false) => &["{apt}", ":", "\""],
            (TemplateMode::Minimal, true) => &["{apt}", "does", "NOT", "mean", ":", "\""],
        }
    }

    /// Assembles the full token sequence for one caption: prefix, K prompt
    /// segments, and, when negation is on, K negated segments after them.
    pub fn build_sequence(&self, vocab: &Vocabulary, caption: &str) -> Result<SegmentedSequence> {
        if self.n_prompts == 0 {
            return Err(Error::Config("n_prompts must be at least 1".into()));
        }
        if self.n_prompts > vocab.n_prompts() {
            return Err(Error::Config(format!(
                "{} prompts requested but vocabulary holds {}",
                self.n_prompts,
                vocab.n_prompts()
            )));
        }
        let mut ids = vocab.tokenize(caption);
        if ids.is_empty() {
            return Err(Error::Contract(format!("caption {caption:?} tokenizes to nothing")));
        }
        ids.push(vocab.required_id(".")?);
        if self.template == TemplateMode::Adaptive {
            // "The" reads ahead of every [APT-i]; it is identical for all
            // segments, so it lives in the shared prefix.
            ids.push(vocab.required_id("The")?);
        }
        let prefix_len = ids.len();
        let mut segment = vec![0usize; prefix_len];
        let mut pool = Vec::new();

        let push_segment = |ids: &mut Vec<usize>,
                            segment: &mut Vec<usize>,
                            pool: &mut Vec<usize>,
                            seg_no: usize,
                            prompt_i: usize,
                            negated: bool|
         -> Result<()> {
            for &w in self.segment_words(negated) {
                let id = if w == "{apt}" {
                    vocab.prompt_token(prompt_i)?
                } else {
                    vocab.required_id(w)?
                };
                ids.push(id);
                segment.push(seg_no);
            }
            pool.push(ids.len() - 1);
            Ok(())
        };

        for i in 1..=self.n_prompts {
            push_segment(&mut ids, &mut segment, &mut pool, i, i, false)?;
        }
        if self.include_negation {
            for i in 1..=self.n_prompts {
                push_segment(&mut ids, &mut segment, &mut pool, self.n_prompts + i, i, true)?;
            }
        }

        let positions = assign_positions(&segment, prefix_len, self.position_mode);
        let seq = SegmentedSequence {
            ids,
            segment,
            positions,
            pool,
            n_positive: self.n_prompts,
            prefix_len,
        };
        seq.validate()?;
        Ok(seq)
    }
}

/// Position ids for a segment layout. In [`PositionMode::SegmentLocal`]
/// every segment restarts at `prefix_len`; in sequential mode ids just
/// count 0..S-1.
pub fn assign_positions(segment: &[usize], prefix_len: usize, mode: PositionMode) -> Vec<usize> {
    match mode {
        PositionMode::Sequential => (0..segment.len()).collect(),
        PositionMode::SegmentLocal => {
            let mut out = Vec::with_capacity(segment.len());
            let mut current_seg = 0usize;
            let mut next = 0usize;
            for &seg in segment {
                if seg != current_seg {
                    current_seg = seg;
                    next = prefix_len;
                }
                out.push(next);
                next += 1;
            }
            out
        }
    }
}

/// Boolean attention mask; `true` means "query row q may attend key k".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Segment-aware causal mask: `k ≤ q AND (segment(k) == 0 OR
    /// segment(k) == segment(q))`.
    pub fn for_segments(segment: &[usize]) -> Self {
        let n = segment.len();
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = segment[k] == 0 || segment[k] == segment[q];
            }
        }
        AttentionMask { len: n, allowed }
    }

    /// Plain causal mask (single-segment sequences).
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allowed[q * len + k] = true;
            }
        }
        AttentionMask { len, allowed }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len + k]
    }

    /// Additive pre-softmax bias: 0 where attendable, [`MASKED_BIAS`]
    /// elsewhere.
    pub fn bias_data<S: Scalar>(&self) -> Vec<S> {
        self.allowed
            .iter()
            .map(|&ok| if ok { S::zero() } else { crate::tensor::s(MASKED_BIAS) })
            .collect()
    }
}
