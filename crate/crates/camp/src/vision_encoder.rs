//! Patch-based vision transformer with multi-head attention pooling.
//!
//! Images are cut into non-overlapping patches, linearly projected, tagged
//! with learned patch-position embeddings and run through unmasked
//! pre-norm transformer blocks. A single learnable query then attends over
//! all patch tokens once per pooling head; the per-head outputs are
//! concatenated without an output projection, so each pooling head owns a
//! contiguous channel block of the joint embedding. Because the text side
//! concatenates its prompt segments the same way, pooling heads align with
//! prompt segments, and the per-head attention weights double as
//! inspectable "which patches does prompt i look at" maps.
//!
//! Videos reuse the image path per frame: each frame runs through the
//! transformer independently, a learned per-frame temporal encoding is
//! added to its output tokens, and the frames' tokens are then flattened
//! into one T·N sequence for the shared attention pooling. Adding the
//! temporal encoding after the per-frame trunk matters: pre-norm blocks
//! erase constant per-token channel shifts (every consumer reads tokens
//! through a mean-subtracting layer norm), so a scalar-per-frame encoding
//! added before the blocks would be mathematically invisible. Added after
//! the final norm it shifts the pooling keys and values directly. With the
//! temporal table at its zero init, a one-frame video equals the image
//! path exactly.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::{
    block_forward, block_forward_batch, gaussian, MountedBlock, Param, TransformerBlock, INIT_STD,
    LN_EPS,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisionDims {
    pub image_size: usize,
    pub patch_size: usize,
    /// Transformer width (per-token channel count).
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Joint embedding width D shared with the text encoder.
    pub joint_dim: usize,
    /// Attention-pooling heads; each owns joint_dim / pool_heads channels.
    pub pool_heads: usize,
    /// Capacity of the temporal encoding table.
    pub max_frames: usize,
    /// Temporal encodings as per-channel rows instead of single scalars.
    pub temporal_per_channel: bool,
}

impl VisionDims {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn pool_head_dim(&self) -> usize {
        self.joint_dim / self.pool_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not tile image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        if self.pool_heads == 0 || self.joint_dim % self.pool_heads != 0 {
            return Err(Error::Config(format!(
                "{} pooling heads do not divide joint dim {}",
                self.pool_heads, self.joint_dim
            )));
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.max_frames == 0 {
            return Err(Error::Config("vision encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VisionEncoderParams<S> {
    pub dims: VisionDims,
    pub patch_weight: Param<S>,
    pub patch_bias: Param<S>,
    pub position_table: Param<S>,
    pub blocks: Vec<TransformerBlock<S>>,
    pub final_gain: Param<S>,
    pub final_bias: Param<S>,
    pub pool_query: Param<S>,
    pub pool_wq: Param<S>,
    pub pool_wk: Param<S>,
    pub pool_wv: Param<S>,
    pub temporal: Param<S>,
}

pub struct MountedVision {
    pub patch_weight: TensorId,
    pub patch_bias: TensorId,
    pub positions: TensorId,
    pub blocks: Vec<MountedBlock>,
    pub final_gain: TensorId,
    pub final_bias: TensorId,
    pub pool_query: TensorId,
    pub pool_wq: TensorId,
    pub pool_wk: TensorId,
    pub pool_wv: TensorId,
    pub temporal: TensorId,
}

impl MountedVision {
    /// Handles in [`VisionEncoderParams::params`] order.
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.patch_weight, self.patch_bias, self.positions];
        for b in &self.blocks {
            out.extend(b.ids());
        }
        out.extend([
            self.final_gain,
            self.final_bias,
            self.pool_query,
            self.pool_wq,
            self.pool_wk,
            self.pool_wv,
            self.temporal,
        ]);
        out
    }
}

/// Output of one image/video encoding.
pub struct VisionEmbedding {
    /// `[1×D]`, unit norm.
    pub joint: TensorId,
    /// `[pool_heads × T·N]` softmax attention rows (each sums to 1).
    pub pool_weights: TensorId,
}

impl<S: Scalar> VisionEncoderParams<S> {
    pub fn new(dims: VisionDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let w = dims.width;
        let blocks = (0..dims.layers)
            .map(|i| TransformerBlock::new(&format!("vision.block{i}"), w, dims.mlp_hidden, rng))
            .collect();
        let temporal_shape = if dims.temporal_per_channel {
            vec![dims.max_frames, w]
        } else {
            vec![dims.max_frames, 1]
        };
        Ok(VisionEncoderParams {
            patch_weight: Param::new(
                "vision.patch.weight",
                gaussian(rng, vec![dims.patch_features(), w], INIT_STD),
            ),
            patch_bias: Param::new("vision.patch.bias", Tensor::zeros(vec![w]).expect("static")),
            position_table: Param::new(
                "vision.positions",
                gaussian(rng, vec![dims.n_patches(), w], INIT_STD),
            ),
            blocks,
            final_gain: Param::new(
                "vision.final.gain",
                Tensor::new(vec![w], vec![S::one(); w]).expect("static"),
            ),
            final_bias: Param::new("vision.final.bias", Tensor::zeros(vec![w]).expect("static")),
            pool_query: Param::new("vision.pool.query", gaussian(rng, vec![1, w], INIT_STD)),
            pool_wq: Param::new("vision.pool.wq", gaussian(rng, vec![w, dims.joint_dim], INIT_STD)),
            pool_wk: Param::new("vision.pool.wk", gaussian(rng, vec![w, dims.joint_dim], INIT_STD)),
            pool_wv: Param::new("vision.pool.wv", gaussian(rng, vec![w, dims.joint_dim], INIT_STD)),
            // Zero-initialized: at init a video is an unordered bag of
            // frames; training learns how much order matters.
            temporal: Param::new("vision.temporal", Tensor::zeros(temporal_shape).expect("static")),
            dims,
        })
    }

    pub fn set_all_trainable(&mut self) {
        for p in self.params_mut() {
            p.set_trainable(true);
        }
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        let mut out = vec![&self.patch_weight, &self.patch_bias, &self.position_table];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([
            &self.final_gain,
            &self.final_bias,
            &self.pool_query,
            &self.pool_wq,
            &self.pool_wk,
            &self.pool_wv,
            &self.temporal,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.position_table];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.pool_query,
            &mut self.pool_wq,
            &mut self.pool_wk,
            &mut self.pool_wv,
            &mut self.temporal,
        ]);
        out
    }

    pub fn mount(&self, tape: &mut Tape<S>) -> MountedVision {
        MountedVision {
            patch_weight: self.patch_weight.mount(tape),
            patch_bias: self.patch_bias.mount(tape),
            positions: self.position_table.mount(tape),
            blocks: self.blocks.iter().map(|b| b.mount(tape)).collect(),
            final_gain: self.final_gain.mount(tape),
            final_bias: self.final_bias.mount(tape),
            pool_query: self.pool_query.mount(tape),
            pool_wq: self.pool_wq.mount(tape),
            pool_wk: self.pool_wk.mount(tape),
            pool_wv: self.pool_wv.mount(tape),
            temporal: self.temporal.mount(tape),
        }
    }

    pub fn cast<T: Scalar>(&self) -> VisionEncoderParams<T> {
        VisionEncoderParams {
            dims: self.dims,
            patch_weight: self.patch_weight.cast(),
            patch_bias: self.patch_bias.cast(),
            position_table: self.position_table.cast(),
            blocks: self.blocks.iter().map(TransformerBlock::cast).collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            pool_query: self.pool_query.cast(),
            pool_wq: self.pool_wq.cast(),
            pool_wk: self.pool_wk.cast(),
            pool_wv: self.pool_wv.cast(),
            temporal: self.temporal.cast(),
        }
    }

    pub fn encode_image(
        &self,
        tape: &mut Tape<S>,
        m: &MountedVision,
        image: &Image,
    ) -> Result<VisionEmbedding> {
        let tokens = self.frame_tokens(tape, m, image)?;
        self.pool(tape, m, tokens)
    }

    /// [`Self::encode_image`] for a whole batch through one set of tape
    /// ops: patch projection, norms and MLPs run on all images stacked into
    /// one tall matrix; attention (block and pooling) runs per image on
    /// sliced rows. The same row-independence argument as the batched text
    /// path applies, so each image's embedding is bit-identical to its solo
    /// encoding.
    pub fn encode_images_batch(
        &self,
        tape: &mut Tape<S>,
        m: &MountedVision,
        images: &[&Image],
    ) -> Result<Vec<VisionEmbedding>> {
        if images.is_empty() {
            return Err(Error::Contract("batched image encode of zero images".into()));
        }
        let n = self.dims.n_patches();
        let feat = self.dims.patch_features();
        let mut stacked = Vec::with_capacity(images.len() * n * feat);
        for image in images {
            let t = patchify::<S>(image, self.dims.image_size, self.dims.patch_size)?;
            stacked.extend_from_slice(&t.data);
        }
        let patches = tape.leaf(Tensor::new(vec![images.len() * n, feat], stacked)?);
        let x = tape.matmul(patches, m.patch_weight)?;
        let mut x = tape.add_row(x, m.patch_bias)?;
        // The patch-position table, repeated down the stack.
        let pos_idx: Vec<usize> = (0..images.len()).flat_map(|_| 0..n).collect();
        let pos = tape.gather_rows(m.positions, &pos_idx)?;
        x = tape.add(x, pos)?;
        let spans: Vec<(usize, usize)> = (0..images.len()).map(|i| (i * n, n)).collect();
        let biases = vec![None; images.len()];
        for block in &m.blocks {
            x = block_forward_batch(tape, block, x, self.dims.heads, &spans, &biases)?;
        }
        let x = tape.layer_norm(x, m.final_gain, m.final_bias, LN_EPS)?;

        // Pooling with the shared learned query: project keys and values
        // for the whole stack, then attend image by image.
        let dh = self.dims.pool_head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.matmul(m.pool_query, m.pool_wq)?;
        let k = tape.matmul(x, m.pool_wk)?;
        let v = tape.matmul(x, m.pool_wv)?;
        let mut embeddings = Vec::with_capacity(images.len());
        for &(start, len) in &spans {
            let (ks, vs) = if start == 0 && len == images.len() * n {
                (k, v)
            } else {
                (tape.slice_rows(k, start, len)?, tape.slice_rows(v, start, len)?)
            };
            let mut outs = Vec::with_capacity(self.dims.pool_heads);
            let mut weight_rows = Vec::with_capacity(self.dims.pool_heads);
            for h in 0..self.dims.pool_heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(ks, h * dh, dh)?;
                let vh = tape.slice_cols(vs, h * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let weights = tape.softmax_rows(scores)?;
                weight_rows.push(weights);
                outs.push(tape.matmul(weights, vh)?);
            }
            let merged = tape.concat_cols(&outs)?;
            let joint = tape.l2_normalize_rows(merged)?;
            let pool_weights = tape.concat_rows(&weight_rows)?;
            embeddings.push(VisionEmbedding { joint, pool_weights });
        }
        Ok(embeddings)
    }

    /// Encodes T frames into one joint-space vector: per-frame transformer
    /// trunks, a temporal encoding added to each frame's output tokens,
    /// flattening to `T·N` tokens, then the same pooling the image path
    /// uses.
    pub fn encode_video(
        &self,
        tape: &mut Tape<S>,
        m: &MountedVision,
        frames: &[Image],
    ) -> Result<VisionEmbedding> {
        if frames.is_empty() {
            return Err(Error::Contract("encode_video needs at least one frame".into()));
        }
        if frames.len() > self.dims.max_frames {
            return Err(Error::Capacity {
                what: "video frames",
                got: frames.len(),
                max: self.dims.max_frames,
            });
        }
        let mut frame_outputs = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let x = self.frame_tokens(tape, m, frame)?;
            let x = if self.dims.temporal_per_channel {
                let row = tape.gather_rows(m.temporal, &[t])?;
                tape.add_row(x, row)?
            } else {
                let scalar = tape.gather_rows(m.temporal, &[t])?;
                tape.add_scalar(x, scalar)?
            };
            frame_outputs.push(x);
        }
        let x = if frame_outputs.len() == 1 {
            frame_outputs[0]
        } else {
            tape.concat_rows(&frame_outputs)?
        };
        self.pool(tape, m, x)
    }

    /// The per-frame trunk: patchify, project, add patch positions, run the
    /// bidirectional blocks, final layer norm. Returns `[N × width]`.
    fn frame_tokens(&self, tape: &mut Tape<S>, m: &MountedVision, image: &Image) -> Result<TensorId> {
        let patches = patchify::<S>(image, self.dims.image_size, self.dims.patch_size)?;
        let patches = tape.leaf(patches);
        let x = tape.matmul(patches, m.patch_weight)?;
        let mut x = tape.add_row(x, m.patch_bias)?;
        x = tape.add(x, m.positions)?;
        for block in &m.blocks {
            x = block_forward(tape, block, x, self.dims.heads, None)?;
        }
        tape.layer_norm(x, m.final_gain, m.final_bias, LN_EPS)
    }

    /// Multi-head attention pooling: one learnable query row attends over
    /// all tokens per head; head outputs concatenate channel-wise with no
    /// output projection, so head h writes channels
    /// `h·(D/pool_heads) ..< (h+1)·(D/pool_heads)` of the joint vector.
    fn pool(&self, tape: &mut Tape<S>, m: &MountedVision, tokens: TensorId) -> Result<VisionEmbedding> {
        let dh = self.dims.pool_head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.matmul(m.pool_query, m.pool_wq)?; // [1 × joint]
        let k = tape.matmul(tokens, m.pool_wk)?; // [T·N × joint]
        let v = tape.matmul(tokens, m.pool_wv)?;
        let mut outs = Vec::with_capacity(self.dims.pool_heads);
        let mut weight_rows = Vec::with_capacity(self.dims.pool_heads);
        for h in 0..self.dims.pool_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?; // [1 × T·N]
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax_rows(scores)?;
            weight_rows.push(weights);
            outs.push(tape.matmul(weights, vh)?); // [1 × dh]
        }
        let merged = tape.concat_cols(&outs)?;
        let joint = tape.l2_normalize_rows(merged)?;
        let pool_weights = tape.concat_rows(&weight_rows)?;
        Ok(VisionEmbedding { joint, pool_weights })
    }

    /// Forward-only convenience: per-prompt spatial attention maps for one
    /// image. Pooling heads are grouped onto prompts by their channel
    /// blocks (head h feeds channels that prompt `h / (pool_heads/k)` owns
    /// on the text side) and averaged within each group.
    pub fn attention_maps(&self, image: &Image, n_prompts: usize) -> Result<AttentionMaps> {
        if n_prompts == 0 || self.dims.pool_heads % n_prompts != 0 {
            return Err(Error::Config(format!(
                "{} pooling heads cannot be split over {n_prompts} prompts",
                self.dims.pool_heads
            )));
        }
        let mut tape = Tape::new();
        let m = self.mount(&mut tape);
        let emb = self.encode_image(&mut tape, &m, image)?;
        let weights = tape.data(emb.pool_weights);
        let n = self.dims.n_patches();
        let heads_per_prompt = self.dims.pool_heads / n_prompts;
        let mut per_prompt = Vec::with_capacity(n_prompts);
        for p in 0..n_prompts {
            let mut map = vec![0.0f64; n];
            for h in p * heads_per_prompt..(p + 1) * heads_per_prompt {
                for (i, slot) in map.iter_mut().enumerate() {
                    *slot += weights[h * n + i].to_f64().unwrap();
                }
            }
            let inv = 1.0 / heads_per_prompt as f64;
            per_prompt.push(map.into_iter().map(|v| (v * inv) as f32).collect());
        }
        Ok(AttentionMaps { grid: self.dims.patches_per_side(), per_prompt })
    }
}

/// Cuts an image into non-overlapping patches: row p (patches in raster
/// order) holds the patch pixels in (dy, dx, channel) order.
pub fn patchify<S: Scalar>(image: &Image, image_size: usize, patch: usize) -> Result<Tensor<S>> {
    if image.size != image_size {
        return Err(Error::Shape {
            op: "patchify",
            detail: format!("image is {}×{}, encoder expects {image_size}", image.size, image.size),
        });
    }
    let per_side = image_size / patch;
    let n = per_side * per_side;
    let features = 3 * patch * patch;
    let mut data = Vec::with_capacity(n * features);
    for py in 0..per_side {
        for px in 0..per_side {
            for dy in 0..patch {
                for dx in 0..patch {
                    let pixel = image.get(px * patch + dx, py * patch + dy);
                    for c in pixel {
                        data.push(crate::tensor::s::<S>(c as f64));
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, features], data)
}

/// Per-prompt spatial attention maps (grid × grid each, summing to 1).
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub grid: usize,
    pub per_prompt: Vec<Vec<f32>>,
}

impl AttentionMaps {
    /// Patch index each prompt attends to most.
    pub fn argmax_patches(&self) -> Vec<usize> {
        self.per_prompt
            .iter()
            .map(|map| {
                map.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite weights"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// CSV: one row per prompt — prompt index, then grid² weights.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("prompt");
        for i in 0..self.grid * self.grid {
            body.push_str(&format!(",p{i}"));
        }
        body.push('\n');
        for (i, map) in self.per_prompt.iter().enumerate() {
            body.push_str(&(i + 1).to_string());
            for v in map {
                body.push_str(&format!(",{v}"));
            }
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    /// One ASCII PGM per prompt, weights scaled so the per-map maximum is
    /// white. Returns the written paths.
    pub fn write_pgms(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        let mut paths = Vec::new();
        for (i, map) in self.per_prompt.iter().enumerate() {
            let max = map.iter().cloned().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
            let mut body = format!("P2\n{} {}\n255\n", self.grid, self.grid);
            for y in 0..self.grid {
                for x in 0..self.grid {
                    let v = (map[y * self.grid + x] / max * 255.0).round() as u32;
                    body.push_str(&v.to_string());
                    body.push(if x + 1 == self.grid { '\n' } else { ' ' });
                }
            }
            let path = dir.join(format!("{stem}_prompt{}.pgm", i + 1));
            std::fs::write(&path, body)?;
            paths.push(path);
        }
        Ok(paths)
    }
}
