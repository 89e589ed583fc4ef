//! Binary checkpoints that capture a run completely: every model tensor,
//! the optimizer's moment buffers and step count, the batch generator
//! state, the vocabulary and the full configuration. Writing is
//! deterministic (fixed tensor order, fixed blob layout), so saving the
//! same state twice produces identical bytes, and resuming replays the
//! interrupted run exactly.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CAMP" | u32 version (1) | u32 tensor count
//! per tensor: u32 name_len | name bytes | u32 rank | u64 dim... | f32 data...
//! u64 blob_len | blob bytes (UTF-8 key = value lines)
//! ```
//!
//! Model tensors come first in registry order, then optimizer moments as
//! `opt.m.NAME` / `opt.v.NAME` pairs sorted by parameter name. The blob
//! holds the configuration followed by `state.*` lines (step, optimizer
//! step, generator state, vocabulary).

use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompt::Vocabulary;
use crate::trainer::{AdamW, TrainConfig};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CAMP";
const VERSION: u32 = 1;

/// Everything [`load`] recovers from a checkpoint file.
pub struct Snapshot {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    /// Next step to run (steps `0..step` are already done).
    pub step: usize,
    /// Batch generator state at the moment of saving.
    pub rng_state: u64,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the full training state to `path`.
pub fn save(
    path: &Path,
    model: &Model<f32>,
    opt: &AdamW<f32>,
    cfg: &TrainConfig,
    step: usize,
    rng_state: u64,
) -> Result<()> {
    let params = model.params();
    let shapes: BTreeMap<&str, &[usize]> =
        params.iter().map(|p| (p.name.as_str(), p.tensor.shape.as_slice())).collect();

    let mut body = Vec::new();
    for p in &params {
        push_tensor(&mut body, &p.name, &p.tensor.shape, &p.tensor.data);
    }
    let mut n_tensors = params.len();
    for (name, (m, v)) in &opt.moments {
        let shape = shapes.get(name.as_str()).ok_or_else(|| {
            Error::Contract(format!("optimizer tracks {name:?}, which is not a model parameter"))
        })?;
        push_tensor(&mut body, &format!("opt.m.{name}"), shape, m);
        push_tensor(&mut body, &format!("opt.v.{name}"), shape, v);
        n_tensors += 2;
    }

    let mut blob = cfg.to_kv_lines();
    blob.push_str(&format!("state.step = {step}\n"));
    blob.push_str(&format!("state.opt_step = {}\n", opt.t));
    blob.push_str(&format!("state.rng = {rng_state}\n"));
    blob.push_str(&format!("state.vocab = {}\n", model.vocab.words().join(" ")));

    let mut out = Vec::with_capacity(body.len() + blob.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

/// Byte reader that reports its offset in decode errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "file truncated: {what} needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let raw = self.take(n, what)?;
        std::str::from_utf8(raw).map_err(|e| Error::Format {
            offset: start as u64,
            message: format!("{what} is not UTF-8: {e}"),
        })
    }
}

fn read_tensor(cur: &mut Cursor) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = cur.u32("tensor name length")? as usize;
    if name_len > 4096 {
        return cur.fail(format!("tensor name length {name_len} is implausible"));
    }
    let name = cur.utf8(name_len, "tensor name")?.to_string();
    let rank = cur.u32("tensor rank")? as usize;
    if rank > 8 {
        return cur.fail(format!("tensor {name:?} has implausible rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = cur.u64("tensor dimension")? as usize;
        numel = numel.saturating_mul(d);
        shape.push(d);
    }
    if numel.saturating_mul(4) > cur.bytes.len() {
        return cur.fail(format!("tensor {name:?} claims {numel} elements, larger than the file"));
    }
    let raw = cur.take(numel * 4, "tensor data")?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
    Ok((name, shape, data))
}

/// Reads a checkpoint back into a ready-to-train [`Snapshot`].
pub fn load(path: &Path) -> Result<Snapshot> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return cur.fail("bad magic (not a checkpoint file)");
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return cur.fail(format!("unsupported version {version} (expected {VERSION})"));
    }
    let n_tensors = cur.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..n_tensors {
        let at = cur.pos;
        let (name, shape, data) = read_tensor(&mut cur)?;
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format {
                offset: at as u64,
                message: format!("duplicate tensor {name:?}"),
            });
        }
    }
    let blob_len = cur.u64("blob length")? as usize;
    let blob = cur.utf8(blob_len, "config blob")?.to_string();
    if cur.pos != bytes.len() {
        return cur.fail(format!("{} trailing bytes after the config blob", bytes.len() - cur.pos));
    }

    // Split the blob into configuration and state lines.
    let mut cfg = TrainConfig::default();
    let (mut step, mut opt_step, mut rng_state, mut vocab_words) = (None, None, None, None);
    for line in blob.lines() {
        let Some((key, value)) = line.split_once('=') else {
            return cur.fail(format!("blob line {line:?} is not key = value"));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "state.step" => step = Some(parse_u64(&cur, key, value)? as usize),
            "state.opt_step" => opt_step = Some(parse_u64(&cur, key, value)?),
            "state.rng" => rng_state = Some(parse_u64(&cur, key, value)?),
            "state.vocab" => {
                vocab_words = Some(value.split(' ').map(str::to_string).collect::<Vec<_>>())
            }
            _ => cfg.apply_kv(key, value)?,
        }
    }
    let missing = |what: &str| Error::Format {
        offset: cur.pos as u64,
        message: format!("blob is missing {what}"),
    };
    let step = step.ok_or_else(|| missing("state.step"))?;
    let opt_step = opt_step.ok_or_else(|| missing("state.opt_step"))?;
    let rng_state = rng_state.ok_or_else(|| missing("state.rng"))?;
    let vocab_words = vocab_words.ok_or_else(|| missing("state.vocab"))?;

    // Rebuild the model skeleton, then overwrite every tensor from the
    // file. Each stored tensor must correspond to a parameter or a moment
    // buffer; anything else means the file and the config disagree.
    let vocab = Vocabulary::from_words(vocab_words.iter().map(String::as_str))?;
    let mut model =
        Model::<f32>::new(vocab, cfg.text_dims(vocab_words.len()), cfg.vision_dims(), cfg.seed)?;
    model.set_trainable(cfg.unfrozen_layers, cfg.learnable_vocab)?;

    let mut remaining = tensors;
    for p in model.params_mut() {
        let (shape, data) = remaining.remove(&p.name).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("checkpoint is missing parameter {:?}", p.name),
        })?;
        if shape != p.tensor.shape {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "parameter {:?} has shape {:?} in the file but {:?} in this config",
                    p.name, shape, p.tensor.shape
                ),
            });
        }
        p.tensor.data = data;
    }

    let mut optimizer = AdamW::from_config(&cfg);
    optimizer.t = opt_step;
    let moment_names: Vec<String> = remaining.keys().cloned().collect();
    for name in moment_names {
        let Some(param) = name.strip_prefix("opt.m.") else { continue };
        let param = param.to_string();
        let (m_shape, m) = remaining.remove(&name).expect("key from the same map");
        let (v_shape, v) = remaining.remove(&format!("opt.v.{param}")).ok_or_else(|| {
            Error::Format {
                offset: 0,
                message: format!("moment {name:?} has no matching opt.v tensor"),
            }
        })?;
        let expect = model
            .params()
            .into_iter()
            .find(|p| p.name == param)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("moment buffers for unknown parameter {param:?}"),
            })?
            .tensor
            .shape
            .clone();
        if m_shape != expect || v_shape != expect {
            return Err(Error::Format {
                offset: 0,
                message: format!("moment buffers for {param:?} do not match its shape"),
            });
        }
        optimizer.moments.insert(param, (m, v));
    }
    if let Some(name) = remaining.keys().next() {
        return Err(Error::Format {
            offset: 0,
            message: format!("unexpected tensor {name:?} in checkpoint"),
        });
    }

    Ok(Snapshot { model, optimizer, config: cfg, step, rng_state })
}

fn parse_u64(cur: &Cursor, key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| Error::Format {
        offset: cur.pos as u64,
        message: format!("bad integer {value:?} for {key}"),
    })
}
