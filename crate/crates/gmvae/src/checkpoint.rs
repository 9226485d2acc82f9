//! Checkpoint files: magic `GMVAE1\0`, a version byte, a `u32` LE header
//! length, the JSON header, then `f32` LE blocks in header order:
//! parameters, batch-norm running means and variances, and Adam first and
//! second moments when present.

use std::fs;
use std::path::Path;

use gmvae_core::gmvae::{Gmvae, ModelConfig, ModelMode};
use gmvae_core::nn::seeded;
use gmvae_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 7] = b"GMVAE1\0";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Gmvae<f32>,
    /// Percentage of train instrument labels the model saw.
    pub n_percent: f64,
    pub epochs_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub has_moments: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub mode: ModelMode,
    pub n_percent: f64,
    pub epochs_completed: usize,
    pub config: ModelConfig,
    pub optimizer: OptimizerHeader,
    pub params: Vec<ParamEntry>,
    /// Channel count of every batch-norm layer.
    pub running: Vec<usize>,
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn header(ck: &Checkpoint) -> Header {
    let m = &ck.model;
    Header {
        mode: m.mode(),
        n_percent: ck.n_percent,
        epochs_completed: ck.epochs_completed,
        config: m.config.clone(),
        optimizer: OptimizerHeader {
            learning_rate: m.optimizer.lr,
            beta1: m.optimizer.beta1,
            beta2: m.optimizer.beta2,
            epsilon: m.optimizer.epsilon,
            step: m.optimizer.step,
            has_moments: !m.optimizer.first.is_empty(),
        },
        params: m
            .params
            .names()
            .iter()
            .zip(m.params.tensors())
            .map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
        running: m.running.iter().map(|r| r.mean.len()).collect(),
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let head = serde_json::to_vec(&header(ck)).expect("header serializes");
    let m = &ck.model;
    let mut out = Vec::with_capacity(12 + head.len() + 12 * m.params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    for t in m.params.tensors() {
        push_f32s(&mut out, t.data());
    }
    for r in &m.running {
        push_f32s(&mut out, &r.mean);
        push_f32s(&mut out, &r.var);
    }
    for t in m.optimizer.first.iter().chain(&m.optimizer.second) {
        push_f32s(&mut out, t.data());
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f32>, String> {
        let bytes = n.checked_mul(4).ok_or("block size overflows")?;
        if self.data.len() < bytes {
            return Err(format!("truncated: needed {bytes} more bytes, found {}", self.data.len()));
        }
        let (head, rest) = self.data.split_at(bytes);
        self.data = rest;
        Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, String> {
    let body = bytes.strip_prefix(MAGIC.as_slice()).ok_or("bad checkpoint magic")?;
    let (&version, body) = body.split_first().ok_or("truncated: no version byte")?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    if body.len() < 4 {
        return Err("truncated: no header length".into());
    }
    let len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    let body = &body[4..];
    if body.len() < len {
        return Err("truncated header".into());
    }
    let head: Header = serde_json::from_slice(&body[..len]).map_err(|e| format!("header: {e}"))?;
    if head.mode != head.config.mode {
        return Err("header mode disagrees with its model configuration".into());
    }
    let mut model = Gmvae::<f32>::new(head.config.clone(), head.optimizer.learning_rate, &mut seeded(0))
        .map_err(|e| e.to_string())?;
    let expected: Vec<ParamEntry> = model
        .params
        .names()
        .iter()
        .zip(model.params.tensors())
        .map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() })
        .collect();
    if expected != head.params {
        return Err("parameter layout does not match the model configuration".into());
    }
    if head.running != model.running.iter().map(|r| r.mean.len()).collect::<Vec<_>>() {
        return Err("batch-norm layout does not match the model configuration".into());
    }
    let mut r = Reader { data: &body[len..] };
    for t in model.params.tensors_mut() {
        let v = r.take(t.len())?;
        t.data_mut().copy_from_slice(&v);
    }
    for s in &mut model.running {
        s.mean = r.take(s.mean.len())?;
        s.var = r.take(s.var.len())?;
    }
    let o = &head.optimizer;
    model.optimizer.lr = o.learning_rate;
    model.optimizer.beta1 = o.beta1;
    model.optimizer.beta2 = o.beta2;
    model.optimizer.epsilon = o.epsilon;
    model.optimizer.step = o.step;
    if o.has_moments {
        for which in 0..2 {
            let mut moments = Vec::with_capacity(head.params.len());
            for p in &head.params {
                let n = p.shape.iter().product();
                moments.push(Tensor::new(&p.shape, r.take(n)?).map_err(|e| e.to_string())?);
            }
            if which == 0 {
                model.optimizer.first = moments;
            } else {
                model.optimizer.second = moments;
            }
        }
    }
    if !r.data.is_empty() {
        return Err(format!("{} trailing bytes", r.data.len()));
    }
    Ok(Checkpoint { model, n_percent: head.n_percent, epochs_completed: head.epochs_completed })
}

pub fn save(path: &Path, ck: &Checkpoint) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    fs::write(path, encode(ck)).map_err(AppError::io(path))
}

pub fn load(path: &Path) -> AppResult<Checkpoint> {
    let bytes = fs::read(path).map_err(AppError::io(path))?;
    decode(&bytes).map_err(|detail| AppError::Format { path: path.to_path_buf(), detail })
}

/// Loads and checks the stored mode.
pub fn load_expecting(path: &Path, mode: ModelMode) -> AppResult<Checkpoint> {
    let ck = load(path)?;
    if ck.model.mode() != mode {
        return Err(gmvae_core::Error::Mode { expected: mode.name().into(), found: ck.model.mode().name().into() }.into());
    }
    Ok(ck)
}
