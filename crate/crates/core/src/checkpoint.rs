//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RCPT" | version u32 | meta_len u64 | meta JSON
//! n_params u32 | each: name_len u16, name, rows u32, cols u32, f32 data
//! opt_flag u8  | when 1: opt_step u64, then per param m and v arrays
//! sha256 of all preceding bytes (32 bytes)
//! ```
//!
//! The checkpoint id is the hex SHA-256 of the whole file.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{AdamW, AdamWConfig, Stage};

const MAGIC: &[u8; 4] = b"RCPT";
const VERSION: u32 = 1;

/// Stage the parameters have completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageMark {
    Fresh,
    Activation,
    Cycle,
}

impl StageMark {
    pub fn allows(self, next: Stage) -> bool {
        match next {
            Stage::Activation => true,
            Stage::Cycle => matches!(self, StageMark::Activation | StageMark::Cycle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: StageMark,
    pub step: u64,
    pub epoch: u64,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub train_corpus_hash: Option<String>,
    pub train_split: Option<String>,
    pub config_fingerprint: String,
    /// Id of the checkpoint this one continued from, if any.
    pub source_checkpoint: Option<String>,
}

/// Optimizer state stored alongside parameters for exact resume.
pub struct OptState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

impl OptState {
    pub fn from_adamw(opt: &AdamW) -> Self {
        Self { config: opt.config, step: opt.step, m: opt.m.clone(), v: opt.v.clone() }
    }

    /// Rebuilds the optimizer; the freeze mask comes from the new config.
    pub fn into_adamw(self, model: &Model<f32>, freeze: &[String]) -> Result<AdamW> {
        let mut opt = AdamW::new(&model.params, self.config, freeze);
        if self.m.len() != opt.m.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} arrays, model has {}",
                self.m.len(),
                opt.m.len()
            )));
        }
        opt.step = self.step;
        opt.m = self.m;
        opt.v = self.v;
        Ok(opt)
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::with_capacity(1 << 20) }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn array(&mut self, a: &Array2<f32>) {
        self.u32(a.nrows() as u32);
        self.u32(a.ncols() as u32);
        for v in a.iter() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self) -> Result<Array2<f32>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let bytes = self.take(rows * cols * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))
    }
}

/// Serializes model + metadata (+ optimizer state) and returns the
/// checkpoint id.
pub fn save(
    path: &Path,
    model: &Model<f32>,
    meta: &CheckpointMeta,
    opt: Option<&OptState>,
) -> Result<String> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let meta_json = serde_json::to_vec(meta)?;
    w.u64(meta_json.len() as u64);
    w.bytes(&meta_json);
    w.u32(model.params.len() as u32);
    for (_, name, arr) in model.params.iter() {
        let name_bytes = name.as_bytes();
        w.u16(name_bytes.len() as u16);
        w.bytes(name_bytes);
        w.array(arr);
    }
    match opt {
        None => w.u8(0),
        Some(state) => {
            w.u8(1);
            let cfg_json = serde_json::to_vec(&state.config)?;
            w.u64(cfg_json.len() as u64);
            w.bytes(&cfg_json);
            w.u64(state.step);
            for (m, v) in state.m.iter().zip(&state.v) {
                w.array(m);
                w.array(v);
            }
        }
    }
    let digest = crate::hash::sha256_hex(&[&w.buf]);
    let digest_bytes: Vec<u8> = (0..digest.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&digest[i..i + 2], 16).expect("hex digest"))
        .collect();
    w.bytes(&digest_bytes);
    let id = crate::hash::sha256_hex(&[&w.buf]);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(path, &w.buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(id)
}

/// Loads a checkpoint, verifying magic, version, and content hash.
pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointMeta, Option<OptState>, String)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if buf.len() < 36 + MAGIC.len() {
        return Err(Error::Checkpoint("file too small".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    let digest = crate::hash::sha256_hex(&[body]);
    let trailer_hex: String = trailer.iter().map(|b| format!("{b:02x}")).collect();
    if digest != trailer_hex {
        return Err(Error::Checkpoint(format!(
            "content hash mismatch in {}",
            path.display()
        )));
    }
    let id = crate::hash::sha256_hex(&[&buf]);

    let mut r = Reader { buf: body, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut model = Model::<f32>::new(meta.model.clone(), 0)?;
    let n_params = r.u32()? as usize;
    if n_params != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {n_params} params, config implies {}",
            model.params.len()
        )));
    }
    for i in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 param name".into()))?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown param {name}")))?;
        if id.0 != i {
            return Err(Error::Checkpoint(format!("param {name} out of order")));
        }
        model.params.set(id, r.array()?)?;
    }
    let opt = match r.u8()? {
        0 => None,
        1 => {
            let cfg_len = r.u64()? as usize;
            let config: AdamWConfig = serde_json::from_slice(r.take(cfg_len)?)?;
            let step = r.u64()?;
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                m.push(r.array()?);
                v.push(r.array()?);
            }
            Some(OptState { config, step, m, v })
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.at != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, meta, opt, id))
}

/// Guard for cycle-stage entry: the loaded checkpoint must have completed at
/// least the activation stage.
pub fn ensure_stage_allows(meta: &CheckpointMeta, next: Stage) -> Result<()> {
    if meta.stage.allows(next) {
        Ok(())
    } else {
        Err(Error::StageOrder(format!(
            "checkpoint stage {:?} cannot enter {:?}; run the activation stage first",
            meta.stage, next
        )))
    }
}

/// Guard for evaluation: the eval split must differ from the training split.
pub fn ensure_disjoint_eval(meta: &CheckpointMeta, eval_split_id: &str) -> Result<()> {
    if let Some(train_split) = &meta.train_split {
        if train_split == eval_split_id {
            return Err(Error::SplitOverlap(format!(
                "evaluation split {eval_split_id} matches the training split"
            )));
        }
    }
    Ok(())
}

/// Convenience: a meta block for a freshly initialized model.
pub fn fresh_meta(model: &Model<f32>, vocab_hash: String) -> CheckpointMeta {
    CheckpointMeta {
        stage: StageMark::Fresh,
        step: 0,
        epoch: 0,
        model: model.config.clone(),
        vocab_hash,
        train_corpus_hash: None,
        train_split: None,
        config_fingerprint: "fresh".into(),
        source_checkpoint: None,
    }
}

pub fn model_snapshot(model: &Model<f32>) -> Model<f32> {
    model.snapshot()
}

/// Arc-shared patch matrices are cheap to clone; checkpoints do not store
/// them.
pub type SharedPatches = Arc<Array2<f32>>;
