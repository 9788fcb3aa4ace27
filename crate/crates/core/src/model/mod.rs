//! The tiny multimodal encoder-decoder.
//!
//! An input image is cut into patches and projected by a two-layer MLP to
//! `(h_f * w_f) x d` visual features; the instruction is encoded by a small
//! transformer to `n_t x d` text features; learned query tokens, visual and
//! text features are concatenated and fused by another transformer stack; and
//! an autoregressive decoder cross-attends to the fused sequence to emit the
//! answer one token at a time.

mod forward;
pub mod gradcheck;
mod session;

pub use forward::SampleForward;
pub use session::Session;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Scalar};
use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::Raster;

fn default_d() -> usize {
    128
}
fn default_patch() -> usize {
    8
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_queries() -> usize {
    10
}
fn default_vocab() -> usize {
    crate::textio::Vocabulary::standard().len()
}
fn default_max_seq_len() -> usize {
    128
}
fn default_img_side() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension.
    #[serde(default = "default_d")]
    pub d: usize,
    /// Square patch side in pixels.
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_layers")]
    pub enc_layers: usize,
    #[serde(default = "default_layers")]
    pub dec_layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Learnable query tokens prepended at fusion; 0 is supported and yields
    /// the plain concat(visual, text) form.
    #[serde(default = "default_queries")]
    pub num_queries: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_img_side")]
    pub img_h: usize,
    #[serde(default = "default_img_side")]
    pub img_w: usize,
    /// Tie the output projection to the token embedding.
    #[serde(default)]
    pub tied_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults populate every field")
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.patch == 0
            || !self.img_h.is_multiple_of(self.patch)
            || !self.img_w.is_multiple_of(self.patch)
        {
            return Err(Error::InvalidConfig(format!(
                "patch {} must divide image {}x{}",
                self.patch, self.img_w, self.img_h
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::InvalidConfig("need at least one encoder/decoder layer".into()));
        }
        if self.vocab_size == 0 || self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("vocab_size/max_seq_len too small".into()));
        }
        Ok(())
    }

    pub fn h_f(&self) -> usize {
        self.img_h / self.patch
    }

    pub fn w_f(&self) -> usize {
        self.img_w / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.h_f() * self.w_f()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Stable fingerprint for artifact lineage.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::hash::sha256_hex(&[json.as_bytes()])[..16].to_string()
    }
}

/// Named parameter arrays; order is creation order and fixed by construction,
/// so ParamIds are stable for a given config.
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    arrays: Vec<Arc<Array2<F>>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    fn new() -> Self {
        Self { names: Vec::new(), arrays: Vec::new(), index: HashMap::new() }
    }

    fn register(&mut self, name: impl Into<String>, array: Array2<F>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.arrays.len());
        self.names.push(name.clone());
        self.arrays.push(Arc::new(array));
        let prev = self.index.insert(name, id);
        debug_assert!(prev.is_none(), "duplicate param name");
        id
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn array(&self, id: ParamId) -> &Arc<Array2<F>> {
        &self.arrays[id.0]
    }

    pub fn array_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        Arc::make_mut(&mut self.arrays[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arc<Array2<F>>)> {
        self.arrays
            .iter()
            .enumerate()
            .map(|(i, a)| (ParamId(i), self.names[i].as_str(), a))
    }

    pub fn n_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Replaces an array wholesale (checkpoint load); shape must match.
    pub fn set(&mut self, id: ParamId, array: Array2<F>) -> Result<()> {
        if self.arrays[id.0].dim() != array.dim() {
            return Err(Error::ShapeMismatch(format!(
                "param {} expects {:?}, got {:?}",
                self.names[id.0],
                self.arrays[id.0].dim(),
                array.dim()
            )));
        }
        self.arrays[id.0] = Arc::new(array);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttnIds,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp: MlpIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecBlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub self_attn: AttnIds,
    pub lnc_g: ParamId,
    pub lnc_b: ParamId,
    pub cross_attn: AttnIds,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp: MlpIds,
}

/// Typed handles into the [`ParamStore`].
pub(crate) struct ModelIds {
    pub patch_w1: ParamId,
    pub patch_b1: ParamId,
    pub patch_w2: ParamId,
    pub patch_b2: ParamId,
    pub vis_pos_row: ParamId,
    pub vis_pos_col: ParamId,
    pub tok_emb: ParamId,
    pub text_layers: Vec<BlockIds>,
    pub queries: Option<ParamId>,
    pub fusion_layers: Vec<BlockIds>,
    pub dec_layers: Vec<DecBlockIds>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub out_w: Option<ParamId>,
    pub out_b: ParamId,
    pub itc_img_proj: ParamId,
    pub itc_txt_proj: ParamId,
    pub itc_logit_scale: ParamId,
    pub itm_w: ParamId,
    pub itm_b: ParamId,
}

pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub(crate) ids: ModelIds,
    /// Sinusoidal positions for text/decoder sequences, `[max_seq_len, d]`.
    pub(crate) sin_pos: Arc<Array2<F>>,
    /// Patch-row / patch-col index per visual token.
    pub(crate) patch_row_ids: Arc<Vec<usize>>,
    pub(crate) patch_col_ids: Arc<Vec<usize>>,
}

impl<F: Scalar> Model<F> {
    /// Fresh model with scaled-normal (std 0.02) weights, zero biases, unit
    /// layer-norm gains; deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derive(seed, "model-init", 0);
        let d = config.d;
        let mut params = ParamStore::new();
        let mut init = Init { r: &mut r, d };

        let patch_dim = config.patch * config.patch * 3;
        let patch_w1 = init.randn(&mut params, "patch_proj.w1", patch_dim, d);
        let patch_b1 = init.zeros(&mut params, "patch_proj.b1", 1, d);
        let patch_w2 = init.randn(&mut params, "patch_proj.w2", d, d);
        let patch_b2 = init.zeros(&mut params, "patch_proj.b2", 1, d);
        let vis_pos_row = init.randn(&mut params, "vis_pos.row", config.h_f(), d);
        let vis_pos_col = init.randn(&mut params, "vis_pos.col", config.w_f(), d);
        let tok_emb = init.randn(&mut params, "tok_emb", config.vocab_size, d);

        let text_layers: Vec<BlockIds> = (0..config.enc_layers)
            .map(|l| init.block(&mut params, &format!("text_enc.{l}")))
            .collect();
        let queries = (config.num_queries > 0)
            .then(|| init.randn(&mut params, "queries", config.num_queries, d));
        let fusion_layers: Vec<BlockIds> = (0..config.enc_layers)
            .map(|l| init.block(&mut params, &format!("fusion.{l}")))
            .collect();
        let dec_layers: Vec<DecBlockIds> = (0..config.dec_layers)
            .map(|l| {
                let prefix = format!("decoder.{l}");
                DecBlockIds {
                    ln1_g: init.ones(&mut params, &format!("{prefix}.ln1.g")),
                    ln1_b: init.zeros(&mut params, &format!("{prefix}.ln1.b"), 1, d),
                    self_attn: init.attn(&mut params, &format!("{prefix}.self_attn")),
                    lnc_g: init.ones(&mut params, &format!("{prefix}.lnc.g")),
                    lnc_b: init.zeros(&mut params, &format!("{prefix}.lnc.b"), 1, d),
                    cross_attn: init.attn(&mut params, &format!("{prefix}.cross_attn")),
                    ln2_g: init.ones(&mut params, &format!("{prefix}.ln2.g")),
                    ln2_b: init.zeros(&mut params, &format!("{prefix}.ln2.b"), 1, d),
                    mlp: init.mlp(&mut params, &format!("{prefix}.mlp")),
                }
            })
            .collect();

        let final_ln_g = init.ones(&mut params, "final_ln.g");
        let final_ln_b = init.zeros(&mut params, "final_ln.b", 1, d);
        let out_w = (!config.tied_output)
            .then(|| init.randn(&mut params, "out_proj.w", d, config.vocab_size));
        let out_b = init.zeros(&mut params, "out_proj.b", 1, config.vocab_size);

        let itc_img_proj = init.randn(&mut params, "itc.img_proj", d, d);
        let itc_txt_proj = init.randn(&mut params, "itc.txt_proj", d, d);
        // contrastive temperature starts at the usual 0.07
        let itc_logit_scale = params.register(
            "itc.logit_scale",
            Array2::from_elem((1, 1), F::from_f64((1.0 / 0.07f64).ln())),
        );
        let itm_w = init.randn(&mut params, "itm.w", d, 2);
        let itm_b = init.zeros(&mut params, "itm.b", 1, 2);

        let ids = ModelIds {
            patch_w1,
            patch_b1,
            patch_w2,
            patch_b2,
            vis_pos_row,
            vis_pos_col,
            tok_emb,
            text_layers,
            queries,
            fusion_layers,
            dec_layers,
            final_ln_g,
            final_ln_b,
            out_w,
            out_b,
            itc_img_proj,
            itc_txt_proj,
            itc_logit_scale,
            itm_w,
            itm_b,
        };

        let sin_pos = Arc::new(sinusoidal_positions(config.max_seq_len, d));
        let (patch_row_ids, patch_col_ids) = patch_position_ids(config.h_f(), config.w_f());

        Ok(Self {
            config,
            params,
            ids,
            sin_pos,
            patch_row_ids: Arc::new(patch_row_ids),
            patch_col_ids: Arc::new(patch_col_ids),
        })
    }

    /// Deep copy with independent parameter storage.
    pub fn snapshot(&self) -> Self
    where
        F: Clone,
    {
        let mut copy = Self::new(self.config.clone(), 0).expect("config already validated");
        for (id, _, array) in self.params.iter() {
            copy.params.set(id, array.as_ref().clone()).expect("same shapes");
        }
        copy
    }

    #[cfg(test)]
    pub(crate) fn model_tok_emb_id(&self) -> ParamId {
        self.ids.tok_emb
    }

    /// Cuts a raster into flattened patches scaled to [0, 1].
    pub fn patchify(&self, img: &Raster) -> Result<Array2<F>> {
        let (h, w, p) = (self.config.img_h, self.config.img_w, self.config.patch);
        if img.h as usize != h || img.w as usize != w {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} does not match configured {}x{}",
                img.w, img.h, w, h
            )));
        }
        let scale = F::from_f64(1.0 / 255.0);
        let mut out = Array2::zeros((self.config.n_patches(), p * p * 3));
        for pr in 0..self.config.h_f() {
            for pc in 0..self.config.w_f() {
                let row = pr * self.config.w_f() + pc;
                let mut col = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let rgb = img.get((pc * p + dx) as u32, (pr * p + dy) as u32);
                        for ch in rgb {
                            out[(row, col)] = F::from_f64(f64::from(ch)) * scale;
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Parameter initialization: scaled normal (std 0.02) for weights and
/// embeddings, zeros for biases, ones for layer-norm gains.
struct Init<'r> {
    r: &'r mut rng::Rng,
    d: usize,
}

impl Init<'_> {
    fn randn<F: Scalar>(
        &mut self,
        params: &mut ParamStore<F>,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let a = Array2::from_shape_fn((rows, cols), |_| F::from_f64(normal.sample(self.r)));
        params.register(name, a)
    }

    fn zeros<F: Scalar>(
        &mut self,
        params: &mut ParamStore<F>,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        params.register(name, Array2::zeros((rows, cols)))
    }

    fn ones<F: Scalar>(&mut self, params: &mut ParamStore<F>, name: &str) -> ParamId {
        params.register(name, Array2::from_elem((1, self.d), F::one()))
    }

    fn attn<F: Scalar>(&mut self, params: &mut ParamStore<F>, prefix: &str) -> AttnIds {
        let d = self.d;
        AttnIds {
            wq: self.randn(params, &format!("{prefix}.wq"), d, d),
            bq: self.zeros(params, &format!("{prefix}.bq"), 1, d),
            wk: self.randn(params, &format!("{prefix}.wk"), d, d),
            bk: self.zeros(params, &format!("{prefix}.bk"), 1, d),
            wv: self.randn(params, &format!("{prefix}.wv"), d, d),
            bv: self.zeros(params, &format!("{prefix}.bv"), 1, d),
            wo: self.randn(params, &format!("{prefix}.wo"), d, d),
            bo: self.zeros(params, &format!("{prefix}.bo"), 1, d),
        }
    }

    fn mlp<F: Scalar>(&mut self, params: &mut ParamStore<F>, prefix: &str) -> MlpIds {
        let d = self.d;
        MlpIds {
            w1: self.randn(params, &format!("{prefix}.w1"), d, 4 * d),
            b1: self.zeros(params, &format!("{prefix}.b1"), 1, 4 * d),
            w2: self.randn(params, &format!("{prefix}.w2"), 4 * d, d),
            b2: self.zeros(params, &format!("{prefix}.b2"), 1, d),
        }
    }

    fn block<F: Scalar>(&mut self, params: &mut ParamStore<F>, prefix: &str) -> BlockIds {
        let d = self.d;
        BlockIds {
            ln1_g: self.ones(params, &format!("{prefix}.ln1.g")),
            ln1_b: self.zeros(params, &format!("{prefix}.ln1.b"), 1, d),
            attn: self.attn(params, &format!("{prefix}.attn")),
            ln2_g: self.ones(params, &format!("{prefix}.ln2.g")),
            ln2_b: self.zeros(params, &format!("{prefix}.ln2.b"), 1, d),
            mlp: self.mlp(params, &format!("{prefix}.mlp")),
        }
    }
}

fn sinusoidal_positions<F: Scalar>(max_len: usize, d: usize) -> Array2<F> {
    let mut out = Array2::zeros((max_len, d));
    for p in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = p as f64 * freq;
            out[(p, 2 * i)] = F::from_f64(angle.sin());
            out[(p, 2 * i + 1)] = F::from_f64(angle.cos());
        }
    }
    out
}

fn patch_position_ids(h_f: usize, w_f: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::with_capacity(h_f * w_f);
    let mut cols = Vec::with_capacity(h_f * w_f);
    for r in 0..h_f {
        for c in 0..w_f {
            rows.push(r);
            cols.push(c);
        }
    }
    (rows, cols)
}
