//! Tape-building forward passes.
//!
//! One [`SampleForward`] per training example: it owns the tape, leafs
//! parameters on demand, and exposes the encoder/fusion/decoder pieces plus
//! the pooled embeddings the alignment losses need. Gradients for parameters
//! leafed more than once accumulate into the same slot, so repeated leafing
//! is harmless.

use std::sync::Arc;

use ndarray::Array2;

use super::{AttnIds, BlockIds, DecBlockIds, Model, ModelIds};
use crate::autodiff::{Scalar, Tape, Var, MASK_NEG};
use crate::error::{Error, Result};
use crate::textio::PAD;

/// Encoded instruction features plus the key-padding mask.
pub struct TextFeatures {
    /// `None` when the instruction is empty (image-only context).
    pub var: Option<Var>,
    pub mask: Vec<bool>,
}

/// Fused multimodal sequence `[queries ; visual ; text]`.
pub struct Fused {
    pub var: Var,
    pub mask: Vec<bool>,
}

pub struct SampleForward<'m, F: Scalar> {
    pub model: &'m Model<F>,
    pub tape: Tape<F>,
}

impl<'m, F: Scalar> SampleForward<'m, F> {
    pub fn new(model: &'m Model<F>) -> Self {
        Self { model, tape: Tape::new() }
    }

    fn p(&mut self, id: crate::autodiff::ParamId) -> Var {
        let arr = Arc::clone(self.model.params.array(id));
        self.tape.param(id, arr)
    }

    fn linear(&mut self, x: Var, w: crate::autodiff::ParamId, b: crate::autodiff::ParamId) -> Var {
        let wl = self.p(w);
        let bl = self.p(b);
        let prod = self.tape.matmul(x, wl);
        self.tape.add_row(prod, bl)
    }

    fn layer_norm(&mut self, x: Var, g: crate::autodiff::ParamId, b: crate::autodiff::ParamId) -> Var {
        let gl = self.p(g);
        let bl = self.p(b);
        self.tape.layer_norm(x, gl, bl)
    }

    /// Additive attention bias for causal and/or key-padding masking.
    fn mask_bias(&self, rows: usize, causal: bool, key_mask: Option<&[bool]>) -> Option<Arc<Array2<F>>> {
        let cols = key_mask.map_or(rows, <[bool]>::len);
        let causal_needed = causal && rows > 1;
        let mask_needed = key_mask.is_some_and(|m| m.iter().any(|&v| !v));
        if !causal_needed && !mask_needed {
            return None;
        }
        let neg = F::from_f64(MASK_NEG);
        let mut bias = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let causal_block = causal_needed && c > r;
                let pad_block = key_mask.is_some_and(|m| !m[c]);
                if causal_block || pad_block {
                    bias[(r, c)] = neg;
                }
            }
        }
        Some(Arc::new(bias))
    }

    /// Multi-head attention; `q_in` provides queries, `kv_in` keys/values.
    fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        ids: &AttnIds,
        causal: bool,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.linear(q_in, ids.wq, ids.bq);
        let k = self.linear(kv_in, ids.wk, ids.bk);
        let v = self.linear(kv_in, ids.wv, ids.bv);
        let rows = self.tape.value(q).nrows();
        let bias = self.mask_bias(rows, causal, key_mask);
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = self.tape.slice_cols(q, c0, c1);
            let kh = self.tape.slice_cols(k, c0, c1);
            let vh = self.tape.slice_cols(v, c0, c1);
            let kt = self.tape.transpose(kh);
            let scores = self.tape.matmul(qh, kt);
            let mut scores = self.tape.scale(scores, scale);
            if let Some(b) = &bias {
                scores = self.tape.add_const(scores, Arc::clone(b));
            }
            let attn = self.tape.softmax_rows(scores);
            head_outs.push(self.tape.matmul(attn, vh));
        }
        let concat = self.tape.concat_cols(&head_outs);
        self.linear(concat, ids.wo, ids.bo)
    }

    fn mlp(&mut self, x: Var, ids: &super::MlpIds) -> Var {
        let h = self.linear(x, ids.w1, ids.b1);
        let h = self.tape.gelu(h);
        self.linear(h, ids.w2, ids.b2)
    }

    /// Pre-norm encoder block.
    fn encoder_block(&mut self, x: Var, ids: &BlockIds, key_mask: Option<&[bool]>) -> Var {
        let h = self.layer_norm(x, ids.ln1_g, ids.ln1_b);
        let a = self.attention(h, h, &ids.attn, false, key_mask);
        let x = self.tape.add(x, a);
        let h = self.layer_norm(x, ids.ln2_g, ids.ln2_b);
        let m = self.mlp(h, &ids.mlp);
        self.tape.add(x, m)
    }

    fn decoder_block(&mut self, x: Var, fused: &Fused, ids: &DecBlockIds) -> Var {
        let h = self.layer_norm(x, ids.ln1_g, ids.ln1_b);
        let a = self.attention(h, h, &ids.self_attn, true, None);
        let x = self.tape.add(x, a);
        let h = self.layer_norm(x, ids.lnc_g, ids.lnc_b);
        let a = self.attention(h, fused.var, &ids.cross_attn, false, Some(&fused.mask));
        let x = self.tape.add(x, a);
        let h = self.layer_norm(x, ids.ln2_g, ids.ln2_b);
        let m = self.mlp(h, &ids.mlp);
        self.tape.add(x, m)
    }

    /// Patch projection plus learned 2-D positions: `(h_f * w_f) x d`.
    pub fn encode_image(&mut self, patches: Arc<Array2<F>>) -> Result<Var> {
        let cfg = &self.model.config;
        let expect = (cfg.n_patches(), cfg.patch * cfg.patch * 3);
        if patches.dim() != expect {
            return Err(Error::ShapeMismatch(format!(
                "patches {:?} do not match config {:?}",
                patches.dim(),
                expect
            )));
        }
        let ids: &ModelIds = &self.model.ids;
        let x = self.tape.shared_input(patches);
        let x = self.linear(x, ids.patch_w1, ids.patch_b1);
        let x = self.tape.gelu(x);
        let x = self.linear(x, ids.patch_w2, ids.patch_b2);
        let row_table = self.p(ids.vis_pos_row);
        let col_table = self.p(ids.vis_pos_col);
        let row_ids = Arc::clone(&self.model.patch_row_ids);
        let col_ids = Arc::clone(&self.model.patch_col_ids);
        let row_pos = self.tape.embed(row_table, row_ids);
        let col_pos = self.tape.embed(col_table, col_ids);
        let pos = self.tape.add(row_pos, col_pos);
        Ok(self.tape.add(x, pos))
    }

    /// Token embedding, sinusoidal positions, encoder stack; `n_t x d`.
    pub fn encode_text(&mut self, ids: &[u32]) -> Result<TextFeatures> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Ok(TextFeatures { var: None, mask: Vec::new() });
        }
        let mask: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        let mut x = self.embed_sequence(ids);
        let layers = self.model.ids.text_layers.clone();
        for block in &layers {
            x = self.encoder_block(x, block, Some(&mask));
        }
        Ok(TextFeatures { var: Some(x), mask })
    }

    /// Concatenates `[queries ; visual ; text]` and runs the fusion stack.
    pub fn fuse(&mut self, visual: Var, text: &TextFeatures) -> Result<Fused> {
        let cfg = &self.model.config;
        let d = cfg.d;
        if self.tape.value(visual).ncols() != d
            || text.var.is_some_and(|t| self.tape.value(t).ncols() != d)
        {
            return Err(Error::ShapeMismatch("fuse expects d-dimensional features".into()));
        }
        let mut parts = Vec::with_capacity(3);
        let mut mask = Vec::new();
        if let Some(q) = self.model.ids.queries {
            parts.push(self.p(q));
            mask.extend(std::iter::repeat_n(true, cfg.num_queries));
        }
        parts.push(visual);
        mask.extend(std::iter::repeat_n(true, self.tape.value(visual).nrows()));
        if let Some(t) = text.var {
            parts.push(t);
            mask.extend(text.mask.iter().copied());
        }
        let mut x = if parts.len() == 1 { parts[0] } else { self.tape.concat_rows(&parts) };
        let layers = self.model.ids.fusion_layers.clone();
        for block in &layers {
            x = self.encoder_block(x, block, Some(&mask));
        }
        Ok(Fused { var: x, mask })
    }

    /// Teacher-forced decoder logits for the sequence `y_in`, `len(y_in) x V`.
    pub fn decode_logits(&mut self, fused: &Fused, y_in: &[u32]) -> Result<Var> {
        self.check_ids(y_in)?;
        if y_in.is_empty() {
            return Err(Error::ShapeMismatch("decoder needs at least one input token".into()));
        }
        let mut x = self.embed_sequence(y_in);
        let layers = self.model.ids.dec_layers.clone();
        for block in &layers {
            x = self.decoder_block(x, fused, block);
        }
        let ids = &self.model.ids;
        let x = self.layer_norm(x, ids.final_ln_g, ids.final_ln_b);
        Ok(match ids.out_w {
            Some(w) => self.linear(x, w, ids.out_b),
            None => {
                let emb = self.p(ids.tok_emb);
                let wt = self.tape.transpose(emb);
                let prod = self.tape.matmul(x, wt);
                let b = self.p(ids.out_b);
                self.tape.add_row(prod, b)
            }
        })
    }

    /// Pooled, projected, L2-normalized image embedding for the contrastive
    /// loss; sees only visual features.
    pub fn image_embedding(&mut self, visual: Var) -> Var {
        let pooled = self.mean_rows(visual, None);
        let proj = self.p(self.model.ids.itc_img_proj);
        let e = self.tape.matmul(pooled, proj);
        self.tape.l2_norm_row(e)
    }

    /// Pooled text embedding over non-pad positions; `None` for empty text.
    pub fn text_embedding(&mut self, text: &TextFeatures) -> Option<Var> {
        let t = text.var?;
        let pooled = self.mean_rows(t, Some(&text.mask));
        let proj = self.p(self.model.ids.itc_txt_proj);
        let e = self.tape.matmul(pooled, proj);
        Some(self.tape.l2_norm_row(e))
    }

    /// Two-way match/mismatch logits over the pooled fused representation
    /// (query positions when queries exist, the whole sequence otherwise).
    pub fn itm_logits(&mut self, fused: &Fused) -> Var {
        let nq = self.model.config.num_queries;
        let pooled = if nq > 0 {
            let q = self.tape.slice_rows(fused.var, 0, nq);
            self.mean_rows(q, None)
        } else {
            self.mean_rows(fused.var, Some(&fused.mask))
        };
        let w = self.p(self.model.ids.itm_w);
        let b = self.p(self.model.ids.itm_b);
        let prod = self.tape.matmul(pooled, w);
        self.tape.add_row(prod, b)
    }

    /// The learnable contrastive temperature node, `[1,1]`.
    pub fn itc_logit_scale(&mut self) -> Var {
        self.p(self.model.ids.itc_logit_scale)
    }

    fn embed_sequence(&mut self, ids: &[u32]) -> Var {
        let table = self.p(self.model.ids.tok_emb);
        let idx: Arc<Vec<usize>> = Arc::new(ids.iter().map(|&t| t as usize).collect());
        let emb = self.tape.embed(table, idx);
        let pos = self
            .model
            .sin_pos
            .slice(ndarray::s![0..ids.len(), ..])
            .to_owned();
        self.tape.add_const(emb, Arc::new(pos))
    }

    fn mean_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let n = self.tape.value(x).nrows();
        let weights: Vec<F> = match mask {
            Some(m) => {
                let count = m.iter().filter(|&&v| v).count().max(1);
                let w = F::from_f64(1.0 / count as f64);
                m.iter().map(|&v| if v { w } else { F::zero() }).collect()
            }
            None => vec![F::from_f64(1.0 / n.max(1) as f64); n],
        };
        let wrow = self
            .tape
            .input(Array2::from_shape_vec((1, n), weights).expect("weight row"));
        self.tape.matmul(wrow, x)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let cfg = &self.model.config;
        if ids.len() > cfg.max_seq_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::ShapeMismatch(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Canvas;
    use crate::model::ModelConfig;
    use crate::scenegen::Raster;

    fn tiny(num_queries: usize) -> Model<f64> {
        let config = ModelConfig {
            d: 16,
            patch: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            num_queries,
            vocab_size: 48,
            max_seq_len: 24,
            img_h: 16,
            img_w: 16,
            tied_output: false,
        };
        Model::new(config, 3).unwrap()
    }

    fn patches(model: &Model<f64>) -> Arc<Array2<f64>> {
        let img = Raster::filled(Canvas { w: 16, h: 16 }, [120, 60, 200]);
        Arc::new(model.patchify(&img).unwrap())
    }

    #[test]
    fn shapes_follow_config() {
        let model = tiny(3);
        let mut f = SampleForward::new(&model);
        let v = f.encode_image(patches(&model)).unwrap();
        assert_eq!(f.tape.value(v).dim(), (4, 16));
        let text = f.encode_text(&[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(f.tape.value(text.var.unwrap()).dim(), (5, 16));
        let fused = f.fuse(v, &text).unwrap();
        // 3 queries + 4 patches + 5 tokens
        assert_eq!(f.tape.value(fused.var).dim(), (12, 16));
        let logits = f.decode_logits(&fused, &[1, 5, 6]).unwrap();
        assert_eq!(f.tape.value(logits).dim(), (3, 48));
    }

    #[test]
    fn empty_text_is_a_valid_context() {
        let model = tiny(2);
        let mut f = SampleForward::new(&model);
        let v = f.encode_image(patches(&model)).unwrap();
        let text = f.encode_text(&[]).unwrap();
        assert!(text.var.is_none());
        let fused = f.fuse(v, &text).unwrap();
        assert_eq!(f.tape.value(fused.var).dim(), (6, 16));
        assert!(f.decode_logits(&fused, &[1]).is_ok());
    }

    #[test]
    fn zero_queries_matches_plain_concat_form() {
        let model = tiny(0);
        let mut f = SampleForward::new(&model);
        let v = f.encode_image(patches(&model)).unwrap();
        let text = f.encode_text(&[5, 6]).unwrap();
        let fused = f.fuse(v, &text).unwrap();
        assert_eq!(f.tape.value(fused.var).dim(), (6, 16));
        // itm pooling falls back to the whole fused sequence
        let logits = f.itm_logits(&fused);
        assert_eq!(f.tape.value(logits).dim(), (1, 2));
    }

    #[test]
    fn determinism_across_reruns() {
        let model = tiny(2);
        let run = || {
            let mut f = SampleForward::new(&model);
            let v = f.encode_image(patches(&model)).unwrap();
            let text = f.encode_text(&[5, 6, 7]).unwrap();
            let fused = f.fuse(v, &text).unwrap();
            let logits = f.decode_logits(&fused, &[1, 9, 10]).unwrap();
            f.tape.value(logits).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn outputs_stay_finite_over_random_inputs() {
        use rand::Rng as _;
        let model = tiny(2);
        let mut rng = crate::rng::seeded(77);
        for _ in 0..100 {
            let mut f = SampleForward::new(&model);
            let raw = Array2::from_shape_fn((4, 192), |_| rng.random_range(0.0..1.0));
            let v = f.encode_image(Arc::new(raw)).unwrap();
            let n = rng.random_range(1..6usize);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(4..48u32)).collect();
            let text = f.encode_text(&ids).unwrap();
            let fused = f.fuse(v, &text).unwrap();
            let logits = f.decode_logits(&fused, &[1]).unwrap();
            assert!(f.tape.value(logits).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn overlong_and_out_of_vocab_rejected() {
        let model = tiny(2);
        let mut f = SampleForward::new(&model);
        let long: Vec<u32> = vec![5; 25];
        assert!(f.encode_text(&long).is_err());
        assert!(f.encode_text(&[99]).is_err());
    }

    #[test]
    fn padding_leaves_decoder_logits_unchanged() {
        let model = tiny(2);
        let logits_for = |ids: &[u32]| {
            let mut f = SampleForward::new(&model);
            let v = f.encode_image(patches(&model)).unwrap();
            let text = f.encode_text(ids).unwrap();
            let fused = f.fuse(v, &text).unwrap();
            let logits = f.decode_logits(&fused, &[1, 5]).unwrap();
            f.tape.value(logits).clone()
        };
        let clean = logits_for(&[5, 6, 7]);
        let padded = logits_for(&[5, 6, 7, PAD, PAD]);
        let max_diff = clean
            .iter()
            .zip(padded.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-5, "padding changed logits by {max_diff}");
    }

    #[test]
    fn masked_rows_cannot_influence_downstream_outputs() {
        // Rewriting the PAD embedding row rewrites every padded-out row's
        // content; with correct masking the decoder logits cannot move.
        let mut model = tiny(2);
        let logits_for = |m: &Model<f64>| {
            let mut f = SampleForward::new(m);
            let v = f.encode_image(patches(m)).unwrap();
            let text = f.encode_text(&[5, PAD, 6, PAD, 7]).unwrap();
            let fused = f.fuse(v, &text).unwrap();
            let logits = f.decode_logits(&fused, &[1, 7, 9]).unwrap();
            f.tape.value(logits).clone()
        };
        let before = logits_for(&model);
        let emb = model.model_tok_emb_id();
        model
            .params
            .array_mut(emb)
            .row_mut(PAD as usize)
            .mapv_inplace(|v| v + 10.0);
        let after = logits_for(&model);
        let max_diff = before
            .iter()
            .zip(after.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9, "masked pad rows leaked (diff {max_diff})");
    }

    #[test]
    fn causal_mask_shields_prefix_logits() {
        let model = tiny(2);
        let logits_for = |y: &[u32]| {
            let mut f = SampleForward::new(&model);
            let v = f.encode_image(patches(&model)).unwrap();
            let text = f.encode_text(&[5, 6]).unwrap();
            let fused = f.fuse(v, &text).unwrap();
            let logits = f.decode_logits(&fused, y).unwrap();
            f.tape.value(logits).clone()
        };
        let short = logits_for(&[1, 8, 9]);
        let long = logits_for(&[1, 8, 9, 30, 31]);
        for r in 0..3 {
            for c in 0..48 {
                let diff = (short[(r, c)] - long[(r, c)]).abs();
                assert!(diff < 1e-10, "position {r} leaked future tokens (diff {diff})");
            }
        }
    }

    #[test]
    fn softmax_of_logits_normalizes() {
        let model = tiny(2);
        let mut f = SampleForward::new(&model);
        let v = f.encode_image(patches(&model)).unwrap();
        let text = f.encode_text(&[5]).unwrap();
        let fused = f.fuse(v, &text).unwrap();
        let logits = f.decode_logits(&fused, &[1]).unwrap();
        let sm = f.tape.softmax_rows(logits);
        let total: f64 = f.tape.value(sm).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tied_output_uses_embedding_transpose() {
        let config = ModelConfig { tied_output: true, ..tiny(2).config };
        let model = Model::<f64>::new(config, 3).unwrap();
        assert!(model.params.id("out_proj.w").is_none());
        let mut f = SampleForward::new(&model);
        let v = f.encode_image(patches(&model)).unwrap();
        let text = f.encode_text(&[5]).unwrap();
        let fused = f.fuse(v, &text).unwrap();
        let logits = f.decode_logits(&fused, &[1, 6]).unwrap();
        assert_eq!(f.tape.value(logits).dim(), (2, 48));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let model = tiny(2);
        let mut f = SampleForward::new(&model);
        let v = f.encode_image(patches(&model)).unwrap();
        let text = f.encode_text(&[5, 6, 7]).unwrap();
        let ie = f.image_embedding(v);
        let te = f.text_embedding(&text).unwrap();
        // at init the raw embeddings are tiny, so the epsilon inside the
        // normalizer shows up at ~1e-7
        for e in [ie, te] {
            let norm: f64 = f.tape.value(e).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }
}
