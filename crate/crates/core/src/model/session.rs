//! Incremental decoding sessions.
//!
//! The encoders and fusion run once per (image, instruction); the decoder then
//! advances one token at a time against cached self-attention keys/values and
//! precomputed cross-attention keys/values. This is a separate code path from
//! the tape decoder on purpose — a dual-path test pins the two together.

use std::sync::Arc;

use ndarray::{s, Array2};

use super::forward::SampleForward;
use super::Model;
use crate::autodiff::{Scalar, MASK_NEG};
use crate::error::{Error, Result};

#[derive(Clone)]
struct LayerCache<F: Scalar> {
    self_k: Array2<F>,
    self_v: Array2<F>,
    cross_k: Array2<F>,
    cross_v: Array2<F>,
}

/// One in-flight generation. Cloning a session forks the decode state, which
/// is how beam search branches.
#[derive(Clone)]
pub struct Session<'m, F: Scalar> {
    model: &'m Model<F>,
    /// Additive bias over fused positions (0 or a large negative number).
    cross_bias: Vec<F>,
    layers: Vec<LayerCache<F>>,
    pos: usize,
    logits: Option<Vec<F>>,
}

impl<'m, F: Scalar> Session<'m, F> {
    /// Encodes the image and instruction and prepares decoder caches.
    pub fn new(model: &'m Model<F>, patches: Arc<Array2<F>>, instruction: &[u32]) -> Result<Self> {
        let mut f = SampleForward::new(model);
        let v = f.encode_image(patches)?;
        let text = f.encode_text(instruction)?;
        let fused_parts = f.fuse(v, &text)?;
        let fused = f.tape.value(fused_parts.var).clone();
        let cross_bias = fused_parts
            .mask
            .iter()
            .map(|&ok| if ok { F::zero() } else { F::from_f64(MASK_NEG) })
            .collect();

        let p = &model.params;
        let layers = model
            .ids
            .dec_layers
            .iter()
            .map(|blk| LayerCache {
                self_k: Array2::zeros((0, model.config.d)),
                self_v: Array2::zeros((0, model.config.d)),
                cross_k: linear(&fused, p.array(blk.cross_attn.wk), p.array(blk.cross_attn.bk)),
                cross_v: linear(&fused, p.array(blk.cross_attn.wv), p.array(blk.cross_attn.bv)),
            })
            .collect();

        Ok(Self { model, cross_bias, layers, pos: 0, logits: None })
    }

    /// Feeds one token and computes logits for the following position.
    pub fn advance(&mut self, token: u32) -> Result<()> {
        let cfg = &self.model.config;
        if self.pos + 1 >= cfg.max_seq_len {
            return Err(Error::ShapeMismatch(format!(
                "decode exceeded max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::ShapeMismatch(format!("token {token} outside vocabulary")));
        }
        let p = &self.model.params;
        let ids = &self.model.ids;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        // token embedding + sinusoidal position
        let mut x: Array2<F> = p
            .array(ids.tok_emb)
            .row(token as usize)
            .to_owned()
            .insert_axis(ndarray::Axis(0));
        let pos_row = self.model.sin_pos.slice(s![self.pos..self.pos + 1, ..]);
        x = &x + &pos_row;

        for (blk, cache) in ids.dec_layers.iter().zip(self.layers.iter_mut()) {
            // causal self-attention over the growing cache
            let h = layer_norm(&x, p.array(blk.ln1_g), p.array(blk.ln1_b));
            let q = linear(&h, p.array(blk.self_attn.wq), p.array(blk.self_attn.bq));
            let k_new = linear(&h, p.array(blk.self_attn.wk), p.array(blk.self_attn.bk));
            let v_new = linear(&h, p.array(blk.self_attn.wv), p.array(blk.self_attn.bv));
            cache.self_k = append_row(&cache.self_k, &k_new);
            cache.self_v = append_row(&cache.self_v, &v_new);
            let attn = multihead_row(&q, &cache.self_k, &cache.self_v, heads, dh, scale, None);
            let attn = linear(&attn, p.array(blk.self_attn.wo), p.array(blk.self_attn.bo));
            x = &x + &attn;

            // cross attention over the fused sequence
            let h = layer_norm(&x, p.array(blk.lnc_g), p.array(blk.lnc_b));
            let q = linear(&h, p.array(blk.cross_attn.wq), p.array(blk.cross_attn.bq));
            let attn = multihead_row(
                &q,
                &cache.cross_k,
                &cache.cross_v,
                heads,
                dh,
                scale,
                Some(&self.cross_bias),
            );
            let attn = linear(&attn, p.array(blk.cross_attn.wo), p.array(blk.cross_attn.bo));
            x = &x + &attn;

            // feed-forward
            let h = layer_norm(&x, p.array(blk.ln2_g), p.array(blk.ln2_b));
            let m = linear(&h, p.array(blk.mlp.w1), p.array(blk.mlp.b1));
            let m = m.mapv(crate::autodiff::gelu_scalar);
            let m = linear(&m, p.array(blk.mlp.w2), p.array(blk.mlp.b2));
            x = &x + &m;
        }

        let x = layer_norm(&x, p.array(ids.final_ln_g), p.array(ids.final_ln_b));
        let logits = match ids.out_w {
            Some(w) => linear(&x, p.array(w), p.array(ids.out_b)),
            None => {
                let emb = p.array(ids.tok_emb);
                let prod = x.dot(&emb.t());
                &prod + p.array(ids.out_b).as_ref()
            }
        };
        debug_assert_eq!(logits.nrows(), 1);
        self.logits = Some(logits.row(0).to_vec());
        self.pos += 1;
        Ok(())
    }

    /// Logits for the next position; call after at least one [`Self::advance`].
    pub fn next_logits(&self) -> &[F] {
        self.logits
            .as_deref()
            .expect("advance() must run before next_logits()")
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Tokens that can still be fed before hitting max_seq_len.
    pub fn remaining(&self) -> usize {
        (self.model.config.max_seq_len - 1).saturating_sub(self.pos)
    }
}

fn linear<F: Scalar>(x: &Array2<F>, w: &Arc<Array2<F>>, b: &Arc<Array2<F>>) -> Array2<F> {
    let prod = x.dot(w.as_ref());
    &prod + b.as_ref()
}

fn append_row<F: Scalar>(base: &Array2<F>, row: &Array2<F>) -> Array2<F> {
    ndarray::concatenate(ndarray::Axis(0), &[base.view(), row.view()])
        .expect("cache rows share dims")
}

fn layer_norm<F: Scalar>(x: &Array2<F>, g: &Arc<Array2<F>>, b: &Arc<Array2<F>>) -> Array2<F> {
    let eps = F::from_f64(1e-5);
    let n = F::from_f64(x.ncols() as f64);
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.iter().cloned().sum::<F>() / n;
        let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<F>() / n;
        let inv = (var + eps).sqrt().recip();
        row.mapv_inplace(|z| (z - mean) * inv);
    }
    let out = &out * g.as_ref() + b.as_ref();
    out
}

/// Multi-head attention for a single query row against cached keys/values.
fn multihead_row<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    heads: usize,
    dh: usize,
    scale: F,
    bias: Option<&[F]>,
) -> Array2<F> {
    let mut out = Array2::zeros((1, heads * dh));
    let n = k.nrows();
    let mut weights = vec![F::zero(); n];
    for h in 0..heads {
        let c0 = h * dh;
        for (i, w) in weights.iter_mut().enumerate() {
            let mut dot = F::zero();
            for c in 0..dh {
                dot += q[(0, c0 + c)] * k[(i, c0 + c)];
            }
            *w = dot * scale + bias.map_or(F::zero(), |b| b[i]);
        }
        let max = weights.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            denom += *w;
        }
        for c in 0..dh {
            let mut acc = F::zero();
            for (i, w) in weights.iter().enumerate() {
                acc += *w * v[(i, c0 + c)];
            }
            out[(0, c0 + c)] = acc / denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Canvas;
    use crate::model::ModelConfig;
    use crate::scenegen::Raster;

    fn model() -> Model<f64> {
        let config = ModelConfig {
            d: 16,
            patch: 8,
            enc_layers: 1,
            dec_layers: 2,
            heads: 2,
            num_queries: 2,
            vocab_size: 48,
            max_seq_len: 16,
            img_h: 16,
            img_w: 16,
            tied_output: false,
        };
        Model::new(config, 21).unwrap()
    }

    fn patches(m: &Model<f64>) -> Arc<Array2<f64>> {
        let img = Raster::filled(Canvas { w: 16, h: 16 }, [40, 90, 160]);
        Arc::new(m.patchify(&img).unwrap())
    }

    #[test]
    fn incremental_decoding_matches_full_rerun() {
        let m = model();
        let instruction = [5u32, 6, 7];
        let sequence = [1u32, 10, 11, 12, 13];

        // full teacher-forced logits via the tape
        let mut f = SampleForward::new(&m);
        let v = f.encode_image(patches(&m)).unwrap();
        let text = f.encode_text(&instruction).unwrap();
        let fused = f.fuse(v, &text).unwrap();
        let logits = f.decode_logits(&fused, &sequence).unwrap();
        let full = f.tape.value(logits).clone();

        // incremental logits via the session
        let mut s = Session::new(&m, patches(&m), &instruction).unwrap();
        for (j, &tok) in sequence.iter().enumerate() {
            s.advance(tok).unwrap();
            let inc = s.next_logits();
            for c in 0..full.ncols() {
                let diff = (full[(j, c)] - inc[c]).abs();
                assert!(diff < 1e-5, "position {j} column {c} differs by {diff}");
            }
        }
    }

    #[test]
    fn cloned_sessions_diverge_independently() {
        let m = model();
        let mut a = Session::new(&m, patches(&m), &[5]).unwrap();
        a.advance(1).unwrap();
        let mut b = a.clone();
        a.advance(10).unwrap();
        b.advance(20).unwrap();
        let la = a.next_logits().to_vec();
        let lb = b.next_logits().to_vec();
        assert_ne!(la, lb);
        assert_eq!(a.position(), b.position());
    }

    #[test]
    fn session_rejects_overflow_and_bad_tokens() {
        let m = model();
        let mut s = Session::new(&m, patches(&m), &[5]).unwrap();
        assert!(s.advance(99).is_err());
        for t in 0..s.remaining() {
            s.advance((4 + t) as u32).unwrap();
        }
        assert!(s.advance(4).is_err());
    }
}
