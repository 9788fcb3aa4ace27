//! Training objectives: the language-modeling loss over answer tokens, the
//! ITC/ITG/ITM alignment terms, the cycle-consistency terms, and the full
//! criterion combining them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::QuantizedBox;

/// Per-term weights for the full criterion. Absent terms are weighted 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lm: f64,
    pub itc: f64,
    pub itg: f64,
    pub itm: f64,
    pub cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lm: 1.0, itc: 1.0, itg: 1.0, itm: 1.0, cyc: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lm", self.lm),
            ("itc", self.itc),
            ("itg", self.itg),
            ("itm", self.itm),
            ("cyc", self.cyc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::NegativeWeight(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Weights for pure language-model training (the activation stage).
    pub fn lm_only() -> Self {
        Self { lm: 1.0, itc: 0.0, itg: 0.0, itm: 0.0, cyc: 0.0 }
    }
}

/// One step's loss terms. `total` is always the weighted sum of the other
/// fields (see [`full_criterion`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub itc: f64,
    pub itg: f64,
    pub itm: f64,
    pub cyc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.lm, self.itc, self.itg, self.itm, self.cyc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Combines loss terms into the full criterion: a weighted sum of the
/// generation, alignment, and cycle terms.
pub fn full_criterion(
    lm: f64,
    itc: f64,
    itg: f64,
    itm: f64,
    cyc: f64,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let total =
        weights.lm * lm + weights.itc * itc + weights.itg * itg + weights.itm * itm + weights.cyc * cyc;
    Ok(LossBreakdown { lm, itc, itg, itm, cyc, total, weights })
}

/// Mean cross entropy over the answer positions of a decoded sequence.
/// `answer_mask[j]` marks rows that count (prompt/question rows excluded).
pub fn lm_cross_entropy<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[u32],
    answer_mask: &[bool],
) -> Result<Var> {
    let rows = tape.value(logits).nrows();
    if targets.len() != rows || answer_mask.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "lm loss: logits rows {rows}, targets {}, mask {}",
            targets.len(),
            answer_mask.len()
        )));
    }
    let count = answer_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let w = F::from_f64(1.0 / count as f64);
    let weights: Vec<F> = answer_mask
        .iter()
        .map(|&m| if m { w } else { F::zero() })
        .collect();
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(tape.cross_entropy_rows(logits, Arc::new(t), Arc::new(weights)))
}

/// The image-grounded text generation term: the same computation as
/// [`lm_cross_entropy`], kept separate so alignment can be reported on its
/// own in the full criterion.
pub fn itg_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[u32],
    answer_mask: &[bool],
) -> Result<Var> {
    lm_cross_entropy(tape, logits, targets, answer_mask)
}

/// Two-way image-text matching loss for one (pair, label) on the tape.
pub fn itm_loss_node<F: Scalar>(tape: &mut Tape<F>, logits2: Var, matched: bool) -> Var {
    debug_assert_eq!(tape.value(logits2).dim(), (1, 2));
    let target = usize::from(matched);
    tape.cross_entropy_rows(logits2, Arc::new(vec![target]), Arc::new(vec![F::one()]))
}

/// Binary cross entropy of a two-way head, value only.
pub fn itm_loss(logits: [f64; 2], matched: bool) -> f64 {
    let max = logits[0].max(logits[1]);
    let lse = ((logits[0] - max).exp() + (logits[1] - max).exp()).ln() + max;
    lse - logits[usize::from(matched)]
}

/// Symmetric InfoNCE over in-batch pairs, plus analytic gradients.
///
/// `img` and `txt` are `[n, d]` row-wise embeddings (callers normalize);
/// `logit_scale` is the log of the inverse temperature, trained alongside the
/// model. Returns `(loss, d_img, d_txt, d_logit_scale)`.
pub fn itc_loss_with_grads<F: Scalar>(
    img: &Array2<F>,
    txt: &Array2<F>,
    logit_scale: F,
) -> Result<(F, Array2<F>, Array2<F>, F)> {
    let n = img.nrows();
    if n == 0 {
        return Err(Error::ShapeMismatch("itc needs at least one pair".into()));
    }
    if txt.nrows() != n || txt.ncols() != img.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "itc embeddings disagree: {:?} vs {:?}",
            img.dim(),
            txt.dim()
        )));
    }
    let scale = logit_scale.exp();
    let logits = img.dot(&txt.t()) * scale; // [n, n]
    let half = F::from_f64(0.5 / n as f64);

    let mut loss = F::zero();
    let mut dlogits: Array2<F> = Array2::zeros((n, n));
    // image -> text direction: softmax over each row, target = diagonal
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let denom = row.iter().map(|&z| (z - max).exp()).sum::<F>();
        loss += half * (denom.ln() + max - logits[(i, i)]);
        for j in 0..n {
            let p = (logits[(i, j)] - max).exp() / denom;
            dlogits[(i, j)] += half * (p - if i == j { F::one() } else { F::zero() });
        }
    }
    // text -> image direction: softmax over each column
    for j in 0..n {
        let col = logits.column(j);
        let max = col.iter().cloned().fold(F::neg_infinity(), F::max);
        let denom = col.iter().map(|&z| (z - max).exp()).sum::<F>();
        loss += half * (denom.ln() + max - logits[(j, j)]);
        for i in 0..n {
            let p = (logits[(i, j)] - max).exp() / denom;
            dlogits[(i, j)] += half * (p - if i == j { F::one() } else { F::zero() });
        }
    }

    let d_img = dlogits.dot(txt) * scale;
    let d_txt = dlogits.t().dot(img) * scale;
    // logits scale linearly with exp(logit_scale)
    let d_ls = (&dlogits * &logits).sum();
    Ok((loss, d_img, d_txt, d_ls))
}

/// Contrastive loss value at a given temperature (`tau`), no gradients.
pub fn itc_loss(img: &Array2<f64>, txt: &Array2<f64>, temperature: f64) -> Result<f64> {
    let ls = (1.0 / temperature).ln();
    itc_loss_with_grads(img, txt, ls).map(|(loss, _, _, _)| loss)
}

/// Token-level Levenshtein distance.
pub fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Box term when the reconstruction step produced nothing parseable.
pub const CYCLE_BOX_MAX_PENALTY: f64 = 1000.0;

/// Cycle terms: mean absolute difference of the four quantized coordinates
/// for the box direction, normalized token edit distance for the text
/// direction. An unparseable reconstruction takes the maximum box penalty.
pub fn cycle_consistency(
    x: &QuantizedBox,
    x_rec: Option<&QuantizedBox>,
    y: &[u32],
    y_rec: &[u32],
) -> (f64, f64) {
    let box_term = match x_rec {
        Some(r) => {
            let a = x.corners();
            let b = r.corners();
            a.iter()
                .zip(b.iter())
                .map(|(&p, &q)| (f64::from(p) - f64::from(q)).abs())
                .sum::<f64>()
                / 4.0
        }
        None => CYCLE_BOX_MAX_PENALTY,
    };
    let denom = y.len().max(y_rec.len());
    let text_term = if denom == 0 {
        0.0
    } else {
        levenshtein(y, y_rec) as f64 / denom as f64
    };
    (box_term, text_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradStore, ParamId};
    use ndarray::array;

    #[test]
    fn lm_loss_analytic_values() {
        // uniform logits over V classes cost ln V
        let v = 100;
        let mut tape = Tape::<f64>::new();
        let logits = tape.input(Array2::zeros((3, v)));
        let loss = lm_cross_entropy(&mut tape, logits, &[5, 7, 9], &[true, true, true]).unwrap();
        assert!((tape.scalar(loss) - (v as f64).ln()).abs() < 1e-9);

        // near-one-hot predictions cost almost nothing
        let mut tape = Tape::<f64>::new();
        let mut hot = Array2::from_elem((2, 10), -100.0);
        hot[(0, 3)] = 100.0;
        hot[(1, 4)] = 100.0;
        let logits = tape.input(hot);
        let loss = lm_cross_entropy(&mut tape, logits, &[3, 4], &[true, true]).unwrap();
        assert!(tape.scalar(loss) < 1e-6);
    }

    #[test]
    fn lm_loss_mask_equals_answer_only_recompute() {
        let logits_full = Array2::from_shape_fn((5, 8), |(r, c)| ((r * 8 + c) as f64 * 0.37).sin());
        let targets = [1u32, 2, 3, 4, 5];
        // mask the first two positions (the "question")
        let mask = [false, false, true, true, true];
        let mut tape = Tape::<f64>::new();
        let l = tape.input(logits_full.clone());
        let masked = lm_cross_entropy(&mut tape, l, &targets, &mask).unwrap();
        let masked_val = tape.scalar(masked);

        let mut tape2 = Tape::<f64>::new();
        let answer_logits = logits_full.slice(ndarray::s![2.., ..]).to_owned();
        let l2 = tape2.input(answer_logits);
        let ans = lm_cross_entropy(&mut tape2, l2, &targets[2..], &[true, true, true]).unwrap();
        assert!((masked_val - tape2.scalar(ans)).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_rejects_empty_mask() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.input(Array2::zeros((2, 4)));
        let err = lm_cross_entropy(&mut tape, logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::EmptyMask));
    }

    #[test]
    fn itm_analytic_values_and_flip_identity() {
        assert!((itm_loss([0.0, 0.0], true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(itm_loss([-20.0, 20.0], true) < 1e-6);
        for logits in [[0.3, -1.2], [2.0, 2.0], [-0.5, 4.0]] {
            for label in [true, false] {
                let flipped = itm_loss(logits, !label);
                let negated = itm_loss([-logits[0], -logits[1]], label);
                assert!((flipped - negated).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn itc_single_pair_is_free() {
        let img = array![[1.0, 0.0]];
        let txt = array![[1.0, 0.0]];
        assert!(itc_loss(&img, &txt, 0.07).unwrap().abs() < 1e-12);
    }

    #[test]
    fn itc_matched_orthogonal_pairs_vanish_at_low_temperature() {
        let img = array![[1.0, 0.0], [0.0, 1.0]];
        let txt = array![[1.0, 0.0], [0.0, 1.0]];
        let warm = itc_loss(&img, &txt, 0.5).unwrap();
        let cold = itc_loss(&img, &txt, 0.01).unwrap();
        assert!(cold < warm);
        assert!(cold < 1e-9);
    }

    #[test]
    fn itc_invariant_under_joint_permutation() {
        let img = array![[0.8, 0.6], [0.0, 1.0], [1.0, 0.0]];
        let txt = array![[0.6, 0.8], [0.1, 0.99], [0.9, 0.1]];
        let a = itc_loss(&img, &txt, 0.07).unwrap();
        let perm = [2usize, 0, 1];
        let pick = |m: &Array2<f64>| {
            let rows: Vec<_> = perm.iter().map(|&i| m.row(i).to_owned()).collect();
            let mut out = Array2::zeros((3, 2));
            for (r, row) in rows.iter().enumerate() {
                out.row_mut(r).assign(row);
            }
            out
        };
        let b = itc_loss(&pick(&img), &pick(&txt), 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn itc_gradients_match_finite_differences() {
        let img = array![[0.8, 0.6, 0.0], [0.0, 0.6, 0.8], [0.6, 0.0, 0.8]];
        let txt = array![[0.6, 0.8, 0.0], [0.1, 0.3, 0.9], [0.7, 0.1, 0.7]];
        let ls = (1.0f64 / 0.2).ln();
        let (_, d_img, d_txt, d_ls) = itc_loss_with_grads(&img, &txt, ls).unwrap();
        let eps = 1e-6;
        let f = |im: &Array2<f64>, tx: &Array2<f64>, l: f64| {
            itc_loss_with_grads(im, tx, l).unwrap().0
        };
        for r in 0..3 {
            for c in 0..3 {
                let mut p = img.clone();
                p[(r, c)] += eps;
                let mut m = img.clone();
                m[(r, c)] -= eps;
                let num = (f(&p, &txt, ls) - f(&m, &txt, ls)) / (2.0 * eps);
                assert!((num - d_img[(r, c)]).abs() < 1e-7, "img ({r},{c})");
                let mut p = txt.clone();
                p[(r, c)] += eps;
                let mut m = txt.clone();
                m[(r, c)] -= eps;
                let num = (f(&img, &p, ls) - f(&img, &m, ls)) / (2.0 * eps);
                assert!((num - d_txt[(r, c)]).abs() < 1e-7, "txt ({r},{c})");
            }
        }
        let num = (f(&img, &txt, ls + eps) - f(&img, &txt, ls - eps)) / (2.0 * eps);
        assert!((num - d_ls).abs() < 1e-7, "logit scale");
    }

    #[test]
    fn itm_node_matches_pure_value_and_gradcheck() {
        let logits = array![[0.7, -0.4]];
        let mut tape = Tape::<f64>::new();
        let p = tape.param(ParamId(0), std::sync::Arc::new(logits.clone()));
        let loss = itm_loss_node(&mut tape, p, true);
        assert!((tape.scalar(loss) - itm_loss([0.7, -0.4], true)).abs() < 1e-12);
        let mut grads = GradStore::new(1);
        tape.backward(&[(loss, array![[1.0]])], &mut grads);
        let g = grads.get(ParamId(0)).unwrap().clone();
        let eps = 1e-6;
        for c in 0..2 {
            let mut p = logits.clone();
            p[(0, c)] += eps;
            let mut m = logits.clone();
            m[(0, c)] -= eps;
            let num = (itm_loss([p[(0, 0)], p[(0, 1)]], true)
                - itm_loss([m[(0, 0)], m[(0, 1)]], true))
                / (2.0 * eps);
            assert!((num - g[(0, c)]).abs() < 1e-8);
        }
    }

    #[test]
    fn cycle_terms_reference_values() {
        let x = QuantizedBox::new(122, 366, 393, 898).unwrap();
        let x_rec = QuantizedBox::new(150, 366, 393, 898).unwrap();
        let (box_term, text_term) = cycle_consistency(&x, Some(&x_rec), &[1, 2, 3], &[1, 2, 3]);
        assert!((box_term - 7.0).abs() < 1e-12);
        assert_eq!(text_term, 0.0);

        let (box_none, _) = cycle_consistency(&x, None, &[], &[]);
        assert_eq!(box_none, CYCLE_BOX_MAX_PENALTY);

        let y: Vec<u32> = (0..10).collect();
        let mut y_sub = y.clone();
        y_sub[4] = 99;
        let (_, t) = cycle_consistency(&x, Some(&x), &y, &y_sub);
        assert!((t - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cycle_box_term_is_a_metric() {
        use rand::Rng as _;
        let mut rng = crate::rng::seeded(4);
        let mut random_box = || {
            let mut v = || rng.random_range(0..=1000u32);
            let (a, b, c, d) = (v(), v(), v(), v());
            QuantizedBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap()
        };
        for _ in 0..200 {
            let (a, b, c) = (random_box(), random_box(), random_box());
            let d = |x: &QuantizedBox, y: &QuantizedBox| cycle_consistency(x, Some(y), &[], &[]).0;
            assert_eq!(d(&a, &a), 0.0);
            assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
            assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
            if a != b {
                assert!(d(&a, &b) > 0.0);
            }
        }
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(&[], &[]), 0);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(levenshtein(&[1, 2], &[3, 4, 5]), 3);
    }

    #[test]
    fn full_criterion_additivity_and_validation() {
        let w = LossWeights::default();
        let b = full_criterion(0.0, 0.0, 0.0, 0.0, 0.0, w).unwrap();
        assert_eq!(b.total, 0.0);
        let b = full_criterion(1.0, 2.0, 3.0, 4.0, 5.0, w).unwrap();
        assert!((b.total - 15.0).abs() < 1e-12);
        let recomputed = w.lm * b.lm + w.itc * b.itc + w.itg * b.itg + w.itm * b.itm + w.cyc * b.cyc;
        assert!((b.total - recomputed).abs() < 1e-9);

        let bad = LossWeights { itm: -0.5, ..LossWeights::default() };
        assert!(full_criterion(1.0, 1.0, 1.0, 1.0, 1.0, bad).is_err());
    }

    #[test]
    fn term_nonnegativity_under_fuzz() {
        use rand::Rng as _;
        let mut rng = crate::rng::seeded(9);
        for _ in 0..100 {
            let n = rng.random_range(1..5usize);
            let d = 4;
            let mk = |rng: &mut crate::rng::Rng| {
                let mut a = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
                for mut row in a.rows_mut() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                    row.mapv_inplace(|v| v / norm);
                }
                a
            };
            let img = mk(&mut rng);
            let txt = mk(&mut rng);
            let loss = itc_loss(&img, &txt, 0.07).unwrap();
            assert!(loss.is_finite() && loss >= -1e-12);
            let l = itm_loss(
                [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                rng.random_range(0..2) == 1,
            );
            assert!(l.is_finite() && l >= 0.0);
        }
    }
}
