//! Finite-difference verification of the analytic gradients of the
//! language-modeling loss through the whole model.
//!
//! Runs in f64. For each parameter group a deterministic sample of
//! coordinates is perturbed by +-eps and the central difference is compared
//! against the tape gradient.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng as _;

use super::{Model, ModelConfig, SampleForward};
use crate::autodiff::GradStore;
use crate::error::Result;
use crate::losses;
use crate::rng;

/// Worst relative error per parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

struct Fixture {
    patches: Arc<Array2<f64>>,
    instruction: Vec<u32>,
    y_in: Vec<u32>,
    targets: Vec<u32>,
    mask: Vec<bool>,
}

fn fixture(config: &ModelConfig, seed: u64) -> Fixture {
    let mut r = rng::derive(seed, "gradcheck", 0);
    let patch_dim = config.patch * config.patch * 3;
    let patches = Array2::from_shape_fn((config.n_patches(), patch_dim), |_| {
        r.random_range(0.0..1.0)
    });
    let tok = |r: &mut rng::Rng| r.random_range(4..config.vocab_size as u32);
    let instruction: Vec<u32> = (0..6).map(|_| tok(&mut r)).collect();
    let answer: Vec<u32> = (0..7).map(|_| tok(&mut r)).collect();
    let y_in: Vec<u32> = std::iter::once(crate::textio::BOS)
        .chain(answer.iter().copied())
        .collect();
    let targets: Vec<u32> = answer
        .iter()
        .copied()
        .chain(std::iter::once(crate::textio::EOS))
        .collect();
    let mask = vec![true; targets.len()];
    Fixture { patches: Arc::new(patches), instruction, y_in, targets, mask }
}

fn loss_of(model: &Model<f64>, fx: &Fixture) -> Result<f64> {
    let mut f = SampleForward::new(model);
    let v = f.encode_image(Arc::clone(&fx.patches))?;
    let text = f.encode_text(&fx.instruction)?;
    let fused = f.fuse(v, &text)?;
    let logits = f.decode_logits(&fused, &fx.y_in)?;
    let loss = losses::lm_cross_entropy(&mut f.tape, logits, &fx.targets, &fx.mask)?;
    Ok(f.tape.scalar(loss))
}

/// Checks analytic gradients of the generation loss against central finite
/// differences for every parameter group. `samples_per_group` coordinates are
/// probed per group (all of them for smaller groups).
pub fn check_lm_gradients(
    config: ModelConfig,
    seed: u64,
    samples_per_group: usize,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let fx = fixture(&config, seed);

    // analytic gradients
    let mut f = SampleForward::new(&model);
    let v = f.encode_image(Arc::clone(&fx.patches))?;
    let text = f.encode_text(&fx.instruction)?;
    let fused = f.fuse(v, &text)?;
    let logits = f.decode_logits(&fused, &fx.y_in)?;
    let loss = losses::lm_cross_entropy(&mut f.tape, logits, &fx.targets, &fx.mask)?;
    let mut grads = GradStore::new(model.params.len());
    f.tape
        .backward(&[(loss, Array2::from_elem((1, 1), 1.0))], &mut grads);
    drop(f);

    let param_list: Vec<(crate::autodiff::ParamId, String, (usize, usize))> = model
        .params
        .iter()
        .map(|(id, name, arr)| (id, name.to_string(), arr.dim()))
        .collect();

    let mut groups = Vec::with_capacity(param_list.len());
    let mut pick = rng::derive(seed, "gradcheck-pick", 1);
    for (id, name, (rows, cols)) in param_list {
        let total = rows * cols;
        let coords: Vec<(usize, usize)> = if total <= samples_per_group {
            (0..total).map(|i| (i / cols, i % cols)).collect()
        } else {
            (0..samples_per_group)
                .map(|_| {
                    let i = pick.random_range(0..total);
                    (i / cols, i % cols)
                })
                .collect()
        };
        let mut worst = 0.0f64;
        for (r, c) in coords {
            let original = model.params.array(id)[(r, c)];
            model.params.array_mut(id)[(r, c)] = original + eps;
            let plus = loss_of(&model, &fx)?;
            model.params.array_mut(id)[(r, c)] = original - eps;
            let minus = loss_of(&model, &fx)?;
            model.params.array_mut(id)[(r, c)] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[(r, c)]);
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        groups.push((name, worst));
    }
    Ok(GradCheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let config = ModelConfig {
            d: 16,
            patch: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            num_queries: 2,
            vocab_size: 48,
            max_seq_len: 24,
            img_h: 16,
            img_w: 16,
            tied_output: false,
        };
        let report = check_lm_gradients(config, 11, 6, 1e-4).unwrap();
        for (name, err) in &report.groups {
            assert!(err < &1e-3, "group {name} rel err {err}");
        }
    }
}
