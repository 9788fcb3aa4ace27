//! Two-stage training: coordinate activation on detection captions, then
//! cycle training of expression generation (G) and comprehension (F).
//!
//! Each optimizer step runs per-sample tapes in a fixed number of chunks and
//! merges gradients in a fixed order, so runs are reproducible bit for bit
//! for a given (seed, config, corpus) regardless of thread scheduling.

mod optim;

pub use optim::{clip_global_norm, lr_at, AdamW, AdamWConfig, Schedule};

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradStore, Var};
use crate::dataset::{Corpus, Split};
use crate::decode::{beam_search, BeamConfig};
use crate::error::{Error, Result};
use crate::eval::{cycle_round_trip_case, AnswerGenerator, EvalCase, ModelGenerator, PatchCache};
use crate::geometry::{quantize, QuantizedBox};
use crate::losses::{
    full_criterion, itc_loss_with_grads, itm_loss_node, lm_cross_entropy, LossWeights,
};
use crate::model::{Model, SampleForward, Session};
use crate::rng;
use crate::textio::{
    build_det_captions, build_rec_pair, build_reg_pair, parse_box, split_reg_answer, TaskKind,
    Vocabulary, BOS, EOS,
};

/// Fixed chunk count for deterministic parallel gradient accumulation.
pub const NUM_CHUNKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Activation,
    Cycle,
}

fn default_epochs() -> usize {
    20
}
fn default_lr() -> f64 {
    2e-5
}
fn default_batch() -> usize {
    32
}
fn default_cycle_batch() -> usize {
    2
}
fn default_pseudo_ratio() -> f64 {
    1.0
}
fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}
fn default_schedule() -> Schedule {
    Schedule::Cosine
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adamw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub adamw: AdamWConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub stage: Stage,
    /// Parameter-name prefixes to freeze ("" freezes everything).
    pub freeze: Vec<String>,
    pub loss_weights: LossWeights,
    /// Cycle-metric minibatch per step (0 disables the per-step round trips).
    pub cycle_batch: usize,
    /// Gold-to-pseudo mixing ratio for comprehension batches (1.0 = 1:1).
    pub pseudo_ratio: f64,
    /// When set, the box-reconstruction cross entropy (original box tokens as
    /// targets, generated expression as input) joins the optimized objective
    /// weighted by the cycle weight.
    pub cycle_backprop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            lr: default_lr(),
            schedule: default_schedule(),
            warmup_steps: 0,
            batch_size: default_batch(),
            optimizer: OptimizerKind::Adamw,
            adamw: AdamWConfig::default(),
            grad_clip: default_grad_clip(),
            seed: 0,
            stage: Stage::Activation,
            freeze: Vec::new(),
            loss_weights: LossWeights::default(),
            cycle_batch: default_cycle_batch(),
            pseudo_ratio: default_pseudo_ratio(),
            cycle_backprop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        self.loss_weights.validate()?;
        match self.stage {
            Stage::Activation if self.loss_weights.lm <= 0.0 => Err(Error::InvalidConfig(
                "activation stage needs a positive lm weight".into(),
            )),
            Stage::Cycle if self.loss_weights.itg <= 0.0 => Err(Error::InvalidConfig(
                "cycle stage needs a positive itg weight".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::hash::sha256_hex(&[json.as_bytes()])[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Gold,
    Pseudo,
}

/// One training record: an image, an instruction, and a target answer.
#[derive(Debug, Clone)]
pub struct GroundingSample {
    pub id: String,
    pub patches: Arc<Array2<f32>>,
    pub instruction: String,
    pub target: String,
    pub task: TaskKind,
    pub qbox: Option<QuantizedBox>,
    pub provenance: Provenance,
    /// Checkpoint id of the generator, for pseudo samples.
    pub generator: Option<String>,
    pub instr_ids: Vec<u32>,
    pub y_in: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub answer_mask: Vec<bool>,
}

impl GroundingSample {
    pub fn new(
        id: String,
        patches: Arc<Array2<f32>>,
        instruction: String,
        target: String,
        task: TaskKind,
        qbox: Option<QuantizedBox>,
        provenance: Provenance,
        generator: Option<String>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if task == TaskKind::Rec && parse_box(&target).is_none() {
            return Err(Error::InvalidConfig(format!(
                "comprehension sample {id} has no parseable box in its answer"
            )));
        }
        let instr_ids = vocab.tokenize(&instruction);
        let answer_ids = vocab.tokenize(&target);
        let y_in: Vec<u32> = std::iter::once(BOS).chain(answer_ids.iter().copied()).collect();
        let target_ids: Vec<u32> = answer_ids.iter().copied().chain(std::iter::once(EOS)).collect();
        let answer_mask = vec![true; target_ids.len()];
        Ok(Self {
            id,
            patches,
            instruction,
            target,
            task,
            qbox,
            provenance,
            generator,
            instr_ids,
            y_in,
            target_ids,
            answer_mask,
        })
    }
}

/// Builds gold samples of one task kind from a corpus split.
pub fn build_samples(
    corpus: &Corpus,
    cache: &PatchCache,
    split: Split,
    kind: TaskKind,
    vocab: &Vocabulary,
    max_expressions_per_scene: Option<usize>,
) -> Result<Vec<GroundingSample>> {
    let mut out = Vec::new();
    for idx in corpus.indices_of(split) {
        let record = &corpus.records[idx];
        let patches = Arc::clone(&cache.patches[idx]);
        match kind {
            TaskKind::DetCaption => {
                let objects: Vec<(String, QuantizedBox)> = record
                    .objects
                    .iter()
                    .map(|o| -> Result<_> {
                        let class = format!("{} {}", o.color.word(), o.shape.word());
                        Ok((class, quantize(o.box_px, record.canvas)?))
                    })
                    .collect::<Result<_>>()?;
                let target = build_det_captions(&objects);
                out.push(GroundingSample::new(
                    format!("{}/det", record.id),
                    patches,
                    String::new(),
                    target,
                    kind,
                    None,
                    Provenance::Gold,
                    None,
                    vocab,
                )?);
            }
            TaskKind::Reg | TaskKind::Rec => {
                let cap = max_expressions_per_scene.unwrap_or(usize::MAX);
                for (ei, expr) in record.expressions.iter().take(cap).enumerate() {
                    let obj = &record.objects[expr.target_index];
                    let qbox = quantize(obj.box_px, record.canvas)?;
                    let (instruction, target) = match kind {
                        TaskKind::Reg => {
                            let (q, a) = build_reg_pair(qbox);
                            (q, a.fill(&expr.text))
                        }
                        TaskKind::Rec => {
                            let (q, a) = build_rec_pair(&expr.text);
                            (q, a.fill(qbox))
                        }
                        TaskKind::DetCaption => unreachable!(),
                    };
                    out.push(GroundingSample::new(
                        format!("{}/{:?}{}", record.id, kind, ei),
                        Arc::clone(&patches),
                        instruction,
                        target,
                        kind,
                        Some(qbox),
                        Provenance::Gold,
                        None,
                        vocab,
                    )?);
                }
            }
        }
    }
    Ok(out)
}

/// One CSV row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lm: f64,
    pub itc: f64,
    pub itg: f64,
    pub itm: f64,
    pub cyc_box: f64,
    pub cyc_text: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("step,lm,itc,itg,itm,cyc_box,cyc_text,total\n");
        for r in &self.rows {
            body.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.step, r.lm, r.itc, r.itg, r.itm, r.cyc_box, r.cyc_text, r.total
            ));
        }
        std::fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn mean_total_of_last(&self, n: usize) -> f64 {
        let take = n.min(self.rows.len());
        if take == 0 {
            return 0.0;
        }
        self.rows[self.rows.len() - take..]
            .iter()
            .map(|r| r.total)
            .sum::<f64>()
            / take as f64
    }
}

/// Progress callbacks for long runs.
pub enum Progress {
    EpochDone { epoch: u64, steps: u64, mean_total: f64 },
}

pub type ProgressFn<'a> = &'a mut dyn FnMut(Progress);

/// Mean values actually realized by one forward/backward pass.
#[derive(Debug, Clone, Copy, Default)]
struct PassTerms {
    gen: f64,
    itc: f64,
    itm: f64,
}

struct SamplePass<'m> {
    forward: SampleForward<'m, f32>,
    objective: Var,
    gen_value: f64,
    itm_value: Option<f64>,
    img_emb: Option<Var>,
    txt_emb: Option<Var>,
}

/// Forward + backward over one batch, accumulating into `grads`.
///
/// The generation term and the matching term live on each sample's tape; the
/// contrastive term is computed across the batch from pooled embeddings and
/// injected as seed gradients, with the temperature gradient accumulated
/// directly.
fn batch_pass(
    model: &Model<f32>,
    batch: &[&GroundingSample],
    gen_weight: f64,
    itc_weight: f64,
    itm_weight: f64,
    grads: &mut GradStore<f32>,
    diverged: &mut bool,
) -> Result<PassTerms> {
    let n = batch.len();
    if n == 0 {
        return Ok(PassTerms::default());
    }
    let want_itc = itc_weight > 0.0 && n >= 2;
    let want_itm = itm_weight > 0.0 && n >= 2;

    // deterministic in-batch negatives: neighbor text, one step around
    let neg_ids: Vec<&[u32]> = (0..n)
        .map(|i| batch[(i + 1) % n].instr_ids.as_slice())
        .collect();

    let chunk = n.div_ceil(NUM_CHUNKS).max(1);
    let passes: Vec<Result<Vec<SamplePass>>> = batch
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, samples)| {
            samples
                .iter()
                .enumerate()
                .map(|(si, sample)| {
                    let i = ci * chunk + si;
                    let mut f = SampleForward::new(model);
                    let visual = f.encode_image(Arc::clone(&sample.patches))?;
                    let text = f.encode_text(&sample.instr_ids)?;
                    let fused = f.fuse(visual, &text)?;
                    let logits = f.decode_logits(&fused, &sample.y_in)?;
                    let gen = lm_cross_entropy(
                        &mut f.tape,
                        logits,
                        &sample.target_ids,
                        &sample.answer_mask,
                    )?;
                    let gen_value = f.tape.scalar(gen) as f64;
                    let mut objective_parts = vec![(gen, gen_weight as f32)];

                    let mut itm_value = None;
                    if want_itm && !sample.instr_ids.is_empty() && !neg_ids[i].is_empty() {
                        let pos_logits = f.itm_logits(&fused);
                        let pos = itm_loss_node(&mut f.tape, pos_logits, true);
                        let neg_text = f.encode_text(neg_ids[i])?;
                        let neg_fused = f.fuse(visual, &neg_text)?;
                        let neg_logits = f.itm_logits(&neg_fused);
                        let neg = itm_loss_node(&mut f.tape, neg_logits, false);
                        let pair = f.tape.weighted_sum(&[(pos, 0.5), (neg, 0.5)]);
                        itm_value = Some(f.tape.scalar(pair) as f64);
                        objective_parts.push((pair, itm_weight as f32));
                    }

                    let (mut img_emb, mut txt_emb) = (None, None);
                    if want_itc && !sample.instr_ids.is_empty() {
                        img_emb = Some(f.image_embedding(visual));
                        txt_emb = f.text_embedding(&text);
                    }

                    let objective = f.tape.weighted_sum(&objective_parts);
                    Ok(SamplePass { forward: f, objective, gen_value, itm_value, img_emb, txt_emb })
                })
                .collect()
        })
        .collect();
    let mut all: Vec<SamplePass> = Vec::with_capacity(n);
    for chunk_passes in passes {
        all.extend(chunk_passes?);
    }

    // contrastive head over the batch
    let mut itc_value = 0.0;
    let mut itc_seeds: Vec<Option<(Array2<f32>, Array2<f32>)>> = vec![None; n];
    if want_itc {
        let with_emb: Vec<usize> = (0..n)
            .filter(|&i| all[i].img_emb.is_some() && all[i].txt_emb.is_some())
            .collect();
        if with_emb.len() >= 2 {
            let d = model.config.d;
            let mut img = Array2::zeros((with_emb.len(), d));
            let mut txt = Array2::zeros((with_emb.len(), d));
            for (row, &i) in with_emb.iter().enumerate() {
                let p = &all[i];
                img.row_mut(row)
                    .assign(&p.forward.tape.value(p.img_emb.unwrap()).row(0));
                txt.row_mut(row)
                    .assign(&p.forward.tape.value(p.txt_emb.unwrap()).row(0));
            }
            let ls_id = model.params.id("itc.logit_scale").expect("itc param");
            let ls = model.params.array(ls_id)[(0, 0)];
            let (loss, d_img, d_txt, d_ls) = itc_loss_with_grads(&img, &txt, ls)?;
            itc_value = loss as f64;
            let w = itc_weight as f32;
            for (row, &i) in with_emb.iter().enumerate() {
                let gi = d_img.row(row).insert_axis(ndarray::Axis(0)).to_owned() * w;
                let gt = d_txt.row(row).insert_axis(ndarray::Axis(0)).to_owned() * w;
                itc_seeds[i] = Some((gi, gt));
            }
            grads.accumulate(ls_id, &Array2::from_elem((1, 1), d_ls * w));
        }
    }

    // backward, chunked and merged in order
    let inv_n = 1.0 / n as f32;
    let chunk_grads: Vec<GradStore<f32>> = all
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, passes)| {
            let mut store = GradStore::new(model.params.len());
            for (si, pass) in passes.iter().enumerate() {
                let i = ci * chunk + si;
                let mut seeds = vec![(pass.objective, Array2::from_elem((1, 1), inv_n))];
                if let Some((gi, gt)) = &itc_seeds[i] {
                    seeds.push((pass.img_emb.expect("itc sample has emb"), gi.clone()));
                    seeds.push((pass.txt_emb.expect("itc sample has emb"), gt.clone()));
                }
                pass.forward.tape.backward(&seeds, &mut store);
            }
            store
        })
        .collect();
    for cg in chunk_grads {
        grads.merge(cg);
    }

    let gen_mean = all.iter().map(|p| p.gen_value).sum::<f64>() / n as f64;
    let itm_values: Vec<f64> = all.iter().filter_map(|p| p.itm_value).collect();
    let itm_mean = if itm_values.is_empty() {
        0.0
    } else {
        itm_values.iter().sum::<f64>() / itm_values.len() as f64
    };
    if !(gen_mean.is_finite() && itm_mean.is_finite() && itc_value.is_finite()) {
        *diverged = true;
    }
    Ok(PassTerms { gen: gen_mean, itc: itc_value, itm: itm_mean })
}

/// Deterministic epoch shuffle.
fn shuffled_indices(n: usize, seed: u64, purpose: &str, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::derive(seed, purpose, epoch));
    idx
}

pub struct StageResult {
    pub model: Model<f32>,
    pub opt: AdamW,
    pub log: TrainLog,
    pub steps_done: u64,
    pub epochs_done: u64,
}

/// Resume state carried between stages or across checkpoint loads.
pub struct ResumePoint {
    pub opt: AdamW,
    pub step: u64,
    pub epoch: u64,
}

/// Coordinate-activation training on detection-caption samples.
pub fn run_activation_stage(
    mut model: Model<f32>,
    samples: &[GroundingSample],
    config: &TrainConfig,
    resume: Option<ResumePoint>,
    progress: Option<ProgressFn>,
) -> Result<StageResult> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("activation corpus is empty".into()));
    }
    let mut progress = progress;
    let steps_per_epoch = samples.len().div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let (mut opt, mut step, start_epoch) = match resume {
        Some(r) => (r.opt, r.step, r.epoch),
        None => (AdamW::new(&model.params, config.adamw, &config.freeze), 0, 0),
    };
    let mut log = TrainLog::default();
    let w = config.loss_weights;

    for epoch in start_epoch..config.epochs as u64 {
        let order = shuffled_indices(samples.len(), config.seed, "shuffle-act", epoch);
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&GroundingSample> = batch_idx.iter().map(|&i| &samples[i]).collect();
            let lr = lr_at(config.lr, config.schedule, config.warmup_steps, step, total_steps);
            let mut grads = GradStore::new(model.params.len());
            let mut diverged = false;
            let terms = batch_pass(&model, &batch, w.lm, w.itc, w.itm, &mut grads, &mut diverged)?;
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.apply(&mut model.params, &grads, lr);
            let breakdown = full_criterion(terms.gen, terms.itc, 0.0, terms.itm, 0.0, w)?;
            if diverged || !breakdown.is_finite() {
                return Err(Error::Divergence { step: step as usize });
            }
            log.rows.push(LogRow {
                step,
                lm: breakdown.lm,
                itc: breakdown.itc,
                itg: breakdown.itg,
                itm: breakdown.itm,
                cyc_box: 0.0,
                cyc_text: 0.0,
                total: breakdown.total,
            });
            step += 1;
        }
        if let Some(p) = progress.as_deref_mut() {
            p(Progress::EpochDone {
                epoch,
                steps: step,
                mean_total: log.mean_total_of_last(steps_per_epoch as usize),
            });
        }
    }
    Ok(StageResult { model, opt, log, steps_done: step, epochs_done: config.epochs as u64 })
}

/// Cycle-stage inputs: comprehension samples (gold and pseudo), generation
/// samples, and cases for the per-step round-trip metrics.
pub struct CycleData<'a> {
    pub gold_rec: &'a [GroundingSample],
    pub pseudo_rec: &'a [GroundingSample],
    pub gold_reg: &'a [GroundingSample],
    pub cycle_cases: &'a [EvalCase],
    pub vocab: &'a Vocabulary,
}

/// Cycle training per the full criterion: each step takes one comprehension
/// batch (gold mixed with pseudo), one generation batch, and one optimizer
/// update of their combined alignment losses; cycle round-trip terms are
/// measured on a rotating minibatch with greedy decoding and logged.
pub fn run_cycle_stage(
    mut model: Model<f32>,
    data: &CycleData,
    config: &TrainConfig,
    resume: Option<ResumePoint>,
    progress: Option<ProgressFn>,
) -> Result<StageResult> {
    config.validate()?;
    if data.gold_rec.is_empty() {
        return Err(Error::InvalidConfig("cycle stage needs comprehension samples".into()));
    }
    let mut progress = progress;
    let w = config.loss_weights;

    // deck of comprehension samples: gold and pseudo interleaved per ratio
    let deck_len = data.gold_rec.len() + data.pseudo_rec.len();
    let steps_per_epoch = (deck_len.div_ceil(config.batch_size)) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let (mut opt, mut step, start_epoch) = match resume {
        Some(r) => (r.opt, r.step, r.epoch),
        None => (AdamW::new(&model.params, config.adamw, &config.freeze), 0, 0),
    };
    let mut log = TrainLog::default();
    let mut cycle_cursor = 0usize;

    for epoch in start_epoch..config.epochs as u64 {
        let rec_deck = build_rec_deck(data, config, epoch);
        let reg_order = shuffled_indices(
            data.gold_reg.len().max(1),
            config.seed,
            "shuffle-reg",
            epoch,
        );
        let mut reg_cursor = 0usize;

        for batch_refs in rec_deck.chunks(config.batch_size) {
            let rec_batch: Vec<&GroundingSample> = batch_refs.to_vec();
            // generation batch cycles through its own shuffled order
            let reg_batch: Vec<&GroundingSample> = if data.gold_reg.is_empty() || w.itg <= 0.0 {
                Vec::new()
            } else {
                (0..config.batch_size.min(data.gold_reg.len()))
                    .map(|k| &data.gold_reg[reg_order[(reg_cursor + k) % reg_order.len()]])
                    .collect()
            };
            reg_cursor = (reg_cursor + reg_batch.len()) % reg_order.len().max(1);

            // cycle metrics (pre-update decode, greedy)
            let (cyc_box, cyc_text, recon) = if config.cycle_batch > 0 && !data.cycle_cases.is_empty()
            {
                let take = config.cycle_batch.min(data.cycle_cases.len());
                let mut boxes = Vec::with_capacity(take);
                let mut texts = Vec::with_capacity(take);
                let mut recon = Vec::new();
                let greedy = ModelGenerator {
                    model: &model,
                    vocab: data.vocab,
                    beam: BeamConfig { beam_width: 1, ..BeamConfig::default() },
                };
                for k in 0..take {
                    let case = &data.cycle_cases[(cycle_cursor + k) % data.cycle_cases.len()];
                    let outcome = cycle_round_trip_case(&greedy, data.vocab, case)?;
                    boxes.push(outcome.box_term);
                    texts.push(outcome.text_term);
                    if config.cycle_backprop {
                        if let Some(sample) = reconstruction_sample(&greedy, case, data.vocab)? {
                            recon.push(sample);
                        }
                    }
                }
                cycle_cursor = (cycle_cursor + take) % data.cycle_cases.len();
                (
                    boxes.iter().sum::<f64>() / take as f64,
                    texts.iter().sum::<f64>() / take as f64,
                    recon,
                )
            } else {
                (0.0, 0.0, Vec::new())
            };

            let lr = lr_at(config.lr, config.schedule, config.warmup_steps, step, total_steps);
            let mut grads = GradStore::new(model.params.len());
            let mut diverged = false;
            let rec_terms =
                batch_pass(&model, &rec_batch, w.itg, w.itc, w.itm, &mut grads, &mut diverged)?;
            let reg_terms = if reg_batch.is_empty() {
                PassTerms::default()
            } else {
                batch_pass(&model, &reg_batch, w.itg, w.itc, w.itm, &mut grads, &mut diverged)?
            };
            if !recon.is_empty() {
                let recon_refs: Vec<&GroundingSample> = recon.iter().collect();
                batch_pass(&model, &recon_refs, w.cyc, 0.0, 0.0, &mut grads, &mut diverged)?;
            }
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.apply(&mut model.params, &grads, lr);

            let cyc = cyc_box / 1000.0 + cyc_text;
            let breakdown = full_criterion(
                0.0,
                rec_terms.itc + reg_terms.itc,
                rec_terms.gen + reg_terms.gen,
                rec_terms.itm + reg_terms.itm,
                cyc,
                w,
            )?;
            if diverged || !breakdown.is_finite() {
                return Err(Error::Divergence { step: step as usize });
            }
            log.rows.push(LogRow {
                step,
                lm: 0.0,
                itc: breakdown.itc,
                itg: breakdown.itg,
                itm: breakdown.itm,
                cyc_box,
                cyc_text,
                total: breakdown.total,
            });
            step += 1;
        }
        if let Some(p) = progress.as_deref_mut() {
            p(Progress::EpochDone {
                epoch,
                steps: step,
                mean_total: log.mean_total_of_last(steps_per_epoch as usize),
            });
        }
    }
    Ok(StageResult { model, opt, log, steps_done: step, epochs_done: config.epochs as u64 })
}

/// Gold and pseudo comprehension samples interleaved by ratio: with ratio r,
/// every gold sample is followed by r pseudo samples on average.
fn build_rec_deck<'a>(
    data: &CycleData<'a>,
    config: &TrainConfig,
    epoch: u64,
) -> Vec<&'a GroundingSample> {
    let gold_order = shuffled_indices(data.gold_rec.len(), config.seed, "shuffle-rec", epoch);
    if data.pseudo_rec.is_empty() || config.pseudo_ratio <= 0.0 {
        return gold_order.iter().map(|&i| &data.gold_rec[i]).collect();
    }
    let pseudo_order =
        shuffled_indices(data.pseudo_rec.len(), config.seed, "shuffle-pseudo", epoch);
    let mut deck = Vec::with_capacity(gold_order.len() + pseudo_order.len());
    let mut pseudo_iter = pseudo_order.iter();
    let mut debt = 0.0;
    for &g in &gold_order {
        deck.push(&data.gold_rec[g]);
        debt += config.pseudo_ratio;
        while debt >= 1.0 {
            if let Some(&p) = pseudo_iter.next() {
                deck.push(&data.pseudo_rec[p]);
            }
            debt -= 1.0;
        }
    }
    for &p in pseudo_iter {
        deck.push(&data.pseudo_rec[p]);
    }
    deck
}

/// The comprehension sample the backprop mode trains on: the generated
/// expression as the question, the original box as the target.
fn reconstruction_sample(
    greedy: &ModelGenerator,
    case: &EvalCase,
    vocab: &Vocabulary,
) -> Result<Option<GroundingSample>> {
    let (reg_q, _) = build_reg_pair(case.qbox);
    let generated = greedy.answer(case, &reg_q)?;
    let Some(expr) = split_reg_answer(&generated) else {
        return Ok(None);
    };
    let (rec_q, rec_a) = build_rec_pair(expr);
    Ok(Some(GroundingSample::new(
        format!("{}/recon", case.id),
        Arc::clone(&case.patches),
        rec_q,
        rec_a.fill(case.qbox),
        TaskKind::Rec,
        Some(case.qbox),
        Provenance::Pseudo,
        None,
        vocab,
    )?))
}

/// Pseudo-labeling statistics; retention = kept / total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub total: usize,
    pub kept: usize,
    pub rejected_no_marker: usize,
    pub rejected_parse: usize,
    pub rejected_not_unique: usize,
}

impl PseudoStats {
    pub fn retention(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.kept as f64 / self.total as f64
        }
    }
}

/// Expression generation over a detection corpus: ask the model to describe
/// each gold box, keep expressions the scene oracle resolves uniquely back to
/// the source object, and emit them as pseudo comprehension samples.
pub fn generate_pseudo_labels(
    model: &Model<f32>,
    vocab: &Vocabulary,
    corpus: &Corpus,
    cache: &PatchCache,
    split: Split,
    beam: &BeamConfig,
    generator_id: &str,
) -> Result<(Vec<GroundingSample>, PseudoStats)> {
    beam.validate()?;
    let record_indices = corpus.indices_of(split);
    let chunk = record_indices.len().div_ceil(NUM_CHUNKS).max(1);
    let per_record: Vec<(Vec<GroundingSample>, PseudoStats)> = record_indices
        .par_chunks(chunk)
        .map(|indices| -> Result<(Vec<GroundingSample>, PseudoStats)> {
            let mut kept = Vec::new();
            let mut stats = PseudoStats {
                total: 0,
                kept: 0,
                rejected_no_marker: 0,
                rejected_parse: 0,
                rejected_not_unique: 0,
            };
            for &idx in indices {
                let record = &corpus.records[idx];
                let scene = record.scene();
                for (oi, obj) in record.objects.iter().enumerate() {
                    stats.total += 1;
                    let qbox = quantize(obj.box_px, record.canvas)?;
                    let (question, _) = build_reg_pair(qbox);
                    let ids = vocab.tokenize(&question);
                    let session = Session::new(model, Arc::clone(&cache.patches[idx]), &ids)?;
                    let beams = beam_search(session, &[BOS], beam, EOS)?;
                    let answer = vocab.detokenize(&beams[0].tokens);
                    let Some(expr) = split_reg_answer(&answer) else {
                        stats.rejected_no_marker += 1;
                        continue;
                    };
                    let matched = match crate::scenegen::match_expression(&scene, expr) {
                        Err(_) => {
                            stats.rejected_parse += 1;
                            continue;
                        }
                        Ok(m) => m,
                    };
                    if matched != vec![oi] {
                        stats.rejected_not_unique += 1;
                        continue;
                    }
                    let (rec_q, rec_a) = build_rec_pair(expr);
                    kept.push(GroundingSample::new(
                        format!("{}/pseudo{}", record.id, oi),
                        Arc::clone(&cache.patches[idx]),
                        rec_q,
                        rec_a.fill(qbox),
                        TaskKind::Rec,
                        Some(qbox),
                        Provenance::Pseudo,
                        Some(generator_id.to_string()),
                        vocab,
                    )?);
                    stats.kept += 1;
                }
            }
            Ok((kept, stats))
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::new();
    let mut stats = PseudoStats {
        total: 0,
        kept: 0,
        rejected_no_marker: 0,
        rejected_parse: 0,
        rejected_not_unique: 0,
    };
    for (s, st) in per_record {
        samples.extend(s);
        stats.total += st.total;
        stats.kept += st.kept;
        stats.rejected_no_marker += st.rejected_no_marker;
        stats.rejected_parse += st.rejected_parse;
        stats.rejected_not_unique += st.rejected_not_unique;
    }
    Ok((samples, stats))
}
