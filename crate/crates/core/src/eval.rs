//! Metrics: IoU-based accuracy, cycle round-trip statistics, repair
//! diagnostics, and the stable-text report format.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Split};
use crate::decode::{beam_search, BeamConfig};
use crate::error::{Error, Result};
use crate::geometry::{dequantize, iou, BBox, Canvas, QuantizedBox};
use crate::losses::cycle_consistency;
use crate::model::{Model, Session};
use crate::scenegen::{parse_expression, Qualifier, Scene};
use crate::textio::{
    build_rec_pair, build_reg_pair, parse_box, split_reg_answer, Vocabulary, BOS, EOS,
};

/// One (scene, expression) evaluation case.
#[derive(Clone)]
pub struct EvalCase {
    pub id: String,
    pub patches: Arc<Array2<f32>>,
    pub scene: Scene,
    pub canvas: Canvas,
    pub expr_text: String,
    pub expr_ids: Vec<u32>,
    pub gold_box: BBox,
    pub qbox: QuantizedBox,
}

/// Precomputed patch matrices, index-aligned with a corpus.
pub struct PatchCache {
    pub patches: Vec<Arc<Array2<f32>>>,
}

pub fn patch_cache(corpus: &Corpus, model: &Model<f32>) -> Result<PatchCache> {
    let patches = corpus
        .rasters
        .iter()
        .map(|r| model.patchify(r).map(Arc::new))
        .collect::<Result<_>>()?;
    Ok(PatchCache { patches })
}

/// Builds evaluation cases for every expression of a split.
pub fn eval_cases(
    corpus: &Corpus,
    cache: &PatchCache,
    split: Split,
    vocab: &Vocabulary,
) -> Result<Vec<EvalCase>> {
    let mut out = Vec::new();
    for idx in corpus.indices_of(split) {
        let record = &corpus.records[idx];
        let scene = record.scene();
        for (ei, expr) in record.expressions.iter().enumerate() {
            let obj = &record.objects[expr.target_index];
            let qbox = crate::geometry::quantize(obj.box_px, record.canvas)?;
            out.push(EvalCase {
                id: format!("{}#{}", record.id, ei),
                patches: Arc::clone(&cache.patches[idx]),
                scene: scene.clone(),
                canvas: record.canvas,
                expr_text: expr.text.clone(),
                expr_ids: vocab.tokenize(&expr.text),
                gold_box: obj.box_px,
                qbox,
            });
        }
    }
    Ok(out)
}

/// Anything that can answer an instruction about an image. The model-backed
/// generator decodes; the oracle generator replays ground truth so the
/// harness can test itself.
pub trait AnswerGenerator: Sync {
    fn answer(&self, case: &EvalCase, instruction: &str) -> Result<String>;
}

/// Decodes answers with the model and a beam configuration.
pub struct ModelGenerator<'m> {
    pub model: &'m Model<f32>,
    pub vocab: &'m Vocabulary,
    pub beam: BeamConfig,
}

impl AnswerGenerator for ModelGenerator<'_> {
    fn answer(&self, case: &EvalCase, instruction: &str) -> Result<String> {
        let ids = self.vocab.tokenize(instruction);
        let session = Session::new(self.model, Arc::clone(&case.patches), &ids)?;
        let beams = beam_search(session, &[BOS], &self.beam, EOS)?;
        let top = beams.first().ok_or_else(|| Error::ShapeMismatch("no beams".into()))?;
        Ok(self.vocab.detokenize(&top.tokens))
    }
}

/// Replays ground truth: comprehension questions return the gold box of the
/// expression they mention, generation questions return the gold expression
/// of the box they mention.
pub struct OracleGenerator;

impl AnswerGenerator for OracleGenerator {
    fn answer(&self, case: &EvalCase, instruction: &str) -> Result<String> {
        let (reg_q, reg_a) = build_reg_pair(case.qbox);
        if instruction == reg_q {
            return Ok(reg_a.fill(&case.expr_text));
        }
        let (_, rec_a) = build_rec_pair(&case.expr_text);
        Ok(rec_a.fill(case.qbox))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseState {
    Clean,
    Repaired,
    Failed,
}

/// Per-case comprehension outcome.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub id: String,
    pub iou: f64,
    pub parse: ParseState,
    pub qualifier: Option<Qualifier>,
}

/// Asks the comprehension question for each case and grades the predicted
/// box. Parse failures score zero IoU.
pub fn run_rec_eval<G: AnswerGenerator>(gen: &G, cases: &[EvalCase]) -> Result<Vec<CaseOutcome>> {
    let chunk = cases.len().div_ceil(crate::train::NUM_CHUNKS.max(1)).max(1);
    cases
        .par_chunks(chunk)
        .map(|chunk| {
            chunk
                .iter()
                .map(|case| {
                    let (question, _) = build_rec_pair(&case.expr_text);
                    let text = gen.answer(case, &question)?;
                    let qualifier = parse_expression(&case.expr_text)
                        .ok()
                        .and_then(|e| e.qualifier);
                    let outcome = match parse_box(&text) {
                        None => CaseOutcome {
                            id: case.id.clone(),
                            iou: 0.0,
                            parse: ParseState::Failed,
                            qualifier,
                        },
                        Some(parsed) => {
                            let pred = dequantize(parsed.qbox, case.canvas)?;
                            CaseOutcome {
                                id: case.id.clone(),
                                iou: iou(pred, case.gold_box),
                                parse: if parsed.repaired {
                                    ParseState::Repaired
                                } else {
                                    ParseState::Clean
                                },
                                qualifier,
                            }
                        }
                    };
                    Ok(outcome)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|chunks| chunks.into_concat())
}

trait Concat<T> {
    fn into_concat(self) -> Vec<T>;
}

impl<T> Concat<T> for Vec<Vec<T>> {
    fn into_concat(self) -> Vec<T> {
        self.into_iter().flatten().collect()
    }
}

/// Fraction of predictions with IoU strictly greater than `threshold`;
/// failed parses count as zero IoU.
pub fn acc_at_iou(
    predictions: &[Option<BBox>],
    ground_truths: &[BBox],
    threshold: f64,
) -> Result<f64> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(ground_truths)
        .filter(|(p, gt)| p.map_or(0.0, |p| iou(p, **gt)) > threshold)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// One case's cycle round trip in both directions.
#[derive(Debug, Clone, Copy)]
pub struct CycleOutcome {
    pub box_term: f64,
    pub text_term: f64,
    /// True when any intermediate step failed to parse.
    pub broken: bool,
}

/// Runs `x -> G(x) -> F(G(x))` and `y -> F(y) -> G(F(y))` for one case.
pub fn cycle_round_trip_case<G: AnswerGenerator>(
    gen: &G,
    vocab: &Vocabulary,
    case: &EvalCase,
) -> Result<CycleOutcome> {
    let mut broken = false;

    // box direction: qbox -> expression -> box
    let (reg_q, _) = build_reg_pair(case.qbox);
    let reg_out = gen.answer(case, &reg_q)?;
    let expr = split_reg_answer(&reg_out).map(str::to_string).unwrap_or_else(|| {
        broken = true;
        reg_out.clone()
    });
    let (rec_q, _) = build_rec_pair(&expr);
    let rec_out = gen.answer(case, &rec_q)?;
    let x_rec = parse_box(&rec_out).map(|p| p.qbox);
    if x_rec.is_none() {
        broken = true;
    }
    let (box_term, _) = cycle_consistency(&case.qbox, x_rec.as_ref(), &[], &[]);

    // text direction: expression -> box -> expression
    let (rec_q2, _) = build_rec_pair(&case.expr_text);
    let rec_out2 = gen.answer(case, &rec_q2)?;
    let text_term = match parse_box(&rec_out2) {
        None => {
            broken = true;
            1.0
        }
        Some(p) => {
            let (reg_q2, _) = build_reg_pair(p.qbox);
            let reg_out2 = gen.answer(case, &reg_q2)?;
            let expr_rec = split_reg_answer(&reg_out2).unwrap_or_else(|| {
                broken = true;
                &reg_out2
            });
            let y_rec = vocab.tokenize(expr_rec);
            let (_, t) = cycle_consistency(&case.qbox, Some(&case.qbox), &case.expr_ids, &y_rec);
            t
        }
    };

    Ok(CycleOutcome { box_term, text_term, broken })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub box_mean: f64,
    pub box_median: f64,
    pub box_p95: f64,
    pub text_mean: f64,
    pub text_median: f64,
    pub text_p95: f64,
    pub broken: usize,
    pub n: usize,
}

/// Cycle round trips over the first `sample_count` cases.
pub fn cycle_round_trip<G: AnswerGenerator>(
    gen: &G,
    vocab: &Vocabulary,
    cases: &[EvalCase],
    sample_count: usize,
) -> Result<CycleStats> {
    let take = sample_count.min(cases.len());
    let subset = &cases[..take];
    let chunk = take.div_ceil(crate::train::NUM_CHUNKS.max(1)).max(1);
    let outcomes: Vec<CycleOutcome> = subset
        .par_chunks(chunk)
        .map(|chunk| {
            chunk
                .iter()
                .map(|c| cycle_round_trip_case(gen, vocab, c))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_concat();
    let boxes: Vec<f64> = outcomes.iter().map(|o| o.box_term).collect();
    let texts: Vec<f64> = outcomes.iter().map(|o| o.text_term).collect();
    Ok(CycleStats {
        box_mean: mean(&boxes),
        box_median: percentile(&boxes, 0.5),
        box_p95: percentile(&boxes, 0.95),
        text_mean: mean(&texts),
        text_median: percentile(&texts, 0.5),
        text_p95: percentile(&texts, 0.95),
        broken: outcomes.iter().filter(|o| o.broken).count(),
        n: outcomes.len(),
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn percentile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub const QUALIFIER_KEYS: [&str; 8] = [
    "left", "right", "top", "bottom", "largest", "smallest", "middle", "none",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualifierAcc {
    pub qualifier: String,
    pub count: usize,
    pub acc: f64,
}

/// The evaluation report; field order here is the emitted key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub checkpoint: String,
    pub config_fingerprint: String,
    pub n_samples: usize,
    pub acc_at_05: f64,
    pub mean_iou: f64,
    pub parse_failure_rate: f64,
    pub repaired_rate: f64,
    pub clean_rate: f64,
    pub cycle_box_mean: f64,
    pub cycle_box_median: f64,
    pub cycle_box_p95: f64,
    pub cycle_text_mean: f64,
    pub cycle_text_median: f64,
    pub cycle_text_p95: f64,
    pub per_qualifier: Vec<QualifierAcc>,
}

/// Identity attached to a report.
#[derive(Debug, Clone)]
pub struct ReportMeta {
    pub split_id: String,
    pub checkpoint: String,
    pub config_fingerprint: String,
}

/// Full evaluation: comprehension accuracy plus cycle round trips.
pub fn evaluate<G: AnswerGenerator>(
    gen: &G,
    vocab: &Vocabulary,
    cases: &[EvalCase],
    meta: &ReportMeta,
    cycle_sample_count: usize,
) -> Result<EvalReport> {
    let outcomes = run_rec_eval(gen, cases)?;
    let cycle = cycle_round_trip(gen, vocab, cases, cycle_sample_count)?;
    let n = outcomes.len();
    let acc = |subset: &[&CaseOutcome]| {
        if subset.is_empty() {
            0.0
        } else {
            subset.iter().filter(|o| o.iou > 0.5).count() as f64 / subset.len() as f64
        }
    };
    let all: Vec<&CaseOutcome> = outcomes.iter().collect();
    let mut per_qualifier = Vec::new();
    for key in QUALIFIER_KEYS {
        let subset: Vec<&CaseOutcome> = outcomes
            .iter()
            .filter(|o| match o.qualifier {
                Some(q) => q.word() == key,
                None => key == "none",
            })
            .collect();
        per_qualifier.push(QualifierAcc {
            qualifier: key.to_string(),
            count: subset.len(),
            acc: acc(&subset),
        });
    }
    let count_state = |s: ParseState| outcomes.iter().filter(|o| o.parse == s).count();
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(EvalReport {
        split: meta.split_id.clone(),
        checkpoint: meta.checkpoint.clone(),
        config_fingerprint: meta.config_fingerprint.clone(),
        n_samples: n,
        acc_at_05: acc(&all),
        mean_iou: mean(&outcomes.iter().map(|o| o.iou).collect::<Vec<_>>()),
        parse_failure_rate: rate(count_state(ParseState::Failed)),
        repaired_rate: rate(count_state(ParseState::Repaired)),
        clean_rate: rate(count_state(ParseState::Clean)),
        cycle_box_mean: cycle.box_mean,
        cycle_box_median: cycle.box_median,
        cycle_box_p95: cycle.box_p95,
        cycle_text_mean: cycle.text_mean,
        cycle_text_median: cycle.text_median,
        cycle_text_p95: cycle.text_p95,
        per_qualifier,
    })
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Stable-key, diffable text form. Keys appear in a fixed order; rates and
/// accuracies use 4-decimal fixed formatting.
pub fn render_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(": ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("split", report.split.clone());
    kv("checkpoint", report.checkpoint.clone());
    kv("config_fingerprint", report.config_fingerprint.clone());
    kv("n_samples", report.n_samples.to_string());
    kv("acc_at_05", fmt4(report.acc_at_05));
    kv("mean_iou", fmt4(report.mean_iou));
    kv("parse_failure_rate", fmt4(report.parse_failure_rate));
    kv("repaired_rate", fmt4(report.repaired_rate));
    kv("clean_rate", fmt4(report.clean_rate));
    kv("cycle_box_mean", fmt4(report.cycle_box_mean));
    kv("cycle_box_median", fmt4(report.cycle_box_median));
    kv("cycle_box_p95", fmt4(report.cycle_box_p95));
    kv("cycle_text_mean", fmt4(report.cycle_text_mean));
    kv("cycle_text_median", fmt4(report.cycle_text_median));
    kv("cycle_text_p95", fmt4(report.cycle_text_p95));
    for q in &report.per_qualifier {
        kv(&format!("qualifier_{}", q.qualifier), format!("{} {}", q.count, fmt4(q.acc)));
    }
    s
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(report))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses the stable-text form back; used for round-trip checks and the CLI.
pub fn parse_report(text: &str) -> Result<EvalReport> {
    let mut map: HashMap<&str, &str> = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::InvalidConfig(format!("bad report line {line:?}")))?;
        map.insert(k, v);
    }
    let get = |k: &str| -> Result<&str> {
        map.get(k)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("report missing key {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("bad number for {k}")))
    };
    let mut per_qualifier = Vec::new();
    for key in QUALIFIER_KEYS {
        let raw = get(&format!("qualifier_{key}"))?;
        let (count, acc) = raw
            .split_once(' ')
            .ok_or_else(|| Error::InvalidConfig(format!("bad qualifier line {raw:?}")))?;
        per_qualifier.push(QualifierAcc {
            qualifier: key.to_string(),
            count: count.parse().map_err(|_| Error::InvalidConfig("qualifier count".into()))?,
            acc: acc.parse().map_err(|_| Error::InvalidConfig("qualifier acc".into()))?,
        });
    }
    Ok(EvalReport {
        split: get("split")?.to_string(),
        checkpoint: get("checkpoint")?.to_string(),
        config_fingerprint: get("config_fingerprint")?.to_string(),
        n_samples: get("n_samples")?
            .parse()
            .map_err(|_| Error::InvalidConfig("n_samples".into()))?,
        acc_at_05: num("acc_at_05")?,
        mean_iou: num("mean_iou")?,
        parse_failure_rate: num("parse_failure_rate")?,
        repaired_rate: num("repaired_rate")?,
        clean_rate: num("clean_rate")?,
        cycle_box_mean: num("cycle_box_mean")?,
        cycle_box_median: num("cycle_box_median")?,
        cycle_box_p95: num("cycle_box_p95")?,
        cycle_text_mean: num("cycle_text_mean")?,
        cycle_text_median: num("cycle_text_median")?,
        cycle_text_p95: num("cycle_text_p95")?,
        per_qualifier,
    })
}

/// Per-sample IoU rows for debugging.
pub fn write_per_sample_csv(outcomes: &[CaseOutcome], path: &Path) -> Result<()> {
    let mut body = String::from("id,iou,parse,qualifier\n");
    for o in outcomes {
        let parse = match o.parse {
            ParseState::Clean => "clean",
            ParseState::Repaired => "repaired",
            ParseState::Failed => "failed",
        };
        let q = o.qualifier.map_or("none", |q| q.word());
        body.push_str(&format!("{},{:.6},{},{}\n", o.id, o.iou, parse, q));
    }
    std::fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
