//! End-to-end pipeline orchestration over one output workspace.
//!
//! Commands and the acceptance suite both drive the pipeline through this
//! module, so a run is the same thing whichever way it is launched.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use refcycle_core::checkpoint::{
    self, ensure_disjoint_eval, ensure_stage_allows, CheckpointMeta, OptState, StageMark,
};
use refcycle_core::config::{RunConfig, Workspace};
use refcycle_core::dataset::{generate_corpus, load_corpus, write_corpus, Corpus, Split};
use refcycle_core::decode::beam_search;
use refcycle_core::error::{Error, Result};
use refcycle_core::eval::{
    eval_cases, evaluate, patch_cache, AnswerGenerator, EvalCase, EvalReport, ModelGenerator,
    PatchCache, ReportMeta,
};
use refcycle_core::geometry::{dequantize, BBox, Canvas};
use refcycle_core::model::{Model, Session};
use refcycle_core::scenegen::Raster;
use refcycle_core::textio::{
    build_rec_pair, parse_box, TaskKind, Vocabulary, BOS, EOS,
};
use refcycle_core::train::{
    build_samples, generate_pseudo_labels, run_activation_stage, run_cycle_stage, CycleData,
    GroundingSample, Progress, Provenance, PseudoStats, ResumePoint, Stage, StageResult,
};

/// One pseudo-label line in `pseudo/pseudo.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub record_id: String,
    pub target_index: usize,
    pub expression: String,
    pub qbox: [u32; 4],
    pub generator: String,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub ws: Workspace,
    pub vocab: Vocabulary,
    pub quiet: bool,
}

impl Pipeline {
    pub fn new(config: RunConfig, out_root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ws: Workspace::new(out_root),
            vocab: Vocabulary::standard(),
            quiet: false,
        })
    }

    fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    /// Generates the gold and detection corpora plus the vocabulary file.
    pub fn generate(&self, force: bool) -> Result<(String, String)> {
        self.ws.ensure_dirs()?;
        let cfg = &self.config;
        let gold = generate_corpus(
            cfg.seed,
            &cfg.scene,
            cfg.data.n_scenes,
            cfg.data.val_fraction,
            cfg.data.test_fraction,
            false,
            "scene",
        )?;
        write_corpus(&self.ws.gold_corpus_dir(), &gold, force)?;
        self.say(&format!(
            "gold corpus: {} scenes, hash {}",
            cfg.data.n_scenes,
            &gold.manifest.corpus_hash[..16]
        ));
        // detection scenes come from a disjoint seed range past the gold ones
        let det_seed = cfg.seed.wrapping_add(cfg.data.n_scenes as u64);
        let detection = generate_corpus(
            det_seed,
            &cfg.scene,
            cfg.data.detection_scenes.max(1),
            0.0,
            0.0,
            true,
            "det",
        )?;
        write_corpus(&self.ws.detection_corpus_dir(), &detection, force)?;
        self.say(&format!(
            "detection corpus: {} scenes, hash {}",
            cfg.data.detection_scenes.max(1),
            &detection.manifest.corpus_hash[..16]
        ));
        self.vocab.save(&self.ws.vocab_path())?;
        self.config.save(&self.ws.root.join("run.json"))?;
        Ok((gold.manifest.corpus_hash, detection.manifest.corpus_hash))
    }

    pub fn load_gold(&self) -> Result<Corpus> {
        load_corpus(&self.ws.gold_corpus_dir())
    }

    pub fn load_detection(&self) -> Result<Corpus> {
        load_corpus(&self.ws.detection_corpus_dir())
    }

    fn progress_printer(&self, label: &'static str) -> impl FnMut(Progress) + '_ {
        let quiet = self.quiet;
        move |p: Progress| {
            if quiet {
                return;
            }
            let Progress::EpochDone { epoch, steps, mean_total } = p;
            println!("[{label}] epoch {epoch}: total steps {steps}, mean loss {mean_total:.4}");
        }
    }

    /// Coordinate-activation stage; writes checkpoint, CSV log, and a val
    /// report. Returns the checkpoint id.
    pub fn train_activation(&self, resume: bool) -> Result<String> {
        let corpus = self.load_gold()?;
        let model_seed = self.config.seed;
        let ckpt_path = self.ws.checkpoint_path("activation");

        let (model, resume_point, start_meta) = if resume && ckpt_path.exists() {
            let (model, meta, opt, _id) = checkpoint::load(&ckpt_path)?;
            let opt_state = opt.ok_or_else(|| {
                Error::Checkpoint("activation checkpoint lacks optimizer state".into())
            })?;
            let adamw = opt_state.into_adamw(&model, &self.config.activation.freeze)?;
            let point = ResumePoint { opt: adamw, step: meta.step, epoch: meta.epoch };
            (model, Some(point), Some(meta))
        } else {
            let model = Model::<f32>::new(self.config.model.clone(), model_seed)?;
            (model, None, None)
        };
        if let Some(meta) = &start_meta {
            self.say(&format!("resuming activation from epoch {}", meta.epoch));
        }

        let cache = patch_cache(&corpus, &model)?;
        let det = build_samples(
            &corpus,
            &cache,
            Split::Train,
            TaskKind::DetCaption,
            &self.vocab,
            None,
        )?;
        let mut progress = self.progress_printer("activation");
        let result = run_activation_stage(
            model,
            &det,
            &self.config.activation,
            resume_point,
            Some(&mut progress),
        )?;
        result.log.write_csv(&self.ws.log_path("activation"))?;
        let id = self.save_stage(&result, &corpus, StageMark::Activation, "activation", None)?;
        self.say(&format!("activation checkpoint {}", &id[..16]));
        self.eval_checkpoint_inner(&result.model, &corpus, Split::Val, &id, "val_activation")?;
        Ok(id)
    }

    fn save_stage(
        &self,
        result: &StageResult,
        corpus: &Corpus,
        stage: StageMark,
        name: &str,
        source: Option<String>,
    ) -> Result<String> {
        let train_cfg = match stage {
            StageMark::Cycle => &self.config.cycle,
            _ => &self.config.activation,
        };
        let meta = CheckpointMeta {
            stage,
            step: result.steps_done,
            epoch: result.epochs_done,
            model: self.config.model.clone(),
            vocab_hash: self.vocab.hash(),
            train_corpus_hash: Some(corpus.manifest.corpus_hash.clone()),
            train_split: Some(corpus.split_id(Split::Train)),
            config_fingerprint: train_cfg.fingerprint(),
            source_checkpoint: source,
        };
        checkpoint::save(
            &self.ws.checkpoint_path(name),
            &result.model,
            &meta,
            Some(&OptState::from_adamw(&result.opt)),
        )
    }

    /// Loads pseudo-label lines and rebuilds training samples against the
    /// detection corpus.
    pub fn load_pseudo_samples(
        &self,
        detection: &Corpus,
        cache: &PatchCache,
    ) -> Result<Vec<GroundingSample>> {
        let path = self.ws.root.join("pseudo").join("pseudo.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let body = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut by_id = std::collections::HashMap::new();
        for (i, r) in detection.records.iter().enumerate() {
            by_id.insert(r.id.clone(), i);
        }
        let mut out = Vec::new();
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            let p: PseudoRecord = serde_json::from_str(line)?;
            let idx = *by_id.get(&p.record_id).ok_or_else(|| {
                Error::InvalidConfig(format!("pseudo record {} not in detection corpus", p.record_id))
            })?;
            let qbox = refcycle_core::geometry::QuantizedBox::new(
                p.qbox[0], p.qbox[1], p.qbox[2], p.qbox[3],
            )?;
            let (q, a) = build_rec_pair(&p.expression);
            out.push(GroundingSample::new(
                format!("{}/pseudo{}", p.record_id, p.target_index),
                Arc::clone(&cache.patches[idx]),
                q,
                a.fill(qbox),
                TaskKind::Rec,
                Some(qbox),
                Provenance::Pseudo,
                Some(p.generator),
                &self.vocab,
            )?);
        }
        Ok(out)
    }

    /// Cycle stage from the activation checkpoint (or a later cycle
    /// checkpoint when resuming). With `use_pseudo`, previously generated
    /// pseudo-labels join the comprehension deck.
    pub fn train_cycle(&self, use_pseudo: bool, checkpoint_name: &str) -> Result<String> {
        let source_path = self.ws.checkpoint_path("activation");
        if !source_path.exists() {
            return Err(Error::StageOrder(
                "no activation checkpoint found; run `refcycle train` first".into(),
            ));
        }
        let (model, meta, opt, source_id) = checkpoint::load(&source_path)?;
        ensure_stage_allows(&meta, Stage::Cycle)?;
        self.run_cycle_from(model, opt, &meta, source_id, use_pseudo, checkpoint_name, None)
    }

    /// Shared cycle-stage runner; `epochs_override` trims the configured
    /// epoch count (the ablation uses it to split one budget across phases).
    #[allow(clippy::too_many_arguments)]
    pub fn run_cycle_from(
        &self,
        model: Model<f32>,
        opt: Option<OptState>,
        source_meta: &CheckpointMeta,
        source_id: String,
        use_pseudo: bool,
        checkpoint_name: &str,
        epochs_override: Option<usize>,
    ) -> Result<String> {
        let corpus = self.load_gold()?;
        let cache = patch_cache(&corpus, &model)?;
        let cap = self.config.data.max_expressions_per_scene;
        let rec = build_samples(&corpus, &cache, Split::Train, TaskKind::Rec, &self.vocab, cap)?;
        let reg = build_samples(&corpus, &cache, Split::Train, TaskKind::Reg, &self.vocab, cap)?;
        let cycle_cases = eval_cases(&corpus, &cache, Split::Train, &self.vocab)?;

        let detection = if use_pseudo { Some(self.load_detection()?) } else { None };
        let det_cache = match &detection {
            Some(det) => Some(patch_cache(det, &model)?),
            None => None,
        };
        let pseudo = match (&detection, &det_cache) {
            (Some(det), Some(cache)) => self.load_pseudo_samples(det, cache)?,
            _ => Vec::new(),
        };
        if use_pseudo && pseudo.is_empty() {
            return Err(Error::StageOrder(
                "no pseudo labels found; run `refcycle pseudo-label` first".into(),
            ));
        }
        if !pseudo.is_empty() {
            self.say(&format!("mixing {} pseudo samples into the deck", pseudo.len()));
        }

        let mut config = self.config.cycle.clone();
        if let Some(e) = epochs_override {
            config.epochs = e;
        }
        // continuing a run keeps its optimizer and counters
        let resume_point = match opt {
            Some(state) if source_meta.stage == StageMark::Cycle => Some(ResumePoint {
                opt: state.into_adamw(&model, &config.freeze)?,
                step: source_meta.step,
                epoch: source_meta.epoch,
            }),
            _ => None,
        };
        if let Some(r) = &resume_point {
            config.epochs += r.epoch as usize;
        }

        let data = CycleData {
            gold_rec: &rec,
            pseudo_rec: &pseudo,
            gold_reg: &reg,
            cycle_cases: &cycle_cases,
            vocab: &self.vocab,
        };
        let mut progress = self.progress_printer("cycle");
        let result = run_cycle_stage(model, &data, &config, resume_point, Some(&mut progress))?;
        result.log.write_csv(&self.ws.log_path(checkpoint_name))?;
        let id =
            self.save_stage(&result, &corpus, StageMark::Cycle, checkpoint_name, Some(source_id))?;
        self.say(&format!("cycle checkpoint {}", &id[..16]));
        self.eval_checkpoint_inner(
            &result.model,
            &corpus,
            Split::Val,
            &id,
            &format!("val_{checkpoint_name}"),
        )?;
        Ok(id)
    }

    /// Generates pseudo expressions for the detection corpus with a trained
    /// checkpoint; writes `pseudo/pseudo.jsonl` and the stats file.
    pub fn pseudo_label(&self, checkpoint_name: &str) -> Result<PseudoStats> {
        let ckpt_path = self.ws.checkpoint_path(checkpoint_name);
        if !ckpt_path.exists() {
            return Err(Error::NotFound(ckpt_path));
        }
        let (model, meta, _, id) = checkpoint::load(&ckpt_path)?;
        if meta.stage == StageMark::Fresh {
            return Err(Error::StageOrder(
                "pseudo-labeling needs at least an activation-trained checkpoint".into(),
            ));
        }
        let detection = self.load_detection()?;
        let cache = patch_cache(&detection, &model)?;
        let (samples, stats) = generate_pseudo_labels(
            &model,
            &self.vocab,
            &detection,
            &cache,
            Split::Train,
            &self.config.beam,
            &id,
        )?;
        let dir = self.ws.root.join("pseudo");
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut body = String::new();
        for s in &samples {
            // sample ids are "<record_id>/pseudo<object index>"
            let (record_id, rest) = s.id.rsplit_once("/pseudo").expect("pseudo id shape");
            let record = PseudoRecord {
                record_id: record_id.to_string(),
                target_index: rest.parse().expect("pseudo id index"),
                expression: extract_expression(&s.instruction),
                qbox: s.qbox.expect("pseudo sample has a box").corners(),
                generator: id.clone(),
            };
            body.push_str(&serde_json::to_string(&record)?);
            body.push('\n');
        }
        let jsonl = dir.join("pseudo.jsonl");
        std::fs::write(&jsonl, body)
            .map_err(|e| Error::io(format!("writing {}", jsonl.display()), e))?;
        let stats_json = serde_json::to_string_pretty(&stats)? + "\n";
        std::fs::write(dir.join("stats.json"), stats_json)
            .map_err(|e| Error::io("writing pseudo stats", e))?;
        self.say(&format!(
            "pseudo labels: kept {}/{} ({:.1}%), rejected (no marker/parse/unique) {}/{}/{}",
            stats.kept,
            stats.total,
            100.0 * stats.retention(),
            stats.rejected_no_marker,
            stats.rejected_parse,
            stats.rejected_not_unique
        ));
        Ok(stats)
    }

    fn eval_checkpoint_inner(
        &self,
        model: &Model<f32>,
        corpus: &Corpus,
        split: Split,
        checkpoint_id: &str,
        report_name: &str,
    ) -> Result<EvalReport> {
        let cache = patch_cache(corpus, model)?;
        let cases = eval_cases(corpus, &cache, split, &self.vocab)?;
        let generator = ModelGenerator { model, vocab: &self.vocab, beam: self.config.beam };
        let meta = ReportMeta {
            split_id: corpus.split_id(split),
            checkpoint: checkpoint_id.to_string(),
            config_fingerprint: self.config.model.fingerprint(),
        };
        let report = evaluate(
            &generator,
            &self.vocab,
            &cases,
            &meta,
            self.config.data.cycle_eval_samples,
        )?;
        refcycle_core::eval::emit_report(&report, &self.ws.report_path(report_name))?;
        self.say(&format!(
            "[{report_name}] acc@0.5 {:.4} on {} cases (parse failures {:.4})",
            report.acc_at_05, report.n_samples, report.parse_failure_rate
        ));
        Ok(report)
    }

    /// Evaluates a checkpoint file on a split of the gold corpus, enforcing
    /// train/eval disjointness.
    pub fn eval_checkpoint(&self, checkpoint_name: &str, split: Split) -> Result<EvalReport> {
        let ckpt_path = self.ws.checkpoint_path(checkpoint_name);
        if !ckpt_path.exists() {
            return Err(Error::NotFound(ckpt_path));
        }
        let (model, meta, _, id) = checkpoint::load(&ckpt_path)?;
        let corpus = self.load_gold()?;
        if meta.vocab_hash != self.vocab.hash() {
            return Err(Error::Vocabulary("checkpoint was trained with a different vocabulary".into()));
        }
        ensure_disjoint_eval(&meta, &corpus.split_id(split))?;
        self.eval_checkpoint_inner(
            &model,
            &corpus,
            split,
            &id,
            &format!("{}_{}", split.name(), checkpoint_name),
        )
    }

    /// Single-image inference: builds the comprehension question (from an
    /// expression) or takes a raw question, decodes, and reports the parsed
    /// box in pixels when one exists.
    pub fn infer(
        &self,
        checkpoint_name: &str,
        image_path: &Path,
        expr: Option<&str>,
        question: Option<&str>,
    ) -> Result<(String, Option<BBox>)> {
        let ckpt_path = self.ws.checkpoint_path(checkpoint_name);
        if !ckpt_path.exists() {
            return Err(Error::NotFound(ckpt_path));
        }
        let (model, _, _, _) = checkpoint::load(&ckpt_path)?;
        let img = image::open(image_path)?.to_rgb8();
        let raster = Raster { w: img.width(), h: img.height(), data: img.into_raw() };
        let canvas = Canvas::new(raster.w, raster.h)?;
        let instruction = match (expr, question) {
            (Some(e), None) => build_rec_pair(e).0,
            (None, Some(q)) => q.to_string(),
            _ => {
                return Err(Error::InvalidConfig(
                    "provide exactly one of --expr or --question".into(),
                ))
            }
        };
        let patches = Arc::new(model.patchify(&raster)?);
        let ids = self.vocab.tokenize(&instruction);
        let session = Session::new(&model, patches, &ids)?;
        let beams = beam_search(session, &[BOS], &self.config.beam, EOS)?;
        let answer = self.vocab.detokenize(&beams[0].tokens);
        let pixel_box = parse_box(&answer)
            .map(|p| dequantize(p.qbox, canvas))
            .transpose()?;
        Ok((answer, pixel_box))
    }
}

/// Recovers the expression slot from a comprehension question.
fn extract_expression(question: &str) -> String {
    question
        .strip_prefix("where is ")
        .and_then(|s| s.strip_suffix(" in the image?"))
        .unwrap_or(question)
        .to_string()
}

/// One ablation row: a named condition and its val/test accuracies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: String,
    pub val_acc: f64,
    pub test_acc: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub corpus_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Renders the three-condition comparison table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("corpus: {}\n", &self.corpus_hash[..16]));
        s.push_str(&format!("{:<28} {:>8} {:>8}\n", "condition", "val", "test"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<28} {:>8.4} {:>8.4}\n",
                r.condition, r.val_acc, r.test_acc
            ));
        }
        s
    }

    /// The ladder property: each added component keeps accuracy within
    /// `tolerance` of non-decreasing on both splits.
    pub fn trend_holds(&self, tolerance: f64) -> bool {
        self.rows.windows(2).all(|w| {
            w[1].val_acc >= w[0].val_acc - tolerance && w[1].test_acc >= w[0].test_acc - tolerance
        })
    }
}

/// Runs the three-condition ladder on one corpus and seed: activation only,
/// plus cycle training, plus pseudo-label augmentation. The cycle budget is
/// split so the augmented run continues from the mid-cycle checkpoint with
/// extra data rather than getting extra steps.
pub fn run_ablation(pipeline: &Pipeline) -> Result<AblationTable> {
    let corpus = pipeline.load_gold()?;
    let corpus_hash = corpus.manifest.corpus_hash.clone();
    let total_epochs = pipeline.config.cycle.epochs.max(2);
    let phase1 = total_epochs.div_ceil(2);

    // condition 1: coordinates activation only
    let act_id = pipeline.train_activation(false)?;
    let act_val = pipeline.eval_checkpoint("activation", Split::Val)?;
    let act_test = pipeline.eval_checkpoint("activation", Split::Test)?;

    // condition 2, phase 1: cycle training on gold for the first half
    let (act_model, act_meta, act_opt, act_src) =
        checkpoint::load(&pipeline.ws.checkpoint_path("activation"))?;
    ensure_stage_allows(&act_meta, Stage::Cycle)?;
    pipeline.run_cycle_from(
        act_model,
        act_opt,
        &act_meta,
        act_src.clone(),
        false,
        "cycle_mid",
        Some(phase1),
    )?;

    // condition 2, phase 2: continue on gold only
    let (mid_model, mid_meta, mid_opt, mid_id) =
        checkpoint::load(&pipeline.ws.checkpoint_path("cycle_mid"))?;
    pipeline.run_cycle_from(
        mid_model,
        mid_opt,
        &mid_meta,
        mid_id.clone(),
        false,
        "cycle",
        Some(total_epochs - phase1),
    )?;
    let cyc_val = pipeline.eval_checkpoint("cycle", Split::Val)?;
    let cyc_test = pipeline.eval_checkpoint("cycle", Split::Test)?;

    // condition 3: pseudo-label the detection corpus with the mid checkpoint,
    // then continue from the same point with the augmented deck
    pipeline.pseudo_label("cycle_mid")?;
    let (mid_model, mid_meta, mid_opt, mid_id2) =
        checkpoint::load(&pipeline.ws.checkpoint_path("cycle_mid"))?;
    pipeline.run_cycle_from(
        mid_model,
        mid_opt,
        &mid_meta,
        mid_id2,
        true,
        "cycle_pseudo",
        Some(total_epochs - phase1),
    )?;
    let aug_val = pipeline.eval_checkpoint("cycle_pseudo", Split::Val)?;
    let aug_test = pipeline.eval_checkpoint("cycle_pseudo", Split::Test)?;

    let table = AblationTable {
        corpus_hash,
        rows: vec![
            AblationRow {
                condition: "coordinates activation".into(),
                val_acc: act_val.acc_at_05,
                test_acc: act_test.acc_at_05,
                checkpoint: act_id,
            },
            AblationRow {
                condition: "+ cycle training".into(),
                val_acc: cyc_val.acc_at_05,
                test_acc: cyc_test.acc_at_05,
                checkpoint: cyc_val.checkpoint.clone(),
            },
            AblationRow {
                condition: "+ data augmentation".into(),
                val_acc: aug_val.acc_at_05,
                test_acc: aug_test.acc_at_05,
                checkpoint: aug_val.checkpoint.clone(),
            },
        ],
    };
    let dir = pipeline.ws.root.join("ablation");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io("creating ablation dir", e))?;
    std::fs::write(dir.join("table.txt"), table.render())
        .map_err(|e| Error::io("writing ablation table", e))?;
    std::fs::write(
        dir.join("table.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )
    .map_err(|e| Error::io("writing ablation json", e))?;
    Ok(table)
}

/// Ground-truth replay over eval cases, for harness self-tests from the CLI.
pub struct OracleCli;

impl AnswerGenerator for OracleCli {
    fn answer(&self, case: &EvalCase, instruction: &str) -> Result<String> {
        refcycle_core::eval::OracleGenerator.answer(case, instruction)
    }
}
