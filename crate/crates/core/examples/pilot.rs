//! Timing and learnability pilot: train a small model end to end and print
//! per-stage wall times plus held-out accuracy.
//!
//! ```text
//! cargo run --release -p refcycle-core --example pilot -- [n_scenes] [d] [act_epochs] [cyc_epochs]
//! ```

use std::time::Instant;

use refcycle_core::config::RunConfig;
use refcycle_core::dataset::{generate_corpus, Split};
use refcycle_core::decode::BeamConfig;
use refcycle_core::eval::{
    cycle_round_trip, eval_cases, evaluate, patch_cache, ModelGenerator, ReportMeta,
};
use refcycle_core::losses::LossWeights;
use refcycle_core::model::Model;
use refcycle_core::textio::{TaskKind, Vocabulary};
use refcycle_core::train::{
    build_samples, run_activation_stage, run_cycle_stage, CycleData, Progress, Stage, TrainConfig,
};

fn main() -> refcycle_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, default: usize| -> usize {
        args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default)
    };
    let n_scenes = arg(1, 300);
    let d = arg(2, 32);
    let act_epochs = arg(3, 3);
    let cyc_epochs = arg(4, 3);
    let lr = args
        .get(5)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.5e-3f64);

    let mut cfg = RunConfig::default();
    cfg.model.d = d;
    cfg.model.heads = 4;
    cfg.data.n_scenes = n_scenes;

    let vocab = Vocabulary::standard();
    cfg.model.vocab_size = vocab.len();

    let t0 = Instant::now();
    let corpus = generate_corpus(42, &cfg.scene, n_scenes, 0.1, 0.1, false, "scene")?;
    println!("corpus: {} scenes in {:.1?}", n_scenes, t0.elapsed());

    let model = Model::<f32>::new(cfg.model.clone(), 1)?;
    println!(
        "model: d={} params={} ({:.2} MB f32)",
        d,
        model.params.n_scalars(),
        model.params.n_scalars() as f64 * 4.0 / 1e6
    );
    let cache = patch_cache(&corpus, &model)?;

    let det = build_samples(&corpus, &cache, Split::Train, TaskKind::DetCaption, &vocab, None)?;
    let rec = build_samples(&corpus, &cache, Split::Train, TaskKind::Rec, &vocab, Some(2))?;
    let reg = build_samples(&corpus, &cache, Split::Train, TaskKind::Reg, &vocab, Some(2))?;
    println!("samples: det={} rec={} reg={}", det.len(), rec.len(), reg.len());

    let act_cfg = TrainConfig {
        epochs: act_epochs,
        lr,
        batch_size: 32,
        loss_weights: LossWeights::lm_only(),
        ..TrainConfig::default()
    };
    let mut on = |p: Progress| {
        let Progress::EpochDone { epoch, steps, mean_total } = p;
        println!("  epoch {epoch}: steps={steps} mean_loss={mean_total:.4}");
    };
    let t1 = Instant::now();
    let act = run_activation_stage(model, &det, &act_cfg, None, Some(&mut on))?;
    println!(
        "activation: {} steps in {:.1?} ({:.0} ms/step)",
        act.steps_done,
        t1.elapsed(),
        t1.elapsed().as_millis() as f64 / act.steps_done as f64
    );

    let cycle_cases = eval_cases(&corpus, &cache, Split::Train, &vocab)?;
    let cyc_cfg = TrainConfig {
        stage: Stage::Cycle,
        epochs: cyc_epochs,
        lr: lr * 0.7,
        batch_size: 32,
        cycle_batch: 2,
        loss_weights: LossWeights { lm: 0.0, itc: 0.1, itg: 1.0, itm: 0.1, cyc: 1.0 },
        ..TrainConfig::default()
    };
    let data = CycleData {
        gold_rec: &rec,
        pseudo_rec: &[],
        gold_reg: &reg,
        cycle_cases: &cycle_cases,
        vocab: &vocab,
    };
    let t2 = Instant::now();
    let mut on2 = |p: Progress| {
        let Progress::EpochDone { epoch, steps, mean_total } = p;
        println!("  epoch {epoch}: steps={steps} mean_loss={mean_total:.4}");
    };
    let cyc = run_cycle_stage(act.model, &data, &cyc_cfg, None, Some(&mut on2))?;
    println!(
        "cycle: {} steps in {:.1?} ({:.0} ms/step)",
        cyc.steps_done - act.steps_done * 0,
        t2.elapsed(),
        t2.elapsed().as_millis() as f64 / cyc.steps_done.max(1) as f64
    );

    let t3 = Instant::now();
    let val_cases = eval_cases(&corpus, &cache, Split::Val, &vocab)?;
    let beam = BeamConfig { beam_width: 2, ..BeamConfig::default() };
    let generator = ModelGenerator { model: &cyc.model, vocab: &vocab, beam };
    let meta = ReportMeta {
        split_id: corpus.split_id(Split::Val),
        checkpoint: "pilot".into(),
        config_fingerprint: "pilot".into(),
    };
    let report = evaluate(&generator, &vocab, &val_cases, &meta, 50)?;
    println!(
        "eval: {} cases in {:.1?} -> acc@0.5 {:.4} mean_iou {:.4} parse_fail {:.4}",
        report.n_samples,
        t3.elapsed(),
        report.acc_at_05,
        report.mean_iou,
        report.parse_failure_rate
    );
    let cycle_stats = cycle_round_trip(&generator, &vocab, &val_cases, 50)?;
    println!(
        "cycle round trip: box mean {:.2} text mean {:.3} broken {}/{}",
        cycle_stats.box_mean, cycle_stats.text_mean, cycle_stats.broken, cycle_stats.n
    );
    Ok(())
}
