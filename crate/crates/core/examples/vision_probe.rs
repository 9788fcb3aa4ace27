//! Vision-path probe: overfit comprehension samples that share one
//! instruction ("where is the red circle in the image?") over different
//! images, so only the image can disambiguate the target box. If this
//! cannot reach high IoU, coordinates are not flowing from pixels.

use std::sync::Arc;
use std::time::Instant;

use refcycle_core::decode::greedy_decode;
use refcycle_core::geometry::{dequantize, iou, quantize};
use refcycle_core::losses::LossWeights;
use refcycle_core::model::{Model, ModelConfig, Session};
use refcycle_core::scenegen::{generate_scene, render, Color, SceneConfig, Shape};
use refcycle_core::textio::{build_rec_pair, parse_box, TaskKind, Vocabulary, BOS, EOS};
use refcycle_core::train::{
    run_activation_stage, GroundingSample, Progress, Provenance, TrainConfig,
};

fn main() -> refcycle_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, default: f64| -> f64 {
        args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default)
    };
    let n = arg(1, 32.0) as usize;
    let d = arg(2, 48.0) as usize;
    let epochs = arg(3, 150.0) as usize;
    let lr = arg(4, 2e-3);

    let vocab = Vocabulary::standard();
    let scene_cfg = SceneConfig { max_objects: 1, ..SceneConfig::default() };
    let model_cfg = ModelConfig {
        d,
        heads: 4,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(model_cfg, 1)?;

    // collect single-object red-circle scenes; the instruction never varies
    let mut samples = Vec::new();
    let mut cases = Vec::new();
    let mut seed = 0u64;
    while samples.len() < n {
        seed += 1;
        let scene = generate_scene(seed, &scene_cfg)?;
        let obj = &scene.objects[0];
        if obj.color != Color::Red || obj.shape != Shape::Circle {
            continue;
        }
        let raster = render(&scene);
        let patches = Arc::new(model.patchify(&raster)?);
        let qbox = quantize(obj.box_px, scene.canvas)?;
        let (q, a) = build_rec_pair("the red circle");
        samples.push(GroundingSample::new(
            format!("probe-{seed}"),
            Arc::clone(&patches),
            q,
            a.fill(qbox),
            TaskKind::Rec,
            Some(qbox),
            Provenance::Gold,
            None,
            &vocab,
        )?);
        cases.push((patches, obj.box_px, scene.canvas));
    }
    println!("probe: {} red-circle scenes, d={}, {} epochs, lr {}", n, d, epochs, lr);

    let config = TrainConfig {
        epochs,
        lr,
        warmup_steps: 50,
        batch_size: 16,
        loss_weights: LossWeights::lm_only(),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let mut last = 0.0;
    let mut on = |p: Progress| {
        let Progress::EpochDone { epoch, mean_total, .. } = p;
        if epoch % 10 == 0 {
            println!("  epoch {epoch}: loss {mean_total:.4}");
        }
        last = mean_total;
    };
    let result = run_activation_stage(model, &samples, &config, None, Some(&mut on))?;
    println!(
        "trained {} steps in {:.1?}, final loss {last:.4}",
        result.steps_done,
        t0.elapsed()
    );

    // grade greedy decodes on the training set itself
    let instruction = vocab.tokenize(&samples[0].instruction);
    let mut exact = 0;
    let mut iou_sum = 0.0;
    for (i, (patches, gold, canvas)) in cases.iter().enumerate() {
        let mut session = Session::new(&result.model, Arc::clone(patches), &instruction)?;
        let out = greedy_decode(&mut session, &[BOS], 20, EOS)?;
        let text = vocab.detokenize(&out);
        if text == samples[i].target {
            exact += 1;
        }
        if let Some(p) = parse_box(&text) {
            iou_sum += iou(dequantize(p.qbox, *canvas)?, *gold);
        }
    }
    println!(
        "train-set decode: exact {}/{}, mean IoU {:.4}",
        exact,
        cases.len(),
        iou_sum / cases.len() as f64
    );
    Ok(())
}
