use std::path::{Path, PathBuf};
use std::time::Instant;

use aggpose_core::checkpoint::Checkpoint;
use aggpose_core::codec::decode;
use aggpose_core::gradcheck;
use aggpose_core::inference::{
    detector_boxes, evaluate_model, gt_boxes, infer_image, prepare_instances, EvalSet,
    PoseDataset,
};
use aggpose_core::layers::Profiler;
use aggpose_core::{load_partial, LoadPolicy, Model, ModelConfig, Trainer};
use aggpose_data::coco::{load_boxes, load_results, save_results};
use aggpose_data::crop::BBOX_PADDING;
use aggpose_data::io::write_atomic;
use aggpose_data::schema::INFANT_DEFAULT_K;
use aggpose_data::{evaluate, EvalParams, EvalSummary, KeypointSchema, Normalization, RgbImage};
use aggpose_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::render::overlay;
use crate::{BenchArgs, EvalArgs, GradcheckArgs, InferArgs, SynthArgs, TrainArgs};

pub const EVAL_REPORT: &str = "eval.json";

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    Ok(write_atomic(path, text.as_bytes())?)
}

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// The explicit schema, or the built-in layout matching `num_keypoints`.
fn schema_for(flag: Option<&str>, num_keypoints: usize) -> CliResult<KeypointSchema> {
    let schema = match flag {
        Some(s) => KeypointSchema::resolve(s)?,
        None => match num_keypoints {
            17 => KeypointSchema::coco17(),
            21 => KeypointSchema::infant21(INFANT_DEFAULT_K),
            k => {
                return Err(CliError::Usage(format!(
                    "no built-in schema has {k} keypoints; pass --schema"
                )))
            }
        },
    };
    if schema.num_keypoints() != num_keypoints {
        return Err(CliError::Usage(format!(
            "schema {} has {} keypoints, the network predicts {num_keypoints}",
            schema.name,
            schema.num_keypoints()
        )));
    }
    Ok(schema)
}

/// Box padding recorded at training time, unless overridden.
fn padding_for(flag: Option<f64>, ckpt: &Checkpoint<f32>) -> f64 {
    flag.or_else(|| ckpt.trainer.get("bbox_padding").and_then(|v| v.as_f64()))
        .unwrap_or(BBOX_PADDING)
}

fn print_summary(s: &EvalSummary) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "AP {:.4} | AP50 {} | AP75 {} | AP_M {} | AP_L {} | AR {:.4}",
        s.ap,
        opt(s.ap50),
        opt(s.ap75),
        opt(s.ap_m),
        opt(s.ap_l),
        s.ar
    );
}

pub fn train(a: &TrainArgs, manifest_path: Option<&Path>) -> CliResult<()> {
    let mut manifest = RunManifest::start("train");
    let mut cfg = RunConfig::load(&a.config)?;
    require_exists(&a.data, "data directory")?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let schema = cfg.resolve_schema()?;
    let model_cfg = cfg.resolve_model(&schema)?;
    let ds = PoseDataset::load(&a.data, &schema)?;
    let (train_anns, val_anns) = ds.split(cfg.train.holdout)?;
    let [h, w] = model_cfg.input_size;
    let norm = Normalization::default();
    let instances = prepare_instances(&ds, &gt_boxes(&train_anns), (h, w), cfg.train.bbox_padding, &norm)?;
    if instances.is_empty() {
        return Err(CliError::Usage(format!("{} has no usable annotations", a.data.display())));
    }
    let samples: Vec<_> = instances.into_iter().map(|i| i.sample).collect();
    let eval_set = EvalSet::from_gt(&ds, &val_anns, (h, w), cfg.train.bbox_padding)?;
    log::info!(
        "{} training instances, {} evaluation instances, {} parameters",
        samples.len(),
        eval_set.instances.len(),
        Model::<f32>::build(&model_cfg, 0)?.num_params()
    );

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load(path)?;
            if ckpt.config != model_cfg {
                return Err(CliError::Usage(format!(
                    "{} was trained with a different network than {}",
                    path.display(),
                    a.config.display()
                )));
            }
            Trainer::resume(&ckpt, cfg.train.clone())?
        }
        None => {
            let mut model = Model::<f32>::build(&model_cfg, cfg.train.seed)?;
            if let Some(path) = &a.init {
                let ckpt = Checkpoint::<f32>::load(path)?;
                let report = load_partial(&mut model, &ckpt, &LoadPolicy::ByPrefix(a.init_prefix.clone()))?;
                log::info!(
                    "initialized {} tensors from {} ({} missing, {} unexpected)",
                    report.loaded.len(),
                    path.display(),
                    report.missing.len(),
                    report.unexpected.len()
                );
            }
            Trainer::new(model, cfg.train.clone())?
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", a.out.display())))?;
    let report = trainer.fit(&samples, &schema, Some(&eval_set), Some(&a.out))?;
    let mut outputs = report.outputs.clone();
    if let Some(summary) = &report.final_eval {
        print_summary(summary);
        let path = a.out.join(EVAL_REPORT);
        write_json(&path, summary)?;
        outputs.push(path);
    }
    if let Some(last) = report.log.last() {
        println!("step {} loss {:.6e}", last.step, last.loss);
    }
    manifest.config = serde_json::json!({
        "schema": schema,
        "model": model_cfg,
        "train": cfg.train,
    });
    manifest.seed = Some(cfg.train.seed);
    manifest.outputs = outputs;
    let path = manifest_path.map_or_else(|| a.out.join(MANIFEST_FILE), Path::to_path_buf);
    manifest.finish(&path)?;
    Ok(())
}

pub fn eval(a: &EvalArgs, manifest_path: Option<&Path>) -> CliResult<()> {
    let mut manifest = RunManifest::start("eval");
    require_exists(&a.annotations, "annotation file")?;
    let summary = if let Some(results) = &a.results {
        let schema = KeypointSchema::resolve(a.schema.as_deref().unwrap_or("infant"))?;
        let coco = aggpose_data::coco::load_coco_keypoints(&a.annotations, &schema)?;
        let dets = load_results(results, &schema)?;
        manifest.config = serde_json::json!({ "schema": schema, "results": results });
        evaluate(&dets, &coco.annotations, &schema, &EvalParams::default()).map_err(aggpose_core::CoreError::from)?
    } else {
        let ckpt_path = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        let ckpt = Checkpoint::<f32>::load(ckpt_path)?;
        let model = Model::from_checkpoint(&ckpt)?;
        let schema = schema_for(a.schema.as_deref(), model.config().num_keypoints)?;
        let images = a.images.clone().unwrap_or_else(|| {
            a.annotations
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        });
        let ds = PoseDataset::from_annotations(&a.annotations, &images, &schema)?;
        let padding = padding_for(a.padding, &ckpt);
        let boxes = match &a.boxes {
            Some(path) => detector_boxes(&load_boxes(path)?, schema.num_keypoints()),
            None => gt_boxes(&ds.coco.annotations),
        };
        let [h, w] = model.config().input_size;
        let set = EvalSet {
            instances: prepare_instances(&ds, &boxes, (h, w), padding, &Normalization::default())?,
            annotations: ds.coco.annotations.clone(),
        };
        let (summary, preds) = evaluate_model(&model, &set, &schema)?;
        if let Some(path) = &a.predictions {
            save_results(path, &preds.iter().map(|p| p.to_result()).collect::<Vec<_>>())?;
            manifest.outputs.push(path.clone());
        }
        manifest.config = serde_json::json!({
            "schema": schema,
            "model": model.config(),
            "checkpoint": ckpt_path,
            "boxes": a.boxes,
            "padding": padding,
        });
        summary
    };
    print_summary(&summary);
    if let Some(path) = &a.out {
        write_json(path, &summary)?;
        manifest.outputs.push(path.clone());
    }
    if let Some(path) = manifest_path {
        manifest.finish(path)?;
    }
    match a.min_ap {
        Some(min) if !(summary.ap >= min) => Err(CliError::Check(format!("AP {:.4} below {min}", summary.ap))),
        _ => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct KeypointOut {
    name: String,
    x: f64,
    y: f64,
    confidence: f64,
}

#[derive(Debug, Serialize)]
struct InferOut {
    image: PathBuf,
    width: usize,
    height: usize,
    bbox: [f64; 4],
    score: f64,
    keypoints: Vec<KeypointOut>,
}

/// `out.json` → `out.overlay.png`.
pub fn overlay_path(out: &Path) -> PathBuf {
    out.with_extension("overlay.png")
}

pub fn infer(a: &InferArgs, manifest_path: Option<&Path>) -> CliResult<()> {
    let mut manifest = RunManifest::start("infer");
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let schema = schema_for(a.schema.as_deref(), model.config().num_keypoints)?;
    let img = RgbImage::load(&a.image).map_err(|e| CliError::Usage(format!("cannot read image: {e}")))?;
    let padding = padding_for(a.padding, &ckpt);
    let result = infer_image(&model, &img, a.bbox, padding, &schema)?;
    let p = &result.prediction;
    let out = InferOut {
        image: a.image.clone(),
        width: img.width,
        height: img.height,
        bbox: a.bbox.unwrap_or([0.0, 0.0, img.width as f64, img.height as f64]),
        score: p.score,
        keypoints: schema
            .keypoint_names
            .iter()
            .zip(&p.keypoints.points)
            .zip(&p.confidence)
            .map(|((name, kp), &confidence)| KeypointOut {
                name: name.clone(),
                x: kp.x,
                y: kp.y,
                confidence,
            })
            .collect(),
    };
    write_json(&a.out, &out)?;
    manifest.outputs.push(a.out.clone());
    if a.overlay {
        let path = overlay_path(&a.out);
        let decoded = decode(&result.heatmaps);
        overlay(&result.sample, &result.heatmaps, &decoded, &Normalization::default()).save_png(&path)?;
        manifest.outputs.push(path);
    }
    for k in &out.keypoints {
        println!("{:<16} {:>8.2} {:>8.2} {:.3}", k.name, k.x, k.y, k.confidence);
    }
    if let Some(path) = manifest_path {
        manifest.config = serde_json::json!({ "schema": schema, "model": model.config(), "padding": padding });
        manifest.finish(path)?;
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, manifest_path: Option<&Path>) -> CliResult<()> {
    let mut manifest = RunManifest::start("gradcheck");
    let start = Instant::now();
    let reports = gradcheck::run(&a.scope)?;
    println!("{:<12} {:>12} {:>10} {:>8} {:>8}  result", "block", "worst", "tolerance", "probes", "seconds");
    for r in &reports {
        println!(
            "{:<12} {:>12.3e} {:>10.0e} {:>8} {:>8.1}  {}",
            r.name,
            r.worst,
            r.tolerance,
            r.probes,
            r.seconds,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let total = start.elapsed().as_secs_f64();
    println!("total {total:.1} s");
    if let Some(path) = &a.out {
        write_json(path, &reports)?;
        manifest.outputs.push(path.clone());
    }
    if let Some(path) = manifest_path {
        manifest.config = serde_json::json!({ "scope": a.scope });
        manifest.finish(path)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn synth(a: &SynthArgs, manifest_path: Option<&Path>) -> CliResult<()> {
    let mut manifest = RunManifest::start("synth");
    let schema = KeypointSchema::resolve(&a.schema)?;
    let ds = aggpose_data::generate_synthetic(&a.out, a.n, a.seed, (a.width, a.height), &schema)?;
    println!("wrote {} images to {}", ds.images.len(), a.out.display());
    if let Some(path) = manifest_path {
        manifest.seed = Some(a.seed);
        manifest.config = serde_json::json!({ "n": a.n, "width": a.width, "height": a.height, "schema": schema });
        manifest.outputs.push(a.out.join(aggpose_core::inference::ANNOTATIONS_FILE));
        manifest.finish(path)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub params: usize,
    pub batch: usize,
    pub iters: usize,
    pub seconds_per_forward: f64,
    pub images_per_sec: f64,
    /// Percent of forward time per block category, `other` included.
    pub shares: Vec<(String, f64)>,
}

pub fn bench_model(cfg: &ModelConfig, batch: usize, iters: usize, warmup: usize, seed: u64) -> CliResult<BenchReport> {
    if batch == 0 || iters == 0 {
        return Err(CliError::Usage("batch and iters must be at least 1".into()));
    }
    let model = Model::<f32>::build(cfg, seed)?;
    let [h, w] = cfg.input_size;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::from_fn(&[batch, 3, h, w], |_| rng.random_range(-2.0..2.0f32));
    for _ in 0..warmup {
        model.predict(input.clone())?;
    }
    let profiler = Profiler::default();
    let start = Instant::now();
    for _ in 0..iters {
        let g = Graph::inference();
        let x = g.constant(input.clone());
        model.forward_profiled(&g, &x, Some(&profiler))?;
    }
    let total = start.elapsed().as_secs_f64();
    let mut shares: Vec<(String, f64)> = profiler
        .totals()
        .into_iter()
        .map(|(k, d)| (k.to_string(), 100.0 * d.as_secs_f64() / total))
        .collect();
    let accounted: f64 = shares.iter().map(|(_, s)| s).sum();
    shares.push(("other".into(), (100.0 - accounted).max(0.0)));
    Ok(BenchReport {
        model: cfg.variant.clone(),
        params: model.num_params(),
        batch,
        iters,
        seconds_per_forward: total / iters as f64,
        images_per_sec: (batch * iters) as f64 / total,
        shares,
    })
}

pub fn bench(a: &BenchArgs, manifest_path: Option<&Path>) -> CliResult<()> {
    let mut manifest = RunManifest::start("bench");
    let cfg = match (&a.model, &a.config) {
        (Some(name), _) => ModelConfig::preset(name, 21)
            .ok_or_else(|| CliError::Usage(format!("unknown model preset {name:?}")))?,
        (None, Some(path)) => {
            let run = RunConfig::load(path)?;
            run.resolve_model(&run.resolve_schema()?)?
        }
        (None, None) => ModelConfig::aggpose_t(21),
    };
    let report = bench_model(&cfg, a.batch, a.iters, a.warmup, a.seed)?;
    println!(
        "{}: {} parameters, batch {}, {:.4} s/forward, {:.2} images/s",
        report.model, report.params, report.batch, report.seconds_per_forward, report.images_per_sec
    );
    for (name, share) in &report.shares {
        println!("  {name:<10} {share:>6.2}%");
    }
    if let Some(path) = &a.out {
        write_json(path, &report)?;
        manifest.outputs.push(path.clone());
    }
    if let Some(path) = manifest_path {
        manifest.seed = Some(a.seed);
        manifest.config = serde_json::json!({ "model": cfg, "batch": a.batch, "iters": a.iters });
        manifest.finish(path)?;
    }
    Ok(())
}
