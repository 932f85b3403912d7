//! Heatmap-regression training: configuration, deterministic batching, the
//! optimizer step and the fit loop with evaluation and checkpoints.

use std::path::{Path, PathBuf};

use aggpose_data::crop::apply_augment;
use aggpose_data::crop::AugmentDraw;
use aggpose_data::{AugmentConfig, InstanceSample, KeypointSchema};
use aggpose_tensor::{Graph, Scalar, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{self, DEFAULT_SIGMA};
use crate::error::{CoreError, NonFiniteDiagnostic, Result};
use crate::inference::{evaluate_model, EvalSet};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};

/// Levels frozen while `step < until_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePhase {
    pub until_step: u64,
    pub levels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Steps at which the learning rate is multiplied by `lr_decay`;
    /// defaults to 70% and 90% of `total_steps`.
    pub milestones: Option<Vec<u64>>,
    pub lr_decay: f64,
    pub seed: u64,
    /// Gaussian spread of the targets in heatmap cells.
    pub sigma: f64,
    /// Box enlargement applied before cropping.
    pub bbox_padding: f64,
    pub augment: AugmentConfig,
    /// Staged freezing; phases are ordered by `until_step`.
    pub freeze: Vec<FreezePhase>,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    /// Steps between evaluations; 0 evaluates once at the end.
    pub eval_interval: u64,
    /// Images held out from training for evaluation; 0 evaluates on the training set.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            lr: 1e-3,
            weight_decay: adam.weight_decay,
            betas: [adam.beta1, adam.beta2],
            eps: adam.eps,
            batch_size: 32,
            total_steps: 1000,
            milestones: None,
            lr_decay: 0.1,
            seed: 0,
            sigma: DEFAULT_SIGMA,
            bbox_padding: aggpose_data::crop::BBOX_PADDING,
            augment: AugmentConfig::default(),
            freeze: Vec::new(),
            checkpoint_interval: 0,
            eval_interval: 0,
            holdout: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.sigma > 0.0) || !(self.bbox_padding > 0.0) {
            return bad("sigma and bbox_padding must be positive");
        }
        if !(0.0..1.0).contains(&self.betas[0]) || !(0.0..1.0).contains(&self.betas[1]) {
            return bad("betas must lie in [0, 1)");
        }
        if self.milestones().windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing");
        }
        if self.freeze.windows(2).any(|w| w[0].until_step >= w[1].until_step) {
            return bad("freeze phases must have increasing until_step");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn milestones(&self) -> Vec<u64> {
        self.milestones.clone().unwrap_or_else(|| {
            let n = self.total_steps as f64;
            let mut m = vec![(0.7 * n).round() as u64, (0.9 * n).round() as u64];
            m.dedup();
            m
        })
    }

    /// Step-decayed learning rate at `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| step >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Levels frozen at `step`, or `None` when no freeze schedule is set.
    pub fn frozen_levels_at(&self, step: u64) -> Option<Vec<usize>> {
        if self.freeze.is_empty() {
            return None;
        }
        Some(
            self.freeze
                .iter()
                .find(|p| step < p.until_step)
                .map(|p| p.levels.clone())
                .unwrap_or_default(),
        )
    }

    /// Index of the freeze phase active at `step`.
    pub fn phase_at(&self, step: u64) -> usize {
        self.freeze.iter().take_while(|p| step >= p.until_step).count()
    }
}

/// One assembled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar> {
    /// `[B, 3, H, W]`
    pub images: Tensor<T>,
    /// `[B, K, H/4, W/4]`
    pub targets: Tensor<T>,
    /// `[B, K]`
    pub mask: Tensor<T>,
    /// Instance index of every slot.
    pub indices: Vec<usize>,
}

const PERMUTATION_SALT: u64 = 0x5045_524d_5554_4531;
const AUGMENT_SALT: u64 = 0x4155_474d_454e_5431;

/// Deterministic batch assembly: the batch of any step is a pure function of
/// the seed and the step, so training can resume without stored RNG state.
///
/// Sample position `p = step·B + slot` reads instance `perm_e[p mod n]`
/// where `e = p / n` and `perm_e` is a seeded shuffle per epoch; each
/// sample's augmentation generator is a stream keyed by `p`.
pub struct Batcher<'a> {
    pub instances: &'a [InstanceSample],
    pub schema: &'a KeypointSchema,
    pub augment: AugmentConfig,
    pub sigma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(instances: &'a [InstanceSample], schema: &'a KeypointSchema, cfg: &TrainConfig) -> Result<Self> {
        if instances.is_empty() {
            return Err(CoreError::Config("training set has no instances".into()));
        }
        Ok(Batcher {
            instances,
            schema,
            augment: cfg.augment,
            sigma: cfg.sigma,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        })
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ PERMUTATION_SALT);
        rng.set_stream(epoch);
        let mut perm: Vec<usize> = (0..self.instances.len()).collect();
        perm.shuffle(&mut rng);
        perm
    }

    /// Instance indices of the batch at `step`.
    pub fn indices(&self, step: u64) -> Vec<usize> {
        let n = self.instances.len() as u64;
        let b = self.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..b)
            .map(|slot| {
                let p = step * b + slot;
                let epoch = p / n;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    cached = Some((epoch, self.permutation(epoch)));
                }
                cached.as_ref().unwrap().1[(p % n) as usize]
            })
            .collect()
    }

    /// The augmented sample at position `p` of the sample stream.
    fn sample(&self, index: usize, position: u64) -> InstanceSample {
        let base = &self.instances[index];
        if self.augment.is_identity() {
            return base.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ AUGMENT_SALT);
        rng.set_stream(position);
        apply_augment(base, &AugmentDraw::sample(&self.augment, &mut rng), self.schema)
    }

    pub fn batch<T: Scalar>(&self, step: u64) -> Batch<T> {
        let indices = self.indices(step);
        let b = indices.len();
        let (h, w) = self.instances[0].size();
        let hm = (h / crate::config::OUTPUT_STRIDE, w / crate::config::OUTPUT_STRIDE);
        let k = self.schema.num_keypoints();
        let parts: Vec<(Vec<T>, Tensor<T>, Vec<T>)> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let s = self.sample(i, step * self.batch_size as u64 + slot as u64);
                let (t, m) = codec::encode::<T>(&s.keypoints, hm, self.sigma);
                (s.image.data().iter().map(|&v| T::from_f64(v as f64)).collect(), t, m)
            })
            .collect();
        let mut images = Vec::with_capacity(b * 3 * h * w);
        let mut targets = Vec::with_capacity(b * k * hm.0 * hm.1);
        let mut mask = Vec::with_capacity(b * k);
        for (im, t, m) in parts {
            images.extend(im);
            targets.extend_from_slice(t.data());
            mask.extend(m);
        }
        Batch {
            images: Tensor::new(&[b, 3, h, w], images).expect("batch images"),
            targets: Tensor::new(&[b, k, hm.0, hm.1], targets).expect("batch targets"),
            mask: Tensor::new(&[b, k], mask).expect("batch mask"),
            indices,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Forward, masked MSE, backward; gradients per parameter in store order
/// (`None` for frozen parameters and parameters with no path to the loss).
pub fn loss_and_grads<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let g = Graph::new();
    let x = g.constant(batch.images.clone());
    let (out, params) = model.forward(&g, &x)?;
    let loss = g.masked_mse(&out.heatmaps, &batch.targets, &batch.mask)?;
    let value = loss.value().data()[0].to_f64();
    let mut grads = g.backward(&loss)?;
    Ok((value, params.iter().map(|p| grads.take(p)).collect()))
}

/// One optimizer step; a non-finite loss aborts with a diagnostic and leaves
/// the parameters untouched.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &Batch<T>,
    lr: f64,
    step: u64,
) -> Result<StepStats> {
    let (loss, grads) = match loss_and_grads(model, batch) {
        Err(CoreError::Tensor(TensorError::NonFinite { op })) => {
            return Err(CoreError::NonFiniteLoss(Box::new(NonFiniteDiagnostic {
                step,
                lr,
                loss: f64::NAN,
                op: Some(op),
                grad_norms: Vec::new(),
            })))
        }
        r => r?,
    };
    let norms: Vec<f64> = grads.iter().map(|g| g.as_ref().map_or(0.0, |g| g.l2_norm())).collect();
    let grad_norm = norms.iter().map(|n| n * n).sum::<f64>().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        let mut grad_norms: Vec<(String, f64)> = model
            .store
            .params()
            .iter()
            .zip(&norms)
            .map(|(p, &n)| (p.name.clone(), n))
            .collect();
        grad_norms.sort_by(|a, b| b.1.total_cmp(&a.1));
        return Err(CoreError::NonFiniteLoss(Box::new(NonFiniteDiagnostic {
            step,
            lr,
            loss,
            op: None,
            grad_norms,
        })));
    }
    opt.step(&mut model.store, &grads, lr);
    Ok(StepStats {
        step,
        loss,
        lr,
        grad_norm,
    })
}

/// Parameters that receive no gradient signal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientFlow {
    /// Trainable, connected to the loss, but with an all-zero gradient.
    pub dead: Vec<String>,
    /// Trainable but with no path to the loss.
    pub unreachable: Vec<String>,
    pub live: usize,
}

pub fn gradient_flow<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<GradientFlow> {
    let (_, grads) = loss_and_grads(model, batch)?;
    let mut report = GradientFlow::default();
    for (p, g) in model.store.params().iter().zip(grads) {
        if p.frozen {
            continue;
        }
        match g {
            None => report.unreachable.push(p.name.clone()),
            Some(g) if g.data().iter().all(|v| v.to_f64() == 0.0) => report.dead.push(p.name.clone()),
            Some(_) => report.live += 1,
        }
    }
    Ok(report)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_ap: Option<f64>,
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn phase_checkpoint_name(phase: usize) -> String {
    format!("phase{phase}.ckpt")
}

/// Model, optimizer and position in the schedule.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    /// Number of completed steps.
    pub step: u64,
    pub best_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub log: Vec<LogRecord>,
    pub best_ap: Option<f64>,
    pub final_eval: Option<aggpose_data::EvalSummary>,
    /// Files written, in order of first creation.
    pub outputs: Vec<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.store, cfg.adamw());
        Ok(Trainer {
            model,
            opt,
            cfg,
            step: 0,
            best_ap: None,
        })
    }

    /// Continue from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: &Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::from_checkpoint(ckpt)?;
        let opt = ckpt
            .restore_optimizer(&model.store)?
            .ok_or_else(|| CoreError::Load("checkpoint has no optimizer state".into()))?;
        let best_ap = ckpt.trainer.get("best_ap").and_then(|v| v.as_f64());
        Ok(Trainer {
            model,
            opt,
            cfg,
            step: ckpt.step,
            best_ap,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ckpt = Checkpoint::from_model(&self.model, self.step).with_optimizer(&self.model.store, &self.opt);
        ckpt.trainer = serde_json::json!({
            "best_ap": self.best_ap,
            "bbox_padding": self.cfg.bbox_padding,
            "sigma": self.cfg.sigma,
            "seed": self.cfg.seed,
        });
        ckpt
    }

    fn apply_freeze(&mut self) {
        if let Some(levels) = self.cfg.frozen_levels_at(self.step) {
            self.model.store.freeze_levels(&levels);
        }
    }

    /// Run one step on the batch the schedule assigns to the current step.
    pub fn step_on(&mut self, batcher: &Batcher) -> Result<StepStats> {
        let batch = batcher.batch(self.step);
        self.step_with(&batch)
    }

    pub fn step_with(&mut self, batch: &Batch<T>) -> Result<StepStats> {
        self.apply_freeze();
        let lr = self.cfg.lr_at(self.step);
        let stats = train_step(&mut self.model, &mut self.opt, batch, lr, self.step)?;
        self.step += 1;
        Ok(stats)
    }

    /// Train until `total_steps`, evaluating and checkpointing on schedule.
    ///
    /// With an output directory: `metrics.jsonl` (rewritten atomically on every
    /// save), `last.ckpt` every `checkpoint_interval` steps, `best.ckpt` at the
    /// best evaluation AP, `phaseN.ckpt` when freeze phase N ends, and
    /// `final.ckpt`.
    pub fn fit(
        &mut self,
        train: &[InstanceSample],
        schema: &KeypointSchema,
        eval: Option<&EvalSet>,
        out_dir: Option<&Path>,
    ) -> Result<FitReport> {
        let batcher = Batcher::new(train, schema, &self.cfg)?;
        let mut log = match out_dir {
            Some(dir) if self.step > 0 => read_log(&dir.join(METRICS_LOG))?
                .into_iter()
                .filter(|r| r.step < self.step)
                .collect(),
            _ => Vec::new(),
        };
        let mut outputs = Vec::new();
        let mut final_eval = None;
        let total = self.cfg.total_steps;

        std::thread::scope(|scope| -> Result<()> {
            // bounded look-ahead: batches are prepared while the current step runs
            let (tx, rx) = std::sync::mpsc::sync_channel::<Batch<T>>(2);
            let start = self.step;
            let producer = &batcher;
            scope.spawn(move || {
                for step in start..total {
                    if tx.send(producer.batch(step)).is_err() {
                        break;
                    }
                }
            });
            while self.step < total {
                let batch = rx.recv().expect("batch producer ended early");
                let phase_before = self.cfg.phase_at(self.step);
                if self.step > 0 && self.cfg.phase_at(self.step - 1) != phase_before {
                    if let Some(dir) = out_dir {
                        let path = dir.join(phase_checkpoint_name(phase_before - 1));
                        self.checkpoint().save(&path)?;
                        push_unique(&mut outputs, path);
                    }
                }
                let stats = self.step_with(&batch)?;
                let mut record = LogRecord {
                    step: stats.step,
                    loss: stats.loss,
                    lr: stats.lr,
                    grad_norm: stats.grad_norm,
                    eval_ap: None,
                };
                let done = self.step == total;
                let eval_now = eval.is_some()
                    && (done || (self.cfg.eval_interval > 0 && self.step % self.cfg.eval_interval == 0));
                if let (true, Some(set)) = (eval_now, eval) {
                    let (summary, _) = evaluate_model(&self.model, set, schema)?;
                    log::info!("step {}: eval AP {:.4}", self.step, summary.ap);
                    record.eval_ap = Some(summary.ap);
                    if self.best_ap.is_none_or(|b| summary.ap > b) {
                        self.best_ap = Some(summary.ap);
                        if let Some(dir) = out_dir {
                            let path = dir.join(BEST_CHECKPOINT);
                            self.checkpoint().save(&path)?;
                            push_unique(&mut outputs, path);
                        }
                    }
                    final_eval = Some(summary);
                }
                if stats.step % 100 == 0 || done {
                    log::info!("step {} loss {:.6e} lr {:.3e}", stats.step, stats.loss, stats.lr);
                }
                log.push(record);
                let save_now = self.cfg.checkpoint_interval > 0 && self.step % self.cfg.checkpoint_interval == 0;
                if let (Some(dir), true) = (out_dir, save_now || done) {
                    write_log(&dir.join(METRICS_LOG), &log)?;
                    push_unique(&mut outputs, dir.join(METRICS_LOG));
                    let path = dir.join(LAST_CHECKPOINT);
                    self.checkpoint().save(&path)?;
                    push_unique(&mut outputs, path);
                }
            }
            Ok(())
        })?;

        if let Some(dir) = out_dir {
            let path = dir.join(FINAL_CHECKPOINT);
            self.checkpoint().save(&path)?;
            push_unique(&mut outputs, path);
            write_log(&dir.join(METRICS_LOG), &log)?;
            push_unique(&mut outputs, dir.join(METRICS_LOG));
        }
        Ok(FitReport {
            log,
            best_ap: self.best_ap,
            final_eval,
            outputs,
        })
    }
}

fn push_unique(v: &mut Vec<PathBuf>, p: PathBuf) {
    if !v.contains(&p) {
        v.push(p);
    }
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r).expect("log record serializes"));
        text.push('\n');
    }
    Ok(aggpose_data::io::write_atomic(path, text.as_bytes())?)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CoreError::Config(format!("{}: {e}", path.display()))))
        .collect()
}
