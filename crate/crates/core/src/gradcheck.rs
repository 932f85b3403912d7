//! Finite-difference verification of every network block and of the whole
//! network, in 64-bit with randomized parameters.

use std::time::{Duration, Instant};

use aggpose_tensor::gradcheck::{check, Probe};
use aggpose_tensor::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::fusion::{FuseAll, Pyramid, Route};
use crate::layers::{Attention, AttentionConfig, Ctx, MixFfn, MixFfnConfig, PatchEmbed, PatchEmbedConfig, TransformerBlock};
use crate::model::{randomize_store, Head, Model};
use crate::params::{Builder, ParamStore};

pub const BLOCKS: [&str; 9] = [
    "patch_embed",
    "attention",
    "mix_ffn",
    "block",
    "route",
    "fuse",
    "head",
    "loss",
    "model",
];

pub const BLOCK_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 10;
pub const EPS: f64 = 1e-5;
/// Spread of the randomized parameters; zero-initialized layers would
/// otherwise hide gradients behind them.
const PARAM_SCALE: f64 = 0.5;
/// Elements probed per parameter tensor in the full-size toy network.
const MODEL_PROBES_PER_TENSOR: usize = 2;

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    /// Worst norm-wise relative error over all seeds and inputs.
    pub worst: f64,
    pub tolerance: f64,
    pub probes: usize,
    pub seconds: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn to_tensor_error(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "gradcheck",
            reason: other.to_string(),
        },
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ out ⊙ R` for a fixed pseudo-random `R`, so no gradient cancels by symmetry.
fn project(g: &Graph<f64>, out: &Var<f64>, seed: u64) -> aggpose_tensor::Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = g.constant(uniform(&mut rng, out.shape()));
    let prod = g.mul(out, &r)?;
    Ok(g.sum(&prod))
}

/// Check one module on random inputs, probing every input and parameter element.
fn check_module<M>(
    seed: u64,
    build: impl FnOnce(&mut Builder<f64>) -> Result<M>,
    input_shapes: &[&[usize]],
    run: impl Fn(&M, &Ctx<f64>, &[Var<f64>]) -> Result<Var<f64>>,
) -> Result<(f64, usize)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = build(&mut Builder::new(&mut store, &mut rng))?;
    randomize_store(&mut store, &mut rng, PARAM_SCALE);
    let mut inputs: Vec<Tensor<f64>> = input_shapes.iter().map(|s| uniform(&mut rng, s)).collect();
    let n_in = inputs.len();
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    let probes = vec![Probe::All; inputs.len()];
    let report = check(&inputs, &probes, EPS, |g, vars| {
        let cx = Ctx::new(g, &vars[n_in..]);
        let out = run(&module, &cx, &vars[..n_in]).map_err(to_tensor_error)?;
        project(g, &out, seed)
    })?;
    Ok((report.worst(), report.probes))
}

fn pyramid(vars: &[Var<f64>], grids: &[(usize, usize)]) -> Pyramid<f64> {
    Pyramid {
        levels: vars.to_vec(),
        grids: grids.to_vec(),
    }
}

fn check_block(name: &str, seed: u64) -> Result<(f64, usize)> {
    match name {
        "patch_embed" => check_module(
            seed,
            |b| {
                let cfg = PatchEmbedConfig {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    in_channels: 3,
                    out_channels: 4,
                };
                Ok(PatchEmbed::new(b, "embed", cfg))
            },
            &[&[2, 3, 8, 6]],
            |m, cx, x| Ok(m.forward(cx, &x[0])?.0),
        ),
        "attention" => check_module(
            seed,
            |b| {
                let cfg = AttentionConfig {
                    channels: 8,
                    heads: 2,
                    gamma: 4,
                };
                Ok(Attention::new(b, "attn", cfg))
            },
            &[&[2, 16, 8]],
            |m, cx, x| m.forward(cx, &x[0], (4, 4)),
        ),
        "mix_ffn" => check_module(
            seed,
            |b| Ok(MixFfn::new(b, "ffn", MixFfnConfig::expand(4, 2))),
            &[&[2, 12, 4]],
            |m, cx, x| m.forward(cx, &x[0], (4, 3)),
        ),
        "block" => check_module(
            seed,
            |b| {
                let cfg = AttentionConfig {
                    channels: 8,
                    heads: 2,
                    gamma: 4,
                };
                Ok(TransformerBlock::new(b, "block", cfg, 2))
            },
            &[&[2, 16, 8]],
            |m, cx, x| m.forward(cx, &x[0], (4, 4)),
        ),
        "route" => {
            let channels = [4, 6];
            let down = check_module(
                seed,
                |b| Route::new(b, 0, 1, &channels),
                &[&[2, 24, 4]],
                |m, cx, x| m.forward(cx, &x[0], (6, 4), (3, 2)),
            )?;
            let up = check_module(
                seed,
                |b| Route::new(b, 1, 0, &channels),
                &[&[2, 6, 6]],
                |m, cx, x| m.forward(cx, &x[0], (3, 2), (6, 4)),
            )?;
            Ok((down.0.max(up.0), down.1 + up.1))
        }
        "fuse" => {
            let grids = [(8, 4), (4, 2), (2, 1)];
            let two = check_module(
                seed,
                |b| FuseAll::new(b, &[4, 6], &[2, 2], 2),
                &[&[1, 32, 4], &[1, 8, 6]],
                |m, cx, x| {
                    let out = m.forward(cx, &pyramid(x, &grids[..2]))?;
                    let flat: Vec<Var<f64>> = out
                        .levels
                        .iter()
                        .map(|v| cx.g.reshape(v, &[v.value().numel()]))
                        .collect::<aggpose_tensor::Result<_>>()?;
                    Ok(cx.g.concat(&flat.iter().collect::<Vec<_>>(), 0)?)
                },
            )?;
            let three = check_module(
                seed,
                |b| FuseAll::new(b, &[2, 4, 6], &[2, 2, 2], 3),
                &[&[1, 32, 2], &[1, 8, 4], &[1, 2, 6]],
                |m, cx, x| {
                    let out = m.forward(cx, &pyramid(x, &grids))?;
                    let flat: Vec<Var<f64>> = out
                        .levels
                        .iter()
                        .map(|v| cx.g.reshape(v, &[v.value().numel()]))
                        .collect::<aggpose_tensor::Result<_>>()?;
                    Ok(cx.g.concat(&flat.iter().collect::<Vec<_>>(), 0)?)
                },
            )?;
            Ok((two.0.max(three.0), two.1 + three.1))
        }
        "head" => check_module(
            seed,
            |b| Ok(Head::new(&mut b.sub("head"), 6, 3)),
            &[&[2, 12, 6]],
            |m, cx, x| m.forward(cx, &x[0], (4, 3)),
        ),
        "loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = uniform(&mut rng, &[2, 3, 4, 3]);
            let target = uniform(&mut rng, &[2, 3, 4, 3]);
            let mask = Tensor::from_fn(&[2, 3], |i| if i % 3 == 1 { 0.0 } else { 1.0 });
            let r = check(&[pred], &[Probe::All], EPS, |g, v| g.masked_mse(&v[0], &target, &mask))?;
            Ok((r.worst(), r.probes))
        }
        "model" => check_model(seed),
        other => Err(CoreError::Config(format!("unknown block {other}"))),
    }
}

/// End-to-end loss of the micro network over every parameter, and of the
/// toy network over sampled elements of every parameter tensor.
fn check_model(seed: u64) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (cfg, sampled) in [(ModelConfig::micro(), false), (ModelConfig::aggpose_t(3), true)] {
        let mut model = Model::<f64>::build(&cfg, seed)?;
        model.randomize(seed.wrapping_add(1), PARAM_SCALE);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let [h, w] = cfg.input_size;
        let images = uniform(&mut rng, &[1, 3, h, w]);
        let (hh, hw) = cfg.heatmap_size();
        let target = uniform(&mut rng, &[1, cfg.num_keypoints, hh, hw]);
        let mask = Tensor::from_fn(&[1, cfg.num_keypoints], |i| if i == 1 { 0.0 } else { 1.0 });
        let mut inputs = vec![images];
        let mut probe_sel = vec![Probe::Skip];
        for p in model.store.params() {
            inputs.push(p.value.clone());
            probe_sel.push(if sampled {
                let n = p.value.numel();
                Probe::Indices((0..MODEL_PROBES_PER_TENSOR.min(n)).map(|_| rng.random_range(0..n)).collect())
            } else {
                Probe::All
            });
        }
        let net = &model.net;
        let report = check(&inputs, &probe_sel, EPS, |g, vars| {
            let cx = Ctx::new(g, &vars[1..]);
            let out = net.forward(&cx, &vars[0]).map_err(to_tensor_error)?;
            g.masked_mse(&out.heatmaps, &target, &mask)
        })?;
        worst = worst.max(report.worst());
        probes += report.probes;
    }
    Ok((worst, probes))
}

/// Run the suite for one block name or `"all"`.
pub fn run(scope: &str) -> Result<Vec<BlockReport>> {
    let names: Vec<&str> = match scope {
        "all" => BLOCKS.to_vec(),
        name if BLOCKS.contains(&name) => vec![name],
        other => {
            return Err(CoreError::Config(format!(
                "unknown block {other:?}; valid: all, {}",
                BLOCKS.join(", ")
            )))
        }
    };
    names
        .into_iter()
        .map(|name| {
            let start = Instant::now();
            let mut worst = 0.0f64;
            let mut probes = 0;
            for seed in 0..SEEDS {
                let (w, p) = check_block(name, seed)?;
                worst = worst.max(w);
                probes += p;
            }
            let tolerance = if name == "model" { MODEL_TOLERANCE } else { BLOCK_TOLERANCE };
            Ok(BlockReport {
                name: name.to_string(),
                worst,
                tolerance,
                probes,
                seconds: elapsed(start),
            })
        })
        .collect()
}

fn elapsed(start: Instant) -> f64 {
    Duration::as_secs_f64(&start.elapsed())
}
