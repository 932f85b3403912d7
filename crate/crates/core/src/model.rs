//! The full network: a stem embedding, stages that add one coarser level
//! each, per-level transformer blocks, fusion after every stage, and a
//! heatmap head on the finest level.

use aggpose_tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::fusion::{FuseAll, Pyramid};
use crate::layers::{AttentionConfig, Ctx, LayerNorm, Linear, PatchEmbed, PatchEmbedConfig, Profiler, TransformerBlock};
use crate::params::{trunc_normal, Builder, ParamStore};

#[derive(Debug, Clone)]
pub struct Stage {
    /// Creates this stage's new level: from the image in stage 1, else from
    /// the previous coarsest level.
    pub embed: PatchEmbed,
    /// `blocks[l]` runs on level `l`.
    pub blocks: Vec<Vec<TransformerBlock>>,
    pub fusion: FuseAll,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl Head {
    pub fn new<T: Scalar>(b: &mut Builder<T>, channels: usize, num_keypoints: usize) -> Self {
        Head {
            norm: LayerNorm::new(b, "norm", channels),
            proj: Linear::zeros(b, "proj", channels, num_keypoints),
        }
    }

    /// Tokens of the finest level to `[B, K, H, W]` heatmaps.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        let y = self.norm.forward(cx, x)?;
        let y = self.proj.forward(cx, &y)?;
        Ok(cx.g.tokens_to_map(&y, grid.0, grid.1)?)
    }
}

/// Module structure; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<T: Scalar> {
    /// Levels after the final fusion.
    pub pyramid: Pyramid<T>,
    /// `[B, K, H/4, W/4]`, unnormalized.
    pub heatmaps: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl Network {
    pub fn build<T: Scalar>(cfg: &ModelConfig, b: &mut Builder<T>) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.num_levels();
        let mut stages = Vec::with_capacity(levels);
        for s in 0..levels {
            let mut sb = b.sub(&format!("stage{}", s + 1));
            let embed_cfg = if s == 0 {
                PatchEmbedConfig::stem(3, cfg.channels[0])
            } else {
                PatchEmbedConfig::downsample(cfg.channels[s - 1], cfg.channels[s])
            };
            let embed = PatchEmbed::new(&mut sb, &format!("level{}.embed", s + 1), embed_cfg);
            let blocks = (0..=s)
                .map(|l| {
                    let attn = AttentionConfig {
                        channels: cfg.channels[l],
                        heads: cfg.heads[l],
                        gamma: cfg.gamma[l],
                    };
                    (0..cfg.depths[l][s - l])
                        .map(|i| {
                            TransformerBlock::new(&mut sb, &format!("level{}.block{}", l + 1, i + 1), attn, cfg.expansion[l])
                        })
                        .collect()
                })
                .collect();
            let fusion = FuseAll::new(&mut sb, &cfg.channels, &cfg.expansion, s + 1)?;
            stages.push(Stage { embed, blocks, fusion });
        }
        let head = Head::new(&mut b.sub("head"), cfg.channels[0], cfg.num_keypoints);
        Ok(Network {
            config: cfg.clone(),
            stages,
            head,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, images: &Var<T>) -> Result<ModelOutput<T>> {
        let cfg = &self.config;
        let [h, w] = cfg.input_size;
        match *images.shape() {
            [_, 3, ih, iw] if ih == h && iw == w => {}
            _ => {
                return Err(CoreError::Geometry(format!(
                    "expected images [B, 3, {h}, {w}], got {:?}",
                    images.shape()
                )))
            }
        }
        let g = cx.g;
        let mut pyr = Pyramid {
            levels: Vec::new(),
            grids: Vec::new(),
        };
        for (s, stage) in self.stages.iter().enumerate() {
            let (tokens, grid) = cx.timed("embed", || -> Result<_> {
                if s == 0 {
                    stage.embed.forward(cx, images)
                } else {
                    let (gh, gw) = pyr.grids[s - 1];
                    let map = g.tokens_to_map(&pyr.levels[s - 1], gh, gw)?;
                    stage.embed.forward(cx, &map)
                }
            })?;
            if grid != cfg.level_grid(s) {
                return Err(CoreError::Geometry(format!(
                    "level {} has grid {grid:?}, expected {:?}",
                    s + 1,
                    cfg.level_grid(s)
                )));
            }
            pyr.levels.push(tokens);
            pyr.grids.push(grid);
            for (l, blocks) in stage.blocks.iter().enumerate() {
                for blk in blocks {
                    pyr.levels[l] = blk.forward(cx, &pyr.levels[l], pyr.grids[l])?;
                }
            }
            pyr = cx.timed("fusion", || stage.fusion.forward(cx, &pyr))?;
        }
        let heatmaps = cx.timed("head", || self.head.forward(cx, &pyr.levels[0], pyr.grids[0]))?;
        Ok(ModelOutput { pyramid: pyr, heatmaps })
    }
}

impl<T: Scalar> Model<T> {
    /// Build with parameters drawn from a generator seeded by `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(cfg, &mut Builder::new(&mut store, &mut rng))?;
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Bind parameters to `g` and run the network; also returns the bound
    /// parameter variables in store order.
    pub fn forward(&self, g: &Graph<T>, images: &Var<T>) -> Result<(ModelOutput<T>, Vec<Var<T>>)> {
        self.forward_profiled(g, images, None)
    }

    pub fn forward_profiled(
        &self,
        g: &Graph<T>,
        images: &Var<T>,
        profiler: Option<&Profiler>,
    ) -> Result<(ModelOutput<T>, Vec<Var<T>>)> {
        let params = self.store.bind(g);
        let cx = Ctx {
            g,
            params: &params,
            profiler,
        };
        let out = self.net.forward(&cx, images)?;
        Ok((out, params))
    }

    /// Heatmaps `[B, K, H/4, W/4]` without recording a tape.
    pub fn predict(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let x = g.constant(images);
        let (out, _) = self.forward(&g, &x)?;
        Ok(out.heatmaps.value().clone())
    }

    /// Overwrite every parameter with random values: weights `N(0, scale²)`,
    /// norm gains `1 + N(0, scale²)`. Used where zero-initialized layers
    /// would hide gradients.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize_store(&mut self.store, &mut rng, scale);
    }
}

pub fn randomize_store<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        let gain = p.name.contains("norm") && p.name.ends_with(".weight");
        for v in p.value.data_mut() {
            let z = trunc_normal(rng, scale);
            *v = T::from_f64(if gain { 1.0 + z } else { z });
        }
    }
}
