//! Cross-level aggregation: neighbors are routed to a level's geometry and
//! fused with a Mix-FFN over their channel concatenation.

use std::collections::BTreeMap;

use aggpose_tensor::{Scalar, Var};

use crate::error::{CoreError, Result};
use crate::layers::{Ctx, Linear, MixFfn, MixFfnConfig, PatchEmbed, PatchEmbedConfig};
use crate::params::Builder;

/// Multi-resolution token features; level `l` has grid `grids[l]`, each
/// level half the size of the previous one.
#[derive(Debug, Clone)]
pub struct Pyramid<T: Scalar> {
    /// `[B, H_l·W_l, C_l]` per level.
    pub levels: Vec<Var<T>>,
    pub grids: Vec<(usize, usize)>,
}

impl<T: Scalar> Pyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// `(C, H, W)` per level.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .zip(&self.grids)
            .map(|(x, &(h, w))| (x.shape()[2], h, w))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum Resample {
    /// Overlapped stride-2 patch embedding to the next coarser level.
    Down(PatchEmbed),
    /// 2× bilinear upsampling to the next finer level.
    Up,
}

/// Carries level `from` to the geometry and width of level `to = from ± 1`.
#[derive(Debug, Clone)]
pub struct Route {
    pub from: usize,
    pub to: usize,
    pub proj: Linear,
    pub resample: Resample,
}

impl Route {
    pub fn new<T: Scalar>(b: &mut Builder<T>, from: usize, to: usize, channels: &[usize]) -> Result<Self> {
        if from.abs_diff(to) != 1 {
            return Err(CoreError::Geometry(format!("route {from} -> {to} is not between adjacent levels")));
        }
        let mut s = b.sub(&format!("route_from{}", from + 1));
        let (ci, cj) = (channels[from], channels[to]);
        let proj = Linear::new(&mut s, "proj", ci, cj);
        let resample = if from < to {
            Resample::Down(PatchEmbed::new(&mut s, "embed", PatchEmbedConfig::downsample(cj, cj)))
        } else {
            Resample::Up
        };
        Ok(Route { from, to, proj, resample })
    }

    /// Projection with GELU, then resampling; returns tokens on `to`'s grid.
    pub fn forward<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        x: &Var<T>,
        grid: (usize, usize),
        target: (usize, usize),
    ) -> Result<Var<T>> {
        let g = cx.g;
        let y = g.gelu(&self.proj.forward(cx, x)?);
        let map = g.tokens_to_map(&y, grid.0, grid.1)?;
        let (out, out_grid) = match &self.resample {
            Resample::Down(embed) => embed.forward(cx, &map)?,
            Resample::Up => (
                g.map_to_tokens(&g.upsample_bilinear(&map, 2)?)?,
                (grid.0 * 2, grid.1 * 2),
            ),
        };
        if out_grid != target {
            return Err(CoreError::Geometry(format!(
                "route {} -> {} produced {out_grid:?}, expected {target:?}",
                self.from + 1,
                self.to + 1
            )));
        }
        Ok(out)
    }
}

/// Fusion of level `level` with its immediate neighbors.
#[derive(Debug, Clone)]
pub struct Fuse {
    pub level: usize,
    /// Routes keyed by source level.
    pub routes: BTreeMap<usize, Route>,
    pub ffn: MixFfn,
}

impl Fuse {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        level: usize,
        num_levels: usize,
        channels: &[usize],
        expansion: usize,
    ) -> Result<Self> {
        let mut s = b.sub("fuse");
        let mut routes = BTreeMap::new();
        for from in [level.checked_sub(1), Some(level + 1)].into_iter().flatten() {
            if from < num_levels {
                routes.insert(from, Route::new(&mut s, from, level, channels)?);
            }
        }
        let c = channels[level];
        let arity = routes.len() + 1;
        let ffn = MixFfn::new(
            &mut s,
            "ffn",
            MixFfnConfig {
                in_channels: arity * c,
                hidden: expansion * c,
                out_channels: c,
            },
        );
        Ok(Fuse { level, routes, ffn })
    }

    pub fn arity(&self) -> usize {
        self.routes.len() + 1
    }

    /// Route `pyr.levels[from]` to this level.
    pub fn route<T: Scalar>(&self, cx: &Ctx<T>, pyr: &Pyramid<T>, from: usize) -> Result<Var<T>> {
        if from == self.level {
            return Ok(pyr.levels[from].clone());
        }
        let r = self
            .routes
            .get(&from)
            .ok_or_else(|| CoreError::Geometry(format!("no route from level {} to {}", from + 1, self.level + 1)))?;
        r.forward(cx, &pyr.levels[from], pyr.grids[from], pyr.grids[self.level])
    }

    /// Channel concatenation of the routed neighbors in level order.
    pub fn gather<T: Scalar>(&self, cx: &Ctx<T>, pyr: &Pyramid<T>) -> Result<Var<T>> {
        let mut sources: Vec<usize> = self.routes.keys().copied().collect();
        sources.push(self.level);
        sources.sort_unstable();
        let parts = sources
            .iter()
            .map(|&i| self.route(cx, pyr, i))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Ok(cx.g.concat(&refs, 2)?)
    }

    /// `MixFFN(concat) + x_level`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, pyr: &Pyramid<T>) -> Result<Var<T>> {
        if self.level >= pyr.len() {
            return Err(CoreError::Geometry(format!(
                "pyramid has {} levels, cannot fuse level {}",
                pyr.len(),
                self.level + 1
            )));
        }
        let cat = self.gather(cx, pyr)?;
        let y = self.ffn.branch(cx, &cat, pyr.grids[self.level])?;
        Ok(cx.g.add(&pyr.levels[self.level], &y)?)
    }
}

/// One synchronous exchange over all active levels.
#[derive(Debug, Clone)]
pub struct FuseAll {
    pub fuses: Vec<Fuse>,
}

impl FuseAll {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        channels: &[usize],
        expansion: &[usize],
        active: usize,
    ) -> Result<Self> {
        let fuses = (0..active)
            .map(|l| {
                let mut s = b.sub(&format!("level{}", l + 1));
                Fuse::new(&mut s, l, active, channels, expansion[l])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FuseAll { fuses })
    }

    /// Every level is fused from the pre-fusion pyramid.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, pyr: &Pyramid<T>) -> Result<Pyramid<T>> {
        if pyr.is_empty() {
            return Err(CoreError::Geometry("cannot fuse an empty pyramid".into()));
        }
        if pyr.len() != self.fuses.len() {
            return Err(CoreError::Geometry(format!(
                "fusion built for {} levels, pyramid has {}",
                self.fuses.len(),
                pyr.len()
            )));
        }
        let levels = self
            .fuses
            .iter()
            .map(|f| f.forward(cx, pyr))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pyramid {
            levels,
            grids: pyr.grids.clone(),
        })
    }
}
