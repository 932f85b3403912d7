//! Overlapped patch embedding, sequence-reduction attention, Mix-FFN and
//! the transformer block built from them. Token sequences are `[B, N, C]`
//! with `N = H·W` in row-major grid order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use aggpose_tensor::{conv_out_len, Graph, Scalar, Var};

use crate::config::LN_EPS;
use crate::error::{CoreError, Result};
use crate::params::{Builder, ParamId, INIT_STD};

/// Wall-clock time per forward-pass category.
#[derive(Debug, Default)]
pub struct Profiler {
    times: RefCell<BTreeMap<&'static str, Duration>>,
}

impl Profiler {
    pub fn time<R>(&self, category: &'static str, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = f();
        *self.times.borrow_mut().entry(category).or_default() += start.elapsed();
        out
    }

    pub fn totals(&self) -> BTreeMap<&'static str, Duration> {
        self.times.borrow().clone()
    }
}

/// Forward-pass context: the tape, bound parameters and an optional profiler.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a Graph<T>,
    pub params: &'a [Var<T>],
    pub profiler: Option<&'a Profiler>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a Graph<T>, params: &'a [Var<T>]) -> Self {
        Ctx { g, params, profiler: None }
    }

    pub fn p(&self, id: ParamId) -> &Var<T> {
        &self.params[id.index()]
    }

    pub fn timed<R>(&self, category: &'static str, f: impl FnOnce() -> R) -> R {
        match self.profiler {
            Some(p) => p.time(category, f),
            None => f(),
        }
    }
}

fn tokens(x: &Var<impl Scalar>, grid: (usize, usize), what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, n, c] if n == grid.0 * grid.1 => Ok((b, n, c)),
        _ => Err(CoreError::Geometry(format!(
            "{what}: input {:?} is not a [B, {}, C] token sequence",
            x.shape(),
            grid.0 * grid.1
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, in_features: usize, out_features: usize) -> Self {
        let mut s = b.sub(name);
        Linear {
            weight: s.trunc_normal("weight", &[in_features, out_features], INIT_STD),
            bias: Some(s.zeros("bias", &[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn without_bias<T: Scalar>(b: &mut Builder<T>, name: &str, in_features: usize, out_features: usize) -> Self {
        let mut s = b.sub(name);
        Linear {
            weight: s.trunc_normal("weight", &[in_features, out_features], INIT_STD),
            bias: None,
            in_features,
            out_features,
        }
    }

    /// Weight and bias start at zero.
    pub fn zeros<T: Scalar>(b: &mut Builder<T>, name: &str, in_features: usize, out_features: usize) -> Self {
        let mut s = b.sub(name);
        Linear {
            weight: s.zeros("weight", &[in_features, out_features]),
            bias: Some(s.zeros("bias", &[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(cx.g.linear(x, cx.p(self.weight), self.bias.map(|b| cx.p(b)))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        LayerNorm {
            weight: s.ones("weight", &[dim]),
            bias: s.zeros("bias", &[dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(cx.g.layer_norm(x, cx.p(self.weight), cx.p(self.bias), LN_EPS)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PatchEmbedConfig {
    /// Input stem: 7×7 kernel, stride 4, padding 3.
    pub fn stem(in_channels: usize, out_channels: usize) -> Self {
        PatchEmbedConfig {
            kernel: 7,
            stride: 4,
            padding: 3,
            in_channels,
            out_channels,
        }
    }

    /// Between levels: 3×3 kernel, stride 2, padding 1.
    pub fn downsample(in_channels: usize, out_channels: usize) -> Self {
        PatchEmbedConfig {
            kernel: 3,
            stride: 2,
            padding: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return None;
        }
        Some((
            conv_out_len(h, self.kernel, self.stride, self.padding)?,
            conv_out_len(w, self.kernel, self.stride, self.padding)?,
        ))
    }
}

/// Strided convolution followed by layer norm over channels.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cfg: PatchEmbedConfig) -> Self {
        let mut s = b.sub(name);
        let k = cfg.kernel;
        let weight = s.trunc_normal("proj.weight", &[cfg.out_channels, cfg.in_channels, k, k], INIT_STD);
        let bias = s.zeros("proj.bias", &[cfg.out_channels]);
        let norm = LayerNorm::new(&mut s, "norm", cfg.out_channels);
        PatchEmbed { cfg, weight, bias, norm }
    }

    /// `[B, C_in, H, W]` → tokens `[B, H'·W', C_out]` and `(H', W')`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, (usize, usize))> {
        let (h, w) = match *x.shape() {
            [_, c, h, w] if c == self.cfg.in_channels => (h, w),
            _ => {
                return Err(CoreError::Geometry(format!(
                    "patch embed expects [B, {}, H, W], got {:?}",
                    self.cfg.in_channels,
                    x.shape()
                )))
            }
        };
        if self.cfg.output_size(h, w).is_none() {
            return Err(CoreError::Geometry(format!(
                "patch embed {:?} produces an empty output on {h}x{w}",
                self.cfg
            )));
        }
        let (t, grid) = cx
            .g
            .conv2d_tokens(x, cx.p(self.weight), cx.p(self.bias), self.cfg.stride, self.cfg.padding)?;
        Ok((self.norm.forward(cx, &t)?, grid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Keys and values are computed from `N / gamma` reduced tokens.
    pub gamma: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn reduction_side(&self) -> usize {
        (self.gamma as f64).sqrt().round() as usize
    }
}

/// Multi-head self-attention whose keys and values come from tokens grouped
/// in `r×r` tiles (`γ = r²`) and projected back to `C` channels.
#[derive(Debug, Clone)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// `Linear(γC, C)`; absent when `γ = 1`.
    pub reduce: Option<Linear>,
    pub proj: Linear,
}

impl Attention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cfg: AttentionConfig) -> Self {
        let c = cfg.channels;
        let mut s = b.sub(name);
        Attention {
            q: Linear::new(&mut s, "q", c, c),
            // a key bias shifts every logit of a query equally, which softmax ignores
            k: Linear::without_bias(&mut s, "k", c, c),
            v: Linear::new(&mut s, "v", c, c),
            reduce: (cfg.gamma > 1).then(|| Linear::new(&mut s, "reduce", cfg.gamma * c, c)),
            proj: Linear::new(&mut s, "proj", c, c),
            cfg,
        }
    }

    /// Group `[B, H·W, C]` into `[B, (H/r)·(W/r), r·r·C]`, tiles in row-major order.
    pub fn group_tiles<T: Scalar>(g: &Graph<T>, x: &Var<T>, grid: (usize, usize), r: usize) -> Result<Var<T>> {
        let (b, _, c) = tokens(x, grid, "reduction")?;
        let (h, w) = grid;
        if h % r != 0 || w % r != 0 {
            return Err(CoreError::Geometry(format!("grid {h}x{w} not divisible into {r}x{r} tiles")));
        }
        let t = g.reshape(x, &[b, h / r, r, w / r, r, c])?;
        let t = g.permute(&t, &[0, 1, 3, 2, 4, 5])?;
        Ok(g.reshape(&t, &[b, (h / r) * (w / r), r * r * c])?)
    }

    fn split_heads<T: Scalar>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let (b, n) = (x.shape()[0], x.shape()[1]);
        let t = g.reshape(x, &[b, n, self.cfg.heads, self.cfg.head_dim()])?;
        Ok(g.permute(&t, &[0, 2, 1, 3])?)
    }

    /// Output `[B, N, C]` and attention probabilities `[B, heads, N, N/γ]`.
    pub fn forward_with_probs<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        x: &Var<T>,
        grid: (usize, usize),
    ) -> Result<(Var<T>, Var<T>)> {
        let g = cx.g;
        let (b, n, c) = tokens(x, grid, "attention")?;
        if c != self.cfg.channels {
            return Err(CoreError::Geometry(format!("attention expects {} channels, got {c}", self.cfg.channels)));
        }
        if n % self.cfg.gamma != 0 {
            return Err(CoreError::Geometry(format!("{n} tokens not divisible by gamma {}", self.cfg.gamma)));
        }
        let q = self.split_heads(g, &self.q.forward(cx, x)?)?;
        let src = match &self.reduce {
            Some(red) => red.forward(cx, &Self::group_tiles(g, x, grid, self.cfg.reduction_side())?)?,
            None => x.clone(),
        };
        let k = self.split_heads(g, &self.k.forward(cx, &src)?)?;
        let v = self.split_heads(g, &self.v.forward(cx, &src)?)?;
        let scores = g.matmul(&q, &g.transpose_last2(&k)?)?;
        let scores = g.scale(&scores, T::from_f64(1.0 / (self.cfg.head_dim() as f64).sqrt()));
        let probs = g.softmax_last(&scores)?;
        let out = g.matmul(&probs, &v)?;
        let out = g.permute(&out, &[0, 2, 1, 3])?;
        let out = g.reshape(&out, &[b, n, c])?;
        Ok((self.proj.forward(cx, &out)?, probs))
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        Ok(self.forward_with_probs(cx, x, grid)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixFfnConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
}

impl MixFfnConfig {
    /// `C → E·C → C`.
    pub fn expand(channels: usize, expansion: usize) -> Self {
        MixFfnConfig {
            in_channels: channels,
            hidden: expansion * channels,
            out_channels: channels,
        }
    }
}

/// Linear → 3×3 depthwise conv → GELU → linear, with an identity residual
/// when input and output widths agree.
#[derive(Debug, Clone)]
pub struct MixFfn {
    pub cfg: MixFfnConfig,
    pub fc1: Linear,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cfg: MixFfnConfig) -> Self {
        let mut s = b.sub(name);
        let fc1 = Linear::new(&mut s, "fc1", cfg.in_channels, cfg.hidden);
        // fan-out scaled init of the depthwise filter (9 taps per channel)
        let dw_weight = s.trunc_normal("dw.weight", &[cfg.hidden, 3, 3], (2.0f64 / 9.0).sqrt());
        let dw_bias = s.zeros("dw.bias", &[cfg.hidden]);
        let fc2 = Linear::new(&mut s, "fc2", cfg.hidden, cfg.out_channels);
        MixFfn {
            cfg,
            fc1,
            dw_weight,
            dw_bias,
            fc2,
        }
    }

    /// The branch without residual: `[B, N, C_in]` → `[B, N, C_out]`.
    pub fn branch<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        let g = cx.g;
        tokens(x, grid, "mix-ffn")?;
        let hdn = self.fc1.forward(cx, x)?;
        let map = g.tokens_to_map(&hdn, grid.0, grid.1)?;
        let map = g.depthwise_conv3x3(&map, cx.p(self.dw_weight), cx.p(self.dw_bias))?;
        let hdn = g.gelu(&g.map_to_tokens(&map)?);
        self.fc2.forward(cx, &hdn)
    }

    /// `x + branch(x)`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        if self.cfg.in_channels != self.cfg.out_channels {
            return Err(CoreError::Geometry("residual Mix-FFN needs equal input and output widths".into()));
        }
        let y = self.branch(cx, x, grid)?;
        Ok(cx.g.add(x, &y)?)
    }
}

/// Pre-norm block: `y = x + Attn(LN(x))`, `out = y + MixFFN-branch(LN(y))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, attn: AttentionConfig, expansion: usize) -> Self {
        let mut s = b.sub(name);
        let c = attn.channels;
        TransformerBlock {
            norm1: LayerNorm::new(&mut s, "norm1", c),
            attn: Attention::new(&mut s, "attn", attn),
            norm2: LayerNorm::new(&mut s, "norm2", c),
            ffn: MixFfn::new(&mut s, "ffn", MixFfnConfig::expand(c, expansion)),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        let g = cx.g;
        let y = cx.timed("attention", || -> Result<Var<T>> {
            let a = self.attn.forward(cx, &self.norm1.forward(cx, x)?, grid)?;
            Ok(g.add(x, &a)?)
        })?;
        cx.timed("mix_ffn", || -> Result<Var<T>> {
            let f = self.ffn.branch(cx, &self.norm2.forward(cx, &y)?, grid)?;
            Ok(g.add(&y, &f)?)
        })
    }
}
