use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn nchw<T: Scalar>(op: &'static str, x: &Var<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected [B, C, H, W]".into(),
        }),
    }
}

/// Output length of a strided window along one axis, `None` if no window fits.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Source taps of an align-corners=false linear resize along one axis.
fn resize_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = 1.0 / factor as f64;
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Per-channel 3×3 cross-correlation with zero padding 1 and stride 1.
    /// `w` is `[C, 3, 3]`, `bias` is `[C]`.
    pub fn depthwise_conv3x3(&self, x: &Var<T>, w: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let (b, c, h, wd) = nchw("depthwise_conv3x3", x)?;
        if w.shape() != [c, 3, 3] || bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv3x3",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let plane = h * wd;
        let xd = x.value().data();
        let wv = w.value().data();
        let bv = bias.value().data();
        let mut out = vec![T::zero(); b * c * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(p, o)| {
            let ch = p % c;
            let xin = &xd[p * plane..(p + 1) * plane];
            let k = &wv[ch * 9..ch * 9 + 9];
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = bv[ch];
                    for di in 0..3 {
                        let ii = i + di;
                        if ii < 1 || ii > h {
                            continue;
                        }
                        let row = &xin[(ii - 1) * wd..ii * wd];
                        for dj in 0..3 {
                            let jj = j + dj;
                            if jj < 1 || jj > wd {
                                continue;
                            }
                            acc += k[di * 3 + dj] * row[jj - 1];
                        }
                    }
                    o[i * wd + j] = acc;
                }
            }
        });
        let out = Tensor::from_parts(vec![b, c, h, wd], out);
        let (xv, wvr) = (x.rc(), w.rc());
        Ok(self.record(out, &[x, w, bias], move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let wv = wvr.data();
                let mut dx = vec![T::zero(); gd.len()];
                dx.par_chunks_mut(plane).enumerate().for_each(|(p, d)| {
                    let ch = p % c;
                    let gp = &gd[p * plane..(p + 1) * plane];
                    let k = &wv[ch * 9..ch * 9 + 9];
                    for i in 0..h {
                        for j in 0..wd {
                            let gij = gp[i * wd + j];
                            for di in 0..3 {
                                let ii = i + di;
                                if ii < 1 || ii > h {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let jj = j + dj;
                                    if jj < 1 || jj > wd {
                                        continue;
                                    }
                                    d[(ii - 1) * wd + jj - 1] += k[di * 3 + dj] * gij;
                                }
                            }
                        }
                    }
                });
                Tensor::from_parts(vec![b, c, h, wd], dx)
            });
            let dw = needs[1].then(|| {
                let xd = xv.data();
                // per-plane partial sums, then a fixed-order reduction over the batch
                let partial: Vec<[T; 9]> = (0..b * c)
                    .into_par_iter()
                    .map(|p| {
                        let gp = &gd[p * plane..(p + 1) * plane];
                        let xp = &xd[p * plane..(p + 1) * plane];
                        let mut acc = [T::zero(); 9];
                        for i in 0..h {
                            for j in 0..wd {
                                let gij = gp[i * wd + j];
                                for di in 0..3 {
                                    let ii = i + di;
                                    if ii < 1 || ii > h {
                                        continue;
                                    }
                                    for dj in 0..3 {
                                        let jj = j + dj;
                                        if jj < 1 || jj > wd {
                                            continue;
                                        }
                                        acc[di * 3 + dj] += gij * xp[(ii - 1) * wd + jj - 1];
                                    }
                                }
                            }
                        }
                        acc
                    })
                    .collect();
                let mut dw = vec![T::zero(); c * 9];
                for (p, acc) in partial.iter().enumerate() {
                    let ch = p % c;
                    for (t, &v) in acc.iter().enumerate() {
                        dw[ch * 9 + t] += v;
                    }
                }
                Tensor::from_parts(vec![c, 3, 3], dw)
            });
            let db = needs[2].then(|| {
                let mut db = vec![T::zero(); c];
                for (p, gp) in gd.chunks(plane).enumerate() {
                    db[p % c] += gp.iter().copied().sum::<T>();
                }
                Tensor::from_parts(vec![c], db)
            });
            vec![dx, dw, db]
        }))
    }

    /// Unfold `kernel×kernel` windows into rows: `[B, C, H, W]` → `[B, H'·W', C·k·k]`,
    /// column order `(c, ki, kj)`, zero padding.
    pub fn im2col(&self, x: &Var<T>, kernel: usize, stride: usize, pad: usize) -> Result<Var<T>> {
        let (b, c, h, w) = nchw("im2col", x)?;
        let (ho, wo) = match (conv_out_len(h, kernel, stride, pad), conv_out_len(w, kernel, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "im2col",
                    reason: format!("kernel {kernel}, stride {stride}, pad {pad} on {h}x{w}"),
                })
            }
        };
        let cols = c * kernel * kernel;
        let per_image = ho * wo * cols;
        let xd = x.value().data();
        let mut out = vec![T::zero(); b * per_image];
        // each (image, output pixel) row is written independently
        out.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
            let bi = r / (ho * wo);
            let (oh, ow) = ((r % (ho * wo)) / wo, r % wo);
            for ch in 0..c {
                let src = &xd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                for ki in 0..kernel {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        row[(ch * kernel + ki) * kernel + kj] = src[ih as usize * w + iw as usize];
                    }
                }
            }
        });
        let out = Tensor::from_parts(vec![b, ho * wo, cols], out);
        Ok(self.record(out, &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            dx.par_chunks_mut(c * h * w).enumerate().for_each(|(bi, dimg)| {
                for r in 0..ho * wo {
                    let (oh, ow) = (r / wo, r % wo);
                    let row = &gd[(bi * ho * wo + r) * cols..(bi * ho * wo + r + 1) * cols];
                    for ch in 0..c {
                        for ki in 0..kernel {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..kernel {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dimg[ch * h * w + ih as usize * w + iw as usize] +=
                                    row[(ch * kernel + ki) * kernel + kj];
                            }
                        }
                    }
                }
            });
            vec![Some(Tensor::from_parts(vec![b, c, h, w], dx))]
        }))
    }

    /// Dense strided convolution producing a token sequence.
    ///
    /// `x` is `[B, C_in, H, W]`, `w` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    /// Returns `[B, H'·W', C_out]` together with `(H', W')`. Implemented as
    /// unfold followed by one matrix product.
    pub fn conv2d_tokens(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: &Var<T>,
        stride: usize,
        pad: usize,
    ) -> Result<(Var<T>, (usize, usize))> {
        let (_, c_in, h, wd) = nchw("conv2d", x)?;
        let (c_out, k) = match *w.shape() {
            [co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                })
            }
        };
        let cols = self.im2col(x, k, stride, pad)?;
        let ho = conv_out_len(h, k, stride, pad).expect("checked by im2col");
        let wo = conv_out_len(wd, k, stride, pad).expect("checked by im2col");
        let wmat = self.reshape(w, &[c_out, c_in * k * k])?;
        let wmat = self.transpose_last2(&wmat)?;
        let y = self.linear(&cols, &wmat, Some(bias))?;
        Ok((y, (ho, wo)))
    }

    /// Dense strided convolution, `[B, C_in, H, W]` → `[B, C_out, H', W']`.
    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, bias: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        let b = x.shape().first().copied().unwrap_or(1);
        let c_out = w.shape().first().copied().unwrap_or(1);
        let (tokens, (ho, wo)) = self.conv2d_tokens(x, w, bias, stride, pad)?;
        self.tokens_to_map(&tokens, ho, wo).map_err(|_| TensorError::InvalidShape {
            op: "conv2d",
            shape: vec![b, c_out, ho, wo],
            reason: "token reshape".into(),
        })
    }

    /// `[B, H·W, C]` → `[B, C, H, W]`.
    pub fn tokens_to_map(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let (b, n, c) = match *x.shape() {
            [b, n, c] => (b, n, c),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "tokens_to_map",
                    shape: x.shape().to_vec(),
                    reason: "expected [B, N, C]".into(),
                })
            }
        };
        if n != h * w {
            return Err(TensorError::InvalidArgument {
                op: "tokens_to_map",
                reason: format!("{n} tokens do not form a {h}x{w} grid"),
            });
        }
        let grid = self.reshape(x, &[b, h, w, c])?;
        self.permute(&grid, &[0, 3, 1, 2])
    }

    /// `[B, C, H, W]` → `[B, H·W, C]`.
    pub fn map_to_tokens(&self, x: &Var<T>) -> Result<Var<T>> {
        let (b, c, h, w) = nchw("map_to_tokens", x)?;
        let t = self.permute(x, &[0, 2, 3, 1])?;
        self.reshape(&t, &[b, h * w, c])
    }

    /// Bilinear resize by an integer `factor ≥ 2` (align-corners=false).
    pub fn upsample_bilinear(&self, x: &Var<T>, factor: usize) -> Result<Var<T>> {
        let (b, c, h, w) = nchw("upsample_bilinear", x)?;
        if factor < 2 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_bilinear",
                reason: format!("factor must be at least 2, got {factor}"),
            });
        }
        let (oh, ow) = (h * factor, w * factor);
        let rows = resize_taps(h, factor);
        let cols = resize_taps(w, factor);
        let xd = x.value().data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, o)| {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for (i, &(r0, r1, a0, a1)) in rows.iter().enumerate() {
                let (a0, a1) = (T::from_f64(a0), T::from_f64(a1));
                for (j, &(c0, c1, b0, b1)) in cols.iter().enumerate() {
                    let (b0, b1) = (T::from_f64(b0), T::from_f64(b1));
                    o[i * ow + j] = a0 * (b0 * src[r0 * w + c0] + b1 * src[r0 * w + c1])
                        + a1 * (b0 * src[r1 * w + c0] + b1 * src[r1 * w + c1]);
                }
            }
        });
        let out = Tensor::from_parts(vec![b, c, oh, ow], out);
        Ok(self.record(out, &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
                let gp = &gd[p * oh * ow..(p + 1) * oh * ow];
                for (i, &(r0, r1, a0, a1)) in rows.iter().enumerate() {
                    let (a0, a1) = (T::from_f64(a0), T::from_f64(a1));
                    for (j, &(c0, c1, b0, b1)) in cols.iter().enumerate() {
                        let (b0, b1) = (T::from_f64(b0), T::from_f64(b1));
                        let gv = gp[i * ow + j];
                        d[r0 * w + c0] += a0 * b0 * gv;
                        d[r0 * w + c1] += a0 * b1 * gv;
                        d[r1 * w + c0] += a1 * b0 * gv;
                        d[r1 * w + c1] += a1 * b1 * gv;
                    }
                }
            });
            vec![Some(Tensor::from_parts(vec![b, c, h, w], dx))]
        }))
    }
}
