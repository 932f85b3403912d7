use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{numel_of, Tensor};

/// Copy `len` slices of axis `axis` starting at `start`.
fn narrow_raw<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::from_parts(out_shape, data)
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value().reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape, g.data().to_vec()))]
        }))
    }

    /// Reorder axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, x: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let out = x.value().permute(axes)?;
        let inv = kernels::inverse_axes(axes);
        Ok(self.record(out, &[x], move |g, _| {
            let (shape, data) = kernels::permute(g.data(), g.shape(), &inv);
            vec![Some(Tensor::from_parts(shape, data))]
        }))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self, x: &Var<T>) -> Result<Var<T>> {
        let r = x.value().rank();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose_last2",
                shape: x.shape().to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Join tensors along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let rank = first.value().rank();
        if axis >= rank {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        for p in parts {
            let ok = p.value().rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                let base = o * s * inner;
                data.extend_from_slice(&p.value().data()[base..base + s * inner]);
            }
        }
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.record(out, parts, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&s, &need)| {
                    let gi = need.then(|| narrow_raw(g, axis, start, s));
                    start += s;
                    gi
                })
                .collect()
        }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("axis {axis}, range {start}..{} on shape {shape:?}", start + len),
            });
        }
        let out = narrow_raw(x.value(), axis, start, len);
        Ok(self.record(out, &[x], move |g, _| {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let dim = shape[axis];
            let mut full = vec![T::zero(); numel_of(&shape)];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let base = (o * dim + start) * inner;
                full[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(Tensor::from_parts(shape, full))]
        }))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, x: &Var<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        let total: usize = sizes.iter().sum();
        if axis >= x.value().rank() || total != x.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "split",
                reason: format!("sizes {sizes:?} along axis {axis} of {:?}", x.shape()),
            });
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.narrow(x, axis, start, s);
                start += s;
                v
            })
            .collect()
    }
}
