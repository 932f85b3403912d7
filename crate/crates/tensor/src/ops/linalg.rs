use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Matrix product over the last two axes. Rank-2 operands multiply directly;
    /// higher ranks require identical leading (batch) dimensions.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(mismatch());
        }
        let r = sa.len();
        if sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let data = kernels::matmul(a.value().data(), b.value().data(), batch, m, k, n);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::from_parts(shape, data);

        let (av, bv) = (a.rc(), b.rc());
        let (a_shape, b_shape) = (sa.to_vec(), sb.to_vec());
        Ok(self.record(out, &[a, b], move |g, needs| {
            // dA = G · Bᵀ, dB = Aᵀ · G
            let ga = needs[0].then(|| {
                let bt = kernels::transpose_last2(bv.data(), batch, k, n);
                Tensor::from_parts(a_shape, kernels::matmul(g.data(), &bt, batch, m, n, k))
            });
            let gb = needs[1].then(|| {
                let at = kernels::transpose_last2(av.data(), batch, m, k);
                Tensor::from_parts(b_shape, kernels::matmul(&at, g.data(), batch, k, m, n))
            });
            vec![ga, gb]
        }))
    }

    /// `x · w (+ bias)` applied over the last axis of `x`.
    ///
    /// `w` is stored `[in, out]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let sx = x.shape().to_vec();
        let sw = w.shape();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw.to_vec(),
            });
        }
        let (kin, kout) = (sw[0], sw[1]);
        let rows = x.value().numel() / kin;
        let flat = self.reshape(x, &[rows, kin])?;
        let mut y = self.matmul(&flat, w)?;
        if let Some(b) = bias {
            y = self.bias_add(&y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = kout;
        self.reshape(&y, &out_shape)
    }
}
