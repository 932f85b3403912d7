use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(half * x * x)).exp();
    cdf + x * pdf
}

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x + y);
        Ok(self.record(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x - y);
        Ok(self.record(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x * y);
        let (av, bv) = (a.rc(), b.rc());
        Ok(self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &bv, |gi, y| gi * y)),
                needs[1].then(|| zip_map(g, &av, |gi, x| gi * x)),
            ]
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value().map(|x| x * c);
        self.record(out, &[a], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    /// Add a rank-1 `bias` along the last axis of `x`. The only broadcasting op.
    pub fn bias_add(&self, x: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let n = *x.shape().last().unwrap_or(&1);
        if bias.shape() != [n] || x.value().rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = x.value().data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bias.value().data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(out, &[x, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_parts(vec![n], acc)
            });
            vec![needs[0].then(|| g.clone()), gb]
        }))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(gelu);
        let xv = x.rc();
        self.record(out, &[x], move |g, _| {
            vec![Some(zip_map(g, &xv, |gi, xi| gi * gelu_grad(xi)))]
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(x.value().sum_all());
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = T::from_f64(x.value().numel() as f64);
        let s = self.sum(x);
        self.scale(&s, T::one() / n)
    }
}
