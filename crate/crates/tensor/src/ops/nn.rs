use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn last_dim<T: Scalar>(op: &'static str, x: &Var<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&n) if n >= 1 => Ok(n),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "needs a last axis".into(),
        }),
    }
}

impl<T: Scalar> Graph<T> {
    /// Softmax over the last axis, stabilized by subtracting each slice's maximum.
    pub fn softmax_last(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = last_dim("softmax_last", x)?;
        if !x.value().all_finite() {
            return Err(TensorError::NonFinite { op: "softmax_last" });
        }
        let mut data = x.value().data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(row[0], T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let y = std::rc::Rc::new(out.clone());
        Ok(self.record(out, &[x], move |g, _| {
            // dx = y * (g - <g, y>)
            let mut dx = Vec::with_capacity(g.numel());
            for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }))
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`
    /// (both rank-1 of the last-axis length). Uses the biased variance.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let n = last_dim("layer_norm", x)?;
        for p in [gamma, beta] {
            if p.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows = x.value().numel() / n;
        let inv_n = T::from_f64(1.0 / n as f64);
        let eps = T::from_f64(eps);
        let mut xhat = Vec::with_capacity(x.value().numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in x.value().data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((v, &gm), &bt) in row.iter_mut().zip(gv).zip(bv) {
                *v = *v * gm + bt;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        if !self.tracks(&[x, gamma, beta]) {
            return Ok(self.constant(out));
        }
        let gamma_v = gamma.rc();
        Ok(self.record(out, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gm = gamma_v.data();
            let dx = needs[0].then(|| {
                let mut dx = Vec::with_capacity(gd.len());
                for ((gr, xr), &r) in gd.chunks(n).zip(xhat.chunks(n)).zip(&rstd) {
                    let dxhat: Vec<T> = gr.iter().zip(gm).map(|(&a, &b)| a * b).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() * inv_n;
                    let mean_dx = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    dx.extend(
                        dxhat
                            .iter()
                            .zip(xr)
                            .map(|(&d, &xh)| r * (d - mean_d - xh * mean_dx)),
                    );
                }
                Tensor::from_parts(g.shape().to_vec(), dx)
            });
            let dgamma = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for (gr, xr) in gd.chunks(n).zip(xhat.chunks(n)) {
                    for ((a, &gi), &xh) in acc.iter_mut().zip(gr).zip(xr) {
                        *a += gi * xh;
                    }
                }
                Tensor::from_parts(vec![n], acc)
            });
            let dbeta = needs[2].then(|| {
                let mut acc = vec![T::zero(); n];
                for gr in gd.chunks(n) {
                    for (a, &gi) in acc.iter_mut().zip(gr) {
                        *a += gi;
                    }
                }
                Tensor::from_parts(vec![n], acc)
            });
            vec![dx, dgamma, dbeta]
        }))
    }

    /// Masked mean squared error between heatmaps `pred` `[B, K, ...]` and a
    /// constant `target` of the same shape, weighted per channel by `mask` `[B, K]`.
    ///
    /// The loss is `Σ m_bk Σ (p - t)² / (Σ m_bk · S)` where `S` is the number of
    /// elements per channel; it is 0 when the mask sums to 0.
    pub fn masked_mse(&self, pred: &Var<T>, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var<T>> {
        let ps = pred.shape();
        if ps != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mse",
                lhs: ps.to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if ps.len() < 2 || mask.shape() != &ps[..2] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mse",
                lhs: ps.to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let per: usize = ps[2..].iter().product();
        let weight_sum: T = mask.data().iter().copied().sum();
        let denom = weight_sum * T::from_f64(per as f64);
        let diff: Vec<T> = pred
            .value()
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| p - t)
            .collect();
        let mut total = T::zero();
        if weight_sum != T::zero() {
            for (ch, &m) in diff.chunks(per).zip(mask.data()) {
                if m != T::zero() {
                    total += m * ch.iter().map(|&d| d * d).sum::<T>();
                }
            }
            total /= denom;
        }
        let out = Tensor::scalar(total);
        let mask = mask.clone();
        let shape = ps.to_vec();
        Ok(self.record(out, &[pred], move |g, _| {
            let mut dx = vec![T::zero(); diff.len()];
            if weight_sum != T::zero() {
                let scale = g.data()[0] * T::from_f64(2.0) / denom;
                for ((dch, ch), &m) in dx.chunks_mut(per).zip(diff.chunks(per)).zip(mask.data()) {
                    for (o, &d) in dch.iter_mut().zip(ch) {
                        *o = scale * m * d;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rejects_non_finite() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[1.0, f64::NAN]).unwrap());
        assert_eq!(g.softmax_last(&x).unwrap_err(), TensorError::NonFinite { op: "softmax_last" });
        let y = g.constant(Tensor::from_f64(&[2], &[f64::INFINITY, 0.0]).unwrap());
        assert!(g.softmax_last(&y).is_err());
    }

    #[test]
    fn masked_mse_zero_mask_is_zero() {
        let g = Graph::<f64>::new();
        let p = g.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64), true);
        let t = Tensor::zeros(&[1, 2, 2, 2]);
        let m = Tensor::zeros(&[1, 2]);
        let loss = g.masked_mse(&p, &t, &m).unwrap();
        assert_eq!(loss.value().item(), Some(0.0));
        let grads = g.backward(&loss).unwrap();
        assert!(grads.get(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_mse_all_visible_is_plain_mse() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin()));
        let t = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.11).cos());
        let m = Tensor::ones(&[2, 3]);
        let loss = g.masked_mse(&p, &t, &m).unwrap().value().item().unwrap();
        let plain: f64 = p
            .value()
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 24.0;
        assert!((loss - plain).abs() < 1e-15);
    }
}
