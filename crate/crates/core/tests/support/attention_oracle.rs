//! Textbook attention used as an oracle for the spatially reduced implementation.

#![allow(dead_code)]

use aggpose_core::layers::{Attention, AttentionConfig, Ctx};
use aggpose_core::model::randomize_store;
use aggpose_core::params::{Builder, ParamStore};
use aggpose_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Build a module into a fresh store with randomized parameters.
pub fn build<M>(seed: u64, f: impl FnOnce(&mut Builder<f64>) -> M) -> (M, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let m = f(&mut Builder::new(&mut store, &mut r));
    randomize_store(&mut store, &mut r, 0.5);
    (m, store)
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).value.clone()
}

/// `x · W + b` for `x: [N, in]`, `W: [in, out]`.
pub fn affine(x: &[Vec<f64>], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<Vec<f64>> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..o)
                .map(|c| (0..i).map(|k| row[k] * w.data()[k * o + c]).sum::<f64>() + b.map_or(0.0, |b| b.data()[c]))
                .collect()
        })
        .collect()
}

/// Textbook multi-head attention over all tokens of one sample.
pub fn full_attention(x: &[Vec<f64>], store: &ParamStore<f64>, heads: usize) -> Vec<Vec<f64>> {
    let q = affine(x, &param(store, "attn.q.weight"), Some(&param(store, "attn.q.bias")));
    let k = affine(x, &param(store, "attn.k.weight"), store.by_name("attn.k.bias").map(|p| &p.value));
    let v = affine(x, &param(store, "attn.v.weight"), Some(&param(store, "attn.v.bias")));
    let (n, c) = (x.len(), x[0].len());
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; n];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| q[i][h * d + t] * k[j][h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                out[i][h * d + t] = (0..n).map(|j| e[j] / z * v[j][h * d + t]).sum();
            }
        }
    }
    affine(&out, &param(store, "attn.proj.weight"), Some(&param(store, "attn.proj.bias")))
}

pub fn rows(t: &Tensor<f64>, b: usize) -> Vec<Vec<f64>> {
    let (n, c) = (t.shape()[1], t.shape()[2]);
    (0..n).map(|i| t.data()[(b * n + i) * c..(b * n + i + 1) * c].to_vec()).collect()
}

/// Largest deviation between unreduced attention and the oracle over `cases` random configurations.
pub fn unreduced_attention_worst_diff(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut r = rng(1000 + case);
        let heads = [1, 2, 4][case as usize % 3];
        let c = heads * r.random_range(1..=3);
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let cfg = AttentionConfig { channels: c, heads, gamma: 1 };
        let (attn, store) = build(case, |b| Attention::new(b, "attn", cfg));
        let x = uniform(&mut r, &[2, h * w, c]);
        let g = Graph::inference();
        let params = store.bind(&g);
        let y = attn.forward(&Ctx::new(&g, &params), &g.constant(x.clone()), (h, w)).unwrap();
        for b in 0..2 {
            let expected = full_attention(&rows(&x, b), &store, heads);
            for (er, gr) in expected.iter().zip(rows(y.value(), b)) {
                for (e, a) in er.iter().zip(gr) {
                    worst = worst.max((e - a).abs());
                }
            }
        }
    }
    worst
}
