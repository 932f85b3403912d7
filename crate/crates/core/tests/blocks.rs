#[path = "support/attention_oracle.rs"]
mod support;

use aggpose_core::fusion::{Fuse, FuseAll, Pyramid, Route};
use aggpose_core::layers::{
    Attention, AttentionConfig, Ctx, Linear, MixFfn, MixFfnConfig, PatchEmbed, PatchEmbedConfig, TransformerBlock,
};
use aggpose_core::model::randomize_store;
use aggpose_core::params::{Builder, ParamStore};
use aggpose_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use support::*;

fn zero_where(store: &mut ParamStore<f64>, pred: impl Fn(&str) -> bool) {
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if pred(&p.name) {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

#[test]
fn unreduced_attention_matches_full_attention_oracle() {
    let worst = unreduced_attention_worst_diff(100);
    assert!(worst < 1e-6, "max abs diff {worst:e}");
}

#[test]
fn single_token_attention_returns_value_projection() {
    let cfg = AttentionConfig { channels: 4, heads: 1, gamma: 1 };
    let (attn, store) = build(3, |b| Attention::new(b, "attn", cfg));
    let x = uniform(&mut rng(4), &[1, 1, 4]);
    let g = Graph::inference();
    let params = store.bind(&g);
    let y = attn.forward(&Ctx::new(&g, &params), &g.constant(x.clone()), (1, 1)).unwrap();
    let v = affine(&rows(&x, 0), &param(&store, "attn.v.weight"), Some(&param(&store, "attn.v.bias")));
    let expected = affine(&v, &param(&store, "attn.proj.weight"), Some(&param(&store, "attn.proj.bias")));
    for (e, a) in expected[0].iter().zip(y.value().data()) {
        assert!((e - a).abs() < 1e-14);
    }
}

#[test]
fn reduced_attention_has_one_key_per_tile() {
    let cfg = AttentionConfig { channels: 4, heads: 2, gamma: 4 };
    let (attn, store) = build(5, |b| Attention::new(b, "attn", cfg));
    assert_eq!(param(&store, "attn.reduce.weight").shape(), &[16, 4]);
    let g = Graph::inference();
    let params = store.bind(&g);
    let x = g.constant(uniform(&mut rng(6), &[3, 16, 4]));
    let (y, probs) = attn.forward_with_probs(&Ctx::new(&g, &params), &x, (4, 4)).unwrap();
    assert_eq!(probs.shape(), &[3, 2, 16, 4]);
    assert_eq!(y.shape(), &[3, 16, 4]);
    for row in probs.value().data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tile_grouping_collects_spatial_neighbours() {
    // token value = its grid index, one channel
    let g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_fn(&[1, 16, 1], |i| i as f64));
    let y = Attention::group_tiles(&g, &x, (4, 4), 2).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4]);
    assert_eq!(
        y.value().data(),
        &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0, 8.0, 9.0, 12.0, 13.0, 10.0, 11.0, 14.0, 15.0]
    );
}

#[test]
fn indivisible_grid_is_rejected() {
    let cfg = AttentionConfig { channels: 4, heads: 1, gamma: 4 };
    let (attn, store) = build(7, |b| Attention::new(b, "attn", cfg));
    let g = Graph::inference();
    let params = store.bind(&g);
    let x = g.constant(Tensor::zeros(&[1, 15, 4]));
    assert!(attn.forward(&Ctx::new(&g, &params), &x, (5, 3)).is_err());
    let x = g.constant(Tensor::zeros(&[1, 12, 4]));
    assert!(attn.forward(&Ctx::new(&g, &params), &x, (4, 4)).is_err());
}

#[test]
fn key_bias_cannot_change_attention_output() {
    // a bias on the keys adds q·b to every logit of a query alike
    let cfg = AttentionConfig { channels: 6, heads: 2, gamma: 1 };
    let mut store = ParamStore::new();
    let mut r = rng(8);
    let mut attn = Attention::new(&mut Builder::new(&mut store, &mut r), "attn", cfg);
    attn.k = Linear::new(&mut Builder::new(&mut store, &mut r), "alt_k", 6, 6);
    randomize_store(&mut store, &mut r, 0.5);
    let x = uniform(&mut r, &[2, 9, 6]);
    let run = |store: &ParamStore<f64>| {
        let g = Graph::inference();
        let params = store.bind(&g);
        attn.forward(&Ctx::new(&g, &params), &g.constant(x.clone()), (3, 3))
            .unwrap()
            .value()
            .clone()
    };
    let with_bias = run(&store);
    zero_where(&mut store, |n| n == "alt_k.bias");
    let without = run(&store);
    assert!(with_bias.max_abs_diff(&without) < 1e-12);
}

fn run_tokens(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    f: impl Fn(&Ctx<f64>, &Var<f64>) -> Var<f64>,
) -> Tensor<f64> {
    let g = Graph::inference();
    let params = store.bind(&g);
    f(&Ctx::new(&g, &params), &g.constant(x.clone())).value().clone()
}

#[test]
fn zero_branch_mix_ffn_is_identity() {
    let (ffn, mut store) = build(9, |b| MixFfn::new(b, "ffn", MixFfnConfig::expand(8, 4)));
    assert_eq!(param(&store, "ffn.fc1.weight").shape(), &[8, 32]);
    zero_where(&mut store, |n| n.starts_with("ffn.fc2"));
    let x = uniform(&mut rng(10), &[2, 12, 8]);
    let y = run_tokens(&store, &x, |cx, v| ffn.forward(cx, v, (3, 4)).unwrap());
    assert_eq!(y.data(), x.data());
    // with every inner weight zero as well
    zero_where(&mut store, |_| true);
    let y = run_tokens(&store, &x, |cx, v| ffn.forward(cx, v, (3, 4)).unwrap());
    assert_eq!(y.data(), x.data());
}

#[test]
fn mix_ffn_rejects_wrong_grid() {
    let (ffn, store) = build(9, |b| MixFfn::new(b, "ffn", MixFfnConfig::expand(4, 2)));
    let g = Graph::inference();
    let params = store.bind(&g);
    let x = g.constant(Tensor::zeros(&[1, 12, 4]));
    assert!(ffn.forward(&Ctx::new(&g, &params), &x, (3, 3)).is_err());
}

#[test]
fn zero_branch_block_is_identity_and_stacks_preserve_shape() {
    let cfg = AttentionConfig { channels: 8, heads: 2, gamma: 4 };
    let (blocks, mut store) = build(11, |b| {
        (0..3)
            .map(|i| TransformerBlock::new(b, &format!("block{i}"), cfg, 4))
            .collect::<Vec<_>>()
    });
    let x = uniform(&mut rng(12), &[2, 16, 8]);
    let stacked = run_tokens(&store, &x, |cx, v| {
        blocks.iter().fold(v.clone(), |acc, blk| blk.forward(cx, &acc, (4, 4)).unwrap())
    });
    assert_eq!(stacked.shape(), &[2, 16, 8]);
    zero_where(&mut store, |n| n.contains("attn.proj") || n.contains("ffn.fc2"));
    let y = run_tokens(&store, &x, |cx, v| {
        blocks.iter().fold(v.clone(), |acc, blk| blk.forward(cx, &acc, (4, 4)).unwrap())
    });
    assert_eq!(y.data(), x.data());
}

#[test]
fn patch_embed_geometry() {
    assert_eq!(PatchEmbedConfig::stem(3, 8).output_size(256, 192), Some((64, 48)));
    assert_eq!(PatchEmbedConfig::downsample(8, 16).output_size(64, 48), Some((32, 24)));
    assert_eq!(PatchEmbedConfig::downsample(8, 16).output_size(1, 1), Some((1, 1)));
    let bad = PatchEmbedConfig {
        kernel: 7,
        stride: 4,
        padding: 0,
        in_channels: 3,
        out_channels: 4,
    };
    assert_eq!(bad.output_size(5, 5), None);
    let (embed, store) = build(13, |b| PatchEmbed::new(b, "embed", PatchEmbedConfig::stem(3, 8)));
    let g = Graph::inference();
    let params = store.bind(&g);
    let x = g.constant(uniform(&mut rng(14), &[1, 3, 64, 48]));
    let (tokens, grid) = embed.forward(&Ctx::new(&g, &params), &x).unwrap();
    assert_eq!(grid, (16, 12));
    assert_eq!(tokens.shape(), &[1, 192, 8]);
    let x = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(embed.forward(&Ctx::new(&g, &params), &x).is_ok());
}

#[test]
fn pointwise_embed_with_identity_weight_only_normalizes_channels() {
    let cfg = PatchEmbedConfig {
        kernel: 1,
        stride: 1,
        padding: 0,
        in_channels: 3,
        out_channels: 3,
    };
    let (embed, mut store) = build(15, |b| PatchEmbed::new(b, "embed", cfg));
    let w = store.id("embed.proj.weight").unwrap();
    let shape = store.get(w).value.shape().to_vec();
    let total: usize = shape.iter().product();
    store.get_mut(w).value = Tensor::from_fn(&shape, |i| if i % 4 == 0 && i < total { 1.0 } else { 0.0 });
    zero_where(&mut store, |n| n == "embed.proj.bias" || n == "embed.norm.bias");
    let ones = store.id("embed.norm.weight").unwrap();
    store.get_mut(ones).value = Tensor::ones(&[3]);
    let x = uniform(&mut rng(16), &[1, 3, 4, 5]);
    let g = Graph::inference();
    let params = store.bind(&g);
    let (tokens, grid) = embed.forward(&Ctx::new(&g, &params), &g.constant(x.clone())).unwrap();
    assert_eq!(grid, (4, 5));
    // token t holds the channels of pixel t, layer-normalized
    for t in 0..20 {
        let px: Vec<f64> = (0..3).map(|c| x.data()[c * 20 + t]).collect();
        let m = px.iter().sum::<f64>() / 3.0;
        let var = px.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0;
        for c in 0..3 {
            let expected = (px[c] - m) / (var + 1e-6).sqrt();
            assert!((tokens.value().data()[t * 3 + c] - expected).abs() < 1e-12);
        }
    }
}

fn pyramid(levels: Vec<Tensor<f64>>, grids: &[(usize, usize)], g: &Graph<f64>) -> Pyramid<f64> {
    Pyramid {
        levels: levels.into_iter().map(|t| g.constant(t)).collect(),
        grids: grids.to_vec(),
    }
}

/// Output geometry of a route, computed from the level formulas alone.
fn expected_route_shape(from: (usize, usize), to_channels: usize, up: bool) -> (usize, usize, usize) {
    let (h, w) = from;
    if up {
        (to_channels, h * 2, w * 2)
    } else {
        (to_channels, (h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1)
    }
}

#[test]
fn routes_reach_neighbour_geometry() {
    let channels = [64, 128];
    let (up, store) = build(17, |b| Route::new(b, 1, 0, &channels).unwrap());
    let x = uniform(&mut rng(18), &[1, 32 * 24, 128]);
    let y = run_tokens(&store, &x, |cx, v| up.forward(cx, v, (32, 24), (64, 48)).unwrap());
    let (c, h, w) = expected_route_shape((32, 24), 64, true);
    assert_eq!(y.shape(), &[1, h * w, c]);
    assert_eq!((c, h, w), (64, 64, 48));

    let (down, store) = build(19, |b| Route::new(b, 0, 1, &[8, 16]).unwrap());
    let x = uniform(&mut rng(20), &[1, 64 * 48, 8]);
    let y = run_tokens(&store, &x, |cx, v| down.forward(cx, v, (64, 48), (32, 24)).unwrap());
    let (c, h, w) = expected_route_shape((64, 48), 16, false);
    assert_eq!(y.shape(), &[1, h * w, c]);
    assert_eq!((h, w), (32, 24));
}

#[test]
fn non_adjacent_routes_are_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(21);
    let mut b = Builder::new(&mut store, &mut r);
    assert!(Route::new(&mut b, 0, 2, &[4, 8, 16]).is_err());
    assert!(Route::new(&mut b, 1, 1, &[4, 8, 16]).is_err());
}

#[test]
fn fusion_arity_per_level() {
    let (fa, _) = build(22, |b| FuseAll::new(b, &[4, 8, 16], &[2, 2, 2], 3).unwrap());
    let arities: Vec<usize> = fa.fuses.iter().map(Fuse::arity).collect();
    assert_eq!(arities, vec![2, 3, 2]);
    let (single, _) = build(22, |b| FuseAll::new(b, &[4], &[2], 1).unwrap());
    assert_eq!(single.fuses[0].arity(), 1);

    let (fa, store) = build(23, |b| FuseAll::new(b, &[4, 8, 16], &[2, 2, 2], 3).unwrap());
    let g = Graph::inference();
    let params = store.bind(&g);
    let mut r = rng(24);
    let pyr = pyramid(
        vec![uniform(&mut r, &[1, 32, 4]), uniform(&mut r, &[1, 8, 8]), uniform(&mut r, &[1, 2, 16])],
        &[(8, 4), (4, 2), (2, 1)],
        &g,
    );
    let cat = fa.fuses[1].gather(&Ctx::new(&g, &params), &pyr).unwrap();
    assert_eq!(cat.shape(), &[1, 8, 3 * 8]);
}

#[test]
fn identity_route_passes_level_through() {
    let (fa, store) = build(25, |b| FuseAll::new(b, &[4, 8], &[2, 2], 2).unwrap());
    let g = Graph::inference();
    let params = store.bind(&g);
    let mut r = rng(26);
    let pyr = pyramid(vec![uniform(&mut r, &[1, 32, 4]), uniform(&mut r, &[1, 8, 8])], &[(8, 4), (4, 2)], &g);
    let same = fa.fuses[0].route(&Ctx::new(&g, &params), &pyr, 0).unwrap();
    assert_eq!(same.value().data(), pyr.levels[0].value().data());
}

#[test]
fn zero_branch_fusion_is_identity() {
    for levels in 1..=3usize {
        let channels = [4, 8, 16];
        let grids = [(8, 4), (4, 2), (2, 1)];
        let (fa, mut store) = build(27, |b| FuseAll::new(b, &channels[..levels], &[2, 2, 2], levels).unwrap());
        zero_where(&mut store, |n| n.contains(".ffn.fc2."));
        let g = Graph::inference();
        let params = store.bind(&g);
        let mut r = rng(28);
        let inputs: Vec<Tensor<f64>> = (0..levels)
            .map(|l| uniform(&mut r, &[2, grids[l].0 * grids[l].1, channels[l]]))
            .collect();
        let pyr = pyramid(inputs.clone(), &grids[..levels], &g);
        let cx = Ctx::new(&g, &params);
        let out = fa.forward(&cx, &pyr).unwrap();
        assert_eq!(out.shapes(), pyr.shapes());
        for (o, i) in out.levels.iter().zip(&inputs) {
            assert_eq!(o.value().data(), i.data());
            assert_eq!(o.value().l2_norm(), i.l2_norm());
        }
        for (l, f) in fa.fuses.iter().enumerate() {
            assert_eq!(f.forward(&cx, &pyr).unwrap().value().data(), inputs[l].data());
        }
    }
}

#[test]
fn constant_pyramid_survives_zero_branch_fusion() {
    let (fa, mut store) = build(29, |b| FuseAll::new(b, &[4, 8], &[2, 2], 2).unwrap());
    zero_where(&mut store, |n| n.contains(".ffn.fc2."));
    let g = Graph::inference();
    let params = store.bind(&g);
    let pyr = pyramid(vec![Tensor::full(&[1, 32, 4], 0.7), Tensor::full(&[1, 8, 8], 0.7)], &[(8, 4), (4, 2)], &g);
    let out = fa.forward(&Ctx::new(&g, &params), &pyr).unwrap();
    assert!(out.levels.iter().all(|l| l.value().data().iter().all(|&v| v == 0.7)));
}

#[test]
fn fusion_is_synchronous() {
    // each level fused alone from the untouched input equals the joint pass
    let (fa, store) = build(30, |b| FuseAll::new(b, &[4, 8, 16], &[2, 2, 2], 3).unwrap());
    let g = Graph::inference();
    let params = store.bind(&g);
    let cx = Ctx::new(&g, &params);
    let mut r = rng(31);
    let pyr = pyramid(
        vec![uniform(&mut r, &[1, 32, 4]), uniform(&mut r, &[1, 8, 8]), uniform(&mut r, &[1, 2, 16])],
        &[(8, 4), (4, 2), (2, 1)],
        &g,
    );
    let joint = fa.forward(&cx, &pyr).unwrap();
    for l in (0..3).rev() {
        let alone = fa.fuses[l].forward(&cx, &pyr).unwrap();
        assert_eq!(alone.value().data(), joint.levels[l].value().data());
    }
}

#[test]
fn empty_pyramid_is_an_error() {
    let (fa, store) = build(32, |b| FuseAll::new(b, &[4], &[2], 1).unwrap());
    let g = Graph::inference();
    let params = store.bind(&g);
    let pyr = Pyramid::<f64> {
        levels: vec![],
        grids: vec![],
    };
    assert!(fa.forward(&Ctx::new(&g, &params), &pyr).is_err());
}

fn permute_batch(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let per = t.numel() / t.shape()[0];
    let data = perm.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn block_and_fusion_commute_with_batch_permutation(seed in 0u64..1000, rot in 1usize..3) {
        let perm: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        let cfg = AttentionConfig { channels: 4, heads: 2, gamma: 4 };
        let (blk, store) = build(seed, |b| TransformerBlock::new(b, "block", cfg, 2));
        let x = uniform(&mut rng(seed + 1), &[3, 16, 4]);
        let y = run_tokens(&store, &x, |cx, v| blk.forward(cx, v, (4, 4)).unwrap());
        let yp = run_tokens(&store, &permute_batch(&x, &perm), |cx, v| blk.forward(cx, v, (4, 4)).unwrap());
        prop_assert!(permute_batch(&y, &perm).max_abs_diff(&yp) < 1e-12);

        let (fa, store) = build(seed, |b| FuseAll::new(b, &[4, 8], &[2, 2], 2).unwrap());
        let mut r = rng(seed + 2);
        let (a, b) = (uniform(&mut r, &[3, 32, 4]), uniform(&mut r, &[3, 8, 8]));
        let run = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let g = Graph::inference();
            let params = store.bind(&g);
            let pyr = pyramid(vec![a.clone(), b.clone()], &[(8, 4), (4, 2)], &g);
            let out = fa.forward(&Ctx::new(&g, &params), &pyr).unwrap();
            out.levels.iter().map(|l| l.value().clone()).collect::<Vec<_>>()
        };
        let base = run(&a, &b);
        let permuted = run(&permute_batch(&a, &perm), &permute_batch(&b, &perm));
        for (x, y) in base.iter().zip(&permuted) {
            prop_assert!(permute_batch(x, &perm).max_abs_diff(y) < 1e-12);
        }
    }
}
