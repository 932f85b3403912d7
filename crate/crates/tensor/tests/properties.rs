use aggpose_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn tensor_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-30.0f64..30.0, r * c).prop_map(move |v| Tensor::new(&[r, c], v).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in tensor_strategy(5, 7)) {
        let g = Graph::<f64>::new();
        let s = g.softmax_last(&g.constant(x.clone())).unwrap();
        let n = x.shape()[1];
        for row in s.value().data().chunks(n) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_constant_shift(x in tensor_strategy(3, 6), c in -50.0f64..50.0) {
        let g = Graph::<f64>::new();
        let a = g.softmax_last(&g.constant(x.clone())).unwrap();
        let b = g.softmax_last(&g.constant(x.map(|v| v + c))).unwrap();
        prop_assert!(a.value().max_abs_diff(b.value()) < 1e-12);
    }

    #[test]
    fn concat_then_split_round_trips(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 4),
        axis_pick in 0usize..2,
    ) {
        let g = Graph::<f64>::new();
        let (sa, sb, axis) = if axis_pick == 0 {
            (vec![2, 3, 4], vec![2, 5, 4], 1)
        } else {
            (vec![2, 4, 3], vec![2, 4, 5], 2)
        };
        let ta = Tensor::new(&sa, a).unwrap();
        let tb = Tensor::new(&sb, b).unwrap();
        let joined = g.concat(&[&g.constant(ta.clone()), &g.constant(tb.clone())], axis).unwrap();
        let parts = g.split(&joined, axis, &[3, 5]).unwrap();
        prop_assert_eq!(parts[0].value(), &ta);
        prop_assert_eq!(parts[1].value(), &tb);
    }

    #[test]
    fn layer_norm_normalizes_each_slice(x in tensor_strategy(4, 8)) {
        prop_assume!(x.shape()[1] >= 2);
        let n = x.shape()[1];
        // skip nearly-constant rows where the variance carries no information
        for row in x.data().chunks(n) {
            let m = row.iter().sum::<f64>() / n as f64;
            prop_assume!(row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64 > 1e-3);
        }
        let g = Graph::<f64>::new();
        let y = g.layer_norm(
            &g.constant(x),
            &g.constant(Tensor::ones(&[n])),
            &g.constant(Tensor::zeros(&[n])),
            0.0,
        ).unwrap();
        for row in y.value().data().chunks(n) {
            let m = row.iter().sum::<f64>() / n as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((v - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 4, 16, 12], |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0), true);
        let w = g.leaf(Tensor::from_fn(&[8, 4, 3, 3], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5), true);
        let b = g.leaf(Tensor::zeros(&[8]), true);
        let y = g.conv2d(&x, &w, &b, 2, 1).unwrap();
        let y = g.upsample_bilinear(&y, 2).unwrap();
        let t = g.map_to_tokens(&y).unwrap();
        let att = g.matmul(&t, &g.transpose_last2(&t).unwrap()).unwrap();
        let s = g.softmax_last(&att).unwrap();
        let loss = g.mean(&s);
        let grads = g.backward(&loss).unwrap();
        (s.value().clone(), grads.get(&w).unwrap().clone(), grads.get(&x).unwrap().clone())
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}
