use mobivit_core::checkpoint;
use mobivit_core::merge::{merge_with_logits, normalize_rows};
use mobivit_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn tensor(shape: &'static [usize], range: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-range..range, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in tensor(&[3, 7], 50.0), shift in -100.0f64..100.0) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let p = g.softmax(v, 1).unwrap();
        for row in g.value(p).data().chunks(7) {
            prop_assert!(row.iter().all(|&q| q >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + shift);
        let v2 = g.input(shifted);
        let p2 = g.softmax(v2, 1).unwrap();
        prop_assert!(g.value(p).max_abs_diff(g.value(p2)).unwrap() <= 1e-12);
    }

    #[test]
    fn merge_weights_form_probability_vectors(
        tokens in tensor(&[2, 6, 4], 5.0),
        adaptive in tensor(&[2, 6], 20.0),
        global in tensor(&[6], 20.0),
    ) {
        let mut g = Graph::new();
        let (t, a, gl) = (g.input(tokens), g.input(adaptive), g.input(global));
        let (f, w) = merge_with_logits(&mut g, t, a, gl).unwrap();
        for row in g.value(w).data().chunks(6) {
            prop_assert!(row.iter().all(|&q| q >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert!(g.value(f).all_finite());
    }

    #[test]
    fn normalization_ignores_positive_scale(raw in prop::collection::vec(1e-6f64..10.0, 8), c in 1e-3f64..1e3) {
        let mut g = Graph::new();
        let r = g.input(Tensor::new(&[1, 8], raw.clone()).unwrap());
        let rs = g.scale(r, c);
        let w = normalize_rows(&mut g, r).unwrap();
        let ws = normalize_rows(&mut g, rs).unwrap();
        prop_assert!(g.value(w).max_abs_diff(g.value(ws)).unwrap() <= 1e-12);
    }

    #[test]
    fn ops_on_finite_input_stay_finite(x in tensor(&[1, 2, 5, 5], 1e3), w in tensor(&[4, 2, 3, 3], 1e3)) {
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x), g.input(w));
        let y = g.conv2d(xv, wv, None, (2, 2), (1, 1), 1).unwrap();
        let a = g.gelu(y);
        let s = g.sigmoid(a);
        let p = g.global_avg_pool2d(s).unwrap();
        prop_assert!(g.value(p).all_finite());
    }

    #[test]
    fn checkpoint_round_trips(values in prop::collection::vec(prop::num::f64::ANY, 1..20), rows in 1usize..4) {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(&[values.len()], values.clone()).unwrap(), true).unwrap();
        store.add("b.c", Tensor::from_fn(&[rows, 2], |i| i as f64), false).unwrap();
        let bytes = checkpoint::encode(&store);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), 2);
        let bits: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, want);
        prop_assert_eq!(back[1].1.shape(), &[rows, 2]);
    }
}
