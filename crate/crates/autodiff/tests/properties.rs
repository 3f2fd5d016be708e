use proptest::prelude::*;

use ulbsc_autodiff::checkpoint;
use ulbsc_autodiff::{Graph, ParamStore, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn dims_and_data() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(m, k, n)| {
        (
            Just(m),
            Just(k),
            Just(n),
            prop::collection::vec(-3.0..3.0f64, m * k),
            prop::collection::vec(-3.0..3.0f64, k * n),
        )
    })
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((m, k, n, a, b) in dims_and_data()) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![m, k], a.clone()).unwrap()).unwrap();
        let y = g.constant(Tensor::new(vec![k, n], b.clone()).unwrap()).unwrap();
        let z = g.matmul(x, y).unwrap();
        for (got, want) in g.value(z).data().iter().zip(naive_matmul(&a, &b, m, k, n)) {
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, logits in prop::collection::vec(-30.0..30.0f64, 1..8)) {
        let n = logits.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| logits.iter().map(move |x| x + r as f64)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![rows, n], data).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn f32_bytes_round_trip(values in prop::collection::vec(any::<f32>(), 0..64)) {
        let back = checkpoint::f32_from_le_bytes(&checkpoint::f32_to_le_bytes(values.iter().copied())).unwrap();
        prop_assert_eq!(back.len(), values.len());
        for (a, b) in back.iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..5)) {
        let mut store = ParamStore::<f32>::new();
        for (i, shape) in shapes.iter().enumerate() {
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|j| (i * 31 + j) as f32 * 0.125 - 2.0).collect();
            store.add(format!("p{i}"), Tensor::new(shape.clone(), data).unwrap());
        }
        let (manifest, blob) = checkpoint::encode(&store, serde_json::json!({"k": 1})).unwrap();
        let (_, params) = checkpoint::decode(manifest.as_bytes(), &blob).unwrap();
        prop_assert_eq!(params.len(), store.len());
        for ((name, t), p) in params.iter().zip(store.iter()) {
            prop_assert_eq!(name, &p.name);
            prop_assert_eq!(t, &p.tensor);
        }
        // any truncation of the blob must be rejected, not panic
        prop_assert!(checkpoint::decode(manifest.as_bytes(), &blob[..blob.len() - 1]).is_err());
    }
}
