use ulbsc_autodiff::gradcheck::check_all_kernels;
use ulbsc_autodiff::{ConvAttrs, Error, Graph, ParamStore, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn every_kernel_matches_finite_differences() {
    for seed in [1, 2, 3] {
        for (name, report) in check_all_kernels(seed).unwrap() {
            assert!(
                report.max_rel_error < 1e-4,
                "{name} (seed {seed}): rel err {:.3e} at {}[{}] analytic {} numeric {}",
                report.max_rel_error,
                report.worst_param,
                report.worst_index,
                report.analytic,
                report.numeric
            );
        }
    }
}

#[test]
fn relu_and_softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let s = g.softmax(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn strided_conv_output_shape() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 1, 64, 64])).unwrap();
    let w = g.constant(Tensor::zeros([8, 1, 3, 3])).unwrap();
    let y = g.conv2d(x, w, None, ConvAttrs::new(2, 1)).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 32, 32]);

    let wt = g.constant(Tensor::zeros([8, 4, 3, 3])).unwrap();
    let up = g
        .conv_transpose2d(y, wt, None, ConvAttrs::new(2, 1).with_output_padding(1))
        .unwrap();
    assert_eq!(g.shape(up), &[1, 4, 64, 64]);
}

#[test]
fn shape_errors_are_descriptive() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"), "{detail}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let x = g.constant(Tensor::zeros([1, 1, 2, 2])).unwrap();
    let w = g.constant(Tensor::zeros([1, 1, 5, 5])).unwrap();
    assert!(matches!(g.conv2d(x, w, None, ConvAttrs::new(1, 0)), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    assert!(matches!(
        g.constant(t(&[2], &[1.0, f64::NAN])),
        Err(Error::NonFinite { .. })
    ));
    let big = g.constant(t(&[1], &[1e300])).unwrap();
    assert!(matches!(g.mul(big, big), Err(Error::NonFinite { .. })));
}

#[test]
fn backward_examples() {
    // loss = sum(p^2), p = [3] -> grad 6
    let mut store = ParamStore::new();
    let p = store.add("p", t(&[1], &[3.0]));
    let mut g = Graph::new();
    let b = g.bind(&store, true).unwrap();
    let loss = g.sum_squares(b[p]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(&store, p).unwrap().data(), &[6.0]);

    // constant loss -> zero gradient
    let mut g = Graph::new();
    let b = g.bind(&store, true).unwrap();
    let zero = g.scale(b[p], 0.0).unwrap();
    let c = g.constant(t(&[1], &[4.0])).unwrap();
    let loss = g.add(zero, c).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(&store, p).unwrap().data(), &[0.0]);
}

#[test]
fn non_scalar_loss_and_empty_tape_are_contract_errors() {
    let g = Graph::<f64>::new();
    let mut other = Graph::<f64>::new();
    let v = other.constant(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(other.backward(v), Err(Error::Contract(_))));
    let mut g2 = Graph::<f64>::new();
    let s = g2.constant(t(&[1], &[1.0])).unwrap();
    drop(g);
    assert!(g2.backward(s).is_ok());
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut store = ParamStore::new();
    let p = store.add("p", t(&[2], &[1.0, -2.0]));
    for _ in 0..2 {
        let mut g = Graph::new();
        let b = g.bind(&store, true).unwrap();
        let loss = g.sum_squares(b[p]).unwrap();
        store.accumulate(&g.backward(loss).unwrap());
    }
    assert_eq!(store.get(p).grad.data(), &[4.0, -8.0]);
    store.zero_grad();
    assert_eq!(store.get(p).grad.data(), &[0.0, 0.0]);
    assert!(!store.get(p).has_grad());
}

#[test]
fn independent_tapes_do_not_share_gradients() {
    let mut s1 = ParamStore::new();
    let p1 = s1.add("p", t(&[1], &[1.0]));
    let mut s2 = ParamStore::new();
    let p2 = s2.add("p", t(&[1], &[5.0]));

    let mut g1 = Graph::new();
    let b1 = g1.bind(&s1, true).unwrap();
    let l1 = g1.sum_squares(b1[p1]).unwrap();
    let mut g2 = Graph::new();
    let b2 = g2.bind(&s2, true).unwrap();
    let l2 = g2.sum_squares(b2[p2]).unwrap();

    let gr2 = g2.backward(l2).unwrap();
    let gr1 = g1.backward(l1).unwrap();
    s1.accumulate(&gr2); // belongs to another store: ignored
    assert!(!s1.get(p1).has_grad());
    s1.accumulate(&gr1);
    s2.accumulate(&gr2);
    assert_eq!(s1.get(p1).grad.data(), &[2.0]);
    assert_eq!(s2.get(p2).grad.data(), &[10.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g
            .constant(Tensor::new([1, 2, 8, 8], (0..128).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap())
            .unwrap();
        let w = g
            .constant(Tensor::new([3, 2, 3, 3], (0..54).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap())
            .unwrap();
        let y = g.conv2d(x, w, None, ConvAttrs::new(2, 1)).unwrap();
        let z = g.sigmoid(y).unwrap();
        g.value(z).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
