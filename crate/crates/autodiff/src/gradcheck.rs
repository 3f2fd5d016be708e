//! Central finite-difference oracle for gradient checks.
//!
//! Independent of the backward pass: it only ever evaluates the forward function.

use crate::error::Result;
use crate::graph::Graph;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Worst mismatch found by [`check_store`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small floor so that two near-zero values compare as equal.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares backward gradients against central differences for every value of every parameter.
///
/// `loss` must build a scalar on the given graph from the bound store; it is
/// re-run for every perturbed coordinate, so keep the problem small.
pub fn check_store<F>(store: &mut ParamStore<f64>, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<crate::Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.value(out).data()[0])
    };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let analytic = grads
            .get(store, id)
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()));
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Deterministic uniform values in `[-1, 1)`, optionally kept away from zero.
struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn tensor(&mut self, shape: &[usize], min_abs: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v = self.next();
                if v.abs() < min_abs {
                    v.signum() * min_abs + v
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }
}

type KernelBuilder = fn(&mut Graph<f64>, &[crate::Var]) -> Result<crate::Var>;

/// Every kernel kind with the input shapes it is checked at.
fn kernel_cases() -> Vec<(&'static str, Vec<Vec<usize>>, f64, KernelBuilder)> {
    use crate::ConvAttrs;
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], 0.0, |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], 0.0, |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], 0.0, |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], 0.0, |g, v| g.scale(v[0], -1.7)),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], 0.0, |g, v| g.add_bias(v[0], v[1])),
        ("matmul", vec![vec![3, 4], vec![4, 5]], 0.0, |g, v| g.matmul(v[0], v[1])),
        ("matmul_ta", vec![vec![4, 3], vec![4, 5]], 0.0, |g, v| g.matmul_t(v[0], v[1], true, false)),
        ("matmul_tb", vec![vec![3, 4], vec![5, 4]], 0.0, |g, v| g.matmul_t(v[0], v[1], false, true)),
        ("matmul_tab", vec![vec![4, 3], vec![5, 4]], 0.0, |g, v| g.matmul_t(v[0], v[1], true, true)),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], 0.0, |g, v| g.matmul(v[0], v[1])),
        ("matmul_batched_tb", vec![vec![2, 3, 4], vec![2, 3, 4]], 0.0, |g, v| {
            g.matmul_t(v[0], v[1], false, true)
        }),
        ("relu", vec![vec![4, 4]], 0.05, |g, v| g.relu(v[0])),
        ("sigmoid", vec![vec![4, 4]], 0.0, |g, v| g.sigmoid(v[0])),
        ("softmax", vec![vec![3, 5]], 0.0, |g, v| g.softmax(v[0])),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], 0.0, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("embedding", vec![vec![5, 3]], 0.0, |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
        ("reshape", vec![vec![2, 6]], 0.0, |g, v| g.reshape(v[0], &[3, 4])),
        ("gather", vec![vec![2, 3]], 0.0, |g, v| g.gather(v[0], &[5, 0, 0, 3, 1, 2, 4], &[7])),
        ("concat", vec![vec![3, 2], vec![3, 4]], 0.0, |g, v| g.concat(v[0], v[1])),
        ("mean", vec![vec![3, 4]], 0.0, |g, v| g.mean(v[0])),
        ("sum", vec![vec![3, 4]], 0.0, |g, v| g.sum(v[0])),
        ("sum_squares", vec![vec![3, 4]], 0.0, |g, v| g.sum_squares(v[0])),
        ("mse", vec![vec![3, 4], vec![3, 4]], 0.0, |g, v| g.mse(v[0], v[1])),
        ("conv2d_s1", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], 0.0, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvAttrs::new(1, 1))
        }),
        ("conv2d_s2", vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3], vec![2]], 0.0, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvAttrs::new(2, 1))
        }),
        ("conv_transpose2d", vec![vec![2, 2, 3, 3], vec![2, 3, 3, 3], vec![3]], 0.0, |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvAttrs::new(2, 1).with_output_padding(1))
        }),
        ("log_mean_exp", vec![vec![9]], 0.0, |g, v| g.log_mean_exp(v[0])),
        ("normalize_rows", vec![vec![3, 5]], 0.0, |g, v| g.normalize_rows(v[0])),
        ("cross_entropy", vec![vec![4, 5]], 0.0, |g, v| {
            g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
        }),
    ]
}

/// Runs the finite-difference check over every kernel kind.
///
/// Inputs are random parameters; the scalar loss is `sum(out * r)` with a fixed
/// random weighting `r` so that every output element contributes.
pub fn check_all_kernels(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = SplitMix(seed);
    let mut out = Vec::new();
    for (name, shapes, min_abs, build) in kernel_cases() {
        let mut store = ParamStore::<f64>::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(format!("{name}.in{i}"), rng.tensor(s, min_abs));
        }
        // output shape, for the weighting tensor
        let out_shape = {
            let mut g = Graph::new();
            let b = g.bind(&store, false)?;
            let vars: Vec<_> = (0..store.len()).map(|i| b[ParamId(i)]).collect();
            let y = build(&mut g, &vars)?;
            g.shape(y).to_vec()
        };
        let weights = rng.tensor(if out_shape.is_empty() { &[1] } else { &out_shape }, 0.0);
        let weights = weights.reshape(out_shape.clone())?;
        let report = check_store(&mut store, 1e-5, |g, s| {
            let b = g.bind(s, true)?;
            let vars: Vec<_> = (0..s.len()).map(|i| b[ParamId(i)]).collect();
            let y = build(g, &vars)?;
            let r = g.constant(weights.clone())?;
            let p = g.mul(y, r)?;
            g.sum(p)
        })?;
        out.push((name, report));
    }
    Ok(out)
}
