//! Layer building blocks shared by the saliency and text models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use ulbsc_autodiff::{Bound, ConvAttrs, Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};

/// Uniform tensor in `[-bound, bound]`.
pub(crate) fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches data")
}

pub(crate) fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec())
}

/// Fully connected layer `y = x w + b` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound)),
            b: store.add(format!("{name}.b"), zeros(&[fan_out])),
        }
    }

    /// Applies the layer to every row of `x: [.., in]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let fan_in = *shape.last().expect("rank >= 1");
        let rows = shape.iter().product::<usize>() / fan_in;
        let flat = g.reshape(x, &[rows, fan_in])?;
        let y = g.matmul(flat, p[self.w])?;
        let y = g.add_bias(y, p[self.b])?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = g.shape(y)[1];
        g.reshape(y, &out_shape)
    }
}

/// 3x3 convolution (or transposed convolution) with bias.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub transposed: bool,
}

pub(crate) const KERNEL: usize = 3;

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        transposed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * KERNEL * KERNEL;
        let bound = (6.0 / fan_in as f64).sqrt();
        let shape = if transposed {
            [in_ch, out_ch, KERNEL, KERNEL]
        } else {
            [out_ch, in_ch, KERNEL, KERNEL]
        };
        // small positive bias spread keeps early ReLUs alive
        let bias: Vec<f64> = (0..out_ch).map(|_| rng.random_range(0.0..0.01)).collect();
        Conv {
            w: store.add(format!("{name}.w"), uniform(rng, &shape, bound)),
            b: store.add(format!("{name}.b"), Tensor::from_f64(vec![out_ch], &bias).expect("bias shape")),
            transposed,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, stride: usize) -> Result<Var> {
        if self.transposed {
            let attrs = ConvAttrs::new(stride, 1).with_output_padding(stride - 1);
            g.conv_transpose2d(x, p[self.w], Some(p[self.b]), attrs)
        } else {
            g.conv2d(x, p[self.w], Some(p[self.b]), ConvAttrs::new(stride, 1))
        }
    }
}

/// Residual unit `x + conv(relu(conv(x)))` with a fixed channel count.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub(crate) channels: usize,
    pub(crate) first: Conv,
    pub(crate) second: Conv,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            channels,
            first: Conv::new(store, &format!("{name}.conv_a"), channels, channels, false, rng),
            second: Conv::new(store, &format!("{name}.conv_b"), channels, channels, false, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `x: [N, C, H, W]` with `C` equal to the block's channel count.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(ulbsc_autodiff::Error::Shape {
                op: "resblock",
                detail: format!("input {:?}, block has {} channels", shape, self.channels),
            });
        }
        let h = self.first.forward(g, p, x, 1)?;
        let h = g.relu(h)?;
        let h = self.second.forward(g, p, h, 1)?;
        g.add(x, h)
    }
}
