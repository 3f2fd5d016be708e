//! Dynamic computation tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! consumes it, returning the gradients of every bound parameter.

use std::ops::Index;

use crate::conv::{col2im, conv_out, im2col, Geom};
use crate::error::{Error, Result};
use crate::param::{GradEntry, Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride/padding attributes of a 2-D convolution. The kernel size comes from the weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvAttrs {
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/cols appended to a transposed convolution's output. Ignored by `conv2d`.
    pub output_padding: usize,
}

impl ConvAttrs {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvAttrs {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub const fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }
}

/// Parameters of one store bound into a graph, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.index()]
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param { store: u64, index: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
        width_a: usize,
        width_b: usize,
    },
    Mean(Var),
    Sum(Var),
    SumSquares(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
        batch: usize,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
        batch: usize,
        in_channels: usize,
    },
    LogMeanExp(Var),
    NormalizeRows {
        x: Var,
        cols: usize,
        rms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        classes: usize,
        count: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Constant, false)
    }

    /// Records a trainable parameter; its gradient is reported by `backward`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let op = Op::Param {
            store: store.id(),
            index: id.index(),
        };
        self.push("param", store.value(id).clone(), op, true)
    }

    /// Binds every parameter of `store`; frozen bindings behave as constants.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Result<Bound> {
        let mut vars = Vec::with_capacity(store.len());
        for (i, p) in store.iter().enumerate() {
            let v = if trainable {
                self.param(store, ParamId(i))?
            } else {
                self.constant(p.tensor.clone())?
            };
            vars.push(v);
        }
        Ok(Bound(vars))
    }

    /// Same value, no gradient flow (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(op_name, out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push("scale", out, Op::Scale(a, s), needs)
    }

    /// Adds `bias` to every trailing block of `x`; `bias`'s shape must equal `x`'s trailing dims.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let bt = self.value(bias).data().to_vec();
        let width = bt.len();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(width) {
            for (v, &b) in chunk.iter_mut().zip(&bt) {
                *v = *v + b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push("add_bias", out, Op::AddBias(x, bias), needs)
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand's last two dims.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", format!("{sa:?} x {sb:?} (trans {trans_a}, {trans_b})"));
        let (batch, ra, ca, rb, cb) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(err()),
        };
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &da[i * m * k..],
                    trans_a,
                    &db[i * k * n..],
                    trans_b,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let needs = self.needs(a) || self.needs(b);
        let op = Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
            batch,
            m,
            k,
            n,
        };
        self.push("matmul", Tensor::from_parts(shape, out), op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(a);
        self.push("relu", out, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| {
            // stable for large |x|
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        let needs = self.needs(a);
        self.push("sigmoid", out, Op::Sigmoid(a), needs)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let width = *t.shape().last().unwrap_or(&1);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(width) {
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        self.push("softmax", out, Op::Softmax(a), needs)
    }

    /// Layer normalization over the last dimension with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let width = *xs.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!("{xs:?} with gain {:?}, shift {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::from_f64(eps);
        let n = T::from_f64(width as f64);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let input = self.value(x).data();
        let rows = input.len() / width;
        let mut xhat = vec![T::zero(); input.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); input.len()];
        for r in 0..rows {
            let row = &input[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", Tensor::from_parts(xs, out), op, needs)
    }

    /// Row lookup: output shape is `[ids.len(), dim]` for a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", format!("table {ts:?}, {} ids", ids.len())));
        }
        let (rows, dim) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding", format!("id {bad} out of range 0..{rows}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let needs = self.needs(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", Tensor::from_parts(vec![ids.len(), dim], out), op, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let needs = self.needs(a);
        self.push("reshape", out, Op::Reshape(a), needs)
    }

    /// `out[i] = x.flat[map[i]]` reshaped to `shape`. Covers transposes, block
    /// rearrangements and row permutations.
    pub fn gather(&mut self, x: Var, map: &[usize], shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let len = self.value(x).numel();
        if numel != map.len() || map.iter().any(|&i| i >= len) {
            return Err(Error::shape(
                "gather",
                format!("map of {} into {shape:?} from {len} values", map.len()),
            ));
        }
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        let op = Op::Gather {
            x,
            map: map.to_vec(),
        };
        self.push("gather", Tensor::new(shape.to_vec(), data)?, op, needs)
    }

    /// Concatenation along the last dimension; leading dims must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", format!("{sa:?} ++ {sb:?}")));
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let rows = da.len() / wa;
        let mut out = Vec::with_capacity(da.len() + db.len());
        for r in 0..rows {
            out.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        let needs = self.needs(a) || self.needs(b);
        let op = Op::Concat {
            a,
            b,
            width_a: wa,
            width_b: wb,
        };
        self.push("concat", Tensor::from_parts(shape, out), op, needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        let needs = self.needs(a);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let needs = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|&x| x * x).sum::<T>();
        let needs = self.needs(a);
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(a), needs)
    }

    /// `mean((a - b)^2)` composed from primitive kernels.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let d = self.sub(a, b)?;
        let s = self.sum_squares(d)?;
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// `mean(a^2)`.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_squares(a)?;
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// 2-D convolution. `x`: `[N, C, H, W]`, `w`: `[O, C, k, k]`, `b`: `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: ConvAttrs) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let err = |d: String| Error::shape("conv2d", d);
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(err(format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(err(format!("bias {:?} for {} kernels", self.shape(b), ws[0])));
            }
        }
        let (batch, channels, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, k) = (ws[0], ws[2]);
        let oh = conv_out(h, k, attrs.stride, attrs.padding);
        let ow = conv_out(wd, k, attrs.stride, attrs.padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(err(format!(
                "{h}x{wd} input, kernel {k}, stride {}, padding {} gives no output",
                attrs.stride, attrs.padding
            )));
        };
        let geom = Geom {
            channels,
            in_h: h,
            in_w: wd,
            kernel: k,
            stride: attrs.stride,
            padding: attrs.padding,
            out_h: oh,
            out_w: ow,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = vec![T::zero(); batch * out_ch * cols_n];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            let img = channels * h * wd;
            for i in 0..batch {
                im2col(&geom, &xd[i * img..(i + 1) * img], &mut cols);
                let y = &mut out[i * out_ch * cols_n..(i + 1) * out_ch * cols_n];
                T::gemm(out_ch, rows, cols_n, T::one(), wdata, false, &cols, false, T::zero(), y);
                if let Some(b) = b {
                    let bd = self.value(b).data();
                    for (o, plane) in y.chunks_mut(cols_n).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v + bd[o]);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            batch,
            out_channels: out_ch,
        };
        let shape = vec![batch, out_ch, oh, ow];
        self.push("conv2d", Tensor::from_parts(shape, out), op, needs)
    }

    /// Transposed 2-D convolution (adjoint of `conv2d`).
    /// `x`: `[N, Cin, H, W]`, `w`: `[Cin, Cout, k, k]`, `b`: `[Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: ConvAttrs) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let err = |d: String| Error::shape("conv_transpose2d", d);
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(err(format!("input {xs:?}, weight {ws:?}")));
        }
        if attrs.stride == 0 || attrs.output_padding >= attrs.stride {
            return Err(err(format!("invalid attrs {attrs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(err(format!("bias {:?} for {} outputs", self.shape(b), ws[1])));
            }
        }
        let (batch, in_ch, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, k) = (ws[1], ws[2]);
        let full = |n: usize| ((n - 1) * attrs.stride + k + attrs.output_padding).checked_sub(2 * attrs.padding);
        let (Some(oh), Some(ow)) = (full(h), full(wd)) else {
            return Err(err(format!("{h}x{wd} input gives no output with {attrs:?}")));
        };
        if oh == 0 || ow == 0 || conv_out(oh, k, attrs.stride, attrs.padding) != Some(h) {
            return Err(err(format!("{h}x{wd} input gives no consistent output with {attrs:?}")));
        }
        let geom = Geom {
            channels: out_ch,
            in_h: oh,
            in_w: ow,
            kernel: k,
            stride: attrs.stride,
            padding: attrs.padding,
            out_h: h,
            out_w: wd,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let plane = oh * ow;
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = vec![T::zero(); batch * out_ch * plane];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            for i in 0..batch {
                let xi = &xd[i * in_ch * cols_n..(i + 1) * in_ch * cols_n];
                T::gemm(rows, in_ch, cols_n, T::one(), wdata, true, xi, false, T::zero(), &mut cols);
                let y = &mut out[i * out_ch * plane..(i + 1) * out_ch * plane];
                col2im(&geom, &cols, y);
                if let Some(b) = b {
                    let bd = self.value(b).data();
                    for (o, p) in y.chunks_mut(plane).enumerate() {
                        p.iter_mut().for_each(|v| *v = *v + bd[o]);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let op = Op::ConvTranspose2d {
            x,
            w,
            b,
            geom,
            batch,
            in_channels: in_ch,
        };
        let shape = vec![batch, out_ch, oh, ow];
        self.push("conv_transpose2d", Tensor::from_parts(shape, out), op, needs)
    }

    /// `log(mean(exp(a)))`, evaluated with max-subtraction.
    pub fn log_mean_exp(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).data();
        let m = d.iter().copied().fold(T::neg_infinity(), T::max);
        let s = d.iter().map(|&x| (x - m).exp()).sum::<T>();
        let v = m + (s / T::from_f64(d.len() as f64)).ln();
        let needs = self.needs(a);
        self.push("log_mean_exp", Tensor::scalar(v), Op::LogMeanExp(a), needs)
    }

    /// Scales every row of a `[rows, cols]` tensor to unit mean square.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("normalize_rows", format!("{xs:?} is not rank 2")));
        }
        let cols = xs[1];
        let mut out = self.value(x).clone();
        let mut rms = Vec::with_capacity(xs[0]);
        for row in out.data_mut().chunks_mut(cols) {
            let p = row.iter().map(|&v| v * v).sum::<T>() / T::from_f64(cols as f64);
            if p <= T::zero() {
                return Err(Error::DegenerateSignal);
            }
            let r = p.sqrt();
            row.iter_mut().for_each(|v| *v = *v / r);
            rms.push(r);
        }
        let needs = self.needs(x);
        self.push("normalize_rows", out, Op::NormalizeRows { x, cols, rms }, needs)
    }

    /// Mean categorical cross-entropy of `[n, classes]` logits; `None` targets are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {ls:?}, {} targets", targets.len()),
            ));
        }
        let classes = ls[1];
        if targets.iter().flatten().any(|&t| t >= classes) {
            return Err(Error::shape("cross_entropy", "target id out of range"));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy needs at least one target".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, t) in probs.chunks_mut(classes).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            if let Some(t) = t {
                loss = loss + lse - row[*t];
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = loss / T::from_f64(count as f64);
        let needs = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            classes,
            count,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, needs)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), T::one()));
        let mut entries = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            node.backward(&g, &mut acc, &self.nodes);
            if let Op::Param { store, index } = node.op {
                entries.push(GradEntry {
                    store,
                    index,
                    grad: g,
                });
            }
        }
        Ok(Gradients { entries })
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}

struct Accumulator<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Accumulator<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_with(&mut self, v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.wants(v) {
            let g = f();
            self.add(v, g);
        }
    }
}

impl<T: Scalar> Node<T> {
    fn backward(&self, g: &Tensor<T>, acc: &mut Accumulator<'_, T>, nodes: &[Node<T>]) {
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(val(v).shape().to_vec(), data);
        match &self.op {
            Op::Constant | Op::Param { .. } => {}
            Op::Add(a, b) => {
                acc.add_with(*a, || g.clone());
                acc.add_with(*b, || g.clone());
            }
            Op::Sub(a, b) => {
                acc.add_with(*a, || g.clone());
                acc.add_with(*b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc.add_with(*a, || {
                    like(*a, gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect())
                });
                acc.add_with(*b, || {
                    like(*b, gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect())
                });
            }
            Op::Scale(a, s) => acc.add_with(*a, || g.map(|x| x * *s)),
            Op::AddBias(x, b) => {
                acc.add_with(*x, || g.clone());
                acc.add_with(*b, || {
                    let width = val(*b).numel();
                    let mut out = vec![T::zero(); width];
                    for chunk in gd.chunks(width) {
                        for (o, &v) in out.iter_mut().zip(chunk) {
                            *o = *o + v;
                        }
                    }
                    like(*b, out)
                });
            }
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (da, db) = (val(a).data(), val(b).data());
                acc.add_with(a, || {
                    let mut out = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..];
                        let bi = &db[i * k * n..];
                        let oi = &mut out[i * m * k..(i + 1) * m * k];
                        if trans_a {
                            T::gemm(k, n, m, T::one(), bi, trans_b, gi, true, T::zero(), oi);
                        } else {
                            T::gemm(m, n, k, T::one(), gi, false, bi, !trans_b, T::zero(), oi);
                        }
                    }
                    like(a, out)
                });
                acc.add_with(b, || {
                    let mut out = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..];
                        let ai = &da[i * m * k..];
                        let oi = &mut out[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, T::one(), gi, true, ai, trans_a, T::zero(), oi);
                        } else {
                            T::gemm(k, m, n, T::one(), ai, !trans_a, gi, false, T::zero(), oi);
                        }
                    }
                    like(b, out)
                });
            }
            Op::Relu(a) => acc.add_with(*a, || {
                like(
                    *a,
                    gd.iter()
                        .zip(val(*a).data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )
            }),
            Op::Sigmoid(a) => acc.add_with(*a, || {
                like(
                    *a,
                    gd.iter()
                        .zip(self.value.data())
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                )
            }),
            Op::Softmax(a) => acc.add_with(*a, || {
                let y = self.value.data();
                let width = *self.value.shape().last().unwrap_or(&1);
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(width).zip(y.chunks(width)).zip(gd.chunks(width)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..width {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                like(*a, out)
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let width = val(*gamma).numel();
                acc.add_with(*gamma, || {
                    let mut out = vec![T::zero(); width];
                    for (gr, hr) in gd.chunks(width).zip(xhat.chunks(width)) {
                        for j in 0..width {
                            out[j] = out[j] + gr[j] * hr[j];
                        }
                    }
                    like(*gamma, out)
                });
                acc.add_with(*beta, || {
                    let mut out = vec![T::zero(); width];
                    for gr in gd.chunks(width) {
                        for j in 0..width {
                            out[j] = out[j] + gr[j];
                        }
                    }
                    like(*beta, out)
                });
                acc.add_with(*x, || {
                    let gam = val(*gamma).data();
                    let nw = T::from_f64(width as f64);
                    let mut out = vec![T::zero(); gd.len()];
                    for (r, ((o, gr), hr)) in out
                        .chunks_mut(width)
                        .zip(gd.chunks(width))
                        .zip(xhat.chunks(width))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..width {
                            let d = gr[j] * gam[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hr[j];
                        }
                        mean_d = mean_d / nw;
                        mean_dh = mean_dh / nw;
                        for j in 0..width {
                            o[j] = rstd[r] * (gr[j] * gam[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    like(*x, out)
                });
            }
            Op::Embedding { table, ids } => acc.add_with(*table, || {
                let dim = val(*table).shape()[1];
                let mut out = vec![T::zero(); val(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        out[id * dim + j] = out[id * dim + j] + gd[r * dim + j];
                    }
                }
                like(*table, out)
            }),
            Op::Reshape(a) => acc.add_with(*a, || like(*a, gd.to_vec())),
            Op::Gather { x, map } => acc.add_with(*x, || {
                let mut out = vec![T::zero(); val(*x).numel()];
                for (&src, &v) in map.iter().zip(gd) {
                    out[src] = out[src] + v;
                }
                like(*x, out)
            }),
            &Op::Concat {
                a,
                b,
                width_a,
                width_b,
            } => {
                let w = width_a + width_b;
                acc.add_with(a, || {
                    like(a, gd.chunks(w).flat_map(|r| r[..width_a].iter().copied()).collect())
                });
                acc.add_with(b, || {
                    like(b, gd.chunks(w).flat_map(|r| r[width_a..].iter().copied()).collect())
                });
            }
            Op::Mean(a) => acc.add_with(*a, || {
                let n = val(*a).numel();
                let v = gd[0] / T::from_f64(n as f64);
                like(*a, vec![v; n])
            }),
            Op::Sum(a) => acc.add_with(*a, || like(*a, vec![gd[0]; val(*a).numel()])),
            Op::SumSquares(a) => acc.add_with(*a, || {
                let two = T::from_f64(2.0);
                val(*a).map(|x| two * x * gd[0])
            }),
            &Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_channels,
            } => {
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.in_h * geom.in_w;
                let (xd, wd) = (val(x).data(), val(w).data());
                let mut cols = vec![T::zero(); rows * cols_n];
                acc.add_with(w, || {
                    let mut out = vec![T::zero(); wd.len()];
                    for i in 0..batch {
                        im2col(&geom, &xd[i * img..(i + 1) * img], &mut cols);
                        let gi = &gd[i * out_channels * cols_n..];
                        T::gemm(out_channels, cols_n, rows, T::one(), gi, false, &cols, true, T::one(), &mut out);
                    }
                    like(w, out)
                });
                acc.add_with(x, || {
                    let mut out = vec![T::zero(); xd.len()];
                    for i in 0..batch {
                        let gi = &gd[i * out_channels * cols_n..];
                        T::gemm(rows, out_channels, cols_n, T::one(), wd, true, gi, false, T::zero(), &mut cols);
                        col2im(&geom, &cols, &mut out[i * img..(i + 1) * img]);
                    }
                    like(x, out)
                });
                if let Some(b) = b {
                    acc.add_with(b, || channel_sums(gd, batch, out_channels, cols_n));
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch,
                in_channels,
            } => {
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let out_ch = geom.channels;
                let plane = geom.in_h * geom.in_w;
                let (xd, wd) = (val(x).data(), val(w).data());
                let mut dcols = vec![T::zero(); batch * rows * cols_n];
                for i in 0..batch {
                    let gi = &gd[i * out_ch * plane..(i + 1) * out_ch * plane];
                    im2col(&geom, gi, &mut dcols[i * rows * cols_n..(i + 1) * rows * cols_n]);
                }
                acc.add_with(w, || {
                    let mut out = vec![T::zero(); wd.len()];
                    for i in 0..batch {
                        let xi = &xd[i * in_channels * cols_n..];
                        let ci = &dcols[i * rows * cols_n..];
                        T::gemm(in_channels, cols_n, rows, T::one(), xi, false, ci, true, T::one(), &mut out);
                    }
                    like(w, out)
                });
                acc.add_with(x, || {
                    let mut out = vec![T::zero(); xd.len()];
                    for i in 0..batch {
                        let ci = &dcols[i * rows * cols_n..];
                        let oi = &mut out[i * in_channels * cols_n..(i + 1) * in_channels * cols_n];
                        T::gemm(in_channels, rows, cols_n, T::one(), wd, false, ci, false, T::zero(), oi);
                    }
                    like(x, out)
                });
                if let Some(b) = b {
                    acc.add_with(b, || channel_sums(gd, batch, out_ch, plane));
                }
            }
            Op::LogMeanExp(a) => acc.add_with(*a, || {
                let y = self.value.data()[0];
                let n = T::from_f64(val(*a).numel() as f64);
                val(*a).map(|x| gd[0] * (x - y).exp() / n)
            }),
            Op::NormalizeRows { x, cols, rms } => acc.add_with(*x, || {
                let y = self.value.data();
                let nc = T::from_f64(*cols as f64);
                let mut out = vec![T::zero(); y.len()];
                for (r, ((o, yr), gr)) in out
                    .chunks_mut(*cols)
                    .zip(y.chunks(*cols))
                    .zip(gd.chunks(*cols))
                    .enumerate()
                {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / nc;
                    for j in 0..*cols {
                        o[j] = (gr[j] - yr[j] * dot) / rms[r];
                    }
                }
                like(*x, out)
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                classes,
                count,
            } => acc.add_with(*logits, || {
                let scale = gd[0] / T::from_f64(*count as f64);
                let mut out = vec![T::zero(); probs.len()];
                for ((o, p), t) in out.chunks_mut(*classes).zip(probs.chunks(*classes)).zip(targets) {
                    if let Some(t) = t {
                        for j in 0..*classes {
                            o[j] = p[j] * scale;
                        }
                        o[*t] = o[*t] - scale;
                    }
                }
                like(*logits, out)
            }),
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, channels: usize, plane: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); channels];
    for i in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let s = &g[(i * channels + c) * plane..(i * channels + c + 1) * plane];
            *o = *o + s.iter().copied().sum::<T>();
        }
    }
    Tensor::from_parts(vec![channels], out)
}
