use super::kernels::{self, AxisTaps, ConvGeom, MatView};
use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    AddRowVector {
        x: Var,
        bias: Var,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log {
        x: Var,
        floor: f64,
    },
    Softplus(Var),
    Powf {
        x: Var,
        p: f64,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    SumLastAxis(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Resize {
        x: Var,
        channels: usize,
        in_hw: (usize, usize),
        ty: AxisTaps,
        tx: AxisTaps,
    },
    Concat(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` was a parameter reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::contract(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        )),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Adds a length-`n` vector to every length-`n` row of `x` (leading-batch broadcast).
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&1);
        if tb.shape() != [n] {
            return Err(TensorError::dim("add_row_vector", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowVector { x, bias }, rg))
    }

    /// Adds `bias[c]` to every element of channel plane `c` of a `C×…` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.shape().first().copied().unwrap_or(0);
        if tb.shape() != [c] {
            return Err(TensorError::dim("add_channel_bias", tx.shape(), tb.shape()));
        }
        let plane = tx.numel() / c;
        let mut data = tx.data().to_vec();
        for (chunk, b) in data.chunks_mut(plane).zip(tb.data()) {
            for v in chunk {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddChannelBias { x, bias }, rg))
    }

    /// Multiplies row `i` of an `m×…` tensor by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let m = tx.shape().first().copied().unwrap_or(0);
        if ts.shape() != [m] {
            return Err(TensorError::dim("scale_rows", tx.shape(), ts.shape()));
        }
        let row = tx.numel() / m;
        let mut data = tx.data().to_vec();
        for (chunk, f) in data.chunks_mut(row).zip(ts.data()) {
            for v in chunk {
                *v *= f;
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleRows { x, s }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes its operand when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = matrix_dims("matmul", va)?;
        let (br, bc) = matrix_dims("matmul", vb)?;
        let av = MatView::maybe_t(va.data(), ar, ac, ta);
        let bv = MatView::maybe_t(vb.data(), br, bc, tb);
        if av.cols != bv.rows {
            return Err(TensorError::dim(
                "matmul",
                &[av.rows, av.cols],
                &[bv.rows, bv.cols],
            ));
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![0.0; m * n];
        kernels::gemm(1.0, av, bv, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = matrix_dims("transpose", tx)?;
        let src = tx.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, move |v| v.max(floor).ln(), Op::Log { x, floor })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, move |v| v.powf(p), Op::Powf { x, p })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(TensorError::contract(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |t: usize| base + t * inner;
                let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (src[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[idx(t)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap_or(&1);
        for p in [gamma, beta] {
            if self.value(p).shape() != [n] {
                return Err(TensorError::dim("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let src = &tx.data()[r * n..(r + 1) * n];
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (src[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis: `[…, n] → […]` (a rank-1 input becomes a scalar).
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let shape = tx.shape();
        let n = *shape.last().unwrap_or(&1);
        let out: Vec<f64> = tx.data().chunks(n).map(|c| c.iter().sum()).collect();
        let out_shape = if shape.is_empty() {
            Vec::new()
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let value = Tensor::new(&out_shape, out).expect("sum_last_axis shape");
        let rg = self.rg(x);
        self.push(value, Op::SumLastAxis(x), rg)
    }

    /// 2-D convolution of a `C_in×H×W` input with `C_out×C_in×k×k` weights (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let [c_in, h, wd] = *tx.shape() else {
            return Err(TensorError::contract(
                "conv2d",
                format!("input must be C×H×W, got {:?}", tx.shape()),
            ));
        };
        let [c_out, wc_in, k, k2] = *tw.shape() else {
            return Err(TensorError::contract(
                "conv2d",
                format!("weight must be C_out×C_in×k×k, got {:?}", tw.shape()),
            ));
        };
        if wc_in != c_in || k != k2 {
            return Err(TensorError::dim("conv2d", tx.shape(), tw.shape()));
        }
        if k % 2 == 0 {
            return Err(TensorError::contract("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(TensorError::contract("conv2d", "stride must be positive"));
        }
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(TensorError::dim("conv2d", tx.shape(), tw.shape()));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (wd + 2 * padding - k) / stride + 1,
        };
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(kernels::im2col(tx.data(), &geom))
        };
        let p = geom.positions();
        let col_data = cols.as_deref().unwrap_or(tx.data());
        let mut out = vec![0.0; c_out * p];
        kernels::gemm(
            1.0,
            MatView::new(tw.data(), c_out, geom.patch_len()),
            MatView::new(col_data, geom.patch_len(), p),
            0.0,
            &mut out,
        );
        let value = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }, rg))
    }

    /// Bilinear resize of a `C×H×W` tensor (half-pixel centres, no antialiasing).
    pub fn resize_bilinear(&mut self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let tx = self.value(x);
        let [c, h, w] = *tx.shape() else {
            return Err(TensorError::contract(
                "resize_bilinear",
                format!("input must be C×H×W, got {:?}", tx.shape()),
            ));
        };
        if h_out == 0 || w_out == 0 {
            return Err(TensorError::contract("resize_bilinear", "output size must be ≥ 1"));
        }
        let ty = AxisTaps::new(h, h_out);
        let tx_taps = AxisTaps::new(w, w_out);
        let out = kernels::resize_forward(tx.data(), c, (h, w), &ty, &tx_taps);
        let value = Tensor::new(&[c, h_out, w_out], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Resize {
                x,
                channels: c,
                in_hw: (h, w),
                ty,
                tx: tx_taps,
            },
            rg,
        ))
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(TensorError::dim("concat", self.value(*first).shape(), t.shape()));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Gathers rows (leading-axis slices) of `x`; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.shape().first().copied().unwrap_or(0);
        if rows.is_empty() {
            return Err(TensorError::contract("select_rows", "empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::contract(
                "select_rows",
                format!("row {bad} out of range for {m} rows"),
            ));
        }
        let width = tx.numel() / m;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&tx.data()[r * width..(r + 1) * width]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n_loss = self.value(loss).numel();
        if n_loss != 1 || self.value(loss).rank() > 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = Accum {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc.add(*a, |d| axpy(d, 1.0, &g));
                    acc.add(*b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    acc.add(*a, |d| axpy(d, 1.0, &g));
                    acc.add(*b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * y;
                        }
                    });
                    acc.add(*b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g / y;
                        }
                    });
                    acc.add(*b, |d| {
                        for (((d, g), x), y) in d.iter_mut().zip(&g).zip(va).zip(vb) {
                            *d -= g * x / (y * y);
                        }
                    });
                }
                Op::Affine { x, scale } => acc.add(*x, |d| axpy(d, *scale, &g)),
                Op::AddRowVector { x, bias } => {
                    acc.add(*x, |d| axpy(d, 1.0, &g));
                    acc.add(*bias, |d| {
                        let n = d.len();
                        for row in g.chunks(n) {
                            axpy(d, 1.0, row);
                        }
                    });
                }
                Op::AddChannelBias { x, bias } => {
                    acc.add(*x, |d| axpy(d, 1.0, &g));
                    acc.add(*bias, |d| {
                        let plane = g.len() / d.len();
                        for (db, chunk) in d.iter_mut().zip(g.chunks(plane)) {
                            *db += chunk.iter().sum::<f64>();
                        }
                    });
                }
                Op::ScaleRows { x, s } => {
                    let (vx, vs) = (nodes[x.0].value.data(), nodes[s.0].value.data());
                    let row = vx.len() / vs.len();
                    acc.add(*x, |d| {
                        for ((dc, gc), f) in d.chunks_mut(row).zip(g.chunks(row)).zip(vs) {
                            axpy(dc, *f, gc);
                        }
                    });
                    acc.add(*s, |d| {
                        for ((ds, gc), xc) in d.iter_mut().zip(g.chunks(row)).zip(vx.chunks(row)) {
                            *ds += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let av = MatView::maybe_t(va.data(), va.shape()[0], va.shape()[1], *ta);
                    let bv = MatView::maybe_t(vb.data(), vb.shape()[0], vb.shape()[1], *tb);
                    let gv = MatView::new(&g, av.rows, bv.cols);
                    acc.add(*a, |d| {
                        if *ta {
                            kernels::gemm(1.0, bv, gv.t(), 1.0, d);
                        } else {
                            kernels::gemm(1.0, gv, bv.t(), 1.0, d);
                        }
                    });
                    acc.add(*b, |d| {
                        if *tb {
                            kernels::gemm(1.0, gv.t(), av, 1.0, d);
                        } else {
                            kernels::gemm(1.0, av.t(), gv, 1.0, d);
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    acc.add(*x, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Reshape(x) => acc.add(*x, |d| axpy(d, 1.0, &g)),
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc.add(*x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * y * (1.0 - y);
                        }
                    });
                }
                Op::Relu(x) => {
                    let vx = nodes[x.0].value.data();
                    acc.add(*x, |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(vx) {
                            if *v > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc.add(*x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * y;
                        }
                    });
                }
                Op::Log { x, floor } => {
                    let vx = nodes[x.0].value.data();
                    acc.add(*x, |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(vx) {
                            if *v > *floor {
                                *d += g / v;
                            }
                        }
                    });
                }
                Op::Softplus(x) => {
                    let vx = nodes[x.0].value.data();
                    acc.add(*x, |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(vx) {
                            *d += g * kernels::sigmoid(*v);
                        }
                    });
                }
                Op::Powf { x, p } => {
                    let vx = nodes[x.0].value.data();
                    acc.add(*x, |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(vx) {
                            if *p != 0.0 && *v != 0.0 {
                                *d += g * p * v.powf(p - 1.0);
                            }
                        }
                    });
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = node.value.data();
                    acc.add(*x, |d| {
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let base = o * len * inner + i;
                                let dot: f64 =
                                    (0..*len).map(|t| g[base + t * inner] * y[base + t * inner]).sum();
                                for t in 0..*len {
                                    let k = base + t * inner;
                                    d[k] += y[k] * (g[k] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = nodes[gamma.0].value.data();
                    let n = gm.len();
                    acc.add(*gamma, |d| {
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((d, g), h) in d.iter_mut().zip(gr).zip(hr) {
                                *d += g * h;
                            }
                        }
                    });
                    acc.add(*beta, |d| {
                        for gr in g.chunks(n) {
                            axpy(d, 1.0, gr);
                        }
                    });
                    acc.add(*x, |d| {
                        let nf = n as f64;
                        let mut dh = vec![0.0; n];
                        for (r, ((dr, gr), hr)) in
                            d.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                        {
                            for j in 0..n {
                                dh[j] = gr[j] * gm[j];
                            }
                            let s1: f64 = dh.iter().sum();
                            let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                            let k = inv_std[r] / nf;
                            for j in 0..n {
                                dr[j] += k * (nf * dh[j] - s1 - hr[j] * s2);
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let s = g[0];
                    acc.add(*x, |d| d.iter_mut().for_each(|v| *v += s));
                }
                Op::SumLastAxis(x) => {
                    let n = nodes[x.0].value.numel() / g.len();
                    acc.add(*x, |d| {
                        for (chunk, gv) in d.chunks_mut(n).zip(&g) {
                            chunk.iter_mut().for_each(|v| *v += gv);
                        }
                    });
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let vx = nodes[x.0].value.data();
                    let vw = nodes[w.0].value.data();
                    let c_out = node.value.shape()[0];
                    let p = geom.positions();
                    let kk = geom.patch_len();
                    let gv = MatView::new(&g, c_out, p);
                    let col_data = cols.as_deref().unwrap_or(vx);
                    acc.add(*w, |d| {
                        kernels::gemm(1.0, gv, MatView::new(col_data, kk, p).t(), 1.0, d);
                    });
                    acc.add(*x, |d| {
                        let wv = MatView::new(vw, c_out, kk).t();
                        if geom.is_pointwise() {
                            kernels::gemm(1.0, wv, gv, 1.0, d);
                        } else {
                            let mut dcols = vec![0.0; kk * p];
                            kernels::gemm(1.0, wv, gv, 0.0, &mut dcols);
                            kernels::col2im_add(&dcols, geom, d);
                        }
                    });
                }
                Op::Resize {
                    x,
                    channels,
                    in_hw,
                    ty,
                    tx,
                } => {
                    acc.add(*x, |d| kernels::resize_backward_add(&g, *channels, *in_hw, ty, tx, d));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.numel();
                        acc.add(*p, |d| axpy(d, 1.0, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let width = g.len() / rows.len();
                    acc.add(*x, |d| {
                        for (k, &r) in rows.iter().enumerate() {
                            axpy(&mut d[r * width..(r + 1) * width], 1.0, &g[k * width..(k + 1) * width]);
                        }
                    });
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

struct Accum<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accum<'_> {
    /// Runs `f` on the (lazily zeroed) gradient buffer of `v` if `v` needs a gradient.
    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(buf);
    }
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
