use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, T, T),
    Reshape(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Linear record of a forward computation.
///
/// Every op checks its operand shapes and the finiteness of its result, so a
/// NaN or an infinity is reported at the op that produced it. Gradients are
/// accumulated in reverse tape order, which makes backward deterministic.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_K) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy of `v` that stops gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => shape_err(op, format!("expected rank 2, got {s:?}")),
        }
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, value, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(name, value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]"));
        }
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, Op::Maximum(a, b), |x, y| {
            if x >= y {
                x
            } else {
                y
            }
        })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, Op::Minimum(a, b), |x, y| {
            if x <= y {
                x
            } else {
                y
            }
        })
    }

    /// Adds a length-`d` vector to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims2("add_row", a)?;
        if self.value(row).numel() != d {
            return shape_err(
                "add_row",
                format!("row {:?} for width {d}", self.shape(row)),
            );
        }
        let (va, vr) = (self.value(a).data(), self.value(row).data());
        let data = (0..n * d).map(|i| va[i] + vr[i % d]).collect();
        let value = Tensor::new([n, d], data)?;
        let rg = self.rg(&[a, row]);
        self.push("add_row", value, Op::AddRow(a, row), rg)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        self.unary("affine", a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.affine(a, s, T::zero())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), |x| x.ln())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), |x| x.abs())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push("transpose", value, Op::Transpose(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2("softmax_rows", a)?;
        let va = self.value(a).data();
        let mut out = vec![T::zero(); n * d];
        for (row, dst) in va.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for (o, &x) in dst.iter_mut().zip(row) {
                *o = (x - max).exp();
                total = total + *o;
            }
            for o in dst.iter_mut() {
                *o = *o / total;
            }
        }
        let value = Tensor::new([n, d], out)?;
        let rg = self.rg(&[a]);
        self.push("softmax_rows", value, Op::SoftmaxRows(a), rg)
    }

    /// Normalizes each length-`d` vector along the last axis, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return shape_err(
                "layer_norm",
                format!(
                    "feature dim {d} vs gamma {:?} / beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let (vx, vg, vb) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rows = vx.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg[j] + vb[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Mean over the token (row) axis: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2("mean_rows", a)?;
        let va = self.value(a).data();
        let inv = T::one() / T::of(n as f64);
        let data = (0..d)
            .map(|j| (0..n).map(|i| va[i * d + j]).sum::<T>() * inv)
            .collect();
        let value = Tensor::new([1, d], data)?;
        let rg = self.rg(&[a]);
        self.push("mean_rows", value, Op::MeanRows(a), rg)
    }

    /// Stacks `[n_i, d]` matrices along the token axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no parts");
        };
        let (_, d) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (n, dp) = self.dims2("concat_rows", p)?;
            if dp != d {
                return shape_err("concat_rows", format!("feature dim {dp} vs {d}"));
            }
            rows += n;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, d], data)?;
        let rg = self.rg(parts);
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2("slice_rows", a)?;
        if len == 0 || start + len > n {
            return shape_err(
                "slice_rows",
                format!("rows {start}..{} of {n}", start + len),
            );
        }
        let data = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new([len, d], data)?;
        let rg = self.rg(&[a]);
        self.push("slice_rows", value, Op::SliceRows(a, start), rg)
    }

    /// Inverse of [`Tape::concat_rows`]: cuts `a` into consecutive row blocks.
    pub fn split_rows(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let (n, _) = self.dims2("split_rows", a)?;
        let total: usize = sizes.iter().sum();
        if total != n {
            return shape_err(
                "split_rows",
                format!("sizes sum to {total}, token count {n}"),
            );
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice_rows(a, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no parts");
        };
        let (n, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, dp) = self.dims2("concat_cols", p)?;
            if np != n {
                return shape_err("concat_cols", format!("row count {np} vs {n}"));
            }
            widths.push(dp);
        }
        let d: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new([n, d], data)?;
        let rg = self.rg(parts);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2("slice_cols", a)?;
        if len == 0 || start + len > d {
            return shape_err(
                "slice_cols",
                format!("cols {start}..{} of {d}", start + len),
            );
        }
        let va = self.value(a).data();
        let data = (0..n)
            .flat_map(|i| va[i * d + start..i * d + start + len].iter().copied())
            .collect();
        let value = Tensor::new([n, len], data)?;
        let rg = self.rg(&[a]);
        self.push("slice_cols", value, Op::SliceCols(a, start), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Sum of several scalars, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return shape_err("add_all", "no terms");
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every leaf that
    /// requires a gradient holds `d loss / d leaf`; leaves not reached get
    /// a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for node in &mut self.nodes {
            node.grad = None;
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let shape = node.value.shape().to_vec();
                node.grad = Some(match g {
                    Some(g) => Tensor::new(shape, g)?,
                    None => Tensor::zeros(shape),
                });
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        macro_rules! acc {
            ($v:expr, |$k:ident| $e:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let n = self.nodes[v.0].value.numel();
                    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    for $k in 0..n {
                        buf[$k] = buf[$k] + $e;
                    }
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("rank 2");
                let n = self.nodes[b.0].value.shape()[1];
                if wants(a) {
                    let buf = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * k]);
                    // dA = G · B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        val(b),
                        (1, n as isize),
                        T::one(),
                        buf,
                    );
                }
                if wants(b) {
                    let buf = grads[b.0].get_or_insert_with(|| vec![T::zero(); k * n]);
                    // dB = A^T · G
                    T::gemm(
                        k,
                        m,
                        n,
                        val(a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        buf,
                    );
                }
            }
            &Op::Add(a, b) => {
                acc!(a, |k| g[k]);
                acc!(b, |k| g[k]);
            }
            &Op::Sub(a, b) => {
                acc!(a, |k| g[k]);
                acc!(b, |k| -g[k]);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc!(a, |k| g[k] * vb[k]);
                acc!(b, |k| g[k] * va[k]);
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc!(a, |k| g[k] / vb[k]);
                acc!(b, |k| -g[k] * va[k] / (vb[k] * vb[k]));
            }
            &Op::Maximum(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc!(a, |k| if va[k] >= vb[k] { g[k] } else { T::zero() });
                acc!(b, |k| if va[k] >= vb[k] { T::zero() } else { g[k] });
            }
            &Op::Minimum(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc!(a, |k| if va[k] <= vb[k] { g[k] } else { T::zero() });
                acc!(b, |k| if va[k] <= vb[k] { T::zero() } else { g[k] });
            }
            &Op::AddRow(a, row) => {
                acc!(a, |k| g[k]);
                if wants(row) {
                    let d = self.nodes[row.0].value.numel();
                    let buf = grads[row.0].get_or_insert_with(|| vec![T::zero(); d]);
                    for (k, &gk) in g.iter().enumerate() {
                        buf[k % d] = buf[k % d] + gk;
                    }
                }
            }
            &Op::Affine(a, s) => acc!(a, |k| g[k] * s),
            &Op::Gelu(a) => {
                let va = val(a);
                acc!(a, |k| g[k] * gelu_grad(va[k]));
            }
            &Op::Sigmoid(a) => acc!(a, |k| g[k] * y[k] * (T::one() - y[k])),
            &Op::Exp(a) => acc!(a, |k| g[k] * y[k]),
            &Op::Log(a) => {
                let va = val(a);
                acc!(a, |k| g[k] / va[k]);
            }
            &Op::Abs(a) => {
                let va = val(a);
                acc!(a, |k| if va[k] > T::zero() {
                    g[k]
                } else if va[k] < T::zero() {
                    -g[k]
                } else {
                    T::zero()
                });
            }
            &Op::Clamp(a, lo, hi) => {
                let va = val(a);
                acc!(a, |k| if va[k] >= lo && va[k] <= hi {
                    g[k]
                } else {
                    T::zero()
                });
            }
            &Op::Reshape(a) => acc!(a, |k| g[k]),
            &Op::Transpose(a) => {
                // a is [r, c]; output is [c, r]
                let (r, c) = self.nodes[a.0].value.dims2().expect("rank 2");
                acc!(a, |k| g[(k % c) * r + k / c]);
            }
            &Op::SoftmaxRows(a) => {
                let d = node.value.shape()[1];
                let dots: Vec<T> = g
                    .chunks_exact(d)
                    .zip(y.chunks_exact(d))
                    .map(|(gr, yr)| gr.iter().zip(yr).map(|(&p, &q)| p * q).sum())
                    .collect();
                acc!(a, |k| y[k] * (g[k] - dots[k / d]));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.nodes[gamma.0].value.numel();
                let vg = val(gamma);
                acc!(beta, |j| (0..rstd.len()).map(|r| g[r * d + j]).sum::<T>());
                acc!(gamma, |j| (0..rstd.len())
                    .map(|r| g[r * d + j] * xhat[r * d + j])
                    .sum::<T>());
                if wants(x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = g[base + j] * vg[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[base + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dh = g[base + j] * vg[j];
                            dx[base + j] = rs * (dh - m1 - xhat[base + j] * m2);
                        }
                    }
                    acc!(x, |k| dx[k]);
                }
            }
            &Op::MeanRows(a) => {
                let (n, d) = self.nodes[a.0].value.dims2().expect("rank 2");
                let inv = T::one() / T::of(n as f64);
                acc!(a, |k| g[k % d] * inv);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc!(p, |k| g[offset + k]);
                    offset += n;
                }
            }
            &Op::SliceRows(a, start) => {
                let d = node.value.shape()[1];
                let lo = start * d;
                let hi = lo + g.len();
                acc!(a, |k| if k >= lo && k < hi {
                    g[k - lo]
                } else {
                    T::zero()
                });
            }
            Op::ConcatCols(parts) => {
                let d = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc!(p, |k| g[(k / w) * d + offset + k % w]);
                    offset += w;
                }
            }
            &Op::SliceCols(a, start) => {
                let len = node.value.shape()[1];
                let d = self.nodes[a.0].value.shape()[1];
                acc!(a, |k| {
                    let c = k % d;
                    if c >= start && c < start + len {
                        g[(k / d) * len + c - start]
                    } else {
                        T::zero()
                    }
                });
            }
            &Op::Sum(a) => acc!(a, |_k| g[0]),
            &Op::Mean(a) => {
                let inv = T::one() / T::of(self.nodes[a.0].value.numel() as f64);
                acc!(a, |_k| g[0] * inv);
            }
        }
    }
}
