//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as a node holding its forward value
//! and the references needed by its backward rule. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] walks it once in reverse.
//!
//! Parameters enter the tape through [`Tape::param`], which creates at most
//! one leaf per parameter; gradients for a parameter therefore arrive at a
//! single node and are reported once per backward pass.

use super::{gemm, NumericsError, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Select { input: Var, axis: usize, index: usize },
    Stack { inputs: Vec<Var>, axis: usize },
    GruCell { xg: Var, h: Var, wh: Var, bh: Var, cache: Vec<T> },
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad_left: usize, cols: Vec<T> },
    ConvTranspose1d { x: Var, w: Var, b: Var, stride: usize, crop_left: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    StopGrad,
    StraightThrough(Var),
    Bce { probs: Var, target: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it received one.
    /// Intermediate nodes are only retained by [`Tape::backward_retain_all`].
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.get(*v).map(|g| (*p, g)))
    }
}

/// Suffix broadcasting: `b` may be repeated to fill `a` when `a`'s shape ends
/// with `b`'s shape.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a.ends_with(b)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub struct Tape<'p, T: Scalar = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
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

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(op_name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var, NumericsError> {
        self.push("input", t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used by tests and the gradient oracle).
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var, NumericsError> {
        self.push("variable", t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut(), false);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta.shape(), tb.shape()) {
            return Err(NumericsError::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let bl = tb.len();
        let bd = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bl])).collect();
        Tensor::new(ta.shape(), data)
    }

    /// `a + b`, with `b` broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, NumericsError> {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| s * v + c).collect())?;
        let ng = self.ng(x);
        self.push("affine", out, Op::Affine(x, s), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumericsError> {
        self.affine(x, s, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.mul(x, x)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = inputs.first().ok_or(NumericsError::EmptyInput("concat"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(NumericsError::BadAxis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, ng)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::BadAxis { op: "slice", axis, rank: shape.len() });
        }
        if start > end || end > shape[axis] {
            return Err(NumericsError::BadRange { op: "slice", start, end, len: shape[axis] });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let width = (end - start) * inner;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let off = o * len * inner + start * inner;
            data.extend_from_slice(&src[off..off + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(x);
        self.push("slice", out, Op::Slice { input: x, axis, start }, ng)
    }

    /// Take index `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::BadAxis { op: "select", axis, rank: shape.len() });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if index >= len {
            return Err(NumericsError::BadRange { op: "select", start: index, end: index + 1, len });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let off = (o * len + index) * inner;
            data.extend_from_slice(&src[off..off + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(x);
        self.push("select", out, Op::Select { input: x, axis, index }, ng)
    }

    /// Stack equally shaped tensors along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = inputs.first().ok_or(NumericsError::EmptyInput("stack"))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(NumericsError::BadAxis { op: "stack", axis, rank: base.len() + 1 });
        }
        for &v in inputs {
            if self.shape(v) != base.as_slice() {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack",
                    left: base,
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let n = inputs.len();
        let mut data = vec![T::zero(); outer * n * inner];
        for (k, &v) in inputs.iter().enumerate() {
            let src = self.value(v).data();
            for o in 0..outer {
                data[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, n);
        let out = Tensor::new(&shape, data)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push("stack", out, Op::Stack { inputs: inputs.to_vec(), axis }, ng)
    }

    /// One GRU step. `xg: [B, 3H]` holds the input projections (with input
    /// bias) for the reset, update and candidate gates; `h: [B, H]`;
    /// `wh: [H, 3H]`; `bh: [3H]`. Returns the next hidden state
    /// `(1 - z)·n + z·h` with `n = tanh(x_n + r·(h W_n + b_n))`.
    pub fn gru_cell(&mut self, xg: Var, h: Var, wh: Var, bh: Var) -> Result<Var, NumericsError> {
        let (sx, sh, sw, sb) = (self.shape(xg), self.shape(h), self.shape(wh), self.shape(bh));
        let ok = sh.len() == 2
            && sx.len() == 2
            && sx[0] == sh[0]
            && sx[1] == 3 * sh[1]
            && sw == [sh[1], 3 * sh[1]]
            && sb == [3 * sh[1]];
        if !ok {
            return Err(NumericsError::ShapeMismatch {
                op: "gru_cell",
                left: sh.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (b, hd) = (sh[0], sh[1]);
        let g3 = 3 * hd;
        // cache rows: [r, z, n, a_n] per batch element
        let mut a = vec![T::zero(); b * g3];
        gemm(false, false, b, hd, g3, self.value(h).data(), self.value(wh).data(), &mut a, false);
        let (xv, hv, bv) = (self.value(xg).data(), self.value(h).data(), self.value(bh).data());
        let mut cache = vec![T::zero(); b * 4 * hd];
        let mut out = vec![T::zero(); b * hd];
        for i in 0..b {
            let ar = &a[i * g3..(i + 1) * g3];
            let xr = &xv[i * g3..(i + 1) * g3];
            let c = &mut cache[i * 4 * hd..(i + 1) * 4 * hd];
            for j in 0..hd {
                let r = sigmoid(xr[j] + ar[j] + bv[j]);
                let z = sigmoid(xr[hd + j] + ar[hd + j] + bv[hd + j]);
                let an = ar[2 * hd + j] + bv[2 * hd + j];
                let n = (xr[2 * hd + j] + r * an).tanh();
                let hp = hv[i * hd + j];
                out[i * hd + j] = n + z * (hp - n);
                c[j] = r;
                c[hd + j] = z;
                c[2 * hd + j] = n;
                c[3 * hd + j] = an;
            }
        }
        let out = Tensor::new(&[b, hd], out)?;
        let ng = self.ng(xg) || self.ng(h) || self.ng(wh) || self.ng(bh);
        self.push("gru_cell", out, Op::GruCell { xg, h, wh, bh, cache }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push("reshape", out, Op::Reshape(x), ng)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())?;
        let ng = self.ng(x);
        self.push(name, out, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("sigmoid", x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let c = *t.shape().last().ok_or(NumericsError::EmptyInput("softmax"))?;
        let mut data = t.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let ng = self.ng(x);
        self.push("softmax", out, Op::Softmax(x), ng)
    }

    /// Rows of `table` (`[V, D]`) selected by `indices`, giving `[n, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "embedding",
                left: t.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(NumericsError::BadRange { op: "embedding", start: i, end: i + 1, len: rows });
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[indices.len(), d], data)?;
        let ng = self.ng(table);
        self.push("embedding", out, Op::Embedding { table, indices: indices.to_vec() }, ng)
    }

    /// 1-D convolution. `x: [B, L, Cin]`, `w: [K, Cin, Cout]`, `b: [Cout]`,
    /// giving `[B, (L + pad_left + pad_right - K) / stride + 1, Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var, NumericsError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let mismatch = || NumericsError::ShapeMismatch {
            op: "conv1d",
            left: sx.to_vec(),
            right: sw.to_vec(),
        };
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sb != [sw[2]] || stride == 0 {
            return Err(mismatch());
        }
        let (batch, len, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let padded = len + pad_left + pad_right;
        if padded < k {
            return Err(mismatch());
        }
        let lout = (padded - k) / stride + 1;
        let xd = self.value(x).data();
        let width = k * cin;
        let mut cols = vec![T::zero(); batch * lout * width];
        for bi in 0..batch {
            for o in 0..lout {
                let row = &mut cols[(bi * lout + o) * width..(bi * lout + o + 1) * width];
                for kk in 0..k {
                    let pos = (o * stride + kk) as isize - pad_left as isize;
                    if pos >= 0 && (pos as usize) < len {
                        let src = (bi * len + pos as usize) * cin;
                        row[kk * cin..(kk + 1) * cin].copy_from_slice(&xd[src..src + cin]);
                    }
                }
            }
        }
        let mut out = vec![T::zero(); batch * lout * cout];
        gemm(false, false, batch * lout, width, cout, &cols, self.value(w).data(), &mut out, false);
        let bd = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o = *o + bv;
            }
        }
        let out = Tensor::new(&[batch, lout, cout], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push("conv1d", out, Op::Conv1d { x, w, b, stride, pad_left, cols }, ng)
    }

    /// Transposed 1-D convolution (adjoint of [`Tape::conv1d`]).
    /// `x: [B, L, Cin]`, `w: [Cin, K, Cout]`, `b: [Cout]`, giving
    /// `[B, (L - 1)·stride + K - crop_left - crop_right, Cout]`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        crop_left: usize,
        crop_right: usize,
    ) -> Result<Var, NumericsError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let mismatch = || NumericsError::ShapeMismatch {
            op: "conv_transpose1d",
            left: sx.to_vec(),
            right: sw.to_vec(),
        };
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[2] || sb != [sw[2]] || stride == 0 || sx[1] == 0 {
            return Err(mismatch());
        }
        let (batch, len, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[1], sw[2]);
        let full = (len - 1) * stride + k;
        if full < crop_left + crop_right {
            return Err(mismatch());
        }
        let lout = full - crop_left - crop_right;
        let mut z = vec![T::zero(); batch * len * k * cout];
        gemm(false, false, batch * len, cin, k * cout, self.value(x).data(), self.value(w).data(), &mut z, false);
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * lout * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bd);
        }
        for bi in 0..batch {
            for i in 0..len {
                let zrow = &z[(bi * len + i) * k * cout..(bi * len + i + 1) * k * cout];
                for kk in 0..k {
                    let pos = (i * stride + kk) as isize - crop_left as isize;
                    if pos < 0 || pos as usize >= lout {
                        continue;
                    }
                    let dst = &mut out[(bi * lout + pos as usize) * cout..(bi * lout + pos as usize + 1) * cout];
                    for (d, &s) in dst.iter_mut().zip(&zrow[kk * cout..(kk + 1) * cout]) {
                        *d = *d + s;
                    }
                }
            }
        }
        let out = Tensor::new(&[batch, lout, cout], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push("conv_transpose1d", out, Op::ConvTranspose1d { x, w, b, stride, crop_left }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NumericsError::EmptyInput("mean"));
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64(t.len() as f64);
        let ng = self.ng(x);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::BadAxis { op: "sum_axis", axis, rank: shape.len() });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        let ng = self.ng(x);
        self.push("sum_axis", out, Op::SumAxis { input: x, axis }, ng)
    }

    /// Identity forward, zero backward.
    pub fn stopgrad(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).clone();
        self.push("stopgrad", out, Op::StopGrad, false)
    }

    /// Forward value of `quantized`, backward gradient copied to `z`
    /// unchanged (straight-through estimator). `quantized` receives nothing.
    pub fn straight_through(&mut self, z: Var, quantized: Var) -> Result<Var, NumericsError> {
        if self.shape(z) != self.shape(quantized) {
            return Err(NumericsError::ShapeMismatch {
                op: "straight_through",
                left: self.shape(z).to_vec(),
                right: self.shape(quantized).to_vec(),
            });
        }
        let out = self.value(quantized).clone();
        let ng = self.ng(z);
        self.push("straight_through", out, Op::StraightThrough(z), ng)
    }

    /// Mean binary cross-entropy of probabilities against `target`, with the
    /// probabilities clipped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var, NumericsError> {
        let p = self.value(probs);
        if p.shape() != target.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce",
                left: p.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        if p.is_empty() {
            return Err(NumericsError::EmptyInput("bce"));
        }
        let n = T::from_f64(p.len() as f64);
        let mut total = T::zero();
        for (&pv, &y) in p.data().iter().zip(target.data()) {
            let pc = clip_prob(pv);
            total = total - (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        }
        let ng = self.ng(probs);
        self.push(
            "bce",
            Tensor::scalar(total / n),
            Op::Bce { probs, target: target.data().to_vec() },
            ng,
        )
    }

    /// Mean categorical cross-entropy of `logits: [N, C]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() || targets.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = t.shape()[1];
        let mut probs = t.data().to_vec();
        let mut total = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            if y >= c {
                return Err(NumericsError::BadRange { op: "cross_entropy", start: y, end: y + 1, len: c });
            }
            softmax_in_place(row);
            total = total - row[y].max(T::min_positive_value()).ln();
        }
        let loss = total / T::from_f64(targets.len() as f64);
        let ng = self.ng(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        )
    }

    /// Backward pass keeping only leaf gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        self.run_backward(loss, false)
    }

    /// Backward pass keeping the gradient of every node.
    pub fn backward_retain_all(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        self.run_backward(loss, true)
    }

    fn run_backward(&self, loss: Var, retain: bool) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backward_node(node, &g, &mut grads);
            }
            let keep = retain || matches!(node.op, Op::Leaf | Op::Param);
            if keep {
                grads[i] = Some(g);
            }
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|v| v.0 <= loss.0).map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()))
                .data_mut(),
        )
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(false, true, m, n, k, gd, bv, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(true, false, k, m, n, av, gd, gb, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &d) in ga.iter_mut().zip(gd) {
                        *x = *x + d;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let bl = gb.len();
                    for (i, &d) in gd.iter().enumerate() {
                        gb[i % bl] = gb[i % bl] + sign * d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bl = bv.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x = *x + gd[i] * bv[i % bl];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &d) in gd.iter().enumerate() {
                        gb[i % bl] = gb[i % bl] + d * av[i];
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (v, &d) in gx.iter_mut().zip(gd) {
                        *v = *v + *s * d;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = axis_split(self.shape(*input), *axis);
                let width = node.value.shape()[*axis] * inner;
                if let Some(gx) = self.slot(grads, *input) {
                    for o in 0..outer {
                        let off = o * len * inner + start * inner;
                        for (d, &s) in gx[off..off + width].iter_mut().zip(&gd[o * width..(o + 1) * width]) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Select { input, axis, index } => {
                let (outer, len, inner) = axis_split(self.shape(*input), *axis);
                if let Some(gx) = self.slot(grads, *input) {
                    for o in 0..outer {
                        let off = (o * len + index) * inner;
                        for (d, &s) in gx[off..off + inner].iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Stack { inputs, axis } => {
                let n = inputs.len();
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                for (k, &v) in inputs.iter().enumerate() {
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &gd[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, &s) in gv[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
            Op::GruCell { xg, h, wh, bh, cache } => {
                let (b, hd) = (self.shape(*h)[0], self.shape(*h)[1]);
                let g3 = 3 * hd;
                let hv = self.value(*h).data();
                // gradient w.r.t. the gate pre-activations, input side and hidden side
                let mut dx = vec![T::zero(); b * g3];
                let mut da = vec![T::zero(); b * g3];
                let mut dh = vec![T::zero(); b * hd];
                for i in 0..b {
                    let c = &cache[i * 4 * hd..(i + 1) * 4 * hd];
                    for j in 0..hd {
                        let (r, z, n, an) = (c[j], c[hd + j], c[2 * hd + j], c[3 * hd + j]);
                        let g = gd[i * hd + j];
                        let hp = hv[i * hd + j];
                        dh[i * hd + j] = g * z;
                        let dn = g * (T::one() - z) * (T::one() - n * n);
                        let dz = g * (hp - n) * z * (T::one() - z);
                        let dr = dn * an * r * (T::one() - r);
                        dx[i * g3 + j] = dr;
                        dx[i * g3 + hd + j] = dz;
                        dx[i * g3 + 2 * hd + j] = dn;
                        da[i * g3 + j] = dr;
                        da[i * g3 + hd + j] = dz;
                        da[i * g3 + 2 * hd + j] = dn * r;
                    }
                }
                if let Some(gx) = self.slot(grads, *xg) {
                    for (d, &s) in gx.iter_mut().zip(&dx) {
                        *d = *d + s;
                    }
                }
                if let Some(gb) = self.slot(grads, *bh) {
                    for row in da.chunks(g3) {
                        for (d, &s) in gb.iter_mut().zip(row) {
                            *d = *d + s;
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *wh) {
                    gemm(true, false, hd, b, g3, hv, &da, gw, true);
                }
                if self.ng(*h) {
                    gemm(false, true, b, g3, hd, &da, self.value(*wh).data(), &mut dh, true);
                    let gh = self.slot(grads, *h).expect("needs grad");
                    for (d, &s) in gh.iter_mut().zip(&dh) {
                        *d = *d + s;
                    }
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (v, &d) in gx.iter_mut().zip(gd) {
                        *v = *v + d;
                    }
                }
            }
            Op::Sigmoid(x) => self.elementwise(grads, *x, |i, _| gd[i] * y[i] * (T::one() - y[i])),
            Op::Tanh(x) => self.elementwise(grads, *x, |i, _| gd[i] * (T::one() - y[i] * y[i])),
            Op::Relu(x) => self.elementwise(grads, *x, |i, xv| if xv > T::zero() { gd[i] } else { T::zero() }),
            Op::Exp(x) => self.elementwise(grads, *x, |i, _| gd[i] * y[i]),
            Op::Log(x) => self.elementwise(grads, *x, |i, xv| gd[i] / xv),
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap_or(&1);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] = gxr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] = gt[i * d + j] + gd[r * d + j];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, stride, pad_left, cols } => {
                let sx = self.shape(*x);
                let (batch, len, cin) = (sx[0], sx[1], sx[2]);
                let sw = self.shape(*w);
                let (k, cout) = (sw[0], sw[2]);
                let lout = node.value.shape()[1];
                let width = k * cin;
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(true, false, width, batch * lout, cout, cols, gd, gw, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in gd.chunks(cout) {
                        for (a, &d) in gb.iter_mut().zip(row) {
                            *a = *a + d;
                        }
                    }
                }
                if self.ng(*x) {
                    let mut gcols = vec![T::zero(); batch * lout * width];
                    gemm(false, true, batch * lout, cout, width, gd, self.value(*w).data(), &mut gcols, false);
                    let gx = self.slot(grads, *x).expect("needs grad");
                    for bi in 0..batch {
                        for o in 0..lout {
                            let row = &gcols[(bi * lout + o) * width..(bi * lout + o + 1) * width];
                            for kk in 0..k {
                                let pos = (o * stride + kk) as isize - *pad_left as isize;
                                if pos >= 0 && (pos as usize) < len {
                                    let dst = (bi * len + pos as usize) * cin;
                                    for c in 0..cin {
                                        gx[dst + c] = gx[dst + c] + row[kk * cin + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ConvTranspose1d { x, w, b, stride, crop_left } => {
                let sx = self.shape(*x);
                let (batch, len, cin) = (sx[0], sx[1], sx[2]);
                let sw = self.shape(*w);
                let (k, cout) = (sw[1], sw[2]);
                let lout = node.value.shape()[1];
                let mut gz = vec![T::zero(); batch * len * k * cout];
                for bi in 0..batch {
                    for i in 0..len {
                        let zrow = &mut gz[(bi * len + i) * k * cout..(bi * len + i + 1) * k * cout];
                        for kk in 0..k {
                            let pos = (i * stride + kk) as isize - *crop_left as isize;
                            if pos < 0 || pos as usize >= lout {
                                continue;
                            }
                            let src = (bi * lout + pos as usize) * cout;
                            zrow[kk * cout..(kk + 1) * cout].copy_from_slice(&gd[src..src + cout]);
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(false, true, batch * len, k * cout, cin, &gz, self.value(*w).data(), gx, true);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(true, false, cin, batch * len, k * cout, self.value(*x).data(), &gz, gw, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in gd.chunks(cout) {
                        for (a, &d) in gb.iter_mut().zip(row) {
                            *a = *a + d;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let d = gd[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v = *v + d);
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len() as f64);
                let d = gd[0] / n;
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v = *v + d);
                }
            }
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*input), *axis);
                if let Some(gx) = self.slot(grads, *input) {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[base + i] = gx[base + i] + gd[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Bce { probs, target } => {
                let pv = self.value(*probs).data();
                let n = T::from_f64(pv.len() as f64);
                let d = gd[0] / n;
                if let Some(gp) = self.slot(grads, *probs) {
                    for ((gv, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                        let pc = clip_prob(p);
                        *gv = *gv - d * (t / pc - (T::one() - t) / (T::one() - pc));
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let d = gd[0] / T::from_f64(targets.len() as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] = gl[r * c + j] + d * (probs[r * c + j] - ind);
                        }
                    }
                }
            }
        }
    }

    fn elementwise(&self, grads: &mut [Option<Tensor<T>>], x: Var, f: impl Fn(usize, T) -> T) {
        let xv = self.value(x).data();
        if let Some(gx) = self.slot(grads, x) {
            for (i, v) in gx.iter_mut().enumerate() {
                *v = *v + f(i, xv[i]);
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn clip_prob<T: Scalar>(p: T) -> T {
    let eps = T::from_f64(1e-7);
    p.max(eps).min(T::one() - eps)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
