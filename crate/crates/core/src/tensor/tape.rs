use std::collections::HashMap;

use super::{invalid, ParamId, ParamStore, Tensor, TensorError};
use crate::scalar::gemm;
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared: bool },
    Add { a: Var, b: Var },
    AddBcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Sum { a: Var },
    Mse { a: Var, b: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Transpose { a: Var, ax1: usize, ax2: usize },
    Reshape { a: Var },
    IndexSelect { a: Var, index: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass; [`Tape::backward`] replays them in
/// reverse. A tape is single-threaded; build one per pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// `(parameter, gradient)` for every parameter used in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params.iter().filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let three = T::of(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let du = c * (one + three * k * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Enables or disables the per-op finiteness check.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.param_vars.retain(|_, v| v.0 < mark);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter; repeated calls in one pass return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `a [.., m, k] @ b`, where `b` is `[k, n]` (shared) or `[.., k, n]`
    /// with the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared {
                gemm(batch * m, k, n, T::one(), av, false, bv, false, T::zero(), &mut out);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        T::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b, batch, m, k, n, shared }, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, data)?, Op::Add { a, b }, rg, "add")
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_bcast", sa, sb));
        }
        let inner = self.value(b).numel();
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(inner.max(1))
            .flat_map(|c| c.iter().zip(bv).map(|(x, y)| *x + *y))
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, data)?, Op::AddBcast { a, b }, rg, "add_bcast")
    }

    /// Adds a `[count, d]` table to `[.., count, d]` tokens.
    pub fn embedding_add(&mut self, tokens: Var, table: Var) -> Result<Var, TensorError> {
        let (st, se) = (self.shape(tokens), self.shape(table));
        if se.len() != 2 || st.len() < 2 || st[st.len() - 2..] != *se {
            return Err(shape_err("embedding_add", st, se));
        }
        self.add_bcast(tokens, table)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, data)?, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let s = T::of(s);
        let data = self.value(a).data().iter().map(|x| *x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, data)?, Op::Scale { a, s }, rg, "scale")
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg, "sum")
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("mse_loss", self.shape(pred), self.shape(target)));
        }
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(invalid("mse_loss", "empty input"));
        }
        let s: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mse { a: pred, b: target }, rg, "mse_loss")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i]) {
                return Err(shape_err("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::new(&shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, rg, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, data)?, Op::Slice { a, axis, start }, rg, "slice")
    }

    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if ax1 >= s.len() || ax2 >= s.len() {
            return Err(invalid("transpose", format!("axes ({ax1}, {ax2}) for {s:?}")));
        }
        let data = permute_axes(self.value(a).data(), &s, ax1, ax2);
        let mut shape = s;
        shape.swap(ax1, ax2);
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, data)?, Op::Transpose { a, ax1, ax2 }, rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape { a }, rg, "reshape")
    }

    /// Gathers slices along axis 0 (repetition allowed).
    pub fn index_select(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(invalid("index_select", "scalar input"));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            if i >= s[0] {
                return Err(invalid("index_select", format!("index {i} >= {}", s[0])));
            }
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = index.len();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, data)?, Op::IndexSelect { a, index: index.to_vec() }, rg, "index_select")
    }

    /// Channels-last 1-D convolution: `x [B, L, Cin]`, `w [K, Cin, Cout]`,
    /// optional bias `[Cout]`, output `[B, Lout, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || stride == 0 {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
        let (kw, cout) = (sw[0], sw[2]);
        if len + 2 * pad < kw {
            return Err(invalid("conv1d", format!("input length {len} + padding shorter than kernel {kw}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv1d bias", self.shape(b), &[cout]));
            }
        }
        let lout = (len + 2 * pad - kw) / stride + 1;
        let col = im2col(self.value(x).data(), bsz, len, cin, kw, stride, pad, lout);
        let mut out = vec![T::zero(); bsz * lout * cout];
        gemm(bsz * lout, kw * cin, cout, T::one(), &col, false, self.value(w).data(), false, T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += *bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[bsz, lout, cout], out)?, Op::Conv1d { x, w, b, stride, pad }, rg, "conv1d")
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last axis of `[.., r, r]` with entries above the
    /// diagonal excluded.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        let c = *s.last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let r = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
        if causal && r != c {
            return Err(invalid("causal_softmax", format!("needs square trailing dims, got {s:?}")));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (ri, (row, o)) in src.chunks(c.max(1)).zip(out.chunks_mut(c.max(1))).enumerate() {
            let valid = if causal { ri % r + 1 } else { c };
            let mx = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..valid {
                let e = (row[j] - mx).exp();
                o[j] = e;
                z += e;
            }
            for v in &mut o[..valid] {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&s, out)?, Op::Softmax { a }, rg, "softmax")
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// `gain * x + bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &s, self.shape(gain)));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let src = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Tensor::new(&s, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.value(a).data().iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, data)?, Op::Gelu { a }, rg, "gelu")
    }

    /// Resamples `[N, d]` rows to `[M, d]` at `M` equally spaced positions
    /// over `[0, N-1]`; differentiable in the table.
    pub fn linear_interpolate_rows(&mut self, table: Var, m: usize) -> Result<Var, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(invalid("linear_interpolate_rows", format!("expected [N, d], got {s:?}")));
        }
        let n = s[0];
        if n == 0 {
            return Err(invalid("linear_interpolate_rows", "empty table"));
        }
        if m == 0 {
            return Err(invalid("linear_interpolate_rows", "target count must be >= 1"));
        }
        let weights = interpolation_matrix::<T>(n, m);
        let w = self.constant(weights);
        self.matmul(w, table)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor { shape: self.shape(v).to_vec(), data: g });
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b, batch, m, k, n, shared } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    if *shared {
                        gemm(batch * m, n, k, T::one(), gd, false, bv, true, T::zero(), &mut da);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                &gd[bi * m * n..(bi + 1) * m * n],
                                false,
                                &bv[bi * k * n..(bi + 1) * k * n],
                                true,
                                T::zero(),
                                &mut da[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let mut db;
                    if *shared {
                        db = vec![T::zero(); k * n];
                        gemm(k, batch * m, n, T::one(), av, true, gd, false, T::zero(), &mut db);
                    } else {
                        db = vec![T::zero(); batch * k * n];
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &av[bi * m * k..(bi + 1) * m * k],
                                true,
                                &gd[bi * m * n..(bi + 1) * m * n],
                                false,
                                T::zero(),
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::AddBcast { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.rg(*b) {
                    let inner = self.value(*b).numel().max(1);
                    let mut db = vec![T::zero(); inner];
                    for c in gd.chunks(inner) {
                        for (d, v) in db.iter_mut().zip(c) {
                            *d += *v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| *g * *y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, x)| *g * *x).collect());
                }
            }
            Op::Scale { a, s } => {
                self.accumulate(grads, *a, gd.iter().map(|g| *g * *s).collect());
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = gd[0] * T::of(2.0 / av.len() as f64);
                let diff: Vec<T> = av.iter().zip(bv).map(|(x, y)| (*x - *y) * c).collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, diff.iter().map(|v| -*v).collect());
                }
                self.accumulate(grads, *a, diff);
            }
            Op::Concat { parts, axis } => {
                let s = g.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.rg(*p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut da = vec![T::zero(); self.value(*a).numel()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    da[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Transpose { a, ax1, ax2 } => {
                let da = permute_axes(gd, g.shape(), *ax1, *ax2);
                self.accumulate(grads, *a, da);
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::IndexSelect { a, index } => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                let mut da = vec![T::zero(); self.value(*a).numel()];
                for (row, &src) in index.iter().enumerate() {
                    for j in 0..inner {
                        da[src * inner + j] += gd[row * inner + j];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
                let (kw, cout) = (sw[0], sw[2]);
                let lout = g.shape()[1];
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); cout];
                        for row in gd.chunks(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += *v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
                if self.rg(*w) {
                    let col = im2col(self.value(*x).data(), bsz, len, cin, kw, *stride, *pad, lout);
                    let mut dw = vec![T::zero(); kw * cin * cout];
                    gemm(kw * cin, bsz * lout, cout, T::one(), &col, true, gd, false, T::zero(), &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*x) {
                    let mut dcol = vec![T::zero(); bsz * lout * kw * cin];
                    gemm(bsz * lout, cout, kw * cin, T::one(), gd, false, self.value(*w).data(), true, T::zero(), &mut dcol);
                    let mut dx = vec![T::zero(); bsz * len * cin];
                    for bi in 0..bsz {
                        for o in 0..lout {
                            for j in 0..kw {
                                let pos = (o * stride + j) as isize - *pad as isize;
                                if pos < 0 || pos as usize >= len {
                                    continue;
                                }
                                let src = ((bi * lout + o) * kw + j) * cin;
                                let dst = (bi * len + pos as usize) * cin;
                                for c in 0..cin {
                                    dx[dst + c] += dcol[src + c];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data();
                let c = *g.shape().last().unwrap_or(&1);
                let mut da = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(gd.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *g.shape().last().unwrap_or(&1);
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.rg(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, ((gr, hr), dr)) in gd.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] = rstd[r] * (dh - s1 / dn - hr[j] * s2 / dn);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, av.iter().zip(gd).map(|(x, g)| gelu_parts(*x).1 * *g).collect());
            }
        }
        Ok(())
    }
}

/// `[M, N]` matrix whose rows hold linear interpolation weights.
pub(crate) fn interpolation_matrix<T: Scalar>(n: usize, m: usize) -> Tensor<T> {
    let mut w = vec![T::zero(); m * n];
    for j in 0..m {
        let pos = if m == 1 { 0.0 } else { j as f64 * (n - 1) as f64 / (m - 1) as f64 };
        let lo = (pos.floor() as usize).min(n - 1);
        let frac = pos - lo as f64;
        if lo + 1 < n && frac > 0.0 {
            w[j * n + lo] = T::of(1.0 - frac);
            w[j * n + lo + 1] = T::of(frac);
        } else {
            w[j * n + lo] = T::one();
        }
    }
    Tensor { shape: vec![m, n], data: w }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    bsz: usize,
    len: usize,
    cin: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<T> {
    let mut col = vec![T::zero(); bsz * lout * kw * cin];
    for bi in 0..bsz {
        for o in 0..lout {
            for j in 0..kw {
                let pos = (o * stride + j) as isize - pad as isize;
                if pos < 0 || pos as usize >= len {
                    continue;
                }
                let dst = ((bi * lout + o) * kw + j) * cin;
                let src = (bi * len + pos as usize) * cin;
                col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
    col
}

/// Swaps two axes of a row-major buffer.
fn permute_axes<T: Scalar>(src: &[T], shape: &[usize], ax1: usize, ax2: usize) -> Vec<T> {
    if ax1 == ax2 {
        return src.to_vec();
    }
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax1, ax2);
    let mut strides = in_strides.clone();
    strides.swap(ax1, ax2);
    // Copy contiguous runs of the last axis when it is untouched.
    let last_untouched = ax1 != nd - 1 && ax2 != nd - 1;
    let run = if last_untouched { shape[nd - 1] } else { 1 };
    let outer_dims = if last_untouched { nd - 1 } else { nd };
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; outer_dims];
    let total: usize = out_shape[..outer_dims].iter().product();
    for _ in 0..total {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&src[off..off + run]);
        for d in (0..outer_dims).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 5]));
        let s = t.softmax_rows(a).unwrap();
        for v in t.value(s).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_causal_mask_is_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::<f64>::new();
        let a = t.constant(randn(&[3, 4, 4], &mut rng).reshaped(&[3, 4, 4]).unwrap());
        let s = t.causal_softmax(a).unwrap();
        let v = t.value(s);
        for r in 0..12 {
            let row = v.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &x) in row.iter().enumerate() {
                if j > r % 4 {
                    assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        let x = t.constant(randn(&[5, 16], &mut rng));
        let g = t.constant(Tensor::full(&[16], 1.0));
        let b = t.constant(Tensor::zeros(&[16]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        for r in 0..5 {
            let row = t.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::<f64>::new();
        let x = t.constant(randn(&[2, 7, 1], &mut rng));
        let w = t.constant(Tensor::full(&[1, 1, 1], 1.0));
        let y = t.conv1d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = randn(&[2, 9, 3], &mut rng);
        let ws = randn(&[5, 3, 4], &mut rng);
        let mut t = Tape::<f64>::new();
        let x = t.constant(xs.clone());
        let w = t.constant(ws.clone());
        let y = t.conv1d(x, w, None, 2, 2).unwrap();
        assert_eq!(t.shape(y), &[2, 5, 4]);
        for b in 0..2 {
            for o in 0..5 {
                for co in 0..4 {
                    let mut s = 0.0;
                    for j in 0..5 {
                        let p = (o * 2 + j) as isize - 2;
                        if p < 0 || p >= 9 {
                            continue;
                        }
                        for ci in 0..3 {
                            s += xs.data()[(b * 9 + p as usize) * 3 + ci] * ws.data()[(j * 3 + ci) * 4 + co];
                        }
                    }
                    assert!((t.value(y).data()[(b * 5 + o) * 4 + co] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn interpolation_endpoints_and_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = randn(&[8, 3], &mut rng);
        let mut t = Tape::<f64>::new();
        let v = t.constant(table.clone());
        let two = t.linear_interpolate_rows(v, 2).unwrap();
        assert_eq!(t.value(two).row(0), table.row(0));
        assert_eq!(t.value(two).row(1), table.row(7));

        let small = randn(&[3, 2], &mut rng);
        let v = t.constant(small.clone());
        let five = t.linear_interpolate_rows(v, 5).unwrap();
        assert_eq!(t.value(five).row(2), small.row(1));
    }

    #[test]
    fn interpolation_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n, m) in [(8, 2), (8, 3), (5, 11), (1, 4), (7, 7)] {
            let table = randn(&[n, 4], &mut rng);
            let mut t = Tape::<f64>::new();
            let v = t.constant(table.clone());
            let out = t.linear_interpolate_rows(v, m).unwrap();
            for j in 0..m {
                let pos = if m == 1 { 0.0 } else { j as f64 * (n - 1) as f64 / (m - 1) as f64 };
                for c in 0..4 {
                    // scalar piecewise-linear evaluation per column
                    let col: Vec<f64> = (0..n).map(|r| table.data()[r * 4 + c]).collect();
                    let i = (pos as usize).min(n.saturating_sub(2));
                    let expect = if n == 1 { col[0] } else { col[i] + (col[i + 1] - col[i]) * (pos - i as f64) };
                    assert!((t.value(out).data()[j * 4 + c] - expect).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn empty_table_is_an_error() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::zeros(&[0, 3]));
        assert!(t.linear_interpolate_rows(v, 2).is_err());
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 5]"));
    }

    #[test]
    fn transpose_round_trip_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&[2, 3, 4, 5], &mut rng);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        let y = t.transpose(v, 1, 2).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 3, 5]);
        let yv = t.value(y).data();
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for d in 0..5 {
                        assert_eq!(yv[((a * 4 + c) * 3 + b) * 5 + d], x.data()[((a * 3 + b) * 4 + c) * 5 + d]);
                    }
                }
            }
        }
        let z = t.transpose(y, 1, 3).unwrap();
        assert_eq!(t.shape(z), &[2, 5, 3, 4]);
        let back = t.transpose(z, 1, 3).unwrap();
        assert_eq!(t.value(back), t.value(y));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut t = Tape::<f64>::new().with_finite_check(true);
        let a = t.constant(Tensor::full(&[2], f64::MAX));
        assert!(matches!(t.scale(a, 10.0), Err(TensorError::NonFinite("scale"))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(a), Err(TensorError::Contract(_))));
    }
}
