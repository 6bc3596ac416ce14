use std::collections::BTreeMap;

use super::scalar::gemm;
use super::{GradError, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    Ln { x: Var, floor: Option<T> },
    SoftmaxRows { x: Var, temp: T },
    L2NormRows(Var),
    Gather { table: Var, idx: Vec<usize> },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Transpose(Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    SoftmaxXent { logits: Var, target: Vec<T>, probs: Vec<T> },
}

/// One recorded value. `grad` is only populated on leaves that require grad.
#[derive(Debug, Clone)]
pub struct Node<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Append-only computation record. Node indices are a topological order, so
/// backward walks them in reverse and always accumulates in the same order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    names: BTreeMap<String, Var>,
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> GradError {
    GradError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), names: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a named leaf. A second call with the same name returns the
    /// existing node, so a parameter used twice accumulates into one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.names.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.names.insert(name.to_string(), v);
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Accumulated gradients of every named trainable leaf.
    pub fn named_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.names
            .iter()
            .filter_map(|(k, v)| self.nodes[v.0].grad.as_ref().map(|g| (k.clone(), g.clone())))
            .collect()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, T::zero());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[B,n,k] x [B,k,m]`, or `[B,n,k] x [B,m,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (bs, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bs * n * m];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                n,
                k,
                m,
                &av[i * n * k..],
                false,
                &bv[i * k * m..],
                trans_b,
                &mut out[i * n * m..],
                T::zero(),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, n, m], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, GradError> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", &s, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| s[x]).collect();
        let out = permute_data(self.value(a).data(), &s, axes);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x: a, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    /// Right operand must match the left shape or be a suffix of it.
    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<usize, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(self.value(b).numel())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, GradError> {
        let bn = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b).data());
        let out: Vec<T> = av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % bn])).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.broadcast("div", a, b)?;
        if self.value(b).data().iter().any(|v| *v == T::zero()) {
            return Err(GradError::Domain { op: "div", msg: "division by zero".into() });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, GradError> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * s).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, GradError> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, op, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        let v = self.unary(a, |x| x.exp(), Op::Exp(a))?;
        if !self.value(v).is_finite() {
            return Err(GradError::Domain { op: "exp", msg: "overflow".into() });
        }
        Ok(v)
    }

    /// Natural log; any non-positive input is a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var, GradError> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= T::zero() || v.is_nan()) {
            return Err(GradError::Domain { op: "ln", msg: format!("non-positive input {:?}", bad) });
        }
        self.unary(a, |x| x.ln(), Op::Ln { x: a, floor: None })
    }

    /// `ln(max(x, floor))`; the gradient is zero wherever the floor is active.
    pub fn ln_floor(&mut self, a: Var, floor: T) -> Result<Var, GradError> {
        if floor <= T::zero() {
            return Err(GradError::Domain { op: "ln_floor", msg: "floor must be positive".into() });
        }
        self.unary(a, |x| x.max(floor).ln(), Op::Ln { x: a, floor: Some(floor) })
    }

    // ---- row-wise ops over the last axis ---------------------------------

    /// Softmax over the last axis of `x / temp`, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var, temp: T) -> Result<Var, GradError> {
        if temp <= T::zero() {
            return Err(GradError::Domain { op: "softmax_rows", msg: "temperature must be positive".into() });
        }
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row, temp);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows { x: a, temp }, rg))
    }

    /// Unit-norm rows; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::L2NormRows(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, GradError> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", t.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / d;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        let dn = T::c(d as f64);
        for row in t.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against constant target
    /// distributions of the same shape.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var, GradError> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape() != target.shape() {
            return Err(shape_err("softmax_cross_entropy", t.shape(), target.shape()));
        }
        let k = t.shape()[1];
        let n = t.shape()[0];
        let mut probs = t.data().to_vec();
        let mut loss = T::zero();
        for (row, tr) in probs.chunks_mut(k).zip(target.data().chunks(k)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
            for (z, &y) in row.iter_mut().zip(tr) {
                loss -= y * (*z - lse);
                *z = (*z - lse).exp();
            }
        }
        loss /= T::c(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, target: target.data().to_vec(), probs },
            rg,
        ))
    }

    // ---- gathers and reductions -------------------------------------------

    /// Row gather from a 2-D table: `out[i] = table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var, GradError> {
        let t = self.value(table);
        if t.rank() != 2 || idx.is_empty() {
            return Err(shape_err("gather", t.shape(), &[idx.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(GradError::Domain { op: "gather", msg: format!("index {bad} out of {rows} rows") });
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather { table, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", &s, &[axis]));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x: a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let len = *self.shape(a).get(axis).ok_or_else(|| shape_err("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::c(len as f64))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, GradError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err("narrow", &s, &[axis, start, len]));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x: a, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, GradError> {
        let first = self.shape(*xs.first().ok_or(GradError::Invalid("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let v = self.value(x).data();
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    // ---- convolution ------------------------------------------------------

    /// Stride-1 2-D convolution. `x: [B,C,H,W]`, `w: [O,C,K,K]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, GradError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || self.shape(b) != [sw[0]] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geo = ConvGeom::new(&sx, &sw, pad).ok_or_else(|| shape_err("conv2d", &sx, &sw))?;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); geo.b * geo.o * geo.hw_out()];
        let mut cols = vec![T::zero(); geo.ckk() * geo.hw_out()];
        for bi in 0..geo.b {
            geo.im2col(&xv[bi * geo.chw_in()..(bi + 1) * geo.chw_in()], &mut cols);
            let dst = &mut out[bi * geo.o * geo.hw_out()..(bi + 1) * geo.o * geo.hw_out()];
            for (o, chunk) in dst.chunks_mut(geo.hw_out()).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[o]);
            }
            gemm(geo.o, geo.ckk(), geo.hw_out(), wv, false, &cols, false, dst, T::one());
        }
        let shape = vec![geo.b, geo.o, geo.ho, geo.wo];
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// 2x2 max pooling with stride 2 on `[B,C,H,W]` (H and W even).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, GradError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(shape_err("max_pool2", &s, &[2, 2]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![s[0], s[1], ho, wo], out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`]. Returns the named-parameter gradient map.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>, GradError> {
        if self.value(loss).numel() != 1 {
            return Err(GradError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (v, contrib) in self.local_grads(i, &g) {
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(self.named_grads())
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v).data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut ga, T::zero());
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut gb, T::zero());
                    out.push((*b, gb));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, n, k) = (sa[0], sa[1], sa[2]);
                let m = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); bs * n * k];
                    for i in 0..bs {
                        // dA = dC · B^T  (B stored k×m) or dC · B (B stored m×k)
                        gemm(n, m, k, &g[i * n * m..], false, &bv[i * k * m..], !trans_b, &mut ga[i * n * k..], T::zero());
                    }
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); bs * k * m];
                    for i in 0..bs {
                        if *trans_b {
                            // B is m×k: dB = dC^T · A
                            gemm(m, n, k, &g[i * n * m..], true, &av[i * n * k..], false, &mut gb[i * k * m..], T::zero());
                        } else {
                            gemm(k, n, m, &av[i * n * k..], true, &g[i * n * m..], false, &mut gb[i * k * m..], T::zero());
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    let bn = self.value(*b).numel();
                    let mut gb = vec![T::zero(); bn];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % bn] += sign * gi;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bn = bv.len();
                if self.rg(*a) {
                    out.push((*a, g.iter().enumerate().map(|(i, &gi)| gi * bv[i % bn]).collect()));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); bn];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % bn] += gi * av[i];
                    }
                    out.push((*b, gb));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bn = bv.len();
                if self.rg(*a) {
                    out.push((*a, g.iter().enumerate().map(|(i, &gi)| gi / bv[i % bn]).collect()));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); bn];
                    for (i, &gi) in g.iter().enumerate() {
                        let d = bv[i % bn];
                        gb[i % bn] -= gi * av[i] / (d * d);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|&gi| gi * *s).collect())),
            Op::Relu(a) => {
                let av = val(*a);
                out.push((*a, g.iter().zip(av).map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() }).collect()));
            }
            Op::Exp(a) => {
                out.push((*a, g.iter().zip(node.value.data()).map(|(&gi, &y)| gi * y).collect()));
            }
            Op::Ln { x, floor } => {
                let xv = val(*x);
                let f = floor.unwrap_or(T::zero());
                out.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gi, &v)| if floor.is_some() && v <= f { T::zero() } else { gi / v })
                        .collect(),
                ));
            }
            Op::SoftmaxRows { x, temp } => {
                let d = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(node.value.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - dot) / *temp;
                    }
                }
                out.push((*x, gx));
            }
            Op::L2NormRows(x) => {
                let d = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for (((gr, yr), xr), dst) in g
                    .chunks(d)
                    .zip(node.value.data().chunks(d))
                    .zip(val(*x).chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.last_dim();
                let gv = val(*gain);
                if self.rg(*gain) {
                    let mut gg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, gg));
                }
                if self.rg(*bias) {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        add_into(&mut gb, gr);
                    }
                    out.push((*bias, gb));
                }
                if self.rg(*x) {
                    let dn = T::c(d as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, ((gr, hr), dst)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            dst[j] = rstd[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::SoftmaxXent { logits, target, probs } => {
                let k = self.shape(*logits)[1];
                let n = self.shape(*logits)[0];
                let scale = g[0] / T::c(n as f64);
                let mut gx = vec![T::zero(); probs.len()];
                for ((pr, tr), dst) in probs.chunks(k).zip(target.chunks(k)).zip(gx.chunks_mut(k)) {
                    let tsum: T = tr.iter().copied().sum();
                    for j in 0..k {
                        dst[j] = scale * (pr[j] * tsum - tr[j]);
                    }
                }
                out.push((*logits, gx));
            }
            Op::Gather { table, idx } => {
                let d = node.value.last_dim();
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (r, &ti) in idx.iter().enumerate() {
                    add_into(&mut gt[ti * d..(ti + 1) * d], &g[r * d..(r + 1) * d]);
                }
                out.push((*table, gt));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, gx));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                out.push((*a, ga));
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                out.push((*x, permute_data(g, node.value.shape(), &inv)));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.rg(x) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[s..s + len * inner]);
                        }
                        out.push((x, gx));
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let geo = ConvGeom::new(self.shape(*x), self.shape(*w), *pad).expect("validated in forward");
                let (xv, wv) = (val(*x), val(*w));
                let hw = geo.hw_out();
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); geo.o];
                    for (r, chunk) in g.chunks(hw).enumerate() {
                        gb[r % geo.o] += chunk.iter().copied().sum::<T>();
                    }
                    out.push((*b, gb));
                }
                let mut cols = vec![T::zero(); geo.ckk() * hw];
                let mut gw = vec![T::zero(); wv.len()];
                let mut gx = vec![T::zero(); if self.rg(*x) { xv.len() } else { 0 }];
                let mut dcols = vec![T::zero(); geo.ckk() * hw];
                for bi in 0..geo.b {
                    let gout = &g[bi * geo.o * hw..(bi + 1) * geo.o * hw];
                    if self.rg(*w) {
                        geo.im2col(&xv[bi * geo.chw_in()..(bi + 1) * geo.chw_in()], &mut cols);
                        gemm(geo.o, hw, geo.ckk(), gout, false, &cols, true, &mut gw, T::one());
                    }
                    if self.rg(*x) {
                        gemm(geo.ckk(), geo.o, hw, wv, true, gout, false, &mut dcols, T::zero());
                        geo.col2im(&dcols, &mut gx[bi * geo.chw_in()..(bi + 1) * geo.chw_in()]);
                    }
                }
                if self.rg(*w) {
                    out.push((*w, gw));
                }
                if self.rg(*x) {
                    out.push((*x, gx));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
                out.push((*x, gx));
            }
        }
        out.retain(|(v, _)| self.rg(*v));
        out
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T], temp: T) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - mx) / temp).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], pad: usize) -> Option<Self> {
        let (h, w, k) = (sx[2], sx[3], sw[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self { b: sx[0], c: sx[1], h, w, o: sw[0], k, pad, ho: h + 2 * pad - k + 1, wo: w + 2 * pad - k + 1 })
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn chw_in(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Source pixel for output (oi, oj) under kernel tap (ki, kj), if in bounds.
    fn src(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let i = (oi + ki).checked_sub(self.pad)?;
        let j = (oj + kj).checked_sub(self.pad)?;
        (i < self.h && j < self.w).then_some((i, j))
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let hw = self.hw_out();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oi in 0..self.ho {
                        for oj in 0..self.wo {
                            dst[oi * self.wo + oj] = match self.src(oi, oj, ki, kj) {
                                Some((i, j)) => x[(c * self.h + i) * self.w + j],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let hw = self.hw_out();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oi in 0..self.ho {
                        for oj in 0..self.wo {
                            if let Some((i, j)) = self.src(oi, oj, ki, kj) {
                                dx[(c * self.h + i) * self.w + j] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}
