//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough saved state
//! for its backward rule. Nodes are only ever appended, so the tape is in
//! topological order and a single reverse sweep visits each op once.

use super::{axis_split, gemm, numel, Tensor, WindowGeom};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Unfold { x: Var, geom: WindowGeom },
    Fold { x: Var, geom: WindowGeom },
    Sum(Var),
    Mean { x: Var, axis: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. One tape per logical thread; tapes are never shared.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are accumulated only for leaves created with
    /// `requires_grad` and for values derived from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds a `[d]` vector to every last-axis row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, &b);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut c, 0.0);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + bias` for `x: [n, in]`, `w: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    /// Batched matmul of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// read transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad =
            sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || (if trans_b { sa[2] != sb[2] } else { sa[2] != sb[1] });
        if bad {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut c = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut c[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let out = Tensor::new(vec![batch, m, n], c)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    fn check_axis(&self, op: &str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Dimension(format!("{op}: axis {axis} out of range for shape {:?}", self.shape(x))));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalises each last-axis row to zero mean and unit variance, then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let t = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permuted(axes)?;
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::Dimension("transpose needs at least 2 axes".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let t = self.value(x);
        if len == 0 || start + len > t.shape()[axis] {
            return Err(Error::Dimension(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, full, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// `[H, W, C]` -> `[L, k*k, C]` local windows.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Dimension(format!("unfold expects [H, W, C], got {s:?}")));
        }
        let geom = WindowGeom::new(s[0], s[1], s[2], kernel, stride, pad)?;
        let data = geom.unfold(self.value(x).data());
        let out = Tensor::new(vec![geom.positions(), kernel * kernel, s[2]], data)?;
        Ok(self.push(out, Op::Unfold { x, geom }, &[x]))
    }

    /// Inverse of [`unfold`](Self::unfold): window slots are summed back onto
    /// an `[H, W, C]` grid.
    pub fn fold(
        &mut self,
        x: Var,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("fold expects [L, k*k, C], got {s:?}")));
        }
        let geom = WindowGeom::new(height, width, s[2], kernel, stride, pad)?;
        if s[0] != geom.positions() || s[1] != kernel * kernel {
            return Err(Error::shape("fold", &s, &[geom.positions(), kernel * kernel, s[2]]));
        }
        let data = geom.fold(self.value(x).data());
        let out = Tensor::new(vec![height, width, s[2]], data)?;
        Ok(self.push(out, Op::Fold { x, geom }, &[x]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], row);
            }
        }
        for v in &mut data {
            *v /= len as f64;
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Mean { x, axis }, &[x]))
    }

    /// Debug op: fail if the value holds NaN or infinities.
    pub fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        self.value(x).check_finite(what)
    }

    /// Gradient of the last backward pass with respect to `v`. Populated for
    /// leaves that require grad.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this tape; call reset() first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        let Graph { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, grads, i, &g);
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, allocated zeroed on first touch. `None` when the
/// input does not take gradients.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let value = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                add_into(s, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for (d, v) in s.iter_mut().zip(g) {
                    *d -= v;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(s) = slot(nodes, grads, *a) {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(vb) {
                    *d += gv * y;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((d, gv), x) in s.iter_mut().zip(g).zip(va) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(a, k) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for (d, gv) in s.iter_mut().zip(g) {
                    *d += gv * k;
                }
            }
        }
        Op::AddRow(x, bias) => {
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, g);
            }
            if let Some(s) = slot(nodes, grads, *bias) {
                let d = s.len();
                for row in g.chunks(d) {
                    add_into(s, row);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(s) = slot(nodes, grads, *a) {
                // dA = dC · Bᵀ
                gemm(m, n, k, g, false, tb.data(), true, s, 1.0);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                // dB = Aᵀ · dC
                gemm(k, m, n, ta.data(), true, g, false, s, 1.0);
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            let n = value.shape()[2];
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..batch {
                    let gi = &g[i * sc..(i + 1) * sc];
                    let bi = &tb.data()[i * sb..(i + 1) * sb];
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, gi, false, bi, !trans_b, &mut s[i * sa..(i + 1) * sa], 1.0);
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for i in 0..batch {
                    let gi = &g[i * sc..(i + 1) * sc];
                    let ai = &ta.data()[i * sa..(i + 1) * sa];
                    let si = &mut s[i * sb..(i + 1) * sb];
                    if *trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        gemm(n, m, k, gi, true, ai, false, si, 1.0);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, si, 1.0);
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let y = value.data();
                let (outer, len, inner) = axis_split(value.shape(), *axis);
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + c;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let y = value.data();
                let (outer, len, inner) = axis_split(value.shape(), *axis);
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + c;
                        let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            s[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = *value.shape().last().expect("shape");
            let gam = nodes[gamma.0].value.data();
            if let Some(s) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let sr = &mut s[r * d..(r + 1) * d];
                    for j in 0..d {
                        sr[j] += rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        s[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                for gr in g.chunks(d) {
                    add_into(s, gr);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(s) = slot(nodes, grads, *x) {
                for ((d, gv), &v) in s.iter_mut().zip(g).zip(xv) {
                    *d += gv * gelu_grad(v);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, g);
            }
        }
        Op::Permute { x, axes } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gt = Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = gt.permuted(&inverse).expect("valid permutation");
                add_into(s, back.data());
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(value.shape(), *axis);
            let mut start = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(s) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                        add_into(&mut s[o * len * inner..(o + 1) * len * inner], src);
                    }
                }
                start += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let full_shape = nodes[x.0].value.shape();
            let (outer, full, inner) = axis_split(full_shape, *axis);
            let len = value.shape()[*axis];
            if let Some(s) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    add_into(&mut s[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Unfold { x, geom } => {
            if let Some(s) = slot(nodes, grads, *x) {
                geom.fold_into(g, s);
            }
        }
        Op::Fold { x, geom } => {
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, &geom.unfold(g));
            }
        }
        Op::Sum(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                for d in s.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { x, axis } => {
            let in_shape = nodes[x.0].value.shape();
            let (outer, len, inner) = axis_split(in_shape, *axis);
            if let Some(s) = slot(nodes, grads, *x) {
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut s[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += gv * scale;
                        }
                    }
                }
            }
        }
    }
}
