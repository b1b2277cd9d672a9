use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{gemm, permute};
use super::{invalid, mismatch, Result, Tensor, TensorError};

/// Local adjoint rule: maps the output gradient to one gradient per parent.
///
/// The second argument flags which parents actually need a gradient so rules
/// can skip work; entries for parents that do not are ignored.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Ordered record of executed operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to the tape's leaf variables.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    /// Gradient for `v`, or zeros of its shape when the loss does not reach it.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.grads
            .get(&v.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Vec::new(), None)
    }

    /// A leaf that does not.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an operation with a hand-written adjoint rule.
    ///
    /// The rule is dropped (and the output treated as a constant) when no
    /// parent requires a gradient.
    pub fn record<'t>(&'t self, value: Tensor, parents: &[Var<'t>], backward: BackwardFn) -> Var<'t> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            self.push(value, true, parents.iter().map(|p| p.id).collect(), Some(backward))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    /// Replays adjoints from `loss` back to the leaves, consuming the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(invalid("backward", "loss recorded on a different tape"));
        }
        if self.consumed.get() {
            return Err(TensorError::EmptyTape);
        }
        let (mut fns, parents, shapes, needs): (Vec<_>, Vec<_>, Vec<_>, Vec<_>) = {
            let mut nodes = self.nodes.borrow_mut();
            if nodes.is_empty() {
                return Err(TensorError::EmptyTape);
            }
            let loss_node = &nodes[loss.id];
            if loss_node.value.numel() != 1 {
                return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
            }
            if !loss_node.requires_grad {
                return Err(TensorError::EmptyTape);
            }
            let mut fns = Vec::with_capacity(loss.id + 1);
            let mut parents = Vec::with_capacity(loss.id + 1);
            let mut shapes = Vec::with_capacity(loss.id + 1);
            let mut needs = Vec::with_capacity(loss.id + 1);
            for node in nodes.iter_mut().take(loss.id + 1) {
                fns.push(node.backward.take());
                parents.push(std::mem::take(&mut node.parents));
                shapes.push(node.value.shape().to_vec());
                needs.push(node.requires_grad);
            }
            for node in nodes.iter_mut().skip(loss.id + 1) {
                node.backward = None;
            }
            (fns, parents, shapes, needs)
        };
        self.consumed.set(true);

        let mut acc: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        acc[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.id).rev() {
            let Some(g) = acc[i].take() else { continue };
            let grad = Tensor::new(shapes[i].clone(), g)?;
            match fns[i].take() {
                Some(f) => {
                    let flags: Vec<bool> = parents[i].iter().map(|&p| needs[p]).collect();
                    let pg = f(&grad, &flags)?;
                    for ((&p, g), &need) in parents[i].iter().zip(pg).zip(&flags) {
                        let (Some(g), true) = (g, need) else { continue };
                        if g.numel() != shapes[p].iter().product::<usize>() {
                            return Err(mismatch("backward", g.shape(), &shapes[p]));
                        }
                        match &mut acc[p] {
                            Some(a) => a.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(g.into_vec()),
                        }
                    }
                }
                None => {
                    if needs[i] {
                        out.grads.insert(i, grad);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Output shape for elementwise ops: equal shapes, or one shape a suffix of the other.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long.ends_with(short) {
        Ok(long.to_vec())
    } else {
        Err(mismatch(op, a, b))
    }
}

/// Sums `g` (full output size) down to `n` trailing-broadcast values.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let (xc, yc) = (x.clone(), y.clone());
        self.tape.record(
            y,
            &[self],
            Box::new(move |g, _| {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xc.data().iter().zip(yc.data()))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                Ok(vec![Some(Tensor::new(xc.shape(), d)?)])
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn reciprocal(self) -> Var<'t> {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    /// Smooth `ln(1 + e^x)`.
    pub fn softplus(self) -> Var<'t> {
        self.unary(|x| x.max(0.0) + (-x.abs()).exp().ln_1p(), |x, _| sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            |x, _| {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            },
        )
    }

    fn binary(
        self,
        op: &'static str,
        rhs: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let shape = broadcast_shape(op, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (a.numel(), b.numel());
        let out: Vec<f64> = (0..n).map(|i| f(a.data()[i % na], b.data()[i % nb])).collect();
        let y = Tensor::new(shape, out)?;
        Ok(self.tape.record(
            y,
            &[self, rhs],
            Box::new(move |g, need| {
                let (ad, bd) = (a.data(), b.data());
                let ga = if need[0] {
                    let full: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * da(ad[i % na], bd[i % nb]))
                        .collect();
                    Some(Tensor::new(a.shape(), reduce_to(&full, na))?)
                } else {
                    None
                };
                let gb = if need[1] {
                    let full: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * db(ad[i % na], bd[i % nb]))
                        .collect();
                    Some(Tensor::new(b.shape(), reduce_to(&full, nb))?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// Elementwise sum; a shape that is a trailing suffix of the other is repeated.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary("add", rhs, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary("sub", rhs, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary("mul", rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(shape.clone(), g.data()[0]))])),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        Ok(self.tape.record(
            Tensor::new(vec![m, n], c)?,
            &[self, rhs],
            Box::new(move |g, need| {
                let ga = if need[0] {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut d, false);
                    Some(Tensor::new(vec![m, k], d)?)
                } else {
                    None
                };
                let gb = if need[1] {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut d, false);
                    Some(Tensor::new(vec![k, n], d)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// Affine map over the last axis: `x W^T + b` with `W` of shape `(out, in)`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if xs.is_empty() || ws.len() != 2 || ws[1] != *xs.last().unwrap() {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (fin, fout) = (ws[1], ws[0]);
        let rows = x.numel() / fin;
        let bvals = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [fout] {
                    return Err(mismatch("linear bias", bv.shape(), &[fout]));
                }
                Some(bv)
            }
            None => None,
        };
        let mut y = vec![0.0; rows * fout];
        if let Some(bv) = &bvals {
            for row in y.chunks_exact_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(rows, fin, fout, x.data(), false, w.data(), true, &mut y, bvals.is_some());
        let mut ys = xs.clone();
        *ys.last_mut().unwrap() = fout;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.record(
            Tensor::new(ys, y)?,
            &parents,
            Box::new(move |g, need| {
                let mut out = vec![None, None, None];
                if need[0] {
                    let mut d = vec![0.0; rows * fin];
                    gemm(rows, fout, fin, g.data(), false, w.data(), false, &mut d, false);
                    out[0] = Some(Tensor::new(xs.clone(), d)?);
                }
                if need[1] {
                    let mut d = vec![0.0; fout * fin];
                    gemm(fout, rows, fin, g.data(), true, x.data(), false, &mut d, false);
                    out[1] = Some(Tensor::new(vec![fout, fin], d)?);
                }
                if need.len() > 2 && need[2] {
                    out[2] = Some(Tensor::new(vec![fout], reduce_to(g.data(), fout))?);
                }
                out.truncate(need.len());
                Ok(out)
            }),
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x.reshape(shape)?;
        Ok(self.tape.record(
            y,
            &[self],
            Box::new(move |g, _| Ok(vec![Some(g.reshape(old.clone())?)])),
        ))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let (d, s) = permute(x.data(), x.shape(), axes);
        let mut inv = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Ok(self.tape.record(
            Tensor::new(s, d)?,
            &[self],
            Box::new(move |g, _| {
                let (d, s) = permute(g.data(), g.shape(), &inv);
                Ok(vec![Some(Tensor::new(s, d)?)])
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut os = shape.clone();
        os[axis] = len;
        Ok(self.tape.record(
            Tensor::new(os, out)?,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                Ok(vec![Some(Tensor::new(shape.clone(), d)?)])
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for shape {base:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let exts: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = exts.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&exts) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut os = base.clone();
        os[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(tape.record(
            Tensor::new(os, out)?,
            parts,
            Box::new(move |g, need| {
                let mut grads: Vec<Vec<f64>> = exts.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &e) in grads.iter_mut().zip(&exts) {
                        gi.extend_from_slice(&g.data()[off..off + e * inner]);
                        off += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(need)
                    .map(|((d, s), &n)| if n { Tensor::new(s.clone(), d).map(Some) } else { Ok(None) })
                    .collect()
            }),
        ))
    }

    /// Gathers entries along `axis`: `out[.., i, ..] = x[.., index[i], ..]`.
    ///
    /// The adjoint scatter-adds, so repeated indices are allowed.
    pub fn index_select(self, axis: usize, index: Arc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid("index_select", format!("axis {axis} for shape {shape:?}")));
        }
        let ext = shape[axis];
        if let Some(&bad) = index.iter().find(|&&i| i >= ext) {
            return Err(invalid("index_select", format!("index {bad} out of range for extent {ext}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = index.len();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for &i in index.iter() {
                let b = (o * ext + i) * inner;
                out.extend_from_slice(&x.data()[b..b + inner]);
            }
        }
        let mut os = shape.clone();
        os[axis] = n;
        Ok(self.tape.record(
            Tensor::new(os, out)?,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; outer * ext * inner];
                let gd = g.data();
                for o in 0..outer {
                    for (k, &i) in index.iter().enumerate() {
                        let src = (o * n + k) * inner;
                        let dst = (o * ext + i) * inner;
                        d[dst..dst + inner].iter_mut().zip(&gd[src..src + inner]).for_each(|(a, b)| *a += b);
                    }
                }
                Ok(vec![Some(Tensor::new(shape.clone(), d)?)])
            }),
        ))
    }

    /// Routes positions along `axis` by a permutation: `out[i] = x[perm[i]]`.
    pub fn gather(self, axis: usize, perm: &Arc<Vec<usize>>) -> Result<Var<'t>> {
        check_permutation("gather", perm)?;
        self.index_select(axis, Arc::clone(perm))
    }

    /// Inverse routing of [`Var::gather`]: `out[perm[i]] = x[i]`.
    pub fn scatter(self, axis: usize, perm: &Arc<Vec<usize>>) -> Result<Var<'t>> {
        check_permutation("scatter", perm)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.index_select(axis, Arc::new(inv))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut y = x.to_vec();
        for row in y.chunks_exact_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Tensor::new(x.shape(), y)?;
        let yc = y.clone();
        Ok(self.tape.record(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; g.numel()];
                for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(g.data().chunks_exact(n)).zip(yc.data().chunks_exact(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                Ok(vec![Some(Tensor::new(yc.shape(), d)?)])
            }),
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| invalid("log_softmax", "scalar input"))?;
        let mut y = x.to_vec();
        for row in y.chunks_exact_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y = Tensor::new(x.shape(), y)?;
        let yc = y.clone();
        Ok(self.tape.record(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; g.numel()];
                for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(g.data().chunks_exact(n)).zip(yc.data().chunks_exact(n)) {
                    let gs: f64 = gr.iter().sum();
                    for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = gi - yi.exp() * gs;
                    }
                }
                Ok(vec![Some(Tensor::new(yc.shape(), d)?)])
            }),
        ))
    }

    /// Picks one entry per row of the last axis: `out[r] = x[r, index[r]]`.
    pub fn pick_last(self, index: Arc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.last().ok_or_else(|| invalid("pick_last", "scalar input"))?;
        let rows = x.numel() / n.max(1);
        if index.len() != rows {
            return Err(invalid("pick_last", format!("{} indices for {rows} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(invalid("pick_last", format!("index {bad} out of range for extent {n}")));
        }
        let out: Vec<f64> = index.iter().enumerate().map(|(r, &i)| x.data()[r * n + i]).collect();
        Ok(self.tape.record(
            Tensor::new(shape[..shape.len() - 1].to_vec(), out)?,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rows * n];
                for (r, &i) in index.iter().enumerate() {
                    d[r * n + i] = g.data()[r];
                }
                Ok(vec![Some(Tensor::new(shape.clone(), d)?)])
            }),
        ))
    }
}

fn check_permutation(op: &'static str, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(invalid(op, format!("not a permutation of 0..{}", perm.len())));
        }
    }
    Ok(())
}
