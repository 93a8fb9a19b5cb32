use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{split_axis, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Linear(usize, usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Elu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumAlong(usize, usize),
    Concat(Vec<usize>, usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Reshape(usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    Slice { src: usize, axis: usize, start: usize },
    StraightThrough(usize),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Append-only record of a forward computation.
///
/// A tape lives for one forward/backward pass and is not `Sync`; run
/// independent passes on independent tapes.
pub struct Tape<F: Real = f32> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real = f32> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.tape.value_of(self.id))
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients<F: Real = f32> {
    by_node: HashMap<usize, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `var`, or `None` if it is not a trainable leaf reached by
    /// the loss.
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.by_node.get(&var.id)
    }

    /// Like [`Gradients::get`] but returns zeros for unreached leaves.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> Tensor<F> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor<F>, trainable: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<F>, op: Op, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn check_owner(&self, v: Var<'_, F>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variables from different tapes cannot be combined"
        );
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::Dimension(format!(
                    "concat axis {axis} out of range for shape {base:?}"
                )));
            }
            let mut out_shape = base.clone();
            out_shape[axis] = 0;
            for p in parts {
                self.check_owner(*p);
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(ax, (a, b))| ax == axis || a == b);
                if !compatible {
                    return Err(Error::Dimension(format!(
                        "concat along axis {axis}: shape {s:?} does not match {base:?}"
                    )));
                }
                out_shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (Tensor::new(out_shape, data)?, rg)
        };
        Ok(self.push(
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of shared subexpressions are summed; every node is visited
    /// once, in reverse insertion order.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        self.check_owner(loss);
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![F::one()]);
        let mut out = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if node.trainable {
                        out.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let (_, n) = val(*b).dims2()?;
                    if wants(*a) {
                        let mut ga = vec![F::zero(); m * k];
                        F::gemm(m, n, k, &g, false, val(*b).data(), true, &mut ga, false);
                        accumulate(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        let mut gb = vec![F::zero(); k * n];
                        F::gemm(k, m, n, val(*a).data(), true, &g, false, &mut gb, false);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Linear(x, w, b) => {
                    let (m, k) = val(*x).dims2()?;
                    let (_, n) = val(*w).dims2()?;
                    if wants(*x) {
                        let mut gx = vec![F::zero(); m * k];
                        F::gemm(m, n, k, &g, false, val(*w).data(), true, &mut gx, false);
                        accumulate(&mut grads, *x, gx);
                    }
                    if wants(*w) {
                        let mut gw = vec![F::zero(); k * n];
                        F::gemm(k, m, n, val(*x).data(), true, &g, false, &mut gw, false);
                        accumulate(&mut grads, *w, gw);
                    }
                    if wants(*b) {
                        let mut gb = vec![F::zero(); n];
                        for row in g.chunks_exact(n) {
                            add_into(&mut gb, row);
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let out_shape = node.value.shape();
                    if wants(*a) {
                        let ga = reduce_to(&g, out_shape, val(*a).shape());
                        accumulate(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        let mut gb = reduce_to(&g, out_shape, val(*b).shape());
                        if matches!(node.op, Op::Sub(..)) {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let out_shape = node.value.shape();
                    let (ta, tb) = (val(*a), val(*b));
                    if wants(*a) {
                        let prod = broadcast_with(&g, out_shape, tb, |g, y| g * y);
                        accumulate(&mut grads, *a, reduce_to(&prod, out_shape, ta.shape()));
                    }
                    if wants(*b) {
                        let prod = broadcast_with(&g, out_shape, ta, |g, x| g * x);
                        accumulate(&mut grads, *b, reduce_to(&prod, out_shape, tb.shape()));
                    }
                }
                Op::Scale(a, c) => {
                    let c = F::lit(*c);
                    accumulate(&mut grads, *a, g.iter().map(|&v| v * c).collect());
                }
                Op::Offset(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                    accumulate(&mut grads, *a, g);
                }
                Op::Elu(a) => {
                    let x = val(*a).data();
                    let y = node.value.data();
                    let ga = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| if x > F::zero() { g } else { g * (y + F::one()) })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let two = F::lit(2.0);
                    let ga = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&g, &x)| two * x * g)
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, vec![g[0]; val(*a).len()]);
                }
                Op::Mean(a) => {
                    let n = val(*a).len();
                    accumulate(&mut grads, *a, vec![g[0] / F::lit(n as f64); n]);
                }
                Op::SumAlong(a, axis) => {
                    let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
                    let mut ga = vec![F::zero(); outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                    let total: usize = node.value.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let chunk = val(p).shape()[*axis] * inner;
                        if wants(p) {
                            let mut gp = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let s = o * total + offset;
                                gp.extend_from_slice(&g[s..s + chunk]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += chunk;
                    }
                }
                Op::Softmax(a, axis) => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let mut ga = vec![F::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: F = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] = y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a, axis) => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let mut ga = vec![F::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let gsum: F = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] = g[at(l)] - y[at(l)].exp() * gsum;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = val(*a).dims2()?;
                    let mut ga = vec![F::zero(); rows * cols];
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let (_, cols) = val(*a).dims2()?;
                    let mut ga = Vec::with_capacity(idx.len() * cols);
                    for &dst in idx.iter() {
                        ga.extend_from_slice(&g[dst * cols..(dst + 1) * cols]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Slice { src, axis, start } => {
                    let src_shape = val(*src).shape();
                    let (outer, len, inner) = split_axis(src_shape, *axis);
                    let width = node.value.shape()[*axis];
                    let mut ga = vec![F::zero(); outer * len * inner];
                    for o in 0..outer {
                        let from = (o * len + start) * inner;
                        ga[from..from + width * inner]
                            .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                    }
                    accumulate(&mut grads, *src, ga);
                }
            }
        }
        Ok(Gradients { by_node: out })
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], id: usize, g: Vec<F>) {
    match &mut grads[id] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Contiguous strides of `shape`, zeroed on axes broadcast up to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 && out[ax] != 1 { 0 } else { acc };
        acc *= shape[ax];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn visit_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if out.iter().product::<usize>() == 0 {
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank];
    let (mut o, mut ia, mut ib) = (0usize, 0usize, 0usize);
    loop {
        for t in 0..last {
            f(o + t, ia + t * la, ib + t * lb);
        }
        o += last;
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            counter[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if counter[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            counter[ax] = 0;
        }
    }
}

/// How a rank-2 operand reaches a rank-2 output shape.
#[derive(Clone, Copy, PartialEq)]
enum Fit {
    Same,
    Row,
    Column,
    Scalar,
}

fn rank2_fit(shape: &[usize], out: &[usize]) -> Option<Fit> {
    match (shape, out) {
        ([r, c], [or, oc]) if r == or && c == oc => Some(Fit::Same),
        ([1, c], [_, oc]) if c == oc => Some(Fit::Row),
        ([r, 1], [or, _]) if r == or => Some(Fit::Column),
        ([1, 1], [_, _]) => Some(Fit::Scalar),
        _ => None,
    }
}

/// Contiguous evaluation of `f(a, b)` for rank-2 operands where each is
/// full, a row, a column or a single element.
fn rank2_fast<F: Real>(
    a: &[F],
    sa: &[usize],
    b: &[F],
    sb: &[usize],
    f: &impl Fn(F, F) -> F,
) -> Option<Vec<F>> {
    let out = broadcast_shape(sa, sb)?;
    let (fa, fb) = (rank2_fit(sa, &out)?, rank2_fit(sb, &out)?);
    let (rows, cols) = (out[0], out[1]);
    let mut res = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let pick = |d: &[F], fit: Fit, c: usize| match fit {
            Fit::Same => d[r * cols + c],
            Fit::Row => d[c],
            Fit::Column => d[r],
            Fit::Scalar => d[0],
        };
        match (fa, fb) {
            (Fit::Same, Fit::Row) => res.extend(
                a[r * cols..(r + 1) * cols].iter().zip(b).map(|(&x, &y)| f(x, y)),
            ),
            (Fit::Same, Fit::Column) => {
                let y = b[r];
                res.extend(a[r * cols..(r + 1) * cols].iter().map(|&x| f(x, y)));
            }
            (Fit::Row, Fit::Same) => res.extend(
                a.iter().zip(&b[r * cols..(r + 1) * cols]).map(|(&x, &y)| f(x, y)),
            ),
            (Fit::Column, Fit::Same) => {
                let x = a[r];
                res.extend(b[r * cols..(r + 1) * cols].iter().map(|&y| f(x, y)));
            }
            _ => res.extend((0..cols).map(|c| f(pick(a, fa, c), pick(b, fb, c)))),
        }
    }
    Some(res)
}

/// Elementwise `f(g, other)` with `other` broadcast up to `out_shape`.
fn broadcast_with<F: Real>(
    g: &[F],
    out_shape: &[usize],
    other: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Vec<F> {
    if other.shape() == out_shape {
        return g.iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    }
    if let Some(d) = rank2_fast(g, out_shape, other.data(), other.shape(), &f) {
        return d;
    }
    let so = broadcast_strides(other.shape(), out_shape);
    let unit = broadcast_strides(out_shape, out_shape);
    let mut res = vec![F::zero(); g.len()];
    let od = other.data();
    visit_broadcast(out_shape, &unit, &so, |o, _, j| res[o] = f(g[o], od[j]));
    res
}

/// Sums `g` (shaped `out_shape`) down to `target` by reducing broadcast axes.
fn reduce_to<F: Real>(g: &[F], out_shape: &[usize], target: &[usize]) -> Vec<F> {
    if out_shape == target {
        return g.to_vec();
    }
    if let (Some(fit), [rows, cols]) = (rank2_fit(target, out_shape), out_shape) {
        let (rows, cols) = (*rows, *cols);
        match fit {
            Fit::Row => {
                let mut res = vec![F::zero(); cols];
                for row in g.chunks_exact(cols) {
                    add_into(&mut res, row);
                }
                return res;
            }
            Fit::Column => {
                return g.chunks_exact(cols).map(|row| row.iter().copied().sum()).collect();
            }
            Fit::Scalar => return vec![g[..rows * cols].iter().copied().sum()],
            Fit::Same => {}
        }
    }
    let st = broadcast_strides(target, out_shape);
    let unit = broadcast_strides(out_shape, out_shape);
    let mut res = vec![F::zero(); target.iter().product()];
    visit_broadcast(out_shape, &unit, &st, |o, _, j| res[j] += g[o]);
    res
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<F> {
        self.tape.value_of(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.tape.value_of(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> F {
        let v = self.tape.value_of(self.id);
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", v.shape());
        v.data()[0]
    }

    fn unary(&self, op: Op, value: Tensor<F>) -> Var<'t, F> {
        self.tape.push(value, op, self.tape.needs_grad(self.id))
    }

    fn map(&self, op: Op, f: impl Fn(F) -> F) -> Var<'t, F> {
        let value = {
            let v = self.tape.value_of(self.id);
            Tensor {
                shape: v.shape().to_vec(),
                data: v.data().iter().map(|&x| f(x)).collect(),
            }
        };
        self.unary(op, value)
    }

    pub fn matmul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.tape.check_owner(other);
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let dims = (a.dims2(), b.dims2());
            let ((m, k), (k2, n)) = match dims {
                (Ok(x), Ok(y)) if x.1 == y.0 => (x, y),
                _ => {
                    return Err(Error::Dimension(format!(
                        "matmul of {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    )))
                }
            };
            debug_assert_eq!(k, k2);
            let mut out = vec![F::zero(); m * n];
            F::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// `x·W + b` with `x` `[m, k]`, `W` `[k, n]` and `b` `[1, n]`.
    pub fn linear(&self, w: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
        self.tape.check_owner(w);
        self.tape.check_owner(b);
        let value = {
            let x = self.tape.value_of(self.id);
            let wv = self.tape.value_of(w.id);
            let bv = self.tape.value_of(b.id);
            let ((m, k), (k2, n)) = match (x.dims2(), wv.dims2()) {
                (Ok(p), Ok(q)) if p.1 == q.0 && bv.shape() == [1, q.1] => (p, q),
                _ => {
                    return Err(Error::Dimension(format!(
                        "linear of {:?} with weight {:?} and bias {:?}",
                        x.shape(),
                        wv.shape(),
                        bv.shape()
                    )))
                }
            };
            debug_assert_eq!(k, k2);
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(bv.data());
            }
            F::gemm(m, k, n, x.data(), false, wv.data(), false, &mut out, true);
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.tape.needs_grad(self.id) || self.tape.needs_grad(w.id) || self.tape.needs_grad(b.id);
        Ok(self.tape.push(value, Op::Linear(self.id, w.id, b.id), rg))
    }

    fn binary(
        &self,
        other: Var<'t, F>,
        name: &str,
        op: Op,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var<'t, F>> {
        self.tape.check_owner(other);
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                Error::Dimension(format!("{name} of {:?} and {:?}", a.shape(), b.shape()))
            })?;
            let data = if a.shape() == b.shape() {
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
            } else if let Some(d) = rank2_fast(a.data(), a.shape(), b.data(), b.shape(), &f) {
                d
            } else {
                let sa = broadcast_strides(a.shape(), &out_shape);
                let sb = broadcast_strides(b.shape(), &out_shape);
                let mut data = vec![F::zero(); out_shape.iter().product()];
                let (ad, bd) = (a.data(), b.data());
                visit_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
                data
            };
            Tensor::new(out_shape, data)?
        };
        let rg = self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id);
        Ok(self.tape.push(value, op, rg))
    }

    /// Elementwise sum; size-1 axes broadcast, nothing else does.
    pub fn add(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Var<'t, F> {
        let cf = F::lit(c);
        self.map(Op::Scale(self.id, c), |x| x * cf)
    }

    /// Adds a constant to every element.
    pub fn offset(&self, c: f64) -> Var<'t, F> {
        let cf = F::lit(c);
        self.map(Op::Offset(self.id), |x| x + cf)
    }

    pub fn elu(&self) -> Var<'t, F> {
        let value = self.with_value(|v| Tensor {
            shape: v.shape().to_vec(),
            data: F::elu_slice(v.data()),
        });
        self.unary(Op::Elu(self.id), value)
    }

    pub fn square(&self) -> Var<'t, F> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    pub fn sum(&self) -> Var<'t, F> {
        let s = self.with_value(|v| v.data().iter().copied().sum());
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Var<'t, F> {
        let m = self.with_value(|v| {
            v.data().iter().copied().sum::<F>() / F::lit(v.len().max(1) as f64)
        });
        self.unary(Op::Mean(self.id), Tensor::scalar(m))
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_along(&self, axis: usize) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_of(self.id);
            if axis >= v.rank() {
                return Err(Error::Dimension(format!(
                    "sum_along axis {axis} for shape {:?}",
                    v.shape()
                )));
            }
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let mut data = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    add_into(&mut data[o * inner..(o + 1) * inner], src);
                }
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, data)?
        };
        Ok(self.unary(Op::SumAlong(self.id, axis), value))
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_of(self.id);
            if axis >= v.rank() {
                return Err(Error::Dimension(format!(
                    "softmax axis {axis} for shape {:?}",
                    v.shape()
                )));
            }
            if v.data().iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric("softmax input contains NaN".into()));
            }
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let x = v.data();
            let mut y = vec![F::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len)
                        .map(|l| x[at(l)])
                        .fold(F::neg_infinity(), F::max);
                    let mut total = F::zero();
                    for l in 0..len {
                        let e = (x[at(l)] - max).exp();
                        y[at(l)] = e;
                        total += e;
                    }
                    if log {
                        let lse = total.ln();
                        for l in 0..len {
                            y[at(l)] = x[at(l)] - max - lse;
                        }
                    } else {
                        for l in 0..len {
                            y[at(l)] /= total;
                        }
                    }
                }
            }
            Tensor::new(v.shape().to_vec(), y)?
        };
        let op = if log {
            Op::LogSoftmax(self.id, axis)
        } else {
            Op::Softmax(self.id, axis)
        };
        Ok(self.unary(op, value))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        self.softmax_impl(axis, true)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, F>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), value))
    }

    /// Row `r` of the output is row `idx[r]` of this matrix.
    pub fn gather_rows(&self, idx: &Rc<[usize]>) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_of(self.id);
            let (rows, cols) = v.dims2()?;
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &r in idx.iter() {
                if r >= rows {
                    return Err(Error::Dimension(format!(
                        "gather row {r} from shape {:?}",
                        v.shape()
                    )));
                }
                data.extend_from_slice(&v.data()[r * cols..(r + 1) * cols]);
            }
            Tensor::new(vec![idx.len(), cols], data)?
        };
        Ok(self.unary(Op::GatherRows(self.id, idx.clone()), value))
    }

    /// Sums row `r` of this matrix into output row `idx[r]` (`rows_out` rows).
    pub fn scatter_add_rows(&self, idx: &Rc<[usize]>, rows_out: usize) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_of(self.id);
            let (rows, cols) = v.dims2()?;
            if rows != idx.len() {
                return Err(Error::Dimension(format!(
                    "scatter of {:?} with {} indices",
                    v.shape(),
                    idx.len()
                )));
            }
            let mut data = vec![F::zero(); rows_out * cols];
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= rows_out {
                    return Err(Error::Dimension(format!(
                        "scatter target row {dst} out of {rows_out}"
                    )));
                }
                add_into(
                    &mut data[dst * cols..(dst + 1) * cols],
                    &v.data()[r * cols..(r + 1) * cols],
                );
            }
            Tensor::new(vec![rows_out, cols], data)?
        };
        Ok(self.unary(Op::ScatterAddRows(self.id, idx.clone()), value))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let value = {
            let v = self.tape.value_of(self.id);
            if axis >= v.rank() || start + len > v.shape()[axis] {
                return Err(Error::Dimension(format!(
                    "slice [{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    v.shape()
                )));
            }
            let (outer, full, inner) = split_axis(v.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * full + start) * inner;
                data.extend_from_slice(&v.data()[from..from + len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.unary(
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            value,
        ))
    }

    /// Forward value `hard`, backward identity onto `self`.
    pub fn straight_through(&self, hard: Tensor<F>) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if hard.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "straight-through value {:?} vs {:?}",
                hard.shape(),
                shape
            )));
        }
        Ok(self.unary(Op::StraightThrough(self.id), hard))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let q = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(p.matmul(q).unwrap().value().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn concat_cases() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 2]);
        assert_eq!(c.value().data(), &[1.0, 3.0, 2.0, 4.0]);
        let single = tape.concat(&[a], 0).unwrap();
        assert_eq!(single.value(), a.value());
        let bad = tape.constant(t(&[3, 1], &[0.0; 3]));
        assert!(matches!(tape.concat(&[a, bad], 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(t(&[2], &[0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape.constant(t(&[2], &[1000.0, 1000.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape
            .constant(t(&[2], &[1f64.ln(), 3f64.ln()]))
            .softmax(0)
            .unwrap()
            .value();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        let nan = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(nan.softmax(0), Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, f64::NEG_INFINITY, 2.5]));
        assert_eq!(x.elu().value().data(), &[0.0, -1.0, 2.5]);
        let ones = tape.constant(Tensor::ones(vec![2, 3]));
        let s = ones.sum_along(1).unwrap();
        assert_eq!(s.shape(), vec![2]);
        assert_eq!(s.value().data(), &[3.0, 3.0]);

        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.square().mean();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = tape.constant(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let col = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        assert_eq!(
            m.add(row).unwrap().value().data(),
            &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        assert_eq!(
            m.mul(col).unwrap().value().data(),
            &[2.0, 4.0, 6.0, 12.0, 15.0, 18.0]
        );
        let wrong = tape.constant(t(&[3], &[0.0; 3]));
        assert!(m.add(wrong).is_err());
        let wrong = tape.constant(t(&[2, 2], &[0.0; 4]));
        assert!(m.sub(wrong).is_err());
    }

    #[test]
    fn backward_scalar_rules() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);

        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(3.0));
        let g = tape.backward(x.mul(y).unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
        assert_eq!(g.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let fx = x.square().scale(-1.0).elu().sum();
        let twice = fx.add(fx).unwrap();
        let g2 = tape.backward(twice).unwrap().get(x).unwrap().clone();

        let tape1 = Tape::<f64>::new();
        let x1 = tape1.param(t(&[3], &[0.5, -1.0, 2.0]));
        let scaled = x1.square().scale(-1.0).elu().sum().scale(2.0);
        let g1 = tape1.backward(scaled).unwrap().get(x1).unwrap().clone();
        for (a, b) in g2.data().iter().zip(g1.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[3.0, 4.0]));
        let g = tape.backward(c.mul(p).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let tape = Tape::<f64>::new();
        let soft = tape.param(t(&[2], &[0.3, 0.7]));
        let hard = soft.straight_through(t(&[2], &[0.0, 1.0])).unwrap();
        assert_eq!(hard.value().data(), &[0.0, 1.0]);
        let w = tape.constant(t(&[2], &[5.0, 7.0]));
        let g = tape.backward(hard.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(soft).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let tape = Tape::<f64>::new();
        let idx: Rc<[usize]> = vec![1, 0, 1].into();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let g = x.gather_rows(&idx).unwrap();
        assert_eq!(g.value().data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let s = g.scatter_add_rows(&idx, 2).unwrap();
        assert_eq!(s.value().data(), &[1.0, 2.0, 6.0, 8.0]);
    }
}
