//! Arena-style reverse-mode tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse creation order. A tape lives for one forward
//! and backward pass and is then dropped.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{numel, Real, Tensor};
use crate::error::{invalid, Error, Result};

/// Index value in a gather map meaning "emit zero".
pub const ZERO_FILL: usize = usize::MAX;

type Split = (usize, usize, usize);

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Reshape(usize),
    Gather {
        x: usize,
        index: Rc<[usize]>,
    },
    Concat {
        parts: Vec<usize>,
        split_outer: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
        dims: (usize, usize, usize, usize),
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        split: Split,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Softmax {
        x: usize,
        split: Split,
    },
    L2Normalize {
        x: usize,
        eps: T,
        norms: Vec<T>,
    },
    AvgPool2d {
        x: usize,
        geom: PoolGeom,
    },
    Sum(usize),
    Mean(usize),
    L1 {
        pred: usize,
        target: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of every gradient-requiring leaf.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf created with `requires_grad`; `None` otherwise.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Rc::new(value), requires_grad)
    }

    /// Adds a leaf without copying an already shared tensor.
    pub fn leaf_shared(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Rc::new(value), op, rg)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(invalid!(
                "backward needs a single-element output, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, &mut grads, id, &g);
        }
        let out = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(Tensor::from_parts(
                    node.value.shape().to_vec(),
                    g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]),
                )),
                _ => None,
            })
            .collect();
        Ok(Grads { grads: out })
    }

    fn check_owner(&self, v: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(invalid!("variable belongs to a different tape"))
        }
    }
}

fn grad_buf<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for i in [*a, *b] {
                if let Some(buf) = grad_buf(nodes, grads, i) {
                    add_into(buf, g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                add_into(buf, g);
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                buf.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for ((d, &s), &o) in buf.iter_mut().zip(g).zip(bv.data()) {
                    *d += s * o;
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                for ((d, &s), &o) in buf.iter_mut().zip(g).zip(av.data()) {
                    *d += s * o;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                buf.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                add_into(buf, g);
            }
        }
        Op::Relu(x) => {
            let xv = nodes[*x].value.clone();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for ((d, &s), &v) in buf.iter_mut().zip(g).zip(xv.data()) {
                    if v > T::zero() {
                        *d += s;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.clone();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for ((d, &s), &v) in buf.iter_mut().zip(g).zip(xv.data()) {
                    *d += s * kernels::gelu_grad(v);
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for (&s, &i) in g.iter().zip(index.iter()) {
                    if i != ZERO_FILL {
                        buf[i] += s;
                    }
                }
            }
        }
        Op::Concat { parts, split_outer } => {
            let mut offset = 0;
            let total_block = g.len() / split_outer;
            for &p in parts {
                let block = nodes[p].value.numel() / split_outer;
                if let Some(buf) = grad_buf(nodes, grads, p) {
                    for o in 0..*split_outer {
                        let src = &g[o * total_block + offset..o * total_block + offset + block];
                        add_into(&mut buf[o * block..(o + 1) * block], src);
                    }
                }
                offset += block;
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (nodes[*x].value.clone(), nodes[*w].value.clone());
            let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.numel() / cin;
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                T::gemm(
                    rows,
                    cout,
                    cin,
                    T::one(),
                    (g, cout as isize, 1),
                    (wv.data(), 1, cout as isize),
                    T::one(),
                    (buf, cin as isize, 1),
                );
            }
            if let Some(buf) = grad_buf(nodes, grads, *w) {
                T::gemm(
                    cin,
                    rows,
                    cout,
                    T::one(),
                    (xv.data(), 1, cin as isize),
                    (g, cout as isize, 1),
                    T::one(),
                    (buf, cout as isize, 1),
                );
            }
            if let Some(b) = b {
                if let Some(buf) = grad_buf(nodes, grads, *b) {
                    for row in g.chunks(cout) {
                        add_into(buf, row);
                    }
                }
            }
        }
        Op::Bmm {
            a,
            b,
            trans_b,
            dims: (batch, m, k, n),
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            // b viewed as a k×n matrix
            let (b_rs, b_cs) = if *trans_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            if grad_buf(nodes, grads, *a).is_some() {
                for i in 0..batch {
                    let buf = grad_buf(nodes, grads, *a).expect("checked");
                    // da = dy · bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (&g[i * m * n..(i + 1) * m * n], n as isize, 1),
                        (&bv.data()[i * k * n..(i + 1) * k * n], b_cs, b_rs),
                        T::one(),
                        (&mut buf[i * m * k..(i + 1) * m * k], k as isize, 1),
                    );
                }
            }
            if grad_buf(nodes, grads, *b).is_some() {
                for i in 0..batch {
                    let buf = grad_buf(nodes, grads, *b).expect("checked");
                    // db (as k×n view) = aᵀ · dy
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        (&av.data()[i * m * k..(i + 1) * m * k], 1, k as isize),
                        (&g[i * m * n..(i + 1) * m * n], n as isize, 1),
                        T::one(),
                        (&mut buf[i * k * n..(i + 1) * k * n], b_rs, b_cs),
                    );
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            let need_b = b.is_some_and(|b| nodes[b].requires_grad);
            let (dx, dw, db) =
                kernels::conv2d_backward(val(*x), val(*w), g, geom, need_x, need_w, need_b);
            if let (Some(d), Some(buf)) = (dx, grad_buf(nodes, grads, *x)) {
                add_into(buf, &d);
            }
            if let (Some(d), Some(buf)) = (dw, grad_buf(nodes, grads, *w)) {
                add_into(buf, &d);
            }
            if let (Some(d), Some(b)) = (db, b) {
                if let Some(buf) = grad_buf(nodes, grads, *b) {
                    add_into(buf, &d);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            split,
            means,
            rstds,
        } => {
            let (dx, dgamma, dbeta) =
                kernels::layer_norm_backward(val(*x), val(*gamma), g, means, rstds, *split);
            for (i, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                if let Some(buf) = grad_buf(nodes, grads, i) {
                    add_into(buf, &d);
                }
            }
        }
        Op::Softmax { x, split } => {
            if nodes[*x].requires_grad {
                let dx = kernels::softmax_backward(nodes[id].value.data(), g, *split);
                add_into(grad_buf(nodes, grads, *x).expect("requires grad"), &dx);
            }
        }
        Op::L2Normalize { x, eps, norms } => {
            let y = nodes[id].value.clone();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let n = y.numel() / norms.len();
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let (yr, gr) = (&y.data()[span.clone()], &g[span.clone()]);
                    let dst = &mut buf[span];
                    if norm > *eps {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for ((d, &yy), &gg) in dst.iter_mut().zip(yr).zip(gr) {
                            *d += (gg - yy * dot) / norm;
                        }
                    } else {
                        for (d, &gg) in dst.iter_mut().zip(gr) {
                            *d += gg / *eps;
                        }
                    }
                }
            }
        }
        Op::AvgPool2d { x, geom } => {
            if nodes[*x].requires_grad {
                let dx = kernels::avg_pool_backward(g, geom);
                add_into(grad_buf(nodes, grads, *x).expect("requires grad"), &dx);
            }
        }
        Op::Sum(x) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let s = g[0] / T::from_f64(buf.len() as f64);
                buf.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::L1 { pred, target } => {
            let (pv, tv) = (nodes[*pred].value.clone(), nodes[*target].value.clone());
            let s = g[0] / T::from_f64(pv.numel() as f64);
            let sign = |p: T, t: T| {
                if p > t {
                    s
                } else if p < t {
                    -s
                } else {
                    T::zero()
                }
            };
            if let Some(buf) = grad_buf(nodes, grads, *pred) {
                for ((d, &p), &t) in buf.iter_mut().zip(pv.data()).zip(tv.data()) {
                    *d += sign(p, t);
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *target) {
                for ((d, &p), &t) in buf.iter_mut().zip(pv.data()).zip(tv.data()) {
                    *d -= sign(p, t);
                }
            }
        }
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m >= n {
        period - m
    } else {
        m
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
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

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    fn same_tape(&self, other: Var<'_, T>) -> Result<()> {
        self.tape.check_owner(other)
    }

    fn out(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        self.tape.record(value, op, inputs)
    }

    fn zip_with(
        self,
        other: Var<'_, T>,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op_name, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'_, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.out(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'_, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.out(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise product.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'_, T>) -> Result<Var<'t, T>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.out(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.out(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.out(v, Op::AddScalar(self.id), &[self.id])
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.out(v, Op::Relu(self.id), &[self.id])
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let v = self.value().map(kernels::gelu);
        self.out(v, Op::Gelu(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.out(v, Op::Reshape(self.id), &[self.id]))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO_FILL`.
    pub fn gather(self, index: impl Into<Rc<[usize]>>, shape: &[usize]) -> Result<Var<'t, T>> {
        let index: Rc<[usize]> = index.into();
        if numel(shape) != index.len() || shape.contains(&0) {
            return Err(invalid!(
                "gather map of length {} for shape {shape:?}",
                index.len()
            ));
        }
        let x = self.value();
        let src = x.data();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == ZERO_FILL {
                data.push(T::zero());
            } else if i < src.len() {
                data.push(src[i]);
            } else {
                return Err(invalid!(
                    "gather index {i} out of range for {} elements",
                    src.len()
                ));
            }
        }
        let v = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.out(v, Op::Gather { x: self.id, index }, &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid!(
                "{perm:?} is not a permutation of rank {}",
                shape.len()
            ));
        }
        let (out_shape, index) = kernels::permute_index(&shape, perm);
        self.gather(index, &out_shape)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            ));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(index, &out_shape)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid!("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(invalid!("concat axis {axis} for rank {}", base.len()));
        }
        let values: Vec<_> = parts
            .iter()
            .map(|p| {
                first.same_tape(*p)?;
                let v = p.value();
                let ok = v.rank() == base.len()
                    && v.shape()
                        .iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if ok {
                    Ok(v)
                } else {
                    Err(Error::shape("concat", &base, v.shape()))
                }
            })
            .collect::<Result<_>>()?;
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat {
            parts: ids.clone(),
            split_outer: outer,
        };
        Ok(first.out(Tensor::from_parts(shape, data), op, &ids))
    }

    /// Affine map over the last axis: `x[..., Cin] · W[Cin, Cout] + b`.
    pub fn linear(self, weight: Var<'_, T>, bias: Option<Var<'_, T>>) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        let (x, w) = (self.value(), weight.value());
        if w.rank() != 2 || x.shape().last() != Some(&w.shape()[0]) {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        }
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / cin;
        let mut data = vec![T::zero(); rows * cout];
        T::gemm(
            rows,
            cin,
            cout,
            T::one(),
            (x.data(), cin as isize, 1),
            (w.data(), cout as isize, 1),
            T::zero(),
            (&mut data, cout as isize, 1),
        );
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_tape(b)?;
            let bv = b.value();
            if bv.shape() != [cout] {
                return Err(Error::shape("linear bias", bv.shape(), &[cout]));
            }
            for row in data.chunks_mut(cout) {
                add_into(row, bv.data());
            }
            inputs.push(b.id);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = cout;
        let op = Op::Linear {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
        };
        Ok(self.out(Tensor::from_parts(shape, data), op, &inputs))
    }

    /// Batched matrix product of `[B, M, K]` with `[B, K, N]` (or `[B, N, K]` when `trans_b`).
    pub fn bmm(self, other: Var<'_, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(Error::shape("bmm", a.shape(), b.shape()));
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if bk != k {
            return Err(Error::shape("bmm", a.shape(), b.shape()));
        }
        let (b_rs, b_cs) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut data = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                (&a.data()[i * m * k..(i + 1) * m * k], k as isize, 1),
                (&b.data()[i * k * n..(i + 1) * k * n], b_rs, b_cs),
                T::zero(),
                (&mut data[i * m * n..(i + 1) * m * n], n as isize, 1),
            );
        }
        let op = Op::Bmm {
            a: self.id,
            b: other.id,
            trans_b,
            dims: (batch, m, k, n),
        };
        Ok(self.out(
            Tensor::from_parts(vec![batch, m, n], data),
            op,
            &[self.id, other.id],
        ))
    }

    /// Cross-correlation of a `[C_in, H, W]` image with `[C_out, C_in/groups, k, k]` weights.
    pub fn conv2d(
        self,
        weight: Var<'_, T>,
        bias: Option<Var<'_, T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 3 || w.rank() != 4 || w.shape()[2] != w.shape()[3] {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k) = (w.shape()[0], w.shape()[2]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(invalid!(
                "conv2d: channels {c_in}->{c_out} not divisible by {groups} groups"
            ));
        }
        if w.shape()[1] != c_in / groups {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if k % 2 == 0 {
            return Err(invalid!("conv2d: kernel size {k} must be odd"));
        }
        if stride == 0 || h + 2 * padding < k || wd + 2 * padding < k {
            return Err(invalid!(
                "conv2d: {h}x{wd} input with kernel {k}, padding {padding}, stride {stride} has no output"
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            padding,
            groups,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (wd + 2 * padding - k) / stride + 1,
        };
        let mut inputs = vec![self.id, weight.id];
        let bias_val = match bias {
            Some(b) => {
                self.same_tape(b)?;
                let bv = b.value();
                if bv.shape() != [c_out] {
                    return Err(Error::shape("conv2d bias", bv.shape(), &[c_out]));
                }
                inputs.push(b.id);
                Some(bv)
            }
            None => None,
        };
        let data = kernels::conv2d_forward(
            x.data(),
            w.data(),
            bias_val.as_ref().map(|b| b.data()),
            &geom,
        );
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            geom,
        };
        Ok(self.out(
            Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], data),
            op,
            &inputs,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(self, gamma: Var<'_, T>, beta: Var<'_, T>, eps: f64) -> Result<Var<'t, T>> {
        let axis = self.shape().len() - 1;
        self.layer_norm_axis(gamma, beta, eps, axis)
    }

    /// Layer normalization over an arbitrary axis (e.g. channels of a `[C, H, W]` image).
    pub fn layer_norm_axis(
        self,
        gamma: Var<'_, T>,
        beta: Var<'_, T>,
        eps: f64,
        axis: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        if eps <= 0.0 {
            return Err(invalid!("layer_norm eps must be positive, got {eps}"));
        }
        let x = self.value();
        if axis >= x.rank() {
            return Err(invalid!("layer_norm axis {axis} for rank {}", x.rank()));
        }
        let n = x.shape()[axis];
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let split = kernels::split_axis(x.shape(), axis);
        let (data, means, rstds) =
            kernels::layer_norm_forward(x.data(), gv.data(), bv.data(), split, T::from_f64(eps));
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            split,
            means,
            rstds,
        };
        Ok(self.out(
            Tensor::from_parts(x.shape().to_vec(), data),
            op,
            &[self.id, gamma.id, beta.id],
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(invalid!("softmax axis {axis} for rank {}", x.rank()));
        }
        let split = kernels::split_axis(x.shape(), axis);
        let data = kernels::softmax_forward(x.data(), split);
        let op = Op::Softmax { x: self.id, split };
        Ok(self.out(Tensor::from_parts(x.shape().to_vec(), data), op, &[self.id]))
    }

    /// Divides each last-axis row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let eps = T::from_f64(eps);
        let n = *x.shape().last().expect("rank >= 1");
        let mut norms = Vec::with_capacity(x.numel() / n);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            let d = norm.max(eps);
            data.extend(row.iter().map(|&v| v / d));
            norms.push(norm);
        }
        let op = Op::L2Normalize {
            x: self.id,
            eps,
            norms,
        };
        self.out(Tensor::from_parts(x.shape().to_vec(), data), op, &[self.id])
    }

    /// Average pooling over a `[C, H, W]` image; zero padding counts toward the divisor.
    pub fn avg_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 3 || kernel == 0 || stride == 0 {
            return Err(invalid!(
                "avg_pool2d({kernel}, {stride}) on shape {:?}",
                x.shape()
            ));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(invalid!(
                "avg_pool2d kernel {kernel} larger than padded {h}x{w}"
            ));
        }
        let geom = PoolGeom {
            c,
            h,
            w,
            k: kernel,
            stride,
            padding,
            h_out: (h + 2 * padding - kernel) / stride + 1,
            w_out: (w + 2 * padding - kernel) / stride + 1,
        };
        let data = kernels::avg_pool_forward(x.data(), &geom);
        let op = Op::AvgPool2d { x: self.id, geom };
        Ok(self.out(
            Tensor::from_parts(vec![c, geom.h_out, geom.w_out], data),
            op,
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().data().iter().fold(T::zero(), |a, &v| a + v);
        self.out(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let x = self.value();
        let s = x.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_f64(x.numel() as f64);
        self.out(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    /// Mean absolute error against `target`.
    pub fn l1_loss(self, target: Var<'_, T>) -> Result<Var<'t, T>> {
        let diff = self.zip_with(target, "l1_loss", |a, b| (a - b).abs())?;
        let s =
            diff.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_f64(diff.numel() as f64);
        let op = Op::L1 {
            pred: self.id,
            target: target.id,
        };
        Ok(self.out(Tensor::scalar(s), op, &[self.id, target.id]))
    }

    fn image_dims(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape()[..] {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(invalid!("{op} expects a [C, H, W] tensor, got {s:?}")),
        }
    }

    /// `[C·r², H, W] -> [C, H·r, W·r]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t, T>> {
        let (cr, h, w) = self.image_dims("pixel_shuffle")?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(invalid!(
                "pixel_shuffle: {cr} channels not divisible by {}",
                r * r
            ));
        }
        let c = cr / (r * r);
        let (ho, wo) = (h * r, w * r);
        let mut index = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let src_c = ch * r * r + (y % r) * r + x % r;
                    index.push((src_c * h + y / r) * w + x / r);
                }
            }
        }
        self.gather(index, &[c, ho, wo])
    }

    /// `[C, H·r, W·r] -> [C·r², H, W]`; inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t, T>> {
        let (c, hr, wr) = self.image_dims("pixel_unshuffle")?;
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(invalid!("pixel_unshuffle: {hr}x{wr} not divisible by {r}"));
        }
        let (h, w) = (hr / r, wr / r);
        let mut index = Vec::with_capacity(c * hr * wr);
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..h {
                        for x in 0..w {
                            index.push((ch * hr + y * r + i) * wr + x * r + j);
                        }
                    }
                }
            }
        }
        self.gather(index, &[c * r * r, h, w])
    }

    /// Mirror-pads the bottom and right edges of a `[C, H, W]` image.
    pub fn reflect_pad(self, bottom: usize, right: usize) -> Result<Var<'t, T>> {
        let (c, h, w) = self.image_dims("reflect_pad")?;
        let (ho, wo) = (h + bottom, w + right);
        let mut index = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                let sy = reflect(y, h);
                for x in 0..wo {
                    index.push((ch * h + sy) * w + reflect(x, w));
                }
            }
        }
        self.gather(index, &[c, ho, wo])
    }

    /// Keeps the top-left `h × w` region of a `[C, H, W]` image.
    pub fn crop(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let (c, hi, wi) = self.image_dims("crop")?;
        if h == 0 || w == 0 || h > hi || w > wi {
            return Err(invalid!("crop to {h}x{w} from {hi}x{wi}"));
        }
        if (h, w) == (hi, wi) {
            return Ok(self);
        }
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * hi + y) * wi;
                index.extend(base..base + w);
            }
        }
        self.gather(index, &[c, h, w])
    }
}
