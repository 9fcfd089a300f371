//! Dense row-major `f64` tensors with reverse-mode differentiation.
//!
//! Every operation that has at least one input with `requires_grad` records a
//! backward closure together with its inputs. [`Tensor::backward`] walks that
//! graph in reverse topological order. Gradients of leaves accumulate across
//! calls until [`Tensor::zero_grad`] is called, which is what gradient
//! accumulation over micro-batches relies on.
//!
//! When no input requires a gradient nothing is recorded, so inference with
//! frozen parameters keeps no intermediate buffers alive.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell, RefMut};
use core::fmt;

use crate::error::{shape_err, Error, Result};
use crate::math;

/// Backward closure: receives the gradient of the output and returns one
/// optional gradient per recorded parent.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad.get())
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Builds the result of an operation. The backward closure and parent
    /// handles are kept only when some parent requires a gradient.
    pub fn from_op<F>(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Tensor::leaf(data, shape, false);
        }
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(true),
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor::leaf(t.to_vec(), shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], Vec::new(), false)
    }

    /// Same values, new leaf with the given gradient flag.
    pub fn detach_with_grad(&self, requires_grad: bool) -> Tensor {
        Tensor::leaf(self.to_vec(), self.0.shape.clone(), requires_grad)
    }

    pub fn detach(&self) -> Tensor {
        self.detach_with_grad(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Switches gradient tracking of a leaf. Operations recorded earlier
    /// keep their graph.
    pub fn set_requires_grad(&self, on: bool) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::InvalidArgument("only leaf tensors can change requires_grad".into()));
        }
        self.0.requires_grad.set(on);
        Ok(())
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values, for optimizers and finite differences.
    /// Graphs already recorded through this tensor are not updated.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut d = self.0.data.borrow_mut();
        if d.len() != values.len() {
            return Err(shape_err("set_data", &self.0.shape, &[values.len()]));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let s = strides(&self.0.shape);
        let off: usize = index.iter().zip(&s).map(|(i, s)| i * s).sum();
        self.0.data.borrow()[off]
    }

    /// Accumulated gradient; zeros if nothing reached this tensor.
    pub fn grad(&self) -> Vec<f64> {
        match &*self.0.grad.borrow() {
            Some(g) => g.clone(),
            None => vec![0.0; self.numel()],
        }
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn set_grad(&self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.0.grad.borrow_mut() = Some(g);
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from a one-element tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(vec![1.0])
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(shape_err("backward_with", self.shape(), &[seed.len()]));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        pending.insert(self.key(), seed);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    if node.0.requires_grad.get() {
                        let mut slot = node.0.grad.borrow_mut();
                        match &mut *slot {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(f) => {
                    let parent_grads = f(&g);
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the recorded graph (parents before children).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = BTreeSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

/// How an operand's elements map onto a broadcast output.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Operand equals the trailing dims of the output: index `i % n`.
    Tile(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], input: &[usize]) -> Bcast {
        if out == input {
            return Bcast::Same;
        }
        let stripped: &[usize] = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            &input[lead..]
        };
        if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == *stripped {
            return Bcast::Tile(numel(stripped).max(1));
        }
        let r = out.len();
        let mut padded = vec![1usize; r - input.len()];
        padded.extend_from_slice(input);
        let in_strides = strides(&padded);
        let mut map = Vec::with_capacity(numel(out));
        let mut idx = vec![0usize; r];
        for _ in 0..numel(out) {
            let mut off = 0;
            for d in 0..r {
                if padded[d] != 1 {
                    off += idx[d] * in_strides[d];
                }
            }
            map.push(off);
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Tile(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }

    fn reduce(&self, g: &[f64], len: usize) -> Vec<f64> {
        match self {
            Bcast::Same => g.to_vec(),
            _ => {
                let mut out = vec![0.0; len];
                for (i, v) in g.iter().enumerate() {
                    out[self.index(i)] += v;
                }
                out
            }
        }
    }
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(shape_err(op, a, b));
        };
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinOp, name: &'static str) -> Result<Tensor> {
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let ba = Bcast::new(&out_shape, self.shape());
        let bb = Bcast::new(&out_shape, other.shape());
        let n = numel(&out_shape);
        let data = {
            let a = self.data();
            let b = other.data();
            let mut out = Vec::with_capacity(n);
            match (&ba, &bb) {
                (Bcast::Same, Bcast::Same) => {
                    for i in 0..n {
                        out.push(apply(op, a[i], b[i]));
                    }
                }
                _ => {
                    for i in 0..n {
                        out.push(apply(op, a[ba.index(i)], b[bb.index(i)]));
                    }
                }
            }
            out
        };
        let (a_t, b_t) = (self.clone(), other.clone());
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga_full: Option<Vec<f64>>;
                let gb_full: Option<Vec<f64>>;
                match op {
                    BinOp::Add => {
                        ga_full = a_t.requires_grad().then(|| g.to_vec());
                        gb_full = b_t.requires_grad().then(|| g.to_vec());
                    }
                    BinOp::Sub => {
                        ga_full = a_t.requires_grad().then(|| g.to_vec());
                        gb_full = b_t.requires_grad().then(|| g.iter().map(|v| -v).collect());
                    }
                    BinOp::Mul => {
                        let a = a_t.data();
                        let b = b_t.data();
                        ga_full = a_t
                            .requires_grad()
                            .then(|| g.iter().enumerate().map(|(i, v)| v * b[bb.index(i)]).collect());
                        gb_full = b_t
                            .requires_grad()
                            .then(|| g.iter().enumerate().map(|(i, v)| v * a[ba.index(i)]).collect());
                    }
                    BinOp::Div => {
                        let a = a_t.data();
                        let b = b_t.data();
                        ga_full = a_t
                            .requires_grad()
                            .then(|| g.iter().enumerate().map(|(i, v)| v / b[bb.index(i)]).collect());
                        gb_full = b_t.requires_grad().then(|| {
                            g.iter()
                                .enumerate()
                                .map(|(i, v)| {
                                    let bv = b[bb.index(i)];
                                    -v * a[ba.index(i)] / (bv * bv)
                                })
                                .collect()
                        });
                    }
                }
                vec![
                    ga_full.map(|g| ba.reduce(&g, na)),
                    gb_full.map(|g| bb.reduce(&g, nb)),
                ]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Div, "div")
    }
}

#[inline]
fn apply(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

impl Tensor {
    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map(&self, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x_t = self.clone();
        let y = if self.requires_grad() { out.clone() } else { Vec::new() };
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let x = x_t.data();
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(&y))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.map(|x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.map(math::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.map(math::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map(math::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.map(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(math::sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.map(
            |x| x * math::sigmoid(x),
            |x, _| {
                let s = math::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn softplus(&self) -> Tensor {
        self.map(math::softplus, |x, _| math::sigmoid(x))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| if x > 0.0 { x } else { 0.0 }, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| vec![Some(g.to_vec())])
    }

    /// Multiplies by a constant (non-differentiable) array of the same shape.
    pub fn mul_const(&self, mask: &[f64]) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(shape_err("mul_const", self.shape(), &[mask.len()]));
        }
        let out: Vec<f64> = self.data().iter().zip(mask).map(|(x, m)| x * m).collect();
        let m = mask.to_vec();
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&m).map(|(g, m)| g * m).collect())]
        }))
    }
}

// ---------------------------------------------------------------------------
// Reductions

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let s = self.shape();
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        (outer, s[axis], inner)
    }

    /// Sum over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis: axis {axis} for shape {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = self.axis_split(axis);
        let mut out = vec![0.0; outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    for i in 0..inner {
                        gx[base + i] = g[o * inner + i];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let len = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }
}

// ---------------------------------------------------------------------------
// Shape manipulation

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permute: {perm:?} is not a permutation of rank {r}"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let src = permute_index_map(&in_shape, perm);
        let data = {
            let d = self.data();
            src.iter().map(|&s| d[s]).collect()
        };
        let n = self.numel();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n];
            for (i, &s) in src.iter().enumerate() {
                gx[s] = g[i];
            }
            vec![Some(gx)]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::InvalidArgument(format!(
                "transpose({a}, {b}) on rank {}",
                self.rank()
            )));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.dim(axis) {
            return Err(Error::InvalidArgument(format!(
                "narrow(axis {axis}, {start}..{}) on shape {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, full, inner) = self.axis_split(axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} on rank {}", first.rank())));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let d = p.data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let lens_bw = lens.clone();
        Ok(Tensor::from_op(out, shape, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<f64>> = lens_bw.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (k, &l) in lens_bw.iter().enumerate() {
                    grads[k].extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Rows of a 2-D table: `[V, d]` indexed by `ids` gives `[ids.len(), d]`.
    pub fn index_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!("index_rows on shape {:?}", self.shape())));
        }
        let (v, d) = (self.dim(0), self.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange { index: bad, size: v });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let t = self.data();
            for &i in ids {
                out.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(out, vec![ids.len(), d], vec![self.clone()], move |g| {
            let mut gt = vec![0.0; v * d];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g[r * d + j];
                }
            }
            vec![Some(gt)]
        }))
    }
}

/// For each output element of `permute(perm)`, the flat index it reads.
fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let r = out_shape.len();
    let n = numel(&out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Matrix product

/// `c[m,n] += a[m,k] * b[k,n]`
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] * b[k,n]^T`
fn mm_acc_bt(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            da[i * k + p] += s;
        }
    }
}

/// `db[k,n] += a[m,k]^T * g[m,n]`
fn mm_acc_at(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (dv, gv) in drow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
}

impl Tensor {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`; batch dims
    /// broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];

        // `[.., m, k] x [k, n]`: one large product over the flattened rows.
        if batch_b.is_empty() {
            let rows = numel(batch_a) * m;
            let mut out = vec![0.0; rows * n];
            mm_acc(&self.data(), &other.data(), &mut out, rows, k, n);
            let mut shape = batch_a.to_vec();
            shape.extend_from_slice(&[m, n]);
            let (a_t, b_t) = (self.clone(), other.clone());
            return Ok(Tensor::from_op(out, shape, vec![self.clone(), other.clone()], move |g| {
                let ga = a_t.requires_grad().then(|| {
                    let mut ga = vec![0.0; rows * k];
                    mm_acc_bt(g, &b_t.data(), &mut ga, rows, k, n);
                    ga
                });
                let gb = b_t.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    mm_acc_at(&a_t.data(), g, &mut gb, rows, k, n);
                    gb
                });
                vec![ga, gb]
            }));
        }

        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| shape_err("matmul", sa, sb))?;
        let nb = numel(&batch);
        let map_a = Bcast::new(&batch, batch_a);
        let map_b = Bcast::new(&batch, batch_b);
        let mut out = vec![0.0; nb * m * n];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..nb {
                let (ia, ib) = (map_a.index(i), map_b.index(i));
                mm_acc(
                    &a[ia * m * k..(ia + 1) * m * k],
                    &b[ib * k * n..(ib + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch.clone();
        shape.extend_from_slice(&[m, n]);
        let (a_t, b_t) = (self.clone(), other.clone());
        let (na, nbb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(out, shape, vec![self.clone(), other.clone()], move |g| {
            let a = a_t.data();
            let b = b_t.data();
            let mut ga = a_t.requires_grad().then(|| vec![0.0; na]);
            let mut gb = b_t.requires_grad().then(|| vec![0.0; nbb]);
            for i in 0..nb {
                let (ia, ib) = (map_a.index(i), map_b.index(i));
                let gs = &g[i * m * n..(i + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    mm_acc_bt(gs, &b[ib * k * n..(ib + 1) * k * n], &mut ga[ia * m * k..(ia + 1) * m * k], m, k, n);
                }
                if let Some(gb) = gb.as_mut() {
                    mm_acc_at(&a[ia * m * k..(ia + 1) * m * k], gs, &mut gb[ib * k * n..(ib + 1) * k * n], m, k, n);
                }
            }
            vec![ga, gb]
        }))
    }
}

// ---------------------------------------------------------------------------
// Softmax family

impl Tensor {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!("softmax axis {axis} on {:?}", self.shape())));
        }
        let (outer, len, inner) = self.axis_split(axis);
        let mut y = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(y[idx(a)]);
                }
                let mut s = 0.0;
                for a in 0..len {
                    let e = math::exp(y[idx(a)] - max);
                    y[idx(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    y[idx(a)] /= s;
                }
            }
        }
        let y_saved = if self.requires_grad() { y.clone() } else { Vec::new() };
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let y = &y_saved;
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                    for a in 0..len {
                        gx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!("log_softmax axis {axis} on {:?}", self.shape())));
        }
        let (outer, len, inner) = self.axis_split(axis);
        let mut y = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(y[idx(a)]);
                }
                let s: f64 = (0..len).map(|a| math::exp(y[idx(a)] - max)).sum();
                let lse = max + math::ln(s);
                for a in 0..len {
                    y[idx(a)] -= lse;
                }
            }
        }
        let y_saved = if self.requires_grad() { y.clone() } else { Vec::new() };
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let y = &y_saved;
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let gs: f64 = (0..len).map(|a| g[idx(a)]).sum();
                    for a in 0..len {
                        gx[idx(a)] = g[idx(a)] - math::exp(y[idx(a)]) * gs;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(i.matmul(&a).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn permutation_matmul_swaps_columns() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let p = t(&[0.0, 1.0, 1.0, 0.0], &[2, 2]);
        assert_eq!(a.matmul(&p).unwrap().to_vec(), vec![2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_broadcasts_batch_dims() {
        let a = t(&(0..12).map(|v| v as f64).collect::<Vec<_>>(), &[2, 1, 2, 3]);
        let b = t(&(0..18).map(|v| v as f64 * 0.5).collect::<Vec<_>>(), &[3, 3, 2]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2, 2]);
        // spot check one block against a direct sum
        let (ad, bd, cd) = (a.to_vec(), b.to_vec(), c.to_vec());
        for bi in 0..2 {
            for bj in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let s: f64 = (0..3).map(|p| ad[bi * 6 + i * 3 + p] * bd[bj * 6 + p * 2 + j]).sum();
                        assert_eq!(cd[((bi * 3 + bj) * 2 + i) * 2 + j], s);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_incompatible_is_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn broadcast_gradient_reduces_to_operand_shape() {
        let a = Tensor::parameter(vec![1.0; 6], &[2, 3, 1]).unwrap();
        let b = Tensor::parameter(vec![2.0; 4], &[1, 4]).unwrap();
        let y = a.mul(&b).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(a.grad().len(), 6);
        assert_eq!(b.grad().len(), 4);
        assert!(a.grad().iter().all(|&g| g == 8.0));
        assert!(b.grad().iter().all(|&g| g == 6.0));
    }

    #[test]
    fn non_participating_grad_is_zero() {
        let a = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let unused = Tensor::parameter(vec![3.0, 4.0], &[2]).unwrap();
        a.square().sum_all().backward().unwrap();
        assert_eq!(unused.grad(), vec![0.0, 0.0]);
        assert_eq!(a.grad(), vec![2.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let u = t(&[0.3; 4], &[4]).softmax(0).unwrap().to_vec();
        assert!(u.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = t(&[0.0, math::ln(3.0)], &[2]).softmax(0).unwrap().to_vec();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let x = t(&[0.1, -2.0, 3.5, 0.7], &[4]);
        let a = x.softmax(0).unwrap().to_vec();
        let b = x.add_scalar(123.456).softmax(0).unwrap().to_vec();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.softmax(0).unwrap().to_vec();
        for c in 0..3 {
            assert!((y[c] + y[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let x = t(&(0..24).map(|v| v as f64).collect::<Vec<_>>(), &[2, 3, 4]);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn narrow_and_concat_invert() {
        let x = t(&(0..24).map(|v| v as f64).collect::<Vec<_>>(), &[2, 3, 4]);
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 2).unwrap();
        assert_eq!(Tensor::concat(&[a, b], 1).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn index_rows_out_of_range() {
        let table = Tensor::zeros(&[3, 2]);
        assert!(matches!(table.index_rows(&[0, 3]), Err(Error::IndexOutOfRange { index: 3, size: 3 })));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let w = Tensor::parameter(vec![3.0], &[1]).unwrap();
        w.square().sum_all().backward().unwrap();
        w.square().sum_all().backward().unwrap();
        assert_eq!(w.grad(), vec![12.0]);
        w.zero_grad();
        assert_eq!(w.grad(), vec![0.0]);
    }

    #[test]
    fn frozen_inputs_record_nothing() {
        let x = Tensor::ones(&[3]);
        let y = x.exp().sum_all();
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }
}
