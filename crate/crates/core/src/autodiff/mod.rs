//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation whose inputs require gradients. Values
//! flow through [`Var`] handles that borrow the tape; each handle owns a
//! shared reference to its forward value, so a value stays alive exactly as
//! long as some handle or some tape record needs it.
//!
//! A tape created with [`Tape::no_grad`] never records anything: every
//! result is a plain value and intermediate buffers are freed as soon as the
//! last handle goes away. Both modes run the same kernels in the same order,
//! so a no-grad pass and a recording pass produce bitwise-identical values.
//!
//! Trainable weights live in [`Param`]s. Gradients accumulate (`+=`) into the
//! parameter's grad slot when `backward` (or `vjp` with accumulation) runs.

mod loss;
mod ops;

pub use loss::{bce_with_logits, cross_entropy, l1_loss, mse_loss};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::memory;
use crate::tensor::{gemm, Float, Tensor};

type NodeId = usize;

struct ParamInner<T: Float> {
    name: String,
    value: RefCell<Rc<Tensor<T>>>,
    grad: RefCell<Option<Tensor<T>>>,
    requires_grad: Cell<bool>,
}

/// A named trainable tensor with a gradient slot.
///
/// Cloning a `Param` clones the handle, not the storage.
pub struct Param<T: Float>(Rc<ParamInner<T>>);

impl<T: Float> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Param({}, {:?})", self.0.name, self.value().shape())
    }
}

impl<T: Float> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param(Rc::new(ParamInner {
            name: name.into(),
            value: RefCell::new(Rc::new(value)),
            grad: RefCell::new(None),
            requires_grad: Cell::new(true),
        }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.0.value.borrow())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    /// Replace the stored value; the shape must not change.
    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        let cur = self.shape();
        if cur != value.shape() {
            return Err(Error::shape("Param::set_value", &cur, value.shape()));
        }
        *self.0.value.borrow_mut() = Rc::new(value);
        Ok(())
    }

    /// In-place update of the value. Copies first if a tape still holds it.
    pub fn update(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.0.value.borrow_mut();
        if Rc::get_mut(&mut slot).is_none() {
            *slot = Rc::new((**slot).clone());
        }
        f(Rc::get_mut(&mut slot).expect("unique").data_mut());
    }

    pub fn grad(&self) -> Option<Ref<'_, Tensor<T>>> {
        Ref::filter_map(self.0.grad.borrow(), |g| g.as_ref()).ok()
    }

    /// Gradient, or zeros if nothing has been accumulated.
    pub fn grad_or_zeros(&self) -> Tensor<T> {
        match self.grad() {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shape()),
        }
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn accumulate_grad(&self, g: &Tensor<T>) -> Result<()> {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => {
                let shape = self.shape();
                if shape != g.shape() {
                    return Err(Error::shape("accumulate_grad", &shape, g.shape()));
                }
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn same(&self, other: &Param<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// Operand reference inside a record: the producing node, if it is tracked.
type Src = Option<NodeId>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Abs,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Silu,
}

pub(crate) enum Op<T: Float> {
    Param(Param<T>),
    Input,
    Binary {
        kind: BinKind,
        a: Src,
        b: Src,
        av: Option<Rc<Tensor<T>>>,
        bv: Option<Rc<Tensor<T>>>,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Scale {
        a: Src,
        factor: T,
    },
    Offset {
        a: Src,
    },
    Unary {
        kind: UnaryKind,
        a: Src,
        // input for Abs/Log/Silu, output for Exp/Sqrt/Tanh/Sigmoid
        saved: Option<Rc<Tensor<T>>>,
    },
    MatMul {
        a: Src,
        b: Src,
        av: Option<Rc<Tensor<T>>>,
        bv: Option<Rc<Tensor<T>>>,
    },
    AddRow {
        a: Src,
        row: Src,
    },
    MulRows {
        a: Src,
        scales: Rc<Vec<T>>,
    },
    Sum {
        a: Src,
    },
    Mean {
        a: Src,
    },
    SumSq {
        a: Src,
        av: Rc<Tensor<T>>,
    },
    L1 {
        a: Src,
        av: Rc<Tensor<T>>,
    },
    Concat {
        parts: Vec<Src>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Reshape {
        a: Src,
    },
    GatherRows {
        a: Src,
        indices: Rc<Vec<usize>>,
        rows: usize,
    },
    BceLogits {
        a: Src,
        av: Rc<Tensor<T>>,
        labels: Rc<Vec<T>>,
    },
    CrossEntropy {
        a: Src,
        probs: Tensor<T>,
        classes: Rc<Vec<usize>>,
    },
}

struct Node<T: Float> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Records differentiable operations.
pub struct Tape<T: Float> {
    enabled: bool,
    nodes: RefCell<Vec<Node<T>>>,
    input_grads: RefCell<HashMap<NodeId, Tensor<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Drop for Tape<T> {
    fn drop(&mut self) {
        if self.enabled {
            memory::on_tape_close();
        }
    }
}

/// A value flowing through a tape.
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    value: Rc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape,
            value: Rc::clone(&self.value),
            node: self.node,
        }
    }
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

impl<T: Float> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        memory::on_tape_open();
        Tape {
            enabled: true,
            nodes: RefCell::new(Vec::new()),
            input_grads: RefCell::new(HashMap::new()),
        }
    }

    /// A tape that records nothing.
    pub fn no_grad() -> Self {
        Tape {
            enabled: false,
            nodes: RefCell::new(Vec::new()),
            input_grads: RefCell::new(HashMap::new()),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Number of records.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Untracked value.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        Var {
            tape: self,
            value,
            node: None,
        }
    }

    /// Leaf that requires a gradient; read it back with [`Tape::grad`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.input_rc(Rc::new(value))
    }

    pub fn input_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        if !self.enabled {
            return self.constant_rc(value);
        }
        let node = self.push(Op::Input, value.shape().to_vec());
        Var {
            tape: self,
            value,
            node: Some(node),
        }
    }

    /// The current value of a parameter. Tracked only when the tape records
    /// and the parameter requires a gradient.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        let value = p.value();
        if !self.enabled || !p.requires_grad() {
            return self.constant_rc(value);
        }
        let node = self.push(Op::Param(p.clone()), value.shape().to_vec());
        Var {
            tape: self,
            value,
            node: Some(node),
        }
    }

    fn push(&self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape });
        nodes.len() - 1
    }

    /// Wrap a freshly computed value, recording `op` only when some operand
    /// is tracked.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        sources: &[Src],
        op: impl FnOnce() -> Op<T>,
    ) -> Var<'_, T> {
        let tracked = self.enabled && sources.iter().any(|s| s.is_some());
        let node = if tracked {
            Some(self.push(op(), value.shape().to_vec()))
        } else {
            None
        };
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Like [`Tape::record`] for ops whose record must share the output value.
    pub(crate) fn record_rc(
        &self,
        value: Rc<Tensor<T>>,
        sources: &[Src],
        op: impl FnOnce(&Rc<Tensor<T>>) -> Op<T>,
    ) -> Var<'_, T> {
        let tracked = self.enabled && sources.iter().any(|s| s.is_some());
        let node = if tracked {
            let op = op(&value);
            Some(self.push(op, value.shape().to_vec()))
        } else {
            None
        };
        Var {
            tape: self,
            value,
            node,
        }
    }

    /// Accumulated gradient of an [`Tape::input`] leaf after `backward`.
    pub fn grad(&self, v: &Var<'_, T>) -> Option<Tensor<T>> {
        v.node
            .and_then(|n| self.input_grads.borrow().get(&n).cloned())
    }

    /// Back-propagate from a scalar loss: gradients accumulate into every
    /// reachable parameter and into the grad slot of every reachable input.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<()> {
        self.check_owner(loss)?;
        if loss.value.len() != 1 {
            return Err(Error::NotScalar(loss.value.shape().to_vec()));
        }
        if !self.enabled {
            return Err(Error::TapeDisabled);
        }
        let root = loss.node.ok_or(Error::TapeDisabled)?;
        let seed = Tensor::full(loss.value.shape(), T::one());
        let leaves = self.propagate(root, seed)?;
        let nodes = self.nodes.borrow();
        let mut inputs = self.input_grads.borrow_mut();
        for (id, g) in leaves {
            match &nodes[id].op {
                Op::Param(p) => p.accumulate_grad(&g)?,
                Op::Input => match inputs.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        inputs.insert(id, g);
                    }
                },
                _ => unreachable!("propagate returns leaves only"),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product: the gradient of `<cotangent, output>` with
    /// respect to `input`.
    ///
    /// Parameter grad slots are left untouched unless `accumulate_params` is
    /// set, in which case every reachable parameter receives its share too.
    pub fn vjp(
        &self,
        output: &Var<'_, T>,
        input: &Var<'_, T>,
        cotangent: &Tensor<T>,
        accumulate_params: bool,
    ) -> Result<Tensor<T>> {
        self.check_owner(output)?;
        self.check_owner(input)?;
        if !self.enabled {
            return Err(Error::TapeDisabled);
        }
        if cotangent.shape() != output.value.shape() {
            return Err(Error::shape("vjp", output.value.shape(), cotangent.shape()));
        }
        let (root, target) = match (output.node, input.node) {
            (Some(r), Some(t)) if t <= r => (r, t),
            _ => return Err(Error::NoDependency),
        };
        let leaves;
        let mut result = None;
        if root == target {
            leaves = vec![(root, cotangent.clone())];
        } else {
            leaves = self.propagate_until(root, cotangent.clone(), Some(target), &mut result)?;
        }
        if accumulate_params {
            let nodes = self.nodes.borrow();
            for (id, g) in &leaves {
                if let Op::Param(p) = &nodes[*id].op {
                    p.accumulate_grad(g)?;
                }
            }
        }
        if root == target {
            return Ok(cotangent.clone());
        }
        result.ok_or(Error::NoDependency)
    }

    fn check_owner(&self, v: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVariable)
        }
    }

    fn propagate(&self, root: NodeId, seed: Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let mut unused = None;
        self.propagate_until(root, seed, None, &mut unused)
    }

    /// Reverse sweep from `root`. Returns the gradients that reached leaf
    /// records; if `capture` names a node, its gradient is stored in `out`.
    fn propagate_until(
        &self,
        root: NodeId,
        seed: Tensor<T>,
        capture: Option<NodeId>,
        out: &mut Option<Tensor<T>>,
    ) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(seed);
        let mut leaves = Vec::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if Some(id) == capture {
                *out = Some(g.clone());
            }
            let node = &nodes[id];
            debug_assert_eq!(node.shape, g.shape());
            match &node.op {
                Op::Param(_) | Op::Input => leaves.push((id, g)),
                op => backward_rule(op, &nodes, g, &mut |src, contrib| {
                    if let Some(s) = src {
                        match &mut grads[s] {
                            Some(acc) => acc.add_assign(&contrib)?,
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                    Ok(())
                })?,
            }
        }
        // Leaves are visited from the highest id down; report them in
        // creation order so accumulation order is stable.
        leaves.reverse();
        Ok(leaves)
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Whether a gradient can flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Drop the record link, keeping the value.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant_rc(Rc::clone(&self.value))
    }

    pub(crate) fn src(&self) -> Src {
        self.node
    }
}

fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Reduce a gradient to a scalar-broadcast operand's shape.
fn reduce_to<T: Float>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::from_parts(shape.to_vec(), vec![g.sum()])
    }
}

fn backward_rule<T: Float>(
    op: &Op<T>,
    nodes: &[Node<T>],
    g: Tensor<T>,
    emit: &mut dyn FnMut(Src, Tensor<T>) -> Result<()>,
) -> Result<()> {
    match op {
        Op::Param(_) | Op::Input => unreachable!(),
        Op::Binary {
            kind,
            a,
            b,
            av,
            bv,
            a_shape,
            b_shape,
        } => {
            let (ash, bsh) = (a_shape.as_slice(), b_shape.as_slice());
            // Broadcast value lookup for the scalar side.
            let at = |i: usize| {
                let v = av.as_ref().expect("saved lhs");
                if v.len() == 1 {
                    v.data()[0]
                } else {
                    v.data()[i]
                }
            };
            let bt = |i: usize| {
                let v = bv.as_ref().expect("saved rhs");
                if v.len() == 1 {
                    v.data()[0]
                } else {
                    v.data()[i]
                }
            };
            let gd = g.data();
            match kind {
                BinKind::Add => {
                    if b.is_some() {
                        emit(*b, reduce_to(g.clone(), bsh))?;
                    }
                    if a.is_some() {
                        emit(*a, reduce_to(g, ash))?;
                    }
                }
                BinKind::Sub => {
                    if b.is_some() {
                        emit(*b, reduce_to(g.map(|v| -v), bsh))?;
                    }
                    if a.is_some() {
                        emit(*a, reduce_to(g, ash))?;
                    }
                }
                BinKind::Mul => {
                    if a.is_some() {
                        let ga = Tensor::from_fn(g.shape(), |i| gd[i] * bt(i));
                        emit(*a, reduce_to(ga, ash))?;
                    }
                    if b.is_some() {
                        let gb = Tensor::from_fn(g.shape(), |i| gd[i] * at(i));
                        emit(*b, reduce_to(gb, bsh))?;
                    }
                }
                BinKind::Div => {
                    if a.is_some() {
                        let ga = Tensor::from_fn(g.shape(), |i| gd[i] / bt(i));
                        emit(*a, reduce_to(ga, ash))?;
                    }
                    if b.is_some() {
                        let gb = Tensor::from_fn(g.shape(), |i| {
                            let d = bt(i);
                            -gd[i] * at(i) / (d * d)
                        });
                        emit(*b, reduce_to(gb, bsh))?;
                    }
                }
            }
        }
        Op::Scale { a, factor } => {
            let f = *factor;
            emit(*a, g.map(|v| v * f))?;
        }
        Op::Offset { a } => emit(*a, g)?,
        Op::Unary { kind, a, saved } => {
            let gd = g.data();
            let s = saved.as_ref().map(|t| t.data());
            let out = match kind {
                UnaryKind::Neg => g.map(|v| -v),
                UnaryKind::Abs => {
                    let x = s.expect("abs saves input");
                    Tensor::from_fn(g.shape(), |i| gd[i] * sign(x[i]))
                }
                UnaryKind::Exp => {
                    let y = s.expect("exp saves output");
                    Tensor::from_fn(g.shape(), |i| gd[i] * y[i])
                }
                UnaryKind::Log => {
                    let x = s.expect("log saves input");
                    Tensor::from_fn(g.shape(), |i| gd[i] / x[i])
                }
                UnaryKind::Sqrt => {
                    let y = s.expect("sqrt saves output");
                    let two = T::from_f64(2.0);
                    Tensor::from_fn(g.shape(), |i| gd[i] / (two * y[i]))
                }
                UnaryKind::Tanh => {
                    let y = s.expect("tanh saves output");
                    Tensor::from_fn(g.shape(), |i| gd[i] * (T::one() - y[i] * y[i]))
                }
                UnaryKind::Sigmoid => {
                    let y = s.expect("sigmoid saves output");
                    Tensor::from_fn(g.shape(), |i| gd[i] * y[i] * (T::one() - y[i]))
                }
                UnaryKind::Silu => {
                    let x = s.expect("silu saves input");
                    Tensor::from_fn(g.shape(), |i| {
                        let sg = sigmoid(x[i]);
                        gd[i] * (sg + x[i] * sg * (T::one() - sg))
                    })
                }
            };
            emit(*a, out)?;
        }
        Op::MatMul { a, b, av, bv } => {
            if let (Some(_), Some(av)) = (b, av) {
                emit(*b, gemm(av, true, &g, false))?;
            }
            if let (Some(_), Some(bv)) = (a, bv) {
                emit(*a, gemm(&g, false, bv, true))?;
            }
        }
        Op::AddRow { a, row } => {
            if row.is_some() {
                let cols = g.shape()[1];
                let mut acc = vec![T::zero(); cols];
                for r in g.data().chunks_exact(cols) {
                    for (s, &v) in acc.iter_mut().zip(r) {
                        *s += v;
                    }
                }
                let rshape = nodes_shape(nodes, *row);
                emit(*row, Tensor::from_parts(rshape, acc))?;
            }
            if a.is_some() {
                emit(*a, g)?;
            }
        }
        Op::MulRows { a, scales } => {
            let cols = g.shape()[1];
            let mut out = g;
            for (r, &s) in out.data_mut().chunks_exact_mut(cols).zip(scales.iter()) {
                for v in r {
                    *v *= s;
                }
            }
            emit(*a, out)?;
        }
        Op::Sum { a } => {
            let v = g.item();
            emit(*a, Tensor::full(&nodes_shape(nodes, *a), v))?;
        }
        Op::Mean { a } => {
            let shape = nodes_shape(nodes, *a);
            let n = T::from_f64(shape.iter().product::<usize>() as f64);
            emit(*a, Tensor::full(&shape, g.item() / n))?;
        }
        Op::SumSq { a, av } => {
            let two_g = T::from_f64(2.0) * g.item();
            emit(*a, av.map(|x| two_g * x))?;
        }
        Op::L1 { a, av } => {
            let gv = g.item();
            emit(*a, av.map(|x| gv * sign(x)))?;
        }
        Op::Concat { parts, axis, sizes } => {
            let shape = g.shape().to_vec();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for (src, &size) in parts.iter().zip(sizes) {
                if src.is_some() {
                    let mut pshape = shape.clone();
                    pshape[*axis] = size;
                    let mut data = Vec::with_capacity(outer * size * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[start..start + size * inner]);
                    }
                    emit(*src, Tensor::from_parts(pshape, data))?;
                }
                offset += size;
            }
        }
        Op::Reshape { a } => {
            let shape = nodes_shape(nodes, *a);
            emit(*a, g.reshaped(&shape)?)?;
        }
        Op::GatherRows { a, indices, rows } => {
            let cols = g.shape()[1];
            let mut out = vec![T::zero(); rows * cols];
            for (j, &i) in indices.iter().enumerate() {
                let dst = &mut out[i * cols..(i + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(&g.data()[j * cols..(j + 1) * cols]) {
                    *d += v;
                }
            }
            emit(*a, Tensor::from_parts(vec![*rows, cols], out))?;
        }
        Op::BceLogits { a, av, labels } => {
            let n = T::from_f64(av.len() as f64);
            let gv = g.item() / n;
            let x = av.data();
            emit(
                *a,
                Tensor::from_fn(av.shape(), |i| gv * (sigmoid(x[i]) - labels[i])),
            )?;
        }
        Op::CrossEntropy { a, probs, classes } => {
            let rows = probs.shape()[0];
            let k = probs.shape()[1];
            let gv = g.item() / T::from_f64(rows as f64);
            let mut out = probs.map(|p| p * gv);
            for (r, &c) in classes.iter().enumerate() {
                out.data_mut()[r * k + c] -= gv;
            }
            emit(*a, out)?;
        }
    }
    Ok(())
}

fn nodes_shape<T: Float>(nodes: &[Node<T>], src: Src) -> Vec<usize> {
    nodes[src.expect("tracked operand")].shape.clone()
}
