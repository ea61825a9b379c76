//! Tape-based reverse-mode differentiation.
//!
//! Operations record onto an append-only arena (`Tape`) as they are
//! evaluated; `grad` replays the arena in reverse. Every backward rule is
//! expressed in terms of tape operations, so a gradient computed with
//! `create_graph` is itself part of the graph and can be differentiated
//! again. This is what lets a training objective contain input gradients
//! that are then differentiated with respect to parameters.
//!
//! Numeric faults (NaN/Inf outputs) do not panic: the tape latches the first
//! faulting node and `Tape::check` / `grad` surface it as an error with node
//! provenance. Shape mismatches are caller bugs and panic.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::tensor::{strides, Scalar, Tensor};

// ── Geometry of an unfold/fold pair ──────────────────────────────────────

/// Sliding-window geometry shared by `unfold` (im2col) and its adjoint
/// `fold` (col2im). Zero padding, square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn validate(&self) {
        assert!(self.kernel >= 1 && self.stride >= 1, "bad conv geometry {self:?}");
        assert!(
            self.height + 2 * self.padding >= self.kernel
                && self.width + 2 * self.padding >= self.kernel,
            "kernel larger than padded input: {self:?}"
        );
    }
}

// ── Recorded operations ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
enum Op {
    /// Differentiable leaf (input or parameter).
    Leaf,
    /// Non-differentiable leaf; also used for detached gradients and masks.
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(Scalar),
    Matmul,
    Transpose,
    Reshape,
    Permute(Rc<Vec<usize>>),
    SumAll,
    /// Scalar broadcast up to a shape. Adjoint of `SumAll`.
    BroadcastTo,
    SumAxis0,
    SumAxis1,
    RepeatAxis0,
    RepeatAxis1,
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Abs,
    Sign,
    Clamp(Scalar, Scalar),
    Gather(Rc<Vec<usize>>),
    /// `[b] -> [b, classes]` placing element `i` at column `labels[i]`.
    Scatter(Rc<Vec<usize>>),
    Unfold(ConvDims),
    Fold(ConvDims),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::SumAll => "sum",
            Op::BroadcastTo => "broadcast",
            Op::SumAxis0 => "sum_axis0",
            Op::SumAxis1 => "sum_axis1",
            Op::RepeatAxis0 => "repeat_axis0",
            Op::RepeatAxis1 => "repeat_axis1",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Sign => "sign",
            Op::Clamp(_, _) => "clamp",
            Op::Gather(_) => "gather",
            Op::Scatter(_) => "scatter",
            Op::Unfold(_) => "unfold",
            Op::Fold(_) => "fold",
        }
    }
}

struct NodeRec {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Provenance of the first non-finite value seen on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub node: usize,
    pub op: &'static str,
}

struct TapeInner {
    nodes: Vec<NodeRec>,
    fault: Option<Fault>,
    backward_passes: usize,
}

/// Append-only computation record. Cheap to clone (shared handle);
/// single-threaded by construction — distinct tapes may live on distinct
/// threads, tensors extracted from a tape move freely.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                fault: None,
                backward_passes: 0,
            })),
        }
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Constant, vec![], value, false)
    }

    /// Differentiable leaf (model input or parameter).
    pub fn input(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `grad` calls issued against this tape so far.
    pub fn backward_passes(&self) -> usize {
        self.inner.borrow().backward_passes
    }

    pub fn fault(&self) -> Option<Fault> {
        self.inner.borrow().fault
    }

    /// Errors if any recorded op has produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match self.fault() {
            None => Ok(()),
            Some(f) => Err(Error::numeric(format!(
                "non-finite value produced by node {} ({})",
                f.node, f.op
            ))),
        }
    }

    fn push(&self, op: Op, parents: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        if inner.fault.is_none() && !value.is_all_finite() {
            inner.fault = Some(Fault { node: idx, op: op.name() });
        }
        inner.nodes.push(NodeRec { op, parents, value, requires_grad });
        Var { tape: self.clone(), idx }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one node of a tape: a value plus its position in the graph.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        write!(f, "Var#{}({}, shape {:?})", self.idx, node.op.name(), node.value.shape())
    }
}

impl Var {
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    /// Monotone creation index; doubles as the topological generation.
    pub fn generation(&self) -> usize {
        self.idx
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.idx].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    fn rg(&self, other: &Var) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    fn assert_shared_tape(&self, other: &Var) {
        assert!(self.tape.same_tape(&other.tape), "operands live on different tapes");
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    fn unary(&self, op: Op, value: Tensor) -> Var {
        let rg = self.requires_grad();
        self.tape.push(op, vec![self.idx], value, rg)
    }

    fn binary(&self, other: &Var, op: Op, value: Tensor) -> Var {
        self.assert_shared_tape(other);
        let rg = self.rg(other);
        self.tape.push(op, vec![self.idx, other.idx], value, rg)
    }

    // ── Elementwise arithmetic ───────────────────────────────────────────

    pub fn add(&self, other: &Var) -> Var {
        let v = self.with_value(|a| other.with_value(|b| a.add(b)));
        self.binary(other, Op::Add, v)
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.with_value(|a| other.with_value(|b| a.sub(b)));
        self.binary(other, Op::Sub, v)
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.with_value(|a| other.with_value(|b| a.mul_elem(b)));
        self.binary(other, Op::Mul, v)
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self.with_value(|a| other.with_value(|b| a.div_elem(b)));
        self.binary(other, Op::Div, v)
    }

    pub fn neg(&self) -> Var {
        let v = self.with_value(|a| a.neg());
        self.unary(Op::Neg, v)
    }

    pub fn scale(&self, c: Scalar) -> Var {
        let v = self.with_value(|a| a.scale(c));
        self.unary(Op::Scale(c), v)
    }

    // ── Linear algebra and data movement ─────────────────────────────────

    pub fn matmul(&self, other: &Var) -> Var {
        let v = self.with_value(|a| other.with_value(|b| a.matmul(b)));
        self.binary(other, Op::Matmul, v)
    }

    pub fn transpose(&self) -> Var {
        let v = self.with_value(|a| a.transposed());
        self.unary(Op::Transpose, v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.with_value(|a| a.reshaped(shape));
        self.unary(Op::Reshape, v)
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let v = self.with_value(|a| a.permuted(axes));
        self.unary(Op::Permute(Rc::new(axes.to_vec())), v)
    }

    // ── Reductions and broadcasts ────────────────────────────────────────

    /// Sum of all elements, rank-0 result.
    pub fn sum_all(&self) -> Var {
        let v = self.with_value(|a| Tensor::scalar(a.sum()));
        self.unary(Op::SumAll, v)
    }

    /// Mean of all elements, rank-0 result.
    pub fn mean_all(&self) -> Var {
        let n = self.len();
        assert!(n > 0, "mean of empty tensor");
        self.sum_all().scale(1.0 / n as Scalar)
    }

    /// Broadcast a one-element tensor up to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let v = self.with_value(|a| {
            assert_eq!(a.len(), 1, "broadcast_to needs a one-element tensor");
            Tensor::full(shape, a.item())
        });
        self.unary(Op::BroadcastTo, v)
    }

    /// `[r, c] -> [c]`, summing over rows.
    pub fn sum_axis0(&self) -> Var {
        let v = self.with_value(|a| {
            assert_eq!(a.rank(), 2, "sum_axis0 needs rank 2");
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, &x) in out.iter_mut().zip(a.row(i)) {
                    *o += x;
                }
            }
            Tensor::from_vec(vec![c], out)
        });
        self.unary(Op::SumAxis0, v)
    }

    /// `[r, c] -> [r]`, summing over columns.
    pub fn sum_axis1(&self) -> Var {
        let v = self.with_value(|a| {
            assert_eq!(a.rank(), 2, "sum_axis1 needs rank 2");
            let r = a.shape()[0];
            let out = (0..r).map(|i| a.row(i).iter().sum()).collect();
            Tensor::from_vec(vec![r], out)
        });
        self.unary(Op::SumAxis1, v)
    }

    /// `[c] -> [rows, c]`, repeating the vector as every row.
    pub fn repeat_axis0(&self, rows: usize) -> Var {
        let v = self.with_value(|a| {
            assert_eq!(a.rank(), 1, "repeat_axis0 needs rank 1");
            let c = a.shape()[0];
            let mut out = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                out.extend_from_slice(a.data());
            }
            Tensor::from_vec(vec![rows, c], out)
        });
        self.unary(Op::RepeatAxis0, v)
    }

    /// `[r] -> [r, cols]`, repeating each element along its row.
    pub fn repeat_axis1(&self, cols: usize) -> Var {
        let v = self.with_value(|a| {
            assert_eq!(a.rank(), 1, "repeat_axis1 needs rank 1");
            let r = a.shape()[0];
            let mut out = Vec::with_capacity(r * cols);
            for &x in a.data() {
                out.extend(std::iter::repeat(x).take(cols));
            }
            Tensor::from_vec(vec![r, cols], out)
        });
        self.unary(Op::RepeatAxis1, v)
    }

    // ── Nonlinearities ───────────────────────────────────────────────────

    /// Subgradient convention: relu'(0) = 0.
    pub fn relu(&self) -> Var {
        let v = self.with_value(|a| a.map(|x| if x > 0.0 { x } else { 0.0 }));
        self.unary(Op::Relu, v)
    }

    pub fn tanh(&self) -> Var {
        let v = self.with_value(|a| a.map(Scalar::tanh));
        self.unary(Op::Tanh, v)
    }

    pub fn exp(&self) -> Var {
        let v = self.with_value(|a| a.map(Scalar::exp));
        self.unary(Op::Exp, v)
    }

    pub fn log(&self) -> Var {
        let v = self.with_value(|a| a.map(Scalar::ln));
        self.unary(Op::Log, v)
    }

    pub fn sqrt(&self) -> Var {
        let v = self.with_value(|a| a.map(Scalar::sqrt));
        self.unary(Op::Sqrt, v)
    }

    /// Subgradient convention: abs'(0) = 0.
    pub fn abs(&self) -> Var {
        let v = self.with_value(|a| a.map(Scalar::abs));
        self.unary(Op::Abs, v)
    }

    /// Zero gradient everywhere.
    pub fn sign(&self) -> Var {
        let v = self.with_value(|a| a.map(sign_of));
        self.unary(Op::Sign, v)
    }

    /// Gradient is 1 strictly inside `(lo, hi)`, 0 outside and at the bounds.
    pub fn clamp(&self, lo: Scalar, hi: Scalar) -> Var {
        assert!(lo <= hi, "clamp bounds inverted: {lo} > {hi}");
        let v = self.with_value(|a| a.map(|x| x.max(lo).min(hi)));
        self.unary(Op::Clamp(lo, hi), v)
    }

    pub fn clamp_min(&self, lo: Scalar) -> Var {
        self.clamp(lo, Scalar::INFINITY)
    }

    pub fn clamp_max(&self, hi: Scalar) -> Var {
        self.clamp(Scalar::NEG_INFINITY, hi)
    }

    // ── Indexed access ───────────────────────────────────────────────────

    /// `[b, c] -> [b]`, picking `x[i, labels[i]]`.
    pub fn gather(&self, labels: &[usize]) -> Var {
        let v = self.with_value(|a| {
            assert_eq!(a.rank(), 2, "gather needs rank 2");
            let (b, c) = (a.shape()[0], a.shape()[1]);
            assert_eq!(labels.len(), b, "gather labels length {} vs batch {b}", labels.len());
            let out = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    assert!(l < c, "gather label {l} out of {c} classes");
                    a.row(i)[l]
                })
                .collect();
            Tensor::from_vec(vec![b], out)
        });
        self.unary(Op::Gather(Rc::new(labels.to_vec())), v)
    }

    /// `[b] -> [b, classes]`, scattering element `i` into column `labels[i]`.
    pub fn scatter(&self, labels: &[usize], classes: usize) -> Var {
        let v = self.with_value(|a| {
            assert_eq!(a.rank(), 1, "scatter needs rank 1");
            let b = a.shape()[0];
            assert_eq!(labels.len(), b, "scatter labels length mismatch");
            let mut out = vec![0.0; b * classes];
            for (i, (&x, &l)) in a.data().iter().zip(labels).enumerate() {
                assert!(l < classes, "scatter label {l} out of {classes} classes");
                out[i * classes + l] = x;
            }
            Tensor::from_vec(vec![b, classes], out)
        });
        self.unary(Op::Scatter(Rc::new(labels.to_vec())), v)
    }

    // ── Sliding windows (conv building blocks) ───────────────────────────

    /// im2col: `[b, c, h, w] -> [b*oh*ow, c*k*k]` with zero padding.
    pub fn unfold(&self, kernel: usize, stride: usize, padding: usize) -> Var {
        let dims = self.with_value(|a| {
            assert_eq!(a.rank(), 4, "unfold needs [b, c, h, w], got {:?}", a.shape());
            ConvDims {
                batch: a.shape()[0],
                channels: a.shape()[1],
                height: a.shape()[2],
                width: a.shape()[3],
                kernel,
                stride,
                padding,
            }
        });
        dims.validate();
        let v = self.with_value(|a| unfold_value(a, dims));
        self.unary(Op::Unfold(dims), v)
    }

    /// col2im: scatter-add of `[b*oh*ow, c*k*k]` back to `[b, c, h, w]`.
    pub fn fold(&self, dims: ConvDims) -> Var {
        dims.validate();
        let v = self.with_value(|a| fold_value(a, dims));
        self.unary(Op::Fold(dims), v)
    }

    // ── Composite helpers ────────────────────────────────────────────────

    /// Inner product of two equally-shaped tensors, rank-0 result.
    pub fn dot(&self, other: &Var) -> Var {
        self.mul(other).sum_all()
    }

    /// Euclidean norm, rank-0 result. Backward at the exact zero vector is a
    /// numeric fault; guard with `clamp_min` on the squared sum if needed.
    pub fn l2_norm(&self) -> Var {
        self.mul(self).sum_all().sqrt()
    }

    /// Sum of absolute values, rank-0 result.
    pub fn l1_norm(&self) -> Var {
        self.abs().sum_all()
    }
}

fn sign_of(x: Scalar) -> Scalar {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn unfold_value(a: &Tensor, d: ConvDims) -> Tensor {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.rows() * d.patch_len()];
    let in_strides = strides(a.shape());
    let mut row = 0usize;
    for b in 0..d.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * d.patch_len();
                let mut col = 0usize;
                for c in 0..d.channels {
                    for ky in 0..d.kernel {
                        for kx in 0..d.kernel {
                            let y = (oy * d.stride + ky) as isize - d.padding as isize;
                            let x = (ox * d.stride + kx) as isize - d.padding as isize;
                            if y >= 0 && x >= 0 && (y as usize) < d.height && (x as usize) < d.width
                            {
                                let src = b * in_strides[0]
                                    + c * in_strides[1]
                                    + y as usize * in_strides[2]
                                    + x as usize;
                                out[base + col] = a.data()[src];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(vec![d.rows(), d.patch_len()], out)
}

fn fold_value(a: &Tensor, d: ConvDims) -> Tensor {
    assert_eq!(
        a.shape(),
        &[d.rows(), d.patch_len()],
        "fold input shape mismatch for {d:?}"
    );
    let (oh, ow) = (d.out_h(), d.out_w());
    let shape = vec![d.batch, d.channels, d.height, d.width];
    let out_strides = strides(&shape);
    let mut out = vec![0.0; d.batch * d.channels * d.height * d.width];
    let mut row = 0usize;
    for b in 0..d.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * d.patch_len();
                let mut col = 0usize;
                for c in 0..d.channels {
                    for ky in 0..d.kernel {
                        for kx in 0..d.kernel {
                            let y = (oy * d.stride + ky) as isize - d.padding as isize;
                            let x = (ox * d.stride + kx) as isize - d.padding as isize;
                            if y >= 0 && x >= 0 && (y as usize) < d.height && (x as usize) < d.width
                            {
                                let dst = b * out_strides[0]
                                    + c * out_strides[1]
                                    + y as usize * out_strides[2]
                                    + x as usize;
                                out[dst] += a.data()[base + col];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

// ── Backward pass ────────────────────────────────────────────────────────

/// A request to differentiate a scalar `output` with respect to `wrt` nodes.
///
/// With `create_graph` set the returned gradients are live graph nodes that
/// can be differentiated again; otherwise they are detached constants.
pub struct GradRequest {
    pub output: Var,
    pub wrt: Vec<Var>,
    pub create_graph: bool,
}

/// Reverse-mode gradients of `req.output` with respect to each `wrt` node.
///
/// Nodes the output does not depend on get a zero tensor of matching shape.
/// Accumulation order is fixed by node generation index, so repeated runs of
/// an identical tape produce bitwise-identical gradients.
pub fn grad(req: &GradRequest) -> Result<Vec<Var>> {
    let tape = req.output.tape();
    tape.check()?;
    if req.output.len() != 1 {
        return Err(Error::contract(format!(
            "grad output must be scalar, got shape {:?}",
            req.output.shape()
        )));
    }
    for w in &req.wrt {
        assert!(tape.same_tape(&w.tape), "wrt node lives on a different tape");
    }
    tape.inner.borrow_mut().backward_passes += 1;

    let out_idx = req.output.idx;
    // Downward reachability from the output, restricted to differentiable
    // nodes; everything else is pruned from the sweep.
    let mut needed = vec![false; out_idx + 1];
    if req.output.requires_grad() {
        needed[out_idx] = true;
        let inner = tape.inner.borrow();
        for i in (0..=out_idx).rev() {
            if !needed[i] {
                continue;
            }
            for &p in &inner.nodes[i].parents {
                if inner.nodes[p].requires_grad {
                    needed[p] = true;
                }
            }
        }
    }

    let mut adjoint: Vec<Option<Var>> = vec![None; out_idx + 1];
    if needed[out_idx] {
        let seed = tape.constant(Tensor::ones(&req.output.shape()));
        adjoint[out_idx] = Some(seed);
    }
    for i in (0..=out_idx).rev() {
        if !needed[i] {
            continue;
        }
        let Some(adj) = adjoint[i].clone() else { continue };
        let (op, parents) = {
            let inner = tape.inner.borrow();
            (inner.nodes[i].op.clone(), inner.nodes[i].parents.clone())
        };
        for (slot, &p) in parents.iter().enumerate() {
            let p_requires = tape.inner.borrow().nodes[p].requires_grad;
            if !p_requires {
                continue;
            }
            let Some(contrib) = vjp(&tape, &op, i, &parents, slot, &adj) else { continue };
            debug_assert_eq!(
                contrib.shape(),
                Var { tape: tape.clone(), idx: p }.shape(),
                "vjp shape mismatch for {}",
                op.name()
            );
            adjoint[p] = Some(match adjoint[p].take() {
                Some(existing) => existing.add(&contrib),
                None => contrib,
            });
        }
    }

    let mut results = Vec::with_capacity(req.wrt.len());
    for w in &req.wrt {
        let found = if w.idx <= out_idx { adjoint[w.idx].clone() } else { None };
        let g = match found {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&w.shape())),
        };
        results.push(if req.create_graph { g } else { tape.constant(g.value()) });
    }
    tape.check()?;
    Ok(results)
}

/// Vector-Jacobian product of one op with respect to one parent slot,
/// expressed as tape operations so it can itself be differentiated.
/// `None` means a structurally zero contribution.
fn vjp(tape: &Tape, op: &Op, node: usize, parents: &[usize], slot: usize, adj: &Var) -> Option<Var> {
    let var = |idx: usize| Var { tape: tape.clone(), idx };
    let parent = |s: usize| var(parents[s]);
    let out = || var(node);
    Some(match op {
        Op::Leaf | Op::Constant => unreachable!("leaves have no parents"),
        Op::Add => adj.clone(),
        Op::Sub => {
            if slot == 0 {
                adj.clone()
            } else {
                adj.neg()
            }
        }
        Op::Mul => adj.mul(&parent(1 - slot)),
        Op::Div => {
            if slot == 0 {
                adj.div(&parent(1))
            } else {
                // d(a/b)/db = -a/b^2 = -(a/b)/b
                adj.neg().mul(&out()).div(&parent(1))
            }
        }
        Op::Neg => adj.neg(),
        Op::Scale(c) => adj.scale(*c),
        Op::Matmul => {
            if slot == 0 {
                adj.matmul(&parent(1).transpose())
            } else {
                parent(0).transpose().matmul(adj)
            }
        }
        Op::Transpose => adj.transpose(),
        Op::Reshape => adj.reshape(&parent(0).shape()),
        Op::Permute(axes) => {
            let mut inverse = vec![0usize; axes.len()];
            for (d, &a) in axes.iter().enumerate() {
                inverse[a] = d;
            }
            adj.permute(&inverse)
        }
        Op::SumAll => adj.broadcast_to(&parent(0).shape()),
        Op::BroadcastTo => adj.sum_all().reshape(&parent(0).shape()),
        Op::SumAxis0 => adj.repeat_axis0(parent(0).shape()[0]),
        Op::SumAxis1 => adj.repeat_axis1(parent(0).shape()[1]),
        Op::RepeatAxis0 => adj.sum_axis0(),
        Op::RepeatAxis1 => adj.sum_axis1(),
        Op::Relu => {
            let mask = parent(0).with_value(|x| x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            adj.mul(&tape.constant(mask))
        }
        Op::Tanh => {
            // d tanh = 1 - tanh^2, phrased through the recorded output so the
            // rule stays differentiable.
            let y = out();
            let ones = tape.constant(Tensor::ones(&y.shape()));
            adj.mul(&ones.sub(&y.mul(&y)))
        }
        Op::Exp => adj.mul(&out()),
        Op::Log => adj.div(&parent(0)),
        Op::Sqrt => adj.div(&out().scale(2.0)),
        Op::Abs => {
            let mask = parent(0).with_value(|x| x.map(sign_of));
            adj.mul(&tape.constant(mask))
        }
        Op::Sign => return None,
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let mask = parent(0).with_value(|x| {
                x.map(|v| if v > lo && v < hi { 1.0 } else { 0.0 })
            });
            adj.mul(&tape.constant(mask))
        }
        Op::Gather(labels) => adj.scatter(labels, parent(0).shape()[1]),
        Op::Scatter(labels) => adj.gather(labels),
        Op::Unfold(dims) => adj.fold(*dims),
        Op::Fold(dims) => adj.unfold(dims.kernel, dims.stride, dims.padding),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(req: GradRequest) -> Tensor {
        grad(&req).unwrap()[0].value()
    }

    #[test]
    fn square_gradient() {
        // f(x) = x * x, x = 3 -> df/dx = 6
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let f = x.mul(&x);
        let g = scalar_grad(GradRequest { output: f, wrt: vec![x], create_graph: false });
        assert_eq!(g.item(), 6.0);
    }

    #[test]
    fn cube_second_derivative() {
        // f(x) = x^3 at x = 2: f' = 12, f'' = 12.
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(2.0));
        let f = x.mul(&x).mul(&x);
        let first = grad(&GradRequest { output: f, wrt: vec![x.clone()], create_graph: true })
            .unwrap()
            .remove(0);
        assert!((first.value().item() - 12.0).abs() < 1e-12);
        let second =
            grad(&GradRequest { output: first, wrt: vec![x], create_graph: false }).unwrap();
        assert!((second[0].value().item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.0));
        let y = tape.input(Tensor::from_vec(vec![2], vec![5.0, 6.0]));
        let f = x.mul(&x);
        let g = grad(&GradRequest { output: f, wrt: vec![y], create_graph: false }).unwrap();
        assert_eq!(g[0].value(), Tensor::zeros(&[2]));
    }

    #[test]
    fn non_scalar_output_is_a_contract_violation() {
        let tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let f = x.mul(&x);
        let err = grad(&GradRequest { output: f, wrt: vec![x], create_graph: false }).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn nan_sets_fault_with_provenance() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(-1.0));
        let y = x.sqrt(); // NaN
        let err = tape.check().unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("sqrt"), "{msg}"),
            other => panic!("expected numeric fault, got {other}"),
        }
        let err = grad(&GradRequest { output: y.sum_all(), wrt: vec![x], create_graph: false })
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn sign_and_clamp_subgradients() {
        let tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![4], vec![-2.0, 0.0, 0.5, 2.0]));
        let s = x.sign();
        assert_eq!(s.value().data(), &[-1.0, 0.0, 1.0, 1.0]);
        let g = scalar_grad(GradRequest {
            output: s.sum_all(),
            wrt: vec![x.clone()],
            create_graph: false,
        });
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.0]);

        let c = x.clamp(0.0, 1.0);
        assert_eq!(c.value().data(), &[0.0, 0.0, 0.5, 1.0]);
        let g = scalar_grad(GradRequest { output: c.sum_all(), wrt: vec![x], create_graph: false });
        // zero outside and at the bounds, one strictly inside
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_zero_subgradient_at_kink() {
        let tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]));
        let g = scalar_grad(GradRequest {
            output: x.relu().sum_all(),
            wrt: vec![x],
            create_graph: false,
        });
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_gradients_are_transposed_products() {
        let tape = Tape::new();
        let a = tape.input(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let f = a.matmul(&b).sum_all();
        let g = grad(&GradRequest { output: f, wrt: vec![a, b], create_graph: false }).unwrap();
        // d/dA sum(AB) = ones @ B^T, d/dB = A^T @ ones
        assert_eq!(g[0].value().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g[1].value().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gather_scatter_round_trip_gradient() {
        let tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let picked = x.gather(&[2, 0]);
        assert_eq!(picked.value().data(), &[0.3, 0.4]);
        let g = scalar_grad(GradRequest {
            output: picked.sum_all(),
            wrt: vec![x],
            create_graph: false,
        });
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn unfold_fold_are_adjoint() {
        // <unfold(x), y> == <x, fold(y)> for random-ish dense tensors.
        let dims = ConvDims {
            batch: 2,
            channels: 2,
            height: 4,
            width: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let x = Tensor::from_vec(
            vec![2, 2, 4, 4],
            (0..64).map(|i| (i as Scalar * 0.37).sin()).collect(),
        );
        let rows = dims.batch * dims.out_h() * dims.out_w();
        let cols = dims.channels * dims.kernel * dims.kernel;
        let y = Tensor::from_vec(
            vec![rows, cols],
            (0..rows * cols).map(|i| (i as Scalar * 0.11).cos()).collect(),
        );
        let ux = unfold_value(&x, dims);
        let fy = fold_value(&y, dims);
        let lhs: Scalar = ux.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: Scalar = x.data().iter().zip(fy.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.input(Tensor::from_vec(
                vec![3, 3],
                (0..9).map(|i| ((i * 7 % 5) as Scalar) * 0.31 + 0.1).collect(),
            ));
            let w = tape.input(Tensor::from_vec(
                vec![3, 3],
                (0..9).map(|i| ((i * 3 % 7) as Scalar) * 0.17 - 0.4).collect(),
            ));
            let f = x.matmul(&w).tanh().mul(&x).sum_all();
            let g =
                grad(&GradRequest { output: f, wrt: vec![x, w], create_graph: false }).unwrap();
            (g[0].value(), g[1].value())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn backward_pass_counter_increments() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(2.0));
        let f = x.mul(&x);
        assert_eq!(tape.backward_passes(), 0);
        let _ = grad(&GradRequest { output: f.clone(), wrt: vec![x.clone()], create_graph: false })
            .unwrap();
        let _ = grad(&GradRequest { output: f, wrt: vec![x], create_graph: false }).unwrap();
        assert_eq!(tape.backward_passes(), 2);
    }

    #[test]
    fn detached_gradients_do_not_extend_the_graph() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let f = x.mul(&x);
        let g = grad(&GradRequest { output: f, wrt: vec![x.clone()], create_graph: false })
            .unwrap()
            .remove(0);
        assert!(!g.requires_grad());
        let gg = grad(&GradRequest { output: g, wrt: vec![x], create_graph: false }).unwrap();
        assert_eq!(gg[0].value(), Tensor::scalar(0.0));
    }
}
