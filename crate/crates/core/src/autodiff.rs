//! Reverse-mode automatic differentiation on a tape of tensor ops.
//!
//! A [`Tape`] is an append-only arena of nodes. Each op records its output
//! value plus, per differentiable input, a closure that pushes the
//! vector-Jacobian product into that input's gradient buffer. [`Tape::backward`]
//! walks nodes in reverse creation order — creation order is already
//! topological — so every node's gradient is complete before it is propagated.
//! Gradients accumulate additively across fan-out and across repeated
//! `backward` calls.
//!
//! [`Var`] is a copyable handle (tape reference + node index); all math goes
//! through it. Ops that can fail on shapes return [`TapeError`] naming the op
//! and the shapes involved.

use std::cell::RefCell;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: expected column vector, got {shape:?}")]
    NotVector { op: &'static str, shape: (usize, usize) },
    #[error("{op}: empty input list")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of bounds for {bound}")]
    OutOfBounds { op: &'static str, index: usize, bound: usize },
    #[error("backward root must be scalar, got {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("backward already ran on this tape")]
    BackwardTwice,
}

/// Adds an edge's vector-Jacobian product into a parent's grad buffer.
type VjpFn = Box<dyn Fn(&Tensor, &mut Tensor)>;

struct Parent {
    id: usize,
    push: VjpFn,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    parents: Vec<Parent>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    differentiated: std::cell::Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, requires_grad: bool, parents: Vec<Parent>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad: None, requires_grad, parents });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Node that does not take gradients (input data, fixed context).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Vec::new())
    }

    /// Differentiable leaf (a parameter bound onto this tape).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Vec::new())
    }

    /// Concatenates column vectors top to bottom.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Empty { op: "concat" });
        }
        let mut data = Vec::new();
        let mut requires = false;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            debug_assert!(std::ptr::eq(self, p.tape), "var from another tape");
            let v = p.value();
            if !v.is_vector() {
                return Err(TapeError::NotVector { op: "concat", shape: v.shape() });
            }
            spans.push((p.id, data.len(), v.rows(), p.requires_grad()));
            data.extend_from_slice(v.data());
            requires |= p.requires_grad();
        }
        let out = Tensor::vector(data);
        let parents = if requires {
            spans
                .into_iter()
                .filter(|&(_, _, _, req)| req)
                .map(|(id, offset, len, _)| Parent {
                    id,
                    push: Box::new(move |g: &Tensor, pg: &mut Tensor| {
                        for i in 0..len {
                            pg.data_mut()[i] += g.data()[offset + i];
                        }
                    }),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(self.push(out, requires, parents))
    }

    /// Elementwise mean over a non-empty set of same-shaped vectors.
    pub fn mean<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Empty { op: "mean" });
        }
        let first = parts[0].value();
        let shape = first.shape();
        let mut acc = first;
        let mut requires = parts[0].requires_grad();
        for p in &parts[1..] {
            let v = p.value();
            if v.shape() != shape {
                return Err(TapeError::Shape { op: "mean", lhs: shape, rhs: v.shape() });
            }
            acc.add_assign(&v);
            requires |= p.requires_grad();
        }
        let inv = 1.0 / parts.len() as f64;
        acc.scale_assign(inv);
        let parents = if requires {
            parts
                .iter()
                .filter(|p| p.requires_grad())
                .map(|p| Parent {
                    id: p.id,
                    push: Box::new(move |g: &Tensor, pg: &mut Tensor| {
                        for (o, &gi) in pg.data_mut().iter_mut().zip(g.data()) {
                            *o += gi * inv;
                        }
                    }),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(self.push(acc, requires, parents))
    }

    /// Propagates gradients from a scalar root back to every reachable node.
    ///
    /// One shot per tape: a second walk would re-push interior gradients and
    /// double-count, so it is rejected. Accumulation across passes happens by
    /// merging leaf gradients out of each tape.
    pub fn backward(&self, root: Var<'_>) -> Result<(), TapeError> {
        debug_assert!(std::ptr::eq(self, root.tape), "root from another tape");
        let root_shape = root.value().shape();
        if root_shape != (1, 1) {
            return Err(TapeError::NonScalarRoot { shape: root_shape });
        }
        if self.differentiated.replace(true) {
            return Err(TapeError::BackwardTwice);
        }
        {
            let mut nodes = self.nodes.borrow_mut();
            let n = &mut nodes[root.id];
            n.grad.get_or_insert_with(|| Tensor::zeros(1, 1)).data_mut()[0] += 1.0;
        }
        for id in (0..=root.id).rev() {
            // Detach this node's edges so vjp closures can borrow the arena.
            let (grad, parents) = {
                let mut nodes = self.nodes.borrow_mut();
                let n = &mut nodes[id];
                if !n.requires_grad || n.grad.is_none() || n.parents.is_empty() {
                    continue;
                }
                (n.grad.clone().unwrap(), std::mem::take(&mut n.parents))
            };
            {
                let mut nodes = self.nodes.borrow_mut();
                for parent in &parents {
                    let p = &mut nodes[parent.id];
                    let shape = p.value.shape();
                    let pg = p.grad.get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
                    (parent.push)(&grad, pg);
                }
                nodes[id].parents = parents;
            }
        }
        Ok(())
    }
}

// Arithmetic here is fallible (shape checks) and allocates on the tape, so the
// std::ops traits — which must return Self — cannot express it.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient; zeros if backward never reached this node.
    pub fn grad(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad.clone().unwrap_or_else(|| Tensor::zeros(n.value.rows(), n.value.cols()))
    }

    fn unary(
        &self,
        out: Tensor,
        push: impl Fn(&Tensor, &mut Tensor) + 'static,
    ) -> Var<'t> {
        let requires = self.requires_grad();
        let parents = if requires {
            vec![Parent { id: self.id, push: Box::new(push) }]
        } else {
            Vec::new()
        };
        self.tape.push(out, requires, parents)
    }

    fn binary(
        &self,
        rhs: Var<'t>,
        out: Tensor,
        push_l: impl Fn(&Tensor, &mut Tensor) + 'static,
        push_r: impl Fn(&Tensor, &mut Tensor) + 'static,
    ) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let mut parents = Vec::new();
        if self.requires_grad() {
            parents.push(Parent { id: self.id, push: Box::new(push_l) });
        }
        if rhs.requires_grad() {
            parents.push(Parent { id: rhs.id, push: Box::new(push_r) });
        }
        let requires = !parents.is_empty();
        self.tape.push(out, requires, parents)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TapeError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(TapeError::Shape { op: "add", lhs: a.shape(), rhs: b.shape() });
        }
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.binary(rhs, out, |g, pg| pg.add_assign(g), |g, pg| pg.add_assign(g)))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TapeError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(TapeError::Shape { op: "sub", lhs: a.shape(), rhs: b.shape() });
        }
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.binary(
            rhs,
            out,
            |g, pg| pg.add_assign(g),
            |g, pg| {
                for (o, gi) in pg.data_mut().iter_mut().zip(g.iter()) {
                    *o -= gi;
                }
            },
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TapeError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(TapeError::Shape { op: "mul", lhs: a.shape(), rhs: b.shape() });
        }
        let out = a.zip_map(&b, |x, y| x * y);
        let (ca, cb) = (a, b);
        Ok(self.binary(
            rhs,
            out,
            move |g, pg| {
                for ((o, gi), bi) in pg.data_mut().iter_mut().zip(g.iter()).zip(cb.iter()) {
                    *o += gi * bi;
                }
            },
            move |g, pg| {
                for ((o, gi), ai) in pg.data_mut().iter_mut().zip(g.iter()).zip(ca.iter()) {
                    *o += gi * ai;
                }
            },
        ))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TapeError> {
        let (a, b) = (self.value(), rhs.value());
        if a.cols() != b.rows() {
            return Err(TapeError::Shape { op: "matmul", lhs: a.shape(), rhs: b.shape() });
        }
        let out = a.matmul(&b);
        let (ca, cb) = (a, b);
        Ok(self.binary(
            rhs,
            out,
            move |g, pg| pg.add_assign(&g.matmul(&cb.transpose())),
            move |g, pg| pg.add_assign(&ca.transpose().matmul(g)),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| c * x);
        self.unary(out, move |g, pg| {
            for (o, gi) in pg.data_mut().iter_mut().zip(g.iter()) {
                *o += c * gi;
            }
        })
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { 0.0 });
        self.unary(out, move |g, pg| {
            for ((o, gi), xi) in pg.data_mut().iter_mut().zip(g.iter()).zip(x.iter()) {
                if xi > 0.0 {
                    *o += gi;
                }
            }
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        let y = out.clone();
        self.unary(out, move |g, pg| {
            for ((o, gi), yi) in pg.data_mut().iter_mut().zip(g.iter()).zip(y.iter()) {
                *o += gi * (1.0 - yi * yi);
            }
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.unary(out, move |g, pg| {
            for ((o, gi), yi) in pg.data_mut().iter_mut().zip(g.iter()).zip(y.iter()) {
                *o += gi * yi * (1.0 - yi);
            }
        })
    }

    /// Softmax over a column vector, computed max-subtracted.
    pub fn softmax(self) -> Result<Var<'t>, TapeError> {
        let x = self.value();
        if !x.is_vector() {
            return Err(TapeError::NotVector { op: "softmax", shape: x.shape() });
        }
        let out = softmax_vec(&x);
        let s = out.clone();
        Ok(self.unary(out, move |g, pg| {
            let dot: f64 = g.iter().zip(s.iter()).map(|(gi, si)| gi * si).sum();
            for ((o, gi), si) in pg.data_mut().iter_mut().zip(g.iter()).zip(s.iter()) {
                *o += si * (gi - dot);
            }
        }))
    }

    /// Row `index` of a matrix as a column vector (embedding lookup).
    pub fn row(self, index: usize) -> Result<Var<'t>, TapeError> {
        let m = self.value();
        if index >= m.rows() {
            return Err(TapeError::OutOfBounds { op: "row", index, bound: m.rows() });
        }
        let cols = m.cols();
        let out = Tensor::vector(m.row_slice(index).to_vec());
        Ok(self.unary(out, move |g, pg| {
            let start = index * cols;
            for (i, gi) in g.iter().enumerate() {
                pg.data_mut()[start + i] += gi;
            }
        }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.iter().sum());
        self.unary(out, move |g, pg| {
            let g0 = g.data()[0];
            for o in pg.data_mut().iter_mut() {
                *o += g0;
            }
        })
    }

    /// Scalar cross-entropy of a softmax over `self` (logits, column vector)
    /// against a hard target class. Computed log-sum-exp-stably.
    pub fn softmax_cross_entropy(self, target: usize) -> Result<Var<'t>, TapeError> {
        let z = self.value();
        if !z.is_vector() {
            return Err(TapeError::NotVector { op: "softmax_cross_entropy", shape: z.shape() });
        }
        if target >= z.rows() {
            return Err(TapeError::OutOfBounds {
                op: "softmax_cross_entropy",
                index: target,
                bound: z.rows(),
            });
        }
        let max = z.iter().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[target];
        let p = softmax_vec(&z);
        Ok(self.unary(Tensor::scalar(loss), move |g, pg| {
            let g0 = g.data()[0];
            for (k, (o, pk)) in pg.data_mut().iter_mut().zip(p.iter()).enumerate() {
                let t = if k == target { 1.0 } else { 0.0 };
                *o += g0 * (pk - t);
            }
        }))
    }

    /// Scalar sum of independent binary cross-entropies of `sigmoid(self)`
    /// against targets in `[0, 1]`. Computed without overflow for large logits.
    pub fn sigmoid_cross_entropy(self, targets: &[f64]) -> Result<Var<'t>, TapeError> {
        let z = self.value();
        if !z.is_vector() {
            return Err(TapeError::NotVector { op: "sigmoid_cross_entropy", shape: z.shape() });
        }
        if targets.len() != z.rows() {
            return Err(TapeError::Shape {
                op: "sigmoid_cross_entropy",
                lhs: z.shape(),
                rhs: (targets.len(), 1),
            });
        }
        // max(z,0) - z*y + ln(1 + exp(-|z|)) is the stable form of
        // -y*ln(s) - (1-y)*ln(1-s).
        let loss: f64 = z
            .iter()
            .zip(targets)
            .map(|(zi, &yi)| zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p())
            .sum();
        let y = targets.to_vec();
        let zc = z;
        Ok(self.unary(Tensor::scalar(loss), move |g, pg| {
            let g0 = g.data()[0];
            for ((o, zi), yi) in pg.data_mut().iter_mut().zip(zc.iter()).zip(&y) {
                *o += g0 * (sigmoid(zi) - yi);
            }
        }))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_vec(z: &Tensor) -> Tensor {
    let max = z.iter().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Tensor::vector(out)
}
