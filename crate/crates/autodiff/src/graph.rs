//! Graph nodes, primitive operations and the reverse pass.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

// Ids increase with creation order, and parents always exist before their
// children, so descending id order is a valid reverse topological order.
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    MulScalar,
    MatMul,
    Transpose,
    SumAxis { axis: usize, extent: usize },
    ExpandAxis { axis: usize },
    Sum,
    Fill,
    Reshape,
    Exp,
    Log,
    Recip,
    Relu,
    Softmax,
    LogSoftmax,
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
}

impl Drop for Node {
    // Unrolled inner loops produce long parent chains; release them
    // iteratively instead of recursing once per node.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(var) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(var.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A node in a differentiable computation graph.
///
/// Cloning a `Var` clones a handle to the same node.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .field("shape", &self.0.value.shape())
            .finish()
    }
}

fn node(value: Tensor, op: Op, parents: Vec<Var>) -> Var {
    let requires_grad = parents.iter().any(Var::requires_grad);
    // Constant subexpressions never receive gradient; drop their history.
    let (op, parents) = if requires_grad {
        (op, parents)
    } else {
        (Op::Constant, Vec::new())
    };
    Var(Rc::new(Node {
        id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        value,
        op,
        parents,
        requires_grad,
    }))
}

impl Var {
    /// A differentiable leaf.
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        }))
    }

    /// A leaf that never receives gradient.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op: Op::Constant,
            parents: Vec::new(),
            requires_grad: false,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Same forward value, but the reverse pass treats the result as a constant.
    ///
    /// The returned node shares the tensor buffer, so the value is bitwise unchanged.
    pub fn stop_gradient(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Detaches the value into a fresh differentiable leaf.
    pub fn detach_param(&self) -> Var {
        Var::param(self.0.value.clone())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().add(other.value())?;
        Ok(node(v, Op::Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().sub(other.value())?;
        Ok(node(v, Op::Sub, vec![self.clone(), other.clone()]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().mul(other.value())?;
        Ok(node(v, Op::Mul, vec![self.clone(), other.clone()]))
    }

    pub fn neg(&self) -> Var {
        node(self.value().map(|x| -x), Op::Neg, vec![self.clone()])
    }

    /// Multiplication by a fixed real.
    pub fn scale(&self, c: f64) -> Var {
        node(self.value().scale(c), Op::Scale(c), vec![self.clone()])
    }

    /// `scalar * self`, where `scalar` is a one-element node that may itself be
    /// differentiable (a learned rate, for instance).
    pub fn mul_scalar(&self, scalar: &Var) -> Result<Var> {
        let s = scalar.value().item()?;
        Ok(node(
            self.value().scale(s),
            Op::MulScalar,
            vec![scalar.clone(), self.clone()],
        ))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = self.value().matmul(other.value())?;
        Ok(node(v, Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = self.value().transpose()?;
        Ok(node(v, Op::Transpose, vec![self.clone()]))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let v = self.value().sum_axis(axis)?;
        let extent = self.shape()[axis];
        Ok(node(v, Op::SumAxis { axis, extent }, vec![self.clone()]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let extent = *self.shape().get(axis).ok_or_else(|| AutodiffError::InvalidAxis {
            op: "mean_axis",
            axis,
            shape: self.shape().to_vec(),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / extent as f64))
    }

    /// Inserts an axis of extent `n` at `axis`, broadcasting values along it.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Var> {
        let v = self.value().expand_axis(axis, n)?;
        Ok(node(v, Op::ExpandAxis { axis }, vec![self.clone()]))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        node(Tensor::scalar(self.value().sum()), Op::Sum, vec![self.clone()])
    }

    /// Broadcasts a one-element node to `shape`.
    pub fn fill(&self, shape: &[usize]) -> Result<Var> {
        let s = self.value().item()?;
        Ok(node(Tensor::full(shape, s), Op::Fill, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(node(v, Op::Reshape, vec![self.clone()]))
    }

    pub fn exp(&self) -> Var {
        node(self.value().map(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn log(&self) -> Var {
        node(self.value().map(f64::ln), Op::Log, vec![self.clone()])
    }

    pub fn recip(&self) -> Var {
        node(self.value().map(|x| 1.0 / x), Op::Recip, vec![self.clone()])
    }

    /// Rectified linear unit; the subgradient at exactly zero is zero.
    pub fn relu(&self) -> Var {
        node(
            self.value().map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Relu,
            vec![self.clone()],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var> {
        let v = self.value().softmax()?;
        Ok(node(v, Op::Softmax, vec![self.clone()]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var> {
        let v = self.value().log_softmax()?;
        Ok(node(v, Op::LogSoftmax, vec![self.clone()]))
    }

    /// `Σ_l weights[l] · self[.., l, ..]` over axis `axis`, for a rank-1 `weights`
    /// whose length matches that axis.
    pub fn weighted_sum_axis(&self, weights: &Var, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if weights.shape().len() != 1 || shape.get(axis) != Some(&weights.shape()[0]) {
            return Err(AutodiffError::ShapeMismatch {
                op: "weighted_sum_axis",
                lhs: shape,
                rhs: weights.shape().to_vec(),
            });
        }
        let mut w = weights.clone();
        for (i, &extent) in shape.iter().enumerate().take(axis) {
            w = w.expand_axis(i, extent)?;
        }
        for (i, &extent) in shape.iter().enumerate().skip(axis + 1) {
            w = w.expand_axis(i, extent)?;
        }
        self.mul(&w)?.sum_axis(axis)
    }

    /// Adjoint contributions for each parent given this node's adjoint `g`.
    /// Entries are `None` for parents that do not require gradient.
    fn vjp(&self, g: &Var) -> Result<Vec<Option<Var>>> {
        let n = &self.0;
        let p = &n.parents;
        let want = |i: usize| p[i].requires_grad();
        let out = match &n.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
            Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.neg())],
            Op::Mul => vec![
                if want(0) { Some(g.mul(&p[1])?) } else { None },
                if want(1) { Some(g.mul(&p[0])?) } else { None },
            ],
            Op::Neg => vec![Some(g.neg())],
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::MulScalar => vec![
                if want(0) {
                    Some(g.mul(&p[1])?.sum().reshape(p[0].shape())?)
                } else {
                    None
                },
                if want(1) { Some(g.mul_scalar(&p[0])?) } else { None },
            ],
            Op::MatMul => vec![
                if want(0) {
                    Some(g.matmul(&p[1].transpose()?)?)
                } else {
                    None
                },
                if want(1) {
                    Some(p[0].transpose()?.matmul(g)?)
                } else {
                    None
                },
            ],
            Op::Transpose => vec![Some(g.transpose()?)],
            Op::SumAxis { axis, extent } => vec![Some(g.expand_axis(*axis, *extent)?)],
            Op::ExpandAxis { axis } => vec![Some(g.sum_axis(*axis)?)],
            Op::Sum => vec![Some(g.fill(p[0].shape())?)],
            Op::Fill => vec![Some(g.sum().reshape(p[0].shape())?)],
            Op::Reshape => vec![Some(g.reshape(p[0].shape())?)],
            Op::Exp => vec![Some(g.mul(self)?)],
            Op::Log => vec![Some(g.mul(&p[0].recip())?)],
            Op::Recip => vec![Some(g.mul(self)?.mul(self)?.neg())],
            Op::Relu => {
                let mask = p[0].value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![Some(g.mul(&Var::constant(mask))?)]
            }
            Op::Softmax => {
                let last = self.shape().len() - 1;
                let extent = self.shape()[last];
                let dot = g.mul(self)?.sum_axis(last)?.expand_axis(last, extent)?;
                vec![Some(self.mul(&g.sub(&dot)?)?)]
            }
            Op::LogSoftmax => {
                let last = self.shape().len() - 1;
                let extent = self.shape()[last];
                let total = g.sum_axis(last)?.expand_axis(last, extent)?;
                vec![Some(g.sub(&self.exp().mul(&total)?)?)]
            }
        };
        Ok(out)
    }
}

/// Gradients of the scalar `output` with respect to each node in `wrt`.
///
/// The returned gradients are graph nodes themselves: when the inputs require
/// gradient, they can be differentiated again. Nodes in `wrt` that do not
/// influence `output` receive a constant zero tensor.
pub fn gradient(output: &Var, wrt: &[Var]) -> Result<Vec<Var>> {
    if output.value().len() != 1 {
        return Err(AutodiffError::NotScalar {
            shape: output.shape().to_vec(),
        });
    }

    let mut nodes: HashMap<u64, Var> = HashMap::new();
    if output.requires_grad() {
        let mut stack = vec![output.clone()];
        while let Some(v) = stack.pop() {
            if nodes.contains_key(&v.0.id) {
                continue;
            }
            for parent in &v.0.parents {
                if parent.requires_grad() && !nodes.contains_key(&parent.0.id) {
                    stack.push(parent.clone());
                }
            }
            nodes.insert(v.0.id, v);
        }
    }
    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable();

    // Only nodes lying on a path from some target to the output matter.
    let targets: HashSet<u64> = wrt.iter().map(|v| v.0.id).collect();
    let mut relevant: HashSet<u64> = HashSet::new();
    for id in &order {
        let v = &nodes[id];
        if targets.contains(id) || v.0.parents.iter().any(|p| relevant.contains(&p.0.id)) {
            relevant.insert(*id);
        }
    }

    let mut adjoints: HashMap<u64, Var> = HashMap::new();
    if relevant.contains(&output.0.id) {
        adjoints.insert(output.0.id, Var::constant(Tensor::ones(output.shape())));
    }
    for id in order.iter().rev() {
        if !relevant.contains(id) {
            continue;
        }
        let Some(g) = adjoints.get(id).cloned() else {
            continue;
        };
        let v = &nodes[id];
        let contributions = v.vjp(&g)?;
        for (parent, contrib) in v.0.parents.iter().zip(contributions) {
            let Some(c) = contrib else { continue };
            if !relevant.contains(&parent.0.id) {
                continue;
            }
            let acc = match adjoints.remove(&parent.0.id) {
                Some(prev) => prev.add(&c)?,
                None => c,
            };
            adjoints.insert(parent.0.id, acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            adjoints
                .get(&w.0.id)
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> Var {
        Var::param(Tensor::scalar(x))
    }

    fn val(v: &Var) -> f64 {
        v.value().item().unwrap()
    }

    #[test]
    fn square_forward_and_gradient() {
        let x = s(3.0);
        let y = x.mul(&x).unwrap();
        assert_eq!(val(&y), 9.0);
        let g = gradient(&y, &[x]).unwrap();
        assert_eq!(val(&g[0]), 6.0);
    }

    #[test]
    fn cube_second_derivative() {
        let x = s(2.0);
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let dy = gradient(&y, &[x.clone()]).unwrap().remove(0);
        let d2y = gradient(&dy, &[x]).unwrap().remove(0);
        assert_eq!(val(&d2y), 12.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Var::param(Tensor::zeros(&[3]));
        let y = x.softmax().unwrap();
        for &p in y.value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stop_gradient_keeps_value_and_blocks_flow() {
        let x = s(3.0);
        let sq = x.mul(&x).unwrap();
        let stopped = sq.stop_gradient();
        assert!(stopped.value().bitwise_eq(sq.value()));
        assert_eq!(val(&stopped), 9.0);

        let y = x.mul(&x.stop_gradient()).unwrap();
        let g = gradient(&y, &[x]).unwrap();
        assert_eq!(val(&g[0]), 3.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Var::param(Tensor::zeros(&[2]));
        let err = gradient(&x, &[x.clone()]).unwrap_err();
        assert!(matches!(err, AutodiffError::NotScalar { .. }));
    }

    #[test]
    fn unrelated_target_gets_zero() {
        let x = s(1.0);
        let z = Var::param(Tensor::zeros(&[2, 2]));
        let y = x.scale(5.0);
        let g = gradient(&y, &[x, z]).unwrap();
        assert_eq!(val(&g[0]), 5.0);
        assert_eq!(g[1].value().data(), &[0.0; 4]);
        assert!(!g[1].requires_grad());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = s(0.0);
        let g = gradient(&x.relu(), &[x]).unwrap();
        assert_eq!(val(&g[0]), 0.0);
    }

    #[test]
    fn gradient_with_respect_to_interior_node() {
        let x = s(2.0);
        let u = x.scale(3.0); // u = 3x
        let y = u.mul(&u).unwrap(); // y = u²
        let g = gradient(&y, &[u]).unwrap();
        assert_eq!(val(&g[0]), 12.0);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut x = s(1.0);
        for _ in 0..200_000 {
            x = x.scale(1.0);
        }
        drop(x);
    }
}
