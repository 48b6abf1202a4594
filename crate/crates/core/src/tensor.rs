//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append a node holding the output value, handles to their inputs and a
//! [`Backward`] rule. Because a node can only reference nodes that already
//! exist, the node list is a topological order and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Binary arithmetic broadcasts size-1 axes with shapes aligned from the
//! right, so a `N×D×1×1` channel weight multiplies a `N×D×H×W` map directly.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major `f64` array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as `N×C×H×W`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(Error::shape(
                op,
                format!("expected N×C×H×W, got {:?}", other),
            )),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest elementwise absolute difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// In-place `self += other` for identical shapes.
    pub fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies sample `index` out of a batch-major tensor, keeping a leading
    /// axis of size one.
    pub fn sample(&self, index: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("sample", "rank-0 tensor has no batch axis"))?;
        if index >= n {
            return Err(Error::shape(
                "sample",
                format!("index {} out of batch of {}", index, n),
            ));
        }
        let per = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor {
            shape,
            data: self.data[index * per..(index + 1) * per].to_vec(),
        })
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "nothing to stack"))?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        let mut n = 0;
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != inner {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} does not match {:?}", p.shape, first.shape),
                ));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }
}

/// Broadcast result of two shapes (numpy rules restricted to size-1 axes).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank, i);
        let db = dim_from_right(b, rank, i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let offset = rank - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

/// Strides of `shape` seen through the broadcast output shape `out`;
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        let d = dim_from_right(shape, rank, i);
        if d != 1 {
            strides[i] = stride;
        }
        stride *= d;
    }
    strides
}

/// Visits every output position of a broadcast with the matching offsets
/// into both operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    let mut index = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if index[axis] < out[axis] {
                break;
            }
            ia -= sa[axis] * out[axis];
            ib -= sb[axis] * out[axis];
            index[axis] = 0;
        }
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| {
        Error::shape(
            op,
            format!("shapes {:?} and {:?} do not broadcast", a.shape, b.shape),
        )
    })?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; out.iter().product()];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
        data[o] = f(a.data[ia], b.data[ib]);
    });
    Ok(Tensor { shape: out, data })
}

/// Sums `grad` over the axes that were broadcast to reach it from `shape`.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let strides = broadcast_strides(shape, &grad.shape);
    let zero = vec![0; grad.shape.len()];
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(&grad.shape, &strides, &zero, |o, i, _| {
        data[i] += grad.data[o];
    });
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; entries for inputs
/// that do not may be `None`.
pub trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input value. Gradients are only propagated to leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last [`backward`](Tape::backward) loss with respect
    /// to `v`, if `v` takes part in differentiation.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Records an operation. The rule is dropped when no input needs a
    /// gradient, so inference-only tapes carry values only.
    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        rule: impl Backward + 'static,
    ) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.to_vec(),
            rule: if requires_grad {
                Some(Box::new(rule))
            } else {
                None
            },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`, leaving gradients readable via
    /// [`grad`](Tape::grad). Contributions reaching a node along several
    /// paths are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(grad) = rest[0].as_ref() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = rule.backward(&inputs, &node.value, grad, &needs);
            for ((var, need), g) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[var.0].value.shape(),
                    "gradient shape from {}",
                    node.op
                );
                match &mut before[var.0] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", out, &[a, b], AddBackward)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", out, &[a, b], SubBackward)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", out, &[a, b], MulBackward)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, &[x], ScaleBackward(factor))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, &[x], SigmoidBackward)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, &[x], ReluBackward)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, &[x], SumBackward)
    }
}

/// Largest `f64` below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function kept inside the open interval (0, 1); the plain
/// formula rounds to exactly 1.0 from about x = 37 upward.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

struct AddBackward;

impl Backward for AddBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        inputs
            .iter()
            .zip(needs)
            .map(|(x, &need)| need.then(|| reduce_to_shape(grad, x.shape())))
            .collect()
    }
}

struct SubBackward;

impl Backward for SubBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let ga = needs[0].then(|| reduce_to_shape(grad, inputs[0].shape()));
        let gb = needs[1].then(|| reduce_to_shape(&grad.map(|g| -g), inputs[1].shape()));
        vec![ga, gb]
    }
}

struct MulBackward;

impl Backward for MulBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let partial = |other: &Tensor, target: &Tensor| {
            // the broadcast already succeeded forward
            let full = broadcast_binary("mul", grad, other, |g, o| g * o).expect("forward shapes");
            reduce_to_shape(&full, target.shape())
        };
        vec![
            needs[0].then(|| partial(b, a)),
            needs[1].then(|| partial(a, b)),
        ]
    }
}

struct ScaleBackward(f64);

impl Backward for ScaleBackward {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct SigmoidBackward;

impl Backward for SigmoidBackward {
    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let data = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &g)| g * y * (1.0 - y))
            .collect();
        vec![Some(Tensor {
            shape: output.shape.clone(),
            data,
        })]
    }
}

struct ReluBackward;

impl Backward for ReluBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor {
            shape: grad.shape.clone(),
            data,
        })]
    }
}

struct SumBackward;

impl Backward for SumBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_identity_and_doubling() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let s = tape.add(a, zero).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
        let d = tape.add(a, a).unwrap();
        assert_eq!(tape.value(d).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn add_gradient_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &Tensor::ones([2, 2]));
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn mul_broadcasts_scalar_weight() {
        let mut tape = Tape::new();
        let alpha = tape.constant(t(&[1, 1, 1], &[2.0]));
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.mul(alpha, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
        let one = tape.constant(Tensor::scalar(1.0));
        let same = tape.mul(x, one).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn diamond_accumulates_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([2, 2], 0.3), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::full([2, 2], 2.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([2, 2], 7.0), true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones([2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // oracle: 1 / (1 + e^-1)
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-15);
        let s = sigmoid(40.0);
        assert!(s > 1.0 - 1e-15 && s < 1.0);
        let s = sigmoid(-800.0);
        assert!(s > 0.0);
    }

    #[test]
    fn broadcast_gradient_matches_tiled_computation() {
        // α (1×2×1×1) · x (1×2×2×2) against the same product with α tiled.
        let alpha = t(&[1, 2, 1, 1], &[0.3, -1.2]);
        let x = Tensor::from_fn([1, 2, 2, 2], |i| (i as f64 * 0.7).sin());
        let mut tape = Tape::new();
        let a = tape.leaf(alpha.clone(), true);
        let xv = tape.leaf(x.clone(), true);
        let y = tape.mul(a, xv).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();

        let tiled = Tensor::from_fn([1, 2, 2, 2], |i| alpha.data()[i / 4]);
        let mut tape2 = Tape::new();
        let at = tape2.leaf(tiled, true);
        let xt = tape2.leaf(x, true);
        let y2 = tape2.mul(at, xt).unwrap();
        let loss2 = tape2.sum(y2).unwrap();
        tape2.backward(loss2).unwrap();

        let g_tiled = tape2.grad(at).unwrap();
        let folded = reduce_to_shape(g_tiled, &[1, 2, 1, 1]);
        assert!(tape.grad(a).unwrap().max_abs_diff(&folded) <= 1e-12);
        assert!(tape.grad(xv).unwrap().max_abs_diff(tape2.grad(xt).unwrap()) <= 1e-12);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_values_are_caught() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1], f64::MAX));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }
}
