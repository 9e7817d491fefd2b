//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep is a single reverse pass.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{kernels, Float, Tensor};
use crate::error::{Error, Result};

/// Stable identifier of a parameter tensor, e.g. `"3.weight"`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(s: impl Into<String>) -> Self {
        ParamId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub id: ParamId,
    pub tensor: Tensor<T>,
    /// Frozen parameters never accumulate gradient.
    pub trainable: bool,
}

impl<T: Float> Param<T> {
    pub fn new(id: impl Into<String>, tensor: Tensor<T>) -> Self {
        Param { id: ParamId::new(id), tensor, trainable: true }
    }

    pub fn frozen(id: impl Into<String>, tensor: Tensor<T>) -> Self {
        Param { trainable: false, ..Param::new(id, tensor) }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    AvgPool {
        input: Var,
        window: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    /// Saved gradient of the fused loss with respect to its first operand.
    CrossEntropy {
        logits: Var,
        dlogits: Tensor<T>,
    },
    KlDiv {
        student: Var,
        dstudent: Tensor<T>,
    },
    Mse {
        a: Var,
        b: Var,
        da: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-writer recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    /// Trainable parameter leaves in registration order.
    trainable: Vec<(ParamId, Var)>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), trainable: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter leaf. Registering the same id twice returns the
    /// original leaf so contributions accumulate in one place.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.insert(p.id.clone(), v);
        if p.trainable {
            self.trainable.push((p.id.clone(), v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = kernels::add_row_bias(self.value(x), self.value(b))?;
        let g = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddRowBias(x, b), g))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = kernels::add_channel_bias(self.value(x), self.value(b))?;
        let g = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddChannelBias(x, b), g))
    }

    /// `x·W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let g = self.any_grad(&[input, kernel]);
        Ok(self.push(out, Op::Conv2d { input, kernel, stride, padding }, g))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let g = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), g)
    }

    pub fn avgpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let out = kernels::avgpool2d(self.value(input), window)?;
        let g = self.any_grad(&[input]);
        Ok(self.push(out, Op::AvgPool { input, window }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&p| p * c).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let g = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(acc), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut acc = T::zero();
        for &e in v.data() {
            acc += e;
        }
        let out = acc / T::of(v.numel() as f64);
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(out), Op::Mean(x), g)
    }

    /// Mean cross-entropy of `logits` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, dlogits) = kernels::cross_entropy(self.value(logits), labels)?;
        let g = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(value), Op::CrossEntropy { logits, dlogits }, g))
    }

    /// `T²·KL(softmax(teacher/T) ‖ softmax(student/T))`; the teacher side is
    /// a constant.
    pub fn kl_divergence(&mut self, student: Var, teacher: &Tensor<T>, temperature: T) -> Result<Var> {
        let (value, dstudent) = kernels::kl_divergence(self.value(student), teacher, temperature)?;
        let g = self.any_grad(&[student]);
        Ok(self.push(Tensor::scalar(value), Op::KlDiv { student, dstudent }, g))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, da) = kernels::mse(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(value), Op::Mse { a, b, da }, g))
    }
}

/// Gradients keyed by parameter id, ordered for deterministic iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: &ParamId) -> Option<&Tensor<T>> {
        self.map.get(id)
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.map.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        self.map.insert(id, g);
    }

    /// Elementwise sum over the union of keys.
    pub fn merged(&self, other: &Gradients<T>) -> Result<Gradients<T>> {
        let mut out = self.clone();
        for (id, g) in &other.map {
            match out.map.get_mut(id) {
                Some(acc) => accumulate(acc, g)?,
                None => {
                    out.map.insert(id.clone(), g.clone());
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Float>(acc: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if acc.shape() != g.shape() {
        return Err(Error::dim("gradient accumulation", acc.shape(), g.shape()));
    }
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
    Ok(())
}

fn scaled<T: Float>(g: &Tensor<T>, c: T) -> Tensor<T> {
    Tensor::from_parts(g.shape().to_vec(), g.data().iter().map(|&v| v * c).collect())
}

/// Reverse sweep from a scalar `loss`. Every trainable parameter registered
/// on the tape appears in the result, zero-filled when the loss does not
/// depend on it; frozen parameters never appear.
pub fn backward<T: Float>(tape: &Tape<T>, loss: Var) -> Result<Gradients<T>> {
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", tape.value(loss).shape())));
    }
    let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
    if tape.needs_grad(loss) {
        grads[loss.0] = Some(Tensor::full(tape.value(loss).shape(), T::one()));
    }

    let send = |grads: &mut Vec<Option<Tensor<T>>>, to: Var, g: Tensor<T>| -> Result<()> {
        if !tape.needs_grad(to) {
            return Ok(());
        }
        match &mut grads[to.0] {
            Some(acc) => accumulate(acc, &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    };

    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &tape.nodes[i];
        match &node.op {
            Op::Leaf => {
                grads[i] = Some(g);
            }
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(tape.value(*a), tape.value(*b), &g);
                send(&mut grads, *a, da)?;
                send(&mut grads, *b, db)?;
            }
            Op::AddRowBias(x, b) => {
                if tape.needs_grad(*b) {
                    send(&mut grads, *b, kernels::row_bias_backward(&g))?;
                }
                send(&mut grads, *x, g)?;
            }
            Op::AddChannelBias(x, b) => {
                if tape.needs_grad(*b) {
                    send(&mut grads, *b, kernels::channel_bias_backward(&g))?;
                }
                send(&mut grads, *x, g)?;
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let (di, dk) = kernels::conv2d_backward(
                    tape.value(*input),
                    tape.value(*kernel),
                    &g,
                    *stride,
                    *padding,
                    tape.needs_grad(*input),
                )?;
                if let Some(di) = di {
                    send(&mut grads, *input, di)?;
                }
                send(&mut grads, *kernel, dk)?;
            }
            Op::Relu(x) => {
                send(&mut grads, *x, kernels::relu_backward(tape.value(*x), &g))?;
            }
            Op::AvgPool { input, window } => {
                let shape = tape.value(*input).shape().to_vec();
                send(&mut grads, *input, kernels::avgpool2d_backward(&shape, &g, *window))?;
            }
            Op::Reshape(x) => {
                let shape = tape.value(*x).shape().to_vec();
                send(&mut grads, *x, g.reshape(&shape)?)?;
            }
            Op::Add(a, b) => {
                send(&mut grads, *a, g.clone())?;
                send(&mut grads, *b, g)?;
            }
            Op::Mul(a, b) => {
                let (x, y) = (tape.value(*a), tape.value(*b));
                let da = Tensor::from_parts(
                    x.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect(),
                );
                let db = Tensor::from_parts(
                    y.shape().to_vec(),
                    g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * xv).collect(),
                );
                send(&mut grads, *a, da)?;
                send(&mut grads, *b, db)?;
            }
            Op::Scale(x, c) => {
                send(&mut grads, *x, scaled(&g, *c))?;
            }
            Op::Sum(x) => {
                let shape = tape.value(*x).shape().to_vec();
                send(&mut grads, *x, Tensor::full(&shape, g.data()[0]))?;
            }
            Op::Mean(x) => {
                let v = tape.value(*x);
                let each = g.data()[0] / T::of(v.numel() as f64);
                send(&mut grads, *x, Tensor::full(v.shape(), each))?;
            }
            Op::CrossEntropy { logits, dlogits } => {
                send(&mut grads, *logits, scaled(dlogits, g.data()[0]))?;
            }
            Op::KlDiv { student, dstudent } => {
                send(&mut grads, *student, scaled(dstudent, g.data()[0]))?;
            }
            Op::Mse { a, b, da } => {
                let up = g.data()[0];
                if tape.needs_grad(*b) {
                    send(&mut grads, *b, scaled(da, -up))?;
                }
                send(&mut grads, *a, scaled(da, up))?;
            }
        }
    }

    let mut out = Gradients::default();
    for (id, v) in &tape.trainable {
        let g = match grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(tape.value(*v).shape()),
        };
        out.insert(id.clone(), g);
    }
    Ok(out)
}
