use super::kernels::{self, ConvGeom, FilterGeom};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    PixelShuffle {
        input: Var,
        r: usize,
    },
    PixelUnshuffle {
        input: Var,
        r: usize,
    },
    LocalFilter {
        input: Var,
        filters: Var,
        geom: FilterGeom,
    },
    DynamicUpsample {
        input: Var,
        filters: Var,
        geom: FilterGeom,
        scale: usize,
    },
    NormalizeKernels {
        input: Var,
        n: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    SpatialMean(Var),
    Sum(Var),
    L1 {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    /// True when some requires-grad leaf is upstream of this node.
    tracked: bool,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// Values are owned by the tape; leaves are copies of caller tensors.
/// Gradients of leaves accumulate across repeated [`Tape::backward`] calls
/// until [`Tape::zero_grad`]; intermediate gradients are freed as soon as
/// they have been propagated.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Records a copy of `tensor`; it is differentiated iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor.detached(), Op::Leaf, tracked)
    }

    /// Records an owned tensor as a leaf.
    pub fn leaf_owned(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        let mut value = tensor;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, tracked)
    }

    /// Records a non-differentiated input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut value = tensor;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiated input.
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        let mut value = tensor;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, true)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1×1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub(crate) fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor of the leaf's shape.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("gradient shape"))
    }

    /// Resets all leaf gradients.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Propagates `d loss / d loss = 1` back through the tape, accumulating
    /// into every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {shape}")));
        }
        if !self.tracked(loss) {
            return Err(Error::invalid("loss does not depend on any differentiated leaf"));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        self.accumulate(loss, vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(&delta) {
                    *a += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    self.tracked(input),
                    self.tracked(weight),
                    bias.is_some_and(|b| self.tracked(b)),
                );
                let grads = kernels::conv2d_backward(self.value(input), self.value(weight), g, &geom, need);
                if let Some(d) = grads.input {
                    self.accumulate(input, d);
                }
                if let Some(d) = grads.weight {
                    self.accumulate(weight, d);
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    self.accumulate(b, d);
                }
            }
            Op::Relu(input) => {
                let d = self
                    .value(input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(x, g)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                self.accumulate(input, d);
            }
            Op::PixelShuffle { input, r } => {
                let d = kernels::pixel_unshuffle(g, self.nodes[idx].value.shape(), r);
                self.accumulate(input, d);
            }
            Op::PixelUnshuffle { input, r } => {
                let d = kernels::pixel_shuffle(g, self.nodes[idx].value.shape(), r);
                self.accumulate(input, d);
            }
            Op::LocalFilter { input, filters, geom } => {
                let (dx, df) = kernels::local_filter_backward(
                    self.value(input),
                    self.value(filters),
                    g,
                    &geom,
                    self.tracked(input),
                    self.tracked(filters),
                );
                if let Some(d) = dx {
                    self.accumulate(input, d);
                }
                if let Some(d) = df {
                    self.accumulate(filters, d);
                }
            }
            Op::DynamicUpsample {
                input,
                filters,
                geom,
                scale,
            } => {
                let (dx, df) = kernels::dynamic_upsample_backward(
                    self.value(input),
                    self.value(filters),
                    g,
                    &geom,
                    scale,
                    self.tracked(input),
                    self.tracked(filters),
                );
                if let Some(d) = dx {
                    self.accumulate(input, d);
                }
                if let Some(d) = df {
                    self.accumulate(filters, d);
                }
            }
            Op::NormalizeKernels { input, n } => {
                let d = kernels::normalize_kernels_backward(g, self.shape(input), n);
                self.accumulate(input, d);
            }
            Op::Upsample { input, factor } => {
                let d = kernels::upsample_nearest_backward(g, self.shape(input), factor);
                self.accumulate(input, d);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                if self.tracked(b) {
                    let d = self.reduce_to(g, self.shape(idx_var(idx)), self.shape(b));
                    self.accumulate(b, d);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                if self.tracked(b) {
                    let neg: Vec<T> = g.iter().map(|v| -*v).collect();
                    let d = self.reduce_to(&neg, self.shape(idx_var(idx)), self.shape(b));
                    self.accumulate(b, d);
                }
            }
            Op::Mul(a, b) => {
                let out_shape = self.shape(idx_var(idx));
                let strides = kernels::broadcast_strides(out_shape, self.shape(b)).expect("checked at record");
                if self.tracked(a) {
                    let bv = self.value(b).data();
                    let mut d = vec![T::zero(); g.len()];
                    kernels::for_each_broadcast(out_shape, strides, |ia, ib| d[ia] = g[ia] * bv[ib]);
                    self.accumulate(a, d);
                }
                if self.tracked(b) {
                    let av = self.value(a).data();
                    let mut d = vec![T::zero(); self.shape(b).numel()];
                    kernels::for_each_broadcast(out_shape, strides, |ia, ib| d[ib] += g[ia] * av[ia]);
                    self.accumulate(b, d);
                }
            }
            Op::AddScalar(input) => {
                self.accumulate(input, g.to_vec());
            }
            Op::SpatialMean(input) => {
                let shape = self.shape(input);
                let plane = shape.plane();
                let inv = T::one() / T::from_usize(plane).expect("plane");
                let mut d = Vec::with_capacity(shape.numel());
                for gv in g {
                    d.extend(std::iter::repeat_n(*gv * inv, plane));
                }
                self.accumulate(input, d);
            }
            Op::Sum(input) => {
                let n = self.shape(input).numel();
                self.accumulate(input, vec![g[0]; n]);
            }
            Op::L1 { a, b } => {
                let n = T::from_usize(self.shape(a).numel()).expect("count");
                let scale = g[0] / n;
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(x, y)| sign(*x - *y) * scale)
                    .collect();
                if self.tracked(b) {
                    self.accumulate(b, da.iter().map(|v| -*v).collect());
                }
                self.accumulate(a, da);
            }
        }
    }

    /// Sums `g` (shaped like `out`) over the dims that `target` broadcasts.
    fn reduce_to(&self, g: &[T], out: Shape, target: Shape) -> Vec<T> {
        if out == target {
            return g.to_vec();
        }
        let strides = kernels::broadcast_strides(out, target).expect("checked at record");
        let mut d = vec![T::zero(); target.numel()];
        kernels::for_each_broadcast(out, strides, |ia, ib| d[ib] += g[ia]);
        d
    }
}

fn idx_var(idx: usize) -> Var {
    Var(idx)
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
