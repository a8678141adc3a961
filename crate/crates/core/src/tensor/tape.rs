use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::conv::{conv2d_backward, conv2d_forward};
use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation implemented outside this module that still participates in
/// backpropagation.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Gradient for each input (same order as [`CustomOp::inputs`]), given
    /// the gradient of the output. `None` marks an input the op does not
    /// differentiate.
    fn backward(&self, grad_output: &[T]) -> Result<Vec<Option<Vec<T>>>>;

    /// Feeds the op's discrete branch decisions into `state`.
    fn branch_signature(&self, _state: &mut dyn Hasher) {}
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid(Var),
    ScaleShift {
        input: Var,
        scale: T,
    },
    L1Mean {
        pred: Var,
        target: Var,
        mask: Option<Vec<T>>,
        count: T,
    },
    WeightedSum(Vec<(Var, T)>),
    Custom(Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(_) => "upsample_nearest2x",
            Op::Concat(..) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::ScaleShift { .. } => "scale_shift",
            Op::L1Mean { .. } => "l1_mean",
            Op::WeightedSum(_) => "weighted_sum",
            Op::Custom(op) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Upsample2x(x) | Op::Sigmoid(x) => vec![*x],
            Op::SliceChannels { input, .. } | Op::LeakyRelu { input, .. } | Op::ScaleShift { input, .. } => {
                vec![*input]
            }
            Op::Concat(a, b) => vec![*a, *b],
            Op::L1Mean { pred, target, .. } => vec![*pred, *target],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Custom(op) => op.inputs(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order, so every operation's inputs
/// precede it and reverse iteration is a valid backward schedule.
pub struct Tape<T: Real> {
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
        Self {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (parameters, differentiable inputs).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient from the last [`Tape::backward`]; `None` if the tensor was
    /// not reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zero when unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// First tensor in execution order holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Replicates each pixel into a 2×2 block.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let (h, w) = (s.height, s.width);
        let out_shape = Shape::new(s.batch, s.channels, 2 * h, 2 * w);
        let mut out = Vec::with_capacity(out_shape.numel());
        for plane in x.data().chunks_exact(h * w) {
            for row in plane.chunks_exact(w) {
                for _ in 0..2 {
                    for &v in row {
                        out.push(v);
                        out.push(v);
                    }
                }
            }
        }
        let out = Tensor::new(out_shape, out).expect("shape arithmetic");
        self.push(out, Op::Upsample2x(input))
    }

    /// Concatenates along the channel axis: `a` first, then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.batch, sa.height, sa.width) != (sb.batch, sb.height, sb.width) {
            return Err(Error::config(format!(
                "cannot concatenate {sa} with {sb} along channels"
            )));
        }
        let shape = Shape::new(sa.batch, sa.channels + sb.channels, sa.height, sa.width);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..sa.batch {
            data.extend_from_slice(self.value(a).batch_item(n));
            data.extend_from_slice(self.value(b).batch_item(n));
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(a, b)))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input);
        if start + len > s.channels || len == 0 {
            return Err(Error::config(format!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            )));
        }
        let plane = s.plane();
        let shape = Shape::new(s.batch, len, s.height, s.width);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.batch {
            let item = self.value(input).batch_item(n);
            data.extend_from_slice(&item[start * plane..(start + len) * plane]);
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceChannels { input, start }))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { v * slope })
            .collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, T::ZERO)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        self.push(out, Op::Sigmoid(input))
    }

    /// `scale · x + shift`.
    pub fn scale_shift(&mut self, input: Var, scale: T, shift: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| scale * v + shift).collect();
        let out = Tensor::new(x.shape(), data).expect("same shape");
        self.push(out, Op::ScaleShift { input, scale })
    }

    /// Masked mean absolute difference `Σ m·|p - t| / Σ m`; all elements
    /// when `mask` is `None`.
    pub fn l1_mean(&mut self, pred: Var, target: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::config(format!("l1_mean shapes differ: {sp} vs {st}")));
        }
        if let Some(m) = mask {
            if m.shape() != sp {
                return Err(Error::config(format!("l1_mean mask shape {} vs {sp}", m.shape())));
            }
            if m.data().iter().any(|&v| v != T::ZERO && v != T::ONE) {
                return Err(Error::config("l1_mean mask must be binary"));
            }
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let (sum, count) = match mask {
            Some(m) => {
                let mut sum = T::ZERO;
                let mut count = 0usize;
                for ((&p, &t), &m) in p.iter().zip(t).zip(m.data()) {
                    if m == T::ONE {
                        sum += (p - t).abs();
                        count += 1;
                    }
                }
                (sum, count)
            }
            None => (p.iter().zip(t).map(|(&p, &t)| (p - t).abs()).sum(), p.len()),
        };
        if count == 0 {
            return Err(Error::degenerate("l1_mean over an empty mask"));
        }
        let count = T::from_f64(count as f64);
        Ok(self.push(
            Tensor::scalar(sum / count),
            Op::L1Mean {
                pred,
                target,
                mask: mask.map(|m| m.data().to_vec()),
                count,
            },
        ))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let shape = self.shape(
            terms
                .first()
                .ok_or_else(|| Error::config("weighted_sum of no terms"))?
                .0,
        );
        let mut out = Tensor::zeros(shape);
        for &(v, w) in terms {
            if self.shape(v) != shape {
                return Err(Error::config(format!(
                    "weighted_sum shapes differ: {} vs {shape}",
                    self.shape(v)
                )));
            }
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        Ok(self.push(out, Op::WeightedSum(terms.to_vec())))
    }

    /// Records the result of an externally computed op.
    pub fn custom(&mut self, value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(value, Op::Custom(op))
    }

    /// Hash of every discrete branch taken during the forward pass
    /// (activation sides, absolute-value signs, custom-op choices). Two
    /// passes with equal signatures evaluate the same smooth function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::LeakyRelu { input, .. } => {
                    i.hash(&mut h);
                    for &v in self.value(*input).data() {
                        (v > T::ZERO).hash(&mut h);
                    }
                }
                Op::L1Mean { pred, target, .. } => {
                    i.hash(&mut h);
                    for (&p, &t) in self.value(*pred).data().iter().zip(self.value(*target).data()) {
                        ((p - t).sign().to_f64() as i8).hash(&mut h);
                    }
                }
                Op::Custom(op) => {
                    i.hash(&mut h);
                    op.branch_signature(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Backpropagates from a scalar `root`. Gradients of earlier runs are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got {}",
                self.shape(root)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                let contributions = self.node_backward(i, &g)?;
                for (v, dv) in contributions {
                    self.accumulate(v, dv);
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, dv: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&dv).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(dv),
        }
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let grads = conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    self.value(*bias),
                    *stride,
                    *padding,
                    g,
                    [rg(input), rg(weight), rg(bias)],
                )?;
                for (v, d) in [(input, grads.input), (weight, grads.weight), (bias, grads.bias)] {
                    if let Some(d) = d {
                        out.push((*v, d));
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s.height, s.width);
                let mut d = vec![T::ZERO; s.numel()];
                for (p, plane) in d.chunks_exact_mut(h * w).enumerate() {
                    let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let r0 = 2 * y * 2 * w + 2 * xx;
                            let r1 = r0 + 2 * w;
                            plane[y * w + xx] = gp[r0] + gp[r0 + 1] + gp[r1] + gp[r1 + 1];
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::Concat(a, b) => {
                let (ia, ib) = (self.shape(*a).item(), self.shape(*b).item());
                let batch = self.shape(*a).batch;
                let mut da = Vec::with_capacity(ia * batch);
                let mut db = Vec::with_capacity(ib * batch);
                for n in 0..batch {
                    let gi = &g[n * (ia + ib)..(n + 1) * (ia + ib)];
                    da.extend_from_slice(&gi[..ia]);
                    db.extend_from_slice(&gi[ia..]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::SliceChannels { input, start } => {
                let s = self.shape(*input);
                let os = node.value.shape();
                let plane = s.plane();
                let mut d = vec![T::ZERO; s.numel()];
                for n in 0..s.batch {
                    let dst = &mut d[n * s.item() + start * plane..n * s.item() + (start + os.channels) * plane];
                    dst.copy_from_slice(&g[n * os.item()..(n + 1) * os.item()]);
                }
                out.push((*input, d));
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::ZERO { g } else { g * *slope })
                    .collect();
                out.push((*input, d));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&g, &y)| g * y * (T::ONE - y)).collect();
                out.push((*x, d));
            }
            Op::ScaleShift { input, scale } => {
                out.push((*input, g.iter().map(|&g| g * *scale).collect()));
            }
            Op::L1Mean {
                pred,
                target,
                mask,
                count,
            } => {
                let scale = g[0] / *count;
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let dp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .enumerate()
                    .map(|(i, (&p, &t))| {
                        let m = mask.as_ref().map_or(T::ONE, |m| m[i]);
                        (p - t).sign() * m * scale
                    })
                    .collect();
                if rg(target) {
                    out.push((*target, dp.iter().map(|&v| -v).collect()));
                }
                out.push((*pred, dp));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    out.push((v, g.iter().map(|&g| g * w).collect()));
                }
            }
            Op::Custom(op) => {
                let inputs = op.inputs();
                let grads = op.backward(g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, d) in inputs.into_iter().zip(grads) {
                    if let Some(d) = d {
                        if d.len() != self.shape(v).numel() {
                            return Err(Error::contract(format!(
                                "{} gradient has {} entries for input of shape {}",
                                op.name(),
                                d.len(),
                                self.shape(v)
                            )));
                        }
                        out.push((v, d));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}
