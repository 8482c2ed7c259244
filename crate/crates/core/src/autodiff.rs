//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its
//! output value and references to its inputs, so node order is always a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! consumes it; a second call is rejected.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d { x: Var, w: Var, padding: usize, stride: usize },
    Depthwise { x: Var, w: Var, padding: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, factor: usize },
    UpsampleNearest { x: Var, factor: usize },
    ResizeBilinear { x: Var },
    GlobalAvgPool { x: Var },
    Softmax { x: Var, axis: usize },
    RmsNorm { x: Var, eps: S },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: S },
    AddScalar { x: Var },
    Relu { x: Var },
    Abs { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Concat { a: Var, b: Var },
    Slice { x: Var, start: usize },
    ChannelBias { x: Var, b: Var },
    RowBias { x: Var, b: Var },
    BroadcastChannels { v: Var },
    Index { x: Var, i: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Which side of a binary elementwise op is broadcast from a single element.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Left,
    Right,
}

/// The tape. Single-threaded; distinct graphs may live on distinct threads.
pub struct Graph<S = f64> {
    nodes: Vec<Node<S>>,
    macs: u64,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: 0,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by conv, depthwise and matmul nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Gradients are produced for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, padding: usize, stride: usize) -> Result<Var> {
        let (out, macs) = ops::conv2d(self.value(x), self.value(w), padding, stride)?;
        self.macs += macs;
        let rg = self.rg(&[x, w]);
        self.push(out, Op::Conv2d { x, w, padding, stride }, rg, "conv2d")
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (out, macs) = ops::depthwise_conv2d(self.value(x), self.value(w), padding)?;
        self.macs += macs;
        let rg = self.rg(&[x, w]);
        self.push(out, Op::Depthwise { x, w, padding }, rg, "depthwise_conv2d")
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d(self.value(x), window, stride)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MaxPool { x, argmax }, rg, "max_pool2d")
    }

    pub fn avg_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(x), factor)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::AvgPool { x, factor }, rg, "avg_pool2d")
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_nearest(self.value(x), factor)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::UpsampleNearest { x, factor }, rg, "upsample_nearest")
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::ResizeBilinear { x }, rg, "resize_bilinear")
    }

    /// `[C, H, W]` to `[C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let d = self.value(x).data();
        let norm = S::one() / S::lit((h * w) as f64);
        let out = (0..c)
            .map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().copied().sum::<S>() * norm)
            .collect();
        let out = Tensor::new([c], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool { x }, rg, "global_avg_pool")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Per-pixel RMS normalization across channels.
    pub fn rms_norm_channels(&mut self, x: Var, eps: S) -> Result<Var> {
        let out = ops::rms_norm_channels(self.value(x), eps)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::RmsNorm { x, eps }, rg, "rms_norm_channels")
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::None)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::Right)
        } else if self.value(a).numel() == 1 {
            Ok(Broadcast::Left)
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?} (only equal shapes or scalar broadcast)")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let kind = self.broadcast_kind(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match kind {
            Broadcast::None => ta.zip_map(tb, f)?,
            Broadcast::Right => {
                let s = tb.data()[0];
                ta.map(|v| f(v, s))
            }
            Broadcast::Left => {
                let s = ta.data()[0];
                tb.map(|v| f(s, v))
            }
        };
        Ok((out, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add { a, b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub { a, b }, rg, "sub")
    }

    /// Hadamard product (or scaling by a one-element tensor).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar { x }, rg, "add_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg, "relu")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs { x }, rg, "abs")
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum { x }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean { x }, rg, "mean")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, macs) = ops::matmul(self.value(a), self.value(b))?;
        self.macs += macs;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b }, rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose { x }, rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape { x }, rg, "reshape")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Concat { a, b }, rg, "concat_channels")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, count)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Slice { x, start }, rg, "slice_channels")
    }

    /// Adds `b[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.shape()[0];
        if self.shape(b) != [c] {
            return Err(shape_err("add_channel_bias", format!("bias {:?} for {c} channels", self.shape(b))));
        }
        let per = xs.numel() / c;
        let bd = self.value(b).data();
        let out = Tensor::new(xs.shape().to_vec(), xs.data().iter().enumerate().map(|(i, &v)| v + bd[i / per]).collect())?;
        let rg = self.rg(&[x, b]);
        self.push(out, Op::ChannelBias { x, b }, rg, "add_channel_bias")
    }

    /// Adds `b[j]` to column `j` of every row of a `[T, D]` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        if self.shape(b) != [d] {
            return Err(shape_err("add_row_bias", format!("bias {:?} for width {d}", self.shape(b))));
        }
        let bd = self.value(b).data();
        let xs = self.value(x);
        let out = Tensor::new(xs.shape().to_vec(), xs.data().iter().enumerate().map(|(i, &v)| v + bd[i % d]).collect())?;
        let rg = self.rg(&[x, b]);
        self.push(out, Op::RowBias { x, b }, rg, "add_row_bias")
    }

    /// Tiles a `[C]` vector into a `[C, H, W]` map.
    pub fn broadcast_channels(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vs = self.value(v);
        if vs.rank() != 1 {
            return Err(shape_err("broadcast_channels", format!("expected a vector, got {:?}", vs.shape())));
        }
        let c = vs.numel();
        let d = vs.data();
        let out = Tensor::from_fn([c, h, w], |i| d[i / (h * w)]);
        let rg = self.rg(&[v]);
        self.push(out, Op::BroadcastChannels { v }, rg, "broadcast_channels")
    }

    /// Flat element `i` as a `[1]` tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let xs = self.value(x);
        if i >= xs.numel() {
            return Err(arg_err("index", format!("{i} out of {}", xs.numel())));
        }
        let out = Tensor::scalar(xs.data()[i]);
        let rg = self.rg(&[x]);
        self.push(out, Op::Index { x, i }, rg, "index")
    }

    /// Back-propagates from a one-element `loss`, consuming the tape.
    ///
    /// Leaves that do not influence the loss receive a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let shape = self.nodes[id].value.shape().to_vec();
            let g = Tensor::new(shape, g)?;
            for (input, delta) in self.vjp(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta.data()) {
                            *a = *a + *d;
                        }
                    }
                    slot @ None => *slot = Some(delta.into_data()),
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if node.requires_grad && matches!(node.op, Op::Leaf) {
                    let g = grads[i].take().unwrap_or_else(|| vec![S::zero(); node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { leaves })
    }

    /// Vector-Jacobian products of node `id` against upstream gradient `g`.
    fn vjp(&self, id: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, padding, stride } => {
                let (dx, dw) = ops::conv2d_backward(val(*x), val(*w), g, *padding, *stride, rg(*x), rg(*w))?;
                let mut v = Vec::new();
                if let Some(dx) = dx {
                    v.push((*x, dx));
                }
                if let Some(dw) = dw {
                    v.push((*w, dw));
                }
                v
            }
            Op::Depthwise { x, w, padding } => {
                let (dx, dw) = ops::depthwise_conv2d_backward(val(*x), val(*w), g, *padding)?;
                vec![(*x, dx), (*w, dw)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![S::zero(); val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] = dx[src] + gv;
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)]
            }
            Op::AvgPool { x, factor } => vec![(*x, ops::avg_pool2d_backward(g, val(*x).shape(), *factor)?)],
            Op::UpsampleNearest { x, factor } => {
                vec![(*x, ops::upsample_nearest_backward(g, val(*x).shape(), *factor)?)]
            }
            Op::ResizeBilinear { x } => vec![(*x, ops::resize_bilinear_backward(g, val(*x).shape())?)],
            Op::GlobalAvgPool { x } => {
                let (_, h, w) = val(*x).dims3()?;
                let norm = S::one() / S::lit((h * w) as f64);
                let gd = g.data();
                vec![(*x, Tensor::from_fn(val(*x).shape().to_vec(), |i| gd[i / (h * w)] * norm))]
            }
            Op::Softmax { x, axis } => vec![(*x, ops::softmax_backward(&node.value, g, *axis)?)],
            Op::RmsNorm { x, eps } => vec![(*x, ops::rms_norm_channels_backward(val(*x), &node.value, g, *eps)?)],
            Op::Add { a, b } => self.binary_vjp(*a, *b, g, |gv, _, _| (gv, gv)),
            Op::Sub { a, b } => self.binary_vjp(*a, *b, g, |gv, _, _| (gv, -gv)),
            Op::Mul { a, b } => self.binary_vjp(*a, *b, g, |gv, av, bv| (gv * bv, gv * av)),
            Op::Scale { x, factor } => vec![(*x, g.map(|v| v * *factor))],
            Op::AddScalar { x } => vec![(*x, g.clone())],
            Op::Relu { x } => vec![(*x, val(*x).zip_map(g, |xv, gv| if xv > S::zero() { gv } else { S::zero() })?)],
            Op::Abs { x } => vec![(*x, val(*x).zip_map(g, |xv, gv| gv * sign(xv))?)],
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]))],
            Op::Mean { x } => {
                let n = S::lit(val(*x).numel() as f64);
                vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0] / n))]
            }
            Op::MatMul { a, b } => {
                let mut v = Vec::new();
                if rg(*a) {
                    let bt = ops::transpose(val(*b))?;
                    v.push((*a, ops::matmul(g, &bt)?.0));
                }
                if rg(*b) {
                    let at = ops::transpose(val(*a))?;
                    v.push((*b, ops::matmul(&at, g)?.0));
                }
                v
            }
            Op::Transpose { x } => vec![(*x, ops::transpose(g)?)],
            Op::Reshape { x } => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::Concat { a, b } => {
                let ca = val(*a).shape()[0];
                let cb = val(*b).shape()[0];
                vec![(*a, ops::slice_channels(g, 0, ca)?), (*b, ops::slice_channels(g, ca, cb)?)]
            }
            Op::Slice { x, start } => {
                let (c, h, w) = val(*x).dims3()?;
                let mut dx = vec![S::zero(); c * h * w];
                dx[start * h * w..start * h * w + g.numel()].copy_from_slice(g.data());
                vec![(*x, Tensor::new([c, h, w], dx)?)]
            }
            Op::ChannelBias { x, b } => {
                let c = val(*b).numel();
                let per = g.numel() / c;
                let db = (0..c).map(|ch| g.data()[ch * per..(ch + 1) * per].iter().copied().sum()).collect();
                vec![(*x, g.clone()), (*b, Tensor::new([c], db)?)]
            }
            Op::RowBias { x, b } => {
                let d = val(*b).numel();
                let mut db = vec![S::zero(); d];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % d] = db[i % d] + gv;
                }
                vec![(*x, g.clone()), (*b, Tensor::new([d], db)?)]
            }
            Op::BroadcastChannels { v } => {
                let c = val(*v).numel();
                let per = g.numel() / c;
                let dv = (0..c).map(|ch| g.data()[ch * per..(ch + 1) * per].iter().copied().sum()).collect();
                vec![(*v, Tensor::new([c], dv)?)]
            }
            Op::Index { x, i } => {
                let mut dx = vec![S::zero(); val(*x).numel()];
                dx[*i] = g.data()[0];
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)]
            }
        };
        Ok(out)
    }

    fn binary_vjp(&self, a: Var, b: Var, g: &Tensor<S>, d: impl Fn(S, S, S) -> (S, S)) -> Vec<(Var, Tensor<S>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = if ta.shape() == tb.shape() {
            Broadcast::None
        } else if tb.numel() == 1 {
            Broadcast::Right
        } else {
            Broadcast::Left
        };
        let out_shape = g.shape().to_vec();
        let n = g.numel();
        let av = |i: usize| if kind == Broadcast::Left { ta.data()[0] } else { ta.data()[i] };
        let bv = |i: usize| if kind == Broadcast::Right { tb.data()[0] } else { tb.data()[i] };
        let mut da = vec![S::zero(); n];
        let mut db = vec![S::zero(); n];
        for i in 0..n {
            let (x, y) = d(g.data()[i], av(i), bv(i));
            da[i] = x;
            db[i] = y;
        }
        let reduce = |v: Vec<S>, collapse: bool| {
            if collapse {
                Tensor::scalar(v.into_iter().sum())
            } else {
                Tensor::new(out_shape.clone(), v).expect("same shape")
            }
        };
        let ga = reduce(da, kind == Broadcast::Left).reshape(ta.shape().to_vec()).expect("shape");
        let gb = reduce(db, kind == Broadcast::Right).reshape(tb.shape().to_vec()).expect("shape");
        vec![(a, ga), (b, gb)]
    }
}

#[inline]
fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Gradients of a loss with respect to the leaves of the consumed tape.
pub struct Gradients<S = f64> {
    leaves: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a leaf recorded with `requires_grad`; `None` otherwise.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}
