//! Named parameters and the layer helpers the network is assembled from.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{arg_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations in a stable order.
#[derive(Default, Debug)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
        });
    }

    /// `{name}.w` of shape `[c_out, c_in, k, k]` plus `{name}.b` when `bias`.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool) {
        self.push(format!("{name}.w"), [c_out, c_in, k, k], Init::FanIn(c_in * k * k));
        if bias {
            self.push(format!("{name}.b"), [c_out], Init::Zeros);
        }
    }

    pub fn depthwise(&mut self, name: &str, channels: usize, k: usize) {
        self.push(format!("{name}.w"), [channels, k, k], Init::FanIn(k * k));
    }

    /// `{name}.w` of shape `[d_in, d_out]` and `{name}.b` of shape `[d_out]`.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        self.push(format!("{name}.w"), [d_in, d_out], Init::FanIn(d_in));
        self.push(format!("{name}.b"), [d_out], Init::Zeros);
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Learnable tensors keyed by hierarchical dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S = f64> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    /// Draws every declared tensor from a generator seeded with `seed`,
    /// in declaration order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(spec.shape.clone(), |_| S::lit(rng.random_range(-bound..bound)))
                }
                Init::Uniform(bound) => Tensor::from_fn(spec.shape.clone(), |_| S::lit(rng.random_range(-bound..bound))),
            };
            tensors.insert(spec.name.clone(), t);
        }
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Option<Tensor<S>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// A forward pass in progress: the tape plus lazily bound parameters.
pub struct Session<'a, S: Scalar = f64> {
    pub graph: Graph<S>,
    params: &'a ParamStore<S>,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'a, S: Scalar> Session<'a, S> {
    /// `trainable` decides whether bound parameters require gradients.
    pub fn new(params: &'a ParamStore<S>, trainable: bool) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn params(&self) -> &'a ParamStore<S> {
        self.params
    }

    /// Records parameter `name` on the tape (once) and returns its handle.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| arg_err("param", format!("unknown parameter {name:?}")))?;
        let v = self.graph.leaf(t.clone(), self.trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes parameter `name` to an already recorded value.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.graph.value(v)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        self.graph.constant(t)
    }

    /// Back-propagates `loss` and returns gradients keyed by parameter name.
    pub fn param_grads(&mut self, loss: Var) -> Result<BTreeMap<String, Tensor<S>>> {
        let mut grads: Gradients<S> = self.graph.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    /// `{name}.w` convolution with optional `{name}.b` bias.
    pub fn conv(&mut self, x: Var, name: &str, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let y = self.graph.conv2d(x, w, padding, 1)?;
        self.bias(y, name)
    }

    pub fn conv_relu(&mut self, x: Var, name: &str, padding: usize) -> Result<Var> {
        let y = self.conv(x, name, padding)?;
        self.graph.relu(y)
    }

    pub fn depthwise(&mut self, x: Var, name: &str, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        self.graph.depthwise_conv2d(x, w, padding)
    }

    /// Token-wise affine map of a `[T, d_in]` matrix.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row_bias(y, b)
    }

    fn bias(&mut self, y: Var, name: &str) -> Result<Var> {
        let bname = format!("{name}.b");
        if self.has_param(&bname) {
            let b = self.param(&bname)?;
            self.graph.add_channel_bias(y, b)
        } else {
            Ok(y)
        }
    }
}
