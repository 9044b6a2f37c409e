//! Named parameter storage and binding of parameters into a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use stflow_tensor::{Graph, Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered parameter table. Order of insertion is the serialization
/// order and the optimizer's slot order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        self.values.clone_from(&other.values);
    }
}

/// A graph plus the parameters bound into it.
///
/// Each parameter becomes a single leaf the first time it is used, so repeated
/// uses accumulate into one gradient.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    /// Records gradients for trainable parameters.
    pub fn train(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::no_grad(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .g
            .leaf(self.store.get(id).clone(), self.store.is_trainable(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Runs the reverse pass and returns one gradient per parameter; unused or
    /// frozen parameters get zeros.
    pub fn param_grads(&mut self, loss: Var) -> Result<Vec<Tensor>> {
        let mut grads = self.g.backward(loss)?;
        Ok(self
            .store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect())
    }
}

/// A 2-D convolution with bias, "same" padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform fan-in scaled.
    Default,
    Zero,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let w = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::Default => {
                let bound = (1.0 / (c_in * kernel * kernel) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(&shape, |_| dist.sample(rng))
            }
        };
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        Ok(ctx.g.conv2d(x, w, Some(b), self.stride, self.pad)?)
    }
}
