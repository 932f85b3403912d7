//! Named parameter storage and initialization.

use std::collections::BTreeMap;

use aggpose_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters receive no gradient and no optimizer update.
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub(crate) fn insert(&mut self, name: String, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        id
    }

    /// Leaf variables for every parameter, in store order.
    pub fn bind(&self, graph: &Graph<T>) -> Vec<Var<T>> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), !p.frozen))
            .collect()
    }

    pub fn set_frozen_where(&mut self, frozen: bool, mut pred: impl FnMut(&str) -> bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if pred(&p.name) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// Freeze exactly the parameters of `levels` (1-based) and unfreeze the rest.
    pub fn freeze_levels(&mut self, levels: &[usize]) -> usize {
        self.unfreeze_all();
        self.set_frozen_where(true, |n| param_level(n).is_some_and(|l| levels.contains(&l)))
    }

    pub fn unfreeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = false);
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| p.frozen).map(|p| p.name.as_str()).collect()
    }
}

/// Resolution level (1-based) a parameter belongs to, from its `levelN` path segment.
pub fn param_level(name: &str) -> Option<usize> {
    name.split('.')
        .find_map(|seg| seg.strip_prefix("level").and_then(|n| n.parse().ok()))
}

/// Normal sample truncated to `[-2σ, 2σ]`.
pub fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Standard deviation of projection weights.
pub const INIT_STD: f64 = 0.02;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix: format!("{}{name}.", self.prefix),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.store.insert(format!("{}{name}", self.prefix), value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape))
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(trunc_normal(rng, std)));
        self.tensor(name, t)
    }
}
