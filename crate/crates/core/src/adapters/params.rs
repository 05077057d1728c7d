use std::collections::{BTreeMap, BTreeSet};

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::rng::{named_stream, Purpose};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamCategory {
    /// Frozen backbone weights.
    Backbone,
    /// LoRA `A` and `B`.
    LoraAb,
    Enc1,
    Enc2,
    Dec,
    /// The FVAE adapter's up-projection.
    B,
    Head,
}

impl ParamCategory {
    pub fn trainable(self) -> bool {
        self != ParamCategory::Backbone
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub category: ParamCategory,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, category: ParamCategory) {
        self.params.insert(name.into(), Param { value, category });
    }

    /// Uniform in `±bound`, drawn from a stream keyed by `(seed, name)`.
    pub fn init_uniform(&mut self, seed: u64, name: &str, shape: Vec<usize>, bound: f64, category: ParamCategory) {
        let mut rng = named_stream(seed, Purpose::Init, name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"), category);
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>, category: ParamCategory) {
        self.insert(name, Tensor::zeros(shape), category);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    /// Replaces a parameter's value, keeping its category. Shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(ModelError::InvalidSpec(format!(
                "shape of `{name}` is {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Moves a parameter into the frozen category.
    pub fn freeze(&mut self, name: &str) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        p.category = ParamCategory::Backbone;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.iter().filter(|(_, p)| p.category.trainable())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// FNV-1a over the names and bit patterns of the selected parameters.
    pub fn fingerprint(&self, mut select: impl FnMut(&str, &Param) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, p) in self.iter() {
            if !select(name, p) {
                continue;
            }
            feed(name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// One forward pass: a fresh graph plus lazily bound parameters.
///
/// Every parameter read goes through [`Session::param`], so after a pass
/// [`Session::touched`] lists exactly the parameters the pass used.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_graph(params, Graph::new())
    }

    pub fn with_graph(params: &'p ParamStore, graph: Graph) -> Self {
        Self {
            graph,
            params,
            bound: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Binds `name` into the graph; frozen parameters enter as constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        let v = self.graph.leaf(p.value.clone(), p.category.trainable());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes `name` resolve to an existing graph node, e.g. a gradcheck leaf.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        if self.params.get(name).is_none() {
            return Err(ModelError::UnknownParam(name.to_string()));
        }
        self.bound.insert(name.to_string(), var);
        Ok(())
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    pub fn touched(&self) -> BTreeSet<String> {
        self.bound.keys().cloned().collect()
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients for every trainable parameter of the store; parameters the
    /// pass never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .trainable()
            .map(|(name, p)| {
                let g = match self.bound.get(name) {
                    Some(&v) => grads.wrt(v),
                    None => Tensor::zeros(p.value.shape().to_vec()),
                };
                (name.to_string(), g)
            })
            .collect()
    }
}
