use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Result, TrainConfig, TrainError};
use crate::adapters::{AdapterConfig, BackboneSpec, Model, ParamStore};
use crate::container::Container;

const KIND: &str = "fvl-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    kind: String,
    config: TrainConfig,
    spec: BackboneSpec,
    adapter: Option<AdapterConfig>,
    step: u64,
    skipped: u64,
    adam_t: u64,
    /// Randomness is keyed by `(seed, purpose, step)`; the seed and step
    /// counter are the whole generator state.
    rng: RngDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngDoc {
    scheme: String,
    seed: u64,
    step: u64,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub spec: BackboneSpec,
    pub adapter: Option<AdapterConfig>,
    pub step: u64,
    pub skipped: u64,
    pub params: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Rebuilds the model and overwrites every parameter with the stored one.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::build(&self.spec, self.adapter.as_ref(), self.config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, p) in self.params.iter() {
            model.params.set(name, p.value.clone())?;
        }
        Ok(model)
    }

    pub fn to_container(&self) -> Result<Container> {
        let doc = Doc {
            kind: KIND.into(),
            config: self.config.clone(),
            spec: self.spec.clone(),
            adapter: self.adapter.clone(),
            step: self.step,
            skipped: self.skipped,
            adam_t: self.adam.t,
            rng: RngDoc {
                scheme: "pcg64-counter".into(),
                seed: self.config.seed,
                step: self.step,
            },
        };
        let doc = serde_json::to_value(doc).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut c = Container::new(doc);
        for (name, p) in self.params.iter() {
            c.push_f64(format!("param/{name}"), p.value.clone());
        }
        for (name, m) in &self.adam.m {
            c.push_f64(format!("adam_m/{name}"), m.clone());
        }
        for (name, v) in &self.adam.v {
            c.push_f64(format!("adam_v/{name}"), v.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let doc: Doc = serde_json::from_value(c.doc.clone()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if doc.kind != KIND {
            return Err(TrainError::Checkpoint(format!(
                "container holds `{}`, not a checkpoint",
                doc.kind
            )));
        }
        let model = Model::build(&doc.spec, doc.adapter.as_ref(), doc.config.seed)?;
        let mut params = ParamStore::new();
        let mut adam = AdamState {
            t: doc.adam_t,
            ..AdamState::default()
        };
        for e in &c.entries {
            let (kind, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| TrainError::Checkpoint(format!("unexpected entry `{}`", e.name)))?;
            let t = c.tensor(&e.name)?.clone();
            match kind {
                "param" => {
                    let category = model
                        .params
                        .get(name)
                        .ok_or_else(|| TrainError::Checkpoint(format!("unknown parameter `{name}`")))?
                        .category;
                    params.insert(name, t, category);
                }
                "adam_m" => {
                    adam.m.insert(name.to_string(), t);
                }
                "adam_v" => {
                    adam.v.insert(name.to_string(), t);
                }
                _ => return Err(TrainError::Checkpoint(format!("unexpected entry `{}`", e.name))),
            }
        }
        Ok(Self {
            config: doc.config,
            spec: doc.spec,
            adapter: doc.adapter,
            step: doc.step,
            skipped: doc.skipped,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
