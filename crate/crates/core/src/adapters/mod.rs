//! Frozen linear layers with pluggable low-rank adapters, and the toy
//! backbones that host them.

mod backbone;
mod count;
mod layers;
mod params;

pub use backbone::{BackboneSpec, ForwardOutput, LayerOutput, Model};
pub use count::{count_adapter_params, count_trainable_params, ParamCount};
pub use layers::{AdaptedLinear, Adapter, FvaeAdapter, FvaeIntermediates, Linear, LoraAdapter};
pub use params::{Param, ParamCategory, ParamStore, Session};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{standard_normals, stream, Purpose, StreamRng};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite encoder output in `{0}`")]
    NonFiniteEncoder(String),
    #[error("input has {got} features, model expects {expected}")]
    InputWidth { expected: usize, got: usize },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lora,
    Fvae,
    Vae2lat,
    BetaVae2lat,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Lora, Variant::Fvae, Variant::Vae2lat, Variant::BetaVae2lat];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::Fvae => "fvae",
            Variant::Vae2lat => "vae2lat",
            Variant::BetaVae2lat => "beta_vae2lat",
        }
    }

    /// All variants except plain LoRA share the factorized-VAE adapter.
    pub fn uses_vae(self) -> bool {
        self != Variant::Lora
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected lora, fvae, vae2lat or beta_vae2lat)"))
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// LoRA rank, and the dimension of the task-salient latent.
    pub rank_r: usize,
    pub z2_dim: usize,
    pub decoder_hidden: usize,
    pub dropout_p: f64,
    /// Every coordinate of the residual latent's prior mean.
    pub prior2_center: f64,
    pub lora_scale: f64,
    pub variant: Variant,
    /// Whether encoder/decoder linear layers carry a bias.
    #[serde(default = "default_true")]
    pub encoder_bias: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank_r: 16,
            z2_dim: 16,
            decoder_hidden: 128,
            dropout_p: 0.1,
            prior2_center: 1.5,
            lora_scale: 1.0,
            variant: Variant::Fvae,
            encoder_bias: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.rank_r == 0 {
            return bad("adapter.rank_r must be >= 1");
        }
        if self.z2_dim == 0 {
            return bad("adapter.z2_dim must be >= 1");
        }
        if self.decoder_hidden == 0 {
            return bad("adapter.decoder_hidden must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("adapter.dropout_p must lie in [0, 1)");
        }
        if !self.prior2_center.is_finite() || !self.lora_scale.is_finite() {
            return bad("adapter.prior2_center and adapter.lora_scale must be finite");
        }
        Ok(())
    }
}

/// Source of the stochastic inputs of a training-mode forward pass:
/// dropout keep-masks and the two reparameterization noise streams.
#[derive(Debug, Clone)]
pub struct Noise {
    dropout: Option<StreamRng>,
    eps1: Option<StreamRng>,
    eps2: Option<StreamRng>,
}

impl Noise {
    /// Streams for optimisation step `step` of a run seeded with `seed`.
    pub fn for_step(seed: u64, step: u64) -> Self {
        Self {
            dropout: Some(stream(seed, Purpose::Dropout, step)),
            eps1: Some(stream(seed, Purpose::Eps1, step)),
            eps2: Some(stream(seed, Purpose::Eps2, step)),
        }
    }

    /// No dropout and zero reparameterization noise.
    pub fn zero() -> Self {
        Self {
            dropout: None,
            eps1: None,
            eps2: None,
        }
    }

    /// Sampled latents but no dropout.
    pub fn without_dropout(mut self) -> Self {
        self.dropout = None;
        self
    }

    pub(crate) fn keep_mask(&mut self, shape: &[usize], p: f64) -> Option<Tensor> {
        use rand::RngExt;
        let rng = self.dropout.as_mut()?;
        if p == 0.0 {
            return None;
        }
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 })
            .collect();
        Some(Tensor::new(shape.to_vec(), data).expect("mask shape"))
    }

    fn draw(rng: Option<&mut StreamRng>, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = match rng {
            Some(rng) => standard_normals(rng, n),
            None => vec![0.0; n],
        };
        Tensor::new(shape.to_vec(), data).expect("noise shape")
    }

    pub(crate) fn eps1(&mut self, shape: &[usize]) -> Tensor {
        Self::draw(self.eps1.as_mut(), shape)
    }

    pub(crate) fn eps2(&mut self, shape: &[usize]) -> Tensor {
        Self::draw(self.eps2.as_mut(), shape)
    }
}

/// How a forward pass treats the adapters.
#[derive(Debug)]
pub enum Mode<'n> {
    /// Dropout and sampled latents; every VAE component is evaluated.
    Train(&'n mut Noise),
    /// Deterministic inference: only the task-salient encoder's mean feeds `B`.
    Infer,
    /// Inference that samples `z₁` instead of taking its mean.
    InferSampled(&'n mut Noise),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}
