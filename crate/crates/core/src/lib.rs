//! FVAE-LoRA: low-rank adapters whose down-projection is the task-salient
//! encoder of a factorized two-latent VAE.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense `f64` tensors with reverse-mode differentiation.
//! * [`gaussian`] – closed-form KL, cross-entropy, the Γ = Λ + Δ split and
//!   the 2-Wasserstein bound on Δ for diagonal Gaussians.
//! * [`adapters`] – frozen linear layers with LoRA / FVAE adapters and the two
//!   toy backbones that host them.
//! * [`objectives`] – the per-layer ELBO variants and the total loss.
//! * [`container`] – the binary file format for checkpoints and datasets.
//! * [`data`] – synthetic grouped datasets with a controllable spurious
//!   attribute, plus worst-group metrics.
//! * [`train`] – AdamW, the warmup/decay schedule, checkpoints and the
//!   training loop.
//! * [`verify`] – self-checks runnable from the command line.
//! * [`experiment`] – experiment configuration and run orchestration.

pub mod adapters;
pub mod container;
pub mod data;
pub mod experiment;
pub mod gaussian;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
pub use adapters::{AdapterConfig, BackboneSpec, Model, Variant};
pub use data::{DatasetSpec, GroupMetrics, GroupedDataset};
pub use gaussian::{DiagGaussian, GammaReport};
pub use objectives::{LossBreakdown, ObjectiveCoeffs};
pub use tensor::{Graph, Tensor, Var};
pub use train::{MetricsLog, TrainConfig};
