//! Deterministic training and evaluation.
//!
//! All randomness comes from counter-keyed streams: the shuffle order of
//! epoch `e` from `(seed, Shuffle, e)` and the dropout and latent noise of
//! step `k` from `(seed, Dropout | Eps1 | Eps2, k)`. A run is therefore fully
//! described by its configuration, parameters, optimizer moments and step
//! counter, which is exactly what a checkpoint stores.

mod checkpoint;
mod metrics;
mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{Model, ModelError, Noise, Session, Variant};
use crate::container::ContainerError;
use crate::data::{group_metrics, DataError, GroupedDataset};
use crate::objectives::{self, LossBreakdown, ObjectiveCoeffs, ObjectiveError};
use crate::rng::{stream, Purpose};
use crate::tensor::TensorError;

pub use checkpoint::Checkpoint;
pub use metrics::{MetricsLog, MetricsRow, Split, CSV_HEADER};
pub use optim::{first_non_finite, lr_at, optimizer_step, warmup_steps, AdamState, BETA1, BETA2, EPS};

/// Training stops when the total loss exceeds this magnitude.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: field `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("training diverged at step {step}: total loss {loss} ({detail})")]
    Diverged { step: u64, loss: f64, detail: String },
    #[error("non-finite gradient for `{param}` at step {step}")]
    NonFiniteGradient { step: u64, param: String },
    #[error("gradient for `{param}` has shape {got:?}, expected {expected:?}")]
    GradShape {
        param: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("data does not fit the model: {0}")]
    Incompatible(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// What to do when a gradient contains NaN or ±∞.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    #[default]
    Abort,
    /// Drop the update and continue with the next batch.
    Skip,
}

fn default_eval_every() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub coeffs: ObjectiveCoeffs,
    /// Evaluate every this many optimizer steps, and always after the last.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub non_finite: NonFinitePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            epochs: 20,
            batch_size: 32,
            seed: 1,
            variant: Variant::Fvae,
            coeffs: ObjectiveCoeffs::default(),
            eval_every: default_eval_every(),
            non_finite: NonFinitePolicy::Abort,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(TrainError::InvalidConfig { field, reason });
        // lr = 0 is accepted so that a run can be a pure evaluation pass.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", format!("must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(
                "weight_decay",
                format!("must be finite and non-negative, got {}", self.weight_decay),
            );
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(
                "warmup_fraction",
                format!("must lie in [0, 1], got {}", self.warmup_fraction),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        self.coeffs.validate()?;
        Ok(())
    }
}

fn check_compatible(model: &Model, ds: &GroupedDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(TrainError::Incompatible(format!("{what} set is empty")));
    }
    if ds.dim() != model.input_dim() {
        return Err(TrainError::Incompatible(format!(
            "{what} features have width {}, model expects {}",
            ds.dim(),
            model.input_dim()
        )));
    }
    if ds.num_classes > model.num_classes() {
        return Err(TrainError::Incompatible(format!(
            "{what} set has {} classes, model head has {}",
            ds.num_classes,
            model.num_classes()
        )));
    }
    Ok(())
}

/// Names of the adapted layers, in network order.
fn layer_names(model: &Model) -> Vec<String> {
    model.adapted_layers().iter().map(|l| l.base.name.clone()).collect()
}

fn row_from(step: u64, split: Split, bd: &LossBreakdown, names: &[String]) -> MetricsRow {
    MetricsRow {
        step,
        split,
        loss_total: bd.total,
        loss_downstream: bd.downstream,
        recon: if bd.layers.is_empty() { f64::NAN } else { bd.recon },
        kl1: if bd.layers.is_empty() { f64::NAN } else { bd.kl1 },
        lambda: if bd.layers.is_empty() {
            f64::NAN
        } else {
            bd.lambda_mismatch
        },
        delta: if bd.layers.is_empty() {
            f64::NAN
        } else {
            bd.delta_discrepancy
        },
        gamma: if bd.layers.is_empty() { f64::NAN } else { bd.gamma },
        w2: if bd.layers.is_empty() { f64::NAN } else { bd.w2 },
        acc: f64::NAN,
        wg: f64::NAN,
        avg: f64::NAN,
        disparity: f64::NAN,
        layers: names.iter().cloned().zip(bd.layers.iter().copied()).collect(),
    }
}

/// Group metrics of the inference path (posterior means, no dropout).
pub fn evaluate(model: &Model, ds: &GroupedDataset) -> Result<crate::data::GroupMetrics> {
    check_compatible(model, ds, "evaluation")?;
    let preds = model.predict(&ds.features)?;
    Ok(group_metrics(&preds, ds)?)
}

/// The loss breakdown of `model` on the whole of `ds` with dropout off and
/// latents at their posterior means.
pub fn deterministic_breakdown(model: &Model, ds: &GroupedDataset, coeffs: &ObjectiveCoeffs) -> Result<LossBreakdown> {
    let mut s = Session::new(&model.params);
    let mut noise = Noise::zero();
    let (_, bd) = objectives::batch_loss(model, &mut s, &ds.features, &ds.labels, &mut noise, coeffs)?;
    Ok(bd)
}

/// One evaluation row: the deterministic loss breakdown and Γ-probe terms
/// plus group metrics of the inference path.
pub fn eval_row(model: &Model, ds: &GroupedDataset, coeffs: &ObjectiveCoeffs, step: u64) -> Result<MetricsRow> {
    let metrics = evaluate(model, ds)?;
    let bd = deterministic_breakdown(model, ds, coeffs)?;
    let mut row = row_from(step, Split::Eval, &bd, &layer_names(model));
    row.acc = metrics.avg;
    row.wg = metrics.wg;
    row.avg = metrics.avg;
    row.disparity = metrics.disparity;
    Ok(row)
}

/// A training run in progress.
#[derive(Debug)]
pub struct Trainer<'d> {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub log: MetricsLog,
    train: &'d GroupedDataset,
    eval: Option<&'d GroupedDataset>,
    step: u64,
    skipped: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: Model,
        config: TrainConfig,
        train: &'d GroupedDataset,
        eval: Option<&'d GroupedDataset>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(a) = &model.adapter {
            if a.variant != config.variant {
                return Err(TrainError::InvalidConfig {
                    field: "variant",
                    reason: format!("model adapter is `{}` but config says `{}`", a.variant, config.variant),
                });
            }
        }
        check_compatible(&model, train, "training")?;
        if let Some(e) = eval {
            check_compatible(&model, e, "evaluation")?;
        }
        let names = layer_names(&model);
        config.coeffs.lambdas(names.len())?;
        Ok(Self {
            model,
            config,
            adam: AdamState::new(),
            log: MetricsLog::default(),
            train,
            eval,
            step: 0,
            skipped: 0,
            order: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Steps whose update was dropped under [`NonFinitePolicy::Skip`].
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut stream(self.config.seed, Purpose::Shuffle, epoch));
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().expect("set above").1;
        let b = (self.step % spe) as usize * self.config.batch_size;
        order[b..(b + self.config.batch_size).min(order.len())].to_vec()
    }

    /// One optimizer step on the next batch.
    pub fn step_once(&mut self) -> Result<LossBreakdown> {
        let idx = self.batch_indices();
        let (x, labels) = self.train.batch(&idx);
        let mut noise = Noise::for_step(self.config.seed, self.step);
        let (grads, bd) = {
            let mut s = Session::new(&self.model.params);
            let (total, bd) =
                objectives::batch_loss(&self.model, &mut s, &x, &labels, &mut noise, &self.config.coeffs)?;
            if !bd.total.is_finite() || bd.total.abs() > DIVERGENCE_THRESHOLD {
                return Err(TrainError::Diverged {
                    step: self.step,
                    loss: bd.total,
                    detail: format!(
                        "downstream {}, recon {}, kl1 {}, gamma {}",
                        bd.downstream, bd.recon, bd.kl1, bd.gamma
                    ),
                });
            }
            let g = s.graph.backward(total)?;
            (s.param_grads(&g), bd)
        };
        let lr = lr_at(
            self.step,
            self.total_steps(),
            self.config.warmup_fraction,
            self.config.lr,
        );
        match optimizer_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            lr,
            self.config.weight_decay,
        ) {
            Ok(()) => {}
            Err(TrainError::NonFiniteGradient { param, .. }) => match self.config.non_finite {
                NonFinitePolicy::Abort => {
                    return Err(TrainError::NonFiniteGradient { step: self.step, param });
                }
                NonFinitePolicy::Skip => self.skipped += 1,
            },
            Err(e) => return Err(e),
        }
        self.step += 1;
        Ok(bd)
    }

    fn log_point(&mut self, bd: &LossBreakdown) -> Result<()> {
        let names = layer_names(&self.model);
        self.log.push(row_from(self.step, Split::Train, bd, &names));
        if let Some(ds) = self.eval {
            let row = eval_row(&self.model, ds, &self.config.coeffs, self.step)?;
            self.log.push(row);
        }
        Ok(())
    }

    /// Trains until `stop` steps have been taken in total, or the run ends.
    pub fn run_until(&mut self, stop: u64) -> Result<()> {
        let end = stop.min(self.total_steps());
        while self.step < end {
            let bd = self.step_once()?;
            if self.step.is_multiple_of(self.config.eval_every) || self.step == self.total_steps() {
                self.log_point(&bd)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(u64::MAX)
    }

    pub fn into_parts(self) -> (Model, MetricsLog) {
        (self.model, self.log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            spec: self.model.spec.clone(),
            adapter: self.model.adapter.clone(),
            step: self.step,
            skipped: self.skipped,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Continues a run from a checkpoint. The metrics log starts empty.
    pub fn resume(ckpt: Checkpoint, train: &'d GroupedDataset, eval: Option<&'d GroupedDataset>) -> Result<Self> {
        let model = ckpt.model()?;
        let mut t = Self::new(model, ckpt.config, train, eval)?;
        t.adam = ckpt.adam;
        t.step = ckpt.step;
        t.skipped = ckpt.skipped;
        Ok(t)
    }
}

/// Trains `model` to completion.
pub fn train(
    model: Model,
    train: &GroupedDataset,
    eval: Option<&GroupedDataset>,
    config: &TrainConfig,
) -> Result<(Model, MetricsLog)> {
    let mut t = Trainer::new(model, config.clone(), train, eval)?;
    t.run()?;
    Ok(t.into_parts())
}
