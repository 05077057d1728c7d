//! Experiment configuration and single-run orchestration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterConfig, BackboneSpec, Model, ModelError, ParamCount, Variant};
use crate::data::{generate_spurious, DataError, DatasetSpec, GroupedDataset};
use crate::objectives::{ObjectiveCoeffs, ObjectiveError};
use crate::train::{Checkpoint, MetricsLog, MetricsRow, NonFinitePolicy, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_eval_every() -> u64 {
    TrainConfig::default().eval_every
}

/// Optimisation settings of an experiment document. The adapter variant and
/// objective coefficients come from their own sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub non_finite: NonFinitePolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_fraction: t.warmup_fraction,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            eval_every: t.eval_every,
            non_finite: t.non_finite,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: BackboneSpec,
    pub adapter: AdapterConfig,
    pub objective: ObjectiveCoeffs,
    pub train: TrainSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: BackboneSpec::default(),
            adapter: AdapterConfig::default(),
            objective: ObjectiveCoeffs::default(),
            train: TrainSection::default(),
            output_dir: default_output_dir(),
        }
    }
}

fn prefixed(section: &str, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Invalid(format!("{section}: {e}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_fraction: t.warmup_fraction,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            variant: self.adapter.variant,
            coeffs: self.objective.clone(),
            eval_every: t.eval_every,
            non_finite: t.non_finite,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.adapter.variant = variant;
        c
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| prefixed("dataset", e))?;
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.adapter.validate().map_err(|e| prefixed("adapter", e))?;
        self.objective.validate().map_err(|e| prefixed("objective", e))?;
        self.train_config().validate().map_err(|e| prefixed("train", e))?;
        if self.dataset.feature_dim() != self.model.input_dim() {
            return Err(ExperimentError::Invalid(format!(
                "dataset has {} features but model.input_dim is {}",
                self.dataset.feature_dim(),
                self.model.input_dim()
            )));
        }
        if self.dataset.num_classes > self.model.num_classes() {
            return Err(ExperimentError::Invalid(format!(
                "dataset has {} classes but model.num_classes is {}",
                self.dataset.num_classes,
                self.model.num_classes()
            )));
        }
        let model = self.build_model()?;
        let layers = if self.adapter.variant.uses_vae() {
            model.num_adapted()
        } else {
            0
        };
        if layers > 0 {
            self.objective
                .lambdas(layers)
                .map_err(|e: ObjectiveError| prefixed("objective.lambda", e))?;
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Model> {
        Ok(Model::build(&self.model, Some(&self.adapter), self.train.seed)?)
    }

    pub fn generate_data(&self) -> Result<(GroupedDataset, GroupedDataset)> {
        Ok(generate_spurious(&self.dataset)?)
    }
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub steps: u64,
    pub acc: f64,
    pub wg: f64,
    pub avg: f64,
    pub disparity: f64,
    /// Mean over adapted layers on the evaluation set; absent for LoRA.
    pub w2: Option<f64>,
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    pub kl1: Option<f64>,
    pub params: ParamCount,
}

impl RunSummary {
    pub fn from_row(variant: Variant, seed: u64, row: &MetricsRow, params: ParamCount) -> Self {
        let opt = |v: f64| v.is_finite().then_some(v);
        Self {
            variant,
            seed,
            steps: row.step,
            acc: row.acc,
            wg: row.wg,
            avg: row.avg,
            disparity: row.disparity,
            w2: opt(row.w2),
            lambda: opt(row.lambda),
            delta: opt(row.delta),
            gamma: opt(row.gamma),
            kl1: opt(row.kl1),
            params,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub log: MetricsLog,
    pub summary: RunSummary,
    pub checkpoint: Checkpoint,
}

/// Trains one configuration on pre-generated data.
pub fn run_on(cfg: &ExperimentConfig, train: &GroupedDataset, test: &GroupedDataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let params = model.param_count();
    let mut trainer = Trainer::new(model, cfg.train_config(), train, Some(test))?;
    trainer.run()?;
    let checkpoint = trainer.checkpoint();
    let (_, log) = trainer.into_parts();
    let last = log
        .last_eval()
        .ok_or_else(|| ExperimentError::Invalid("run produced no evaluation".into()))?;
    let summary = RunSummary::from_row(cfg.adapter.variant, cfg.train.seed, last, params);
    Ok(RunOutcome {
        config: cfg.clone(),
        log,
        summary,
        checkpoint,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = cfg.generate_data()?;
    run_on(cfg, &train, &test)
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fvl";
pub const SUMMARY_FILE: &str = "summary.json";

impl RunOutcome {
    /// Writes config, metrics, checkpoint and summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join(CONFIG_FILE);
        std::fs::write(&p, self.config.to_json()).map_err(io_err(&p))?;
        let p = dir.join(METRICS_FILE);
        std::fs::write(&p, self.log.to_csv()).map_err(io_err(&p))?;
        self.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        let p = dir.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&self.summary)?;
        std::fs::write(&p, json).map_err(io_err(&p))?;
        Ok(())
    }
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let p = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    Ok(serde_json::from_str(&text)?)
}

/// Directory name of one run inside an output directory.
pub fn run_dir_name(variant: Variant, seed: u64) -> String {
    format!("{}_seed{seed}", variant.name())
}

/// Per-layer Γ-probe series taken from the evaluation rows of a log.
pub fn gamma_probe_csv(log: &MetricsLog) -> String {
    let mut out = String::from("step,layer,lambda,delta,gamma,w2,kl1\n");
    for r in log.evals() {
        for (name, t) in &r.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, name, t.lambda_mismatch, t.delta_discrepancy, t.gamma, t.w2, t.kl1
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.dataset.n_train = 64;
        c.dataset.n_test = 40;
        c.adapter.rank_r = 2;
        c.adapter.z2_dim = 2;
        c.adapter.decoder_hidden = 8;
        c.train.epochs = 1;
        c.train.batch_size = 16;
        c.train.eval_every = 2;
        c
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["dataset"]["rho"] = serde_json::json!(0.5);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn validation_names_the_section_and_field() {
        let mut c = ExperimentConfig::default();
        c.dataset.rho_train = 1.5;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("dataset") && msg.contains("rho_train"), "{msg}");

        let mut c = ExperimentConfig::default();
        c.dataset.noise_dim = 3;
        assert!(c.validate().unwrap_err().to_string().contains("input_dim"));

        let mut c = ExperimentConfig::default();
        c.train.batch_size = 0;
        assert!(c.validate().unwrap_err().to_string().contains("batch_size"));

        let mut c = ExperimentConfig::default();
        c.objective.lambda = crate::objectives::LayerWeights::PerLayer(vec![0.1]);
        assert!(c.validate().unwrap_err().to_string().contains("lambda"));
    }

    #[test]
    fn run_writes_artifacts() {
        let c = tiny();
        let out = run(&c).unwrap();
        assert_eq!(out.summary.steps, 4);
        assert!(out.summary.w2.unwrap() >= 0.0);
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        for f in [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, SUMMARY_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(read_summary(dir.path()).unwrap(), out.summary);
        let probe = gamma_probe_csv(&out.log);
        assert!(probe.starts_with("step,layer,lambda,delta,gamma,w2,kl1\n"));
        assert_eq!(probe.lines().count(), 1 + 2 * 2);

        let lora = run(&c.with_variant(Variant::Lora)).unwrap();
        assert!(lora.summary.w2.is_none());
        assert!(lora.summary.params.total < out.summary.params.total);
    }
}
