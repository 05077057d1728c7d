//! The `fvl` command line: data generation, training, evaluation,
//! verification, Γ probing and reporting.
//!
//! Exit codes: 0 success, 1 verification or experiment failure, 2 usage or
//! configuration error. Every command validates its full input before it
//! writes anything.

pub mod report;
pub mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use fvl_core::data::GroupedDataset;
use fvl_core::experiment::{
    self, gamma_probe_csv, io_err, run_dir_name, ExperimentConfig, ExperimentError, RunOutcome,
};
use fvl_core::train::{eval_row, Checkpoint, MetricsLog};
use fvl_core::verify::{self, Faults, Suite, VerifyOptions};
use fvl_core::Variant;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn config_err(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::Invalid(_) | ExperimentError::Parse(_) | ExperimentError::Io { .. } => usage(e),
        other => failure(other),
    }
}

pub const TRAIN_DATA: &str = "train.fvl";
pub const TEST_DATA: &str = "test.fvl";
pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const PROBE_CSV: &str = "gamma_probe.csv";
pub const PROBE_SVG: &str = "gamma_probe.svg";

#[derive(Debug, Parser)]
#[command(
    name = "fvl",
    version,
    about = "FVAE-LoRA experiments on synthetic spurious-correlation data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/test splits as CSV and binary files.
    Gendata(GendataArgs),
    /// Train one variant for one or more seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the built-in verification suites.
    Verify(VerifyArgs),
    /// Train and record the per-layer Λ, Δ, Γ, W₂ and KL trajectory.
    GammaProbe(ProbeArgs),
    /// Summarise finished runs into a markdown table and plots.
    Report(ReportArgs),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: <output_dir>/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seeds; each gets its own run directory.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Overrides adapter.variant: lora, fvae, vae2lat or beta_vae2lat.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Output directory [default: the config's output_dir].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory written by `gendata`; generated from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A `checkpoint.fvl` written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A `.fvl` or `.csv` dataset file, or a `gendata` directory (its test split).
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the metrics row to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// all, gradcheck, analytics or identities.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the check table as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Debug hook: deliberately break a computation (`delta-sign`).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Experiment config (JSON) with a two-latent adapter variant.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Output directory [default: <output_dir>/gamma_probe].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or directories containing run directories.
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
    /// Where to write report.md and the plots [default: the first run dir].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gendata(a) => cmd_gendata(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::GammaProbe(a) => cmd_gamma_probe(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(config_err)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| failure(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| failure(format!("{}: {e}", path.display())))
}

pub fn cmd_gendata(a: GendataArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("data"));
    let (train, test) = cfg.generate_data().map_err(config_err)?;
    create_dir(&out)?;
    for (name, ds) in [("train", &train), ("test", &test)] {
        ds.save_csv(&out.join(format!("{name}.csv"))).map_err(failure)?;
        ds.save_binary(&out.join(format!("{name}.fvl"))).map_err(failure)?;
    }
    write(
        &out.join("dataset.json"),
        serde_json::to_string_pretty(&cfg.dataset).expect("serializes"),
    )?;
    println!(
        "wrote {} train and {} test examples ({} features) to {}",
        train.len(),
        test.len(),
        train.dim(),
        out.display()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<GroupedDataset, CliError> {
    if path.is_dir() {
        return load_dataset(&path.join(TEST_DATA));
    }
    if !path.exists() {
        return Err(usage(format!("dataset {} does not exist", path.display())));
    }
    let res = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => GroupedDataset::load_csv(path),
        _ => GroupedDataset::load_binary(path),
    };
    res.map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn data_for(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<(GroupedDataset, GroupedDataset), CliError> {
    match dir {
        Some(d) => {
            for f in [TRAIN_DATA, TEST_DATA] {
                if !d.join(f).exists() {
                    return Err(usage(format!("dataset file {} does not exist", d.join(f).display())));
                }
            }
            let train = load_dataset(&d.join(TRAIN_DATA))?;
            let test = load_dataset(&d.join(TEST_DATA))?;
            for (name, ds) in [("train", &train), ("test", &test)] {
                if ds.dim() != cfg.model.input_dim() {
                    return Err(usage(format!(
                        "{name} data has {} features but model.input_dim is {}",
                        ds.dim(),
                        cfg.model.input_dim()
                    )));
                }
            }
            Ok((train, test))
        }
        None => cfg.generate_data().map_err(config_err),
    }
}

/// Worker count for seed sweeps: `FVL_THREADS` if set, else all cores.
pub fn sweep_threads() -> Result<usize, CliError> {
    match std::env::var("FVL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("FVL_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs every seed on a bounded pool. Each run writes only to its own
/// directory.
fn sweep(
    cfgs: Vec<ExperimentConfig>,
    train: &GroupedDataset,
    test: &GroupedDataset,
    out: &Path,
    extra: impl Fn(&RunOutcome, &Path) -> Result<(), CliError> + Sync,
) -> Result<Vec<RunOutcome>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads()?)
        .build()
        .map_err(failure)?;
    let results: Vec<Result<RunOutcome, CliError>> = pool.install(|| {
        cfgs.par_iter()
            .map(|cfg| {
                let dir = out.join(run_dir_name(cfg.adapter.variant, cfg.train.seed));
                let outcome = experiment::run_on(cfg, train, test).map_err(failure)?;
                outcome.write(&dir).map_err(failure)?;
                extra(&outcome, &dir)?;
                Ok(outcome)
            })
            .collect()
    });
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for (cfg, r) in cfgs.iter().zip(results) {
        match r {
            Ok(o) => ok.push(o),
            Err(e) => errors.push(format!("seed {}: {e}", cfg.train.seed)),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Failure(errors.join("\n")));
    }
    Ok(ok)
}

fn seed_configs(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<ExperimentConfig> {
    if seeds.is_empty() {
        vec![cfg.clone()]
    } else {
        seeds.iter().map(|&s| cfg.with_seed(s)).collect()
    }
}

fn print_summary(o: &RunOutcome) {
    let s = &o.summary;
    println!(
        "{} seed {}: acc {:.4} wg {:.4} avg {:.4} disparity {:.4}{}",
        s.variant,
        s.seed,
        s.acc,
        s.wg,
        s.avg,
        s.disparity,
        s.w2.map_or(String::new(), |w| format!(" w2 {w:.4}"))
    );
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.adapter.variant = v;
        cfg.validate().map_err(config_err)?;
    }
    let (train, test) = data_for(&cfg, a.data.as_deref())?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    let outcomes = sweep(seed_configs(&cfg, &a.seed), &train, &test, &out, |_, _| Ok(()))?;
    outcomes.iter().for_each(print_summary);
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    if !a.checkpoint.exists() {
        return Err(usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(|e| usage(format!("{}: {e}", a.checkpoint.display())))?;
    let ds = load_dataset(&a.data)?;
    let model = ckpt.model().map_err(usage)?;
    let row = eval_row(&model, &ds, &ckpt.config.coeffs, ckpt.step).map_err(usage)?;
    let csv = MetricsLog { rows: vec![row] }.to_csv();
    if let Some(p) = &a.out {
        write(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn cmd_verify(a: VerifyArgs) -> Result<(), CliError> {
    let suite: Suite = a.suite.parse().map_err(usage)?;
    let faults = match a.inject_fault.as_deref() {
        None => Faults::default(),
        Some("delta-sign") => Faults { flip_delta_sign: true },
        Some(other) => return Err(usage(format!("unknown fault `{other}`; known: delta-sign"))),
    };
    let report = verify::run(suite, &VerifyOptions { seed: a.seed, faults });
    print!("{}", report.table());
    if let Some(p) = &a.out {
        write(p, serde_json::to_string_pretty(&report).expect("serializes"))?;
    }
    let failed: Vec<String> = report.failures().map(|c| format!("{}/{}", c.suite, c.name)).collect();
    if failed.is_empty() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        Err(CliError::Failure(format!("failed checks: {}", failed.join(", "))))
    }
}

fn probe_chart(o: &RunOutcome) -> String {
    let mut series = Vec::new();
    let names: Vec<String> = o
        .log
        .last_eval()
        .map(|r| r.layers.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    type Getter = fn(&fvl_core::objectives::LayerTerms) -> f64;
    let quantities: [(&str, Getter); 4] = [
        ("Λ", |t| t.lambda_mismatch),
        ("Δ", |t| t.delta_discrepancy),
        ("Γ", |t| t.gamma),
        ("W₂", |t| t.w2),
    ];
    for (li, name) in names.iter().enumerate() {
        for (q, get) in quantities {
            let points = o
                .log
                .evals()
                .filter_map(|r| r.layers.get(li).map(|(_, t)| (r.step as f64, get(t))))
                .collect();
            series.push(svg::Series {
                name: format!("{name} {q}"),
                points,
            });
        }
    }
    svg::line_chart(
        &format!("Γ probe, seed {}", o.summary.seed),
        "step",
        "value (evaluation set mean)",
        &series,
    )
}

pub fn cmd_gamma_probe(a: ProbeArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    if !cfg.adapter.variant.uses_vae() {
        return Err(usage(format!(
            "the Γ probe needs a two-latent adapter; adapter.variant is `{}`",
            cfg.adapter.variant
        )));
    }
    let (train, test) = cfg.generate_data().map_err(config_err)?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("gamma_probe"));
    let outcomes = sweep(seed_configs(&cfg, &a.seed), &train, &test, &out, |o, dir| {
        write(&dir.join(PROBE_CSV), gamma_probe_csv(&o.log))?;
        write(&dir.join(PROBE_SVG), probe_chart(o))
    })?;
    for o in &outcomes {
        let r = o.log.last_eval().expect("run has evaluations");
        println!(
            "seed {}: final lambda {:.4} delta {:.4} gamma {:.4} w2 {:.4} kl1 {:.4}",
            o.summary.seed, r.lambda, r.delta, r.gamma, r.w2, r.kl1
        );
    }
    Ok(())
}

pub fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let runs = report::collect_runs(&a.run_dirs)?;
    let out = a.out.unwrap_or_else(|| a.run_dirs[0].clone());
    let stats = report::aggregate(&runs);
    let md = report::markdown(&stats, &runs);
    create_dir(&out)?;
    write(&out.join("report.md"), &md)?;
    write(&out.join("wg_curve.svg"), report::wg_chart(&runs))?;
    print!("{md}");
    Ok(())
}

/// Reads `path` as an experiment config, for tools that post-process runs.
pub fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(io_err(path))
        .map_err(config_err)?;
    ExperimentConfig::from_json(&text).map_err(config_err)
}
