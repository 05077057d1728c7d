//! Aggregation of finished runs into a markdown table and plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fvl_core::experiment::{read_summary, RunSummary, METRICS_FILE, SUMMARY_FILE};
use fvl_core::Variant;

use crate::svg::{line_chart, Series};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub summary: RunSummary,
    /// `(step, wg)` of every evaluation row.
    pub wg_curve: Vec<(f64, f64)>,
}

fn read_wg_curve(dir: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let path = dir.join(METRICS_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::Failure(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Failure(format!("{}: no `{name}` column", path.display())))
    };
    let (step, split, wg) = (col("step")?, col("split")?, col("wg")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Failure(e.to_string()))?;
        if &rec[split] == "eval" {
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
            };
            out.push((parse(&rec[step])?, parse(&rec[wg])?));
        }
    }
    Ok(out)
}

fn load(dir: &Path) -> Result<RunRecord, CliError> {
    let summary = read_summary(dir).map_err(|e| CliError::Failure(e.to_string()))?;
    let wg_curve = if dir.join(METRICS_FILE).exists() {
        read_wg_curve(dir)?
    } else {
        Vec::new()
    };
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        summary,
        wg_curve,
    })
}

/// Runs found in `dirs`: each directory is either a run itself or a parent
/// of run directories. Sorted by path.
pub fn collect_runs(dirs: &[PathBuf]) -> Result<Vec<RunRecord>, CliError> {
    let mut found = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", d.display())));
        }
        if d.join(SUMMARY_FILE).exists() {
            found.push(d.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(d)
            .map_err(|e| CliError::Usage(format!("{}: {e}", d.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(SUMMARY_FILE).exists())
            .collect();
        children.sort();
        found.extend(children);
    }
    if found.is_empty() {
        return Err(CliError::Usage(
            "no runs found (expected directories containing summary.json)".into(),
        ));
    }
    found.sort();
    found.dedup();
    found.iter().map(|d| load(d)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone)]
pub struct VariantStats {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub acc: MeanStd,
    pub wg: MeanStd,
    pub avg: MeanStd,
    pub disparity: MeanStd,
    pub w2: Option<MeanStd>,
    pub params: usize,
}

pub fn aggregate(runs: &[RunRecord]) -> Vec<VariantStats> {
    let mut by: BTreeMap<usize, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        let key = Variant::ALL
            .iter()
            .position(|&v| v == r.summary.variant)
            .expect("known variant");
        by.entry(key).or_default().push(&r.summary);
    }
    by.into_iter()
        .map(|(k, rs)| {
            let col = |f: fn(&RunSummary) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let w2: Option<Vec<f64>> = rs.iter().map(|r| r.w2).collect();
            VariantStats {
                variant: Variant::ALL[k],
                seeds: rs.iter().map(|r| r.seed).collect(),
                acc: col(|r| r.acc),
                wg: col(|r| r.wg),
                avg: col(|r| r.avg),
                disparity: col(|r| r.disparity),
                w2: w2.map(|v| MeanStd::of(&v)),
                params: rs[0].params.total,
            }
        })
        .collect()
}

pub fn markdown(stats: &[VariantStats], runs: &[RunRecord]) -> String {
    let mut o = String::from("# Run report\n\n");
    writeln!(
        o,
        "Test-split metrics at the final evaluation, mean ± sample std over seeds.\n"
    )
    .unwrap();
    o.push_str("| variant | seeds | trainable params | acc | WG | AVG | \\|WG − AVG\\| | W₂(q₁,q₂) |\n");
    o.push_str("|---|---|---|---|---|---|---|---|\n");
    for s in stats {
        let seeds: Vec<String> = s.seeds.iter().map(u64::to_string).collect();
        let w2 = s.w2.map_or("–".to_string(), |m| m.to_string());
        writeln!(
            o,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            s.variant.name(),
            seeds.join(","),
            s.params,
            s.acc,
            s.wg,
            s.avg,
            s.disparity,
            w2
        )
        .unwrap();
    }
    o.push_str("\n## Runs\n\n| run | variant | seed | steps | acc | WG | disparity |\n|---|---|---|---|---|---|---|\n");
    for r in runs {
        let s = &r.summary;
        writeln!(
            o,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |",
            r.dir.display(),
            s.variant.name(),
            s.seed,
            s.steps,
            s.acc,
            s.wg,
            s.disparity
        )
        .unwrap();
    }
    o
}

/// Mean evaluation WG against step, one line per variant.
pub fn wg_chart(runs: &[RunRecord]) -> String {
    let mut by: BTreeMap<usize, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in runs {
        let key = Variant::ALL
            .iter()
            .position(|&v| v == r.summary.variant)
            .expect("known variant");
        for &(step, wg) in &r.wg_curve {
            by.entry(key).or_default().entry(step as u64).or_default().push(wg);
        }
    }
    let series: Vec<Series> = by
        .into_iter()
        .map(|(k, steps)| Series {
            name: Variant::ALL[k].name().to_string(),
            points: steps
                .into_iter()
                .map(|(s, v)| (s as f64, v.iter().sum::<f64>() / v.len() as f64))
                .collect(),
        })
        .collect();
    line_chart("Worst-group accuracy during training", "step", "mean WG", &series)
}
