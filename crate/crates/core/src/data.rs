//! Synthetic grouped classification data with a spurious attribute, and
//! group-robustness metrics.
//!
//! Each example has a class `c` and a spurious attribute `s`. With
//! probability ρ the attribute is the one aligned with the class
//! (`c mod num_spurious_values`), otherwise it is uniform over the remaining
//! values. Features are `[core prototype of c + noise, spurious prototype of
//! s + noise, pure noise]`, with prototypes on orthogonal axes scaled by the
//! separation parameters.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::rng::{named_stream, standard_normals, Purpose, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: field `{field}` {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("{predictions} predictions for {examples} examples")]
    LengthMismatch { predictions: usize, examples: usize },
    #[error("group (label {label}, spurious {spurious}) has no examples")]
    EmptyGroup { label: usize, spurious: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn default_num_spurious_values() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    #[serde(default = "default_num_spurious_values")]
    pub num_spurious_values: usize,
    pub core_dim: usize,
    pub spurious_dim: usize,
    pub noise_dim: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub core_separation: f64,
    pub spurious_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            num_spurious_values: 2,
            core_dim: 8,
            spurious_dim: 8,
            noise_dim: 16,
            rho_train: 0.95,
            rho_test: 0.5,
            n_train: 2000,
            n_test: 1000,
            core_separation: 1.5,
            spurious_separation: 3.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn feature_dim(&self) -> usize {
        self.core_dim + self.spurious_dim + self.noise_dim
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_spurious_values
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(DataError::InvalidSpec { field, reason });
        if self.num_classes < 2 {
            return bad("num_classes", format!("must be at least 2, got {}", self.num_classes));
        }
        if self.num_spurious_values < 2 {
            return bad(
                "num_spurious_values",
                format!("must be at least 2, got {}", self.num_spurious_values),
            );
        }
        if self.core_dim < self.num_classes {
            return bad(
                "core_dim",
                format!(
                    "must be at least num_classes ({}) to hold orthogonal prototypes, got {}",
                    self.num_classes, self.core_dim
                ),
            );
        }
        if self.spurious_dim != 0 && self.spurious_dim < self.num_spurious_values {
            return bad(
                "spurious_dim",
                format!(
                    "must be 0 or at least num_spurious_values ({}), got {}",
                    self.num_spurious_values, self.spurious_dim
                ),
            );
        }
        let lo = 1.0 / self.num_spurious_values as f64;
        for (field, rho) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(rho >= lo && rho <= 1.0) {
                return bad(field, format!("must lie in [{lo}, 1], got {rho}"));
            }
        }
        let min = self.num_groups();
        for (field, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
            if n < min {
                return bad(
                    field,
                    format!("must be at least num_classes·num_spurious_values = {min}, got {n}"),
                );
            }
        }
        for (field, v) in [
            ("core_separation", self.core_separation),
            ("spurious_separation", self.spurious_separation),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, format!("must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// The attribute value aligned with class `c`.
    pub fn aligned(&self, c: usize) -> usize {
        c % self.num_spurious_values
    }

    /// `P(label = c, spurious = s)` under correlation `rho`.
    pub fn group_probability(&self, rho: f64, c: usize, s: usize) -> f64 {
        let m = self.num_spurious_values as f64;
        let p_s = if s == self.aligned(c) {
            rho
        } else {
            (1.0 - rho) / (m - 1.0)
        };
        p_s / self.num_classes as f64
    }
}

/// Examples with class labels and spurious attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub spurious: Vec<usize>,
    pub num_classes: usize,
    pub num_spurious_values: usize,
}

impl GroupedDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        spurious: Vec<usize>,
        num_classes: usize,
        num_spurious_values: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if features.shape().len() != 2 || features.rows() != n || spurious.len() != n {
            return Err(DataError::Format(format!(
                "features {:?}, {} labels, {} attributes",
                features.shape(),
                n,
                spurious.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Format(format!("label {l} out of range")));
        }
        if let Some(&s) = spurious.iter().find(|&&s| s >= num_spurious_values) {
            return Err(DataError::Format(format!("spurious attribute {s} out of range")));
        }
        Ok(Self {
            features,
            labels,
            spurious,
            num_classes,
            num_spurious_values,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn group_of(&self, i: usize) -> (usize, usize) {
        (self.labels[i], self.spurious[i])
    }

    /// Counts of every `(label, attribute)` pair, including empty ones.
    pub fn group_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts: BTreeMap<_, _> = (0..self.num_classes)
            .flat_map(|c| (0..self.num_spurious_values).map(move |s| ((c, s), 0)))
            .collect();
        for i in 0..self.len() {
            *counts.get_mut(&self.group_of(i)).expect("validated range") += 1;
        }
        counts
    }

    /// Fraction of examples whose attribute is the one aligned with the label.
    pub fn alignment_rate(&self) -> f64 {
        let m = self.num_spurious_values;
        let aligned = (0..self.len())
            .filter(|&i| self.spurious[i] == self.labels[i] % m)
            .count();
        aligned as f64 / self.len() as f64
    }

    /// Feature rows and labels of the given examples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let x = Tensor::new(vec![indices.len(), d], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.batch(indices);
        Self {
            features,
            labels,
            spurious: indices.iter().map(|&i| self.spurious[i]).collect(),
            num_classes: self.num_classes,
            num_spurious_values: self.num_spurious_values,
        }
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("feature_{j}")).collect();
        header.push("label".into());
        header.push("spurious".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.spurious[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`GroupedDataset::write_csv`]. Class and
    /// attribute counts are inferred as one more than the largest value seen.
    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let cols = header.len();
        if cols < 3 || &header[cols - 2] != "label" || &header[cols - 1] != "spurious" {
            return Err(DataError::Format("header must end with `label,spurious`".into()));
        }
        for (j, h) in header.iter().take(cols - 2).enumerate() {
            if h != format!("feature_{j}") {
                return Err(DataError::Format(format!(
                    "column {j} is `{h}`, expected `feature_{j}`"
                )));
            }
        }
        let d = cols - 2;
        let (mut data, mut labels, mut spurious) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            for j in 0..d {
                data.push(parse(&rec[j])?);
            }
            labels.push(parse(&rec[d])?);
            spurious.push(parse(&rec[d + 1])?);
        }
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        let n = labels.len();
        let c = labels.iter().max().map_or(0, |m| m + 1);
        let m = spurious.iter().max().map_or(0, |m| m + 1);
        Self::new(
            Tensor::new(vec![n, d], data).map_err(|e| DataError::Format(e.to_string()))?,
            labels,
            spurious,
            c,
            m,
        )
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": "dataset",
            "num_classes": self.num_classes,
            "num_spurious_values": self.num_spurious_values,
        }));
        c.push_f64("features", self.features.clone());
        let n = self.len();
        c.push_i64("labels", vec![n], self.labels.iter().map(|&v| v as i64).collect());
        c.push_i64("spurious", vec![n], self.spurious.iter().map(|&v| v as i64).collect());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let field = |k: &str| {
            c.doc
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| DataError::Format(format!("document lacks `{k}`")))
        };
        if c.doc.get("kind").and_then(|v| v.as_str()) != Some("dataset") {
            return Err(DataError::Format("container does not hold a dataset".into()));
        }
        let to_usize = |v: &[i64]| -> Result<Vec<usize>> {
            v.iter()
                .map(|&x| usize::try_from(x).map_err(|_| DataError::Format(format!("negative index {x}"))))
                .collect()
        };
        Self::new(
            c.tensor("features")?.clone(),
            to_usize(c.ints("labels")?)?,
            to_usize(c.ints("spurious")?)?,
            field("num_classes")?,
            field("num_spurious_values")?,
        )
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| DataError::Format(format!("cannot parse `{s}`")))
}

fn prototype(dim: usize, axis: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim > 0 {
        v[axis] = scale;
    }
    v
}

fn features_for(spec: &DatasetSpec, c: usize, s: usize, rng: &mut StreamRng, out: &mut Vec<f64>) {
    let noise = standard_normals(rng, spec.feature_dim());
    let core = prototype(spec.core_dim, c, spec.core_separation);
    let spur = prototype(spec.spurious_dim, s, spec.spurious_separation);
    let means = core
        .into_iter()
        .chain(spur)
        .chain(std::iter::repeat_n(0.0, spec.noise_dim));
    out.extend(means.zip(noise).map(|(m, z)| m + spec.noise_sigma * z));
}

fn draw_attribute(spec: &DatasetSpec, rho: f64, c: usize, rng: &mut StreamRng) -> usize {
    let aligned = spec.aligned(c);
    if rng.random::<f64>() < rho {
        return aligned;
    }
    let k = rng.random_range(0..spec.num_spurious_values - 1);
    if k >= aligned {
        k + 1
    } else {
        k
    }
}

fn dataset(spec: &DatasetSpec, groups: Vec<(usize, usize)>, rng: &mut StreamRng) -> GroupedDataset {
    let mut data = Vec::with_capacity(groups.len() * spec.feature_dim());
    for &(c, s) in &groups {
        features_for(spec, c, s, rng, &mut data);
    }
    let (labels, spurious) = groups.into_iter().unzip();
    GroupedDataset {
        features: Tensor::new(vec![data.len() / spec.feature_dim().max(1), spec.feature_dim()], data)
            .expect("feature shape"),
        labels,
        spurious,
        num_classes: spec.num_classes,
        num_spurious_values: spec.num_spurious_values,
    }
}

/// Group sizes proportional to the group probabilities, every group at least
/// one example, summing to `n` (largest-remainder rounding).
fn stratified_counts(spec: &DatasetSpec, rho: f64, n: usize) -> Vec<((usize, usize), usize)> {
    let groups: Vec<(usize, usize)> = (0..spec.num_classes)
        .flat_map(|c| (0..spec.num_spurious_values).map(move |s| (c, s)))
        .collect();
    let k = groups.len();
    let spare = (n - k) as f64;
    let quotas: Vec<f64> = groups
        .iter()
        .map(|&(c, s)| spare * spec.group_probability(rho, c, s))
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    groups.into_iter().zip(counts).collect()
}

/// Draws the train and test splits.
///
/// Training examples are i.i.d.; the test split uses stratified group sizes
/// so every `(label, attribute)` group is present, then is shuffled.
pub fn generate_spurious(spec: &DatasetSpec) -> Result<(GroupedDataset, GroupedDataset)> {
    spec.validate()?;
    let mut rng = named_stream(spec.seed, Purpose::Data, "train");
    let train_groups: Vec<(usize, usize)> = (0..spec.n_train)
        .map(|_| {
            let c = rng.random_range(0..spec.num_classes);
            (c, draw_attribute(spec, spec.rho_train, c, &mut rng))
        })
        .collect();
    let train = dataset(spec, train_groups, &mut rng);

    let mut rng = named_stream(spec.seed, Purpose::Data, "test");
    let mut test_groups: Vec<(usize, usize)> = stratified_counts(spec, spec.rho_test, spec.n_test)
        .into_iter()
        .flat_map(|(g, n)| std::iter::repeat_n(g, n))
        .collect();
    test_groups.shuffle(&mut rng);
    let test = dataset(spec, test_groups, &mut rng);
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub label: usize,
    pub spurious: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Lowest group accuracy.
    pub wg: f64,
    /// Overall accuracy.
    pub avg: f64,
    /// `|wg − avg|`.
    pub disparity: f64,
    pub per_group: Vec<GroupStat>,
}

/// Worst-group, average and disparity metrics. Every `(label, attribute)`
/// group must be non-empty.
pub fn group_metrics(predictions: &[usize], ds: &GroupedDataset) -> Result<GroupMetrics> {
    if predictions.len() != ds.len() {
        return Err(DataError::LengthMismatch {
            predictions: predictions.len(),
            examples: ds.len(),
        });
    }
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let mut tally: BTreeMap<(usize, usize), (usize, usize)> =
        ds.group_counts().into_keys().map(|g| (g, (0, 0))).collect();
    let mut correct_total = 0;
    for (i, &p) in predictions.iter().enumerate() {
        let e = tally.get_mut(&ds.group_of(i)).expect("validated range");
        e.0 += 1;
        if p == ds.labels[i] {
            e.1 += 1;
            correct_total += 1;
        }
    }
    let mut per_group = Vec::with_capacity(tally.len());
    for ((label, spurious), (count, correct)) in tally {
        if count == 0 {
            return Err(DataError::EmptyGroup { label, spurious });
        }
        per_group.push(GroupStat {
            label,
            spurious,
            count,
            correct,
            accuracy: correct as f64 / count as f64,
        });
    }
    let wg = per_group.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    let avg = correct_total as f64 / ds.len() as f64;
    Ok(GroupMetrics {
        wg,
        avg,
        disparity: (wg - avg).abs(),
        per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_train: 200,
            n_test: 100,
            seed,
            ..DatasetSpec::default()
        }
    }

    /// Plug-in mutual information of two discrete variables, in nats.
    fn empirical_mi(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
        let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_default() += 1.0 / n;
            *pa.entry(x).or_default() += 1.0 / n;
            *pb.entry(y).or_default() += 1.0 / n;
        }
        joint.iter().map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln()).sum()
    }

    #[test]
    fn uniform_rho_gives_independent_attribute() {
        let spec = DatasetSpec {
            rho_train: 0.5,
            n_train: 10_000,
            ..DatasetSpec::default()
        };
        let (train, _) = generate_spurious(&spec).unwrap();
        assert!(empirical_mi(&train.labels, &train.spurious) < 0.01);
    }

    #[test]
    fn group_sizes_follow_binomial() {
        let spec = DatasetSpec {
            n_train: 1000,
            ..DatasetSpec::default()
        };
        let (train, _) = generate_spurious(&spec).unwrap();
        let n = 1000.0;
        for ((c, s), count) in train.group_counts() {
            let p = spec.group_probability(0.95, c, s);
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((count as f64 - n * p).abs() <= 3.0 * sd, "group ({c},{s}) has {count}");
        }
        assert!((train.alignment_rate() - 0.95).abs() <= 0.03);
    }

    #[test]
    fn noiseless_core_is_separable_by_nearest_prototype() {
        let spec = DatasetSpec {
            noise_sigma: 0.0,
            spurious_dim: 0,
            ..small(3)
        };
        let (train, test) = generate_spurious(&spec).unwrap();
        for ds in [&train, &test] {
            // Closed-form classifier: argmax over the core coordinates.
            let preds: Vec<usize> = (0..ds.len())
                .map(|i| {
                    let row = &ds.features.row(i)[..spec.num_classes];
                    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
                })
                .collect();
            assert_eq!(preds, ds.labels);
        }
    }

    #[test]
    fn test_split_has_every_group() {
        let spec = DatasetSpec {
            rho_test: 1.0,
            n_test: 20,
            ..small(1)
        };
        let (_, test) = generate_spurious(&spec).unwrap();
        let counts = test.group_counts();
        assert!(counts.values().all(|&c| c >= 1));
        assert_eq!(counts.values().sum::<usize>(), 20);
    }

    #[test]
    fn default_test_split_is_balanced() {
        let (_, test) = generate_spurious(&DatasetSpec::default()).unwrap();
        assert!(test.group_counts().values().all(|&c| c == 250));
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let cases: Vec<(DatasetSpec, &str)> = vec![
            (
                DatasetSpec {
                    rho_train: 0.3,
                    ..small(0)
                },
                "rho_train",
            ),
            (
                DatasetSpec {
                    rho_test: 1.01,
                    ..small(0)
                },
                "rho_test",
            ),
            (
                DatasetSpec {
                    rho_train: f64::NAN,
                    ..small(0)
                },
                "rho_train",
            ),
            (
                DatasetSpec {
                    core_dim: 0,
                    ..small(0)
                },
                "core_dim",
            ),
            (DatasetSpec { n_test: 3, ..small(0) }, "n_test"),
            (
                DatasetSpec {
                    noise_sigma: -1.0,
                    ..small(0)
                },
                "noise_sigma",
            ),
        ];
        for (spec, field) in cases {
            match generate_spurious(&spec) {
                Err(DataError::InvalidSpec { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn metrics_examples() {
        let ds = GroupedDataset::new(Tensor::zeros(vec![4, 1]), vec![0, 0, 1, 1], vec![0, 1, 0, 1], 2, 2).unwrap();
        let m = group_metrics(&[0, 0, 1, 1], &ds).unwrap();
        assert_eq!((m.wg, m.avg, m.disparity), (1.0, 1.0, 0.0));

        let ds = GroupedDataset::new(Tensor::zeros(vec![4, 1]), vec![0, 0, 0, 0], vec![0, 0, 1, 1], 1, 2).unwrap();
        let m = group_metrics(&[0, 0, 0, 1], &ds).unwrap();
        assert_eq!((m.wg, m.avg, m.disparity), (0.5, 0.75, 0.25));

        assert!(matches!(
            group_metrics(&[0], &ds),
            Err(DataError::LengthMismatch { .. })
        ));
        let missing = GroupedDataset::new(Tensor::zeros(vec![2, 1]), vec![0, 1], vec![0, 0], 2, 2).unwrap();
        assert!(matches!(
            group_metrics(&[0, 1], &missing),
            Err(DataError::EmptyGroup { .. })
        ));
    }

    #[test]
    fn metrics_match_brute_force_tally() {
        let (_, test) = generate_spurious(&small(9)).unwrap();
        let mut rng = named_stream(9, Purpose::Verify, "preds");
        let preds: Vec<usize> = (0..test.len()).map(|_| rng.random_range(0..2)).collect();
        let m = group_metrics(&preds, &test).unwrap();
        let mut worst: f64 = 1.0;
        for c in 0..2 {
            for s in 0..2 {
                let idx: Vec<usize> = (0..test.len())
                    .filter(|&i| test.labels[i] == c && test.spurious[i] == s)
                    .collect();
                let hits = idx.iter().filter(|&&i| preds[i] == c).count();
                let acc = hits as f64 / idx.len() as f64;
                worst = worst.min(acc);
                let g = m.per_group.iter().find(|g| (g.label, g.spurious) == (c, s)).unwrap();
                assert_eq!((g.count, g.correct), (idx.len(), hits));
            }
        }
        let hits = (0..test.len()).filter(|&i| preds[i] == test.labels[i]).count();
        assert_eq!(m.wg, worst);
        assert_eq!(m.avg, hits as f64 / test.len() as f64);
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let (train, _) = generate_spurious(&small(4)).unwrap();
        let mut buf = Vec::new();
        train.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("feature_0,feature_1,"));
        assert!(text.lines().next().unwrap().ends_with(",feature_31,label,spurious"));
        assert_eq!(GroupedDataset::read_csv(buf.as_slice()).unwrap(), train);

        let bytes = train.to_container().to_bytes();
        let back = GroupedDataset::from_container(&Container::read_from(&mut bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, train);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_spurious(&small(5)).unwrap();
        let b = generate_spurious(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_spurious(&small(6)).unwrap();
        assert_ne!(a.0, c.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn wg_never_exceeds_avg(seed in 0u64..1000, flip in 0.0f64..1.0) {
            let (_, test) = generate_spurious(&small(seed)).unwrap();
            let mut rng = named_stream(seed, Purpose::Verify, "flip");
            let preds: Vec<usize> = test.labels.iter().map(|&l| if rng.random::<f64>() < flip { 1 - l } else { l }).collect();
            let m = group_metrics(&preds, &test).unwrap();
            prop_assert!(m.wg <= m.avg + 1e-15);
            prop_assert!(m.disparity >= 0.0);
        }

        #[test]
        fn shuffling_leaves_metrics_unchanged(seed in 0u64..1000) {
            let (_, test) = generate_spurious(&small(seed)).unwrap();
            let preds: Vec<usize> = (0..test.len()).map(|i| (i * 7 + seed as usize) % 2).collect();
            let m = group_metrics(&preds, &test).unwrap();
            let mut order: Vec<usize> = (0..test.len()).collect();
            order.shuffle(&mut named_stream(seed, Purpose::Shuffle, "perm"));
            let shuffled = test.subset(&order);
            let sp: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
            let m2 = group_metrics(&sp, &shuffled).unwrap();
            prop_assert_eq!(m.wg, m2.wg);
            prop_assert_eq!(m.avg, m2.avg);
            prop_assert_eq!(m.per_group, m2.per_group);
        }
    }
}
