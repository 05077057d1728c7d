use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::objectives::LayerTerms;

pub const CSV_HEADER: [&str; 14] = [
    "step",
    "split",
    "loss_total",
    "loss_downstream",
    "recon",
    "kl1",
    "lambda",
    "delta",
    "gamma",
    "w2",
    "acc",
    "wg",
    "avg",
    "disparity",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// One logged evaluation point. `lambda` and `delta` are the mismatch Λ and
/// discrepancy Δ; fields that do not apply are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub split: Split,
    pub loss_total: f64,
    pub loss_downstream: f64,
    pub recon: f64,
    pub kl1: f64,
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
    pub w2: f64,
    pub acc: f64,
    pub wg: f64,
    pub avg: f64,
    pub disparity: f64,
    /// Per adapted layer terms, in network order.
    pub layers: Vec<(String, LayerTerms)>,
}

impl MetricsRow {
    fn values(&self) -> [f64; 12] {
        [
            self.loss_total,
            self.loss_downstream,
            self.recon,
            self.kl1,
            self.lambda,
            self.delta,
            self.gamma,
            self.w2,
            self.acc,
            self.wg,
            self.avg,
            self.disparity,
        ]
    }

    /// Equality on bit patterns, so NaN fields compare equal to themselves.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let layers_eq = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((a, x), (b, y))| a == b && layer_bits(x) == layer_bits(y));
        self.step == other.step
            && self.split == other.split
            && self.values().map(f64::to_bits) == other.values().map(f64::to_bits)
            && layers_eq
    }
}

fn layer_bits(t: &LayerTerms) -> [u64; 8] {
    [
        t.recon,
        t.kl1,
        t.kl2,
        t.lambda_mismatch,
        t.delta_discrepancy,
        t.gamma,
        t.w2,
        t.elbo,
    ]
    .map(f64::to_bits)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn last_eval(&self) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == Split::Eval)
    }

    pub fn evals(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.split == Split::Eval)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.rows.len() == other.rows.len() && self.rows.iter().zip(&other.rows).all(|(a, b)| a.bit_eq(b))
    }

    /// CSV with the fixed header. Floats use the shortest representation
    /// that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{}", r.step, r.split.name()).expect("write to String");
            for v in r.values() {
                write!(out, ",{v}").expect("write to String");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, split: Split) -> MetricsRow {
        MetricsRow {
            step,
            split,
            loss_total: 0.1 + step as f64,
            loss_downstream: 0.5,
            recon: f64::NAN,
            kl1: 1.0 / 3.0,
            lambda: 0.0,
            delta: -0.25,
            gamma: -0.25,
            w2: 2.0,
            acc: 0.75,
            wg: 0.5,
            avg: 0.75,
            disparity: 0.25,
            layers: vec![],
        }
    }

    #[test]
    fn csv_layout() {
        let log = MetricsLog {
            rows: vec![row(1, Split::Train), row(1, Split::Eval)],
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "step,split,loss_total,loss_downstream,recon,kl1,lambda,delta,gamma,w2,acc,wg,avg,disparity"
        );
        assert_eq!(
            lines[2],
            "1,eval,1.1,0.5,NaN,0.3333333333333333,0,-0.25,-0.25,2,0.75,0.5,0.75,0.25"
        );
        assert_eq!(log.last_eval().unwrap().split, Split::Eval);
    }

    #[test]
    fn bit_equality_treats_nan_as_equal() {
        let a = row(3, Split::Eval);
        assert!(a.bit_eq(&a.clone()));
        assert_ne!(a, a.clone());
        let mut b = a.clone();
        b.kl1 += 1e-16;
        assert!(!a.bit_eq(&b));
    }
}
