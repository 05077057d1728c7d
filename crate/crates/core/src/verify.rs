//! Self-checks runnable from the command line.
//!
//! * `gradcheck`: every differentiable op and the full adapter loss of each
//!   variant against central differences.
//! * `analytics`: the closed-form Gaussian quantities against Monte-Carlo
//!   estimates.
//! * `identities`: exact algebraic identities between those quantities, the
//!   Wasserstein bound on Δ, and the equivalence of the two ways of writing
//!   the FVAE objective.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    AdapterConfig, BackboneSpec, FvaeAdapter, Mode, Model, Noise, ParamCategory, ParamStore, Session, Variant,
};
use crate::gaussian::{self, DiagGaussian};
use crate::objectives::{self, LayerWeights, ObjectiveCoeffs, Priors};
use crate::rng::{stream, Purpose, StreamRng};
use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Relative-error threshold of every gradient check.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const MC_SAMPLES: usize = 100_000;
pub const MC_CONFIGS: usize = 100;
/// Allowed Monte-Carlo deviation, in standard errors.
pub const MC_SIGMAS: f64 = 3.0;
pub const IDENTITY_CONFIGS: usize = 1000;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const OBJECTIVE_STATES: usize = 100;
const DIMS: [usize; 3] = [1, 4, 16];

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown suite `{0}`; expected one of all, gradcheck, analytics, identities")]
    UnknownSuite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Gradcheck,
    Analytics,
    Identities,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Gradcheck => "gradcheck",
            Suite::Analytics => "analytics",
            Suite::Identities => "identities",
        }
    }
}

impl FromStr for Suite {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, VerifyError> {
        match s {
            "all" => Ok(Suite::All),
            "gradcheck" => Ok(Suite::Gradcheck),
            "analytics" => Ok(Suite::Analytics),
            "identities" => Ok(Suite::Identities),
            other => Err(VerifyError::UnknownSuite(other.to_string())),
        }
    }
}

/// Deliberate defects, used to confirm that the checks can fail.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Negates every closed-form Δ the checks consume.
    pub flip_delta_sign: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub faults: Faults,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    /// The worst observed value of the checked statistic.
    pub worst: f64,
    pub threshold: f64,
    pub cases: usize,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn suite(&self, suite: Suite) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(move |c| c.suite == suite.name())
    }

    pub fn table(&self) -> String {
        let w = self
            .checks
            .iter()
            .map(|c| c.suite.len() + c.name.len() + 1)
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!(
            "{:<w$}  {:<6}  {:>6}  {:>12}  {:>10}  {:>8}  detail\n",
            "check", "result", "cases", "worst", "limit", "secs"
        );
        for c in &self.checks {
            let name = format!("{}/{}", c.suite, c.name);
            let result = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                out,
                "{name:<w$}  {result:<6}  {:>6}  {:>12.3e}  {:>10.1e}  {:>8.2}  {}",
                c.cases, c.worst, c.threshold, c.seconds, c.detail
            )
            .expect("write to String");
        }
        out
    }
}

struct Timer(Instant);

impl Timer {
    fn start() -> Self {
        Self(Instant::now())
    }

    #[allow(clippy::too_many_arguments)]
    fn check(
        &self,
        suite: Suite,
        name: &str,
        worst: f64,
        threshold: f64,
        cases: usize,
        passed: bool,
        detail: String,
    ) -> Check {
        Check {
            suite: suite.name().into(),
            name: name.into(),
            passed,
            worst,
            threshold,
            cases,
            detail,
            seconds: self.0.elapsed().as_secs_f64(),
        }
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> VerifyReport {
    let mut checks = Vec::new();
    if suite.includes(Suite::Gradcheck) {
        checks.extend(gradcheck_suite(opts));
    }
    if suite.includes(Suite::Analytics) {
        checks.extend(analytics_suite(opts));
    }
    if suite.includes(Suite::Identities) {
        checks.extend(identities_suite(opts));
    }
    VerifyReport { checks }
}

fn tensor(rng: &mut StreamRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in `±[0.1, 1.5]`, away from the kink of relu.
fn off_kink(rng: &mut StreamRng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

fn op_cases(rng: &mut StreamRng) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let a = tensor(rng, vec![3, 4], -1.0, 1.0);
    let b = tensor(rng, vec![4, 2], -1.0, 1.0);
    let c = tensor(rng, vec![3, 4], -1.0, 1.0);
    let pos = tensor(rng, vec![3, 4], 0.5, 2.0);
    let bias = tensor(rng, vec![4], -1.0, 1.0);
    let w = off_kink(rng, vec![3, 4]);
    let keep = Tensor::new(
        vec![3, 4],
        (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect(),
    )
    .unwrap();
    let eps = tensor(rng, vec![3, 4], -2.0, 2.0);
    let labels = [0usize, 3, 1];
    // Each case reduces to a scalar through a fixed uneven weighting so
    // that every output element contributes a distinct gradient.
    let weigh = move |g: &mut Graph, v: Var| -> Result<Var, TensorError> {
        let shape = g.value(v).shape().to_vec();
        let n: usize = shape.iter().product();
        let wt = Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect())?;
        let wt = g.constant(wt);
        let p = g.mul(v, wt)?;
        g.sum(p)
    };
    let wrap = |e: objectives::ObjectiveError| match e {
        objectives::ObjectiveError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    };
    let p1 = DiagGaussian::new(vec![0.3, -0.2, 0.1, 0.5], vec![0.2, -0.1, 0.0, 0.3]).unwrap();
    let p1b = p1.clone();
    vec![
        (
            "matmul",
            vec![a.clone(), b],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weigh(g, y)
            }),
        ),
        (
            "transpose",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                weigh(g, y)
            }),
        ),
        (
            "add",
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                weigh(g, y)
            }),
        ),
        (
            "sub",
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                weigh(g, y)
            }),
        ),
        (
            "mul",
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weigh(g, y)
            }),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                weigh(g, y)
            }),
        ),
        (
            "add_bias",
            vec![a.clone(), bias],
            Box::new(move |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                weigh(g, y)
            }),
        ),
        (
            "exp",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.exp(v[0])?;
                weigh(g, y)
            }),
        ),
        (
            "log",
            vec![pos.clone()],
            Box::new(move |g, v| {
                let y = g.log(v[0])?;
                weigh(g, y)
            }),
        ),
        (
            "relu",
            vec![w],
            Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                weigh(g, y)
            }),
        ),
        (
            "square",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.square(v[0])?;
                weigh(g, y)
            }),
        ),
        (
            "log_softmax",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.log_softmax(v[0])?;
                weigh(g, y)
            }),
        ),
        (
            "sum",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.square(v[0])?;
                g.sum(y)
            }),
        ),
        (
            "mean",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.square(v[0])?;
                g.mean(y)
            }),
        ),
        (
            "concat",
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                weigh(g, y)
            }),
        ),
        (
            "slice",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.slice(v[0], 1, 3)?;
                weigh(g, y)
            }),
        ),
        (
            "dropout",
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.dropout(v[0], &keep, 0.25)?;
                weigh(g, y)
            }),
        ),
        (
            "reparameterize",
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| {
                let y = g.reparameterize(v[0], v[1], &eps)?;
                weigh(g, y)
            }),
        ),
        (
            "recon_log_likelihood",
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| objectives::recon_log_likelihood(g, v[0], v[1]).map_err(wrap)),
        ),
        (
            "kl_to_prior",
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| objectives::kl_to_prior(g, v[0], v[1], &p1).map_err(wrap)),
        ),
        (
            "expected_log_prior",
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| objectives::expected_log_prior(g, v[0], v[1], &p1b).map_err(wrap)),
        ),
        (
            "neg_entropy",
            vec![c.clone()],
            Box::new(move |g, v| objectives::neg_entropy(g, v[0]).map_err(wrap)),
        ),
        (
            "softmax_cross_entropy",
            vec![a],
            Box::new(move |g, v| objectives::softmax_cross_entropy(g, v[0], &labels).map_err(wrap)),
        ),
    ]
}

/// Toy model for the full-loss check: one adapted 8→8 layer, batch 4.
fn toy_model(variant: Variant, seed: u64) -> Model {
    let spec = BackboneSpec::Mlp {
        input_dim: 8,
        hidden_dim: 8,
        num_classes: 3,
        adapted_layers: vec!["fc1".into()],
    };
    let cfg = AdapterConfig {
        rank_r: 3,
        z2_dim: 3,
        decoder_hidden: 6,
        dropout_p: 0.1,
        variant,
        ..AdapterConfig::default()
    };
    let mut model = Model::build(&spec, Some(&cfg), seed).expect("valid toy model");
    // Zero-initialised up-projections would hide the downstream path.
    let mut rng = stream(seed, Purpose::Verify, 1);
    let names: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .filter(|(_, p)| matches!(p.category, ParamCategory::B | ParamCategory::LoraAb))
        .map(|(n, p)| (n.to_string(), p.value.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        model
            .params
            .set(&name, tensor(&mut rng, shape, -0.5, 0.5))
            .expect("same shape");
    }
    model
}

fn full_loss_case(variant: Variant, seed: u64) -> Result<crate::tensor::gradcheck::GradcheckReport, TensorError> {
    let model = toy_model(variant, seed);
    let x = tensor(&mut stream(seed, Purpose::Verify, 2), vec![4, 8], -1.5, 1.5);
    let labels = [0usize, 2, 1, 2];
    let coeffs = ObjectiveCoeffs {
        lambda: LayerWeights::Shared(0.5),
        ..ObjectiveCoeffs::default()
    };
    let leaves: Vec<(String, Tensor)> = model
        .params
        .trainable()
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect();
    let names: Vec<String> = leaves.iter().map(|(n, _)| n.clone()).collect();
    gradcheck(
        &leaves,
        |g, vars| {
            let graph = std::mem::take(g);
            let mut s = Session::with_graph(&model.params, graph);
            for (n, &v) in names.iter().zip(vars) {
                s.bind(n, v).map_err(|e| TensorError::Invalid(e.to_string()))?;
            }
            // The same step index gives the same dropout mask and noise on
            // every re-evaluation.
            let mut noise = Noise::for_step(seed, 0);
            let res = objectives::batch_loss(&model, &mut s, &x, &labels, &mut noise, &coeffs);
            *g = s.into_graph();
            res.map(|(v, _)| v).map_err(|e| TensorError::Invalid(e.to_string()))
        },
        GradcheckOptions::with_tol(GRADCHECK_TOL),
    )
}

fn gradcheck_suite(opts: &VerifyOptions) -> Vec<Check> {
    let mut rng = stream(opts.seed, Purpose::Verify, 0);
    let mut out = Vec::new();
    for (name, inputs, builder) in op_cases(&mut rng) {
        let t = Timer::start();
        let leaves: Vec<(String, Tensor)> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("in{i}"), t))
            .collect();
        out.push(
            match gradcheck(&leaves, builder, GradcheckOptions::with_tol(GRADCHECK_TOL)) {
                Ok(r) => t.check(
                    Suite::Gradcheck,
                    name,
                    r.max_rel_error(),
                    GRADCHECK_TOL,
                    leaves.len(),
                    r.passed(),
                    String::new(),
                ),
                Err(e) => t.check(
                    Suite::Gradcheck,
                    name,
                    f64::NAN,
                    GRADCHECK_TOL,
                    leaves.len(),
                    false,
                    e.to_string(),
                ),
            },
        );
    }
    for variant in Variant::ALL {
        let t = Timer::start();
        let name = format!("total_loss_{}", variant.name());
        out.push(match full_loss_case(variant, opts.seed) {
            Ok(r) => {
                let worst = r.failures().map(|l| l.name.clone()).collect::<Vec<_>>().join(", ");
                t.check(
                    Suite::Gradcheck,
                    &name,
                    r.max_rel_error(),
                    GRADCHECK_TOL,
                    r.leaves.len(),
                    r.passed(),
                    worst,
                )
            }
            Err(e) => t.check(
                Suite::Gradcheck,
                &name,
                f64::NAN,
                GRADCHECK_TOL,
                0,
                false,
                e.to_string(),
            ),
        });
    }
    out
}

fn random_gaussian(rng: &mut StreamRng, d: usize, mu: (f64, f64), sigma: (f64, f64)) -> DiagGaussian {
    let m = (0..d).map(|_| rng.random_range(mu.0..=mu.1)).collect();
    let s: Vec<f64> = (0..d).map(|_| rng.random_range(sigma.0..=sigma.1)).collect();
    DiagGaussian::from_std(m, &s).expect("finite")
}

fn closed_delta(q1: &DiagGaussian, q2: &DiagGaussian, p1: &DiagGaussian, faults: &Faults) -> f64 {
    let d = gaussian::delta_discrepancy(q1, q2, p1).expect("same dims");
    if faults.flip_delta_sign {
        -d
    } else {
        d
    }
}

/// Running mean and standard error.
#[derive(Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn se(&self) -> f64 {
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }

    /// Deviation of `exact` from the sample mean, in standard errors.
    fn z(&self, exact: f64) -> f64 {
        (self.mean - exact).abs() / self.se()
    }
}

/// Monte-Carlo estimates of all five quantities for one configuration.
/// Both posteriors are sampled from the same standard-normal draws, and
/// each estimator is the sample mean of a per-draw log-density expression.
fn mc_estimates(
    q1: &DiagGaussian,
    q2: &DiagGaussian,
    p1: &DiagGaussian,
    p2: &DiagGaussian,
    rng: &mut StreamRng,
) -> [Moments; 5] {
    let d = q1.dim();
    let mut m: [Moments; 5] = Default::default();
    let mut z1 = vec![0.0; d];
    let mut z2 = vec![0.0; d];
    for _ in 0..MC_SAMPLES {
        for j in 0..d {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            z1[j] = q1.mu()[j] + q1.std(j) * e;
            z2[j] = q2.mu()[j] + q2.std(j) * e;
        }
        let lp1_z1 = p1.log_density(&z1);
        let lp1_z2 = p1.log_density(&z2);
        let lp2_z2 = p2.log_density(&z2);
        m[0].push(q1.log_density(&z1) - lp1_z1); // KL(q1‖p1)
        m[1].push(lp1_z1); // E_{q1}[log p1]
        m[2].push(lp2_z2 - lp1_z2); // Λ
        m[3].push(lp1_z2 - lp1_z1); // Δ
        m[4].push(lp2_z2 - lp1_z1); // Γ
    }
    m
}

fn analytics_suite(opts: &VerifyOptions) -> Vec<Check> {
    const NAMES: [&str; 5] = ["kl_diag_mc", "cross_entropy_mc", "lambda_mc", "delta_mc", "gamma_mc"];
    let t = Timer::start();
    let mut worst = [0.0f64; 5];
    let mut fails = [0usize; 5];
    let mut first_fail: [Option<usize>; 5] = [None; 5];
    for i in 0..MC_CONFIGS {
        let mut rng = stream(opts.seed, Purpose::Verify, 1000 + i as u64);
        let d = DIMS[i % DIMS.len()];
        let q1 = random_gaussian(&mut rng, d, (-2.0, 2.0), (0.5, 2.0));
        let q2 = random_gaussian(&mut rng, d, (-2.0, 2.0), (0.5, 2.0));
        let p1 = random_gaussian(&mut rng, d, (-2.0, 2.0), (0.5, 2.0));
        let p2 = random_gaussian(&mut rng, d, (-2.0, 2.0), (0.5, 2.0));
        let exact = [
            gaussian::kl_diag(&q1, &p1).expect("dims"),
            gaussian::cross_entropy(&q1, &p1).expect("dims"),
            gaussian::lambda_mismatch(&q2, &p1, &p2).expect("dims"),
            closed_delta(&q1, &q2, &p1, &opts.faults),
            gaussian::gamma(&q1, &q2, &p1, &p2).expect("dims").gamma,
        ];
        let est = mc_estimates(&q1, &q2, &p1, &p2, &mut rng);
        for k in 0..5 {
            let z = est[k].z(exact[k]);
            worst[k] = worst[k].max(z);
            if z.is_nan() || z > MC_SIGMAS {
                fails[k] += 1;
                first_fail[k].get_or_insert(i);
            }
        }
    }
    (0..5)
        .map(|k| {
            let detail = match first_fail[k] {
                None => format!("{MC_SAMPLES} samples per configuration"),
                Some(i) => format!(
                    "{} of {MC_CONFIGS} configurations beyond {MC_SIGMAS} SE, first #{i}",
                    fails[k]
                ),
            };
            t.check(
                Suite::Analytics,
                NAMES[k],
                worst[k],
                MC_SIGMAS,
                MC_CONFIGS,
                fails[k] == 0,
                detail,
            )
        })
        .collect()
}

/// Adapter state with every parameter random, for the objective identity.
fn random_adapter_state(rng: &mut StreamRng, i: usize) -> (FvaeAdapter, ParamStore, Tensor, Priors) {
    let d_in = [4, 8, 6][i % 3];
    let r = [2, 3, 4][(i / 3) % 3];
    let ad = FvaeAdapter::new("l", d_in, d_in, r, r, 5, 0.0, true);
    let mut store = ParamStore::new();
    ad.init(&mut store, i as u64);
    let names: Vec<(String, Vec<usize>)> = store
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.shape().to_vec()))
        .collect();
    for (n, shape) in names {
        store.set(&n, tensor(rng, shape, -0.8, 0.8)).expect("same shape");
    }
    let x = tensor(rng, vec![3, d_in], -2.0, 2.0);
    let center = rng.random_range(-2.0..2.0);
    let priors = Priors::new(
        DiagGaussian::standard(r).expect("r >= 1"),
        DiagGaussian::isotropic(center, r).expect("r >= 1"),
    );
    (ad, store, x, priors)
}

fn identities_suite(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = stream(opts.seed, Purpose::Verify, 2);

    // Λ two ways, Γ = Λ + Δ, and Λ = 0 for shared priors.
    let t = Timer::start();
    let (mut lam_err, mut split_err, mut null_max) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..IDENTITY_CONFIGS {
        let d = DIMS[i % DIMS.len()];
        let q1 = random_gaussian(&mut rng, d, (-3.0, 3.0), (0.1, 3.0));
        let q2 = random_gaussian(&mut rng, d, (-3.0, 3.0), (0.1, 3.0));
        let p1 = random_gaussian(&mut rng, d, (-3.0, 3.0), (0.1, 3.0));
        let p2 = random_gaussian(&mut rng, d, (-3.0, 3.0), (0.1, 3.0));
        let via_kl = gaussian::lambda_mismatch(&q2, &p1, &p2).expect("dims");
        let via_ce =
            gaussian::cross_entropy(&q2, &p2).expect("dims") - gaussian::cross_entropy(&q2, &p1).expect("dims");
        lam_err = lam_err.max((via_kl - via_ce).abs());
        let gamma = gaussian::cross_entropy(&q2, &p2).expect("dims") - gaussian::cross_entropy(&q1, &p1).expect("dims");
        let delta = closed_delta(&q1, &q2, &p1, &opts.faults);
        split_err = split_err.max((gamma - (via_kl + delta)).abs());
        null_max = null_max.max(gaussian::lambda_mismatch(&q2, &p1, &p1).expect("dims").abs());
    }
    let n = IDENTITY_CONFIGS;
    out.push(t.check(
        Suite::Identities,
        "lambda_kl_vs_ce",
        lam_err,
        IDENTITY_TOL,
        n,
        lam_err <= IDENTITY_TOL,
        String::new(),
    ));
    out.push(t.check(
        Suite::Identities,
        "gamma_equals_lambda_plus_delta",
        split_err,
        IDENTITY_TOL,
        n,
        split_err <= IDENTITY_TOL,
        String::new(),
    ));
    out.push(t.check(
        Suite::Identities,
        "lambda_null_for_shared_priors",
        null_max,
        IDENTITY_TOL,
        n,
        null_max <= IDENTITY_TOL,
        String::new(),
    ));

    // |Δ| ≤ ½W₂² + sqrt(E‖z₁‖²)·W₂ with L = 1 and p₁ = N(0, I).
    let t = Timer::start();
    let (mut violations, mut worst_ratio) = (0usize, 0.0f64);
    for i in 0..IDENTITY_CONFIGS {
        let d = DIMS[i % DIMS.len()];
        let q1 = random_gaussian(&mut rng, d, (-3.0, 3.0), (0.1, 3.0));
        let q2 = random_gaussian(&mut rng, d, (-3.0, 3.0), (0.1, 3.0));
        let b = gaussian::delta_bound_check(&q1, &q2, 1.0).expect("dims");
        let p1 = DiagGaussian::standard(d).expect("d >= 1");
        let abs_delta = closed_delta(&q1, &q2, &p1, &opts.faults).abs();
        if abs_delta > b.bound {
            violations += 1;
        }
        if b.bound > 0.0 {
            worst_ratio = worst_ratio.max(abs_delta / b.bound);
        }
    }
    out.push(t.check(
        Suite::Identities,
        "delta_w2_bound",
        worst_ratio,
        1.0,
        n,
        violations == 0,
        format!("{violations} violations; worst is |Δ| / bound"),
    ));

    // Both ways of writing the FVAE objective agree at unit coefficients.
    let t = Timer::start();
    let mut worst = 0.0f64;
    for i in 0..OBJECTIVE_STATES {
        let (ad, store, x, priors) = random_adapter_state(&mut rng, i);
        let mut s = Session::new(&store);
        let xv = s.graph.constant(x);
        let mut noise = Noise::for_step(opts.seed, i as u64);
        let res = ad.forward_train(&mut s, xv, &mut noise).and_then(|(_, inter)| {
            let (e4, _) = objectives::fvae_elbo(&mut s.graph, &inter, &ObjectiveCoeffs::default(), &priors)
                .map_err(|e| crate::adapters::ModelError::InvalidSpec(e.to_string()))?;
            let e3 = objectives::cross_term_objective(&mut s.graph, &inter, &priors)
                .map_err(|e| crate::adapters::ModelError::InvalidSpec(e.to_string()))?;
            Ok((s.graph.value(e4).item() - s.graph.value(e3).item()).abs())
        });
        worst = worst.max(res.unwrap_or(f64::INFINITY));
    }
    out.push(t.check(
        Suite::Identities,
        "cross_term_objective_equals_fvae_elbo",
        worst,
        IDENTITY_TOL,
        OBJECTIVE_STATES,
        worst <= IDENTITY_TOL,
        "shared reconstruction sample per state".into(),
    ));
    out
}

/// Whether the inference path of `model` reads only the first encoder, the
/// up-projection and non-adapter parameters. Returns the offending names.
pub fn inference_path_violations(model: &Model, x: &Tensor) -> Result<Vec<String>, crate::adapters::ModelError> {
    let mut s = Session::new(&model.params);
    model.forward(&mut s, x, &mut Mode::Infer)?;
    Ok(s.touched()
        .into_iter()
        .filter(|n| {
            let cat = model.params.get(n).map(|p| p.category);
            matches!(cat, Some(ParamCategory::Enc2 | ParamCategory::Dec))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in [Suite::All, Suite::Gradcheck, Suite::Analytics, Suite::Identities] {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn gradcheck_suite_passes() {
        let r = run(Suite::Gradcheck, &VerifyOptions::default());
        assert!(r.passed(), "{}", r.table());
        assert!(r.checks.iter().any(|c| c.name == "total_loss_fvae"));
        assert!(r.checks.iter().all(|c| c.suite == "gradcheck"));
    }

    #[test]
    fn identities_pass_and_detect_flipped_delta() {
        let r = run(Suite::Identities, &VerifyOptions::default());
        assert!(r.passed(), "{}", r.table());
        let faulty = VerifyOptions {
            faults: Faults { flip_delta_sign: true },
            ..VerifyOptions::default()
        };
        let r = run(Suite::Identities, &faulty);
        let failed: Vec<&str> = r.failures().map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"gamma_equals_lambda_plus_delta"), "{failed:?}");
    }

    #[test]
    fn moments_match_direct_formulas() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        let mean = 3.5;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        assert!((m.mean - mean).abs() < 1e-15);
        assert!((m.se() - (var / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn inference_path_reads_no_residual_parameters() {
        let model = toy_model(Variant::Fvae, 3);
        let x = Tensor::zeros(vec![2, 8]);
        assert!(inference_path_violations(&model, &x).unwrap().is_empty());
    }
}
