//! Training objectives.
//!
//! Each adapted layer contributes an ELBO-style objective (to be maximised)
//! built from its [`FvaeIntermediates`]; the loss that is minimised is
//! `downstream − Σ_l λ_l · elbo_l`. Reconstruction uses one reparameterized
//! sample; every KL and prior expectation is taken in closed form. All terms
//! are averaged over rows (examples, or tokens for sequence backbones).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterConfig, FvaeIntermediates, Mode, Model, ModelError, Noise, Session, Variant};
use crate::gaussian::{self, DiagGaussian, GaussianError};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("objective coefficient `{0}` is not finite")]
    NonFiniteCoeff(&'static str),
    #[error("expected {expected} per-layer weights, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

/// Per-layer weights of the ELBO terms in the total loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerWeights {
    Shared(f64),
    PerLayer(Vec<f64>),
}

fn default_ablation_beta() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveCoeffs {
    /// Reconstruction weight.
    pub alpha: f64,
    /// Weight of `KL(q₁‖p₁)`.
    pub beta: f64,
    /// Weight of the repulsive term Γ.
    pub delta: f64,
    /// Scalar shared by all layers, or one weight per adapted layer.
    pub lambda: LayerWeights,
    /// KL multiplier of the β-VAE2LAT ablation.
    #[serde(default = "default_ablation_beta")]
    pub ablation_beta: f64,
}

impl Default for ObjectiveCoeffs {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            delta: 1.0,
            lambda: LayerWeights::Shared(1e-3),
            ablation_beta: default_ablation_beta(),
        }
    }
}

impl ObjectiveCoeffs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("delta", self.delta),
            ("ablation_beta", self.ablation_beta),
        ] {
            if !v.is_finite() {
                return Err(ObjectiveError::NonFiniteCoeff(name));
            }
        }
        let lambdas: &[f64] = match &self.lambda {
            LayerWeights::Shared(l) => std::slice::from_ref(l),
            LayerWeights::PerLayer(v) => v,
        };
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(ObjectiveError::NonFiniteCoeff("lambda"));
        }
        Ok(())
    }

    pub fn lambdas(&self, layers: usize) -> Result<Vec<f64>> {
        match &self.lambda {
            LayerWeights::Shared(l) => Ok(vec![*l; layers]),
            LayerWeights::PerLayer(v) if v.len() == layers => Ok(v.clone()),
            LayerWeights::PerLayer(v) => Err(ObjectiveError::LayerCount {
                expected: layers,
                got: v.len(),
            }),
        }
    }
}

/// `p₁ = N(0, I)` over `z₁` and `p₂ = N(c·1, I)` over `z₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub p1: DiagGaussian,
    pub p2: DiagGaussian,
}

impl Priors {
    pub fn new(p1: DiagGaussian, p2: DiagGaussian) -> Self {
        Self { p1, p2 }
    }

    pub fn from_config(cfg: &AdapterConfig) -> Result<Self> {
        Ok(Self {
            p1: DiagGaussian::standard(cfg.rank_r)?,
            p2: DiagGaussian::isotropic(cfg.prior2_center, cfg.z2_dim)?,
        })
    }
}

/// Values of every term for one adapted layer, averaged over rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub recon: f64,
    pub kl1: f64,
    pub kl2: f64,
    pub lambda_mismatch: f64,
    pub delta_discrepancy: f64,
    pub gamma: f64,
    pub w2: f64,
    pub elbo: f64,
}

/// Itemised total loss. Scalar term fields are means over adapted layers;
/// `elbo` is the λ-free sum over layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl1: f64,
    pub kl2: f64,
    pub lambda_mismatch: f64,
    pub delta_discrepancy: f64,
    pub gamma: f64,
    pub w2: f64,
    pub elbo: f64,
    pub downstream: f64,
    pub total: f64,
    pub lambdas: Vec<f64>,
    pub layers: Vec<LayerTerms>,
}

impl LossBreakdown {
    /// `downstream − Σ λ_l · elbo_l` recomputed from the itemised values.
    pub fn recomputed_total(&self) -> f64 {
        combine(self.downstream, &self.layer_elbos(), &self.lambdas).unwrap_or(f64::NAN)
    }

    pub fn layer_elbos(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.elbo).collect()
    }

    pub fn identity_error(&self) -> f64 {
        (self.total - self.recomputed_total()).abs()
    }
}

/// `downstream − Σ λ_l · elbo_l` on plain numbers.
pub fn combine(downstream: f64, elbos: &[f64], lambdas: &[f64]) -> Result<f64> {
    if elbos.len() != lambdas.len() {
        return Err(ObjectiveError::LayerCount {
            expected: elbos.len(),
            got: lambdas.len(),
        });
    }
    Ok(elbos.iter().zip(lambdas).fold(downstream, |acc, (e, l)| acc - l * e))
}

fn rows_of(g: &Graph, v: Var) -> f64 {
    g.value(v).rows() as f64
}

/// `∫ q log p` pieces shared by the KL and cross-entropy graphs:
/// returns `Σ_rows Σ_j (σq² + (μq − μp)²)/σp²`.
fn weighted_second_moment(g: &mut Graph, mu: Var, log_var: Var, p: &DiagGaussian) -> Result<Var> {
    let shape = g.value(mu).shape().to_vec();
    let d = p.dim();
    if *shape.last().unwrap_or(&0) != d {
        return Err(GaussianError::DimensionMismatch(shape.last().copied().unwrap_or(0), d).into());
    }
    let neg_mean = g.constant(Tensor::vector(p.mu().iter().map(|m| -m).collect()));
    let centered = g.add_bias(mu, neg_mean)?;
    let sq = g.square(centered)?;
    let var = g.exp(log_var)?;
    let num = g.add(var, sq)?;
    let weighted = if p.log_var().iter().all(|&lv| lv == 0.0) {
        num
    } else {
        let rows = g.value(mu).rows();
        let inv: Vec<f64> = (0..rows).flat_map(|_| (0..d).map(|j| 1.0 / p.var(j))).collect();
        let inv = g.constant(Tensor::new(shape, inv)?);
        g.mul(num, inv)?
    };
    Ok(g.sum(weighted)?)
}

fn add_scalar(g: &mut Graph, v: Var, c: f64) -> Result<Var> {
    let c = g.constant(Tensor::scalar(c));
    Ok(g.add(v, c)?)
}

/// Row-averaged `KL(q‖p)` for row-wise posteriors `q = N(mu, exp(log_var))`.
pub fn kl_to_prior(g: &mut Graph, mu: Var, log_var: Var, p: &DiagGaussian) -> Result<Var> {
    let rows = rows_of(g, mu);
    let moment = weighted_second_moment(g, mu, log_var, p)?;
    let lv_sum = g.sum(log_var)?;
    let diff = g.sub(moment, lv_sum)?;
    let per_row_const: f64 = p.log_var().iter().map(|lv| lv - 1.0).sum();
    let total = add_scalar(g, diff, rows * per_row_const)?;
    Ok(g.scale(total, 0.5 / rows)?)
}

/// Row-averaged `E_{z~q}[log p(z)]`.
pub fn expected_log_prior(g: &mut Graph, mu: Var, log_var: Var, p: &DiagGaussian) -> Result<Var> {
    let rows = rows_of(g, mu);
    let moment = weighted_second_moment(g, mu, log_var, p)?;
    let per_row_const: f64 = p.log_var().iter().map(|lv| (2.0 * PI).ln() + lv).sum();
    let total = add_scalar(g, moment, rows * per_row_const)?;
    Ok(g.scale(total, -0.5 / rows)?)
}

/// Row-averaged negative entropy `E_{z~q}[log q(z)]`.
pub fn neg_entropy(g: &mut Graph, log_var: Var) -> Result<Var> {
    let t = g.value(log_var);
    let (rows, d) = (t.rows() as f64, t.cols() as f64);
    let lv_sum = g.sum(log_var)?;
    let total = add_scalar(g, lv_sum, rows * d * ((2.0 * PI).ln() + 1.0))?;
    Ok(g.scale(total, -0.5 / rows)?)
}

/// Unit-variance Gaussian log-likelihood with constants dropped:
/// `−½ · mean_rows Σ_j (x − x̂)²`.
pub fn recon_log_likelihood(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let rows = rows_of(g, x);
    let diff = g.sub(x, x_hat)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, -0.5 / rows)?)
}

/// Mean softmax cross-entropy of integer labels.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let t = g.value(logits);
    let (rows, classes) = (t.rows(), t.cols());
    if labels.len() != rows {
        return Err(ObjectiveError::LabelCount {
            labels: labels.len(),
            rows,
        });
    }
    let mut onehot = vec![0.0; rows * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(ObjectiveError::LabelRange { label: l, classes });
        }
        onehot[i * classes + l] = 1.0;
    }
    let shape = t.shape().to_vec();
    let ls = g.log_softmax(logits)?;
    let onehot = g.constant(Tensor::new(shape, onehot)?);
    let picked = g.mul(ls, onehot)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / rows as f64)?)
}

fn row_gaussians(g: &Graph, mu: Var, log_var: Var) -> Result<Vec<DiagGaussian>> {
    let (m, l) = (g.value(mu), g.value(log_var));
    (0..m.rows())
        .map(|i| Ok(DiagGaussian::new(m.row(i).to_vec(), l.row(i).to_vec())?))
        .collect()
}

/// Closed-form diagnostics of one layer, averaged over rows. Λ, Δ and W₂
/// need both latents in the same space and are NaN otherwise.
pub fn layer_diagnostics(g: &Graph, inter: &FvaeIntermediates, priors: &Priors) -> Result<LayerTerms> {
    let q1 = row_gaussians(g, inter.mu1, inter.log_var1)?;
    let q2 = row_gaussians(g, inter.mu2, inter.log_var2)?;
    let n = q1.len() as f64;
    let same_space = priors.p1.dim() == priors.p2.dim();
    let mut t = LayerTerms::default();
    for (a, b) in q1.iter().zip(&q2) {
        t.kl1 += gaussian::kl_diag(a, &priors.p1)?;
        t.kl2 += gaussian::kl_diag(b, &priors.p2)?;
        t.gamma += gaussian::cross_entropy(b, &priors.p2)? - gaussian::cross_entropy(a, &priors.p1)?;
        if same_space {
            let r = gaussian::gamma(a, b, &priors.p1, &priors.p2)?;
            t.lambda_mismatch += r.lambda_mismatch;
            t.delta_discrepancy += r.delta_discrepancy;
            t.w2 += r.w2;
        }
    }
    t.kl1 /= n;
    t.kl2 /= n;
    t.gamma /= n;
    if same_space {
        t.lambda_mismatch /= n;
        t.delta_discrepancy /= n;
        t.w2 /= n;
    } else {
        t.lambda_mismatch = f64::NAN;
        t.delta_discrepancy = f64::NAN;
        t.w2 = f64::NAN;
    }
    Ok(t)
}

fn finish(
    g: &mut Graph,
    elbo: Var,
    recon: Var,
    inter: &FvaeIntermediates,
    priors: &Priors,
) -> Result<(Var, LayerTerms)> {
    let mut terms = layer_diagnostics(g, inter, priors)?;
    terms.recon = g.value(recon).item();
    terms.elbo = g.value(elbo).item();
    Ok((elbo, terms))
}

/// `α·recon − β·KL(q₁‖p₁) + δ·Γ` with `Γ = E_{q₂}[log p₂] − E_{q₁}[log p₁]`.
pub fn fvae_elbo(
    g: &mut Graph,
    inter: &FvaeIntermediates,
    coeffs: &ObjectiveCoeffs,
    priors: &Priors,
) -> Result<(Var, LayerTerms)> {
    coeffs.validate()?;
    let recon = recon_log_likelihood(g, inter.x, inter.x_hat)?;
    let kl1 = kl_to_prior(g, inter.mu1, inter.log_var1, &priors.p1)?;
    let e2 = expected_log_prior(g, inter.mu2, inter.log_var2, &priors.p2)?;
    let e1 = expected_log_prior(g, inter.mu1, inter.log_var1, &priors.p1)?;
    let gamma = g.sub(e2, e1)?;

    let a = g.scale(recon, coeffs.alpha)?;
    let b = g.scale(kl1, coeffs.beta)?;
    let d = g.scale(gamma, coeffs.delta)?;
    let ab = g.sub(a, b)?;
    let elbo = g.add(ab, d)?;
    finish(g, elbo, recon, inter, priors)
}

/// `recon − β·KL(q₁‖p₁) − β·KL(q₂‖p₂)`.
pub fn beta_vae2lat_elbo(
    g: &mut Graph,
    inter: &FvaeIntermediates,
    priors: &Priors,
    beta: f64,
) -> Result<(Var, LayerTerms)> {
    if !beta.is_finite() {
        return Err(ObjectiveError::NonFiniteCoeff("beta"));
    }
    let recon = recon_log_likelihood(g, inter.x, inter.x_hat)?;
    let kl1 = kl_to_prior(g, inter.mu1, inter.log_var1, &priors.p1)?;
    let kl2 = kl_to_prior(g, inter.mu2, inter.log_var2, &priors.p2)?;
    let kl = g.add(kl1, kl2)?;
    let kl = if beta == 1.0 { kl } else { g.scale(kl, beta)? };
    let elbo = g.sub(recon, kl)?;
    finish(g, elbo, recon, inter, priors)
}

/// Two-latent ELBO: `recon − KL(q₁‖p₁) − KL(q₂‖p₂)`.
pub fn vae2lat_elbo(g: &mut Graph, inter: &FvaeIntermediates, priors: &Priors) -> Result<(Var, LayerTerms)> {
    beta_vae2lat_elbo(g, inter, priors, 1.0)
}

/// The two-latent ELBO augmented with `E[log q₂(z₂|x) − log p₁(z₁)]`, both
/// expectations in closed form. Algebraically equal to [`fvae_elbo`] at
/// `α = β = δ = 1`.
pub fn cross_term_objective(g: &mut Graph, inter: &FvaeIntermediates, priors: &Priors) -> Result<Var> {
    let (base, _) = vae2lat_elbo(g, inter, priors)?;
    let neg_h2 = neg_entropy(g, inter.log_var2)?;
    let e1 = expected_log_prior(g, inter.mu1, inter.log_var1, &priors.p1)?;
    let extra = g.sub(neg_h2, e1)?;
    Ok(g.add(base, extra)?)
}

/// Dispatches to the objective of `variant`; `None` for plain LoRA.
pub fn layer_objective(
    variant: Variant,
    g: &mut Graph,
    inter: &FvaeIntermediates,
    coeffs: &ObjectiveCoeffs,
    priors: &Priors,
) -> Result<Option<(Var, LayerTerms)>> {
    Ok(match variant {
        Variant::Lora => None,
        Variant::Fvae => Some(fvae_elbo(g, inter, coeffs, priors)?),
        Variant::Vae2lat => Some(vae2lat_elbo(g, inter, priors)?),
        Variant::BetaVae2lat => Some(beta_vae2lat_elbo(g, inter, priors, coeffs.ablation_beta)?),
    })
}

/// `downstream − Σ_l λ_l · elbo_l` in the graph, with its breakdown.
pub fn total_loss(
    g: &mut Graph,
    downstream: Var,
    elbos: &[(Var, LayerTerms)],
    lambdas: &[f64],
) -> Result<(Var, LossBreakdown)> {
    if elbos.len() != lambdas.len() {
        return Err(ObjectiveError::LayerCount {
            expected: elbos.len(),
            got: lambdas.len(),
        });
    }
    let mut total = downstream;
    for ((e, _), &l) in elbos.iter().zip(lambdas) {
        let weighted = g.scale(*e, l)?;
        total = g.sub(total, weighted)?;
    }
    let layers: Vec<LayerTerms> = elbos.iter().map(|(_, t)| *t).collect();
    let n = layers.len().max(1) as f64;
    let mean = |f: fn(&LayerTerms) -> f64| {
        if layers.is_empty() {
            0.0
        } else {
            layers.iter().map(f).sum::<f64>() / n
        }
    };
    let breakdown = LossBreakdown {
        recon: mean(|t| t.recon),
        kl1: mean(|t| t.kl1),
        kl2: mean(|t| t.kl2),
        lambda_mismatch: mean(|t| t.lambda_mismatch),
        delta_discrepancy: mean(|t| t.delta_discrepancy),
        gamma: mean(|t| t.gamma),
        w2: mean(|t| t.w2),
        elbo: layers.iter().map(|t| t.elbo).sum(),
        downstream: g.value(downstream).item(),
        total: g.value(total).item(),
        lambdas: lambdas.to_vec(),
        layers,
    };
    Ok((total, breakdown))
}

/// Training-mode forward pass of `model` on one batch and the full loss.
pub fn batch_loss(
    model: &Model,
    s: &mut Session<'_>,
    x: &Tensor,
    labels: &[usize],
    noise: &mut Noise,
    coeffs: &ObjectiveCoeffs,
) -> Result<(Var, LossBreakdown)> {
    let out = model.forward(s, x, &mut Mode::Train(noise))?;
    let downstream = softmax_cross_entropy(&mut s.graph, out.logits, labels)?;
    let mut elbos = Vec::new();
    if let Some(cfg) = &model.adapter {
        let priors = Priors::from_config(cfg)?;
        for layer in &out.layers {
            if let Some(inter) = &layer.inter {
                if let Some(e) = layer_objective(cfg.variant, &mut s.graph, inter, coeffs, &priors)? {
                    elbos.push(e);
                }
            }
        }
    }
    let lambdas = coeffs.lambdas(elbos.len())?;
    total_loss(&mut s.graph, downstream, &elbos, &lambdas)
}
