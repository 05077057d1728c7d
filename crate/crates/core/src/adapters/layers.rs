use super::{Mode, ModelError, Noise, ParamCategory, ParamStore, Result, Session};
use crate::tensor::Var;

/// `y = x Wᵀ + b` with `W` stored as `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias { self.d_out } else { 0 }
    }

    /// Weight uniform in `±weight_bound`, bias uniform in `±1/√d_in`.
    pub fn init(&self, store: &mut ParamStore, seed: u64, weight_bound: f64, category: ParamCategory) {
        store.init_uniform(
            seed,
            &self.weight_name(),
            vec![self.d_out, self.d_in],
            weight_bound,
            category,
        );
        if self.bias {
            let bound = 1.0 / (self.d_in as f64).sqrt();
            store.init_uniform(seed, &self.bias_name(), vec![self.d_out], bound, category);
        }
    }

    /// Default (`±1/√fan_in`) initialisation.
    pub fn init_default(&self, store: &mut ParamStore, seed: u64, category: ParamCategory) {
        self.init(store, seed, 1.0 / (self.d_in as f64).sqrt(), category);
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let wt = s.graph.transpose(w)?;
        let y = s.graph.matmul(x, wt)?;
        if self.bias {
            let b = s.param(&self.bias_name())?;
            Ok(s.graph.add_bias(y, b)?)
        } else {
            Ok(y)
        }
    }
}

fn branch_input(s: &mut Session<'_>, x: Var, noise: &mut Noise, p: f64) -> Result<Var> {
    let shape = s.graph.value(x).shape().to_vec();
    match noise.keep_mask(&shape, p) {
        Some(mask) => Ok(s.graph.dropout(x, &mask, p)?),
        None => Ok(x),
    }
}

/// Classic LoRA branch `scale · B A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub scale: f64,
    pub dropout_p: f64,
}

impl LoraAdapter {
    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.prefix)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let bound = 1.0 / (self.d_in as f64).sqrt();
        store.init_uniform(
            seed,
            &self.a_name(),
            vec![self.rank, self.d_in],
            bound,
            ParamCategory::LoraAb,
        );
        store.init_zeros(&self.b_name(), vec![self.d_out, self.rank], ParamCategory::LoraAb);
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let xin = match mode {
            Mode::Train(noise) => branch_input(s, x, noise, self.dropout_p)?,
            _ => x,
        };
        let a = s.param(&self.a_name())?;
        let b = s.param(&self.b_name())?;
        let at = s.graph.transpose(a)?;
        let h = s.graph.matmul(xin, at)?;
        let bt = s.graph.transpose(b)?;
        let up = s.graph.matmul(h, bt)?;
        if self.scale == 1.0 {
            Ok(up)
        } else {
            Ok(s.graph.scale(up, self.scale)?)
        }
    }
}

/// Graph handles produced by a training-mode FVAE pass, consumed by the
/// objectives. Rows are examples (or tokens for sequence backbones).
#[derive(Debug, Clone, Copy)]
pub struct FvaeIntermediates {
    /// Clean layer input, the reconstruction target.
    pub x: Var,
    pub mu1: Var,
    pub log_var1: Var,
    pub mu2: Var,
    pub log_var2: Var,
    pub z1: Var,
    pub z2: Var,
    pub x_hat: Var,
}

/// Factorized-VAE adapter: `q₁` replaces LoRA's `A`, its sample `z₁` goes
/// through `B`; `q₂` and the decoder exist only to shape `q₁` during
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct FvaeAdapter {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub z2_dim: usize,
    pub decoder_hidden: usize,
    pub dropout_p: f64,
    pub enc1_fc: Linear,
    pub enc1_head: Linear,
    pub enc2_fc: Linear,
    pub enc2_head: Linear,
    pub dec_fc: Linear,
    pub dec_out: Linear,
}

impl FvaeAdapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        z2_dim: usize,
        decoder_hidden: usize,
        dropout_p: f64,
        bias: bool,
    ) -> Self {
        let prefix = prefix.into();
        let lin = |part: &str, i, o| Linear::new(format!("{prefix}.{part}"), i, o, bias);
        Self {
            enc1_fc: lin("enc1.fc", d_in, rank),
            enc1_head: lin("enc1.head", rank, 2 * rank),
            enc2_fc: lin("enc2.fc", d_in, z2_dim),
            enc2_head: lin("enc2.head", z2_dim, 2 * z2_dim),
            dec_fc: lin("dec.fc", rank + z2_dim, decoder_hidden),
            dec_out: lin("dec.out", decoder_hidden, d_in),
            prefix,
            d_in,
            d_out,
            rank,
            z2_dim,
            decoder_hidden,
            dropout_p,
        }
    }

    pub fn b_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.enc1_fc.init_default(store, seed, ParamCategory::Enc1);
        self.enc1_head.init_default(store, seed, ParamCategory::Enc1);
        self.enc2_fc.init_default(store, seed, ParamCategory::Enc2);
        self.enc2_head.init_default(store, seed, ParamCategory::Enc2);
        self.dec_fc.init_default(store, seed, ParamCategory::Dec);
        self.dec_out.init_default(store, seed, ParamCategory::Dec);
        store.init_zeros(&self.b_name(), vec![self.d_out, self.rank], ParamCategory::B);
    }

    fn encode(&self, s: &mut Session<'_>, fc: &Linear, head: &Linear, x: Var) -> Result<(Var, Var)> {
        let h = fc.forward(s, x)?;
        let h = s.graph.relu(h)?;
        let out = head.forward(s, h)?;
        if !s.graph.value(out).all_finite() {
            return Err(ModelError::NonFiniteEncoder(head.name.clone()));
        }
        let k = fc.d_out;
        let mu = s.graph.slice(out, 0, k)?;
        let log_var = s.graph.slice(out, k, 2 * k)?;
        Ok((mu, log_var))
    }

    pub fn encode1(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, Var)> {
        self.encode(s, &self.enc1_fc, &self.enc1_head, x)
    }

    pub fn encode2(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, Var)> {
        self.encode(s, &self.enc2_fc, &self.enc2_head, x)
    }

    fn project(&self, s: &mut Session<'_>, z1: Var) -> Result<Var> {
        let b = s.param(&self.b_name())?;
        let bt = s.graph.transpose(b)?;
        Ok(s.graph.matmul(z1, bt)?)
    }

    /// Returns the branch output `B z₁` and the intermediates for the ELBO.
    pub fn forward_train(&self, s: &mut Session<'_>, x: Var, noise: &mut Noise) -> Result<(Var, FvaeIntermediates)> {
        let xin = branch_input(s, x, noise, self.dropout_p)?;
        let (mu1, log_var1) = self.encode1(s, xin)?;
        let (mu2, log_var2) = self.encode2(s, xin)?;
        let eps1 = noise.eps1(s.graph.value(mu1).shape());
        let eps2 = noise.eps2(s.graph.value(mu2).shape());
        let z1 = s.graph.reparameterize(mu1, log_var1, &eps1)?;
        let z2 = s.graph.reparameterize(mu2, log_var2, &eps2)?;
        let z = s.graph.concat(&[z1, z2])?;
        let h = self.dec_fc.forward(s, z)?;
        let h = s.graph.relu(h)?;
        let x_hat = self.dec_out.forward(s, h)?;
        let up = self.project(s, z1)?;
        Ok((
            up,
            FvaeIntermediates {
                x,
                mu1,
                log_var1,
                mu2,
                log_var2,
                z1,
                z2,
                x_hat,
            },
        ))
    }

    /// Branch output `B μ₁`; never evaluates `q₂` or the decoder.
    pub fn forward_infer(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (mu1, _) = self.encode1(s, x)?;
        self.project(s, mu1)
    }

    /// Branch output `B z₁` with `z₁ ~ q₁`.
    pub fn forward_infer_sampled(&self, s: &mut Session<'_>, x: Var, noise: &mut Noise) -> Result<Var> {
        let (mu1, log_var1) = self.encode1(s, x)?;
        let eps1 = noise.eps1(s.graph.value(mu1).shape());
        let z1 = s.graph.reparameterize(mu1, log_var1, &eps1)?;
        self.project(s, z1)
    }

    pub fn enc1_params(&self) -> usize {
        self.enc1_fc.param_count() + self.enc1_head.param_count()
    }

    pub fn enc2_params(&self) -> usize {
        self.enc2_fc.param_count() + self.enc2_head.param_count()
    }

    pub fn dec_params(&self) -> usize {
        self.dec_fc.param_count() + self.dec_out.param_count()
    }

    pub fn b_params(&self) -> usize {
        self.d_out * self.rank
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Adapter {
    Lora(LoraAdapter),
    Fvae(FvaeAdapter),
}

/// A frozen linear layer, optionally carrying an adapter branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub adapter: Option<Adapter>,
}

impl AdaptedLinear {
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Option<FvaeIntermediates>)> {
        let base = self.base.forward(s, x)?;
        let (branch, inter) = match (&self.adapter, mode) {
            (None, _) => return Ok((base, None)),
            (Some(Adapter::Lora(l)), mode) => (l.forward(s, x, mode)?, None),
            (Some(Adapter::Fvae(f)), Mode::Train(noise)) => {
                let (up, inter) = f.forward_train(s, x, noise)?;
                (up, Some(inter))
            }
            (Some(Adapter::Fvae(f)), Mode::Infer) => (f.forward_infer(s, x)?, None),
            (Some(Adapter::Fvae(f)), Mode::InferSampled(noise)) => (f.forward_infer_sampled(s, x, noise)?, None),
        };
        Ok((s.graph.add(base, branch)?, inter))
    }
}
