use serde::{Deserialize, Serialize};

use super::{
    AdaptedLinear, Adapter, AdapterConfig, FvaeAdapter, FvaeIntermediates, Linear, LoraAdapter, Mode, ModelError,
    ParamCategory, ParamStore, Result, Session,
};
use crate::tensor::{Tensor, Var};

const MASKED: f64 = -1e30;

/// Architecture of the host network. Backbone weights are drawn once from
/// the seed and frozen; they stand in for a pretrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSpec {
    /// `input → fc1 → relu → fc2 → relu → head`. `adapted_layers` names the
    /// hidden layers (`fc1`, `fc2`) that carry adapters.
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        adapted_layers: Vec<String>,
    },
    /// Single-head self-attention block over `seq_len` tokens of width
    /// `token_dim` (the input row is split into consecutive tokens), with
    /// residual attention and feed-forward sublayers, mean pooling and a
    /// linear head. Adapters sit on the query and key projections.
    Attention {
        token_dim: usize,
        seq_len: usize,
        model_dim: usize,
        ffn_dim: usize,
        num_classes: usize,
    },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::Mlp {
            input_dim: 32,
            hidden_dim: 64,
            num_classes: 2,
            adapted_layers: vec!["fc1".into(), "fc2".into()],
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        match self {
            BackboneSpec::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
                adapted_layers,
            } => {
                if *input_dim == 0 || *hidden_dim == 0 || *num_classes == 0 {
                    return bad("model dimensions must be >= 1".into());
                }
                for (i, l) in adapted_layers.iter().enumerate() {
                    if l != "fc1" && l != "fc2" {
                        return bad(format!("unknown adapted layer `{l}` (expected fc1 or fc2)"));
                    }
                    if adapted_layers[..i].contains(l) {
                        return bad(format!("layer `{l}` listed twice"));
                    }
                }
            }
            BackboneSpec::Attention {
                token_dim,
                seq_len,
                model_dim,
                ffn_dim,
                num_classes,
            } => {
                if [*token_dim, *seq_len, *model_dim, *ffn_dim, *num_classes].contains(&0) {
                    return bad("model dimensions must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp { input_dim, .. } => *input_dim,
            BackboneSpec::Attention { token_dim, seq_len, .. } => token_dim * seq_len,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            BackboneSpec::Mlp { num_classes, .. } | BackboneSpec::Attention { num_classes, .. } => *num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
enum Layers {
    Mlp {
        fc1: AdaptedLinear,
        fc2: AdaptedLinear,
        head: Linear,
    },
    Attention {
        seq_len: usize,
        token_dim: usize,
        model_dim: usize,
        embed: Linear,
        query: AdaptedLinear,
        key: AdaptedLinear,
        value: Linear,
        out: Linear,
        ffn1: Linear,
        ffn2: Linear,
        head: Linear,
    },
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub name: String,
    /// Present for VAE adapters in training mode.
    pub inter: Option<FvaeIntermediates>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// One entry per adapted layer, in network order.
    pub layers: Vec<LayerOutput>,
}

/// A backbone, its adapters and all parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: BackboneSpec,
    pub adapter: Option<AdapterConfig>,
    pub params: ParamStore,
    layers: Layers,
}

fn frozen_linear(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize) -> Linear {
    let lin = Linear::new(name, d_in, d_out, true);
    // He-uniform keeps relu activations O(1) through the random layers.
    lin.init(store, seed, (6.0 / d_in as f64).sqrt(), ParamCategory::Backbone);
    lin
}

fn adapted(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    d_in: usize,
    d_out: usize,
    cfg: Option<&AdapterConfig>,
) -> AdaptedLinear {
    let base = frozen_linear(store, seed, name, d_in, d_out);
    let adapter = cfg.map(|c| {
        let prefix = format!("{name}.adapter");
        if c.variant.uses_vae() {
            let f = FvaeAdapter::new(
                prefix,
                d_in,
                d_out,
                c.rank_r,
                c.z2_dim,
                c.decoder_hidden,
                c.dropout_p,
                c.encoder_bias,
            );
            f.init(store, seed);
            Adapter::Fvae(f)
        } else {
            let l = LoraAdapter {
                prefix,
                d_in,
                d_out,
                rank: c.rank_r,
                scale: c.lora_scale,
                dropout_p: c.dropout_p,
            };
            l.init(store, seed);
            Adapter::Lora(l)
        }
    });
    AdaptedLinear { base, adapter }
}

impl Model {
    /// Builds and initialises a model. `adapter = None` gives the frozen
    /// backbone with a trainable head only. Parameter initialisation is keyed
    /// by name, so backbone and head weights are identical for every adapter
    /// choice under the same seed.
    pub fn build(spec: &BackboneSpec, adapter: Option<&AdapterConfig>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if let Some(c) = adapter {
            c.validate()?;
        }
        let mut store = ParamStore::new();
        let layers = match spec {
            BackboneSpec::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
                adapted_layers,
            } => {
                let has = |n: &str| adapted_layers.iter().any(|l| l == n);
                let fc1 = adapted(
                    &mut store,
                    seed,
                    "fc1",
                    *input_dim,
                    *hidden_dim,
                    adapter.filter(|_| has("fc1")),
                );
                let fc2 = adapted(
                    &mut store,
                    seed,
                    "fc2",
                    *hidden_dim,
                    *hidden_dim,
                    adapter.filter(|_| has("fc2")),
                );
                let head = Linear::new("head", *hidden_dim, *num_classes, true);
                head.init_default(&mut store, seed, ParamCategory::Head);
                Layers::Mlp { fc1, fc2, head }
            }
            BackboneSpec::Attention {
                token_dim,
                seq_len,
                model_dim,
                ffn_dim,
                num_classes,
            } => {
                let (t, d, f) = (*token_dim, *model_dim, *ffn_dim);
                let embed = frozen_linear(&mut store, seed, "embed", t, d);
                let query = adapted(&mut store, seed, "attn.query", d, d, adapter);
                let key = adapted(&mut store, seed, "attn.key", d, d, adapter);
                let value = frozen_linear(&mut store, seed, "attn.value", d, d);
                let out = frozen_linear(&mut store, seed, "attn.out", d, d);
                let ffn1 = frozen_linear(&mut store, seed, "ffn.fc1", d, f);
                let ffn2 = frozen_linear(&mut store, seed, "ffn.fc2", f, d);
                let head = Linear::new("head", d, *num_classes, true);
                head.init_default(&mut store, seed, ParamCategory::Head);
                Layers::Attention {
                    seq_len: *seq_len,
                    token_dim: t,
                    model_dim: d,
                    embed,
                    query,
                    key,
                    value,
                    out,
                    ffn1,
                    ffn2,
                    head,
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            adapter: adapter.cloned(),
            params: store,
            layers,
        })
    }

    /// Adapted layers in network order.
    pub fn adapted_layers(&self) -> Vec<&AdaptedLinear> {
        let all: Vec<&AdaptedLinear> = match &self.layers {
            Layers::Mlp { fc1, fc2, .. } => vec![fc1, fc2],
            Layers::Attention { query, key, .. } => vec![query, key],
        };
        all.into_iter().filter(|l| l.adapter.is_some()).collect()
    }

    pub fn num_adapted(&self) -> usize {
        self.adapted_layers().len()
    }

    pub fn head(&self) -> &Linear {
        match &self.layers {
            Layers::Mlp { head, .. } | Layers::Attention { head, .. } => head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn forward(&self, s: &mut Session<'_>, x: &Tensor, mode: &mut Mode<'_>) -> Result<ForwardOutput> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(ModelError::InputWidth {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut layers = Vec::new();
        let mut record = |lin: &AdaptedLinear, inter: Option<FvaeIntermediates>| {
            if lin.adapter.is_some() {
                layers.push(LayerOutput {
                    name: lin.base.name.clone(),
                    inter,
                });
            }
        };
        let logits = match &self.layers {
            Layers::Mlp { fc1, fc2, head } => {
                let x = s.graph.constant(x.clone());
                let (h, i1) = fc1.forward(s, x, mode)?;
                record(fc1, i1);
                let h = s.graph.relu(h)?;
                let (h, i2) = fc2.forward(s, h, mode)?;
                record(fc2, i2);
                let h = s.graph.relu(h)?;
                head.forward(s, h)?
            }
            Layers::Attention {
                seq_len,
                token_dim,
                model_dim,
                embed,
                query,
                key,
                value,
                out,
                ffn1,
                ffn2,
                head,
            } => {
                let n = x.rows();
                let tokens = x.reshape(vec![n * seq_len, *token_dim])?;
                let tokens = s.graph.constant(tokens);
                let h0 = embed.forward(s, tokens)?;

                let (q, iq) = query.forward(s, h0, mode)?;
                record(query, iq);
                let (k, ik) = key.forward(s, h0, mode)?;
                record(key, ik);
                let v = value.forward(s, h0)?;

                // Block-diagonal mask keeps attention within each example.
                let nt = n * seq_len;
                let mut mask = vec![MASKED; nt * nt];
                let mut pool = vec![0.0; n * nt];
                for e in 0..n {
                    for i in 0..*seq_len {
                        let r = e * seq_len + i;
                        for j in 0..*seq_len {
                            mask[r * nt + e * seq_len + j] = 0.0;
                        }
                        pool[e * nt + r] = 1.0 / *seq_len as f64;
                    }
                }
                let kt = s.graph.transpose(k)?;
                let scores = s.graph.matmul(q, kt)?;
                let scores = s.graph.scale(scores, 1.0 / (*model_dim as f64).sqrt())?;
                let mask = s.graph.constant(Tensor::new(vec![nt, nt], mask)?);
                let scores = s.graph.add(scores, mask)?;
                let log_attn = s.graph.log_softmax(scores)?;
                let attn = s.graph.exp(log_attn)?;
                let ctx = s.graph.matmul(attn, v)?;
                let a = out.forward(s, ctx)?;
                let h1 = s.graph.add(h0, a)?;

                let f = ffn1.forward(s, h1)?;
                let f = s.graph.relu(f)?;
                let f = ffn2.forward(s, f)?;
                let h2 = s.graph.add(h1, f)?;

                let pool = s.graph.constant(Tensor::new(vec![n, nt], pool)?);
                let pooled = s.graph.matmul(pool, h2)?;
                head.forward(s, pooled)?
            }
        };
        Ok(ForwardOutput { logits, layers })
    }

    /// Inference-path logits (posterior means, no dropout).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.params);
        let out = self.forward(&mut s, x, &mut Mode::Infer)?;
        Ok(s.graph.value(out.logits).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                // First maximum wins ties.
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                    )
                    .0
            })
            .collect())
    }
}
