use serde::{Deserialize, Serialize};

use super::{Adapter, Model, ParamCategory, ParamStore};

/// Trainable-parameter accounting by role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub lora_ab: usize,
    pub enc1: usize,
    pub enc2: usize,
    pub dec: usize,
    pub b: usize,
    pub head: usize,
    /// Parameters the inference path reads: LoRA `A`/`B`, or `q₁` plus `B`,
    /// plus the head.
    pub inference_path: usize,
}

impl ParamCount {
    fn add(&mut self, category: ParamCategory, n: usize) {
        match category {
            ParamCategory::Backbone => return,
            ParamCategory::LoraAb => self.lora_ab += n,
            ParamCategory::Enc1 => self.enc1 += n,
            ParamCategory::Enc2 => self.enc2 += n,
            ParamCategory::Dec => self.dec += n,
            ParamCategory::B => self.b += n,
            ParamCategory::Head => self.head += n,
        }
        self.total += n;
        if !matches!(category, ParamCategory::Enc2 | ParamCategory::Dec) {
            self.inference_path += n;
        }
    }

    pub fn category_sum(&self) -> usize {
        self.lora_ab + self.enc1 + self.enc2 + self.dec + self.b + self.head
    }
}

/// Counts from the stored tensors.
pub fn count_trainable_params(params: &ParamStore) -> ParamCount {
    let mut c = ParamCount::default();
    for (_, p) in params.iter() {
        c.add(p.category, p.value.len());
    }
    c
}

/// Counts from an adapter's layer dimensions alone (no head).
pub fn count_adapter_params(adapter: &Adapter) -> ParamCount {
    let mut c = ParamCount::default();
    match adapter {
        Adapter::Lora(l) => c.add(ParamCategory::LoraAb, l.param_count()),
        Adapter::Fvae(f) => {
            c.add(ParamCategory::Enc1, f.enc1_params());
            c.add(ParamCategory::Enc2, f.enc2_params());
            c.add(ParamCategory::Dec, f.dec_params());
            c.add(ParamCategory::B, f.b_params());
        }
    }
    c
}

impl Model {
    pub fn param_count(&self) -> ParamCount {
        count_trainable_params(&self.params)
    }
}
