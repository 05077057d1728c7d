use std::collections::BTreeMap;

use crate::adapters::ParamStore;
use crate::tensor::Tensor;

use super::{Result, TrainError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates per trainable parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Returns the name of the first gradient holding a non-finite value.
pub fn first_non_finite(grads: &BTreeMap<String, Tensor>) -> Option<&str> {
    grads.iter().find(|(_, g)| !g.all_finite()).map(|(n, _)| n.as_str())
}

/// One AdamW update of every trainable parameter that has a gradient.
///
/// `p ← p − lr_t · (m̂ / (√v̂ + ε) + wd · p)`. Frozen parameters are never
/// read or written. Fails without modifying anything if a gradient is
/// non-finite or misshapen.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr_t: f64,
    weight_decay: f64,
) -> Result<()> {
    if let Some(name) = first_non_finite(grads) {
        return Err(TrainError::NonFiniteGradient {
            step: state.t,
            param: name.to_string(),
        });
    }
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        if let Some(g) = grads.get(name) {
            let p = params.value(name)?;
            if g.shape() != p.shape() {
                return Err(TrainError::GradShape {
                    param: name.clone(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for name in names {
        let Some(g) = grads.get(&name) else { continue };
        let p = params.value(&name)?;
        let shape = p.shape().to_vec();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        let mut m_new = Vec::with_capacity(g.len());
        let mut v_new = Vec::with_capacity(g.len());
        let mut p_new = Vec::with_capacity(g.len());
        for (((&gi, &mi), &vi), &pi) in g.data().iter().zip(m.data()).zip(v.data()).zip(p.data()) {
            let mi = BETA1 * mi + (1.0 - BETA1) * gi;
            let vi = BETA2 * vi + (1.0 - BETA2) * gi * gi;
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            p_new.push(pi - lr_t * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * pi));
            m_new.push(mi);
            v_new.push(vi);
        }
        *m = Tensor::new(shape.clone(), m_new)?;
        *v = Tensor::new(shape.clone(), v_new)?;
        params.set(&name, Tensor::new(shape, p_new)?)?;
    }
    Ok(())
}

/// Number of warmup steps: `⌈warmup_fraction · total_steps⌉`.
pub fn warmup_steps(total_steps: u64, warmup_fraction: f64) -> u64 {
    (warmup_fraction * total_steps as f64).ceil() as u64
}

/// Linear ramp from 0 to `base_lr` over the warmup steps, then linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_fraction: f64, base_lr: f64) -> f64 {
    let warm = warmup_steps(total_steps, warmup_fraction).min(total_steps);
    if step < warm {
        base_lr * step as f64 / warm as f64
    } else if step >= total_steps {
        0.0
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::ParamCategory;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v), ParamCategory::Head);
        s.insert("frozen", Tensor::scalar(7.0), ParamCategory::Backbone);
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        [
            ("p".to_string(), Tensor::scalar(v)),
            ("frozen".to_string(), Tensor::scalar(1.0)),
        ]
        .into()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut s = store(0.3);
        let mut st = AdamState::new();
        for _ in 0..5 {
            optimizer_step(&mut s, &grad(0.0), &mut st, 0.1, 0.0).unwrap();
        }
        assert_eq!(s.value("p").unwrap().item(), 0.3);
        assert_eq!(s.value("frozen").unwrap().item(), 7.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(1.0);
        let mut st = AdamState::new();
        optimizer_step(&mut s, &grad(1.0), &mut st, 0.01, 0.0).unwrap();
        let moved = 1.0 - s.value("p").unwrap().item();
        assert!((moved - 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!(!st.m.contains_key("frozen"));
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut s = store(1.0);
        let mut st = AdamState::new();
        let err = optimizer_step(&mut s, &grad(f64::NAN), &mut st, 0.01, 0.0).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { .. }));
        assert_eq!((st.t, s.value("p").unwrap().item()), (0, 1.0));
    }

    /// Independent restatement of the update rule for one scalar.
    struct ScalarAdamW {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdamW {
        fn step(&mut self, p: f64, g: f64, lr: f64, wd: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mh = self.m / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v / (1.0 - 0.999f64.powi(self.t));
            p - lr * (mh / (vh.sqrt() + 1e-8) + wd * p)
        }
    }

    #[test]
    fn quadratic_bowl_trajectory_matches_reference() {
        let centers = [1.5, -2.0, 0.25];
        let curv = [1.0, 3.0, 0.5];
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.0, 0.0, 0.0]), ParamCategory::Head);
        let mut st = AdamState::new();
        let mut refs: Vec<(f64, ScalarAdamW)> = (0..3).map(|_| (0.0, ScalarAdamW { m: 0.0, v: 0.0, t: 0 })).collect();
        for step in 0..100u64 {
            let lr = lr_at(step, 100, 0.1, 0.05);
            let w = s.value("w").unwrap().data().to_vec();
            let g: Vec<f64> = (0..3).map(|i| curv[i] * (w[i] - centers[i])).collect();
            let grads = [("w".to_string(), Tensor::vector(g))].into();
            optimizer_step(&mut s, &grads, &mut st, lr, 0.01).unwrap();
            for (i, (p, r)) in refs.iter_mut().enumerate() {
                *p = r.step(*p, curv[i] * (*p - centers[i]), lr, 0.01);
            }
            for (i, (p, _)) in refs.iter().enumerate() {
                assert!((s.value("w").unwrap().data()[i] - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 100, 0.1, 1.0), 0.0);
        assert_eq!(lr_at(10, 100, 0.1, 1.0), 1.0);
        assert_eq!(lr_at(5, 100, 0.1, 1.0), 0.5);
        // Mid-decay: 1 − (55 − 10) / 90.
        assert_eq!(lr_at(55, 100, 0.1, 2.0), 2.0 * 45.0 / 90.0);
        assert_eq!(lr_at(100, 100, 0.1, 1.0), 0.0);
        assert_eq!(lr_at(0, 10, 0.0, 1.0), 1.0);
        assert_eq!(lr_at(3, 4, 1.0, 1.0), 0.75);
    }
}
