//! Adam with decoupled weight decay.

use std::collections::HashMap;

use liteflow_tensor::{ParamId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-4,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u32,
}

/// Optimizer state; moments are created lazily so parameters that join
/// training late start from step one.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    /// Updates every trainable parameter from its gradient:
    /// `p ← p − lr·(m̂ / (√v̂ + eps) + wd·p)`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable {
                if let Some(i) = p.grad.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                        index: i,
                        value: p.grad.data()[i],
                    });
                }
            }
        }
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((x, &gr), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gr;
                *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *x -= lr * (update + weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_scalar(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = one_scalar(1.25);
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..3 {
            opt.step(&mut s, 1e-3).unwrap();
        }
        assert_eq!(s.get(id).value.data()[0], 1.25);
    }

    #[test]
    fn decay_alone_is_geometric() {
        let (mut s, id) = one_scalar(2.0);
        let mut opt = Adam::new(AdamConfig::default());
        let lr = 0.1;
        for _ in 0..4 {
            opt.step(&mut s, lr).unwrap();
        }
        let want = 2.0 * (1.0 - lr * 4e-4f64).powi(4);
        assert!((s.get(id).value.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let (mut s, id) = one_scalar(1.0);
        s.get_mut(id).grad.data_mut()[0] = 3.0;
        s.set_trainable(|_| false);
        Adam::new(AdamConfig::default()).step(&mut s, 0.5).unwrap();
        assert_eq!(s.get(id).value.data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_aborts() {
        let (mut s, id) = one_scalar(1.0);
        s.get_mut(id).grad.data_mut()[0] = f64::NAN;
        let err = Adam::new(AdamConfig::default()).step(&mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 0, .. }), "{err}");
        assert_eq!(s.get(id).value.data()[0], 1.0);
    }
}
