use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tape::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam optimizer state: a step counter plus first/second moments per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<(u64, usize), Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update of one flat parameter buffer.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::shape("adam_update", &[param.len()], &[grad.len()]));
    }
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = cfg.lr as f64 * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps as f64);
        param[i] = (param[i] as f64 - update) as f32;
    }
    Ok(())
}

/// One optimizer step over every trainable parameter of `stores` that has a
/// gradient. The step counter advances by exactly one per call.
pub fn adam_step(stores: &mut [&mut ParamStore], grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !(state.config.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", state.config.lr)));
    }
    state.step += 1;
    let step = state.step;
    let cfg = state.config;
    for store in stores.iter_mut() {
        let uid = store.uid();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.param(store, id) else { continue };
            let g = g.to_vec();
            let n = g.len();
            let mom = state.moments.entry((uid, id.0)).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            adam_update(store.get_mut(id).data_mut(), &g, &mut mom.m, &mut mom.v, step, &cfg)?;
        }
    }
    Ok(())
}
