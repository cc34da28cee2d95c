//! Adam with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient, applied as `θ -= lr·wd·θ`.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments aligned with a [`ParamStore`]; entries for
/// frozen parameters stay `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let moments: Vec<Option<Tensor>> = store
            .iter()
            .map(|(_, t, tr)| tr.then(|| Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            m: moments.clone(),
            v: moments,
        }
    }
}

/// Outcome of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Applies one Adam update in place. Trainable parameters with no gradient
/// are treated as having a zero gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepInfo> {
    if state.m.len() != store.len() || grads.len() != store.len() {
        return Err(Error::Index("optimizer state does not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    let grad_norm = grads.global_norm();
    let scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let i = id.index();
        let (Some(m), Some(v)) = (state.m[i].as_mut(), state.v[i].as_mut()) else {
            return Err(Error::Index(format!(
                "no optimizer moments for trainable {}",
                store.name(id)
            )));
        };
        let g = grads.get(id);
        let p = store.get_mut(id);
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for k in 0..pd.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]) * scale;
            md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * gk;
            vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * gk * gk;
            let update = (md[k] / bc1) / ((vd[k] / bc2).sqrt() + cfg.eps);
            pd[k] -= cfg.lr * (update + cfg.weight_decay * pd[k]);
        }
    }
    Ok(StepInfo {
        grad_norm,
        clipped: scale < 1.0,
    })
}
