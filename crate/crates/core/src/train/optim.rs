use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::vit::{ParamKind, ViTParams};

/// Step count and first/second moments, one vector per parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ViTParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.arrays().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn check_matches(&self, params: &ViTParams<f32>) -> Result<()> {
        let arrays = params.arrays();
        let ok = self.m.len() == arrays.len()
            && self.v.len() == arrays.len()
            && arrays.iter().zip(self.m.iter().zip(&self.v)).all(|(t, (m, v))| m.len() == t.len() && v.len() == t.len());
        if ok {
            Ok(())
        } else {
            Err(Error::shape("optimizer moments do not match the parameter arrays"))
        }
    }
}

/// Learning rate for zero-based epoch `epoch` under the stepped schedule.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = (epoch / cfg.step_epochs.max(1)) as i32;
    cfg.lr0 * cfg.gamma.powi(drops)
}

/// One bias-corrected Adam update.
///
/// Weight matrices get `2 * l2_lambda * w` added to their gradient first;
/// every other array is left undecayed.
pub fn adam_step(params: &mut ViTParams<f32>, grads: &[Vec<f32>], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    state.check_matches(params)?;
    let kinds = params.kinds();
    let mut arrays = params.arrays_mut();
    if grads.len() != arrays.len() || grads.iter().zip(&arrays).any(|(g, t)| g.len() != t.len()) {
        return Err(Error::shape("gradients do not match the parameter arrays"));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, w) in arrays.iter_mut().enumerate() {
        let decay = if kinds[i] == ParamKind::Matrix { 2.0 * cfg.l2_lambda } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, wj) in w.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] as f64 + decay * *wj as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps);
            *wj = (*wj as f64 - update) as f32;
        }
    }
    Ok(())
}
