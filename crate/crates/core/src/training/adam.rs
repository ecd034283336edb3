use crate::error::{ensure, Result};
use crate::model::ModelParams;

use super::config::TrainConfig;

/// Moment accumulators shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.is_finite() && self.v.is_finite()
    }
}

fn same_shape(a: &ModelParams, b: &ModelParams) -> bool {
    a.dims == b.dims && a.full_tensor.is_some() == b.full_tensor.is_some()
}

/// One bias-corrected Adam update. Image-embedding groups move at `lr_img`,
/// or not at all (moments included) when `freeze_image` is set; every other
/// group moves at `lr_lm`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
    freeze_image: bool,
) -> Result<()> {
    ensure!(
        same_shape(params, grads) && same_shape(params, &state.m) && same_shape(params, &state.v),
        "parameter, gradient and optimizer shapes differ"
    );
    state.step += 1;
    let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for group in params.groups() {
        let lr = if group.is_image_embedding() {
            if freeze_image {
                continue;
            }
            config.lr_img
        } else {
            config.lr_lm
        };
        let g = grads.slice(group);
        let m = state.m.slice_mut(group);
        let v = state.v.slice_mut(group);
        let p = params.slice_mut(group);
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
