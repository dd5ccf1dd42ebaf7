//! AdamW with decoupled weight decay, plus the linear warmup/decay schedule.

use std::collections::BTreeMap;

use crate::error::{LdError, Result};
use crate::graph::GradientMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub step: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

/// One decoupled-weight-decay Adam update with bias correction. Parameters
/// without a gradient entry are treated as zero-gradient (weight decay still
/// applies through the update rule only where a gradient exists).
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &GradientMap,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);

    for (name, param) in params.iter_mut() {
        let zero;
        let grad = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros_like(param);
                &zero
            }
        };
        if !grad.all_finite() {
            return Err(LdError::NonFinite {
                what: format!("gradient of parameter '{name}'"),
            });
        }
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(param));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(param));
        if m.shape() != param.shape() || v.shape() != param.shape() {
            return Err(LdError::ShapeMismatch {
                op: "adamw_step",
                lhs: param.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let pd = param.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * g;
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup_frac` of steps to `peak_lr`, then
/// linear decay to 0 at `total_steps`.
pub fn lr_schedule_with(step: u64, total_steps: u64, peak_lr: f64, warmup_frac: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(LdError::InvalidArgument(
            "total_steps must be positive".into(),
        ));
    }
    let warmup = warmup_frac * total_steps as f64;
    let s = step as f64;
    let lr = if s <= warmup {
        peak_lr * s / warmup
    } else {
        peak_lr * (total_steps as f64 - s) / (total_steps as f64 - warmup)
    };
    Ok(lr.max(0.0))
}

/// Default schedule: warmup over the first 10% of steps.
pub fn lr_schedule(step: u64, total_steps: u64, peak_lr: f64) -> Result<f64> {
    lr_schedule_with(step, total_steps, peak_lr, 0.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GradientMap;

    fn single_param(v: f64) -> BTreeMap<String, Tensor> {
        let mut p = BTreeMap::new();
        p.insert("p".to_string(), Tensor::vector(vec![v]));
        p
    }

    fn single_grad(g: f64) -> GradientMap {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::vector(vec![g]));
        GradientMap(m)
    }

    #[test]
    fn zero_lr_leaves_params_but_updates_moments() {
        let mut params = single_param(1.0);
        let mut state = AdamWState::default();
        let hyper = AdamWHyper {
            lr: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut params, &single_grad(1.0), &mut state, &hyper).unwrap();
        assert_eq!(params["p"].data()[0], 1.0);
        assert_eq!(state.step, 1);
        assert!(state.first_moment["p"].data()[0] != 0.0);
    }

    #[test]
    fn zero_grad_zero_decay_is_stationary() {
        let mut params = single_param(2.5);
        let mut state = AdamWState::default();
        let hyper = AdamWHyper {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut params, &single_grad(0.0), &mut state, &hyper).unwrap();
        assert_eq!(params["p"].data()[0], 2.5);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // p=1, grad=1, lr=0.1, wd=0, betas=(0.9,0.98), eps=1e-8:
        // m_hat = v_hat = 1 after bias correction, so p ← 1 − 0.1/(1+1e-8).
        let mut params = single_param(1.0);
        let mut state = AdamWState::default();
        let hyper = AdamWHyper {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut params, &single_grad(1.0), &mut state, &hyper).unwrap();
        assert!((params["p"].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut params = single_param(1.0);
        let mut state = AdamWState::default();
        let err = adamw_step(
            &mut params,
            &single_grad(f64::NAN),
            &mut state,
            &AdamWHyper::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("'p'"));
    }

    #[test]
    fn schedule_endpoints_and_peak() {
        assert_eq!(lr_schedule(0, 1000, 0.5).unwrap(), 0.0);
        assert!((lr_schedule(100, 1000, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(lr_schedule(1000, 1000, 0.5).unwrap(), 0.0);
        assert!(lr_schedule(0, 0, 0.5).is_err());
    }
}
