//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;
use crate::numerics::tape::Gradients;
use crate::numerics::tensor::Tensor;

/// Adam hyperparameters. Defaults: lr 1e-4, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, ..Default::default() }
    }
}

/// First/second moment accumulators, one pair per parameter entry.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zero-initialized moments mirroring the parameter shapes.
    pub fn new(params: &ParamSet) -> Self {
        let m = params.entries().iter().map(|e| Tensor::zeros(e.tensor.rows(), e.tensor.cols())).collect::<Vec<_>>();
        let v = m.clone();
        AdamState { step: 0, m, v }
    }

    pub fn first_moment(&self, id: usize) -> &Tensor {
        &self.m[id]
    }

    pub fn second_moment(&self, id: usize) -> &Tensor {
        &self.v[id]
    }
}

/// One bias-corrected Adam step over all trainable entries.
///
/// Entries with no gradient in `grads` are treated as having zero gradient
/// (their moments decay). Non-trainable entries are never touched.
pub fn adam_update(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::dim(
            "adam_update",
            format!("state has {} entries, params {}", state.m.len(), params.len()),
        ));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for id in 0..params.len() {
        if !params.entries()[id].trainable {
            continue;
        }
        if let Some(g) = grads.get(id) {
            if g.shape() != params.tensor(id).shape() {
                return Err(Error::dim(
                    "adam_update",
                    format!("grad {:?} vs param {:?}", g.shape(), params.tensor(id).shape()),
                ));
            }
        }
        let zero;
        let g = match grads.get(id) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(params.tensor(id).rows(), params.tensor(id).cols());
                &zero
            }
        };
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let p = params.tensor_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    fn grads_for(values: &[(usize, Tensor)], n: usize) -> Gradients {
        // Build a Gradients through a tiny tape so the slot plumbing is the
        // same one the trainer uses.
        let mut tape = Tape::new();
        let mut acc = None;
        for (slot, g) in values {
            let leaf = tape.param(g.clone(), *slot).unwrap();
            let prod = tape.hadamard(leaf, leaf).unwrap();
            let half = tape.scale(prod, 0.5).unwrap();
            let s = tape.sum_all(half).unwrap();
            acc = Some(match acc {
                None => s,
                Some(prev) => tape.add(prev, s).unwrap(),
            });
        }
        // d/dx of sum(x^2)/2 = x, so each slot's gradient equals its value.
        tape.backward(acc.unwrap(), n).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments_untouched() {
        let mut params = ParamSet::new();
        params.push("g", "w", Tensor::row(&[1.5, -2.0]));
        let mut state = AdamState::new(&params);
        let grads = grads_for(&[(0, Tensor::row(&[0.0, 0.0]))], 1);
        adam_update(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(params.tensor(0).data(), &[1.5, -2.0]);
        assert_eq!(state.first_moment(0).data(), &[0.0, 0.0]);
        assert_eq!(state.second_moment(0).data(), &[0.0, 0.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_magnitude_approaches_lr() {
        // theta = 0, g = 1, lr = 1e-4: update = -lr * 1/(1 + eps)
        let mut params = ParamSet::new();
        params.push("g", "w", Tensor::row(&[0.0]));
        let mut state = AdamState::new(&params);
        let grads = grads_for(&[(0, Tensor::row(&[1.0]))], 1);
        adam_update(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap();
        let got = params.tensor(0).data()[0];
        let expect = -1e-4 / (1.0 + 1e-8);
        assert!((got - expect).abs() < 1e-18, "got {}", got);
        assert!((got + 9.9999e-5).abs() < 1e-8);
    }

    #[test]
    fn matches_scalar_recurrence_over_steps() {
        let hyper = AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let g = 0.37;
        let mut params = ParamSet::new();
        params.push("g", "w", Tensor::row(&[1.0]));
        let mut state = AdamState::new(&params);

        // Independent scalar recurrence.
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5u32 {
            let grads = grads_for(&[(0, Tensor::row(&[g]))], 1);
            adam_update(&mut params, &grads, &mut state, &hyper).unwrap();

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = v / (1.0 - 0.999f64.powi(t as i32));
            theta -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!(
                (params.tensor(0).data()[0] - theta).abs() < 1e-15,
                "step {}: {} vs {}",
                t,
                params.tensor(0).data()[0],
                theta
            );
        }
    }

    #[test]
    fn step_count_strictly_increases() {
        let mut params = ParamSet::new();
        params.push("g", "w", Tensor::row(&[1.0]));
        let mut state = AdamState::new(&params);
        for expect in 1..=3 {
            let grads = grads_for(&[(0, Tensor::row(&[0.1]))], 1);
            adam_update(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap();
            assert_eq!(state.step, expect);
        }
    }
}
