//! Adam with bias correction. Moment buffers share the model's scalar type
//! so a checkpoint round-trip resumes bit-exactly.

use super::model::VgnModel;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<S> {
    /// First and second moments, flattened in layer order (weights then
    /// bias per layer), matching the checkpoint blob layout.
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(param_count: usize) -> AdamState<S> {
        AdamState {
            m: vec![S::ZERO; param_count],
            v: vec![S::ZERO; param_count],
            step: 0,
        }
    }

    /// Apply one update from the gradients accumulated in the model.
    pub fn step(&mut self, model: &mut VgnModel<S>, params: &AdamParams) -> Result<()> {
        if self.m.len() != model.param_count() {
            return Err(Error::ShapeMismatch {
                expected: vec![model.param_count()],
                got: vec![self.m.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - params.beta1.powi(t);
        let bc2 = 1.0 - params.beta2.powi(t);
        let mut offset = 0usize;
        for (_, layer) in model.layers_mut() {
            for (param, grad) in layer
                .weight
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .zip(layer.grad_weight.iter().chain(layer.grad_bias.iter()))
            {
                let g = grad.to_f64();
                let m = params.beta1 * self.m[offset].to_f64() + (1.0 - params.beta1) * g;
                let v = params.beta2 * self.v[offset].to_f64() + (1.0 - params.beta2) * g * g;
                self.m[offset] = S::from_f64(m);
                self.v[offset] = S::from_f64(v);
                let update = params.lr * (m / bc1) / ((v / bc2).sqrt() + params.eps);
                *param -= S::from_f64(update);
                offset += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference scalar Adam, written independently of the vector loop.
    struct ScalarAdam {
        m: f64,
        v: f64,
    }

    impl ScalarAdam {
        fn update(&mut self, x: f64, g: f64, t: i32, p: &AdamParams) -> f64 {
            self.m = p.beta1 * self.m + (1.0 - p.beta1) * g;
            self.v = p.beta2 * self.v + (1.0 - p.beta2) * g * g;
            let mhat = self.m / (1.0 - p.beta1.powi(t));
            let vhat = self.v / (1.0 - p.beta2.powi(t));
            x - p.lr * mhat / (vhat.sqrt() + p.eps)
        }
    }

    #[test]
    fn matches_a_scalar_reference_over_several_steps() {
        let params = AdamParams::default();
        let mut model: VgnModel<f64> = VgnModel::init(1);
        let mut state = AdamState::new(model.param_count());
        let probe = 1234usize;
        let mut reference = ScalarAdam { m: 0.0, v: 0.0 };
        let mut expected = model.enc2.weight[probe - 0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // enc2's weight block starts after all of enc1's parameters.
        let enc1_len = model.enc1.weight.len() + model.enc1.bias.len();
        for t in 1..=5 {
            for (_, layer) in model.layers_mut() {
                for g in layer.grad_weight.iter_mut().chain(layer.grad_bias.iter_mut()) {
                    *g = rng.random_range(-1.0..1.0);
                }
            }
            let g = model.enc2.grad_weight[probe];
            expected = reference.update(expected, g, t, &params);
            state.step(&mut model, &params).unwrap();
            assert_eq!(state.step, t as u64);
            assert!(
                (model.enc2.weight[probe] - expected).abs() < 1e-15,
                "step {t}: {} vs {expected}",
                model.enc2.weight[probe]
            );
            let m_flat = state.m[enc1_len + probe];
            assert!((m_flat - reference.m).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_against_the_gradient_by_roughly_lr() {
        let params = AdamParams::default();
        let mut model: VgnModel<f64> = VgnModel::init(2);
        let mut state = AdamState::new(model.param_count());
        let before = model.enc1.weight[0];
        for (_, layer) in model.layers_mut() {
            for g in layer.grad_weight.iter_mut().chain(layer.grad_bias.iter_mut()) {
                *g = 0.5;
            }
        }
        state.step(&mut model, &params).unwrap();
        let delta = before - model.enc1.weight[0];
        // With bias correction, the very first update is lr * g / (|g| + eps).
        assert!((delta - params.lr).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn wrong_state_size_is_rejected() {
        let mut model: VgnModel<f64> = VgnModel::init(3);
        let mut state: AdamState<f64> = AdamState::new(10);
        assert!(state.step(&mut model, &AdamParams::default()).is_err());
    }
}
