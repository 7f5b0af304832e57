use serde::{Deserialize, Serialize};

use super::{Gradients, MlpModel, NeuralError, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Gradients<T>,
    pub second_moment: Gradients<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &MlpModel<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Gradients::zeros_like(model),
            second_moment: Gradients::zeros_like(model),
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<T: Real>(
    model: &mut MlpModel<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<(), NeuralError> {
    if grads.weights.len() != model.layers.len() || state.first_moment.weights.len() != model.layers.len() {
        return Err(NeuralError::ShapeMismatch(
            "optimizer state does not match model".into(),
        ));
    }
    for (i, layer) in model.layers.iter().enumerate() {
        if grads.weights[i].len() != layer.weights.len() || grads.biases[i].len() != layer.biases.len() {
            return Err(NeuralError::ShapeMismatch(format!("gradient shape for layer {i}")));
        }
        if !grads.weights[i].iter().chain(&grads.biases[i]).all(|g| g.is_finite()) {
            return Err(NeuralError::NonFiniteGradient { layer: i });
        }
    }

    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let one_minus_b1 = T::from_f64(1.0 - c.beta1);
    let one_minus_b2 = T::from_f64(1.0 - c.beta2);
    let bias1 = T::from_f64(1.0 - c.beta1.powi(t));
    let bias2 = T::from_f64(1.0 - c.beta2.powi(t));
    let lr = T::from_f64(c.learning_rate);
    let eps = T::from_f64(c.epsilon);

    let update = |params: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
        for (((p, &g), m), v) in params.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_minus_b1 * g;
            *v = b2 * *v + one_minus_b2 * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    };
    for (i, layer) in model.layers.iter_mut().enumerate() {
        update(
            &mut layer.weights,
            &grads.weights[i],
            &mut state.first_moment.weights[i],
            &mut state.second_moment.weights[i],
        );
        update(
            &mut layer.biases,
            &grads.biases[i],
            &mut state.first_moment.biases[i],
            &mut state.second_moment.biases[i],
        );
    }
    Ok(())
}
