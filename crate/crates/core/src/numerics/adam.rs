use super::{NumericsError, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(NumericsError::ParamCount {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bias1 = 1.0 - beta1.powi(state.step as i32);
    let bias2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &grad), (m, v)) in it {
            *m = beta1 * *m + (1.0 - beta1) * grad;
            *v = beta2 * *v + (1.0 - beta2) * grad * grad;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        for _ in 0..10 {
            adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state, DEFAULT_LEARNING_RATE).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = -lr / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let mut last = 0.0;
        let mut prev = 0.0;
        for _ in 0..5000 {
            adam_step(&mut params, &[Tensor::scalar(0.5)], &mut state, 1e-3).unwrap();
            last = params[0].item() - prev;
            prev = params[0].item();
        }
        // Fixed point: m̂ → g, v̂ → g², so each step → -lr·g/|g|.
        assert!((last + 1e-3).abs() < 1e-9, "step {last}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state, 1e-3).unwrap_err();
        assert!(matches!(err, NumericsError::ShapeMismatch { .. }));
    }
}
