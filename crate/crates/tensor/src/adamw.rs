use crate::{Real, Result, Tensor, TensorError};
use std::collections::BTreeMap;

/// AdamW hyperparameters. Learning rate and weight decay come from the
/// experiment configuration; the moment coefficients are the usual defaults.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamWState<R: Real> {
    pub m: BTreeMap<String, Vec<R>>,
    pub v: BTreeMap<String, Vec<R>>,
    pub t: u64,
}

impl<R: Real> AdamWState<R> {
    pub fn new() -> Self {
        AdamWState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// One AdamW update over the given named parameters:
    /// `p <- p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
    /// Decay is decoupled (applied to the parameter, never to the gradient).
    /// Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        cfg: &AdamWConfig,
        params: &mut [(String, &mut Tensor<R>)],
        grads: &BTreeMap<String, Vec<R>>,
    ) -> Result<()> {
        self.t += 1;
        let lr = R::from_f64(cfg.lr);
        let wd_factor = R::from_f64(1.0 - cfg.lr * cfg.weight_decay);
        let b1 = R::from_f64(cfg.beta1);
        let b2 = R::from_f64(cfg.beta2);
        let eps = R::from_f64(cfg.eps);
        let bias1 = R::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let bias2 = R::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let one = R::one();

        for (name, tensor) in params.iter_mut() {
            let grad = match grads.get(name.as_str()) {
                Some(g) => g,
                None => continue,
            };
            if grad.len() != tensor.numel() {
                return Err(TensorError::StateShapeMismatch(name.clone()));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TensorError::NonFiniteGrad(name.clone()));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![R::zero(); grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![R::zero(); grad.len()]);
            if m.len() != grad.len() || v.len() != grad.len() {
                return Err(TensorError::StateShapeMismatch(name.clone()));
            }
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] = data[i] * wd_factor - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn zero_grad_applies_decoupled_decay_only() {
        let mut p = one_param(1.0);
        let mut state = AdamWState::new();
        let cfg = AdamWConfig::new(0.1, 0.01);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        state
            .step(&cfg, &mut [("w".to_string(), &mut p)], &grads)
            .unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn first_step_bias_correction_gives_lr_sized_update() {
        // grad = 1: m_hat = 1, v_hat = 1 => update ~ -lr
        let mut p = one_param(0.0);
        let mut state = AdamWState::new();
        let cfg = AdamWConfig::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        state
            .step(&cfg, &mut [("w".to_string(), &mut p)], &grads)
            .unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8, "got {}", p.data()[0]);
    }

    #[test]
    fn identical_params_identical_trajectories() {
        let mut pa = one_param(0.5);
        let mut pb = one_param(0.5);
        let mut sa = AdamWState::new();
        let mut sb = AdamWState::new();
        let cfg = AdamWConfig::new(0.05, 0.01);
        for step in 0..20 {
            let g = (step as f64 * 0.37).sin();
            let mut ga = BTreeMap::new();
            ga.insert("w".to_string(), vec![g]);
            sa.step(&cfg, &mut [("w".to_string(), &mut pa)], &ga).unwrap();
            sb.step(&cfg, &mut [("w".to_string(), &mut pb)], &ga).unwrap();
            assert_eq!(pa.data()[0].to_bits(), pb.data()[0].to_bits());
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one_param(1.0);
        let mut state = AdamWState::new();
        let cfg = AdamWConfig::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("layer.weight".to_string(), vec![f64::NAN]);
        let err = state
            .step(&cfg, &mut [("layer.weight".to_string(), &mut p)], &grads)
            .unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }
}
