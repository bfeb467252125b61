use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
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

/// First and second moment estimates, one pair per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} params, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if store.iter().any(|p| p.trainable && !p.grad.is_finite()) {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(&[1.0, -2.0, 0.5]), true);
        store.params_mut()[0].grad = Tensor::row_vector(&[3.0, -0.25, 1e-3]);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        let w = store.value(id).data();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        for (got, (start, g)) in w.iter().zip([(1.0, 3.0f64), (-2.0, -0.25), (0.5, 1e-3)]) {
            let expected = start - 0.1 * g / ((g * g).sqrt() + 1e-8);
            assert!((got - expected).abs() < 1e-15);
            assert!(((start - got) / 0.1 - f64::signum(g)).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(&[1.0, 2.0]), true);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn quadratic_descends_below_tenth() {
        // Scalar simulation of f(w) = w²: every step feeds g = 2w.
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0), true);
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..100 {
            let w = store.value(id).item();
            store.params_mut()[0].grad = Tensor::scalar(2.0 * w);
            adam_step(&mut store, &mut st, &cfg).unwrap();
        }
        assert!(store.value(id).item().abs() < 0.1);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0), true);
        store.params_mut()[0].grad = Tensor::scalar(f64::NAN);
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut store, &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(store.value(id).item(), 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0), false);
        store.params_mut()[0].grad = Tensor::scalar(5.0);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, &AdamConfig::with_lr(0.5)).unwrap();
        assert_eq!(store.value(id).item(), 1.0);
    }
}
