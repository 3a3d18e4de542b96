use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.006,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter is touched.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!("{} grads for {} params", grads.len(), store.len()),
        });
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "{}: {:?} vs {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                ),
            });
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient {
                param: store.name(id).to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.tensors_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = store_with(vec![1.0, -2.0]);
        let mut st = AdamState::new(&store);
        st.m[0] = Tensor::vector(vec![0.5, 0.5]);
        st.v[0] = Tensor::vector(vec![0.25, 0.25]);
        st.step = 3;
        let before = store.clone();
        // With nonzero moments the update is nonzero; isolate the moment decay.
        let mut cfg = AdamConfig::default();
        cfg.lr = 0.0;
        adam_step(&mut store, &[Tensor::zeros(&[2])], &mut st, &cfg).unwrap();
        assert_eq!(store, before);
        assert!((st.m[0].data()[0] - 0.45).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.25 * 0.999).abs() < 1e-15);
        assert_eq!(st.step, 4);

        let mut fresh = store_with(vec![1.0, -2.0]);
        let mut st = AdamState::new(&fresh);
        adam_step(
            &mut fresh,
            &[Tensor::zeros(&[2])],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(fresh.tensors()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut store = store_with(vec![0.0]);
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig::default();
        let g = [Tensor::vector(vec![0.3])];
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut store, &g, &mut st, &cfg).unwrap();
            let w = store.tensors()[0].data()[0];
            last_step = prev - w;
            prev = w;
        }
        assert!((last_step - cfg.lr).abs() < 1e-6, "step {last_step}");
    }

    #[test]
    fn single_step_matches_closed_form() {
        // Hand-computed: m=0.2, v=0.01, t=2 before the step; g=0.5.
        let mut store = store_with(vec![1.0]);
        let mut st = AdamState::new(&store);
        st.m[0] = Tensor::vector(vec![0.2]);
        st.v[0] = Tensor::vector(vec![0.01]);
        st.step = 2;
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut store, &[Tensor::vector(vec![0.5])], &mut st, &cfg).unwrap();
        let m: f64 = 0.9 * 0.2 + 0.1 * 0.5; // 0.23
        let v: f64 = 0.999 * 0.01 + 0.001 * 0.25; // 0.01024
        let mhat = m / (1.0 - 0.9f64.powi(3));
        let vhat = v / (1.0 - 0.999f64.powi(3));
        let expect = 1.0 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((store.tensors()[0].data()[0] - expect).abs() < 1e-14);
        assert!((expect - 0.954_085_3).abs() < 1e-6, "closed form {expect}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = store_with(vec![1.0]);
        let mut st = AdamState::new(&store);
        let err = adam_step(
            &mut store,
            &[Tensor::vector(vec![f64::NAN])],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { ref param } if param == "w"));
        assert_eq!(st.step, 0);
        assert_eq!(store.tensors()[0].data(), &[1.0]);
    }
}
