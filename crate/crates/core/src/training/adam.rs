use crate::error::{contract, Result};
use crate::layers::ParamStore;
use crate::tensor::Real;

/// First/second moment buffers shaped like the parameters, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|p| vec![T::ZERO; p.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update. Consumes the gradients; every parameter must have one.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: Vec<Option<Vec<T>>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(contract(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    if let Some(i) = grads.iter().position(Option::is_none) {
        let name = params.name(params.ids().nth(i).expect("index in range"));
        return Err(contract("adam_step", format!("missing gradient for {name}")));
    }
    state.t += 1;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let bc1 = T::of(1.0 - state.beta1.powi(state.t as i32));
    let bc2 = T::of(1.0 - state.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(lr), T::of(state.eps));
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let g = g.expect("checked above");
        if g.len() != p.numel() {
            return Err(contract("adam_step", "gradient length differs from parameter"));
        }
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::ONE - b1) * gi;
            *vi = b2 * *vi + (T::ONE - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = scalar_store(0.7);
        let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
        st.m[0][0] = 0.5;
        st.v[0][0] = 0.25;
        adam_step(&mut ps, vec![Some(vec![0.0])], &mut st, 0.0).unwrap();
        assert_eq!(ps.tensors()[0].data(), &[0.7]);
        assert_eq!(st.m[0][0], 0.45);
        assert!(st.v[0][0] < 0.25);
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        let (g, lr) = (0.3f64, 0.01);
        let mut ps = scalar_store(1.0);
        let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
        adam_step(&mut ps, vec![Some(vec![g])], &mut st, lr).unwrap();
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let expected = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((ps.tensors()[0].data()[0] - expected).abs() < 1e-12);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut ps = scalar_store(1.0);
        let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
        for _ in 0..200 {
            let w = ps.tensors()[0].data()[0];
            adam_step(&mut ps, vec![Some(vec![2.0 * w])], &mut st, 0.1).unwrap();
        }
        assert!(ps.tensors()[0].data()[0].abs() < 1e-2);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut ps = scalar_store(1.0);
        let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
        assert!(adam_step(&mut ps, vec![None], &mut st, 0.1).is_err());
        assert_eq!(st.t, 0);
    }
}
