use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self::for_shapes(params.iter())
    }

    pub fn for_shapes<'a>(params: impl Iterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<_> = params.map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::config(format!(
            "adam: {} params, {} grads, {} moment pairs",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::config(format!(
                "adam: shape mismatch at parameter {i} ({} vs grad {})",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let delta = lr * m_hat / (v_hat.sqrt() + eps);
            if delta != T::ZERO {
                *w -= delta;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut [&mut p], &[scalar(1.0)], &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 → step = 0.1 / (1 + 1e-8)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_leaves_param_and_decays_moments() {
        let mut p = scalar(2.0);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        st.m[0] = scalar(0.0);
        st.v[0] = scalar(0.5);
        adam_step(&mut [&mut p], &[scalar(0.0)], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.data()[0], 2.0);
        assert_eq!(st.v[0].data()[0], 0.5 * 0.999);
    }

    #[test]
    fn constant_grad_moves_monotonically_against_sign() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut prev = 0.0;
        for _ in 0..2 {
            adam_step(&mut [&mut p], &[scalar(-3.0)], &mut st, &cfg).unwrap();
            assert!(p.data()[0] > prev);
            prev = p.data()[0];
        }
    }

    #[test]
    fn zero_learning_rate_is_bit_exact_noop() {
        let data: Vec<f32> = (0..12).map(|i| (i as f32 - 5.5) * 0.37).collect();
        let mut p = Tensor::new(Shape::new(1, 3, 2, 2), data.clone()).unwrap();
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let g = Tensor::new(Shape::new(1, 3, 2, 2), vec![0.3; 12]).unwrap();
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, &cfg).unwrap();
        }
        assert_eq!(p.data(), &data[..]);
    }

    #[test]
    fn mismatched_state_rejected() {
        let mut p = scalar(0.0);
        let mut st = AdamState::<f64>::new(&[]);
        assert!(adam_step(&mut [&mut p], &[scalar(1.0)], &mut st, &AdamConfig::default()).is_err());
    }
}
