use serde::{Deserialize, Serialize};

use super::{Parameter, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Betas used throughout training and latent search.
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Parameter<T>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.tensor.numel()], vec![T::zero(); p.tensor.numel()]))
            .unzip();
        Self { step: 0, m, v }
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to `params[i]`; a
/// missing gradient is treated as zero.
pub fn adam_step<T: Real>(
    params: &mut [&mut Parameter<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name())));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::c(cfg.lr), T::c(cfg.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_ref().map(|g| g.data());
        for j in 0..m.len() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let w = &mut p.tensor.data_mut()[j];
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Parameter::new("w", Tensor::new([2], vec![1.0f64, -2.0]).unwrap());
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig::with_lr(0.1);
        let before = p.tensor.clone();
        st.m[0] = vec![0.0, 0.0];
        adam_step(&mut [&mut p], &[Some(Tensor::zeros([2]))], &mut st, &cfg).unwrap();
        assert_eq!(p.tensor, before);
        assert_eq!(st.step, 1);

        st.m[0] = vec![1.0, 1.0];
        st.v[0] = vec![1.0, 1.0];
        adam_step(&mut [&mut p], &[Some(Tensor::zeros([2]))], &mut st, &cfg).unwrap();
        assert!((st.m[0][0] - 0.9).abs() < 1e-15);
        assert!((st.v[0][0] - 0.998).abs() < 1e-15);
    }

    #[test]
    fn one_step_on_square_decreases_w() {
        let mut p = Parameter::new("w", Tensor::scalar(1.0f64));
        let mut st = AdamState::new([&p]);
        let g = Tensor::scalar(2.0);
        adam_step(&mut [&mut p], &[Some(g)], &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        assert!(p.tensor.data()[0] < 1.0);
    }

    #[test]
    fn converges_on_two_dim_quadratic() {
        // f(w) = (w0 - 3)^2 + 10 (w1 + 1)^2, optimum (3, -1)
        let mut p = Parameter::new("w", Tensor::new([2], vec![0.0f64, 0.0]).unwrap());
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..200 {
            let w = p.tensor.data().to_vec();
            let g = vec![2.0 * (w[0] - 3.0), 20.0 * (w[1] + 1.0)];
            let g = Tensor::new([2], g).unwrap();
            adam_step(&mut [&mut p], &[Some(g)], &mut st, &cfg).unwrap();
        }
        let w = p.tensor.data();
        let dist = ((w[0] - 3.0).powi(2) + (w[1] + 1.0).powi(2)).sqrt();
        assert!(dist < 1e-3, "distance to optimum {dist}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Parameter::new("epn.head.w", Tensor::scalar(1.0f64));
        let mut st = AdamState::new([&p]);
        let err = adam_step(
            &mut [&mut p],
            &[Some(Tensor::scalar(f64::NAN))],
            &mut st,
            &AdamConfig::with_lr(0.1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("epn.head.w"));
    }
}
