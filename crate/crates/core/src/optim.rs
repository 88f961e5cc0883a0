//! Adam with bias correction, one state per parameter tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Number of steps taken.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Result<Self> {
        Ok(Self {
            m: Tensor::zeros(shape)?,
            v: Tensor::zeros(shape)?,
            t: 0,
        })
    }
}

/// One Adam update of `param` in place.
///
/// Moments are kept in `T`; the bias corrections are evaluated in `f64`.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    param.expect_same_shape(grad)?;
    param.expect_same_shape(&state.m)?;
    param.expect_same_shape(&state.v)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (a1, a2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1t * *m + a1 * g;
        *v = b2t * *v + a2 * g * g;
        let m_hat = m.as_f64() * c1;
        let v_hat = v.as_f64() * c2;
        *w = T::from_f64(w.as_f64() - cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_is_sign_of_gradient() {
        let cfg = AdamConfig::default();
        for g in [3.7, -0.002, 1e3] {
            let mut w = scalar(1.0);
            let mut st = AdamState::new(&[1]).unwrap();
            adam_step(&mut w, &scalar(g), &mut st, &cfg).unwrap();
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.epsilon);
            assert!((w[0] - expected).abs() < 1e-15);
            assert!(((w[0] - 1.0).abs() - cfg.lr).abs() < 1e-8);
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn zero_gradient_keeps_parameter() {
        let cfg = AdamConfig::default();
        let mut w = scalar(0.42);
        let mut st = AdamState::new(&[1]).unwrap();
        for _ in 0..50 {
            adam_step(&mut w, &scalar(0.0), &mut st, &cfg).unwrap();
        }
        assert_eq!(w[0], 0.42);
        assert_eq!(st.m[0], 0.0);
        assert_eq!(st.v[0], 0.0);
        assert_eq!(st.t, 50);
    }

    #[test]
    fn quadratic_matches_scalar_recurrence() {
        // Independent scalar reimplementation of the Adam recurrence.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let (mut w_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut w = scalar(0.0);
        let mut st = AdamState::new(&[1]).unwrap();
        let mut dist = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * (w_ref - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w_ref -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let grad = scalar(2.0 * (w[0] - 3.0));
            adam_step(&mut w, &grad, &mut st, &cfg).unwrap();
            assert!((w[0] - w_ref).abs() < 1e-12, "step {t}: {} vs {w_ref}", w[0]);
            dist.push((w[0] - 3.0).abs());
        }
        assert!(dist[99] < 3.0);
        // decreasing over the first stretch, before momentum overshoot
        assert!(dist[..20].windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn shape_mismatch() {
        let mut w = Tensor::<f32>::zeros(&[2]).unwrap();
        let mut st = AdamState::new(&[2]).unwrap();
        let g = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(matches!(
            adam_step(&mut w, &g, &mut st, &AdamConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn update_magnitude_bound() {
        let cfg = AdamConfig::default();
        let bound = cfg.lr / (1.0 - cfg.beta1);
        let mut rng = Rng::new(77);
        let mut w = Tensor::<f64>::zeros(&[64]).unwrap();
        let mut st = AdamState::new(&[64]).unwrap();
        for _ in 0..300 {
            let scale = 10f64.powf(rng.normal(0.0, 2.0));
            let g = Tensor::<f64>::fill_normal(&[64], 0.0, scale, &mut rng).unwrap();
            let before = w.clone();
            adam_step(&mut w, &g, &mut st, &cfg).unwrap();
            assert!(w.max_abs_diff(&before).unwrap() <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn disjoint_tensors_are_order_independent() {
        let cfg = AdamConfig::default();
        let mut rng = Rng::new(5);
        let ga = Tensor::<f32>::fill_normal(&[8], 0.0, 1.0, &mut rng).unwrap();
        let gb = Tensor::<f32>::fill_normal(&[4], 0.0, 1.0, &mut rng).unwrap();
        let run = |a_first: bool| {
            let mut a = Tensor::<f32>::full(&[8], 1.0).unwrap();
            let mut b = Tensor::<f32>::full(&[4], -1.0).unwrap();
            let (mut sa, mut sb) = (AdamState::new(&[8]).unwrap(), AdamState::new(&[4]).unwrap());
            for _ in 0..3 {
                if a_first {
                    adam_step(&mut a, &ga, &mut sa, &cfg).unwrap();
                    adam_step(&mut b, &gb, &mut sb, &cfg).unwrap();
                } else {
                    adam_step(&mut b, &gb, &mut sb, &cfg).unwrap();
                    adam_step(&mut a, &ga, &mut sa, &cfg).unwrap();
                }
            }
            (a, b)
        };
        assert_eq!(run(true), run(false));
    }
}
