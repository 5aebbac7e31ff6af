//! Adam with bias correction.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step counter, one slot per parameter.
#[derive(Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One Adam update. Parameters without a gradient are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (ob1, ob2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(cfg.eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = g else { continue };
        g.expect_shape(p.shape(), "adam_step")?;
        m.expect_shape(p.shape(), "adam_step")?;
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + ob1 * gv;
            *vv = b2 * *vv + ob2 * gv * gv;
            *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
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
    fn zero_gradient_leaves_params() {
        let mut p = vec![scalar(1.25)];
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Some(scalar(0.0))], &mut st, 0.1, AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0].data()[0], 1.25);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = vec![scalar(0.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(scalar(1.0))], &mut st, 0.1, AdamConfig::default()).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = vec![scalar(0.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..100 {
            let x = p[0].data()[0];
            let g = scalar(2.0 * (x - 3.0));
            adam_step(&mut p, &[Some(g)], &mut st, 0.1, AdamConfig::default()).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 0.1, "x = {}", p[0].data()[0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2))];
        let mut st = AdamState::new(&p);
        let g = Some(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        assert!(adam_step(&mut p, &[g], &mut st, 0.1, AdamConfig::default()).is_err());
    }
}
