//! Adam optimizer with bias correction.

use ndarray::ArrayD;

use super::{Scalar, Tensor, TensorError};

/// Adam state: first/second moment buffers per parameter plus a step counter.
/// Defaults follow the usual choices: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step_count: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.values().raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected update, in place. Gradients are left untouched;
    /// the caller zeroes them between steps.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(TensorError::StateShapeDrift {
                index: params.len().min(self.m.len()),
                state: vec![self.m.len()],
                param: vec![params.len()],
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (i, p) in params.iter().enumerate() {
            let g = p.grad();
            if g.raw_dim() != self.m[i].raw_dim() {
                return Err(TensorError::StateShapeDrift {
                    index: i,
                    state: self.m[i].shape().to_vec(),
                    param: g.shape().to_vec(),
                });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&*g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (one - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(&*g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            });
            drop(g);
            let mut pv = p.values_mut();
            ndarray::Zip::from(&mut *pv)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use ndarray::arr1;

    #[test]
    fn zero_gradient_leaves_parameters_effectively_unchanged() {
        let p = Tensor::param(arr1(&[1.0_f64, -2.0]).into_dyn());
        let mut opt = Adam::new(&[p.clone()], 0.1);
        opt.step(&[p.clone()]).unwrap();
        // With g = 0 the update is 0 / (0 + eps) = 0 exactly.
        assert_eq!(p.values()[0], 1.0);
        assert_eq!(p.values()[1], -2.0);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let p = Tensor::param(arr1(&[0.0_f64]).into_dyn());
        {
            let mut g = p.values_mut();
            let _ = &mut g;
        }
        let loss_grad = 0.37; // any nonzero gradient
        p.zero_grad();
        {
            // Inject a gradient directly.
            let y = ops::mul_scalar(&p, loss_grad);
            let loss = ops::sum_all(&y);
            loss.backward().unwrap();
        }
        let mut opt = Adam::new(&[p.clone()], 0.01);
        opt.step(&[p.clone()]).unwrap();
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((p.values()[0].abs() - 0.01).abs() < 1e-6);
        assert!(p.values()[0] < 0.0);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2 from w = 0, lr = 0.1, 200 steps.
        let w = Tensor::param(arr1(&[0.0_f64]).into_dyn());
        let mut opt = Adam::new(&[w.clone()], 0.1);
        for _ in 0..200 {
            w.zero_grad();
            let d = ops::add_scalar(&w, -3.0);
            let loss = ops::mean_all(&ops::mul(&d, &d).unwrap());
            loss.backward().unwrap();
            opt.step(&[w.clone()]).unwrap();
        }
        assert!(
            (w.values()[0] - 3.0).abs() < 0.1,
            "w = {} after 200 steps",
            w.values()[0]
        );
    }

    #[test]
    fn rejects_state_shape_drift() {
        let p = Tensor::param(arr1(&[0.0_f64, 1.0]).into_dyn());
        let mut opt = Adam::new(&[p.clone()], 0.1);
        let q = Tensor::param(arr1(&[0.0_f64]).into_dyn());
        assert!(matches!(
            opt.step(&[q]),
            Err(TensorError::StateShapeDrift { .. })
        ));
    }
}
