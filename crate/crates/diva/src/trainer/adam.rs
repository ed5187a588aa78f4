//! ADAM with the usual bias correction, over a fixed-order parameter list.

use crate::tensor::Real;
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub t: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Adam {
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            t: 0,
            m: shapes.iter().map(|s| ArrayD::zeros(ndarray::IxDyn(s))).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(ndarray::IxDyn(s))).collect(),
        }
    }

    /// One optimizer step. `apply` receives each leaf index and its update
    /// (already scaled by the learning rate) and subtracts it from the
    /// parameter; gradients must be in leaf order.
    pub fn step(&mut self, lr: F, grads: &[ArrayD<F>], mut apply: impl FnMut(usize, ArrayD<F>)) {
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let t = F::from_f64(self.t as f64);
        let c1 = F::one() - self.beta1.powf(t);
        let c2 = F::one() - self.beta2.powf(t);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (F::one() - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (F::one() - self.beta2) * gi * gi;
            });
            let update = ndarray::Zip::from(&*m).and(&*v).map_collect(|&mi, &vi| {
                lr * (mi / c1) / ((vi / c2).sqrt() + self.eps)
            });
            apply(i, update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2 elementwise
        let mut x = ArrayD::from_elem(IxDyn(&[4]), 0.0f64);
        let mut opt = Adam::new(&[vec![4]]);
        for _ in 0..800 {
            let g = x.mapv(|v| 2.0 * (v - 3.0));
            opt.step(0.05, &[g], |_, upd| x -= &upd);
        }
        assert!(x.iter().all(|&v| (v - 3.0).abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut x = ArrayD::from_elem(IxDyn(&[3]), 1.5f32);
        let before = x.clone();
        let mut opt = Adam::new(&[vec![3]]);
        for _ in 0..5 {
            let g = ArrayD::zeros(IxDyn(&[3]));
            opt.step(0.01, &[g], |_, upd| x -= &upd);
        }
        assert_eq!(x, before);
    }
}
