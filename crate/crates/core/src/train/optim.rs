use ndarray::{ArrayD, Zip};

use crate::nn::HasParams;
use crate::Scalar;

/// Adam with decoupled weight decay. Moment buffers follow the model's
/// parameter visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: Vec<ArrayD<T>>,
    pub second_moment: Vec<ArrayD<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<M: HasParams<T>>(model: &M, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let mut m = Vec::new();
        model.visit_params("", &mut |_, p| m.push(ArrayD::zeros(p.value.raw_dim())));
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            second_moment: m.clone(),
            first_moment: m,
        }
    }

    pub fn step<M: HasParams<T>>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.first_moment, &mut self.second_moment);
        model.visit_params_mut("", &mut |_, p| {
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            idx += 1;
            Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *w *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / (v.sqrt() * inv_bc2_sqrt + eps);
            });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct One(Param<f64>);

    impl HasParams<f64> for One {
        fn visit_params(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f("w", &self.0)
        }
        fn visit_params_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("w", &mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = One(Param::new(ndarray::arr1(&[1.0, -2.0]).into_dyn()));
        m.0.grad = ndarray::arr1(&[0.5, -3.0]).into_dyn();
        let mut opt = AdamW::new(&m, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut m, 0.1);
        assert!((m.0.value[0] - 0.9).abs() < 1e-6);
        assert!((m.0.value[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut m = One(Param::new(ndarray::arr1(&[2.0]).into_dyn()));
        let mut opt = AdamW::new(&m, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut m, 0.1);
        // zero gradient: only the decay term acts
        assert!((m.0.value[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut m = One(Param::new(ndarray::arr1(&[3.0, -4.0]).into_dyn()));
        let mut opt = AdamW::new(&m, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..2000 {
            m.0.grad = m.0.value.clone();
            opt.step(&mut m, 0.01);
        }
        assert!(m.0.value.iter().all(|v| v.abs() < 1e-2));
    }
}
