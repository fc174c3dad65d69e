use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use super::param::join;
use super::{HasParams, Param};
use crate::Scalar;

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics and updates running averages; evaluation uses the averages.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let eps = T::lit(self.eps);
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let scale = self.gamma.value[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            plane.mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (b, c, h, w) = x.dim();
        let m = (b * h * w) as f64;
        let eps = T::lit(self.eps);
        let mom = T::lit(self.momentum);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(c);
        for (ch, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let mean = plane.sum() / T::lit(m);
            let var = plane.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / T::lit(m);
            let istd = T::one() / (var + eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * istd);
            inv_std[ch] = istd;
            let unbiased = if m > 1.0 { var * T::lit(m / (m - 1.0)) } else { var };
            self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean;
            self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * unbiased;
        }
        let mut y = xhat.clone();
        for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            plane.mapv_inplace(|v| v * g + bt);
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (b, _, h, w) = dy.dim();
        let m = T::lit((b * h * w) as f64);
        let mut dx = dy.clone();
        for (ch, mut dplane) in dx.axis_iter_mut(Axis(1)).enumerate() {
            let xhat = cache.xhat.index_axis(Axis(1), ch);
            let dyp = dy.index_axis(Axis(1), ch);
            let sum_dy = dyp.sum();
            let sum_dy_xhat = (&dyp * &xhat).sum();
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let k = g * cache.inv_std[ch] / m;
            ndarray::Zip::from(&mut dplane)
                .and(&xhat)
                .for_each(|d, &xh| *d = k * (m * *d - sum_dy - xh * sum_dy_xhat));
        }
        dx
    }
}

impl<T: Scalar> HasParams<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Array4::from_shape_fn((3, 2, 4, 4), |(a, b, c, d)| (a * 3 + b * 11 + c * c + d) as f64);
        let (y, _) = bn.forward_train(&x);
        for plane in y.axis_iter(Axis(1)) {
            let n = plane.len() as f64;
            let mean = plane.sum() / n;
            let var = plane.mapv(|v| (v - mean) * (v - mean)).sum() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running stats moved 10% toward the batch statistics
        assert!(bn.running_mean[0] > 0.0);
    }

    #[test]
    fn eval_with_default_stats_is_identity_up_to_eps() {
        let bn = BatchNorm2d::<f64>::new(1);
        let x = Array4::from_elem((1, 1, 2, 2), 3.0);
        let y = bn.forward_eval(&x);
        assert!((y[[0, 0, 0, 0]] - 3.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
}
