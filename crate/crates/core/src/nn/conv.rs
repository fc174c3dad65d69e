use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayD, ArrayView3, ArrayViewMut3, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::param::join;
use super::{HasParams, Param};
use crate::error::{shape_err, Result};
use crate::Scalar;

/// 2-D convolution over `[batch, channels, height, width]` tensors, lowered
/// to one GEMM per sample through im2col.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `[out, in, kh, kw]`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights (fan-in), no bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&[out_ch, in_ch, kernel, kernel]), || {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        Self {
            weight: Param::new(weight),
            bias: None,
            stride,
            padding,
        }
    }

    pub fn with_bias(mut self) -> Self {
        let out = self.out_channels();
        self.bias = Some(Param::zeros(&[out]));
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, T> {
        let o = self.out_channels();
        let cols = self.weight.len() / o;
        self.weight
            .value
            .view()
            .into_shape((o, cols))
            .expect("conv weight is contiguous")
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let (b, c, h, w) = x.dim();
        if c != self.in_channels() {
            return shape_err(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            ));
        }
        let k = self.kernel();
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return shape_err(format!("input {h}x{w} smaller than kernel {k}"));
        }
        let (ho, wo) = self.output_hw(h, w);
        let o = self.out_channels();
        let wm = self.weight_matrix();
        let mut y = Array4::<T>::zeros((b, o, ho, wo));
        let mut col = Array2::<T>::zeros((c * k * k, ho * wo));
        for i in 0..b {
            self.im2col(x.slice(s![i, .., .., ..]), &mut col);
            let mut yi = y
                .slice_mut(s![i, .., .., ..])
                .into_shape((o, ho * wo))
                .expect("output slice is contiguous");
            general_mat_mul(T::one(), &wm, &col, T::zero(), &mut yi);
            if let Some(bias) = &self.bias {
                for (mut row, &bv) in yi.outer_iter_mut().zip(bias.value.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
        self.backward_impl(x, dy, true)
            .expect("input gradient requested")
    }

    /// Accumulates weight/bias gradients only; used for the first layer.
    pub fn backward_params(&mut self, x: &Array4<T>, dy: &Array4<T>) {
        self.backward_impl(x, dy, false);
    }

    fn backward_impl(&mut self, x: &Array4<T>, dy: &Array4<T>, input_grad: bool) -> Option<Array4<T>> {
        let (b, c, h, w) = x.dim();
        let (_, o, ho, wo) = dy.dim();
        let k = self.kernel();
        let mut dx = Array4::<T>::zeros(if input_grad { (b, c, h, w) } else { (0, 0, 0, 0) });
        let mut col = Array2::<T>::zeros((c * k * k, ho * wo));
        let mut dcol = Array2::<T>::zeros((c * k * k, ho * wo));
        let mut dw = Array2::<T>::zeros((o, c * k * k));
        for i in 0..b {
            let dyi = dy
                .slice(s![i, .., .., ..])
                .into_shape((o, ho * wo))
                .expect("gradient slice is contiguous");
            self.im2col(x.slice(s![i, .., .., ..]), &mut col);
            general_mat_mul(T::one(), &dyi, &col.t(), T::one(), &mut dw);
            if input_grad {
                general_mat_mul(T::one(), &self.weight_matrix().t(), &dyi, T::zero(), &mut dcol);
                self.col2im(&dcol, dx.slice_mut(s![i, .., .., ..]));
            }
            if let Some(bias) = &mut self.bias {
                for (g, row) in bias.grad.iter_mut().zip(dyi.outer_iter()) {
                    *g += row.sum();
                }
            }
        }
        let mut gw = self
            .weight
            .grad
            .view_mut()
            .into_shape((o, c * k * k))
            .expect("conv weight grad is contiguous");
        gw += &dw;
        input_grad.then_some(dx)
    }

    fn im2col(&self, x: ArrayView3<T>, col: &mut Array2<T>) {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        let (st, pad) = (self.stride as isize, self.padding as isize);
        let col_slice = col.as_slice_mut().expect("col is contiguous");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let dst = &mut col_slice[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * st + ki as isize - pad;
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize * st + kj as isize - pad;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                x[[ch, iy as usize, ix as usize]]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &Array2<T>, mut dx: ArrayViewMut3<T>) {
        let (c, h, w) = dx.dim();
        let k = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        let (st, pad) = (self.stride as isize, self.padding as isize);
        let col_slice = col.as_slice().expect("col is contiguous");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let src = &col_slice[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * st + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * st + kj as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dx[[ch, iy as usize, ix as usize]] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> HasParams<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
