use ndarray::Array4;

use crate::Scalar;

/// Max pooling with implicit negative-infinity padding.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Flat argmax (row-major `y * w + x`) per output cell.
#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<usize>,
    input_dim: (usize, usize, usize, usize),
}

impl PoolCache {
    pub(crate) fn hash_pattern(&self, h: &mut impl std::hash::Hasher) {
        for &i in &self.argmax {
            h.write_usize(i);
        }
    }
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> (Array4<T>, PoolCache) {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let mut y = Array4::zeros((b, c, ho, wo));
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for n in 0..b {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for ki in 0..self.kernel {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[n, ch, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        y[[n, ch, oy, ox]] = best;
                        argmax.push(best_idx);
                    }
                }
            }
        }
        (
            y,
            PoolCache {
                argmax,
                input_dim: (b, c, h, w),
            },
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &PoolCache, dy: &Array4<T>) -> Array4<T> {
        let (b, c, h, w) = cache.input_dim;
        let mut dx = Array4::zeros((b, c, h, w));
        let mut idx = cache.argmax.iter();
        for n in 0..b {
            for ch in 0..c {
                for g in dy.slice(ndarray::s![n, ch, .., ..]).iter() {
                    let flat = *idx.next().expect("cache matches gradient");
                    dx[[n, ch, flat / w, flat % w]] += *g;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_and_routes_gradient_to_argmax() {
        let pool = MaxPool2d { kernel: 3, stride: 2, padding: 1 };
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
        let dx = pool.backward(&cache, &Array4::<f64>::ones((1, 1, 2, 2)));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
    }
}
