//! Bitemporal samples: loading, tiling, splitting, synthesis, rendering.

mod record;
mod render;
mod split;
mod synth;
mod tile;

pub use record::{load_dataset, load_mask, load_rgb, save_dataset, save_mask, save_rgb, Augment, SampleRecord};
pub use render::{render_comparison_map, FN_COLOR, FP_COLOR, TN_COLOR, TP_COLOR};
pub use split::split;
pub use synth::{synth_generate, synth_generate_scenes, PseudoChange, Rect, SynthConfig, SynthScene};
pub use tile::{tile, untile};

use ndarray::{Array2, Array3, Array4, ArrayView3};

use crate::Scalar;

/// Per-channel normalization applied to 8-bit RGB before encoding.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `[H, W, 3]` bytes to a normalized `[3, H, W]` tensor.
pub fn to_tensor<T: Scalar>(image: ArrayView3<u8>) -> Array3<T> {
    let (h, w, _) = image.dim();
    Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        T::lit((image[[i, j, c]] as f64 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c])
    })
}

/// Stacks both phases and masks of `records` into batch tensors.
pub fn to_batch<T: Scalar>(records: &[&SampleRecord]) -> (Array4<T>, Array4<T>, ndarray::Array3<u8>) {
    let (h, w) = records[0].mask.dim();
    let b = records.len();
    let mut t1 = Array4::zeros((b, 3, h, w));
    let mut t2 = Array4::zeros((b, 3, h, w));
    let mut masks = ndarray::Array3::zeros((b, h, w));
    for (i, r) in records.iter().enumerate() {
        t1.index_axis_mut(ndarray::Axis(0), i).assign(&to_tensor::<T>(r.image_t1.view()));
        t2.index_axis_mut(ndarray::Axis(0), i).assign(&to_tensor::<T>(r.image_t2.view()));
        masks.index_axis_mut(ndarray::Axis(0), i).assign(&r.mask);
    }
    (t1, t2, masks)
}

/// Binarizes a probability map at `threshold`.
pub fn binarize<T: Scalar>(prob: &Array2<T>, threshold: f64) -> Array2<u8> {
    prob.mapv(|p| u8::from(p.as_f64() >= threshold))
}
