use ndarray::{Array3, ArrayView2};

use crate::error::{shape_err, Result};

pub const TP_COLOR: [u8; 3] = [255, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];

/// Error map: TP yellow, FP red, FN blue, TN black.
pub fn render_comparison_map(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<Array3<u8>> {
    if pred.dim() != gt.dim() {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim()));
    }
    let (h, w) = pred.dim();
    let mut out = Array3::zeros((h, w, 3));
    for ((i, j), &p) in pred.indexed_iter() {
        let color = match (p != 0, gt[[i, j]] != 0) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
            (false, false) => TN_COLOR,
        };
        for c in 0..3 {
            out[[i, j, c]] = color[c];
        }
    }
    Ok(out)
}
