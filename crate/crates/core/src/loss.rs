//! Joint focal + soft-dice objective on sigmoid probabilities, with
//! closed-form gradients with respect to the logits.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::sigmoid;
use crate::Scalar;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the focal term.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focusing exponent.
    pub gamma: f64,
    /// Weight of the positive (changed) class; negatives get `1 − alpha`.
    pub alpha: f64,
    /// Focal coefficient.
    pub lambda1: f64,
    /// Dice coefficient.
    pub lambda2: f64,
    /// Dice smoothing.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.2,
            lambda1: 0.5,
            lambda2: 1.0,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss coefficients must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("dice epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check<T>(prob: &ArrayView2<T>, gt: &ArrayView2<u8>) -> Result<()> {
    if prob.dim() != gt.dim() {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", prob.dim(), gt.dim()));
    }
    Ok(())
}

#[inline]
fn focal_terms(p: f64, positive: bool, cfg: &LossConfig) -> (f64, f64) {
    // Returns (loss, d loss / d p) for one pixel.
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let inside = clamped == p;
    let (pt, alpha_t, sign) = if positive {
        (clamped, cfg.alpha, 1.0)
    } else {
        (1.0 - clamped, 1.0 - cfg.alpha, -1.0)
    };
    let one_minus = 1.0 - pt;
    let loss = -alpha_t * one_minus.powf(cfg.gamma) * pt.ln();
    if !inside {
        return (loss, 0.0);
    }
    let focus_grad = if cfg.gamma == 0.0 {
        0.0
    } else {
        cfg.gamma * one_minus.powf(cfg.gamma - 1.0) * pt.ln()
    };
    let d_pt = alpha_t * (focus_grad - one_minus.powf(cfg.gamma) / pt);
    (loss, d_pt * sign)
}

/// Mean binary focal loss `−α_t (1 − p_t)^γ log p_t`.
pub fn focal_loss<T: Scalar>(prob: ArrayView2<T>, gt: ArrayView2<u8>, cfg: &LossConfig) -> Result<f64> {
    check(&prob, &gt)?;
    let n = prob.len().max(1) as f64;
    let mut sum = 0.0;
    Zip::from(&prob).and(&gt).for_each(|&p, &g| sum += focal_terms(p.as_f64(), g != 0, cfg).0);
    Ok(sum / n)
}

/// Smoothed soft dice `1 − (2 Σ p g + ε) / (Σ p + Σ g + ε)`.
pub fn dice_loss<T: Scalar>(prob: ArrayView2<T>, gt: ArrayView2<u8>, cfg: &LossConfig) -> Result<f64> {
    check(&prob, &gt)?;
    let (inter, sp, sg) = dice_sums(&prob, &gt);
    Ok(1.0 - (2.0 * inter + cfg.epsilon) / (sp + sg + cfg.epsilon))
}

fn dice_sums<T: Scalar>(prob: &ArrayView2<T>, gt: &ArrayView2<u8>) -> (f64, f64, f64) {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    Zip::from(prob).and(gt).for_each(|&p, &g| {
        let p = p.as_f64();
        let g = if g != 0 { 1.0 } else { 0.0 };
        inter += p * g;
        sp += p;
        sg += g;
    });
    (inter, sp, sg)
}

/// `λ₁ · focal + λ₂ · dice` on `sigmoid(logits)`.
pub fn total_loss<T: Scalar>(logits: ArrayView2<T>, gt: ArrayView2<u8>, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_and_grad(logits, gt, cfg)?.0.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
}

/// Loss components and `d total / d logits` for one map.
pub fn loss_and_grad<T: Scalar>(
    logits: ArrayView2<T>,
    gt: ArrayView2<u8>,
    cfg: &LossConfig,
) -> Result<(LossParts, Array2<T>)> {
    check(&logits, &gt)?;
    let prob = logits.mapv(|z| sigmoid(z.as_f64()));
    let n = prob.len().max(1) as f64;
    let (inter, sp, sg) = dice_sums(&prob.view(), &gt);
    let union = sp + sg + cfg.epsilon;
    let dice_num = 2.0 * inter + cfg.epsilon;
    let dice = 1.0 - dice_num / union;

    let mut focal = 0.0;
    let mut grad = Array2::<T>::zeros(prob.dim());
    Zip::from(&mut grad).and(&prob).and(&gt).for_each(|d, &p, &g| {
        let positive = g != 0;
        let (f, df_dp) = focal_terms(p, positive, cfg);
        focal += f;
        let gv = if positive { 1.0 } else { 0.0 };
        let ddice_dp = -(2.0 * gv * union - dice_num) / (union * union);
        let dp_dz = p * (1.0 - p);
        *d = T::lit((cfg.lambda1 * df_dp / n + cfg.lambda2 * ddice_dp) * dp_dz);
    });
    let focal = focal / n;
    Ok((
        LossParts {
            focal,
            dice,
            total: cfg.lambda1 * focal + cfg.lambda2 * dice,
        },
        grad,
    ))
}

/// Batch loss: the mean of per-map losses over `[batch, H, W]`.
pub fn batch_loss_and_grad<T: Scalar>(
    logits: &Array3<T>,
    gt: &Array3<u8>,
    cfg: &LossConfig,
) -> Result<(LossParts, Array3<T>)> {
    if logits.dim() != gt.dim() {
        return shape_err(format!("logits {:?} vs masks {:?}", logits.dim(), gt.dim()));
    }
    let b = logits.dim().0.max(1);
    let scale = 1.0 / b as f64;
    let mut parts = LossParts::default();
    let mut grad = Array3::<T>::zeros(logits.dim());
    for ((l, g), mut d) in logits
        .axis_iter(Axis(0))
        .zip(gt.axis_iter(Axis(0)))
        .zip(grad.axis_iter_mut(Axis(0)))
    {
        let (p, gr) = loss_and_grad(l, g, cfg)?;
        parts.focal += p.focal * scale;
        parts.dice += p.dice * scale;
        parts.total += p.total * scale;
        d.assign(&gr.mapv(|v| v * T::lit(scale)));
    }
    Ok((parts, grad))
}
