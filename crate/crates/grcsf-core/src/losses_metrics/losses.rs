//! Soft Dice and focal losses on the autodiff tape, plus the mixed objective
//! used for segmentation training (their sum).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::tape::{c, Elem, Tape, VarId};
use crate::{bail_validation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Soft Dice + focal (the default objective).
    Mixed,
    /// Focal loss alone.
    Focal,
}

/// Loss hyperparameters. Defaults: mixed objective, focal `alpha = 0.25`,
/// `gamma = 2`, Dice smoothing `1e-6`, probability clamp `1e-7`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub gamma: f64,
    pub dice_smooth: f64,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Mixed, alpha: 0.25, gamma: 2.0, dice_smooth: 1e-6, clamp_eps: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            bail_validation!("focal alpha must be in [0, 1], got {}", self.alpha);
        }
        if self.gamma < 0.0 {
            bail_validation!("focal gamma must be non-negative, got {}", self.gamma);
        }
        if self.dice_smooth <= 0.0 {
            bail_validation!("dice_smooth must be positive, got {}", self.dice_smooth);
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            bail_validation!("clamp_eps must be in (0, 0.5), got {}", self.clamp_eps);
        }
        Ok(())
    }
}

/// Soft Dice loss `1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)` over all
/// pixels. `pred` holds probabilities, `gt` the binary mask as floats; both
/// must be tape nodes of equal shape.
pub fn dice_loss_t<T: Elem>(t: &mut Tape<T>, pred: VarId, gt: VarId, smooth: f64) -> VarId {
    let inter = t.mul(pred, gt);
    let inter = t.sum_all(inter);
    let num = t.mul_scalar(inter, c::<T>(2.0));
    let num = t.add_scalar(num, c::<T>(smooth));
    let sp = t.sum_all(pred);
    let sg = t.sum_all(gt);
    let denom = t.add(sp, sg);
    let denom = t.add_scalar(denom, c::<T>(smooth));
    let ratio = t.div(num, denom);
    let neg = t.neg(ratio);
    t.add_scalar(neg, T::one())
}

/// Focal loss, mean over pixels of `-alpha * (1 - p_t)^gamma * ln(p_t)`
/// where `p_t = p` on positives and `1 - p` on negatives; `p` is clamped to
/// `[eps, 1-eps]` before the logarithm. With `alpha = 1, gamma = 0` this is
/// exactly binary cross-entropy.
pub fn focal_loss_t<T: Elem>(
    t: &mut Tape<T>,
    pred: VarId,
    gt: VarId,
    alpha: f64,
    gamma: f64,
    clamp_eps: f64,
) -> VarId {
    let p = t.clamp(pred, clamp_eps, 1.0 - clamp_eps);
    let negp = t.neg(p);
    let omp = t.add_scalar(negp, T::one()); // 1 - p

    // positives: p_t = p
    let lnp = t.ln(p);
    let ompg = t.powf_const(omp, gamma);
    let pos = t.mul(ompg, lnp);

    // negatives: p_t = 1 - p
    let lnomp = t.ln(omp);
    let pg = t.powf_const(p, gamma);
    let negterm = t.mul(pg, lnomp);

    let pos_sel = t.mul(gt, pos);
    let neggt = t.neg(gt);
    let omgt = t.add_scalar(neggt, T::one());
    let neg_sel = t.mul(omgt, negterm);
    let total = t.add(pos_sel, neg_sel);
    let total = t.mul_scalar(total, c::<T>(-alpha));
    t.mean_all(total)
}

/// Mixed objective: Dice + focal.
pub fn mixed_loss_t<T: Elem>(t: &mut Tape<T>, pred: VarId, gt: VarId, cfg: &LossConfig) -> VarId {
    let d = dice_loss_t(t, pred, gt, cfg.dice_smooth);
    let f = focal_loss_t(t, pred, gt, cfg.alpha, cfg.gamma, cfg.clamp_eps);
    t.add(d, f)
}

/// Dispatches on `cfg.kind`.
pub fn segmentation_loss_t<T: Elem>(
    t: &mut Tape<T>,
    pred: VarId,
    gt: VarId,
    cfg: &LossConfig,
) -> VarId {
    match cfg.kind {
        LossKind::Mixed => mixed_loss_t(t, pred, gt, cfg),
        LossKind::Focal => focal_loss_t(t, pred, gt, cfg.alpha, cfg.gamma, cfg.clamp_eps),
    }
}

fn to_leafs<T: Elem>(
    pred: &Array2<T>,
    gt: &Array2<u8>,
) -> Result<(Tape<T>, VarId, VarId)> {
    if pred.dim() != gt.dim() {
        bail_validation!("pred shape {:?} != gt shape {:?}", pred.dim(), gt.dim());
    }
    if gt.iter().any(|&v| v > 1) {
        bail_validation!("ground truth mask must be binary");
    }
    let mut t = Tape::new();
    let p = t.leaf2(pred.clone());
    let g = t.leaf2(gt.mapv(|v| c::<T>(v as f64)));
    Ok((t, p, g))
}

/// Array-level soft Dice loss (same graph as the tape version).
pub fn dice_loss<T: Elem>(pred: &Array2<T>, gt: &Array2<u8>, cfg: &LossConfig) -> Result<T> {
    cfg.validate()?;
    let (mut t, p, g) = to_leafs(pred, gt)?;
    let l = dice_loss_t(&mut t, p, g, cfg.dice_smooth);
    Ok(t.scalar(l))
}

/// Array-level focal loss.
pub fn focal_loss<T: Elem>(pred: &Array2<T>, gt: &Array2<u8>, cfg: &LossConfig) -> Result<T> {
    cfg.validate()?;
    let (mut t, p, g) = to_leafs(pred, gt)?;
    let l = focal_loss_t(&mut t, p, g, cfg.alpha, cfg.gamma, cfg.clamp_eps);
    Ok(t.scalar(l))
}
