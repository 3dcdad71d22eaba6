//! Calcium scoring on HU volumes.
//!
//! A voxel counts as calcified when it is inside the query mask **and** its
//! HU value is strictly above 130. Calcified voxels are grouped into lesions
//! by 6-connectivity (face neighbours only); labels are assigned in raster
//! scan order of each component's first voxel, so labeling is deterministic.
//! The volume score is `voxel count * voxel_volume`; lesion-level detection
//! counts a ground-truth lesion as found when it shares at least one voxel
//! with any predicted lesion.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{bail_validation, Result};

/// Strict lower HU bound for calcified tissue.
pub const CALCIUM_HU_THRESHOLD: f32 = 130.0;

#[derive(Debug, Clone)]
pub struct Component {
    pub label: u32,
    /// Voxels in `(z, y, x)` order, sorted by raster index.
    pub voxels: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct LabeledVolume {
    /// 0 where not calcified, otherwise the 1-based component label.
    pub labels: Array3<u32>,
    pub components: Vec<Component>,
}

impl LabeledVolume {
    pub fn calcified_voxels(&self) -> usize {
        self.components.iter().map(|c| c.voxels.len()).sum()
    }
}

/// Thresholds `mask && hu > 130` and labels 6-connected components.
pub fn calcium_components(mask: &Array3<u8>, hu: &Array3<f32>) -> Result<LabeledVolume> {
    if mask.dim() != hu.dim() {
        bail_validation!("mask shape {:?} != hu shape {:?}", mask.dim(), hu.dim());
    }
    if mask.iter().any(|&v| v > 1) {
        bail_validation!("mask must be binary");
    }
    let (d, h, w) = mask.dim();
    let candidate = |z: usize, y: usize, x: usize| -> bool {
        mask[[z, y, x]] == 1 && hu[[z, y, x]] > CALCIUM_HU_THRESHOLD
    };
    let mut labels = Array3::<u32>::zeros((d, h, w));
    let mut components = Vec::new();
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if labels[[z, y, x]] != 0 || !candidate(z, y, x) {
                    continue;
                }
                let label = components.len() as u32 + 1;
                let mut voxels = Vec::new();
                labels[[z, y, x]] = label;
                stack.push((z, y, x));
                while let Some((cz, cy, cx)) = stack.pop() {
                    voxels.push((cz, cy, cx));
                    let neighbours = [
                        (cz.wrapping_sub(1), cy, cx),
                        (cz + 1, cy, cx),
                        (cz, cy.wrapping_sub(1), cx),
                        (cz, cy + 1, cx),
                        (cz, cy, cx.wrapping_sub(1)),
                        (cz, cy, cx + 1),
                    ];
                    for (nz, ny, nx) in neighbours {
                        if nz < d
                            && ny < h
                            && nx < w
                            && labels[[nz, ny, nx]] == 0
                            && candidate(nz, ny, nx)
                        {
                            labels[[nz, ny, nx]] = label;
                            stack.push((nz, ny, nx));
                        }
                    }
                }
                voxels.sort_unstable();
                components.push(Component { label, voxels });
            }
        }
    }
    Ok(LabeledVolume { labels, components })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalciumReport {
    pub voxel_volume: f64,
    pub gt_lesions: usize,
    pub pred_lesions: usize,
    pub gt_volume: f64,
    pub pred_volume: f64,
    /// Signed volume error (pred - gt).
    pub volume_error: f64,
    pub lesion_tp: usize,
    pub lesion_fp: usize,
    pub lesion_fn: usize,
    pub lesion_precision: f64,
    pub lesion_recall: f64,
    pub lesion_f1: f64,
}

/// Scores a predicted mask against ground truth over a shared HU volume.
pub fn score_calcium(
    pred_mask: &Array3<u8>,
    gt_mask: &Array3<u8>,
    hu: &Array3<f32>,
    voxel_volume: f64,
) -> Result<CalciumReport> {
    if voxel_volume <= 0.0 {
        bail_validation!("voxel_volume must be positive, got {voxel_volume}");
    }
    let pred = calcium_components(pred_mask, hu)?;
    let gt = calcium_components(gt_mask, hu)?;

    let overlaps = |c: &Component, other: &LabeledVolume| {
        c.voxels.iter().any(|&(z, y, x)| other.labels[[z, y, x]] != 0)
    };
    let matched_gt = gt.components.iter().filter(|c| overlaps(c, &pred)).count();
    let matched_pred = pred.components.iter().filter(|c| overlaps(c, &gt)).count();
    let lesion_fn = gt.components.len() - matched_gt;
    let lesion_fp = pred.components.len() - matched_pred;

    let ratio_or = |num: usize, den: usize, fallback: f64| {
        if den == 0 { fallback } else { num as f64 / den as f64 }
    };
    let precision = ratio_or(matched_pred, pred.components.len(), 1.0);
    let recall = ratio_or(matched_gt, gt.components.len(), 1.0);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    let gt_volume = gt.calcified_voxels() as f64 * voxel_volume;
    let pred_volume = pred.calcified_voxels() as f64 * voxel_volume;
    Ok(CalciumReport {
        voxel_volume,
        gt_lesions: gt.components.len(),
        pred_lesions: pred.components.len(),
        gt_volume,
        pred_volume,
        volume_error: pred_volume - gt_volume,
        lesion_tp: matched_gt,
        lesion_fp,
        lesion_fn,
        lesion_precision: precision,
        lesion_recall: recall,
        lesion_f1: f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume_with(vals: &[((usize, usize, usize), f32)], dims: (usize, usize, usize)) -> (Array3<u8>, Array3<f32>) {
        let mut mask = Array3::<u8>::zeros(dims);
        let mut hu = Array3::<f32>::zeros(dims);
        for &(idx, v) in vals {
            mask[idx] = 1;
            hu[idx] = v;
        }
        (mask, hu)
    }

    #[test]
    fn threshold_is_strictly_above_130() {
        let (mask, hu) = volume_with(
            &[((0, 0, 0), 130.0), ((0, 0, 1), 130.0001), ((0, 0, 2), 129.9)],
            (1, 1, 4),
        );
        let l = calcium_components(&mask, &hu).unwrap();
        assert_eq!(l.components.len(), 1);
        assert_eq!(l.components[0].voxels, vec![(0, 0, 1)]);
    }

    #[test]
    fn six_connectivity_separates_diagonal_voxels() {
        // Two voxels touching only at an edge/corner are distinct lesions.
        let (mask, hu) = volume_with(
            &[((0, 0, 0), 200.0), ((0, 1, 1), 200.0), ((1, 1, 0), 200.0)],
            (2, 2, 2),
        );
        let l = calcium_components(&mask, &hu).unwrap();
        assert_eq!(l.components.len(), 3, "diagonal contact must not merge");
    }

    #[test]
    fn face_neighbours_merge_and_labels_follow_raster_order() {
        let (mask, hu) = volume_with(
            &[
                ((0, 0, 0), 200.0),
                ((0, 0, 1), 200.0), // same lesion as above (x-neighbour)
                ((0, 2, 2), 200.0), // second lesion
                ((1, 2, 2), 200.0), // same as second (z-neighbour)
            ],
            (2, 3, 3),
        );
        let l = calcium_components(&mask, &hu).unwrap();
        assert_eq!(l.components.len(), 2);
        assert_eq!(l.components[0].label, 1);
        assert_eq!(l.components[0].voxels, vec![(0, 0, 0), (0, 0, 1)]);
        assert_eq!(l.components[1].voxels, vec![(0, 2, 2), (1, 2, 2)]);
        assert_eq!(l.labels[[1, 2, 2]], 2);
    }

    #[test]
    fn masked_out_hot_voxels_do_not_count() {
        let mut mask = Array3::<u8>::zeros((1, 2, 2));
        let hu = Array3::<f32>::from_elem((1, 2, 2), 500.0);
        mask[[0, 0, 0]] = 1;
        let l = calcium_components(&mask, &hu).unwrap();
        assert_eq!(l.calcified_voxels(), 1);
    }

    #[test]
    fn scoring_matches_hand_computation() {
        // GT: lesions A (2 voxels) and B (1 voxel). Pred: hits A with one
        // voxel, misses B, and invents C elsewhere.
        let dims = (1, 4, 4);
        let hu = Array3::<f32>::from_elem(dims, 300.0);
        let mut gt = Array3::<u8>::zeros(dims);
        gt[[0, 0, 0]] = 1;
        gt[[0, 0, 1]] = 1; // lesion A
        gt[[0, 3, 3]] = 1; // lesion B
        let mut pred = Array3::<u8>::zeros(dims);
        pred[[0, 0, 1]] = 1; // overlaps A
        pred[[0, 2, 0]] = 1; // spurious C
        let r = score_calcium(&pred, &gt, &hu, 2.0).unwrap();
        assert_eq!(r.gt_lesions, 2);
        assert_eq!(r.pred_lesions, 2);
        assert_eq!((r.lesion_tp, r.lesion_fp, r.lesion_fn), (1, 1, 1));
        assert_eq!(r.gt_volume, 6.0);
        assert_eq!(r.pred_volume, 4.0);
        assert_eq!(r.volume_error, -2.0);
        assert!((r.lesion_precision - 0.5).abs() < 1e-12);
        assert!((r.lesion_recall - 0.5).abs() < 1e-12);
        assert!((r.lesion_f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_volumes_score_perfectly() {
        let dims = (1, 2, 2);
        let hu = Array3::<f32>::zeros(dims);
        let empty = Array3::<u8>::zeros(dims);
        let r = score_calcium(&empty, &empty, &hu, 1.0).unwrap();
        assert_eq!(r.lesion_precision, 1.0);
        assert_eq!(r.lesion_recall, 1.0);
        assert_eq!(r.volume_error, 0.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let hu = Array3::<f32>::zeros((1, 2, 2));
        let mask = Array3::<u8>::zeros((1, 2, 3));
        assert!(calcium_components(&mask, &hu).is_err());
        let ok = Array3::<u8>::zeros((1, 2, 2));
        assert!(score_calcium(&ok, &ok, &hu, 0.0).is_err());
    }
}
