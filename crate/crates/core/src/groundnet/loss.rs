//! Region-phrase alignment, target assignment and the two detection losses.

use serde::{Deserialize, Serialize};

use super::model::RegionSet;
use crate::boxes::{encode_deltas, iou_raw, BBox};
use crate::error::{PgstError, Result};
use crate::scalar::{matmul_nt, Scalar};

/// `Nr × Nw` region-phrase logits, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<T>,
}

impl<T: Scalar> AlignmentMatrix<T> {
    /// `R · Wᵀ` for region features `R` (`rows × dim`) and phrase embeddings `W` (`cols × dim`).
    pub fn from_features(regions: &[T], phrases: &[T], rows: usize, cols: usize, dim: usize) -> Self {
        let mut scores = vec![T::zero(); rows * cols];
        matmul_nt(rows, dim, cols, regions, phrases, T::zero(), &mut scores);
        Self { rows, cols, scores }
    }

    pub fn get(&self, r: usize, w: usize) -> T {
        self.scores[r * self.cols + w]
    }
}

/// Dense boolean matrix with the same layout as [`AlignmentMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![false; rows * cols] }
    }

    pub fn set(&mut self, r: usize, w: usize, v: bool) {
        self.data[r * self.cols + w] = v;
    }

    pub fn get(&self, r: usize, w: usize) -> bool {
        self.data[r * self.cols + w]
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub ground: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(loc: f64, ground: f64) -> Self {
        Self { loc, ground, total: loc + ground }
    }
}

/// Matches each region's anchor to a ground-truth box.
///
/// A region is positive for the box it overlaps most when that IoU is at
/// least `thresh`. Each box additionally claims the region whose anchor
/// overlaps it most, so every box has at least one positive.
pub fn assign_targets(anchors: &[BBox], gt: &[BBox], thresh: f64) -> Vec<Option<usize>> {
    let mut assigned = vec![None; anchors.len()];
    if gt.is_empty() {
        return assigned;
    }
    let mut best_for_gt = vec![(f64::NEG_INFINITY, usize::MAX); gt.len()];
    for (r, a) in anchors.iter().enumerate() {
        let mut best = (0.0, None);
        for (j, g) in gt.iter().enumerate() {
            let v = iou_raw(a, g);
            if v >= thresh && v > best.0 {
                best = (v, Some(j));
            }
            if v > best_for_gt[j].0 {
                best_for_gt[j] = (v, r);
            }
        }
        assigned[r] = best.1;
    }
    for (j, &(v, r)) in best_for_gt.iter().enumerate() {
        if v > 0.0 && r != usize::MAX {
            assigned[r] = Some(j);
        }
    }
    assigned
}

/// `target[r][w]` is set when region `r` is assigned a box whose label is phrase `w`.
pub fn grounding_targets(assigned: &[Option<usize>], labels: &[usize], phrases: usize) -> Result<BinaryMatrix> {
    let mut target = BinaryMatrix::zeros(assigned.len(), phrases);
    for (r, a) in assigned.iter().enumerate() {
        if let Some(j) = *a {
            let label = labels[j];
            if label >= phrases {
                return Err(PgstError::Shape(format!("label {label} has no phrase (prompt has {phrases})")));
            }
            target.set(r, label, true);
        }
    }
    Ok(target)
}

fn check_same_shape<T>(align: &AlignmentMatrix<T>, target: &BinaryMatrix) -> Result<()> {
    if align.rows != target.rows || align.cols != target.cols || align.scores.len() != target.data.len() {
        return Err(PgstError::Shape(format!(
            "alignment is {}x{} but target is {}x{}",
            align.rows, align.cols, target.rows, target.cols
        )));
    }
    Ok(())
}

/// Mean sigmoid binary cross-entropy over every region-phrase cell.
pub fn grounding_loss<T: Scalar>(align: &AlignmentMatrix<T>, target: &BinaryMatrix) -> Result<f64> {
    check_same_shape(align, target)?;
    if align.scores.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = align
        .scores
        .iter()
        .zip(&target.data)
        .map(|(&x, &t)| {
            let x = x.to_f64_lossy();
            let t = if t { 1.0 } else { 0.0 };
            x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
        })
        .sum();
    Ok(sum / align.scores.len() as f64)
}

/// Loss value and its gradient w.r.t. every logit.
pub fn grounding_loss_with_grad<T: Scalar>(
    align: &AlignmentMatrix<T>,
    target: &BinaryMatrix,
) -> Result<(f64, Vec<T>)> {
    let loss = grounding_loss(align, target)?;
    let n = T::of(align.scores.len().max(1) as f64);
    let grad = align
        .scores
        .iter()
        .zip(&target.data)
        .map(|(&x, &t)| (crate::scalar::sigmoid(x) - if t { T::one() } else { T::zero() }) / n)
        .collect();
    Ok((loss, grad))
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Smooth-L1 (beta 1) on box deltas of positive regions, averaged per coordinate.
///
/// Returns the loss and its gradient w.r.t. `regions.deltas`.
pub fn localization_loss_with_grad<T: Scalar>(
    regions: &RegionSet<T>,
    assigned: &[Option<usize>],
    gt: &[BBox],
) -> (f64, Vec<T>) {
    let mut grad = vec![T::zero(); regions.deltas.len()];
    let positives: Vec<(usize, usize)> =
        assigned.iter().enumerate().filter_map(|(r, a)| a.map(|j| (r, j))).collect();
    if positives.is_empty() {
        return (0.0, grad);
    }
    let norm = (positives.len() * 4) as f64;
    let mut sum = 0.0;
    for (r, j) in positives {
        let target = encode_deltas(&regions.anchors[r], &gt[j]);
        for k in 0..4 {
            let diff = regions.deltas[r * 4 + k].to_f64_lossy() - target[k];
            let (v, g) = smooth_l1(diff);
            sum += v;
            grad[r * 4 + k] = T::of(g / norm);
        }
    }
    (sum / norm, grad)
}

/// Localization loss using the default positive threshold.
pub fn localization_loss<T: Scalar>(regions: &RegionSet<T>, gt_boxes: &[BBox]) -> f64 {
    let assigned = assign_targets(&regions.anchors, gt_boxes, super::POSITIVE_IOU);
    localization_loss_with_grad(regions, &assigned, gt_boxes).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: usize, cols: usize, scores: Vec<f64>) -> AlignmentMatrix<f64> {
        AlignmentMatrix { rows, cols, scores }
    }

    #[test]
    fn perfect_alignment_has_tiny_loss() {
        let mut t = BinaryMatrix::zeros(2, 2);
        t.set(0, 1, true);
        t.set(1, 0, true);
        let a = matrix(2, 2, vec![-1e4, 1e4, 1e4, -1e4]);
        assert!(grounding_loss(&a, &t).unwrap() < 1e-4);
    }

    #[test]
    fn single_positive_cell_at_zero_logit_is_ln2() {
        let mut t = BinaryMatrix::zeros(1, 1);
        t.set(0, 0, true);
        let a = matrix(1, 1, vec![0.0]);
        assert!((grounding_loss(&a, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn all_negative_zero_logits_is_ln2() {
        let a = matrix(2, 3, vec![0.0; 6]);
        let t = BinaryMatrix::zeros(2, 3);
        assert!((grounding_loss(&a, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = matrix(2, 3, vec![0.0; 6]);
        let t = BinaryMatrix::zeros(3, 2);
        assert!(matches!(grounding_loss(&a, &t), Err(PgstError::Shape(_))));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let a = matrix(2, 2, vec![0.3, -1.2, 2.0, 0.0]);
        let mut t = BinaryMatrix::zeros(2, 2);
        t.set(0, 0, true);
        t.set(1, 1, true);
        let (_, g) = grounding_loss_with_grad(&a, &t).unwrap();
        for i in 0..4 {
            let mut p = a.clone();
            p.scores[i] += 1e-6;
            let mut m = a.clone();
            m.scores[i] -= 1e-6;
            let fd = (grounding_loss(&p, &t).unwrap() - grounding_loss(&m, &t).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn alignment_is_r_times_w_transpose() {
        let r = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let a = AlignmentMatrix::from_features(&r, &w, 2, 2, 3);
        assert_eq!(a.scores, vec![-2.0, 5.5, -2.0, 16.0]);
    }

    #[test]
    fn every_gt_claims_its_best_anchor() {
        let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 40.0, 40.0)];
        let gt = [BBox::new(5.0, 5.0, 18.0, 18.0)];
        let a = assign_targets(&anchors, &gt, 0.5);
        assert_eq!(a, vec![Some(0), None]);
        assert_eq!(assign_targets(&anchors, &[], 0.5), vec![None, None]);
    }
}
