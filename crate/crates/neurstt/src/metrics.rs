//! Detection metrics: 3-D ROC curves, the derived AUC family, and
//! pixel-level IoU / F1.
//!
//! ROC analysis treats the threshold `τ` as an explicit axis: the curve
//! samples `(τ, FPR(τ), TPR(τ))` for `n_tau` evenly spaced thresholds
//! descending from 1 to 0, with the pixel-level predicate `score ≥ τ`
//! aggregated over all frames. Besides the area under `(FPR, TPR)`,
//! the τ-axis areas give background suppression and target detectability
//! measures:
//!
//! ```text
//! AUC_BS   = AUC_(FPR,TPR) - AUC_(τ,FPR)
//! AUC_TD   = AUC_(FPR,TPR) + AUC_(τ,TPR)
//! AUC_TDBS = AUC_(τ,TPR) - AUC_(τ,FPR)
//! AUC_ODP  = AUC_(FPR,TPR) + AUC_(τ,TPR) - AUC_(τ,FPR)
//! AUC_SNPR = AUC_(τ,TPR) / AUC_(τ,FPR)
//! ```
//!
//! IoU and F1 aggregate TP/FP/FN counts over the whole sequence before
//! taking ratios, matching how single per-sequence values are reported.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor3::{MaskTensor, Tensor3};

/// One threshold sample of the 3-D ROC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocSample<T> {
    pub tau: T,
    pub fpr: T,
    pub tpr: T,
}

/// Sampled `(τ, FPR, TPR)` triples, τ descending from 1 to 0.
#[derive(Debug, Clone)]
pub struct Roc3dCurve<T> {
    pub samples: Vec<RocSample<T>>,
    pub target_pixels: usize,
    pub background_pixels: usize,
}

/// The eight AUC quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucReport<T> {
    pub auc_roc: T,
    pub auc_tau_fpr: T,
    pub auc_tau_tpr: T,
    pub auc_bs: T,
    pub auc_td: T,
    pub auc_tdbs: T,
    pub auc_odp: T,
    /// `+∞` when the false-positive area is exactly zero.
    pub auc_snpr: T,
}

/// Pixel-level ROC over all frames: `TPR = TP/P`, `FPR = FP/N` with the
/// predicate `score ≥ τ`.
pub fn roc3d<T: Scalar>(score: &Tensor3<T>, gt: &MaskTensor, n_tau: usize) -> Result<Roc3dCurve<T>> {
    if score.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "score dims {:?} vs ground-truth dims {:?}",
            score.dims(),
            gt.dims()
        )));
    }
    if n_tau < 2 {
        return Err(Error::usage("roc3d needs at least two thresholds"));
    }
    if score.min_value() < T::zero() || score.max_value() > T::one() {
        return Err(Error::usage("roc3d expects scores normalized to [0,1]"));
    }
    let positives = gt.count_ones();
    let total = score.len();
    let negatives = total - positives;
    if positives == 0 {
        return Err(Error::usage("ground truth has no target pixels"));
    }
    if negatives == 0 {
        return Err(Error::usage("ground truth has no background pixels"));
    }

    let scores = score.data();
    let labels = gt.data();
    let mut samples = Vec::with_capacity(n_tau);
    let denom = T::from_f64_lossy((n_tau - 1) as f64);
    for step in 0..n_tau {
        let tau = T::one() - T::from_f64_lossy(step as f64) / denom;
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &is_target) in scores.iter().zip(labels.iter()) {
            if s >= tau {
                if is_target {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        samples.push(RocSample {
            tau,
            fpr: T::from_f64_lossy(fp as f64 / negatives as f64),
            tpr: T::from_f64_lossy(tp as f64 / positives as f64),
        });
    }
    Ok(Roc3dCurve {
        samples,
        target_pixels: positives,
        background_pixels: negatives,
    })
}

fn trapezoid<T: Scalar>(points: &[(T, T)]) -> T {
    let mut area = T::zero();
    let half = T::from_f64_lossy(0.5);
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area = area + (x1 - x0) * (y0 + y1) * half;
    }
    area
}

/// The four derived quantities and the SNPR ratio from the three base
/// areas; exact arithmetic identities.
pub fn derived_aucs<T: Scalar>(auc_roc: T, auc_tau_fpr: T, auc_tau_tpr: T) -> AucReport<T> {
    AucReport {
        auc_roc,
        auc_tau_fpr,
        auc_tau_tpr,
        auc_bs: auc_roc - auc_tau_fpr,
        auc_td: auc_roc + auc_tau_tpr,
        auc_tdbs: auc_tau_tpr - auc_tau_fpr,
        auc_odp: auc_roc + auc_tau_tpr - auc_tau_fpr,
        auc_snpr: if auc_tau_fpr == T::zero() {
            T::infinity()
        } else {
            auc_tau_tpr / auc_tau_fpr
        },
    }
}

/// Trapezoidal areas of a sampled curve plus the derived quantities.
pub fn auc_family<T: Scalar>(curve: &Roc3dCurve<T>) -> AucReport<T> {
    // (FPR, TPR) sorted by FPR.
    let mut roc_points: Vec<(T, T)> = curve.samples.iter().map(|s| (s.fpr, s.tpr)).collect();
    roc_points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let auc_roc = trapezoid(&roc_points);

    // τ ascending for the τ-axis areas.
    let mut by_tau: Vec<&RocSample<T>> = curve.samples.iter().collect();
    by_tau.sort_by(|a, b| a.tau.partial_cmp(&b.tau).unwrap());
    let fpr_points: Vec<(T, T)> = by_tau.iter().map(|s| (s.tau, s.fpr)).collect();
    let tpr_points: Vec<(T, T)> = by_tau.iter().map(|s| (s.tau, s.tpr)).collect();
    let auc_tau_fpr = trapezoid(&fpr_points);
    let auc_tau_tpr = trapezoid(&tpr_points);

    derived_aucs(auc_roc, auc_tau_fpr, auc_tau_tpr)
}

fn check_mask_dims(pred: &MaskTensor, gt: &MaskTensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction dims {:?} vs ground-truth dims {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Intersection over union across all frames jointly; 1 when both masks
/// are empty.
pub fn iou(pred: &MaskTensor, gt: &MaskTensor) -> Result<f64> {
    check_mask_dims(pred, gt)?;
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p && g {
            intersection += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pixel counts aggregated over all frames; zero denominators give zero
/// scores.
pub fn f1(pred: &MaskTensor, gt: &MaskTensor) -> Result<PixelScores> {
    check_mask_dims(pred, gt)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PixelScores {
        precision,
        recall,
        f1,
    })
}
