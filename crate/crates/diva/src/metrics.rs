//! Evaluation metrics: IoU, bootstrapping IoU (best IoU per ground-truth
//! object), region counting, successful partition counts, and the binary
//! protocol used for two-slot inference. All metrics are invariant to
//! predicted-label permutation.

use crate::error::{DivaError, Result};
use crate::model::types::MaskSet;
use crate::tensor::Real;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Ground-truth object masks; the background is excluded.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    pub masks: Vec<Array2<bool>>,
}

impl InstanceSet {
    /// Extract instances from a label map (label 0 is the background).
    pub fn from_labels(labels: &Array2<u8>) -> Self {
        let max = labels.iter().copied().max().unwrap_or(0);
        let mut masks = Vec::new();
        for l in 1..=max {
            let m = labels.mapv(|v| v == l);
            if m.iter().any(|&b| b) {
                masks.push(m);
            }
        }
        InstanceSet { masks }
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Hard label map plus the soft masks it came from.
#[derive(Debug, Clone)]
pub struct PredictedSegmentation<F: Real> {
    pub labels: Array2<usize>,
    pub soft: MaskSet<F>,
}

impl<F: Real> PredictedSegmentation<F> {
    pub fn from_masks(soft: MaskSet<F>) -> Self {
        let labels = soft.argmax_labels();
        PredictedSegmentation { labels, soft }
    }

    pub fn n(&self) -> usize {
        self.soft.n()
    }

    /// Hard mask of predicted label `i`.
    pub fn hard_mask(&self, i: usize) -> Array2<bool> {
        self.labels.mapv(|l| l == i)
    }
}

/// Intersection over union of two binary masks. Undefined (an error) when
/// both are empty.
pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(DivaError::shape("iou", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(DivaError::InvalidArgument("iou: both masks are empty".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Bootstrapping IoU: every ground-truth object is matched to the predicted
/// segment with the highest IoU (segments may be reused), then averaged.
pub fn biou<F: Real>(pred: &PredictedSegmentation<F>, gt: &InstanceSet) -> Result<f64> {
    if gt.is_empty() {
        return Err(DivaError::InvalidArgument("biou: empty instance set".into()));
    }
    let n = pred.n();
    let hard: Vec<Array2<bool>> = (0..n).map(|i| pred.hard_mask(i)).collect();
    let mut total = 0.0;
    for obj in &gt.masks {
        let mut best = 0.0f64;
        for seg in &hard {
            if seg.iter().any(|&b| b) {
                best = best.max(iou(seg, obj)?);
            }
        }
        total += best;
    }
    Ok(total / gt.masks.len() as f64)
}

/// Number of predicted labels whose area reaches `tau_area` of the frame.
pub fn count_regions<F: Real>(pred: &PredictedSegmentation<F>, tau_area: f64) -> usize {
    let (h, w) = pred.labels.dim();
    let threshold = tau_area * (h * w) as f64;
    let mut areas = vec![0usize; pred.n()];
    for &l in pred.labels.iter() {
        areas[l] += 1;
    }
    areas.iter().filter(|&&a| a as f64 >= threshold).count()
}

/// Successful partition count: how many predictions have a region count equal
/// to the ground truth's.
pub fn spc<F: Real>(
    preds: &[PredictedSegmentation<F>],
    gt_counts: &[usize],
    tau_area: f64,
) -> Result<usize> {
    if preds.len() != gt_counts.len() {
        return Err(DivaError::shape(
            "spc",
            format!("{} ground-truth counts", preds.len()),
            format!("{}", gt_counts.len()),
        ));
    }
    Ok(preds
        .iter()
        .zip(gt_counts.iter())
        .filter(|(p, &g)| count_regions(p, tau_area) == g)
        .count())
}

/// Binary protocol: with two predicted masks, score the one that best matches
/// the ground-truth foreground. Label-flip invariant by construction.
pub fn binary_protocol_iou<F: Real>(pred: &PredictedSegmentation<F>, gt_fg: &Array2<bool>) -> Result<f64> {
    if pred.n() != 2 {
        return Err(DivaError::InvalidArgument(format!(
            "binary_protocol_iou: expected 2 predicted masks, got {}",
            pred.n()
        )));
    }
    let mut best = 0.0f64;
    for i in 0..2 {
        let m = pred.hard_mask(i);
        if m.iter().any(|&b| b) || gt_fg.iter().any(|&b| b) {
            best = best.max(iou(&m, gt_fg)?);
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// result emission

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample: usize,
    pub metric: String,
    pub value: f64,
}

/// Append records as JSON lines.
pub fn write_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Plain-text aggregate: mean of every metric across samples.
pub fn summary_table(records: &[MetricRecord]) -> String {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(&r.metric).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    let mut out = String::from("metric                       mean        n\n");
    for (name, (sum, n)) in sums {
        out.push_str(&format!("{name:<24} {:>9.4} {n:>8}\n", sum / n as f64));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn seg_from_labels(labels: Array2<usize>, n: usize) -> PredictedSegmentation<f64> {
        let (h, w) = labels.dim();
        let masks = Array3::from_shape_fn((n, h, w), |(i, y, x)| {
            if labels[[y, x]] == i {
                1.0
            } else {
                0.0
            }
        });
        PredictedSegmentation { labels, soft: MaskSet { masks } }
    }

    #[test]
    fn iou_trivial_and_counted_cases() {
        let a = Array2::from_shape_fn((4, 4), |(y, _)| y < 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = Array2::from_shape_fn((4, 4), |(y, _)| y >= 2);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);

        // |a| = 4, |b| = 4, |overlap| = 2 -> 2/6
        let a = Array2::from_shape_fn((4, 4), |(y, x)| y == 0 && x < 4);
        let b = Array2::from_shape_fn((4, 4), |(y, x)| (y == 0 && x >= 2) || (y == 1 && x < 2));
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);

        let empty = Array2::from_elem((4, 4), false);
        assert!(iou(&empty, &empty).is_err());
    }

    #[test]
    fn biou_perfect_match_and_single_blob_closed_form() {
        // prediction identical to ground truth
        let labels = Array2::from_shape_fn((4, 4), |(y, _)| usize::from(y >= 2));
        let pred = seg_from_labels(labels, 2);
        let mut gt_labels = Array2::<u8>::zeros((4, 4));
        for y in 2..4 {
            for x in 0..4 {
                gt_labels[[y, x]] = 1;
            }
        }
        let gt = InstanceSet::from_labels(&gt_labels);
        assert_eq!(biou(&pred, &gt).unwrap(), 1.0);

        // one predicted segment covering everything, two gt objects of sizes
        // a and b in a frame of size s: mean(a/s, b/s)
        let pred_all = seg_from_labels(Array2::zeros((4, 4)), 1);
        let mut gt2 = Array2::<u8>::zeros((4, 4));
        gt2[[0, 0]] = 1; // a = 1
        gt2[[1, 0]] = 2;
        gt2[[1, 1]] = 2;
        gt2[[1, 2]] = 2; // b = 3
        let gt2 = InstanceSet::from_labels(&gt2);
        let expect = (1.0 / 16.0 + 3.0 / 16.0) / 2.0;
        assert!((biou(&pred_all, &gt2).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn count_regions_respects_area_threshold() {
        let uniform = seg_from_labels(Array2::zeros((10, 10)), 4);
        assert_eq!(count_regions(&uniform, 0.005), 1);

        // 4 labels in four quadrants, all large
        let quad = Array2::from_shape_fn((10, 10), |(y, x)| usize::from(y >= 5) * 2 + usize::from(x >= 5));
        assert_eq!(count_regions(&seg_from_labels(quad, 4), 0.005), 4);

        // one label at 0.1% area (1 px of 1000) with tau = 0.5%
        let mut labels = Array2::zeros((20, 50));
        labels[[0, 0]] = 1;
        for x in 0..25 {
            labels[[10, x]] = 2;
            labels[[11, x]] = 3;
        }
        assert_eq!(count_regions(&seg_from_labels(labels, 4), 0.005), 3);
    }

    #[test]
    fn spc_counts_matching_cases() {
        let quad = Array2::from_shape_fn((10, 10), |(y, x)| usize::from(y >= 5) * 2 + usize::from(x >= 5));
        let p4 = seg_from_labels(quad, 4);
        let p1 = seg_from_labels(Array2::zeros((10, 10)), 4);
        let preds = vec![p4.clone(), p1.clone(), p4];
        assert_eq!(spc(&preds, &[4, 1, 4], 0.005).unwrap(), 3);
        assert_eq!(spc(&preds, &[2, 3, 2], 0.005).unwrap(), 0);
        assert!(spc(&preds, &[1, 2], 0.005).is_err());
    }

    #[test]
    fn binary_protocol_is_label_flip_invariant() {
        let labels = Array2::from_shape_fn((4, 4), |(y, _)| usize::from(y >= 2));
        let flipped = labels.mapv(|l| 1 - l);
        let gt = Array2::from_shape_fn((4, 4), |(y, _)| y >= 2);
        let p1 = seg_from_labels(labels, 2);
        let p2 = seg_from_labels(flipped, 2);
        assert_eq!(binary_protocol_iou(&p1, &gt).unwrap(), 1.0);
        assert_eq!(binary_protocol_iou(&p2, &gt).unwrap(), 1.0);

        // prediction = complement of gt on one mask: still scored via the better mask
        let half = Array2::from_shape_fn((4, 4), |(y, _)| usize::from(y >= 1));
        let p3 = seg_from_labels(half, 2);
        let v = binary_protocol_iou(&p3, &gt).unwrap();
        // mask 1 covers rows 1..4, gt covers rows 2..4: iou = 8/12
        assert!((v - 8.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn checker_pattern_matches_pixel_enumeration() {
        let checker = Array2::from_shape_fn((4, 4), |(y, x)| (y + x) % 2);
        let gt = Array2::from_shape_fn((4, 4), |(y, _)| y < 2);
        let pred = seg_from_labels(checker, 2);
        // brute force both candidate masks
        let mut best = 0.0f64;
        for i in 0..2 {
            let mut inter = 0;
            let mut uni = 0;
            for y in 0..4 {
                for x in 0..4 {
                    let p = (y + x) % 2 == i;
                    let g = gt[[y, x]];
                    inter += (p && g) as usize;
                    uni += (p || g) as usize;
                }
            }
            best = best.max(inter as f64 / uni as f64);
        }
        assert_eq!(binary_protocol_iou(&pred, &gt).unwrap(), best);
    }

    #[test]
    fn metrics_are_invariant_to_label_permutation() {
        let labels = Array2::from_shape_fn((6, 6), |(y, x)| (y / 2 + x / 3) % 3);
        let permuted = labels.mapv(|l| [2, 0, 1][l]);
        let mut gt_labels = Array2::<u8>::zeros((6, 6));
        for y in 0..3 {
            for x in 0..3 {
                gt_labels[[y, x]] = 1;
            }
        }
        let gt = InstanceSet::from_labels(&gt_labels);
        let p1 = seg_from_labels(labels, 3);
        let p2 = seg_from_labels(permuted, 3);
        assert_eq!(biou(&p1, &gt).unwrap(), biou(&p2, &gt).unwrap());
        assert_eq!(count_regions(&p1, 0.01), count_regions(&p2, 0.01));
    }
}
