//! Detection evaluation: greedy matching, average precision, PR curves, and
//! TP/FP score histograms.

use std::fs;
use std::path::Path;

use crate::core::{iou, BoundingBox, CategorySpace};
use crate::error::{Result, TtaError};

/// One prediction, already in original-image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub box_: BoundingBox,
    pub score: f64,
    pub category: usize,
}

/// One ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct GtRecord {
    pub image_id: u64,
    pub box_: BoundingBox,
    pub category: usize,
}

/// Greedy matching for one image and one category: detections in
/// descending-score order (ties keep input order) claim their best-IoU
/// unmatched ground-truth box when that IoU reaches the threshold.
pub fn match_detections(
    detections: &[(BoundingBox, f64)],
    ground_truth: &[BoundingBox],
    iou_thresh: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|a, b| detections[*b].1.partial_cmp(&detections[*a].1).unwrap());
    let mut consumed = vec![false; ground_truth.len()];
    let mut out = Vec::with_capacity(detections.len());
    for idx in order {
        let (b, score) = &detections[idx];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if consumed[g] {
                continue;
            }
            let v = iou(b, gt);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        let is_tp = match best {
            Some((g, v)) if v >= iou_thresh => {
                consumed[g] = true;
                true
            }
            _ => false,
        };
        out.push((*score, is_tp));
    }
    out
}

/// All-points interpolated average precision.
///
/// Records are `(score, is_tp)` pairs across the whole stream. Returns
/// `None` when there is nothing to measure (no ground truth and no
/// detections); zero ground truth with detections scores 0.
pub fn average_precision(records: &[(f64, bool)], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return if records.is_empty() { None } else { Some(0.0) };
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let n = sorted.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, (_, is_tp)) in sorted.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }

    // Precision envelope from the right, then sum area over recall steps.
    let mut envelope = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * envelope[i];
            prev_recall = recall[i];
        }
    }
    Some(ap)
}

/// Score-binned TP and FP counts over `[0, 1]`; scores above 1 (possible
/// after enhancement) land in the top bin.
pub fn tp_fp_histogram(records: &[(f64, bool)], bins: usize) -> (Vec<u64>, Vec<u64>) {
    assert!(bins >= 1);
    let mut tp = vec![0u64; bins];
    let mut fp = vec![0u64; bins];
    for (score, is_tp) in records {
        let idx = ((score * bins as f64).floor() as usize).min(bins - 1);
        if *is_tp {
            tp[idx] += 1;
        } else {
            fp[idx] += 1;
        }
    }
    (tp, fp)
}

#[derive(Debug, Clone)]
pub struct CategoryEval {
    pub gt_count: usize,
    pub records: Vec<(f64, bool)>,
    pub ap: Option<f64>,
}

impl CategoryEval {
    pub fn tp_count(&self) -> usize {
        self.records.iter().filter(|(_, t)| *t).count()
    }

    pub fn fp_count(&self) -> usize {
        self.records.len() - self.tp_count()
    }
}

/// Matched records, per-category AP, and the mean over defined categories.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub iou_thresh: f64,
    pub per_category: Vec<CategoryEval>,
    pub mean_ap: Option<f64>,
}

/// Match every (image, category) group and aggregate.
pub fn evaluate(
    predictions: &[PredictionRecord],
    ground_truth: &[GtRecord],
    num_categories: usize,
    iou_thresh: f64,
) -> EvalRecord {
    let mut image_ids: Vec<u64> = ground_truth
        .iter()
        .map(|g| g.image_id)
        .chain(predictions.iter().map(|p| p.image_id))
        .collect();
    image_ids.sort_unstable();
    image_ids.dedup();

    let mut per_category = Vec::with_capacity(num_categories);
    for c in 0..num_categories {
        let mut records = Vec::new();
        let mut gt_count = 0usize;
        for img in &image_ids {
            let dets: Vec<(BoundingBox, f64)> = predictions
                .iter()
                .filter(|p| p.image_id == *img && p.category == c)
                .map(|p| (p.box_, p.score))
                .collect();
            let gts: Vec<BoundingBox> = ground_truth
                .iter()
                .filter(|g| g.image_id == *img && g.category == c)
                .map(|g| g.box_)
                .collect();
            gt_count += gts.len();
            records.extend(match_detections(&dets, &gts, iou_thresh));
        }
        let ap = average_precision(&records, gt_count);
        per_category.push(CategoryEval {
            gt_count,
            records,
            ap,
        });
    }
    let defined: Vec<f64> = per_category.iter().filter_map(|c| c.ap).collect();
    let mean_ap = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    EvalRecord {
        iou_thresh,
        per_category,
        mean_ap,
    }
}

/// Mean AP over IoU thresholds 0.50..=0.95 in steps of 0.05.
pub fn map_over_iou_range(
    predictions: &[PredictionRecord],
    ground_truth: &[GtRecord],
    num_categories: usize,
) -> Option<f64> {
    let mut values = Vec::new();
    for i in 0..10 {
        let thresh = 0.5 + 0.05 * i as f64;
        if let Some(m) = evaluate(predictions, ground_truth, num_categories, thresh).mean_ap {
            values.push(m);
        }
    }
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn fmt_ap(ap: Option<f64>) -> String {
    match ap {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

/// Per-category metrics CSV with an `all` summary row.
pub fn write_metrics_csv(path: &Path, eval: &EvalRecord, categories: &CategorySpace) -> Result<()> {
    let mut out = String::from("category,gt_count,tp,fp,ap50\n");
    let mut total_gt = 0;
    let mut total_tp = 0;
    let mut total_fp = 0;
    for (c, e) in eval.per_category.iter().enumerate() {
        total_gt += e.gt_count;
        total_tp += e.tp_count();
        total_fp += e.fp_count();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            categories.name(c),
            e.gt_count,
            e.tp_count(),
            e.fp_count(),
            fmt_ap(e.ap)
        ));
    }
    out.push_str(&format!(
        "all,{},{},{},{}\n",
        total_gt,
        total_tp,
        total_fp,
        fmt_ap(eval.mean_ap)
    ));
    fs::write(path, out).map_err(|e| TtaError::io(path, e))
}

/// Precision/recall points per category, one row per detection rank.
pub fn write_pr_csv(path: &Path, eval: &EvalRecord, categories: &CategorySpace) -> Result<()> {
    let mut out = String::from("category,score,recall,precision\n");
    for (c, e) in eval.per_category.iter().enumerate() {
        if e.gt_count == 0 {
            continue;
        }
        let mut sorted = e.records.clone();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut tp = 0usize;
        for (i, (score, is_tp)) in sorted.iter().enumerate() {
            if *is_tp {
                tp += 1;
            }
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                categories.name(c),
                score,
                tp as f64 / e.gt_count as f64,
                tp as f64 / (i + 1) as f64
            ));
        }
    }
    fs::write(path, out).map_err(|e| TtaError::io(path, e))
}

/// TP/FP histogram CSV for before/after-enhancement comparisons.
pub fn write_histogram_csv(path: &Path, tp: &[u64], fp: &[u64]) -> Result<()> {
    assert_eq!(tp.len(), fp.len());
    let bins = tp.len();
    let mut out = String::from("bin_lo,bin_hi,tp,fp\n");
    for i in 0..bins {
        out.push_str(&format!(
            "{:.4},{:.4},{},{}\n",
            i as f64 / bins as f64,
            (i + 1) as f64 / bins as f64,
            tp[i],
            fp[i]
        ));
    }
    fs::write(path, out).map_err(|e| TtaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn single_exact_match_is_tp() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![(bx(0.0, 0.0, 10.0, 10.0), 0.9)];
        assert_eq!(match_detections(&dets, &gt, 0.5), vec![(0.9, true)]);
    }

    #[test]
    fn ground_truth_is_consumed_once() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![
            (bx(0.0, 0.0, 10.0, 10.0), 0.6),
            (bx(0.0, 0.0, 10.0, 10.0), 0.8),
        ];
        let m = match_detections(&dets, &gt, 0.5);
        assert_eq!(m, vec![(0.8, true), (0.6, false)]);
    }

    #[test]
    fn iou_below_threshold_is_fp() {
        // 10x10 overlapping 10x10 shifted: IoU = 49/151 < 0.5
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![(bx(3.0, 3.0, 13.0, 13.0), 0.9)];
        let m = match_detections(&dets, &gt, 0.5);
        assert_eq!(m, vec![(0.9, false)]);
        // exactly at threshold counts
        let at = vec![(bx(0.0, 0.0, 10.0, 5.0), 0.9)];
        let m2 = match_detections(&at, &gt, 0.5);
        assert_eq!(m2, vec![(0.9, true)]);
    }

    #[test]
    fn ap_single_tp_is_one() {
        assert_eq!(average_precision(&[(0.9, true)], 1), Some(1.0));
    }

    #[test]
    fn ap_tp_then_fp_is_one() {
        let ap = average_precision(&[(0.9, true), (0.8, false)], 1).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_fp_then_tp_is_half() {
        let ap = average_precision(&[(0.9, false), (0.8, true)], 1).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn ap_undefined_vs_zero_for_empty_gt() {
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[(0.5, false)], 0), Some(0.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
    }

    #[test]
    fn ap_depends_only_on_ranking() {
        let base = vec![(0.9, true), (0.7, false), (0.6, true), (0.2, false)];
        let squashed: Vec<(f64, bool)> = base
            .iter()
            .map(|(s, t)| (s * s * 0.3 + 0.01, *t)) // strictly monotone
            .collect();
        assert_eq!(average_precision(&base, 2), average_precision(&squashed, 2));
    }

    #[test]
    fn histogram_conserves_counts() {
        let recs = vec![(0.95, true), (1.7, true), (0.2, false), (0.5, false)];
        let (tp, fp) = tp_fp_histogram(&recs, 10);
        assert_eq!(tp.iter().sum::<u64>(), 2);
        assert_eq!(fp.iter().sum::<u64>(), 2);
        assert_eq!(tp[9], 2, "score 1.7 extends the top bin");
        let (tp0, fp0) = tp_fp_histogram(&[], 4);
        assert!(tp0.iter().all(|v| *v == 0) && fp0.iter().all(|v| *v == 0));
    }

    #[test]
    fn evaluate_groups_by_image_and_category() {
        let gts = vec![
            GtRecord {
                image_id: 0,
                box_: bx(0.0, 0.0, 10.0, 10.0),
                category: 0,
            },
            GtRecord {
                image_id: 1,
                box_: bx(5.0, 5.0, 15.0, 15.0),
                category: 1,
            },
        ];
        let preds = vec![
            PredictionRecord {
                image_id: 0,
                box_: bx(0.0, 0.0, 10.0, 10.0),
                score: 0.9,
                category: 0,
            },
            // right box, wrong image: FP
            PredictionRecord {
                image_id: 1,
                box_: bx(0.0, 0.0, 10.0, 10.0),
                score: 0.8,
                category: 0,
            },
            PredictionRecord {
                image_id: 1,
                box_: bx(5.0, 5.0, 15.0, 15.0),
                score: 0.7,
                category: 1,
            },
        ];
        let eval = evaluate(&preds, &gts, 3, 0.5);
        assert_eq!(eval.per_category[0].tp_count(), 1);
        assert_eq!(eval.per_category[0].fp_count(), 1);
        assert_eq!(eval.per_category[1].ap, Some(1.0));
        assert_eq!(eval.per_category[2].ap, None, "unused category excluded");
        // mean over the two defined categories
        let m = eval.mean_ap.unwrap();
        let ap0 = eval.per_category[0].ap.unwrap();
        assert!((m - (ap0 + 1.0) / 2.0).abs() < 1e-12);
    }
}
