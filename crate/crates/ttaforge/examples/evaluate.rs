//! Detection evaluation: greedy matching, per-category AP, PR curves, and
//! the TP/FP score histograms used to visualize how enhancement re-sorts
//! predictions.
//!
//! ```bash
//! cargo run --example evaluate
//! ```

use ttaforge::core::BoundingBox;
use ttaforge::evalkit::{
    average_precision, evaluate, match_detections, tp_fp_histogram, GtRecord, PredictionRecord,
};

fn main() -> ttaforge::Result<()> {
    // hand-built scene: two ground-truth boxes, three detections
    let gt = vec![
        GtRecord {
            image_id: 0,
            box_: BoundingBox::new(10.0, 10.0, 30.0, 30.0)?,
            category: 0,
        },
        GtRecord {
            image_id: 0,
            box_: BoundingBox::new(40.0, 40.0, 60.0, 60.0)?,
            category: 0,
        },
    ];
    let preds = vec![
        PredictionRecord {
            image_id: 0,
            box_: BoundingBox::new(11.0, 10.0, 31.0, 30.0)?,
            score: 0.9,
            category: 0,
        },
        PredictionRecord {
            image_id: 0,
            box_: BoundingBox::new(5.0, 45.0, 25.0, 62.0)?, // stray
            score: 0.75,
            category: 0,
        },
        PredictionRecord {
            image_id: 0,
            box_: BoundingBox::new(41.0, 39.0, 61.0, 59.0)?,
            score: 0.6,
            category: 0,
        },
    ];

    let matched = match_detections(
        &preds.iter().map(|p| (p.box_, p.score)).collect::<Vec<_>>(),
        &gt.iter().map(|g| g.box_).collect::<Vec<_>>(),
        0.5,
    );
    println!("matched (score, is_tp): {matched:?}");
    println!(
        "AP50 = {:?} (TP, FP, TP ranking integrates to 5/6)",
        average_precision(&matched, 2)
    );

    let eval = evaluate(&preds, &gt, 1, 0.5);
    println!(
        "evaluate: gt={} tp={} fp={} ap={:?}",
        eval.per_category[0].gt_count,
        eval.per_category[0].tp_count(),
        eval.per_category[0].fp_count(),
        eval.per_category[0].ap
    );

    let (tp_hist, fp_hist) = tp_fp_histogram(&matched, 10);
    println!("tp histogram over score bins: {tp_hist:?}");
    println!("fp histogram over score bins: {fp_hist:?}");
    Ok(())
}
