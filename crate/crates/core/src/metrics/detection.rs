use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geom::Rect;

/// A scored prediction in COCO result layout (`bbox` is `[x, y, w, h]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f64; 4],
}

fn rect(b: &[f64; 4]) -> Rect {
    Rect::new(b[0], b[1], b[2], b[3])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// Average precision per category that has ground truth.
    pub avp: BTreeMap<usize, f64>,
    pub map: f64,
    /// Mean IOU over matched prediction/ground-truth pairs; 0 without matches.
    pub mean_iou: f64,
}

/// Area under the all-points interpolated precision/recall curve.
///
/// `hits` lists, in descending score order, whether each prediction matched.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Greedy score-ordered matching per image and category.
///
/// Each prediction claims the unmatched ground-truth box of its category
/// with the highest IOU, provided that IOU reaches `iou_thresh`.
pub fn detection_metrics(preds: &[ScoredBox], gts: &[GroundTruthBox], iou_thresh: f64) -> DetectionMetrics {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.category_id).collect();
    let mut avp = BTreeMap::new();
    let mut ious = Vec::new();
    for &class in &classes {
        let class_gts: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.category_id == class).collect();
        let mut order: Vec<&ScoredBox> = preds.iter().filter(|p| p.category_id == class).collect();
        // Stable sort keeps input order among equal scores.
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used = vec![false; class_gts.len()];
        let mut hits = Vec::with_capacity(order.len());
        for p in order {
            let pr = rect(&p.bbox);
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in class_gts.iter().enumerate() {
                if used[gi] || g.image_id != p.image_id {
                    continue;
                }
                let iou = pr.iou_or_zero(&rect(&g.bbox));
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, iou)) => {
                    used[gi] = true;
                    ious.push(iou);
                    hits.push(true);
                }
                None => hits.push(false),
            }
        }
        avp.insert(class, average_precision(&hits, class_gts.len()));
    }
    let map = if avp.is_empty() {
        0.0
    } else {
        avp.values().sum::<f64>() / avp.len() as f64
    };
    let mean_iou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    DetectionMetrics { avp, map, mean_iou }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image_id: u64, c: usize, b: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            image_id,
            category_id: c,
            bbox: b,
        }
    }

    fn pred(image_id: u64, c: usize, b: [f64; 4], score: f64) -> ScoredBox {
        ScoredBox {
            image_id,
            category_id: c,
            bbox: b,
            score,
        }
    }

    #[test]
    fn perfect_predictions() {
        let gts = vec![gt(1, 0, [0.0, 0.0, 4.0, 4.0]), gt(2, 1, [3.0, 3.0, 2.0, 5.0])];
        let preds: Vec<ScoredBox> = gts
            .iter()
            .map(|g| pred(g.image_id, g.category_id, g.bbox, 0.9))
            .collect();
        let m = detection_metrics(&preds, &gts, 0.5);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.mean_iou, 1.0);
    }

    #[test]
    fn no_predictions() {
        let gts = vec![gt(1, 0, [0.0, 0.0, 4.0, 4.0])];
        let m = detection_metrics(&[], &gts, 0.5);
        assert_eq!(m.map, 0.0);
        assert_eq!(detection_metrics(&[], &[], 0.5).map, 0.0);
    }

    #[test]
    fn interpolation_hand_case() {
        // Hits T F T over 2 positives: recall 0.5 at p=1, recall 1 at p=2/3.
        assert!((average_precision(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        // Envelope lifts the early precision dip.
        assert!((average_precision(&[false, true, true], 2) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_image_does_not_match() {
        let gts = vec![gt(1, 0, [0.0, 0.0, 4.0, 4.0])];
        let preds = vec![pred(2, 0, [0.0, 0.0, 4.0, 4.0], 0.9)];
        assert_eq!(detection_metrics(&preds, &gts, 0.5).map, 0.0);
    }
}
