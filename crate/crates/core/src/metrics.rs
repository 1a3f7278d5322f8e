//! Detection AP / mAP and mined-box quality.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::mining::MinedBox;
use crate::model::{detect, DetectorParams, ModelConfig, VariantFlags};
use crate::scene::{Category, Dataset, ImageId, LabeledBox};

/// IoU thresholds 0.50, 0.55, .., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image_id: ImageId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image_id: ImageId,
    pub bbox: BBox,
}

/// Greedy matching in score order (ties by input index). A detection takes
/// the unmatched groundtruth of the same image with the highest IoU, lower
/// index on ties, and is a true positive iff that IoU reaches `threshold`.
pub fn greedy_match(detections: &[ScoredBox], gts: &[GtBox], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut by_image: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(j);
    }
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; detections.len()];
    for i in order {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for &j in by_image.get(&d.image_id).map_or(&[][..], |v| v.as_slice()) {
            if used[j] {
                continue;
            }
            let v = iou(&d.bbox, &gts[j].bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= threshold {
                used[j] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// 101-point interpolated AP of one category.
///
/// With no groundtruth the AP is 1 when there are no detections and 0 otherwise.
pub fn average_precision_multi(detections: &[ScoredBox], gts: &[GtBox], threshold: f64) -> f64 {
    if gts.is_empty() {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    let tp = greedy_match(detections, gts, threshold);
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));

    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if tp[i] {
            hits += 1;
        }
        recall.push(hits as f64 / gts.len() as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // precision envelope, non-increasing in recall
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recall.len() && recall[k] < level - 1e-12 {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// AP on a single image.
pub fn average_precision(detections: &[(BBox, f64)], gts: &[BBox], threshold: f64) -> f64 {
    let d: Vec<ScoredBox> = detections
        .iter()
        .map(|&(bbox, score)| ScoredBox {
            image_id: 0,
            bbox,
            score,
        })
        .collect();
    let g: Vec<GtBox> = gts.iter().map(|&bbox| GtBox { image_id: 0, bbox }).collect();
    average_precision_multi(&d, &g, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    /// Mean over categories of the AP averaged over the ten thresholds.
    pub map_50_95: f64,
    pub map_50: f64,
    /// Per-category `(ap@0.5, ap@[0.5:0.95])` for categories with groundtruth.
    pub per_category: BTreeMap<Category, (f64, f64)>,
}

/// Mean AP over `thresholds`, averaged over thresholds first and then over
/// the categories that have groundtruth.
pub fn map_at(
    detections: &BTreeMap<Category, Vec<ScoredBox>>,
    gts: &BTreeMap<Category, Vec<GtBox>>,
    thresholds: &[f64],
) -> f64 {
    let per: Vec<f64> = gts
        .iter()
        .filter(|(_, g)| !g.is_empty())
        .map(|(c, g)| {
            let d = detections.get(c).map_or(&[][..], |v| v.as_slice());
            thresholds.iter().map(|&t| average_precision_multi(d, g, t)).sum::<f64>() / thresholds.len() as f64
        })
        .collect();
    if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    }
}

pub fn map_sweep(
    detections: &BTreeMap<Category, Vec<ScoredBox>>,
    gts: &BTreeMap<Category, Vec<GtBox>>,
) -> MapResult {
    let thresholds = coco_thresholds();
    let mut per_category = BTreeMap::new();
    for (c, g) in gts.iter().filter(|(_, g)| !g.is_empty()) {
        let d = detections.get(c).map_or(&[][..], |v| v.as_slice());
        let ap50 = average_precision_multi(d, g, 0.5);
        let ap = thresholds.iter().map(|&t| average_precision_multi(d, g, t)).sum::<f64>() / 10.0;
        per_category.insert(*c, (ap50, ap));
    }
    let n = per_category.len().max(1) as f64;
    MapResult {
        map_50_95: per_category.values().map(|v| v.1).sum::<f64>() / n,
        map_50: per_category.values().map(|v| v.0).sum::<f64>() / n,
        per_category,
    }
}

/// Detects on every scene and scores against its groundtruth.
pub fn evaluate_detector(
    dataset: &Dataset,
    params: &DetectorParams,
    flags: &VariantFlags,
    cfg: &ModelConfig,
) -> Result<MapResult> {
    let mut dets: BTreeMap<Category, Vec<ScoredBox>> = BTreeMap::new();
    let mut gts: BTreeMap<Category, Vec<GtBox>> = BTreeMap::new();
    for scene in &dataset.scenes {
        for g in &scene.gt {
            gts.entry(g.category).or_default().push(GtBox {
                image_id: scene.image_id,
                bbox: g.bbox,
            });
        }
        for d in detect(scene, params, flags, cfg)? {
            dets.entry(d.category).or_default().push(ScoredBox {
                image_id: scene.image_id,
                bbox: d.bbox,
                score: d.score,
            });
        }
    }
    Ok(map_sweep(&dets, &gts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MiningQuality {
    pub true_positive_count: usize,
    pub mined_count: usize,
    pub gt_count: usize,
    pub precision: f64,
    pub recall: f64,
}

impl MiningQuality {
    pub fn from_counts(true_positive_count: usize, mined_count: usize, gt_count: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            true_positive_count,
            mined_count,
            gt_count,
            precision: ratio(true_positive_count, mined_count),
            recall: ratio(true_positive_count, gt_count),
        }
    }
}

/// Mined boxes scored against the withheld boxes of the weak images.
///
/// A mined box is a true positive when greedy matching (by score) pairs it
/// with a same-category groundtruth box at IoU ≥ `tp_iou`. Every box in
/// `withheld` counts towards recall.
pub fn mined_box_quality(
    mined: &BTreeMap<ImageId, Vec<MinedBox>>,
    withheld: &BTreeMap<ImageId, Vec<LabeledBox>>,
    tp_iou: f64,
) -> MiningQuality {
    let mut by_cat_dets: BTreeMap<Category, Vec<ScoredBox>> = BTreeMap::new();
    let mut by_cat_gts: BTreeMap<Category, Vec<GtBox>> = BTreeMap::new();
    for m in mined.values().flatten() {
        by_cat_dets.entry(m.category).or_default().push(ScoredBox {
            image_id: m.image_id,
            bbox: m.bbox,
            score: m.score,
        });
    }
    let mut gt_count = 0;
    for (&image_id, boxes) in withheld {
        gt_count += boxes.len();
        for g in boxes {
            by_cat_gts
                .entry(g.category)
                .or_default()
                .push(GtBox { image_id, bbox: g.bbox });
        }
    }
    let mut tp = 0;
    let mut count = 0;
    for (c, dets) in &by_cat_dets {
        count += dets.len();
        let g = by_cat_gts.get(c).map_or(&[][..], |v| v.as_slice());
        tp += greedy_match(dets, g, tp_iou).iter().filter(|t| **t).count();
    }
    MiningQuality::from_counts(tp, count, gt_count)
}

/// One mined-box table cell: count and precision in percent, e.g. `21542, 90.0`.
pub fn format_count_precision(count: usize, precision: f64) -> String {
    format!("{count}, {:.1}", precision * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Step-by-step PR curve and interpolation written independently.
    fn oracle_ap(tp_in_rank_order: &[bool], n_gt: usize) -> f64 {
        let mut points = Vec::new();
        let mut hits = 0.0;
        for (k, &t) in tp_in_rank_order.iter().enumerate() {
            if t {
                hits += 1.0;
            }
            points.push((hits / n_gt as f64, hits / (k as f64 + 1.0)));
        }
        let mut total = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let best = points
                .iter()
                .filter(|(rec, _)| *rec >= level - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            total += best;
        }
        total / 101.0
    }

    #[test]
    fn ap_examples() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(average_precision(&[(gt, 0.9)], &[gt], 0.5), 1.0);
        let far = b(20.0, 20.0, 30.0, 30.0);
        let ap = average_precision(&[(far, 0.9), (gt, 0.8)], &[gt], 0.5);
        assert!((ap - 0.5).abs() < 1e-9);
        assert!((ap - oracle_ap(&[false, true], 1)).abs() < 1e-9);
        assert_eq!(average_precision(&[], &[gt], 0.5), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision(&[(gt, 0.5)], &[], 0.5), 0.0);
    }

    #[test]
    fn ap_hand_built_ranking() {
        // ranks: TP, FP, TP, FP, TP over four groundtruths
        let gts: Vec<BBox> = (0..4).map(|i| b(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0)).collect();
        let miss = b(0.0, 50.0, 10.0, 60.0);
        let dets = vec![(gts[0], 0.9), (miss, 0.8), (gts[1], 0.7), (miss, 0.6), (gts[2], 0.5)];
        let ap = average_precision(&dets, &gts, 0.5);
        assert!((ap - oracle_ap(&[true, false, true, false, true], 4)).abs() < 1e-9);
        // closed form: recall levels 0..=0.25 → 1, ..=0.5 → 2/3, ..=0.75 → 3/5, above → 0
        let expected = (26.0 * 1.0 + 25.0 * 2.0 / 3.0 + 25.0 * 0.6) / 101.0;
        assert!((ap - expected).abs() < 1e-9);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let tp = greedy_match(
            &[
                ScoredBox { image_id: 0, bbox: gt, score: 0.9 },
                ScoredBox { image_id: 0, bbox: gt, score: 0.8 },
            ],
            &[GtBox { image_id: 0, bbox: gt }],
            0.5,
        );
        assert_eq!(tp, vec![true, false]);
    }

    #[test]
    fn sweep_examples() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        // IoU 0.6 exactly: width 10 vs shifted box sharing 7.5/12.5
        let shifted = b(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&gt, &shifted) - 0.6).abs() < 1e-12);
        let mut dets = BTreeMap::new();
        let mut gts = BTreeMap::new();
        for c in 1..=3u32 {
            dets.insert(c, vec![ScoredBox { image_id: c as u64, bbox: shifted, score: 0.9 }]);
            gts.insert(c, vec![GtBox { image_id: c as u64, bbox: gt }]);
        }
        let r = map_sweep(&dets, &gts);
        assert!((r.map_50 - 1.0).abs() < 1e-12);
        assert!((r.map_50_95 - 0.3).abs() < 1e-9);
        assert_eq!(map_at(&dets, &gts, &[0.5]), r.map_50);

        let perfect: BTreeMap<_, _> = gts
            .iter()
            .map(|(c, g)| (*c, vec![ScoredBox { image_id: g[0].image_id, bbox: gt, score: 1.0 }]))
            .collect();
        let r = map_sweep(&perfect, &gts);
        assert_eq!((r.map_50, r.map_50_95), (1.0, 1.0));

        // a category without groundtruth is excluded
        let mut extra = perfect.clone();
        extra.insert(9, vec![ScoredBox { image_id: 0, bbox: gt, score: 0.3 }]);
        assert_eq!(map_sweep(&extra, &gts).map_50, 1.0);
    }

    fn mined(image_id: ImageId, category: Category, score: f64, bbox: BBox) -> MinedBox {
        MinedBox { image_id, category, score, bbox, iteration: 1 }
    }

    #[test]
    fn quality_examples() {
        let boxes: Vec<BBox> = (0..6).map(|i| b(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0)).collect();
        let withheld = BTreeMap::from([(1u64, boxes.iter().map(|&bb| LabeledBox::new(bb, 4)).collect::<Vec<_>>())]);
        let m = BTreeMap::from([(
            1u64,
            vec![
                mined(1, 4, 0.99, boxes[0]),
                mined(1, 4, 0.99, boxes[1]),
                mined(1, 4, 0.99, boxes[2]),
                mined(1, 5, 0.99, boxes[3]),
            ],
        )]);
        let q = mined_box_quality(&m, &withheld, 0.5);
        assert_eq!((q.true_positive_count, q.mined_count, q.gt_count), (3, 4, 6));
        assert_eq!((q.precision, q.recall), (0.75, 0.5));
        let empty = mined_box_quality(&BTreeMap::new(), &withheld, 0.5);
        assert_eq!((empty.precision, empty.recall), (0.0, 0.0));
        assert_eq!(format_count_precision(21542, 0.900), "21542, 90.0");
    }

    /// Greedy matching re-derived by repeatedly taking the globally best
    /// remaining detection and scanning all gts.
    fn oracle_tp(dets: &[ScoredBox], gts: &[GtBox], thr: f64) -> usize {
        let mut remaining: Vec<usize> = (0..dets.len()).collect();
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        while !remaining.is_empty() {
            let pos = (0..remaining.len())
                .max_by(|&a, &b| {
                    dets[remaining[a]]
                        .score
                        .total_cmp(&dets[remaining[b]].score)
                        .then(remaining[b].cmp(&remaining[a]))
                })
                .unwrap();
            let d = dets[remaining.remove(pos)];
            let mut cand: Vec<(f64, usize)> = gts
                .iter()
                .enumerate()
                .filter(|(j, g)| !used[*j] && g.image_id == d.image_id)
                .map(|(j, g)| (iou(&d.bbox, &g.bbox), j))
                .collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            if let Some(&(v, j)) = cand.first() {
                if v >= thr {
                    used[j] = true;
                    tp += 1;
                }
            }
        }
        tp
    }

    fn arb_scored() -> impl Strategy<Value = (u64, BBox, f64)> {
        (0u64..2, 0u32..12, 0u32..12, 1u32..8, 1u32..8, 0u32..5)
            .prop_map(|(img, x, y, w, h, s)| (img, b(x as f64, y as f64, (x + w) as f64, (y + h) as f64), s as f64 / 4.0))
    }

    proptest! {
        #[test]
        fn greedy_matches_oracle(
            d in prop::collection::vec(arb_scored(), 0..8),
            g in prop::collection::vec(arb_scored(), 0..8),
        ) {
            let dets: Vec<ScoredBox> = d.iter().map(|&(image_id, bbox, score)| ScoredBox { image_id, bbox, score }).collect();
            let gts: Vec<GtBox> = g.iter().map(|&(image_id, bbox, _)| GtBox { image_id, bbox }).collect();
            let tp = greedy_match(&dets, &gts, 0.5).iter().filter(|t| **t).count();
            prop_assert_eq!(tp, oracle_tp(&dets, &gts, 0.5));
            prop_assert!(tp <= dets.len().min(gts.len()));
        }

        #[test]
        fn ap_rank_only(
            d in prop::collection::vec(arb_scored(), 0..10),
            g in prop::collection::vec(arb_scored(), 1..6),
        ) {
            let dets: Vec<ScoredBox> = d.iter().enumerate()
                .map(|(i, &(image_id, bbox, _))| ScoredBox { image_id, bbox, score: i as f64 * 0.1 }).collect();
            let gts: Vec<GtBox> = g.iter().map(|&(image_id, bbox, _)| GtBox { image_id, bbox }).collect();
            let ap = average_precision_multi(&dets, &gts, 0.5);
            prop_assert!((0.0..=1.0).contains(&ap));
            let rescaled: Vec<ScoredBox> = dets.iter()
                .map(|s| ScoredBox { score: (3.0 * s.score).exp() - 7.0, ..*s }).collect();
            prop_assert_eq!(ap, average_precision_multi(&rescaled, &gts, 0.5));
        }
    }
}
