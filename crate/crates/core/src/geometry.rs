//! Axis-aligned box arithmetic: IoU, delta encoding, NMS and anchor matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest log-size delta accepted by [`decode`]; keeps `exp` finite for
/// wild regression outputs.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty extents.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn validate(&self) -> Result<()> {
        let reason = if ![self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
        {
            Some("non-finite coordinate")
        } else if self.x_min >= self.x_max || self.y_min >= self.y_max {
            Some("empty extent")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
                reason,
            }),
            None => Ok(()),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Clips to `[0, width] x [0, height]`. Returns `None` when less than
    /// `min_size` pixels survive along either axis.
    pub fn clip(&self, width: f64, height: f64, min_size: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        (b.is_valid() && b.width() >= min_size && b.height() >= min_size).then_some(b)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

/// Faster R-CNN style regression target: center offsets normalised by the
/// reference size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

pub fn encode(target: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::DegenerateAnchor);
    }
    let (acx, acy) = anchor.center();
    let (cx, cy) = target.center();
    Ok(BoxDelta {
        tx: (cx - acx) / aw,
        ty: (cy - acy) / ah,
        tw: (target.width() / aw).ln(),
        th: (target.height() / ah).ln(),
    })
}

/// Inverse of [`encode`]. The result is not clipped; callers clip to the image.
pub fn decode(delta: &BoxDelta, anchor: &BBox) -> Result<BBox> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::DegenerateAnchor);
    }
    let (acx, acy) = anchor.center();
    let cx = acx + delta.tx * aw;
    let cy = acy + delta.ty * ah;
    let w = aw * delta.tw.min(MAX_LOG_SCALE).exp();
    let h = ah * delta.th.min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Greedy non-maximum suppression.
///
/// Returns indices into `boxes`, highest score first. Equal scores keep the
/// lower insertion index first. A box is discarded when its IoU with an
/// already kept box is strictly greater than `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));

    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the groundtruth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }
}

/// Labels anchors against groundtruth.
///
/// Positive when the best IoU is at least `pos_threshold`, negative when it
/// is below `neg_threshold`, ignored otherwise. Afterwards every groundtruth
/// box claims its best anchor (ties to the lower index) as positive so that
/// each one has at least one positive while anchors remain.
pub fn match_anchors(
    anchors: &[BBox],
    gt: &[BBox],
    pos_threshold: f64,
    neg_threshold: f64,
) -> Vec<AnchorLabel> {
    debug_assert!(pos_threshold >= neg_threshold);
    if gt.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }

    let overlaps: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| iou(a, g)).collect())
        .collect();

    let mut labels: Vec<AnchorLabel> = overlaps
        .iter()
        .map(|row| {
            let (best_gt, best) = argmax(row);
            if best >= pos_threshold {
                AnchorLabel::Positive(best_gt)
            } else if best < neg_threshold {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();

    let mut forced = vec![false; anchors.len()];
    for g in 0..gt.len() {
        let mut best: Option<(usize, f64)> = None;
        for (a, row) in overlaps.iter().enumerate() {
            if forced[a] {
                continue;
            }
            if best.is_none_or(|(_, v)| row[g] > v) {
                best = Some((a, row[g]));
            }
        }
        if let Some((a, _)) = best {
            forced[a] = true;
            labels[a] = AnchorLabel::Positive(g);
        }
    }
    labels
}

/// Index and value of the maximum; ties go to the lower index.
fn argmax(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
            if v > acc.1 {
                (i, v)
            } else {
                acc
            }
        })
}

/// Square anchors on a regular `grid x grid` lattice, one per scale.
///
/// Order is row-major over cells, scales innermost.
pub fn anchor_grid(width: f64, height: f64, grid: usize, scales: &[f64]) -> Vec<BBox> {
    let (sx, sy) = (width / grid as f64, height / grid as f64);
    let mut out = Vec::with_capacity(grid * grid * scales.len());
    for gy in 0..grid {
        for gx in 0..grid {
            let cx = (gx as f64 + 0.5) * sx;
            let cy = (gy as f64 + 0.5) * sy;
            for &s in scales {
                out.push(BBox {
                    x_min: cx - 0.5 * s,
                    y_min: cy - 0.5 * s,
                    x_max: cx + 0.5 * s,
                    y_max: cy + 0.5 * s,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts unit pixels covered by integer-coordinate boxes.
    fn pixel_iou(a: &BBox, c: &BBox) -> f64 {
        let (mut inter, mut uni) = (0u64, 0u64);
        for y in 0..64 {
            for x in 0..64 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let ina = px > a.x_min && px < a.x_max && py > a.y_min && py < a.y_max;
                let inc = px > c.x_min && px < c.x_max && py > c.y_min && py < c.y_max;
                inter += (ina && inc) as u64;
                uni += (ina || inc) as u64;
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        let expected = pixel_iou(&a, &b(5.0, 0.0, 15.0, 10.0));
        assert!((expected - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(BBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
        let a = b(0.0, 0.0, 4.0, 4.0);
        let degenerate = BBox {
            x_min: 2.0,
            y_min: 2.0,
            x_max: 2.0,
            y_max: 3.0,
        };
        assert!(matches!(encode(&a, &degenerate), Err(Error::DegenerateAnchor)));
    }

    #[test]
    fn encode_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode(&a, &a).unwrap(), BoxDelta::default());
        // anchor centre (5,5) 10x10, box centre (7,5) 20x10
        let t = encode(&b(-3.0, 0.0, 17.0, 10.0), &a).unwrap();
        assert!((t.tx - 0.2).abs() < 1e-12);
        assert!(t.ty.abs() < 1e-12);
        assert!((t.tw - 2f64.ln()).abs() < 1e-12);
        assert!(t.th.abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        let b1 = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b1], &[0.3], 0.5), vec![0]);

        // IoU(b1, b2) = 80 / 100 = 0.8
        let b2 = b(0.0, 0.0, 10.0, 8.0);
        assert!((iou(&b1, &b2) - 0.8).abs() < 1e-12);
        let b3 = b(20.0, 20.0, 25.0, 25.0);
        assert_eq!(nms(&[b1, b2, b3], &[0.9, 0.7, 0.5], 0.5), vec![0, 2]);

        assert_eq!(nms(&[b1, b1], &[0.4, 0.4], 0.5), vec![0]);
        assert!(nms(&[], &[], 0.5).is_empty());
    }

    #[test]
    fn match_anchor_examples() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        // identical anchor; IoU 0.5 anchor; IoU 0.2 anchor
        let anchors = [
            b(0.0, 0.0, 10.0, 10.0),
            b(0.0, 0.0, 10.0, 5.0),
            b(0.0, 0.0, 10.0, 2.0),
        ];
        assert!((iou(&anchors[1], &gt[0]) - 0.5).abs() < 1e-12);
        assert!((iou(&anchors[2], &gt[0]) - 0.2).abs() < 1e-12);
        let labels = match_anchors(&anchors, &gt, 0.7, 0.3);
        assert_eq!(
            labels,
            vec![
                AnchorLabel::Positive(0),
                AnchorLabel::Ignore,
                AnchorLabel::Negative
            ]
        );
        assert_eq!(
            match_anchors(&anchors, &[], 0.7, 0.3),
            vec![AnchorLabel::Negative; 3]
        );
    }

    #[test]
    fn best_anchor_is_forced_positive() {
        let gt = [b(0.0, 0.0, 10.0, 10.0), b(40.0, 40.0, 41.0, 41.0)];
        let anchors = [b(0.0, 0.0, 10.0, 6.0), b(100.0, 100.0, 110.0, 110.0)];
        let labels = match_anchors(&anchors, &gt, 0.7, 0.3);
        assert_eq!(labels[0], AnchorLabel::Positive(0));
        // zero overlap everywhere, the first free anchor is claimed
        assert_eq!(labels[1], AnchorLabel::Positive(1));
    }

    #[test]
    fn anchor_grid_count() {
        let anchors = anchor_grid(32.0, 32.0, 8, &[6.0, 9.0, 13.0]);
        assert_eq!(anchors.len(), 192);
        assert_eq!(anchors[0].center(), (2.0, 2.0));
    }

    /// Every subset that satisfies the NMS fixed point: a box is kept iff no
    /// kept box of higher priority overlaps it beyond the threshold.
    fn nms_fixed_point_oracle(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<Vec<usize>> {
        let n = boxes.len();
        let before = |i: usize, j: usize| scores[i] > scores[j] || (scores[i] == scores[j] && i < j);
        let mut solutions = Vec::new();
        for mask in 0u32..(1 << n) {
            let kept = |i: usize| mask & (1 << i) != 0;
            let consistent = (0..n).all(|i| {
                let suppressed =
                    (0..n).any(|k| k != i && kept(k) && before(k, i) && iou(&boxes[k], &boxes[i]) > thr);
                kept(i) != suppressed
            });
            if consistent {
                let mut set: Vec<usize> = (0..n).filter(|&i| kept(i)).collect();
                set.sort_by(|&i, &j| if before(i, j) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
                solutions.push(set);
            }
        }
        solutions
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0i32..20, 0i32..20, 1i32..12, 1i32..12).prop_map(|(x, y, w, h)| BBox {
            x_min: x as f64,
            y_min: y as f64,
            x_max: (x + w) as f64,
            y_max: (y + h) as f64,
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_matches_pixel_count(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - pixel_iou(&a, &c)).abs() < 1e-9);
        }

        #[test]
        fn encode_decode_roundtrip(
            (cx, cy, w, h) in (-50.0f64..50.0, -50.0f64..50.0, 0.5f64..40.0, 0.5f64..40.0),
            (ax, ay, aw, ah) in (-50.0f64..50.0, -50.0f64..50.0, 0.5f64..40.0, 0.5f64..40.0),
        ) {
            let target = BBox::from_center(cx, cy, w, h).unwrap();
            let anchor = BBox::from_center(ax, ay, aw, ah).unwrap();
            let back = decode(&encode(&target, &anchor).unwrap(), &anchor).unwrap();
            for (u, v) in [(back.x_min, target.x_min), (back.y_min, target.y_min),
                           (back.x_max, target.x_max), (back.y_max, target.y_max)] {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_matches_fixed_point_oracle(
            items in prop::collection::vec((arb_box(), 0u8..4), 0..=8),
            thr in prop::sample::select(vec![0.0, 0.3, 0.5, 0.7]),
        ) {
            let boxes: Vec<BBox> = items.iter().map(|(b, _)| *b).collect();
            let scores: Vec<f64> = items.iter().map(|(_, s)| *s as f64 / 4.0).collect();
            let solutions = nms_fixed_point_oracle(&boxes, &scores, thr);
            prop_assert_eq!(solutions.len(), 1);
            prop_assert_eq!(nms(&boxes, &scores, thr), solutions[0].clone());
        }

        #[test]
        fn every_gt_gets_a_positive(
            anchors in prop::collection::vec(arb_box(), 1..20),
            gt in prop::collection::vec(arb_box(), 0..5),
        ) {
            let labels = match_anchors(&anchors, &gt, 0.7, 0.3);
            if anchors.len() >= gt.len() {
                for g in 0..gt.len() {
                    prop_assert!(labels.contains(&AnchorLabel::Positive(g)));
                }
            }
            for (a, l) in anchors.iter().zip(&labels) {
                let best = gt.iter().map(|g| iou(a, g)).fold(0.0, f64::max);
                if *l == AnchorLabel::Negative {
                    prop_assert!(best < 0.3);
                }
            }
        }
    }
}
