//! Box mining over image-level labelled images.
//!
//! For every image and every category in its label set, the single
//! highest-scoring detection of that category is kept when its score is
//! strictly above the threshold. Mined sets are recomputed from scratch with
//! the latest detector; nothing accumulates across iterations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metrics::{mined_box_quality, MiningQuality};
use crate::model::{detect, Detection, DetectorParams, ModelConfig, VariantFlags};
use crate::scene::{Category, Dataset, ImageId, LabeledBox};

pub const DEFAULT_THETA_B: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub theta_b: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            theta_b: DEFAULT_THETA_B,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta_b) {
            return Err(Error::Config(format!("theta_b must lie in [0, 1], got {}", self.theta_b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedBox {
    pub image_id: ImageId,
    pub category: Category,
    pub score: f64,
    pub bbox: BBox,
    /// Training-mining iteration that produced the box.
    pub iteration: usize,
}

impl MinedBox {
    pub fn labeled(&self) -> LabeledBox {
        LabeledBox {
            bbox: self.bbox,
            category: self.category,
            score: Some(self.score),
        }
    }
}

/// Mined boxes of one image, ordered by category.
///
/// Ties in score keep the earlier detection.
pub fn mine_image(
    image_id: ImageId,
    labels: &BTreeSet<Category>,
    detections: &[Detection],
    theta_b: f64,
    iteration: usize,
) -> Vec<MinedBox> {
    let mut best: BTreeMap<Category, &Detection> = BTreeMap::new();
    for d in detections.iter().filter(|d| labels.contains(&d.category)) {
        match best.get(&d.category) {
            Some(b) if b.score >= d.score => {}
            _ => {
                best.insert(d.category, d);
            }
        }
    }
    best.into_values()
        .filter(|d| d.score > theta_b)
        .map(|d| MinedBox {
            image_id,
            category: d.category,
            score: d.score,
            bbox: d.bbox,
            iteration,
        })
        .collect()
}

/// Runs the detector over every weakly labelled image.
pub fn detect_weak(
    dataset: &Dataset,
    weak: &BTreeMap<ImageId, BTreeSet<Category>>,
    params: &DetectorParams,
    flags: &VariantFlags,
    cfg: &ModelConfig,
) -> Result<BTreeMap<ImageId, Vec<Detection>>> {
    weak.keys()
        .map(|&id| {
            let scene = dataset
                .get(id)
                .ok_or_else(|| Error::Config(format!("image {id} missing from dataset")))?;
            Ok((id, detect(scene, params, flags, cfg)?))
        })
        .collect()
}

/// Mining over precomputed detections. Images without a mined box are absent.
pub fn mine_from_detections(
    detections: &BTreeMap<ImageId, Vec<Detection>>,
    weak: &BTreeMap<ImageId, BTreeSet<Category>>,
    theta_b: f64,
    iteration: usize,
) -> BTreeMap<ImageId, Vec<MinedBox>> {
    weak.iter()
        .filter_map(|(&id, labels)| {
            let dets = detections.get(&id).map_or(&[][..], |d| d.as_slice());
            let mined = mine_image(id, labels, dets, theta_b, iteration);
            (!mined.is_empty()).then_some((id, mined))
        })
        .collect()
}

/// Detects and mines in one go.
#[allow(clippy::too_many_arguments)]
pub fn mine_boxes(
    dataset: &Dataset,
    weak: &BTreeMap<ImageId, BTreeSet<Category>>,
    params: &DetectorParams,
    flags: &VariantFlags,
    cfg: &ModelConfig,
    mining: &MiningConfig,
    iteration: usize,
) -> Result<BTreeMap<ImageId, Vec<MinedBox>>> {
    mining.validate()?;
    let detections = detect_weak(dataset, weak, params, flags, cfg)?;
    Ok(mine_from_detections(&detections, weak, mining.theta_b, iteration))
}

pub fn mined_count(mined: &BTreeMap<ImageId, Vec<MinedBox>>) -> usize {
    mined.values().map(Vec::len).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub theta: f64,
    pub count: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Evenly spaced thresholds `0, 1/steps, .., 1`.
pub fn theta_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Mined-box precision against mined count while sweeping the threshold.
///
/// Points are ordered by threshold, highest first. `withheld` holds the true
/// boxes of the weakly labelled images.
pub fn precision_vs_count_curve(
    detections: &BTreeMap<ImageId, Vec<Detection>>,
    weak: &BTreeMap<ImageId, BTreeSet<Category>>,
    withheld: &BTreeMap<ImageId, Vec<LabeledBox>>,
    thetas: &[f64],
    tp_iou: f64,
) -> Vec<CurvePoint> {
    let mut sorted = thetas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted
        .into_iter()
        .map(|theta| {
            let mined = mine_from_detections(detections, weak, theta, 0);
            let MiningQuality {
                mined_count,
                precision,
                recall,
                ..
            } = mined_box_quality(&mined, withheld, tp_iou);
            CurvePoint {
                theta,
                count: mined_count,
                precision,
                recall,
            }
        })
        .collect()
}

// --- dump ------------------------------------------------------------------------

pub const MINED_DUMP_HEADER: &str = "image_id\tcategory\tscore\tx_min\ty_min\tx_max\ty_max\titeration";

/// Tab-separated mined boxes, one per line after a header line, in image then
/// category order. Floats use shortest round-trip formatting.
pub fn write_mined<W: Write>(mined: &BTreeMap<ImageId, Vec<MinedBox>>, mut out: W) -> Result<()> {
    writeln!(out, "{MINED_DUMP_HEADER}")?;
    for m in mined.values().flatten() {
        let b = &m.bbox;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            m.image_id, m.category, m.score, b.x_min, b.y_min, b.x_max, b.y_max, m.iteration
        )?;
    }
    Ok(())
}

pub fn read_mined<R: BufRead>(input: R) -> Result<BTreeMap<ImageId, Vec<MinedBox>>> {
    let mut mined: BTreeMap<ImageId, Vec<MinedBox>> = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim_end() != MINED_DUMP_HEADER {
                return Err(parse_err(lineno, "unexpected header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(parse_err(lineno, format!("expected 8 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("field {}: {e}", k + 1)))
        };
        let image_id = fields[0]
            .parse::<ImageId>()
            .map_err(|e| parse_err(lineno, format!("image_id: {e}")))?;
        let category = fields[1]
            .parse::<Category>()
            .map_err(|e| parse_err(lineno, format!("category: {e}")))?;
        let iteration = fields[7]
            .parse::<usize>()
            .map_err(|e| parse_err(lineno, format!("iteration: {e}")))?;
        let bbox = BBox::new(num(3)?, num(4)?, num(5)?, num(6)?).map_err(|e| parse_err(lineno, e.to_string()))?;
        mined.entry(image_id).or_default().push(MinedBox {
            image_id,
            category,
            score: num(2)?,
            bbox,
            iteration,
        });
    }
    Ok(mined)
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse {
        what: "mined dump",
        line,
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(category: Category, score: f64, x: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 5.0, 5.0).unwrap(),
            category,
            score,
            probs: Vec::new(),
        }
    }

    const CAT: Category = 4;
    const DOG: Category = 5;

    #[test]
    fn cat_dog_examples() {
        let dets = [det(CAT, 0.995, 0.0), det(CAT, 0.97, 10.0), det(DOG, 0.999, 20.0)];
        let only_cat = mine_image(1, &BTreeSet::from([CAT]), &dets, 0.99, 1);
        assert_eq!(only_cat.len(), 1);
        assert_eq!((only_cat[0].category, only_cat[0].bbox), (CAT, dets[0].bbox));

        let both = mine_image(1, &BTreeSet::from([CAT, DOG]), &dets, 0.99, 1);
        let got: Vec<_> = both.iter().map(|m| (m.category, m.bbox)).collect();
        assert_eq!(got, vec![(CAT, dets[0].bbox), (DOG, dets[2].bbox)]);

        let low = [det(CAT, 0.5, 0.0)];
        assert!(mine_image(1, &BTreeSet::from([CAT]), &low, 0.99, 1).is_empty());
    }

    #[test]
    fn threshold_is_strict() {
        let dets = [det(CAT, 0.99, 0.0)];
        assert!(mine_image(1, &BTreeSet::from([CAT]), &dets, 0.99, 1).is_empty());
    }

    /// The three conditions applied literally, one (image, label) at a time.
    fn oracle(labels: &BTreeSet<Category>, dets: &[Detection], theta: f64) -> Vec<(Category, usize)> {
        let mut out = Vec::new();
        for &c in labels {
            for (i, d) in dets.iter().enumerate() {
                let label_matches = d.category == c;
                let highest = dets
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.category == c)
                    .all(|(j, e)| e.score < d.score || (e.score == d.score && j >= i));
                let confident = d.score > theta;
                if label_matches && highest && confident {
                    out.push((c, i));
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_three_condition_oracle(
            raw in prop::collection::vec((1u32..6, 0usize..12), 0..100),
            labels in prop::collection::btree_set(1u32..6, 0..4),
            theta_idx in 0usize..12,
        ) {
            // quantised scores make ties and threshold hits common
            let theta = theta_idx as f64 / 11.0;
            let dets: Vec<Detection> = raw
                .iter()
                .enumerate()
                .map(|(i, &(c, s))| det(c, s as f64 / 11.0, i as f64))
                .collect();
            let mined = mine_image(7, &labels, &dets, theta, 2);
            let expected = oracle(&labels, &dets, theta);
            prop_assert_eq!(mined.len(), expected.len());
            for (m, (c, i)) in mined.iter().zip(&expected) {
                prop_assert_eq!(m.category, *c);
                prop_assert_eq!(m.bbox, dets[*i].bbox);
                prop_assert!(m.score > theta);
                prop_assert!(labels.contains(&m.category));
            }
        }
    }

    #[test]
    fn curve_is_monotone_and_bounded() {
        let mut detections = BTreeMap::new();
        let mut weak = BTreeMap::new();
        let mut withheld = BTreeMap::new();
        for id in 0..20u64 {
            let s = (id as f64 + 1.0) / 21.0;
            detections.insert(id, vec![det(CAT, s, 0.0), det(DOG, 1.0 - s, 10.0)]);
            weak.insert(id, BTreeSet::from([CAT, DOG]));
            withheld.insert(id, vec![LabeledBox::new(BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(), CAT)]);
        }
        let curve = precision_vs_count_curve(&detections, &weak, &withheld, &theta_grid(20), 0.5);
        assert_eq!(curve.first().unwrap().theta, 1.0);
        assert_eq!(curve.first().unwrap().count, 0);
        assert_eq!(curve.last().unwrap().count, 40);
        for w in curve.windows(2) {
            assert!(w[0].theta > w[1].theta);
            assert!(w[0].count <= w[1].count);
        }
    }

    #[test]
    fn dump_roundtrip() {
        let mut mined = BTreeMap::new();
        mined.insert(
            3,
            vec![MinedBox {
                image_id: 3,
                category: 5,
                score: 0.991_234_567_890_123,
                bbox: BBox::new(0.1, 1.0 / 3.0, 7.25, 9.0).unwrap(),
                iteration: 2,
            }],
        );
        let mut buf = Vec::new();
        write_mined(&mined, &mut buf).unwrap();
        let back = read_mined(buf.as_slice()).unwrap();
        assert_eq!(back, mined);
        let err = read_mined("bad header\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
