//! Training losses and their gradients.
//!
//! The detector is small enough that reverse-mode differentiation is written
//! out by hand: each loss returns its value together with the gradient with
//! respect to the head outputs, heads back-propagate into their own weights
//! and into the shared feature, and [`BoxFeature::backward`] finishes the
//! chain into the extractor.
//!
//! Gradient routing follows the noise-tolerant recipe:
//!
//! - With the mixed RPN head active, `rpn_cls` and `rpn_reg` learn from seed
//!   images only; `rpn_cls_a` learns from every image, background included.
//! - With the mixed box-predictor head active, `det_cls` and `det_reg` learn
//!   from seed images only; `det_cls_a` learns from every image and, when
//!   background zeroing is on, ignores background proposals of mined images.
//! - The distillation head only reaches `det_cls_s` and the extractor.
//!
//! With every flag off all heads learn from every image (plain Faster R-CNN).

use crate::error::{Error, Result};
use crate::geometry::{encode, iou, match_anchors, AnchorLabel, BBox};
use crate::model::{
    source_distributions, AnchorPass, BoxFeature, DetectorParams, ModelConfig, VariantFlags, TENSOR_NAMES,
};
use crate::scene::{LabeledBox, Scene};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// Box annotations from the seed pool.
    Seed,
    /// Box annotations mined from an image-level labelled image.
    Mined,
}

/// One training image with the boxes it is trained against.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub scene: &'a Scene,
    pub boxes: Vec<LabeledBox>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_cls_a: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_cls_a: f64,
    pub det_reg: f64,
    pub dist: f64,
    pub n_cls: usize,
    pub n_reg: usize,
    pub n_dist: usize,
}

impl LossBreakdown {
    pub fn rpn(&self) -> f64 {
        self.rpn_cls + self.rpn_cls_a + self.rpn_reg
    }

    pub fn det(&self) -> f64 {
        self.det_cls + self.det_cls_a + self.det_reg
    }

    pub fn total(&self) -> f64 {
        self.rpn() + self.det() + self.dist
    }

    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("rpn_cls", self.rpn_cls),
            ("rpn_cls_a", self.rpn_cls_a),
            ("rpn_reg", self.rpn_reg),
            ("det_cls", self.det_cls),
            ("det_cls_a", self.det_cls_a),
            ("det_reg", self.det_reg),
            ("dist", self.dist),
        ]
    }

    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.rpn_cls += weight * other.rpn_cls;
        self.rpn_cls_a += weight * other.rpn_cls_a;
        self.rpn_reg += weight * other.rpn_reg;
        self.det_cls += weight * other.det_cls;
        self.det_cls_a += weight * other.det_cls_a;
        self.det_reg += weight * other.det_reg;
        self.dist += weight * other.dist;
        self.n_cls += other.n_cls;
        self.n_reg += other.n_reg;
        self.n_dist += other.n_dist;
    }
}

/// Gradients congruent with [`DetectorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub DetectorParams);

impl GradientSet {
    pub fn zeros_like(params: &DetectorParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in TENSOR_NAMES.iter().zip(self.0.tensors()) {
            if t.values().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("gradient of {name}"),
                    iteration: 0,
                    epoch: 0,
                    item: 0,
                });
            }
        }
        Ok(())
    }
}

/// Which loss groups to evaluate; everything by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub rpn: bool,
    pub det: bool,
    pub distill: bool,
}

impl LossTerms {
    pub const ALL: Self = Self {
        rpn: true,
        det: true,
        distill: true,
    };
    pub const DISTILL_ONLY: Self = Self {
        rpn: false,
        det: false,
        distill: true,
    };
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::ALL
    }
}

// --- scalar losses -------------------------------------------------------------

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c != p)
}

/// `-t log p - (1 - t) log(1 - p)` on a clamped probability.
pub fn binary_ce(p: f64, target: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    -target * p.ln() - (1.0 - target) * (1.0 - p).ln()
}

/// Binary cross-entropy of `sigmoid(z)`, with its derivative in `z`.
pub fn binary_ce_logit(z: f64, target: f64) -> (f64, f64) {
    let p = crate::model::sigmoid(z);
    let (pc, clamped) = clamp_prob(p);
    let loss = -target * pc.ln() - (1.0 - target) * (1.0 - pc).ln();
    let grad = if clamped {
        0.0
    } else {
        let dp = -target / p + (1.0 - target) / (1.0 - p);
        dp * p * (1.0 - p)
    };
    (loss, grad)
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Background mask for the mixed classifier: zero exactly for background
/// proposals (`class == 0`) on images outside the seed pool.
pub fn lambda_mask(class: usize, provenance: Provenance) -> f64 {
    if class == 0 && provenance == Provenance::Mined {
        0.0
    } else {
        1.0
    }
}

/// `-sum_j target_j log softmax(z)_j` and its gradient in `z`.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let p = crate::model::softmax(logits);
    let mut loss = 0.0;
    // d loss / d p_j, zero where the clamp is active
    let g: Vec<f64> = p
        .iter()
        .zip(target)
        .map(|(&pj, &tj)| {
            let (c, clamped) = clamp_prob(pj);
            loss -= tj * c.ln();
            if clamped || tj == 0.0 {
                0.0
            } else {
                -tj / pj
            }
        })
        .collect();
    let dot: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
    let grad = p.iter().zip(&g).map(|(pk, gk)| pk * (gk - dot)).collect();
    (loss, grad)
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Average cross-entropy between source distributions `p_star` and target
/// head distributions `p`, normalised by the proposal count.
pub fn distill_loss(p: &[Vec<f64>], p_star: &[Vec<f64>]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let total: f64 = p
        .iter()
        .zip(p_star)
        .map(|(row, target)| {
            row.iter()
                .zip(target)
                .map(|(&pj, &tj)| -tj * clamp_prob(pj).0.ln())
                .sum::<f64>()
        })
        .sum();
    total / p.len() as f64
}

// --- RPN loss --------------------------------------------------------------------

/// RPN head outputs for every anchor of one image (logits and raw deltas).
#[derive(Debug, Clone, Copy)]
pub struct RpnOutputs<'a> {
    pub cls: &'a [f64],
    pub cls_a: Option<&'a [f64]>,
    pub reg: &'a [[f64; 4]],
}

#[derive(Debug, Clone)]
pub struct RpnLoss {
    pub breakdown: LossBreakdown,
    pub d_cls: Vec<f64>,
    pub d_cls_a: Vec<f64>,
    pub d_reg: Vec<[f64; 4]>,
}

/// RPN objectness and regression losses for one image.
///
/// `reg_targets[i]` is only read for positive anchors.
pub fn rpn_loss(
    labels: &[AnchorLabel],
    reg_targets: &[[f64; 4]],
    out: &RpnOutputs<'_>,
    provenance: Provenance,
    flags: &VariantFlags,
) -> Result<RpnLoss> {
    let n = labels.len();
    let seed_heads = !flags.rpn_extra_head || provenance == Provenance::Seed;
    let mixed = match (flags.rpn_extra_head, out.cls_a) {
        (true, Some(a)) => Some(a),
        (true, None) => return Err(Error::Shape("rpn_cls_a outputs missing".into())),
        (false, _) => None,
    };

    let n_cls = labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
    let n_reg = labels.iter().filter(|l| l.is_positive()).count();
    let cls_norm = 1.0 / n_cls.max(1) as f64;
    let reg_norm = 1.0 / n_reg.max(1) as f64;

    let mut r = RpnLoss {
        breakdown: LossBreakdown {
            n_cls,
            n_reg,
            ..LossBreakdown::default()
        },
        d_cls: vec![0.0; n],
        d_cls_a: vec![0.0; n],
        d_reg: vec![[0.0; 4]; n],
    };
    for (i, label) in labels.iter().enumerate() {
        let target = match label {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Positive(_) => 1.0,
            AnchorLabel::Negative => 0.0,
        };
        if seed_heads {
            let (l, g) = binary_ce_logit(out.cls[i], target);
            r.breakdown.rpn_cls += l * cls_norm;
            r.d_cls[i] = g * cls_norm;
        }
        if let Some(cls_a) = mixed {
            let (l, g) = binary_ce_logit(cls_a[i], target);
            r.breakdown.rpn_cls_a += l * cls_norm;
            r.d_cls_a[i] = g * cls_norm;
        }
        if seed_heads && target == 1.0 {
            for k in 0..4 {
                let x = out.reg[i][k] - reg_targets[i][k];
                r.breakdown.rpn_reg += smooth_l1(x) * reg_norm;
                r.d_reg[i][k] = smooth_l1_grad(x) * reg_norm;
            }
        }
    }
    Ok(r)
}

// --- box predictor loss ----------------------------------------------------------

/// Box-predictor head outputs for every proposal of one image.
#[derive(Debug, Clone, Copy)]
pub struct DetOutputs<'a> {
    pub cls: &'a [Vec<f64>],
    pub cls_a: Option<&'a [Vec<f64>]>,
    /// `4 C` class-specific deltas per proposal.
    pub reg: &'a [Vec<f64>],
}

#[derive(Debug, Clone)]
pub struct DetLoss {
    pub breakdown: LossBreakdown,
    pub d_cls: Vec<Vec<f64>>,
    pub d_cls_a: Vec<Vec<f64>>,
    pub d_reg: Vec<Vec<f64>>,
}

/// Box-predictor losses for one image.
///
/// `labels[s]` is the class of proposal `s` (0 = background) and
/// `reg_targets[s]` its regression target, read only for foreground.
pub fn det_loss(
    labels: &[usize],
    reg_targets: &[[f64; 4]],
    out: &DetOutputs<'_>,
    provenance: Provenance,
    flags: &VariantFlags,
) -> Result<DetLoss> {
    let n = labels.len();
    let seed_heads = !flags.det_extra_head || provenance == Provenance::Seed;
    let mixed = match (flags.det_extra_head, out.cls_a) {
        (true, Some(a)) => Some(a),
        (true, None) => return Err(Error::Shape("det_cls_a outputs missing".into())),
        (false, _) => None,
    };
    let classes = out.cls.first().map_or(0, |v| v.len());

    let n_reg = labels.iter().filter(|&&u| u > 0).count();
    let mut r = DetLoss {
        breakdown: LossBreakdown {
            n_cls: n,
            n_reg,
            ..LossBreakdown::default()
        },
        d_cls: vec![vec![0.0; classes]; n],
        d_cls_a: vec![vec![0.0; classes]; n],
        d_reg: vec![Vec::new(); n],
    };

    if seed_heads && n > 0 {
        let norm = 1.0 / n as f64;
        for (s, &u) in labels.iter().enumerate() {
            let (l, g) = soft_cross_entropy(&out.cls[s], &one_hot(classes, u));
            r.breakdown.det_cls += l * norm;
            r.d_cls[s] = g.into_iter().map(|v| v * norm).collect();
        }
    }

    if let Some(cls_a) = mixed {
        let weights: Vec<f64> = labels
            .iter()
            .map(|&u| {
                if flags.det_zero_background {
                    lambda_mask(u, provenance)
                } else {
                    1.0
                }
            })
            .collect();
        let contributing = weights.iter().filter(|w| **w != 0.0).count();
        let norm = 1.0 / contributing.max(1) as f64;
        for (s, &u) in labels.iter().enumerate() {
            if weights[s] == 0.0 {
                continue;
            }
            let (l, g) = soft_cross_entropy(&cls_a[s], &one_hot(classes, u));
            r.breakdown.det_cls_a += l * norm;
            r.d_cls_a[s] = g.into_iter().map(|v| v * norm).collect();
        }
    }

    if seed_heads && n_reg > 0 {
        let norm = 1.0 / n_reg as f64;
        for (s, &u) in labels.iter().enumerate() {
            if u == 0 {
                continue;
            }
            let mut d = vec![0.0; out.reg[s].len()];
            for k in 0..4 {
                let j = 4 * (u - 1) + k;
                let x = out.reg[s][j] - reg_targets[s][k];
                r.breakdown.det_reg += smooth_l1(x) * norm;
                d[j] = smooth_l1_grad(x) * norm;
            }
            r.d_reg[s] = d;
        }
    }
    Ok(r)
}

/// Distillation loss on `det_cls_s` logits and its gradient per proposal.
pub fn distill_loss_and_grad(logits: &[Vec<f64>], p_star: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    if logits.is_empty() {
        return (0.0, Vec::new());
    }
    let norm = 1.0 / logits.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(p_star)
        .map(|(z, t)| {
            let (l, g) = soft_cross_entropy(z, t);
            loss += l * norm;
            g.into_iter().map(|v| v * norm).collect()
        })
        .collect();
    (loss, grads)
}

// --- full pass ----------------------------------------------------------------

/// Class index and matched groundtruth index per box (`(0, None)` for background).
pub fn label_proposals(
    boxes: &[BBox],
    gt: &[LabeledBox],
    params: &DetectorParams,
    fg_iou: f64,
) -> Result<Vec<(usize, Option<usize>)>> {
    let classes: Vec<usize> = gt
        .iter()
        .map(|g| {
            params.class_of(g.category).ok_or_else(|| {
                Error::Shape(format!(
                    "category {} outside detector range {}..{}",
                    g.category,
                    params.first_category,
                    params.first_category + params.num_categories
                ))
            })
        })
        .collect::<Result<_>>()?;
    Ok(boxes
        .iter()
        .map(|b| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                let v = iou(b, &g.bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= fg_iou => (classes[j], Some(j)),
                _ => (0, None),
            }
        })
        .collect())
}

/// Loss and gradient contribution of one image with fixed proposals.
///
/// `anchor_pass` may carry a forward pass already computed with the same
/// parameters and flags. Gradients are scaled by `weight` and added to `grads`.
#[allow(clippy::too_many_arguments)]
pub fn item_loss_and_gradients(
    item: &BatchItem<'_>,
    anchor_pass: Option<&AnchorPass>,
    proposals: &[BBox],
    source_dists: Option<&[Vec<f64>]>,
    params: &DetectorParams,
    flags: &VariantFlags,
    cfg: &ModelConfig,
    terms: LossTerms,
    grads: &mut GradientSet,
    weight: f64,
) -> Result<LossBreakdown> {
    let grads = &mut grads.0;
    let hidden = params.hidden();
    let scene = item.scene;
    let gt_boxes: Vec<BBox> = item.boxes.iter().map(|b| b.bbox).collect();
    let mut breakdown = LossBreakdown::default();

    if terms.rpn {
        let owned;
        let pass = match anchor_pass {
            Some(p) => p,
            None => {
                owned = AnchorPass::compute(scene, params, flags, cfg)?;
                &owned
            }
        };
        let labels = match_anchors(&pass.anchors, &gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
        let targets: Vec<[f64; 4]> = labels
            .iter()
            .zip(&pass.anchors)
            .map(|(l, a)| match l {
                AnchorLabel::Positive(g) => encode(&gt_boxes[*g], a).map(|d| d.to_array()),
                _ => Ok([0.0; 4]),
            })
            .collect::<Result<_>>()?;
        let out = RpnOutputs {
            cls: &pass.cls,
            cls_a: pass.cls_a.as_deref(),
            reg: &pass.reg,
        };
        let r = rpn_loss(&labels, &targets, &out, item.provenance, flags)?;
        for (i, feature) in pass.features.iter().enumerate() {
            let touched = r.d_cls[i] != 0.0 || r.d_cls_a[i] != 0.0 || r.d_reg[i] != [0.0; 4];
            if !touched {
                continue;
            }
            let mut gh = vec![0.0; hidden];
            params
                .rpn_cls
                .backward(&feature.hidden, &[r.d_cls[i] * weight], &mut grads.rpn_cls, &mut gh);
            params
                .rpn_cls_a
                .backward(&feature.hidden, &[r.d_cls_a[i] * weight], &mut grads.rpn_cls_a, &mut gh);
            let dreg: Vec<f64> = r.d_reg[i].iter().map(|v| v * weight).collect();
            params
                .rpn_reg
                .backward(&feature.hidden, &dreg, &mut grads.rpn_reg, &mut gh);
            feature.backward(&gh, &mut grads.extractor);
        }
        breakdown.accumulate(&r.breakdown, 1.0);
    }

    let want_dist = terms.distill && flags.distill;
    if !(terms.det || want_dist) {
        return Ok(breakdown);
    }

    let mut boxes: Vec<BBox> = proposals.to_vec();
    if terms.det && cfg.train_with_gt_proposals {
        boxes.extend(gt_boxes.iter().copied());
    }
    let features: Vec<BoxFeature> = boxes
        .iter()
        .map(|b| BoxFeature::compute(scene, b, params))
        .collect::<Result<_>>()?;
    let mut grad_hidden = vec![vec![0.0; hidden]; boxes.len()];

    if terms.det {
        let labelled = label_proposals(&boxes, &item.boxes, params, cfg.det_fg_iou)?;
        let labels: Vec<usize> = labelled.iter().map(|(u, _)| *u).collect();
        let targets: Vec<[f64; 4]> = labelled
            .iter()
            .zip(&boxes)
            .map(|((_, m), b)| match m {
                Some(j) => encode(&gt_boxes[*j], b).map(|d| d.to_array()),
                None => Ok([0.0; 4]),
            })
            .collect::<Result<_>>()?;
        let cls: Vec<Vec<f64>> = features.iter().map(|f| params.det_cls.forward(&f.hidden)).collect();
        let cls_a: Option<Vec<Vec<f64>>> = flags
            .det_extra_head
            .then(|| features.iter().map(|f| params.det_cls_a.forward(&f.hidden)).collect());
        let reg: Vec<Vec<f64>> = features.iter().map(|f| params.det_reg.forward(&f.hidden)).collect();
        let out = DetOutputs {
            cls: &cls,
            cls_a: cls_a.as_deref(),
            reg: &reg,
        };
        let r = det_loss(&labels, &targets, &out, item.provenance, flags)?;
        for (s, f) in features.iter().enumerate() {
            let gh = &mut grad_hidden[s];
            let scaled = |v: &[f64]| v.iter().map(|x| x * weight).collect::<Vec<f64>>();
            params
                .det_cls
                .backward(&f.hidden, &scaled(&r.d_cls[s]), &mut grads.det_cls, gh);
            params
                .det_cls_a
                .backward(&f.hidden, &scaled(&r.d_cls_a[s]), &mut grads.det_cls_a, gh);
            if !r.d_reg[s].is_empty() {
                params
                    .det_reg
                    .backward(&f.hidden, &scaled(&r.d_reg[s]), &mut grads.det_reg, gh);
            }
        }
        // Only the overall proposal count is reported as N_cls for this stage.
        breakdown.det_cls = r.breakdown.det_cls;
        breakdown.det_cls_a = r.breakdown.det_cls_a;
        breakdown.det_reg = r.breakdown.det_reg;
        breakdown.n_cls += r.breakdown.n_cls;
        breakdown.n_reg += r.breakdown.n_reg;
    }

    if want_dist {
        let dists = source_dists.ok_or(Error::SourceDetector("required when distillation is enabled"))?;
        if dists.len() != proposals.len() {
            return Err(Error::Shape(format!(
                "{} source distributions for {} proposals",
                dists.len(),
                proposals.len()
            )));
        }
        let logits: Vec<Vec<f64>> = features[..proposals.len()]
            .iter()
            .map(|f| params.det_cls_s.forward(&f.hidden))
            .collect();
        let (loss, d) = distill_loss_and_grad(&logits, dists);
        for (s, g) in d.iter().enumerate() {
            let scaled: Vec<f64> = g.iter().map(|x| x * weight).collect();
            params.det_cls_s.backward(
                &features[s].hidden,
                &scaled,
                &mut grads.det_cls_s,
                &mut grad_hidden[s],
            );
        }
        breakdown.dist = loss;
        breakdown.n_dist = proposals.len();
    }

    for (f, gh) in features.iter().zip(&grad_hidden) {
        if gh.iter().any(|v| *v != 0.0) {
            f.backward(gh, &mut grads.extractor);
        }
    }
    Ok(breakdown)
}

fn check_source(flags: &VariantFlags, has_source: bool) -> Result<()> {
    match (flags.distill, has_source) {
        (true, false) => Err(Error::SourceDetector("required when distillation is enabled")),
        (false, true) => Err(Error::SourceDetector("supplied but distillation is disabled")),
        _ => Ok(()),
    }
}

fn check_finite(breakdown: &LossBreakdown, grads: &GradientSet) -> Result<()> {
    if let Some((name, _)) = breakdown.components().iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: format!("loss {name}"),
            iteration: 0,
            epoch: 0,
            item: 0,
        });
    }
    grads.check_finite()
}

/// Mean loss over the batch and its gradient.
///
/// Proposals come from the current RPN and are held fixed (no gradient flows
/// through box coordinates). `source` must be present exactly when
/// distillation is enabled.
pub fn loss_and_gradients(
    batch: &[BatchItem<'_>],
    params: &DetectorParams,
    flags: &VariantFlags,
    source: Option<&DetectorParams>,
    cfg: &ModelConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    loss_and_gradients_with_terms(batch, params, flags, source, cfg, LossTerms::ALL)
}

pub fn loss_and_gradients_with_terms(
    batch: &[BatchItem<'_>],
    params: &DetectorParams,
    flags: &VariantFlags,
    source: Option<&DetectorParams>,
    cfg: &ModelConfig,
    terms: LossTerms,
) -> Result<(LossBreakdown, GradientSet)> {
    check_source(flags, source.is_some())?;
    let mut grads = GradientSet::zeros_like(params);
    let mut total = LossBreakdown::default();
    if batch.is_empty() {
        return Ok((total, grads));
    }
    let weight = 1.0 / batch.len() as f64;
    for item in batch {
        let pass = AnchorPass::compute(item.scene, params, flags, cfg)?;
        let proposals = pass.proposals(item.scene.width, item.scene.height, cfg).boxes();
        let dists = match source {
            Some(s) => Some(source_distributions(s, item.scene, &proposals)?),
            None => None,
        };
        let b = item_loss_and_gradients(
            item,
            Some(&pass),
            &proposals,
            dists.as_deref(),
            params,
            flags,
            cfg,
            terms,
            &mut grads,
            weight,
        )?;
        total.accumulate(&b, weight);
    }
    check_finite(&total, &grads)?;
    Ok((total, grads))
}

/// Same as [`loss_and_gradients`] but with caller-fixed proposals and source
/// distributions, which makes the loss a smooth function of the parameters.
pub fn loss_and_gradients_at(
    batch: &[BatchItem<'_>],
    proposals: &[Vec<BBox>],
    source_dists: Option<&[Vec<Vec<f64>>]>,
    params: &DetectorParams,
    flags: &VariantFlags,
    cfg: &ModelConfig,
    terms: LossTerms,
) -> Result<(LossBreakdown, GradientSet)> {
    if proposals.len() != batch.len() || source_dists.is_some_and(|d| d.len() != batch.len()) {
        return Err(Error::Shape("per-item proposals / distributions length mismatch".into()));
    }
    let mut grads = GradientSet::zeros_like(params);
    let mut total = LossBreakdown::default();
    if batch.is_empty() {
        return Ok((total, grads));
    }
    let weight = 1.0 / batch.len() as f64;
    for (i, item) in batch.iter().enumerate() {
        let b = item_loss_and_gradients(
            item,
            None,
            &proposals[i],
            source_dists.map(|d| d[i].as_slice()),
            params,
            flags,
            cfg,
            terms,
            &mut grads,
            weight,
        )?;
        total.accumulate(&b, weight);
    }
    check_finite(&total, &grads)?;
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_examples() {
        assert!(binary_ce(1.0, 1.0) < 1e-6);
        assert!((binary_ce(0.5, 1.0) - 2f64.ln()).abs() < 1e-12);
        assert!((binary_ce(0.5, 0.0) - 2f64.ln()).abs() < 1e-12);
        assert!(binary_ce(0.0, 1.0).is_finite());
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_mask(0, Provenance::Mined), 0.0);
        assert_eq!(lambda_mask(0, Provenance::Seed), 1.0);
        assert_eq!(lambda_mask(5, Provenance::Mined), 1.0);
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        for &z in &[-3.0, -0.2, 0.0, 1.7] {
            for &t in &[0.0, 1.0] {
                let (_, g) = binary_ce_logit(z, t);
                let e = 1e-6;
                let fd = (binary_ce_logit(z + e, t).0 - binary_ce_logit(z - e, t).0) / (2.0 * e);
                assert!((fd - g).abs() < 1e-8);
            }
        }
        let z = [0.3, -1.2, 2.0];
        let t = [0.2, 0.5, 0.3];
        let (_, g) = soft_cross_entropy(&z, &t);
        for k in 0..3 {
            let mut a = z;
            let mut b = z;
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (soft_cross_entropy(&a, &t).0 - soft_cross_entropy(&b, &t).0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn distill_examples() {
        assert!(distill_loss(&[vec![0.0, 1.0]], &[vec![0.0, 1.0]]) < 1e-6);
        let half = vec![vec![0.5, 0.5]];
        assert!((distill_loss(&half, &half) - 2f64.ln()).abs() < 1e-12);
        let p = vec![vec![0.2, 0.7, 0.1], vec![0.5, 0.25, 0.25]];
        let q = vec![vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]];
        let p2: Vec<_> = p.iter().chain(&p).cloned().collect();
        let q2: Vec<_> = q.iter().chain(&q).cloned().collect();
        assert!((distill_loss(&p, &q) - distill_loss(&p2, &q2)).abs() < 1e-15);
    }

    /// Three anchors: positive, negative, ignored.
    #[test]
    fn rpn_three_anchor_hand_computed() {
        let labels = [AnchorLabel::Positive(0), AnchorLabel::Negative, AnchorLabel::Ignore];
        let cls = [0.0, 2.0f64.ln(), 5.0];
        let reg = [[0.5, -2.0, 0.0, 0.0], [9.0; 4], [9.0; 4]];
        let targets = [[0.0, 0.0, 0.0, 0.3], [0.0; 4], [0.0; 4]];
        let out = RpnOutputs {
            cls: &cls,
            cls_a: None,
            reg: &reg,
        };
        let r = rpn_loss(&labels, &targets, &out, Provenance::Seed, &VariantFlags::NAIVE).unwrap();
        // positive: -ln(0.5); negative: sigmoid(ln 2) = 2/3, -ln(1/3)
        let expected_cls = (2f64.ln() + 3f64.ln()) / 2.0;
        // 0.125 + 1.5 + 0 + 0.045, over one positive
        let expected_reg = 0.125 + 1.5 + 0.045;
        assert!((r.breakdown.rpn_cls - expected_cls).abs() < 1e-9);
        assert!((r.breakdown.rpn_reg - expected_reg).abs() < 1e-9);
        assert_eq!(r.breakdown.rpn_cls_a, 0.0);
        assert_eq!((r.breakdown.n_cls, r.breakdown.n_reg), (2, 1));
        assert_eq!(r.d_cls[2], 0.0);
    }

    #[test]
    fn rpn_seed_only_heads_ignore_mined_images() {
        let labels = [AnchorLabel::Positive(0), AnchorLabel::Negative];
        let cls = [0.3, -0.4];
        let cls_a = [0.1, 0.2];
        let reg = [[0.5; 4], [0.0; 4]];
        let out = RpnOutputs {
            cls: &cls,
            cls_a: Some(&cls_a),
            reg: &reg,
        };
        let r = rpn_loss(&labels, &[[0.0; 4]; 2], &out, Provenance::Mined, &VariantFlags::DET_AZ_RPN_A).unwrap();
        assert_eq!(r.breakdown.rpn_cls, 0.0);
        assert_eq!(r.breakdown.rpn_reg, 0.0);
        assert!(r.breakdown.rpn_cls_a > 0.0);
        assert!(r.d_cls.iter().all(|v| *v == 0.0));

        let all_neg = [AnchorLabel::Negative; 2];
        let r = rpn_loss(&all_neg, &[[1.0; 4]; 2], &out, Provenance::Seed, &VariantFlags::NAIVE).unwrap();
        assert_eq!(r.breakdown.rpn_reg, 0.0);
    }

    fn logits_for(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn det_two_proposal_hand_computed() {
        // proposal 0: class 1 with det_cls p = (0.2, 0.5, 0.3); proposal 1: background, p0 = 0.6
        let cls = vec![logits_for(&[0.2, 0.5, 0.3]), logits_for(&[0.6, 0.3, 0.1])];
        let cls_a = vec![logits_for(&[0.1, 0.8, 0.1]), logits_for(&[0.25, 0.5, 0.25])];
        let reg = vec![vec![0.1, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0], vec![5.0; 8]];
        let targets = [[0.0, 0.0, 0.0, 1.0], [0.0; 4]];
        let out = DetOutputs {
            cls: &cls,
            cls_a: Some(&cls_a),
            reg: &reg,
        };
        let r = det_loss(&[1, 0], &targets, &out, Provenance::Seed, &VariantFlags::DET_AZ).unwrap();
        let det_cls = -(0.5f64.ln() + 0.6f64.ln()) / 2.0;
        let det_cls_a = -(0.8f64.ln() + 0.25f64.ln()) / 2.0;
        let det_reg = 0.005 + 1.5;
        assert!((r.breakdown.det_cls - det_cls).abs() < 1e-9);
        assert!((r.breakdown.det_cls_a - det_cls_a).abs() < 1e-9);
        assert!((r.breakdown.det_reg - det_reg).abs() < 1e-9);

        // mined: seed heads silent, background of det_cls_a masked
        let r = det_loss(&[1, 0], &targets, &out, Provenance::Mined, &VariantFlags::DET_AZ).unwrap();
        assert_eq!(r.breakdown.det_cls, 0.0);
        assert_eq!(r.breakdown.det_reg, 0.0);
        assert!((r.breakdown.det_cls_a + 0.8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn background_only_mined_image_is_silent_when_masked() {
        let cls = vec![logits_for(&[0.3, 0.4, 0.3]); 3];
        let reg = vec![vec![0.0; 8]; 3];
        let out = DetOutputs {
            cls: &cls,
            cls_a: Some(&cls),
            reg: &reg,
        };
        let masked = det_loss(&[0, 0, 0], &[[0.0; 4]; 3], &out, Provenance::Mined, &VariantFlags::DET_AZ).unwrap();
        assert_eq!(masked.breakdown.det_cls_a, 0.0);
        assert!(masked.d_cls_a.iter().flatten().all(|v| *v == 0.0));
        let unmasked = det_loss(&[0, 0, 0], &[[0.0; 4]; 3], &out, Provenance::Mined, &VariantFlags::DET_A).unwrap();
        assert!(unmasked.breakdown.det_cls_a > 0.0);
    }
}
