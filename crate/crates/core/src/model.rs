//! Miniature two-stage detector.
//!
//! A shared extractor turns any box into a feature vector: the box region
//! plus a one-cell context ring is average-pooled into a `(G+2) x (G+2)` grid,
//! normalised width and height are appended, and a single `tanh` layer maps
//! the result to `hidden` units. Every head is a linear layer on that feature:
//!
//! | head        | outputs      | stage |
//! |-------------|--------------|-------|
//! | `rpn_cls`   | 1            | RPN   |
//! | `rpn_cls_a` | 1            | RPN   |
//! | `rpn_reg`   | 4            | RPN   |
//! | `det_cls`   | C + 1        | box predictor |
//! | `det_cls_a` | C + 1        | box predictor |
//! | `det_cls_s` | C_source + 1 | box predictor (training only) |
//! | `det_reg`   | 4 C          | box predictor |

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{anchor_grid, decode, nms, BBox, BoxDelta};
use crate::scene::{Category, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pooling grid side inside the box (the context ring adds one cell per side).
    pub pool_grid: usize,
    pub hidden: usize,
    pub anchor_grid: usize,
    pub anchor_scales: Vec<f64>,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_nms_iou: f64,
    /// Proposals kept after RPN NMS.
    pub proposals: usize,
    /// Proposal-to-groundtruth IoU for a foreground label.
    pub det_fg_iou: f64,
    pub det_nms_iou: f64,
    pub min_box_size: f64,
    /// Append groundtruth boxes to the proposal set during training.
    pub train_with_gt_proposals: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pool_grid: 4,
            hidden: 32,
            anchor_grid: 8,
            anchor_scales: vec![8.0, 10.0, 12.0],
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_nms_iou: 0.7,
            proposals: 8,
            det_fg_iou: 0.5,
            det_nms_iou: 0.5,
            min_box_size: 1.0,
            train_with_gt_proposals: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.pool_grid == 0 || self.hidden == 0 || self.anchor_grid == 0 {
            return fail("pool_grid, hidden and anchor_grid must be positive");
        }
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|s| !(*s > 0.0)) {
            return fail("anchor_scales must be non-empty and positive");
        }
        if self.rpn_pos_iou < self.rpn_neg_iou {
            return fail("rpn_pos_iou must be >= rpn_neg_iou");
        }
        if self.proposals == 0 {
            return fail("proposals must be positive");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let side = self.pool_grid + 2;
        side * side + 2
    }

    pub fn anchors(&self, width: usize, height: usize) -> Vec<BBox> {
        anchor_grid(width as f64, height as f64, self.anchor_grid, &self.anchor_scales)
    }
}

/// Which noise-tolerant components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantFlags {
    /// Mixed classification head `det_cls_a` in the box predictor.
    pub det_extra_head: bool,
    /// Mask background terms of `det_cls_a` on mined images.
    pub det_zero_background: bool,
    /// Mixed objectness head `rpn_cls_a`.
    pub rpn_extra_head: bool,
    /// Distillation head `det_cls_s` supervised by the source detector.
    pub distill: bool,
}

impl VariantFlags {
    pub const NAIVE: Self = Self {
        det_extra_head: false,
        det_zero_background: false,
        rpn_extra_head: false,
        distill: false,
    };
    pub const DET_A: Self = Self {
        det_extra_head: true,
        ..Self::NAIVE
    };
    pub const DET_AZ: Self = Self {
        det_zero_background: true,
        ..Self::DET_A
    };
    pub const DET_AZ_RPN_A: Self = Self {
        rpn_extra_head: true,
        ..Self::DET_AZ
    };
    pub const DET_AZ_RPN_A_DISTILL: Self = Self {
        distill: true,
        ..Self::DET_AZ_RPN_A
    };

    pub fn validate(&self) -> Result<()> {
        if self.det_zero_background && !self.det_extra_head {
            return Err(Error::Config(
                "det_zero_background requires det_extra_head".into(),
            ));
        }
        Ok(())
    }
}

/// Dense layer, weights stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.inputs)) {
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    /// Accumulates `grad_out ⊗ x` into `grads` and `W^T grad_out` into `grad_x`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear, grad_x: &mut [f64]) {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = o * self.inputs;
            let w = &self.weight[row..row + self.inputs];
            let gw = &mut grads.weight[row..row + self.inputs];
            for i in 0..self.inputs {
                gw[i] += g * x[i];
                grad_x[i] += g * w[i];
            }
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names of the eight parameter tensors, in storage order.
pub const TENSOR_NAMES: [&str; 8] = [
    "extractor",
    "rpn_cls",
    "rpn_cls_a",
    "rpn_reg",
    "det_cls",
    "det_cls_a",
    "det_cls_s",
    "det_reg",
];

/// All learnable weights of one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    /// Bumped by every optimiser step.
    pub version: u64,
    pub pool_grid: usize,
    /// Global index of the detector's class 1.
    pub first_category: Category,
    pub num_categories: u32,
    /// Classes (excluding background) of the distillation head.
    pub num_source_categories: u32,
    pub extractor: Linear,
    pub rpn_cls: Linear,
    pub rpn_cls_a: Linear,
    pub rpn_reg: Linear,
    pub det_cls: Linear,
    pub det_cls_a: Linear,
    pub det_cls_s: Linear,
    pub det_reg: Linear,
}

const HEAD_STD: f64 = 0.01;

impl DetectorParams {
    pub fn random<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        first_category: Category,
        num_categories: u32,
        num_source_categories: u32,
        rng: &mut R,
    ) -> Self {
        let inputs = cfg.input_dim();
        let h = cfg.hidden;
        let c = num_categories as usize;
        Self {
            version: 0,
            pool_grid: cfg.pool_grid,
            first_category,
            num_categories,
            num_source_categories,
            extractor: Linear::random(inputs, h, 1.0 / (inputs as f64).sqrt(), rng),
            rpn_cls: Linear::random(h, 1, HEAD_STD, rng),
            rpn_cls_a: Linear::random(h, 1, HEAD_STD, rng),
            rpn_reg: Linear::random(h, 4, HEAD_STD, rng),
            det_cls: Linear::random(h, c + 1, HEAD_STD, rng),
            det_cls_a: Linear::random(h, c + 1, HEAD_STD, rng),
            det_cls_s: Linear::random(h, num_source_categories as usize + 1, HEAD_STD, rng),
            det_reg: Linear::random(h, 4 * c, HEAD_STD, rng),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.version = 0;
        for t in z.tensors_mut() {
            t.values_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> [&Linear; 8] {
        [
            &self.extractor,
            &self.rpn_cls,
            &self.rpn_cls_a,
            &self.rpn_reg,
            &self.det_cls,
            &self.det_cls_a,
            &self.det_cls_s,
            &self.det_reg,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Linear; 8] {
        [
            &mut self.extractor,
            &mut self.rpn_cls,
            &mut self.rpn_cls_a,
            &mut self.rpn_reg,
            &mut self.det_cls,
            &mut self.det_cls_a,
            &mut self.det_cls_s,
            &mut self.det_reg,
        ]
    }

    pub fn hidden(&self) -> usize {
        self.extractor.outputs
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.pool_grid + 2;
        let h = self.hidden();
        let c = self.num_categories as usize;
        let expected = [
            (side * side + 2, h),
            (h, 1),
            (h, 1),
            (h, 4),
            (h, c + 1),
            (h, c + 1),
            (h, self.num_source_categories as usize + 1),
            (h, 4 * c),
        ];
        for ((name, t), (i, o)) in TENSOR_NAMES.iter().zip(self.tensors()).zip(expected) {
            if t.inputs != i || t.outputs != o || t.weight.len() != i * o || t.bias.len() != o {
                return Err(Error::Shape(format!(
                    "{name}: expected {o}x{i}, found {}x{} ({} weights)",
                    t.outputs,
                    t.inputs,
                    t.weight.len()
                )));
            }
            if let Some(v) = t.values().find(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("{name} holds non-finite value {v}")));
            }
        }
        Ok(())
    }

    pub fn global_category(&self, class: usize) -> Category {
        self.first_category + class as Category - 1
    }

    /// Detector class index for a global category, `None` if out of range.
    pub fn class_of(&self, category: Category) -> Option<usize> {
        (category >= self.first_category && category < self.first_category + self.num_categories)
            .then(|| (category - self.first_category + 1) as usize)
    }
}

// --- feature extraction ------------------------------------------------------

/// Pooled `(G+2)^2` cell means over the box and its context ring, followed by
/// width and height normalised by the image size.
pub fn pooled_inputs(scene: &Scene, bbox: &BBox, pool_grid: usize) -> Result<Vec<f64>> {
    if !(bbox.width() >= 1.0 && bbox.height() >= 1.0) || !bbox.is_valid() {
        return Err(Error::InvalidBox {
            x_min: bbox.x_min,
            y_min: bbox.y_min,
            x_max: bbox.x_max,
            y_max: bbox.y_max,
            reason: "sub-pixel box",
        });
    }
    let side = pool_grid + 2;
    let cw = bbox.width() / pool_grid as f64;
    let ch = bbox.height() / pool_grid as f64;
    let inv_area = 1.0 / (cw * ch);
    // Summed-area values at the (side + 1)^2 cell corners, shared by neighbouring cells.
    let mut corners = vec![0.0; (side + 1) * (side + 1)];
    for r in 0..=side {
        let y = bbox.y_min + (r as f64 - 1.0) * ch;
        for c in 0..=side {
            corners[r * (side + 1) + c] = scene.integral_at(bbox.x_min + (c as f64 - 1.0) * cw, y);
        }
    }
    let mut out = Vec::with_capacity(side * side + 2);
    for r in 0..side {
        let (top, bottom) = (&corners[r * (side + 1)..], &corners[(r + 1) * (side + 1)..]);
        for c in 0..side {
            out.push((bottom[c + 1] - bottom[c] - top[c + 1] + top[c]) * inv_area);
        }
    }
    out.push(bbox.width() / scene.width as f64);
    out.push(bbox.height() / scene.height as f64);
    Ok(out)
}

/// Forward pass of the extractor for one box.
#[derive(Debug, Clone)]
pub struct BoxFeature {
    pub input: Vec<f64>,
    /// `tanh` activations, the feature every head reads.
    pub hidden: Vec<f64>,
}

impl BoxFeature {
    pub fn compute(scene: &Scene, bbox: &BBox, params: &DetectorParams) -> Result<Self> {
        let input = pooled_inputs(scene, bbox, params.pool_grid)?;
        let mut hidden = params.extractor.forward(&input);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        Ok(Self { input, hidden })
    }

    /// Back-propagates `d loss / d hidden` into the extractor gradients.
    pub fn backward(&self, grad_hidden: &[f64], extractor_grads: &mut Linear) {
        let pre: Vec<f64> = grad_hidden
            .iter()
            .zip(&self.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        for (o, &g) in pre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            extractor_grads.bias[o] += g;
            let row = o * self.input.len();
            for (gw, x) in extractor_grads.weight[row..row + self.input.len()]
                .iter_mut()
                .zip(&self.input)
            {
                *gw += g * x;
            }
        }
    }
}

pub fn extract_feature(scene: &Scene, bbox: &BBox, params: &DetectorParams) -> Result<Vec<f64>> {
    Ok(BoxFeature::compute(scene, bbox, params)?.hidden)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

// --- RPN -----------------------------------------------------------------------

/// Extractor and RPN head outputs for every anchor of one image.
#[derive(Debug, Clone)]
pub struct AnchorPass {
    pub anchors: Vec<BBox>,
    pub features: Vec<BoxFeature>,
    pub cls: Vec<f64>,
    /// Only populated when the mixed RPN head is active.
    pub cls_a: Option<Vec<f64>>,
    pub reg: Vec<[f64; 4]>,
}

impl AnchorPass {
    pub fn compute(scene: &Scene, params: &DetectorParams, flags: &VariantFlags, cfg: &ModelConfig) -> Result<Self> {
        let anchors = cfg.anchors(scene.width, scene.height);
        let mut features = Vec::with_capacity(anchors.len());
        let mut cls = Vec::with_capacity(anchors.len());
        let mut cls_a = flags.rpn_extra_head.then(|| Vec::with_capacity(anchors.len()));
        let mut reg = Vec::with_capacity(anchors.len());
        for a in &anchors {
            let f = BoxFeature::compute(scene, a, params)?;
            cls.push(params.rpn_cls.forward(&f.hidden)[0]);
            if let Some(v) = cls_a.as_mut() {
                v.push(params.rpn_cls_a.forward(&f.hidden)[0]);
            }
            let r = params.rpn_reg.forward(&f.hidden);
            reg.push([r[0], r[1], r[2], r[3]]);
            features.push(f);
        }
        Ok(Self {
            anchors,
            features,
            cls,
            cls_a,
            reg,
        })
    }

    /// Objectness per anchor: `sigmoid(rpn_cls)`, averaged with
    /// `sigmoid(rpn_cls_a)` when the mixed head is active.
    pub fn objectness(&self) -> Vec<f64> {
        match &self.cls_a {
            Some(a) => self
                .cls
                .iter()
                .zip(a)
                .map(|(z, za)| 0.5 * (sigmoid(*z) + sigmoid(*za)))
                .collect(),
            None => self.cls.iter().map(|z| sigmoid(*z)).collect(),
        }
    }

    /// Decodes, clips, suppresses and keeps the top proposals.
    pub fn proposals(&self, width: usize, height: usize, cfg: &ModelConfig) -> ProposalSet {
        let scores = self.objectness();
        let mut boxes = Vec::with_capacity(self.anchors.len());
        let mut kept_scores = Vec::with_capacity(self.anchors.len());
        for ((a, r), s) in self.anchors.iter().zip(&self.reg).zip(&scores) {
            let decoded = decode(&BoxDelta::from_slice(r), a)
                .ok()
                .and_then(|b| b.clip(width as f64, height as f64, cfg.min_box_size));
            if let Some(b) = decoded {
                boxes.push(b);
                kept_scores.push(*s);
            }
        }
        let keep = nms(&boxes, &kept_scores, cfg.rpn_nms_iou);
        ProposalSet {
            proposals: keep
                .into_iter()
                .take(cfg.proposals)
                .map(|i| Proposal {
                    bbox: boxes[i],
                    objectness: kept_scores[i],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Class-agnostic proposals, objectness-descending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

pub fn rpn_forward(
    scene: &Scene,
    params: &DetectorParams,
    flags: &VariantFlags,
    cfg: &ModelConfig,
) -> Result<ProposalSet> {
    Ok(AnchorPass::compute(scene, params, flags, cfg)?.proposals(scene.width, scene.height, cfg))
}

// --- box predictor -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Global category index.
    pub category: Category,
    pub score: f64,
    /// Class distribution over `[background, class 1, ..]`.
    pub probs: Vec<f64>,
}

/// Class distribution used at inference: `det_cls`, averaged with
/// `det_cls_a` when the mixed head is active. `det_cls_s` is never read.
pub fn class_distribution(feature: &[f64], params: &DetectorParams, flags: &VariantFlags) -> Vec<f64> {
    let p = softmax(&params.det_cls.forward(feature));
    if flags.det_extra_head {
        let pa = softmax(&params.det_cls_a.forward(feature));
        p.iter().zip(&pa).map(|(x, y)| 0.5 * (x + y)).collect()
    } else {
        p
    }
}

pub fn box_predictor_forward(
    scene: &Scene,
    proposals: &ProposalSet,
    params: &DetectorParams,
    flags: &VariantFlags,
    cfg: &ModelConfig,
) -> Result<Vec<Detection>> {
    let c = params.num_categories as usize;
    let mut candidates: Vec<Detection> = Vec::with_capacity(proposals.len());
    for p in &proposals.proposals {
        let feature = extract_feature(scene, &p.bbox, params)?;
        let probs = class_distribution(&feature, params, flags);
        let (class, score) = (1..=c).fold((1, f64::NEG_INFINITY), |best, k| {
            if probs[k] > best.1 {
                (k, probs[k])
            } else {
                best
            }
        });
        let reg = params.det_reg.forward(&feature);
        let delta = BoxDelta::from_slice(&reg[4 * (class - 1)..4 * class]);
        let refined = decode(&delta, &p.bbox)
            .ok()
            .and_then(|b| b.clip(scene.width as f64, scene.height as f64, cfg.min_box_size))
            .unwrap_or(p.bbox);
        candidates.push(Detection {
            bbox: refined,
            category: params.global_category(class),
            score,
            probs,
        });
    }

    let mut keep: Vec<usize> = Vec::with_capacity(candidates.len());
    for k in 1..=c {
        let category = params.global_category(k);
        let idx: Vec<usize> = (0..candidates.len())
            .filter(|&i| candidates[i].category == category)
            .collect();
        let boxes: Vec<BBox> = idx.iter().map(|&i| candidates[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| candidates[i].score).collect();
        keep.extend(nms(&boxes, &scores, cfg.det_nms_iou).into_iter().map(|j| idx[j]));
    }
    keep.sort_by(|&i, &j| candidates[j].score.total_cmp(&candidates[i].score).then(i.cmp(&j)));
    Ok(keep.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Full two-stage inference.
pub fn detect(
    scene: &Scene,
    params: &DetectorParams,
    flags: &VariantFlags,
    cfg: &ModelConfig,
) -> Result<Vec<Detection>> {
    let proposals = rpn_forward(scene, params, flags, cfg)?;
    box_predictor_forward(scene, &proposals, params, flags, cfg)
}

/// Target detector warm-started from a source detector.
///
/// The extractor and RPN are copied; the mixed RPN head starts from the
/// source's `rpn_cls` (the source is trained without it). Target
/// classification and regression heads are drawn fresh from `rng`, and
/// `det_cls_s` is a copy of the source classifier.
pub fn init_from_source<R: Rng + ?Sized>(
    source: &DetectorParams,
    first_category: Category,
    num_categories: u32,
    rng: &mut R,
) -> DetectorParams {
    let h = source.hidden();
    let c = num_categories as usize;
    let det_cls = Linear::random(h, c + 1, HEAD_STD, rng);
    let det_cls_a = Linear::random(h, c + 1, HEAD_STD, rng);
    let det_reg = Linear::random(h, 4 * c, HEAD_STD, rng);
    DetectorParams {
        version: 0,
        pool_grid: source.pool_grid,
        first_category,
        num_categories,
        num_source_categories: source.num_categories,
        extractor: source.extractor.clone(),
        rpn_cls: source.rpn_cls.clone(),
        rpn_cls_a: source.rpn_cls.clone(),
        rpn_reg: source.rpn_reg.clone(),
        det_cls,
        det_cls_a,
        det_cls_s: source.det_cls.clone(),
        det_reg,
    }
}

/// Source-category distribution of every proposal under the source detector.
pub fn source_distributions(
    source: &DetectorParams,
    scene: &Scene,
    proposals: &[BBox],
) -> Result<Vec<Vec<f64>>> {
    proposals
        .iter()
        .map(|b| {
            let f = extract_feature(scene, b, source)?;
            Ok(softmax(&source.det_cls.forward(&f)))
        })
        .collect()
}

// --- checkpoint ------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NOTERCNN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian binary checkpoint:
///
/// ```text
/// magic "NOTERCNN" | u32 format version | u64 params version
/// u32 pool_grid | u32 first_category | u32 num_categories | u32 num_source_categories
/// 8 x { u32 name_len | name | u32 inputs | u32 outputs | f64 weights.. | f64 bias.. }
/// ```
pub fn write_checkpoint<W: Write>(params: &DetectorParams, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&params.version.to_le_bytes())?;
    for v in [
        params.pool_grid as u32,
        params.first_category,
        params.num_categories,
        params.num_source_categories,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors()) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.inputs as u32).to_le_bytes())?;
        out.write_all(&(t.outputs as u32).to_le_bytes())?;
        for v in t.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<DetectorParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing magic header".into()));
    }
    let format = read_u32(&mut input)?;
    if format != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(format));
    }
    let mut buf8 = [0u8; 8];
    input.read_exact(&mut buf8)?;
    let version = u64::from_le_bytes(buf8);
    let pool_grid = read_u32(&mut input)? as usize;
    let first_category = read_u32(&mut input)?;
    let num_categories = read_u32(&mut input)?;
    let num_source_categories = read_u32(&mut input)?;

    let mut tensors = Vec::with_capacity(8);
    for expected in TENSOR_NAMES {
        let len = read_u32(&mut input)? as usize;
        if len > 64 {
            return Err(Error::Checkpoint(format!("tensor name length {len}")));
        }
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        if name != expected.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected}, found {}",
                String::from_utf8_lossy(&name)
            )));
        }
        let inputs = read_u32(&mut input)? as usize;
        let outputs = read_u32(&mut input)? as usize;
        if inputs.saturating_mul(outputs) > 1 << 24 {
            return Err(Error::Checkpoint(format!("{expected}: implausible shape")));
        }
        let mut t = Linear::zeros(inputs, outputs);
        for v in t.values_mut() {
            input.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        tensors.push(t);
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("eight tensors read");
    let params = DetectorParams {
        version,
        pool_grid,
        first_category,
        num_categories,
        num_source_categories,
        extractor: next(),
        rpn_cls: next(),
        rpn_cls_a: next(),
        rpn_reg: next(),
        det_cls: next(),
        det_cls_a: next(),
        det_cls_s: next(),
        det_reg: next(),
    };
    params.validate()?;
    Ok(params)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(params: &DetectorParams, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<DetectorParams> {
    read_checkpoint(std::fs::read(path)?.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::LabeledBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn params(seed: u64) -> DetectorParams {
        let mut p = DetectorParams::random(&ModelConfig::default(), 4, 6, 3, &mut rng(seed));
        // spread head weights so gating tests are not trivially satisfied
        for t in p.tensors_mut().into_iter().skip(1) {
            let mut r = rng(seed + 1);
            for v in t.values_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
        p
    }

    fn scene() -> Scene {
        let mut pixels = vec![0.1; 32 * 32];
        for y in 8..18 {
            for x in 5..16 {
                pixels[y * 32 + x] = if (x - 5) % 3 == 0 { 0.5 } else { 0.8 };
            }
        }
        let gt = vec![LabeledBox::new(BBox::new(5.0, 8.0, 16.0, 18.0).unwrap(), 5)];
        Scene::new(1, 32, 32, pixels, gt).unwrap()
    }

    #[test]
    fn zero_image_feature_is_affine_in_size_only() {
        let s = Scene::new(0, 32, 32, vec![0.0; 1024], vec![]).unwrap();
        let p = params(1);
        let b = BBox::new(4.0, 4.0, 12.0, 20.0).unwrap();
        let input = pooled_inputs(&s, &b, 4).unwrap();
        assert!(input[..36].iter().all(|v| *v == 0.0));
        let f = extract_feature(&s, &b, &p).unwrap();
        for (o, v) in f.iter().enumerate() {
            let row = &p.extractor.weight[o * 38..(o + 1) * 38];
            let expected = (p.extractor.bias[o] + row[36] * 0.25 + row[37] * 0.5).tanh();
            assert!((*v - expected).abs() < 1e-15);
        }
        assert_eq!(f, extract_feature(&s, &b, &p).unwrap());
        let tiny = BBox::new(1.0, 1.0, 1.5, 4.0).unwrap();
        assert!(extract_feature(&s, &tiny, &p).is_err());
    }

    #[test]
    fn pooled_cells_cover_context() {
        let s = scene();
        // box exactly on the object: inner cells bright, ring dark
        let b = BBox::new(5.0, 8.0, 16.0, 18.0).unwrap();
        let x = pooled_inputs(&s, &b, 4).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-12);
        assert!(x[7] > 0.5);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let s = scene();
        let p = params(3);
        let b = BBox::new(3.5, 6.0, 14.0, 19.0).unwrap();
        let f = BoxFeature::compute(&s, &b, &p).unwrap();
        for unit in [0usize, 7, 31] {
            let mut grad = p.extractor.clone();
            grad.values_mut().for_each(|v| *v = 0.0);
            let mut onehot = vec![0.0; p.hidden()];
            onehot[unit] = 1.0;
            f.backward(&onehot, &mut grad);
            for idx in [0usize, 5, unit * 38 + 3, unit * 38 + 37, 38 * 32 + unit] {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let eps = 1e-5;
                *plus.extractor.values_mut().nth(idx).unwrap() += eps;
                *minus.extractor.values_mut().nth(idx).unwrap() -= eps;
                let fd = (extract_feature(&s, &b, &plus).unwrap()[unit]
                    - extract_feature(&s, &b, &minus).unwrap()[unit])
                    / (2.0 * eps);
                let an = *grad.values().nth(idx).unwrap();
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-8, "{idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn rpn_gating_and_averaging() {
        let s = scene();
        let cfg = ModelConfig::default();
        let p = params(5);
        let mut q = p.clone();
        q.rpn_cls_a.values_mut().for_each(|v| *v = 0.3);
        let off = VariantFlags::NAIVE;
        assert_eq!(rpn_forward(&s, &p, &off, &cfg).unwrap(), rpn_forward(&s, &q, &off, &cfg).unwrap());

        let pass = AnchorPass::compute(&s, &p, &VariantFlags::DET_AZ_RPN_A, &cfg).unwrap();
        assert_eq!(pass.anchors.len(), 192);
        assert_eq!(pass.cls.len(), 192);

        let mut zero = p.clone();
        zero.rpn_cls.values_mut().for_each(|v| *v = 0.0);
        zero.rpn_cls_a.values_mut().for_each(|v| *v = 0.0);
        let pass = AnchorPass::compute(&s, &zero, &VariantFlags::DET_AZ_RPN_A, &cfg).unwrap();
        assert!(pass.objectness().iter().all(|o| *o == 0.5));
    }

    #[test]
    fn degenerate_weights_still_yield_full_proposal_budget() {
        let s = scene();
        let cfg = ModelConfig::default();
        let mut p = params(6);
        for t in p.tensors_mut().into_iter().skip(1) {
            t.values_mut().for_each(|v| *v = 0.0);
        }
        let props = rpn_forward(&s, &p, &VariantFlags::DET_AZ_RPN_A, &cfg).unwrap();
        assert_eq!(props.len(), cfg.proposals);
        assert!(props.proposals.iter().all(|x| x.objectness == 0.5));
        let dets = detect(&s, &p, &VariantFlags::DET_AZ_RPN_A, &cfg).unwrap();
        assert!(!dets.is_empty());
    }

    #[test]
    fn box_predictor_gating_and_simplex() {
        let s = scene();
        let cfg = ModelConfig::default();
        let p = params(7);
        let props = rpn_forward(&s, &p, &VariantFlags::NAIVE, &cfg).unwrap();
        let mut q = p.clone();
        q.det_cls_a.values_mut().for_each(|v| *v = -0.7);
        let flags = VariantFlags::NAIVE;
        assert_eq!(
            box_predictor_forward(&s, &props, &p, &flags, &cfg).unwrap(),
            box_predictor_forward(&s, &props, &q, &flags, &cfg).unwrap()
        );
        for d in box_predictor_forward(&s, &props, &p, &VariantFlags::DET_AZ, &cfg).unwrap() {
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&d.score));
            assert!((4..=9).contains(&d.category));
        }
    }

    #[test]
    fn ensemble_average_is_arithmetic() {
        let mut p = params(8);
        let h = p.hidden();
        p.det_cls = Linear::zeros(h, 7);
        p.det_cls_a = Linear::zeros(h, 7);
        let lp = |v: f64| v.ln();
        p.det_cls.bias = vec![lp(0.8), lp(0.2), -1e9, -1e9, -1e9, -1e9, -1e9];
        p.det_cls_a.bias = vec![lp(0.4), lp(0.6), -1e9, -1e9, -1e9, -1e9, -1e9];
        let feature = vec![0.3; h];
        let d = class_distribution(&feature, &p, &VariantFlags::DET_A);
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.4).abs() < 1e-12 && d[2] == 0.0);
    }

    #[test]
    fn inference_never_reads_distillation_head() {
        let s = scene();
        let cfg = ModelConfig::default();
        let p = params(9);
        let mut q = p.clone();
        q.det_cls_s.values_mut().for_each(|v| *v = 0.0);
        for flags in [VariantFlags::NAIVE, VariantFlags::DET_AZ_RPN_A_DISTILL] {
            assert_eq!(detect(&s, &p, &flags, &cfg).unwrap(), detect(&s, &q, &flags, &cfg).unwrap());
        }
    }

    #[test]
    fn init_from_source_copies_and_refreshes() {
        let source = DetectorParams::random(&ModelConfig::default(), 1, 3, 3, &mut rng(10));
        let a = init_from_source(&source, 4, 6, &mut rng(11));
        let b = init_from_source(&source, 4, 6, &mut rng(11));
        assert_eq!(a, b);
        assert_eq!(a.extractor, source.extractor);
        assert_eq!(a.rpn_reg, source.rpn_reg);
        assert_eq!(a.det_cls_s, source.det_cls);
        assert_eq!(a.det_cls.outputs, 7);
        assert_eq!(a.det_reg.outputs, 24);
        assert_ne!(a.det_cls, a.det_cls_a);
        a.validate().unwrap();
    }

    #[test]
    fn source_distribution_rows_are_distributions() {
        let s = scene();
        let source = params(12);
        let boxes = vec![BBox::new(1.0, 1.0, 9.0, 9.0).unwrap(), BBox::new(5.0, 8.0, 16.0, 18.0).unwrap()];
        let d = source_distributions(&source, &s, &boxes).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d, source_distributions(&source, &s, &boxes).unwrap());
        for row in d {
            assert_eq!(row.len(), 7);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut p = params(13);
        p.version = 42;
        let mut a = Vec::new();
        write_checkpoint(&p, &mut a).unwrap();
        let q = read_checkpoint(a.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut b = Vec::new();
        write_checkpoint(&q, &mut b).unwrap();
        assert_eq!(a, b);

        let mut bad = a.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::CheckpointVersion(9))));
        assert!(read_checkpoint(&a[..a.len() - 3]).is_err());
    }
}
