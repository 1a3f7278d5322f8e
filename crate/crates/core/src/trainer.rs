//! SGD training, source pretraining and the training-mining loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_and_gradients, BatchItem, GradientSet, Provenance};
use crate::metrics::{evaluate_detector, mined_box_quality, MapResult, MiningQuality};
use crate::mining::{detect_weak, mine_from_detections, mined_count, precision_vs_count_curve, theta_grid, CurvePoint, MinedBox, DEFAULT_THETA_B};
use crate::model::{init_from_source, DetectorParams, ModelConfig, VariantFlags};
use crate::scene::{split_seed, AnnotationStore, Category, Dataset, ImageId, LabeledBox};

/// Named per-iteration flag schedules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Naive,
    DetA,
    DetAz,
    DetAzRpnA,
    DetAzRpnADistill,
    /// Distillation up to and including the switch iteration, then off.
    HalfDistill,
    /// Explicit flags for iterations `0..=iterations`.
    Custom(Vec<VariantFlags>),
}

impl Schedule {
    pub const NAMED: [&'static str; 6] = ["naive", "det-a", "det-az", "det-az-rpn-a", "det-az-rpn-a-distill", "half-distill"];

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Naive => "naive",
            Schedule::DetA => "det-a",
            Schedule::DetAz => "det-az",
            Schedule::DetAzRpnA => "det-az-rpn-a",
            Schedule::DetAzRpnADistill => "det-az-rpn-a-distill",
            Schedule::HalfDistill => "half-distill",
            Schedule::Custom(_) => "custom",
        }
    }

    /// Flags for `iteration`. `switch` is the last distilled iteration of the
    /// half-distill schedule.
    pub fn flags_for(&self, iteration: usize, switch: usize) -> VariantFlags {
        match self {
            Schedule::Naive => VariantFlags::NAIVE,
            Schedule::DetA => VariantFlags::DET_A,
            Schedule::DetAz => VariantFlags::DET_AZ,
            Schedule::DetAzRpnA => VariantFlags::DET_AZ_RPN_A,
            Schedule::DetAzRpnADistill => VariantFlags::DET_AZ_RPN_A_DISTILL,
            Schedule::HalfDistill if iteration <= switch => VariantFlags::DET_AZ_RPN_A_DISTILL,
            Schedule::HalfDistill => VariantFlags::DET_AZ_RPN_A,
            Schedule::Custom(v) => v[iteration.min(v.len() - 1)],
        }
    }

    pub fn validate(&self, iterations: usize) -> Result<()> {
        if let Schedule::Custom(v) = self {
            if v.len() != iterations + 1 {
                return Err(Error::Config(format!(
                    "custom schedule has {} entries, expected {} (iterations 0..={iterations})",
                    v.len(),
                    iterations + 1
                )));
            }
            for f in v {
                f.validate()?;
            }
        }
        Ok(())
    }

    pub fn uses_distillation(&self) -> bool {
        match self {
            Schedule::DetAzRpnADistill | Schedule::HalfDistill => true,
            Schedule::Custom(v) => v.iter().any(|f| f.distill),
            _ => false,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "naive" => Schedule::Naive,
            "det-a" => Schedule::DetA,
            "det-az" => Schedule::DetAz,
            "det-az-rpn-a" => Schedule::DetAzRpnA,
            "det-az-rpn-a-distill" | "distill" => Schedule::DetAzRpnADistill,
            "half-distill" => Schedule::HalfDistill,
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant {s:?} (expected one of {})",
                    Schedule::NAMED.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fraction of each training run after which the learning rate is
    /// multiplied by `lr_drop_factor`.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    /// Epochs of iteration 0, which sees only the small seed pool.
    pub seed_epochs: usize,
    /// Epochs of source-detector pretraining.
    pub source_epochs: usize,
    /// Mining iterations after the seed-only iteration 0.
    pub iterations: usize,
    pub theta_b: f64,
    /// Set by the experiment rather than read from config files.
    #[serde(skip)]
    pub schedule: Schedule,
    /// Last distilled iteration of `half-distill`; defaults to `iterations / 2`.
    pub half_distill_switch: Option<usize>,
    /// Threshold steps of the precision-vs-count curve; 0 disables it.
    pub curve_steps: usize,
    /// IoU at which a mined box counts as correct.
    pub mining_tp_iou: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            lr_drop_at: 0.7,
            lr_drop_factor: 0.1,
            epochs: 40,
            seed_epochs: 120,
            source_epochs: 20,
            iterations: 4,
            theta_b: DEFAULT_THETA_B,
            schedule: Schedule::DetAzRpnADistill,
            half_distill_switch: None,
            curve_steps: 20,
            mining_tp_iou: 0.5,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return Err(Error::Config("lr_drop_at must lie in [0, 1]".into()));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::Config("lr_drop_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.theta_b) {
            return Err(Error::Config("theta_b must lie in [0, 1]".into()));
        }
        self.model.validate()?;
        self.schedule.validate(self.iterations)
    }

    pub fn switch_iteration(&self) -> usize {
        self.half_distill_switch.unwrap_or(self.iterations / 2)
    }

    pub fn flags_for(&self, iteration: usize) -> VariantFlags {
        self.schedule.flags_for(iteration, self.switch_iteration())
    }
}

/// Independent deterministic random stream for one purpose.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SOURCE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 7;
const SHUFFLE_STREAM: u64 = 100;

/// The seed/weak split used by experiments run with `seed`.
pub fn seed_split(dataset: &Dataset, seeds_per_category: usize, seed: u64) -> Result<AnnotationStore> {
    split_seed(dataset, seeds_per_category, &mut rng_stream(seed, SPLIT_STREAM))
}

/// One momentum-SGD update: `v <- mu v - lr g`, `w <- w + v`.
pub fn momentum_step(weights: &mut [f64], velocity: &mut [f64], grads: &[f64], learning_rate: f64, momentum: f64) {
    for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v - learning_rate * g;
        *w += *v;
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: DetectorParams,
}

impl Sgd {
    pub fn new(params: &DetectorParams, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut DetectorParams, grads: &GradientSet) {
        for ((w, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads.0.tensors())
        {
            momentum_step(&mut w.weight, &mut v.weight, &g.weight, self.learning_rate, self.momentum);
            momentum_step(&mut w.bias, &mut v.bias, &g.bias, self.learning_rate, self.momentum);
        }
        params.version += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains on the seed pool plus mined boxes, one shuffled pass per epoch with
/// batch size 1. `iteration` only labels diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn train_detector(
    init: &DetectorParams,
    dataset: &Dataset,
    seed_pool: &BTreeMap<ImageId, Vec<LabeledBox>>,
    mined: &BTreeMap<ImageId, Vec<MinedBox>>,
    cfg: &TrainConfig,
    flags: &VariantFlags,
    source: Option<&DetectorParams>,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<TrainOutcome> {
    flags.validate()?;
    if let Some(id) = mined.keys().find(|id| seed_pool.contains_key(id)) {
        return Err(Error::Config(format!("image {id} is in both the seed and mined pools")));
    }
    let lookup = |id: &ImageId| {
        dataset
            .get(*id)
            .ok_or_else(|| Error::Config(format!("image {id} missing from dataset")))
    };
    let mut items: Vec<BatchItem<'_>> = Vec::with_capacity(seed_pool.len() + mined.len());
    for (id, boxes) in seed_pool {
        items.push(BatchItem {
            scene: lookup(id)?,
            boxes: boxes.clone(),
            provenance: Provenance::Seed,
        });
    }
    for (id, boxes) in mined {
        items.push(BatchItem {
            scene: lookup(id)?,
            boxes: boxes.iter().map(MinedBox::labeled).collect(),
            provenance: Provenance::Mined,
        });
    }

    let mut params = init.clone();
    let mut sgd = Sgd::new(&params, cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let drop_epoch = (cfg.lr_drop_at * cfg.epochs as f64).ceil() as usize;
    for epoch in 0..cfg.epochs {
        if epoch == drop_epoch {
            sgd.learning_rate = cfg.learning_rate * cfg.lr_drop_factor;
        }
        order.shuffle(rng);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let (loss, grads) = loss_and_gradients(std::slice::from_ref(&items[i]), &params, flags, source, &cfg.model)
                .map_err(|e| match e {
                    Error::NonFinite { component, .. } => Error::NonFinite {
                        component,
                        iteration,
                        epoch,
                        item: step,
                    },
                    other => other,
                })?;
            total += loss.total();
            sgd.step(&mut params, &grads);
        }
        let mean = if items.is_empty() { 0.0 } else { total / items.len() as f64 };
        log::debug!("iteration {iteration} epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// Trains the source detector on fully annotated source scenes (all
/// optional heads off).
pub fn train_source_detector(source: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if source.is_empty() {
        return Err(Error::Config("source dataset is empty".into()));
    }
    cfg.model.validate()?;
    let mut rng = rng_stream(cfg.seed, SOURCE_STREAM);
    let init = DetectorParams::random(
        &cfg.model,
        source.first_category,
        source.num_categories,
        source.num_categories,
        &mut rng,
    );
    let pool: BTreeMap<ImageId, Vec<LabeledBox>> = source.scenes.iter().map(|s| (s.image_id, s.gt.clone())).collect();
    let source_cfg = TrainConfig {
        epochs: cfg.source_epochs,
        ..cfg.clone()
    };
    train_detector(
        &init,
        source,
        &pool,
        &BTreeMap::new(),
        &source_cfg,
        &VariantFlags::NAIVE,
        None,
        &mut rng,
        0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub flags: VariantFlags,
    pub evaluation: MapResult,
    pub mining: MiningQuality,
    pub mined: BTreeMap<ImageId, Vec<MinedBox>>,
    /// Precision-vs-count curve of the detector used for mining (empty at iteration 0).
    pub curve: Vec<CurvePoint>,
    pub epoch_losses: Vec<f64>,
    pub wall_clock_s: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,variant,mAP@0.5,mAP@[0.5:0.95],mined_count,mined_precision,mined_recall,wall_clock_s";

impl IterationRecord {
    /// One metrics CSV row. Without `wall_clock` the timing column is `nan`
    /// so the file is reproducible byte for byte.
    pub fn csv_row(&self, variant: &str, wall_clock: bool) -> String {
        let clock = if wall_clock {
            format!("{:.3}", self.wall_clock_s)
        } else {
            "nan".to_string()
        };
        format!(
            "{},{},{:.6},{:.6},{},{:.6},{:.6},{}",
            self.iteration,
            variant,
            self.evaluation.map_50,
            self.evaluation.map_50_95,
            self.mining.mined_count,
            self.mining.precision,
            self.mining.recall,
            clock
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub variant: String,
    pub iterations: Vec<IterationRecord>,
    pub final_params: DetectorParams,
}

impl ExperimentRecord {
    pub fn metrics_csv(&self, wall_clock: bool) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.iterations {
            out.push_str(&r.csv_row(&self.variant, wall_clock));
            out.push('\n');
        }
        out
    }
}

/// Truth boxes of the weak images, used only to score mining.
pub fn withheld_boxes(dataset: &Dataset, weak: &BTreeMap<ImageId, BTreeSet<Category>>) -> BTreeMap<ImageId, Vec<LabeledBox>> {
    weak.keys()
        .filter_map(|id| dataset.get(*id).map(|s| (*id, s.gt.clone())))
        .collect()
}

/// Iteration 0 trains on the seed pool from a source-initialised detector;
/// every later iteration mines with the previous detector and retrains from
/// it on seed plus mined boxes. `observer` sees each finished iteration.
pub fn run_training_mining(
    source: &DetectorParams,
    store: &AnnotationStore,
    train: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&IterationRecord, &DetectorParams) -> Result<()>,
) -> Result<ExperimentRecord> {
    cfg.validate()?;
    store.validate()?;
    let withheld = withheld_boxes(train, &store.weak);
    let mut init_rng = rng_stream(cfg.seed, INIT_STREAM);
    let mut params = init_from_source(source, train.first_category, train.num_categories, &mut init_rng);
    let mut records = Vec::with_capacity(cfg.iterations + 1);

    for t in 0..=cfg.iterations {
        let wrap = |e: Error| Error::Iteration {
            iteration: t,
            source: Box::new(e),
        };
        let started = Instant::now();
        let flags = cfg.flags_for(t);
        let (mined, curve) = if t == 0 {
            (BTreeMap::new(), Vec::new())
        } else {
            let prev_flags = cfg.flags_for(t - 1);
            let detections = detect_weak(train, &store.weak, &params, &prev_flags, &cfg.model).map_err(wrap)?;
            let mined = mine_from_detections(&detections, &store.weak, cfg.theta_b, t);
            let curve = if cfg.curve_steps > 0 {
                precision_vs_count_curve(
                    &detections,
                    &store.weak,
                    &withheld,
                    &theta_grid(cfg.curve_steps),
                    cfg.mining_tp_iou,
                )
            } else {
                Vec::new()
            };
            (mined, curve)
        };
        let mining = mined_box_quality(&mined, &withheld, cfg.mining_tp_iou);

        let source_arg = flags.distill.then_some(source);
        let mut rng = rng_stream(cfg.seed, SHUFFLE_STREAM + t as u64);
        let iteration_cfg;
        let train_cfg = if t == 0 {
            iteration_cfg = TrainConfig {
                epochs: cfg.seed_epochs,
                ..cfg.clone()
            };
            &iteration_cfg
        } else {
            cfg
        };
        let outcome = train_detector(&params, train, &store.seed, &mined, train_cfg, &flags, source_arg, &mut rng, t)
            .map_err(wrap)?;
        params = outcome.params;
        let evaluation = evaluate_detector(validation, &params, &flags, &cfg.model).map_err(wrap)?;
        let record = IterationRecord {
            iteration: t,
            flags,
            evaluation,
            mining,
            mined,
            curve,
            epoch_losses: outcome.epoch_losses,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} iteration {t}: mAP@0.5 {:.4}, mAP@[.5:.95] {:.4}, mined {} (precision {:.3}, recall {:.3})",
            cfg.schedule,
            record.evaluation.map_50,
            record.evaluation.map_50_95,
            mined_count(&record.mined),
            record.mining.precision,
            record.mining.recall
        );
        observer(&record, &params)?;
        records.push(record);
    }
    Ok(ExperimentRecord {
        variant: cfg.schedule.name().to_string(),
        iterations: records,
        final_params: params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_matches_closed_form_on_quadratic() {
        // f(w) = a w^2 / 2, gradient a w. The recurrence on (w, v) is linear:
        // [w', v'] = [[1 - lr a, mu], [-lr a, mu]] [w, v].
        let (a, lr, mu) = (2.0, 0.1, 0.9);
        let mut w = [3.0];
        let mut v = [0.0];
        let m = [[1.0 - lr * a, mu], [-lr * a, mu]];
        let mut state = [3.0f64, 0.0];
        for _ in 0..50 {
            let g = [a * w[0]];
            momentum_step(&mut w, &mut v, &g, lr, mu);
            state = [
                m[0][0] * state[0] + m[0][1] * state[1],
                m[1][0] * state[0] + m[1][1] * state[1],
            ];
            assert!((w[0] - state[0]).abs() < 1e-12);
            assert!((v[0] - state[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn first_momentum_step_is_plain_gradient_step() {
        let mut w = [1.0, -2.0];
        let mut v = [0.0, 0.0];
        momentum_step(&mut w, &mut v, &[0.5, -1.0], 0.1, 0.9);
        assert_eq!(w, [0.95, -1.9]);
        assert_eq!(v, [-0.05, 0.1]);
    }

    #[test]
    fn schedules() {
        for name in Schedule::NAMED {
            assert_eq!(name.parse::<Schedule>().unwrap().name(), name);
        }
        assert!("bogus".parse::<Schedule>().is_err());
        let s = Schedule::HalfDistill;
        let distilled: Vec<bool> = (0..=8).map(|t| s.flags_for(t, 4).distill).collect();
        assert_eq!(distilled, [true, true, true, true, true, false, false, false, false]);
        assert_eq!(Schedule::Naive.flags_for(3, 0), VariantFlags::NAIVE);
        assert!(Schedule::Custom(vec![VariantFlags::NAIVE]).validate(2).is_err());
    }

    #[test]
    fn csv_row_format() {
        let r = IterationRecord {
            iteration: 2,
            flags: VariantFlags::DET_AZ,
            evaluation: MapResult {
                map_50_95: 0.25,
                map_50: 0.5,
                per_category: BTreeMap::new(),
            },
            mining: MiningQuality::from_counts(9, 10, 20),
            mined: BTreeMap::new(),
            curve: Vec::new(),
            epoch_losses: Vec::new(),
            wall_clock_s: 1.23456,
        };
        assert_eq!(r.csv_row("det-az", false), "2,det-az,0.500000,0.250000,10,0.900000,0.450000,nan");
        assert_eq!(r.csv_row("det-az", true), "2,det-az,0.500000,0.250000,10,0.900000,0.450000,1.235");
    }
}
