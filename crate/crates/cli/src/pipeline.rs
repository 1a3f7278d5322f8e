//! Pipeline stages behind the subcommands, with their on-disk layout:
//!
//! ```text
//! <out>/data/seed-<s>/{source_train,source_val,target_train,target_val}.jsonl
//! <out>/data/seed-<s>/world.json              world config the files were made from
//! <out>/data/seed-<s>/split-spc<n>.json       seed boxes and image-level labels
//! <out>/source/seed-<s>.ckpt                  cached source detector (+ .json key)
//! <out>/runs/<variant>/spc<n>/seed-<s>/       metrics.csv, curves.csv, run.toml,
//!                                             mined/iter-<t>.tsv, checkpoints/iter-<t>.ckpt
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use notercnn::metrics::{evaluate_detector, mined_box_quality, MapResult, MiningQuality};
use notercnn::mining::{detect_weak, mine_from_detections, mined_count, write_mined, MinedBox};
use notercnn::model::{load_checkpoint, save_checkpoint};
use notercnn::scene::{generate_world, read_dataset, write_dataset, Category, Dataset, ImageId, World};
use notercnn::trainer::{
    run_training_mining, seed_split, train_source_detector, withheld_boxes, ExperimentRecord, IterationRecord,
    METRICS_HEADER,
};
use notercnn::{AnnotationStore, DetectorParams, LabeledBox, ModelConfig, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, Result};

pub const CURVES_HEADER: &str = "iteration,theta,count,precision,recall";

const SPLITS: [&str; 4] = ["source_train", "source_val", "target_train", "target_val"];

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("seed-{seed}"))
    }

    pub fn dataset(&self, seed: u64, split: &str) -> PathBuf {
        self.data_dir(seed).join(format!("{split}.jsonl"))
    }

    pub fn split(&self, seed: u64, seeds_per_category: usize) -> PathBuf {
        self.data_dir(seed).join(format!("split-spc{seeds_per_category}.json"))
    }

    pub fn source_checkpoint(&self, seed: u64) -> PathBuf {
        self.root.join("source").join(format!("seed-{seed}.ckpt"))
    }

    pub fn run_dir(&self, variant: &str, seeds_per_category: usize, seed: u64) -> PathBuf {
        self.root
            .join("runs")
            .join(variant)
            .join(format!("spc{seeds_per_category}"))
            .join(format!("seed-{seed}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn key_matches(path: &Path, key: &str) -> bool {
    fs::read_to_string(path).is_ok_and(|k| k == key)
}

// --- data ------------------------------------------------------------------------

/// Loads the world of `seed` from disk, regenerating the files when they are
/// missing or were made from a different world config.
pub fn ensure_world(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<World> {
    let world_cfg = cfg.world_config(seed);
    let key = serde_json::to_string_pretty(&world_cfg).expect("serializable") + "\n";
    let key_path = layout.data_dir(seed).join("world.json");
    let complete = SPLITS.iter().all(|s| layout.dataset(seed, s).is_file());
    if !(complete && key_matches(&key_path, &key)) {
        log::info!("generating world for seed {seed}");
        let world = generate_world(&world_cfg)?;
        for (name, data) in SPLITS.iter().zip(world_splits(&world)) {
            let path = layout.dataset(seed, name);
            let mut out = create(&path)?;
            write_dataset(data, &mut out).map_err(|source| CliError::Data {
                path: path.clone(),
                source,
            })?;
            out.flush().map_err(io_err(&path))?;
        }
        write_file(&key_path, key.as_bytes())?;
    }
    let read = |name: &str| -> Result<Dataset> {
        let path = layout.dataset(seed, name);
        let file = File::open(&path).map_err(io_err(&path))?;
        read_dataset(BufReader::new(file)).map_err(|source| CliError::Data { path, source })
    };
    Ok(World {
        source_train: read(SPLITS[0])?,
        source_val: read(SPLITS[1])?,
        target_train: read(SPLITS[2])?,
        target_val: read(SPLITS[3])?,
    })
}

fn world_splits(world: &World) -> [&Dataset; 4] {
    [&world.source_train, &world.source_val, &world.target_train, &world.target_val]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    seeds_per_category: usize,
    seed_images: BTreeMap<ImageId, Vec<LabeledBox>>,
    weak: BTreeMap<ImageId, BTreeSet<Category>>,
}

/// Draws the seed/weak split and records it next to the datasets.
pub fn ensure_split(layout: &Layout, world: &World, seed: u64, seeds_per_category: usize) -> Result<AnnotationStore> {
    let store = seed_split(&world.target_train, seeds_per_category, seed)?;
    let file = SplitFile {
        seed,
        seeds_per_category,
        seed_images: store.seed.clone(),
        weak: store.weak.clone(),
    };
    let text = serde_json::to_string(&file).expect("serializable") + "\n";
    write_file(&layout.split(seed, seeds_per_category), text.as_bytes())?;
    Ok(store)
}

/// Writes datasets and splits for every configured seed and seed count.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    for &seed in &cfg.seeds {
        let world = ensure_world(cfg, layout, seed)?;
        for &n in &cfg.seeds_per_category {
            ensure_split(layout, &world, seed, n)?;
        }
    }
    Ok(())
}

// --- source detector ---------------------------------------------------------------

/// Everything the source detector depends on.
#[derive(Serialize)]
struct SourceKey<'a> {
    world: &'a WorldConfig,
    seed: u64,
    learning_rate: f64,
    momentum: f64,
    lr_drop_at: f64,
    lr_drop_factor: f64,
    source_epochs: usize,
    model: &'a ModelConfig,
}

/// Loads the cached source detector of `seed`, training it when the cache is
/// missing or stale.
pub fn ensure_source(cfg: &ExperimentConfig, layout: &Layout, world: &World, seed: u64) -> Result<DetectorParams> {
    let tc = cfg.train_config(seed);
    let world_cfg = cfg.world_config(seed);
    let key = serde_json::to_string_pretty(&SourceKey {
        world: &world_cfg,
        seed,
        learning_rate: tc.learning_rate,
        momentum: tc.momentum,
        lr_drop_at: tc.lr_drop_at,
        lr_drop_factor: tc.lr_drop_factor,
        source_epochs: tc.source_epochs,
        model: &tc.model,
    })
    .expect("serializable")
        + "\n";
    let ckpt = layout.source_checkpoint(seed);
    let key_path = ckpt.with_extension("json");
    if ckpt.is_file() && key_matches(&key_path, &key) {
        return load_checkpoint(&ckpt).map_err(|source| CliError::Data { path: ckpt, source });
    }
    log::info!("training source detector for seed {seed}");
    let params = train_source_detector(&world.source_train, &tc)?.params;
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_checkpoint(&params, &ckpt)?;
    write_file(&key_path, key.as_bytes())?;
    Ok(params)
}

/// Source detectors of every configured seed with their validation mAP.
pub fn train_source(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<(u64, MapResult)>> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let world = ensure_world(cfg, layout, seed)?;
        let params = ensure_source(cfg, layout, &world, seed)?;
        let eval = evaluate_detector(&world.source_val, &params, &notercnn::VariantFlags::NAIVE, &cfg.train.model)?;
        out.push((seed, eval));
    }
    Ok(out)
}

// --- training-mining runs ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: String,
    pub seeds_per_category: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub record: ExperimentRecord,
}

fn curve_rows(r: &IterationRecord) -> String {
    r.curve
        .iter()
        .map(|c| {
            format!(
                "{},{:.4},{},{:.6},{:.6}\n",
                r.iteration, c.theta, c.count, c.precision, c.recall
            )
        })
        .collect()
}

/// One training-mining run. Metrics and curves are rewritten after every
/// iteration so an aborted run keeps its finished iterations.
pub fn run_one(cfg: &ExperimentConfig, layout: &Layout, seeds_per_category: usize, seed: u64) -> Result<RunResult> {
    let world = ensure_world(cfg, layout, seed)?;
    let store = ensure_split(layout, &world, seed, seeds_per_category)?;
    let source = ensure_source(cfg, layout, &world, seed)?;
    let tc = cfg.train_config(seed);
    let variant = tc.schedule.name().to_string();
    let dir = layout.run_dir(&variant, seeds_per_category, seed);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let echo = ExperimentConfig {
        seeds: vec![seed],
        seeds_per_category: vec![seeds_per_category],
        out_dir: None,
        ..cfg.clone()
    };
    write_file(&dir.join("run.toml"), echo.to_toml().as_bytes())?;

    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut curves = format!("{CURVES_HEADER}\n");
    let record = run_training_mining(
        &source,
        &store,
        &world.target_train,
        &world.target_val,
        &tc,
        &mut |r, params| {
            let t = r.iteration;
            let ckpt = dir.join("checkpoints").join(format!("iter-{t}.ckpt"));
            fs::create_dir_all(dir.join("checkpoints"))?;
            save_checkpoint(params, &ckpt)?;
            let mined_path = dir.join("mined").join(format!("iter-{t}.tsv"));
            fs::create_dir_all(dir.join("mined"))?;
            let mut out = BufWriter::new(File::create(&mined_path)?);
            write_mined(&r.mined, &mut out)?;
            out.flush()?;
            metrics.push_str(&r.csv_row(&variant, cfg.record_wall_clock));
            metrics.push('\n');
            fs::write(dir.join("metrics.csv"), &metrics)?;
            curves.push_str(&curve_rows(r));
            fs::write(dir.join("curves.csv"), &curves)?;
            Ok(())
        },
    )?;
    Ok(RunResult {
        variant,
        seeds_per_category,
        seed,
        dir,
        record,
    })
}

/// Runs every (seed count, seed) pair of the config.
pub fn run(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for &n in &cfg.seeds_per_category {
        for &seed in &cfg.seeds {
            out.push(run_one(cfg, layout, n, seed)?);
        }
    }
    Ok(out)
}

// --- standalone mining and evaluation ----------------------------------------------------

/// Selects a checkpoint: an explicit path or the final iteration of the run
/// matching the config's first seed and seed count.
pub fn resolve_checkpoint(cfg: &ExperimentConfig, layout: &Layout, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => layout
            .run_dir(cfg.variant.name(), cfg.seeds_per_category[0], cfg.seeds[0])
            .join("checkpoints")
            .join(format!("iter-{}.ckpt", cfg.train.iterations)),
    }
}

#[derive(Debug, Clone)]
pub struct MineOutcome {
    pub path: PathBuf,
    pub mined: BTreeMap<ImageId, Vec<MinedBox>>,
    pub quality: MiningQuality,
}

/// Mines the weak images of the first seed with a trained checkpoint.
pub fn mine(
    cfg: &ExperimentConfig,
    layout: &Layout,
    checkpoint: Option<&Path>,
    output: Option<&Path>,
) -> Result<MineOutcome> {
    let (seed, n) = (cfg.seeds[0], cfg.seeds_per_category[0]);
    let world = ensure_world(cfg, layout, seed)?;
    let store = ensure_split(layout, &world, seed, n)?;
    let ckpt = resolve_checkpoint(cfg, layout, checkpoint);
    let params = load_checkpoint(&ckpt).map_err(|source| CliError::Data { path: ckpt, source })?;
    let tc = cfg.train_config(seed);
    let flags = tc.flags_for(tc.iterations);
    let detections = detect_weak(&world.target_train, &store.weak, &params, &flags, &tc.model)?;
    let mined = mine_from_detections(&detections, &store.weak, tc.theta_b, tc.iterations + 1);
    let quality = mined_box_quality(&mined, &withheld_boxes(&world.target_train, &store.weak), tc.mining_tp_iou);
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| {
        layout
            .root
            .join("mine")
            .join(format!("{}-spc{n}-seed-{seed}.tsv", cfg.variant.name()))
    });
    let mut out = create(&path)?;
    write_mined(&mined, &mut out)?;
    out.flush().map_err(io_err(&path))?;
    log::info!("mined {} boxes into {}", mined_count(&mined), path.display());
    Ok(MineOutcome { path, mined, quality })
}

/// Evaluates a trained checkpoint on the target validation split of the first seed.
pub fn eval(cfg: &ExperimentConfig, layout: &Layout, checkpoint: Option<&Path>) -> Result<MapResult> {
    let seed = cfg.seeds[0];
    let world = ensure_world(cfg, layout, seed)?;
    let ckpt = resolve_checkpoint(cfg, layout, checkpoint);
    let params = load_checkpoint(&ckpt).map_err(|source| CliError::Data { path: ckpt, source })?;
    let tc = cfg.train_config(seed);
    Ok(evaluate_detector(
        &world.target_val,
        &params,
        &tc.flags_for(tc.iterations),
        &tc.model,
    )?)
}
