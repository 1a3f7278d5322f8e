//! Procedural detection world.
//!
//! Each category is drawn as a filled rectangle of a characteristic intensity
//! carrying a vertical stripe texture of a characteristic period, over a
//! dim background with Gaussian pixel noise. Source and target categories use
//! disjoint index ranges so a source detector never sees target objects.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::mining::MinedBox;

pub type ImageId = u64;
/// Category index; 0 is reserved for background.
pub type Category = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(flatten)]
    pub bbox: BBox,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl LabeledBox {
    pub fn new(bbox: BBox, category: Category) -> Self {
        Self {
            bbox,
            category,
            score: None,
        }
    }
}

/// Appearance of one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStyle {
    pub intensity: f64,
    /// Every `stripe_period`-th column (relative to the object's left edge)
    /// is darkened by `stripe_depth`.
    pub stripe_period: u32,
    pub stripe_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub num_source_categories: u32,
    pub num_target_categories: u32,
    pub source_train_images: usize,
    pub source_val_images: usize,
    pub target_train_images: usize,
    pub target_val_images: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_size_min: usize,
    pub object_size_max: usize,
    /// Probability that each object after the first repeats a category
    /// already present in the image.
    pub repeat_category_prob: f64,
    pub max_pair_iou: f64,
    pub background: f64,
    /// Fraction of objects drawn faint: blended toward the background by a
    /// contrast drawn uniformly from `[contrast_min, 1]`.
    pub faint_fraction: f64,
    pub contrast_min: f64,
    pub pixel_noise: f64,
    pub placement_retries: usize,
    /// Up to this many unlabeled distractors per image; placements that
    /// fail are skipped.
    pub distractors_max: usize,
    /// Distractors are untextured filled rectangles instead of hollow frames.
    pub distractors_filled: bool,
    /// Explicit styles for categories `1..=S+T`; derived when empty.
    pub styles: Vec<CategoryStyle>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            num_source_categories: 3,
            num_target_categories: 6,
            source_train_images: 300,
            source_val_images: 100,
            target_train_images: 600,
            target_val_images: 400,
            objects_min: 1,
            objects_max: 4,
            object_size_min: 8,
            object_size_max: 12,
            repeat_category_prob: 0.5,
            max_pair_iou: 0.0,
            background: 0.1,
            faint_fraction: 0.0,
            contrast_min: 0.5,
            pixel_noise: 0.05,
            placement_retries: 500,
            distractors_max: 3,
            distractors_filled: false,
            styles: Vec::new(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_source_categories < 1 || self.num_target_categories < 1 {
            return fail("category counts must be at least 1");
        }
        if self.width < 4 || self.height < 4 {
            return fail("image must be at least 4x4");
        }
        if self.objects_min < 1 || self.objects_min > self.objects_max {
            return fail("objects_min must be in 1..=objects_max");
        }
        if self.object_size_min < 2
            || self.object_size_min > self.object_size_max
            || self.object_size_max > self.width.min(self.height)
        {
            return fail("object sizes must satisfy 2 <= min <= max <= image side");
        }
        if !(0.0..=1.0).contains(&self.repeat_category_prob) {
            return fail("repeat_category_prob must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.faint_fraction) {
            return fail("faint_fraction must lie in [0, 1]");
        }
        if !(self.contrast_min > 0.0 && self.contrast_min <= 1.0) {
            return fail("contrast_min must lie in (0, 1]");
        }
        if !(self.pixel_noise >= 0.0) {
            return fail("pixel_noise must be non-negative");
        }
        let total = (self.num_source_categories + self.num_target_categories) as usize;
        if !self.styles.is_empty() && self.styles.len() != total {
            return Err(Error::Config(format!(
                "styles lists {} entries but there are {total} categories",
                self.styles.len()
            )));
        }
        Ok(())
    }

    pub fn source_categories(&self) -> std::ops::RangeInclusive<Category> {
        1..=self.num_source_categories
    }

    pub fn target_categories(&self) -> std::ops::RangeInclusive<Category> {
        let first = self.num_source_categories + 1;
        first..=first + self.num_target_categories - 1
    }

    /// Styles for categories `1..=S+T`, index 0 is category 1.
    pub fn resolved_styles(&self) -> Vec<CategoryStyle> {
        if !self.styles.is_empty() {
            return self.styles.clone();
        }
        let total = (self.num_source_categories + self.num_target_categories) as usize;
        let periods = [2u32, 3, 4];
        // Interleave source and target categories along the intensity axis so
        // every target category has a near neighbour in the source set.
        let mut slots: Vec<usize> = (0..total).collect();
        let stride = (total as f64 / self.num_source_categories as f64).max(1.0);
        let source_slots: Vec<usize> = (0..self.num_source_categories as usize)
            .map(|i| ((i as f64 * stride).round() as usize).min(total - 1))
            .collect();
        slots.retain(|s| !source_slots.contains(s));
        let order: Vec<usize> = source_slots.into_iter().chain(slots).collect();

        let mut styles = vec![
            CategoryStyle {
                intensity: 0.0,
                stripe_period: 2,
                stripe_depth: 0.3
            };
            total
        ];
        for (category_idx, slot) in order.into_iter().enumerate() {
            let t = if total > 1 {
                slot as f64 / (total - 1) as f64
            } else {
                0.5
            };
            styles[category_idx] = CategoryStyle {
                intensity: 0.3 + 0.6 * t,
                stripe_period: periods[slot % periods.len()],
                stripe_depth: 0.3,
            };
        }
        styles
    }
}

/// One image with its full groundtruth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: ImageId,
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub gt: Vec<LabeledBox>,
    integral: Vec<f64>,
}

impl Scene {
    pub fn new(
        image_id: ImageId,
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        gt: Vec<LabeledBox>,
    ) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "image {image_id}: {} pixels for a {width}x{height} grid",
                pixels.len()
            )));
        }
        for g in &gt {
            g.bbox.validate()?;
            if !g.bbox.within(width as f64, height as f64) || g.category == 0 {
                return Err(Error::Shape(format!(
                    "image {image_id}: groundtruth {:?} outside image or background-labelled",
                    g
                )));
            }
        }
        let integral = summed_area_table(&pixels, width, height);
        Ok(Self {
            image_id,
            width,
            height,
            pixels,
            gt,
            integral,
        })
    }

    pub fn categories(&self) -> BTreeSet<Category> {
        self.gt.iter().map(|g| g.category).collect()
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gt.iter().map(|g| g.bbox).collect()
    }

    /// Intensity integrated over `[x0, x1] x [y0, y1]` in continuous
    /// coordinates. Area outside the image contributes zero.
    pub fn region_sum(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
        self.integral_at(x1, y1) - self.integral_at(x0, y1) - self.integral_at(x1, y0)
            + self.integral_at(x0, y0)
    }

    /// Summed intensity over `[0, x) x [0, y)`. The summed-area table is
    /// bilinear inside each pixel for a piecewise constant image, so
    /// interpolating it is exact.
    pub fn integral_at(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, self.width as f64);
        let y = y.clamp(0.0, self.height as f64);
        let stride = self.width + 1;
        let xi = (x.floor() as usize).min(self.width.saturating_sub(1));
        let yi = (y.floor() as usize).min(self.height.saturating_sub(1));
        let (fx, fy) = (x - xi as f64, y - yi as f64);
        let s00 = self.integral[yi * stride + xi];
        let s10 = self.integral[yi * stride + xi + 1];
        let s01 = self.integral[(yi + 1) * stride + xi];
        let s11 = self.integral[(yi + 1) * stride + xi + 1];
        s00 * (1.0 - fx) * (1.0 - fy) + s10 * fx * (1.0 - fy) + s01 * (1.0 - fx) * fy + s11 * fx * fy
    }
}

fn summed_area_table(pixels: &[f64], width: usize, height: usize) -> Vec<f64> {
    let stride = width + 1;
    let mut table = vec![0.0; stride * (height + 1)];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += pixels[y * width + x];
            table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
        }
    }
    table
}

/// Scenes over one contiguous category range.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub first_category: Category,
    pub num_categories: u32,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn categories(&self) -> std::ops::RangeInclusive<Category> {
        self.first_category..=self.first_category + self.num_categories - 1
    }

    pub fn get(&self, id: ImageId) -> Option<&Scene> {
        self.scenes
            .binary_search_by_key(&id, |s| s.image_id)
            .ok()
            .map(|i| &self.scenes[i])
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let styles = config.resolved_styles();
    let mut next_id: ImageId = 0;
    let mut split = |count: usize, categories: std::ops::RangeInclusive<Category>| -> Result<Dataset> {
        let first = *categories.start();
        let n = categories.end() - first + 1;
        let scenes = (next_id..next_id + count as u64)
            .map(|id| generate_scene(config, &styles, id, first, n))
            .collect::<Result<Vec<_>>>()?;
        next_id += count as u64;
        Ok(Dataset {
            first_category: first,
            num_categories: n,
            scenes,
        })
    };
    let source_train = split(config.source_train_images, config.source_categories())?;
    let source_val = split(config.source_val_images, config.source_categories())?;
    let target_train = split(config.target_train_images, config.target_categories())?;
    let target_val = split(config.target_val_images, config.target_categories())?;
    Ok(World {
        source_train,
        source_val,
        target_train,
        target_val,
    })
}

/// Each scene draws from its own stream keyed by image id, so scenes are
/// independent of generation order.
fn scene_rng(seed: u64, image_id: ImageId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng
}

fn generate_scene(
    config: &WorldConfig,
    styles: &[CategoryStyle],
    image_id: ImageId,
    first_category: Category,
    num_categories: u32,
) -> Result<Scene> {
    let mut rng = scene_rng(config.seed, image_id);
    let (w, h) = (config.width, config.height);
    let count = rng.random_range(config.objects_min..=config.objects_max);

    let mut objects: Vec<LabeledBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        if attempts >= config.placement_retries {
            return Err(Error::Overcrowded {
                image_id,
                requested: count,
                retries: config.placement_retries,
            });
        }
        attempts += 1;
        let bw = rng.random_range(config.object_size_min..=config.object_size_max);
        let bh = rng.random_range(config.object_size_min..=config.object_size_max);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        let candidate = BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64)?;
        if objects
            .iter()
            .any(|o| iou(&o.bbox, &candidate) > config.max_pair_iou)
        {
            continue;
        }
        let category = if !objects.is_empty() && rng.random_bool(config.repeat_category_prob) {
            objects[rng.random_range(0..objects.len())].category
        } else {
            first_category + rng.random_range(0..num_categories)
        };
        objects.push(LabeledBox::new(candidate, category));
    }
    let contrasts: Vec<f64> = if config.faint_fraction > 0.0 {
        (0..objects.len())
            .map(|_| {
                if rng.random_bool(config.faint_fraction) {
                    rng.random_range(config.contrast_min..=1.0)
                } else {
                    1.0
                }
            })
            .collect()
    } else {
        vec![1.0; objects.len()]
    };

    let mut frames: Vec<(BBox, f64)> = Vec::new();
    if config.distractors_max > 0 {
        let n = rng.random_range(0..=config.distractors_max);
        for _ in 0..n {
            for _ in 0..config.placement_retries {
                let bw = rng.random_range(config.object_size_min..=config.object_size_max);
                let bh = rng.random_range(config.object_size_min..=config.object_size_max);
                let x0 = rng.random_range(0..=w - bw);
                let y0 = rng.random_range(0..=h - bh);
                let candidate = BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64)?;
                let clash = objects.iter().map(|o| &o.bbox).chain(frames.iter().map(|f| &f.0)).any(|b| iou(b, &candidate) > config.max_pair_iou);
                if !clash {
                    frames.push((candidate, rng.random_range(0.3..=0.9)));
                    break;
                }
            }
        }
    }

    let mut pixels = vec![config.background; w * h];
    for (b, value) in &frames {
        let (x0, y0) = (b.x_min as usize, b.y_min as usize);
        let (x1, y1) = (b.x_max as usize, b.y_max as usize);
        for y in y0..y1 {
            for x in x0..x1 {
                if config.distractors_filled || x == x0 || y == y0 || x + 1 == x1 || y + 1 == y1 {
                    pixels[y * w + x] = *value;
                }
            }
        }
    }
    // Larger objects first so a small object inside a large one stays visible.
    let mut paint_order: Vec<usize> = (0..objects.len()).collect();
    paint_order.sort_by(|&a, &b| objects[b].bbox.area().total_cmp(&objects[a].bbox.area()).then(a.cmp(&b)));
    for i in paint_order {
        let o = &objects[i];
        let style = styles[(o.category - 1) as usize];
        let (x0, y0) = (o.bbox.x_min as usize, o.bbox.y_min as usize);
        let (x1, y1) = (o.bbox.x_max as usize, o.bbox.y_max as usize);
        let c = contrasts[i];
        for y in y0..y1 {
            for x in x0..x1 {
                let stripe = (x - x0) % style.stripe_period as usize == 0;
                let value = if stripe {
                    style.intensity * (1.0 - style.stripe_depth)
                } else {
                    style.intensity
                };
                pixels[y * w + x] = config.background + c * (value - config.background);
            }
        }
    }
    if config.pixel_noise > 0.0 {
        let noise = Normal::new(0.0, config.pixel_noise).expect("validated sigma");
        for p in pixels.iter_mut() {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Scene::new(image_id, w, h, pixels, objects)
}

/// The three annotation pools of the semi-supervised setting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationStore {
    /// Fully box-annotated seed images.
    pub seed: BTreeMap<ImageId, Vec<LabeledBox>>,
    /// Image-level category sets for every non-seed image.
    pub weak: BTreeMap<ImageId, BTreeSet<Category>>,
    /// Boxes mined at the latest iteration, keyed by image.
    pub mined: BTreeMap<ImageId, Vec<MinedBox>>,
}

impl AnnotationStore {
    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.seed.keys().find(|id| self.weak.contains_key(id)) {
            return Err(Error::Config(format!(
                "image {id} is in both the seed and weak pools"
            )));
        }
        for (id, boxes) in &self.mined {
            let labels = self
                .weak
                .get(id)
                .ok_or_else(|| Error::Config(format!("mined image {id} has no image-level label")))?;
            if let Some(b) = boxes.iter().find(|b| !labels.contains(&b.category)) {
                return Err(Error::Config(format!(
                    "mined box of category {} not in labels of image {id}",
                    b.category
                )));
            }
        }
        Ok(())
    }
}

/// Picks `seeds_per_category` fully annotated images per category; every
/// other image keeps only its category set.
pub fn split_seed<R: Rng + ?Sized>(
    dataset: &Dataset,
    seeds_per_category: usize,
    rng: &mut R,
) -> Result<AnnotationStore> {
    let mut chosen: BTreeSet<ImageId> = BTreeSet::new();
    if seeds_per_category > 0 {
        for category in dataset.categories() {
            let candidates: Vec<ImageId> = dataset
                .scenes
                .iter()
                .filter(|s| !chosen.contains(&s.image_id) && s.gt.iter().any(|g| g.category == category))
                .map(|s| s.image_id)
                .collect();
            if candidates.len() < seeds_per_category {
                return Err(Error::InsufficientSeeds {
                    category,
                    available: candidates.len(),
                    requested: seeds_per_category,
                });
            }
            chosen.extend(candidates.choose_multiple(rng, seeds_per_category).copied());
        }
    }

    let mut store = AnnotationStore::default();
    for scene in &dataset.scenes {
        if chosen.contains(&scene.image_id) {
            store.seed.insert(scene.image_id, scene.gt.clone());
        } else {
            store.weak.insert(scene.image_id, scene.categories());
        }
    }
    Ok(store)
}

/// Annotation noise: dropped boxes, spurious boxes and jittered coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub jitter_sigma: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fn_rate) || !(0.0..=1.0).contains(&self.fp_rate) {
            return Err(Error::Config("noise rates must lie in [0, 1]".into()));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("jitter_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Corrupts one image's boxes.
///
/// Each box is dropped with probability `fn_rate`; survivors have every
/// coordinate perturbed by `N(0, jitter_sigma)` and are re-clipped (a box that
/// collapses under jitter keeps its original coordinates). Then
/// `Poisson(fp_rate)` random boxes are appended, labelled with a category from
/// `categories` that is absent from the input when one exists.
pub fn inject_noise<R: Rng + ?Sized>(
    boxes: &[LabeledBox],
    spec: &NoiseSpec,
    width: usize,
    height: usize,
    categories: std::ops::RangeInclusive<Category>,
    rng: &mut R,
) -> Result<Vec<LabeledBox>> {
    spec.validate()?;
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::with_capacity(boxes.len());
    for b in boxes {
        if spec.fn_rate > 0.0 && rng.random_bool(spec.fn_rate) {
            continue;
        }
        if spec.jitter_sigma == 0.0 {
            out.push(*b);
            continue;
        }
        let jitter = Normal::new(0.0, spec.jitter_sigma).expect("validated sigma");
        let c = [
            b.bbox.x_min + jitter.sample(rng),
            b.bbox.y_min + jitter.sample(rng),
            b.bbox.x_max + jitter.sample(rng),
            b.bbox.y_max + jitter.sample(rng),
        ];
        let moved = BBox {
            x_min: c[0].min(c[2]),
            y_min: c[1].min(c[3]),
            x_max: c[0].max(c[2]),
            y_max: c[1].max(c[3]),
        }
        .clip(w, h, 1.0);
        out.push(LabeledBox {
            bbox: moved.unwrap_or(b.bbox),
            ..*b
        });
    }

    if spec.fp_rate > 0.0 {
        let present: BTreeSet<Category> = boxes.iter().map(|b| b.category).collect();
        let mut wrong: Vec<Category> = categories.clone().filter(|c| !present.contains(c)).collect();
        if wrong.is_empty() {
            wrong = categories.collect();
        }
        let spurious = Poisson::new(spec.fp_rate).expect("validated rate").sample(rng) as usize;
        for _ in 0..spurious {
            let bw = rng.random_range(1.0..=w);
            let bh = rng.random_range(1.0..=h);
            let x0 = rng.random_range(0.0..=w - bw);
            let y0 = rng.random_range(0.0..=h - bh);
            let bbox = BBox::new(x0, y0, x0 + bw, y0 + bh)?;
            let category = *wrong.choose(rng).expect("non-empty category range");
            out.push(LabeledBox::new(bbox, category));
        }
    }
    Ok(out)
}

// --- dataset dump ------------------------------------------------------------

pub const DATASET_FORMAT: &str = "notercnn-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    first_category: Category,
    num_categories: u32,
    images: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    image_id: ImageId,
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    boxes: Vec<LabeledBox>,
}

/// Writes a dataset as JSON lines: one header line, then one line per image.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        first_category: dataset.first_category,
        num_categories: dataset.num_categories,
        images: dataset.scenes.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serializable"))?;
    for s in &dataset.scenes {
        let record = SceneRecord {
            image_id: s.image_id,
            width: s.width,
            height: s.height,
            pixels: s.pixels.clone(),
            boxes: s.gt.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("serializable"))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        what: "dataset",
        line,
        message,
    };
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let header: DatasetHeader = serde_json::from_str(&first?).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut scenes = Vec::with_capacity(header.images);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SceneRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let scene = Scene::new(r.image_id, r.width, r.height, r.pixels, r.boxes)
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
        scenes.push(scene);
    }
    if scenes.len() != header.images {
        return Err(parse_err(
            0,
            format!("header announces {} images, found {}", header.images, scenes.len()),
        ));
    }
    if scenes.windows(2).any(|w| w[0].image_id >= w[1].image_id) {
        return Err(parse_err(0, "image ids must be strictly increasing".into()));
    }
    Ok(Dataset {
        first_category: header.first_category,
        num_categories: header.num_categories,
        scenes,
    })
}
