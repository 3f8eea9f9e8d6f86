//! Synthetic stand-ins for the simple (single-object) and complex
//! (multi-object) training sets, a noisy saliency/attention oracle, and the
//! dataset filtering heuristics.
//!
//! Every generator is a pure function of its seed. Generated pixel values
//! are rounded to `f32` so records survive a trip through the tensor
//! container bit-for-bit.

use std::borrow::Borrow;
use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::hard_segmentation;
use crate::fusion::{binarize, mask_intersection_area};
use crate::image::Image;
use crate::rng::{derive_indexed, derive_seed, fnv1a, rng_from};
use crate::segmenter::{extract_features, Segmenter};
use crate::types::{CueMap, LabelId, LabelSet, LabelSpace, SegMask, BACKGROUND};

/// Shape families in name order; class `i` draws `SHAPES[i - 1]`.
pub const SHAPES: [&str; 6] = [
    "cross",
    "diamond",
    "disc",
    "ellipse",
    "rectangle",
    "triangle",
];

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.25, 0.85],
    [0.90, 0.85, 0.15],
    [0.80, 0.20, 0.80],
    [0.15, 0.80, 0.85],
];

pub const MIN_SIDE: usize = 16;

/// Label space over the first `c` shape families.
pub fn synthetic_space(c: usize) -> Result<LabelSpace> {
    if c == 0 || c > SHAPES.len() {
        return Err(Error::domain(format!(
            "synthetic datasets support 1..={} classes, got {c}",
            SHAPES.len()
        )));
    }
    LabelSpace::new(SHAPES[..c].iter().copied())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: Image,
    pub labels: LabelSet,
    /// Oracle segmentation; used for evaluation and cue synthesis only.
    pub gt: SegMask,
}

impl SceneRecord {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CueRecord {
    pub scene_id: String,
    pub saliency: CueMap,
    /// Attention for `attention_class`.
    pub attention: CueMap,
    pub attention_class: LabelId,
    pub predicted_class: LabelId,
    pub predicted_prob: f64,
}

/// A simple image together with its cues.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleExample {
    pub scene: SceneRecord,
    pub cues: CueRecord,
}

impl SimpleExample {
    /// The declared image-level label.
    pub fn class(&self) -> LabelId {
        self.cues.attention_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Std-dev in pixels of the whole-map shift applied to each cue.
    pub boundary_jitter: f64,
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
    /// Box-blur radius in pixels.
    pub blur_radius: usize,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn none(seed: u64) -> Self {
        Self {
            boundary_jitter: 0.0,
            false_positive_rate: 0.0,
            false_negative_rate: 0.0,
            blur_radius: 0,
            seed,
        }
    }

    /// Scales every noise source with `level ∈ [0, 1]`; 0.5 is "moderate".
    pub fn from_level(level: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::domain(format!("noise level {level} outside [0,1]")));
        }
        Ok(Self {
            boundary_jitter: 3.0 * level,
            false_positive_rate: 0.1 * level,
            false_negative_rate: 0.1 * level,
            blur_radius: (2.0 * level).round() as usize,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("false_positive_rate", self.false_positive_rate),
            ("false_negative_rate", self.false_negative_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::domain(format!("{name} {r} outside [0,1]")));
            }
        }
        if !(self.boundary_jitter >= 0.0) {
            return Err(Error::domain("boundary_jitter must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Images with a side shorter than this are dropped.
    pub min_side: usize,
    /// Images with a side longer than this are dropped.
    pub max_side: usize,
    /// Attention predictions less confident than this are dropped.
    pub min_attention_prob: f64,
    /// Binarization threshold for both the saliency and attention masks.
    pub saliency_threshold: f64,
    pub top_k_per_class: usize,
    #[serde(default)]
    pub top_k_overrides: BTreeMap<LabelId, usize>,
    /// Complex images whose predicted foreground ratio is below this are dropped.
    pub fg_ratio_min: f64,
    pub m_step_top_n: usize,
}

impl FilterConfig {
    /// The thresholds used on the ImageNet/PASCAL-scale data.
    pub fn reference() -> Self {
        Self {
            min_side: 200,
            max_side: 500,
            min_attention_prob: 0.2,
            saliency_threshold: 0.5,
            top_k_per_class: 1500,
            top_k_overrides: BTreeMap::new(),
            fg_ratio_min: 0.05,
            m_step_top_n: 10_000,
        }
    }

    /// Same probability thresholds, size limits and caps scaled to 64 px images.
    pub fn desk() -> Self {
        Self {
            min_side: 32,
            max_side: 128,
            top_k_per_class: 25,
            m_step_top_n: 100,
            ..Self::reference()
        }
    }

    pub fn top_k(&self, class: LabelId) -> usize {
        self.top_k_overrides
            .get(&class)
            .copied()
            .unwrap_or(self.top_k_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("min_attention_prob", self.min_attention_prob),
            ("saliency_threshold", self.saliency_threshold),
            ("fg_ratio_min", self.fg_ratio_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("{name} {v} outside [0,1]")));
            }
        }
        if self.min_side > self.max_side {
            return Err(Error::domain("min_side exceeds max_side"));
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    f64::from(v.clamp(0.0, 1.0) as f32)
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: LabelId,
    cy: f64,
    cx: f64,
    r: f64,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let r = self.r;
        match (self.class as usize - 1) % SHAPES.len() {
            0 => {
                let arm = r / 3.0;
                (dx.abs() < r && dy.abs() < arm) || (dy.abs() < r && dx.abs() < arm)
            }
            1 => dx.abs() + dy.abs() < r,
            2 => dx * dx + dy * dy < r * r,
            3 => (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) < 1.0,
            4 => dx.abs() < r && dy.abs() < 0.7 * r,
            _ => dy > -r && dy < r && dx.abs() < 0.5 * (dy + r),
        }
    }
}

fn check_dims(dims: (usize, usize)) -> Result<()> {
    if dims.0 < MIN_SIDE || dims.1 < MIN_SIDE {
        return Err(Error::domain(format!(
            "image {}x{} smaller than the minimum {MIN_SIDE}x{MIN_SIDE}",
            dims.0, dims.1
        )));
    }
    Ok(())
}

/// Background-labelled blob whose colour lies between the background grey
/// and a class colour.
#[derive(Debug, Clone, Copy)]
struct Clutter {
    shape: Shape,
    color: [f64; 3],
}

/// Textured grey background, then clutter, then shapes in draw order (last wins).
fn render(
    rng: &mut ChaCha8Rng,
    dims: (usize, usize),
    shapes: &[Shape],
    clutter: &[Clutter],
) -> Result<(Image, SegMask)> {
    let (h, w) = dims;
    let base = rng.random_range(0.35..0.65);
    let tint: [f64; 3] = [
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.04..0.04),
    ];
    let shades: Vec<f64> = shapes
        .iter()
        .map(|_| rng.random_range(-0.05..0.05))
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    let mut gt = vec![BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let top = shapes.iter().rposition(|s| s.contains(y, x));
            match top {
                Some(i) => {
                    let s = &shapes[i];
                    gt[y * w + x] = s.class;
                    let color = PALETTE[(s.class as usize - 1) % PALETTE.len()];
                    for c in color {
                        data.push(quantize(c + shades[i] + rng.random_range(-0.05..0.05)));
                    }
                }
                None => match clutter.iter().rposition(|c| c.shape.contains(y, x)) {
                    Some(i) => {
                        for c in clutter[i].color {
                            data.push(quantize(c + rng.random_range(-0.05..0.05)));
                        }
                    }
                    None => {
                        let lum = base + rng.random_range(-0.12..0.12);
                        for t in tint {
                            data.push(quantize(lum + t + rng.random_range(-0.03..0.03)));
                        }
                    }
                },
            }
        }
    }
    Ok((Image::new(h, w, data)?, SegMask::new(h, w, gt)?))
}

/// One roughly centred object of `class` on a textured background.
pub fn generate_simple(
    seed: u64,
    class: LabelId,
    space: &LabelSpace,
    dims: (usize, usize),
) -> Result<SceneRecord> {
    if !space.is_foreground(class) {
        return Err(Error::domain(format!(
            "class {class} is not a foreground label"
        )));
    }
    check_dims(dims)?;
    let mut rng = rng_from(seed);
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    let side = h.min(w);
    let r = rng.random_range(0.22..0.32) * side;
    let offset = Normal::new(0.0, 0.06 * side).expect("positive std-dev");
    let cy = (h / 2.0 + offset.sample(&mut rng)).clamp(r, h - r);
    let cx = (w / 2.0 + offset.sample(&mut rng)).clamp(r, w - r);
    let shape = Shape { class, cy, cx, r };
    let (image, gt) = render(&mut rng, dims, &[shape], &[])?;
    Ok(SceneRecord {
        id: format!("simple-{seed:016x}"),
        image,
        labels: LabelSet::single(class)?,
        gt,
    })
}

/// One object per class at random positions; later shapes occlude earlier ones.
/// Two to four background blobs in muted class colours sit under the objects.
pub fn generate_complex(
    seed: u64,
    classes: &LabelSet,
    space: &LabelSpace,
    dims: (usize, usize),
) -> Result<SceneRecord> {
    classes.check(space)?;
    if classes.len() > 4 {
        return Err(Error::domain("complex scenes hold at most 4 classes"));
    }
    check_dims(dims)?;
    let mut rng = rng_from(seed);
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    let side = h.min(w);
    let mut order: Vec<LabelId> = classes.iter().collect();
    let mut shapes = Vec::new();
    // Re-place until every object keeps some visible pixels.
    for _attempt in 0..16 {
        order.shuffle(&mut rng);
        shapes = order
            .iter()
            .map(|&class| {
                let r = rng.random_range(0.12..0.20) * side;
                Shape {
                    class,
                    cy: rng.random_range(r..h - r),
                    cx: rng.random_range(r..w - r),
                    r,
                }
            })
            .collect();
        if all_visible(&shapes, dims) {
            break;
        }
    }
    let clutter: Vec<Clutter> = (0..rng.random_range(2..=4))
        .map(|_| {
            let r = rng.random_range(0.08..0.15) * side;
            let class = rng.random_range(1..=SHAPES.len() as LabelId);
            let mix = rng.random_range(0.45..0.65);
            let color = PALETTE[class as usize - 1].map(|c| 0.5 + mix * (c - 0.5));
            Clutter {
                shape: Shape {
                    class: if rng.random_bool(0.5) { 3 } else { 5 },
                    cy: rng.random_range(r..h - r),
                    cx: rng.random_range(r..w - r),
                    r,
                },
                color,
            }
        })
        .collect();
    let (image, gt) = render(&mut rng, dims, &shapes, &clutter)?;
    Ok(SceneRecord {
        id: format!("complex-{seed:016x}"),
        image,
        labels: classes.clone(),
        gt,
    })
}

fn all_visible(shapes: &[Shape], dims: (usize, usize)) -> bool {
    let mut visible = vec![0usize; shapes.len()];
    for y in 0..dims.0 {
        for x in 0..dims.1 {
            if let Some(i) = shapes.iter().rposition(|s| s.contains(y, x)) {
                visible[i] += 1;
            }
        }
    }
    visible.iter().all(|&v| v >= 8)
}

fn indicator(gt: &SegMask, keep: impl Fn(LabelId) -> bool) -> Vec<f64> {
    gt.values()
        .iter()
        .map(|&l| if keep(l) { 1.0 } else { 0.0 })
        .collect()
}

fn shift(values: &[f64], dims: (usize, usize), dy: i64, dx: i64) -> Vec<f64> {
    let (h, w) = (dims.0 as i64, dims.1 as i64);
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y - dy, x - dx);
            if (0..h).contains(&sy) && (0..w).contains(&sx) {
                out[(y * w + x) as usize] = values[(sy * w + sx) as usize];
            }
        }
    }
    out
}

/// Mean over the `(2r+1)²` window with edge-replicated borders.
fn box_blur(values: &[f64], dims: (usize, usize), r: usize) -> Vec<f64> {
    if r == 0 {
        return values.to_vec();
    }
    let (h, w) = dims;
    let r = r as i64;
    let n = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r)
                .map(|d| values[y * w + (x as i64 + d).clamp(0, w as i64 - 1) as usize])
                .sum();
            tmp[y * w + x] = s / n;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r)
                .map(|d| tmp[(y as i64 + d).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
            out[y * w + x] = s / n;
        }
    }
    out
}

fn noisy_cue(
    clean: Vec<f64>,
    dims: (usize, usize),
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CueMap> {
    let mut v = clean;
    if noise.boundary_jitter > 0.0 {
        let jitter = Normal::new(0.0, noise.boundary_jitter).expect("positive std-dev");
        let dy = jitter.sample(rng).round() as i64;
        let dx = jitter.sample(rng).round() as i64;
        v = shift(&v, dims, dy, dx);
    }
    if noise.false_positive_rate > 0.0 || noise.false_negative_rate > 0.0 {
        for p in v.iter_mut() {
            let u: f64 = rng.random();
            if *p > 0.5 && u < noise.false_negative_rate {
                *p = 0.0;
            } else if *p <= 0.5 && u < noise.false_positive_rate {
                *p = 1.0;
            }
        }
    }
    let v = box_blur(&v, dims, noise.blur_radius);
    CueMap::new(dims.0, dims.1, v.into_iter().map(quantize).collect())
}

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    let d = Normal::new(mean, std).expect("positive std-dev");
    loop {
        let v = d.sample(rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
}

/// Oracle saliency (all foreground) and attention (`class` only) with
/// shift/flip/blur noise, plus a simulated attention-network prediction.
pub fn synth_cues(
    rec: &SceneRecord,
    class: LabelId,
    space: &LabelSpace,
    noise: &NoiseConfig,
) -> Result<CueRecord> {
    if !rec.labels.contains(class) {
        return Err(Error::domain(format!(
            "class {class} is not among the labels of record {}",
            rec.id
        )));
    }
    noise.validate()?;
    let seed = derive_seed(noise.seed, "cues") ^ fnv1a(rec.id.as_bytes()) ^ u64::from(class);
    let mut rng = rng_from(seed);
    let dims = rec.gt.dims();
    let ignore = space.ignore_label();
    let saliency = noisy_cue(
        indicator(&rec.gt, |l| l != BACKGROUND && l != ignore),
        dims,
        noise,
        &mut rng,
    )?;
    let attention = noisy_cue(indicator(&rec.gt, |l| l == class), dims, noise, &mut rng)?;
    let correct = space.num_classes() == 1 || rng.random::<f64>() >= noise.false_positive_rate;
    let predicted_class = if correct {
        class
    } else {
        let others: Vec<LabelId> = (1..=space.num_classes() as LabelId)
            .filter(|&l| l != class)
            .collect();
        *others.choose(&mut rng).expect("at least two classes")
    };
    let predicted_prob = quantize(truncated_normal(
        &mut rng,
        if correct { 0.8 } else { 0.3 },
        0.15,
    ));
    Ok(CueRecord {
        scene_id: rec.id.clone(),
        saliency,
        attention,
        attention_class: class,
        predicted_class,
        predicted_prob,
    })
}

/// Hard prediction of `model` on an image.
pub fn predict_mask<S: Segmenter>(
    model: &S,
    image: &Image,
    ignore_label: LabelId,
) -> Result<SegMask> {
    let logits = model.forward(&extract_features(image))?;
    Ok(hard_segmentation(&logits, ignore_label))
}

fn keep_top_per_class(
    mut ranked: Vec<(LabelId, usize, &str, usize)>,
    cap: impl Fn(LabelId) -> usize,
) -> Vec<usize> {
    // (class, area, id, index): class asc, area desc, id asc
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then_with(|| a.2.cmp(b.2)));
    let mut kept = Vec::new();
    let mut current = None;
    let mut taken = 0;
    for (class, _, _, idx) in ranked {
        if current != Some(class) {
            current = Some(class);
            taken = 0;
        }
        if taken < cap(class) {
            kept.push(idx);
            taken += 1;
        }
    }
    kept.sort_unstable();
    kept
}

/// Size, label-agreement and confidence filters, then per-class top-k by
/// saliency/attention mask overlap (ties by id). Returns kept indices in
/// input order.
pub fn filter_simple<E: Borrow<SimpleExample>>(
    records: &[E],
    cfg: &FilterConfig,
) -> Result<Vec<usize>> {
    let mut ranked = Vec::new();
    for (idx, rec) in records.iter().enumerate() {
        let rec = rec.borrow();
        let (h, w) = rec.scene.image.dims();
        if h.min(w) < cfg.min_side || h.max(w) > cfg.max_side {
            continue;
        }
        let class = rec.class();
        if rec.cues.predicted_class != class {
            continue;
        }
        if rec.cues.predicted_prob < cfg.min_attention_prob {
            continue;
        }
        let area = mask_intersection_area(
            &binarize(&rec.cues.saliency, cfg.saliency_threshold),
            &binarize(&rec.cues.attention, cfg.saliency_threshold),
        )?;
        ranked.push((class, area, rec.scene.id.as_str(), idx));
    }
    Ok(keep_top_per_class(ranked, |c| cfg.top_k(c)))
}

/// Foreground fraction of a hard mask (ignore pixels count as background).
pub fn foreground_ratio(mask: &SegMask, ignore_label: LabelId) -> f64 {
    let total = mask.values().len();
    if total == 0 {
        return 0.0;
    }
    let fg = mask
        .values()
        .iter()
        .filter(|&&l| l != BACKGROUND && l != ignore_label)
        .count();
    fg as f64 / total as f64
}

/// Keeps complex images whose predicted foreground ratio is not below
/// `fg_ratio_min`. Returns kept indices.
pub fn filter_complex<E, S>(
    records: &[E],
    model: &S,
    ignore_label: LabelId,
    cfg: &FilterConfig,
) -> Result<Vec<usize>>
where
    E: Borrow<SceneRecord> + Sync,
    S: Segmenter,
{
    let ratios: Vec<Result<f64>> = records
        .par_iter()
        .map(|r| {
            Ok(foreground_ratio(
                &predict_mask(model, &r.borrow().image, ignore_label)?,
                ignore_label,
            ))
        })
        .collect();
    let mut kept = Vec::new();
    for (idx, ratio) in ratios.into_iter().enumerate() {
        if ratio? >= cfg.fg_ratio_min {
            kept.push(idx);
        }
    }
    Ok(kept)
}

/// Ranks simple images by overlap between the binarized attention and the
/// model's predicted foreground; keeps the top `m_step_top_n` (ties by id).
pub fn refilter_simple_for_mstep<E, S>(
    records: &[E],
    model: &S,
    ignore_label: LabelId,
    cfg: &FilterConfig,
) -> Result<Vec<usize>>
where
    E: Borrow<SimpleExample> + Sync,
    S: Segmenter,
{
    let areas: Vec<Result<usize>> = records
        .par_iter()
        .map(|r| {
            let r = r.borrow();
            let pred = predict_mask(model, &r.scene.image, ignore_label)?;
            let fg = SegMask::new(
                pred.height(),
                pred.width(),
                pred.values()
                    .iter()
                    .map(|&l| u32::from(l != BACKGROUND && l != ignore_label))
                    .collect(),
            )?;
            mask_intersection_area(&binarize(&r.cues.attention, cfg.saliency_threshold), &fg)
        })
        .collect();
    let mut ranked = Vec::with_capacity(records.len());
    for (idx, area) in areas.into_iter().enumerate() {
        ranked.push((0, area?, records[idx].borrow().scene.id.as_str(), idx));
    }
    Ok(keep_top_per_class(ranked, |_| cfg.m_step_top_n))
}

/// Parameters of a full synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub simple: usize,
    pub complex: usize,
    pub val: usize,
    pub height: usize,
    pub width: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            simple: 300,
            complex: 150,
            val: 100,
            height: 64,
            width: 64,
            noise_level: 0.5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub space: LabelSpace,
    pub simple: Vec<SimpleExample>,
    pub complex: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
}

fn random_label_set(rng: &mut ChaCha8Rng, c: usize) -> Result<LabelSet> {
    let k = rng.random_range(1..=c.min(3));
    let mut all: Vec<LabelId> = (1..=c as LabelId).collect();
    all.shuffle(rng);
    LabelSet::new(all.into_iter().take(k))
}

/// Generates every split. Record `i` of a split is seeded from
/// `(seed, split tag, i)`; simple record `i` depicts class `i mod c + 1`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    let space = synthetic_space(spec.classes)?;
    let dims = (spec.height, spec.width);
    check_dims(dims)?;
    let noise = NoiseConfig::from_level(spec.noise_level, derive_seed(spec.seed, "noise"))?;
    let simple = (0..spec.simple)
        .into_par_iter()
        .map(|i| {
            let class = (i % spec.classes) as LabelId + 1;
            let scene = generate_simple(
                derive_indexed(spec.seed, "simple", i as u64),
                class,
                &space,
                dims,
            )?
            .with_id(format!("simple-{i:05}"));
            let cues = synth_cues(&scene, class, &space, &noise)?;
            Ok(SimpleExample { scene, cues })
        })
        .collect::<Result<Vec<_>>>()?;
    let complex_split = |tag: &'static str, n: usize| -> Result<Vec<SceneRecord>> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = derive_indexed(spec.seed, tag, i as u64);
                let labels =
                    random_label_set(&mut rng_from(derive_seed(seed, "labels")), spec.classes)?;
                Ok(generate_complex(seed, &labels, &space, dims)?.with_id(format!("{tag}-{i:05}")))
            })
            .collect()
    };
    Ok(SyntheticDataset {
        complex: complex_split("complex", spec.complex)?,
        val: complex_split("val", spec.val)?,
        simple,
        space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse_cues, FusionConfig};

    fn space() -> LabelSpace {
        synthetic_space(6).unwrap()
    }

    #[test]
    fn names_are_sorted() {
        let mut sorted = SHAPES;
        sorted.sort();
        assert_eq!(sorted, SHAPES);
        assert!(synthetic_space(0).is_err());
        assert!(synthetic_space(7).is_err());
    }

    #[test]
    fn simple_is_deterministic_and_single_object() {
        let s = space();
        for class in 1..=6 {
            let a = generate_simple(7, class, &s, (64, 64)).unwrap();
            let b = generate_simple(7, class, &s, (64, 64)).unwrap();
            assert_eq!(a, b);
            let present = a.gt.labels_present();
            assert_eq!(present.into_iter().collect::<Vec<_>>(), vec![0, class]);
            assert!(a.gt.count(class) >= 1);
        }
    }

    #[test]
    fn simple_rejects_bad_inputs() {
        let s = space();
        assert!(generate_simple(1, 0, &s, (64, 64)).is_err());
        assert!(generate_simple(1, 7, &s, (64, 64)).is_err());
        assert!(generate_simple(1, 1, &s, (8, 64)).is_err());
    }

    #[test]
    fn complex_contract() {
        let s = space();
        let z = LabelSet::new([1, 3]).unwrap();
        for seed in 0..10 {
            let rec = generate_complex(seed, &z, &s, (64, 64)).unwrap();
            assert!(rec
                .gt
                .labels_present()
                .iter()
                .all(|l| [0, 1, 3].contains(l)));
            assert_eq!(rec, generate_complex(seed, &z, &s, (64, 64)).unwrap());
        }
        assert!(
            generate_complex(0, &LabelSet::new([1, 2, 3, 4, 5]).unwrap(), &s, (64, 64)).is_err()
        );
        let one = generate_complex(3, &LabelSet::single(2).unwrap(), &s, (64, 64)).unwrap();
        assert_eq!(
            one.gt.labels_present().into_iter().collect::<Vec<_>>(),
            vec![0, 2]
        );
    }

    #[test]
    fn noise_free_cues_are_exact_indicators() {
        let s = space();
        let rec = generate_complex(5, &LabelSet::new([2, 4]).unwrap(), &s, (48, 48)).unwrap();
        let cues = synth_cues(&rec, 4, &s, &NoiseConfig::none(1)).unwrap();
        for (m, &l) in rec.gt.values().iter().enumerate() {
            assert_eq!(cues.saliency.values()[m], if l != 0 { 1.0 } else { 0.0 });
            assert_eq!(cues.attention.values()[m], if l == 4 { 1.0 } else { 0.0 });
        }
        assert!(synth_cues(&rec, 1, &s, &NoiseConfig::none(1)).is_err());
    }

    #[test]
    fn noise_free_fusion_recovers_foreground() {
        let s = space();
        let rec = generate_simple(11, 3, &s, (64, 64)).unwrap();
        let cues = synth_cues(&rec, 3, &s, &NoiseConfig::none(0)).unwrap();
        let m = fuse_cues(&cues.saliency, &cues.attention, &FusionConfig::default()).unwrap();
        for (v, &l) in m.values().iter().zip(rec.gt.values()) {
            assert_eq!(*v, if l == 3 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn noisy_cues_are_deterministic_and_bounded() {
        let s = space();
        let rec = generate_simple(2, 5, &s, (64, 64)).unwrap();
        let noise = NoiseConfig::from_level(1.0, 9).unwrap();
        let a = synth_cues(&rec, 5, &s, &noise).unwrap();
        assert_eq!(a, synth_cues(&rec, 5, &s, &noise).unwrap());
        assert!((0.0..=1.0).contains(&a.predicted_prob));
        assert_ne!(
            a.saliency.values(),
            synth_cues(&rec, 5, &s, &NoiseConfig::none(9))
                .unwrap()
                .saliency
                .values()
        );
    }

    #[test]
    fn blur_preserves_range_and_constants() {
        let v = vec![1.0; 25];
        assert_eq!(box_blur(&v, (5, 5), 2), v);
        let mut spike = vec![0.0; 25];
        spike[12] = 1.0;
        let b = box_blur(&spike, (5, 5), 1);
        assert!((b[12] - 1.0 / 9.0).abs() < 1e-15);
        assert!(b.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn foreground_ratio_counts() {
        let m = SegMask::new(1, 4, vec![0, 2, 255, 1]).unwrap();
        assert_eq!(foreground_ratio(&m, 255), 0.5);
    }

    #[test]
    fn dataset_is_reproducible() {
        let spec = DatasetSpec {
            simple: 6,
            complex: 3,
            val: 2,
            height: 32,
            width: 32,
            ..Default::default()
        };
        let a = generate_dataset(&spec).unwrap();
        assert_eq!(a, generate_dataset(&spec).unwrap());
        assert_eq!(a.simple.len(), 6);
        assert_eq!(a.simple[4].class(), 5);
        assert!(a.complex.iter().all(|r| r.labels.len() <= 3));
    }
}
