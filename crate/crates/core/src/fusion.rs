//! Saliency/attention fusion into the approximate ground-truth distribution
//! used to train the initial model on single-object images.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::types::{BinaryMask, CueMap, LabelId, LabelSpace, ProbMap, SegMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    /// Union of the two cues.
    #[default]
    Max,
    Product,
    Mean,
}

impl Combiner {
    pub fn apply(self, s: f64, a: f64) -> f64 {
        match self {
            Combiner::Max => s.max(a),
            Combiner::Product => s * a,
            Combiner::Mean => 0.5 * (s + a),
        }
    }
}

impl std::str::FromStr for Combiner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Combiner::Max),
            "product" => Ok(Combiner::Product),
            "mean" => Ok(Combiner::Mean),
            other => Err(Error::domain(format!("unknown combiner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub combiner: Combiner,
    pub saliency_threshold: f64,
    pub attention_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            combiner: Combiner::Max,
            saliency_threshold: 0.5,
            attention_threshold: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("saliency_threshold", self.saliency_threshold),
            ("attention_threshold", self.attention_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::domain(format!("{name} {t} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// `M(m) = h(s(m), a(m))`.
pub fn fuse_cues(s: &CueMap, a: &CueMap, cfg: &FusionConfig) -> Result<CueMap> {
    ensure_same_dims("fuse_cues", s.dims(), a.dims())?;
    let values = s
        .values()
        .iter()
        .zip(a.values())
        .map(|(&s, &a)| cfg.combiner.apply(s, a))
        .collect();
    CueMap::new(s.height(), s.width(), values)
}

/// Mass `M(m)` on class `z`, `1 - M(m)` on background, zero elsewhere.
pub fn target_distribution(m: &CueMap, z: LabelId, space: &LabelSpace) -> Result<ProbMap> {
    if !space.is_foreground(z) {
        return Err(Error::domain(format!(
            "target class {z} must be a foreground id in 1..={}",
            space.num_classes()
        )));
    }
    let l = space.num_labels();
    let mut values = vec![0.0; m.values().len() * l];
    for (row, &p) in values.chunks_exact_mut(l).zip(m.values()) {
        row[0] = 1.0 - p;
        row[z as usize] = p;
    }
    ProbMap::from_parts(m.height(), m.width(), l, values, None)
}

/// 1 where the cue is strictly greater than `threshold`.
pub fn binarize(m: &CueMap, threshold: f64) -> BinaryMask {
    let values = m
        .values()
        .iter()
        .map(|&v| u32::from(v > threshold))
        .collect();
    SegMask::new(m.height(), m.width(), values).expect("dims copied from a valid map")
}

/// Number of pixels set in both masks.
pub fn mask_intersection_area(a: &BinaryMask, b: &BinaryMask) -> Result<usize> {
    ensure_same_dims("mask_intersection_area", a.dims(), b.dims())?;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .filter(|&(&x, &y)| x == 1 && y == 1)
        .count())
}
