//! Label space and the dense per-pixel maps shared by every stage.
//!
//! All maps are row-major: pixel `m = y * width + x`. Multi-label maps
//! store the `num_labels` values of a pixel contiguously.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};

pub type LabelId = u32;

pub const BACKGROUND: LabelId = 0;
pub const DEFAULT_IGNORE_LABEL: LabelId = 255;

/// Tolerance on the per-pixel sum of a [`ProbMap`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    /// Names for every label, background first.
    names: Vec<String>,
    ignore_label: LabelId,
}

impl LabelSpace {
    /// Builds a space from foreground class names; background gets id 0.
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::with_ignore(classes, DEFAULT_IGNORE_LABEL)
    }

    pub fn with_ignore<S: Into<String>>(
        classes: impl IntoIterator<Item = S>,
        ignore_label: LabelId,
    ) -> Result<Self> {
        let mut names = vec!["background".to_string()];
        names.extend(classes.into_iter().map(Into::into));
        if names.len() < 2 {
            return Err(Error::domain(
                "label space needs at least one foreground class",
            ));
        }
        if (ignore_label as usize) < names.len() {
            return Err(Error::domain(format!(
                "ignore label {ignore_label} collides with class ids 0..={}",
                names.len() - 1
            )));
        }
        Ok(Self {
            names,
            ignore_label,
        })
    }

    /// Number of foreground classes `c`.
    pub fn num_classes(&self) -> usize {
        self.names.len() - 1
    }

    /// `|L| = c + 1`.
    pub fn num_labels(&self) -> usize {
        self.names.len()
    }

    pub fn ignore_label(&self) -> LabelId {
        self.ignore_label
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: LabelId) -> Option<&str> {
        self.names.get(label as usize).map(String::as_str)
    }

    pub fn contains(&self, label: LabelId) -> bool {
        (label as usize) < self.names.len()
    }

    pub fn is_foreground(&self, label: LabelId) -> bool {
        label != BACKGROUND && self.contains(label)
    }
}

/// Image-level labels: the foreground classes present in an image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<LabelId>", into = "Vec<LabelId>")]
pub struct LabelSet(BTreeSet<LabelId>);

impl LabelSet {
    /// Rejects empty sets and background; range is checked by [`LabelSet::check`].
    pub fn new(labels: impl IntoIterator<Item = LabelId>) -> Result<Self> {
        let set: BTreeSet<_> = labels.into_iter().collect();
        if set.is_empty() {
            return Err(Error::domain("label set must be nonempty"));
        }
        if set.contains(&BACKGROUND) {
            return Err(Error::domain("background cannot be an image-level label"));
        }
        Ok(Self(set))
    }

    pub fn single(label: LabelId) -> Result<Self> {
        Self::new([label])
    }

    pub fn check(&self, space: &LabelSpace) -> Result<()> {
        match self.0.iter().find(|&&l| !space.is_foreground(l)) {
            Some(l) => Err(Error::domain(format!(
                "label {l} outside 1..={}",
                space.num_classes()
            ))),
            None => Ok(()),
        }
    }

    pub fn contains(&self, label: LabelId) -> bool {
        self.0.contains(&label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = LabelId> + '_ {
        self.0.iter().copied()
    }

    /// The lone label of a single-object image.
    pub fn only(&self) -> Option<LabelId> {
        (self.0.len() == 1).then(|| *self.0.first().unwrap())
    }
}

impl TryFrom<Vec<LabelId>> for LabelSet {
    type Error = Error;
    fn try_from(v: Vec<LabelId>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSet> for Vec<LabelId> {
    fn from(s: LabelSet) -> Self {
        s.0.into_iter().collect()
    }
}

/// Scalar field with values in `[0, 1]` (saliency, attention, fused cue).
#[derive(Debug, Clone, PartialEq)]
pub struct CueMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl CueMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::domain(format!(
                "cue map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some((m, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::domain(format!(
                "cue value {v} at pixel {m} outside [0,1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Unnormalized per-pixel scores `f(y_m = l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    num_labels: usize,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, num_labels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * num_labels {
            return Err(Error::domain(format!(
                "logit map {height}x{width}x{num_labels} needs {} values, got {}",
                height * width * num_labels,
                values.len()
            )));
        }
        if let Some(m) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "logit at flat index {m} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            num_labels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, num_labels: usize) -> Self {
        Self {
            height,
            width,
            num_labels,
            values: vec![0.0; height * width * num_labels],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn pixel(&self, m: usize) -> &[f64] {
        &self.values[m * self.num_labels..(m + 1) * self.num_labels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.num_labels)
    }

    /// Per-pixel softmax; every pixel is valid.
    pub fn softmax(&self) -> ProbMap {
        let mut out = vec![0.0; self.values.len()];
        for (src, dst) in self.pixels().zip(out.chunks_exact_mut(self.num_labels)) {
            softmax_into(src, dst);
        }
        ProbMap {
            height: self.height,
            width: self.width,
            num_labels: self.num_labels,
            values: out,
            valid: None,
        }
    }
}

/// Per-pixel distribution over labels, with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_labels: usize,
    values: Vec<f64>,
    valid: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexViolation {
    pub pixel: usize,
    pub sum: f64,
    pub min: f64,
}

impl std::fmt::Display for SimplexViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "pixel {} is not a distribution (sum {}, min {})",
            self.pixel, self.sum, self.min
        )
    }
}

impl ProbMap {
    /// Checked constructor; rejects maps failing [`ProbMap::validate`].
    pub fn new(
        height: usize,
        width: usize,
        num_labels: usize,
        values: Vec<f64>,
        valid: Option<Vec<bool>>,
    ) -> Result<Self> {
        let map = Self::from_parts(height, width, num_labels, values, valid)?;
        map.validate().map_err(|v| Error::domain(v.to_string()))?;
        Ok(map)
    }

    /// Shape-checked only; callers that build distributions by construction use this.
    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        num_labels: usize,
        values: Vec<f64>,
        valid: Option<Vec<bool>>,
    ) -> Result<Self> {
        if values.len() != height * width * num_labels {
            return Err(Error::domain(format!(
                "prob map {height}x{width}x{num_labels} needs {} values, got {}",
                height * width * num_labels,
                values.len()
            )));
        }
        if let Some(v) = &valid {
            if v.len() != height * width {
                return Err(Error::domain("validity mask size mismatch"));
            }
        }
        Ok(Self {
            height,
            width,
            num_labels,
            values,
            valid,
        })
    }

    pub fn uniform(height: usize, width: usize, num_labels: usize) -> Self {
        Self {
            height,
            width,
            num_labels,
            values: vec![1.0 / num_labels as f64; height * width * num_labels],
            valid: None,
        }
    }

    /// Per valid pixel: nonnegative entries summing to 1 within [`SIMPLEX_TOL`].
    pub fn validate(&self) -> std::result::Result<(), SimplexViolation> {
        for (m, row) in self.pixels().enumerate() {
            if !self.is_valid(m) {
                continue;
            }
            let sum: f64 = row.iter().sum();
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            if !(min >= 0.0) || !((sum - 1.0).abs() <= SIMPLEX_TOL) {
                return Err(SimplexViolation { pixel: m, sum, min });
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, m: usize) -> &[f64] {
        &self.values[m * self.num_labels..(m + 1) * self.num_labels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.num_labels)
    }

    pub fn is_valid(&self, m: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[m])
    }

    pub fn valid_mask(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn num_valid(&self) -> usize {
        match &self.valid {
            Some(v) => v.iter().filter(|&&b| b).count(),
            None => self.num_pixels(),
        }
    }

    /// Replaces the validity mask, e.g. to mark padded pixels as ignored.
    pub fn with_valid(mut self, valid: Option<Vec<bool>>) -> Result<Self> {
        if let Some(v) = &valid {
            if v.len() != self.num_pixels() {
                return Err(Error::domain("validity mask size mismatch"));
            }
        }
        self.valid = valid;
        Ok(self)
    }

    pub(crate) fn check_pair(&self, logits: &LogitMap, what: &str) -> Result<()> {
        ensure_same_dims(what, self.dims(), logits.dims())?;
        if self.num_labels != logits.num_labels() {
            return Err(Error::domain(format!(
                "{what}: label count mismatch {} vs {}",
                self.num_labels,
                logits.num_labels()
            )));
        }
        Ok(())
    }
}

/// Hard per-pixel labels, possibly carrying the ignore label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    values: Vec<LabelId>,
}

/// A [`SegMask`] over `{0, 1}`.
pub type BinaryMask = SegMask;

impl SegMask {
    pub fn new(height: usize, width: usize, values: Vec<LabelId>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::domain(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Additionally enforces `values ⊆ [0, c] ∪ {ignore}`.
    pub fn checked(
        height: usize,
        width: usize,
        values: Vec<LabelId>,
        space: &LabelSpace,
    ) -> Result<Self> {
        let mask = Self::new(height, width, values)?;
        mask.check(space)?;
        Ok(mask)
    }

    pub fn check(&self, space: &LabelSpace) -> Result<()> {
        match self
            .values
            .iter()
            .find(|&&l| !space.contains(l) && l != space.ignore_label())
        {
            Some(l) => Err(Error::domain(format!("mask label {l} not in label space"))),
            None => Ok(()),
        }
    }

    pub fn filled(height: usize, width: usize, label: LabelId) -> Self {
        Self {
            height,
            width,
            values: vec![label; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[LabelId] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> LabelId {
        self.values[y * self.width + x]
    }

    pub fn count(&self, label: LabelId) -> usize {
        self.values.iter().filter(|&&l| l == label).count()
    }

    /// Distinct labels present, ascending.
    pub fn labels_present(&self) -> BTreeSet<LabelId> {
        self.values.iter().copied().collect()
    }
}

/// Dirac distribution at `label`.
pub fn one_hot(label: LabelId, space: &LabelSpace) -> Result<Vec<f64>> {
    if !space.contains(label) {
        return Err(Error::domain(format!(
            "label {label} outside 0..={}",
            space.num_classes()
        )));
    }
    let mut row = vec![0.0; space.num_labels()];
    row[label as usize] = 1.0;
    Ok(row)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax of `src` into `dst`.
pub fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(c: usize) -> LabelSpace {
        LabelSpace::new((1..=c).map(|i| format!("c{i}"))).unwrap()
    }

    #[test]
    fn one_hot_cases() {
        let s = space(2);
        assert_eq!(one_hot(0, &s).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot(2, &s).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(one_hot(3, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn label_space_invariants() {
        assert!(LabelSpace::new(Vec::<String>::new()).is_err());
        assert!(LabelSpace::with_ignore(["a", "b"], 2).is_err());
        assert!(LabelSpace::with_ignore(["a", "b"], 3).is_ok());
        let s = space(20);
        assert_eq!(s.num_labels(), 21);
        assert_eq!(s.ignore_label(), 255);
        assert_eq!(s.name(0), Some("background"));
    }

    #[test]
    fn label_set_invariants() {
        assert!(LabelSet::new([]).is_err());
        assert!(LabelSet::new([0, 1]).is_err());
        let z = LabelSet::new([3, 1, 3]).unwrap();
        assert_eq!(z.iter().collect::<Vec<_>>(), vec![1, 3]);
        assert!(z.check(&space(2)).is_err());
        assert!(z.check(&space(3)).is_ok());
        assert_eq!(LabelSet::single(2).unwrap().only(), Some(2));
        assert_eq!(z.only(), None);
    }

    #[test]
    fn validate_uniform_21() {
        assert!(ProbMap::uniform(4, 4, 21).validate().is_ok());
    }

    #[test]
    fn validate_reports_excess_mass() {
        let map = ProbMap::from_parts(1, 2, 2, vec![0.5, 0.5, 0.5, 0.6], None).unwrap();
        let v = map.validate().unwrap_err();
        assert_eq!(v.pixel, 1);
        assert!((v.sum - 1.1).abs() < 1e-12);
    }

    #[test]
    fn validate_reports_negative_mass() {
        let map = ProbMap::from_parts(1, 1, 2, vec![-0.1, 1.1], None).unwrap();
        assert_eq!(map.validate().unwrap_err().pixel, 0);
        assert!(ProbMap::new(1, 1, 2, vec![-0.1, 1.1], None).is_err());
    }

    #[test]
    fn validate_skips_invalid_pixels() {
        let map = ProbMap::from_parts(1, 2, 2, vec![0.5, 0.5, 9.0, 9.0], Some(vec![true, false]))
            .unwrap();
        assert!(map.validate().is_ok());
        assert_eq!(map.num_valid(), 1);
    }

    #[test]
    fn cue_map_rejects_out_of_range() {
        assert!(CueMap::new(1, 2, vec![0.0, 1.0]).is_ok());
        assert!(CueMap::new(1, 2, vec![0.0, 1.01]).is_err());
        assert!(CueMap::new(1, 2, vec![f64::NAN, 0.0]).is_err());
        assert!(CueMap::new(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn seg_mask_checked() {
        let s = space(2);
        assert!(SegMask::checked(1, 3, vec![0, 2, 255], &s).is_ok());
        assert!(SegMask::checked(1, 3, vec![0, 3, 255], &s).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    proptest! {
        #[test]
        fn softmax_yields_valid_prob_map(
            vals in prop::collection::vec(-50.0f64..50.0, 1..=6).prop_flat_map(|row| {
                let l = row.len();
                (Just(l), prop::collection::vec(-50.0f64..50.0, l * 6))
            })
        ) {
            let (l, data) = vals;
            let logits = LogitMap::new(2, 3, l, data).unwrap();
            prop_assert!(logits.softmax().validate().is_ok());
        }

        #[test]
        fn one_hot_argmax_roundtrip(c in 1usize..25, pick in any::<prop::sample::Index>()) {
            let s = space(c);
            let l = pick.index(c + 1) as LabelId;
            prop_assert_eq!(argmax(&one_hot(l, &s).unwrap()) as LabelId, l);
        }
    }
}
