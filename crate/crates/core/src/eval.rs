//! Hard segmentation, confusion matrices and PASCAL-style IoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::types::{argmax, LabelId, LabelSpace, LogitMap, ProbMap, SegMask};

/// Anything with per-pixel scores whose argmax is the predicted label.
pub trait PixelScores {
    fn dims(&self) -> (usize, usize);
    fn row(&self, m: usize) -> &[f64];
    fn is_valid(&self, _m: usize) -> bool {
        true
    }
}

impl PixelScores for ProbMap {
    fn dims(&self) -> (usize, usize) {
        ProbMap::dims(self)
    }
    fn row(&self, m: usize) -> &[f64] {
        self.pixel(m)
    }
    fn is_valid(&self, m: usize) -> bool {
        ProbMap::is_valid(self, m)
    }
}

impl PixelScores for LogitMap {
    fn dims(&self) -> (usize, usize) {
        LogitMap::dims(self)
    }
    fn row(&self, m: usize) -> &[f64] {
        self.pixel(m)
    }
}

/// Per-pixel argmax, lowest id on ties, ignore label on invalid pixels.
pub fn hard_segmentation<P: PixelScores>(scores: &P, ignore_label: LabelId) -> SegMask {
    let (h, w) = scores.dims();
    let values = (0..h * w)
        .map(|m| {
            if scores.is_valid(m) {
                argmax(scores.row(m)) as LabelId
            } else {
                ignore_label
            }
        })
        .collect();
    SegMask::new(h, w, values).expect("dims taken from the score map")
}

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_labels: usize) -> Self {
        Self {
            num_labels,
            counts: vec![0; num_labels * num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_labels + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_counts(num_labels: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_labels * num_labels {
            return Err(Error::domain("confusion matrix must be square"));
        }
        Ok(Self { num_labels, counts })
    }

    /// Adds one image; ignore-labelled ground-truth pixels are skipped.
    pub fn accumulate(
        &mut self,
        pred: &SegMask,
        gt: &SegMask,
        ignore_label: LabelId,
    ) -> Result<()> {
        ensure_same_dims("accumulate", pred.dims(), gt.dims())?;
        let n = self.num_labels;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            if g == ignore_label {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= n || p >= n {
                return Err(Error::domain(format!(
                    "label out of range in accumulate (gt {g}, pred {p}, |L| {n})"
                )));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_labels != self.num_labels {
            return Err(Error::domain(
                "cannot merge confusion matrices of different size",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    /// `None` for classes that appear in neither prediction nor ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// `TP / (TP + FP + FN)` per class; zero-denominator classes are absent
/// and excluded from the mean.
pub fn iou_scores(cm: &ConfusionMatrix) -> IouScores {
    let n = cm.num_labels();
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|l| {
            let tp = cm.get(l, l);
            let row: u64 = (0..n).map(|p| cm.get(l, p)).sum();
            let col: u64 = (0..n).map(|g| cm.get(g, l)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IouScores { per_class, miou }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageScores {
    pub name: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// The JSON report layout: `{"stages": [{"name", "per_class_iou", "miou"}]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreReport {
    pub stages: Vec<StageScores>,
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}", 100.0 * v),
        None => "-".to_string(),
    }
}

/// Fixed-width table: one row per stage, one column per label plus mIoU,
/// percentages with one decimal, `-` for absent classes.
pub fn report_table(report: &ScoreReport, space: &LabelSpace) -> String {
    let stage_w = report
        .stages
        .iter()
        .map(|s| s.name.len())
        .chain(std::iter::once("Stage".len()))
        .max()
        .unwrap_or(5);
    let col_w: Vec<usize> = space.names().iter().map(|n| n.len().max(5)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<stage_w$}", "Stage");
    for (name, w) in space.names().iter().zip(&col_w) {
        let _ = write!(out, " {name:>w$}");
    }
    let _ = writeln!(out, " {:>5}", "mIoU");
    for stage in &report.stages {
        let _ = write!(out, "{:<stage_w$}", stage.name);
        for (i, w) in col_w.iter().enumerate() {
            let v = stage.per_class_iou.get(i).copied().flatten();
            let _ = write!(out, " {:>w$}", pct(v));
        }
        let _ = writeln!(out, " {:>5}", pct(Some(stage.miou)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(vals: &[u32]) -> SegMask {
        SegMask::new(1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn hard_segmentation_cases() {
        let p = ProbMap::new(1, 2, 3, vec![0.2, 0.5, 0.3, 0.4, 0.4, 0.2], None).unwrap();
        assert_eq!(hard_segmentation(&p, 255).values(), &[1, 0]);
        let p = p.with_valid(Some(vec![true, false])).unwrap();
        assert_eq!(hard_segmentation(&p, 255).values(), &[1, 255]);
    }

    #[test]
    fn logits_and_softmax_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = LogitMap::new(
            4,
            4,
            5,
            (0..80).map(|_| rng.random_range(-5.0..5.0)).collect(),
        )
        .unwrap();
        assert_eq!(
            hard_segmentation(&f, 255),
            hard_segmentation(&f.softmax(), 255)
        );
    }

    #[test]
    fn accumulate_diagonal_and_ignore() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&mask(&[0, 1, 2, 2]), &mask(&[0, 1, 2, 2]), 255)
            .unwrap();
        assert_eq!((0..3).map(|l| cm.get(l, l)).sum::<u64>(), 4);
        let before = cm.clone();
        cm.accumulate(&mask(&[0, 1, 2, 2]), &mask(&[255; 4]), 255)
            .unwrap();
        assert_eq!(cm, before);
        assert!(cm.accumulate(&mask(&[0]), &mask(&[0, 1]), 255).is_err());
    }

    #[test]
    fn accumulate_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let gt: Vec<u32> = (0..16)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        255
                    } else {
                        rng.random_range(0..4)
                    }
                })
                .collect();
            let pred: Vec<u32> = (0..16).map(|_| rng.random_range(0..4)).collect();
            let mut brute = [[0u64; 4]; 4];
            for i in 0..16 {
                if gt[i] != 255 {
                    brute[gt[i] as usize][pred[i] as usize] += 1;
                }
            }
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(
                &SegMask::new(4, 4, pred).unwrap(),
                &SegMask::new(4, 4, gt).unwrap(),
                255,
            )
            .unwrap();
            for (g, row) in brute.iter().enumerate() {
                for (p, &n) in row.iter().enumerate() {
                    assert_eq!(cm.get(g, p), n);
                }
            }
        }
    }

    #[test]
    fn iou_hand_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![50, 10, 5, 35]).unwrap();
        let s = iou_scores(&cm);
        assert_abs_diff_eq!(s.per_class[0].unwrap(), 50.0 / 65.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.per_class[1].unwrap(), 0.70, epsilon = 1e-15);
        assert_abs_diff_eq!(s.miou, (50.0 / 65.0 + 0.7) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.miou, 0.7346, epsilon = 1e-4);
    }

    #[test]
    fn iou_perfect_and_disjoint() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&mask(&[0, 2, 2]), &mask(&[0, 2, 2]), 255)
            .unwrap();
        let s = iou_scores(&cm);
        assert_eq!(s.per_class, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(s.miou, 1.0);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&mask(&[1, 1]), &mask(&[2, 2]), 255).unwrap();
        let s = iou_scores(&cm);
        assert_eq!(s.per_class, vec![None, Some(0.0), Some(0.0)]);
    }

    fn space2() -> LabelSpace {
        LabelSpace::new(["cat", "dog"]).unwrap()
    }

    #[test]
    fn table_perfect_single_stage() {
        let report = ScoreReport {
            stages: vec![StageScores {
                name: "Initial".into(),
                per_class_iou: vec![Some(1.0), Some(1.0), Some(1.0)],
                miou: 1.0,
            }],
        };
        let t = report_table(&report, &space2());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Stage   background   cat   dog  mIoU");
        assert_eq!(lines[1], "Initial      100.0 100.0 100.0 100.0");
    }

    #[test]
    fn table_absent_and_rounding() {
        let report = ScoreReport {
            stages: vec![StageScores {
                name: "EM iter 1".into(),
                per_class_iou: vec![Some(0.93456), None, Some(0.5)],
                miou: 0.71728,
            }],
        };
        let t = report_table(&report, &space2());
        assert_eq!(
            t.lines().nth(1).unwrap(),
            "EM iter 1       93.5     -  50.0  71.7"
        );
    }

    proptest! {
        #[test]
        fn accumulate_order_independent(
            pairs in prop::collection::vec((0u32..4, 0u32..4), 1..64),
            split in any::<prop::sample::Index>(),
        ) {
            let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
            let mut whole = ConfusionMatrix::new(4);
            whole.accumulate(&mask(&pred), &mask(&gt), 255).unwrap();
            let k = split.index(pred.len());
            let mut a = ConfusionMatrix::new(4);
            let mut b = ConfusionMatrix::new(4);
            b.accumulate(&mask(&pred[k..]), &mask(&gt[k..]), 255).unwrap();
            a.accumulate(&mask(&pred[..k]), &mask(&gt[..k]), 255).unwrap();
            b.merge(&a).unwrap();
            prop_assert_eq!(b, whole);
        }

        #[test]
        fn iou_bounds_and_permutation(counts in prop::collection::vec(0u64..20, 9)) {
            let cm = ConfusionMatrix::from_counts(3, counts.clone()).unwrap();
            let s = iou_scores(&cm);
            let present: Vec<f64> = s.per_class.iter().flatten().copied().collect();
            for v in &present {
                prop_assert!((0.0..=1.0).contains(v));
            }
            if !present.is_empty() {
                let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s.miou >= lo - 1e-15 && s.miou <= hi + 1e-15);
            }
            // relabel 0->1, 1->2, 2->0
            let perm = [1usize, 2, 0];
            let mut permuted = vec![0u64; 9];
            for g in 0..3 {
                for p in 0..3 {
                    permuted[perm[g] * 3 + perm[p]] = counts[g * 3 + p];
                }
            }
            let sp = iou_scores(&ConfusionMatrix::from_counts(3, permuted).unwrap());
            for (l, &q) in perm.iter().enumerate() {
                prop_assert_eq!(sp.per_class[q], s.per_class[l]);
            }
        }
    }
}
