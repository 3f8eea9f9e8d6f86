//! Randomized finite-difference verification of the loss gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    combined_loss, finite_diff_grad, max_relative_error, prob_iou_gain, soft_cross_entropy, LossConfig,
    LossResult, Normalization,
};
use crate::posterior::regularized_posterior;
use crate::rng::{derive_indexed, rng_from};
use crate::types::{LabelSet, LabelSpace, LogitMap, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub tolerance: f64,
    /// Central-difference step.
    pub h: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            tolerance: 1e-4,
            h: 1e-4,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub trial: usize,
    pub loss: String,
    /// Flat logit index `(y * W + x) * |L| + l`.
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Gradient comparisons made (three losses per trial).
    pub checks: usize,
    pub tolerance: f64,
    pub worst: Option<WorstCase>,
}

impl GradCheckReport {
    pub fn worst_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.worst_error() < self.tolerance
    }
}

/// A random logit map with a matching target drawn from one of three
/// families: a dense simplex, one-hot, or a label-set posterior with zeros
/// on absent classes. About a third of instances carry ignore pixels.
pub struct Instance {
    pub logits: LogitMap,
    pub target: ProbMap,
    pub cfg: LossConfig,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let l = rng.random_range(2..=6usize);
    let n = h * w;
    let space = LabelSpace::new((1..l).map(|i| format!("c{i}")))?;
    let logits = LogitMap::new(h, w, l, (0..n * l).map(|_| rng.random_range(-3.0..3.0)).collect())?;
    let raw = LogitMap::new(h, w, l, (0..n * l).map(|_| rng.random_range(-4.0..4.0)).collect())?;
    let mut values = match rng.random_range(0..3) {
        0 => raw.softmax().values().to_vec(),
        1 => {
            let mut v = vec![0.0; n * l];
            for m in 0..n {
                v[m * l + rng.random_range(0..l)] = 1.0;
            }
            v
        }
        _ => {
            let k = rng.random_range(1..l);
            let mut labels: Vec<u32> = (1..l as u32).collect();
            for i in (1..labels.len()).rev() {
                labels.swap(i, rng.random_range(0..=i));
            }
            let z = LabelSet::new(labels[..k].iter().copied())?;
            regularized_posterior(&raw, &z, &space)?.values().to_vec()
        }
    };
    // Re-normalize in f64 so the simplex check holds to rounding.
    for row in values.chunks_exact_mut(l) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    let valid = if rng.random_bool(0.3) {
        let mut v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        v[rng.random_range(0..n)] = true;
        Some(v)
    } else {
        None
    };
    let target = ProbMap::new(h, w, l, values, valid)?;
    let cfg = LossConfig {
        iou_weight: rng.random_range(0.0..2.0),
        normalization: if rng.random_bool(0.5) {
            Normalization::Mean
        } else {
            Normalization::Sum
        },
        ..LossConfig::default()
    };
    Ok(Instance { logits, target, cfg })
}

type LossFn = fn(&ProbMap, &LogitMap, &LossConfig) -> Result<LossResult>;

const LOSSES: [(&str, LossFn); 3] = [
    ("soft_cross_entropy", soft_cross_entropy),
    ("prob_iou_gain", prob_iou_gain),
    ("combined_loss", combined_loss),
];

/// Compares analytic and central-difference gradients of every loss on
/// `cfg.trials` random instances. Trial `i` is seeded from `(seed, i)`.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut worst: Option<WorstCase> = None;
    let mut checks = 0;
    for trial in 0..cfg.trials {
        let mut rng = rng_from(derive_indexed(cfg.seed, "gradcheck", trial as u64));
        let inst = random_instance(&mut rng)?;
        for (name, loss) in LOSSES {
            let analytic = loss(&inst.target, &inst.logits, &inst.cfg)?;
            let numeric = finite_diff_grad(
                |f| loss(&inst.target, f, &inst.cfg).map_or(f64::NAN, |r| r.value),
                &inst.logits,
                cfg.h,
            );
            let (err, idx) = max_relative_error(analytic.grad.values(), &numeric);
            checks += 1;
            if worst.as_ref().is_none_or(|w| err > w.rel_error || err.is_nan()) {
                worst = Some(WorstCase {
                    trial,
                    loss: name.to_string(),
                    coordinate: idx,
                    analytic: analytic.grad.values()[idx],
                    numeric: numeric[idx],
                    rel_error: err,
                });
            }
        }
    }
    Ok(GradCheckReport {
        trials: cfg.trials,
        checks,
        tolerance: cfg.tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let report = run_grad_check(&GradCheckConfig::default()).unwrap();
        assert_eq!(report.checks, 300);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn zero_tolerance_fails() {
        let cfg = GradCheckConfig {
            trials: 3,
            tolerance: 0.0,
            ..Default::default()
        };
        assert!(!run_grad_check(&cfg).unwrap().passed());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = GradCheckConfig {
            trials: 5,
            ..Default::default()
        };
        assert_eq!(run_grad_check(&cfg).unwrap(), run_grad_check(&cfg).unwrap());
    }

    #[test]
    fn instances_respect_size_limits() {
        let mut rng = rng_from(1);
        for _ in 0..50 {
            let inst = random_instance(&mut rng).unwrap();
            let (h, w) = inst.logits.dims();
            assert!(h <= 8 && w <= 8 && inst.logits.num_labels() <= 6);
            assert!(inst.target.validate().is_ok());
        }
    }
}
