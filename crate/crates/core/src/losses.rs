//! M-step objective: soft cross-entropy, probabilistic IoU gain and their
//! combination, each returning the value together with `∂/∂logits`.
//!
//! Targets are constants (they come from the previous parameters), so no
//! gradient flows through them. Invalid (ignore) pixels contribute nothing
//! to either the value or the gradient. All accumulation is in `f64` with a
//! fixed summation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{softmax_into, LogitMap, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Sum,
    /// Divide the cross-entropy by the number of valid pixels.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the IoU gain relative to the cross-entropy.
    pub iou_weight: f64,
    /// Classes whose IoU denominator falls below this are left out of the mean.
    pub div_eps: f64,
    pub normalization: Normalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            iou_weight: 1.0,
            div_eps: 1e-8,
            normalization: Normalization::Mean,
        }
    }
}

impl LossConfig {
    /// Pure cross-entropy (used for the initial model).
    pub fn cross_entropy_only() -> Self {
        Self {
            iou_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_weight >= 0.0) {
            return Err(Error::domain(format!("iou_weight {} < 0", self.iou_weight)));
        }
        if !(self.div_eps > 0.0) {
            return Err(Error::domain(format!(
                "div_eps {} must be > 0",
                self.div_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: LogitMap,
}

/// `-Σ_m Σ_l t_m(l) log softmax(f_m)(l)`, optionally averaged over valid pixels.
pub fn soft_cross_entropy(target: &ProbMap, f: &LogitMap, cfg: &LossConfig) -> Result<LossResult> {
    target.check_pair(f, "soft_cross_entropy")?;
    let l = f.num_labels();
    let n_valid = target.num_valid();
    let scale = match cfg.normalization {
        Normalization::Sum => 1.0,
        Normalization::Mean if n_valid > 0 => 1.0 / n_valid as f64,
        Normalization::Mean => 0.0,
    };
    let (h, w) = f.dims();
    let mut grad = LogitMap::zeros(h, w, l);
    let mut q = vec![0.0; l];
    let mut total = 0.0;
    for (m, (row, g)) in f
        .pixels()
        .zip(grad.values_mut().chunks_exact_mut(l))
        .enumerate()
    {
        if !target.is_valid(m) {
            continue;
        }
        let t = target.pixel(m);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let mut t_sum = 0.0;
        for k in 0..l {
            // 0·log(q) is taken as 0 even when q underflows.
            if t[k] != 0.0 {
                total -= t[k] * (row[k] - max - log_z);
            }
            t_sum += t[k];
        }
        softmax_into(row, &mut q);
        for k in 0..l {
            g[k] = (q[k] * t_sum - t[k]) * scale;
        }
    }
    Ok(LossResult {
        value: total * scale,
        grad,
    })
}

/// Per-class sums of the probabilistic IoU over valid pixels.
struct IouSums {
    inter: Vec<f64>,
    union: Vec<f64>,
}

fn iou_sums(target: &ProbMap, pred: &[f64], l: usize) -> IouSums {
    let mut inter = vec![0.0; l];
    let mut union = vec![0.0; l];
    for (m, q) in pred.chunks_exact(l).enumerate() {
        if !target.is_valid(m) {
            continue;
        }
        let t = target.pixel(m);
        for k in 0..l {
            let tq = t[k] * q[k];
            inter[k] += tq;
            union[k] += t[k] + q[k] - tq;
        }
    }
    IouSums { inter, union }
}

fn iou_mean(sums: &IouSums, div_eps: f64) -> (f64, Vec<bool>, usize) {
    let included: Vec<bool> = sums.union.iter().map(|&v| v >= div_eps).collect();
    let n = included.iter().filter(|&&b| b).count();
    if n == 0 {
        return (0.0, included, 0);
    }
    let sum: f64 = (0..sums.inter.len())
        .filter(|&k| included[k])
        .map(|k| sums.inter[k] / sums.union[k])
        .sum();
    (sum / n as f64, included, n)
}

/// Probabilistic IoU between two distributions given directly as probabilities.
pub fn prob_iou(target: &ProbMap, pred: &ProbMap, cfg: &LossConfig) -> Result<f64> {
    if target.dims() != pred.dims() || target.num_labels() != pred.num_labels() {
        return Err(Error::domain("prob_iou: shape mismatch"));
    }
    let sums = iou_sums(target, pred.values(), target.num_labels());
    Ok(iou_mean(&sums, cfg.div_eps).0)
}

/// Probabilistic IoU gain of `softmax(f)` against `target`; the gradient is
/// that of the gain (to be maximized).
pub fn prob_iou_gain(target: &ProbMap, f: &LogitMap, cfg: &LossConfig) -> Result<LossResult> {
    target.check_pair(f, "prob_iou_gain")?;
    let l = f.num_labels();
    let q = f.softmax();
    let sums = iou_sums(target, q.values(), l);
    let (value, included, n) = iou_mean(&sums, cfg.div_eps);
    let (h, w) = f.dims();
    let mut grad = LogitMap::zeros(h, w, l);
    if n == 0 {
        return Ok(LossResult { value, grad });
    }
    let inv_n = 1.0 / n as f64;
    let mut dq = vec![0.0; l];
    for (m, g) in grad.values_mut().chunks_exact_mut(l).enumerate() {
        if !target.is_valid(m) {
            continue;
        }
        let t = target.pixel(m);
        let qm = q.pixel(m);
        // ∂(U/V)/∂q = t/V - U(1 - t)/V²
        for k in 0..l {
            dq[k] = if included[k] {
                let (u, v) = (sums.inter[k], sums.union[k]);
                inv_n * (t[k] / v - u * (1.0 - t[k]) / (v * v))
            } else {
                0.0
            };
        }
        let dot: f64 = dq.iter().zip(qm).map(|(a, b)| a * b).sum();
        for k in 0..l {
            g[k] = qm[k] * (dq[k] - dot);
        }
    }
    Ok(LossResult { value, grad })
}

/// Cross-entropy minus `iou_weight` times the IoU gain.
pub fn combined_loss(target: &ProbMap, f: &LogitMap, cfg: &LossConfig) -> Result<LossResult> {
    let mut ce = soft_cross_entropy(target, f, cfg)?;
    if cfg.iou_weight == 0.0 {
        return Ok(ce);
    }
    let iou = prob_iou_gain(target, f, cfg)?;
    ce.value -= cfg.iou_weight * iou.value;
    for (g, gi) in ce.grad.values_mut().iter_mut().zip(iou.grad.values()) {
        *g -= cfg.iou_weight * gi;
    }
    Ok(ce)
}

/// Central differences `(L(f + h e) - L(f - h e)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(loss: F, f: &LogitMap, h: f64) -> Vec<f64>
where
    F: Fn(&LogitMap) -> f64,
{
    let mut probe = f.clone();
    (0..f.values().len())
        .map(|i| {
            let orig = f.values()[i];
            probe.values_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.values_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.values_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst `|a - n| / max(1, |a|)` over coordinates, with its index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| {
            if e > best || e.is_nan() {
                (e, i)
            } else {
                (best, bi)
            }
        })
}
