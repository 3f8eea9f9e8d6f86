//! The trainable likelihood model.
//!
//! [`Segmenter`] is the contract the training loop needs: logits from
//! features and parameter gradients from logit gradients. The reference
//! implementation, [`SegmenterParams`], is a per-pixel linear-softmax model
//! over a fixed 13-dimensional handcrafted feature vector, trained with
//! momentum SGD, L2 weight decay and gradient accumulation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{combined_loss, LossConfig};
use crate::rng::{derive_indexed, rng_from};
use crate::tensor::Tensor;
use crate::types::{LogitMap, ProbMap};

pub const FEATURE_DIM: usize = 13;
pub const FEATURE_VERSION: &str = "rgb-pos-local3x3-v1";

/// Per-pixel feature vectors, `dim` values per pixel in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::domain("feature map size mismatch"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, m: usize) -> &[f64] {
        &self.data[m * self.dim..(m + 1) * self.dim]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }
}

/// `[1, R, G, B, x/W, y/H, mean3x3(R,G,B), std3x3(R,G,B), |∇lum|]` per pixel,
/// with clamped (edge-replicated) neighbourhoods at the border. The last
/// entry is the central-difference gradient magnitude of the channel mean.
pub fn extract_features(image: &Image) -> FeatureMap {
    let (h, w) = image.dims();
    let mut data = Vec::with_capacity(h * w * FEATURE_DIM);
    for y in 0..h {
        for x in 0..w {
            let rgb = image.rgb(y, x);
            let mut sum = [0.0; 3];
            let mut sq = [0.0; 3];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let n = image.rgb(yy, xx);
                    for c in 0..3 {
                        sum[c] += n[c];
                        sq[c] += n[c] * n[c];
                    }
                }
            }
            data.push(1.0);
            data.extend_from_slice(&rgb);
            data.push(x as f64 / w as f64);
            data.push(y as f64 / h as f64);
            let mean = sum.map(|s| s / 9.0);
            data.extend_from_slice(&mean);
            for c in 0..3 {
                data.push((sq[c] / 9.0 - mean[c] * mean[c]).max(0.0).sqrt());
            }
            let lum = |yy: usize, xx: usize| image.rgb(yy, xx).iter().sum::<f64>() / 3.0;
            let gx = (lum(y, (x + 1).min(w - 1)) - lum(y, x.saturating_sub(1))) / 2.0;
            let gy = (lum((y + 1).min(h - 1), x) - lum(y.saturating_sub(1), x)) / 2.0;
            data.push(gx.hypot(gy));
        }
    }
    FeatureMap {
        height: h,
        width: w,
        dim: FEATURE_DIM,
        data,
    }
}

/// A differentiable per-pixel scorer with a flat parameter vector.
pub trait Segmenter: Clone + Send + Sync {
    fn num_labels(&self) -> usize;

    fn forward(&self, features: &FeatureMap) -> Result<LogitMap>;

    /// `∂loss/∂params` given `∂loss/∂logits`, laid out like [`Segmenter::params`].
    fn backward(&self, features: &FeatureMap, dlogits: &LogitMap) -> Result<Vec<f64>>;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Whether weight decay applies to parameter `i`.
    fn decays(&self, i: usize) -> bool;
}

/// `|L| x d` weight matrix, row `l` scoring label `l`; column 0 multiplies
/// the constant feature and acts as the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterParams {
    num_labels: usize,
    dim: usize,
    weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsSidecar {
    pub d: usize,
    pub num_labels: usize,
    pub feature_version: String,
}

impl SegmenterParams {
    pub fn zeros(num_labels: usize, dim: usize) -> Self {
        Self {
            num_labels,
            dim,
            weights: vec![0.0; num_labels * dim],
        }
    }

    pub fn from_weights(num_labels: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != num_labels * dim {
            return Err(Error::domain(format!(
                "weights need {}x{} entries, got {}",
                num_labels,
                dim,
                weights.len()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segmenter weight".into()));
        }
        Ok(Self {
            num_labels,
            dim,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, label: usize) -> &[f64] {
        &self.weights[label * self.dim..(label + 1) * self.dim]
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * alpha).collect(),
            ..self.clone()
        }
    }

    /// Rounds every weight to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for w in &mut self.weights {
            *w = f64::from(*w as f32);
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.num_labels as u32, self.dim as u32], &self.weights)
            .expect("params shape is consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.expect_rank(2)?;
        Self::from_weights(dims[0], dims[1], t.to_f64())
    }

    pub fn sidecar(&self) -> ParamsSidecar {
        ParamsSidecar {
            d: self.dim,
            num_labels: self.num_labels,
            feature_version: FEATURE_VERSION.to_string(),
        }
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.dim() != self.dim {
            return Err(Error::domain(format!(
                "feature dim {} does not match model dim {}",
                features.dim(),
                self.dim
            )));
        }
        Ok(())
    }
}

impl Segmenter for SegmenterParams {
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn forward(&self, features: &FeatureMap) -> Result<LogitMap> {
        self.check_features(features)?;
        let (h, w) = features.dims();
        let mut out = Vec::with_capacity(h * w * self.num_labels);
        for phi in features.pixels() {
            for row in self.weights.chunks_exact(self.dim) {
                out.push(row.iter().zip(phi).map(|(a, b)| a * b).sum());
            }
        }
        LogitMap::new(h, w, self.num_labels, out)
    }

    fn backward(&self, features: &FeatureMap, dlogits: &LogitMap) -> Result<Vec<f64>> {
        self.check_features(features)?;
        if dlogits.dims() != features.dims() || dlogits.num_labels() != self.num_labels {
            return Err(Error::domain(
                "logit gradient shape does not match features",
            ));
        }
        let mut grad = vec![0.0; self.weights.len()];
        for (phi, g) in features.pixels().zip(dlogits.pixels()) {
            for (l, &gl) in g.iter().enumerate() {
                if gl == 0.0 {
                    continue;
                }
                let dst = &mut grad[l * self.dim..(l + 1) * self.dim];
                for (d, &p) in dst.iter_mut().zip(phi) {
                    *d += gl * p;
                }
            }
        }
        Ok(grad)
    }

    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn decays(&self, i: usize) -> bool {
        !i.is_multiple_of(self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is divided by this every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    /// Images whose gradients are averaged into one update.
    pub accumulation: usize,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_factor: 10.0,
            lr_decay_every: 10,
            epochs: 30,
            accumulation: 10,
            seed: 0,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(Error::domain(format!("{name} {v} must be >= 0")));
            }
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::domain("lr_decay_factor must be > 0"));
        }
        if self.accumulation == 0 || self.lr_decay_every == 0 {
            return Err(Error::domain(
                "accumulation and lr_decay_every must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate
            / self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Hyperparameters of one momentum-SGD update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← μ v + (g + λ W)`, `W ← W - lr v`; decay only where `decays(i)`.
pub fn sgd_step(
    weights: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    hp: &StepParams,
    decays: impl Fn(usize) -> bool,
) -> Result<()> {
    if weights.len() != grad.len() || weights.len() != velocity.len() {
        return Err(Error::domain("sgd_step: shape mismatch"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {}",
            grad[i]
        )));
    }
    for i in 0..weights.len() {
        let decay = if decays(i) {
            hp.weight_decay * weights[i]
        } else {
            0.0
        };
        velocity[i] = hp.momentum * velocity[i] + grad[i] + decay;
        weights[i] -= hp.learning_rate * velocity[i];
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub features: Arc<FeatureMap>,
    pub target: ProbMap,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub params: S,
    /// Mean per-image loss for each epoch, measured while training.
    pub epoch_losses: Vec<f64>,
}

fn sample_loss_grad<S: Segmenter>(
    model: &S,
    sample: &TrainSample,
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let logits = model.forward(&sample.features)?;
    let r = combined_loss(&sample.target, &logits, loss)?;
    if !r.value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {} on record {}",
            r.value, sample.id
        )));
    }
    let g = model.backward(&sample.features, &r.grad)?;
    Ok((r.value, g))
}

/// Minimizes the combined loss over `samples`, starting from `init`.
///
/// Each epoch visits the samples in a seeded shuffle; gradients of
/// `accumulation` consecutive images are averaged into one update. Per-image
/// evaluations run in parallel but are reduced in sample order, so the result
/// does not depend on the thread count.
pub fn train<S: Segmenter>(
    samples: &[TrainSample],
    init: S,
    loss: &LossConfig,
    opt: &OptConfig,
) -> Result<TrainOutcome<S>> {
    if samples.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    loss.validate()?;
    opt.validate()?;
    let mut model = init;
    let n_params = model.params().len();
    let mut velocity = vec![0.0; n_params];
    let mut epoch_losses = Vec::with_capacity(opt.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..opt.epochs {
        let hp = StepParams {
            learning_rate: opt.lr_at_epoch(epoch),
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
        };
        order.sort_unstable();
        order.shuffle(&mut rng_from(derive_indexed(
            opt.seed,
            "epoch",
            epoch as u64,
        )));
        let mut total = 0.0;
        for group in order.chunks(opt.accumulation) {
            let results: Vec<Result<(f64, Vec<f64>)>> = group
                .par_iter()
                .map(|&i| sample_loss_grad(&model, &samples[i], loss))
                .collect();
            let mut acc = vec![0.0; n_params];
            for r in results {
                let (value, g) = r?;
                total += value;
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / group.len() as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            let decays: Vec<bool> = (0..n_params).map(|i| model.decays(i)).collect();
            sgd_step(model.params_mut(), &acc, &mut velocity, &hp, |i| decays[i]).map_err(|e| {
                match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                    other => other,
                }
            })?;
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    Ok(TrainOutcome {
        params: model,
        epoch_losses,
    })
}

/// Mean loss of `model` over `samples` without updating it.
pub fn mean_loss<S: Segmenter>(
    samples: &[TrainSample],
    model: &S,
    loss: &LossConfig,
) -> Result<f64> {
    let values: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let logits = model.forward(&s.features)?;
            Ok(combined_loss(&s.target, &logits, loss)?.value)
        })
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / samples.len().max(1) as f64)
}
