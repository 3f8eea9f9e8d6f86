//! The EM loop: an initial model trained on fused cues of simple images,
//! then `K` rounds of (E) prior-regularized posterior targets over the
//! complex and re-filtered simple images and (M) combined-loss training
//! warm-started from the current parameters.
//!
//! Targets are computed once per round with the current parameters and
//! frozen for the whole M-step. Parameters are rounded to `f32` at every
//! stage boundary so a checkpoint reproduces the in-memory state exactly
//! and resumed runs match uninterrupted ones.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    hard_segmentation, iou_scores, ConfusionMatrix, IouScores, ScoreReport, StageScores,
};
use crate::fusion::{fuse_cues, target_distribution, FusionConfig};
use crate::losses::LossConfig;
use crate::posterior::{mixed_target, regularized_posterior, HeuristicConfig};
use crate::rng::{derive_indexed, derive_seed};
use crate::segmenter::{
    extract_features, train, FeatureMap, OptConfig, Segmenter, SegmenterParams, TrainOutcome,
    TrainSample, FEATURE_DIM,
};
use crate::synth::{
    filter_complex, filter_simple, refilter_simple_for_mstep, FilterConfig, SceneRecord,
    SimpleExample,
};
use crate::types::{LabelSet, LabelSpace, ProbMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Number of EM rounds.
    pub k: usize,
    pub heuristic: HeuristicConfig,
    pub init_opt: OptConfig,
    pub mstep_opt: OptConfig,
    /// M-step loss; the initial model always uses pure cross-entropy.
    pub loss: LossConfig,
    pub filter: FilterConfig,
    pub fusion: FusionConfig,
    /// Root seed; optimizer seeds are derived from it per stage.
    pub seed: u64,
}

impl Default for EmConfig {
    /// Reference hyperparameters (η, K, momentum, weight decay, accumulation,
    /// schedule) with learning rates, epoch counts, dataset caps and the IoU
    /// weight sized for the 64 px synthetic benchmark.
    fn default() -> Self {
        Self {
            k: 2,
            heuristic: HeuristicConfig::default(),
            init_opt: OptConfig {
                learning_rate: 0.5,
                epochs: 20,
                ..OptConfig::default()
            },
            mstep_opt: OptConfig {
                learning_rate: 0.1,
                epochs: 10,
                ..OptConfig::default()
            },
            loss: LossConfig {
                iou_weight: 10.0,
                ..LossConfig::default()
            },
            filter: FilterConfig::desk(),
            fusion: FusionConfig::default(),
            seed: 42,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::domain("K must be >= 1"));
        }
        HeuristicConfig::new(self.heuristic.eta)?;
        self.init_opt.validate()?;
        self.mstep_opt.validate()?;
        self.loss.validate()?;
        self.filter.validate()?;
        self.fusion.validate()
    }

    fn init_opt_seeded(&self) -> OptConfig {
        OptConfig {
            seed: derive_seed(self.seed, "init"),
            ..self.init_opt
        }
    }

    fn mstep_opt_seeded(&self, iteration: usize) -> OptConfig {
        OptConfig {
            seed: derive_indexed(self.seed, "mstep", iteration as u64),
            ..self.mstep_opt
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub simple_raw: usize,
    pub simple_filtered: usize,
    pub complex_raw: usize,
    pub complex_filtered: usize,
    /// Simple images kept for each M-step.
    pub mstep_simple: Vec<usize>,
    /// Total M-step training images per round.
    pub mstep_total: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmReport {
    /// Held-out scores after the initial model and each round.
    pub scores: ScoreReport,
    /// Per-epoch mean training loss of each stage.
    pub train_losses: Vec<Vec<f64>>,
    pub sizes: DatasetSizes,
    /// Ids of the complex images that survived the foreground-ratio filter.
    pub complex_kept: Vec<String>,
}

impl EmReport {
    pub fn mious(&self) -> Vec<f64> {
        self.scores.stages.iter().map(|s| s.miou).collect()
    }
}

pub fn stage_name(iteration: usize) -> String {
    if iteration == 0 {
        "Initial".to_string()
    } else {
        format!("EM iter {iteration}")
    }
}

/// Short name used for checkpoint files: `init`, `iter1`, ...
pub fn checkpoint_name(iteration: usize) -> String {
    if iteration == 0 {
        "init".to_string()
    } else {
        format!("iter{iteration}")
    }
}

/// Fused-cue targets for the simple images.
fn initial_samples(
    d_i: &[&SimpleExample],
    space: &LabelSpace,
    fusion: &FusionConfig,
) -> Result<Vec<TrainSample>> {
    d_i.par_iter()
        .map(|ex| {
            let m = fuse_cues(&ex.cues.saliency, &ex.cues.attention, fusion)?;
            Ok(TrainSample {
                id: ex.scene.id.clone(),
                features: Arc::new(extract_features(&ex.scene.image)),
                target: target_distribution(&m, ex.class(), space)?,
            })
        })
        .collect()
}

/// Trains the initial model from zero with pure cross-entropy against the
/// fused-cue targets.
pub fn train_initial(
    d_i: &[&SimpleExample],
    space: &LabelSpace,
    cfg: &EmConfig,
) -> Result<TrainOutcome<SegmenterParams>> {
    if d_i.is_empty() {
        return Err(Error::domain("initial training set is empty"));
    }
    if let Some(ex) = d_i.iter().find(|ex| ex.scene.labels.only().is_none()) {
        return Err(Error::domain(format!(
            "record {} is not single-object",
            ex.scene.id
        )));
    }
    let samples = initial_samples(d_i, space, &cfg.fusion)?;
    let mut out = train(
        &samples,
        SegmenterParams::zeros(space.num_labels(), FEATURE_DIM),
        &LossConfig::cross_entropy_only(),
        &cfg.init_opt_seeded(),
    )?;
    out.params.round_to_f32();
    Ok(out)
}

/// Posterior targets for one image under the label prior of `labels`.
pub fn e_step<S: Segmenter>(
    model: &S,
    features: &FeatureMap,
    labels: &LabelSet,
    space: &LabelSpace,
    heuristic: &HeuristicConfig,
) -> Result<ProbMap> {
    let posterior = regularized_posterior(&model.forward(features)?, labels, space)?;
    Ok(mixed_target(&posterior, heuristic))
}

/// Combined-loss training warm-started from `theta`.
pub fn m_step<S: Segmenter>(
    theta: S,
    targets: &[TrainSample],
    loss: &LossConfig,
    opt: &OptConfig,
) -> Result<TrainOutcome<S>> {
    if targets.is_empty() {
        return Err(Error::domain("M-step target set is empty"));
    }
    train(targets, theta, loss, opt)
}

/// Held-out scores of `model` over `records`; per-image matrices are merged
/// in record order.
pub fn evaluate<S: Segmenter>(
    model: &S,
    records: &[SceneRecord],
    space: &LabelSpace,
) -> Result<IouScores> {
    let mats: Vec<Result<ConfusionMatrix>> = records
        .par_iter()
        .map(|r| {
            let pred = hard_segmentation(
                &model.forward(&extract_features(&r.image))?,
                space.ignore_label(),
            );
            let mut cm = ConfusionMatrix::new(space.num_labels());
            cm.accumulate(&pred, &r.gt, space.ignore_label())?;
            Ok(cm)
        })
        .collect();
    let mut total = ConfusionMatrix::new(space.num_labels());
    for m in mats {
        total.merge(&m?)?;
    }
    Ok(iou_scores(&total))
}

pub struct EmData<'a> {
    pub space: &'a LabelSpace,
    /// Unfiltered simple images with cues.
    pub simple: &'a [SimpleExample],
    /// Unfiltered complex images (labels only are used for training).
    pub complex: &'a [SceneRecord],
    /// Held-out images with ground truth.
    pub val: &'a [SceneRecord],
}

/// State after `completed` rounds, enough to continue a run.
#[derive(Debug, Clone)]
pub struct EmState {
    pub params: SegmenterParams,
    pub report: EmReport,
    pub completed: usize,
}

/// Emitted after the initial model and after each round.
pub struct Checkpoint<'a> {
    pub iteration: usize,
    pub params: &'a SegmenterParams,
    pub report: &'a EmReport,
}

fn stage_scores(iteration: usize, s: IouScores) -> StageScores {
    StageScores {
        name: stage_name(iteration),
        per_class_iou: s.per_class,
        miou: s.miou,
    }
}

fn check_data(data: &EmData<'_>) -> Result<()> {
    if data.simple.is_empty() || data.complex.is_empty() {
        return Err(Error::domain("EM needs nonempty simple and complex sets"));
    }
    Ok(())
}

fn filtered_simple<'a>(data: &EmData<'a>, cfg: &EmConfig) -> Result<Vec<&'a SimpleExample>> {
    let kept = filter_simple(data.simple, &cfg.filter).map_err(|e| e.in_stage("filter_simple"))?;
    Ok(kept.iter().map(|&i| &data.simple[i]).collect())
}

/// Filters the simple set, trains and scores the initial model, and filters
/// the complex set with it.
pub fn initialize(data: &EmData<'_>, cfg: &EmConfig) -> Result<EmState> {
    cfg.validate()?;
    check_data(data)?;
    let space = data.space;
    let d_i = filtered_simple(data, cfg)?;
    if d_i.is_empty() {
        return Err(Error::domain(format!(
            "the simple-image filter kept 0 of {} images (sides must lie in [{}, {}])",
            data.simple.len(),
            cfg.filter.min_side,
            cfg.filter.max_side
        ))
        .in_stage("filter_simple"));
    }
    let init = train_initial(&d_i, space, cfg).map_err(|e| e.in_stage("train_initial"))?;
    let scores = evaluate(&init.params, data.val, space).map_err(|e| e.in_stage("evaluate"))?;
    let kept = filter_complex(data.complex, &init.params, space.ignore_label(), &cfg.filter)
        .map_err(|e| e.in_stage("filter_complex"))?;
    let report = EmReport {
        scores: ScoreReport {
            stages: vec![stage_scores(0, scores)],
        },
        train_losses: vec![init.epoch_losses],
        sizes: DatasetSizes {
            simple_raw: data.simple.len(),
            simple_filtered: d_i.len(),
            complex_raw: data.complex.len(),
            complex_filtered: kept.len(),
            ..Default::default()
        },
        complex_kept: kept.iter().map(|&i| data.complex[i].id.clone()).collect(),
    };
    Ok(EmState {
        params: init.params,
        report,
        completed: 0,
    })
}

/// Runs (or resumes) the full algorithm, calling `on_checkpoint` after every
/// stage it completes.
pub fn run_em(
    data: &EmData<'_>,
    cfg: &EmConfig,
    resume: Option<EmState>,
    mut on_checkpoint: impl FnMut(&Checkpoint<'_>) -> Result<()>,
) -> Result<EmState> {
    cfg.validate()?;
    check_data(data)?;
    let space = data.space;
    let ignore = space.ignore_label();
    let d_i = filtered_simple(data, cfg)?;

    let mut state = match resume {
        Some(state) => {
            if state.completed > cfg.k {
                return Err(Error::domain(format!(
                    "checkpoint is at round {} but K is {}",
                    state.completed, cfg.k
                )));
            }
            state
        }
        None => {
            let state = initialize(data, cfg)?;
            on_checkpoint(&Checkpoint {
                iteration: 0,
                params: &state.params,
                report: &state.report,
            })?;
            state
        }
    };

    let d_p: Vec<&SceneRecord> = data
        .complex
        .iter()
        .filter(|r| state.report.complex_kept.contains(&r.id))
        .collect();
    if d_p.len() != state.report.complex_kept.len() {
        return Err(Error::format(
            "checkpoint references complex images missing from the dataset",
        ));
    }

    for k in state.completed + 1..=cfg.k {
        let stage = stage_name(k);
        let theta = &state.params;
        let kept = refilter_simple_for_mstep(&d_i, theta, ignore, &cfg.filter)
            .map_err(|e| e.in_stage(format!("{stage}: refilter")))?;
        let d_i_prime: Vec<&SimpleExample> = kept.iter().map(|&i| d_i[i]).collect();

        let jobs: Vec<(&str, &crate::image::Image, &LabelSet)> = d_p
            .iter()
            .map(|r| (r.id.as_str(), &r.image, &r.labels))
            .chain(
                d_i_prime
                    .iter()
                    .map(|ex| (ex.scene.id.as_str(), &ex.scene.image, &ex.scene.labels)),
            )
            .collect();
        let targets: Vec<TrainSample> = jobs
            .par_iter()
            .map(|&(id, image, labels)| {
                let features = Arc::new(extract_features(image));
                let target = e_step(theta, &features, labels, space, &cfg.heuristic)?;
                Ok(TrainSample {
                    id: id.to_string(),
                    features,
                    target,
                })
            })
            .collect::<Result<_>>()
            .map_err(|e: Error| e.in_stage(format!("{stage}: e_step")))?;

        let out = m_step(
            state.params.clone(),
            &targets,
            &cfg.loss,
            &cfg.mstep_opt_seeded(k),
        )
        .map_err(|e| e.in_stage(format!("{stage}: m_step")))?;
        let mut params = out.params;
        params.round_to_f32();
        let scores = evaluate(&params, data.val, space).map_err(|e| e.in_stage("evaluate"))?;

        state.params = params;
        state.completed = k;
        let report = &mut state.report;
        report.scores.stages.push(stage_scores(k, scores));
        report.train_losses.push(out.epoch_losses);
        report.sizes.mstep_simple.push(d_i_prime.len());
        report.sizes.mstep_total.push(targets.len());
        on_checkpoint(&Checkpoint {
            iteration: k,
            params: &state.params,
            report: &state.report,
        })?;
    }
    Ok(state)
}
