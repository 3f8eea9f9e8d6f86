use std::sync::Arc;

use wseg_core::losses::LossConfig;
use wseg_core::segmenter::{extract_features, mean_loss, train, OptConfig, TrainSample, FEATURE_DIM};
use wseg_core::{one_hot, Image, LabelSpace, ProbMap, Segmenter, SegmenterParams};

/// Left half dark, right half bright; the target labels the bright half 1.
fn toy_sample(id: usize, h: usize, w: usize, lo: f64, hi: f64) -> TrainSample {
    let space = LabelSpace::new(["thing"]).unwrap();
    let mut img = Vec::with_capacity(h * w * 3);
    let mut target = Vec::with_capacity(h * w * 2);
    for _y in 0..h {
        for x in 0..w {
            let bright = x >= w / 2;
            let v = if bright { hi } else { lo };
            img.extend_from_slice(&[v, v, v]);
            target.extend(one_hot(u32::from(bright), &space).unwrap());
        }
    }
    TrainSample {
        id: format!("toy-{id}"),
        features: Arc::new(extract_features(&Image::new(h, w, img).unwrap())),
        target: ProbMap::new(h, w, 2, target, None).unwrap(),
    }
}

fn toy_set() -> Vec<TrainSample> {
    (0..20)
        .map(|i| toy_sample(i, 8, 8, 0.1 + 0.01 * i as f64, 0.8 - 0.01 * i as f64))
        .collect()
}

#[test]
fn zero_epochs_returns_the_initial_parameters() {
    let init = SegmenterParams::zeros(2, FEATURE_DIM);
    let opt = OptConfig {
        epochs: 0,
        ..OptConfig::default()
    };
    let out = train(&toy_set(), init.clone(), &LossConfig::cross_entropy_only(), &opt).unwrap();
    assert_eq!(out.params, init);
    assert!(out.epoch_losses.is_empty());
}

#[test]
fn cross_entropy_decreases_monotonically_on_a_separable_toy_set() {
    let samples = toy_set();
    let loss = LossConfig::cross_entropy_only();
    let opt = OptConfig {
        learning_rate: 1e-3,
        epochs: 5,
        ..OptConfig::default()
    };
    let out = train(&samples, SegmenterParams::zeros(2, FEATURE_DIM), &loss, &opt).unwrap();
    assert_eq!(out.epoch_losses.len(), 5);
    assert!(out.epoch_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", out.epoch_losses);
    let before = mean_loss(&samples, &SegmenterParams::zeros(2, FEATURE_DIM), &loss).unwrap();
    let after = mean_loss(&samples, &out.params, &loss).unwrap();
    assert!(after < before);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let samples = toy_set();
    let loss = LossConfig::default();
    let opt = OptConfig {
        learning_rate: 0.1,
        epochs: 3,
        accumulation: 3,
        seed: 9,
        ..OptConfig::default()
    };
    let a = train(&samples, SegmenterParams::zeros(2, FEATURE_DIM), &loss, &opt).unwrap();
    let b = train(&samples, SegmenterParams::zeros(2, FEATURE_DIM), &loss, &opt).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let samples = toy_set();
    let loss = LossConfig::default();
    let opt = OptConfig {
        learning_rate: 0.1,
        epochs: 2,
        ..OptConfig::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&samples, SegmenterParams::zeros(2, FEATURE_DIM), &loss, &opt).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.params, b.params);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn trained_model_separates_the_toy_set() {
    let samples = toy_set();
    let opt = OptConfig {
        learning_rate: 0.5,
        epochs: 10,
        ..OptConfig::default()
    };
    let out = train(&samples, SegmenterParams::zeros(2, FEATURE_DIM), &LossConfig::cross_entropy_only(), &opt).unwrap();
    let logits = out.params.forward(&samples[0].features).unwrap();
    for (m, row) in logits.pixels().enumerate() {
        let bright = m % 8 >= 4;
        assert_eq!(row[1] > row[0], bright, "pixel {m}");
    }
}

#[test]
fn non_finite_gradient_aborts() {
    let mut weights = vec![0.0; 2 * FEATURE_DIM];
    weights[1] = 1e300;
    let init = SegmenterParams::from_weights(2, FEATURE_DIM, weights).unwrap();
    let opt = OptConfig {
        learning_rate: 1e300,
        epochs: 3,
        ..OptConfig::default()
    };
    let err = train(&toy_set(), init, &LossConfig::default(), &opt).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}
