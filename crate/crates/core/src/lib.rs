//! Weakly-supervised semantic segmentation trained by expectation-maximization.
//!
//! The pipeline fuses saliency and attention cues of simple single-object
//! images into soft targets for an initial model, then alternates an E-step
//! (posterior restricted to the image-level labels, sharpened by the
//! relative-margin heuristic) with an M-step (soft cross-entropy plus a
//! probabilistic IoU gain). A synthetic dataset with oracle ground truth
//! stands in for real images.

// Negated comparisons below reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod em;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod posterior;
pub mod rng;
pub mod segmenter;
pub mod synth;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
pub use image::Image;
pub use segmenter::{FeatureMap, Segmenter, SegmenterParams};
pub use tensor::Tensor;
pub use types::{
    argmax, one_hot, BinaryMask, CueMap, LabelId, LabelSet, LabelSpace, LogitMap, ProbMap, SegMask,
    BACKGROUND, DEFAULT_IGNORE_LABEL,
};
