//! Random fixtures shared by the kernel benchmarks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wseg_core::rng::rng_from;
use wseg_core::{LogitMap, ProbMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_from(seed)
}

pub fn random_logits(rng: &mut ChaCha8Rng, h: usize, w: usize, labels: usize) -> LogitMap {
    let values = (0..h * w * labels).map(|_| rng.random_range(-3.0..3.0)).collect();
    LogitMap::new(h, w, labels, values).expect("finite logits")
}

pub fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, labels: usize) -> ProbMap {
    random_logits(rng, h, w, labels).softmax()
}
