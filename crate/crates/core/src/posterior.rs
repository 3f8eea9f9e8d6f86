//! E-step: label prior, prior-regularized posterior and the mixed target
//! that blends the posterior with its argmax (Dirac) approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, softmax_into, LabelSet, LabelSpace, LogitMap, ProbMap};

/// Per-label log-prior entry: either neutral (0) or excluded (`-inf`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorEntry {
    Zero,
    Excluded,
}

impl PriorEntry {
    pub fn as_f64(self) -> f64 {
        match self {
            PriorEntry::Zero => 0.0,
            PriorEntry::Excluded => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorVector(Vec<PriorEntry>);

impl PriorVector {
    pub fn entries(&self) -> &[PriorEntry] {
        &self.0
    }

    pub fn allows(&self, label: usize) -> bool {
        self.0[label] == PriorEntry::Zero
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|e| e.as_f64()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub eta: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self { eta: 0.05 }
    }
}

impl HeuristicConfig {
    pub fn new(eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::domain(format!("eta {eta} outside [0,1]")));
        }
        Ok(Self { eta })
    }
}

/// `g(l) = 0` for `l ∈ z ∪ {background}`, excluded otherwise.
pub fn label_prior(z: &LabelSet, space: &LabelSpace) -> PriorVector {
    PriorVector(
        (0..space.num_labels())
            .map(|l| {
                if l == 0 || z.contains(l as u32) {
                    PriorEntry::Zero
                } else {
                    PriorEntry::Excluded
                }
            })
            .collect(),
    )
}

/// Softmax of `f + g`: excluded labels get exactly zero mass and the
/// softmax is taken over the allowed labels only.
pub fn regularized_posterior(f: &LogitMap, z: &LabelSet, space: &LabelSpace) -> Result<ProbMap> {
    if f.num_labels() != space.num_labels() {
        return Err(Error::domain(format!(
            "logits carry {} labels, label space has {}",
            f.num_labels(),
            space.num_labels()
        )));
    }
    z.check(space)?;
    let prior = label_prior(z, space);
    let allowed: Vec<usize> = (0..space.num_labels())
        .filter(|&l| prior.allows(l))
        .collect();
    let l = space.num_labels();
    let mut values = vec![0.0; f.values().len()];
    let mut src = vec![0.0; allowed.len()];
    let mut dst = vec![0.0; allowed.len()];
    for (row, out) in f.pixels().zip(values.chunks_exact_mut(l)) {
        for (s, &k) in src.iter_mut().zip(&allowed) {
            *s = row[k];
        }
        softmax_into(&src, &mut dst);
        for (&d, &k) in dst.iter().zip(&allowed) {
            out[k] = d;
        }
    }
    let (h, w) = f.dims();
    ProbMap::from_parts(h, w, l, values, None)
}

/// `(p1 - p2) / p1` for the two largest entries.
pub fn relative_margin(p: &[f64]) -> f64 {
    let (mut p1, mut p2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > p1 {
            p2 = p1;
            p1 = v;
        } else if v > p2 {
            p2 = v;
        }
    }
    if p1 <= 0.0 || !p2.is_finite() {
        // A single entry or an all-zero row carries no competing label.
        return if p1 > 0.0 { 1.0 } else { 0.0 };
    }
    (p1 - p2) / p1
}

/// `1` when `r >= eta`, otherwise `r`.
pub fn epsilon_from_heuristic(r: f64, cfg: &HeuristicConfig) -> f64 {
    if r >= cfg.eta {
        1.0
    } else {
        r
    }
}

/// Writes `(1 - eps) p + eps onehot(argmax p)` for one pixel.
pub fn mix_pixel(p: &[f64], cfg: &HeuristicConfig, out: &mut [f64]) {
    let top = argmax(p);
    let eps = epsilon_from_heuristic(relative_margin(p), cfg);
    for (k, (o, &v)) in out.iter_mut().zip(p).enumerate() {
        *o = (1.0 - eps) * v + if k == top { eps } else { 0.0 };
    }
}

/// Per-pixel mixture of the posterior and its Dirac approximation.
pub fn mixed_target(posterior: &ProbMap, cfg: &HeuristicConfig) -> ProbMap {
    let l = posterior.num_labels();
    let mut values = vec![0.0; posterior.values().len()];
    for (m, (p, out)) in posterior
        .pixels()
        .zip(values.chunks_exact_mut(l))
        .enumerate()
    {
        if posterior.is_valid(m) {
            mix_pixel(p, cfg, out);
        } else {
            out.copy_from_slice(p);
        }
    }
    let (h, w) = posterior.dims();
    ProbMap::from_parts(
        h,
        w,
        l,
        values,
        posterior.valid_mask().map(<[bool]>::to_vec),
    )
    .expect("shape copied from a valid map")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn space(c: usize) -> LabelSpace {
        LabelSpace::new((1..=c).map(|i| format!("c{i}"))).unwrap()
    }

    fn z(labels: &[u32]) -> LabelSet {
        LabelSet::new(labels.iter().copied()).unwrap()
    }

    fn one_pixel(vals: &[f64]) -> LogitMap {
        LogitMap::new(1, 1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn prior_vectors() {
        let inf = f64::NEG_INFINITY;
        assert_eq!(
            label_prior(&z(&[1]), &space(3)).to_f64(),
            vec![0.0, 0.0, inf, inf]
        );
        assert_eq!(
            label_prior(&z(&[1, 2, 3]), &space(3)).to_f64(),
            vec![0.0; 4]
        );
        assert_eq!(
            label_prior(&z(&[2, 3]), &space(3)).to_f64(),
            vec![0.0, inf, 0.0, 0.0]
        );
    }

    #[test]
    fn posterior_symmetric_case() {
        let p = regularized_posterior(&one_pixel(&[1.0; 4]), &z(&[1]), &space(3)).unwrap();
        assert_eq!(p.pixel(0), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn posterior_analytic_case() {
        let f = one_pixel(&[0.0, 2f64.ln(), 4f64.ln(), 0.0]);
        let p = regularized_posterior(&f, &z(&[1, 2]), &space(3)).unwrap();
        let expected = [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0, 0.0];
        for (a, b) in p.pixel(0).iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn posterior_full_label_set_is_plain_softmax() {
        let f = LogitMap::new(1, 2, 4, vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -3.0, 0.0]).unwrap();
        let p = regularized_posterior(&f, &z(&[1, 2, 3]), &space(3)).unwrap();
        let plain = f.softmax();
        for (a, b) in p.values().iter().zip(plain.values()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn posterior_rejects_foreign_labels() {
        assert!(regularized_posterior(&one_pixel(&[0.0; 4]), &z(&[4]), &space(3)).is_err());
        assert!(regularized_posterior(&one_pixel(&[0.0; 3]), &z(&[1]), &space(3)).is_err());
    }

    #[test]
    fn margins() {
        assert_abs_diff_eq!(relative_margin(&[0.5, 0.3, 0.2]), 0.4, epsilon = 1e-15);
        assert_eq!(relative_margin(&[0.5, 0.5, 0.0]), 0.0);
        assert_eq!(relative_margin(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(relative_margin(&[0.0, 1.0]), 1.0);
    }

    #[test]
    fn epsilon_branches() {
        let cfg = HeuristicConfig { eta: 0.05 };
        assert_eq!(epsilon_from_heuristic(0.4, &cfg), 1.0);
        assert_eq!(epsilon_from_heuristic(0.02, &cfg), 0.02);
        assert_eq!(epsilon_from_heuristic(0.05, &cfg), 1.0);
        assert!(HeuristicConfig::new(1.5).is_err());
    }

    fn mix(p: &[f64], eta: f64) -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        mix_pixel(p, &HeuristicConfig { eta }, &mut out);
        out
    }

    #[test]
    fn mixed_hard_branch() {
        assert_eq!(mix(&[0.5, 0.3, 0.2], 0.05), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn mixed_soft_branch() {
        // r = 0.01/0.5 = 0.02 < 0.05, so p̄ = 0.98 p + 0.02 e_0.
        let out = mix(&[0.5, 0.49, 0.01], 0.05);
        for (a, b) in out.iter().zip([0.51, 0.4802, 0.0098]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn mixed_one_hot_fixed_point() {
        for eta in [0.0, 0.05, 0.5, 1.0] {
            assert_eq!(mix(&[0.0, 1.0, 0.0], eta), vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn mixed_target_keeps_invalid_pixels_untouched() {
        let p = ProbMap::new(1, 2, 2, vec![0.6, 0.4, 0.5, 0.5], Some(vec![true, false])).unwrap();
        let out = mixed_target(&p, &HeuristicConfig::default());
        assert_eq!(out.pixel(0), &[1.0, 0.0]);
        assert_eq!(out.pixel(1), &[0.5, 0.5]);
        assert_eq!(out.valid_mask(), Some(&[true, false][..]));
    }

    fn logits_and_labels() -> impl Strategy<Value = (usize, Vec<f64>, Vec<u32>)> {
        (1usize..6).prop_flat_map(|c| {
            (
                Just(c),
                prop::collection::vec(-20.0f64..20.0, (c + 1) * 4),
                prop::collection::btree_set(1u32..=c as u32, 1..=c)
                    .prop_map(|s| s.into_iter().collect::<Vec<_>>()),
            )
        })
    }

    proptest! {
        #[test]
        fn posterior_invariants((c, vals, labels) in logits_and_labels()) {
            let s = space(c);
            let zs = z(&labels);
            let f = LogitMap::new(2, 2, c + 1, vals).unwrap();
            let p = regularized_posterior(&f, &zs, &s).unwrap();
            prop_assert!(p.validate().is_ok());
            let prior = label_prior(&zs, &s);
            for (row, frow) in p.pixels().zip(f.pixels()) {
                for (l, &v) in row.iter().enumerate() {
                    if !prior.allows(l) {
                        prop_assert_eq!(v, 0.0);
                    }
                }
                let best_allowed = (0..=c)
                    .filter(|&l| prior.allows(l))
                    .fold(None, |best: Option<usize>, l| match best {
                        Some(b) if frow[b] >= frow[l] => Some(b),
                        _ => Some(l),
                    })
                    .unwrap();
                prop_assert_eq!(argmax(row), best_allowed);
            }
        }

        #[test]
        fn posterior_shift_invariant((c, vals, labels) in logits_and_labels(), shift in -100.0f64..100.0) {
            let s = space(c);
            let zs = z(&labels);
            let f = LogitMap::new(2, 2, c + 1, vals.clone()).unwrap();
            let g = LogitMap::new(2, 2, c + 1, vals.iter().map(|v| v + shift).collect()).unwrap();
            let p = regularized_posterior(&f, &zs, &s).unwrap();
            let q = regularized_posterior(&g, &zs, &s).unwrap();
            for (a, b) in p.values().iter().zip(q.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn mixing_preserves_argmax_and_simplex(
            (c, vals, labels) in logits_and_labels(),
            eta in 0.0f64..=1.0,
        ) {
            let f = LogitMap::new(2, 2, c + 1, vals).unwrap();
            let p = regularized_posterior(&f, &z(&labels), &space(c)).unwrap();
            let mixed = mixed_target(&p, &HeuristicConfig { eta });
            prop_assert!(mixed.validate().is_ok());
            for (a, b) in p.pixels().zip(mixed.pixels()) {
                prop_assert_eq!(argmax(a), argmax(b));
                let top = argmax(a);
                for l in 0..a.len() {
                    if a[l] == 0.0 && l != top {
                        prop_assert_eq!(b[l], 0.0);
                    }
                }
            }
        }

        #[test]
        fn epsilon_monotone_and_bounded(r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0, eta in 0.0f64..=1.0) {
            let cfg = HeuristicConfig { eta };
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let (e_lo, e_hi) = (epsilon_from_heuristic(lo, &cfg), epsilon_from_heuristic(hi, &cfg));
            prop_assert!((0.0..=1.0).contains(&e_lo));
            prop_assert!(e_lo <= e_hi);
        }
    }
}
