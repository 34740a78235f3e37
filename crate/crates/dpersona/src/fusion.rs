//! Crowdsourcing label-fusion baselines: majority voting, random selection,
//! and binary STAPLE (EM over per-rater sensitivity/specificity).

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::Mask;

/// Foreground wins ties: a pixel is fused foreground iff at least half the
/// raters mark it (`2 * votes >= R`).
pub fn majority_vote(annotations: &[Mask]) -> Mask {
    assert!(!annotations.is_empty());
    let r = annotations.len();
    let dim = annotations[0].dim();
    Array2::from_shape_fn(dim, |(y, x)| {
        let votes = annotations
            .iter()
            .inspect(|a| assert_eq!(a.dim(), dim, "annotation shape mismatch"))
            .filter(|a| a[[y, x]])
            .count();
        2 * votes >= r
    })
}

/// Uniformly picks one rater; returns the index alongside the mask.
pub fn random_select<'a>(
    annotations: &'a [Mask],
    rng: &mut ChaCha12Rng,
) -> (usize, &'a Mask) {
    assert!(!annotations.is_empty());
    let idx = rng.random_range(0..annotations.len());
    (idx, &annotations[idx])
}

/// Result of binary STAPLE fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StapleEstimate {
    /// Posterior foreground weight per pixel, in [0,1].
    pub consensus: Array2<f64>,
    /// Sensitivity p_j per rater.
    pub sensitivity: Vec<f64>,
    /// Specificity q_j per rater.
    pub specificity: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl StapleEstimate {
    /// Consensus binarized at 0.5 for downstream use.
    pub fn fused_mask(&self) -> Mask {
        self.consensus.mapv(|w| w > 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StapleOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub init_p: f64,
    pub init_q: f64,
}

impl Default for StapleOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            init_p: 0.99999,
            init_q: 0.99999,
        }
    }
}

const PROB_CLAMP: f64 = 1e-6;

fn clamp_prob(v: f64) -> f64 {
    v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary STAPLE EM with a spatially uniform prior fixed at the global mean
/// vote rate. Degenerate inputs (every annotation empty, or every one full)
/// fall back to majority voting with `converged = false`.
pub fn staple(annotations: &[Mask], opts: &StapleOptions) -> StapleEstimate {
    assert!(annotations.len() >= 2, "staple needs at least two raters");
    let r = annotations.len();
    let dim = annotations[0].dim();
    for a in annotations {
        assert_eq!(a.dim(), dim, "annotation shape mismatch");
    }
    let n = dim.0 * dim.1;
    let total_votes: usize = annotations
        .iter()
        .map(|a| a.iter().filter(|&&v| v).count())
        .sum();
    if total_votes == 0 || total_votes == r * n {
        let mv = majority_vote(annotations);
        return StapleEstimate {
            consensus: mv.mapv(|v| v as u8 as f64),
            sensitivity: vec![clamp_prob(opts.init_p); r],
            specificity: vec![clamp_prob(opts.init_q); r],
            iterations: 0,
            converged: false,
        };
    }

    let prior = total_votes as f64 / (r * n) as f64;
    let mut p: Vec<f64> = vec![clamp_prob(opts.init_p); r];
    let mut q: Vec<f64> = vec![clamp_prob(opts.init_q); r];
    let mut weights = Array2::<f64>::zeros(dim);
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..opts.max_iters {
        // E-step, with the observed-data log-likelihood as the EM monitor.
        let mut max_delta = 0.0f64;
        let mut ll = 0.0;
        let mut new_weights = Array2::<f64>::zeros(dim);
        for (idx, w_out) in new_weights.indexed_iter_mut() {
            let mut a = prior;
            let mut b = 1.0 - prior;
            for (j, ann) in annotations.iter().enumerate() {
                if ann[idx] {
                    a *= p[j];
                    b *= 1.0 - q[j];
                } else {
                    a *= 1.0 - p[j];
                    b *= q[j];
                }
            }
            let w = a / (a + b);
            assert!((0.0..=1.0).contains(&w), "weight left [0,1]: {w}");
            ll += (a + b).ln();
            max_delta = max_delta.max((w - weights[idx]).abs());
            *w_out = w;
        }
        weights = new_weights;
        assert!(
            ll >= prev_ll - 1e-9 * prev_ll.abs().max(1.0),
            "EM objective decreased: {prev_ll} -> {ll}"
        );
        prev_ll = ll;
        iterations = iter + 1;
        if max_delta < opts.tol {
            converged = true;
            break;
        }

        // M-step.
        let w_sum: f64 = weights.sum();
        let w_comp: f64 = n as f64 - w_sum;
        for (j, ann) in annotations.iter().enumerate() {
            let mut fg = 0.0;
            let mut bg = 0.0;
            for (idx, &w) in weights.indexed_iter() {
                if ann[idx] {
                    fg += w;
                } else {
                    bg += 1.0 - w;
                }
            }
            p[j] = clamp_prob(fg / w_sum);
            q[j] = clamp_prob(bg / w_comp);
        }
    }

    StapleEstimate {
        consensus: weights,
        sensitivity: p,
        specificity: q,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use rand::Rng;

    fn mask(rows: usize, cols: usize, bits: &[u8]) -> Mask {
        Array2::from_shape_vec((rows, cols), bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> Mask {
        Array2::from_shape_fn((h, w), |_| rng.random_bool(0.5))
    }

    #[test]
    fn majority_vote_counts_and_tie_rule() {
        let anns = vec![
            mask(1, 4, &[1, 1, 1, 0]),
            mask(1, 4, &[1, 1, 0, 0]),
            mask(1, 4, &[1, 0, 0, 0]),
            mask(1, 4, &[0, 0, 0, 1]),
        ];
        // votes per pixel: 3, 2, 1, 1 -> tie at pixel 1 goes to foreground.
        assert_eq!(majority_vote(&anns), mask(1, 4, &[1, 1, 0, 0]));

        let same = vec![anns[0].clone(); 3];
        assert_eq!(majority_vote(&same), anns[0]);
    }

    #[test]
    fn majority_vote_is_rater_permutation_invariant() {
        let mut rng = rng_from(61, "mv-perm");
        let anns: Vec<Mask> = (0..5).map(|_| random_mask(&mut rng, 6, 6)).collect();
        let mut shuffled = anns.clone();
        shuffled.rotate_left(2);
        shuffled.swap(0, 3);
        assert_eq!(majority_vote(&anns), majority_vote(&shuffled));
    }

    #[test]
    fn random_select_is_uniform_and_reproducible() {
        let mut rng = rng_from(62, "rs");
        let anns: Vec<Mask> = (0..4).map(|_| random_mask(&mut rng, 2, 2)).collect();
        let n = 10_000;
        let mut counts = [0usize; 4];
        let mut draw_rng = rng_from(62, "rs-draws");
        for _ in 0..n {
            let (idx, m) = random_select(&anns, &mut draw_rng);
            assert_eq!(*m, anns[idx]);
            counts[idx] += 1;
        }
        let expected = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "count {c} vs expected {expected}"
            );
        }
        // Same seed, same sequence.
        let mut r1 = rng_from(63, "rs-rep");
        let mut r2 = rng_from(63, "rs-rep");
        for _ in 0..32 {
            assert_eq!(random_select(&anns, &mut r1).0, random_select(&anns, &mut r2).0);
        }
        // Single rater always wins.
        let single = vec![anns[0].clone()];
        assert_eq!(random_select(&single, &mut r1).0, 0);
    }

    #[test]
    fn staple_unanimous_is_a_fixed_point() {
        let mut rng = rng_from(64, "staple-unan");
        let m = crate::synthgen::generate_base_shape(&mut rng, 64, 64).0;
        let anns = vec![m.clone(); 4];
        let est = staple(&anns, &StapleOptions::default());
        assert!(est.converged);
        assert_eq!(est.fused_mask(), m);
        for j in 0..4 {
            assert!(est.sensitivity[j] >= 1.0 - 2e-6);
            assert!(est.specificity[j] >= 1.0 - 2e-6);
        }
    }

    /// Flips a planted mask with known per-rater sensitivity/specificity.
    fn noisy_rater(truth: &Mask, p: f64, q: f64, rng: &mut ChaCha12Rng) -> Mask {
        truth.mapv(|v| {
            if v {
                rng.random::<f64>() < p
            } else {
                rng.random::<f64>() >= q
            }
        })
    }

    #[test]
    fn staple_recovers_planted_parameters() {
        // A big ellipse so both classes have plenty of pixels.
        let truth = crate::synthgen::rasterize_star_shape(
            32.0, 32.0, 16.0, 12.0, 0.3, &[0.0; 4], &[0.0; 4], 64, 64,
        );
        let p_true = [0.95, 0.9, 0.85, 0.8];
        let q_true = [0.92, 0.96, 0.88, 0.94];
        let mut rng = rng_from(65, "staple-plant");
        let anns: Vec<Mask> = (0..4)
            .map(|j| noisy_rater(&truth, p_true[j], q_true[j], &mut rng))
            .collect();
        let est = staple(&anns, &StapleOptions::default());
        for j in 0..4 {
            assert!(
                (est.sensitivity[j] - p_true[j]).abs() < 0.05,
                "p[{j}] = {} vs {}",
                est.sensitivity[j],
                p_true[j]
            );
            assert!(
                (est.specificity[j] - q_true[j]).abs() < 0.05,
                "q[{j}] = {} vs {}",
                est.specificity[j],
                q_true[j]
            );
        }
        // The consensus should be close to the planted truth.
        let fused = est.fused_mask();
        assert!(crate::metrics::dice(&fused, &truth) > 0.9);
    }

    #[test]
    fn staple_flags_the_adversarial_rater() {
        let truth = crate::synthgen::rasterize_star_shape(
            32.0, 32.0, 14.0, 11.0, 0.0, &[0.0; 4], &[0.0; 4], 64, 64,
        );
        let mut rng = rng_from(66, "staple-adv");
        let mut anns: Vec<Mask> = (0..3)
            .map(|_| noisy_rater(&truth, 0.9, 0.9, &mut rng))
            .collect();
        anns.push(truth.mapv(|v| !v));
        let est = staple(&anns, &StapleOptions::default());
        let adv = est.sensitivity[3];
        for j in 0..3 {
            assert!(
                adv < est.sensitivity[j],
                "adversary p {adv} not the minimum ({:?})",
                est.sensitivity
            );
        }
    }

    #[test]
    fn staple_degenerate_inputs_fall_back_to_majority_vote() {
        let empty = vec![mask(2, 2, &[0, 0, 0, 0]); 3];
        let est = staple(&empty, &StapleOptions::default());
        assert!(!est.converged);
        assert_eq!(est.iterations, 0);
        assert_eq!(est.fused_mask(), mask(2, 2, &[0, 0, 0, 0]));

        let full = vec![mask(2, 2, &[1, 1, 1, 1]); 3];
        let est = staple(&full, &StapleOptions::default());
        assert!(!est.converged);
        assert_eq!(est.fused_mask(), mask(2, 2, &[1, 1, 1, 1]));
    }

    #[test]
    fn staple_weights_stay_in_unit_interval() {
        let mut rng = rng_from(67, "staple-range");
        let anns: Vec<Mask> = (0..4).map(|_| random_mask(&mut rng, 16, 16)).collect();
        let est = staple(&anns, &StapleOptions::default());
        assert!(est.consensus.iter().all(|w| (0.0..=1.0).contains(w)));
        for j in 0..4 {
            assert!(est.sensitivity[j] > 0.0 && est.sensitivity[j] <= 1.0);
            assert!(est.specificity[j] > 0.0 && est.specificity[j] <= 1.0);
        }
    }
}
