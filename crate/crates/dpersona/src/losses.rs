//! Training objectives, composed on an autodiff tape.
//!
//! Stage I optimizes `kl + alpha * seg_random + beta * bound`, where the
//! bound term supervises the soft intersection / union of K latent samples
//! against the Boolean intersection / union of the annotations. Stage II
//! sums one Dice loss per expert. L2 regularization is applied by the
//! optimizer, not here.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::metrics::Mask;

/// Smoothing constant in both Dice ratios.
pub const DICE_EPS: f64 = 1e-6;

/// Pixelwise Boolean bounds of an annotation set.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTargets {
    pub intersection: Mask,
    pub union: Mask,
}

/// Weights of the Stage-I composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            l2: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) {
        assert!(
            self.alpha >= 0.0 && self.beta >= 0.0 && self.l2 >= 0.0,
            "loss weights must be nonnegative"
        );
    }
}

/// Turns a binary mask into a tape constant shaped like `like`.
fn mask_constant(tape: &mut Tape, target: &Mask, like: Var) -> Var {
    let shape = tape.value(like).shape().to_vec();
    let n: usize = shape.iter().product();
    assert_eq!(n, target.len(), "mask shape mismatch");
    let flat: Vec<f64> = target.iter().map(|&b| b as u8 as f64).collect();
    tape.constant(ArrayD::from_shape_vec(IxDyn(&shape), flat).unwrap())
}

/// Smoothed Dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
///
/// `pred` may carry a leading singleton channel axis; only element order
/// matters. Empty-vs-empty evaluates to 0.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: &Mask, eps: f64) -> Var {
    let t = mask_constant(tape, target, pred);
    let t_sum = target.iter().filter(|&&b| b).count() as f64;
    let prod = tape.mul(pred, t);
    let inter = tape.sum(prod);
    let num = tape.mul_scalar(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let p_sum = tape.sum(pred);
    let den = tape.add_scalar(p_sum, t_sum + eps);
    let frac = tape.div(num, den);
    let neg = tape.mul_scalar(frac, -1.0);
    tape.add_scalar(neg, 1.0)
}

/// Boolean AND / OR over the rater axis.
pub fn bound_targets(annotations: &[Mask]) -> BoundTargets {
    assert!(!annotations.is_empty(), "need at least one annotation");
    let mut intersection = annotations[0].clone();
    let mut union = annotations[0].clone();
    for a in &annotations[1..] {
        assert_eq!(a.dim(), intersection.dim(), "annotation shape mismatch");
        ndarray::Zip::from(&mut intersection).and(a).for_each(|i, &v| *i = *i && v);
        ndarray::Zip::from(&mut union).and(a).for_each(|u, &v| *u = *u || v);
    }
    BoundTargets { intersection, union }
}

/// Soft intersection (pixelwise min) and union (pixelwise max) of K maps.
pub fn bound_predictions(tape: &mut Tape, preds: &[Var]) -> (Var, Var) {
    assert!(preds.len() >= 2, "bound needs at least two sampled maps");
    let mut soft_inter = preds[0];
    let mut soft_union = preds[0];
    for &p in &preds[1..] {
        soft_inter = tape.min2(soft_inter, p);
        soft_union = tape.max2(soft_union, p);
    }
    (soft_inter, soft_union)
}

/// Sum of the two bound Dice losses.
pub fn loss_bound(
    tape: &mut Tape,
    soft_inter: Var,
    soft_union: Var,
    targets: &BoundTargets,
) -> Var {
    let li = dice_loss(tape, soft_inter, &targets.intersection, DICE_EPS);
    let lu = dice_loss(tape, soft_union, &targets.union, DICE_EPS);
    tape.add(li, lu)
}

/// Stage-I composite: `kl + alpha * seg_rand + beta * bound`.
pub fn loss_stage1(tape: &mut Tape, kl: Var, seg_rand: Var, bound: Var, w: &LossWeights) -> Var {
    w.validate();
    let seg = tape.mul_scalar(seg_rand, w.alpha);
    let bnd = tape.mul_scalar(bound, w.beta);
    let partial = tape.add(kl, seg);
    tape.add(partial, bnd)
}

/// Stage-II personalized loss: sum of per-expert Dice losses.
pub fn loss_stage2(tape: &mut Tape, preds: &[Var], annotations: &[Mask]) -> Var {
    assert_eq!(
        preds.len(),
        annotations.len(),
        "one prediction per annotation required"
    );
    assert!(!preds.is_empty());
    let mut total = dice_loss(tape, preds[0], &annotations[0], DICE_EPS);
    for (p, a) in preds.iter().zip(annotations.iter()).skip(1) {
        let l = dice_loss(tape, *p, a, DICE_EPS);
        total = tape.add(total, l);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_diff, max_rel_err};
    use crate::seeding::rng_from;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(rows: usize, cols: usize, bits: &[u8]) -> Mask {
        Array2::from_shape_vec((rows, cols), bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> Mask {
        Array2::from_shape_fn((h, w), |_| rng.random_bool(0.5))
    }

    fn random_probs(rng: &mut impl Rng, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[h, w]), |_| rng.random_range(0.01..0.99))
    }

    fn eval_dice_loss(pred: &ArrayD<f64>, target: &Mask) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let l = dice_loss(&mut tape, p, target, DICE_EPS);
        tape.scalar(l)
    }

    #[test]
    fn dice_loss_on_exact_binary_match_is_zero() {
        let t = mask(2, 2, &[1, 0, 1, 1]);
        let p = t.mapv(|b| b as u8 as f64).into_dyn();
        assert_eq!(eval_dice_loss(&p, &t), 0.0);
    }

    #[test]
    fn dice_loss_on_disjoint_masks_is_near_one() {
        let t = mask(2, 2, &[1, 1, 0, 0]);
        let p = mask(2, 2, &[0, 0, 1, 1]).mapv(|b| b as u8 as f64).into_dyn();
        let l = eval_dice_loss(&p, &t);
        assert!(l > 1.0 - 1e-5 && l <= 1.0);
    }

    #[test]
    fn dice_loss_half_probability_half_coverage() {
        // 1 - (2 * 0.25N + eps) / (0.5N + 0.5N + eps) = 0.5 up to eps.
        let n = 16;
        let t = Array2::from_shape_fn((4, 4), |(i, _)| i < 2);
        assert_eq!(t.iter().filter(|&&b| b).count(), n / 2);
        let p = ArrayD::from_elem(IxDyn(&[4, 4]), 0.5);
        let l = eval_dice_loss(&p, &t);
        assert!((l - 0.5).abs() < 1e-7, "{l}");
    }

    #[test]
    fn dice_loss_accepts_leading_channel_axis() {
        let t = mask(2, 2, &[1, 0, 1, 1]);
        let p = ArrayD::from_elem(IxDyn(&[1, 2, 2]), 0.5);
        let flat = ArrayD::from_elem(IxDyn(&[2, 2]), 0.5);
        assert_eq!(eval_dice_loss(&p, &t), eval_dice_loss(&flat, &t));
    }

    #[test]
    fn bound_targets_are_and_and_or() {
        let a = mask(1, 2, &[1, 0]);
        let b = mask(1, 2, &[1, 1]);
        let bt = bound_targets(&[a.clone(), b]);
        assert_eq!(bt.intersection, mask(1, 2, &[1, 0]));
        assert_eq!(bt.union, mask(1, 2, &[1, 1]));

        let same = bound_targets(&[a.clone(), a.clone(), a.clone()]);
        assert_eq!(same.intersection, a);
        assert_eq!(same.union, a);
    }

    #[test]
    fn bound_targets_nest() {
        let mut rng = rng_from(41, "bt-nest");
        let anns: Vec<Mask> = (0..4).map(|_| random_mask(&mut rng, 5, 5)).collect();
        let bt = bound_targets(&anns);
        for (i, u) in bt.intersection.iter().zip(bt.union.iter()) {
            assert!(!i || *u, "intersection must be inside union");
        }
    }

    #[test]
    fn bound_predictions_min_max_semantics() {
        let mut tape = Tape::new();
        let a = tape.constant(ArrayD::from_elem(IxDyn(&[1]), 0.2));
        let b = tape.constant(ArrayD::from_elem(IxDyn(&[1]), 0.9));
        let (i, u) = bound_predictions(&mut tape, &[a, b]);
        assert_eq!(tape.value(i)[[0]], 0.2);
        assert_eq!(tape.value(u)[[0]], 0.9);

        let same = tape.constant(ArrayD::from_elem(IxDyn(&[1]), 0.4));
        let (i2, u2) = bound_predictions(&mut tape, &[same, same, same]);
        assert_eq!(tape.value(i2)[[0]], 0.4);
        assert_eq!(tape.value(u2)[[0]], 0.4);
    }

    #[test]
    #[should_panic(expected = "at least two")]
    fn bound_predictions_reject_single_map() {
        let mut tape = Tape::new();
        let a = tape.constant(ArrayD::from_elem(IxDyn(&[1]), 0.2));
        bound_predictions(&mut tape, &[a]);
    }

    #[test]
    fn binary_bound_predictions_match_boolean_targets() {
        let mut rng = rng_from(42, "bool-eq");
        for _ in 0..10 {
            let masks: Vec<Mask> = (0..4).map(|_| random_mask(&mut rng, 6, 6)).collect();
            let bt = bound_targets(&masks);
            let mut tape = Tape::new();
            let vars: Vec<Var> = masks
                .iter()
                .map(|m| tape.constant(m.mapv(|b| b as u8 as f64).into_dyn()))
                .collect();
            let (si, su) = bound_predictions(&mut tape, &vars);
            let want_i = bt.intersection.mapv(|b| b as u8 as f64).into_dyn();
            let want_u = bt.union.mapv(|b| b as u8 as f64).into_dyn();
            assert_eq!(*tape.value(si), want_i);
            assert_eq!(*tape.value(su), want_u);
        }
    }

    #[test]
    fn loss_bound_is_compositional_and_detects_swaps() {
        let mut rng = rng_from(43, "bound-loss");
        let anns: Vec<Mask> = (0..3).map(|_| random_mask(&mut rng, 6, 6)).collect();
        let bt = bound_targets(&anns);
        let i_map = random_probs(&mut rng, 6, 6);
        let u_map = random_probs(&mut rng, 6, 6);

        let mut tape = Tape::new();
        let iv = tape.constant(i_map.clone());
        let uv = tape.constant(u_map.clone());
        let lb = loss_bound(&mut tape, iv, uv, &bt);
        let want = {
            let mut t2 = Tape::new();
            let a = t2.constant(i_map);
            let b = t2.constant(u_map);
            let l1 = dice_loss(&mut t2, a, &bt.intersection, DICE_EPS);
            let l2 = dice_loss(&mut t2, b, &bt.union, DICE_EPS);
            t2.scalar(l1) + t2.scalar(l2)
        };
        assert!((tape.scalar(lb) - want).abs() < 1e-15);

        // Perfect prediction of both bounds is (eps-order) zero; predicting
        // them swapped on strictly nested bounds is strictly positive.
        let strict = bt.intersection != bt.union;
        if strict {
            let exact_i = bt.intersection.mapv(|b| b as u8 as f64).into_dyn();
            let exact_u = bt.union.mapv(|b| b as u8 as f64).into_dyn();
            let good = {
                let mut t = Tape::new();
                let a = t.constant(exact_i.clone());
                let b = t.constant(exact_u.clone());
                let l = loss_bound(&mut t, a, b, &bt);
                t.scalar(l)
            };
            let swapped = {
                let mut t = Tape::new();
                let a = t.constant(exact_u);
                let b = t.constant(exact_i);
                let l = loss_bound(&mut t, a, b, &bt);
                t.scalar(l)
            };
            assert!(good < 1e-6);
            assert!(swapped > good + 1e-3);
        }
    }

    #[test]
    fn stage1_composite_arithmetic_and_gradients() {
        let make = |alpha: f64, beta: f64| {
            let mut tape = Tape::new();
            let kl = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 0.2));
            let seg = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 0.4));
            let bnd = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 0.6));
            let w = LossWeights { alpha, beta, l2: 0.0 };
            let l = loss_stage1(&mut tape, kl, seg, bnd, &w);
            (tape, l, [kl, seg, bnd])
        };
        let (tape, l, _) = make(0.0, 0.0);
        assert!((tape.scalar(l) - 0.2).abs() < 1e-15);

        let (tape, l, vars) = make(1.0, 0.5);
        assert!((tape.scalar(l) - 0.9).abs() < 1e-15);
        let grads = tape.backward(l);
        assert_eq!(grads.expect(vars[0])[[]], 1.0);
        assert_eq!(grads.expect(vars[1])[[]], 1.0);
        assert_eq!(grads.expect(vars[2])[[]], 0.5);
    }

    #[test]
    fn stage2_loss_prefers_matched_experts() {
        let mut rng = rng_from(44, "s2-swap");
        let a0 = random_mask(&mut rng, 6, 6);
        let mut a1 = random_mask(&mut rng, 6, 6);
        while a1 == a0 {
            a1 = random_mask(&mut rng, 6, 6);
        }
        let anns = vec![a0.clone(), a1.clone()];
        let p0 = a0.mapv(|b| b as u8 as f64).into_dyn();
        let p1 = a1.mapv(|b| b as u8 as f64).into_dyn();

        let matched = {
            let mut t = Tape::new();
            let v0 = t.constant(p0.clone());
            let v1 = t.constant(p1.clone());
            let l = loss_stage2(&mut t, &[v0, v1], &anns);
            t.scalar(l)
        };
        let swapped = {
            let mut t = Tape::new();
            let v0 = t.constant(p1);
            let v1 = t.constant(p0);
            let l = loss_stage2(&mut t, &[v0, v1], &anns);
            t.scalar(l)
        };
        assert!(matched < 1e-6);
        assert!(swapped > matched + 1e-3);
    }

    #[test]
    fn stage2_with_one_rater_is_dice_loss() {
        let mut rng = rng_from(45, "s2-single");
        let ann = random_mask(&mut rng, 4, 4);
        let pred = random_probs(&mut rng, 4, 4);
        let mut t = Tape::new();
        let v = t.constant(pred.clone());
        let l2 = loss_stage2(&mut t, &[v], std::slice::from_ref(&ann));
        assert_eq!(t.scalar(l2), eval_dice_loss(&pred, &ann));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = rng_from(46, "loss-fd");
        let anns: Vec<Mask> = (0..3).map(|_| random_mask(&mut rng, 8, 8)).collect();
        let bt = bound_targets(&anns);
        let inputs: Vec<ArrayD<f64>> = (0..4).map(|_| random_probs(&mut rng, 8, 8)).collect();

        // Composite: stage2 over two maps + bound loss over a 3-sample set,
        // all mixed through the stage1 weighting.
        let build = |ins: &[ArrayD<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|x| tape.leaf(x.clone())).collect();
            let seg = loss_stage2(&mut tape, &vars[..2], &anns[..2]);
            let (si, su) = bound_predictions(&mut tape, &vars[1..4]);
            let bnd = loss_bound(&mut tape, si, su, &bt);
            let kl = tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.0));
            let l = loss_stage1(&mut tape, kl, seg, bnd, &LossWeights::default());
            (tape, l, vars)
        };
        let (tape, root, vars) = build(&inputs);
        let grads = tape.backward(root);
        let numeric = central_diff(&inputs, 1e-6, |ins| {
            let (tape, root, _) = build(ins);
            tape.scalar(root)
        });
        for (i, (var, num)) in vars.iter().zip(numeric.iter()).enumerate() {
            let err = max_rel_err(grads.expect(*var), num, 1e-4);
            assert!(err < 1e-4, "input {i}: rel err {err}");
        }
    }

    proptest! {
        #[test]
        fn dice_loss_stays_in_unit_interval(
            seed in 0u64..500,
            h in 2usize..6,
            w in 2usize..6,
        ) {
            let mut rng = rng_from(seed, "dice-range");
            let t = random_mask(&mut rng, h, w);
            let p = ArrayD::from_shape_fn(IxDyn(&[h, w]), |_| rng.random_range(0.0..=1.0));
            let l = eval_dice_loss(&p, &t);
            prop_assert!((0.0..=1.0).contains(&l), "{l}");

            let mut tape = Tape::new();
            let pv = tape.leaf(p);
            let lv = dice_loss(&mut tape, pv, &t, DICE_EPS);
            let grads = tape.backward(lv);
            prop_assert!(grads.expect(pv).iter().all(|g| g.is_finite()));
        }
    }
}
