//! Diagonal-Gaussian algebra for the shared latent space: KL divergence,
//! reparameterized sampling, spatial broadcasting, and prior-bank sampling.
//!
//! Every operation exists in two forms. The value form works on plain arrays
//! and backs the evaluation pipeline and test oracles. The tape form composes
//! [`Tape`] ops so the losses can differentiate through it.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::seeding;

/// Lower bound applied to sigma inside KL computations unless overridden.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

/// Which argument order KL is evaluated in.
///
/// Callers always pass `(prior, posterior)`; the direction selects which one
/// sits on the left of the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(prior || posterior).
    PriorToPost,
    /// KL(posterior || prior). The Probabilistic U-Net convention.
    #[default]
    PostToPrior,
}

/// A latent draw of length D.
pub type LatentCode = Array1<f64>;

/// Diagonal Gaussian over R^D. Sigma is stored as log sigma so optimizers
/// can treat it as unconstrained; `log_sigma = -inf` encodes sigma = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Array1<f64>,
    log_sigma: Array1<f64>,
}

impl DiagonalGaussian {
    /// Builds from mean and sigma (> 0, or 0 for a point mass).
    pub fn new(mean: Array1<f64>, sigma: &Array1<f64>) -> Self {
        assert_eq!(mean.len(), sigma.len(), "mean/sigma length mismatch");
        assert!(
            sigma.iter().all(|&s| s >= 0.0 && s.is_finite()),
            "sigma must be finite and nonnegative"
        );
        Self {
            mean,
            log_sigma: sigma.mapv(f64::ln),
        }
    }

    /// Builds directly from the internal parameterization.
    pub fn from_log_sigma(mean: Array1<f64>, log_sigma: Array1<f64>) -> Self {
        assert_eq!(mean.len(), log_sigma.len(), "mean/log_sigma length mismatch");
        assert!(mean.iter().all(|v| v.is_finite()), "mean must be finite");
        assert!(
            log_sigma.iter().all(|v| !v.is_nan() && *v < f64::INFINITY),
            "log_sigma must not be NaN or +inf"
        );
        Self { mean, log_sigma }
    }

    /// Standard normal in D dimensions.
    pub fn standard(d: usize) -> Self {
        Self {
            mean: Array1::zeros(d),
            log_sigma: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn log_sigma(&self) -> &Array1<f64> {
        &self.log_sigma
    }

    pub fn sigma(&self) -> Array1<f64> {
        self.log_sigma.mapv(f64::exp)
    }

    /// Log density at `z`. Infinite if any sigma is zero off the mean.
    pub fn log_pdf(&self, z: &Array1<f64>) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.dim() {
            let ls = self.log_sigma[d];
            let u = (z[d] - self.mean[d]) * (-ls).exp();
            acc += -ls - 0.5 * u * u - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        acc
    }
}

/// Closed-form KL between diagonal Gaussians with sigma floored at
/// `sigma_floor` (pass 0.0 to disable the floor).
pub fn kl_divergence(
    prior: &DiagonalGaussian,
    post: &DiagonalGaussian,
    direction: KlDirection,
    sigma_floor: f64,
) -> f64 {
    assert_eq!(prior.dim(), post.dim(), "KL dimension mismatch");
    let (p, q) = match direction {
        KlDirection::PriorToPost => (prior, post),
        KlDirection::PostToPrior => (post, prior),
    };
    let floor_log = sigma_floor.ln();
    let mut acc = 0.0;
    for d in 0..p.dim() {
        let a = p.log_sigma[d].max(floor_log);
        let b = q.log_sigma[d].max(floor_log);
        let diff = p.mean[d] - q.mean[d];
        // exp(2(a-b)) rather than exp(2a)*exp(-2b): exact when a == b.
        acc += b - a + 0.5 * ((2.0 * (a - b)).exp() + diff * diff * (-2.0 * b).exp()) - 0.5;
    }
    // Roundoff can leave a tiny negative residue; KL is nonnegative.
    acc.max(0.0)
}

/// z = mu + sigma * eps with eps ~ N(0, I).
pub fn sample_reparameterized(g: &DiagonalGaussian, rng: &mut ChaCha12Rng) -> LatentCode {
    let eps: Array1<f64> = Array1::from_shape_fn(g.dim(), |_| rng.sample(StandardNormal));
    &g.mean + &(g.sigma() * &eps)
}

/// Tiles `z` over an H x W grid: `out[d,h,w] = z[d]`.
pub fn broadcast_latent(z: &LatentCode, h: usize, w: usize) -> Array3<f64> {
    assert!(h >= 1 && w >= 1);
    Array3::from_shape_fn((z.len(), h, w), |(d, _, _)| z[d])
}

/// M latent codes drawn from one Gaussian, stacked as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBank {
    /// D x M matrix; column j is the j-th draw.
    pub columns: Array2<f64>,
    /// Seed the bank was drawn with, for reproducibility records.
    pub source_seed: u64,
}

impl PriorBank {
    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn column(&self, j: usize) -> LatentCode {
        self.columns.column(j).to_owned()
    }
}

/// Draws M reparameterized samples using an rng derived from `seed`, so the
/// bank is reconstructible from the recorded seed alone.
pub fn sample_prior_bank(g: &DiagonalGaussian, m: usize, seed: u64) -> PriorBank {
    assert!(m >= 1, "bank needs at least one column");
    let mut rng = seeding::rng_from(seed, "prior-bank");
    let mut columns = Array2::zeros((g.dim(), m));
    for j in 0..m {
        let z = sample_reparameterized(g, &mut rng);
        columns.column_mut(j).assign(&z);
    }
    PriorBank {
        columns,
        source_seed: seed,
    }
}

/// A Gaussian whose parameters live on a tape (both are length-D vectors;
/// `log_sigma` follows the same convention as [`DiagonalGaussian`]).
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_sigma: Var,
}

impl GaussianVars {
    /// Snapshot of the current values as a plain distribution.
    pub fn detach(&self, tape: &Tape) -> DiagonalGaussian {
        let mean = tape
            .value(self.mean)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("mean must be a vector")
            .to_owned();
        let log_sigma = tape
            .value(self.log_sigma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("log_sigma must be a vector")
            .to_owned();
        DiagonalGaussian::from_log_sigma(mean, log_sigma)
    }
}

/// Tape-composed closed-form KL; gradients flow to both distributions.
pub fn kl_on_tape(
    tape: &mut Tape,
    prior: &GaussianVars,
    post: &GaussianVars,
    direction: KlDirection,
    sigma_floor: f64,
) -> Var {
    let (p, q) = match direction {
        KlDirection::PriorToPost => (prior, post),
        KlDirection::PostToPrior => (post, prior),
    };
    let d = tape.value(p.mean).len();
    let floor = tape.constant(ArrayD::from_elem(IxDyn(&[d]), sigma_floor.ln()));
    let a = tape.max2(p.log_sigma, floor);
    let b = tape.max2(q.log_sigma, floor);
    let diff = tape.sub(p.mean, q.mean);
    let diff2 = tape.mul(diff, diff);
    let logs = tape.sub(a, b);
    let two_logs = tape.mul_scalar(logs, 2.0);
    let var_ratio = tape.exp(two_logs);
    let neg_two_b = tape.mul_scalar(b, -2.0);
    let inv_var_q = tape.exp(neg_two_b);
    let mahal = tape.mul(diff2, inv_var_q);
    let inner = tape.add(var_ratio, mahal);
    let half_inner = tape.mul_scalar(inner, 0.5);
    let neg_logs = tape.mul_scalar(logs, -1.0);
    let per_dim = tape.add(neg_logs, half_inner);
    let shifted = tape.add_scalar(per_dim, -0.5);
    tape.sum(shifted)
}

/// Tape-composed reparameterized draw: z = mu + exp(log_sigma) * eps.
pub fn sample_on_tape(tape: &mut Tape, g: &GaussianVars, eps: &Array1<f64>) -> Var {
    let e = tape.constant(eps.clone().into_dyn());
    let sigma = tape.exp(g.log_sigma);
    let scaled = tape.mul(sigma, e);
    tape.add(g.mean, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_diff, max_rel_err};
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian(rng: &mut ChaCha12Rng, d: usize) -> DiagonalGaussian {
        let mean = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let log_sigma =
            Array1::from_shape_fn(d, |_| 0.5 * rng.sample::<f64, _>(StandardNormal));
        DiagonalGaussian::from_log_sigma(mean, log_sigma)
    }

    /// Monte-Carlo KL(p || q) = E_{z~p}[log p(z) - log q(z)].
    fn kl_monte_carlo(
        p: &DiagonalGaussian,
        q: &DiagonalGaussian,
        n: usize,
        rng: &mut ChaCha12Rng,
    ) -> f64 {
        let mut acc = 0.0;
        for _ in 0..n {
            let z = sample_reparameterized(p, rng);
            acc += p.log_pdf(&z) - q.log_pdf(&z);
        }
        acc / n as f64
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut rng = seeding::rng_from(11, "kl-ident");
        let g = gaussian(&mut rng, 6);
        for dir in [KlDirection::PriorToPost, KlDirection::PostToPrior] {
            assert_eq!(kl_divergence(&g, &g, dir, 0.0), 0.0);
        }
    }

    #[test]
    fn kl_standard_vs_shifted_is_half() {
        let p = DiagonalGaussian::standard(1);
        let q = DiagonalGaussian::new(Array1::from_elem(1, 1.0), &Array1::from_elem(1, 1.0));
        let kl = kl_divergence(&p, &q, KlDirection::PriorToPost, 0.0);
        assert!((kl - 0.5).abs() < 1e-12, "{kl}");
    }

    #[test]
    fn kl_matches_monte_carlo_in_six_dims() {
        let mut rng = seeding::rng_from(12, "kl-mc");
        let p = gaussian(&mut rng, 6);
        let q = gaussian(&mut rng, 6);
        for dir in [KlDirection::PriorToPost, KlDirection::PostToPrior] {
            let exact = kl_divergence(&p, &q, dir, 0.0);
            let mc = match dir {
                KlDirection::PriorToPost => kl_monte_carlo(&p, &q, 1_000_000, &mut rng),
                KlDirection::PostToPrior => kl_monte_carlo(&q, &p, 1_000_000, &mut rng),
            };
            let rel = (exact - mc).abs() / exact.abs().max(1e-9);
            assert!(rel < 1e-2, "dir {dir:?}: exact {exact} vs mc {mc}");
        }
    }

    #[test]
    fn kl_directions_differ_for_asymmetric_pairs() {
        let p = DiagonalGaussian::standard(2);
        let q = DiagonalGaussian::new(
            Array1::from_vec(vec![1.0, -0.5]),
            &Array1::from_vec(vec![2.0, 0.7]),
        );
        let fwd = kl_divergence(&p, &q, KlDirection::PriorToPost, 0.0);
        let bwd = kl_divergence(&p, &q, KlDirection::PostToPrior, 0.0);
        assert!((fwd - bwd).abs() > 1e-3);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = seeding::rng_from(13, "kl-grad");
        let d = 6;
        let inputs: Vec<ArrayD<f64>> = (0..4)
            .map(|i| {
                let scale = if i % 2 == 0 { 1.0 } else { 0.4 };
                ArrayD::from_shape_fn(IxDyn(&[d]), |_| {
                    scale * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        for dir in [KlDirection::PriorToPost, KlDirection::PostToPrior] {
            let build = |ins: &[ArrayD<f64>]| {
                let mut tape = Tape::new();
                let p = GaussianVars {
                    mean: tape.leaf(ins[0].clone()),
                    log_sigma: tape.leaf(ins[1].clone()),
                };
                let q = GaussianVars {
                    mean: tape.leaf(ins[2].clone()),
                    log_sigma: tape.leaf(ins[3].clone()),
                };
                let kl = kl_on_tape(&mut tape, &p, &q, dir, DEFAULT_SIGMA_FLOOR);
                (tape, kl, [p.mean, p.log_sigma, q.mean, q.log_sigma])
            };
            let (tape, root, vars) = build(&inputs);
            let grads = tape.backward(root);
            let numeric = central_diff(&inputs, 1e-6, |ins| {
                let (tape, root, _) = build(ins);
                tape.scalar(root)
            });
            for (var, num) in vars.iter().zip(numeric.iter()) {
                let err = max_rel_err(grads.expect(*var), num, 1e-6);
                assert!(err < 1e-5, "dir {dir:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn tape_kl_agrees_with_value_kl() {
        let mut rng = seeding::rng_from(14, "kl-agree");
        let p = gaussian(&mut rng, 6);
        let q = gaussian(&mut rng, 6);
        for dir in [KlDirection::PriorToPost, KlDirection::PostToPrior] {
            let mut tape = Tape::new();
            let pv = GaussianVars {
                mean: tape.constant(p.mean().clone().into_dyn()),
                log_sigma: tape.constant(p.log_sigma().clone().into_dyn()),
            };
            let qv = GaussianVars {
                mean: tape.constant(q.mean().clone().into_dyn()),
                log_sigma: tape.constant(q.log_sigma().clone().into_dyn()),
            };
            let kl = kl_on_tape(&mut tape, &pv, &qv, dir, DEFAULT_SIGMA_FLOOR);
            let value = kl_divergence(&p, &q, dir, DEFAULT_SIGMA_FLOOR);
            assert!((tape.scalar(kl) - value).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_sample_returns_the_mean() {
        let g = DiagonalGaussian::new(
            Array1::from_vec(vec![1.5, -2.0, 0.25]),
            &Array1::zeros(3),
        );
        let mut rng = seeding::rng_from(15, "zero-sigma");
        let z = sample_reparameterized(&g, &mut rng);
        assert_eq!(z, *g.mean());
    }

    #[test]
    fn sample_mean_obeys_law_of_large_numbers() {
        let mut rng = seeding::rng_from(16, "lln");
        let g = gaussian(&mut rng, 4);
        let n = 100_000;
        let mut acc = Array1::<f64>::zeros(4);
        for _ in 0..n {
            acc += &sample_reparameterized(&g, &mut rng);
        }
        acc /= n as f64;
        let tol = g.sigma() * (3.0 / (n as f64).sqrt());
        for d in 0..4 {
            assert!(
                (acc[d] - g.mean()[d]).abs() <= tol[d],
                "coordinate {d}: {} vs {} (tol {})",
                acc[d],
                g.mean()[d],
                tol[d]
            );
        }
    }

    #[test]
    fn sample_gradients_are_one_and_eps() {
        let mut rng = seeding::rng_from(17, "sample-grad");
        let g = gaussian(&mut rng, 5);
        let eps = Array1::from_shape_fn(5, |_| rng.sample::<f64, _>(StandardNormal));
        let inputs = vec![
            g.mean().clone().into_dyn(),
            g.log_sigma().clone().into_dyn(),
        ];
        let build = |ins: &[ArrayD<f64>], eps: &Array1<f64>| {
            let mut tape = Tape::new();
            let gv = GaussianVars {
                mean: tape.leaf(ins[0].clone()),
                log_sigma: tape.leaf(ins[1].clone()),
            };
            let z = sample_on_tape(&mut tape, &gv, eps);
            let s = tape.sum(z);
            (tape, s, gv)
        };
        let (tape, root, gv) = build(&inputs, &eps);
        let grads = tape.backward(root);
        // dz/dmu = 1 exactly.
        for v in grads.expect(gv.mean) {
            assert_eq!(*v, 1.0);
        }
        // dz/dsigma = eps; the tape differentiates w.r.t. log sigma, so
        // divide out sigma before comparing.
        let glog = grads
            .expect(gv.log_sigma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let dsigma = &glog / &g.sigma();
        for d in 0..5 {
            assert!((dsigma[d] - eps[d]).abs() < 1e-12);
        }
        // And both match central differences.
        let numeric = central_diff(&inputs, 1e-6, |ins| {
            let (tape, root, _) = build(ins, &eps);
            tape.scalar(root)
        });
        for (var, num) in [gv.mean, gv.log_sigma].iter().zip(numeric.iter()) {
            let analytic = grads.expect(*var);
            for (a, n) in analytic.iter().zip(num.iter()) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn broadcast_tiles_planes() {
        let z = Array1::from_vec(vec![1.0, 2.0]);
        let out = broadcast_latent(&z, 2, 2);
        assert_eq!(out.shape(), &[2, 2, 2]);
        for h in 0..2 {
            for w in 0..2 {
                assert_eq!(out[[0, h, w]], 1.0);
                assert_eq!(out[[1, h, w]], 2.0);
            }
        }
        let one = broadcast_latent(&z, 1, 1);
        assert_eq!(one.shape(), &[2, 1, 1]);
        assert_eq!(one[[0, 0, 0]], 1.0);
        assert_eq!(one[[1, 0, 0]], 2.0);
    }

    #[test]
    fn broadcast_gradient_is_area() {
        let z0 = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.7, 1.2]).unwrap();
        let build = |ins: &[ArrayD<f64>]| {
            let mut tape = Tape::new();
            let z = tape.leaf(ins[0].clone());
            let b = tape.broadcast_hw(z, 4, 5);
            let s = tape.sum(b);
            (tape, s, z)
        };
        let (tape, root, z) = build(std::slice::from_ref(&z0));
        let grads = tape.backward(root);
        for v in grads.expect(z) {
            assert_eq!(*v, 20.0);
        }
        let numeric = central_diff(std::slice::from_ref(&z0), 1e-6, |ins| {
            let (tape, root, _) = build(ins);
            tape.scalar(root)
        });
        let err = max_rel_err(grads.expect(z), &numeric[0], 1e-6);
        assert!(err < 1e-8);
    }

    #[test]
    fn bank_of_one_equals_single_draw() {
        let g = DiagonalGaussian::standard(3);
        let bank = sample_prior_bank(&g, 1, 99);
        let mut rng = seeding::rng_from(99, "prior-bank");
        let z = sample_reparameterized(&g, &mut rng);
        assert_eq!(bank.column(0), z);
        assert_eq!(bank.source_seed, 99);
    }

    #[test]
    fn bank_is_deterministic_in_the_seed() {
        let g = DiagonalGaussian::standard(4);
        let a = sample_prior_bank(&g, 16, 7);
        let b = sample_prior_bank(&g, 16, 7);
        let c = sample_prior_bank(&g, 16, 8);
        assert_eq!(a.columns, b.columns);
        assert_ne!(a.columns, c.columns);
    }

    #[test]
    fn standard_bank_covariance_is_near_identity() {
        let d = 4;
        let m = 10_000;
        let g = DiagonalGaussian::standard(d);
        let bank = sample_prior_bank(&g, m, 21);
        let mean = bank.columns.mean_axis(ndarray::Axis(1)).unwrap();
        for i in 0..d {
            for j in 0..d {
                let mut cov = 0.0;
                for k in 0..m {
                    cov += (bank.columns[[i, k]] - mean[i]) * (bank.columns[[j, k]] - mean[j]);
                }
                cov /= (m - 1) as f64;
                let target = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov - target).abs() < 0.05,
                    "cov[{i},{j}] = {cov}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_only_at_equality(
            mu_p in proptest::collection::vec(-3.0f64..3.0, 3),
            ls_p in proptest::collection::vec(-1.5f64..1.5, 3),
            mu_q in proptest::collection::vec(-3.0f64..3.0, 3),
            ls_q in proptest::collection::vec(-1.5f64..1.5, 3),
            dir in prop_oneof![Just(KlDirection::PriorToPost), Just(KlDirection::PostToPrior)],
        ) {
            let p = DiagonalGaussian::from_log_sigma(
                Array1::from_vec(mu_p.clone()), Array1::from_vec(ls_p.clone()));
            let q = DiagonalGaussian::from_log_sigma(
                Array1::from_vec(mu_q.clone()), Array1::from_vec(ls_q.clone()));
            let kl = kl_divergence(&p, &q, dir, 0.0);
            prop_assert!(kl >= 0.0);
            let equal = mu_p.iter().zip(&mu_q).all(|(a, b)| (a - b).abs() < 1e-12)
                && ls_p.iter().zip(&ls_q).all(|(a, b)| (a - b).abs() < 1e-12);
            if equal {
                prop_assert!(kl.abs() < 1e-10);
            } else {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
