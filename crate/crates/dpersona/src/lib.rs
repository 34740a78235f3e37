//! Two-stage multi-rater segmentation at desk scale.
//!
//! Stage I trains a latent-variable segmentation model whose prior/posterior
//! diagonal Gaussians share a common latent space, with a bound loss that
//! supervises the intersection/union of K prior-sampled predictions against
//! the annotation intersection/union. Sampling that space yields diversified
//! segmentations. Stage II freezes the Stage-I components and trains one
//! lightweight projection head per rater; each head pools an expert prompt
//! from backbone features and maps it into the frozen prior via
//! cross-attention over a bank of prior samples, yielding personalized
//! segmentations.
//!
//! Everything runs on a procedurally generated multi-rater benchmark
//! ([`synthgen`]) with conservative-to-aggressive simulated rater styles,
//! and is evaluated with set-to-set metrics ([`metrics`]) plus the classic
//! label-fusion baselines ([`fusion`]).
//!
//! All computation is `f64`, single-threaded, and deterministic given the
//! configured seeds.

pub mod autodiff;
pub mod config;
pub mod evalpipe;
pub mod fusion;
pub mod io;
pub mod latentmath;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod runlog;
pub mod seeding;
pub mod stage1;
pub mod stage2;
pub mod synthgen;

