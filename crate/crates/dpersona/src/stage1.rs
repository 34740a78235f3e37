//! Stage-I training: diversified segmentation in a shared latent space.
//!
//! Each step encodes prior and posterior Gaussians, aligns them with a KL
//! term, decodes one posterior sample against a uniformly drawn annotation,
//! and decodes K prior samples whose pixelwise min/max are pulled toward
//! the annotation-set intersection/union. Setting `weights.beta = 0`
//! degenerates to the plain probabilistic-U-Net objective on the same code
//! path. `SingleLabel` mode trains a deterministic segmenter (latent fixed
//! at the prior mean, no KL, no bound) on one annotation per sample: with
//! R = 1 that is the fused-label baseline, with R > 1 the annotation is
//! redrawn uniformly every epoch (the random-selection baseline).

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::io::checkpoint::{write_checkpoint, CheckpointInfo};
use crate::io::dataset::SplitData;
use crate::io::FormatError;
use crate::latentmath::{
    kl_divergence, kl_on_tape, sample_on_tape, sample_reparameterized, KlDirection,
    DEFAULT_SIGMA_FLOOR,
};
use crate::losses::{
    bound_predictions, bound_targets, dice_loss, loss_bound, loss_stage1, LossWeights, DICE_EPS,
};
use crate::metrics::{binarize, ged, HARD_THRESHOLD};
use crate::model::{posterior_input, param::AdamConfig, GradAccum, ModelBundle};
use crate::runlog;
use crate::seeding::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Mode {
    /// Full multi-rater objective over R annotations.
    #[default]
    MultiRater,
    /// Deterministic segmentation against one annotation per sample
    /// (uniformly redrawn each epoch when R > 1): latent pinned to the
    /// prior mean, Dice loss only.
    SingleLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub learning_rate: f64,
    pub k: usize,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
    pub kl_direction: KlDirection,
    pub mode: Stage1Mode,
    /// Latent dimension of the shared space.
    pub d: usize,
    /// Backbone channel width.
    pub channels: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            k: 10,
            weights: LossWeights::default(),
            batch_size: 16,
            seed: 0,
            kl_direction: KlDirection::default(),
            mode: Stage1Mode::MultiRater,
            d: 6,
            channels: crate::model::DEFAULT_CHANNELS,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(TrainError::Config("k must be >= 2".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.d < 1 || self.channels < 2 {
            return Err(TrainError::Config("model sizes too small".into()));
        }
        self.weights.validate();
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: kl={l_kl:?} seg={l_seg} bound={l_bound:?}"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        l_kl: Option<f64>,
        l_seg: f64,
        l_bound: Option<f64>,
    },
    #[error("bad config: {0}")]
    Config(String),
    #[error("bad dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Per-epoch means of the loss components plus the validation score.
/// Components that a mode or weight setting turns off are logged as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_total: f64,
    pub l_kl: Option<f64>,
    pub l_seg: f64,
    pub l_bound: Option<f64>,
    pub val_ged: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    /// Bundle with the best validation GED.
    pub bundle: ModelBundle,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_ged: f64,
}

fn standard_normal(rng: &mut ChaCha12Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

struct StepLosses {
    total: f64,
    kl: Option<f64>,
    seg: f64,
    bound: Option<f64>,
}

fn finite(v: f64) -> bool {
    v.is_finite()
}

pub fn train_stage1(
    train: &SplitData,
    val: &SplitData,
    cfg: &Stage1Config,
) -> Result<Stage1Output, TrainError> {
    cfg.validate()?;
    train
        .validate()
        .map_err(|e| TrainError::Dataset(e.to_string()))?;
    val.validate().map_err(|e| TrainError::Dataset(e.to_string()))?;
    match cfg.mode {
        Stage1Mode::MultiRater => {
            if train.r() < 2 {
                return Err(TrainError::Dataset(
                    "multi-rater training needs R >= 2".into(),
                ));
            }
        }
        Stage1Mode::SingleLabel => {}
    }
    if train.h() != val.h() || train.w() != val.w() {
        return Err(TrainError::Dataset("train/val geometry mismatch".into()));
    }
    // Validation scores samples against whatever annotation set the val
    // split carries, so fused-label training (R = 1) may still select on a
    // multi-rater val split. The posterior path does need matching R.
    if cfg.mode == Stage1Mode::MultiRater && train.r() != val.r() {
        return Err(TrainError::Dataset("train/val rater count mismatch".into()));
    }

    let mut init_rng = rng_from(cfg.seed, "stage1-init");
    let mut bundle = ModelBundle::init(&mut init_rng, cfg.d, train.r(), cfg.channels);
    let adam = AdamConfig::new(cfg.learning_rate, cfg.weights.l2);

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelBundle)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.n()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &format!("shuffle-{epoch}")));

        let mut sum_total = 0.0;
        let mut sum_kl = 0.0;
        let mut sum_seg = 0.0;
        let mut sum_bound = 0.0;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = GradAccum::new();
            for &i in batch {
                let losses = step_sample(&bundle, train, cfg, epoch, i, &mut acc)?;
                if !finite(losses.total) {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: batch_idx,
                        l_kl: losses.kl,
                        l_seg: losses.seg,
                        l_bound: losses.bound,
                    });
                }
                sum_total += losses.total;
                sum_kl += losses.kl.unwrap_or(0.0);
                sum_seg += losses.seg;
                sum_bound += losses.bound.unwrap_or(0.0);
            }
            bundle.apply_grads(&acc.mean(), &adam);
        }

        let n = train.n() as f64;
        let val_ged = validation_ged(&bundle, val, cfg);
        let log = EpochLog {
            epoch,
            l_total: sum_total / n,
            l_kl: matches!(cfg.mode, Stage1Mode::MultiRater).then_some(sum_kl / n),
            l_seg: sum_seg / n,
            l_bound: (matches!(cfg.mode, Stage1Mode::MultiRater) && cfg.weights.beta != 0.0)
                .then_some(sum_bound / n),
            val_ged,
        };
        logs.push(log);
        let improved = best.as_ref().is_none_or(|(_, g, _)| val_ged < *g);
        if improved {
            best = Some((epoch, val_ged, bundle.clone()));
        }
    }

    let (best_epoch, best_val_ged, best_bundle) = best.expect("epochs >= 1");
    Ok(Stage1Output {
        bundle: best_bundle,
        logs,
        best_epoch,
        best_val_ged,
    })
}

fn step_sample(
    bundle: &ModelBundle,
    train: &SplitData,
    cfg: &Stage1Config,
    epoch: usize,
    i: usize,
    acc: &mut GradAccum,
) -> Result<StepLosses, TrainError> {
    let image = train.image(i);
    let anns = train.rater_masks(i);
    let (h, w) = image.dim();
    let mut srng = rng_from(cfg.seed, &format!("e{epoch}-s{i}"));

    let mut tape = Tape::new();
    let bv = bundle.bind(&mut tape);
    let x = tape.constant(
        image
            .clone()
            .into_shape_with_order((1, h, w))
            .unwrap()
            .into_dyn(),
    );
    let features = bundle.backbone.forward(&mut tape, &bv.backbone, x);
    let prior_g = bundle.prior.forward(&mut tape, &bv.prior, x);

    match cfg.mode {
        Stage1Mode::MultiRater => {
            let post_x = tape.constant(posterior_input(&image, &anns).into_dyn());
            let post_g = bundle.posterior.forward(&mut tape, &bv.posterior, post_x);
            let kl_var = kl_on_tape(
                &mut tape,
                &prior_g,
                &post_g,
                cfg.kl_direction,
                DEFAULT_SIGMA_FLOOR,
            );
            // Closed-form value as a second route; the tape composition must
            // agree with it to rounding. Detaching asserts finiteness, so
            // skip it when the parameters have already blown up and let the
            // caller's non-finite check report the abort instead.
            let params_finite = [prior_g.mean, prior_g.log_sigma, post_g.mean, post_g.log_sigma]
                .iter()
                .all(|&v| tape.value(v).iter().all(|x| x.is_finite()));
            let kl_value = if params_finite {
                let v = kl_divergence(
                    &prior_g.detach(&tape),
                    &post_g.detach(&tape),
                    cfg.kl_direction,
                    DEFAULT_SIGMA_FLOOR,
                );
                debug_assert!(
                    (v - tape.scalar(kl_var)).abs() <= 1e-9 * v.abs().max(1.0),
                    "KL routes disagree: {v} vs {}",
                    tape.scalar(kl_var)
                );
                v
            } else {
                f64::NAN
            };

            let eps = standard_normal(&mut srng, bundle.d);
            let z = sample_on_tape(&mut tape, &post_g, &eps);
            let z_map = tape.broadcast_hw(z, h, w);
            let logits = bundle.head.forward(&mut tape, &bv.head, z_map, features);
            let pred = tape.sigmoid(logits);
            let j = srng.random_range(0..anns.len());
            let seg = dice_loss(&mut tape, pred, &anns[j], DICE_EPS);

            if cfg.weights.beta != 0.0 {
                let preds: Vec<_> = (0..cfg.k)
                    .map(|_| {
                        let eps = standard_normal(&mut srng, bundle.d);
                        let zk = sample_on_tape(&mut tape, &prior_g, &eps);
                        let zk_map = tape.broadcast_hw(zk, h, w);
                        let lk = bundle.head.forward(&mut tape, &bv.head, zk_map, features);
                        tape.sigmoid(lk)
                    })
                    .collect();
                let (soft_inter, soft_union) = bound_predictions(&mut tape, &preds);
                let targets = bound_targets(&anns);
                let bound = loss_bound(&mut tape, soft_inter, soft_union, &targets);
                let total = loss_stage1(&mut tape, kl_var, seg, bound, &cfg.weights);
                let grads = tape.backward(total);
                acc.add(&bv.order, &grads);
                Ok(StepLosses {
                    total: tape.scalar(total),
                    kl: Some(kl_value),
                    seg: tape.scalar(seg),
                    bound: Some(tape.scalar(bound)),
                })
            } else {
                let seg_scaled = tape.mul_scalar(seg, cfg.weights.alpha);
                let total = tape.add(kl_var, seg_scaled);
                let grads = tape.backward(total);
                acc.add(&bv.order, &grads);
                Ok(StepLosses {
                    total: tape.scalar(total),
                    kl: Some(kl_value),
                    seg: tape.scalar(seg),
                    bound: None,
                })
            }
        }
        Stage1Mode::SingleLabel => {
            let j = srng.random_range(0..anns.len());
            let z_map = tape.broadcast_hw(prior_g.mean, h, w);
            let logits = bundle.head.forward(&mut tape, &bv.head, z_map, features);
            let pred = tape.sigmoid(logits);
            let seg = dice_loss(&mut tape, pred, &anns[j], DICE_EPS);
            let grads = tape.backward(seg);
            acc.add(&bv.order, &grads);
            Ok(StepLosses {
                total: tape.scalar(seg),
                kl: None,
                seg: tape.scalar(seg),
                bound: None,
            })
        }
    }
}

/// Validation GED with K prior samples per case, binarized at 0.5. The
/// sampling seeds depend only on the case index, so scores across epochs
/// compare parameters rather than draws.
fn validation_ged(bundle: &ModelBundle, val: &SplitData, cfg: &Stage1Config) -> f64 {
    let mut sum = 0.0;
    for i in 0..val.n() {
        let image = val.image(i);
        let anns = val.rater_masks(i);
        let mut vrng = rng_from(cfg.seed, &format!("val-s{i}"));
        let maps = infer_diverse(bundle, &image, cfg.k, &mut vrng);
        let preds: Vec<_> = maps.iter().map(|m| binarize(m, HARD_THRESHOLD)).collect();
        sum += ged(&preds, &anns);
    }
    sum / val.n() as f64
}

/// Draws `n_samples` latents from the image's prior and decodes each one.
/// Annotations are never consumed; the posterior net is untouched.
pub fn infer_diverse(
    bundle: &ModelBundle,
    image: &Array2<f64>,
    n_samples: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Array2<f64>> {
    assert!(n_samples >= 1, "need at least one sample");
    let g = bundle.encode_prior(image);
    let (h, w) = image.dim();

    // One backbone pass shared by every latent sample.
    let mut tape = Tape::new();
    let mut scratch = Vec::new();
    let bb = bundle.backbone.bind(&mut tape, false, "backbone", &mut scratch);
    let hv = bundle.head.bind(&mut tape, false, "head", &mut scratch);
    let x = tape.constant(
        image
            .clone()
            .into_shape_with_order((1, h, w))
            .unwrap()
            .into_dyn(),
    );
    let features = bundle.backbone.forward(&mut tape, &bb, x);

    (0..n_samples)
        .map(|_| {
            let z = sample_reparameterized(&g, rng);
            let zc = tape.constant(z.into_dyn());
            let z_map = tape.broadcast_hw(zc, h, w);
            let logits = bundle.head.forward(&mut tape, &hv, z_map, features);
            let probs = tape.sigmoid(logits);
            tape.value(probs)
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .index_axis(ndarray::Axis(0), 0)
                .to_owned()
        })
        .collect()
}

/// Deterministic single map decoded from the prior mean; the prediction a
/// single-label model was trained to make.
pub fn predict_mean(bundle: &ModelBundle, image: &Array2<f64>) -> Array2<f64> {
    let g = bundle.encode_prior(image);
    bundle.forward_diverse(image, g.mean())
}

/// Writes the checkpoint and the per-epoch JSONL log under `dir`.
pub fn save_outputs(
    out: &Stage1Output,
    info: &CheckpointInfo,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), TrainError> {
    std::fs::create_dir_all(dir).map_err(FormatError::from)?;
    let ckpt = dir.join("stage1.dpck");
    write_checkpoint(&ckpt, &out.bundle, info)?;
    let log = dir.join("stage1_log.jsonl");
    runlog::write_jsonl(&log, &out.logs).map_err(FormatError::from)?;
    Ok((ckpt, log))
}
