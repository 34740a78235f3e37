//! Stage-II personalization: each rater's projection head pools an expert
//! prompt from frozen backbone features, cross-attention projects the
//! prompt onto a bank of prior samples, and the frozen head decodes the
//! resulting latent. Only the projection heads train; everything else is
//! frozen and checksum-verified every epoch.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::io::checkpoint::{write_checkpoint, CheckpointInfo};
use crate::io::dataset::SplitData;
use crate::io::FormatError;
use crate::latentmath::{sample_prior_bank, DiagonalGaussian, LatentCode, PriorBank};
use crate::losses::loss_stage2;
use crate::metrics::{binarize, dice, HARD_THRESHOLD};
use crate::model::{param::AdamConfig, GradAccum, ModelBundle, ProjectionHead};
use crate::runlog;
use crate::seeding::{derive_seed, rng_from};
use crate::stage1::TrainError;

/// When the prior bank for an image is redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BankPolicy {
    /// Fresh bank every forward pass (training default).
    #[default]
    ResamplePerForward,
    /// One bank per image, fixed by the seed (evaluation default).
    FixedPerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Prior-bank size M.
    pub m: usize,
    pub seed: u64,
    pub bank_policy: BankPolicy,
    /// Optional 1/sqrt(D) attention scaling; off reproduces the plain
    /// dot-product form.
    pub scaled_attention: bool,
    pub batch_size: usize,
    pub l2: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-4,
            m: 100,
            seed: 0,
            bank_policy: BankPolicy::default(),
            scaled_attention: false,
            batch_size: 16,
            l2: 1e-5,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.m < 1 {
            return Err(TrainError::Config("m must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Spatial mean of the head's output map: the expert prompt z^exp.
pub fn expert_prompt(features: &Array3<f64>, head: &ProjectionHead) -> LatentCode {
    let mut tape = Tape::new();
    let mut scratch = Vec::new();
    let hv = head.bind(&mut tape, false, "proj", &mut scratch);
    let f = tape.constant(features.clone().into_dyn());
    let map = head.forward(&mut tape, &hv, f);
    let prompt = tape.global_avg_pool(map);
    tape.value(prompt)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
        .to_owned()
}

/// Softmax weights of z against the bank columns.
pub fn attention_weights(z: &LatentCode, bank: &PriorBank, scaled: bool) -> Array1<f64> {
    assert_eq!(z.len(), bank.dim(), "latent dimension mismatch");
    assert!(!bank.is_empty(), "bank must not be empty");
    let mut logits = bank.columns.t().dot(z);
    if scaled {
        logits /= (z.len() as f64).sqrt();
    }
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    assert!(max.is_finite(), "non-finite attention logits");
    let mut w = logits.mapv(|v| (v - max).exp());
    let s = w.sum();
    w /= s;
    w
}

/// Convex combination of bank columns under the attention weights.
pub fn cross_attention(z: &LatentCode, bank: &PriorBank, scaled: bool) -> LatentCode {
    bank.columns.dot(&attention_weights(z, bank, scaled))
}

/// Tape twin of [`cross_attention`]; the bank is a constant.
pub fn cross_attention_on_tape(t: &mut Tape, z: Var, bank: &PriorBank, scaled: bool) -> Var {
    let logits = t.vec_mat_const(z, &bank.columns);
    let logits = if scaled {
        let d = t.value(z).len() as f64;
        t.mul_scalar(logits, 1.0 / d.sqrt())
    } else {
        logits
    };
    let w = t.softmax(logits);
    t.mat_vec_const(&bank.columns, w)
}

/// Backbone features with all parameters treated as constants.
fn frozen_features(bundle: &ModelBundle, image: &Array2<f64>) -> Array3<f64> {
    let (h, w) = image.dim();
    let mut tape = Tape::new();
    let mut scratch = Vec::new();
    let bb = bundle.backbone.bind(&mut tape, false, "backbone", &mut scratch);
    let x = tape.constant(
        image
            .clone()
            .into_shape_with_order((1, h, w))
            .unwrap()
            .into_dyn(),
    );
    let f = bundle.backbone.forward(&mut tape, &bb, x);
    tape.value(f)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned()
}

/// Personalized maps for every rater, sharing one backbone pass and one
/// bank. Deterministic given parameters, image, and `bank_seed`.
pub fn personalize_all(
    bundle: &ModelBundle,
    image: &Array2<f64>,
    cfg: &Stage2Config,
    bank_seed: u64,
) -> Vec<Array2<f64>> {
    let features = frozen_features(bundle, image);
    let prior = bundle.encode_prior(image);
    let bank = sample_prior_bank(&prior, cfg.m, bank_seed);
    decode_personalized(bundle, &features, &bank, cfg.scaled_attention)
}

/// Single-rater personalized inference; annotations are never consumed.
pub fn personalize_forward(
    bundle: &ModelBundle,
    image: &Array2<f64>,
    rater_index: usize,
    cfg: &Stage2Config,
    bank_seed: u64,
) -> Array2<f64> {
    assert!(rater_index < bundle.r, "rater index out of range");
    personalize_all(bundle, image, cfg, bank_seed).swap_remove(rater_index)
}

fn decode_personalized(
    bundle: &ModelBundle,
    features: &Array3<f64>,
    bank: &PriorBank,
    scaled: bool,
) -> Vec<Array2<f64>> {
    let (_, h, w) = features.dim();
    let mut tape = Tape::new();
    let mut scratch = Vec::new();
    let hv = bundle.head.bind(&mut tape, false, "head", &mut scratch);
    let f = tape.constant(features.clone().into_dyn());
    (0..bundle.r)
        .map(|i| {
            let pv = bundle.projections[i].bind(&mut tape, false, &format!("proj.{i}"), &mut scratch);
            let map = bundle.projections[i].forward(&mut tape, &pv, f);
            let prompt = tape.global_avg_pool(map);
            let z_hat = cross_attention_on_tape(&mut tape, prompt, bank, scaled);
            let z_map = tape.broadcast_hw(z_hat, h, w);
            let logits = bundle.head.forward(&mut tape, &hv, z_map, f);
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub l_seg: f64,
    pub val_dice_mean: f64,
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    /// Bundle with the best validation mean per-rater Dice.
    pub bundle: ModelBundle,
    pub logs: Vec<Stage2EpochLog>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

pub const STAGE2_FROZEN: [&str; 4] = ["backbone", "prior", "posterior", "head"];

pub fn train_stage2(
    train: &SplitData,
    val: &SplitData,
    stage1_bundle: &ModelBundle,
    cfg: &Stage2Config,
) -> Result<Stage2Output, TrainError> {
    cfg.validate()?;
    train
        .validate()
        .map_err(|e| TrainError::Dataset(e.to_string()))?;
    val.validate().map_err(|e| TrainError::Dataset(e.to_string()))?;
    if train.r() != stage1_bundle.r || val.r() != stage1_bundle.r {
        return Err(TrainError::Dataset(
            "dataset rater count does not match the checkpoint".into(),
        ));
    }
    if train.r() < 2 {
        return Err(TrainError::Dataset("personalization needs R >= 2".into()));
    }

    let mut bundle = stage1_bundle.clone();
    bundle.freeze(&STAGE2_FROZEN);
    let adam = AdamConfig::new(cfg.learning_rate, cfg.l2);

    // Frozen backbone and prior never change, so cache per-sample features
    // and prior distributions up front.
    let train_cache: Vec<(Array3<f64>, DiagonalGaussian)> = (0..train.n())
        .map(|i| {
            let img = train.image(i);
            (frozen_features(&bundle, &img), bundle.encode_prior(&img))
        })
        .collect();
    let val_cache: Vec<(Array3<f64>, DiagonalGaussian)> = (0..val.n())
        .map(|i| {
            let img = val.image(i);
            (frozen_features(&bundle, &img), bundle.encode_prior(&img))
        })
        .collect();

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelBundle)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.n()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &format!("s2-shuffle-{epoch}")));

        let mut sum_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = GradAccum::new();
            for &i in batch {
                let (features, prior) = &train_cache[i];
                let anns = train.rater_masks(i);
                let bank_seed = match cfg.bank_policy {
                    BankPolicy::ResamplePerForward => {
                        derive_seed(cfg.seed, &format!("bank-e{epoch}-s{i}"))
                    }
                    BankPolicy::FixedPerImage => derive_seed(cfg.seed, &format!("bank-s{i}")),
                };
                let bank = sample_prior_bank(prior, cfg.m, bank_seed);

                let (h, w) = (train.h(), train.w());
                let mut tape = Tape::new();
                let bv = bundle.bind(&mut tape);
                let f = tape.constant(features.clone().into_dyn());
                let preds: Vec<Var> = (0..bundle.r)
                    .map(|r| {
                        let map = bundle.projections[r].forward(&mut tape, &bv.projections[r], f);
                        let prompt = tape.global_avg_pool(map);
                        let z_hat =
                            cross_attention_on_tape(&mut tape, prompt, &bank, cfg.scaled_attention);
                        let z_map = tape.broadcast_hw(z_hat, h, w);
                        let logits = bundle.head.forward(&mut tape, &bv.head, z_map, f);
                        tape.sigmoid(logits)
                    })
                    .collect();
                let loss = loss_stage2(&mut tape, &preds, &anns);
                let loss_val = tape.scalar(loss);
                if !loss_val.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: batch_idx,
                        l_kl: None,
                        l_seg: loss_val,
                        l_bound: None,
                    });
                }
                sum_loss += loss_val;
                let grads = tape.backward(loss);
                acc.add(&bv.order, &grads);
            }
            bundle.apply_grads(&acc.mean(), &adam);
        }
        bundle.assert_frozen();

        let val_dice = validation_dice(&bundle, val, &val_cache, cfg);
        logs.push(Stage2EpochLog {
            epoch,
            l_seg: sum_loss / train.n() as f64,
            val_dice_mean: val_dice,
        });
        if best.as_ref().is_none_or(|(_, d, _)| val_dice > *d) {
            best = Some((epoch, val_dice, bundle.clone()));
        }
    }

    let (best_epoch, best_val_dice, best_bundle) = match best {
        Some(b) => b,
        // Zero epochs: heads stay at their Stage-I init.
        None => (0, f64::NAN, bundle),
    };
    Ok(Stage2Output {
        bundle: best_bundle,
        logs,
        best_epoch,
        best_val_dice,
    })
}

/// Mean over cases and raters of Dice between the personalized map and the
/// rater's annotation, with fixed per-case banks.
fn validation_dice(
    bundle: &ModelBundle,
    val: &SplitData,
    cache: &[(Array3<f64>, DiagonalGaussian)],
    cfg: &Stage2Config,
) -> f64 {
    let mut sum = 0.0;
    for i in 0..val.n() {
        let (features, prior) = &cache[i];
        let anns = val.rater_masks(i);
        let bank_seed = derive_seed(cfg.seed, &format!("val-bank-s{i}"));
        let bank = sample_prior_bank(prior, cfg.m, bank_seed);
        let maps = decode_personalized(bundle, features, &bank, cfg.scaled_attention);
        let per_case: f64 = maps
            .iter()
            .zip(anns.iter())
            .map(|(m, a)| dice(&binarize(m, HARD_THRESHOLD), a))
            .sum::<f64>()
            / anns.len() as f64;
        sum += per_case;
    }
    sum / val.n() as f64
}

/// Writes the Stage-II checkpoint and JSONL log under `dir`.
pub fn save_outputs(
    out: &Stage2Output,
    info: &CheckpointInfo,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), TrainError> {
    std::fs::create_dir_all(dir).map_err(FormatError::from)?;
    let ckpt = dir.join("stage2.dpck");
    write_checkpoint(&ckpt, &out.bundle, info)?;
    let log = dir.join("stage2_log.jsonl");
    runlog::write_jsonl(&log, &out.logs).map_err(FormatError::from)?;
    Ok((ckpt, log))
}
