//! Synthetic multi-rater benchmark generator.
//!
//! Each case is a blurred, noisy blob image with R annotations produced by
//! simulated raters whose styles range from conservative (eroded) to
//! aggressive (dilated). Everything is a pure function of the master seed
//! and the configuration; per-sample seeds are derived from the sample id,
//! so generation order never matters.

mod rater;
mod shape;

use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rater::{rater_annotate, validate_profiles, RaterProfile};
pub use shape::{gaussian_blur, generate_base_shape, rasterize_star_shape};

use crate::io::dataset::SplitData;
use crate::metrics::Mask;
use crate::seeding;

/// Bumped when generated bytes change meaning or layout.
pub const GENERATOR_VERSION: u32 = 1;

/// One generated case.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRaterSample {
    /// Standardized intensities, [H, W].
    pub image: Array2<f32>,
    /// One mask per rater, rank order.
    pub annotations: Vec<Mask>,
    /// Synthetic ground truth; evaluation-only.
    pub true_mask: Mask,
    pub sample_id: String,
    pub seed: u64,
}

/// Generation parameters for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub h: usize,
    pub w: usize,
    pub raters: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub master_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            raters: 4,
            train: 200,
            val: 20,
            test: 50,
            master_seed: 0,
        }
    }
}

/// What was generated; written next to the archives as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub h: usize,
    pub w: usize,
    pub raters: usize,
    pub rater_profiles: Vec<RaterProfile>,
    pub master_seed: u64,
    pub generator_version: u32,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self, GenError> {
        serde_json::from_str(text).map_err(|e| GenError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, GenError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("output directory {0} already has dataset files; pass --force to overwrite")]
    WouldOverwrite(std::path::PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] crate::io::FormatError),
}

/// Generates one case. Seeds are derived per sample and per rater, so any
/// subset of ids can be regenerated independently.
pub fn generate_sample(
    master_seed: u64,
    sample_id: &str,
    h: usize,
    w: usize,
    profiles: &[RaterProfile],
) -> MultiRaterSample {
    let seed = seeding::derive_seed(master_seed, sample_id);
    let mut shape_rng = seeding::rng_from(seed, "shape");
    let (true_mask, image) = generate_base_shape(&mut shape_rng, h, w);
    let annotations: Vec<Mask> = profiles
        .iter()
        .map(|p| {
            let mut rng = seeding::rng_from(seed, &format!("rater-{}", p.rank_index));
            rater_annotate(&true_mask, p, &mut rng)
        })
        .collect();
    MultiRaterSample {
        image: image.mapv(|v| v as f32),
        annotations,
        true_mask,
        sample_id: sample_id.to_string(),
        seed,
    }
}

/// Stacks samples into one split archive's arrays.
pub fn samples_to_split(samples: &[MultiRaterSample]) -> SplitData {
    assert!(!samples.is_empty());
    let (h, w) = samples[0].true_mask.dim();
    let r = samples[0].annotations.len();
    let n = samples.len();
    let mut images = Array4::<f32>::zeros((n, 1, h, w));
    let mut annotations = Array4::<u8>::zeros((n, r, h, w));
    let mut true_masks = Array3::<u8>::zeros((n, h, w));
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.true_mask.dim(), (h, w));
        assert_eq!(s.annotations.len(), r);
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&s.image);
        for (j, a) in s.annotations.iter().enumerate() {
            annotations
                .index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), j)
                .assign(&a.mapv(|v| v as u8));
        }
        true_masks
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&s.true_mask.mapv(|v| v as u8));
    }
    SplitData {
        images,
        annotations,
        true_masks,
    }
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Generates and writes all three splits plus the manifest.
pub fn build_dataset(
    config: &GenConfig,
    out_dir: &Path,
    force: bool,
) -> Result<DatasetManifest, GenError> {
    if config.raters < 2 {
        return Err(GenError::Config("need at least 2 raters".into()));
    }
    if config.train < 1 || config.val < 1 || config.test < 1 {
        return Err(GenError::Config("every split needs at least one sample".into()));
    }
    if config.h < 32 || config.w < 32 {
        return Err(GenError::Config("minimum image size is 32x32".into()));
    }
    let existing: Vec<String> = SPLIT_NAMES
        .iter()
        .map(|s| format!("{s}.dpak"))
        .chain(["manifest.json".to_string()])
        .filter(|f| out_dir.join(f).exists())
        .collect();
    if !existing.is_empty() && !force {
        return Err(GenError::WouldOverwrite(out_dir.to_path_buf()));
    }
    std::fs::create_dir_all(out_dir)?;

    let profiles = RaterProfile::ranked_set(config.raters);
    for (name, count) in SPLIT_NAMES
        .iter()
        .zip([config.train, config.val, config.test])
    {
        let samples: Vec<MultiRaterSample> = (0..count)
            .map(|i| {
                generate_sample(
                    config.master_seed,
                    &format!("{name}-{i:04}"),
                    config.h,
                    config.w,
                    &profiles,
                )
            })
            .collect();
        samples_to_split(&samples).write(&out_dir.join(format!("{name}.dpak")))?;
    }

    let manifest = DatasetManifest {
        train_count: config.train,
        val_count: config.val,
        test_count: config.test,
        h: config.h,
        w: config.w,
        raters: config.raters,
        rater_profiles: profiles,
        master_seed: config.master_seed,
        generator_version: GENERATOR_VERSION,
    };
    let mut json = serde_json::to_string_pretty(&manifest).unwrap();
    json.push('\n');
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GenConfig {
        GenConfig {
            h: 64,
            w: 64,
            raters: 4,
            train: 4,
            val: 2,
            test: 12,
            master_seed: 7,
        }
    }

    #[test]
    fn samples_are_deterministic_and_order_independent() {
        let profiles = RaterProfile::ranked_set(4);
        let a = generate_sample(7, "train-0002", 64, 64, &profiles);
        let b = generate_sample(7, "train-0002", 64, 64, &profiles);
        assert_eq!(a, b);
        // Generating a different id first must not disturb this one.
        let _ = generate_sample(7, "train-0001", 64, 64, &profiles);
        let c = generate_sample(7, "train-0002", 64, 64, &profiles);
        assert_eq!(a, c);
    }

    #[test]
    fn annotations_are_nonempty_and_share_dims() {
        let profiles = RaterProfile::ranked_set(4);
        for i in 0..8 {
            let s = generate_sample(3, &format!("case-{i}"), 64, 64, &profiles);
            assert_eq!(s.annotations.len(), 4);
            assert!(s.true_mask.iter().any(|&v| v));
            for a in &s.annotations {
                assert_eq!(a.dim(), s.true_mask.dim());
                assert!(a.iter().any(|&v| v), "empty annotation in case {i}");
            }
        }
    }

    #[test]
    fn build_dataset_round_trips_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let out1 = dir.path().join("d1");
        let out2 = dir.path().join("d2");
        let config = tiny_config();
        let m1 = build_dataset(&config, &out1, false).unwrap();
        let m2 = build_dataset(&config, &out2, false).unwrap();
        assert_eq!(m1, m2);
        for f in ["train.dpak", "val.dpak", "test.dpak", "manifest.json"] {
            let b1 = std::fs::read(out1.join(f)).unwrap();
            let b2 = std::fs::read(out2.join(f)).unwrap();
            assert_eq!(b1, b2, "{f} differs between identical runs");
        }
        let split = SplitData::read(&out1.join("test.dpak")).unwrap();
        assert_eq!(
            (split.n(), split.r(), split.h(), split.w()),
            (12, 4, 64, 64)
        );
        let manifest = DatasetManifest::read(&out1.join("manifest.json")).unwrap();
        assert_eq!(manifest, m1);
    }

    #[test]
    fn build_dataset_refuses_overwrites_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_path_buf();
        let config = tiny_config();
        build_dataset(&config, &out, false).unwrap();
        let err = build_dataset(&config, &out, false).unwrap_err();
        assert!(matches!(err, GenError::WouldOverwrite(_)));
        build_dataset(&config, &out, true).unwrap();
    }

    #[test]
    fn build_dataset_rejects_single_rater() {
        let dir = tempfile::tempdir().unwrap();
        let config = GenConfig {
            raters: 1,
            ..tiny_config()
        };
        let err = build_dataset(&config, dir.path(), false).unwrap_err();
        assert!(matches!(err, GenError::Config(_)));
    }

    /// Spearman rank correlation; exact tie handling via average ranks.
    fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                let avg = (i + j) as f64 / 2.0 + 1.0;
                for k in i..=j {
                    r[idx[k]] = avg;
                }
                i = j + 1;
            }
            r
        }
        let rx = ranks(xs);
        let ry = ranks(ys);
        let mx = rx.iter().sum::<f64>() / rx.len() as f64;
        let my = ry.iter().sum::<f64>() / ry.len() as f64;
        let mut num = 0.0;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for (a, b) in rx.iter().zip(ry.iter()) {
            num += (a - mx) * (b - my);
            dx += (a - mx).powi(2);
            dy += (b - my).powi(2);
        }
        num / (dx * dy).sqrt()
    }

    #[test]
    fn rank_area_correlation_on_test_split() {
        let dir = tempfile::tempdir().unwrap();
        let config = GenConfig {
            test: 50,
            ..tiny_config()
        };
        build_dataset(&config, dir.path(), false).unwrap();
        let split = SplitData::read(&dir.path().join("test.dpak")).unwrap();
        let r = split.r();
        let mut mean_area = vec![0.0f64; r];
        for i in 0..split.n() {
            for (j, mask) in split.rater_masks(i).iter().enumerate() {
                mean_area[j] += mask.iter().filter(|&&v| v).count() as f64 / split.n() as f64;
            }
        }
        let ranks: Vec<f64> = (0..r).map(|i| i as f64).collect();
        let rho = spearman(&ranks, &mean_area);
        assert!(rho >= 0.9, "Spearman {rho}, areas {mean_area:?}");
    }
}
