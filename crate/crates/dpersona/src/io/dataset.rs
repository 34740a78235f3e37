//! Dataset split archives: images, per-rater annotations, and ground-truth
//! masks for one train/val/test split, stored as a DPAK container.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};

use super::dpak::{self, ArrayData};
use super::FormatError;
use crate::metrics::Mask;

/// All cases of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    /// [N, 1, H, W], standardized intensities.
    pub images: Array4<f32>,
    /// [N, R, H, W], values 0/1.
    pub annotations: Array4<u8>,
    /// [N, H, W], values 0/1. Evaluation-only ground truth.
    pub true_masks: Array3<u8>,
}

impl SplitData {
    pub fn n(&self) -> usize {
        self.images.dim().0
    }

    pub fn r(&self) -> usize {
        self.annotations.dim().1
    }

    pub fn h(&self) -> usize {
        self.images.dim().2
    }

    pub fn w(&self) -> usize {
        self.images.dim().3
    }

    /// Cross-checks shapes and binary ranges.
    pub fn validate(&self) -> Result<(), FormatError> {
        let (n, c, h, w) = self.images.dim();
        let (na, _r, ha, wa) = self.annotations.dim();
        let (nt, ht, wt) = self.true_masks.dim();
        let shape_ok = c == 1 && na == n && nt == n && ha == h && wa == w && ht == h && wt == w;
        if !shape_ok {
            return Err(FormatError::Header("split arrays disagree on shape".into()));
        }
        if self.annotations.iter().any(|&v| v > 1) || self.true_masks.iter().any(|&v| v > 1) {
            return Err(FormatError::Header("masks must be 0/1".into()));
        }
        if self.images.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Header("image values must be finite".into()));
        }
        Ok(())
    }

    /// Image `i` as an f64 [H, W] plane.
    pub fn image(&self, i: usize) -> Array2<f64> {
        self.images
            .index_axis(ndarray::Axis(0), i)
            .index_axis(ndarray::Axis(0), 0)
            .mapv(|v| v as f64)
    }

    /// Annotation masks of case `i`, one per rater.
    pub fn rater_masks(&self, i: usize) -> Vec<Mask> {
        (0..self.r())
            .map(|r| {
                self.annotations
                    .index_axis(ndarray::Axis(0), i)
                    .index_axis(ndarray::Axis(0), r)
                    .mapv(|v| v != 0)
            })
            .collect()
    }

    pub fn true_mask(&self, i: usize) -> Mask {
        self.true_masks
            .index_axis(ndarray::Axis(0), i)
            .mapv(|v| v != 0)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        self.validate()?;
        let mut entries = BTreeMap::new();
        entries.insert(
            "images".to_string(),
            ArrayData::F32(self.images.clone().into_dyn()),
        );
        entries.insert(
            "annotations".to_string(),
            ArrayData::U8(self.annotations.clone().into_dyn()),
        );
        entries.insert(
            "true_masks".to_string(),
            ArrayData::U8(self.true_masks.clone().into_dyn()),
        );
        dpak::write_archive(path, &entries)
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Self::from_entries(dpak::read_archive(path)?)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        Self::from_entries(dpak::parse_archive(bytes)?)
    }

    fn from_entries(mut entries: BTreeMap<String, ArrayData>) -> Result<Self, FormatError> {
        let images = match entries.remove("images") {
            Some(ArrayData::F32(a)) => a
                .into_dimensionality::<ndarray::Ix4>()
                .map_err(|_| FormatError::Header("images must be 4-d".into()))?,
            _ => return Err(FormatError::Header("missing f32 entry 'images'".into())),
        };
        let annotations = match entries.remove("annotations") {
            Some(ArrayData::U8(a)) => a
                .into_dimensionality::<ndarray::Ix4>()
                .map_err(|_| FormatError::Header("annotations must be 4-d".into()))?,
            _ => return Err(FormatError::Header("missing u8 entry 'annotations'".into())),
        };
        let true_masks = match entries.remove("true_masks") {
            Some(ArrayData::U8(a)) => a
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|_| FormatError::Header("true_masks must be 3-d".into()))?,
            _ => return Err(FormatError::Header("missing u8 entry 'true_masks'".into())),
        };
        let split = SplitData {
            images,
            annotations,
            true_masks,
        };
        split.validate()?;
        Ok(split)
    }
}
