//! Model checkpoints, layered on the array archive container.
//!
//! A checkpoint is an archive with one `meta` entry (UTF-8 JSON bytes as a
//! u8 array) and one f64 entry per parameter named `param.<component>.<path>`,
//! e.g. `param.backbone.e1a.w`. The meta record is versioned and carries the
//! architecture sizes needed to rebuild the bundle, the originating config
//! hash, the freeze set, and per-component SHA-256 checksums that are
//! re-verified on load, so any payload corruption is caught bit-exactly.
//!
//! Implementation limits (rejected at parse time, generous for this tool):
//! D <= 64, R <= 16, channels <= 64. Optimizer moments are not stored;
//! loading a checkpoint starts a fresh optimizer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::latentmath::KlDirection;
use crate::model::ModelBundle;
use crate::seeding::rng_from;

use super::dpak::{encode_archive, parse_archive, ArrayData};
use super::FormatError;

pub const CHECKPOINT_VERSION: u32 = 1;

pub const MAX_D: usize = 64;
pub const MAX_R: usize = 16;
pub const MAX_CHANNELS: usize = 64;

/// Caller-supplied context recorded next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    /// Training phase tag, e.g. "stage1" or "stage2".
    pub stage: String,
    /// Image size the bundle was trained at.
    pub h: usize,
    pub w: usize,
    pub kl_direction: KlDirection,
    /// Hash of the experiment config that produced this checkpoint.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: String,
    pub d: usize,
    pub r: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kl_direction: KlDirection,
    pub config_hash: String,
    pub frozen: Vec<String>,
    pub checksums: BTreeMap<String, String>,
}

pub fn encode_checkpoint(bundle: &ModelBundle, info: &CheckpointInfo) -> Vec<u8> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        stage: info.stage.clone(),
        d: bundle.d,
        r: bundle.r,
        channels: bundle.channels,
        h: info.h,
        w: info.w,
        kl_direction: info.kl_direction,
        config_hash: info.config_hash.clone(),
        frozen: bundle.frozen_names(),
        checksums: bundle.checksums(),
    };
    let mut entries = BTreeMap::new();
    let meta_bytes = serde_json::to_vec(&meta).expect("meta serializes");
    entries.insert(
        "meta".to_string(),
        ArrayData::U8(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[meta_bytes.len()]), meta_bytes).unwrap()),
    );
    for name in bundle.component_names() {
        bundle.component(&name).visit(&mut |pname, p| {
            entries.insert(
                format!("param.{name}.{pname}"),
                ArrayData::F64(p.value.clone()),
            );
        });
    }
    encode_archive(&entries)
}

fn header_err(msg: impl Into<String>) -> FormatError {
    FormatError::Header(msg.into())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelBundle, CheckpointMeta), FormatError> {
    let mut entries = parse_archive(bytes)?;
    let meta_entry = entries
        .remove("meta")
        .ok_or_else(|| header_err("missing meta entry"))?;
    let ArrayData::U8(meta_bytes) = meta_entry else {
        return Err(header_err("meta entry must be u8"));
    };
    let meta_vec: Vec<u8> = meta_bytes.iter().copied().collect();
    let meta: CheckpointMeta = serde_json::from_slice(&meta_vec)
        .map_err(|e| header_err(format!("bad meta json: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(header_err(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    if meta.d == 0 || meta.d > MAX_D {
        return Err(header_err(format!("d = {} out of range", meta.d)));
    }
    if meta.r == 0 || meta.r > MAX_R {
        return Err(header_err(format!("r = {} out of range", meta.r)));
    }
    if meta.channels < 2 || meta.channels > MAX_CHANNELS {
        return Err(header_err(format!("channels = {} out of range", meta.channels)));
    }

    // The architecture sizes fully determine every parameter shape; values
    // are overwritten below, so the init RNG never matters.
    let mut bundle = ModelBundle::init(&mut rng_from(0, "checkpoint-load"), meta.d, meta.r, meta.channels);
    let mut missing = Vec::new();
    for name in bundle.component_names() {
        let mut fill_err = None;
        bundle.component_mut(&name).visit_mut(&mut |pname, p| {
            let key = format!("param.{name}.{pname}");
            match entries.remove(&key) {
                Some(ArrayData::F64(v)) if v.shape() == p.value.shape() => p.value = v,
                Some(ArrayData::F64(v)) => {
                    fill_err.get_or_insert(FormatError::BadEntry {
                        name: key,
                        reason: format!(
                            "shape {:?} does not match expected {:?}",
                            v.shape(),
                            p.value.shape()
                        ),
                    });
                }
                Some(_) => {
                    fill_err.get_or_insert(FormatError::BadEntry {
                        name: key,
                        reason: "parameters must be f64".to_string(),
                    });
                }
                None => missing.push(key),
            }
        });
        if let Some(e) = fill_err {
            return Err(e);
        }
    }
    if let Some(key) = missing.into_iter().next() {
        return Err(FormatError::BadEntry {
            name: key,
            reason: "missing from archive".to_string(),
        });
    }
    if let Some((name, _)) = entries.into_iter().next() {
        return Err(FormatError::BadEntry {
            name,
            reason: "unexpected extra entry".to_string(),
        });
    }

    // Bit-exact integrity: recomputed component checksums must match the
    // ones recorded at save time.
    let current = bundle.checksums();
    for (name, recorded) in &meta.checksums {
        match current.get(name) {
            Some(now) if now == recorded => {}
            Some(_) => {
                return Err(FormatError::BadEntry {
                    name: name.clone(),
                    reason: "component checksum mismatch".to_string(),
                })
            }
            None => {
                return Err(header_err(format!("checksum for unknown component {name}")));
            }
        }
    }
    if meta.checksums.len() != current.len() {
        return Err(header_err("incomplete checksum table"));
    }
    let frozen: Vec<&str> = meta.frozen.iter().map(|s| s.as_str()).collect();
    for f in &frozen {
        if !current.contains_key(*f) {
            return Err(header_err(format!("frozen list names unknown component {f}")));
        }
    }
    bundle.freeze(&frozen);
    Ok((bundle, meta))
}

pub fn write_checkpoint(
    path: &Path,
    bundle: &ModelBundle,
    info: &CheckpointInfo,
) -> Result<(), FormatError> {
    std::fs::write(path, encode_checkpoint(bundle, info))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointMeta), FormatError> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn sample_info() -> CheckpointInfo {
        CheckpointInfo {
            stage: "stage1".to_string(),
            h: 64,
            w: 64,
            kl_direction: KlDirection::PostToPrior,
            config_hash: "deadbeef".to_string(),
        }
    }

    fn sample_bundle() -> ModelBundle {
        let mut rng = rng_from(95, "ckpt");
        let mut bundle = ModelBundle::init(&mut rng, 3, 2, 4);
        bundle.freeze(&["prior"]);
        bundle
    }

    #[test]
    fn round_trip_is_exact() {
        let bundle = sample_bundle();
        let bytes = encode_checkpoint(&bundle, &sample_info());
        let (loaded, meta) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.checksums(), bundle.checksums());
        assert_eq!(meta.version, CHECKPOINT_VERSION);
        assert_eq!(meta.stage, "stage1");
        assert_eq!(meta.config_hash, "deadbeef");
        assert_eq!((meta.d, meta.r, meta.channels), (3, 2, 4));
        assert_eq!(meta.kl_direction, KlDirection::PostToPrior);
        assert!(loaded.is_frozen("prior"));
        assert!(!loaded.is_frozen("backbone"));
        // Re-encoding the loaded bundle reproduces the bytes.
        assert_eq!(encode_checkpoint(&loaded, &sample_info()), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dpck");
        let bundle = sample_bundle();
        write_checkpoint(&path, &bundle, &sample_info()).unwrap();
        let (loaded, _) = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.checksums(), bundle.checksums());
    }

    #[test]
    fn payload_corruption_is_detected() {
        let bundle = sample_bundle();
        let bytes = encode_checkpoint(&bundle, &sample_info());
        // Flip one bit near the end, inside some parameter payload.
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 9] ^= 0x40;
        match parse_checkpoint(&bad) {
            Err(FormatError::BadEntry { reason, .. }) => {
                assert!(reason.contains("checksum"), "{reason}");
            }
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn version_and_size_limits_are_enforced() {
        let bundle = sample_bundle();
        let info = sample_info();
        let mut meta: CheckpointMeta = {
            let bytes = encode_checkpoint(&bundle, &info);
            parse_checkpoint(&bytes).unwrap().1
        };
        meta.version = 2;
        assert!(reencode_with_meta(&bundle, &meta).is_err());
        meta.version = CHECKPOINT_VERSION;
        meta.d = MAX_D + 1;
        assert!(reencode_with_meta(&bundle, &meta).is_err());
    }

    /// Swaps the meta entry inside otherwise valid bytes.
    fn reencode_with_meta(
        bundle: &ModelBundle,
        meta: &CheckpointMeta,
    ) -> Result<(ModelBundle, CheckpointMeta), FormatError> {
        let bytes = encode_checkpoint(bundle, &sample_info());
        let mut entries = parse_archive(&bytes).unwrap();
        let meta_bytes = serde_json::to_vec(meta).unwrap();
        entries.insert(
            "meta".to_string(),
            ArrayData::U8(
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[meta_bytes.len()]), meta_bytes)
                    .unwrap(),
            ),
        );
        parse_checkpoint(&encode_archive(&entries))
    }

    #[test]
    fn missing_and_extra_entries_are_rejected() {
        let bundle = sample_bundle();
        let bytes = encode_checkpoint(&bundle, &sample_info());
        let entries = parse_archive(&bytes).unwrap();

        let mut dropped = entries.clone();
        dropped.remove("param.head.p1.w").unwrap();
        assert!(matches!(
            parse_checkpoint(&encode_archive(&dropped)),
            Err(FormatError::BadEntry { .. })
        ));

        let mut extra = entries.clone();
        extra.insert(
            "param.head.p9.w".to_string(),
            ArrayData::F64(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1]))),
        );
        assert!(matches!(
            parse_checkpoint(&encode_archive(&extra)),
            Err(FormatError::BadEntry { .. })
        ));

        let mut reshaped = entries;
        reshaped.insert(
            "param.head.p3.b".to_string(),
            ArrayData::F64(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2]))),
        );
        match parse_checkpoint(&encode_archive(&reshaped)) {
            Err(FormatError::BadEntry { name, reason }) => {
                assert_eq!(name, "param.head.p3.b");
                assert!(reason.contains("shape"));
            }
            other => panic!("expected shape rejection, got {other:?}"),
        }
    }

    #[test]
    fn garbage_meta_is_rejected_not_panicked() {
        let bundle = sample_bundle();
        let bytes = encode_checkpoint(&bundle, &sample_info());
        let mut entries = parse_archive(&bytes).unwrap();
        entries.insert(
            "meta".to_string(),
            ArrayData::U8(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), b"nope".to_vec()).unwrap()),
        );
        assert!(matches!(
            parse_checkpoint(&encode_archive(&entries)),
            Err(FormatError::Header(_))
        ));
    }
}
