//! Durable packaging of a trained predictor together with everything
//! needed to reproduce its inputs: feature specs, extractor sources, and
//! the encoding stats that replay training-time transforms.
//!
//! A bundle is a directory sealed under one content hash:
//! `manifest.json`, `model.json`, `featurespec.json`, `normstats.json`,
//! and `extractors/<feature>.fx`. Loading verifies the hash before
//! parsing anything, then cross-checks member versions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelError};
use crate::analyzer::FeatureSpec;
use crate::materializer::{encoded_column_names, schema_version, NormStats};

/// Provenance record sealing a bundle directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    /// Strictly increases across retrains of the same deployment.
    pub bundle_version: u64,
    /// Hash of the (name, version) pairs of the packaged feature specs.
    pub feature_version: String,
    pub tool_version: String,
    pub data_snapshot_id: String,
    /// Hex sha-256 over every member file except the manifest itself.
    pub content_hash: String,
}

/// Caller-supplied manifest fields; the content hash is computed at
/// packaging time and `feature_version` is verified against the specs.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestFields {
    pub bundle_version: u64,
    pub feature_version: String,
    pub tool_version: String,
    pub data_snapshot_id: String,
}

/// A deployable predictor with its feature specs and encoding stats.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub manifest: BundleManifest,
    pub model: Model,
    pub specs: Vec<FeatureSpec>,
    pub norm_stats: NormStats,
}

const MODEL_FILE: &str = "model.json";
const SPEC_FILE: &str = "featurespec.json";
const STATS_FILE: &str = "normstats.json";
const MANIFEST_FILE: &str = "manifest.json";
const EXTRACTOR_DIR: &str = "extractors";

/// Hashes every member file except the manifest, in sorted path order.
/// Paths participate in the digest so renames change the hash too.
pub(crate) fn content_hash_of(dir: &Path) -> Result<String, ModelError> {
    let mut members: Vec<(String, PathBuf)> = [MODEL_FILE, SPEC_FILE, STATS_FILE]
        .iter()
        .map(|f| (f.to_string(), dir.join(f)))
        .collect();
    let fx_dir = dir.join(EXTRACTOR_DIR);
    if fx_dir.is_dir() {
        for entry in fs::read_dir(&fx_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "fx") {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                members.push((format!("{EXTRACTOR_DIR}/{name}"), path));
            }
        }
    }
    members.sort_by(|(a, _), (b, _)| a.cmp(b));
    let mut hasher = Sha256::new();
    for (rel, path) in members {
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(path)?);
        hasher.update([1]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn check_consistent(
    fields_feature_version: &str,
    model: &Model,
    specs: &[FeatureSpec],
    norm_stats: &NormStats,
) -> Result<(), ModelError> {
    let expected = schema_version(specs);
    if fields_feature_version != expected {
        return Err(ModelError::VersionSkew {
            message: format!(
                "manifest feature_version {fields_feature_version} does not match the \
                 packaged specs ({expected})"
            ),
        });
    }
    if norm_stats.schema_version != expected {
        return Err(ModelError::VersionSkew {
            message: format!(
                "normalization stats were fitted under schema {} but the specs hash to \
                 {expected}",
                norm_stats.schema_version
            ),
        });
    }
    let encoded = encoded_column_names(norm_stats);
    if model.columns != encoded {
        return Err(ModelError::VersionSkew {
            message: format!(
                "model expects columns {:?} but the stats encode {:?}",
                model.columns, encoded
            ),
        });
    }
    Ok(())
}

/// Writes a sealed bundle directory. Refuses inconsistent members: the
/// declared feature version, the stats' schema, and the model's column
/// schema must all agree with `specs`.
pub fn package_bundle(
    dir: &Path,
    model: &Model,
    specs: &[FeatureSpec],
    norm_stats: &NormStats,
    fields: &ManifestFields,
) -> Result<ModelBundle, ModelError> {
    check_consistent(&fields.feature_version, model, specs, norm_stats)?;
    fs::create_dir_all(dir.join(EXTRACTOR_DIR))?;
    fs::write(dir.join(MODEL_FILE), to_pretty(model, MODEL_FILE)?)?;
    fs::write(dir.join(SPEC_FILE), to_pretty(&specs, SPEC_FILE)?)?;
    fs::write(dir.join(STATS_FILE), to_pretty(norm_stats, STATS_FILE)?)?;
    for spec in specs {
        let path = dir.join(EXTRACTOR_DIR).join(format!("{}.fx", spec.name));
        fs::write(path, spec.extraction_plan.as_bytes())?;
    }
    let manifest = BundleManifest {
        bundle_version: fields.bundle_version,
        feature_version: fields.feature_version.clone(),
        tool_version: fields.tool_version.clone(),
        data_snapshot_id: fields.data_snapshot_id.clone(),
        content_hash: content_hash_of(dir)?,
    };
    fs::write(dir.join(MANIFEST_FILE), to_pretty(&manifest, MANIFEST_FILE)?)?;
    Ok(ModelBundle {
        manifest,
        model: model.clone(),
        specs: specs.to_vec(),
        norm_stats: norm_stats.clone(),
    })
}

/// Loads and verifies a bundle: content hash first, then member version
/// agreement, then extractor sources against their specs.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle, ModelError> {
    let manifest: BundleManifest = from_member(dir, MANIFEST_FILE)?;
    let computed = content_hash_of(dir)?;
    if computed != manifest.content_hash {
        return Err(ModelError::HashMismatch {
            expected: manifest.content_hash,
            computed,
        });
    }
    let model: Model = from_member(dir, MODEL_FILE)?;
    let specs: Vec<FeatureSpec> = from_member(dir, SPEC_FILE)?;
    let norm_stats: NormStats = from_member(dir, STATS_FILE)?;
    check_consistent(&manifest.feature_version, &model, &specs, &norm_stats)?;
    for spec in &specs {
        let path = dir.join(EXTRACTOR_DIR).join(format!("{}.fx", spec.name));
        let source = fs::read_to_string(&path)?;
        if source != spec.extraction_plan {
            return Err(ModelError::VersionSkew {
                message: format!(
                    "extractor source {}.fx disagrees with its feature spec",
                    spec.name
                ),
            });
        }
    }
    Ok(ModelBundle { manifest, model, specs, norm_stats })
}

fn to_pretty<T: Serialize>(value: &T, member: &str) -> Result<Vec<u8>, ModelError> {
    serde_json::to_vec_pretty(value)
        .map_err(|source| ModelError::Decode { member: member.into(), source })
}

fn from_member<T: for<'de> Deserialize<'de>>(dir: &Path, member: &str) -> Result<T, ModelError> {
    let bytes = fs::read(dir.join(member))?;
    serde_json::from_slice(&bytes)
        .map_err(|source| ModelError::Decode { member: member.into(), source })
}
