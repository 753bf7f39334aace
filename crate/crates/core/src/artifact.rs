//! Tuned-attribute artifacts: offset parameters plus the learned placeholder row,
//! bound to the fingerprint of the base model they were tuned against.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::base::BaseModel;
use crate::checkpoint::{load_tensors, read_json, save_tensors, write_json, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::hypernet::{
    hypernets_from_params, hypernets_to_params, AttributeKind, OffsetBundle, OffsetHyperNet, LAMBDA_TRAIN,
};
use crate::tape::Matrix;
use crate::unet::{AttentionSite, ParamStore, Partition};

pub const ARTIFACT_WEIGHTS: &str = "artifact.safetensors";
pub const ARTIFACT_MANIFEST: &str = "artifact.json";
const EMBEDDING_TENSOR: &str = "placeholder.embedding";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    /// Trains per-site hypernetworks; base weights stay frozen.
    Hypernet,
    /// Trains copies of the partition's attention weights directly.
    Direct,
}

impl std::fmt::Display for TuningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TuningMode::Hypernet => "hypernet",
            TuningMode::Direct => "direct",
        })
    }
}

impl std::str::FromStr for TuningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hypernet" => Ok(TuningMode::Hypernet),
            "direct" => Ok(TuningMode::Direct),
            other => Err(Error::Config(format!("unknown tuning mode `{other}`"))),
        }
    }
}

/// Trainable state of a tuning run.
#[derive(Clone, Debug, PartialEq)]
pub enum OffsetSource {
    Hypernets(BTreeMap<String, OffsetHyperNet>),
    /// Full-rank offsets `w_tuned - w_base` from direct mode.
    Direct(BTreeMap<String, Matrix>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunedArtifact {
    pub attribute: AttributeKind,
    pub mode: TuningMode,
    pub partition: Partition,
    pub sites: Vec<AttentionSite>,
    pub placeholder: String,
    /// Learned table row for the placeholder token.
    pub embedding: Array1<f64>,
    pub source: OffsetSource,
    pub base_fingerprint: String,
    pub class_name: String,
    pub prompt: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactManifest {
    format_version: u32,
    kind: String,
    attribute: AttributeKind,
    mode: TuningMode,
    partition: Partition,
    sites: Vec<AttentionSite>,
    placeholder: String,
    base_fingerprint: String,
    class_name: String,
    prompt: String,
    lambda_train: f64,
}

impl TunedArtifact {
    /// `dw` for every targeted site.
    pub fn offsets(&self) -> Result<OffsetBundle> {
        match &self.source {
            OffsetSource::Hypernets(nets) => OffsetBundle::from_hypernets(self.partition, nets),
            OffsetSource::Direct(deltas) => Ok(OffsetBundle {
                partition: self.partition,
                deltas: deltas.clone(),
                lambda_train: LAMBDA_TRAIN,
            }),
        }
    }

    /// Fails unless the artifact was tuned against exactly `model`.
    pub fn check_base(&self, model: &BaseModel) -> Result<()> {
        let found = model.fingerprint();
        if found != self.base_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.base_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Placeholder row at intensity `lambda`: the base row moved `lambda` of the
    /// way toward the learned row.
    pub fn placeholder_row(&self, model: &BaseModel, lambda: f64) -> Result<Array1<f64>> {
        let base = model.text.word_embedding(&self.placeholder)?;
        if base.len() != self.embedding.len() {
            return Err(Error::ShapeMismatch("placeholder width differs from text encoder".into()));
        }
        Ok(&base + &((&self.embedding - &base) * lambda))
    }

    pub fn parameter_count(&self) -> usize {
        let offsets = match &self.source {
            OffsetSource::Hypernets(nets) => nets.values().map(|n| n.parameter_count()).sum::<usize>(),
            OffsetSource::Direct(d) => d.values().map(|m| m.len()).sum(),
        };
        offsets + self.embedding.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut store = match &self.source {
            OffsetSource::Hypernets(nets) => hypernets_to_params(nets),
            OffsetSource::Direct(deltas) => {
                let mut s = ParamStore::new();
                for (id, m) in deltas {
                    s.insert(format!("{id}/delta"), m.clone());
                }
                s
            }
        };
        store.insert(EMBEDDING_TENSOR, self.embedding.clone().insert_axis(ndarray::Axis(0)));
        save_tensors(&dir.join(ARTIFACT_WEIGHTS), &store)?;
        let manifest = ArtifactManifest {
            format_version: FORMAT_VERSION,
            kind: "tuned-attribute".into(),
            attribute: self.attribute,
            mode: self.mode,
            partition: self.partition,
            sites: self.sites.clone(),
            placeholder: self.placeholder.clone(),
            base_fingerprint: self.base_fingerprint.clone(),
            class_name: self.class_name.clone(),
            prompt: self.prompt.clone(),
            lambda_train: LAMBDA_TRAIN,
        };
        write_json(&dir.join(ARTIFACT_MANIFEST), &manifest)
    }

    /// Loads an artifact and verifies it against `model`.
    pub fn load(dir: &Path, model: &BaseModel) -> Result<Self> {
        let art = Self::load_unchecked(dir)?;
        art.check_base(model)?;
        for site in &art.sites {
            if model.unet.site(&site.id) != Some(site) {
                return Err(Error::Checkpoint(format!("site `{}` does not match the base model", site.id)));
            }
        }
        Ok(art)
    }

    pub fn load_unchecked(dir: &Path) -> Result<Self> {
        let manifest: ArtifactManifest = read_json(&dir.join(ARTIFACT_MANIFEST))?;
        if manifest.format_version != FORMAT_VERSION || manifest.kind != "tuned-attribute" {
            return Err(Error::Checkpoint(format!(
                "{} is not a tuned-attribute artifact",
                dir.display()
            )));
        }
        let mut store = load_tensors(&dir.join(ARTIFACT_WEIGHTS))?;
        let emb = store
            .remove(EMBEDDING_TENSOR)
            .ok_or_else(|| Error::Checkpoint("artifact has no placeholder embedding".into()))?;
        let source = match manifest.mode {
            TuningMode::Hypernet => OffsetSource::Hypernets(hypernets_from_params(&manifest.sites, &store)?),
            TuningMode::Direct => {
                let mut deltas = BTreeMap::new();
                for site in &manifest.sites {
                    let key = format!("{}/delta", site.id);
                    let m = store
                        .remove(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                    if m.dim() != (site.dim_r, site.dim_c) {
                        return Err(Error::Checkpoint(format!("tensor `{key}` has shape {:?}", m.dim())));
                    }
                    deltas.insert(site.id.clone(), m);
                }
                if let Some(extra) = store.names().next() {
                    return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
                }
                OffsetSource::Direct(deltas)
            }
        };
        Ok(Self {
            attribute: manifest.attribute,
            mode: manifest.mode,
            partition: manifest.partition,
            sites: manifest.sites,
            placeholder: manifest.placeholder,
            embedding: emb.row(0).to_owned(),
            source,
            base_fingerprint: manifest.base_fingerprint,
            class_name: manifest.class_name,
            prompt: manifest.prompt,
        })
    }
}
