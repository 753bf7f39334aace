//! On-disk containers: named f64 arrays in safetensors files plus JSON manifests.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::base::{BaseModel, TEXT_TABLE};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::tape::Matrix;
use crate::text::{TextEncoder, TextEncoderConfig, Vocabulary};
use crate::unet::{ParamStore, UNetConfig, UNetModel};

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const BASE_MANIFEST_FILE: &str = "model.json";

/// Writes every array of `store` as a 2-D little-endian f64 tensor.
pub fn save_tensors(path: &Path, store: &ParamStore) -> Result<()> {
    let buffers: Vec<(String, Vec<u8>, Vec<usize>)> = store
        .iter()
        .map(|(name, m)| {
            let bytes = m.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), bytes, vec![m.nrows(), m.ncols()])
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, bytes, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, None::<HashMap<String, String>>, path)
        .map_err(|e| Error::format(path, e))
}

pub fn load_tensors(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e))?;
    let mut store = ParamStore::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::format(path, format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
        }
        let shape = match view.shape() {
            [r, c] => (*r, *c),
            other => return Err(Error::format(path, format!("tensor `{name}` has rank {}", other.len()))),
        };
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_shape_vec(shape, values).map_err(|e| Error::format(path, e))?;
        store.insert(name, m);
    }
    Ok(store)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseManifest {
    pub format_version: u32,
    pub kind: String,
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
    pub schedule: ScheduleConfig,
    pub vocabulary: Vec<String>,
    pub fingerprint: String,
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

/// Saves the base model into `dir` (weights plus manifest) and returns its fingerprint.
pub fn save_base(dir: &Path, model: &BaseModel, training: Option<serde_json::Value>) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut store = model.unet.params.clone();
    store.insert(TEXT_TABLE, model.text.table.clone());
    save_tensors(&dir.join(WEIGHTS_FILE), &store)?;
    let fingerprint = model.fingerprint();
    let manifest = BaseManifest {
        format_version: FORMAT_VERSION,
        kind: "base-model".into(),
        unet: model.unet.config.clone(),
        text: model.text.config.clone(),
        schedule: model.schedule_config,
        vocabulary: model.text.vocab.tokens().to_vec(),
        fingerprint: fingerprint.clone(),
        training,
    };
    write_json(&dir.join(BASE_MANIFEST_FILE), &manifest)?;
    Ok(fingerprint)
}

/// Loads a base model, checking names, shapes and the recorded fingerprint.
pub fn load_base(dir: &Path) -> Result<BaseModel> {
    let manifest_path = dir.join(BASE_MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Checkpoint(format!(
            "no base checkpoint manifest at {}",
            manifest_path.display()
        )));
    }
    let manifest: BaseManifest = read_json(&manifest_path)?;
    if manifest.format_version != FORMAT_VERSION || manifest.kind != "base-model" {
        return Err(Error::Checkpoint(format!(
            "{} is a `{}` v{} manifest, expected base-model v{FORMAT_VERSION}",
            manifest_path.display(),
            manifest.kind,
            manifest.format_version
        )));
    }
    let mut store = load_tensors(&dir.join(WEIGHTS_FILE))?;
    let table = store
        .remove(TEXT_TABLE)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{TEXT_TABLE}`")))?;
    let vocab = Vocabulary::new(manifest.vocabulary.clone());
    if table.dim() != (vocab.len(), manifest.text.dim) {
        return Err(Error::Checkpoint(format!(
            "text table has shape {:?}, expected {:?}",
            table.dim(),
            (vocab.len(), manifest.text.dim)
        )));
    }
    let unet = UNetModel::from_params(manifest.unet.clone(), store)?;
    let mut text = TextEncoder::new(vocab, manifest.text.clone(), 0);
    text.table = table;
    let model = BaseModel {
        unet,
        text,
        schedule: manifest.schedule.build()?,
        schedule_config: manifest.schedule,
    };
    let found = model.fingerprint();
    if found != manifest.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: manifest.fingerprint,
            found,
        });
    }
    Ok(model)
}

/// Reads only the fingerprint recorded in a base checkpoint's manifest.
pub fn base_fingerprint(dir: &Path) -> Result<String> {
    let manifest: BaseManifest = read_json(&dir.join(BASE_MANIFEST_FILE))?;
    Ok(manifest.fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tiny_model() -> BaseModel {
        let unet = UNetConfig::tiny();
        let text = TextEncoderConfig {
            dim: unet.text_dim,
            max_len: 24,
        };
        BaseModel::new(unet, text, ScheduleConfig::default(), 5).unwrap()
    }

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("attrtune-ckpt-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn base_round_trip_preserves_bits() {
        let dir = scratch("round");
        let model = tiny_model();
        let fp = save_base(&dir, &model, None).unwrap();
        let back = load_base(&dir).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.fingerprint(), fp);
        assert_eq!(base_fingerprint(&dir).unwrap(), fp);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn tampered_weights_fail_fingerprint_check() {
        let dir = scratch("tamper");
        let mut model = tiny_model();
        save_base(&dir, &model, None).unwrap();
        model.unet.params.get_mut("enc0.self.q").unwrap()[[0, 0]] += 1.0;
        let mut store = model.unet.params.clone();
        store.insert(TEXT_TABLE, model.text.table.clone());
        save_tensors(&dir.join(WEIGHTS_FILE), &store).unwrap();
        assert!(matches!(load_base(&dir), Err(Error::FingerprintMismatch { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_or_misshapen_tensors_fail_loudly() {
        let dir = scratch("shape");
        let model = tiny_model();
        save_base(&dir, &model, None).unwrap();
        let mut store = load_tensors(&dir.join(WEIGHTS_FILE)).unwrap();
        store.insert("dec0.cross.k", Matrix::zeros((2, 2)));
        save_tensors(&dir.join(WEIGHTS_FILE), &store).unwrap();
        assert!(matches!(load_base(&dir), Err(Error::Checkpoint(_))));
        assert!(matches!(load_base(&dir.join("nope")), Err(Error::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
