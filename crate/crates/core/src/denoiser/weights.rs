//! Weight archives: safetensors files whose `__metadata__` block echoes the
//! model configuration and a format version.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use super::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "cohedit-denoiser";
pub const WEIGHTS_FORMAT_VERSION: &str = "3";

pub(crate) fn write_archive(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    let owned = tensors
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.detach().to_dtype(DType::F32)?.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(owned.iter().map(|(k, v)| (k.as_str(), v)), Some(metadata), path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn read_archive(
    path: &Path,
    device: &Device,
) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?
        .into_iter()
        .collect::<BTreeMap<_, _>>();
    Ok((tensors, metadata))
}

pub(crate) fn expect_format(path: &Path, meta: &HashMap<String, String>, format: &str, version: &str) -> Result<()> {
    match (meta.get("format"), meta.get("format_version")) {
        (Some(f), Some(v)) if f == format && v == version => Ok(()),
        (f, v) => Err(Error::format(
            path,
            format!("expected {format} v{version}, found {f:?} v{v:?}"),
        )),
    }
}

pub fn save_weights(model: &Denoiser, path: impl AsRef<Path>) -> Result<()> {
    let meta = HashMap::from([
        ("format".to_string(), WEIGHTS_FORMAT.to_string()),
        ("format_version".to_string(), WEIGHTS_FORMAT_VERSION.to_string()),
        ("crate_version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("config".to_string(), serde_json::to_string(model.config())?),
    ]);
    write_archive(path.as_ref(), model.params(), meta)
}

pub fn load_weights(path: impl AsRef<Path>, device: &Device) -> Result<Denoiser> {
    let path = path.as_ref();
    let (tensors, meta) = read_archive(path, device)?;
    expect_format(path, &meta, WEIGHTS_FORMAT, WEIGHTS_FORMAT_VERSION)?;
    let config: DenoiserConfig = serde_json::from_str(
        meta.get("config")
            .ok_or_else(|| Error::format(path, "missing config metadata"))?,
    )?;
    Denoiser::from_tensors(config, tensors, device)
}
