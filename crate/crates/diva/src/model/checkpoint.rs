//! Checkpoint container: a single archive holding every named weight array
//! plus a JSON manifest. Round-trips are bit-exact; the header embeds a
//! format-version integer.
//!
//! Layout: `b"DIVACKPT"` magic, `u32` LE format version, `u64` LE manifest
//! length, the manifest JSON, then the raw little-endian array section.

use super::config::ModelConfig;
use super::params::{AdversaryParams, ModelParams};
use crate::error::{DivaError, Result};
use crate::tensor::{Dtype, Real};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DIVACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: Dtype,
    extra: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> DivaError {
    DivaError::Format { path: path.display().to_string(), reason: reason.into() }
}

/// Write named arrays plus caller metadata as one archive file.
pub fn write_archive<F: Real>(
    path: &Path,
    extra: serde_json::Value,
    arrays: &[(String, ArrayD<F>)],
) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, a) in arrays {
        let offset = blob.len() as u64;
        for &v in a.iter() {
            v.write_le(&mut blob);
        }
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            offset,
            byte_len: (a.len() * F::BYTES) as u64,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: F::DTYPE,
        extra,
        arrays: entries,
    };
    let mjson = serde_json::to_vec(&manifest)?;

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(mjson.len() as u64).to_le_bytes())?;
    f.write_all(&mjson)?;
    f.write_all(&blob)?;
    Ok(())
}

/// Read an archive back: caller metadata plus name -> array.
pub fn read_archive<F: Real>(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, ArrayD<F>>)> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 8];
    f.read_exact(&mut head).map_err(|_| format_err(path, "truncated header"))?;
    if &head != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4).map_err(|_| format_err(path, "truncated version"))?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {version}")));
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8).map_err(|_| format_err(path, "truncated manifest length"))?;
    let mlen = u64::from_le_bytes(l8) as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson).map_err(|_| format_err(path, "truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&mjson).map_err(|e| format_err(path, format!("manifest: {e}")))?;
    if manifest.dtype != F::DTYPE {
        return Err(format_err(path, format!("dtype {:?} does not match", manifest.dtype)));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;

    let mut arrays = BTreeMap::new();
    for e in &manifest.arrays {
        let lo = e.offset as usize;
        let hi = lo + e.byte_len as usize;
        if hi > blob.len() {
            return Err(format_err(path, format!("array {} out of bounds", e.name)));
        }
        let count: usize = e.shape.iter().product();
        if count * F::BYTES != e.byte_len as usize {
            return Err(format_err(path, format!("array {} length mismatch", e.name)));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[lo..hi].chunks_exact(F::BYTES) {
            data.push(F::read_le(chunk));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|_| format_err(path, format!("array {} bad shape", e.name)))?;
        arrays.insert(e.name.clone(), arr);
    }
    Ok((manifest.extra, arrays))
}

/// Rebuild a parameter tree from a name -> array map (shape-checked).
pub fn assign_tree<F: Real>(
    proto: &mut ModelParams<F>,
    prefix: &str,
    arrays: &BTreeMap<String, ArrayD<F>>,
    path: &Path,
) -> Result<()> {
    let mut err = None;
    proto.walk_mut(prefix, &mut |name, slot| {
        if err.is_some() {
            return;
        }
        match arrays.get(&name) {
            Some(a) if a.shape() == slot.shape() => *slot = a.clone(),
            Some(a) => {
                err = Some(format!("array {name}: shape {:?} vs {:?}", a.shape(), slot.shape()))
            }
            None => err = Some(format!("missing array {name}")),
        }
    });
    match err {
        Some(e) => Err(format_err(path, e)),
        None => Ok(()),
    }
}

pub fn assign_adversary<F: Real>(
    proto: &mut AdversaryParams<F>,
    prefix: &str,
    arrays: &BTreeMap<String, ArrayD<F>>,
    path: &Path,
) -> Result<()> {
    let mut err = None;
    proto.walk_mut(prefix, &mut |name, slot| {
        if err.is_some() {
            return;
        }
        match arrays.get(&name) {
            Some(a) if a.shape() == slot.shape() => *slot = a.clone(),
            Some(a) => {
                err = Some(format!("array {name}: shape {:?} vs {:?}", a.shape(), slot.shape()))
            }
            None => err = Some(format!("missing array {name}")),
        }
    });
    match err {
        Some(e) => Err(format_err(path, e)),
        None => Ok(()),
    }
}

/// Model weights plus architecture constants, without trainer state.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint<F: Real> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
    pub adversary: AdversaryParams<F>,
}

#[derive(Serialize, Deserialize)]
struct ModelExtra {
    kind: String,
    model_config: ModelConfig,
}

pub fn collect_model_arrays<F: Real>(
    params: &ModelParams<F>,
    adversary: &AdversaryParams<F>,
) -> Vec<(String, ArrayD<F>)> {
    let mut out = Vec::new();
    params.walk("w", &mut |n, a| out.push((n, a.clone())));
    adversary.walk("theta", &mut |n, a| out.push((n, a.clone())));
    out
}

pub fn save_model<F: Real>(path: &Path, ckpt: &ModelCheckpoint<F>) -> Result<()> {
    let extra = serde_json::to_value(ModelExtra {
        kind: "model".into(),
        model_config: ckpt.config.clone(),
    })?;
    let arrays = collect_model_arrays(&ckpt.params, &ckpt.adversary);
    write_archive(path, extra, &arrays)
}

pub fn load_model<F: Real>(path: &Path) -> Result<ModelCheckpoint<F>> {
    let (extra, arrays) = read_archive::<F>(path)?;
    let parsed: ModelExtra = serde_json::from_value(extra.clone())
        .or_else(|_| {
            // bundles written by the trainer carry the same fields plus more
            serde_json::from_value::<serde_json::Value>(extra).and_then(|v| {
                serde_json::from_value(v.get("model").cloned().unwrap_or_default())
            })
        })
        .map_err(|e| format_err(path, format!("manifest extra: {e}")))?;
    rebuild_model(path, parsed.model_config, &arrays)
}

pub(crate) fn rebuild_model<F: Real>(
    path: &Path,
    config: ModelConfig,
    arrays: &BTreeMap<String, ArrayD<F>>,
) -> Result<ModelCheckpoint<F>> {
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut params = ModelParams::init(&config, &mut rng);
    let mut adversary = AdversaryParams::init(&config, &mut rng);
    assign_tree(&mut params, "w", arrays, path)?;
    assign_adversary(&mut adversary, "theta", arrays, path)?;
    Ok(ModelCheckpoint { config, params, adversary })
}
