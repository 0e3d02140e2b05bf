//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 8 bytes   magic "DYNMOECK"
//! u32       format version (1)
//! u64       manifest length in bytes
//! ...       manifest: UTF-8 JSON (model config, seed, epoch, dtype and a
//!           tensor table of name / shape / byte offset / element count)
//! ...       tensor data, concatenated, offsets relative to this point
//! ```
//!
//! Tensors are written as `f64`; `f32` payloads are accepted on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DYNMOECK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub dtype: Dtype,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a model to bytes.
pub fn to_bytes(model: &Model, seed: u64, epoch: usize) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (name, arr) in model.named_params() {
        tensors.push(TensorEntry {
            name,
            shape: arr.shape().to_vec(),
            offset: blob.len() as u64,
            len: arr.len() as u64,
        });
        for v in arr.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: model.config.clone(),
        seed,
        epoch,
        dtype: Dtype::F64,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

/// Parses bytes produced by [`to_bytes`] (or an `f32` variant). `origin`
/// is only used in error messages.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(Model, Manifest)> {
    let bad = |msg: String| Error::format(origin, msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < mlen {
        return Err(bad("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
    let blob = &body[mlen..];

    let mut model = Model::new(manifest.config.clone(), manifest.seed)?;
    let names: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, a)| (n, a.shape().to_vec()))
        .collect();
    if names.len() != manifest.tensors.len() {
        return Err(bad(format!(
            "{} tensors stored, model expects {}",
            manifest.tensors.len(),
            names.len()
        )));
    }
    let width = manifest.dtype.width();
    for ((param, (name, shape)), entry) in model.params_mut().into_iter().zip(&names).zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape || entry.len as usize != param.len() {
            return Err(bad(format!(
                "tensor `{}` {:?} does not match model tensor `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * width;
        let raw = blob
            .get(start..end)
            .ok_or_else(|| bad(format!("tensor `{name}` runs past end of file")))?;
        for (dst, chunk) in param.data_mut().iter_mut().zip(raw.chunks_exact(width)) {
            *dst = match manifest.dtype {
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
            };
        }
    }
    Ok((model, manifest))
}

pub fn save(path: &Path, model: &Model, seed: u64, epoch: usize) -> Result<()> {
    fs::write(path, to_bytes(model, seed, epoch)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SizePreset;
    use crate::schedules::ScheduleKind;

    fn model() -> Model {
        let cfg = ModelConfig::new(SizePreset::Tiny, ScheduleKind::WaveDown, 4, 1, 10, 3);
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = model();
        m.head.bias.data_mut()[1] = -0.123456789012345;
        let bytes = to_bytes(&m, 3, 7);
        assert_eq!(&bytes[..8], b"DYNMOECK");
        let (back, manifest) = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!((manifest.seed, manifest.epoch, manifest.dtype), (3, 7, Dtype::F64));
        assert_eq!(manifest.tensors[0].name, "input.weight");
    }

    #[test]
    fn loads_f32_payloads() {
        let m = model();
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for (name, arr) in m.named_params() {
            tensors.push(TensorEntry {
                name,
                shape: arr.shape().to_vec(),
                offset: blob.len() as u64,
                len: arr.len() as u64,
            });
            for &v in arr.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            config: m.config.clone(),
            seed: 0,
            epoch: 0,
            dtype: Dtype::F32,
            tensors,
        };
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend(VERSION.to_le_bytes());
        bytes.extend((json.len() as u64).to_le_bytes());
        bytes.extend(json);
        bytes.extend(blob);
        let (back, _) = from_bytes(&bytes, Path::new("mem")).unwrap();
        for ((_, a), (_, b)) in back.named_params().iter().zip(m.named_params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&model(), 0, 0);
        let err = from_bytes(&bytes[..bytes.len() - 3], Path::new("ck.bin")).unwrap_err();
        assert!(err.to_string().contains("ck.bin"), "{err}");
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong, Path::new("x")).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(from_bytes(&version, Path::new("x")).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let m = model();
        save(&p, &m, 1, 2).unwrap();
        assert_eq!(load(&p).unwrap().0, m);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn any_small_model_round_trips(kind in 0usize..7, n_max in 1usize..6, seed in 0u64..1000, epoch in 0usize..50) {
            let cfg = ModelConfig::new(SizePreset::Tiny, ScheduleKind::ALL[kind], n_max, 1, 5, 3);
            let m = Model::new(cfg, seed).unwrap();
            let (back, manifest) = from_bytes(&to_bytes(&m, seed, epoch), Path::new("mem")).unwrap();
            proptest::prop_assert_eq!(back, m);
            proptest::prop_assert_eq!((manifest.seed, manifest.epoch), (seed, epoch));
        }
    }
}
