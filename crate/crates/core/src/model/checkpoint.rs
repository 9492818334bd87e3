//! Checkpoints: `manifest.json` (config, step, tensor index) next to `params.bin`
//! holding every tensor as little-endian f64, concatenated in manifest order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "bigs-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the params file.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    total_bytes: u64,
    tensors: Vec<TensorEntry>,
}

/// Model weights plus any extra named tensors (optimizer moments, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        Self {
            config: model.cfg.clone(),
            step,
            meta: serde_json::Value::Null,
            tensors: model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_tensors(
            self.config.clone(),
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)),
        )
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write into `dir` (created if needed). The params file lands before the
/// manifest, so a readable manifest always describes a complete buffer.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step: ckpt.step,
        config: ckpt.config.clone(),
        meta: ckpt.meta.clone(),
        total_bytes: bytes.len() as u64,
        tensors: entries,
    };
    write_atomic(&dir.join(PARAMS_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if bytes.len() as u64 != manifest.total_bytes {
        return Err(Error::format(
            "checkpoint",
            format!("params file has {} bytes, manifest expects {}", bytes.len(), manifest.total_bytes),
        ));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        let chunk = bytes.get(start..end).ok_or_else(|| {
            Error::format("checkpoint", format!("tensor `{}` runs past the params file", e.name))
        })?;
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        meta: manifest.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Routing};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(ModelConfig::toy(Arch::Gated, Routing::Ssm), 7).unwrap();
        let mut ck = Checkpoint::from_model(&m, 42);
        ck.tensors.push(("extra".into(), Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300])));
        save_checkpoint(dir.path(), &ck).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.step, 42);
        for ((na, a), (nb, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let m2 = back.model().unwrap();
        assert_eq!(m.forward_mlm(&[5, 9, 2, 7]).unwrap(), m2.forward_mlm(&[5, 9, 2, 7]).unwrap());
    }

    #[test]
    fn truncated_buffer_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(ModelConfig::toy(Arch::Stacked, Routing::Attention), 7).unwrap();
        save_checkpoint(dir.path(), &Checkpoint::from_model(&m, 0)).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }
}
