//! Adapter checkpoints: `ckpt.json` next to a `weights.bin` container.
//!
//! The weights blob header holds the tensor count and the total float count;
//! the payload is every tensor of [`Param::ALL`] in order, row-major. The
//! manifest lists each tensor's name, payload offset (in floats), and shape.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterDims, AdapterParams, Param};
use crate::container::{self, CKPT_MAGIC};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_VERSION: u32 = 1;
pub const CKPT_MANIFEST: &str = "ckpt.json";
pub const CKPT_BLOB: &str = "weights.bin";

/// Modelling choices every checkpoint records about itself.
pub const DEFAULT_DECISIONS: &[&str] = &[
    "residual: each direction adds the CLS token of its query region",
    "layer norm: applied at the down-projected width after the attention residual",
    "pair embedding: mean of subject->object (subject marker) and object->subject (object marker)",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams<f32>,
    pub seed: u64,
    pub temperature: f64,
    pub epochs_completed: usize,
    pub decisions: Vec<String>,
    /// Effective training configuration, or null for an untrained init.
    pub train_config: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptManifest {
    version: u32,
    engine_version: String,
    id: String,
    dims: AdapterDims,
    seed: u64,
    temperature: f64,
    epochs_completed: usize,
    decisions: Vec<String>,
    train_config: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(params: AdapterParams<f32>, seed: u64, temperature: f64) -> Self {
        Self {
            params,
            seed,
            temperature,
            epochs_completed: 0,
            decisions: DEFAULT_DECISIONS.iter().map(|s| s.to_string()).collect(),
            train_config: Value::Null,
        }
    }

    fn payload(&self) -> Vec<f32> {
        self.params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn blob_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        container::encode_blob(CKPT_MAGIC, Param::ALL.len() as u32, payload.len() as u32, &payload)
    }

    /// First 16 hex digits of the SHA-256 of the weights blob.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.blob_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        container::ensure_dir(dir)?;
        let dims = *self.params.dims();
        let mut offset = 0;
        let tensors = Param::ALL
            .iter()
            .map(|&p| {
                let shape = p.shape(&dims);
                let entry = TensorEntry {
                    name: p.name().to_string(),
                    offset,
                    shape: shape.clone(),
                };
                offset += shape.iter().product::<usize>();
                entry
            })
            .collect();
        let manifest = CkptManifest {
            version: CKPT_VERSION,
            engine_version: crate::ENGINE_VERSION.to_string(),
            id: self.id(),
            dims,
            seed: self.seed,
            temperature: self.temperature,
            epochs_completed: self.epochs_completed,
            decisions: self.decisions.clone(),
            train_config: self.train_config.clone(),
            tensors,
        };
        container::write_json(&dir.join(CKPT_MANIFEST), &manifest)?;
        let path = dir.join(CKPT_BLOB);
        std::fs::write(&path, self.blob_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(CKPT_MANIFEST);
        let blob_path = dir.join(CKPT_BLOB);
        let m: CkptManifest = container::read_json(&manifest_path)?;
        if m.version != CKPT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint version {}",
                manifest_path.display(),
                m.version
            )));
        }
        m.dims.validate()?;
        if m.tensors.len() != Param::ALL.len() {
            return Err(Error::Validation(format!(
                "{}: {} tensors listed, expected {}",
                manifest_path.display(),
                m.tensors.len(),
                Param::ALL.len()
            )));
        }
        let mut expected_offset = 0;
        for (p, entry) in Param::ALL.iter().zip(&m.tensors) {
            let want = p.shape(&m.dims);
            if entry.name != p.name() || entry.shape != want || entry.offset != expected_offset {
                return Err(Error::Validation(format!(
                    "{}: tensor entry `{}` at offset {} with shape {:?}; expected `{}` at {} with {:?}",
                    manifest_path.display(),
                    entry.name,
                    entry.offset,
                    entry.shape,
                    p.name(),
                    expected_offset,
                    want
                )));
            }
            expected_offset += want.iter().product::<usize>();
        }
        let total = expected_offset;
        let blob = container::read_blob(&blob_path, CKPT_MAGIC, |count, floats| {
            if count as usize != Param::ALL.len() || floats as usize != total {
                return Err(Error::format(
                    &blob_path,
                    8,
                    format!(
                        "header says {count} tensors / {floats} floats; manifest implies {} / {total}",
                        Param::ALL.len()
                    ),
                ));
            }
            Ok(total)
        })?;
        let tensors = Param::ALL
            .iter()
            .zip(&m.tensors)
            .map(|(p, e)| {
                let n: usize = e.shape.iter().product();
                Tensor::new(p.shape(&m.dims), blob.payload[e.offset..e.offset + n].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let ckpt = Self {
            params: AdapterParams::from_tensors(m.dims, tensors)?,
            seed: m.seed,
            temperature: m.temperature,
            epochs_completed: m.epochs_completed,
            decisions: m.decisions,
            train_config: m.train_config,
        };
        if ckpt.id() != m.id {
            return Err(Error::Validation(format!(
                "{}: id {} does not match weights ({})",
                manifest_path.display(),
                m.id,
                ckpt.id()
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_params;

    fn ckpt() -> Checkpoint {
        Checkpoint::new(init_params(AdapterDims::small(8), 3).unwrap(), 3, 10.0)
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt();
        c.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn id_tracks_weights() {
        let a = ckpt();
        let mut b = a.clone();
        assert_eq!(a.id(), b.id());
        b.params.get_mut(Param::FuseBias).data_mut()[0] = 1.0;
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id().len(), 16);
    }

    #[test]
    fn corrupted_weights_are_located() {
        let dir = tempfile::tempdir().unwrap();
        ckpt().save(dir.path()).unwrap();
        let path = dir.path().join(CKPT_BLOB);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(dir.path()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tampered_weights_fail_id_check() {
        let dir = tempfile::tempdir().unwrap();
        ckpt().save(dir.path()).unwrap();
        let path = dir.path().join(CKPT_BLOB);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Validation(_))));
    }
}
