//! Checkpoint files.
//!
//! Layout: magic `b"UCKP"`, `u32` version, `u64` manifest length, the JSON
//! manifest, then one TNSR blob per entry of the manifest's tensor table,
//! in table order. Parameters and momentum buffers are stored as `f64`, so
//! a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::serialize::{Blob, BlobData};
use crate::tensor::Tensor;
use crate::volume::View;

pub const MAGIC: &[u8; 4] = b"UCKP";
pub const VERSION: u32 = 1;
pub const OPTIMIZER: &str = "sgd classic momentum";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean whole-tumor Dice on the validation cases, when evaluated.
    pub validation_wt_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub view: Option<View>,
    pub fold: Option<usize>,
    pub optimizer: String,
    pub learning_rate: f64,
    pub momentum: f64,
    pub history: Vec<EpochRecord>,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            view: None,
            fold: None,
            optimizer: OPTIMIZER.into(),
            learning_rate: 8e-3,
            momentum: 0.9,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub epoch: usize,
    pub params: ParameterSet,
    /// Momentum buffers keyed by trainable parameter name.
    pub velocity: BTreeMap<String, Tensor>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Velocity,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: NetworkSpec,
    seed: u64,
    epoch: usize,
    meta: TrainingMeta,
    tensors: Vec<TableEntry>,
}

impl Checkpoint {
    /// Untrained checkpoint with zero velocity.
    pub fn initial(spec: NetworkSpec, seed: u64, params: ParameterSet) -> Self {
        let velocity = params
            .trainable()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            spec,
            seed,
            epoch: 0,
            params,
            velocity,
            meta: TrainingMeta::default(),
        }
    }

    /// Checks parameters against the spec and velocity against parameters.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.params.validate(&self.spec)?;
        let trainable: Vec<(&str, &Tensor)> = self.params.trainable().collect();
        if trainable.len() != self.velocity.len() {
            return Err(Error::InvalidSpec(format!(
                "velocity has {} tensors, expected {}",
                self.velocity.len(),
                trainable.len()
            )));
        }
        for (name, t) in trainable {
            let v = self
                .velocity
                .get(name)
                .ok_or_else(|| Error::InvalidSpec(format!("missing velocity for {name}")))?;
            if v.shape() != t.shape() {
                return Err(Error::shape("velocity", t.shape(), v.shape()));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut tensors = Vec::new();
        let mut blobs = Vec::new();
        let entries = self
            .params
            .iter()
            .map(|(k, t)| (k, t, Group::Param))
            .chain(self.velocity.iter().map(|(k, t)| (k.as_str(), t, Group::Velocity)));
        for (name, t, group) in entries {
            tensors.push(TableEntry {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
            });
            blobs.extend(t.to_tnsr());
        }
        let manifest = serde_json::to_vec(&Manifest {
            spec: self.spec.clone(),
            seed: self.seed,
            epoch: self.epoch,
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format("checkpoint", "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("checkpoint", format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "manifest length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| Error::format("checkpoint", format!("manifest: {e}")))?;
        let mut rest = &bytes[end..];
        let mut params = ParameterSet::new();
        let mut velocity = BTreeMap::new();
        for entry in manifest.tensors {
            let blob = Blob::read_from(&mut rest)?;
            if blob.shape != entry.shape || !matches!(blob.data, BlobData::F64(_)) {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {} does not match its table entry", entry.name),
                ));
            }
            let t = Tensor::try_from(blob)?;
            let duplicate = match entry.group {
                Group::Param => params.insert(entry.name.clone(), t).is_some(),
                Group::Velocity => velocity.insert(entry.name.clone(), t).is_some(),
            };
            if duplicate {
                return Err(Error::format("checkpoint", format!("duplicate tensor {}", entry.name)));
            }
        }
        if !rest.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let ckpt = Self {
            spec: manifest.spec,
            seed: manifest.seed,
            epoch: manifest.epoch,
            params,
            velocity,
            meta: manifest.meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fsutil::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, Variant};

    fn sample() -> Checkpoint {
        let spec = NetworkSpec {
            depth: 2,
            ..NetworkSpec::with_width(4, Variant::MinorModsPlusAttention)
        };
        let params = build(&spec, 11).unwrap();
        let mut c = Checkpoint::initial(spec, 11, params);
        c.epoch = 3;
        c.meta.view = Some(View::Coronal);
        c.meta.history.push(EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            validation_wt_dice: Some(0.25),
        });
        c.velocity
            .values_mut()
            .for_each(|v| v.data_mut().iter_mut().for_each(|x| *x = 0.1 / 3.0));
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"UCKP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16 + len..16 + len + 4], b"TNSR");
    }

    #[test]
    fn shape_mismatch_rejected_on_load() {
        let mut c = sample();
        let mut bytes = c.encode().unwrap();
        // Widen the spec so every stored shape disagrees with it.
        c.spec.base_width = 5;
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        let patched = text.replacen("\"base_width\":4", "\"base_width\":5", 1);
        assert_ne!(text, patched);
        bytes.splice(16..16 + len, patched.into_bytes());
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Shape { .. })));
    }

    #[test]
    fn corruption_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
