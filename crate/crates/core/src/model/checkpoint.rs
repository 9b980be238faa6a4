//! Single-file checkpoint: magic, format version, a JSON header (config,
//! recipe, class table, log, provenance and the tensor manifest), then every
//! tensor as little-endian f32 in manifest order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::Network;
use super::train::{EpochLog, TrainRecipe};
use super::ModelConfig;
use crate::targets::ClassTable;

const MAGIC: &[u8; 8] = b"CHRECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    #[default]
    EpochsCompleted,
    EarlyStopped,
    /// Interrupted by the wall-clock budget; the run can be resumed.
    TimeBudget,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub dataset_hash: Option<String>,
    /// Epoch whose weights the checkpoint holds, when validation ran.
    pub best_epoch: Option<u32>,
    pub stop_reason: StopReason,
    pub train_images: usize,
    pub val_images: usize,
    pub train_seconds: f64,
    /// Caller metadata such as the effective run config.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub recipe: TrainRecipe,
    pub class_table: ClassTable,
    pub log: Vec<EpochLog>,
    pub provenance: Provenance,
    pub network: Network,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: stored shape {stored:?}, config implies {expected:?}")]
    Shape { name: String, stored: Vec<usize>, expected: Vec<usize> },
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    recipe: TrainRecipe,
    class_table: ClassTable,
    log: Vec<EpochLog>,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// The run needs no further epochs.
    pub fn is_finished(&self) -> bool {
        self.provenance.stop_reason != StopReason::TimeBudget
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        let params = self.network.params();
        let header = Header {
            config: self.config.clone(),
            recipe: self.recipe.clone(),
            class_table: self.class_table.clone(),
            log: self.log.clone(),
            provenance: self.provenance.clone(),
            tensors: params.iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in params {
            let bytes: Vec<u8> = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        header.config.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;

        // Build the architecture, then overwrite every tensor.
        let mut network = Network::new(&header.config, 0);
        let mut params = network.params_mut();
        if params.len() != header.tensors.len() {
            return Err(CheckpointError::Header(format!("{} tensors stored, config implies {}", header.tensors.len(), params.len())));
        }
        for (p, t) in params.iter_mut().zip(&header.tensors) {
            if p.name != t.name || p.shape != t.shape {
                return Err(CheckpointError::Shape { name: t.name.clone(), stored: t.shape.clone(), expected: p.shape.clone() });
            }
            let mut bytes = vec![0u8; p.len() * 4];
            r.read_exact(&mut bytes)?;
            for (v, c) in p.value.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok(Checkpoint {
            config: header.config,
            recipe: header.recipe,
            class_table: header.class_table,
            log: header.log,
            provenance: header.provenance,
            network,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{layers::Act, HeadType};

    fn sample_checkpoint(head: HeadType) -> Checkpoint {
        let config = ModelConfig { head, ..ModelConfig::desk(32) };
        Checkpoint {
            network: Network::new(&config, 9),
            recipe: TrainRecipe::classification(),
            class_table: ClassTable::canonical(),
            log: vec![],
            provenance: Provenance { seed: 9, dataset_hash: Some("abc".into()), ..Default::default() },
            config,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for head in [HeadType::Classification, HeadType::RelativeDetection] {
            let ckpt = sample_checkpoint(head);
            let mut buf = Vec::new();
            ckpt.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, ckpt);
            let mut x = Act::zeros(1, 3, 32, 32);
            x.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin());
            let (a, b) = (ckpt.network.forward(x.clone()), back.network.forward(x));
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::read_from(&mut &b"NOTACKPT...."[..]), Err(CheckpointError::BadMagic)));
        let mut buf = Vec::new();
        sample_checkpoint(HeadType::Classification).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 10);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(CheckpointError::Io(_))));
    }
}
