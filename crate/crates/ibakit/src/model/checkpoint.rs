use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Vocab};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IBAKIT01";
const FORMAT_VERSION: u32 = 1;

/// One named parameter tensor's raw storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            data: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub epochs: usize,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: f64,
    /// Mean training-set cross entropy evaluated after each epoch.
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
    pub seed: u64,
}

/// Trained model parameters plus everything needed to run them.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: BTreeMap<String, Param>,
    pub metadata: TrainMetadata,
}

/// The closed set of parameter names and shapes for a config.
pub fn expected_params(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("embed.tok".into(), vec![cfg.vocab_size, d]),
        ("embed.pos".into(), vec![cfg.max_seq_len, d]),
        ("head.w".into(), vec![d, cfg.n_classes]),
        ("head.b".into(), vec![cfg.n_classes]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            out.push((p(name), vec![d, d]));
        }
        for name in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            out.push((p(name), vec![d]));
        }
        out.push((p("ffn.w1"), vec![d, cfg.d_ff]));
        out.push((p("ffn.b1"), vec![cfg.d_ff]));
        out.push((p("ffn.w2"), vec![cfg.d_ff, d]));
        out.push((p("ffn.b2"), vec![d]));
        for name in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
            out.push((p(name), vec![d]));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

impl ModelCheckpoint {
    /// Errors unless the parameter set matches the closed set exactly and
    /// every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = expected_params(&self.config);
        if expected.len() != self.params.len() {
            let have: Vec<&String> = self.params.keys().collect();
            return Err(Error::Parameter(format!(
                "expected {} parameters, found {} ({have:?})",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in &expected {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))?;
            if &p.shape != shape {
                return Err(Error::Parameter(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape
                )));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "non-finite value in parameter {name}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut manifest = Vec::new();
        let mut offset = 0u64;
        for (name, p) in &self.params {
            let bytes = (p.data.len() * 8) as u64;
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: p.shape.clone(),
                byte_offset: offset,
                byte_len: bytes,
            });
            offset += bytes;
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            metadata: self.metadata.clone(),
            manifest,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        for p in self.params.values() {
            for v in &p.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Truncated("missing magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic bytes {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)
            .map_err(|_| Error::Truncated("missing header length".into()))?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes)
            .map_err(|_| Error::Truncated("header shorter than declared".into()))?;
        let mut header: Header =
            serde_json::from_slice(&hbytes).map_err(|e| Error::Format(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: FORMAT_VERSION,
            });
        }
        header.vocab.rebuild_index();

        let mut params = BTreeMap::new();
        for entry in &header.manifest {
            let n = (entry.byte_len / 8) as usize;
            let mut buf = vec![0u8; entry.byte_len as usize];
            f.read_exact(&mut buf)
                .map_err(|_| Error::Truncated(format!("payload for {}", entry.name)))?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            debug_assert_eq!(data.len(), n);
            params.insert(
                entry.name.clone(),
                Param {
                    shape: entry.shape.clone(),
                    data,
                },
            );
        }
        let ckpt = ModelCheckpoint {
            config: header.config,
            vocab: header.vocab,
            params,
            metadata: header.metadata,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    metadata: TrainMetadata,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}
