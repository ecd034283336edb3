//! Checkpoint file layout (all integers and floats little-endian):
//!
//! ```text
//! "TCG1"  u32 version (1)  u32 header length  header JSON
//! parameter tensors, row-major f64, in ModelParams::groups() order
//! if the header has an optimizer step: first moments, then second moments, same order
//! loss history: per record, u8 stage then f64 loss
//! ```
//!
//! The header records dims, mode, vocabulary words, training configuration and
//! the group names with their lengths.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::{ModelConfig, TrainConfig};
use super::schedule::LossRecord;
use crate::error::{Error, Result};
use crate::model::{GuidanceMode, GuidanceVariant, ModelDims, ModelParams};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TCG1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Iteration numbers are the record's 1-based position.
    pub losses: Vec<LossRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub mode: GuidanceMode,
    /// Ordinary vocabulary words, ids 3 onwards.
    pub vocab: Vec<String>,
    pub metadata: TrainMetadata,
    pub optimizer: Option<AdamState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: ModelDims,
    full_tensor: bool,
    mode: GuidanceMode,
    vocab: Vec<String>,
    train: TrainConfig,
    model: ModelConfig,
    groups: Vec<(String, usize)>,
    optimizer_step: Option<u64>,
    losses: usize,
}

fn put_f64s(out: &mut Vec<u8>, params: &ModelParams) {
    for g in params.groups() {
        for v in params.slice(g) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fill(&mut self, params: &mut ModelParams) -> Result<()> {
        for g in params.groups() {
            for v in params.slice_mut(g).iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_words(self.vocab.iter())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dims: self.params.dims,
            full_tensor: self.params.full_tensor.is_some(),
            mode: self.mode,
            vocab: self.vocab.clone(),
            train: self.metadata.train.clone(),
            model: self.metadata.model.clone(),
            groups: self
                .params
                .groups()
                .into_iter()
                .map(|g| (g.name(), self.params.slice(g).len()))
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|s| s.step),
            losses: self.metadata.losses.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * 3 * self.params.num_parameters());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        put_f64s(&mut out, &self.params);
        if let Some(state) = &self.optimizer {
            put_f64s(&mut out, &state.m);
            put_f64s(&mut out, &state.v);
        }
        for r in &self.metadata.losses {
            out.push(r.stage);
            out.extend_from_slice(&r.loss.to_le_bytes());
        }
        Ok(out)
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Format(format!("{}: checkpoint header: {e}", path.display())))?;
        header.mode.validate()?;
        if header.mode.variant == GuidanceVariant::FullTensor && !header.full_tensor {
            return Err(Error::Format("full-tensor checkpoint without tensor parameters".into()));
        }

        let mut params = ModelParams::zeros(header.dims, header.full_tensor)?;
        let layout: Vec<(String, usize)> = params
            .groups()
            .into_iter()
            .map(|g| (g.name(), params.slice(g).len()))
            .collect();
        if layout != header.groups {
            return Err(Error::DimMismatch(format!(
                "{}: tensor layout in header does not match dims {:?}",
                path.display(),
                header.dims
            )));
        }
        r.fill(&mut params)?;
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut state = AdamState::new(&params);
                state.step = step;
                r.fill(&mut state.m)?;
                r.fill(&mut state.v)?;
                Some(state)
            }
            None => None,
        };
        let mut losses = Vec::with_capacity(header.losses);
        for i in 0..header.losses {
            let stage = r.take(1)?[0];
            let loss = r.f64()?;
            losses.push(LossRecord {
                iteration: i + 1,
                stage,
                loss,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after checkpoint",
                path.display(),
                bytes.len() - r.pos
            )));
        }
        let ckpt = Checkpoint {
            params,
            mode: header.mode,
            vocab: header.vocab,
            metadata: TrainMetadata {
                train: header.train,
                model: header.model,
                losses,
            },
            optimizer,
        };
        if ckpt.vocab.len() + crate::vocab::RESERVED != ckpt.params.dims.vocab {
            return Err(Error::DimMismatch(format!(
                "{}: {} vocabulary words for a model vocabulary of {}",
                path.display(),
                ckpt.vocab.len(),
                ckpt.params.dims.vocab
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::numerics::TransferKind;

    fn sample(with_tensor: bool, optimizer: bool) -> Checkpoint {
        let dims = ModelDims { vocab: 6, embed: 2, hidden: 3, image: 2, raw: 3 };
        let params = ModelParams::random(dims, with_tensor, 1.0, 4).unwrap();
        let optimizer = optimizer.then(|| {
            let mut s = AdamState::new(&params);
            s.step = 17;
            s.m = ModelParams::random(dims, with_tensor, 0.1, 5).unwrap();
            s.v = ModelParams::random(dims, with_tensor, 0.2, 6).unwrap();
            s
        });
        let variant = if with_tensor { GuidanceVariant::FullTensor } else { GuidanceVariant::NGram { n: 2 } };
        Checkpoint {
            params,
            mode: GuidanceMode::new(variant, TransferKind::Softmax),
            vocab: vec!["a".into(), "b".into(), "c".into()],
            metadata: TrainMetadata {
                train: TrainConfig { lr_lm: 0.1 + 0.2, ..TrainConfig::default() },
                model: ModelConfig::default(),
                losses: vec![
                    LossRecord { iteration: 1, stage: 1, loss: std::f64::consts::PI },
                    LossRecord { iteration: 2, stage: 3, loss: 1e-300 },
                ],
            },
            optimizer,
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let p = Path::new("mem");
        for (t, o) in [(false, false), (false, true), (true, true)] {
            let ck = sample(t, o);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, p).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem");
        let bytes = sample(false, true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::UnsupportedVersion { version: 2, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long, p), Err(Error::Format(_))));
    }
}
