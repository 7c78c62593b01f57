//! Binary checkpoint container.
//!
//! ```text
//! b"LRCK" | u32 version | u64 header length | JSON header | tensor data
//! ```
//!
//! The header carries the model config, vocabulary, layout settings and the
//! name and shape of every tensor. Tensor data follows in header order as
//! little-endian floats of the build's precision, so a save/load round trip
//! is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::datagen::Vocab;
use crate::engine::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rerank with a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub vocab: Vocab,
    pub num_slots: usize,
    pub max_candidate_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vocab,
    num_slots: usize,
    max_candidate_tokens: usize,
    float_bytes: usize,
    tensors: Vec<(String, Vec<usize>)>,
}

const FLOAT_BYTES: usize = std::mem::size_of::<Real>();

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        model: ckpt.params.config.clone(),
        vocab: ckpt.vocab.clone(),
        num_slots: ckpt.num_slots,
        max_candidate_tokens: ckpt.max_candidate_tokens,
        float_bytes: FLOAT_BYTES,
        tensors: ckpt
            .params
            .names()
            .into_iter()
            .zip(&ckpt.params.tensors)
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for t in &ckpt.params.tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let bad = |m: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: m,
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.float_bytes != FLOAT_BYTES {
        return Err(bad(format!(
            "checkpoint stores {}-byte floats, this build uses {}",
            header.float_bytes, FLOAT_BYTES
        )));
    }
    header.model.validate()?;
    if header.tensors != header.model.tensor_specs() {
        return Err(bad("tensor table does not match the model config".into()));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; FLOAT_BYTES];
    for (_, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(Real::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(shape.clone(), data));
    }
    if r.read(&mut [0u8; 1]).map_err(io)? != 0 {
        return Err(bad("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        params: Parameters {
            config: header.model,
            tensors,
        },
        vocab: header.vocab,
        num_slots: header.num_slots,
        max_candidate_tokens: header.max_candidate_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, PositionScheme};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            vocab_size: 100,
            position: PositionScheme::LearnedAbsolute,
            ..ModelConfig::default()
        };
        let mut params = init_params(&cfg).unwrap();
        params.tensors[3].data_mut()[0] = Real::MIN_POSITIVE / 3.0;
        let ckpt = Checkpoint {
            params,
            vocab: Vocab::synthetic(100, 3, 10).unwrap(),
            num_slots: 3,
            max_candidate_tokens: 9,
        };
        save_checkpoint(&p, &ckpt).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.params.tensors.iter().zip(&ckpt.params.tensors) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        std::fs::write(&p, b"hello world, not a model").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
