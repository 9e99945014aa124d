//! Checkpoint container: magic, format version, a JSON header (model
//! config, vocabulary hash, parameter count) and little-endian f64
//! parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SidModel, Vocabulary};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SIDRECKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    num_params: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Writes `model`; `extra` is echoed verbatim in the header.
pub fn save_checkpoint(model: &SidModel, vocab: &Vocabulary, extra: serde_json::Value, path: &Path) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        vocab_hash: vocab.hash(),
        num_params: model.num_params(),
        extra,
    };
    let h = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + h.len() + 8 * model.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(h.len() as u64).to_le_bytes());
    buf.extend_from_slice(&h);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, refusing one trained against a different
/// vocabulary.
pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<(SidModel, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: &str| Error::Corrupt {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    if header.vocab_hash != vocab.hash() {
        return Err(Error::VocabMismatch {
            checkpoint: header.vocab_hash,
            current: vocab.hash(),
        });
    }
    let data = &bytes[20 + hlen..];
    if data.len() != 8 * header.num_params {
        return Err(corrupt("parameter block has the wrong length"));
    }
    let params = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((SidModel::from_parts(header.config, params)?, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::build_vocab;
    use crate::genmodel::tests::{full_map, small_map};

    #[test]
    fn roundtrip_and_vocab_guard() {
        let v = build_vocab(&small_map()).unwrap();
        let mut cfg = ModelConfig::new(v.len());
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.context = 16;
        cfg.head_init_std = 0.3;
        let m = SidModel::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &v, serde_json::json!({"stage": "sft"}), &p).unwrap();
        let (back, extra) = load_checkpoint(&p, &v).unwrap();
        assert_eq!(back, m);
        assert_eq!(extra["stage"], "sft");

        let other = build_vocab(&full_map(2, 3)).unwrap();
        assert!(matches!(load_checkpoint(&p, &other), Err(Error::VocabMismatch { .. })));

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p, &v), Err(Error::Corrupt { .. })));
    }
}
