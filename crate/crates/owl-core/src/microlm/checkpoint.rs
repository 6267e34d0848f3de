//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   : 4 bytes  "OWLM"
//! version : u32      (currently 1)
//! config  : 8 x u32  layers, heads, dim, vocab, feat_dim, visual_slots,
//!                    max_positions, mlp_hidden
//! count   : u32      number of named tensors
//! tensor  : u32 name length, UTF-8 name, u64 element count,
//!           elements as f64 little-endian   (repeated `count` times)
//! ```
//!
//! Tensors appear in layout order and hold raw `f64` bits, so a
//! save/load round trip is bit-exact. A JSON manifest sidecar
//! (`<path>.manifest.json`) mirrors the shapes for inspection.

use std::path::Path;

use serde::Serialize;

use crate::fingerprint::sha256_hex;

use super::{ModelConfig, ModelError, ModelParams, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OWLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct ManifestTensor<'a> {
    name: &'a str,
    rows: usize,
    cols: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: u32,
    config: &'a ModelConfig,
    tensors: Vec<ManifestTensor<'a>>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let end = *at + 4;
    let slice = bytes
        .get(*at..end)
        .ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
    *at = end;
    Ok(u32::from_le_bytes(slice.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], at: &mut usize) -> Result<u64> {
    let end = *at + 8;
    let slice = bytes
        .get(*at..end)
        .ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
    *at = end;
    Ok(u64::from_le_bytes(slice.try_into().unwrap()))
}

/// Serializes `params` to `path` (plus a `.manifest.json` sidecar) and
/// returns the SHA-256 of the checkpoint bytes.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<String> {
    let cfg = params.config();
    let mut bytes = Vec::with_capacity(params.num_params() * 8 + 1024);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut bytes, CHECKPOINT_VERSION);
    for v in [
        cfg.layers,
        cfg.heads,
        cfg.dim,
        cfg.vocab,
        cfg.feat_dim,
        cfg.visual_slots,
        cfg.max_positions,
        cfg.mlp_hidden,
    ] {
        push_u32(&mut bytes, v as u32);
    }
    let specs = params.layout().specs();
    push_u32(&mut bytes, specs.len() as u32);
    for spec in specs {
        push_u32(&mut bytes, spec.name.len() as u32);
        bytes.extend_from_slice(spec.name.as_bytes());
        bytes.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        for &v in &params.buf()[spec.offset..spec.offset + spec.len()] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &bytes)?;

    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: cfg,
        tensors: specs
            .iter()
            .map(|s| ManifestTensor {
                name: &s.name,
                rows: s.rows,
                cols: s.cols,
            })
            .collect(),
    };
    let manifest_path = manifest_path(path);
    std::fs::write(
        manifest_path,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?
            + "\n",
    )?;

    Ok(sha256_hex(&bytes))
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    os.into()
}

/// Loads a checkpoint, returning the parameters and the file's SHA-256.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, String)> {
    let bytes = std::fs::read(path)?;
    let hash = sha256_hex(&bytes);
    if bytes.len() < 4 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut at = 4;
    let version = read_u32(&bytes, &mut at)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = read_u32(&bytes, &mut at)? as usize;
    }
    let config = ModelConfig {
        layers: fields[0],
        heads: fields[1],
        dim: fields[2],
        vocab: fields[3],
        feat_dim: fields[4],
        visual_slots: fields[5],
        max_positions: fields[6],
        mlp_hidden: fields[7],
    };
    config.validate()?;

    let layout = super::Layout::new(&config);
    let count = read_u32(&bytes, &mut at)? as usize;
    if count != layout.specs().len() {
        return Err(ModelError::Checkpoint(format!(
            "tensor count {count} does not match layout ({})",
            layout.specs().len()
        )));
    }
    let mut buf = vec![0.0; layout.total_params()];
    for spec in layout.specs() {
        let name_len = read_u32(&bytes, &mut at)? as usize;
        let name_end = at + name_len;
        let name = std::str::from_utf8(
            bytes
                .get(at..name_end)
                .ok_or_else(|| ModelError::Checkpoint("truncated name".into()))?,
        )
        .map_err(|_| ModelError::Checkpoint("non-UTF-8 tensor name".into()))?;
        at = name_end;
        if name != spec.name {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name:?} out of order, expected {:?}",
                spec.name
            )));
        }
        let len = read_u64(&bytes, &mut at)? as usize;
        if len != spec.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name:?} has {len} elements, expected {}",
                spec.len()
            )));
        }
        for i in 0..len {
            let end = at + 8;
            let slice = bytes
                .get(at..end)
                .ok_or_else(|| ModelError::Checkpoint("truncated tensor data".into()))?;
            buf[spec.offset + i] = f64::from_le_bytes(slice.try_into().unwrap());
            at = end;
        }
    }
    if at != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }

    Ok((ModelParams::from_parts(config, buf)?, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::{forward_step, DecodeState, ModelConfig};
    use crate::tensorcore::{Matrix, Rng};

    #[test]
    fn round_trip_is_bit_exact_and_preserves_logits() {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            vocab: 10,
            feat_dim: 4,
            visual_slots: 2,
            max_positions: 16,
            mlp_hidden: 20,
        };
        let params = ModelParams::init(cfg.clone(), &mut Rng::new(9), 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.owlm");
        let hash_saved = save_checkpoint(&params, &path).unwrap();
        let (loaded, hash_loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(hash_saved, hash_loaded);
        assert_eq!(params.buf(), loaded.buf());
        assert!(manifest_path(&path).exists());

        let feats = Matrix::from_vec(2, 4, vec![0.3, -0.1, 0.7, 0.2, 0.0, 1.1, -0.4, 0.5]).unwrap();
        let mut s1 = DecodeState::new(&params, feats.clone()).unwrap();
        s1.push_token(0);
        let a = forward_step(&params, &mut s1, None).unwrap();
        let mut s2 = DecodeState::new(&loaded, feats).unwrap();
        s2.push_token(0);
        let b = forward_step(&loaded, &mut s2, None).unwrap();
        assert_eq!(a.logits, b.logits, "logits must be bit-identical");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.owlm");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
