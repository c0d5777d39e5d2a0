//! Single-file checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MINDCKPT"  u32 format version  u64 manifest length  manifest (UTF-8 JSON)
//! then, for each parameter in manifest order, rows·cols f64 values row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mind::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"MINDCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub params: Vec<ParamShape>,
    /// Full run configuration the model was trained with, if any.
    pub run: Option<serde_json::Value>,
}

/// SHA-256 over the compact JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write_checkpoint<W: Write>(model: &Model, run: Option<&serde_json::Value>, mut w: W) -> Result<()> {
    let params = model
        .store
        .ids()
        .map(|id| {
            let v = model.store.value(id);
            ParamShape {
                name: model.store.name(id).to_string(),
                rows: v.rows(),
                cols: v.cols(),
            }
        })
        .collect();
    let config_hash = match run {
        Some(r) => config_hash(r)?,
        None => config_hash(&model.config)?,
    };
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash,
        seed: model.seed,
        model: model.config.clone(),
        params,
        run: run.cloned(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let io = |e| fmt_err(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for id in model.store.ids() {
        for v in model.store.value(id).as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, CheckpointManifest)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt_err("truncated header"))?;
    if &magic != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| fmt_err("truncated header"))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| fmt_err("truncated header"))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| fmt_err("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;

    let mut model = Model::new(manifest.model.clone(), manifest.seed)?;
    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != manifest.params.len() {
        return Err(Error::ConfigMismatch(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.params.len(),
            ids.len()
        )));
    }
    for (id, shape) in ids.into_iter().zip(&manifest.params) {
        let value = model.store.value(id);
        if model.store.name(id) != shape.name || value.shape() != (shape.rows, shape.cols) {
            return Err(Error::ConfigMismatch(format!(
                "tensor {} {:?} does not match manifest entry {} {:?}",
                model.store.name(id),
                value.shape(),
                shape.name,
                (shape.rows, shape.cols)
            )));
        }
        for v in model.store.value_mut(id).as_mut_slice() {
            r.read_exact(&mut b8).map_err(|_| fmt_err("truncated parameter blob"))?;
            *v = f64::from_le_bytes(b8);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| fmt_err(e.to_string()))? != 0 {
        return Err(fmt_err("trailing bytes after parameter blobs"));
    }
    if !model.store.all_finite() {
        return Err(Error::NonFiniteInput("checkpoint parameters".into()));
    }
    Ok((model, manifest))
}

pub fn save_checkpoint(model: &Model, run: Option<&serde_json::Value>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, run, BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sadgate::RouterMode;

    fn model() -> Model {
        Model::new(
            ModelConfig {
                d_in: 3,
                d: 4,
                h: 5,
                o: 2,
                e: 3,
                k: 2,
                s: 2,
                router: RouterMode::Both,
                afire: true,
                afire_hidden: 4,
                w_max: 6,
            },
            17,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        let id = m.router().alpha;
        m.store.value_mut(id).as_mut_slice()[1] = -0.1 + 1e-17;
        let mut buf = Vec::new();
        write_checkpoint(&m, None, &mut buf).unwrap();
        let (back, manifest) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(manifest.seed, 17);
        for id in m.store.ids() {
            let a = m.store.value(id).as_slice();
            let b = back.store.value(id).as_slice();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        write_checkpoint(&back, None, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&model(), None, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
