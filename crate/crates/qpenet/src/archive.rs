//! Single-file container for named f64 buffers plus a JSON manifest.
//! Checkpoints and backbone weight files share this layout:
//!
//! ```text
//! magic "QPNARCH1" | manifest_len u64 LE | manifest JSON | raw f64 LE buffers
//! ```
//!
//! The manifest carries a format version, caller metadata, and the ordered
//! buffer directory (`name`, `shape`); buffer bytes follow in directory order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QPNARCH1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: Value,
    buffers: Vec<BufferEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_archive(
    path: &Path,
    meta: Value,
    buffers: &[(String, &ArrayD<f64>)],
) -> Result<()> {
    let manifest = Manifest {
        version: FORMAT_VERSION,
        meta,
        buffers: buffers
            .iter()
            .map(|(name, arr)| BufferEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, arr) in buffers {
        let contiguous = arr.as_standard_layout();
        for v in contiguous.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(Value, Vec<(String, ArrayD<f64>)>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not an archive file".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("truncated manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version,
            expected: FORMAT_VERSION,
        });
    }
    let mut buffers = Vec::with_capacity(manifest.buffers.len());
    for entry in manifest.buffers {
        let n: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; n];
        for slot in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| {
                Error::Checkpoint(format!("truncated buffer {}", entry.name))
            })?;
            *slot = f64::from_le_bytes(b);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad shape for {}: {e}", entry.name)))?;
        buffers.push((entry.name, arr));
    }
    Ok((manifest.meta, buffers))
}
