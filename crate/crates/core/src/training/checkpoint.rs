//! `SPP1` parameter containers.
//!
//! Layout (little-endian): magic `SPP1`, then per tensor `u32` name length,
//! UTF-8 name, `u32` rank, `rank` x `u32` dims, and the `f32` payload, until
//! end of file. The architecture and output mapping live in a JSON sidecar
//! next to the container (`<file>.json`).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Architecture, NamedTensor, Network, NetworkParams, OutputMap, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPP1";

pub fn write_params(path: &Path, params: &NetworkParams) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    for t in &params.tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.tensor.shape().len() as u32).to_le_bytes())?;
        for &d in t.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads an `SPP1` container. The init seed is not stored and reads as 0.
pub fn read_params(path: &Path) -> Result<NetworkParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing SPP1 magic"));
    }
    let mut c = Cursor {
        bytes: &bytes,
        pos: 4,
        path,
    };
    let mut tensors = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32()? as usize;
        let name =
            String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(NetworkParams { tensors, init_seed: 0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub output: OutputMap,
    pub init_seed: u64,
    #[serde(default)]
    pub encoder_id: Option<String>,
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub regime: Option<String>,
    #[serde(default)]
    pub fingerprint: Option<String>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_network(path: &Path, net: &Network, meta: &CheckpointMeta) -> Result<()> {
    write_params(path, &net.params)?;
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(sidecar(path), text)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side)?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let mut params = read_params(path)?;
    params.init_seed = meta.init_seed;
    let net = Network::from_params(meta.architecture.clone(), params, meta.output)?;
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spp");
        let mut net = Network::new(Architecture::head(133), 5).unwrap();
        net.params.round_to_f32();
        net.output = OutputMap::Affine {
            offset: 40.0,
            scale: 12.5,
        };
        let meta = CheckpointMeta {
            architecture: net.architecture().clone(),
            output: net.output,
            init_seed: 5,
            encoder_id: Some("psde".into()),
            task: Some("age".into()),
            regime: None,
            fingerprint: None,
        };
        save_network(&path, &net, &meta).unwrap();
        let (back, meta2) = load_network(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta2, meta);
    }

    #[test]
    fn bad_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.spp");
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_params(&path).is_err());
        fs::write(&path, b"SPP1\x05\x00\x00\x00ab").unwrap();
        assert!(matches!(read_params(&path), Err(Error::Format { .. })));
    }
}
