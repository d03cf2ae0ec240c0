//! Binary weight container used by every model artifact.
//!
//! Layout: the format string and a newline, one line of JSON header, then the
//! concatenated little-endian `f32` payload of every tensor in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::sha256_hex;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorMeta {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorMeta>,
    payload_sha256: String,
}

/// Decoded checkpoint: the free-form metadata and tensors grouped by store.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub groups: Vec<(String, Vec<(String, Tensor)>)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&[(String, Tensor)]> {
        self.groups
            .iter()
            .find(|(g, _)| g == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| Error::Corrupt(format!("checkpoint has no `{name}` group")))
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

pub fn encode_checkpoint(format: &str, meta: &impl Serialize, stores: &[(&str, &ParamStore)]) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in stores {
        for e in store.entries() {
            tensors.push(TensorMeta {
                group: group.to_string(),
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            });
            for x in e.value.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = Header {
        meta: serde_json::to_value(meta)?,
        tensors,
        payload_sha256: sha256_hex(&payload),
    };
    let mut out = Vec::with_capacity(payload.len() + 4096);
    out.extend_from_slice(format.as_bytes());
    out.push(b'\n');
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], format: &str) -> Result<Checkpoint> {
    let magic_end = bytes.iter().position(|&b| b == b'\n');
    let found = match magic_end {
        Some(i) => String::from_utf8_lossy(&bytes[..i]).into_owned(),
        None => String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).into_owned(),
    };
    if found != format {
        return Err(Error::FormatVersion {
            expected: format.to_string(),
            found,
        });
    }
    let rest = &bytes[magic_end.unwrap() + 1..];
    let header_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Corrupt("missing checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..header_end])?;
    let payload = &rest[header_end + 1..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(Error::Corrupt("checkpoint payload checksum mismatch".into()));
    }
    let mut groups: Vec<(String, Vec<(String, Tensor)>)> = Vec::new();
    let mut offset = 0usize;
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let end = offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Corrupt("checkpoint payload truncated".into()));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset = end;
        let tensor = Tensor::new(t.shape, data)?;
        match groups.iter_mut().find(|(g, _)| *g == t.group) {
            Some((_, v)) => v.push((t.name, tensor)),
            None => groups.push((t.group, vec![(t.name, tensor)])),
        }
    }
    if offset != payload.len() {
        return Err(Error::Corrupt("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint {
        meta: header.meta,
        groups,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
