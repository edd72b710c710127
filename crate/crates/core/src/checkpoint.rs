// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint files: the F32 subset of the safetensors layout.
//!
//! ```text
//! [u64 LE header length N][N bytes JSON header][packed LE f32 data]
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, data_offsets}` with
//! offsets relative to the start of the data region. An optional
//! `__metadata__` entry is accepted and ignored. Writers emit tensors in name
//! order and pad the header with spaces to a multiple of 8 bytes, so the output
//! is a pure function of the map.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::io::{atomic_write, read_bytes};
use crate::{DenseTensor, Error, Result, TensorMap};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER: u64 = 100 * 1024 * 1024;

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Header object that rejects repeated keys instead of keeping the last one.
struct Header(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for Header {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Header;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> std::result::Result<Header, A::Error> {
                let mut seen = std::collections::HashSet::new();
                let mut out = Vec::new();
                while let Some((k, v)) = m.next_entry::<String, serde_json::Value>()? {
                    if !seen.insert(k.clone()) {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate tensor name {k:?}"
                        )));
                    }
                    out.push((k, v));
                }
                Ok(Header(out))
            }
        }
        d.deserialize_map(V)
    }
}

pub fn to_bytes(map: &TensorMap) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, t) in map.iter() {
        let end = offset + t.len() * 4;
        header.insert(
            name.to_string(),
            HeaderEntry {
                dtype: "F32".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, end],
            },
        );
        offset = end;
    }
    let mut json = serde_json::to_vec(&header).expect("header serialization cannot fail");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in map.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if n > MAX_HEADER || 8 + n > bytes.len() as u64 {
        return Err(Error::Format(format!(
            "header length {n} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_bytes = &bytes[8..8 + n as usize];
    let text = std::str::from_utf8(header_bytes)
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let Header(raw) = serde_json::from_str(text.trim_end())
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let data = &bytes[8 + n as usize..];

    let mut entries = Vec::with_capacity(raw.len());
    for (name, value) in raw {
        if name == METADATA_KEY {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("entry {name:?}: {e}")))?;
        if entry.dtype != "F32" {
            return Err(Error::Format(format!(
                "tensor {name:?} has unsupported dtype {}",
                entry.dtype
            )));
        }
        entries.push((name, entry));
    }

    // Offsets must tile the data region exactly.
    let mut spans: Vec<(usize, usize, &str)> = entries
        .iter()
        .map(|(n, e)| (e.data_offsets[0], e.data_offsets[1], n.as_str()))
        .collect();
    spans.sort();
    let mut cursor = 0usize;
    for &(begin, end, name) in &spans {
        if begin != cursor || end < begin {
            return Err(Error::Format(format!(
                "tensor {name:?} offsets [{begin}, {end}] leave a gap or overlap at byte {cursor}"
            )));
        }
        cursor = end;
    }
    if cursor != data.len() {
        return Err(Error::Format(format!(
            "header declares {cursor} data bytes but the file holds {}",
            data.len()
        )));
    }

    let mut map = TensorMap::new();
    for (name, e) in entries {
        let [begin, end] = e.data_offsets;
        let count: usize = e.shape.iter().product();
        if end - begin != count * 4 {
            return Err(Error::Format(format!(
                "tensor {name:?} with shape {:?} needs {} bytes, offsets span {}",
                e.shape,
                count * 4,
                end - begin
            )));
        }
        let values = data[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = DenseTensor::new(e.shape, values)
            .map_err(|err| Error::Format(format!("tensor {name:?}: {err}")))?;
        map.insert(name, t)?;
    }
    Ok(map)
}

pub fn load_checkpoint(path: &Path) -> Result<TensorMap> {
    let bytes = read_bytes(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes atomically. Non-finite values are stored as-is.
pub fn save_checkpoint(map: &TensorMap, path: &Path) -> Result<()> {
    atomic_write(path, &to_bytes(map))
}
