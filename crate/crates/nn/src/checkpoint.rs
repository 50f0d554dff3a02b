// SPDX-License-Identifier: Apache-2.0

//! Checkpoint file format.
//!
//! ```text
//! magic      8 bytes   "CARTCKPT"
//! version    u32 LE
//! hdr_len    u64 LE
//! header     hdr_len bytes of JSON: {format_version, layout, metadata}
//! values     layout.total_len() × f64 LE, flattening order
//! ```

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::params::{Layout, ParamVector};
use crate::{NnError, Result};

pub const MAGIC: &[u8; 8] = b"CARTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layout: Layout,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    /// Free-form JSON carried alongside the values (config echo, normalizer statistics).
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamVector, metadata: serde_json::Value) -> Self {
        Self { params, metadata }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            layout: self.params.layout().clone(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.params.len() * 8);
        for v in self.params.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(NnError::Format(format!("unsupported format version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let hdr_len = u64::from_le_bytes(u64buf) as usize;
        let mut json = vec![0u8; hdr_len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.format_version != version {
            return Err(NnError::Format("header/preamble version disagree".into()));
        }
        header.layout.validate()?;
        let n = header.layout.total_len();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(NnError::Format("trailing bytes after values".into()));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            params: ParamVector::from_values(header.layout, values)?,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayoutBuilder;

    #[test]
    fn round_trip_is_bitwise() {
        let mut b = LayoutBuilder::new();
        b.register("w", &[4, 3]);
        b.register("b", &[4]);
        let mut pv = ParamVector::init_glorot(b.finish(), 3);
        pv.values_mut()[12] = f64::MIN_POSITIVE;
        pv.values_mut()[13] = -0.0;
        let ck = Checkpoint::new(pv, serde_json::json!({"note": "x"}));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        let a: Vec<u64> = ck.params.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.metadata["note"], "x");
    }

    #[test]
    fn truncated_file_rejected() {
        let mut b = LayoutBuilder::new();
        b.register("w", &[2, 2]);
        let ck = Checkpoint::new(ParamVector::zeros(b.finish()), serde_json::Value::Null);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
        assert!(Checkpoint::read_from(&b"NOTACKPT"[..]).is_err());
    }
}
