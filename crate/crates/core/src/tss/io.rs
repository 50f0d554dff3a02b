// SPDX-License-Identifier: Apache-2.0

//! On-disk library: `library.json`, `segments.bin`, `embeddings.bin`.
//!
//! `segments.bin` holds one record per segment: source (u32), start (u64),
//! length (u32), then `length` f64 values. `embeddings.bin` is the row-major
//! f64 matrix. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::{EmbedderConfig, EMBED_DIM};
use super::library::{LibraryParams, Segment, SegmentLibrary, SourceInfo};
use crate::error::{CoreError, Result};

const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub format: u32,
    pub params: LibraryParams,
    pub embedder: EmbedderConfig,
    pub embed_dim: usize,
    pub sources: Vec<SourceInfo>,
    pub segment_count: usize,
    /// Segments per (source, length), in canonical order.
    pub counts: Vec<(String, usize, usize)>,
    pub warnings: Vec<String>,
}

pub fn manifest_for(lib: &SegmentLibrary, embedder: EmbedderConfig) -> LibraryManifest {
    let mut counts: Vec<(String, usize, usize)> = vec![];
    for (i, s) in lib.segments.iter().enumerate() {
        let id = lib.source_id(i);
        match counts.last_mut() {
            Some((sid, len, n)) if sid == id && *len == s.len() => *n += 1,
            _ => counts.push((id.to_string(), s.len(), 1)),
        }
    }
    LibraryManifest {
        format: FORMAT,
        params: lib.params,
        embedder,
        embed_dim: EMBED_DIM,
        sources: lib.sources.clone(),
        segment_count: lib.len(),
        counts,
        warnings: lib.warnings.clone(),
    }
}

pub fn save_library(dir: &Path, lib: &SegmentLibrary, embedder: EmbedderConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let manifest = manifest_for(lib, embedder);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::Runtime(e.to_string()))?;
    let mpath = dir.join("library.json");
    fs::write(&mpath, json).map_err(|e| CoreError::io(&mpath, e))?;

    let mut seg = Vec::new();
    for s in &lib.segments {
        seg.extend_from_slice(&s.source.to_le_bytes());
        seg.extend_from_slice(&(s.start as u64).to_le_bytes());
        seg.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for v in &s.values {
            seg.extend_from_slice(&v.to_le_bytes());
        }
    }
    let spath = dir.join("segments.bin");
    fs::write(&spath, seg).map_err(|e| CoreError::io(&spath, e))?;

    let emb: Vec<u8> = lib.embeddings.iter().flat_map(|v| v.to_le_bytes()).collect();
    let epath = dir.join("embeddings.bin");
    fs::write(&epath, emb).map_err(|e| CoreError::io(&epath, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let b = self.buf.get(self.pos..self.pos + N)?;
        self.pos += N;
        b.try_into().ok()
    }
}

pub fn load_library(dir: &Path) -> Result<(SegmentLibrary, LibraryManifest)> {
    let mpath = dir.join("library.json");
    let text = fs::read_to_string(&mpath).map_err(|e| CoreError::io(&mpath, e))?;
    let manifest: LibraryManifest = serde_json::from_str(&text).map_err(|e| CoreError::data(&mpath, e.to_string()))?;
    if manifest.format != FORMAT || manifest.embed_dim != EMBED_DIM {
        return Err(CoreError::data(
            &mpath,
            format!("unsupported library format {} / embedding width {}", manifest.format, manifest.embed_dim),
        ));
    }
    let spath = dir.join("segments.bin");
    let bytes = fs::read(&spath).map_err(|e| CoreError::io(&spath, e))?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    let mut segments = Vec::with_capacity(manifest.segment_count);
    let truncated = || CoreError::data(&spath, "truncated segment record");
    while c.pos < bytes.len() {
        let source = u32::from_le_bytes(c.take().ok_or_else(truncated)?);
        let start = u64::from_le_bytes(c.take().ok_or_else(truncated)?) as usize;
        let len = u32::from_le_bytes(c.take().ok_or_else(truncated)?) as usize;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(c.take().ok_or_else(truncated)?));
        }
        if source as usize >= manifest.sources.len() {
            return Err(CoreError::data(&spath, format!("segment references unknown source {source}")));
        }
        segments.push(Segment { source, start, values });
    }
    if segments.len() != manifest.segment_count {
        return Err(CoreError::data(
            &spath,
            format!("expected {} segments, found {}", manifest.segment_count, segments.len()),
        ));
    }
    let epath = dir.join("embeddings.bin");
    let eb = fs::read(&epath).map_err(|e| CoreError::io(&epath, e))?;
    if eb.len() != segments.len() * EMBED_DIM * 8 {
        return Err(CoreError::data(
            &epath,
            format!("expected {} bytes, found {}", segments.len() * EMBED_DIM * 8, eb.len()),
        ));
    }
    let embeddings = eb.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let lib = SegmentLibrary {
        params: manifest.params,
        sources: manifest.sources.clone(),
        segments,
        embeddings,
        warnings: manifest.warnings.clone(),
    };
    Ok((lib, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tss::embed::SegmentEmbedder;
    use crate::tss::library::{build_library, SourceRegion};

    #[test]
    fn round_trip_is_exact() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        let a: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..45).map(|i| (i as f64 * 0.11).cos()).collect();
        let lib = build_library(
            &[
                SourceRegion {
                    id: "full",
                    values: &a,
                    region: 0..60,
                },
                SourceRegion {
                    id: "proprio-only",
                    values: &b,
                    region: 5..45,
                },
            ],
            LibraryParams::default(),
            &e,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(dir.path(), &lib, e.config()).unwrap();
        let (back, m) = load_library(dir.path()).unwrap();
        assert_eq!(back, lib);
        assert_eq!(m.counts.iter().map(|c| c.2).sum::<usize>(), lib.len());
    }

    #[test]
    fn truncated_segments_rejected() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        let a = vec![0.2; 20];
        let lib = build_library(
            &[SourceRegion {
                id: "a",
                values: &a,
                region: 0..20,
            }],
            LibraryParams::default(),
            &e,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(dir.path(), &lib, e.config()).unwrap();
        let p = dir.path().join("segments.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_library(dir.path()), Err(CoreError::Data { .. })));
    }
}
