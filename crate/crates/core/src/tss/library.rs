// SPDX-License-Identifier: Apache-2.0

//! Overlapping parameter segments drawn from one or more checkpoints.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::{SegmentEmbedder, EMBED_DIM};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryParams {
    pub l_min: usize,
    pub l_max: usize,
    pub overlap: f64,
}

impl Default for LibraryParams {
    fn default() -> Self {
        Self {
            l_min: 5,
            l_max: 20,
            overlap: 0.5,
        }
    }
}

impl LibraryParams {
    pub fn validate(&self) -> Result<()> {
        if self.l_min == 0 || self.l_min > self.l_max {
            return Err(CoreError::Config(format!("need 1 ≤ l_min ≤ l_max, got {}..{}", self.l_min, self.l_max)));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(CoreError::Config(format!("overlap must lie in (0, 1), got {}", self.overlap)));
        }
        Ok(())
    }

    pub fn stride(&self, len: usize) -> usize {
        ((len as f64 * (1.0 - self.overlap) + 1e-9).floor() as usize).max(1)
    }

    /// Closed-form number of segments of length `len` in a vector of `n` values.
    pub fn count(&self, n: usize, len: usize) -> usize {
        if n < len {
            0
        } else {
            (n - len) / self.stride(len) + 1
        }
    }

    /// `(len, start)` pairs relative to the region, ordered by length then start.
    pub fn enumerate(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for len in self.l_min..=self.l_max {
            let s = self.stride(len);
            let mut i = 0;
            while i + len <= n {
                out.push((len, i));
                i += s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Index into [`SegmentLibrary::sources`].
    pub source: u32,
    /// Absolute index into the source's flat parameter vector.
    pub start: usize,
    pub values: Vec<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub id: String,
    /// Length of the full flat vector the source came from.
    pub total_len: usize,
    pub region: Range<usize>,
    pub segments: usize,
}

/// A checkpoint region offered to [`build_library`].
pub struct SourceRegion<'a> {
    pub id: &'a str,
    pub values: &'a [f64],
    pub region: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLibrary {
    pub params: LibraryParams,
    pub sources: Vec<SourceInfo>,
    /// Ordered by (source, length, start); selection ties resolve to the lowest index.
    pub segments: Vec<Segment>,
    /// Row-major `segments.len() × 128`.
    pub embeddings: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SegmentLibrary {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    pub fn source_id(&self, i: usize) -> &str {
        &self.sources[self.segments[i].source as usize].id
    }

    pub fn source_index(&self, id: &str) -> Option<u32> {
        self.sources.iter().position(|s| s.id == id).map(|i| i as u32)
    }

    /// Drops segments that do not fit a live vector of length `n`; returns how many went.
    pub fn retain_in_range(&mut self, n: usize) -> usize {
        let keep: Vec<bool> = self.segments.iter().map(|s| s.start + s.len() <= n).collect();
        let dropped = keep.iter().filter(|k| !**k).count();
        if dropped == 0 {
            return 0;
        }
        let mut emb = Vec::with_capacity((self.segments.len() - dropped) * EMBED_DIM);
        for (i, &k) in keep.iter().enumerate() {
            if k {
                emb.extend_from_slice(self.embedding(i));
            }
        }
        let mut it = keep.iter();
        self.segments.retain(|_| *it.next().unwrap());
        self.embeddings = emb;
        for (si, src) in self.sources.iter_mut().enumerate() {
            src.segments = self.segments.iter().filter(|s| s.source as usize == si).count();
        }
        self.warnings
            .push(format!("{dropped} segments exceed the live parameter length {n} and were excluded"));
        dropped
    }
}

/// Enumerates and embeds every segment of every source region.
pub fn build_library(sources: &[SourceRegion<'_>], params: LibraryParams, embedder: &SegmentEmbedder) -> Result<SegmentLibrary> {
    params.validate()?;
    let mut infos = vec![];
    let mut segments = vec![];
    let mut warnings = vec![];
    for src in sources {
        let r = src.region.clone();
        if r.end > src.values.len() || r.start > r.end {
            return Err(CoreError::Config(format!(
                "source `{}` region {:?} exceeds its {} values",
                src.id,
                r,
                src.values.len()
            )));
        }
        if r.len() < params.l_min {
            warnings.push(format!(
                "source `{}` has {} values, fewer than l_min = {}; skipped",
                src.id,
                r.len(),
                params.l_min
            ));
            log::warn!("{}", warnings.last().unwrap());
            continue;
        }
        let source = infos.len() as u32;
        let pairs = params.enumerate(r.len());
        infos.push(SourceInfo {
            id: src.id.to_string(),
            total_len: src.values.len(),
            region: r.clone(),
            segments: pairs.len(),
        });
        segments.extend(pairs.into_iter().map(|(len, i)| Segment {
            source,
            start: r.start + i,
            values: src.values[r.start + i..r.start + i + len].to_vec(),
        }));
    }
    let rows: Vec<Vec<f64>> = segments.par_iter().map(|s| embedder.embed(&s.values)).collect::<Result<_>>()?;
    Ok(SegmentLibrary {
        params,
        sources: infos,
        segments,
        embeddings: rows.concat(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tss::embed::EmbedderConfig;

    #[test]
    fn stride_and_counts() {
        let p = LibraryParams::default();
        assert_eq!(p.stride(5), 2);
        assert_eq!(
            p.enumerate(10).iter().filter(|(l, _)| *l == 5).map(|(_, i)| *i).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
        assert_eq!(p.count(10, 5), 3);
        assert_eq!(p.count(20, 20), 1);
        assert_eq!(p.count(4, 5), 0);
    }

    #[test]
    fn short_source_skipped_with_warning() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        let a = vec![0.5; 30];
        let b = vec![0.1; 3];
        let lib = build_library(
            &[
                SourceRegion {
                    id: "a",
                    values: &a,
                    region: 0..30,
                },
                SourceRegion {
                    id: "b",
                    values: &b,
                    region: 0..3,
                },
            ],
            LibraryParams::default(),
            &e,
        )
        .unwrap();
        assert_eq!(lib.sources.len(), 1);
        assert_eq!(lib.warnings.len(), 1);
        assert_eq!(lib.embeddings.len(), lib.len() * EMBED_DIM);
    }

    #[test]
    fn region_offsets_are_absolute() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        let v: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let lib = build_library(
            &[SourceRegion {
                id: "a",
                values: &v,
                region: 10..30,
            }],
            LibraryParams::default(),
            &e,
        )
        .unwrap();
        for s in &lib.segments {
            assert!(s.start >= 10 && s.start + s.len() <= 30);
            assert_eq!(s.values[0], s.start as f64);
        }
    }

    #[test]
    fn retain_drops_out_of_range() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        let v = vec![0.3; 50];
        let mut lib = build_library(
            &[SourceRegion {
                id: "a",
                values: &v,
                region: 0..50,
            }],
            LibraryParams::default(),
            &e,
        )
        .unwrap();
        let before = lib.len();
        let dropped = lib.retain_in_range(30);
        assert!(dropped > 0);
        assert_eq!(lib.len(), before - dropped);
        assert!(lib.segments.iter().all(|s| s.start + s.len() <= 30));
        assert_eq!(lib.embeddings.len(), lib.len() * EMBED_DIM);
    }
}
