// SPDX-License-Identifier: Apache-2.0

//! Wall-clock latency of score-all plus argmax on a synthetic library.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::EMBED_DIM;
use super::head::{select_segment, ScoringHead};
use super::library::{LibraryParams, Segment, SegmentLibrary, SourceInfo};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub segments: usize,
    pub trials: usize,
    pub ctx_dim: usize,
    pub head_hidden: usize,
    pub precision: String,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s > 1e-6 {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

/// A library of `size` random segments with random unit embeddings.
pub fn synthetic_library(size: usize, seed: u64) -> SegmentLibrary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LibraryParams::default();
    let span = params.l_max - params.l_min + 1;
    let mut segments = Vec::with_capacity(size);
    let mut embeddings = Vec::with_capacity(size * EMBED_DIM);
    let mut start = 0;
    for i in 0..size {
        let len = params.l_min + i % span;
        segments.push(Segment {
            source: 0,
            start,
            values: (0..len).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        });
        start += params.stride(len);
        embeddings.extend(unit(&mut rng, EMBED_DIM));
    }
    let total = start + params.l_max;
    SegmentLibrary {
        params,
        sources: vec![SourceInfo {
            id: "synthetic".into(),
            total_len: total,
            region: 0..total,
            segments: size,
        }],
        segments,
        embeddings,
        warnings: vec![],
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times the full scoring path (no cached projections) once per trial.
pub fn benchmark_library(lib: &SegmentLibrary, head: &ScoringHead, trials: usize, seed: u64) -> Result<LatencyReport> {
    if trials == 0 {
        return Err(CoreError::Config("benchmark needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe7c);
    let mut times = Vec::with_capacity(trials);
    let mut guard = 0usize;
    for _ in 0..trials {
        let ctx = unit(&mut rng, head.ctx_dim);
        let t0 = Instant::now();
        let sel = select_segment(lib, &ctx, head)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        guard = guard.wrapping_add(sel.index);
    }
    log::debug!("benchmark selection checksum {guard}");
    let mean_ms = times.iter().sum::<f64>() / trials as f64;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        segments: lib.len(),
        trials,
        ctx_dim: head.ctx_dim,
        head_hidden: head.hidden,
        precision: "f64".into(),
        mean_ms,
        p95_ms: percentile(&sorted, 0.95),
        min_ms: sorted[0],
        max_ms: sorted[sorted.len() - 1],
    })
}

pub fn benchmark_selection(library_size: usize, trials: usize, ctx_dim: usize, head_hidden: usize, seed: u64) -> Result<LatencyReport> {
    if trials == 0 {
        return Err(CoreError::Config("benchmark needs at least one trial".into()));
    }
    if library_size == 0 {
        return Err(CoreError::Config("benchmark library must be non-empty".into()));
    }
    let lib = synthetic_library(library_size, seed);
    let head = ScoringHead::random(head_hidden, ctx_dim, seed.wrapping_add(17));
    benchmark_library(&lib, &head, trials, seed)
}
