// SPDX-License-Identifier: Apache-2.0

//! Overwrite, evaluate, restore.

use serde::{Deserialize, Serialize};

use super::head::{select_cached, ProjectionCache, ScoringHead, Selection};
use super::library::{Segment, SegmentLibrary};
use crate::error::{CoreError, Result};
use crate::policy::TrainedPolicy;
use crate::types::{BaseCommand, Observation};

/// Writes the segment into `params` and returns the values it replaced.
pub fn apply_segment(params: &mut [f64], seg: &Segment) -> Result<Vec<f64>> {
    let r = seg.range();
    if r.end > params.len() {
        return Err(CoreError::Shape(format!(
            "segment [{}, {}) exceeds the live parameter length {}",
            r.start,
            r.end,
            params.len()
        )));
    }
    let saved = params[r.clone()].to_vec();
    params[r].copy_from_slice(&seg.values);
    Ok(saved)
}

pub fn restore_segment(params: &mut [f64], start: usize, saved: &[f64]) {
    params[start..start + saved.len()].copy_from_slice(saved);
}

/// Library, head and cached projections ready for per-action selection.
#[derive(Debug, Clone)]
pub struct TssRuntime {
    pub library: SegmentLibrary,
    pub head: ScoringHead,
    cache: ProjectionCache,
}

impl TssRuntime {
    /// Filters segments that do not fit `live_len` and caches projections.
    pub fn new(mut library: SegmentLibrary, head: ScoringHead, live_len: usize) -> Result<Self> {
        library.retain_in_range(live_len);
        if library.is_empty() {
            return Err(CoreError::Config("segment library has no segments usable by the live policy".into()));
        }
        let cache = ProjectionCache::new(&library, &head);
        Ok(Self { library, head, cache })
    }

    pub fn select(&self, s_hat: &[f64]) -> Result<Selection> {
        select_cached(&self.cache, s_hat, &self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub step: usize,
    pub source_id: String,
    pub start: usize,
    pub len: usize,
    pub score: f64,
}

impl SelectionRecord {
    pub fn new(step: usize, lib: &SegmentLibrary, sel: Selection) -> Self {
        let s = &lib.segments[sel.index];
        Self {
            step,
            source_id: lib.source_id(sel.index).to_string(),
            start: s.start,
            len: s.len(),
            score: sel.score,
        }
    }
}

/// Head command with the selected segment temporarily in place of the live values.
pub fn command_with_segment(live: &mut TrainedPolicy, seg: &Segment, s_hat: &[f64]) -> Result<BaseCommand> {
    let saved = apply_segment(live.params.values_mut(), seg)?;
    let out = live.policy.head_plain(&live.params, s_hat);
    restore_segment(live.params.values_mut(), seg.start, &saved);
    out
}

/// Builds the context, selects a segment, applies it for one head evaluation and restores.
pub fn act_with_selection(live: &mut TrainedPolicy, tss: &TssRuntime, obs: &Observation) -> Result<(BaseCommand, Selection)> {
    let ctx = live.context(obs)?;
    let sel = tss.select(&ctx.s_hat)?;
    let cmd = command_with_segment(live, &tss.library.segments[sel.index], &ctx.s_hat)?;
    Ok((cmd, sel))
}
