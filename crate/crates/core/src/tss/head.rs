// SPDX-License-Identifier: Apache-2.0

//! Segment scoring `vᵀ tanh(W_c [z; Ŝ])` and argmax selection.
//!
//! The pre-activation of hidden unit `k` is always evaluated as
//! `dot(W_z[k], z) + dot(W_s[k], Ŝ)`, so caching the embedding half per
//! segment reproduces the full evaluation bit for bit.

use cart_nn::checkpoint::Checkpoint;
use cart_nn::{Graph, Layout, LayoutBuilder, ParamSlot, ParamVector, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::EMBED_DIM;
use super::library::SegmentLibrary;
use crate::error::{CoreError, Result};

/// Left-to-right dot product; the one summation order used for scoring.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// A head bound to one context: `W_z` transposed for lane-parallel
/// accumulation and the context half of every pre-activation.
#[derive(Debug, Clone)]
pub struct PreparedScorer {
    hidden: usize,
    wz_t: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl PreparedScorer {
    /// Scratch must hold `hidden` values.
    #[inline]
    pub fn score(&self, z: &[f64], acc: &mut [f64]) -> f64 {
        let h = self.hidden;
        let acc = &mut acc[..h];
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (row, &zj) in self.wz_t.chunks_exact(h).zip(z) {
            for (a, w) in acc.iter_mut().zip(row) {
                *a += w * zj;
            }
        }
        let mut s = 0.0;
        for k in 0..h {
            s += self.v[k] * (acc[k] + self.u[k]).tanh();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringHead {
    pub hidden: usize,
    pub ctx_dim: usize,
    /// Row-major `hidden × (128 + ctx_dim)`.
    pub w_c: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    hidden: usize,
    ctx_dim: usize,
}

impl ScoringHead {
    pub fn zeros(hidden: usize, ctx_dim: usize) -> Self {
        Self {
            hidden,
            ctx_dim,
            w_c: vec![0.0; hidden * (EMBED_DIM + ctx_dim)],
            v: vec![0.0; hidden],
        }
    }

    pub fn random(hidden: usize, ctx_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = EMBED_DIM + ctx_dim;
        let bw = (6.0 / (width + hidden) as f64).sqrt();
        let bv = (6.0 / (hidden + 1) as f64).sqrt();
        Self {
            hidden,
            ctx_dim,
            w_c: (0..hidden * width).map(|_| rng.gen_range(-bw..bw)).collect(),
            v: (0..hidden).map(|_| rng.gen_range(-bv..bv)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        EMBED_DIM + self.ctx_dim
    }

    fn row(&self, k: usize) -> (&[f64], &[f64]) {
        let w = self.width();
        let r = &self.w_c[k * w..(k + 1) * w];
        r.split_at(EMBED_DIM)
    }

    fn check(&self, z: &[f64], ctx: &[f64]) -> Result<()> {
        if z.len() != EMBED_DIM || ctx.len() != self.ctx_dim {
            return Err(CoreError::Shape(format!(
                "scoring head expects a {EMBED_DIM}-dim embedding and {}-dim context, got {} and {}",
                self.ctx_dim,
                z.len(),
                ctx.len()
            )));
        }
        Ok(())
    }

    pub fn score(&self, z: &[f64], ctx: &[f64]) -> Result<f64> {
        self.check(z, ctx)?;
        let mut s = 0.0;
        for k in 0..self.hidden {
            let (wz, ws) = self.row(k);
            s += self.v[k] * (dot(wz, z) + dot(ws, ctx)).tanh();
        }
        Ok(s)
    }

    pub fn prepare(&self, ctx: &[f64]) -> Result<PreparedScorer> {
        let u = self.context_projection(ctx)?;
        let h = self.hidden;
        let mut wz_t = vec![0.0; EMBED_DIM * h];
        for k in 0..h {
            for (j, w) in self.row(k).0.iter().enumerate() {
                wz_t[j * h + k] = *w;
            }
        }
        Ok(PreparedScorer {
            hidden: h,
            wz_t,
            u,
            v: self.v.clone(),
        })
    }

    /// `dot(W_s[k], Ŝ)` for every hidden unit.
    pub fn context_projection(&self, ctx: &[f64]) -> Result<Vec<f64>> {
        if ctx.len() != self.ctx_dim {
            return Err(CoreError::Shape(format!("context must have length {}, got {}", self.ctx_dim, ctx.len())));
        }
        Ok((0..self.hidden).map(|k| dot(self.row(k).1, ctx)).collect())
    }

    pub fn embedding_projection(&self, z: &[f64]) -> Vec<f64> {
        (0..self.hidden).map(|k| dot(self.row(k).0, z)).collect()
    }

    pub fn score_projected(&self, pz: &[f64], u: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.hidden {
            s += self.v[k] * (pz[k] + u[k]).tanh();
        }
        s
    }

    fn layout(hidden: usize, ctx_dim: usize) -> (Layout, ParamSlot, ParamSlot) {
        let mut b = LayoutBuilder::new();
        let w = b.register("tss.w_c", &[hidden, EMBED_DIM + ctx_dim]);
        let v = b.register("tss.v", &[hidden]);
        (b.finish(), w, v)
    }

    pub fn to_params(&self) -> ParamVector {
        let (layout, _, _) = Self::layout(self.hidden, self.ctx_dim);
        let mut values = self.w_c.clone();
        values.extend_from_slice(&self.v);
        ParamVector::from_values(layout, values).expect("head layout matches its own sizes")
    }

    pub fn from_params(hidden: usize, ctx_dim: usize, p: &ParamVector) -> Result<Self> {
        let (layout, w, v) = Self::layout(hidden, ctx_dim);
        let diff = layout.diff(p.layout());
        if !diff.is_empty() {
            return Err(CoreError::Config(format!("scoring head layout mismatch:\n  {}", diff.join("\n  "))));
        }
        Ok(Self {
            hidden,
            ctx_dim,
            w_c: p.tensor(w).to_vec(),
            v: p.tensor(v).to_vec(),
        })
    }

    /// Scores of `k` candidate embeddings (`k×128`) against one context, on the tape.
    pub fn scores_graph(&self, g: &mut Graph<'_>, embeddings: Vec<f64>, k: usize, ctx: &[f64]) -> cart_nn::Result<Var> {
        let (_, w, v) = Self::layout(self.hidden, self.ctx_dim);
        let z = g.input(embeddings);
        let rep: Vec<f64> = (0..k).flat_map(|_| ctx.iter().copied()).collect();
        let s = g.input(rep);
        let x = g.concat_cols(&[z, s], k)?;
        let wv = g.param(w);
        let pre = g.linear(x, k, wv, self.hidden, None)?;
        let t = g.tanh(pre);
        let vv = g.param(v);
        g.linear(t, k, vv, 1, None)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_value(HeadMeta {
            hidden: self.hidden,
            ctx_dim: self.ctx_dim,
        })
        .map_err(|e| CoreError::Runtime(e.to_string()))?;
        Ok(Checkpoint::new(self.to_params(), meta).save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path).map_err(|e| CoreError::data(path, e.to_string()))?;
        let meta: HeadMeta = serde_json::from_value(ck.metadata).map_err(|e| CoreError::data(path, format!("not a scoring head: {e}")))?;
        Self::from_params(meta.hidden, meta.ctx_dim, &ck.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub score: f64,
}

/// Per-segment embedding projections for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionCache {
    hidden: usize,
    rows: Vec<f64>,
}

impl ProjectionCache {
    pub fn new(lib: &SegmentLibrary, head: &ScoringHead) -> Self {
        let mut rows = Vec::with_capacity(lib.len() * head.hidden);
        for i in 0..lib.len() {
            rows.extend(head.embedding_projection(lib.embedding(i)));
        }
        Self { hidden: head.hidden, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.hidden.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn argmax(n: usize, mut score: impl FnMut(usize) -> f64) -> Selection {
    let mut best = Selection { index: 0, score: score(0) };
    for i in 1..n {
        let s = score(i);
        if s > best.score {
            best = Selection { index: i, score: s };
        }
    }
    best
}

/// Exact scan scoring every segment embedding against the context.
pub fn select_segment(lib: &SegmentLibrary, ctx: &[f64], head: &ScoringHead) -> Result<Selection> {
    if lib.is_empty() {
        return Err(CoreError::Runtime("cannot select from an empty segment library".into()));
    }
    head.check(lib.embedding(0), ctx)?;
    let scorer = head.prepare(ctx)?;
    let mut acc = vec![0.0; head.hidden];
    Ok(argmax(lib.len(), |i| scorer.score(lib.embedding(i), &mut acc)))
}

/// Same result as [`select_segment`] using cached embedding projections.
pub fn select_cached(cache: &ProjectionCache, ctx: &[f64], head: &ScoringHead) -> Result<Selection> {
    if cache.is_empty() {
        return Err(CoreError::Runtime("cannot select from an empty segment library".into()));
    }
    let u = head.context_projection(ctx)?;
    let h = cache.hidden;
    Ok(argmax(cache.len(), |i| head.score_projected(&cache.rows[i * h..(i + 1) * h], &u)))
}

/// Scores for every segment, in library order.
pub fn score_all(lib: &SegmentLibrary, ctx: &[f64], head: &ScoringHead) -> Result<Vec<f64>> {
    (0..lib.len()).map(|i| head.score(lib.embedding(i), ctx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tss::embed::{EmbedderConfig, SegmentEmbedder};
    use crate::tss::library::{build_library, LibraryParams, SourceRegion};

    fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn zero_v_or_w_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, c) = (unit(&mut rng, 128), unit(&mut rng, 16));
        let mut h = ScoringHead::random(8, 16, 2);
        h.v.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(h.score(&z, &c).unwrap(), 0.0);
        let mut h = ScoringHead::random(8, 16, 2);
        h.w_c.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(h.score(&z, &c).unwrap(), 0.0);
    }

    #[test]
    fn score_bounded_by_v_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = ScoringHead::random(32, 24, 4);
        let l1: f64 = h.v.iter().map(|v| v.abs()).sum();
        for _ in 0..200 {
            let s = h.score(&unit(&mut rng, 128), &unit(&mut rng, 24)).unwrap();
            assert!(s.abs() < l1);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let h = ScoringHead::random(4, 8, 0);
        assert!(h.score(&[0.0; 128], &[0.0; 7]).is_err());
        assert!(h.score(&[0.0; 127], &[0.0; 8]).is_err());
    }

    #[test]
    fn cached_path_is_bitwise_identical() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..120).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let lib = build_library(
            &[SourceRegion {
                id: "a",
                values: &v,
                region: 0..120,
            }],
            LibraryParams::default(),
            &e,
        )
        .unwrap();
        let h = ScoringHead::random(32, 20, 5);
        let cache = ProjectionCache::new(&lib, &h);
        for _ in 0..20 {
            let ctx = unit(&mut rng, 20);
            let u = h.context_projection(&ctx).unwrap();
            for i in 0..lib.len() {
                let a = h.score(lib.embedding(i), &ctx).unwrap();
                let b = h.score_projected(&cache.rows[i * 32..(i + 1) * 32], &u);
                assert_eq!(a.to_bits(), b.to_bits());
                let mut acc = vec![0.0; 32];
                assert_eq!(a.to_bits(), h.prepare(&ctx).unwrap().score(lib.embedding(i), &mut acc).to_bits());
            }
            assert_eq!(select_segment(&lib, &ctx, &h).unwrap(), select_cached(&cache, &ctx, &h).unwrap());
        }
    }

    #[test]
    fn graph_scores_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = ScoringHead::random(6, 10, 7);
        let zs: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, 128)).collect();
        let ctx = unit(&mut rng, 10);
        let p = h.to_params();
        let mut g = Graph::new(&p);
        let s = h.scores_graph(&mut g, zs.concat(), 5, &ctx).unwrap();
        for (i, z) in zs.iter().enumerate() {
            assert!((g.value(s)[i] - h.score(z, &ctx).unwrap()).abs() < 1e-12);
        }
        assert_eq!(ScoringHead::from_params(6, 10, &p).unwrap(), h);
    }

    #[test]
    fn empty_library_rejected() {
        let lib = SegmentLibrary {
            params: LibraryParams::default(),
            sources: vec![],
            segments: vec![],
            embeddings: vec![],
            warnings: vec![],
        };
        assert!(select_segment(&lib, &[0.0; 4], &ScoringHead::zeros(2, 4)).is_err());
    }
}
