// SPDX-License-Identifier: Apache-2.0

//! Scoring-head training against a frozen policy.
//!
//! Each example pairs a context with `K` sampled candidate segments. The loss
//! is the negative log of the softmax mass on candidates from the example's
//! target source, plus `λ_J` times the softmax-weighted `−J` of the command
//! each candidate produces when applied. Inference uses the hard argmax.

use cart_nn::{gradient_of, Gradient};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::EMBED_DIM;
use super::head::ScoringHead;
use super::library::SegmentLibrary;
use super::runtime::command_with_segment;
use crate::encoder::Modality;
use crate::error::{CoreError, Result};
use crate::objective::{objective_for_command, ObjectiveConfig, ResponseModel, TrainingSet};
use crate::policy::TrainedPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub hidden: usize,
    pub candidates: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub lambda_j: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            candidates: 64,
            epochs: 20,
            learning_rate: 1.0,
            momentum: 0.9,
            batch_size: 16,
            lambda_j: 0.1,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl HeadTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.candidates < 2 || self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config(
                "head training needs hidden ≥ 1, candidates ≥ 2, epochs ≥ 1, batch_size ≥ 1".into(),
            ));
        }
        if !(self.clip_norm > 0.0) || !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config(
                "head training needs clip_norm > 0, learning_rate ≥ 0, momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One context with the source its selections should come from.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadExample {
    pub context: Vec<f64>,
    pub target_source: u32,
    pub outcome: usize,
}

/// Full-modality contexts target `full_source`; exteroception-masked contexts target `masked_source`.
pub fn head_examples(live: &TrainedPolicy, set: &TrainingSet, full_source: u32, masked_source: u32) -> Result<Vec<HeadExample>> {
    let mut out = Vec::with_capacity(2 * set.len());
    for (i, input) in set.inputs.iter().enumerate() {
        for (modality, target) in [(Modality::Full, full_source), (Modality::ProprioOnly, masked_source)] {
            let ctx = live.policy.context(&live.params, input, modality)?;
            out.push(HeadExample {
                context: ctx.s_hat,
                target_source: target,
                outcome: i,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainReport {
    pub examples: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Fraction of examples whose highest-scoring sampled candidate is from the target source.
    pub candidate_match_rate: f64,
    pub config: HeadTrainConfig,
}

struct Prepared {
    candidates: Vec<usize>,
    mask: Vec<f64>,
    neg_j: Vec<f64>,
}

fn prepare(
    live: &mut TrainedPolicy,
    lib: &SegmentLibrary,
    examples: &[HeadExample],
    set: &TrainingSet,
    obj: &ObjectiveConfig,
    model: ResponseModel,
    cfg: &HeadTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Prepared>> {
    let mut by_source: Vec<Vec<usize>> = vec![vec![]; lib.sources.len()];
    for (i, s) in lib.segments.iter().enumerate() {
        by_source[s.source as usize].push(i);
    }
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let targets = by_source
            .get(ex.target_source as usize)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| CoreError::Config(format!("library has no segments from source {}", ex.target_source)))?;
        let mut candidates: Vec<usize> = (0..cfg.candidates).map(|_| rng.gen_range(0..lib.len())).collect();
        if !candidates.iter().any(|&c| lib.segments[c].source == ex.target_source) {
            candidates[0] = *targets.choose(rng).expect("non-empty");
        }
        let mask = candidates
            .iter()
            .map(|&c| f64::from(u8::from(lib.segments[c].source == ex.target_source)))
            .collect();
        let outcome = &set.outcomes[ex.outcome];
        let neg_j = candidates
            .iter()
            .map(|&c| {
                let cmd = command_with_segment(live, &lib.segments[c], &ex.context)?;
                Ok(-objective_for_command(&cmd, outcome, obj, model).total)
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(Prepared { candidates, mask, neg_j });
    }
    Ok(out)
}

fn example_loss(head: &ScoringHead, lib: &SegmentLibrary, ex: &HeadExample, p: &Prepared, lambda_j: f64) -> Result<(f64, Gradient)> {
    let k = p.candidates.len();
    let mut emb = Vec::with_capacity(k * EMBED_DIM);
    for &c in &p.candidates {
        emb.extend_from_slice(lib.embedding(c));
    }
    let params = head.to_params();
    Ok(gradient_of(&params, |g| {
        let s = head.scores_graph(g, emb, k, &ex.context)?;
        let prob = g.softmax_rows(s, 1, k)?;
        let m = g.input(p.mask.clone());
        let hit = g.mul(prob, m)?;
        let mass = g.sum(hit);
        let ln = g.ln(mass);
        let ce = g.scale(ln, -1.0);
        let j = g.input(p.neg_j.clone());
        let pj = g.mul(prob, j)?;
        let ej = g.sum(pj);
        let ej = g.scale(ej, lambda_j);
        g.add(ce, ej)
    })?)
}

fn mean_loss(head: &ScoringHead, lib: &SegmentLibrary, ex: &[HeadExample], prep: &[Prepared], lambda_j: f64) -> Result<f64> {
    let mut s = 0.0;
    for (e, p) in ex.iter().zip(prep) {
        s += example_loss(head, lib, e, p, lambda_j)?.0;
    }
    Ok(s / ex.len() as f64)
}

pub fn train_head(
    live: &mut TrainedPolicy,
    lib: &SegmentLibrary,
    examples: &[HeadExample],
    set: &TrainingSet,
    obj: &ObjectiveConfig,
    model: ResponseModel,
    cfg: &HeadTrainConfig,
) -> Result<(ScoringHead, HeadTrainReport)> {
    cfg.validate()?;
    if examples.is_empty() || lib.is_empty() {
        return Err(CoreError::Config("head training needs examples and a non-empty library".into()));
    }
    let ctx_dim = examples[0].context.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prep = prepare(live, lib, examples, set, obj, model, cfg, &mut rng)?;
    let mut head = ScoringHead::random(cfg.hidden, ctx_dim, cfg.seed ^ 0x4eadu64);
    let initial_loss = mean_loss(&head, lib, examples, &prep, cfg.lambda_j)?;
    let mut velocity = vec![0.0; head.to_params().len()];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = vec![];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = Gradient::zeros(velocity.len());
            for &i in batch {
                grad.add_assign(&example_loss(&head, lib, &examples[i], &prep[i], cfg.lambda_j)?.1);
            }
            grad.scale(1.0 / batch.len() as f64);
            grad.clip_norm(cfg.clip_norm);
            let mut p = head.to_params();
            for ((w, m), g) in p.values_mut().iter_mut().zip(velocity.iter_mut()).zip(grad.values()) {
                *m = cfg.momentum * *m + g;
                *w -= cfg.learning_rate * *m;
            }
            if p.values().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite {
                    term: "scoring head update".into(),
                    value: f64::NAN,
                });
            }
            head = ScoringHead::from_params(cfg.hidden, ctx_dim, &p)?;
        }
        let loss = mean_loss(&head, lib, examples, &prep, cfg.lambda_j)?;
        log::info!("head epoch {epoch}: loss {loss:.6}");
        epoch_losses.push(loss);
    }
    let mut hits = 0usize;
    for (e, p) in examples.iter().zip(&prep) {
        let best = p
            .candidates
            .iter()
            .map(|&c| head.score(lib.embedding(c), &e.context))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &s)| if s > b.1 { (i, s) } else { b })
            .0;
        hits += usize::from(p.mask[best] > 0.0);
    }
    let report = HeadTrainReport {
        examples: examples.len(),
        initial_loss,
        epoch_losses,
        candidate_match_rate: hits as f64 / examples.len() as f64,
        config: cfg.clone(),
    };
    Ok((head, report))
}
