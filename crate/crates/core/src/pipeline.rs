// SPDX-License-Identifier: Apache-2.0

//! End-to-end steps shared by the command-line driver and the test suites:
//! train a policy on logged samples, assemble a two-source segment library,
//! train the scoring head, and compare controllers over seeded rollouts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::PolicyController;
use crate::dataset::CollectConfig;
use crate::encoder::{EncoderConfig, Modality, ProprioNormalizer};
use crate::error::{CoreError, Result};
use crate::metrics::{rms_vibration, time_to_goal};
use crate::objective::{
    fit_effort_exponent, train_policy, ObjectiveConfig, ResponseModel, SampleOutcome, StepSample, TrainConfig, TrainingReport, TrainingSet,
};
use crate::policy::{Policy, PolicyConfig, TrainedPolicy};
use crate::sim::{run_rollout, Controller, RolloutConfig, RolloutTrace, TerrainKind, TerrainSpec};
use crate::tss::{
    build_library, head_examples, train_head, EmbedderConfig, HeadTrainConfig, HeadTrainReport, LibraryParams, SegmentEmbedder, SegmentLibrary,
    SourceRegion, TssRuntime,
};

pub const FULL_SOURCE: &str = "full";
pub const PROPRIO_SOURCE: &str = "proprio-only";

/// A small network that trains in seconds on one core.
pub fn compact_policy_config() -> PolicyConfig {
    PolicyConfig {
        encoder: EncoderConfig {
            latent: 32,
            conv_channels: [4, 8, 8],
            pool: [2, 2],
            mesh_hidden: 32,
            proprio_hidden: 16,
            attention_heads: 4,
            ..Default::default()
        },
        head_hidden: 16,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub policy: PolicyConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub collect: CollectConfig,
    pub library: LibraryParams,
    pub embedder: EmbedderConfig,
    pub head: HeadTrainConfig,
    pub rollout: RolloutConfig,
    /// Fit the effort exponent of a height-scaled `train.response` to the training samples.
    pub calibrate_effort: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            policy: compact_policy_config(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig {
                epochs: 10,
                learning_rate: 0.02,
                ..Default::default()
            },
            collect: CollectConfig::default(),
            library: LibraryParams::default(),
            embedder: EmbedderConfig::default(),
            head: HeadTrainConfig::default(),
            rollout: RolloutConfig::default(),
            calibrate_effort: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        self.library.validate()?;
        self.head.validate()?;
        self.rollout.sim.validate()
    }
}

/// The response model training will use for these samples.
pub fn resolve_response(cfg: &ExperimentConfig, samples: &[StepSample]) -> Result<ResponseModel> {
    let ResponseModel::HeightScaled { slip_exponent, .. } = cfg.train.response else {
        return Ok(cfg.train.response);
    };
    if !cfg.calibrate_effort {
        return Ok(cfg.train.response);
    }
    let outcomes = samples
        .iter()
        .map(|s| SampleOutcome::from_sample(s, &cfg.objective))
        .collect::<Result<Vec<_>>>()?;
    let effort_exponent = fit_effort_exponent(&outcomes)?;
    log::info!("calibrated effort exponent {effort_exponent:.4}");
    Ok(ResponseModel::HeightScaled {
        slip_exponent,
        effort_exponent,
    })
}

/// Normalizer statistics over every proprio record in the sample windows.
pub fn fit_normalizer(samples: &[StepSample]) -> ProprioNormalizer {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .flat_map(|s| s.observation.proprio_window.iter().map(|p| p.to_vec()))
        .collect();
    ProprioNormalizer::fit(rows.iter().map(|r| r.as_slice()))
}

pub fn train_on_samples(
    policy_cfg: &PolicyConfig,
    samples: &[StepSample],
    modality: Modality,
    obj: &ObjectiveConfig,
    tc: &TrainConfig,
) -> Result<(TrainedPolicy, TrainingReport)> {
    let policy = Policy::new(policy_cfg)?;
    let normalizer = fit_normalizer(samples);
    let set = TrainingSet::new(&policy, samples, &normalizer, obj)?;
    let init = policy.init_params(tc.seed, modality);
    let (params, report) = train_policy(&policy, init, &set, modality, obj, tc)?;
    Ok((
        TrainedPolicy {
            policy,
            params,
            normalizer,
            modality,
        },
        report,
    ))
}

/// Head-range segments of both checkpoints; source 0 is full, source 1 proprio-only.
pub fn two_source_library(
    full: &TrainedPolicy,
    proprio: &TrainedPolicy,
    params: LibraryParams,
    embedder: &SegmentEmbedder,
) -> Result<SegmentLibrary> {
    if !full.policy.layout().diff(proprio.policy.layout()).is_empty() {
        return Err(CoreError::Config("library checkpoints have different layouts".into()));
    }
    let region = full.policy.head_range();
    build_library(
        &[
            SourceRegion {
                id: FULL_SOURCE,
                values: full.params.values(),
                region: region.clone(),
            },
            SourceRegion {
                id: PROPRIO_SOURCE,
                values: proprio.params.values(),
                region,
            },
        ],
        params,
        embedder,
    )
}

/// Builds the library, trains the head against `live` and returns a runtime ready for rollouts.
pub fn build_tss(
    live: &mut TrainedPolicy,
    proprio: &TrainedPolicy,
    samples: &[StepSample],
    cfg: &ExperimentConfig,
    response: ResponseModel,
) -> Result<(TssRuntime, HeadTrainReport)> {
    let embedder = SegmentEmbedder::new(cfg.embedder)?;
    let lib = two_source_library(live, proprio, cfg.library, &embedder)?;
    let set = TrainingSet::new(&live.policy, samples, &live.normalizer, &cfg.objective)?;
    let examples = head_examples(live, &set, 0, 1)?;
    let (head, report) = train_head(live, &lib, &examples, &set, &cfg.objective, response, &cfg.head)?;
    let runtime = TssRuntime::new(lib, head, live.params.len())?;
    Ok((runtime, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub rms_total: f64,
    pub mean_speed: f64,
    pub time_to_goal: Option<f64>,
    pub elapsed: f64,
    pub goal_reached: bool,
    pub tipped: bool,
}

pub fn summarize(label: &str, seed: u64, t: &RolloutTrace) -> RunSummary {
    RunSummary {
        label: label.to_string(),
        seed,
        rms_total: rms_vibration(t).total,
        mean_speed: t.mean_speed(),
        time_to_goal: time_to_goal(t),
        elapsed: t.elapsed,
        goal_reached: t.goal_reached,
        tipped: t.tipped,
    }
}

/// One rollout per seed on `kind` at `difficulty`; the seed drives both terrain and simulator.
pub fn evaluate_controller<C, F>(
    make: F,
    kind: TerrainKind,
    difficulty: f64,
    seeds: &[u64],
    rollout: &RolloutConfig,
    perturbation: f64,
) -> Result<Vec<(RolloutTrace, C)>>
where
    C: Controller + Send,
    F: Fn() -> C + Sync,
{
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = make();
            let t = run_rollout(&mut c, &TerrainSpec::new(kind, difficulty, seed), rollout, perturbation, seed)?;
            Ok((t, c))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub candidate: String,
    pub baseline: String,
    pub candidate_rms: f64,
    pub baseline_rms: f64,
    /// Relative RMS reduction, positive when the candidate is smoother.
    pub rms_reduction: f64,
    pub candidate_speed: f64,
    pub baseline_speed: f64,
    pub speed_ratio: f64,
    pub candidate_time: f64,
    pub baseline_time: f64,
    pub time_ratio: f64,
    pub candidate_success: f64,
    pub baseline_success: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Failed runs count with their full elapsed time.
pub fn compare(candidate: &[RunSummary], baseline: &[RunSummary]) -> Comparison {
    let rms = |r: &[RunSummary]| mean(r.iter().map(|s| s.rms_total));
    let speed = |r: &[RunSummary]| mean(r.iter().map(|s| s.mean_speed));
    let time = |r: &[RunSummary]| mean(r.iter().map(|s| s.time_to_goal.unwrap_or(s.elapsed)));
    let success = |r: &[RunSummary]| mean(r.iter().map(|s| f64::from(u8::from(s.goal_reached))));
    let (cr, br) = (rms(candidate), rms(baseline));
    let (cs, bs) = (speed(candidate), speed(baseline));
    let (ct, bt) = (time(candidate), time(baseline));
    Comparison {
        candidate: candidate.first().map(|s| s.label.clone()).unwrap_or_default(),
        baseline: baseline.first().map(|s| s.label.clone()).unwrap_or_default(),
        candidate_rms: cr,
        baseline_rms: br,
        rms_reduction: if br > 0.0 { 1.0 - cr / br } else { 0.0 },
        candidate_speed: cs,
        baseline_speed: bs,
        speed_ratio: if bs > 0.0 { cs / bs } else { 0.0 },
        candidate_time: ct,
        baseline_time: bt,
        time_ratio: if bt > 0.0 { ct / bt } else { 0.0 },
        candidate_success: success(candidate),
        baseline_success: success(baseline),
    }
}

/// Policy controller factory that clones the live policy and runtime per rollout.
pub fn policy_controller(live: &TrainedPolicy, tss: Option<&TssRuntime>, label: &str) -> impl Fn() -> PolicyController + Sync {
    let live = live.clone();
    let tss = tss.cloned();
    let label = label.to_string();
    move || PolicyController::new(live.clone(), tss.clone(), label.clone())
}
