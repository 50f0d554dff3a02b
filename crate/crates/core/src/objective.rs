// SPDX-License-Identifier: Apache-2.0

//! Stability objective and offline policy training.

use cart_nn::{gradient_of, Gradient, Graph, ParamVector, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{Modality, PreparedInput, ProprioNormalizer};
use crate::error::{ensure_finite, CoreError, Result};
use crate::policy::Policy;
use crate::types::{BaseCommand, Observation, ProprioState, NUM_LEGS};

/// Which slip components enter Δq.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlipNorm {
    #[default]
    Full,
    /// x and y only.
    Lateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub beta_v: f64,
    pub sigma_v: f64,
    pub beta_s: f64,
    pub beta_e: f64,
    pub clip_norm: f64,
    /// Optional command smoothness weight; zero keeps the three-term sum.
    pub beta_a: f64,
    pub slip_norm: SlipNorm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta_v: 1.0,
            sigma_v: 0.25,
            beta_s: 5.0,
            beta_e: 0.005,
            clip_norm: 1.0,
            beta_a: 0.0,
            slip_norm: SlipNorm::Full,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.sigma_v > 0.0) || !self.sigma_v.is_finite() {
            return Err(CoreError::Config(format!("sigma_v must be > 0, got {}", self.sigma_v)));
        }
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(CoreError::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        for (name, v) in [
            ("beta_v", self.beta_v),
            ("beta_s", self.beta_s),
            ("beta_e", self.beta_e),
            ("beta_a", self.beta_a),
        ] {
            if !ok(v) {
                return Err(CoreError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// One logged control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub observation: Observation,
    pub command: BaseCommand,
    pub reference_velocity: [f64; 3],
    pub proprio_prev: ProprioState,
    pub proprio_curr: ProprioState,
    pub previous_command: Option<BaseCommand>,
}

pub fn velocity_term(command: &BaseCommand, reference: &[f64; 3], cfg: &ObjectiveConfig) -> f64 {
    let v = command.velocity();
    let sq: f64 = (0..3).map(|i| (v[i] - reference[i]).powi(2)).sum();
    cfg.beta_v * (-sq / cfg.sigma_v).exp()
}

/// Stance-masked slip change using the current step's stance flags.
pub fn delta_q(prev: &ProprioState, curr: &ProprioState) -> f64 {
    delta_q_with(prev, curr, SlipNorm::Full)
}

pub fn delta_q_with(prev: &ProprioState, curr: &ProprioState, norm: SlipNorm) -> f64 {
    let dims = match norm {
        SlipNorm::Full => 3,
        SlipNorm::Lateral => 2,
    };
    (0..NUM_LEGS)
        .filter(|&l| curr.stance[l])
        .map(|l| {
            (0..dims)
                .map(|k| (curr.foot_slip[l][k] - prev.foot_slip[l][k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

pub fn slip_term(prev: &ProprioState, curr: &ProprioState, cfg: &ObjectiveConfig) -> f64 {
    -cfg.beta_s * delta_q_with(prev, curr, cfg.slip_norm)
}

pub fn effort_term(torques: &[f64], cfg: &ObjectiveConfig) -> f64 {
    -cfg.beta_e * torques.iter().map(|t| t * t).sum::<f64>().sqrt()
}

pub fn smoothness_term(command: &BaseCommand, previous: &BaseCommand, cfg: &ObjectiveConfig) -> f64 {
    let (a, b) = (command.to_array(), previous.to_array());
    -cfg.beta_a * (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub j_v: f64,
    pub j_s: f64,
    pub j_e: f64,
    pub j_a: f64,
    pub total: f64,
}

/// J_t at the logged command. The loss is `-total`.
pub fn total_objective(sample: &StepSample, cfg: &ObjectiveConfig) -> Result<ObjectiveTerms> {
    if !sample.command.is_finite() || sample.reference_velocity.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            term: "J_v".into(),
            value: f64::NAN,
        });
    }
    if sample
        .proprio_prev
        .foot_slip
        .iter()
        .chain(&sample.proprio_curr.foot_slip)
        .flatten()
        .any(|v| !v.is_finite())
    {
        return Err(CoreError::NonFinite {
            term: "J_s".into(),
            value: f64::NAN,
        });
    }
    let j_v = ensure_finite("J_v", velocity_term(&sample.command, &sample.reference_velocity, cfg))?;
    let j_s = ensure_finite("J_s", slip_term(&sample.proprio_prev, &sample.proprio_curr, cfg))?;
    let j_e = ensure_finite("J_e", effort_term(&sample.proprio_curr.joint_torques, cfg))?;
    let j_a = match (&sample.previous_command, cfg.beta_a > 0.0) {
        (Some(prev), true) => ensure_finite("J_a", smoothness_term(&sample.command, prev, cfg))?,
        _ => 0.0,
    };
    Ok(ObjectiveTerms {
        j_v,
        j_s,
        j_e,
        j_a,
        total: j_v + j_s + j_e + j_a,
    })
}

/// How the logged outcome of a sample responds to a different command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResponseModel {
    /// Slip and effort stay at their logged values.
    Logged,
    /// Δq scales as `(h / h_log)^slip_exponent`, effort as `(h_log / h)^effort_exponent`.
    HeightScaled { slip_exponent: f64, effort_exponent: f64 },
}

impl Default for ResponseModel {
    fn default() -> Self {
        ResponseModel::HeightScaled {
            slip_exponent: 2.0,
            effort_exponent: 1.0,
        }
    }
}

fn ols_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 1e-12).then(|| sxy / sxx)
}

/// Log-log least-squares slope of logged torque norm against logged height,
/// negated so that effort growing as height drops gives a positive exponent.
/// Clamped at zero.
pub fn fit_effort_exponent(outcomes: &[SampleOutcome]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = outcomes
        .iter()
        .filter(|o| o.torque_norm > 0.0)
        .map(|o| (o.logged_height.ln(), o.torque_norm.ln()))
        .collect();
    ols_slope(&pts)
        .map(|b| (-b).max(0.0))
        .ok_or_else(|| CoreError::Config("effort calibration needs non-zero torques at two or more heights".into()))
}

/// Log-log slope of logged Δq against logged height over samples with non-zero slip.
pub fn fit_slip_exponent(outcomes: &[SampleOutcome]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = outcomes
        .iter()
        .filter(|o| o.delta_q > 0.0)
        .map(|o| (o.logged_height.ln(), o.delta_q.ln()))
        .collect();
    ols_slope(&pts)
        .map(|a| a.max(0.0))
        .ok_or_else(|| CoreError::Config("slip calibration needs non-zero slip at two or more heights".into()))
}

/// Scalars of a sample that the objective needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub reference: [f64; 3],
    pub delta_q: f64,
    pub torque_norm: f64,
    pub logged_height: f64,
    pub previous_command: Option<[f64; 4]>,
}

impl SampleOutcome {
    pub fn from_sample(s: &StepSample, cfg: &ObjectiveConfig) -> Result<Self> {
        let out = Self {
            reference: s.reference_velocity,
            delta_q: delta_q_with(&s.proprio_prev, &s.proprio_curr, cfg.slip_norm),
            torque_norm: s.proprio_curr.torque_norm(),
            logged_height: s.command.h,
            previous_command: s.previous_command.map(|c| c.to_array()),
        };
        ensure_finite("J_s", out.delta_q)?;
        ensure_finite("J_e", out.torque_norm)?;
        if !(out.logged_height > 0.0) {
            return Err(CoreError::Config(format!("logged height must be positive, got {}", out.logged_height)));
        }
        Ok(out)
    }
}

/// J_t for an arbitrary command under a response model.
pub fn objective_for_command(a: &BaseCommand, o: &SampleOutcome, cfg: &ObjectiveConfig, model: ResponseModel) -> ObjectiveTerms {
    let j_v = velocity_term(a, &o.reference, cfg);
    let (dq, tau) = match model {
        ResponseModel::Logged => (o.delta_q, o.torque_norm),
        ResponseModel::HeightScaled {
            slip_exponent,
            effort_exponent,
        } => {
            let r = a.h / o.logged_height;
            (o.delta_q * r.powf(slip_exponent), o.torque_norm * r.powf(-effort_exponent))
        }
    };
    let j_s = -cfg.beta_s * dq;
    let j_e = -cfg.beta_e * tau;
    let j_a = match (o.previous_command, cfg.beta_a > 0.0) {
        (Some(prev), true) => smoothness_term(a, &BaseCommand::from_array(prev), cfg),
        _ => 0.0,
    };
    ObjectiveTerms {
        j_v,
        j_s,
        j_e,
        j_a,
        total: j_v + j_s + j_e + j_a,
    }
}

/// J_t on the tape for a 4-wide command node.
pub fn objective_graph(g: &mut Graph<'_>, a: Var, o: &SampleOutcome, cfg: &ObjectiveConfig, model: ResponseModel) -> Result<Var> {
    let v = g.slice(a, 0, 3)?;
    let r = g.input(o.reference.to_vec());
    let d = g.sub(v, r)?;
    let sq = g.mul(d, d)?;
    let sq = g.sum(sq);
    let e = g.scale(sq, -1.0 / cfg.sigma_v);
    let e = g.exp(e);
    let j_v = g.scale(e, cfg.beta_v);
    g.label(j_v, "J_v");
    let h = g.slice(a, 3, 1)?;
    let (j_s, j_e) = match model {
        ResponseModel::Logged => (g.input(vec![-cfg.beta_s * o.delta_q]), g.input(vec![-cfg.beta_e * o.torque_norm])),
        ResponseModel::HeightScaled {
            slip_exponent,
            effort_exponent,
        } => {
            let ratio = g.scale(h, 1.0 / o.logged_height);
            let up = g.powf(ratio, slip_exponent);
            let down = g.powf(ratio, -effort_exponent);
            (g.scale(up, -cfg.beta_s * o.delta_q), g.scale(down, -cfg.beta_e * o.torque_norm))
        }
    };
    g.label(j_s, "J_s");
    g.label(j_e, "J_e");
    let mut total = g.add(j_v, j_s)?;
    total = g.add(total, j_e)?;
    if let (Some(prev), true) = (o.previous_command, cfg.beta_a > 0.0) {
        let p = g.input(prev.to_vec());
        let d = g.sub(a, p)?;
        let sq = g.mul(d, d)?;
        let sq = g.sum(sq);
        let sq = g.offset(sq, 1e-12);
        let n = g.powf(sq, 0.5);
        let j_a = g.scale(n, -cfg.beta_a);
        g.label(j_a, "J_a");
        total = g.add(total, j_a)?;
    }
    g.label(total, "J_t");
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub response: ResponseModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            response: ResponseModel::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config("learning_rate must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    pub max_grad_norm: f64,
    pub clipped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    /// Set when training stopped on a non-finite loss or update.
    pub aborted: Option<String>,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub modality: Modality,
    pub samples: usize,
}

impl TrainingReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.mean_loss)
    }
}

/// Samples converted once to network inputs and objective scalars.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: Vec<PreparedInput>,
    pub outcomes: Vec<SampleOutcome>,
}

impl TrainingSet {
    pub fn new(policy: &Policy, samples: &[StepSample], norm: &ProprioNormalizer, cfg: &ObjectiveConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::Config("training dataset is empty".into()));
        }
        let inputs = samples.iter().map(|s| policy.prepare(&s.observation, norm)).collect::<Result<Vec<_>>>()?;
        let outcomes = samples.iter().map(|s| SampleOutcome::from_sample(s, cfg)).collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, outcomes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Mean −J_t over a sample set, plain forward.
pub fn mean_loss(
    policy: &Policy,
    p: &ParamVector,
    set: &TrainingSet,
    modality: Modality,
    cfg: &ObjectiveConfig,
    model: ResponseModel,
) -> Result<f64> {
    let losses: Vec<f64> = set
        .inputs
        .par_iter()
        .zip(&set.outcomes)
        .map(|(input, o)| -> Result<f64> {
            let a = policy.act(p, input, modality)?;
            Ok(-objective_for_command(&a, o, cfg, model).total)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Gradient of the mean −J_t over `idx`.
pub fn batch_gradient(
    policy: &Policy,
    p: &ParamVector,
    set: &TrainingSet,
    idx: &[usize],
    modality: Modality,
    cfg: &ObjectiveConfig,
    model: ResponseModel,
) -> Result<(f64, Gradient)> {
    let parts: Vec<(f64, Gradient)> = idx
        .par_iter()
        .map(|&i| {
            gradient_of(p, |g| {
                let s = policy
                    .encoder()
                    .context_graph(g, &set.inputs[i], modality)
                    .map_err(|e| cart_nn::NnError::Config(e.to_string()))?;
                let a = policy.head_graph(g, s).map_err(|e| cart_nn::NnError::Config(e.to_string()))?;
                let j = objective_graph(g, a, &set.outcomes[i], cfg, model).map_err(|e| cart_nn::NnError::Config(e.to_string()))?;
                Ok(g.scale(j, -1.0))
            })
            .map_err(CoreError::from)
        })
        .collect::<Result<_>>()?;
    let mut grad = Gradient::zeros(p.len());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.add_assign(g);
    }
    let inv = 1.0 / idx.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

/// Minibatch gradient descent with momentum and global-norm clipping.
///
/// On a non-finite loss or update the last finite parameters are returned and
/// `report.aborted` says why.
pub fn train_policy(
    policy: &Policy,
    init: ParamVector,
    set: &TrainingSet,
    modality: Modality,
    cfg: &ObjectiveConfig,
    tc: &TrainConfig,
) -> Result<(ParamVector, TrainingReport)> {
    cfg.validate()?;
    tc.validate()?;
    policy.check_params(&init)?;
    if set.is_empty() {
        return Err(CoreError::Config("training dataset is empty".into()));
    }
    let mut params = init;
    let mut velocity = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut report = TrainingReport {
        initial_loss: mean_loss(policy, &params, set, modality, cfg, tc.response)?,
        epochs: vec![],
        steps: 0,
        aborted: None,
        objective: *cfg,
        train: tc.clone(),
        modality,
        samples: set.len(),
    };
    'epochs: for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut norm_sum, mut norm_max, mut clipped, mut batches) = (0.0, 0.0f64, 0usize, 0usize);
        for batch in order.chunks(tc.batch_size) {
            let mut grad = match batch_gradient(policy, &params, set, batch, modality, cfg, tc.response) {
                Ok((_, g)) => g,
                Err(e) => {
                    report.aborted = Some(format!("epoch {epoch}, step {}: {e}", report.steps));
                    break 'epochs;
                }
            };
            let pre = grad.clip_norm(cfg.clip_norm);
            norm_sum += pre;
            norm_max = norm_max.max(pre);
            clipped += usize::from(pre > cfg.clip_norm);
            batches += 1;
            let mut next = params.clone();
            for ((w, m), g) in next.values_mut().iter_mut().zip(velocity.iter_mut()).zip(grad.values()) {
                *m = tc.momentum * *m + g;
                *w -= tc.learning_rate * *m;
            }
            if next.values().iter().any(|v| !v.is_finite()) {
                report.aborted = Some(format!("epoch {epoch}, step {}: parameter update became non-finite", report.steps));
                break 'epochs;
            }
            params = next;
            report.steps += 1;
        }
        let loss = mean_loss(policy, &params, set, modality, cfg, tc.response)?;
        log::info!("epoch {epoch}: loss {loss:.6}");
        report.epochs.push(EpochStats {
            epoch,
            mean_loss: loss,
            mean_grad_norm: norm_sum / batches.max(1) as f64,
            max_grad_norm: norm_max,
            clipped_fraction: clipped as f64 / batches.max(1) as f64,
        });
        if !loss.is_finite() {
            report.aborted = Some(format!("epoch {epoch}: mean loss is non-finite"));
            break;
        }
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stance_state(slips: [[f64; 3]; 4], stance: [bool; 4]) -> ProprioState {
        ProprioState {
            foot_slip: slips,
            stance,
            ..Default::default()
        }
    }

    #[test]
    fn velocity_term_examples() {
        let cfg = ObjectiveConfig::default();
        let c = BaseCommand::new(0.4, 0.1, 0.0, 0.5);
        assert_eq!(velocity_term(&c, &[0.4, 0.1, 0.0], &cfg), cfg.beta_v);
        let cfg1 = ObjectiveConfig { sigma_v: 1.0, ..cfg };
        assert!((velocity_term(&BaseCommand::new(1.0, 0.0, 0.0, 0.5), &[0.0; 3], &cfg1) - (-1.0f64).exp()).abs() < 1e-15);
        let cfg0 = ObjectiveConfig { beta_v: 0.0, ..cfg };
        assert_eq!(velocity_term(&c, &[5.0, 0.0, 0.0], &cfg0), 0.0);
    }

    #[test]
    fn delta_q_examples() {
        let prev = stance_state([[0.0; 3]; 4], [true; 4]);
        let mut s = [[0.0; 3]; 4];
        s[1] = [0.03, 0.04, 0.0];
        assert_eq!(delta_q(&prev, &stance_state(s, [true; 4])), 0.05);
        assert_eq!(delta_q(&prev, &stance_state(s, [false; 4])), 0.0);
        assert_eq!(delta_q(&prev, &prev), 0.0);
        // Current-step flag only.
        let prev_swing = stance_state([[0.0; 3]; 4], [false; 4]);
        assert_eq!(delta_q(&prev_swing, &stance_state(s, [true; 4])), 0.05);
        s[1][2] = 1.0;
        assert_eq!(delta_q_with(&prev, &stance_state(s, [true; 4]), SlipNorm::Lateral), 0.05);
    }

    #[test]
    fn slip_and_effort_examples() {
        let cfg = ObjectiveConfig {
            beta_s: 2.0,
            beta_e: 1.0,
            ..Default::default()
        };
        let prev = stance_state([[0.0; 3]; 4], [true; 4]);
        let mut s = [[0.0; 3]; 4];
        s[0] = [0.03, 0.04, 0.0];
        assert!((slip_term(&prev, &stance_state(s, [true; 4]), &cfg) + 0.1).abs() < 1e-15);
        let mut tau = [0.0; 12];
        tau[0] = 3.0;
        tau[1] = 4.0;
        assert_eq!(effort_term(&tau, &cfg), -5.0);
        assert_eq!(effort_term(&[0.0; 12], &cfg), 0.0);
    }

    #[test]
    fn response_fit_recovers_power_laws() {
        let outcomes: Vec<SampleOutcome> = [0.2, 0.3, 0.45, 0.6]
            .iter()
            .map(|&h: &f64| SampleOutcome {
                reference: [1.0, 0.0, 0.0],
                delta_q: 0.2 * h.powf(1.5),
                torque_norm: 50.0 * h.powf(-0.3),
                logged_height: h,
                previous_command: None,
            })
            .collect();
        assert!((fit_slip_exponent(&outcomes).unwrap() - 1.5).abs() < 1e-9);
        assert!((fit_effort_exponent(&outcomes).unwrap() - 0.3).abs() < 1e-9);
        assert!(fit_effort_exponent(&outcomes[..1]).is_err());
    }

    #[test]
    fn clip_norm_zero_rejected() {
        let cfg = ObjectiveConfig {
            clip_norm: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ObjectiveConfig {
            sigma_v: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ObjectiveConfig {
            beta_s: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn command_objective_matches_logged_at_logged_command() {
        let cfg = ObjectiveConfig::default();
        let o = SampleOutcome {
            reference: [1.0, 0.0, 0.0],
            delta_q: 0.02,
            torque_norm: 40.0,
            logged_height: 0.45,
            previous_command: None,
        };
        let a = BaseCommand::new(0.8, 0.1, 0.0, 0.45);
        let l = objective_for_command(&a, &o, &cfg, ResponseModel::Logged);
        let h = objective_for_command(&a, &o, &cfg, ResponseModel::default());
        assert!((l.total - h.total).abs() < 1e-15);
        let lower = objective_for_command(&BaseCommand { h: 0.3, ..a }, &o, &cfg, ResponseModel::default());
        assert!(lower.j_s > h.j_s && lower.j_e < h.j_e);
    }

    #[test]
    fn graph_objective_matches_plain() {
        let cfg = ObjectiveConfig {
            beta_a: 0.3,
            ..Default::default()
        };
        let o = SampleOutcome {
            reference: [1.0, 0.0, 0.0],
            delta_q: 0.03,
            torque_norm: 55.0,
            logged_height: 0.5,
            previous_command: Some([0.9, 0.0, 0.0, 0.5]),
        };
        let a = BaseCommand::new(0.7, -0.2, 0.05, 0.42);
        for model in [ResponseModel::Logged, ResponseModel::default()] {
            let p = ParamVector::zeros(cart_nn::LayoutBuilder::new().finish());
            let mut g = Graph::new(&p);
            let av = g.input(a.to_array().to_vec());
            let j = objective_graph(&mut g, av, &o, &cfg, model).unwrap();
            let plain = objective_for_command(&a, &o, &cfg, model).total;
            assert!((g.scalar(j) - plain).abs() < 1e-9);
        }
    }
}
