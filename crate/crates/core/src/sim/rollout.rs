// SPDX-License-Identifier: Apache-2.0

//! Point-to-point navigation rollouts.
//!
//! Controllers emit commands in the goal frame (x toward the goal); the
//! rollout rotates them into the world before stepping the gait.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gait::{step_gait, SimConfig, SimState};
use super::render::{mesh_features, render_rgbd, CameraConfig, MeshGridConfig};
use super::terrain::{generate_terrain, Heightfield, TerrainSpec};
use crate::error::{CoreError, Result};
use crate::types::{BaseCommand, Observation, ProprioState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub sim: SimConfig,
    pub camera: CameraConfig,
    pub mesh: MeshGridConfig,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub timeout: f64,
    pub goal_radius: f64,
    pub tip_limit: f64,
    /// Control-rate proprio records handed to controllers.
    pub proprio_window: usize,
    /// Reference speed toward the goal.
    pub nominal_speed: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            camera: CameraConfig::default(),
            mesh: MeshGridConfig::default(),
            start: [0.0, 0.0],
            goal: [8.0, 0.0],
            timeout: 20.0,
            goal_radius: 0.3,
            tip_limit: 0.6,
            proprio_window: 8,
            nominal_speed: 1.0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, terrain: &TerrainSpec) -> Result<()> {
        self.sim.validate()?;
        terrain.validate()?;
        for (name, p) in [("start", self.start), ("goal", self.goal)] {
            if !terrain.contains(p[0], p[1]) {
                return Err(CoreError::Config(format!("{name} ({}, {}) lies outside the terrain", p[0], p[1])));
            }
        }
        if !(self.timeout > 0.0) || self.proprio_window == 0 {
            return Err(CoreError::Config("timeout and proprio_window must be positive".into()));
        }
        Ok(())
    }
}

/// What a controller sees at a control step.
pub struct ControlInput<'a> {
    pub time: f64,
    pub base: [f64; 3],
    pub goal: [f64; 2],
    /// Reference velocity in the goal frame.
    pub reference: [f64; 3],
    pub observation: Option<&'a Observation>,
    pub previous: BaseCommand,
}

pub trait Controller {
    fn name(&self) -> String;
    fn needs_observation(&self) -> bool;
    fn command(&mut self, input: &ControlInput<'_>) -> Result<BaseCommand>;
}

/// Constant speed toward the goal at a fixed body height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedCommand {
    pub speed: f64,
    pub height: f64,
}

impl Controller for FixedCommand {
    fn name(&self) -> String {
        format!("fixed(v={},h={})", self.speed, self.height)
    }

    fn needs_observation(&self) -> bool {
        false
    }

    fn command(&mut self, _: &ControlInput<'_>) -> Result<BaseCommand> {
        Ok(BaseCommand::new(self.speed, 0.0, 0.0, self.height))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub controller: String,
    pub dt: f64,
    pub control_every: usize,
    pub time: Vec<f64>,
    pub base_position: Vec<[f64; 3]>,
    pub base_orientation: Vec<[f64; 3]>,
    pub orientation_rates: Vec<[f64; 3]>,
    /// Terrain pitch under the body; the reference for pitch statistics.
    pub pitch_equilibrium: Vec<f64>,
    pub proprio: Vec<ProprioState>,
    /// Command in force at each step, world frame.
    pub commands: Vec<BaseCommand>,
    pub goal_reached: bool,
    pub tipped: bool,
    pub elapsed: f64,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    fn push(&mut self, t: f64, s: &SimState, pitch_eq: f64, p: ProprioState, c: BaseCommand) {
        self.time.push(t);
        self.base_position.push(s.base);
        self.base_orientation.push(s.orientation.angles);
        self.orientation_rates.push(s.orientation.rates);
        self.pitch_equilibrium.push(pitch_eq);
        self.proprio.push(p);
        self.commands.push(c);
    }

    /// Mean forward speed over the trace (horizontal distance from start over elapsed time).
    pub fn mean_speed(&self) -> f64 {
        if self.len() < 2 || self.elapsed <= 0.0 {
            return 0.0;
        }
        let (a, b) = (self.base_position[0], self.base_position[self.len() - 1]);
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt() / self.elapsed
    }
}

/// Terrain pitch over the body length, in the body pitch convention (nose up negative).
pub fn terrain_pitch(terrain: &Heightfield, base: [f64; 3], body_length: f64) -> f64 {
    let half = body_length / 2.0;
    let front = terrain.height_at(base[0] + half, base[1]);
    let rear = terrain.height_at(base[0] - half, base[1]);
    -((front - rear) / body_length).atan()
}

/// Builds the observation the policy sees at the current state.
pub fn observe(cfg: &RolloutConfig, terrain: &Heightfield, state: &SimState, history: &[ProprioState]) -> Observation {
    let start = history.len().saturating_sub(cfg.proprio_window);
    let mut window: Vec<ProprioState> = history[start..].to_vec();
    while window.len() < cfg.proprio_window {
        window.insert(0, window.first().copied().unwrap_or_default());
    }
    Observation {
        rgbd: render_rgbd(terrain, state.base, &cfg.camera),
        height: cfg.camera.height,
        width: cfg.camera.width,
        mesh_features: mesh_features(terrain, state.base, &cfg.mesh),
        proprio_window: window,
    }
}

fn to_world(c: &BaseCommand, heading: f64) -> BaseCommand {
    let (s, co) = heading.sin_cos();
    BaseCommand::new(co * c.v_x - s * c.v_y, s * c.v_x + co * c.v_y, c.v_z, c.h)
}

pub fn run_rollout(
    controller: &mut dyn Controller,
    terrain_spec: &TerrainSpec,
    cfg: &RolloutConfig,
    perturbation: f64,
    seed: u64,
) -> Result<RolloutTrace> {
    cfg.validate(terrain_spec)?;
    let terrain = generate_terrain(terrain_spec)?;
    run_rollout_on(controller, &terrain, cfg, perturbation, seed)
}

/// As [`run_rollout`] on a pre-generated heightfield.
pub fn run_rollout_on(
    controller: &mut dyn Controller,
    terrain: &Heightfield,
    cfg: &RolloutConfig,
    perturbation: f64,
    seed: u64,
) -> Result<RolloutTrace> {
    let sim = &cfg.sim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SimState::new(sim, terrain, cfg.start)?;
    let mut trace = RolloutTrace {
        controller: controller.name(),
        dt: sim.dt,
        control_every: sim.control_every,
        ..Default::default()
    };
    let mut history = vec![state.resting_proprio()];
    let mut command = state.command;
    let max_steps = (cfg.timeout / sim.dt).round() as u64;
    let pitch0 = terrain_pitch(terrain, state.base, sim.robot.body_length);
    trace.push(0.0, &state, pitch0, history[0], command);

    let reached = |s: &SimState| ((s.base[0] - cfg.goal[0]).powi(2) + (s.base[1] - cfg.goal[1]).powi(2)).sqrt() <= cfg.goal_radius;
    if reached(&state) {
        trace.goal_reached = true;
        return Ok(trace);
    }
    for _ in 0..max_steps {
        if state.step % sim.control_every as u64 == 0 {
            let heading = (cfg.goal[1] - state.base[1]).atan2(cfg.goal[0] - state.base[0]);
            let obs = controller.needs_observation().then(|| observe(cfg, terrain, &state, &history));
            let input = ControlInput {
                time: state.time(sim),
                base: state.base,
                goal: cfg.goal,
                reference: [cfg.nominal_speed, 0.0, 0.0],
                observation: obs.as_ref(),
                previous: command,
            };
            command = to_world(&controller.command(&input)?, heading);
        }
        let p = step_gait(&mut state, &command, terrain, perturbation, sim, &mut rng)?;
        if state.step % sim.control_every as u64 == 0 {
            history.push(p);
            if history.len() > cfg.proprio_window {
                history.remove(0);
            }
        }
        let t = state.time(sim);
        let pitch_eq = terrain_pitch(terrain, state.base, sim.robot.body_length);
        trace.push(t, &state, pitch_eq, p, state.command);
        trace.elapsed = t;
        let [roll, pitch, _] = state.orientation.angles;
        if roll.abs() >= cfg.tip_limit || pitch.abs() >= cfg.tip_limit {
            trace.tipped = true;
            break;
        }
        if reached(&state) {
            trace.goal_reached = true;
            break;
        }
    }
    Ok(trace)
}
