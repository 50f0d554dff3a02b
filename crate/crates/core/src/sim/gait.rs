// SPDX-License-Identifier: Apache-2.0

//! Kinematic trot, stance slip injection and synthetic proprioception.
//!
//! The base heading is fixed, so the robot frame used for slips is the
//! world frame translated to the base. Yaw only appears as vibration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::response::{base_response, OrientationState, ResponseConfig};
use super::robot::RobotModel;
use super::terrain::Heightfield;
use crate::error::{CoreError, Result};
use crate::types::{BaseCommand, Leg, ProprioState, NUM_LEGS};

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlipConfig {
    /// Terrain-induced slip per control step per unit surface gradient (m).
    pub terrain_gain: f64,
    pub nominal_height: f64,
    /// Terrain slip scales as `(h / nominal_height)^height_exponent`.
    pub height_exponent: f64,
    /// Increments that would push |r| past this are mirrored.
    pub max_offset: f64,
}

impl Default for SlipConfig {
    fn default() -> Self {
        Self {
            terrain_gain: 0.25,
            nominal_height: 0.5,
            height_exponent: 2.0,
            max_offset: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub robot: RobotModel,
    pub dt: f64,
    /// Simulation steps per control step.
    pub control_every: usize,
    pub gait_cycle: f64,
    pub duty: f64,
    pub swing_height: f64,
    pub response: ResponseConfig,
    pub slip: SlipConfig,
    /// Body heights the kinematic legs can hold.
    pub height_limits: [f64; 2],
    /// First-order rate of base height tracking (1/s).
    pub height_tracking: f64,
    /// Extra load share per metre of support offset, relative to half the body width.
    pub load_asymmetry_gain: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            robot: RobotModel::default(),
            dt: 0.01,
            control_every: 10,
            gait_cycle: 0.6,
            duty: 0.5,
            swing_height: 0.08,
            response: ResponseConfig::default(),
            slip: SlipConfig::default(),
            height_limits: [0.15, 0.62],
            height_tracking: 10.0,
            load_asymmetry_gain: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(CoreError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.control_every == 0 {
            return Err(CoreError::Config("control_every must be positive".into()));
        }
        let steps = self.gait_cycle / self.dt;
        if !(self.gait_cycle > 0.0) || (steps - steps.round()).abs() > 1e-6 {
            return Err(CoreError::Config("gait_cycle must be a positive multiple of dt".into()));
        }
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return Err(CoreError::Config("duty must lie in (0, 1)".into()));
        }
        if !(self.height_limits[0] > 0.0 && self.height_limits[0] < self.height_limits[1] && self.height_limits[1] < self.robot.reach()) {
            return Err(CoreError::Config("height_limits must satisfy 0 < min < max < leg reach".into()));
        }
        Ok(())
    }

    pub fn control_dt(&self) -> f64 {
        self.dt * self.control_every as f64
    }

    pub fn cycle_steps(&self) -> usize {
        (self.gait_cycle / self.dt).round() as usize
    }

    pub fn stance_steps(&self) -> usize {
        (self.cycle_steps() as f64 * self.duty).round() as usize
    }
}

/// FR+HL stance in the first half of the cycle, FL+HR in the second.
pub fn trot_stance(cycle_pos: usize, stance_steps: usize) -> [bool; NUM_LEGS] {
    let first = cycle_pos < stance_steps;
    [first, !first, !first, first]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub step: u64,
    pub base: [f64; 3],
    pub stance: [bool; NUM_LEGS],
    /// Contact point at touchdown, before slip.
    pub foothold: [[f64; 3]; NUM_LEGS],
    pub slip: [[f64; 3]; NUM_LEGS],
    pub liftoff: [[f64; 3]; NUM_LEGS],
    pub feet: [[f64; 3]; NUM_LEGS],
    pub joints: [[f64; 3]; NUM_LEGS],
    pub orientation: OrientationState,
    pub command: BaseCommand,
}

impl SimState {
    /// Standing at `start` with every foot under its hip.
    pub fn new(cfg: &SimConfig, terrain: &Heightfield, start: [f64; 2]) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.slip.nominal_height.clamp(cfg.height_limits[0], cfg.height_limits[1]);
        let ground = ground_height(cfg, terrain, start);
        let base = [start[0], start[1], ground + h];
        let mut feet = [[0.0; 3]; NUM_LEGS];
        for leg in Leg::ALL {
            let hip = cfg.robot.hip(leg);
            let (x, y) = (start[0] + hip[0], start[1] + hip[1]);
            feet[leg.index()] = [x, y, terrain.height_at(x, y)];
        }
        let mut s = Self {
            step: 0,
            base,
            stance: trot_stance(0, cfg.stance_steps()),
            foothold: feet,
            slip: [[0.0; 3]; NUM_LEGS],
            liftoff: feet,
            feet,
            joints: [[0.0; 3]; NUM_LEGS],
            orientation: OrientationState::default(),
            command: BaseCommand::new(0.0, 0.0, 0.0, h),
        };
        s.joints = solve_joints(cfg, &s, &s.joints);
        Ok(s)
    }

    pub fn time(&self, cfg: &SimConfig) -> f64 {
        self.step as f64 * cfg.dt
    }

    /// Snapshot with zero torques and velocities; used for the initial record.
    pub fn resting_proprio(&self) -> ProprioState {
        ProprioState {
            foot_slip: self.slip,
            stance: self.stance,
            ..Default::default()
        }
    }
}

/// Mean terrain height under the hips.
pub fn ground_height(cfg: &SimConfig, terrain: &Heightfield, base_xy: [f64; 2]) -> f64 {
    Leg::ALL
        .iter()
        .map(|&l| {
            let hip = cfg.robot.hip(l);
            terrain.height_at(base_xy[0] + hip[0], base_xy[1] + hip[1])
        })
        .sum::<f64>()
        / NUM_LEGS as f64
}

fn rotation(rpy: [f64; 3]) -> [[f64; 3]; 3] {
    let (sr, cr) = rpy[0].sin_cos();
    let (sp, cp) = rpy[1].sin_cos();
    let (sy, cy) = rpy[2].sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

fn solve_joints(cfg: &SimConfig, s: &SimState, prev: &[[f64; 3]; NUM_LEGS]) -> [[f64; 3]; NUM_LEGS] {
    let r = rotation(s.orientation.angles);
    let mut out = *prev;
    for leg in Leg::ALL {
        let f = s.feet[leg.index()];
        let d = [f[0] - s.base[0], f[1] - s.base[1], f[2] - s.base[2]];
        // Body frame = Rᵀ·d.
        let body = [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ];
        let target = cfg.robot.clamp_to_reach(body, leg);
        if let Ok(q) = cfg.robot.ik_leg(target, leg) {
            out[leg.index()] = q;
        }
    }
    out
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Advances one `dt`. Slip increments land on control-step boundaries, so Δq
/// between consecutive control-rate records has expectation `perturbation`.
pub fn step_gait(
    state: &mut SimState,
    command: &BaseCommand,
    terrain: &Heightfield,
    perturbation: f64,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProprioState> {
    if !command.is_finite() {
        return Err(CoreError::NonFinite {
            term: "command".into(),
            value: command.to_array().into_iter().find(|v| !v.is_finite()).unwrap_or(f64::NAN),
        });
    }
    if !(perturbation >= 0.0) || !perturbation.is_finite() {
        return Err(CoreError::Config(format!(
            "perturbation must be a finite non-negative length, got {perturbation}"
        )));
    }
    let dt = cfg.dt;
    let cmd = BaseCommand {
        h: command.h.clamp(cfg.height_limits[0], cfg.height_limits[1]),
        ..*command
    };
    state.command = cmd;
    state.step += 1;

    state.base[0] += cmd.v_x * dt;
    state.base[1] += cmd.v_y * dt;
    let z_target = ground_height(cfg, terrain, [state.base[0], state.base[1]]) + cmd.h;
    state.base[2] += (cmd.v_z + cfg.height_tracking * (z_target - state.base[2])) * dt;

    let cycle = cfg.cycle_steps();
    let stance_steps = cfg.stance_steps();
    let swing_steps = cycle - stance_steps;
    let pos = (state.step % cycle as u64) as usize;
    let stance = trot_stance(pos, stance_steps);
    let swing_time = swing_steps as f64 * dt;
    let stance_time = stance_steps as f64 * dt;

    for leg in Leg::ALL {
        let i = leg.index();
        let hip = cfg.robot.hip(leg);
        match (state.stance[i], stance[i]) {
            (true, false) => {
                state.liftoff[i] = state.feet[i];
                state.slip[i] = [0.0; 3];
            }
            (false, true) => {
                state.foothold[i] = state.feet[i];
                state.slip[i] = [0.0; 3];
            }
            _ => {}
        }
        if !stance[i] {
            // Progress through swing, 1 on the last swing step.
            let into = if pos >= stance_steps {
                pos - stance_steps
            } else {
                pos + cycle - stance_steps
            };
            let into = if leg_swings_first_half(i) { pos } else { into };
            let s = (into + 1) as f64 / swing_steps as f64;
            let remaining = (1.0 - s) * swing_time;
            let tx = state.base[0] + hip[0] + cmd.v_x * (remaining + stance_time / 2.0);
            let ty = state.base[1] + hip[1] + cmd.v_y * (remaining + stance_time / 2.0);
            let tz = terrain.height_at(tx, ty);
            let lo = state.liftoff[i];
            let w = smoothstep(s);
            state.feet[i] = [
                lo[0] + (tx - lo[0]) * w,
                lo[1] + (ty - lo[1]) * w,
                lo[2] + (tz - lo[2]) * s + cfg.swing_height * (std::f64::consts::PI * s).sin(),
            ];
        }
    }
    state.stance = stance;

    if state.step.is_multiple_of(cfg.control_every as u64) {
        inject_slip(state, terrain, perturbation, cfg, rng);
    }
    for i in 0..NUM_LEGS {
        if stance[i] {
            let f = state.foothold[i];
            let (x, y) = (f[0] + state.slip[i][0], f[1] + state.slip[i][1]);
            state.feet[i] = [x, y, terrain.height_at(x, y)];
        }
    }

    // Support plane from stance contacts plus the last footholds of swing legs.
    let mut contacts = [[0.0; 3]; NUM_LEGS];
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..NUM_LEGS {
        contacts[i] = if stance[i] { state.feet[i] } else { state.liftoff[i] };
        if stance[i] {
            let p = [state.feet[i][0] - state.base[0], state.feet[i][1] - state.base[1]];
            let r = state.slip[i];
            num += p[0] * r[1] - p[1] * r[0];
            den += p[0] * p[0] + p[1] * p[1];
        }
    }
    let yaw_target = if den > 0.0 { num / den } else { state.orientation.target[2] };
    state.orientation = base_response(&contacts, yaw_target, &state.orientation, dt, &cfg.response);

    let prev_joints = state.joints;
    state.joints = solve_joints(cfg, state, &prev_joints);

    let mut proprio = ProprioState {
        foot_slip: state.slip,
        stance,
        ..Default::default()
    };
    for i in 0..NUM_LEGS {
        for j in 0..3 {
            proprio.joint_velocities[3 * i + j] = (state.joints[i][j] - prev_joints[i][j]) / dt;
        }
    }
    let torques = support_torques(cfg, state);
    proprio.joint_torques = torques;
    Ok(proprio)
}

fn leg_swings_first_half(i: usize) -> bool {
    // FL and HR swing while FR and HL stand.
    i == Leg::FL.index() || i == Leg::HR.index()
}

fn inject_slip(state: &mut SimState, terrain: &Heightfield, perturbation: f64, cfg: &SimConfig, rng: &mut ChaCha8Rng) {
    let n_stance = state.stance.iter().filter(|&&s| s).count();
    let per_leg = if n_stance > 0 { perturbation / n_stance as f64 } else { 0.0 };
    let height_scale = (state.command.h / cfg.slip.nominal_height).powf(cfg.slip.height_exponent);
    for i in 0..NUM_LEGS {
        let (u_mag, u_dir, t_mag, t_dir): (f64, f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen(), rng.gen());
        if !state.stance[i] {
            continue;
        }
        let f = state.foothold[i];
        let r = state.slip[i];
        let grad = terrain.gradient_at(f[0] + r[0], f[1] + r[1]);
        let gmag = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        let tau = std::f64::consts::TAU;
        let m1 = 2.0 * per_leg * u_mag;
        let m2 = 2.0 * cfg.slip.terrain_gain * gmag * height_scale * t_mag;
        let mut inc = [
            m1 * (tau * u_dir).cos() + m2 * (tau * t_dir).cos(),
            m1 * (tau * u_dir).sin() + m2 * (tau * t_dir).sin(),
        ];
        let (nx, ny) = (r[0] + inc[0], r[1] + inc[1]);
        if (nx * nx + ny * ny).sqrt() > cfg.slip.max_offset {
            inc = [-inc[0], -inc[1]];
        }
        let (x, y) = (r[0] + inc[0], r[1] + inc[1]);
        let dz = terrain.height_at(f[0] + x, f[1] + y) - terrain.height_at(f[0], f[1]);
        state.slip[i] = [x, y, dz];
    }
}

/// Static joint torques `Jᵀ·F` for the vertical load on each stance foot.
fn support_torques(cfg: &SimConfig, state: &SimState) -> [f64; 12] {
    let stance: Vec<usize> = (0..NUM_LEGS).filter(|&i| state.stance[i]).collect();
    let mut tau = [0.0; 12];
    if stance.is_empty() {
        return tau;
    }
    let offset = support_offset(state, &stance);
    let share = cfg.robot.mass * GRAVITY / stance.len() as f64;
    let load = share * (1.0 + cfg.load_asymmetry_gain * offset / (cfg.robot.body_width / 2.0));
    for &i in &stance {
        let jac = cfg.robot.leg_jacobian(state.joints[i], Leg::ALL[i]);
        for j in 0..3 {
            tau[3 * i + j] = jac[j][2] * load;
        }
    }
    tau
}

/// Horizontal distance from the base to the support line or centroid.
fn support_offset(state: &SimState, stance: &[usize]) -> f64 {
    let b = [state.base[0], state.base[1]];
    if stance.len() == 2 {
        let (p, q) = (state.feet[stance[0]], state.feet[stance[1]]);
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let len = (dx * dx + dy * dy).sqrt();
        if len > 1e-9 {
            return ((b[0] - p[0]) * dy - (b[1] - p[1]) * dx).abs() / len;
        }
    }
    let n = stance.len() as f64;
    let c = stance
        .iter()
        .fold([0.0, 0.0], |c, &i| [c[0] + state.feet[i][0] / n, c[1] + state.feet[i][1] / n]);
    ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::delta_q;
    use crate::sim::terrain::{generate_terrain, TerrainKind, TerrainSpec};
    use rand::SeedableRng;

    fn flat() -> Heightfield {
        generate_terrain(&TerrainSpec::new(TerrainKind::Flat, 0.0, 0)).unwrap()
    }

    #[test]
    fn trot_alternates_diagonals() {
        let cfg = SimConfig::default();
        let t = flat();
        let mut s = SimState::new(&cfg, &t, [0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = vec![];
        for _ in 0..120 {
            let p = step_gait(&mut s, &BaseCommand::new(0.5, 0.0, 0.0, 0.5), &t, 0.0, &cfg, &mut rng).unwrap();
            if seen.last() != Some(&p.stance) {
                seen.push(p.stance);
            }
        }
        let a = [true, false, false, true];
        let b = [false, true, true, false];
        assert!(seen.len() >= 4);
        for w in seen.windows(2) {
            assert!((w[0] == a && w[1] == b) || (w[0] == b && w[1] == a));
        }
    }

    #[test]
    fn zero_perturbation_flat_has_no_slip_or_vibration() {
        let cfg = SimConfig::default();
        let t = flat();
        let mut s = SimState::new(&cfg, &t, [0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut prev = s.resting_proprio();
        for k in 1..=500 {
            let p = step_gait(&mut s, &BaseCommand::new(1.0, 0.0, 0.0, 0.5), &t, 0.0, &cfg, &mut rng).unwrap();
            if k % 10 == 0 {
                assert_eq!(delta_q(&prev, &p), 0.0);
                prev = p;
            }
            assert!(s.orientation.rates.iter().all(|r| r.abs() < 1e-12));
        }
    }

    #[test]
    fn base_follows_command() {
        let cfg = SimConfig::default();
        let t = flat();
        let mut s = SimState::new(&cfg, &t, [0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            step_gait(&mut s, &BaseCommand::new(1.0, 0.0, 0.0, 0.5), &t, 0.0, &cfg, &mut rng).unwrap();
        }
        assert!((s.base[0] - 10.0).abs() < 0.1, "x = {}", s.base[0]);
        assert!((s.base[2] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn slip_calibration_matches_target() {
        let cfg = SimConfig::default();
        let t = flat();
        for target in [0.01, 0.03, 0.05] {
            let mut s = SimState::new(&cfg, &t, [0.0, 0.0]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut prev = s.resting_proprio();
            let (mut total, mut n) = (0.0, 0);
            for k in 1..=20000 {
                let p = step_gait(&mut s, &BaseCommand::new(0.6, 0.0, 0.0, 0.5), &t, target, &cfg, &mut rng).unwrap();
                if k % 10 == 0 {
                    total += delta_q(&prev, &p);
                    n += 1;
                    prev = p;
                }
            }
            let mean = total / n as f64;
            assert!((mean - target).abs() <= 0.1 * target, "target {target} mean {mean}");
        }
    }

    #[test]
    fn non_finite_command_rejected() {
        let cfg = SimConfig::default();
        let t = flat();
        let mut s = SimState::new(&cfg, &t, [0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(step_gait(&mut s, &BaseCommand::new(f64::NAN, 0.0, 0.0, 0.5), &t, 0.0, &cfg, &mut rng).is_err());
    }

    #[test]
    fn stance_torques_nonzero_swing_zero() {
        let cfg = SimConfig::default();
        let t = flat();
        let mut s = SimState::new(&cfg, &t, [0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = step_gait(&mut s, &BaseCommand::new(0.5, 0.0, 0.0, 0.5), &t, 0.0, &cfg, &mut rng).unwrap();
        for i in 0..4 {
            let n: f64 = p.joint_torques[3 * i..3 * i + 3].iter().map(|v| v * v).sum();
            assert_eq!(n > 0.0, p.stance[i], "leg {i}");
        }
    }
}
