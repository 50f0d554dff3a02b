// SPDX-License-Identifier: Apache-2.0

//! Data carried between the simulator, the encoders and the objective.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const NUM_LEGS: usize = 4;
pub const NUM_JOINTS: usize = 12;
/// Width of one flattened proprioceptive record.
pub const PROPRIO_DIM: usize = 40;
pub const MESH_DIM: usize = 128;
pub const RGBD_CHANNELS: usize = 4;

/// Leg order shared by every per-leg array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Leg {
    FR,
    FL,
    HR,
    HL,
}

impl Leg {
    pub const ALL: [Leg; NUM_LEGS] = [Leg::FR, Leg::FL, Leg::HR, Leg::HL];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Leg::FR => "FR",
            Leg::FL => "FL",
            Leg::HR => "HR",
            Leg::HL => "HL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProprioState {
    pub joint_torques: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    /// Per-leg slip displacement, robot frame, metres.
    pub foot_slip: [[f64; 3]; NUM_LEGS],
    pub stance: [bool; NUM_LEGS],
}

impl ProprioState {
    /// Torques, velocities, slips (leg-major), then stance flags as 0/1.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PROPRIO_DIM);
        self.write_into(&mut v);
        v
    }

    pub fn write_into(&self, v: &mut Vec<f64>) {
        v.extend_from_slice(&self.joint_torques);
        v.extend_from_slice(&self.joint_velocities);
        for s in &self.foot_slip {
            v.extend_from_slice(s);
        }
        v.extend(self.stance.iter().map(|&s| if s { 1.0 } else { 0.0 }));
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != PROPRIO_DIM {
            return Err(CoreError::Shape(format!("proprio record needs {PROPRIO_DIM} values, got {}", v.len())));
        }
        let mut p = ProprioState::default();
        p.joint_torques.copy_from_slice(&v[0..12]);
        p.joint_velocities.copy_from_slice(&v[12..24]);
        for l in 0..NUM_LEGS {
            p.foot_slip[l].copy_from_slice(&v[24 + 3 * l..27 + 3 * l]);
        }
        for l in 0..NUM_LEGS {
            let f = v[36 + l];
            if f != 0.0 && f != 1.0 {
                return Err(CoreError::Shape(format!("stance flag must be 0 or 1, got {f}")));
            }
            p.stance[l] = f == 1.0;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    pub fn torque_norm(&self) -> f64 {
        self.joint_torques.iter().map(|t| t * t).sum::<f64>().sqrt()
    }
}

/// High-level action `[v_x, v_y, v_z, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseCommand {
    pub v_x: f64,
    pub v_y: f64,
    pub v_z: f64,
    pub h: f64,
}

impl BaseCommand {
    pub fn new(v_x: f64, v_y: f64, v_z: f64, h: f64) -> Self {
        Self { v_x, v_y, v_z, h }
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.v_x, self.v_y, self.v_z]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.v_x, self.v_y, self.v_z, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandBounds {
    pub v_max: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl Default for CommandBounds {
    fn default() -> Self {
        Self {
            v_max: 1.6,
            h_min: 0.1,
            h_max: 0.7,
        }
    }
}

impl CommandBounds {
    pub fn contains(&self, c: &BaseCommand) -> bool {
        c.velocity().iter().all(|v| v.abs() <= self.v_max) && c.h >= self.h_min && c.h <= self.h_max
    }

    pub fn clamp(&self, c: &BaseCommand) -> BaseCommand {
        let v = |x: f64| x.clamp(-self.v_max, self.v_max);
        BaseCommand::new(v(c.v_x), v(c.v_y), v(c.v_z), c.h.clamp(self.h_min, self.h_max))
    }
}

/// One timestep's sensor bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `4×height×width`, channels R, G, B, depth (m).
    pub rgbd: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub mesh_features: Vec<f64>,
    /// Oldest first.
    pub proprio_window: Vec<ProprioState>,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if self.rgbd.len() != RGBD_CHANNELS * self.height * self.width {
            return Err(CoreError::Shape(format!(
                "rgbd holds {} values, expected 4x{}x{}",
                self.rgbd.len(),
                self.height,
                self.width
            )));
        }
        let plane = self.height * self.width;
        if self.rgbd[3 * plane..].iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(CoreError::Shape("depth channel must be finite and non-negative".into()));
        }
        if self.mesh_features.len() != MESH_DIM {
            return Err(CoreError::Shape(format!(
                "mesh features must have length {MESH_DIM}, got {}",
                self.mesh_features.len()
            )));
        }
        if self.proprio_window.is_empty() {
            return Err(CoreError::Shape("proprio window is empty".into()));
        }
        Ok(())
    }

    /// Window flattened to `T×40`.
    pub fn proprio_matrix(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.proprio_window.len() * PROPRIO_DIM);
        for p in &self.proprio_window {
            p.write_into(&mut v);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextState {
    pub z_v: Vec<f64>,
    pub z_m: Vec<f64>,
    pub z_p: Vec<f64>,
    pub c_t: Vec<f64>,
    pub s_hat: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proprio_round_trip() {
        let mut p = ProprioState::default();
        p.joint_torques[3] = 2.5;
        p.foot_slip[2] = [0.1, -0.2, 0.0];
        p.stance = [true, false, false, true];
        let v = p.to_vec();
        assert_eq!(v.len(), PROPRIO_DIM);
        assert_eq!(ProprioState::from_slice(&v).unwrap(), p);
    }

    #[test]
    fn bounds_clamp() {
        let b = CommandBounds::default();
        let c = b.clamp(&BaseCommand::new(3.0, -2.0, 0.1, 0.05));
        assert_eq!(c, BaseCommand::new(1.6, -1.6, 0.1, 0.1));
        assert!(b.contains(&c));
    }
}
