// SPDX-License-Identifier: Apache-2.0

//! Reduced-order quadruped simulator.

pub mod gait;
pub mod render;
pub mod response;
pub mod robot;
pub mod rollout;
pub mod sweep;
pub mod terrain;

pub use gait::{step_gait, SimConfig, SimState, SlipConfig};
pub use response::{base_response, contact_plane_attitude, OrientationState, ResponseConfig};
pub use robot::RobotModel;
pub use rollout::{run_rollout, run_rollout_on, ControlInput, Controller, FixedCommand, RolloutConfig, RolloutTrace};
pub use sweep::{deltaq_vibration_sweep, sweep_trends, SweepConfig, SweepRow};
pub use terrain::{generate_terrain, Heightfield, TerrainKind, TerrainSpec};
