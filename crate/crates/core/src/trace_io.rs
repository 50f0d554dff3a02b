// SPDX-License-Identifier: Apache-2.0

//! Rollout traces on disk: a labelled JSON file that round-trips, and a flat CSV for plotting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::sim::RolloutTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledTrace {
    pub label: String,
    pub terrain: String,
    pub seed: u64,
    pub trace: RolloutTrace,
}

pub fn write_trace_json(path: &Path, t: &LabelledTrace) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    let text = serde_json::to_string(t).map_err(|e| CoreError::Runtime(e.to_string()))?;
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn read_trace_json(path: &Path) -> Result<LabelledTrace> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let t: LabelledTrace = serde_json::from_str(&text).map_err(|e| CoreError::data(path, e.to_string()))?;
    let n = t.trace.len();
    let tr = &t.trace;
    if [
        tr.base_position.len(),
        tr.base_orientation.len(),
        tr.orientation_rates.len(),
        tr.pitch_equilibrium.len(),
        tr.proprio.len(),
        tr.commands.len(),
    ]
    .iter()
    .any(|&m| m != n)
    {
        return Err(CoreError::data(path, "trace columns have different lengths"));
    }
    Ok(t)
}

/// Time, pose, rates, equilibrium pitch and command per simulation step.
pub fn write_trace_csv(path: &Path, t: &RolloutTrace) -> Result<()> {
    let err = |e: csv::Error| CoreError::data(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "t",
        "x",
        "y",
        "z",
        "roll",
        "pitch",
        "yaw",
        "roll_rate",
        "pitch_rate",
        "yaw_rate",
        "pitch_eq",
        "v_x",
        "v_y",
        "v_z",
        "h",
        "torque_norm",
    ])
    .map_err(err)?;
    for i in 0..t.len() {
        let p = t.base_position[i];
        let o = t.base_orientation[i];
        let r = t.orientation_rates[i];
        let c = t.commands[i];
        let row = [
            t.time[i],
            p[0],
            p[1],
            p[2],
            o[0],
            o[1],
            o[2],
            r[0],
            r[1],
            r[2],
            t.pitch_equilibrium[i],
            c.v_x,
            c.v_y,
            c.v_z,
            c.h,
            t.proprio[i].torque_norm(),
        ];
        w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_rollout, FixedCommand, RolloutConfig, TerrainKind, TerrainSpec};

    #[test]
    fn json_round_trip_and_csv_rows() {
        let cfg = RolloutConfig {
            goal: [2.0, 0.0],
            ..Default::default()
        };
        let mut c = FixedCommand { speed: 1.0, height: 0.5 };
        let trace = run_rollout(&mut c, &TerrainSpec::new(TerrainKind::Rough, 0.5, 3), &cfg, 0.0, 3).unwrap();
        let t = LabelledTrace {
            label: "fixed".into(),
            terrain: "rough".into(),
            seed: 3,
            trace,
        };
        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("a/trace.json");
        write_trace_json(&jp, &t).unwrap();
        assert_eq!(read_trace_json(&jp).unwrap(), t);
        let cp = dir.path().join("trace.csv");
        write_trace_csv(&cp, &t.trace).unwrap();
        let rows = fs::read_to_string(&cp).unwrap().lines().count();
        assert_eq!(rows, t.trace.len() + 1);
    }
}
