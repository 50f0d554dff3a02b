// SPDX-License-Identifier: Apache-2.0

//! Vibration response to injected foot slip across walking speeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rollout::{run_rollout_on, FixedCommand, RolloutConfig};
use super::terrain::{generate_terrain, TerrainKind, TerrainSpec};
use crate::error::{CoreError, Result};
use crate::metrics::{rms_vibration, spearman, VibrationRms};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub speeds: Vec<f64>,
    pub deltaq: Vec<f64>,
    pub seeds: Vec<u64>,
    pub duration: f64,
    pub height: f64,
    pub rollout: RolloutConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            speeds: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            deltaq: vec![0.0, 0.0125, 0.025, 0.0375, 0.05],
            seeds: (0..5).collect(),
            duration: 10.0,
            height: 0.5,
            rollout: RolloutConfig {
                goal: [13.0, 0.0],
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub speed: f64,
    pub deltaq: f64,
    pub rms_roll: f64,
    pub rms_pitch: f64,
    pub rms_yaw: f64,
    pub rms_total: f64,
    pub std_total: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Flat-terrain fixed-command rollouts over the speed × Δq grid, one row per cell.
pub fn deltaq_vibration_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.speeds.is_empty() || cfg.deltaq.is_empty() || cfg.seeds.is_empty() {
        return Err(CoreError::Config("sweep grids must be non-empty".into()));
    }
    let spec = TerrainSpec::new(TerrainKind::Flat, 0.0, 0);
    let mut rc = cfg.rollout.clone();
    rc.timeout = cfg.duration;
    rc.validate(&spec)?;
    let terrain = generate_terrain(&spec)?;
    let cells: Vec<(f64, f64)> = cfg.speeds.iter().flat_map(|&v| cfg.deltaq.iter().map(move |&d| (v, d))).collect();
    cells
        .par_iter()
        .map(|&(speed, dq)| {
            let runs: Vec<VibrationRms> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let mut c = FixedCommand { speed, height: cfg.height };
                    run_rollout_on(&mut c, &terrain, &rc, dq, seed).map(|t| rms_vibration(&t))
                })
                .collect::<Result<_>>()?;
            let pick = |f: fn(&VibrationRms) -> f64| runs.iter().map(f).collect::<Vec<_>>();
            let (rms_total, std_total) = mean_std(&pick(|r| r.total));
            Ok(SweepRow {
                speed,
                deltaq: dq,
                rms_roll: mean_std(&pick(|r| r.roll)).0,
                rms_pitch: mean_std(&pick(|r| r.pitch)).0,
                rms_yaw: mean_std(&pick(|r| r.yaw)).0,
                rms_total,
                std_total,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedTrend {
    pub speed: f64,
    pub spearman: Option<f64>,
    /// Whether the smallest Δq cell has the lowest mean total RMS.
    pub zero_is_minimum: bool,
}

/// Per-speed rank correlation between Δq and mean total RMS.
pub fn sweep_trends(rows: &[SweepRow]) -> Vec<SpeedTrend> {
    let mut speeds: Vec<f64> = rows.iter().map(|r| r.speed).collect();
    speeds.dedup();
    speeds
        .into_iter()
        .map(|speed| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.speed == speed).collect();
            let dq: Vec<f64> = cell.iter().map(|r| r.deltaq).collect();
            let tot: Vec<f64> = cell.iter().map(|r| r.rms_total).collect();
            let lowest_dq = cell.iter().min_by(|a, b| a.deltaq.total_cmp(&b.deltaq)).map(|r| r.rms_total);
            let min_tot = tot.iter().copied().fold(f64::INFINITY, f64::min);
            SpeedTrend {
                speed,
                spearman: spearman(&dq, &tot),
                zero_is_minimum: lowest_dq == Some(min_tot),
            }
        })
        .collect()
}

pub fn write_sweep_csv(path: &std::path::Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::data(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CoreError::data(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_sweep_csv(path: &std::path::Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CoreError::data(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| CoreError::data(path, e.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_shape_and_trend() {
        let cfg = SweepConfig {
            speeds: vec![0.4, 1.0],
            deltaq: vec![0.0, 0.025, 0.05],
            seeds: vec![0, 1],
            duration: 4.0,
            ..Default::default()
        };
        let rows = deltaq_vibration_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        for t in sweep_trends(&rows) {
            assert!(t.zero_is_minimum, "{t:?}");
            assert!(t.spearman.unwrap() > 0.9, "{t:?}");
        }
        assert!(rows[0].rms_total <= 0.005);
    }

    #[test]
    fn empty_grid_rejected() {
        let cfg = SweepConfig {
            speeds: vec![],
            ..Default::default()
        };
        assert!(deltaq_vibration_sweep(&cfg).is_err());
    }
}
