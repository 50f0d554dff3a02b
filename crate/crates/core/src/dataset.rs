// SPDX-License-Identifier: Apache-2.0

//! Seeded data collection in the simulator and the on-disk run log format.
//!
//! A run directory holds `manifest.json`, `proprio.csv`, `mesh.csv`,
//! `commands.csv` and `frames/frame_NNNNNN.bin` (f32 little-endian,
//! channel-major RGBD). Records are at the control rate; proprio has one
//! more row than commands.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::objective::StepSample;
use crate::sim::gait::{step_gait, SimState};
use crate::sim::rollout::{observe, RolloutConfig};
use crate::sim::terrain::{generate_terrain, TerrainKind, TerrainSpec};
use crate::types::{BaseCommand, Observation, ProprioState, MESH_DIM, PROPRIO_DIM, RGBD_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub terrains: Vec<TerrainKind>,
    pub difficulties: Vec<f64>,
    pub runs_per_terrain: usize,
    pub control_steps: usize,
    pub speed_range: [f64; 2],
    pub lateral_speed: f64,
    pub height_range: [f64; 2],
    /// Probability of drawing a new command at each control step.
    pub resample_probability: f64,
    pub perturbation_range: [f64; 2],
    pub seed: u64,
    pub rollout: RolloutConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            terrains: TerrainKind::ALL.to_vec(),
            difficulties: vec![0.3, 0.7],
            runs_per_terrain: 1,
            control_steps: 60,
            speed_range: [0.4, 1.4],
            lateral_speed: 0.15,
            height_range: [0.2, 0.62],
            resample_probability: 0.3,
            perturbation_range: [0.0, 0.02],
            seed: 0,
            rollout: RolloutConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub terrain: TerrainSpec,
    pub seed: u64,
    pub perturbation: f64,
    pub height: usize,
    pub width: usize,
    pub control_dt: f64,
    /// Reference velocity, goal frame.
    pub reference: [f64; 3],
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub manifest: EpisodeManifest,
    pub frames: Vec<Vec<f64>>,
    pub mesh: Vec<Vec<f64>>,
    pub proprio: Vec<ProprioState>,
    pub commands: Vec<BaseCommand>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    fn validate(&self, dir: &Path) -> Result<()> {
        let k = self.commands.len();
        let m = &self.manifest;
        if self.frames.len() != k || self.mesh.len() != k || self.proprio.len() != k + 1 || m.steps != k {
            return Err(CoreError::data(
                dir,
                format!(
                    "inconsistent record counts: {} commands, {} frames, {} mesh rows, {} proprio rows, manifest says {}",
                    k,
                    self.frames.len(),
                    self.mesh.len(),
                    self.proprio.len(),
                    m.steps
                ),
            ));
        }
        Ok(())
    }

    /// Sample `k` pairs the observation and command at `k` with proprio `(k, k+1)`.
    pub fn samples(&self, window: usize) -> Vec<StepSample> {
        let window = window.max(1);
        (0..self.len())
            .map(|k| {
                let lo = (k + 1).saturating_sub(window);
                let mut w: Vec<ProprioState> = self.proprio[lo..=k].to_vec();
                while w.len() < window {
                    w.insert(0, w[0]);
                }
                StepSample {
                    observation: Observation {
                        rgbd: self.frames[k].clone(),
                        height: self.manifest.height,
                        width: self.manifest.width,
                        mesh_features: self.mesh[k].clone(),
                        proprio_window: w,
                    },
                    command: self.commands[k],
                    reference_velocity: self.manifest.reference,
                    proprio_prev: self.proprio[k],
                    proprio_curr: self.proprio[k + 1],
                    previous_command: k.checked_sub(1).map(|j| self.commands[j]),
                }
            })
            .collect()
    }
}

fn draw_command(cfg: &CollectConfig, rng: &mut ChaCha8Rng) -> BaseCommand {
    BaseCommand::new(
        rng.gen_range(cfg.speed_range[0]..=cfg.speed_range[1]),
        rng.gen_range(-cfg.lateral_speed..=cfg.lateral_speed),
        0.0,
        rng.gen_range(cfg.height_range[0]..=cfg.height_range[1]),
    )
}

/// One episode under random piecewise-constant commands.
pub fn collect_episode(cfg: &CollectConfig, terrain: TerrainSpec, perturbation: f64, seed: u64) -> Result<Episode> {
    let rc = &cfg.rollout;
    rc.validate(&terrain)?;
    let hf = generate_terrain(&terrain)?;
    let mut sim_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cmd_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut state = SimState::new(&rc.sim, &hf, rc.start)?;
    let mut history = vec![state.resting_proprio()];
    let mut ep = Episode {
        manifest: EpisodeManifest {
            terrain,
            seed,
            perturbation,
            height: rc.camera.height,
            width: rc.camera.width,
            control_dt: rc.sim.control_dt(),
            reference: [rc.nominal_speed, 0.0, 0.0],
            steps: 0,
        },
        frames: vec![],
        mesh: vec![],
        proprio: vec![history[0]],
        commands: vec![],
    };
    let mut command = draw_command(cfg, &mut cmd_rng);
    for k in 0..cfg.control_steps {
        let obs = observe(rc, &hf, &state, &history);
        if k > 0 && cmd_rng.gen_bool(cfg.resample_probability.clamp(0.0, 1.0)) {
            command = draw_command(cfg, &mut cmd_rng);
        }
        ep.frames.push(obs.rgbd);
        ep.mesh.push(obs.mesh_features);
        ep.commands.push(command);
        let mut last = None;
        for _ in 0..rc.sim.control_every {
            last = Some(step_gait(&mut state, &command, &hf, perturbation, &rc.sim, &mut sim_rng)?);
        }
        let p = last.expect("control_every > 0");
        ep.proprio.push(p);
        history.push(p);
        if history.len() > rc.proprio_window {
            history.remove(0);
        }
        let [x, y, _] = state.base;
        if !terrain_contains_ahead(&ep.manifest.terrain, x, y) {
            break;
        }
    }
    ep.manifest.steps = ep.commands.len();
    Ok(ep)
}

fn terrain_contains_ahead(spec: &TerrainSpec, x: f64, y: f64) -> bool {
    spec.contains(x + 3.0, y)
}

/// Every (terrain, difficulty, run) combination, in a fixed order.
pub fn collect_dataset(cfg: &CollectConfig) -> Result<Vec<Episode>> {
    let mut jobs = vec![];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &kind in &cfg.terrains {
        for &d in &cfg.difficulties {
            for _ in 0..cfg.runs_per_terrain {
                let seed: u64 = rng.gen();
                let pert = rng.gen_range(cfg.perturbation_range[0]..=cfg.perturbation_range[1]);
                jobs.push((TerrainSpec::new(kind, d, seed), pert, seed));
            }
        }
    }
    jobs.par_iter().map(|(t, p, s)| collect_episode(cfg, t.clone(), *p, *s)).collect()
}

pub fn samples_from(episodes: &[Episode], window: usize) -> Vec<StepSample> {
    episodes.iter().flat_map(|e| e.samples(window)).collect()
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> CoreError {
    CoreError::data(path, e.to_string())
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for (k, r) in rows.enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(r.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = vec![];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        if rec.len() != width + 1 {
            return Err(CoreError::data(
                path,
                format!("line {line}: expected {} columns, found {}", width + 1, rec.len()),
            ));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| CoreError::data(path, format!("line {line}: `{s}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(vals);
    }
    Ok(out)
}

pub fn proprio_header() -> Vec<String> {
    let mut h = vec!["step".to_string()];
    h.extend((0..12).map(|i| format!("tau_{i}")));
    h.extend((0..12).map(|i| format!("qd_{i}")));
    for leg in ["fr", "fl", "hr", "hl"] {
        h.extend(["x", "y", "z"].iter().map(|a| format!("slip_{leg}_{a}")));
    }
    h.extend(["fr", "fl", "hr", "hl"].iter().map(|l| format!("stance_{l}")));
    h
}

pub fn write_episode(dir: &Path, ep: &Episode) -> Result<()> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(|e| CoreError::io(&frames, e))?;
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&ep.manifest).map_err(|e| CoreError::Runtime(e.to_string()))?;
    fs::write(&mpath, json).map_err(|e| CoreError::io(&mpath, e))?;
    write_rows(&dir.join("proprio.csv"), &proprio_header(), ep.proprio.iter().map(|p| p.to_vec()))?;
    let mut mh = vec!["step".to_string()];
    mh.extend((0..MESH_DIM).map(|i| format!("m_{i}")));
    write_rows(&dir.join("mesh.csv"), &mh, ep.mesh.iter().cloned())?;
    let ch: Vec<String> = ["step", "v_x", "v_y", "v_z", "h"].iter().map(|s| s.to_string()).collect();
    write_rows(&dir.join("commands.csv"), &ch, ep.commands.iter().map(|c| c.to_array().to_vec()))?;
    for (k, f) in ep.frames.iter().enumerate() {
        let p = frame_path(dir, k);
        let bytes: Vec<u8> = f.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        fs::write(&p, bytes).map_err(|e| CoreError::io(&p, e))?;
    }
    Ok(())
}

fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("frames").join(format!("frame_{k:06}.bin"))
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    if !dir.is_dir() {
        return Err(CoreError::data(dir, "run directory does not exist"));
    }
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| CoreError::io(&mpath, e))?;
    let manifest: EpisodeManifest = serde_json::from_str(&text).map_err(|e| csv_err(&mpath, e))?;
    let ppath = dir.join("proprio.csv");
    let proprio = read_rows(&ppath, PROPRIO_DIM)?
        .iter()
        .enumerate()
        .map(|(i, r)| ProprioState::from_slice(r).map_err(|e| CoreError::data(&ppath, format!("line {}: {e}", i + 2))))
        .collect::<Result<Vec<_>>>()?;
    let mesh = read_rows(&dir.join("mesh.csv"), MESH_DIM)?;
    let commands = read_rows(&dir.join("commands.csv"), 4)?
        .into_iter()
        .map(|r| BaseCommand::from_array([r[0], r[1], r[2], r[3]]))
        .collect::<Vec<_>>();
    let plane = RGBD_CHANNELS * manifest.height * manifest.width;
    let mut frames = Vec::with_capacity(commands.len());
    for k in 0..commands.len() {
        let p = frame_path(dir, k);
        let bytes = fs::read(&p).map_err(|e| CoreError::io(&p, e))?;
        if bytes.len() != plane * 4 {
            return Err(CoreError::data(&p, format!("expected {} bytes, found {}", plane * 4, bytes.len())));
        }
        frames.push(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect());
    }
    let ep = Episode {
        manifest,
        frames,
        mesh,
        proprio,
        commands,
    };
    ep.validate(dir)?;
    Ok(ep)
}

/// Reads every run directory below `root` (or `root` itself if it is a run), sorted by name.
pub fn read_dataset(root: &Path) -> Result<Vec<Episode>> {
    if root.join("manifest.json").is_file() {
        return Ok(vec![read_episode(root)?]);
    }
    let entries = fs::read_dir(root).map_err(|e| CoreError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CoreError::data(root, "no run directories (with manifest.json) found"));
    }
    dirs.iter().map(|d| read_episode(d)).collect()
}

pub fn write_dataset(root: &Path, episodes: &[Episode]) -> Result<()> {
    for (i, ep) in episodes.iter().enumerate() {
        write_episode(&root.join(format!("run_{i:04}")), ep)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::delta_q;

    fn small() -> CollectConfig {
        CollectConfig {
            terrains: vec![TerrainKind::Rough, TerrainKind::Flat],
            difficulties: vec![0.5],
            control_steps: 12,
            ..Default::default()
        }
    }

    #[test]
    fn collection_is_deterministic_and_consistent() {
        let a = collect_dataset(&small()).unwrap();
        let b = collect_dataset(&small()).unwrap();
        assert_eq!(a, b);
        for ep in &a {
            assert_eq!(ep.proprio.len(), ep.len() + 1);
            let s = ep.samples(4);
            assert_eq!(s.len(), ep.len());
            assert_eq!(s[3].proprio_curr, ep.proprio[4]);
            assert_eq!(s[0].previous_command, None);
            assert_eq!(s[0].observation.proprio_window.len(), 4);
        }
    }

    #[test]
    fn disk_round_trip_preserves_samples() {
        let eps = collect_dataset(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &eps).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), eps.len());
        for (a, b) in eps.iter().zip(&back) {
            assert_eq!(a.proprio, b.proprio);
            assert_eq!(a.commands, b.commands);
            assert_eq!(a.mesh, b.mesh);
            // Frames are stored as f32 and were rendered through f32.
            assert_eq!(a.frames, b.frames);
            let (sa, sb) = (a.samples(3), b.samples(3));
            assert_eq!(
                delta_q(&sa[2].proprio_prev, &sa[2].proprio_curr),
                delta_q(&sb[2].proprio_prev, &sb[2].proprio_curr)
            );
        }
    }

    #[test]
    fn bad_csv_names_file_and_line() {
        let eps = collect_dataset(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_episode(dir.path(), &eps[0]).unwrap();
        let p = dir.path().join("commands.csv");
        let mut text = fs::read_to_string(&p).unwrap();
        text = text.replacen("\n1,", "\n1,abc", 1);
        fs::write(&p, text).unwrap();
        let err = read_episode(dir.path()).unwrap_err().to_string();
        assert!(err.contains("commands.csv") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn missing_dataset_is_data_error() {
        assert!(matches!(
            read_dataset(Path::new("/nonexistent/cart-data")),
            Err(CoreError::Io { .. } | CoreError::Data { .. })
        ));
    }
}
