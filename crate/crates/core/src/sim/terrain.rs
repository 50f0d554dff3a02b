// SPDX-License-Identifier: Apache-2.0

//! Procedural heightfields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Flat,
    Box,
    Rough,
    SlopeUp,
    SlopeDown,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 5] = [
        TerrainKind::Flat,
        TerrainKind::Box,
        TerrainKind::Rough,
        TerrainKind::SlopeUp,
        TerrainKind::SlopeDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerrainKind::Flat => "flat",
            TerrainKind::Box => "box",
            TerrainKind::Rough => "rough",
            TerrainKind::SlopeUp => "slope_up",
            TerrainKind::SlopeDown => "slope_down",
        }
    }
}

impl std::str::FromStr for TerrainKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        TerrainKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown terrain kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    pub difficulty: f64,
    pub seed: u64,
    /// Size along x and y in metres. The field spans x ∈ [-margin, extent_x - margin], y centred on 0.
    pub extent: [f64; 2],
    pub resolution: f64,
    pub margin: f64,
    /// Lattice spacing of the rough-terrain value noise.
    pub rough_cell: f64,
    /// Distance ahead of the start where boxes and ramps begin.
    pub feature_start: f64,
}

impl Default for TerrainSpec {
    fn default() -> Self {
        Self {
            kind: TerrainKind::Flat,
            difficulty: 0.5,
            seed: 0,
            extent: [16.0, 8.0],
            resolution: 0.05,
            margin: 2.0,
            rough_cell: 0.5,
            feature_start: 1.0,
        }
    }
}

pub const MAX_BOX_HEIGHT: f64 = 0.25;
pub const MAX_ROUGH_AMPLITUDE: f64 = 0.12;
pub const MAX_SLOPE_DEG: f64 = 20.0;

impl TerrainSpec {
    pub fn new(kind: TerrainKind, difficulty: f64, seed: u64) -> Self {
        Self {
            kind,
            difficulty,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(CoreError::Config(format!("terrain resolution must be positive, got {}", self.resolution)));
        }
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(CoreError::Config("terrain extent must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(CoreError::Config(format!("difficulty must lie in [0, 1], got {}", self.difficulty)));
        }
        if !(self.rough_cell > 0.0) {
            return Err(CoreError::Config("rough_cell must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= -self.margin && x <= self.extent[0] - self.margin && y.abs() <= self.extent[1] / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub nx: usize,
    pub ny: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
    /// Row-major over y then x: `heights[iy * nx + ix]`.
    pub heights: Vec<f64>,
}

impl Heightfield {
    fn at_index(&self, ix: usize, iy: usize) -> f64 {
        self.heights[iy * self.nx + ix]
    }

    /// Bilinear height; positions outside the field clamp to its edge.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let fx = ((x - self.origin[0]) / self.resolution).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((y - self.origin[1]) / self.resolution).clamp(0.0, (self.ny - 1) as f64);
        let (ix, iy) = ((fx.floor() as usize).min(self.nx - 2), (fy.floor() as usize).min(self.ny - 2));
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let h00 = self.at_index(ix, iy);
        let h10 = self.at_index(ix + 1, iy);
        let h01 = self.at_index(ix, iy + 1);
        let h11 = self.at_index(ix + 1, iy + 1);
        (h00 * (1.0 - tx) + h10 * tx) * (1.0 - ty) + (h01 * (1.0 - tx) + h11 * tx) * ty
    }

    /// Central-difference slope over one cell.
    pub fn gradient_at(&self, x: f64, y: f64) -> [f64; 2] {
        let h = self.resolution;
        [
            (self.height_at(x + h, y) - self.height_at(x - h, y)) / (2.0 * h),
            (self.height_at(x, y + h) - self.height_at(x, y - h)) / (2.0 * h),
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.heights.iter().fold(0.0, |m, h| m.max(h.abs()))
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

struct ValueNoise {
    nx: usize,
    cell: f64,
    origin: [f64; 2],
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, extent: [f64; 2], origin: [f64; 2], cell: f64) -> Self {
        let nx = (extent[0] / cell).ceil() as usize + 2;
        let ny = (extent[1] / cell).ceil() as usize + 2;
        let lattice = (0..nx * ny).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Self { nx, cell, origin, lattice }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - self.origin[0]) / self.cell;
        let fy = (y - self.origin[1]) / self.cell;
        let (ix, iy) = (fx.floor().max(0.0) as usize, fy.floor().max(0.0) as usize);
        let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
        let at = |i: usize, j: usize| self.lattice[j * self.nx + i];
        let a = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let b = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        a * (1.0 - ty) + b * ty
    }
}

pub fn generate_terrain(spec: &TerrainSpec) -> Result<Heightfield> {
    spec.validate()?;
    let nx = (spec.extent[0] / spec.resolution).round() as usize + 1;
    let ny = (spec.extent[1] / spec.resolution).round() as usize + 1;
    let origin = [-spec.margin, -spec.extent[1] / 2.0];
    let mut heights = vec![0.0; nx * ny];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e44a1);
    let pos = |ix: usize, iy: usize| (origin[0] + ix as f64 * spec.resolution, origin[1] + iy as f64 * spec.resolution);
    match spec.kind {
        TerrainKind::Flat => {}
        TerrainKind::Rough => {
            let amp = MAX_ROUGH_AMPLITUDE * spec.difficulty;
            let coarse = ValueNoise::new(&mut rng, spec.extent, origin, spec.rough_cell);
            let fine = ValueNoise::new(&mut rng, spec.extent, origin, spec.rough_cell / 2.0);
            for iy in 0..ny {
                for ix in 0..nx {
                    let (x, y) = pos(ix, iy);
                    let n = (coarse.sample(x, y) + 0.5 * fine.sample(x, y)) / 1.5;
                    heights[iy * nx + ix] = amp * n.clamp(-1.0, 1.0);
                }
            }
        }
        TerrainKind::Box => {
            let max_h = MAX_BOX_HEIGHT * spec.difficulty;
            let mut x = spec.feature_start;
            let x_end = spec.extent[0] - spec.margin;
            while x < x_end {
                let len = rng.gen_range(0.4..1.2);
                let width = rng.gen_range(0.6..2.0);
                let y0 = rng.gen_range(-1.0..1.0);
                let h = max_h * rng.gen_range(0.5..=1.0);
                for iy in 0..ny {
                    for ix in 0..nx {
                        let (px, py) = pos(ix, iy);
                        if px >= x && px < x + len && (py - y0).abs() <= width / 2.0 {
                            let cell = &mut heights[iy * nx + ix];
                            *cell = cell.max(h);
                        }
                    }
                }
                x += len + rng.gen_range(0.5..1.5);
            }
        }
        TerrainKind::SlopeUp | TerrainKind::SlopeDown => {
            let sign = if spec.kind == TerrainKind::SlopeUp { 1.0 } else { -1.0 };
            let grade = (MAX_SLOPE_DEG * spec.difficulty).to_radians().tan();
            for iy in 0..ny {
                for ix in 0..nx {
                    let (px, _) = pos(ix, iy);
                    heights[iy * nx + ix] = sign * grade * (px - spec.feature_start).max(0.0);
                }
            }
        }
    }
    Ok(Heightfield {
        nx,
        ny,
        resolution: spec.resolution,
        origin,
        heights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_is_zero_at_any_difficulty() {
        for d in [0.0, 0.5, 1.0] {
            let hf = generate_terrain(&TerrainSpec::new(TerrainKind::Flat, d, 3)).unwrap();
            assert!(hf.heights.iter().all(|&h| h == 0.0));
        }
    }

    #[test]
    fn deterministic_from_seed() {
        for k in TerrainKind::ALL {
            let s = TerrainSpec::new(k, 0.8, 42);
            assert_eq!(generate_terrain(&s).unwrap(), generate_terrain(&s).unwrap());
        }
        let a = generate_terrain(&TerrainSpec::new(TerrainKind::Rough, 0.8, 1)).unwrap();
        let b = generate_terrain(&TerrainSpec::new(TerrainKind::Rough, 0.8, 2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn amplitude_bounds() {
        for seed in 0..5 {
            let r = generate_terrain(&TerrainSpec::new(TerrainKind::Rough, 1.0, seed)).unwrap();
            assert!(r.max_abs() <= MAX_ROUGH_AMPLITUDE + 1e-12);
            assert!(r.max_abs() > 0.03);
            let b = generate_terrain(&TerrainSpec::new(TerrainKind::Box, 1.0, seed)).unwrap();
            assert!(b.max_abs() <= MAX_BOX_HEIGHT + 1e-12);
        }
        let s = generate_terrain(&TerrainSpec::new(TerrainKind::SlopeUp, 1.0, 0)).unwrap();
        let g = s.gradient_at(5.0, 0.0);
        assert!((g[0] - 20f64.to_radians().tan()).abs() < 1e-9);
        let d = generate_terrain(&TerrainSpec::new(TerrainKind::SlopeDown, 0.5, 0)).unwrap();
        assert!(d.height_at(5.0, 0.0) < 0.0);
    }

    #[test]
    fn zero_resolution_rejected() {
        let s = TerrainSpec {
            resolution: 0.0,
            ..Default::default()
        };
        assert!(generate_terrain(&s).is_err());
    }

    #[test]
    fn bilinear_interpolates_exactly_on_grid() {
        let s = TerrainSpec::new(TerrainKind::Rough, 1.0, 9);
        let hf = generate_terrain(&s).unwrap();
        let (ix, iy) = (17, 23);
        let x = hf.origin[0] + ix as f64 * hf.resolution;
        let y = hf.origin[1] + iy as f64 * hf.resolution;
        assert!((hf.height_at(x, y) - hf.heights[iy * hf.nx + ix]).abs() < 1e-12);
    }
}
