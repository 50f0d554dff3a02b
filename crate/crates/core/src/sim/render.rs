// SPDX-License-Identifier: Apache-2.0

//! Heightfield-derived exteroception: a ray-marched depth image with flat
//! colour fill, and a grid of relative terrain heights ahead of the base.

use serde::{Deserialize, Serialize};

use super::terrain::Heightfield;
use crate::types::{MESH_DIM, RGBD_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub height: usize,
    pub width: usize,
    pub horizontal_fov_deg: f64,
    /// Downward tilt of the optical axis.
    pub tilt_deg: f64,
    /// Mount point relative to the base, body frame.
    pub mount: [f64; 3],
    pub max_depth: f64,
    pub march_step: f64,
    pub ground_rgb: [f64; 3],
    pub sky_rgb: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            height: 36,
            width: 64,
            horizontal_fov_deg: 90.0,
            tilt_deg: 20.0,
            mount: [0.55, 0.0, 0.1],
            max_depth: 10.0,
            march_step: 0.05,
            ground_rgb: [0.45, 0.38, 0.3],
            sky_rgb: [0.6, 0.75, 0.9],
        }
    }
}

/// Channel-major `[R, G, B, D]` image, values rounded through f32.
pub fn render_rgbd(terrain: &Heightfield, base: [f64; 3], cam: &CameraConfig) -> Vec<f64> {
    let (h, w) = (cam.height, cam.width);
    let plane = h * w;
    let mut out = vec![0.0; RGBD_CHANNELS * plane];
    let origin = [base[0] + cam.mount[0], base[1] + cam.mount[1], base[2] + cam.mount[2]];
    let f = (w as f64 / 2.0) / (cam.horizontal_fov_deg.to_radians() / 2.0).tan();
    let (st, ct) = cam.tilt_deg.to_radians().sin_cos();
    for r in 0..h {
        for c in 0..w {
            // Camera frame: forward, left, up.
            let u = (w as f64 / 2.0 - (c as f64 + 0.5)) / f;
            let v = (h as f64 / 2.0 - (r as f64 + 0.5)) / f;
            let d = [ct + v * st, u, -st + v * ct];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = [d[0] / n, d[1] / n, d[2] / n];
            let hit = march(terrain, origin, d, cam);
            let idx = r * w + c;
            let (rgb, depth) = match hit {
                Some(t) => (cam.ground_rgb, t * (d[0] * ct - d[2] * st)),
                None => (cam.sky_rgb, cam.max_depth),
            };
            for k in 0..3 {
                out[k * plane + idx] = rgb[k] as f32 as f64;
            }
            out[3 * plane + idx] = depth.min(cam.max_depth) as f32 as f64;
        }
    }
    out
}

fn march(terrain: &Heightfield, o: [f64; 3], d: [f64; 3], cam: &CameraConfig) -> Option<f64> {
    let mut t = 0.0;
    let mut prev_gap = o[2] - terrain.height_at(o[0], o[1]);
    while t < cam.max_depth {
        let t1 = t + cam.march_step;
        let p = [o[0] + d[0] * t1, o[1] + d[1] * t1, o[2] + d[2] * t1];
        let gap = p[2] - terrain.height_at(p[0], p[1]);
        if gap <= 0.0 {
            let frac = if prev_gap > gap { prev_gap / (prev_gap - gap) } else { 1.0 };
            return Some(t + frac * cam.march_step);
        }
        prev_gap = gap;
        t = t1;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshGridConfig {
    pub rows: usize,
    pub cols: usize,
    pub x_range: [f64; 2],
    pub half_width: f64,
}

impl Default for MeshGridConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 16,
            x_range: [0.3, 2.4],
            half_width: 0.75,
        }
    }
}

/// Terrain heights on a body-aligned grid ahead, relative to the ground under the base.
pub fn mesh_features(terrain: &Heightfield, base: [f64; 3], grid: &MeshGridConfig) -> Vec<f64> {
    debug_assert_eq!(grid.rows * grid.cols, MESH_DIM);
    let ground = terrain.height_at(base[0], base[1]);
    let mut out = Vec::with_capacity(grid.rows * grid.cols);
    for r in 0..grid.rows {
        let x = grid.x_range[0] + (grid.x_range[1] - grid.x_range[0]) * r as f64 / (grid.rows - 1).max(1) as f64;
        for c in 0..grid.cols {
            let y = -grid.half_width + 2.0 * grid.half_width * c as f64 / (grid.cols - 1).max(1) as f64;
            out.push(terrain.height_at(base[0] + x, base[1] + y) - ground);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::terrain::{generate_terrain, TerrainKind, TerrainSpec};

    #[test]
    fn flat_depth_matches_plane_intersection() {
        let t = generate_terrain(&TerrainSpec::new(TerrainKind::Flat, 0.0, 0)).unwrap();
        let cam = CameraConfig::default();
        let img = render_rgbd(&t, [0.0, 0.0, 0.5], &cam);
        let plane = cam.height * cam.width;
        // Bottom-centre ray looks down steeply and hits the ground close by.
        let r = cam.height - 1;
        let c = cam.width / 2;
        let d = img[3 * plane + r * cam.width + c];
        assert!(d > 0.3 && d < 2.0, "depth {d}");
        // Top row looks above the horizon.
        assert_eq!(img[3 * plane + c], cam.max_depth);
        assert_eq!(img[c], cam.sky_rgb[0] as f32 as f64);
    }

    #[test]
    fn mesh_flat_is_zero_and_slope_positive_ahead() {
        let flat = generate_terrain(&TerrainSpec::new(TerrainKind::Flat, 0.0, 0)).unwrap();
        assert!(mesh_features(&flat, [0.0, 0.0, 0.5], &MeshGridConfig::default())
            .iter()
            .all(|&v| v == 0.0));
        let up = generate_terrain(&TerrainSpec::new(TerrainKind::SlopeUp, 0.5, 0)).unwrap();
        let m = mesh_features(&up, [3.0, 0.0, 0.5], &MeshGridConfig::default());
        assert_eq!(m.len(), MESH_DIM);
        assert!(m[MESH_DIM - 1] > m[0] && m[0] > 0.0);
    }
}
