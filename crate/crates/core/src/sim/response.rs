// SPDX-License-Identifier: Apache-2.0

//! Base orientation driven by the contact plane through a spring-damper.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseConfig {
    pub natural_frequency_hz: f64,
    pub damping: f64,
    pub substeps: usize,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        Self {
            natural_frequency_hz: 8.0,
            damping: 0.7,
            substeps: 4,
        }
    }
}

/// Roll, pitch, yaw (rad) with their rates and the current target.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OrientationState {
    pub angles: [f64; 3],
    pub rates: [f64; 3],
    pub target: [f64; 3],
}

/// Least-squares plane `z = gx·x + gy·y + c` through the contacts, as (roll, pitch).
///
/// Centred normal equations solved with the pseudo-inverse, so collinear
/// contacts give the minimum-norm slope along their common line.
pub fn contact_plane_attitude(contacts: &[[f64; 3]]) -> Option<(f64, f64)> {
    if contacts.len() < 2 {
        return None;
    }
    let n = contacts.len() as f64;
    let mean = contacts.iter().fold([0.0; 3], |m, c| [m[0] + c[0], m[1] + c[1], m[2] + c[2]]);
    let mean = [mean[0] / n, mean[1] / n, mean[2] / n];
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for c in contacts {
        let (dx, dy, dz) = (c[0] - mean[0], c[1] - mean[1], c[2] - mean[2]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
        sxz += dx * dz;
        syz += dy * dz;
    }
    let trace = sxx + syy;
    if trace <= 1e-18 {
        return None;
    }
    // Symmetric 2×2 eigen-decomposition.
    let half_diff = (sxx - syy) / 2.0;
    let disc = (half_diff * half_diff + sxy * sxy).sqrt();
    let lambdas = [trace / 2.0 + disc, trace / 2.0 - disc];
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let vecs = [[theta.cos(), theta.sin()], [-theta.sin(), theta.cos()]];
    let mut g = [0.0, 0.0];
    for (lam, v) in lambdas.iter().zip(&vecs) {
        if *lam > 1e-9 * trace {
            let proj = (v[0] * sxz + v[1] * syz) / lam;
            g[0] += proj * v[0];
            g[1] += proj * v[1];
        }
    }
    Some((g[1].atan(), -g[0].atan()))
}

/// One `dt` of the second-order response toward the contact-plane target.
///
/// With fewer than two contacts the previous roll/pitch target is held.
pub fn base_response(contacts: &[[f64; 3]], yaw_target: f64, prev: &OrientationState, dt: f64, cfg: &ResponseConfig) -> OrientationState {
    let mut s = *prev;
    if let Some((roll, pitch)) = contact_plane_attitude(contacts) {
        s.target[0] = roll;
        s.target[1] = pitch;
    }
    s.target[2] = yaw_target;
    let w = 2.0 * std::f64::consts::PI * cfg.natural_frequency_hz;
    let n = cfg.substeps.max(1);
    let h = dt / n as f64;
    for _ in 0..n {
        for k in 0..3 {
            let acc = w * w * (s.target[k] - s.angles[k]) - 2.0 * cfg.damping * w * s.rates[k];
            s.rates[k] += acc * h;
            s.angles[k] += s.rates[k] * h;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_contacts_give_zero_target() {
        let c = [[0.5, -0.25, 0.0], [0.5, 0.25, 0.0], [-0.5, -0.25, 0.0], [-0.5, 0.25, 0.0]];
        let (r, p) = contact_plane_attitude(&c).unwrap();
        assert_eq!((r, p), (0.0, 0.0));
    }

    #[test]
    fn raised_left_feet_roll() {
        let c = [[0.55, -0.25, 0.0], [0.55, 0.25, 0.1], [-0.55, -0.25, 0.0], [-0.55, 0.25, 0.1]];
        let (r, p) = contact_plane_attitude(&c).unwrap();
        assert!((r - (0.1f64 / 0.5).atan()).abs() < 1e-12, "roll {r}");
        assert!(p.abs() < 1e-12);
        assert!((r - 0.197).abs() < 1e-3);
    }

    #[test]
    fn raised_front_feet_pitch_nose_up_negative() {
        let c = [[0.55, -0.25, 0.11], [0.55, 0.25, 0.11], [-0.55, -0.25, 0.0], [-0.55, 0.25, 0.0]];
        let (_, p) = contact_plane_attitude(&c).unwrap();
        assert!((p + 0.1f64.atan()).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_two_contacts_hold_target() {
        let prev = OrientationState {
            target: [0.1, -0.05, 0.0],
            ..Default::default()
        };
        let s = base_response(&[[0.0, 0.0, 1.0]], 0.0, &prev, 0.01, &ResponseConfig::default());
        assert_eq!(s.target, prev.target);
    }

    #[test]
    fn constant_target_rates_decay() {
        let cfg = ResponseConfig::default();
        let c = [[0.55, -0.25, 0.0], [0.55, 0.25, 0.1], [-0.55, -0.25, 0.0], [-0.55, 0.25, 0.1]];
        let mut s = OrientationState::default();
        let mut peak: f64 = 0.0;
        for _ in 0..200 {
            s = base_response(&c, 0.0, &s, 0.01, &cfg);
            peak = peak.max(s.rates[0].abs());
        }
        assert!(peak > 0.5);
        assert!(s.rates[0].abs() < 1e-6);
        assert!((s.angles[0] - s.target[0]).abs() < 1e-6);
    }
}
