// SPDX-License-Identifier: Apache-2.0

//! Leg geometry, inverse and forward kinematics.
//!
//! Each leg has an abduction joint about the body x axis at the hip, then a
//! hip pitch and a knee pitch acting in the rotated leg plane. A knee angle
//! of zero is a straight leg; positive values fold the lower link backwards.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::types::{Leg, NUM_LEGS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotModel {
    pub body_length: f64,
    pub body_width: f64,
    /// Body-frame hip positions in leg order FR, FL, HR, HL.
    pub hip_offsets: [[f64; 3]; NUM_LEGS],
    pub upper_link: f64,
    pub lower_link: f64,
    pub mass: f64,
}

impl Default for RobotModel {
    fn default() -> Self {
        let (hx, hy) = (0.55, 0.25);
        Self {
            body_length: 1.1,
            body_width: 0.5,
            hip_offsets: [[hx, -hy, 0.0], [hx, hy, 0.0], [-hx, -hy, 0.0], [-hx, hy, 0.0]],
            upper_link: 0.35,
            lower_link: 0.35,
            mass: 32.0,
        }
    }
}

impl RobotModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.upper_link > 0.0 && self.lower_link > 0.0) {
            return Err(CoreError::Config("leg link lengths must be positive".into()));
        }
        if !(self.mass > 0.0 && self.body_length > 0.0 && self.body_width > 0.0) {
            return Err(CoreError::Config("body dimensions and mass must be positive".into()));
        }
        Ok(())
    }

    pub fn reach(&self) -> f64 {
        self.upper_link + self.lower_link
    }

    pub fn hip(&self, leg: Leg) -> [f64; 3] {
        self.hip_offsets[leg.index()]
    }

    /// Joint angles `[abduction, hip, knee]` placing the foot at a body-frame target.
    pub fn ik_leg(&self, target: [f64; 3], leg: Leg) -> Result<[f64; 3]> {
        let hip = self.hip(leg);
        let d = [target[0] - hip[0], target[1] - hip[1], target[2] - hip[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let (a, b) = (self.upper_link, self.lower_link);
        if r > a + b + 1e-12 {
            return Err(CoreError::Runtime(format!(
                "{} foot target out of reach by {:.6} m",
                leg.name(),
                r - (a + b)
            )));
        }
        if r < (a - b).abs() + 1e-9 {
            return Err(CoreError::Runtime(format!("{} foot target too close to the hip ({r:.6} m)", leg.name())));
        }
        let q0 = d[1].atan2(-d[2]);
        let rho = (d[1] * d[1] + d[2] * d[2]).sqrt();
        let cos_k = ((r * r - a * a - b * b) / (2.0 * a * b)).clamp(-1.0, 1.0);
        let q2 = cos_k.acos();
        let q1 = d[0].atan2(rho) + (b * q2.sin()).atan2(a + b * q2.cos());
        Ok([q0, q1, q2])
    }

    pub fn fk_leg(&self, q: [f64; 3], leg: Leg) -> [f64; 3] {
        let hip = self.hip(leg);
        let (a, b) = (self.upper_link, self.lower_link);
        let x = a * q[1].sin() + b * (q[1] - q[2]).sin();
        let down = a * q[1].cos() + b * (q[1] - q[2]).cos();
        [hip[0] + x, hip[1] + down * q[0].sin(), hip[2] - down * q[0].cos()]
    }

    /// Central-difference Jacobian of `fk_leg`, column-major by joint.
    pub fn leg_jacobian(&self, q: [f64; 3], leg: Leg) -> [[f64; 3]; 3] {
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 3];
        for (j, col) in jac.iter_mut().enumerate() {
            let (mut qp, mut qm) = (q, q);
            qp[j] += h;
            qm[j] -= h;
            let (fp, fm) = (self.fk_leg(qp, leg), self.fk_leg(qm, leg));
            for k in 0..3 {
                col[k] = (fp[k] - fm[k]) / (2.0 * h);
            }
        }
        jac
    }

    /// Pulls a target onto the reachable shell when it lies outside.
    pub fn clamp_to_reach(&self, target: [f64; 3], leg: Leg) -> [f64; 3] {
        let hip = self.hip(leg);
        let d = [target[0] - hip[0], target[1] - hip[1], target[2] - hip[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let max = self.reach() * 0.999;
        if r <= max {
            return target;
        }
        let s = max / r;
        [hip[0] + d[0] * s, hip[1] + d[1] * s, hip[2] + d[2] * s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn straight_leg_under_hip() {
        let m = RobotModel::default();
        let hip = m.hip(Leg::FL);
        let q = m.ik_leg([hip[0], hip[1], hip[2] - m.reach()], Leg::FL).unwrap();
        assert!(q[2].abs() < 1e-6, "knee {}", q[2]);
        assert!(q[0].abs() < 1e-12);
    }

    #[test]
    fn out_of_reach_rejected() {
        let m = RobotModel::default();
        let hip = m.hip(Leg::HR);
        let err = m.ik_leg([hip[0], hip[1], hip[2] - m.reach() - 0.01], Leg::HR).unwrap_err();
        assert!(err.to_string().contains("0.010000"), "{err}");
    }

    #[test]
    fn fk_ik_round_trip() {
        let m = RobotModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let leg = Leg::ALL[i % 4];
            let hip = m.hip(leg);
            let (dir, r) = loop {
                let d: [f64; 3] = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..-0.2)];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let r = rng.gen_range(0.1..m.reach() - 1e-6);
                if n > 1e-3 {
                    break ([d[0] / n, d[1] / n, d[2] / n], r);
                }
            };
            let t = [hip[0] + dir[0] * r, hip[1] + dir[1] * r, hip[2] + dir[2] * r];
            let p = m.fk_leg(m.ik_leg(t, leg).unwrap(), leg);
            let e = ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt();
            worst = worst.max(e);
        }
        assert!(worst <= 1e-9, "worst {worst}");
    }
}
