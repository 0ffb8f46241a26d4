//! Forward and inverse kinematics for the planar 3-link arms.

use crate::sim::{ArmState, SimConfig};

/// End-effector pose in workspace coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub orientation: f64,
}

/// Chained rotation/translation over the three links.
pub fn fk(arm: &ArmState, cfg: &SimConfig) -> Pose {
    let (mut x, mut y) = arm.base;
    let mut phi = 0.0;
    for (angle, len) in arm.angles.iter().zip(cfg.link_lengths.iter()) {
        phi += angle;
        x += len * phi.cos();
        y += len * phi.sin();
    }
    Pose {
        x,
        y,
        orientation: phi,
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// Inverse kinematics with the end-effector pointing along the base-to-target
/// ray, which maximizes reach. `elbow` picks the bend direction (+1/-1).
/// Targets beyond reach are pulled onto the reachable sphere.
pub fn ik_pointing(base: (f64, f64), target: (f64, f64), elbow: f64, cfg: &SimConfig) -> [f64; 3] {
    let [l1, l2, l3] = cfg.link_lengths;
    let dx = target.0 - base.0;
    let dy = target.1 - base.1;
    let phi = dy.atan2(dx);
    // wrist sits one distal link short of the target along the ray
    let mut wx = target.0 - l3 * phi.cos() - base.0;
    let mut wy = target.1 - l3 * phi.sin() - base.1;
    let mut r = (wx * wx + wy * wy).sqrt();
    let max_r = l1 + l2 - 1e-9;
    let min_r = (l1 - l2).abs() + 1e-9;
    if r > max_r {
        let s = max_r / r;
        wx *= s;
        wy *= s;
        r = max_r;
    } else if r < min_r {
        let s = min_r / r.max(1e-12);
        wx *= s;
        wy *= s;
        r = min_r;
    }
    let cos_q2 = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = elbow.signum() * cos_q2.acos();
    let q1 = wy.atan2(wx) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    let q3 = phi - q1 - q2;
    [wrap_angle(q1), wrap_angle(q2), wrap_angle(q3)]
}
