//! The world transition: rate-limited joint tracking, grasp binding, and
//! held-entity updates.

use crate::sim::kinematics::fk;
use crate::sim::{ArmId, ArmState, Holder, SimConfig, SimError, WorldState, JOINTS_PER_ARM};

fn rate_limit(current: f64, target: f64, max_delta: f64) -> f64 {
    current + (target - current).clamp(-max_delta, max_delta)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn apply_action(arm: &mut ArmState, action: &[f64], cfg: &SimConfig) {
    for i in 0..3 {
        arm.angles[i] = rate_limit(arm.angles[i], action[i], cfg.joint_rate)
            .clamp(-std::f64::consts::PI, std::f64::consts::PI);
    }
    arm.grip = rate_limit(arm.grip, action[3].clamp(0.0, 1.0), cfg.grip_rate).clamp(0.0, 1.0);
}

/// Advance the world by one step. Actions are absolute joint targets (three
/// angles plus a gripper target per arm); joints move at most `joint_rate`
/// toward them. Grippers below 0.5 bind a free object (or bar end) within the
/// grasp radius; above 0.5 they release.
pub fn step(
    world: &WorldState,
    action_left: &[f64],
    action_right: &[f64],
    cfg: &SimConfig,
) -> Result<WorldState, SimError> {
    for (arm, act) in [("left", action_left), ("right", action_right)] {
        if act.len() != JOINTS_PER_ARM {
            return Err(SimError::ActionShape {
                arm: if arm == "left" { "left" } else { "right" },
                got: act.len(),
                expected: JOINTS_PER_ARM,
            });
        }
        if !act.iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFiniteAction(world.step_index));
        }
    }

    let mut next = world.clone();
    apply_action(&mut next.left, action_left, cfg);
    apply_action(&mut next.right, action_right, cfg);

    let ee_left = fk(&next.left, cfg);
    let ee_right = fk(&next.right, cfg);
    let ee = |arm: ArmId| match arm {
        ArmId::Left => (ee_left.x, ee_left.y),
        ArmId::Right => (ee_right.x, ee_right.y),
    };
    let closed = |arm: ArmId| match arm {
        ArmId::Left => next.left.grip < 0.5,
        ArmId::Right => next.right.grip < 0.5,
    };
    let open = |arm: ArmId| match arm {
        ArmId::Left => next.left.grip > 0.5,
        ArmId::Right => next.right.grip > 0.5,
    };

    // point objects: release, then bind, then track
    for obj in next.objects.iter_mut() {
        // releases
        match obj.held_by {
            Holder::Left if open(ArmId::Left) => {
                obj.held_by = Holder::None;
                obj.primary = None;
            }
            Holder::Right if open(ArmId::Right) => {
                obj.held_by = Holder::None;
                obj.primary = None;
            }
            Holder::Both => {
                let left_open = open(ArmId::Left);
                let right_open = open(ArmId::Right);
                if left_open && right_open {
                    obj.held_by = Holder::None;
                    obj.primary = None;
                } else if left_open {
                    obj.held_by = Holder::Right;
                    obj.primary = Some(ArmId::Right);
                } else if right_open {
                    obj.held_by = Holder::Left;
                    obj.primary = Some(ArmId::Left);
                }
            }
            _ => {}
        }
        // bindings
        for arm in [ArmId::Left, ArmId::Right] {
            let already = matches!(
                (obj.held_by, arm),
                (Holder::Left, ArmId::Left) | (Holder::Right, ArmId::Right) | (Holder::Both, _)
            );
            if already || !closed(arm) || dist(obj.pos, ee(arm)) > cfg.grasp_radius {
                continue;
            }
            obj.held_by = match (obj.held_by, arm) {
                (Holder::None, ArmId::Left) => {
                    obj.primary = Some(ArmId::Left);
                    Holder::Left
                }
                (Holder::None, ArmId::Right) => {
                    obj.primary = Some(ArmId::Right);
                    Holder::Right
                }
                (Holder::Left, ArmId::Right) | (Holder::Right, ArmId::Left) => Holder::Both,
                (h, _) => h,
            };
        }
        // tracking: a held object sits exactly at its holder's end-effector
        let tracker = match obj.held_by {
            Holder::Left => Some(ArmId::Left),
            Holder::Right => Some(ArmId::Right),
            Holder::Both => obj.primary,
            Holder::None => None,
        };
        if let Some(arm) = tracker {
            obj.pos = ee(arm);
        }
    }

    // bar: ends bind independently; the left arm grasps the left end
    if let Some(bar) = next.bar.as_mut() {
        if bar.held_left && open(ArmId::Left) {
            bar.held_left = false;
        }
        if bar.held_right && open(ArmId::Right) {
            bar.held_right = false;
        }
        if !bar.held_left && closed(ArmId::Left) && dist(bar.left_end(), ee(ArmId::Left)) <= cfg.grasp_radius {
            bar.held_left = true;
        }
        if !bar.held_right && closed(ArmId::Right) && dist(bar.right_end(), ee(ArmId::Right)) <= cfg.grasp_radius
        {
            bar.held_right = true;
        }
        match (bar.held_left, bar.held_right) {
            (true, true) => {
                let pl = ee(ArmId::Left);
                let pr = ee(ArmId::Right);
                bar.center = ((pl.0 + pr.0) / 2.0, (pl.1 + pr.1) / 2.0);
                bar.tilt = (pl.1 - pr.1).atan2(pr.0 - pl.0);
            }
            (true, false) => {
                let pl = ee(ArmId::Left);
                let axis = (
                    bar.length / 2.0 * bar.tilt.cos(),
                    -(bar.length / 2.0) * bar.tilt.sin(),
                );
                bar.center = (pl.0 + axis.0, pl.1 + axis.1);
            }
            (false, true) => {
                let pr = ee(ArmId::Right);
                let axis = (
                    bar.length / 2.0 * bar.tilt.cos(),
                    -(bar.length / 2.0) * bar.tilt.sin(),
                );
                bar.center = (pr.0 - axis.0, pr.1 - axis.1);
            }
            (false, false) => {}
        }
    }

    next.step_index += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::kinematics::ik_pointing;
    use crate::sim::{BarState, ObjectState};

    fn world_with_arms(cfg: &SimConfig) -> WorldState {
        WorldState {
            left: ArmState {
                angles: [0.3, -0.4, 0.2],
                grip: 1.0,
                base: cfg.left_base,
            },
            right: ArmState {
                angles: [2.8, 0.4, -0.2],
                grip: 1.0,
                base: cfg.right_base,
            },
            objects: vec![],
            bar: None,
            goal: None,
            step_index: 0,
        }
    }

    #[test]
    fn holding_current_state_is_a_fixed_point() {
        let cfg = SimConfig::default();
        let w = world_with_arms(&cfg);
        let al = w.left.joint_vector();
        let ar = w.right.joint_vector();
        let next = step(&w, &al, &ar, &cfg).unwrap();
        assert_eq!(next.left, w.left);
        assert_eq!(next.right, w.right);
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn targets_beyond_rate_limit_clamp_to_max_delta() {
        let cfg = SimConfig::default();
        let w = world_with_arms(&cfg);
        let mut al = w.left.joint_vector();
        al[0] += 1.0;
        al[2] -= 1.0;
        let ar = w.right.joint_vector();
        let next = step(&w, &al, &ar, &cfg).unwrap();
        assert!((next.left.angles[0] - (w.left.angles[0] + cfg.joint_rate)).abs() < 1e-12);
        assert!((next.left.angles[2] - (w.left.angles[2] - cfg.joint_rate)).abs() < 1e-12);
        assert!((next.left.angles[1] - w.left.angles[1]).abs() < 1e-12);
    }

    #[test]
    fn non_finite_action_is_a_fault() {
        let cfg = SimConfig::default();
        let w = world_with_arms(&cfg);
        let mut al = w.left.joint_vector();
        al[1] = f64::NAN;
        assert!(matches!(
            step(&w, &al, &w.right.joint_vector(), &cfg),
            Err(SimError::NonFiniteAction(_))
        ));
    }

    #[test]
    fn grasp_binds_and_tracks_object() {
        let cfg = SimConfig::default();
        let mut w = world_with_arms(&cfg);
        // put the left end-effector exactly on the object
        let target = (0.40, 0.22);
        w.left.angles = ik_pointing(cfg.left_base, target, 1.0, &cfg);
        w.objects.push(ObjectState {
            pos: target,
            held_by: Holder::None,
            primary: None,
        });
        // close the gripper over a few steps
        let mut al = w.left.joint_vector();
        al[3] = 0.0;
        let ar = w.right.joint_vector();
        let mut cur = w;
        for _ in 0..4 {
            cur = step(&cur, &al, &ar, &cfg).unwrap();
        }
        assert_eq!(cur.objects[0].held_by, Holder::Left);
        // while held, the object tracks fk exactly
        let mut al2 = al.clone();
        al2[0] += 0.3;
        let next = step(&cur, &al2, &ar, &cfg).unwrap();
        let ee = fk(&next.left, &cfg);
        assert_eq!(next.objects[0].pos, (ee.x, ee.y));
        // opening releases
        let mut al3 = al2.clone();
        al3[3] = 1.0;
        let mut rel = next;
        for _ in 0..4 {
            rel = step(&rel, &al3, &ar, &cfg).unwrap();
        }
        assert_eq!(rel.objects[0].held_by, Holder::None);
    }

    #[test]
    fn bar_tilt_matches_geometry_oracle() {
        let cfg = SimConfig::default();
        let mut w = world_with_arms(&cfg);
        let bar_len = 0.24f64;
        let left_end = (0.38, 0.20);
        let right_end = (0.38 + bar_len, 0.20);
        w.left.angles = ik_pointing(cfg.left_base, left_end, 1.0, &cfg);
        w.left.grip = 0.0;
        w.right.angles = ik_pointing(cfg.right_base, right_end, -1.0, &cfg);
        w.right.grip = 0.0;
        w.bar = Some(BarState {
            center: (0.38 + bar_len / 2.0, 0.20),
            tilt: 0.0,
            length: bar_len,
            held_left: false,
            held_right: false,
        });
        // one settling step binds both ends
        let al = w.left.joint_vector();
        let ar = w.right.joint_vector();
        let held = step(&w, &al, &ar, &cfg).unwrap();
        let bar = held.bar.as_ref().unwrap();
        assert!(bar.held_left && bar.held_right);

        // raise the left end by h while the right stays fixed
        let h = 0.04f64;
        let mut cur = held;
        let raised = (left_end.0, left_end.1 + h);
        let mut al2 = ik_pointing(cfg.left_base, raised, 1.0, &cfg).to_vec();
        al2.push(0.0);
        for _ in 0..40 {
            cur = step(&cur, &al2, &ar, &cfg).unwrap();
        }
        let ee_l = fk(&cur.left, &cfg);
        let ee_r = fk(&cur.right, &cfg);
        let expected = (ee_l.y - ee_r.y).atan2(ee_r.x - ee_l.x);
        let bar = cur.bar.as_ref().unwrap();
        assert!((bar.tilt - expected).abs() < 1e-9);
        // geometry oracle: raising one end by h over the horizontal span
        let geo = h.atan2(bar_len);
        assert!(
            (bar.tilt - geo).abs() < 1e-9,
            "tilt {} vs geometric {}",
            bar.tilt,
            geo
        );
        // length is preserved exactly by construction
        let l = bar.left_end();
        let r = bar.right_end();
        let len = ((r.0 - l.0).powi(2) + (r.1 - l.1).powi(2)).sqrt();
        assert!((len - bar_len).abs() < 1e-9);
    }
}
