//! Scripted phase-machine experts that demonstrate the two tasks.
//!
//! Experts emit absolute joint targets through inverse kinematics toward
//! phase waypoints; carries move a waypoint cursor a few millimeters per step
//! so both arms track closely (which is what keeps the bar level). Optional
//! Gaussian noise on the angle targets stands in for human variability.

use rand_chacha::ChaCha8Rng;

use crate::policy::standard_normal_vec;
use crate::sim::kinematics::{fk, ik_pointing};
use crate::sim::tasks::{geometry, TaskSpec};
use crate::sim::{ArmId, Holder, SimConfig, WorldState};

/// Cartesian cursor speed for carries (meters per step).
const CARRY_SPEED: f64 = 0.005;
/// Cursor speed for the synchronized bar ramps.
const BAR_RAMP_SPEED: f64 = 0.004;

const RIGHT_PARK: (f64, f64) = (0.64, 0.33);
const LEFT_PARK: (f64, f64) = (0.33, 0.27);
const BAR_LEFT_PARK: (f64, f64) = (0.38, 0.32);
const BAR_RIGHT_PARK: (f64, f64) = (0.62, 0.32);

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn ramp_toward(cursor: (f64, f64), target: (f64, f64), speed: f64) -> (f64, f64) {
    let d = dist(cursor, target);
    if d <= speed {
        target
    } else {
        let s = speed / d;
        (
            cursor.0 + (target.0 - cursor.0) * s,
            cursor.1 + (target.1 - cursor.1) * s,
        )
    }
}

/// Finite-state demonstration controller for one task.
pub struct ScriptedExpert {
    task: &'static str,
    phase: usize,
    cursor_left: (f64, f64),
    cursor_right: (f64, f64),
    /// Planned bar center during the synchronized ramps.
    plan: (f64, f64),
    lift_top: f64,
    initialized: bool,
    hold_left: [f64; 3],
    hold_right: [f64; 3],
}

impl ScriptedExpert {
    pub fn new(task: &TaskSpec) -> Self {
        ScriptedExpert {
            task: task.name,
            phase: 0,
            cursor_left: (0.0, 0.0),
            cursor_right: (0.0, 0.0),
            plan: (0.0, 0.0),
            lift_top: 0.0,
            initialized: false,
            hold_left: [0.0; 3],
            hold_right: [0.0; 3],
        }
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    /// Emit (left, right) absolute joint targets for the current state.
    pub fn act(
        &mut self,
        world: &WorldState,
        noise_scale: f64,
        rng: &mut ChaCha8Rng,
        cfg: &SimConfig,
    ) -> (Vec<f64>, Vec<f64>) {
        if !self.initialized {
            self.hold_left = world.left.angles;
            self.hold_right = world.right.angles;
            self.initialized = true;
        }
        let ((lt, lg), (rt, rg)) = match self.task {
            "handover" => self.handover(world, cfg),
            _ => self.bar_lift(world, cfg),
        };
        let left = self.to_action(lt, lg, ArmId::Left, noise_scale, rng, cfg);
        let right = self.to_action(rt, rg, ArmId::Right, noise_scale, rng, cfg);
        (left, right)
    }

    /// Waypoint targets per arm: either a cartesian point or "hold the
    /// captured initial pose" (None).
    #[allow(clippy::type_complexity)]
    fn handover(
        &mut self,
        world: &WorldState,
        cfg: &SimConfig,
    ) -> ((Option<(f64, f64)>, f64), (Option<(f64, f64)>, f64)) {
        let ee_l = fk(&world.left, cfg);
        let ee_r = fk(&world.right, cfg);
        let obj = world.objects[0].pos;
        let held = world.objects[0].held_by;
        let meet = geometry::HANDOVER_MEET;
        let place = geometry::HANDOVER_PLACE;
        match self.phase {
            0 => {
                if dist((ee_r.x, ee_r.y), obj) < 0.015 {
                    self.phase = 1;
                }
                ((None, 1.0), (Some(obj), 1.0))
            }
            1 => {
                if matches!(held, Holder::Right) {
                    self.phase = 2;
                    self.cursor_right = (ee_r.x, ee_r.y);
                }
                ((None, 1.0), (Some(obj), 0.0))
            }
            2 => {
                if dist(obj, meet) < 0.015 {
                    self.phase = 3;
                }
                self.cursor_right = ramp_toward(self.cursor_right, meet, CARRY_SPEED);
                ((None, 1.0), (Some(self.cursor_right), 0.0))
            }
            3 => {
                if dist((ee_l.x, ee_l.y), obj) < 0.012 {
                    self.phase = 4;
                }
                ((Some(obj), 1.0), (Some(meet), 0.0))
            }
            4 => {
                if matches!(held, Holder::Both) {
                    self.phase = 5;
                }
                ((Some(obj), 0.0), (Some(meet), 0.0))
            }
            5 => {
                if matches!(held, Holder::Left) {
                    self.phase = 6;
                    self.cursor_left = (ee_l.x, ee_l.y);
                }
                ((Some(obj), 0.0), (Some(meet), 1.0))
            }
            6 => {
                if dist(obj, place) < 0.012 {
                    self.phase = 7;
                }
                self.cursor_left = ramp_toward(self.cursor_left, place, CARRY_SPEED);
                ((Some(self.cursor_left), 0.0), (Some(RIGHT_PARK), 1.0))
            }
            7 => {
                if matches!(held, Holder::None) {
                    self.phase = 8;
                }
                ((Some(place), 1.0), (Some(RIGHT_PARK), 1.0))
            }
            _ => ((Some(LEFT_PARK), 1.0), (Some(RIGHT_PARK), 1.0)),
        }
    }

    #[allow(clippy::type_complexity)]
    fn bar_lift(
        &mut self,
        world: &WorldState,
        cfg: &SimConfig,
    ) -> ((Option<(f64, f64)>, f64), (Option<(f64, f64)>, f64)) {
        let ee_l = fk(&world.left, cfg);
        let ee_r = fk(&world.right, cfg);
        let bar = world.bar.as_ref().expect("bar task without a bar");
        let goal = world.goal.expect("bar task without a goal");
        let half = bar.length / 2.0;
        let planned_ends = |plan: (f64, f64)| ((plan.0 - half, plan.1), (plan.0 + half, plan.1));
        match self.phase {
            0 => {
                if dist((ee_l.x, ee_l.y), bar.left_end()) < 0.015
                    && dist((ee_r.x, ee_r.y), bar.right_end()) < 0.015
                {
                    self.phase = 1;
                }
                ((Some(bar.left_end()), 1.0), (Some(bar.right_end()), 1.0))
            }
            1 => {
                if bar.held_left && bar.held_right {
                    self.phase = 2;
                    self.plan = bar.center;
                    self.lift_top = bar.center.1 + geometry::BAR_LIFT_RAISE;
                }
                ((Some(bar.left_end()), 0.0), (Some(bar.right_end()), 0.0))
            }
            2 => {
                self.plan = ramp_toward(self.plan, (self.plan.0, self.lift_top), BAR_RAMP_SPEED);
                let (l, r) = planned_ends(self.plan);
                if (self.plan.1 - self.lift_top).abs() < 1e-12
                    && dist((ee_l.x, ee_l.y), l) < 0.012
                    && dist((ee_r.x, ee_r.y), r) < 0.012
                {
                    self.phase = 3;
                }
                ((Some(l), 0.0), (Some(r), 0.0))
            }
            3 => {
                self.plan = ramp_toward(self.plan, (goal.0, self.lift_top), BAR_RAMP_SPEED);
                let (l, r) = planned_ends(self.plan);
                if (self.plan.0 - goal.0).abs() < 1e-12
                    && dist((ee_l.x, ee_l.y), l) < 0.012
                    && dist((ee_r.x, ee_r.y), r) < 0.012
                {
                    self.phase = 4;
                }
                ((Some(l), 0.0), (Some(r), 0.0))
            }
            4 => {
                self.plan = ramp_toward(self.plan, (goal.0, goal.1), BAR_RAMP_SPEED);
                let (l, r) = planned_ends(self.plan);
                if (self.plan.1 - goal.1).abs() < 1e-12
                    && dist((ee_l.x, ee_l.y), l) < 0.012
                    && dist((ee_r.x, ee_r.y), r) < 0.012
                {
                    self.phase = 5;
                }
                ((Some(l), 0.0), (Some(r), 0.0))
            }
            5 => {
                if !bar.held_left && !bar.held_right {
                    self.phase = 6;
                }
                let (l, r) = planned_ends(self.plan);
                ((Some(l), 1.0), (Some(r), 1.0))
            }
            _ => ((Some(BAR_LEFT_PARK), 1.0), (Some(BAR_RIGHT_PARK), 1.0)),
        }
    }

    fn to_action(
        &self,
        target: Option<(f64, f64)>,
        grip: f64,
        arm: ArmId,
        noise_scale: f64,
        rng: &mut ChaCha8Rng,
        cfg: &SimConfig,
    ) -> Vec<f64> {
        let mut angles = match (target, arm) {
            (Some(p), ArmId::Left) => ik_pointing(cfg.left_base, p, 1.0, cfg),
            (Some(p), ArmId::Right) => ik_pointing(cfg.right_base, p, -1.0, cfg),
            (None, ArmId::Left) => self.hold_left,
            (None, ArmId::Right) => self.hold_right,
        };
        if noise_scale > 0.0 {
            let noise = standard_normal_vec(3, rng);
            for (a, n) in angles.iter_mut().zip(noise.iter()) {
                *a += noise_scale * n;
            }
        }
        vec![angles[0], angles[1], angles[2], grip]
    }
}
