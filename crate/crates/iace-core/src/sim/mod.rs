//! Deterministic planar two-arm kinematic simulator.
//!
//! Two 3-link arms face each other across a 1.0 x 0.6 m vertical workspace
//! (x right, y up). Objects are points that bind to an end-effector when the
//! gripper closes nearby; a bar binds at its two ends. There are no contact
//! forces: motion is joint-space rate-limited tracking of absolute targets.

mod expert;
mod kinematics;
mod render;
mod tasks;
mod world;

pub use expert::ScriptedExpert;
pub use kinematics::{fk, ik_pointing, Pose};
pub use render::{observe, render, CameraId};
pub use tasks::{
    all_tasks, generate_demos, init_world, success, task_by_name, TaskClass, TaskSpec,
};
pub use world::step;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown task name: {0}")]
    UnknownTask(String),
    #[error("non-finite action at step {0}")]
    NonFiniteAction(u64),
    #[error("action for {arm} arm has {got} entries, expected {expected}")]
    ActionShape {
        arm: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("expert failed to produce a successful episode after {0} retries")]
    ExpertFailure(usize),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

/// Joints per arm: three revolute joints plus the gripper aperture.
pub const JOINTS_PER_ARM: usize = 4;

/// Geometry and rate limits, all in one record.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub workspace_w: f64,
    pub workspace_h: f64,
    pub link_lengths: [f64; 3],
    pub grasp_radius: f64,
    /// Per-step joint change bound (radians).
    pub joint_rate: f64,
    /// Per-step gripper aperture change bound.
    pub grip_rate: f64,
    pub left_base: (f64, f64),
    pub right_base: (f64, f64),
    /// Side length of the square window a wrist camera sees.
    pub wrist_window: f64,
    pub img_height: usize,
    pub img_width: usize,
    pub img_channels: usize,
    /// Bar tilt bound for synchronized carries (radians).
    pub tilt_max: f64,
    /// Rendered half-size of point objects (meters).
    pub object_half: f64,
    /// Simulation rate used for demonstration collection.
    pub sim_hz: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            workspace_w: 1.0,
            workspace_h: 0.6,
            link_lengths: [0.15, 0.12, 0.10],
            grasp_radius: 0.03,
            joint_rate: 0.05,
            grip_rate: 0.25,
            left_base: (0.15, 0.26),
            right_base: (0.85, 0.26),
            wrist_window: 0.30,
            img_height: 48,
            img_width: 48,
            img_channels: 3,
            tilt_max: 0.15,
            object_half: 0.03,
            sim_hz: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArmId {
    Left,
    Right,
}

/// Three revolute joints, gripper aperture in [0,1], and the fixed base.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmState {
    pub angles: [f64; 3],
    /// 1 is fully open, 0 fully closed; values below 0.5 can bind.
    pub grip: f64,
    pub base: (f64, f64),
}

impl ArmState {
    pub fn joint_vector(&self) -> Vec<f64> {
        vec![self.angles[0], self.angles[1], self.angles[2], self.grip]
    }
}

/// Who currently holds an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Holder {
    None,
    Left,
    Right,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectState {
    pub pos: (f64, f64),
    pub held_by: Holder,
    /// First arm to grab; tracked while `held_by` is `Both`.
    pub primary: Option<ArmId>,
}

/// A rigid bar grasped at its two ends. The left arm handles the left end.
#[derive(Clone, Debug, PartialEq)]
pub struct BarState {
    pub center: (f64, f64),
    /// Positive when the left end is higher than the right.
    pub tilt: f64,
    pub length: f64,
    pub held_left: bool,
    pub held_right: bool,
}

impl BarState {
    pub fn left_end(&self) -> (f64, f64) {
        let (dx, dy) = self.axis();
        (self.center.0 - dx, self.center.1 - dy)
    }

    pub fn right_end(&self) -> (f64, f64) {
        let (dx, dy) = self.axis();
        (self.center.0 + dx, self.center.1 + dy)
    }

    fn axis(&self) -> (f64, f64) {
        (
            self.length / 2.0 * self.tilt.cos(),
            -(self.length / 2.0) * self.tilt.sin(),
        )
    }
}

/// Full simulator state at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub left: ArmState,
    pub right: ArmState,
    pub objects: Vec<ObjectState>,
    pub bar: Option<BarState>,
    /// Place-target marker, rendered by the scene cameras only.
    pub goal: Option<(f64, f64)>,
    pub step_index: u64,
}

/// Deterministic stream derivation (splitmix64 over the mixed words), so
/// per-episode randomness is independent of iteration order.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Seed-stream labels; training and evaluation draw initial states from
/// disjoint streams.
pub mod streams {
    pub const DEMO: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const NOISE: u64 = 3;
}
