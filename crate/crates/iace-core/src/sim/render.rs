//! Deterministic rasterization of the world into the four camera images.
//!
//! Entities carry fixed channel colors: objects and the bar live in the red
//! channel, the left arm in green, the right arm in blue. Wrist cameras
//! render a square window centered on their arm's end-effector and see only
//! physical scene content; the place-target marker is an overlay drawn by
//! the two scene cameras alone.

use crate::policy::{Image, ObservationFrame};
use crate::sim::kinematics::fk;
use crate::sim::{SimConfig, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraId {
    WristLeft,
    WristRight,
    Top,
    Front,
}

impl CameraId {
    pub const ALL: [CameraId; 4] = [
        CameraId::WristLeft,
        CameraId::WristRight,
        CameraId::Top,
        CameraId::Front,
    ];
}

/// World-to-pixel mapping of one camera.
struct View {
    min_x: f64,
    min_y: f64,
    scale_x: f64,
    scale_y: f64,
    mirror_x: bool,
    flip_y: bool,
    w: usize,
    h: usize,
}

impl View {
    fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let mut px = (x - self.min_x) * self.scale_x;
        let mut py = (y - self.min_y) * self.scale_y;
        if self.mirror_x {
            px = self.w as f64 - px;
        }
        if self.flip_y {
            py = self.h as f64 - py;
        }
        (px, py)
    }
}

struct Canvas {
    img: Image,
    view: View,
}

impl Canvas {
    fn put(&mut self, px: i64, py: i64, color: (f32, f32, f32)) {
        if px < 0 || py < 0 || px >= self.view.w as i64 || py >= self.view.h as i64 {
            return;
        }
        let idx = (py as usize * self.img.width + px as usize) * self.img.channels;
        let p = &mut self.img.pixels[idx..idx + 3];
        p[0] = p[0].max(color.0);
        p[1] = p[1].max(color.1);
        p[2] = p[2].max(color.2);
    }

    fn fill_rect(&mut self, center: (f64, f64), half: f64, color: (f32, f32, f32)) {
        let (ax, ay) = self.view.to_pixel(center.0 - half, center.1 - half);
        let (bx, by) = self.view.to_pixel(center.0 + half, center.1 + half);
        let (x0, x1) = (ax.min(bx), ax.max(bx));
        let (y0, y1) = (ay.min(by), ay.max(by));
        for py in y0.floor() as i64..=y1.ceil() as i64 - 1 {
            for px in x0.floor() as i64..=x1.ceil() as i64 - 1 {
                self.put(px, py, color);
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: (f32, f32, f32)) {
        let (ax, ay) = self.view.to_pixel(a.0, a.1);
        let (bx, by) = self.view.to_pixel(b.0, b.1);
        let steps = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize * 2).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let px = ax + (bx - ax) * t;
            let py = ay + (by - ay) * t;
            self.put(px.floor() as i64, py.floor() as i64, color);
        }
    }
}

const LEFT_ARM: (f32, f32, f32) = (0.0, 1.0, 0.0);
const RIGHT_ARM: (f32, f32, f32) = (0.0, 0.0, 1.0);
const OBJECT: (f32, f32, f32) = (1.0, 0.0, 0.0);
const BAR: (f32, f32, f32) = (1.0, 0.45, 0.0);
const MARKER: (f32, f32, f32) = (1.0, 1.0, 1.0);

fn view_for(camera: CameraId, world: &WorldState, cfg: &SimConfig) -> View {
    let (w, h) = (cfg.img_width, cfg.img_height);
    match camera {
        CameraId::Top => View {
            min_x: 0.0,
            min_y: 0.0,
            scale_x: w as f64 / cfg.workspace_w,
            scale_y: h as f64 / cfg.workspace_h,
            mirror_x: false,
            flip_y: true,
            w,
            h,
        },
        // the front view mirrors x and does not flip y: a second fixed
        // projection of the same planar scene
        CameraId::Front => View {
            min_x: 0.0,
            min_y: 0.0,
            scale_x: w as f64 / cfg.workspace_w,
            scale_y: h as f64 / cfg.workspace_h,
            mirror_x: true,
            flip_y: false,
            w,
            h,
        },
        CameraId::WristLeft | CameraId::WristRight => {
            let arm = match camera {
                CameraId::WristLeft => &world.left,
                _ => &world.right,
            };
            let ee = fk(arm, cfg);
            View {
                min_x: ee.x - cfg.wrist_window / 2.0,
                min_y: ee.y - cfg.wrist_window / 2.0,
                scale_x: w as f64 / cfg.wrist_window,
                scale_y: h as f64 / cfg.wrist_window,
                mirror_x: false,
                flip_y: true,
                w,
                h,
            }
        }
    }
}

fn draw_scene(canvas: &mut Canvas, world: &WorldState, cfg: &SimConfig, with_overlay: bool) {
    // arms as link segments with an end-effector block whose brightness
    // tracks how closed the gripper is
    for (arm, color) in [(&world.left, LEFT_ARM), (&world.right, RIGHT_ARM)] {
        let mut from = arm.base;
        let mut phi = 0.0;
        for (angle, len) in arm.angles.iter().zip(cfg.link_lengths.iter()) {
            phi += angle;
            let to = (from.0 + len * phi.cos(), from.1 + len * phi.sin());
            canvas.line(from, to, color);
            from = to;
        }
        let b = 0.4 + 0.6 * (1.0 - arm.grip) as f32;
        let ee_color = (color.0 * b, color.1 * b, color.2 * b);
        canvas.fill_rect(from, cfg.object_half * 0.75, ee_color);
    }
    if let Some(bar) = &world.bar {
        canvas.line(bar.left_end(), bar.right_end(), BAR);
        canvas.fill_rect(bar.left_end(), cfg.object_half * 0.6, BAR);
        canvas.fill_rect(bar.right_end(), cfg.object_half * 0.6, BAR);
    }
    for obj in &world.objects {
        canvas.fill_rect(obj.pos, cfg.object_half, OBJECT);
    }
    if with_overlay {
        if let Some(goal) = world.goal {
            canvas.fill_rect(goal, cfg.object_half * 0.8, MARKER);
        }
    }
}

/// Rasterize one camera's 48x48x3 image in [0,1].
pub fn render(world: &WorldState, camera: CameraId, cfg: &SimConfig) -> Image {
    let mut canvas = Canvas {
        img: Image::zeros(cfg.img_height, cfg.img_width, cfg.img_channels),
        view: view_for(camera, world, cfg),
    };
    let overlay = matches!(camera, CameraId::Top | CameraId::Front);
    draw_scene(&mut canvas, world, cfg, overlay);
    canvas.img
}

/// Build the policy observation for the current state. Joint values pass
/// through f32 so training data and live rollouts see identical precision.
pub fn observe(world: &WorldState, cfg: &SimConfig) -> ObservationFrame {
    let quantize = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| *x as f32 as f64).collect() };
    ObservationFrame {
        joints_left: quantize(&world.left.joint_vector()),
        joints_right: quantize(&world.right.joint_vector()),
        wrist_left: render(world, CameraId::WristLeft, cfg),
        wrist_right: render(world, CameraId::WristRight, cfg),
        top: render(world, CameraId::Top, cfg),
        front: render(world, CameraId::Front, cfg),
    }
}
