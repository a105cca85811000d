//! Flat-shaded software rasterizer for the 64x64 policy view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arm::ArmModel;
use super::kinematics::joint_points;
use super::state::PhysState;

pub const IMAGE_SIDE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS;
/// World point at the image center.
pub const VIEW_CENTER: (f64, f64) = (0.3, 0.3);
/// Half side of the square world window, meters.
pub const VIEW_HALF: f64 = 0.4;
pub const PIXEL_SIZE: f64 = 2.0 * VIEW_HALF / IMAGE_SIDE as f64;

const LINK_HALF_WIDTH: f64 = 0.012;
const FINGER_HALF_LEN: f64 = 0.02;
const FINGER_HALF_WIDTH: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualParams {
    pub arm_shade: u8,
    pub table_color: [u8; 3],
    pub light_pos: (f64, f64),
    pub light_intensity: f64,
    /// Camera offset in meters and roll in radians.
    pub camera_jitter: (f64, f64, f64),
}

impl Default for VisualParams {
    fn default() -> Self {
        Self {
            arm_shade: 150,
            table_color: [96, 112, 84],
            light_pos: (0.3, 0.9),
            light_intensity: 1.0,
            camera_jitter: (0.0, 0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualRanges {
    pub arm_shade: (u8, u8),
    /// Per-channel offset from the default table color.
    pub table_jitter: u8,
    pub light_x: (f64, f64),
    pub light_y: (f64, f64),
    pub light_intensity: (f64, f64),
    pub camera_shift: f64,
    pub camera_roll: f64,
}

impl Default for VisualRanges {
    fn default() -> Self {
        Self {
            arm_shade: (90, 210),
            table_jitter: 30,
            light_x: (-0.2, 0.8),
            light_y: (0.6, 1.2),
            light_intensity: (0.75, 1.2),
            camera_shift: 0.01,
            camera_roll: 0.03,
        }
    }
}

impl VisualRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> VisualParams {
        let base = VisualParams::default();
        let j = self.table_jitter as i32;
        let mut table = base.table_color;
        for c in &mut table {
            *c = (*c as i32 + rng.random_range(-j..=j)).clamp(0, 255) as u8;
        }
        let sym = |r: &mut R, h: f64| if h > 0.0 { r.random_range(-h..=h) } else { 0.0 };
        VisualParams {
            arm_shade: rng.random_range(self.arm_shade.0..=self.arm_shade.1),
            table_color: table,
            light_pos: (
                rng.random_range(self.light_x.0..=self.light_x.1),
                rng.random_range(self.light_y.0..=self.light_y.1),
            ),
            light_intensity: rng.random_range(self.light_intensity.0..=self.light_intensity.1),
            camera_jitter: (
                sym(rng, self.camera_shift),
                sym(rng, self.camera_shift),
                sym(rng, self.camera_roll),
            ),
        }
    }

    pub fn contains(&self, v: &VisualParams) -> bool {
        let base = VisualParams::default();
        let in_r = |x: f64, r: (f64, f64)| x >= r.0 && x <= r.1;
        (self.arm_shade.0..=self.arm_shade.1).contains(&v.arm_shade)
            && v
                .table_color
                .iter()
                .zip(base.table_color)
                .all(|(&c, b)| (c as i32 - b as i32).abs() <= self.table_jitter as i32)
            && in_r(v.light_pos.0, self.light_x)
            && in_r(v.light_pos.1, self.light_y)
            && in_r(v.light_intensity, self.light_intensity)
            && v.camera_jitter.0.abs() <= self.camera_shift
            && v.camera_jitter.1.abs() <= self.camera_shift
            && v.camera_jitter.2.abs() <= self.camera_roll
    }
}

/// Oriented rectangle: center, unit axis, half length along and across it.
struct Quad {
    c: (f64, f64),
    axis: (f64, f64),
    half: (f64, f64),
    color: [u8; 3],
}

impl Quad {
    fn segment(a: (f64, f64), b: (f64, f64), half_width: f64, color: [u8; 3]) -> Self {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy).max(1e-12);
        Quad {
            c: ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0),
            axis: (dx / len, dy / len),
            half: (len / 2.0 + half_width, half_width),
            color,
        }
    }

    fn contains(&self, p: (f64, f64)) -> bool {
        let (rx, ry) = (p.0 - self.c.0, p.1 - self.c.1);
        let u = rx * self.axis.0 + ry * self.axis.1;
        let v = -rx * self.axis.1 + ry * self.axis.0;
        u.abs() <= self.half.0 && v.abs() <= self.half.1
    }

    fn radius(&self) -> f64 {
        self.half.0.hypot(self.half.1)
    }
}

fn shade(color: [u8; 3], at: (f64, f64), v: &VisualParams) -> [u8; 3] {
    let d2 = (at.0 - v.light_pos.0).powi(2) + (at.1 - v.light_pos.1).powi(2);
    let f = v.light_intensity * (0.55 + 0.45 * (-d2 / 0.5).exp());
    color.map(|c| (c as f64 * f).round().clamp(0.0, 255.0) as u8)
}

/// World point seen at pixel `(row, col)` center.
pub fn pixel_to_world(row: usize, col: usize, v: &VisualParams) -> (f64, f64) {
    let vx = -VIEW_HALF + (col as f64 + 0.5) * PIXEL_SIZE;
    let vy = VIEW_HALF - (row as f64 + 0.5) * PIXEL_SIZE;
    let (dx, dy, th) = v.camera_jitter;
    let (s, c) = th.sin_cos();
    (
        VIEW_CENTER.0 + dx + c * vx - s * vy,
        VIEW_CENTER.1 + dy + s * vx + c * vy,
    )
}

/// Continuous `(row, col)` image coordinates of a world point, pixel
/// centers at half-integers minus one half.
pub fn world_to_pixel(p: (f64, f64), v: &VisualParams) -> (f64, f64) {
    let (dx, dy, th) = v.camera_jitter;
    let (s, c) = th.sin_cos();
    let (rx, ry) = (p.0 - VIEW_CENTER.0 - dx, p.1 - VIEW_CENTER.1 - dy);
    let vx = c * rx + s * ry;
    let vy = -s * rx + c * ry;
    (
        (VIEW_HALF - vy) / PIXEL_SIZE - 0.5,
        (vx + VIEW_HALF) / PIXEL_SIZE - 0.5,
    )
}

fn scene(arm: &ArmModel, s: &PhysState, v: &VisualParams) -> Vec<Quad> {
    let mut quads = Vec::new();
    for o in &s.objects {
        let (sa, ca) = o.pose.2.sin_cos();
        let q = Quad {
            c: (o.pose.0, o.pose.1),
            axis: (ca, sa),
            half: o.half_extents,
            color: o.color,
        };
        quads.push(Quad {
            color: shade(o.color, q.c, v),
            ..q
        });
    }
    if s.joint_angles.is_empty() {
        return quads;
    }
    let pts = joint_points(arm, &s.joint_angles);
    let grey = [v.arm_shade; 3];
    for w in pts.windows(2) {
        let mid = ((w[0].0 + w[1].0) / 2.0, (w[0].1 + w[1].1) / 2.0);
        quads.push(Quad::segment(w[0], w[1], LINK_HALF_WIDTH, shade(grey, mid, v)));
    }
    let tip = *pts.last().unwrap();
    let a: f64 = s.joint_angles.iter().sum();
    let (dir, perp) = ((a.cos(), a.sin()), (-a.sin(), a.cos()));
    let dark = [(v.arm_shade as f64 * 0.6) as u8; 3];
    let off = s.finger_aperture / 2.0 + FINGER_HALF_WIDTH;
    for side in [-1.0, 1.0] {
        let c = (tip.0 + side * off * perp.0, tip.1 + side * off * perp.1);
        let a = (c.0 - FINGER_HALF_LEN * dir.0, c.1 - FINGER_HALF_LEN * dir.1);
        let b = (c.0 + FINGER_HALF_LEN * dir.0, c.1 + FINGER_HALF_LEN * dir.1);
        let mut q = Quad::segment(a, b, FINGER_HALF_WIDTH, dark);
        q.half.0 -= FINGER_HALF_WIDTH;
        q.color = shade(dark, c, v);
        quads.push(q);
    }
    quads
}

/// Renders the scene into row-major HWC 8-bit RGB. Later primitives draw
/// over earlier ones: objects, then links, then fingers.
pub fn render(arm: &ArmModel, s: &PhysState, v: &VisualParams) -> Vec<u8> {
    let mut img = Vec::with_capacity(IMAGE_LEN);
    for _ in 0..IMAGE_SIDE * IMAGE_SIDE {
        img.extend_from_slice(&v.table_color);
    }
    for q in scene(arm, s, v) {
        let (r0, c0) = world_to_pixel(q.c, v);
        let rad = q.radius() / PIXEL_SIZE + 1.5;
        let lo = |x: f64| (x - rad).floor().max(0.0) as usize;
        let hi = |x: f64| ((x + rad).ceil().max(0.0) as usize).min(IMAGE_SIDE - 1);
        if r0 + rad < 0.0 || c0 + rad < 0.0 {
            continue;
        }
        for row in lo(r0)..=hi(r0) {
            for col in lo(c0)..=hi(c0) {
                if q.contains(pixel_to_world(row, col, v)) {
                    let i = (row * IMAGE_SIDE + col) * IMAGE_CHANNELS;
                    img[i..i + 3].copy_from_slice(&q.color);
                }
            }
        }
    }
    img
}
