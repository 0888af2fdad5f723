//! Ray-cast synthetic rooms.
//!
//! The camera sits at the origin looking down `+z`, with `x` to the right and
//! `y` pointing down, matching image axes. Each pixel's ray has unit `z`
//! component, so the hit parameter is the z-depth itself.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::decomposition::{DepthSpace, MetricDepthMap};

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Vec3) -> Vec3 {
    let l = dot(a, a).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Centered principal point and a horizontal field of view near 60 degrees.
    pub fn for_size(height: usize, width: usize) -> Self {
        Self {
            focal: 0.9 * width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// Ray direction through the center of pixel `(row, col)`; its `z` is 1.
    pub fn ray(&self, row: usize, col: usize) -> Vec3 {
        [
            (col as f64 + 0.5 - self.cx) / self.focal,
            (row as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Points `x` with `normal . x = offset`; `checker` tiles the albedo.
    Plane {
        normal: Vec3,
        offset: f64,
        albedo: Vec3,
        checker: Option<f64>,
    },
    /// Axis-aligned box.
    Cuboid { min: Vec3, max: Vec3, albedo: Vec3 },
}

impl Primitive {
    /// Nearest positive hit along `d` from the origin: `(t, outward normal)`.
    fn intersect(&self, d: Vec3) -> Option<(f64, Vec3)> {
        const EPS: f64 = 1e-9;
        match *self {
            Primitive::Plane { normal, offset, .. } => {
                let nd = dot(normal, d);
                if nd.abs() < EPS {
                    return None;
                }
                let t = offset / nd;
                // Face the camera.
                let n = if nd > 0.0 { normal.map(|v| -v) } else { normal };
                (t > EPS).then_some((t, n))
            }
            Primitive::Cuboid { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    if d[a].abs() < EPS {
                        if 0.0 < min[a] || 0.0 > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = (min[a] / d[a], max[a] / d[a]);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    if lo > t0 {
                        t0 = lo;
                        axis = a;
                    }
                    t1 = t1.min(hi);
                }
                if t0 > t1 || t0 <= EPS {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -d[axis].signum();
                Some((t0, n))
            }
        }
    }

    fn albedo_at(&self, p: Vec3) -> Vec3 {
        match *self {
            Primitive::Plane { albedo, checker, normal, .. } => match checker {
                Some(size) => {
                    // Tile along the two in-plane axes with the largest extent.
                    let major = (0..3)
                        .max_by(|&a, &b| normal[a].abs().total_cmp(&normal[b].abs()))
                        .unwrap_or(1);
                    let parity: i64 = (0..3)
                        .filter(|&a| a != major)
                        .map(|a| (p[a] / size).floor() as i64)
                        .sum();
                    if parity.rem_euclid(2) == 0 {
                        albedo
                    } else {
                        albedo.map(|v| 0.6 * v)
                    }
                }
                None => albedo,
            },
            Primitive::Cuboid { albedo, .. } => albedo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub camera: Camera,
    pub primitives: Vec<Primitive>,
    /// `(min, max)` depth in meters; hits are clamped into this range.
    pub depth_range: (f64, f64),
    pub light: Vec3,
    /// Fraction of pixels dropped to invalid, imitating sensor holes.
    pub dropout: f64,
    pub seed: u64,
}

/// Ray-casts `spec` into an RGB image and an original-space depth map.
pub fn render_scene(spec: &SceneSpec) -> Result<(Array3<f64>, MetricDepthMap), DataError> {
    let (lo, hi) = spec.depth_range;
    if !(lo > 0.0 && lo < hi) {
        return Err(DataError::InvalidScene(format!("depth range ({lo}, {hi})")));
    }
    if spec.primitives.is_empty() {
        return Err(DataError::EmptyScene);
    }
    let cam = spec.camera;
    let (h, w) = (cam.height, cam.width);
    let mut depth = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    let mut image = Array3::zeros((h, w, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..h {
        for j in 0..w {
            let d = cam.ray(i, j);
            let hit = spec
                .primitives
                .iter()
                .filter_map(|p| p.intersect(d).map(|(t, n)| (t, n, p)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let Some((t, n, prim)) = hit else { continue };
            let p = d.map(|v| v * t);
            let to_light = sub(spec.light, p);
            let dist2 = dot(to_light, to_light);
            let lambert = dot(n, norm(to_light)).max(0.0);
            let falloff = 1.0 / (1.0 + dist2 / 16.0);
            let shade = 0.15 + 0.85 * lambert * falloff;
            let albedo = prim.albedo_at(p);
            for c in 0..3 {
                image[[i, j, c]] = (albedo[c] * shade).clamp(0.0, 1.0);
            }
            depth[[i, j]] = t.clamp(lo, hi);
            valid[[i, j]] = true;
        }
    }
    if spec.dropout > 0.0 {
        for v in valid.iter_mut() {
            if rng.random::<f64>() < spec.dropout {
                *v = false;
            }
        }
        depth.zip_mut_with(&valid, |d, &ok| {
            if !ok {
                *d = 0.0
            }
        });
    }
    Ok((image, MetricDepthMap { data: depth, space: DepthSpace::Original, valid }))
}

/// Knobs of the random room generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomParams {
    /// Range of the back wall distance in meters.
    pub back_wall: (f64, f64),
    pub half_width: (f64, f64),
    pub camera_height: (f64, f64),
    pub room_height: (f64, f64),
    /// Maximum rotation of the room about the vertical axis, radians.
    pub max_yaw: f64,
    pub max_boxes: usize,
    pub depth_range: (f64, f64),
    pub dropout: f64,
}

impl Default for RoomParams {
    fn default() -> Self {
        Self {
            back_wall: (2.5, 9.5),
            half_width: (1.2, 4.0),
            camera_height: (1.0, 1.6),
            room_height: (2.4, 3.2),
            max_yaw: 0.35,
            max_boxes: 3,
            depth_range: (0.5, 10.0),
            dropout: 0.0,
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> Vec3 {
    [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)]
}

/// A closed room (floor, ceiling, three walls) plus boxes standing on the floor.
pub fn random_room(seed: u64, camera: Camera, p: &RoomParams) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let back = rng.random_range(p.back_wall.0..p.back_wall.1);
    let half = rng.random_range(p.half_width.0..p.half_width.1);
    let shift = rng.random_range(-0.5..0.5) * half;
    let cam_h = rng.random_range(p.camera_height.0..p.camera_height.1);
    let room_h = rng.random_range(p.room_height.0..p.room_height.1).max(cam_h + 0.5);
    let yaw: f64 = rng.random_range(-p.max_yaw..=p.max_yaw);
    let (s, c) = yaw.sin_cos();
    // Room axes rotated about y: `right` and `forward` in camera coordinates.
    let right = [c, 0.0, -s];
    let forward = [s, 0.0, c];
    let floor_color = color(&mut rng);
    let wall_color = color(&mut rng);
    let mut prims = vec![
        Primitive::Plane { normal: [0.0, 1.0, 0.0], offset: cam_h, albedo: floor_color, checker: Some(0.5) },
        Primitive::Plane { normal: [0.0, 1.0, 0.0], offset: cam_h - room_h, albedo: [0.9, 0.9, 0.9], checker: None },
        Primitive::Plane { normal: forward, offset: back, albedo: wall_color, checker: None },
        Primitive::Plane { normal: right, offset: half - shift, albedo: wall_color.map(|v| 0.85 * v), checker: None },
        Primitive::Plane { normal: right, offset: -half - shift, albedo: wall_color.map(|v| 0.85 * v), checker: None },
    ];
    let boxes = rng.random_range(0..=p.max_boxes);
    for _ in 0..boxes {
        let size = [rng.random_range(0.3..1.2), rng.random_range(0.3..1.2), rng.random_range(0.3..1.2)];
        let z = rng.random_range(1.0..(back - 0.5).max(1.5));
        let x = rng.random_range(-0.8..0.8) * z * camera.width as f64 / (2.0 * camera.focal);
        let lo = [x - size[0] / 2.0, cam_h - size[1], z];
        let hi = [x + size[0] / 2.0, cam_h, z + size[2]];
        prims.push(Primitive::Cuboid { min: lo, max: hi, albedo: color(&mut rng) });
    }
    SceneSpec {
        camera,
        primitives: prims,
        depth_range: p.depth_range,
        light: [rng.random_range(-0.5..0.5), cam_h - room_h + 0.3, rng.random_range(0.0..1.0)],
        dropout: p.dropout,
        seed,
    }
}
