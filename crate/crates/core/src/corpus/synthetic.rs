//! Seeded synthetic scenes built from boxes and spheres resting on a ground plane.
//!
//! Everything is analytic: point samples lie exactly on primitive surfaces and
//! depth/RGB frames are ray cast, so tests can check projection and
//! visibility against closed-form geometry. World frame is z-up; cameras use
//! the x-right, y-down, z-forward convention.

use std::path::{Path, PathBuf};

use image::{Luma, Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    manifest::{write_manifest, Manifest, ManifestFrame},
    CameraIntrinsics, CorpusError, DepthImage, FrameRecord, ObjectInstance, Point, Pose,
    SceneRecord,
};

const BOX_CATEGORIES: &[&str] = &["chair", "table", "cabinet", "desk", "sofa"];
const SPHERE_CATEGORIES: &[&str] = &["ball", "lamp"];
const BACKGROUND: [u8; 3] = [170, 180, 190];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Axis-aligned box.
    Box { center: [f64; 3], half: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    /// Nearest ray parameter `t > 1e-9` at which `origin + t * dir` meets the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Shape::Box { center, half } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    let lo = center[a] - half[a];
                    let hi = center[a] + half[a];
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (lo - origin[a]) / dir[a];
                    let mut t1 = (hi - origin[a]) / dir[a];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_far <= 1e-9 {
                    None
                } else if t_near > 1e-9 {
                    Some(t_near)
                } else {
                    Some(t_far)
                }
            }
            Shape::Sphere { center, radius } => {
                let c = Vector3::from(*center);
                let oc = origin - c;
                let a = dir.dot(dir);
                let b = 2.0 * oc.dot(dir);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                if t0 > 1e-9 {
                    Some(t0)
                } else if t1 > 1e-9 {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    fn normal_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Shape::Box { center, half } => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                let mut sign = 1.0;
                for a in 0..3 {
                    let d_hi = (p[a] - (center[a] + half[a])).abs();
                    let d_lo = (p[a] - (center[a] - half[a])).abs();
                    if d_hi < best_d {
                        best_d = d_hi;
                        best = a;
                        sign = 1.0;
                    }
                    if d_lo < best_d {
                        best_d = d_lo;
                        best = a;
                        sign = -1.0;
                    }
                }
                let mut n = Vector3::zeros();
                n[best] = sign;
                n
            }
            Shape::Sphere { center, .. } => (p - Vector3::from(*center)).normalize(),
        }
    }

    pub fn surface_area(&self) -> f64 {
        match self {
            Shape::Box { half, .. } => {
                let [hx, hy, hz] = *half;
                8.0 * (hx * hy + hy * hz + hx * hz)
            }
            Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match self {
            Shape::Box { center, half } => {
                let [hx, hy, hz] = *half;
                // Face pairs normal to x, y, z weighted by area.
                let areas = [hy * hz, hx * hz, hx * hy];
                let total: f64 = areas.iter().sum();
                let pick = rng.random::<f64>() * total;
                let axis = if pick < areas[0] {
                    0
                } else if pick < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vector3::zeros();
                for a in 0..3 {
                    p[a] = if a == axis {
                        center[a] + sign * half[a]
                    } else {
                        center[a] + rng.random_range(-half[a]..=half[a])
                    };
                }
                p
            }
            Shape::Sphere { center, radius } => {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                Vector3::from(*center) + v.normalize() * *radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub category: String,
    pub shape: Shape,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CameraRig {
    /// Cameras evenly spaced on a horizontal circle, all looking at `target`.
    Ring {
        count: usize,
        radius: f64,
        height: f64,
        target: [f64; 3],
    },
    Explicit(Vec<Pose>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub scene_id: String,
    pub boxes: usize,
    pub spheres: usize,
    /// Explicit layout; when set, `boxes` and `spheres` are ignored.
    pub objects: Option<Vec<Primitive>>,
    /// Adds a thin slab instance labelled "floor" under the objects.
    pub floor: bool,
    pub cameras: CameraRig,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Surface sampling density, points per square meter.
    pub points_per_m2: f64,
    pub layout_radius: f64,
    pub superpoints: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            scene_id: "synth0000_00".into(),
            boxes: 3,
            spheres: 0,
            objects: None,
            floor: false,
            cameras: CameraRig::Ring {
                count: 8,
                radius: 3.2,
                height: 1.6,
                target: [0.0, 0.0, 0.3],
            },
            width: 320,
            height: 240,
            focal: 260.0,
            points_per_m2: 4000.0,
            layout_radius: 1.2,
            superpoints: false,
        }
    }
}

impl SyntheticSpec {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// A generated scene plus the analytic primitives behind it.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub record: SceneRecord,
    pub primitives: Vec<Primitive>,
    pub manifest_path: PathBuf,
}

/// Camera-to-world pose at `eye` looking at `target`, world up = +z.
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Pose {
    let eye = Vector3::from(eye);
    let fwd = (Vector3::from(target) - eye).normalize();
    let mut right = fwd.cross(&Vector3::z());
    if right.norm() < 1e-9 {
        right = Vector3::x();
    }
    let right = right.normalize();
    let down = fwd.cross(&right);
    let rot = Matrix3::from_columns(&[right, down, fwd]);
    Pose::from_rotation_translation(&rot, &eye)
}

pub fn rig_poses(rig: &CameraRig) -> Vec<Pose> {
    match rig {
        CameraRig::Ring {
            count,
            radius,
            height,
            target,
        } => (0..*count)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / *count as f64;
                look_at([radius * a.cos(), radius * a.sin(), *height], *target)
            })
            .collect(),
        CameraRig::Explicit(p) => p.clone(),
    }
}

fn random_layout(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<Primitive> {
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    let mut out = Vec::new();
    let n = spec.boxes + spec.spheres;
    for k in 0..n {
        let is_box = k < spec.boxes;
        let (cat, shape_dims): (&str, [f64; 3]) = if is_box {
            let cat = BOX_CATEGORIES[rng.random_range(0..BOX_CATEGORIES.len())];
            let h = [
                rng.random_range(0.15..0.35),
                rng.random_range(0.15..0.35),
                rng.random_range(0.2..0.45),
            ];
            (cat, h)
        } else {
            let cat = SPHERE_CATEGORIES[rng.random_range(0..SPHERE_CATEGORIES.len())];
            let r = rng.random_range(0.15..0.3);
            (cat, [r, r, r])
        };
        let footprint = (shape_dims[0].powi(2) + shape_dims[1].powi(2)).sqrt();
        let mut xy = [0.0, 0.0];
        for attempt in 0..2000 {
            let r = spec.layout_radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            xy = [r * a.cos(), r * a.sin()];
            let clear = placed.iter().all(|(c, rad)| {
                let d = ((c[0] - xy[0]).powi(2) + (c[1] - xy[1]).powi(2)).sqrt();
                d > rad + footprint + 0.05
            });
            if clear || attempt == 1999 {
                break;
            }
        }
        placed.push((xy, footprint));
        let shape = if is_box {
            Shape::Box {
                center: [xy[0], xy[1], shape_dims[2]],
                half: shape_dims,
            }
        } else {
            Shape::Sphere {
                center: [xy[0], xy[1], shape_dims[0]],
                radius: shape_dims[0],
            }
        };
        let color = [
            rng.random_range(40..230),
            rng.random_range(40..230),
            rng.random_range(40..230),
        ];
        out.push(Primitive {
            category: cat.to_string(),
            shape,
            color,
        });
    }
    out
}

fn floor_primitive(spec: &SyntheticSpec) -> Primitive {
    let h = spec.layout_radius + 0.6;
    Primitive {
        category: "floor".into(),
        shape: Shape::Box {
            center: [0.0, 0.0, -0.01],
            half: [h, h, 0.01],
        },
        color: [120, 110, 100],
    }
}

/// Ray casts one frame. Depth is the camera-z distance in millimeters.
pub fn render_frame(
    primitives: &[Primitive],
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> (RgbImage, DepthImage) {
    let rot = pose.rotation();
    let eye = pose.translation();
    let light = Vector3::new(0.3, -0.5, 1.0).normalize();
    let mut rgb = RgbImage::from_pixel(intr.width, intr.height, Rgb(BACKGROUND));
    let mut depth = DepthImage::new(intr.width, intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d_cam = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let d_world = rot * d_cam;
            let mut best: Option<(f64, usize)> = None;
            for (k, p) in primitives.iter().enumerate() {
                if let Some(t) = p.shape.intersect(&eye, &d_world) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, k));
                    }
                }
            }
            if let Some((t, k)) = best {
                // d_cam has unit z, so the ray parameter is the camera depth.
                let mm = (t * 1000.0).round().clamp(1.0, 65535.0) as u16;
                depth.put_pixel(u, v, Luma([mm]));
                let hit = eye + d_world * t;
                let n = primitives[k].shape.normal_at(&hit);
                let shade = 0.35 + 0.65 * n.dot(&light).max(0.0);
                let c = primitives[k].color;
                rgb.put_pixel(
                    u,
                    v,
                    Rgb([
                        (c[0] as f64 * shade).round() as u8,
                        (c[1] as f64 * shade).round() as u8,
                        (c[2] as f64 * shade).round() as u8,
                    ]),
                );
            }
        }
    }
    (rgb, depth)
}

fn sample_points(
    rng: &mut ChaCha8Rng,
    primitives: &[Primitive],
    per_m2: f64,
) -> (Vec<Point>, Vec<ObjectInstance>) {
    let mut points = Vec::new();
    let mut instances = Vec::with_capacity(primitives.len());
    for (k, prim) in primitives.iter().enumerate() {
        let start = points.len() as u32;
        let n = ((prim.shape.surface_area() * per_m2).ceil() as usize).max(1);
        for _ in 0..n {
            let p = prim.shape.sample_surface(rng);
            let jitter = |c: u8, rng: &mut ChaCha8Rng| {
                (c as i32 + rng.random_range(-8..=8)).clamp(0, 255) as u8
            };
            points.push(Point {
                x: p.x as f32,
                y: p.y as f32,
                z: p.z as f32,
                r: jitter(prim.color[0], rng),
                g: jitter(prim.color[1], rng),
                b: jitter(prim.color[2], rng),
            });
        }
        instances.push(ObjectInstance {
            instance_id: k as i64 + 1,
            category: prim.category.clone(),
            point_indices: (start..points.len() as u32).collect(),
        });
    }
    (points, instances)
}

/// Writes a complete scene (manifest, PLY, instance table, frames) under
/// `out_dir/<scene_id>/` and returns the in-memory record.
pub fn generate_synthetic_scene(
    seed: u64,
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<SyntheticScene, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = match &spec.objects {
        Some(objs) => objs.clone(),
        None => random_layout(&mut rng, spec),
    };
    if spec.floor {
        primitives.push(floor_primitive(spec));
    }

    let (mut points, instances) = sample_points(&mut rng, &primitives, spec.points_per_m2);
    if points.is_empty() {
        // A scene needs at least one point; an anchor below the floor keeps the
        // zero-object case valid without belonging to any instance.
        points.push(Point {
            x: 0.0,
            y: 0.0,
            z: -1.0,
            r: 0,
            g: 0,
            b: 0,
        });
    }

    let scene_dir = out_dir.join(&spec.scene_id);
    let frames_dir = scene_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| CorpusError::io(&frames_dir, e))?;

    let intr = spec.intrinsics();
    let mut frames = Vec::new();
    let mut manifest_frames = Vec::new();
    for (k, pose) in rig_poses(&spec.cameras).into_iter().enumerate() {
        let (rgb, depth) = render_frame(&primitives, &intr, &pose);
        let rgb_rel = PathBuf::from(format!("frames/rgb_{k:04}.png"));
        let depth_rel = PathBuf::from(format!("frames/depth_{k:04}.png"));
        let rgb_path = scene_dir.join(&rgb_rel);
        let depth_path = scene_dir.join(&depth_rel);
        rgb.save(&rgb_path).map_err(|source| CorpusError::Image {
            path: rgb_path.clone(),
            source,
        })?;
        depth.save(&depth_path).map_err(|source| CorpusError::Image {
            path: depth_path.clone(),
            source,
        })?;
        manifest_frames.push(ManifestFrame {
            frame_id: k as i64,
            rgb: rgb_rel,
            depth: depth_rel,
            intrinsics: intr,
            pose_c2w: pose,
        });
        frames.push(FrameRecord {
            frame_id: k as i64,
            rgb_path,
            depth_path,
            intrinsics: intr,
            pose_c2w: pose,
        });
    }

    let superpoint_ids = spec
        .superpoints
        .then(|| (0..points.len()).map(|i| (i / 64) as i64).collect());
    let record = SceneRecord {
        scene_id: spec.scene_id.clone(),
        points,
        instances,
        frames,
        superpoint_ids,
    };
    let manifest = Manifest {
        scene_id: spec.scene_id.clone(),
        pose_convention: "c2w".into(),
        points: "points.ply".into(),
        instances: "instances.json".into(),
        superpoints: spec.superpoints.then(|| "superpoints.json".into()),
        frames: manifest_frames,
    };
    let manifest_path = write_manifest(&scene_dir, &manifest, &record)?;
    Ok(SyntheticScene {
        record,
        primitives,
        manifest_path,
    })
}

/// Generates `count` scenes named `synthNNNN_00`, seeded `seed + k`.
pub fn generate_corpus(
    seed: u64,
    count: usize,
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<Vec<SyntheticScene>, CorpusError> {
    (0..count)
        .map(|k| {
            let spec = SyntheticSpec {
                scene_id: format!("synth{k:04}_00"),
                ..spec.clone()
            };
            generate_synthetic_scene(seed + k as u64, &spec, out_dir)
        })
        .collect()
}
