//! Ground-truth scene generation and sensor simulation.
//!
//! Scenes are sets of textured rectangles in a world frame that coincides
//! with the LiDAR frame at the identity ego pose (x forward, y left, z up).
//! The camera frame is x right, y down, z forward. Everything is ray cast, so
//! a frame is a pure function of the scene, the ego pose and the seed.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{CalibError, Result};
use crate::geometry::{so3_exp, tangent_basis, RigidTransform};
use crate::image::GrayImage;
use crate::mesh_recon::{CameraIntrinsics, DisparityImage, OrganizedScan};
use crate::uncertainty::NoiseModel;

/// Procedural texture: a smooth checker plus three octaves of value noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub base: f64,
    pub checker_amp: f64,
    pub checker_period: f64,
    pub noise_amp: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Texture {
    pub fn sample(&self, s: f64, t: f64) -> f64 {
        let w = 2.0 * PI / self.checker_period;
        let checker = (3.0 * (w * s).sin() * (w * t).sin()).tanh();
        let n1 = value_noise(s / self.noise_scale, t / self.noise_scale, self.seed);
        let n2 = value_noise(2.0 * s / self.noise_scale, 2.0 * t / self.noise_scale, self.seed ^ 0x9e37);
        let n0 = value_noise(0.25 * s / self.noise_scale, 0.25 * t / self.noise_scale, self.seed ^ 0x51ed);
        let noise = (2.0 * n0 - 1.0) * 0.6 + (2.0 * n1 - 1.0) * 0.5 + (2.0 * n2 - 1.0) * 0.25;
        (self.base + self.checker_amp * checker + self.noise_amp * noise).clamp(0.02, 0.98)
    }
}

fn lattice(i: i64, j: i64, seed: u64) -> f64 {
    let mut h = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((i as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((j as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
    h ^= h >> 31;
    h = h.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (xi, yi) = (x.floor(), y.floor());
    let (fx, fy) = (x - xi, y - yi);
    let smooth = |f: f64| f * f * (3.0 - 2.0 * f);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let (i, j) = (xi as i64, yi as i64);
    let a = lattice(i, j, seed);
    let b = lattice(i + 1, j, seed);
    let c = lattice(i, j + 1, seed);
    let d = lattice(i + 1, j + 1, seed);
    let top = a + sx * (b - a);
    let bottom = c + sx * (d - c);
    top + sy * (bottom - top)
}

/// Textured rectangle `center + s·u + t·v`, `|s| ≤ half_u`, `|t| ≤ half_v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub center: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: Texture,
}

impl Rect {
    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v)
    }

    /// Ray parameter and local coordinates of the hit, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.center - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let rel = origin + dir * t - self.center;
        let (s, r) = (rel.dot(&self.u), rel.dot(&self.v));
        (s.abs() <= self.half_u && r.abs() <= self.half_v).then_some((t, s, r))
    }

    /// Distance from `p` to the rectangle's plane.
    pub fn plane_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal().dot(&(p - self.center)).abs()
    }
}

/// Scene primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Plane(Rect),
    /// Axis-aligned box resting at `center` with full `size`.
    Box {
        center: Vector3<f64>,
        size: Vector3<f64>,
        texture: Texture,
    },
}

impl Primitive {
    fn rects(&self) -> Vec<Rect> {
        match self {
            Primitive::Plane(r) => vec![*r],
            Primitive::Box { center, size, texture } => {
                let h = size / 2.0;
                let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
                let face = |n: Vector3<f64>, u: Vector3<f64>, hu: f64, hv: f64, off: f64, k: u64| Rect {
                    center: center + n * off,
                    u,
                    v: n.cross(&u),
                    half_u: hu,
                    half_v: hv,
                    texture: Texture {
                        seed: texture.seed.wrapping_add(k),
                        ..*texture
                    },
                };
                vec![
                    face(x, y, h.y, h.z, h.x, 1),
                    face(-x, y, h.y, h.z, h.x, 2),
                    face(y, z, h.z, h.x, h.y, 3),
                    face(-y, z, h.z, h.x, h.y, 4),
                    face(z, x, h.x, h.y, h.z, 5),
                    face(-z, x, h.x, h.y, h.z, 6),
                ]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPattern {
    pub rows: u32,
    pub vfov_deg: f64,
    /// Elevation of the middle of the vertical field of view.
    pub vcenter_deg: f64,
    pub cols: u32,
    pub hfov_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self {
            rows: 64,
            vfov_deg: 26.9,
            vcenter_deg: -11.45,
            cols: 360,
            hfov_deg: 120.0,
            min_range: 0.5,
            max_range: 120.0,
        }
    }
}

impl LidarPattern {
    /// Unit beam directions, row-major (top row first, leftmost column first).
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity((self.rows * self.cols) as usize);
        for r in 0..self.rows {
            let el = (self.vcenter_deg + self.vfov_deg * (0.5 - (r as f64 + 0.5) / self.rows as f64)).to_radians();
            for c in 0..self.cols {
                let az = (self.hfov_deg * (0.5 - (c as f64 + 0.5) / self.cols as f64)).to_radians();
                out.push(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        out
    }
}

/// Planar ego motion sampled at a fixed interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    pub step: f64,
    pub lateral_amp: f64,
    pub yaw_amp_deg: f64,
    pub interval: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            step: 0.4,
            lateral_amp: 0.3,
            yaw_amp_deg: 1.0,
            interval: 0.5,
        }
    }
}

impl Trajectory {
    /// World-from-LiDAR pose of frame `i`.
    pub fn pose(&self, i: usize) -> RigidTransform {
        let f = i as f64;
        let yaw = self.yaw_amp_deg.to_radians() * (0.3 * f).sin();
        let t = Vector3::new(self.step * f, self.lateral_amp * (0.5 * f).sin(), 0.0);
        RigidTransform::from_approx(so3_exp(&Vector3::new(0.0, 0.0, yaw)), t)
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        self.interval * i as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub lidar_pattern: LidarPattern,
    pub camera: CameraIntrinsics,
    pub true_t_lc: RigidTransform,
    pub true_t_rl: RigidTransform,
    /// Noise injected when rendering.
    pub noise: NoiseModel,
    pub image_noise_sigma: f64,
    /// Right-camera gain exponent and offset: `I_r = e^a I + b`.
    pub right_exposure: (f64, f64),
    pub trajectory: Trajectory,
    /// Round scans to f32, images to 8 bit and disparity to 1/256 px so
    /// rendered frames equal their persisted form.
    pub storage_precision: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(CalibError::invalid("scene needs at least one primitive"));
        }
        let p = &self.lidar_pattern;
        let fov_ok = |f: f64| f > 0.0 && f < 180.0;
        if !fov_ok(p.vfov_deg) || !fov_ok(p.hfov_deg) || p.rows < 2 || p.cols < 2 {
            return Err(CalibError::invalid("invalid LiDAR pattern"));
        }
        self.camera.validate()?;
        self.noise.validate()?;
        if !(self.image_noise_sigma >= 0.0) {
            return Err(CalibError::invalid("image noise must be >= 0"));
        }
        Ok(())
    }

    fn rects(&self) -> Vec<Rect> {
        self.primitives.iter().flat_map(Primitive::rects).collect()
    }

    /// Same scene with all render noise removed.
    pub fn noiseless(&self) -> Self {
        Self {
            noise: NoiseModel {
                sigma_range: 0.0,
                sigma_beam: 0.0,
                sigma_disparity: 0.0,
            },
            image_noise_sigma: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFrame {
    pub timestamp: f64,
    pub scan: OrganizedScan,
    pub img_left: GrayImage,
    pub img_right: GrayImage,
    /// Measured disparity: noisy and quantized.
    pub disparity: DisparityImage,
    /// Exact `fx·baseline/Z` of the rendered depth.
    pub true_disparity: DisparityImage,
    /// World-from-LiDAR pose.
    pub ego_pose: RigidTransform,
}

struct Caster {
    rects: Vec<Rect>,
}

impl Caster {
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for r in &self.rects {
            if let Some((t, s, v)) = r.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, r.texture.sample(s, v)));
                }
            }
        }
        best
    }
}

fn quantize_u8(v: f64) -> f32 {
    // same arithmetic as decoding an 8-bit image
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// Renders one frame at `ego_pose` (world from LiDAR).
pub fn render_frame(spec: &SceneSpec, ego_pose: &RigidTransform, rng_seed: u64) -> Result<SyntheticFrame> {
    render_frame_at(spec, ego_pose, 0.0, rng_seed)
}

fn render_frame_at(spec: &SceneSpec, ego_pose: &RigidTransform, timestamp: f64, rng_seed: u64) -> Result<SyntheticFrame> {
    spec.validate()?;
    let caster = Caster { rects: spec.rects() };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // LiDAR
    let pat = &spec.lidar_pattern;
    let dirs = pat.directions();
    let origin = *ego_pose.translation();
    let mut ranges = Vec::with_capacity(dirs.len());
    let mut stored_dirs = Vec::with_capacity(dirs.len());
    for w in &dirs {
        let beam: f64 = unit.sample(&mut rng);
        let beam2: f64 = unit.sample(&mut rng);
        let range_noise: f64 = unit.sample(&mut rng);
        let tilt = tangent_basis(w)? * Vector2::new(beam, beam2) * spec.noise.sigma_beam;
        let actual = so3_exp(&tilt) * w;
        let hit = caster.cast(&origin, &ego_pose.rotate(&actual));
        let mut range = match hit {
            Some((t, _)) => t + range_noise * spec.noise.sigma_range,
            None => 0.0,
        };
        if range < pat.min_range || range > pat.max_range {
            range = 0.0;
        }
        if spec.storage_precision {
            ranges.push(range as f32 as f64);
            stored_dirs.push(w.map(|c| c as f32 as f64));
        } else {
            ranges.push(range);
            stored_dirs.push(*w);
        }
    }
    let scan = OrganizedScan::new(pat.rows, pat.cols, ranges, stored_dirs)?;

    // cameras
    let k = &spec.camera;
    let world_from_left = ego_pose.compose(&spec.true_t_lc.inverse());
    let world_from_right = world_from_left.compose(&spec.true_t_rl.inverse());
    let (w, h) = (k.width as usize, k.height as usize);
    let (gain, offset) = (spec.right_exposure.0.exp(), spec.right_exposure.1);
    let render = |pose: &RigidTransform, rng: &mut ChaCha8Rng, right: bool| -> (Vec<f32>, Vec<f64>) {
        let mut img = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        let o = *pose.translation();
        for v in 0..h {
            for u in 0..w {
                let ray = k.unproject_unit_depth(u as f64, v as f64);
                let hit = caster.cast(&o, &pose.rotate(&ray));
                let mut value = hit.map_or(0.5, |(_, i)| i);
                if right {
                    value = gain * value + offset;
                }
                let n: f64 = StandardNormal.sample(rng);
                value += n * spec.image_noise_sigma;
                img.push(if spec.storage_precision {
                    quantize_u8(value)
                } else {
                    value.clamp(0.0, 1.0) as f32
                });
                depth.push(hit.map_or(0.0, |(t, _)| t));
            }
        }
        (img, depth)
    };
    let (left, depth) = render(&world_from_left, &mut rng, false);
    let (right, _) = render(&world_from_right, &mut rng, true);
    if depth.iter().all(|z| *z == 0.0) && scan.valid_count() == 0 {
        return Err(CalibError::EmptyFrame);
    }
    let fb = k.fx * k.baseline;
    let mut true_disp = Vec::with_capacity(w * h);
    let mut meas = Vec::with_capacity(w * h);
    for z in &depth {
        let n: f64 = unit.sample(&mut rng);
        if *z <= 0.0 {
            true_disp.push(0.0);
            meas.push(0.0);
            continue;
        }
        let d = fb / z;
        let mut m = d + n * spec.noise.sigma_disparity;
        if spec.storage_precision {
            m = (m * 256.0).round() / 256.0;
        }
        if !(m > 0.0 && m < k.width as f64) || m * 256.0 > u16::MAX as f64 {
            m = 0.0;
        }
        true_disp.push(if d < k.width as f64 { d } else { 0.0 });
        meas.push(m);
    }
    Ok(SyntheticFrame {
        timestamp,
        scan,
        img_left: GrayImage::new(k.width, k.height, left)?,
        img_right: GrayImage::new(k.width, k.height, right)?,
        disparity: DisparityImage::new(k.width, k.height, meas)?,
        true_disparity: DisparityImage::new(k.width, k.height, true_disp)?,
        ego_pose: *ego_pose,
    })
}

/// Renders `frames` consecutive frames along the scene trajectory.
pub fn render_sequence(spec: &SceneSpec, frames: usize, seed: u64) -> Result<Vec<SyntheticFrame>> {
    (0..frames)
        .map(|i| {
            let frame_seed = seed.wrapping_mul(0x0000_0100_0000_01B3).wrapping_add(i as u64);
            render_frame_at(spec, &spec.trajectory.pose(i), spec.trajectory.timestamp(i), frame_seed)
        })
        .collect()
}

/// Mean-error scale of the folded normal: `σ = mean·√(π/2)`.
pub fn folded_normal_sigma(mean: f64) -> f64 {
    mean * (PI / 2.0).sqrt()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Random rotation/translation offset whose magnitudes follow folded normals
/// with the given means, composed onto `t` on the left.
pub fn perturb_transform(t: &RigidTransform, rot_mean_err_deg: f64, trans_mean_err: f64, rng_seed: u64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let delta = perturbation(&mut rng, rot_mean_err_deg, trans_mean_err);
    if delta == Vector6::zeros() {
        return *t;
    }
    t.retract(&delta)
}

fn perturbation(rng: &mut ChaCha8Rng, rot_mean_err_deg: f64, trans_mean_err: f64) -> Vector6<f64> {
    let axis = random_unit(rng);
    let angle = (rng.sample::<f64, _>(StandardNormal) * folded_normal_sigma(rot_mean_err_deg.to_radians())).abs();
    let dir = random_unit(rng);
    let mag = (rng.sample::<f64, _>(StandardNormal) * folded_normal_sigma(trans_mean_err)).abs();
    let r = axis * angle;
    let t = dir * mag;
    Vector6::new(r.x, r.y, r.z, t.x, t.y, t.z)
}

fn tex(base: f64, checker_amp: f64, checker_period: f64, noise_amp: f64, noise_scale: f64, seed: u64) -> Texture {
    Texture {
        base,
        checker_amp,
        checker_period,
        noise_amp,
        noise_scale,
        seed,
    }
}

fn plane(center: [f64; 3], u: [f64; 3], v: [f64; 3], half_u: f64, half_v: f64, texture: Texture) -> Primitive {
    Primitive::Plane(Rect {
        center: Vector3::from(center),
        u: Vector3::from(u),
        v: Vector3::from(v),
        half_u,
        half_v,
        texture,
    })
}

pub const GROUND_Z: f64 = -1.73;

/// Camera intrinsics of every standard scene.
pub fn standard_camera() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 720.0,
        fy: 720.0,
        cx: 320.0,
        cy: 240.0,
        baseline: 0.54,
        width: 640,
        height: 480,
    }
}

/// LiDAR-to-left-camera transform of every standard scene.
pub fn standard_t_lc() -> RigidTransform {
    let axes = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let offset = so3_exp(&Vector3::new(0.8f64.to_radians(), -0.5f64.to_radians(), 0.6f64.to_radians()));
    RigidTransform::from_approx(offset * axes, Vector3::new(0.02, -0.08, -0.27))
}

pub fn standard_t_rl() -> RigidTransform {
    RigidTransform::from_translation(Vector3::new(-0.54, 0.0, 0.0))
}

fn base_scene(name: &str, primitives: Vec<Primitive>) -> SceneSpec {
    SceneSpec {
        name: name.to_string(),
        primitives,
        lidar_pattern: LidarPattern::default(),
        camera: standard_camera(),
        true_t_lc: standard_t_lc(),
        true_t_rl: standard_t_rl(),
        noise: NoiseModel::default(),
        image_noise_sigma: 0.01,
        right_exposure: (0.05, 0.02),
        trajectory: Trajectory::default(),
        storage_precision: true,
    }
}

fn ground(seed: u64, center_x: f64, half_x: f64, half_y: f64) -> Primitive {
    plane(
        [center_x, 0.0, GROUND_Z],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        half_x,
        half_y,
        tex(0.45, 0.12, 1.6, 0.12, 0.7, seed),
    )
}

fn urban() -> SceneSpec {
    let wall_h = 4.0;
    let zc = GROUND_Z + wall_h;
    base_scene(
        "urban",
        vec![
            ground(11, 30.0, 60.0, 30.0),
            // front wall facing the sensor
            plane([26.0, -0.25, zc], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 5.25, wall_h, tex(0.5, 0.25, 1.2, 0.12, 0.5, 12)),
            plane([10.5, 5.0, zc], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 15.5, wall_h, tex(0.55, 0.22, 1.0, 0.12, 0.4, 13)),
            plane([10.5, -5.5, zc], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 15.5, wall_h, tex(0.45, 0.22, 1.4, 0.12, 0.6, 14)),
            Primitive::Box {
                center: Vector3::new(16.0, 2.5, GROUND_Z + 0.75),
                size: Vector3::new(1.6, 1.6, 1.5),
                texture: tex(0.5, 0.25, 0.6, 0.1, 0.3, 15),
            },
            Primitive::Box {
                center: Vector3::new(19.0, -3.0, GROUND_Z + 1.0),
                size: Vector3::new(2.0, 1.5, 2.0),
                texture: tex(0.5, 0.25, 0.7, 0.1, 0.3, 16),
            },
        ],
    )
}

fn highway() -> SceneSpec {
    let barrier_h = 0.4;
    let zc = GROUND_Z + barrier_h;
    base_scene(
        "highway",
        vec![
            ground(21, 60.0, 100.0, 40.0),
            plane([55.0, 8.0, zc], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 65.0, barrier_h, tex(0.5, 0.04, 3.0, 0.05, 1.5, 22)),
            plane([55.0, -8.0, zc], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 65.0, barrier_h, tex(0.5, 0.04, 3.0, 0.05, 1.5, 23)),
        ],
    )
}

fn corner() -> SceneSpec {
    base_scene(
        "corner",
        vec![
            plane([14.0, -3.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 7.0, 6.0, tex(0.5, 0.25, 1.0, 0.1, 0.5, 31)),
            plane([4.0, 4.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 10.0, 6.0, tex(0.5, 0.25, 1.2, 0.1, 0.5, 32)),
        ],
    )
}

fn wall() -> SceneSpec {
    let mut spec = base_scene(
        "wall",
        vec![plane([20.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 25.0, 15.0, tex(0.5, 0.25, 1.0, 0.1, 0.5, 41))],
    );
    // exact planar mesh so the degenerate directions are exactly null
    spec.noise.sigma_range = 0.0;
    spec.noise.sigma_beam = 0.0;
    spec.trajectory.step = 0.2;
    // no yaw, so every frame sees the same plane normal
    spec.trajectory.yaw_amp_deg = 0.0;
    spec
}

pub const SCENE_NAMES: [&str; 4] = ["urban", "highway", "corner", "wall"];

pub fn standard_scene(name: &str) -> Result<SceneSpec> {
    match name {
        "urban" => Ok(urban()),
        "highway" => Ok(highway()),
        "corner" => Ok(corner()),
        "wall" => Ok(wall()),
        other => Err(CalibError::invalid(format!(
            "unknown scene '{other}' (expected one of {})",
            SCENE_NAMES.join(", ")
        ))),
    }
}

pub fn standard_scenes() -> Vec<SceneSpec> {
    SCENE_NAMES.iter().map(|n| standard_scene(n).expect("built-in scene")).collect()
}

/// Distance from `p` (world frame) to the nearest primitive surface.
pub fn distance_to_scene(spec: &SceneSpec, p: &Vector3<f64>) -> f64 {
    spec.rects()
        .iter()
        .map(|r| {
            let rel = p - r.center;
            let s = rel.dot(&r.u).clamp(-r.half_u, r.half_u);
            let t = rel.dot(&r.v).clamp(-r.half_v, r.half_v);
            (rel - r.u * s - r.v * t).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_recon::disparity_to_points;

    fn tiny(spec: &mut SceneSpec) {
        spec.camera = CameraIntrinsics {
            fx: 180.0,
            fy: 180.0,
            cx: 80.0,
            cy: 60.0,
            baseline: 0.54,
            width: 160,
            height: 120,
        };
        spec.lidar_pattern.cols = 90;
    }

    #[test]
    fn fronto_parallel_wall_ranges() {
        let mut spec = base_scene(
            "w",
            vec![plane([10.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 100.0, 100.0, tex(0.5, 0.2, 1.0, 0.1, 0.5, 1))],
        );
        tiny(&mut spec);
        spec = spec.noiseless();
        spec.storage_precision = false;
        let f = render_frame(&spec, &RigidTransform::identity(), 1).unwrap();
        let dirs = spec.lidar_pattern.directions();
        for (r, d) in f.scan.ranges.iter().zip(&dirs) {
            assert!((r - 10.0 / d.x).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_disparity_lies_on_primitives() {
        let mut spec = urban().noiseless();
        tiny(&mut spec);
        let pose = spec.trajectory.pose(3);
        let f = render_frame(&spec, &pose, 2).unwrap();
        let cloud = disparity_to_points(&f.true_disparity, &spec.camera, 2).unwrap();
        assert!(cloud.len() > 100);
        let world_from_cam = pose.compose(&spec.true_t_lc.inverse());
        for p in &cloud.points {
            let w = world_from_cam.transform_point(p);
            assert!(distance_to_scene(&spec, &w) < 1e-4);
        }
        // true disparity matches rendered depth
        let fb = spec.camera.fx * spec.camera.baseline;
        for (p, d) in cloud.points.iter().zip(&cloud.source_disparity) {
            assert!((fb / d - p.z).abs() < 1e-6 * p.z);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut spec = urban();
        tiny(&mut spec);
        let a = render_frame(&spec, &spec.trajectory.pose(1), 9).unwrap();
        let b = render_frame(&spec, &spec.trajectory.pose(1), 9).unwrap();
        assert_eq!(a, b);
        let c = render_frame(&spec, &spec.trajectory.pose(1), 10).unwrap();
        assert_ne!(a.disparity, c.disparity);
    }

    #[test]
    fn perturbation_mean_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let (mut rot, mut trans) = (0.0, 0.0);
        for _ in 0..n {
            let d = perturbation(&mut rng, 3.0, 0.3);
            rot += Vector3::new(d[0], d[1], d[2]).norm().to_degrees();
            trans += Vector3::new(d[3], d[4], d[5]).norm();
        }
        assert!((rot / n as f64 - 3.0).abs() < 0.03);
        assert!((trans / n as f64 - 0.3).abs() < 0.003);
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let t = standard_t_lc();
        assert_eq!(perturb_transform(&t, 0.0, 0.0, 5), t);
        assert_eq!(perturb_transform(&t, 3.0, 0.3, 5), perturb_transform(&t, 3.0, 0.3, 5));
    }

    #[test]
    fn empty_scene_errors() {
        let mut spec = base_scene(
            "far",
            vec![plane([-50.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 1.0, 1.0, tex(0.5, 0.2, 1.0, 0.1, 0.5, 1))],
        );
        tiny(&mut spec);
        spec.lidar_pattern.hfov_deg = 60.0;
        assert!(matches!(
            render_frame(&spec, &RigidTransform::identity(), 1),
            Err(CalibError::EmptyFrame)
        ));
    }

    #[test]
    fn standard_scene_names() {
        assert_eq!(standard_scenes().len(), 4);
        assert!(standard_scene("moon").is_err());
        for s in standard_scenes() {
            s.validate().unwrap();
        }
    }
}
