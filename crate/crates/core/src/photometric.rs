//! Left/right stereo extrinsic calibration from photometric consistency of
//! LiDAR-anchored keypoints.
//!
//! Keypoints are picked in the left image on projected LiDAR faces and
//! anchored with barycentric weights, so their 3D position comes from the
//! mesh. Each keypoint pattern is transferred into the right image through
//! the stereo transform and compared under an affine brightness model.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, RowVector4, RowVector6, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geometry::{skew, RigidTransform};
use crate::image::GrayImage;
use crate::lidar_stereo::{CalibrationEstimate, SolverDiagnostics};
use crate::lm::{self, huber_cost, LmProblem, LmSettings, LmStatus, NormalEquations};
use crate::mesh_recon::{CameraIntrinsics, TriangleMesh};

/// Eight-pixel residual pattern: the center plus seven offsets in a 5×5 window.
pub const PATTERN: [(i32, i32); 8] = [(0, -2), (-1, -1), (1, -1), (-2, 0), (0, 0), (2, 0), (-1, 1), (0, 2)];

/// Smallest depth at which a point may be projected.
pub const MIN_DEPTH: f64 = 0.1;

/// Fewest keypoints a batch needs in its best frame.
pub const MIN_KEYPOINTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarycentricAnchor {
    pub face_index: usize,
    pub weights: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub pixel: Vector2<f64>,
    pub anchor: BarycentricAnchor,
    /// Left-image gradient magnitude at the pixel.
    pub gradient: f64,
}

impl Keypoint {
    pub fn pattern(&self) -> [Vector2<f64>; 8] {
        PATTERN.map(|(du, dv)| self.pixel + Vector2::new(du as f64, dv as f64))
    }
}

/// Per-camera log-gain `a` and offset `b`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineBrightness {
    pub a_l: f64,
    pub b_l: f64,
    pub a_r: f64,
    pub b_r: f64,
}

impl AffineBrightness {
    pub const A_MAX: f64 = 1.0;
    pub const B_MAX: f64 = 0.5;

    /// Photometric residual `I_r − b_r − e^{a_r − a_l}(I_l − b_l)`.
    pub fn residual(&self, i_l: f64, i_r: f64) -> f64 {
        i_r - self.b_r - (self.a_r - self.a_l).exp() * (i_l - self.b_l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricOptions {
    /// Gradient magnitude threshold per pixel step.
    pub g_min: f64,
    pub budget: usize,
    pub grid_cells: u32,
    /// `c` of the gradient-dependent weight `c² / (c² + ‖∇I‖²)`.
    pub c_grad: f64,
    pub huber_delta: f64,
    pub levels: usize,
    pub max_iterations: usize,
    pub param_tol: f64,
    /// Pixel margin for keypoints and transferred patterns.
    pub margin: f64,
    /// Keypoints whose rendered depth varies by more than `depth_jump`
    /// (relative) within `depth_window` pixels are dropped.
    pub depth_window: u32,
    pub depth_jump: f64,
}

impl Default for PhotometricOptions {
    fn default() -> Self {
        Self {
            g_min: 8.0 / 255.0,
            budget: 800,
            grid_cells: 32,
            c_grad: 50.0 / 255.0,
            huber_delta: 9.0 / 255.0,
            levels: 5,
            max_iterations: 30,
            param_tol: 1e-7,
            margin: 4.0,
            depth_window: 8,
            depth_jump: 0.15,
        }
    }
}

impl PhotometricOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.g_min > 0.0
            && self.budget >= 1
            && self.grid_cells >= 1
            && self.c_grad > 0.0
            && self.huber_delta > 0.0
            && (1..=6).contains(&self.levels)
            && self.max_iterations > 0
            && self.param_tol > 0.0
            && self.margin >= 2.0
            && self.depth_jump > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CalibError::invalid(format!("invalid photometric options {self:?}")))
        }
    }
}

/// Left/right images with the LiDAR mesh captured at the same time.
#[derive(Clone, Debug)]
pub struct StereoFrame {
    pub left: GrayImage,
    pub right: GrayImage,
    pub mesh: TriangleMesh,
    pub timestamp: f64,
}

/// Barycentric weights of `x` (assumed on the triangle plane) w.r.t. `(a, b, c)`.
pub fn barycentric_weights(x: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> [f64; 3] {
    let v0 = tri[1] - tri[0];
    let v1 = tri[2] - tri[0];
    let v2 = x - tri[0];
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let denom = d00 * d11 - d01 * d01;
    let beta = (d11 * d20 - d01 * d21) / denom;
    let gamma = (d00 * d21 - d01 * d20) / denom;
    [1.0 - beta - gamma, beta, gamma]
}

/// Camera-frame triangle of a face.
fn camera_triangle(mesh: &TriangleMesh, face: usize, t_lc: &RigidTransform) -> [Vector3<f64>; 3] {
    mesh.face_vertices(face).map(|v| t_lc.transform_point(&v))
}

/// Left-camera 3D point of an anchor.
pub fn anchor_point(anchor: &BarycentricAnchor, mesh: &TriangleMesh, t_lc: &RigidTransform) -> Vector3<f64> {
    let tri = camera_triangle(mesh, anchor.face_index, t_lc);
    tri[0] * anchor.weights[0] + tri[1] * anchor.weights[1] + tri[2] * anchor.weights[2]
}

/// Back-projection of a keypoint pixel at the depth of its anchor point.
pub fn keypoint_point(pixel: &Vector2<f64>, anchor_xyz: &Vector3<f64>, k: &CameraIntrinsics) -> Vector3<f64> {
    k.unproject_unit_depth(pixel.x, pixel.y) * anchor_xyz.z
}

fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Selects max-gradient keypoints on the faces visible in the left image.
pub fn anchor_keypoints(
    img_left: &GrayImage,
    mesh: &TriangleMesh,
    t_lc: &RigidTransform,
    k: &CameraIntrinsics,
    budget: usize,
) -> Result<Vec<Keypoint>> {
    let opts = PhotometricOptions {
        budget,
        ..PhotometricOptions::default()
    };
    anchor_keypoints_with(img_left, mesh, t_lc, k, &opts)
}

pub fn anchor_keypoints_with(
    img_left: &GrayImage,
    mesh: &TriangleMesh,
    t_lc: &RigidTransform,
    k: &CameraIntrinsics,
    opts: &PhotometricOptions,
) -> Result<Vec<Keypoint>> {
    opts.validate()?;
    if mesh.is_empty() {
        return Err(CalibError::invalid("mesh has no faces"));
    }
    if img_left.width != k.width || img_left.height != k.height {
        return Err(CalibError::invalid("image size does not match intrinsics"));
    }
    let (w, h) = (k.width as usize, k.height as usize);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut owner = vec![usize::MAX; w * h];
    let margin = opts.margin;
    for face in 0..mesh.len() {
        let tri = camera_triangle(mesh, face, t_lc);
        if tri.iter().any(|v| v.z < MIN_DEPTH) {
            continue;
        }
        let px = tri.map(|v| k.project(&v));
        let area = edge(&px[0], &px[1], &px[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let lo_x = px.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).max(margin).ceil();
        let hi_x = px.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).min(w as f64 - 1.0 - margin).floor();
        let lo_y = px.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).max(margin).ceil();
        let hi_y = px.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).min(h as f64 - 1.0 - margin).floor();
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
        let offset = n.dot(&tri[0]);
        for v in lo_y as usize..=hi_y as usize {
            for u in lo_x as usize..=hi_x as usize {
                let p = Vector2::new(u as f64, v as f64);
                let e = [edge(&px[1], &px[2], &p), edge(&px[2], &px[0], &p), edge(&px[0], &px[1], &p)];
                let inside = if area > 0.0 {
                    e.iter().all(|x| *x >= 0.0)
                } else {
                    e.iter().all(|x| *x <= 0.0)
                };
                if !inside {
                    continue;
                }
                let ray = k.unproject_unit_depth(p.x, p.y);
                let denom = n.dot(&ray);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let z = offset / denom;
                let i = v * w + u;
                if z > MIN_DEPTH && z < depth[i] {
                    depth[i] = z;
                    owner[i] = face;
                }
            }
        }
    }
    let r = opts.depth_window as i64;
    let smooth = |i: usize| {
        let (u, v) = ((i % w) as i64, (i / w) as i64);
        let z = depth[i];
        [(-r, 0), (r, 0), (0, -r), (0, r), (-r, -r), (r, r), (-r, r), (r, -r)]
            .iter()
            .all(|(du, dv)| {
                let (x, y) = (u + du, v + dv);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    return true;
                }
                let zn = depth[y as usize * w + x as usize];
                (zn - z).abs() <= opts.depth_jump * z
            })
    };
    // best pixel per face
    let mut best: Vec<Option<(f64, usize)>> = vec![None; mesh.len()];
    for (i, &face) in owner.iter().enumerate() {
        if face == usize::MAX {
            continue;
        }
        let g = img_left.gradient[i];
        let mag = ((g[0] as f64).powi(2) + (g[1] as f64).powi(2)).sqrt();
        if mag <= opts.g_min {
            continue;
        }
        if r > 0 && best[face].is_none_or(|(m, _)| mag > m) && !smooth(i) {
            continue;
        }
        if best[face].is_none_or(|(m, _)| mag > m) {
            best[face] = Some((mag, i));
        }
    }
    let cells = opts.grid_cells as usize;
    let mut buckets: Vec<Vec<Keypoint>> = vec![Vec::new(); cells * cells];
    for (face, entry) in best.iter().enumerate() {
        let Some((mag, i)) = *entry else { continue };
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        let tri = camera_triangle(mesh, face, t_lc);
        let x = k.unproject_unit_depth(u, v) * depth[i];
        let mut weights = barycentric_weights(&x, &tri);
        if weights.iter().any(|c| *c < -1e-9 || *c > 1.0 + 1e-9) {
            continue;
        }
        for c in weights.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|c| *c /= sum);
        let cx = ((u as usize * cells) / w).min(cells - 1);
        let cy = ((v as usize * cells) / h).min(cells - 1);
        buckets[cy * cells + cx].push(Keypoint {
            pixel: Vector2::new(u, v),
            anchor: BarycentricAnchor {
                face_index: face,
                weights,
            },
            gradient: mag,
        });
    }
    for b in &mut buckets {
        b.sort_by(|a, b| {
            b.gradient
                .total_cmp(&a.gradient)
                .then(a.anchor.face_index.cmp(&b.anchor.face_index))
        });
    }
    let mut out = Vec::new();
    let deepest = buckets.iter().map(Vec::len).max().unwrap_or(0);
    'fill: for round in 0..deepest {
        for b in &buckets {
            if let Some(kp) = b.get(round) {
                out.push(*kp);
                if out.len() == opts.budget {
                    break 'fill;
                }
            }
        }
    }
    if out.is_empty() {
        return Err(CalibError::EmptyKeypoints);
    }
    Ok(out)
}

/// Why a keypoint could not be transferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferFailure {
    BehindCamera,
    OutOfBounds,
}

/// Projects `x` (left-camera frame) into the right image.
pub fn transfer_point(x: &Vector3<f64>, t_rl: &RigidTransform, k: &CameraIntrinsics) -> Result<Vector2<f64>, TransferFailure> {
    let xr = t_rl.transform_point(x);
    if xr.z <= MIN_DEPTH {
        return Err(TransferFailure::BehindCamera);
    }
    Ok(k.project(&xr))
}

/// Right-image position of a keypoint center.
pub fn transfer_keypoint(
    kp: &Keypoint,
    mesh: &TriangleMesh,
    t_lc: &RigidTransform,
    t_rl: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, TransferFailure> {
    let x = keypoint_point(&kp.pixel, &anchor_point(&kp.anchor, mesh, t_lc), k);
    let p = transfer_point(&x, t_rl, k)?;
    if k.contains(&p, 2.0) {
        Ok(p)
    } else {
        Err(TransferFailure::OutOfBounds)
    }
}

/// Keypoint prepared for one pyramid level.
#[derive(Clone, Debug)]
struct LevelPoint {
    x_l: Vector3<f64>,
    /// Left intensity and weight per pattern pixel.
    left: [(f64, f64); 8],
}

#[derive(Clone, Debug)]
struct LevelFrame<'a> {
    right: &'a GrayImage,
    points: Vec<LevelPoint>,
}

fn prepare_level<'a>(
    left: &GrayImage,
    right: &'a GrayImage,
    anchors: &[(Vector2<f64>, Vector3<f64>)],
    level: u32,
    opts: &PhotometricOptions,
) -> LevelFrame<'a> {
    let s = 0.5f64.powi(level as i32);
    let c2 = opts.c_grad * opts.c_grad;
    let points = anchors
        .iter()
        .filter_map(|(p, x)| {
            let pl = (p + Vector2::new(0.5, 0.5)) * s - Vector2::new(0.5, 0.5);
            if !left.in_bounds(&pl, 2.0) {
                return None;
            }
            let left = PATTERN.map(|(du, dv)| {
                let q = pl + Vector2::new(du as f64, dv as f64);
                let (i, _) = left.sample(&q);
                let g = left.sample_gradient(&q);
                (i, c2 / (c2 + g.norm_squared()))
            });
            Some(LevelPoint { x_l: *x, left })
        })
        .collect();
    LevelFrame { right, points }
}

/// Per-row photometric evaluation output.
#[derive(Clone, Debug, Default)]
pub struct EnergyEvaluation {
    pub residuals: Vec<f64>,
    pub weights: Vec<f64>,
    pub jac_pose: Vec<RowVector6<f64>>,
    /// With respect to `(a_l, b_l, a_r, b_r)`.
    pub jac_brightness: Vec<RowVector4<f64>>,
    /// `Σ ω ρ(r)`.
    pub energy: f64,
    pub excluded: usize,
}

/// Residuals of one transferred keypoint. `None` if the transfer fails or
/// the pattern leaves the image when `strict`.
#[allow(clippy::type_complexity)]
fn keypoint_rows(
    pt: &LevelPoint,
    right: &GrayImage,
    k: &CameraIntrinsics,
    t_rl: &RigidTransform,
    ab: &AffineBrightness,
    strict: bool,
) -> Option<[(f64, f64, RowVector6<f64>, RowVector4<f64>); 8]> {
    let rx = t_rl.rotate(&pt.x_l);
    let xr = rx + t_rl.translation();
    if xr.z <= MIN_DEPTH {
        return None;
    }
    let center = k.project(&xr);
    if strict && !right.in_bounds(&center, 2.0) {
        return None;
    }
    let zi = 1.0 / xr.z;
    let dproj = nalgebra::Matrix2x3::new(
        k.fx * zi,
        0.0,
        -k.fx * xr.x * zi * zi,
        0.0,
        k.fy * zi,
        -k.fy * xr.y * zi * zi,
    );
    let mut dx = Matrix3x6::zeros();
    dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
    dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let dpix = dproj * dx;
    let gain = (ab.a_r - ab.a_l).exp();
    let mut out = [(0.0, 0.0, RowVector6::zeros(), RowVector4::zeros()); 8];
    for (j, (du, dv)) in PATTERN.iter().enumerate() {
        let q = center + Vector2::new(*du as f64, *dv as f64);
        let (i_r, g) = right.sample(&q);
        let (i_l, w) = pt.left[j];
        let r = i_r - ab.b_r - gain * (i_l - ab.b_l);
        let jp = g.transpose() * dpix;
        let jb = RowVector4::new(gain * (i_l - ab.b_l), gain, -gain * (i_l - ab.b_l), -1.0);
        out[j] = (r, w, jp, jb);
    }
    Some(out)
}

/// Photometric residuals and Jacobians over a batch at full resolution.
///
/// `frames` holds `(left, right, keypoints)` anchored against `meshes[i]` with `t_lc`.
pub fn photometric_energy(
    frames: &[(GrayImage, GrayImage, Vec<Keypoint>)],
    meshes: &[TriangleMesh],
    t_lc: &RigidTransform,
    t_rl: &RigidTransform,
    k: &CameraIntrinsics,
    ab: &AffineBrightness,
    opts: &PhotometricOptions,
) -> Result<EnergyEvaluation> {
    if frames.len() != meshes.len() {
        return Err(CalibError::invalid("one mesh per frame is required"));
    }
    let mut eval = EnergyEvaluation::default();
    for ((left, right, kps), mesh) in frames.iter().zip(meshes) {
        let anchors: Vec<_> = kps
            .iter()
            .map(|kp| (kp.pixel, keypoint_point(&kp.pixel, &anchor_point(&kp.anchor, mesh, t_lc), k)))
            .collect();
        let level = prepare_level(left, right, &anchors, 0, opts);
        for pt in &level.points {
            match keypoint_rows(pt, right, k, t_rl, ab, true) {
                Some(rows) => {
                    for (r, w, jp, jb) in rows {
                        eval.energy += w * huber_cost(r, Some(opts.huber_delta));
                        eval.residuals.push(r);
                        eval.weights.push(w);
                        eval.jac_pose.push(jp);
                        eval.jac_brightness.push(jb);
                    }
                }
                None => eval.excluded += 1,
            }
        }
        eval.excluded += kps.len() - level.points.len();
    }
    Ok(eval)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct PhotoParam {
    t_rl: RigidTransform,
    a_r: f64,
    b_r: f64,
}

impl PhotoParam {
    fn brightness(&self) -> AffineBrightness {
        AffineBrightness {
            a_l: 0.0,
            b_l: 0.0,
            a_r: self.a_r,
            b_r: self.b_r,
        }
    }
}

struct PhotoProblem<'a> {
    frames: Vec<LevelFrame<'a>>,
    k: CameraIntrinsics,
    delta: f64,
    /// Parameters held fixed at this level.
    fixed: &'static [usize],
    used: usize,
    excluded: usize,
}

impl PhotoProblem<'_> {
    fn evaluate(&self, frozen: &[Vec<usize>], x: &PhotoParam, with_jacobian: bool) -> NormalEquations<8> {
        let mut ne = NormalEquations::<8>::default();
        let ab = x.brightness();
        for (frame, active) in self.frames.iter().zip(frozen) {
            for &i in active {
                let Some(rows) = keypoint_rows(&frame.points[i], frame.right, &self.k, &x.t_rl, &ab, false) else {
                    // behind the camera: count as saturated residuals
                    for (_, w) in frame.points[i].left {
                        ne.add_cost(1.0, w.sqrt(), Some(self.delta));
                    }
                    continue;
                };
                for (r, w, jp, jb) in rows {
                    if with_jacobian {
                        let j = SVector::<f64, 8>::from_column_slice(&[jp[0], jp[1], jp[2], jp[3], jp[4], jp[5], jb[2], jb[3]]);
                        ne.add(r, &j, w.sqrt(), Some(self.delta));
                    } else {
                        ne.add_cost(r, w.sqrt(), Some(self.delta));
                    }
                }
            }
        }
        ne
    }
}

impl LmProblem<8> for PhotoProblem<'_> {
    type Param = PhotoParam;
    type Frozen = Vec<Vec<usize>>;

    fn linearize(&mut self, x: &PhotoParam) -> Result<(Self::Frozen, NormalEquations<8>)> {
        let ab = x.brightness();
        let mut frozen = Vec::with_capacity(self.frames.len());
        let mut used = 0;
        let mut total = 0;
        for frame in &self.frames {
            let active: Vec<usize> = (0..frame.points.len())
                .filter(|&i| keypoint_rows(&frame.points[i], frame.right, &self.k, &x.t_rl, &ab, true).is_some())
                .collect();
            used += active.len();
            total += frame.points.len();
            frozen.push(active);
        }
        self.used = used;
        self.excluded = total - used;
        if used == 0 {
            return Err(CalibError::InsufficientTexture {
                found: 0,
                required: MIN_KEYPOINTS,
            });
        }
        let mut ne = self.evaluate(&frozen, x, true);
        {
            for &i in self.fixed {
                ne.hessian.row_mut(i).fill(0.0);
                ne.hessian.column_mut(i).fill(0.0);
                ne.hessian[(i, i)] = 1.0;
                ne.gradient[i] = 0.0;
            }
        }
        Ok((frozen, ne))
    }

    fn cost(&self, frozen: &Self::Frozen, x: &PhotoParam) -> Result<f64> {
        Ok(self.evaluate(frozen, x, false).cost)
    }

    fn retract(&self, x: &PhotoParam, d: &SVector<f64, 8>) -> PhotoParam {
        let pose = SVector::<f64, 6>::from_column_slice(&d.as_slice()[..6]);
        PhotoParam {
            t_rl: x.t_rl.retract(&pose),
            a_r: (x.a_r + d[6]).clamp(-AffineBrightness::A_MAX, AffineBrightness::A_MAX),
            b_r: (x.b_r + d[7]).clamp(-AffineBrightness::B_MAX, AffineBrightness::B_MAX),
        }
    }
}

/// Result of [`calibrate_stereo_pair`].
#[derive(Clone, Debug)]
pub struct StereoCalibration {
    /// Estimate of the left-to-right transform.
    pub estimate: CalibrationEstimate,
    pub brightness: AffineBrightness,
    pub keypoints: usize,
    pub excluded: usize,
}

/// Brightness `(a_r, b_r)` matching the intensity mean and spread of the
/// right images to the left ones.
fn moment_brightness(frames: &[StereoFrame]) -> (f64, f64) {
    let stats = |imgs: &mut dyn Iterator<Item = &GrayImage>| {
        let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
        for img in imgs {
            for v in &img.intensity {
                let v = *v as f64;
                n += 1.0;
                s += v;
                s2 += v * v;
            }
        }
        let mean = s / n;
        (mean, (s2 / n - mean * mean).max(0.0).sqrt())
    };
    let (ml, sl) = stats(&mut frames.iter().map(|f| &f.left));
    let (mr, sr) = stats(&mut frames.iter().map(|f| &f.right));
    if sl <= 1e-9 || sr <= 1e-9 {
        return (0.0, mr - ml);
    }
    let a = (sr / sl).ln().clamp(-AffineBrightness::A_MAX, AffineBrightness::A_MAX);
    let b = (mr - a.exp() * ml).clamp(-AffineBrightness::B_MAX, AffineBrightness::B_MAX);
    (a, b)
}

/// Estimates the left-to-right transform and right-camera brightness.
pub fn calibrate_stereo_pair(
    frames: &[StereoFrame],
    t_lc: &RigidTransform,
    init_t_rl: &RigidTransform,
    k: &CameraIntrinsics,
    opts: &PhotometricOptions,
) -> Result<StereoCalibration> {
    opts.validate()?;
    k.validate()?;
    if frames.is_empty() {
        return Err(CalibError::invalid("at least one frame is required"));
    }
    let mut anchors = Vec::with_capacity(frames.len());
    let mut best_count = 0;
    let mut total = 0;
    for f in frames {
        let kps = match anchor_keypoints_with(&f.left, &f.mesh, t_lc, k, opts) {
            Ok(kps) => kps,
            Err(CalibError::EmptyKeypoints) => Vec::new(),
            Err(e) => return Err(e),
        };
        best_count = best_count.max(kps.len());
        total += kps.len();
        anchors.push(
            kps.iter()
                .map(|kp| (kp.pixel, keypoint_point(&kp.pixel, &anchor_point(&kp.anchor, &f.mesh, t_lc), k)))
                .collect::<Vec<_>>(),
        );
    }
    if best_count < MIN_KEYPOINTS {
        return Err(CalibError::InsufficientTexture {
            found: best_count,
            required: MIN_KEYPOINTS,
        });
    }
    let mut pyramids = Vec::with_capacity(frames.len());
    for f in frames {
        pyramids.push((f.left.pyramid(opts.levels)?, f.right.pyramid(opts.levels)?));
    }
    let settings = LmSettings {
        max_iterations: opts.max_iterations,
        param_tol: opts.param_tol,
        ..LmSettings::default()
    };
    let (a_r, b_r) = moment_brightness(frames);
    let mut x = PhotoParam {
        t_rl: *init_t_rl,
        a_r,
        b_r,
    };
    let mut iterations = 0;
    let mut last = None;
    for level in (0..opts.levels).rev() {
        let kl = k.scaled(level as u32);
        let level_frames: Vec<LevelFrame> = pyramids
            .iter()
            .zip(&anchors)
            .map(|((l, r), a)| prepare_level(&l[level], &r[level], a, level as u32, opts))
            .collect();
        let mut problem = PhotoProblem {
            frames: level_frames,
            k: kl,
            delta: opts.huber_delta,
            // rotation only at the coarsest levels, brightness only at the finest
            fixed: match level {
                0 => &[],
                1 | 2 => &[6, 7],
                _ => &[3, 4, 5, 6, 7],
            },
            used: 0,
            excluded: 0,
        };
        let out = match lm::solve(&mut problem, x, &settings) {
            Ok(out) => out,
            // too little support at a coarse level; refine at the next one
            Err(_) if level > 0 => continue,
            Err(e) => return Err(e),
        };
        x = out.x;
        iterations += out.iterations;
        last = Some((out, problem.used, problem.excluded));
    }
    let (out, used, excluded) = last.expect("finest level always runs");
    let rows = out.last.rows.max(9);
    let sigma2 = 2.0 * out.cost / (rows - 8) as f64;
    let covariance = pose_covariance(&out.last.hessian, sigma2);
    let estimate = CalibrationEstimate {
        transform: x.t_rl,
        covariance,
        final_cost: out.cost,
        iterations,
        converged: out.converged(),
        diagnostics: SolverDiagnostics {
            correspondences: used,
            skipped: excluded,
            rejected_steps: 0,
            cost_history: out.cost_history.clone(),
            unbounded: None,
        },
    };
    if let LmStatus::Stalled { rejections } = out.status {
        return Err(CalibError::Stalled {
            rejections,
            partial: Box::new(estimate),
        });
    }
    Ok(StereoCalibration {
        estimate,
        brightness: x.brightness(),
        keypoints: total,
        excluded,
    })
}

/// Pose block of `σ² H⁻¹` (brightness marginalized).
fn pose_covariance(h: &nalgebra::SMatrix<f64, 8, 8>, sigma2: f64) -> Matrix6<f64> {
    match h.try_inverse() {
        Some(inv) => {
            let c = inv.fixed_view::<6, 6>(0, 0).into_owned() * sigma2;
            (c + c.transpose()) * 0.5
        }
        None => Matrix6::zeros(),
    }
}

/// Jacobians of the homogeneous right-image pixel `(1/d) K (R X + t)` with
/// `X = d K⁻¹ p_l`, under the equal-depth assumption.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensitivityReport {
    pub j_pose: Matrix3x6<f64>,
    pub j_depth: Vector3<f64>,
    /// `‖J_d · d‖ / ‖J_T‖` (Frobenius norms).
    pub depth_to_pose_ratio: f64,
}

pub fn sensitivity_jacobians(k: &CameraIntrinsics, t_rl: &RigidTransform, p_l: &Vector2<f64>, d: f64) -> Result<SensitivityReport> {
    if !(d > 0.0) {
        return Err(CalibError::invalid("depth must be positive"));
    }
    let km = k.k_matrix();
    let x = k.unproject_unit_depth(p_l.x, p_l.y) * d;
    let rx = t_rl.rotate(&x);
    let mut block = Matrix3x6::zeros();
    block.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
    block.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let j_pose = km * block / d;
    let j_depth = -(km * t_rl.translation()) / (d * d);
    Ok(SensitivityReport {
        j_pose,
        j_depth,
        depth_to_pose_ratio: (j_depth * d).norm() / j_pose.norm(),
    })
}
