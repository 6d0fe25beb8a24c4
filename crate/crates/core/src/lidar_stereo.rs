//! Two-stage LiDAR-to-stereo extrinsic estimation.
//!
//! The estimated transform maps LiDAR coordinates into the left-camera frame
//! and every residual is evaluated in the camera frame. The coarse stage
//! matches surfels to faces with normal-augmented association and adds
//! normal-alignment rows; the fine stage uses nearest-centroid association
//! and point-to-plane rows only.

use nalgebra::{Matrix3, Matrix6, RowVector6, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::association::{Correspondence, FaceIndex};
use crate::error::{CalibError, Result};
use crate::geometry::{skew, RigidTransform};
use crate::lm::{self, LmProblem, LmSettings, LmStatus, NormalEquations};
use crate::mesh_recon::{
    disparity_to_points_in, estimate_point_normals, reconstruct_mesh_with, CameraIntrinsics, DepthWindow,
    DisparityImage, MeshConfig, OrganizedScan, SurfelCloud, TriangleMesh,
};
use crate::uncertainty::{self, linearize_residual, point_to_plane, CovarianceReport, NoiseModel};

/// Variance placed on the diagonal of coarse-stage covariances.
pub const COARSE_PLACEHOLDER_VARIANCE: f64 = 1e-2;

/// Fewest correspondences accepted in any solver iteration.
pub const MIN_CORRESPONDENCES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub correspondences: usize,
    /// Correspondences dropped for degenerate (zero-norm) face normals.
    pub skipped: usize,
    pub rejected_steps: usize,
    pub cost_history: Vec<f64>,
    /// Set for fine-stage estimates.
    pub unbounded: Option<[bool; 6]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEstimate {
    pub transform: RigidTransform,
    /// Rotation block first (rad²), then translation (m²).
    pub covariance: Matrix6<f64>,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostics: SolverDiagnostics,
}

/// One synchronized LiDAR mesh and stereo surfel cloud.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub mesh: TriangleMesh,
    pub surfels: SurfelCloud,
    pub timestamp: f64,
    /// Intrinsics the surfels were reconstructed with.
    pub camera: CameraIntrinsics,
}

/// Settings that turn raw measurements into a [`FramePair`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub stride: u32,
    pub depth_min: f64,
    pub depth_max: f64,
    pub k_neighbors: usize,
    /// Surfels kept per frame after normal estimation (0 keeps all).
    pub max_surfels: usize,
    pub max_edge: f64,
    pub max_range_jump: f64,
    pub area_min: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            depth_min: 0.5,
            depth_max: 80.0,
            k_neighbors: 20,
            max_surfels: 3000,
            max_edge: 1.0,
            max_range_jump: 0.5,
            area_min: 1e-6,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.stride >= 1
            && self.depth_min > 0.0
            && self.depth_max > self.depth_min
            && self.k_neighbors >= 5
            && self.max_edge > 0.0
            && self.max_range_jump > 0.0
            && self.area_min >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CalibError::invalid(format!("invalid preprocessing config {self:?}")))
        }
    }

    pub fn mesh_config(&self) -> MeshConfig {
        MeshConfig {
            max_edge: self.max_edge,
            max_range_jump: self.max_range_jump,
            area_min: self.area_min,
        }
    }
}

impl FramePair {
    /// Builds the mesh and the normal-annotated surfel cloud of one frame.
    pub fn from_measurements(
        scan: &OrganizedScan,
        disparity: &DisparityImage,
        camera: &CameraIntrinsics,
        timestamp: f64,
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mesh = reconstruct_mesh_with(scan, &cfg.mesh_config())?;
        Self::from_mesh(mesh, disparity, camera, timestamp, cfg)
    }

    /// As [`FramePair::from_measurements`] with an already reconstructed mesh.
    pub fn from_mesh(
        mesh: TriangleMesh,
        disparity: &DisparityImage,
        camera: &CameraIntrinsics,
        timestamp: f64,
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if mesh.is_empty() {
            return Err(CalibError::EmptyFrame);
        }
        let window = DepthWindow {
            min: cfg.depth_min,
            max: cfg.depth_max,
        };
        let cloud = disparity_to_points_in(disparity, camera, cfg.stride, window)?;
        if cloud.len() < cfg.k_neighbors {
            return Err(CalibError::EmptyFrame);
        }
        let cloud = estimate_point_normals(&cloud, cfg.k_neighbors)?;
        Ok(Self {
            mesh,
            surfels: cloud.decimate(cfg.max_surfels),
            timestamp,
            camera: *camera,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub param_tol: f64,
    /// Huber threshold on metric point rows (meters).
    pub huber_delta: f64,
    pub omega_coarse: f64,
    pub max_cost: f64,
    pub batch_size: usize,
    /// Minimum timestamp spacing of frames admitted to a window (seconds).
    pub min_spacing: f64,
    /// For `Stage::Fine`: run the coarse stage first.
    pub run_coarse_first: bool,
    /// Whitens fine rows by their propagated measurement noise when set.
    pub noise: Option<NoiseModel>,
    /// Fine stage: drops matches whose face normal and reliable surfel
    /// normal differ by more than this angle (degrees; 90 disables).
    pub normal_gate_deg: f64,
    /// Fine stage: drops matches whose surfel lies farther from the face
    /// centroid, within the face plane, than this multiple of the face's
    /// circumradius (0 disables).
    pub face_gate: f64,
    /// Association threshold of the fine stage (`max_cost` applies to coarse).
    pub fine_max_cost: f64,
    /// Lower bound on the propagated standard deviation of a whitened row (m).
    pub sigma_floor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            param_tol: 1e-8,
            huber_delta: 0.1,
            omega_coarse: 0.5,
            max_cost: 1.0,
            batch_size: 20,
            min_spacing: 0.5,
            run_coarse_first: false,
            noise: Some(NoiseModel::default()),
            normal_gate_deg: 45.0,
            face_gate: 1.5,
            fine_max_cost: 1.0,
            sigma_floor: 1e-4,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.param_tol > 0.0
            && self.huber_delta > 0.0
            && self.omega_coarse > 0.0
            && self.max_cost > 0.0
            && self.batch_size > 0
            && self.min_spacing >= 0.0
            && (0.0..=90.0).contains(&self.normal_gate_deg)
            && self.face_gate >= 0.0
            && self.fine_max_cost > 0.0
            && self.sigma_floor > 0.0;
        if !ok {
            return Err(CalibError::invalid(format!("invalid solver options {self:?}")));
        }
        if let Some(nm) = &self.noise {
            nm.validate()?;
        }
        Ok(())
    }

    fn lm_settings(&self) -> LmSettings {
        LmSettings {
            max_iterations: self.max_iterations,
            param_tol: self.param_tol,
            ..LmSettings::default()
        }
    }
}

/// Stacked residual vector and Jacobian (rows × 6).
#[derive(Clone, Debug, Default)]
pub struct ResidualBlock {
    pub residuals: Vec<f64>,
    pub jacobian: Vec<RowVector6<f64>>,
    pub skipped: usize,
}

/// The four coarse rows of one correspondence: point-to-plane, then `ω (R n_m) × n_s`.
pub fn coarse_rows(
    t: &RigidTransform,
    p_m: &Vector3<f64>,
    n_m: &Vector3<f64>,
    p_s: &Vector3<f64>,
    n_s: &Vector3<f64>,
    omega: f64,
) -> Option<([f64; 4], [RowVector6<f64>; 4])> {
    let (r1, j1) = point_to_plane(t, p_m, n_m, p_s)?;
    let n_c = t.rotate(n_m);
    let cross = n_c.cross(n_s) * omega;
    // d/dθ of (Exp(θ) n_c) × n_s is ⌊n_s⌋⌊n_c⌋
    let jr: Matrix3<f64> = skew(n_s) * skew(&n_c) * omega;
    let row = |i: usize| RowVector6::new(jr[(i, 0)], jr[(i, 1)], jr[(i, 2)], 0.0, 0.0, 0.0);
    Some(([r1, cross.x, cross.y, cross.z], [j1, row(0), row(1), row(2)]))
}

pub fn coarse_residuals(
    corr: &[Correspondence],
    mesh: &TriangleMesh,
    surfels: &SurfelCloud,
    t: &RigidTransform,
    omega: f64,
) -> Result<ResidualBlock> {
    if !surfels.has_normals() {
        return Err(CalibError::invalid("coarse residuals need surfel normals"));
    }
    let mut out = ResidualBlock::default();
    for c in corr {
        match coarse_rows(
            t,
            &mesh.face_centroids[c.face_index],
            &mesh.face_normals[c.face_index],
            &surfels.points[c.surfel_index],
            &surfels.normals[c.surfel_index],
            omega,
        ) {
            Some((r, j)) => {
                out.residuals.extend(r);
                out.jacobian.extend(j);
            }
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

pub fn fine_residuals(
    corr: &[Correspondence],
    mesh: &TriangleMesh,
    surfels: &SurfelCloud,
    t: &RigidTransform,
) -> ResidualBlock {
    let mut out = ResidualBlock::default();
    for c in corr {
        match point_to_plane(
            t,
            &mesh.face_centroids[c.face_index],
            &mesh.face_normals[c.face_index],
            &surfels.points[c.surfel_index],
        ) {
            Some((r, j)) => {
                out.residuals.push(r);
                out.jacobian.push(j);
            }
            None => out.skipped += 1,
        }
    }
    out
}

struct Frozen {
    /// (frame, correspondence, whitening scale)
    rows: Vec<(usize, Correspondence, f64)>,
}

struct GeometricProblem<'a> {
    frames: &'a [FramePair],
    indices: Vec<FaceIndex>,
    stage: Stage,
    opts: SolverOptions,
    skipped: usize,
    correspondences: usize,
}

impl<'a> GeometricProblem<'a> {
    fn new(frames: &'a [FramePair], stage: Stage, opts: &SolverOptions) -> Result<Self> {
        let omega = match stage {
            Stage::Coarse => opts.omega_coarse,
            Stage::Fine => 0.0,
        };
        let indices = frames
            .iter()
            .map(|f| FaceIndex::new(&f.mesh, omega))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            indices,
            stage,
            opts: *opts,
            skipped: 0,
            correspondences: 0,
        })
    }

    fn whitening(&self, frame: &FramePair, c: &Correspondence, t: &RigidTransform) -> f64 {
        let (Stage::Fine, Some(nm)) = (self.stage, &self.opts.noise) else {
            return 1.0;
        };
        match linearize_residual(c, &frame.mesh, &frame.surfels, t, &frame.camera, nm) {
            Some(lin) => 1.0 / lin.variance().sqrt().max(self.opts.sigma_floor),
            None => 1.0,
        }
    }

    fn accumulate(&self, frozen: &Frozen, t: &RigidTransform, with_jacobian: bool) -> (NormalEquations<6>, usize) {
        let mut ne = NormalEquations::<6>::default();
        let mut skipped = 0;
        let delta = Some(self.opts.huber_delta);
        for (fi, c, scale) in &frozen.rows {
            let f = &self.frames[*fi];
            let p_m = &f.mesh.face_centroids[c.face_index];
            let n_m = &f.mesh.face_normals[c.face_index];
            let p_s = &f.surfels.points[c.surfel_index];
            match self.stage {
                Stage::Fine => match point_to_plane(t, p_m, n_m, p_s) {
                    Some((r, j)) if with_jacobian => ne.add(r, &j.transpose(), *scale, delta),
                    Some((r, _)) => ne.add_cost(r, *scale, delta),
                    None => skipped += 1,
                },
                Stage::Coarse => {
                    let n_s = &f.surfels.normals[c.surfel_index];
                    match coarse_rows(t, p_m, n_m, p_s, n_s, self.opts.omega_coarse) {
                        Some((r, j)) => {
                            for k in 0..4 {
                                let d = if k == 0 { delta } else { None };
                                if with_jacobian {
                                    ne.add(r[k], &j[k].transpose(), 1.0, d);
                                } else {
                                    ne.add_cost(r[k], 1.0, d);
                                }
                            }
                        }
                        None => skipped += 1,
                    }
                }
            }
        }
        (ne, skipped)
    }

    fn associate(&self, t: &RigidTransform) -> Result<Frozen> {
        let mut rows = Vec::new();
        for (fi, (frame, index)) in self.frames.iter().zip(&self.indices).enumerate() {
            let cs = match self.stage {
                Stage::Coarse => index.associate(&frame.surfels, t, self.opts.max_cost)?,
                Stage::Fine => {
                    let mut cs = index.associate(&frame.surfels, t, self.opts.fine_max_cost)?;
                    fine_gates(&mut cs, frame, t, &self.opts);
                    cs
                }
            };
            for c in cs {
                rows.push((fi, c, self.whitening(frame, &c, t)));
            }
        }
        if rows.len() < MIN_CORRESPONDENCES {
            return Err(CalibError::InsufficientConstraints {
                found: rows.len(),
                required: MIN_CORRESPONDENCES,
            });
        }
        Ok(Frozen { rows })
    }
}

impl LmProblem<6> for GeometricProblem<'_> {
    type Param = RigidTransform;
    type Frozen = Frozen;

    fn linearize(&mut self, x: &RigidTransform) -> Result<(Frozen, NormalEquations<6>)> {
        let frozen = self.associate(x)?;
        let (ne, skipped) = self.accumulate(&frozen, x, true);
        self.skipped = skipped;
        self.correspondences = frozen.rows.len() - skipped;
        if self.correspondences < MIN_CORRESPONDENCES {
            return Err(CalibError::InsufficientConstraints {
                found: self.correspondences,
                required: MIN_CORRESPONDENCES,
            });
        }
        Ok((frozen, ne))
    }

    fn cost(&self, frozen: &Frozen, x: &RigidTransform) -> Result<f64> {
        Ok(self.accumulate(frozen, x, false).0.cost)
    }

    fn retract(&self, x: &RigidTransform, delta: &SVector<f64, 6>) -> RigidTransform {
        x.retract(delta)
    }
}

fn validate_frames(frames: &[FramePair]) -> Result<()> {
    if frames.is_empty() {
        return Err(CalibError::invalid("at least one frame is required"));
    }
    for f in frames {
        if f.mesh.is_empty() || f.surfels.is_empty() {
            return Err(CalibError::EmptyFrame);
        }
    }
    Ok(())
}

/// Runs one calibration stage over a batch of frames.
pub fn calibrate(frames: &[FramePair], init: &RigidTransform, opts: &SolverOptions, stage: Stage) -> Result<CalibrationEstimate> {
    opts.validate()?;
    validate_frames(frames)?;
    let mut start = *init;
    let mut extra_iterations = 0;
    if stage == Stage::Fine && opts.run_coarse_first {
        let coarse = calibrate_stage(frames, init, opts, Stage::Coarse)?;
        start = coarse.transform;
        extra_iterations = coarse.iterations;
    }
    let mut est = calibrate_stage(frames, &start, opts, stage)?;
    est.iterations += extra_iterations;
    Ok(est)
}

fn calibrate_stage(frames: &[FramePair], init: &RigidTransform, opts: &SolverOptions, stage: Stage) -> Result<CalibrationEstimate> {
    let mut problem = GeometricProblem::new(frames, stage, opts)?;
    let out = lm::solve(&mut problem, *init, &opts.lm_settings())?;
    let mut est = CalibrationEstimate {
        transform: out.x,
        covariance: Matrix6::identity() * COARSE_PLACEHOLDER_VARIANCE,
        final_cost: out.cost,
        iterations: out.iterations,
        converged: out.converged(),
        diagnostics: SolverDiagnostics {
            correspondences: problem.correspondences,
            skipped: problem.skipped,
            rejected_steps: 0,
            cost_history: out.cost_history.clone(),
            unbounded: None,
        },
    };
    if stage == Stage::Fine {
        let report = fine_covariance(frames, &out.x, opts)?;
        est.covariance = report.covariance;
        est.diagnostics.unbounded = Some(report.unbounded);
    }
    if let LmStatus::Stalled { rejections } = out.status {
        est.diagnostics.rejected_steps = rejections;
        return Err(CalibError::Stalled {
            rejections,
            partial: Box::new(est),
        });
    }
    Ok(est)
}

/// Fine-stage match filters: normal compatibility for surfels with a
/// reliable normal, and in-plane distance relative to the face size.
fn fine_gates(corr: &mut Vec<Correspondence>, frame: &FramePair, t: &RigidTransform, opts: &SolverOptions) {
    let check_normals = opts.normal_gate_deg < 90.0 && frame.surfels.has_normals();
    let cos_min = opts.normal_gate_deg.to_radians().cos();
    let r_t = t.rotation().transpose();
    corr.retain(|c| {
        let n_m = &frame.mesh.face_normals[c.face_index];
        if check_normals && frame.surfels.reliable[c.surfel_index] {
            let n_c = t.rotate(n_m);
            if n_c.dot(&frame.surfels.normals[c.surfel_index]).abs() < cos_min {
                return false;
            }
        }
        if opts.face_gate > 0.0 {
            let centroid = &frame.mesh.face_centroids[c.face_index];
            let radius = frame
                .mesh
                .face_vertices(c.face_index)
                .iter()
                .map(|v| (v - centroid).norm())
                .fold(0.0, f64::max);
            let off = r_t * (frame.surfels.points[c.surfel_index] - t.translation()) - centroid;
            let in_plane = off - n_m * n_m.dot(&off);
            if in_plane.norm() > opts.face_gate * radius {
                return false;
            }
        }
        true
    });
}

/// Fine-stage correspondences of every frame at `t`.
pub fn fine_correspondences(frames: &[FramePair], t: &RigidTransform, opts: &SolverOptions) -> Result<Vec<Vec<Correspondence>>> {
    frames
        .iter()
        .map(|f| {
            let mut cs = FaceIndex::new(&f.mesh, 0.0)?.associate(&f.surfels, t, opts.fine_max_cost)?;
            fine_gates(&mut cs, f, t, opts);
            Ok(cs)
        })
        .collect()
}

/// Extrinsic covariance of the fine objective at `t`, with the noise model of
/// `opts` (default noise when unset).
pub fn fine_covariance(frames: &[FramePair], t: &RigidTransform, opts: &SolverOptions) -> Result<CovarianceReport> {
    let nm = opts.noise.unwrap_or_default();
    let nm = &nm;
    let corr = fine_correspondences(frames, t, opts)?;
    let mut lin = Vec::new();
    for (f, cs) in frames.iter().zip(&corr) {
        lin.extend(
            cs.iter()
                .filter_map(|c| linearize_residual(c, &f.mesh, &f.surfels, t, &f.camera, nm)),
        );
    }
    uncertainty::extrinsic_covariance(&lin)
}

/// One output of [`sliding_window`].
#[derive(Debug)]
pub struct WindowEstimate {
    /// Timestamp of the newest frame in the window.
    pub timestamp: f64,
    pub frames: usize,
    pub result: Result<CalibrationEstimate>,
}

/// Calibrates over a sliding window of frames sampled at least
/// `min_spacing` apart, warm-starting each window from the previous
/// estimate.
///
/// One estimate is emitted per window position once `batch_size` frames are
/// available; a stream that never fills the window yields one estimate over
/// all sampled frames.
pub fn sliding_window<I>(sequence: I, init: &RigidTransform, opts: &SolverOptions) -> Result<Vec<WindowEstimate>>
where
    I: IntoIterator<Item = FramePair>,
{
    sliding_window_stage(sequence, init, opts, Stage::Fine)
}

/// As [`sliding_window`]; `Stage::Coarse` runs only the coarse stage per
/// window, `Stage::Fine` runs coarse then fine.
pub fn sliding_window_stage<I>(sequence: I, init: &RigidTransform, opts: &SolverOptions, stage: Stage) -> Result<Vec<WindowEstimate>>
where
    I: IntoIterator<Item = FramePair>,
{
    opts.validate()?;
    let mut window: std::collections::VecDeque<FramePair> = std::collections::VecDeque::new();
    let mut last_t: Option<f64> = None;
    let mut current = *init;
    let mut out = Vec::new();
    let run = |window: &std::collections::VecDeque<FramePair>, current: &mut RigidTransform| {
        let frames: Vec<FramePair> = window.iter().cloned().collect();
        let fine = SolverOptions {
            run_coarse_first: true,
            ..*opts
        };
        let result = calibrate(&frames, current, &fine, stage);
        match &result {
            Ok(est) => *current = est.transform,
            Err(CalibError::Stalled { partial, .. }) => *current = partial.transform,
            Err(_) => {}
        }
        WindowEstimate {
            timestamp: frames.last().map_or(0.0, |f| f.timestamp),
            frames: frames.len(),
            result,
        }
    };
    for frame in sequence {
        if let Some(prev) = last_t {
            if frame.timestamp <= prev {
                return Err(CalibError::Validation(format!(
                    "timestamps not increasing: {prev} then {}",
                    frame.timestamp
                )));
            }
            if frame.timestamp - prev < opts.min_spacing - 1e-9 {
                continue;
            }
        }
        last_t = Some(frame.timestamp);
        window.push_back(frame);
        if window.len() > opts.batch_size {
            window.pop_front();
        }
        if window.len() == opts.batch_size {
            out.push(run(&window, &mut current));
        }
    }
    if out.is_empty() && !window.is_empty() {
        out.push(run(&window, &mut current));
    }
    Ok(out)
}

/// Rotation (deg, per axis) and translation (m, per axis) errors of `est`
/// against `truth`, as the local increment taking `truth` to `est`.
pub fn signed_errors(est: &RigidTransform, truth: &RigidTransform) -> Vector6<f64> {
    let d = truth.local_difference(est);
    Vector6::new(
        d[0].to_degrees(),
        d[1].to_degrees(),
        d[2].to_degrees(),
        d[3],
        d[4],
        d[5],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let g = Normal::new(0.0, 1.0).unwrap();
        Vector3::new(g.sample(rng), g.sample(rng), g.sample(rng)).normalize()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        se3_exp(&Twist::new(unit(rng) * rng.random_range(0.0..1.0), unit(rng) * rng.random_range(0.0..2.0))).unwrap()
    }

    fn fd_check(f: impl Fn(&RigidTransform) -> Vec<f64>, t: &RigidTransform, jac: &[RowVector6<f64>]) {
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = f(&t.retract(&d));
            let minus = f(&t.retract(&-d));
            for (row, j) in jac.iter().enumerate() {
                let fd = (plus[row] - minus[row]) / (2.0 * h);
                let scale = j.amax().max(1e-3);
                assert!((fd - j[k]).abs() <= 1e-5 * scale, "row {row} dim {k}: fd {fd} vs {}", j[k]);
            }
        }
    }

    #[test]
    fn coarse_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let p_m = unit(&mut rng) * rng.random_range(2.0..30.0);
            let n_m = unit(&mut rng);
            let p_s = unit(&mut rng) * rng.random_range(2.0..30.0);
            let n_s = unit(&mut rng);
            let (_, jac) = coarse_rows(&t, &p_m, &n_m, &p_s, &n_s, 0.5).unwrap();
            fd_check(|x| coarse_rows(x, &p_m, &n_m, &p_s, &n_s, 0.5).unwrap().0.to_vec(), &t, &jac);
        }
    }

    #[test]
    fn fine_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let p = unit(&mut rng) * rng.random_range(2.0..30.0);
            let n = unit(&mut rng);
            let s = unit(&mut rng) * rng.random_range(2.0..30.0);
            let (_, j) = point_to_plane(&t, &p, &n, &s).unwrap();
            fd_check(|x| vec![point_to_plane(x, &p, &n, &s).unwrap().0], &t, &[j]);
        }
    }

    #[test]
    fn parallel_normals_zero_cross_rows() {
        let t = RigidTransform::identity();
        let n = Vector3::new(0.0, 0.0, -1.0);
        let (r, _) = coarse_rows(&t, &Vector3::new(0.0, 0.0, 5.0), &n, &Vector3::new(3.0, -2.0, 7.0), &n, 0.5).unwrap();
        assert_eq!(&r[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn tangent_displacement_has_zero_fine_residual() {
        let t = RigidTransform::identity();
        let n = Vector3::new(0.0, 0.0, -1.0);
        let p = Vector3::new(1.0, 1.0, 5.0);
        let (r, _) = point_to_plane(&t, &p, &n, &(p + Vector3::new(0.7, -0.4, 0.0))).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn zero_normal_is_skipped() {
        let mesh = TriangleMesh {
            vertices: vec![],
            faces: vec![[0, 0, 0]],
            face_normals: vec![Vector3::zeros()],
            face_centroids: vec![Vector3::new(0.0, 0.0, 5.0)],
            diagnostics: Default::default(),
        };
        let cloud = SurfelCloud {
            points: vec![Vector3::new(0.0, 0.0, 5.0)],
            normals: vec![Vector3::new(0.0, 0.0, -1.0)],
            reliable: vec![true],
            source_pixels: vec![Default::default()],
            source_disparity: vec![1.0],
            ..Default::default()
        };
        let corr = [Correspondence {
            surfel_index: 0,
            face_index: 0,
            match_cost: 0.0,
        }];
        let t = RigidTransform::identity();
        assert_eq!(fine_residuals(&corr, &mesh, &cloud, &t).skipped, 1);
        assert_eq!(coarse_residuals(&corr, &mesh, &cloud, &t, 0.5).unwrap().skipped, 1);
    }

    #[test]
    fn signed_errors_of_identity_are_zero() {
        let t = RigidTransform::identity();
        assert_eq!(signed_errors(&t, &t), Vector6::zeros());
    }
}
