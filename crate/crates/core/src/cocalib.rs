//! Alternating calibration of the stereo pair and the LiDAR-to-camera
//! transform.
//!
//! Each round runs the photometric stereo calibration with the current
//! LiDAR transform, rebuilds the stereo surfels with the baseline implied by
//! the new left-to-right transform, and then refines the LiDAR transform
//! (coarse then fine).

use std::io::Write;

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geometry::RigidTransform;
use crate::image::GrayImage;
use crate::lidar_stereo::{
    calibrate, CalibrationEstimate, FramePair, PreprocessConfig, SolverDiagnostics, SolverOptions, Stage,
    COARSE_PLACEHOLDER_VARIANCE,
};
use crate::mesh_recon::{reconstruct_mesh_with, CameraIntrinsics, DisparityImage, OrganizedScan, TriangleMesh};
use crate::photometric::{calibrate_stereo_pair, AffineBrightness, PhotometricOptions, StereoFrame};

/// Everything captured at one instant.
#[derive(Clone, Debug)]
pub struct SensorFrame {
    pub timestamp: f64,
    pub mesh: TriangleMesh,
    pub left: GrayImage,
    pub right: GrayImage,
    pub disparity: DisparityImage,
}

impl SensorFrame {
    pub fn from_scan(
        scan: &OrganizedScan,
        left: GrayImage,
        right: GrayImage,
        disparity: DisparityImage,
        timestamp: f64,
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mesh = reconstruct_mesh_with(scan, &cfg.mesh_config())?;
        if mesh.is_empty() {
            return Err(CalibError::EmptyFrame);
        }
        Ok(Self {
            timestamp,
            mesh,
            left,
            right,
            disparity,
        })
    }

    fn stereo(&self) -> StereoFrame {
        StereoFrame {
            left: self.left.clone(),
            right: self.right.clone(),
            mesh: self.mesh.clone(),
            timestamp: self.timestamp,
        }
    }
}

/// Baseline used to turn disparities back into depth between rounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfelBaseline {
    /// `‖t_rl‖` of the current left-to-right estimate.
    #[default]
    Stereo,
    /// The baseline of the camera intrinsics the disparities were computed with.
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoCalibOptions {
    pub lidar: SolverOptions,
    pub photometric: PhotometricOptions,
    pub preprocess: PreprocessConfig,
    /// Per-round change below which a transform counts as stable (degrees).
    pub stability_deg: f64,
    /// Per-round change below which a transform counts as stable (meters).
    pub stability_m: f64,
    pub max_rounds: usize,
    /// Frames used, sampled at least `min_spacing` seconds apart.
    pub batch_size: usize,
    pub min_spacing: f64,
    /// Refine the LiDAR transform before the stereo pair in every round.
    pub lidar_first: bool,
    /// Run the coarse LiDAR stage before the fine one in every round, not
    /// only the first.
    pub coarse_every_round: bool,
    pub surfel_baseline: SurfelBaseline,
}

impl Default for CoCalibOptions {
    fn default() -> Self {
        Self {
            lidar: SolverOptions::default(),
            photometric: PhotometricOptions::default(),
            preprocess: PreprocessConfig::default(),
            stability_deg: 0.02,
            stability_m: 0.005,
            max_rounds: 10,
            batch_size: 10,
            min_spacing: 0.5,
            lidar_first: false,
            coarse_every_round: true,
            surfel_baseline: SurfelBaseline::default(),
        }
    }
}

impl CoCalibOptions {
    pub fn validate(&self) -> Result<()> {
        self.lidar.validate()?;
        self.photometric.validate()?;
        self.preprocess.validate()?;
        let ok = self.stability_deg > 0.0
            && self.stability_m > 0.0
            && self.max_rounds >= 1
            && self.batch_size >= 1
            && self.min_spacing >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CalibError::invalid("invalid co-calibration options"))
        }
    }
}

/// Parameter changes of one round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDelta {
    pub round: usize,
    pub d_rot_rl_deg: f64,
    pub d_trans_rl: f64,
    pub d_rot_lc_deg: f64,
    pub d_trans_lc: f64,
}

impl RoundDelta {
    fn stable(&self, opts: &CoCalibOptions) -> bool {
        self.d_rot_rl_deg < opts.stability_deg
            && self.d_rot_lc_deg < opts.stability_deg
            && self.d_trans_rl < opts.stability_m
            && self.d_trans_lc < opts.stability_m
    }
}

#[derive(Clone, Debug)]
pub struct CoCalibState {
    pub t_lc: CalibrationEstimate,
    pub t_rl: CalibrationEstimate,
    pub brightness: AffineBrightness,
    pub round: usize,
    pub history: Vec<RoundDelta>,
    pub converged: bool,
    /// Inner solver error that ended the run early.
    pub failure: Option<String>,
}

/// Placeholder estimate wrapping an initial guess.
pub fn initial_estimate(t: &RigidTransform) -> CalibrationEstimate {
    CalibrationEstimate {
        transform: *t,
        covariance: Matrix6::identity() * COARSE_PLACEHOLDER_VARIANCE,
        final_cost: f64::NAN,
        iterations: 0,
        converged: false,
        diagnostics: SolverDiagnostics {
            correspondences: 0,
            skipped: 0,
            rejected_steps: 0,
            cost_history: Vec::new(),
            unbounded: None,
        },
    }
}

/// Indices of the first `batch_size` frames spaced at least `min_spacing` apart.
pub fn sample_batch(timestamps: &[f64], batch_size: usize, min_spacing: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last: Option<f64> = None;
    for (i, t) in timestamps.iter().enumerate() {
        if out.len() == batch_size {
            break;
        }
        if last.is_some_and(|l| t - l < min_spacing - 1e-9) {
            continue;
        }
        last = Some(*t);
        out.push(i);
    }
    out
}

/// Stereo surfels rebuilt with the selected baseline.
fn frame_pairs(
    frames: &[&SensorFrame],
    camera: &CameraIntrinsics,
    t_rl: &RigidTransform,
    source: SurfelBaseline,
    cfg: &PreprocessConfig,
) -> Result<Vec<FramePair>> {
    let baseline = match source {
        SurfelBaseline::Stereo => t_rl.translation().norm(),
        SurfelBaseline::Nominal => camera.baseline,
    };
    if !(baseline > 0.0) {
        return Err(CalibError::invalid("left-to-right transform has zero baseline"));
    }
    let k = camera.with_baseline(baseline);
    frames
        .iter()
        .map(|f| FramePair::from_mesh(f.mesh.clone(), &f.disparity, &k, f.timestamp, cfg))
        .collect()
}

pub fn co_calibrate(
    sequence: &[SensorFrame],
    camera: &CameraIntrinsics,
    init_t_lc: &RigidTransform,
    init_t_rl: &RigidTransform,
    opts: &CoCalibOptions,
) -> Result<CoCalibState> {
    opts.validate()?;
    camera.validate()?;
    if sequence.is_empty() {
        return Err(CalibError::invalid("empty sequence"));
    }
    for w in sequence.windows(2) {
        if w[1].timestamp <= w[0].timestamp {
            return Err(CalibError::Validation(format!(
                "timestamps not increasing: {} then {}",
                w[0].timestamp, w[1].timestamp
            )));
        }
    }
    let ts: Vec<f64> = sequence.iter().map(|f| f.timestamp).collect();
    let batch: Vec<&SensorFrame> = sample_batch(&ts, opts.batch_size, opts.min_spacing)
        .into_iter()
        .map(|i| &sequence[i])
        .collect();
    let stereo: Vec<StereoFrame> = batch.iter().map(|f| f.stereo()).collect();

    let mut state = CoCalibState {
        t_lc: initial_estimate(init_t_lc),
        t_rl: initial_estimate(init_t_rl),
        brightness: AffineBrightness::default(),
        round: 0,
        history: Vec::new(),
        converged: false,
        failure: None,
    };
    for round in 1..=opts.max_rounds {
        let prev_lc = state.t_lc.transform;
        let prev_rl = state.t_rl.transform;
        let stage_stereo = |state: &mut CoCalibState| -> Result<()> {
            let out = calibrate_stereo_pair(&stereo, &state.t_lc.transform, &state.t_rl.transform, camera, &opts.photometric)?;
            state.t_rl = out.estimate;
            state.brightness = out.brightness;
            Ok(())
        };
        let stage_lidar = |state: &mut CoCalibState| -> Result<()> {
            let pairs = frame_pairs(&batch, camera, &state.t_rl.transform, opts.surfel_baseline, &opts.preprocess)?;
            let lidar = SolverOptions {
                run_coarse_first: opts.coarse_every_round || round == 1,
                ..opts.lidar
            };
            state.t_lc = calibrate(&pairs, &state.t_lc.transform, &lidar, Stage::Fine)?;
            Ok(())
        };
        let step = if opts.lidar_first {
            stage_lidar(&mut state).and_then(|_| stage_stereo(&mut state))
        } else {
            stage_stereo(&mut state).and_then(|_| stage_lidar(&mut state))
        };
        if let Err(e) = step {
            state.failure = Some(e.to_string());
            return Ok(state);
        }
        let delta = RoundDelta {
            round,
            d_rot_rl_deg: state.t_rl.transform.rotation_error_deg(&prev_rl),
            d_trans_rl: state.t_rl.transform.translation_error(&prev_rl),
            d_rot_lc_deg: state.t_lc.transform.rotation_error_deg(&prev_lc),
            d_trans_lc: state.t_lc.transform.translation_error(&prev_lc),
        };
        state.round = round;
        state.history.push(delta);
        if delta.stable(opts) {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

/// Round log as CSV with header `round,dR_rl,dT_rl,dR_LC,dT_LC`.
pub fn write_round_log<W: Write>(mut w: W, history: &[RoundDelta]) -> std::io::Result<()> {
    writeln!(w, "round,dR_rl,dT_rl,dR_LC,dT_LC")?;
    for d in history {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e}",
            d.round, d.d_rot_rl_deg, d.d_trans_rl, d.d_rot_lc_deg, d.d_trans_lc
        )?;
    }
    Ok(())
}
