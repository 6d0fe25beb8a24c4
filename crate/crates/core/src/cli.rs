//! Command-line driver.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 solver failure or
//! non-convergence.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cocalib::{co_calibrate, sample_batch, write_round_log, CoCalibOptions, SensorFrame};
use crate::error::CalibError;
use crate::geometry::RigidTransform;
use crate::io::{self, CalibrationFile, GroundTruth, LoadedFrame, Sequence, UncertaintyReport};
use crate::lidar_stereo::{fine_covariance, sliding_window_stage, FramePair, PreprocessConfig, SolverOptions, Stage};
use crate::mesh_recon::{reconstruct_mesh_with, CameraIntrinsics};
use crate::photometric::{calibrate_stereo_pair, PhotometricOptions, StereoFrame};
use crate::synthetic::{perturb_transform, render_sequence, standard_scene, SCENE_NAMES};
use crate::uncertainty::{format_ratio, uncertainty_ratio, NoiseModel};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "lscalib", version, about = "Targetless LiDAR / stereo extrinsic calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and persist a synthetic sequence.
    Synth(SynthArgs),
    /// Estimate the LiDAR-to-left-camera transform.
    CalibrateLidarStereo(LidarArgs),
    /// Estimate the left-to-right camera transform photometrically.
    CalibrateStereo(StereoArgs),
    /// Alternate stereo and LiDAR calibration until both are stable.
    Cocalibrate(CoArgs),
    /// Extrinsic covariance of the fine objective.
    Uncertainty(UncertaintyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// JSON config; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Standard synthetic scene rendered in memory.
    #[arg(long, conflicts_with = "manifest")]
    pub scene: Option<String>,
    /// Sequence manifest on disk.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Frames rendered for `--scene`.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Render `--scene` without sensor noise.
    #[arg(long)]
    pub noiseless: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageArg {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Args)]
pub struct LidarArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Mean rotation error of the initial guess (degrees).
    #[arg(long)]
    pub perturb_rot_deg: Option<f64>,
    /// Mean translation error of the initial guess (meters).
    #[arg(long)]
    pub perturb_trans: Option<f64>,
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Normal weight of the coarse association.
    #[arg(long)]
    pub omega: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct StereoArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub perturb_rot_deg: Option<f64>,
    #[arg(long)]
    pub perturb_trans: Option<f64>,
    /// Rotation (degrees) and translation (meters) error put on the LiDAR transform.
    #[arg(long, num_args = 2, value_names = ["DEG", "M"])]
    pub perturb_tlc: Option<Vec<f64>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CoArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub perturb_rot_deg: Option<f64>,
    #[arg(long)]
    pub perturb_trans: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtArg {
    /// Ground truth when known, else the calibration file.
    Auto,
    Truth,
    Calib,
}

#[derive(Debug, Clone, Args)]
pub struct UncertaintyArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Transform at which to evaluate.
    #[arg(long, value_enum)]
    pub at: Option<AtArg>,
    /// `estimate.json` whose transform is used instead of `--at`.
    #[arg(long, conflicts_with = "at")]
    pub estimate: Option<PathBuf>,
    /// Reference `uncertainty.json`; emits this / reference ratios.
    #[arg(long)]
    pub ratio: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

/// Values accepted from `--config`; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: Option<String>,
    pub manifest: Option<PathBuf>,
    pub frames: Option<usize>,
    pub seed: Option<u64>,
    pub noiseless: Option<bool>,
    pub out: Option<PathBuf>,
    pub perturb_rot_deg: Option<f64>,
    pub perturb_trans: Option<f64>,
    pub perturb_tlc: Option<[f64; 2]>,
    pub stage: Option<StageArg>,
    pub batch_size: Option<usize>,
    pub omega: Option<f64>,
    pub max_rounds: Option<usize>,
    pub stability_deg: Option<f64>,
    pub stability_m: Option<f64>,
    pub at: Option<AtArg>,
    pub solver: Option<SolverOptions>,
    pub photometric: Option<PhotometricOptions>,
    pub preprocess: Option<PreprocessConfig>,
    pub noise: Option<NoiseModel>,
    pub cocalib: Option<CoCalibOptions>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Calib(CalibError),
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        CliError::Calib(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Calib(e) if is_solver_failure(e) => EXIT_SOLVER,
            CliError::Calib(_) => EXIT_USAGE,
        }
    }
}

fn is_solver_failure(e: &CalibError) -> bool {
    matches!(
        e,
        CalibError::Stalled { .. }
            | CalibError::InsufficientConstraints { .. }
            | CalibError::InsufficientTexture { .. }
            | CalibError::EmptyKeypoints
    )
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Calib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn check(ok: bool, what: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(usage(format!("{what} out of range")))
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn execute(cmd: &Command) -> CliResult<u8> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::CalibrateLidarStereo(a) => cmd_calibrate_lidar_stereo(a),
        Command::CalibrateStereo(a) => cmd_calibrate_stereo(a),
        Command::Cocalibrate(a) => cmd_cocalibrate(a),
        Command::Uncertainty(a) => cmd_uncertainty(a),
    }
}

fn load_config(path: Option<&PathBuf>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => Ok(io::read_json(p)?),
    }
}

/// Sensor data plus the nominal and (if known) true extrinsics.
struct Input {
    camera: CameraIntrinsics,
    nominal_t_lc: RigidTransform,
    nominal_t_rl: RigidTransform,
    truth: Option<(RigidTransform, RigidTransform)>,
    frames: Vec<LoadedFrame>,
    source: String,
}

struct Common {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn common(input: &InputArgs) -> CliResult<Common> {
    let cfg = load_config(input.config.as_ref())?;
    let seed = input.seed.or(cfg.seed).unwrap_or(0);
    let out = input.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok(Common { cfg, seed, out })
}

fn load_input(input: &InputArgs, c: &Common, default_frames: usize) -> CliResult<Input> {
    let scene = input.scene.clone().or(c.cfg.scene.clone());
    let manifest = input.manifest.clone().or(c.cfg.manifest.clone());
    match (scene, manifest) {
        (Some(_), Some(_)) => Err(usage("give either a scene or a manifest, not both")),
        (None, None) => Err(usage("an input is required: --scene NAME or --manifest PATH")),
        (Some(name), None) => {
            let mut spec = standard_scene(&name).map_err(|_| usage(format!("unknown scene {name:?}; expected one of {SCENE_NAMES:?}")))?;
            let noiseless = input.noiseless || c.cfg.noiseless.unwrap_or(false);
            if noiseless {
                spec = spec.noiseless();
            }
            let n = input.frames.or(c.cfg.frames).unwrap_or(default_frames);
            check((1..=10_000).contains(&n), "frames")?;
            let frames = render_sequence(&spec, n, c.seed)?;
            Ok(Input {
                camera: spec.camera,
                nominal_t_lc: spec.true_t_lc,
                nominal_t_rl: spec.true_t_rl,
                truth: Some((spec.true_t_lc, spec.true_t_rl)),
                frames: frames.iter().map(LoadedFrame::from).collect(),
                source: format!("scene:{name}{}", if noiseless { ":noiseless" } else { "" }),
            })
        }
        (None, Some(path)) => {
            let seq = Sequence::open(&path)?;
            let mut frames = Vec::new();
            for (i, f) in seq.frames().enumerate() {
                match f {
                    Ok(f) => frames.push(f),
                    Err(e @ CalibError::Parse { .. }) => return Err(e.into()),
                    Err(e) => eprintln!("warning: frame {i} skipped: {e}"),
                }
            }
            if frames.is_empty() {
                return Err(usage("sequence has no loadable frames"));
            }
            Ok(Input {
                camera: seq.calibration.camera()?,
                nominal_t_lc: seq.calibration.t_lc()?,
                nominal_t_rl: seq.calibration.t_rl()?,
                truth: seq.ground_truth()?,
                frames,
                source: format!("manifest:{}", path.display()),
            })
        }
    }
}

fn write_json_out(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    io::write_json(path, value)?;
    Ok(())
}

fn errors_json(est: &RigidTransform, truth: Option<&RigidTransform>) -> serde_json::Value {
    match truth {
        Some(t) => json!({
            "rotation_deg": est.rotation_error_deg(t),
            "translation_m": est.translation_error(t),
        }),
        None => serde_json::Value::Null,
    }
}

fn row_major(m: &nalgebra::Matrix6<f64>) -> Vec<f64> {
    (0..6).flat_map(|i| (0..6).map(move |j| m[(i, j)])).collect()
}

fn cmd_synth(a: &SynthArgs) -> CliResult<u8> {
    let c = common(&a.input)?;
    if a.input.manifest.is_some() || c.cfg.manifest.is_some() {
        return Err(usage("synth takes --scene, not --manifest"));
    }
    let input = load_input(&a.input, &c, 30)?;
    let (t_lc, t_rl) = input.truth.expect("scenes carry ground truth");
    let calib = CalibrationFile::new(&input.camera, &t_lc, &t_rl);
    let gt = GroundTruth {
        t_lidar_to_leftcam: t_lc.to_row_major(),
        t_left_to_right: t_rl.to_row_major(),
    };
    let path = io::write_sequence(&c.out, &input.frames, &calib, Some(gt))?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

fn solver_options(c: &Common, batch: Option<usize>, omega: Option<f64>) -> CliResult<SolverOptions> {
    let mut opts = c.cfg.solver.unwrap_or_default();
    if let Some(b) = batch.or(c.cfg.batch_size) {
        opts.batch_size = b;
    }
    if let Some(w) = omega.or(c.cfg.omega) {
        opts.omega_coarse = w;
    }
    if let Some(nm) = c.cfg.noise {
        opts.noise = Some(nm);
    }
    check((1..=1000).contains(&opts.batch_size), "batch_size")?;
    check(opts.omega_coarse > 0.0 && opts.omega_coarse <= 100.0, "omega")?;
    opts.validate()?;
    Ok(opts)
}

fn perturbation(rot: Option<f64>, trans: Option<f64>, c_rot: Option<f64>, c_trans: Option<f64>, defaults: (f64, f64)) -> CliResult<(f64, f64)> {
    let r = rot.or(c_rot).unwrap_or(defaults.0);
    let t = trans.or(c_trans).unwrap_or(defaults.1);
    check((0.0..=30.0).contains(&r), "perturb_rot_deg")?;
    check((0.0..=5.0).contains(&t), "perturb_trans")?;
    Ok((r, t))
}

fn frame_pairs(input: &Input, cfg: &PreprocessConfig) -> CliResult<Vec<FramePair>> {
    let mut out = Vec::with_capacity(input.frames.len());
    for (i, f) in input.frames.iter().enumerate() {
        let disp = f
            .disparity
            .as_ref()
            .ok_or_else(|| usage(format!("frame {i} has no disparity")))?;
        out.push(FramePair::from_measurements(&f.scan, disp, &input.camera, f.timestamp, cfg)?);
    }
    Ok(out)
}

fn cmd_calibrate_lidar_stereo(a: &LidarArgs) -> CliResult<u8> {
    let c = common(&a.input)?;
    let opts = solver_options(&c, a.batch_size, a.omega)?;
    let (rot, trans) = perturbation(a.perturb_rot_deg, a.perturb_trans, c.cfg.perturb_rot_deg, c.cfg.perturb_trans, (3.0, 0.3))?;
    let stage = a.stage.or(c.cfg.stage).unwrap_or(StageArg::Fine);
    let pre = c.cfg.preprocess.unwrap_or_default();
    pre.validate()?;
    let input = load_input(&a.input, &c, 30)?;
    let pairs = frame_pairs(&input, &pre)?;
    let init = perturb_transform(&input.nominal_t_lc, rot, trans, c.seed);
    let solver_stage = match stage {
        StageArg::Coarse => Stage::Coarse,
        StageArg::Fine => Stage::Fine,
    };
    let windows = sliding_window_stage(pairs, &init, &opts, solver_stage)?;
    let truth = input.truth.map(|t| t.0);
    let rows: Vec<(f64, RigidTransform)> = windows
        .iter()
        .filter_map(|w| match &w.result {
            Ok(e) => Some((w.timestamp, e.transform)),
            Err(CalibError::Stalled { partial, .. }) => Some((w.timestamp, partial.transform)),
            Err(_) => None,
        })
        .collect();
    io::write_report(&c.out.join("estimates.csv"), &rows, truth.as_ref())?;
    let last = windows.last().ok_or_else(|| usage("no frames to calibrate"))?;
    let (final_t, converged, detail) = match &last.result {
        Ok(e) => (e.transform, e.converged, json!({
            "iterations": e.iterations,
            "final_cost": e.final_cost,
            "correspondences": e.diagnostics.correspondences,
            "covariance": row_major(&e.covariance),
            "unbounded": e.diagnostics.unbounded,
        })),
        Err(CalibError::Stalled { partial, .. }) => (partial.transform, false, json!({ "error": last.result.as_ref().err().map(|e| e.to_string()) })),
        Err(e) => (init, false, json!({ "error": e.to_string() })),
    };
    let errors = errors_json(&final_t, truth.as_ref());
    let thresholds = match stage {
        StageArg::Coarse => (0.6, 0.2),
        StageArg::Fine => (0.1, 0.02),
    };
    let report = json!({
        "command": "calibrate-lidar-stereo",
        "config": {
            "source": input.source,
            "seed": c.seed,
            "stage": stage,
            "perturb_rot_deg": rot,
            "perturb_trans": trans,
            "solver": opts,
            "preprocess": pre,
        },
        "init": init.to_row_major(),
        "transform": final_t.to_row_major(),
        "converged": converged,
        "windows": windows.len(),
        "errors": errors,
        "thresholds": { "rotation_deg": thresholds.0, "translation_m": thresholds.1 },
        "detail": detail,
    });
    write_json_out(&c.out.join("estimate.json"), &report)?;
    if let Some(t) = truth.as_ref() {
        let (r, tr) = (final_t.rotation_error_deg(t), final_t.translation_error(t));
        let ok = r < thresholds.0 && tr < thresholds.1;
        println!(
            "rotation error {r:.4} deg, translation error {tr:.4} m ({})",
            if ok { "within thresholds" } else { "outside thresholds" }
        );
    }
    Ok(if converged { EXIT_OK } else { EXIT_SOLVER })
}

fn stereo_frames(input: &Input, pre: &PreprocessConfig, indices: &[usize]) -> CliResult<Vec<StereoFrame>> {
    indices
        .iter()
        .map(|&i| {
            let f = &input.frames[i];
            let (Some(left), Some(right)) = (&f.left, &f.right) else {
                return Err(usage(format!("frame {i} lacks a left or right image")));
            };
            Ok(StereoFrame {
                left: left.clone(),
                right: right.clone(),
                mesh: reconstruct_mesh_with(&f.scan, &pre.mesh_config())?,
                timestamp: f.timestamp,
            })
        })
        .collect()
}

fn cmd_calibrate_stereo(a: &StereoArgs) -> CliResult<u8> {
    let c = common(&a.input)?;
    let (rot, trans) = perturbation(a.perturb_rot_deg, a.perturb_trans, c.cfg.perturb_rot_deg, c.cfg.perturb_trans, (1.0, 0.1))?;
    let tlc_pert = match (&a.perturb_tlc, c.cfg.perturb_tlc) {
        (Some(v), _) => [v[0], v[1]],
        (None, Some(v)) => v,
        (None, None) => [0.0, 0.0],
    };
    check((0.0..=30.0).contains(&tlc_pert[0]) && (0.0..=5.0).contains(&tlc_pert[1]), "perturb_tlc")?;
    let batch = a.batch_size.or(c.cfg.batch_size).unwrap_or(10);
    check((1..=1000).contains(&batch), "batch_size")?;
    let popts = c.cfg.photometric.unwrap_or_default();
    popts.validate()?;
    let pre = c.cfg.preprocess.unwrap_or_default();
    pre.validate()?;
    let input = load_input(&a.input, &c, 10)?;
    let ts: Vec<f64> = input.frames.iter().map(|f| f.timestamp).collect();
    let frames = stereo_frames(&input, &pre, &sample_batch(&ts, batch, 0.5))?;
    let init = perturb_transform(&input.nominal_t_rl, rot, trans, c.seed);
    let t_lc = if tlc_pert == [0.0, 0.0] {
        input.nominal_t_lc
    } else {
        perturb_transform(&input.nominal_t_lc, tlc_pert[0], tlc_pert[1], c.seed.wrapping_add(1))
    };
    let truth = input.truth.map(|t| t.1);
    let config = json!({
        "source": input.source,
        "seed": c.seed,
        "perturb_rot_deg": rot,
        "perturb_trans": trans,
        "perturb_tlc": tlc_pert,
        "batch_size": batch,
        "photometric": popts,
    });
    let result = calibrate_stereo_pair(&frames, &t_lc, &init, &input.camera, &popts);
    if let Err(e) = &result {
        if !is_solver_failure(e) {
            return Err(usage(e.to_string()));
        }
    }
    let (final_t, converged, detail) = match &result {
        Ok(s) => (s.estimate.transform, s.estimate.converged, json!({
            "iterations": s.estimate.iterations,
            "final_cost": s.estimate.final_cost,
            "keypoints": s.keypoints,
            "excluded": s.excluded,
            "brightness": s.brightness,
            "covariance": row_major(&s.estimate.covariance),
        })),
        Err(CalibError::Stalled { partial, .. }) => (partial.transform, false, json!({ "error": "solver stalled" })),
        Err(e) => (init, false, json!({ "error": e.to_string() })),
    };
    let report = json!({
        "command": "calibrate-stereo",
        "config": config,
        "lidar_to_left": t_lc.to_row_major(),
        "init": init.to_row_major(),
        "transform": final_t.to_row_major(),
        "converged": converged,
        "errors": errors_json(&final_t, truth.as_ref()),
        "detail": detail,
    });
    write_json_out(&c.out.join("estimate.json"), &report)?;
    if let Some(t) = truth.as_ref() {
        println!(
            "rotation error {:.4} deg, translation error {:.4} m",
            final_t.rotation_error_deg(t),
            final_t.translation_error(t)
        );
    }
    Ok(if converged { EXIT_OK } else { EXIT_SOLVER })
}

fn cmd_cocalibrate(a: &CoArgs) -> CliResult<u8> {
    let c = common(&a.input)?;
    let (rot, trans) = perturbation(a.perturb_rot_deg, a.perturb_trans, c.cfg.perturb_rot_deg, c.cfg.perturb_trans, (1.0, 0.1))?;
    let mut opts = c.cfg.cocalib.unwrap_or_default();
    if let Some(s) = c.cfg.solver {
        opts.lidar = s;
    }
    if let Some(p) = c.cfg.photometric {
        opts.photometric = p;
    }
    if let Some(p) = c.cfg.preprocess {
        opts.preprocess = p;
    }
    if let Some(nm) = c.cfg.noise {
        opts.lidar.noise = Some(nm);
    }
    if let Some(r) = a.max_rounds.or(c.cfg.max_rounds) {
        opts.max_rounds = r;
    }
    if let Some(b) = a.batch_size.or(c.cfg.batch_size) {
        opts.batch_size = b;
    }
    if let Some(s) = c.cfg.stability_deg {
        opts.stability_deg = s;
    }
    if let Some(s) = c.cfg.stability_m {
        opts.stability_m = s;
    }
    check((1..=100).contains(&opts.max_rounds), "max_rounds")?;
    check((1..=1000).contains(&opts.batch_size), "batch_size")?;
    opts.validate()?;
    let input = load_input(&a.input, &c, 10)?;
    let mut seq = Vec::with_capacity(input.frames.len());
    for (i, f) in input.frames.iter().enumerate() {
        let (Some(l), Some(r), Some(d)) = (&f.left, &f.right, &f.disparity) else {
            return Err(usage(format!("frame {i} lacks images or disparity")));
        };
        seq.push(SensorFrame::from_scan(&f.scan, l.clone(), r.clone(), d.clone(), f.timestamp, &opts.preprocess)?);
    }
    let init_lc = perturb_transform(&input.nominal_t_lc, rot, trans, c.seed);
    let init_rl = perturb_transform(&input.nominal_t_rl, rot, trans, c.seed.wrapping_add(1));
    let state = co_calibrate(&seq, &input.camera, &init_lc, &init_rl, &opts)?;
    let log_path = c.out.join("rounds.csv");
    let mut log = Vec::new();
    write_round_log(&mut log, &state.history).map_err(|e| CalibError::io(&log_path, e))?;
    std::fs::create_dir_all(&c.out).map_err(|e| CalibError::io(&c.out, e))?;
    std::fs::write(&log_path, log).map_err(|e| CalibError::io(&log_path, e))?;
    let (t_lc, t_rl) = (state.t_lc.transform, state.t_rl.transform);
    let report = json!({
        "command": "cocalibrate",
        "config": {
            "source": input.source,
            "seed": c.seed,
            "perturb_rot_deg": rot,
            "perturb_trans": trans,
            "options": opts,
        },
        "init_lidar_to_left": init_lc.to_row_major(),
        "init_left_to_right": init_rl.to_row_major(),
        "lidar_to_left": t_lc.to_row_major(),
        "left_to_right": t_rl.to_row_major(),
        "rounds": state.round,
        "converged": state.converged,
        "failure": state.failure,
        "history": state.history,
        "errors": {
            "lidar_to_left": errors_json(&t_lc, input.truth.as_ref().map(|t| &t.0)),
            "left_to_right": errors_json(&t_rl, input.truth.as_ref().map(|t| &t.1)),
        },
    });
    write_json_out(&c.out.join("estimate.json"), &report)?;
    if let Some((gt_lc, gt_rl)) = input.truth.as_ref() {
        println!(
            "left-to-right error {:.4} deg / {:.4} m, lidar-to-left error {:.4} deg / {:.4} m, {} rounds",
            t_rl.rotation_error_deg(gt_rl),
            t_rl.translation_error(gt_rl),
            t_lc.rotation_error_deg(gt_lc),
            t_lc.translation_error(gt_lc),
            state.round
        );
    }
    if !state.converged {
        eprintln!("not converged{}", state.failure.map(|f| format!(": {f}")).unwrap_or_default());
        return Ok(EXIT_SOLVER);
    }
    Ok(EXIT_OK)
}

fn cmd_uncertainty(a: &UncertaintyArgs) -> CliResult<u8> {
    let c = common(&a.input)?;
    let opts = solver_options(&c, a.batch_size, None)?;
    let pre = c.cfg.preprocess.unwrap_or_default();
    pre.validate()?;
    let reference = match &a.ratio {
        Some(p) => {
            let r: UncertaintyReport = io::read_json(p)?;
            Some(r.covariance_matrix()?)
        }
        None => None,
    };
    let input = load_input(&a.input, &c, 20)?;
    let at = a.at.or(c.cfg.at).unwrap_or(AtArg::Auto);
    let t = match (&a.estimate, at) {
        (Some(p), _) => {
            let v: serde_json::Value = io::read_json(p)?;
            let entries: Vec<f64> = v
                .get("transform")
                .or_else(|| v.get("lidar_to_left"))
                .and_then(|t| serde_json::from_value(t.clone()).ok())
                .ok_or_else(|| usage(format!("{}: no transform field", p.display())))?;
            RigidTransform::from_row_major(&entries)?
        }
        (None, AtArg::Truth) => input.truth.ok_or_else(|| usage("sequence has no ground truth"))?.0,
        (None, AtArg::Calib) => input.nominal_t_lc,
        (None, AtArg::Auto) => input.truth.map_or(input.nominal_t_lc, |t| t.0),
    };
    let pairs = frame_pairs(&input, &pre)?;
    let ts: Vec<f64> = pairs.iter().map(|f| f.timestamp).collect();
    let batch: Vec<FramePair> = sample_batch(&ts, opts.batch_size, opts.min_spacing)
        .into_iter()
        .map(|i| pairs[i].clone())
        .collect();
    let cov = fine_covariance(&batch, &t, &opts)?;
    let ratio = reference.map(|r| uncertainty_ratio(&cov.covariance, &r));
    let report = UncertaintyReport::new(&cov, ratio.as_ref());
    io::write_json(&c.out.join("uncertainty.json"), &report)?;
    println!("unbounded directions: {} {:?}", cov.unbounded_count, cov.unbounded);
    if let Some(r) = &ratio {
        print!("{}", format_ratio(r));
    }
    Ok(EXIT_OK)
}
