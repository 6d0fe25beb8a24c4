//! Sequence manifests, sensor file formats and result reports.
//!
//! A sequence is a JSON manifest whose paths are relative to the manifest's
//! directory. Scans (`.lscan`) are `rows, cols` as little-endian `u32`
//! followed by row-major little-endian `f32` records `(range, dir_x, dir_y,
//! dir_z)`, range 0 meaning no return. KITTI velodyne
//! `.bin` files are binned into an organized scan on load. Images are 8-bit
//! grayscale PNG/PGM, disparities 16-bit PNG holding `round(256·d)` with 0
//! for no measurement.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use nalgebra::{Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geometry::{so3_log, RigidTransform};
use crate::image::GrayImage;
use crate::lidar_stereo::signed_errors;
use crate::mesh_recon::{CameraIntrinsics, DisparityImage, OrganizedScan};
use crate::synthetic::SyntheticFrame;
use crate::uncertainty::{CovarianceReport, RatioReport};

const SCAN_HEADER_LEN: u64 = 8;
const SCAN_RECORD_LEN: u64 = 16;

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> CalibError {
    CalibError::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn json_err(path: &Path, source: serde_json::Error) -> CalibError {
    CalibError::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CalibError::io(dir, e))?;
        }
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| CalibError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| json_err(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

// ---------------------------------------------------------------- scans

pub fn encode_scan(scan: &OrganizedScan) -> Vec<u8> {
    let n = scan.ranges.len();
    let mut out = Vec::with_capacity(SCAN_HEADER_LEN as usize + n * SCAN_RECORD_LEN as usize);
    out.extend_from_slice(&scan.rows.to_le_bytes());
    out.extend_from_slice(&scan.cols.to_le_bytes());
    for (r, d) in scan.ranges.iter().zip(&scan.directions) {
        for v in [*r, d.x, d.y, d.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses an `.lscan` buffer; `path` only labels errors.
pub fn decode_scan(bytes: &[u8], path: &Path) -> Result<OrganizedScan> {
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    if bytes.len() < SCAN_HEADER_LEN as usize {
        return Err(parse_err(path, bytes.len() as u64, "truncated header"));
    }
    let (rows, cols) = (u32_at(0), u32_at(4));
    if rows == 0 || cols == 0 {
        return Err(parse_err(path, 0, "empty scan grid"));
    }
    let n = rows as u64 * cols as u64;
    let expected = SCAN_HEADER_LEN + n * SCAN_RECORD_LEN;
    let len = bytes.len() as u64;
    if len < expected {
        let off = SCAN_HEADER_LEN + (len - SCAN_HEADER_LEN) / SCAN_RECORD_LEN * SCAN_RECORD_LEN;
        return Err(parse_err(path, off, format!("truncated record, expected {expected} bytes")));
    }
    if len > expected {
        return Err(parse_err(path, expected, "trailing bytes after last record"));
    }
    let mut ranges = Vec::with_capacity(n as usize);
    let mut directions = Vec::with_capacity(n as usize);
    for rec in bytes[SCAN_HEADER_LEN as usize..].chunks_exact(SCAN_RECORD_LEN as usize) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        ranges.push(f(0));
        directions.push(Vector3::new(f(1), f(2), f(3)));
    }
    OrganizedScan::new(rows, cols, ranges, directions)
}

pub fn write_scan(path: &Path, scan: &OrganizedScan) -> Result<()> {
    write_bytes(path, &encode_scan(scan))
}

pub fn read_scan(path: &Path) -> Result<OrganizedScan> {
    let bytes = fs::read(path).map_err(|e| CalibError::io(path, e))?;
    decode_scan(&bytes, path)
}

// ---------------------------------------------------------------- images

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    create_parent(path)?;
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width, img.height, img.to_u8()).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| CalibError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an 8-bit (or wider, converted) grayscale PNG or PGM.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => CalibError::io(path, e),
        source => CalibError::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let luma = img.to_luma8();
    GrayImage::from_u8(luma.width(), luma.height(), luma.as_raw())
}

/// `round(256·d)`, 0 where the disparity is missing or out of range.
pub fn encode_disparity(d: f64) -> u16 {
    let v = (d * 256.0).round();
    if d > 0.0 && v >= 1.0 && v <= u16::MAX as f64 {
        v as u16
    } else {
        0
    }
}

pub fn write_disparity_png(path: &Path, disp: &DisparityImage) -> Result<()> {
    create_parent(path)?;
    let data: Vec<u16> = disp.values.iter().map(|d| encode_disparity(*d)).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(disp.width, disp.height, data).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| CalibError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_disparity_png(path: &Path) -> Result<DisparityImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => CalibError::io(path, e),
        source => CalibError::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        _ => return Err(parse_err(path, 0, "disparity must be a 16-bit grayscale PNG")),
    };
    let values = img.as_raw().iter().map(|v| *v as f64 / 256.0).collect();
    DisparityImage::new(img.width(), img.height(), values)
}

// ---------------------------------------------------------------- KITTI

/// Binning of unorganized returns into an organized scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningConfig {
    /// Number of elevation clusters (scan rows).
    pub rows: usize,
    /// Azimuth bin width (degrees).
    pub azimuth_step_deg: f64,
    pub kmeans_iterations: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            rows: 64,
            azimuth_step_deg: 0.2,
            kmeans_iterations: 50,
        }
    }
}

/// Reads float32 `x, y, z, intensity` records.
pub fn read_kitti_bin(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let bytes = fs::read(path).map_err(|e| CalibError::io(path, e))?;
    if bytes.len() % 16 != 0 {
        let off = (bytes.len() / 16 * 16) as u64;
        return Err(parse_err(path, off, "partial point record"));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
            Vector3::new(f(0), f(1), f(2))
        })
        .collect())
}

/// Sorted 1-D k-means centers, initialized at quantiles.
fn kmeans_1d(values: &[f64], k: usize, iterations: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut centers: Vec<f64> = (0..k).map(|i| sorted[((2 * i + 1) * n / (2 * k)).min(n - 1)]).collect();
    centers.dedup();
    for _ in 0..iterations {
        let mut sum = vec![0.0; centers.len()];
        let mut count = vec![0usize; centers.len()];
        for v in &sorted {
            let c = nearest_center(&centers, *v);
            sum[c] += v;
            count[c] += 1;
        }
        let next: Vec<f64> = centers
            .iter()
            .enumerate()
            .map(|(i, c)| if count[i] > 0 { sum[i] / count[i] as f64 } else { *c })
            .collect();
        if next == centers {
            break;
        }
        centers = next;
    }
    centers.sort_by(f64::total_cmp);
    centers
}

fn nearest_center(centers: &[f64], v: f64) -> usize {
    let i = centers.partition_point(|c| *c < v);
    if i == 0 {
        0
    } else if i == centers.len() || v - centers[i - 1] <= centers[i] - v {
        i - 1
    } else {
        i
    }
}

/// Bins points into elevation rows (top row = highest elevation) and
/// azimuth columns; the nearest return wins a shared cell.
pub fn bin_points(points: &[Vector3<f64>], cfg: &BinningConfig) -> Result<OrganizedScan> {
    if cfg.rows == 0 || !(cfg.azimuth_step_deg > 0.0 && cfg.azimuth_step_deg <= 360.0) {
        return Err(CalibError::invalid("invalid binning config"));
    }
    let pts: Vec<(Vector3<f64>, f64)> = points
        .iter()
        .filter(|p| p.iter().all(|v| v.is_finite()))
        .map(|p| (*p, p.norm()))
        .filter(|(_, r)| *r > 0.0)
        .collect();
    if pts.is_empty() {
        return Err(CalibError::EmptyFrame);
    }
    let elevation = |p: &Vector3<f64>, r: f64| (p.z / r).asin();
    let elevations: Vec<f64> = pts.iter().map(|(p, r)| elevation(p, *r)).collect();
    let mut centers = kmeans_1d(&elevations, cfg.rows, cfg.kmeans_iterations);
    centers.reverse();
    let rows = centers.len();
    let cols = (360.0 / cfg.azimuth_step_deg).round() as usize;
    let step = 360.0 / cols as f64;
    let mut ranges = vec![0.0; rows * cols];
    let mut directions: Vec<Vector3<f64>> = (0..rows * cols)
        .map(|i| {
            let (el, az) = (centers[i / cols], (180.0 - (i % cols) as f64 * step - 0.5 * step).to_radians());
            Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
        })
        .collect();
    let ascending: Vec<f64> = centers.iter().rev().copied().collect();
    for ((p, r), el) in pts.iter().zip(&elevations) {
        let row = rows - 1 - nearest_center(&ascending, *el);
        let az = p.y.atan2(p.x).to_degrees();
        let col = (((180.0 - az) / step).floor() as usize).min(cols - 1);
        let i = row * cols + col;
        if ranges[i] == 0.0 || *r < ranges[i] {
            ranges[i] = *r;
            directions[i] = p / *r;
        }
    }
    OrganizedScan::new(rows as u32, cols as u32, ranges, directions)
}

// ---------------------------------------------------------------- calibration file

/// Intrinsics and extrinsics as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "T_lidar_to_leftcam")]
    pub t_lidar_to_leftcam: [f64; 16],
    #[serde(rename = "T_left_to_right")]
    pub t_left_to_right: [f64; 16],
}

impl CalibrationFile {
    pub fn new(k: &CameraIntrinsics, t_lc: &RigidTransform, t_rl: &RigidTransform) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            baseline: k.baseline,
            width: k.width,
            height: k.height,
            t_lidar_to_leftcam: t_lc.to_row_major(),
            t_left_to_right: t_rl.to_row_major(),
        }
    }

    pub fn camera(&self) -> Result<CameraIntrinsics> {
        let k = CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            baseline: self.baseline,
            width: self.width,
            height: self.height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn t_lc(&self) -> Result<RigidTransform> {
        RigidTransform::from_row_major(&self.t_lidar_to_leftcam)
    }

    pub fn t_rl(&self) -> Result<RigidTransform> {
        RigidTransform::from_row_major(&self.t_left_to_right)
    }
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    #[serde(rename = "T_lidar_to_leftcam")]
    pub t_lidar_to_leftcam: [f64; 16],
    #[serde(rename = "T_left_to_right")]
    pub t_left_to_right: [f64; 16],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub timestamp: f64,
    /// `.lscan`, or KITTI `.bin` (binned with the manifest's `binning`).
    pub scan: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disparity: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    /// Path of the [`CalibrationFile`].
    pub calibration: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binning: Option<BinningConfig>,
    pub frames: Vec<FrameEntry>,
}

impl SequenceManifest {
    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.frames.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(CalibError::Validation(format!(
                    "timestamps not strictly increasing: frame {} ({}) then frame {} ({})",
                    i,
                    w[0].timestamp,
                    i + 1,
                    w[1].timestamp
                )));
            }
        }
        if self.frames.iter().any(|f| !f.timestamp.is_finite()) {
            return Err(CalibError::Validation("non-finite timestamp".into()));
        }
        Ok(())
    }
}

/// A manifest with its root directory and parsed calibration.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub root: PathBuf,
    pub manifest: SequenceManifest,
    pub calibration: CalibrationFile,
}

/// One frame as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedFrame {
    pub timestamp: f64,
    pub scan: OrganizedScan,
    pub left: Option<GrayImage>,
    pub right: Option<GrayImage>,
    pub disparity: Option<DisparityImage>,
}

impl From<&SyntheticFrame> for LoadedFrame {
    fn from(f: &SyntheticFrame) -> Self {
        Self {
            timestamp: f.timestamp,
            scan: f.scan.clone(),
            left: Some(f.img_left.clone()),
            right: Some(f.img_right.clone()),
            disparity: Some(f.disparity.clone()),
        }
    }
}

impl Sequence {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest: SequenceManifest = read_json(manifest_path)?;
        manifest.validate()?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let calibration: CalibrationFile = read_json(&root.join(&manifest.calibration))?;
        calibration.camera()?;
        calibration.t_lc()?;
        calibration.t_rl()?;
        Ok(Self {
            root,
            manifest,
            calibration,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn ground_truth(&self) -> Result<Option<(RigidTransform, RigidTransform)>> {
        self.manifest
            .ground_truth
            .as_ref()
            .map(|g| {
                Ok((
                    RigidTransform::from_row_major(&g.t_lidar_to_leftcam)?,
                    RigidTransform::from_row_major(&g.t_left_to_right)?,
                ))
            })
            .transpose()
    }

    pub fn load_frame(&self, index: usize) -> Result<LoadedFrame> {
        let entry = &self.manifest.frames[index];
        let path = |p: &String| self.root.join(p);
        let scan_path = path(&entry.scan);
        let scan = if scan_path.extension().is_some_and(|e| e == "bin") {
            bin_points(&read_kitti_bin(&scan_path)?, &self.manifest.binning.unwrap_or_default())?
        } else {
            read_scan(&scan_path)?
        };
        let camera = self.calibration.camera()?;
        let check = |w: u32, h: u32, p: &String| {
            if (w, h) == (camera.width, camera.height) {
                Ok(())
            } else {
                Err(CalibError::Validation(format!(
                    "{p}: size {w}x{h} does not match calibration {}x{}",
                    camera.width, camera.height
                )))
            }
        };
        let left = entry.left.as_ref().map(|p| read_gray(&path(p)).and_then(|i| check(i.width, i.height, p).map(|_| i))).transpose()?;
        let right = entry.right.as_ref().map(|p| read_gray(&path(p)).and_then(|i| check(i.width, i.height, p).map(|_| i))).transpose()?;
        let disparity = entry
            .disparity
            .as_ref()
            .map(|p| read_disparity_png(&path(p)).and_then(|d| check(d.width, d.height, p).map(|_| d)))
            .transpose()?;
        Ok(LoadedFrame {
            timestamp: entry.timestamp,
            scan,
            left,
            right,
            disparity,
        })
    }

    /// Frames in timestamp order. Missing or unreadable files yield a
    /// per-frame error; a malformed file ends the stream after its error.
    pub fn frames(&self) -> FrameStream<'_> {
        FrameStream {
            seq: self,
            next: 0,
            done: false,
        }
    }
}

pub struct FrameStream<'a> {
    seq: &'a Sequence,
    next: usize,
    done: bool,
}

impl Iterator for FrameStream<'_> {
    type Item = Result<LoadedFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.next >= self.seq.len() {
            return None;
        }
        let out = self.seq.load_frame(self.next);
        self.next += 1;
        if matches!(out, Err(CalibError::Parse { .. })) {
            self.done = true;
        }
        Some(out)
    }
}

/// Files of one persisted frame, relative to the manifest.
pub fn frame_file_names(index: usize) -> FrameEntry {
    FrameEntry {
        timestamp: 0.0,
        scan: format!("scans/{index:06}.lscan"),
        left: Some(format!("left/{index:06}.png")),
        right: Some(format!("right/{index:06}.png")),
        disparity: Some(format!("disparity/{index:06}.png")),
    }
}

/// Writes frames, calibration and manifest under `dir`; returns the manifest path.
pub fn write_sequence(
    dir: &Path,
    frames: &[LoadedFrame],
    calibration: &CalibrationFile,
    ground_truth: Option<GroundTruth>,
) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let mut e = frame_file_names(i);
        e.timestamp = f.timestamp;
        write_scan(&dir.join(&e.scan), &f.scan)?;
        match &f.left {
            Some(img) => write_gray_png(&dir.join(e.left.as_ref().expect("set")), img)?,
            None => e.left = None,
        }
        match &f.right {
            Some(img) => write_gray_png(&dir.join(e.right.as_ref().expect("set")), img)?,
            None => e.right = None,
        }
        match &f.disparity {
            Some(d) => write_disparity_png(&dir.join(e.disparity.as_ref().expect("set")), d)?,
            None => e.disparity = None,
        }
        entries.push(e);
    }
    let manifest = SequenceManifest {
        calibration: "calib.json".into(),
        ground_truth,
        binning: None,
        frames: entries,
    };
    manifest.validate()?;
    write_json(&dir.join("calib.json"), calibration)?;
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

// ---------------------------------------------------------------- reports

pub const ERROR_HEADER: &str = "timestamp,err_rx_deg,err_ry_deg,err_rz_deg,err_tx_m,err_ty_m,err_tz_m";
pub const RAW_HEADER: &str = "timestamp,rx_deg,ry_deg,rz_deg,tx_m,ty_m,tz_m";

/// Time series of estimates: signed errors against `truth` when given,
/// otherwise the rotation vector (degrees) and translation.
pub fn write_estimate_csv<W: Write>(mut w: W, rows: &[(f64, RigidTransform)], truth: Option<&RigidTransform>) -> std::io::Result<()> {
    writeln!(w, "{}", if truth.is_some() { ERROR_HEADER } else { RAW_HEADER })?;
    for (t, est) in rows {
        let v = match truth {
            Some(gt) => signed_errors(est, gt),
            None => {
                let r = so3_log(est.rotation());
                let tr = est.translation();
                nalgebra::Vector6::new(r.x.to_degrees(), r.y.to_degrees(), r.z.to_degrees(), tr.x, tr.y, tr.z)
            }
        };
        let cells: Vec<String> = std::iter::once(*t).chain(v.iter().copied()).map(|x| x.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_report(path: &Path, rows: &[(f64, RigidTransform)], truth: Option<&RigidTransform>) -> Result<()> {
    let mut buf = Vec::new();
    write_estimate_csv(&mut buf, rows, truth).map_err(|e| CalibError::io(path, e))?;
    write_bytes(path, &buf)
}

/// Parses a report written by [`write_report`]: whether it holds errors, and the rows.
pub fn read_report(path: &Path) -> Result<(bool, Vec<[f64; 7]>)> {
    let text = fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("");
    let is_error = match header.trim_end_matches('\n') {
        ERROR_HEADER => true,
        RAW_HEADER => false,
        _ => return Err(parse_err(path, 0, "unknown header")),
    };
    offset += header.len() as u64;
    let mut rows = Vec::new();
    for line in lines {
        let body = line.trim_end_matches('\n');
        let cells: Vec<&str> = body.split(',').collect();
        if cells.len() != 7 {
            return Err(parse_err(path, offset, format!("expected 7 fields, got {}", cells.len())));
        }
        let mut row = [0.0; 7];
        for (slot, cell) in row.iter_mut().zip(&cells) {
            *slot = cell.parse().map_err(|_| parse_err(path, offset, format!("bad number {cell:?}")))?;
        }
        rows.push(row);
        offset += line.len() as u64;
    }
    Ok((is_error, rows))
}

/// JSON uncertainty report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyReport {
    /// Row-major 6×6, rotation (rad) block first.
    pub covariance: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub unbounded: [bool; 6],
    pub unbounded_count: usize,
    /// `None` when the information matrix is singular.
    pub condition_number: Option<f64>,
    pub residuals_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<RatioBlocks>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioBlocks {
    /// Row-major 6×6 elementwise ratio against the reference.
    pub ratio: Vec<f64>,
    #[serde(rename = "Sigma_R")]
    pub sigma_r: Vec<f64>,
    #[serde(rename = "Sigma_T")]
    pub sigma_t: Vec<f64>,
    pub zero_denominator: Vec<bool>,
}

fn row_major<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> Vec<f64> {
    (0..R).flat_map(|i| (0..C).map(move |j| m[(i, j)])).collect()
}

impl UncertaintyReport {
    pub fn new(report: &CovarianceReport, ratio: Option<&RatioReport>) -> Self {
        Self {
            covariance: row_major(&report.covariance),
            std_devs: report.std_devs.iter().copied().collect(),
            unbounded: report.unbounded,
            unbounded_count: report.unbounded_count,
            condition_number: report.condition_number.is_finite().then_some(report.condition_number),
            residuals_used: report.residuals_used,
            ratio: ratio.map(|r| RatioBlocks {
                ratio: row_major(&r.ratio),
                sigma_r: row_major(&r.rotation_block),
                sigma_t: row_major(&r.translation_block),
                zero_denominator: r.zero_denominator.clone(),
            }),
        }
    }

    pub fn covariance_matrix(&self) -> Result<Matrix6<f64>> {
        if self.covariance.len() != 36 {
            return Err(CalibError::Validation(format!(
                "covariance needs 36 entries, got {}",
                self.covariance.len()
            )));
        }
        Ok(Matrix6::from_row_slice(&self.covariance))
    }
}
