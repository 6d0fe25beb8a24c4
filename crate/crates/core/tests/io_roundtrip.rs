use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lscalib::error::CalibError;
use lscalib::io::{
    read_json, read_report, write_json, write_report, write_sequence, BinningConfig, CalibrationFile, FrameEntry, LoadedFrame,
    Sequence, SequenceManifest,
};
use lscalib::synthetic::{perturb_transform, render_sequence, standard_scene};

#[test]
fn persisted_sequence_matches_memory() {
    let spec = standard_scene("urban").unwrap();
    let frames = render_sequence(&spec, 3, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let loaded: Vec<LoadedFrame> = frames.iter().map(LoadedFrame::from).collect();
    let calib = CalibrationFile::new(&spec.camera, &spec.true_t_lc, &spec.true_t_rl);
    let manifest = write_sequence(dir.path(), &loaded, &calib, None).unwrap();

    let seq = Sequence::open(&manifest).unwrap();
    assert_eq!(seq.len(), 3);
    assert_eq!(seq.calibration.camera().unwrap(), spec.camera);
    let back: Vec<LoadedFrame> = seq.frames().collect::<Result<_, _>>().unwrap();
    assert_eq!(back, loaded);
}

#[test]
fn missing_file_is_a_frame_error() {
    let spec = standard_scene("urban").unwrap();
    let frames = render_sequence(&spec, 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let loaded: Vec<LoadedFrame> = frames.iter().map(LoadedFrame::from).collect();
    let calib = CalibrationFile::new(&spec.camera, &spec.true_t_lc, &spec.true_t_rl);
    let manifest = write_sequence(dir.path(), &loaded, &calib, None).unwrap();
    fs::remove_file(dir.path().join("left/000001.png")).unwrap();

    let seq = Sequence::open(&manifest).unwrap();
    let out: Vec<_> = seq.frames().collect();
    assert_eq!(out.len(), 3);
    assert!(out[0].is_ok() && out[2].is_ok());
    assert!(out[1].is_err());
}

#[test]
fn unsorted_timestamps_rejected() {
    let spec = standard_scene("urban").unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_json(&dir.path().join("calib.json"), &CalibrationFile::new(&spec.camera, &spec.true_t_lc, &spec.true_t_rl)).unwrap();
    let entry = |t: f64| FrameEntry { timestamp: t, scan: "a.lscan".into(), left: None, right: None, disparity: None };
    let manifest = SequenceManifest {
        calibration: "calib.json".into(),
        ground_truth: None,
        binning: None,
        frames: vec![entry(0.0), entry(1.0), entry(0.5)],
    };
    let path = dir.path().join("manifest.json");
    write_json(&path, &manifest).unwrap();
    assert!(matches!(Sequence::open(&path), Err(CalibError::Validation(_))));
}

fn write_kitti(path: &Path, points: &[Vector3<f32>]) {
    let mut bytes = Vec::new();
    for p in points {
        for v in [p.x, p.y, p.z, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn kitti_binning_round_trip() {
    // one return per (ring, azimuth bin), jittered inside the bin
    let rows = 16;
    let step = 0.2f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut points = Vec::new();
    for ring in 0..rows {
        let el = (-15.0 + 2.0 * ring as f64).to_radians();
        for col in (0..1800).step_by(7) {
            let az = (180.0 - (col as f64 + rng.random_range(0.2..0.8)) * step).to_radians();
            let el = el + rng.random_range(-1e-4..1e-4);
            let r = rng.random_range(2.0..80.0);
            let p = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * r;
            points.push(p.map(|v| v as f32));
        }
    }
    let spec = standard_scene("urban").unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_kitti(&dir.path().join("000000.bin"), &points);
    write_json(&dir.path().join("calib.json"), &CalibrationFile::new(&spec.camera, &spec.true_t_lc, &spec.true_t_rl)).unwrap();
    let manifest = SequenceManifest {
        calibration: "calib.json".into(),
        ground_truth: None,
        binning: Some(BinningConfig { rows, azimuth_step_deg: step, ..BinningConfig::default() }),
        frames: vec![FrameEntry { timestamp: 0.0, scan: "000000.bin".into(), left: None, right: None, disparity: None }],
    };
    let path = dir.path().join("manifest.json");
    write_json(&path, &manifest).unwrap();

    let scan = Sequence::open(&path).unwrap().load_frame(0).unwrap().scan;
    assert_eq!(scan.rows as usize, rows);
    assert_eq!(scan.cols, 1800);
    let recovered: Vec<Vector3<f64>> =
        scan.ranges.iter().zip(&scan.directions).filter(|(r, _)| **r > 0.0).map(|(r, d)| d * *r).collect();
    assert_eq!(recovered.len(), points.len());
    for (i, p) in points.iter().enumerate() {
        let p = p.map(|v| v as f64);
        let best = recovered.iter().map(|q| (q - p).norm()).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-6, "point {i} lost: {best}");
    }
    // top row holds the highest elevation
    let top = scan.ranges[..1800].iter().zip(&scan.directions[..1800]).find(|(r, _)| **r > 0.0).unwrap();
    assert!(top.1.z > 0.2);
}

#[test]
fn report_round_trip() {
    let spec = standard_scene("urban").unwrap();
    let rows: Vec<_> = (0..5).map(|i| (i as f64 * 0.5, perturb_transform(&spec.true_t_lc, 0.5, 0.05, i))).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("estimates.csv");

    write_report(&path, &rows, Some(&spec.true_t_lc)).unwrap();
    let (is_err, back) = read_report(&path).unwrap();
    assert!(is_err);
    assert_eq!(back.len(), 5);
    for ((t, est), row) in rows.iter().zip(&back) {
        assert_eq!(row[0], *t);
        let rot = nalgebra::Vector3::new(row[1], row[2], row[3]).norm();
        assert!((rot - est.rotation_error_deg(&spec.true_t_lc)).abs() < 1e-9);
        let tr = nalgebra::Vector3::new(row[4], row[5], row[6]).norm();
        assert!((tr - est.translation_error(&spec.true_t_lc)).abs() < 1e-12);
    }

    write_report(&path, &rows, None).unwrap();
    let (is_err, back) = read_report(&path).unwrap();
    assert!(!is_err);
    assert_eq!(back[2][4], rows[2].1.translation().x);

    fs::write(&path, "nope\n").unwrap();
    assert!(matches!(read_report(&path), Err(CalibError::Parse { offset: 0, .. })));
}

#[test]
fn calibration_file_round_trip() {
    let spec = standard_scene("highway").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calib.json");
    let calib = CalibrationFile::new(&spec.camera, &spec.true_t_lc, &spec.true_t_rl);
    write_json(&path, &calib).unwrap();
    let back: CalibrationFile = read_json(&path).unwrap();
    assert_eq!(back, calib);
    assert!(back.t_lc().unwrap().translation_error(&spec.true_t_lc) < 1e-15);
}
