use nalgebra::{Vector2, Vector3};

use lscalib::lidar_stereo::{calibrate, fine_correspondences, fine_residuals, FramePair, PreprocessConfig, SolverOptions, Stage};
use lscalib::mesh_recon::{reconstruct_mesh_with, SurfelCloud, TriangleMesh};
use lscalib::photometric::{calibrate_stereo_pair, PhotometricOptions, StereoFrame};
use lscalib::synthetic::{render_sequence, standard_scene};

#[test]
fn fine_residuals_vanish_at_truth_on_planes() {
    let spec = standard_scene("urban").unwrap().noiseless();
    let cfg = PreprocessConfig::default();
    let pairs: Vec<FramePair> = render_sequence(&spec, 2, 0)
        .unwrap()
        .iter()
        .map(|f| FramePair::from_measurements(&f.scan, &f.true_disparity, &spec.camera, f.timestamp, &cfg).unwrap())
        .collect();
    let corr = fine_correspondences(&pairs, &spec.true_t_lc, &SolverOptions::default()).unwrap();
    let mut all: Vec<f64> = Vec::new();
    for (p, c) in pairs.iter().zip(&corr) {
        all.extend(fine_residuals(c, &p.mesh, &p.surfels, &spec.true_t_lc).residuals.iter().map(|r| r.abs()));
    }
    // faces spanning two primitives at corners and box edges are not on either plane
    all.sort_by(f64::total_cmp);
    let on_plane = all.iter().filter(|r| **r < 1e-6).count();
    assert!(all.len() > 1000);
    assert!(all[all.len() / 2] < 1e-6);
    assert!(on_plane * 100 >= all.len() * 95, "{on_plane}/{}", all.len());
}

/// Three mutually orthogonal planes, triangulated separately, with surfels
/// sampled exactly on them away from the shared edges.
fn three_planes() -> (lscalib::synthetic::SceneSpec, FramePair) {
    let spec = standard_scene("urban").unwrap();
    let k = spec.camera;
    let t_cl = spec.true_t_lc.inverse();
    let planes = [
        (Vector3::new(-6.0, -3.0, 12.0), Vector3::x(), Vector3::y(), 12.0, 4.5),
        (Vector3::new(-6.0, 1.5, 2.0), Vector3::x(), Vector3::z(), 12.0, 10.0),
        (Vector3::new(-4.0, -3.0, 2.0), Vector3::z(), Vector3::y(), 10.0, 4.5),
    ];
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let step = 0.5;
    for (origin, a, b, la, lb) in planes {
        let (na, nb) = ((la / step) as usize, (lb / step) as usize);
        let base = verts.len();
        for j in 0..=nb {
            for i in 0..=na {
                verts.push(t_cl.transform_point(&(origin + a * (i as f64 * step) + b * (j as f64 * step))));
            }
        }
        for j in 0..nb {
            for i in 0..na {
                let v = |ii: usize, jj: usize| base + jj * (na + 1) + ii;
                faces.push([v(i, j), v(i + 1, j), v(i + 1, j + 1)]);
                faces.push([v(i, j), v(i + 1, j + 1), v(i, j + 1)]);
            }
        }
        let n = a.cross(&b).normalize();
        let n = if n.dot(&origin) > 0.0 { -n } else { n };
        for j in 1..(nb * 2 - 1) {
            for i in 1..(na * 2 - 1) {
                let p = origin + a * ((i as f64 + 0.37) * step / 2.0) + b * ((j as f64 + 0.61) * step / 2.0);
                if p.z > 1.0 {
                    points.push(p);
                    normals.push(n);
                }
            }
        }
    }
    let m = points.len();
    let surfels = SurfelCloud {
        source_pixels: points.iter().map(|p| k.project(p)).collect::<Vec<Vector2<f64>>>(),
        source_disparity: points.iter().map(|p| k.fx * k.baseline / p.z).collect(),
        points,
        normals,
        reliable: vec![true; m],
        ..SurfelCloud::default()
    };
    let mesh = TriangleMesh::from_triangles(verts, faces, 1e-9).unwrap();
    (spec, FramePair { mesh, surfels, timestamp: 0.0, camera: k })
}

#[test]
fn fine_stage_truth_is_a_fixed_point() {
    let (spec, pair) = three_planes();
    let opts = SolverOptions { run_coarse_first: false, ..SolverOptions::default() };
    let est = calibrate(&[pair], &spec.true_t_lc, &opts, Stage::Fine).unwrap();
    assert!(est.iterations <= 2, "{} iterations", est.iterations);
    assert!(est.final_cost < 1e-12, "cost {}", est.final_cost);
    assert!(est.converged);
    assert!(est.transform.rotation_error_deg(&spec.true_t_lc) < 1e-9);
}

#[test]
fn photometric_truth_init_settles_in_two_iterations() {
    let spec = standard_scene("urban").unwrap().noiseless();
    let cfg = PreprocessConfig::default().mesh_config();
    let frames: Vec<StereoFrame> = render_sequence(&spec, 2, 0)
        .unwrap()
        .into_iter()
        .map(|f| StereoFrame {
            mesh: reconstruct_mesh_with(&f.scan, &cfg).unwrap(),
            left: f.img_left,
            right: f.img_right,
            timestamp: f.timestamp,
        })
        .collect();
    let full_opts = PhotometricOptions { levels: 1, ..PhotometricOptions::default() };
    let two_opts = PhotometricOptions { max_iterations: 2, ..full_opts };
    let full = calibrate_stereo_pair(&frames, &spec.true_t_lc, &spec.true_t_rl, &spec.camera, &full_opts).unwrap();
    let two = calibrate_stereo_pair(&frames, &spec.true_t_lc, &spec.true_t_rl, &spec.camera, &two_opts).unwrap();
    assert!(two.estimate.iterations <= 2);
    assert!(two.estimate.transform.rotation_error_deg(&full.estimate.transform) < 1e-3);
    assert!(two.estimate.transform.translation_error(&full.estimate.transform) < 1e-4);
    assert!((two.estimate.final_cost - full.estimate.final_cost).abs() < 1e-3 * full.estimate.final_cost);
    assert!(full.estimate.transform.rotation_error_deg(&spec.true_t_rl) < 0.01);
    assert!(full.estimate.transform.translation_error(&spec.true_t_rl) < 1e-3);
}
