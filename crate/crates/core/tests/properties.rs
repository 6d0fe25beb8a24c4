use nalgebra::{Matrix4, RowVector4, RowVector6, Vector2, Vector3, Vector6};
use proptest::prelude::*;

use lscalib::association::{associate, associate_brute_force, AssocConfig};
use lscalib::geometry::{se3_exp, se3_log, so3_exp, so3_log, Twist};
use lscalib::image::GrayImage;
use lscalib::mesh_recon::{disparity_point, SurfelCloud, TriangleMesh};
use lscalib::synthetic::standard_camera;
use lscalib::uncertainty::{extrinsic_covariance, lidar_point_covariance, LinearizedResidual, NoiseModel};
use lscalib::RigidTransform;

fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vector3<f64>> {
    (lo..hi, lo..hi, lo..hi).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = Vector3<f64>> {
    vec3(-1.0, 1.0).prop_filter("non-degenerate", |v| v.norm() > 0.1).prop_map(|v| v.normalize())
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (vec3(-1.5, 1.5), vec3(-5.0, 5.0)).prop_map(|(w, t)| se3_exp(&Twist::new(w, t)).unwrap())
}

fn twist(scale: f64) -> impl Strategy<Value = Vector6<f64>> {
    (vec3(-scale, scale), vec3(-scale, scale)).prop_map(|(w, t)| Vector6::new(w.x, w.y, w.z, t.x, t.y, t.z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exp_is_orthonormal(w in vec3(-3.0, 3.0)) {
        let r = so3_exp(&w);
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_inverts_exp(w in vec3(-1.7, 1.7)) {
        prop_assume!(w.norm() < 3.0);
        prop_assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-9);
    }

    #[test]
    fn se3_log_inverts_exp(t in transform()) {
        let back = se3_exp(&se3_log(&t)).unwrap();
        prop_assert!(back.rotation_error_deg(&t) < 1e-7);
        prop_assert!(back.translation_error(&t) < 1e-9);
    }

    #[test]
    fn inverse_composes_to_identity(t in transform(), p in vec3(-20.0, 20.0)) {
        let id = t.compose(&t.inverse());
        prop_assert!(id.rotation_error_deg(&RigidTransform::identity()) < 1e-7);
        prop_assert!((t.inverse().transform_point(&t.transform_point(&p)) - p).norm() < 1e-10);
    }

    #[test]
    fn local_difference_inverts_retract(t in transform(), d in twist(0.8)) {
        prop_assert!((t.local_difference(&t.retract(&d)) - d).norm() < 1e-9);
    }

    #[test]
    fn row_major_round_trip(t in transform()) {
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn errors_are_symmetric(a in transform(), b in transform()) {
        prop_assert!((a.rotation_error_deg(&b) - b.rotation_error_deg(&a)).abs() < 1e-8);
        prop_assert!(a.rotation_error_deg(&b) <= 180.0 + 1e-9);
        prop_assert!(a.translation_error(&a) == 0.0);
    }

    #[test]
    fn disparity_point_reprojects(u in 0.0..1240.0f64, v in 0.0..370.0f64, d in 1.0..200.0f64) {
        let k = standard_camera();
        let p = disparity_point(&k, u, v, d);
        prop_assert!(p.z > 0.0);
        prop_assert!((k.project(&p) - Vector2::new(u, v)).norm() < 1e-9);
        prop_assert!((p.z - k.fx * k.baseline / d).abs() < 1e-9 * p.z);
    }

    #[test]
    fn mesh_normals_face_sensor(c in vec3(-20.0, 20.0), a in unit(), b in unit(), s in 0.05..2.0f64) {
        prop_assume!(c.norm() > 1.0 && a.cross(&b).norm() > 0.2);
        let verts = vec![c, c + a * s, c + b * s];
        let mesh = TriangleMesh::from_triangles(verts, vec![[0, 1, 2]], 1e-9).unwrap();
        prop_assume!(!mesh.is_empty());
        let n = mesh.face_normals[0];
        prop_assert!((n.norm() - 1.0).abs() < 1e-9);
        prop_assert!(n.dot(&mesh.face_centroids[0]) <= 0.0);
        prop_assert!((mesh.face_centroids[0] - (c * 3.0 + a * s + b * s) / 3.0).norm() < 1e-9);
    }

    #[test]
    fn point_covariance_is_psd_and_scales(range in 0.5..80.0f64, dir in unit(), f in 0.1..5.0f64) {
        let nm = NoiseModel::default();
        let s = lidar_point_covariance(range, &dir, &nm);
        prop_assert!((s - s.transpose()).norm() < 1e-15);
        prop_assert!(s.symmetric_eigenvalues().min() > -1e-15);
        prop_assert!((dir.transpose() * s * dir)[0] - nm.sigma_range.powi(2) < 1e-12);
        let s2 = lidar_point_covariance(range, &dir, &nm.scaled(f));
        prop_assert!((s2 - s * f * f).norm() <= 1e-12 * s2.norm());
    }

    #[test]
    fn bilinear_hits_pixels_and_is_bounded(x in 0u32..15, y in 0u32..11, fx in 0.0..1.0f64, fy in 0.0..1.0f64, seed in 0u64..1000) {
        let (w, h) = (16u32, 12u32);
        let data: Vec<f32> = (0..w * h).map(|i| (((i as u64 * 2654435761 + seed) % 997) as f32) / 997.0).collect();
        let img = GrayImage::new(w, h, data.clone()).unwrap();
        let (at_pixel, _) = img.sample(&Vector2::new(x as f64, y as f64));
        prop_assert!((at_pixel - img.get(x, y)).abs() < 1e-12);
        let (v, _) = img.sample(&Vector2::new(x as f64 + fx, y as f64 + fy));
        let corners = [img.get(x, y), img.get(x + 1, y), img.get(x, (y + 1).min(h - 1)), img.get(x + 1, (y + 1).min(h - 1))];
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn tree_association_equals_brute_force(
        seed_pts in prop::collection::vec((vec3(-5.0, 5.0), unit()), 10..120),
        faces in prop::collection::vec((vec3(-5.0, 5.0), unit(), unit()), 3..60),
        omega in 0.0..3.0f64,
        hint in transform(),
    ) {
        let mut verts = Vec::new();
        let mut tri = Vec::new();
        for (c, a, b) in &faces {
            prop_assume!(a.cross(b).norm() > 0.1);
            let i = verts.len();
            verts.extend([*c, c + a * 0.3, c + b * 0.3]);
            tri.push([i, i + 1, i + 2]);
        }
        let mesh = TriangleMesh::from_triangles(verts, tri, 1e-9).unwrap();
        prop_assume!(!mesh.is_empty());
        let m = seed_pts.len();
        let cloud = SurfelCloud {
            points: seed_pts.iter().map(|p| p.0).collect(),
            normals: seed_pts.iter().map(|p| p.1).collect(),
            reliable: vec![true; m],
            source_pixels: vec![Vector2::zeros(); m],
            source_disparity: vec![1.0; m],
            ..SurfelCloud::default()
        };
        let cfg = AssocConfig { omega, max_cost: 4.0, transform_hint: hint };
        let tree = associate(&cloud, &mesh, &cfg).unwrap();
        let brute = associate_brute_force(&cloud, &mesh, &cfg);
        prop_assert_eq!(tree.len(), brute.len());
        for (a, b) in tree.iter().zip(&brute) {
            prop_assert_eq!((a.surfel_index, a.face_index), (b.surfel_index, b.face_index));
            prop_assert!((a.match_cost - b.match_cost).abs() <= 1e-12 * b.match_cost.max(1.0));
        }
    }

    #[test]
    fn covariance_scales_with_noise(
        rows in prop::collection::vec((twist(1.0), -1.0..1.0f64, 0.01..2.0f64), 8..40),
        f in 0.2..5.0f64,
    ) {
        let make = |scale: f64| -> Vec<LinearizedResidual> {
            rows.iter()
                .map(|(j, r, var)| LinearizedResidual {
                    res: *r,
                    j_t: RowVector6::from_iterator(j.iter().copied()),
                    j_w: RowVector4::new(0.0, 0.0, 0.0, 1.0),
                    sigma_w: Matrix4::from_diagonal(&nalgebra::Vector4::new(0.0, 0.0, 0.0, var * scale * scale)),
                })
                .collect()
        };
        let a = extrinsic_covariance(&make(1.0)).unwrap();
        let b = extrinsic_covariance(&make(f)).unwrap();
        prop_assert_eq!(a.unbounded_count, b.unbounded_count);
        let c = a.covariance * (f * f);
        prop_assert!((b.covariance - c).norm() <= 1e-8 * c.norm().max(1e-300));
        prop_assert!((a.covariance - a.covariance.transpose()).norm() <= 1e-9 * a.covariance.norm());
    }
}
