//! Sensor noise models and first-order propagation into the extrinsic
//! covariance.

use nalgebra::{Matrix3, Matrix4, Matrix6, RowVector4, RowVector6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::association::Correspondence;
use crate::error::{CalibError, Result};
use crate::geometry::RigidTransform;
use crate::mesh_recon::{disparity_point, disparity_point_derivative, CameraIntrinsics, SurfelCloud, TriangleMesh};

/// Standard deviations of the LiDAR range, LiDAR beam direction and stereo disparity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma_range: f64,
    pub sigma_beam: f64,
    pub sigma_disparity: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_range: 0.02,
            sigma_beam: 0.001,
            sigma_disparity: 0.5,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.sigma_range, self.sigma_beam, self.sigma_disparity]
            .iter()
            .all(|s| *s >= 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(CalibError::invalid(format!("noise std devs must be >= 0: {self:?}")))
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            sigma_range: self.sigma_range * factor,
            sigma_beam: self.sigma_beam * factor,
            sigma_disparity: self.sigma_disparity * factor,
        }
    }
}

/// Covariance of a LiDAR return at `range` along unit `direction`.
///
/// The measurement is `(d + w_d)(ω + ⌊ω⌋ N w_l)` with `N` a tangent basis of
/// `ω`; to first order this gives `σ_d² ω ωᵀ + d² σ_l² (I − ω ωᵀ)`, which is
/// independent of the chosen basis.
pub fn lidar_point_covariance(range: f64, direction: &Vector3<f64>, nm: &NoiseModel) -> Matrix3<f64> {
    let wwt = direction * direction.transpose();
    let beam = range * range * nm.sigma_beam * nm.sigma_beam;
    wwt * (nm.sigma_range * nm.sigma_range) + (Matrix3::identity() - wwt) * beam
}

/// First-order model of one fine-stage residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearizedResidual {
    pub res: f64,
    pub j_t: RowVector6<f64>,
    /// With respect to (LiDAR point noise, disparity noise).
    pub j_w: RowVector4<f64>,
    pub sigma_w: Matrix4<f64>,
}

impl LinearizedResidual {
    /// Propagated residual variance `J_w Σ_w J_wᵀ`.
    pub fn variance(&self) -> f64 {
        (self.j_w * self.sigma_w * self.j_w.transpose())[(0, 0)]
    }
}

/// Fine residual `(R n)ᵀ (R p + t − s)` and its Jacobian with respect to the
/// increment `[θ, ρ]`. `None` for a zero-norm normal.
///
/// The rotation block is `((s − t) × R n)ᵀ`, which equals `nᵀ(−⌊R p⌋)` with
/// the camera-frame normal plus the normal-rotation term `(R n) × (R p + t − s)`.
pub fn point_to_plane(
    t: &RigidTransform,
    p_l: &Vector3<f64>,
    n_l: &Vector3<f64>,
    s: &Vector3<f64>,
) -> Option<(f64, RowVector6<f64>)> {
    let norm = n_l.norm();
    if !(norm > 1e-12) {
        return None;
    }
    let n_c = t.rotate(n_l) / norm;
    let q = t.transform_point(p_l);
    let r = n_c.dot(&(q - s));
    let rot = (s - t.translation()).cross(&n_c);
    Some((r, RowVector6::new(rot.x, rot.y, rot.z, n_c.x, n_c.y, n_c.z)))
}

/// Linearizes one correspondence for covariance propagation.
pub fn linearize_residual(
    corr: &Correspondence,
    mesh: &TriangleMesh,
    surfels: &SurfelCloud,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    nm: &NoiseModel,
) -> Option<LinearizedResidual> {
    let d = surfels.source_disparity[corr.surfel_index];
    if !(d > 0.0 && d.is_finite()) {
        return None;
    }
    let px = surfels.source_pixels[corr.surfel_index];
    let p_l = mesh.face_centroids[corr.face_index];
    let n_l = mesh.face_normals[corr.face_index];
    let s = disparity_point(k, px.x, px.y, d);
    let (res, j_t) = point_to_plane(t, &p_l, &n_l, &s)?;
    let n_l = n_l.normalize();
    let n_c = t.rotate(&n_l);
    let dfdd = disparity_point_derivative(k, px.x, px.y, d);
    // nᵀR is the camera-frame normal pulled back to the LiDAR frame
    let j_w = RowVector4::new(n_l.x, n_l.y, n_l.z, -n_c.dot(&dfdd));
    let range = p_l.norm();
    if !(range > 0.0) {
        return None;
    }
    let mut sigma_w = Matrix4::zeros();
    sigma_w
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&lidar_point_covariance(range, &(p_l / range), nm));
    sigma_w[(3, 3)] = nm.sigma_disparity * nm.sigma_disparity;
    Some(LinearizedResidual {
        res,
        j_t,
        j_w,
        sigma_w,
    })
}

/// Relative eigenvalue threshold below which information directions count as null.
pub const NULL_SPACE_RTOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    /// Row-major 6×6, rotation block first.
    pub covariance: Matrix6<f64>,
    pub information: Matrix6<f64>,
    pub std_devs: Vector6<f64>,
    /// Unit twist directions with (near-)zero information.
    pub null_directions: Vec<Vector6<f64>>,
    pub unbounded_count: usize,
    /// Per-axis flag: the axis lies mostly in the null space.
    pub unbounded: [bool; 6],
    /// Largest over smallest retained eigenvalue.
    pub condition_number: f64,
    pub residuals_used: usize,
    pub residuals_skipped: usize,
}

/// Extrinsic covariance `[Σ J_Tᵀ (J_w Σ_w J_wᵀ)⁻¹ J_T]⁻¹`, pseudo-inverted
/// across near-null directions.
pub fn extrinsic_covariance(lin: &[LinearizedResidual]) -> Result<CovarianceReport> {
    if lin.len() < 6 {
        return Err(CalibError::InsufficientConstraints {
            found: lin.len(),
            required: 6,
        });
    }
    let mut info = Matrix6::zeros();
    let mut skipped = 0;
    for l in lin {
        let var = l.variance();
        if !(var > 0.0 && var.is_finite()) {
            skipped += 1;
            continue;
        }
        info += l.j_t.transpose() * l.j_t / var;
    }
    let mut report = covariance_from_information(&info)?;
    report.residuals_used = lin.len() - skipped;
    report.residuals_skipped = skipped;
    Ok(report)
}

/// Pseudo-inverse of an information matrix with null-direction flagging.
pub fn covariance_from_information(info: &Matrix6<f64>) -> Result<CovarianceReport> {
    if info.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::invalid("information matrix is not finite"));
    }
    let info = (info + info.transpose()) * 0.5;
    let max_abs = info.amax();
    // normalize by a power of two so scaled inputs decompose identically
    let scale = if max_abs > 0.0 {
        2f64.powi(max_abs.log2().floor() as i32)
    } else {
        1.0
    };
    let eig = SymmetricEigen::new(info / scale);
    let lmax = eig.eigenvalues.max().max(0.0);
    let mut cov = Matrix6::zeros();
    let mut null_directions = Vec::new();
    let mut lmin_kept = f64::INFINITY;
    for i in 0..6 {
        let l = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i).into_owned();
        if lmax == 0.0 || l < NULL_SPACE_RTOL * lmax {
            null_directions.push(v);
        } else {
            cov += v * v.transpose() / l;
            lmin_kept = lmin_kept.min(l);
        }
    }
    cov /= scale;
    let cov = (cov + cov.transpose()) * 0.5;
    null_directions.sort_by(|a, b| canonical_key(a).total_cmp(&canonical_key(b)));
    let null_directions: Vec<Vector6<f64>> = null_directions.into_iter().map(canonical_sign).collect();
    let mut unbounded = [false; 6];
    for (axis, flag) in unbounded.iter_mut().enumerate() {
        let proj2: f64 = null_directions.iter().map(|v| v[axis] * v[axis]).sum();
        *flag = proj2.sqrt() > 0.5;
    }
    let condition_number = if lmin_kept.is_finite() { lmax / lmin_kept } else { 0.0 };
    Ok(CovarianceReport {
        std_devs: cov.diagonal().map(|v| v.max(0.0).sqrt()),
        covariance: cov,
        information: info,
        unbounded_count: null_directions.len(),
        null_directions,
        unbounded,
        condition_number,
        residuals_used: 0,
        residuals_skipped: 0,
    })
}

fn canonical_key(v: &Vector6<f64>) -> f64 {
    // order null directions by their dominant axis
    -(v.iamax() as f64)
}

fn canonical_sign(v: Vector6<f64>) -> Vector6<f64> {
    if v[v.iamax()] < 0.0 {
        -v
    } else {
        v
    }
}

/// Elementwise ratio of two 6×6 covariances with zero-denominator flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub ratio: Matrix6<f64>,
    pub rotation_block: Matrix3<f64>,
    pub translation_block: Matrix3<f64>,
    /// Row-major flags for entries where the denominator vanished.
    pub zero_denominator: Vec<bool>,
}

pub fn uncertainty_ratio(a: &Matrix6<f64>, b: &Matrix6<f64>) -> RatioReport {
    let mut ratio = Matrix6::zeros();
    let mut zero = vec![false; 36];
    for i in 0..6 {
        for j in 0..6 {
            let den = b[(i, j)];
            if den == 0.0 || !den.is_finite() {
                zero[i * 6 + j] = true;
                ratio[(i, j)] = 0.0;
            } else {
                ratio[(i, j)] = a[(i, j)] / den;
            }
        }
    }
    RatioReport {
        rotation_block: ratio.fixed_view::<3, 3>(0, 0).into_owned(),
        translation_block: ratio.fixed_view::<3, 3>(3, 3).into_owned(),
        ratio,
        zero_denominator: zero,
    }
}

/// Formats a ratio report as two labelled 3×3 blocks.
pub fn format_ratio(report: &RatioReport) -> String {
    let mut out = String::new();
    for (name, block) in [("Sigma_R", &report.rotation_block), ("Sigma_T", &report.translation_block)] {
        out.push_str(name);
        out.push_str(":\n");
        for i in 0..3 {
            let row: Vec<String> = (0..3).map(|j| format!("{:>12.4}", block[(i, j)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, tangent_basis, Twist};
    use nalgebra::{Matrix3x2, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn kcam() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 720.0,
            fy: 710.0,
            cx: 320.0,
            cy: 240.0,
            baseline: 0.54,
            width: 640,
            height: 480,
        }
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let g = Normal::new(0.0, 1.0).unwrap();
        Vector3::new(g.sample(rng), g.sample(rng), g.sample(rng)).normalize()
    }

    /// Literal `J diag(σ_d², σ_l² I₂) Jᵀ` with `J = [ω, −d⌊ω⌋N]`.
    fn jacobian_form(d: f64, w: &Vector3<f64>, nm: &NoiseModel) -> Matrix3<f64> {
        let n: Matrix3x2<f64> = tangent_basis(w).unwrap();
        let wx = crate::geometry::skew(w);
        let mut j = nalgebra::Matrix3::zeros();
        j.set_column(0, w);
        let tb = -d * wx * n;
        j.set_column(1, &tb.column(0));
        j.set_column(2, &tb.column(1));
        let s = Matrix3::from_diagonal(&Vector3::new(
            nm.sigma_range.powi(2),
            nm.sigma_beam.powi(2),
            nm.sigma_beam.powi(2),
        ));
        j * s * j.transpose()
    }

    #[test]
    fn covariance_matches_jacobian_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nm = NoiseModel::default();
        for _ in 0..200 {
            let w = random_unit(&mut rng);
            let d = rng.random_range(1.0..60.0);
            let a = lidar_point_covariance(d, &w, &nm);
            let b = jacobian_form(d, &w, &nm);
            assert!((a - b).amax() < 1e-15 + 1e-12 * b.amax());
        }
    }

    #[test]
    fn beam_free_is_rank_one() {
        let nm = NoiseModel {
            sigma_beam: 0.0,
            ..NoiseModel::default()
        };
        let w = Vector3::new(1.0, 2.0, 2.0) / 3.0;
        let c = lidar_point_covariance(10.0, &w, &nm);
        assert!((c - w * w.transpose() * 0.0004).amax() < 1e-18);
    }

    #[test]
    fn eigenvalues_are_range_and_beam() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nm = NoiseModel::default();
        for _ in 0..50 {
            let w = random_unit(&mut rng);
            let d = rng.random_range(1.0..60.0);
            let mut ev: Vec<f64> = SymmetricEigen::new(lidar_point_covariance(d, &w, &nm))
                .eigenvalues
                .iter()
                .copied()
                .collect();
            ev.sort_by(f64::total_cmp);
            let beam = (d * nm.sigma_beam).powi(2);
            let mut expect = [nm.sigma_range.powi(2), beam, beam];
            expect.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nm = NoiseModel::default();
        for _ in 0..100 {
            let w = random_unit(&mut rng);
            let r = crate::geometry::so3_exp(&(random_unit(&mut rng) * rng.random_range(0.0..3.0)));
            let a = lidar_point_covariance(20.0, &(r * w), &nm);
            let b = r * lidar_point_covariance(20.0, &w, &nm) * r.transpose();
            assert!((a - b).amax() < 1e-12);
        }
    }

    fn surfels_for(points: &[(f64, f64, f64)], k: &CameraIntrinsics) -> SurfelCloud {
        let mut cloud = SurfelCloud::default();
        for &(u, v, d) in points {
            cloud.points.push(disparity_point(k, u, v, d));
            cloud.source_pixels.push(Vector2::new(u, v));
            cloud.source_disparity.push(d);
        }
        cloud
    }

    fn single_face(c: Vector3<f64>, n: Vector3<f64>) -> TriangleMesh {
        let n = n.normalize();
        let b = tangent_basis(&n).unwrap();
        let e1 = b.column(0).into_owned() * 0.3;
        let e2 = b.column(1).into_owned() * 0.3;
        let (a, bb, cc) = (c - e1 - e2, c + 2.0 * e1 - e2, c - e1 + 2.0 * e2);
        TriangleMesh::from_triangles(vec![a, bb, cc], vec![[0, 1, 2]], 1e-9).unwrap()
    }

    #[test]
    fn j_w_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = kcam();
        let nm = NoiseModel::default();
        for _ in 0..100 {
            let t = se3_exp(&Twist::new(random_unit(&mut rng) * 0.3, random_unit(&mut rng) * 0.5)).unwrap();
            let (u, v, d) = (
                rng.random_range(50.0..590.0),
                rng.random_range(50.0..430.0),
                rng.random_range(8.0..60.0),
            );
            let s = disparity_point(&k, u, v, d);
            let p_l = t.inverse().transform_point(&(s + random_unit(&mut rng) * 0.2));
            let n_l = -p_l.normalize() + random_unit(&mut rng) * 0.3;
            let mesh = single_face(p_l, n_l);
            let cloud = surfels_for(&[(u, v, d)], &k);
            let corr = Correspondence {
                surfel_index: 0,
                face_index: 0,
                match_cost: 0.0,
            };
            let lin = linearize_residual(&corr, &mesh, &cloud, &t, &k, &nm).unwrap();
            let res_at = |dp: Vector3<f64>, dd: f64| {
                let s = disparity_point(&k, u, v, d + dd);
                point_to_plane(&t, &(mesh.face_centroids[0] + dp), &mesh.face_normals[0], &s)
                    .unwrap()
                    .0
            };
            let h = 1e-6;
            let mut fd = RowVector4::zeros();
            for i in 0..3 {
                let mut e = Vector3::zeros();
                e[i] = h;
                fd[i] = (res_at(e, 0.0) - res_at(-e, 0.0)) / (2.0 * h);
            }
            let hd = 1e-6 * d;
            fd[3] = (res_at(Vector3::zeros(), hd) - res_at(Vector3::zeros(), -hd)) / (2.0 * hd);
            for i in 0..4 {
                assert!(
                    (fd[i] - lin.j_w[i]).abs() <= 1e-5 * lin.j_w.amax(),
                    "{fd} vs {}",
                    lin.j_w
                );
            }
        }
    }

    fn plane_residuals(normals: &[Vector3<f64>], nm: &NoiseModel) -> Vec<LinearizedResidual> {
        let k = kcam();
        let t = RigidTransform::identity();
        let mut out = Vec::new();
        for n in normals {
            for iu in 0..6 {
                for iv in 0..6 {
                    let u = 100.0 + 80.0 * iu as f64;
                    let v = 60.0 + 70.0 * iv as f64;
                    // intersect the pixel ray with the plane n·x = -10
                    let ray = k.unproject_unit_depth(u, v);
                    let z = -10.0 / n.dot(&ray);
                    if z <= 0.0 {
                        continue;
                    }
                    let p = ray * z;
                    let d = k.fx * k.baseline / z;
                    let mesh = single_face(p, *n);
                    let cloud = surfels_for(&[(u, v, d)], &k);
                    let corr = Correspondence {
                        surfel_index: 0,
                        face_index: 0,
                        match_cost: 0.0,
                    };
                    out.push(linearize_residual(&corr, &mesh, &cloud, &t, &k, nm).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn single_plane_has_three_null_directions() {
        let lin = plane_residuals(&[Vector3::new(0.0, 0.0, -1.0)], &NoiseModel::default());
        let rep = extrinsic_covariance(&lin).unwrap();
        assert_eq!(rep.unbounded_count, 3);
        // in-plane translations and rotation about the normal
        assert_eq!(rep.unbounded, [false, false, true, true, true, false]);
    }

    #[test]
    fn doubling_noise_quadruples_covariance_exactly() {
        let normals = [
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(0.6, 0.0, -0.8),
            Vector3::new(0.0, -0.7, -0.71),
        ];
        let nm = NoiseModel::default();
        let a = extrinsic_covariance(&plane_residuals(&normals, &nm)).unwrap();
        let b = extrinsic_covariance(&plane_residuals(&normals, &nm.scaled(2.0))).unwrap();
        assert_eq!(a.unbounded_count, 0);
        assert_eq!(b.covariance, a.covariance * 4.0);
    }

    #[test]
    fn adding_a_plane_never_increases_variance() {
        let nm = NoiseModel::default();
        let base = [Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.6, 0.0, -0.8)];
        let more = [base[0], base[1], Vector3::new(0.0, -0.7, -0.71)];
        let a = extrinsic_covariance(&plane_residuals(&base, &nm)).unwrap();
        let b = extrinsic_covariance(&plane_residuals(&more, &nm)).unwrap();
        for i in 0..6 {
            if !a.unbounded[i] {
                assert!(b.covariance[(i, i)] <= a.covariance[(i, i)] * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let normals = [Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.5, 0.5, -0.7)];
        let rep = extrinsic_covariance(&plane_residuals(&normals, &NoiseModel::default())).unwrap();
        assert_eq!(rep.covariance, rep.covariance.transpose());
        assert!(SymmetricEigen::new(rep.covariance).eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn ratio_blocks() {
        let a = Matrix6::from_fn(|i, j| 1.0 + (i * 6 + j) as f64);
        let r = uncertainty_ratio(&a, &a);
        assert!(r.ratio.iter().all(|v| *v == 1.0));
        let r4 = uncertainty_ratio(&(a * 4.0), &a);
        assert!(r4.ratio.iter().all(|v| *v == 4.0));
        let mut b = a;
        b[(0, 1)] = 0.0;
        assert!(uncertainty_ratio(&a, &b).zero_denominator[1]);
        assert!(format_ratio(&r).starts_with("Sigma_R:"));
    }

    #[test]
    fn too_few_residuals() {
        let lin = plane_residuals(&[Vector3::new(0.0, 0.0, -1.0)], &NoiseModel::default());
        assert!(extrinsic_covariance(&lin[..5]).is_err());
    }
}
