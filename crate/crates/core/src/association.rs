//! Normal-augmented nearest-neighbour association of stereo surfels to
//! LiDAR mesh faces.
//!
//! The matching cost between a surfel `(p_C, n_C)` and a face `(p_L, n_L)`
//! mapped into the camera frame stacks the position and normal differences:
//! `‖p_C − p_L‖² + ω² ‖n_C − n_L‖²`, the squared distance between the
//! 6-vectors `(p, ω n)`. An exact k-d tree answers it directly.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geometry::RigidTransform;
use crate::kdtree::KdTree;
use crate::mesh_recon::{SurfelCloud, TriangleMesh};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub surfel_index: usize,
    pub face_index: usize,
    pub match_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssocConfig {
    pub omega: f64,
    pub max_cost: f64,
    /// Maps mesh primitives (LiDAR frame) into the surfel frame.
    pub transform_hint: RigidTransform,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            max_cost: 1.0,
            transform_hint: RigidTransform::identity(),
        }
    }
}

/// Tunables shared by the solvers that re-associate every iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssocParams {
    pub omega: f64,
    pub max_cost: f64,
}

impl Default for AssocParams {
    fn default() -> Self {
        Self {
            omega: 0.5,
            max_cost: 1.0,
        }
    }
}

/// Search structure over one mesh, reusable across transform hints.
///
/// Keys are built once in the mesh frame. Because `T` is an isometry and
/// rotations preserve norms, searching for the transformed query
/// `(Rᵀ(p_C − t), ω Rᵀ n_C)` among untransformed keys gives the same costs as
/// transforming every face.
#[derive(Clone, Debug)]
pub struct FaceIndex {
    omega: f64,
    tree: KdTree<6>,
}

impl FaceIndex {
    pub fn new(mesh: &TriangleMesh, omega: f64) -> Result<Self> {
        if mesh.is_empty() {
            return Err(CalibError::invalid("mesh has no faces"));
        }
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(CalibError::invalid(format!("omega must be >= 0, got {omega}")));
        }
        let keys = mesh
            .face_centroids
            .iter()
            .zip(&mesh.face_normals)
            .map(|(c, n)| [c.x, c.y, c.z, omega * n.x, omega * n.y, omega * n.z])
            .collect();
        Ok(Self {
            omega,
            tree: KdTree::build(keys),
        })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Associates every usable surfel under `hint`, dropping costs above `max_cost`.
    pub fn associate(&self, cloud: &SurfelCloud, hint: &RigidTransform, max_cost: f64) -> Result<Vec<Correspondence>> {
        if cloud.is_empty() {
            return Err(CalibError::invalid("surfel cloud is empty"));
        }
        if !(max_cost > 0.0) {
            return Err(CalibError::invalid(format!("max_cost must be > 0, got {max_cost}")));
        }
        let use_normals = self.omega > 0.0;
        if use_normals && !cloud.has_normals() {
            return Err(CalibError::invalid("surfel normals must be estimated when omega > 0"));
        }
        let rt = hint.rotation().transpose();
        let t = hint.translation();
        let mut out = Vec::new();
        for (i, p) in cloud.points.iter().enumerate() {
            if use_normals && cloud.reliable.get(i) == Some(&false) {
                continue;
            }
            let q = rt * (p - t);
            let m = if use_normals {
                rt * cloud.normals[i] * self.omega
            } else {
                Vector3::zeros()
            };
            let Some(nb) = self.tree.nearest(&[q.x, q.y, q.z, m.x, m.y, m.z]) else {
                continue;
            };
            // with ω = 0 the normal block of every key is zero
            if nb.dist2 <= max_cost {
                out.push(Correspondence {
                    surfel_index: i,
                    face_index: nb.index,
                    match_cost: nb.dist2,
                });
            }
        }
        Ok(out)
    }
}

/// One-shot association (builds the search tree for this call).
pub fn associate(cloud: &SurfelCloud, mesh: &TriangleMesh, cfg: &AssocConfig) -> Result<Vec<Correspondence>> {
    if cloud.is_empty() {
        return Err(CalibError::invalid("surfel cloud is empty"));
    }
    FaceIndex::new(mesh, cfg.omega)?.associate(cloud, &cfg.transform_hint, cfg.max_cost)
}

/// Exhaustive reference implementation of [`associate`].
pub fn associate_brute_force(cloud: &SurfelCloud, mesh: &TriangleMesh, cfg: &AssocConfig) -> Vec<Correspondence> {
    let t = &cfg.transform_hint;
    let faces: Vec<(Vector3<f64>, Vector3<f64>)> = mesh
        .face_centroids
        .iter()
        .zip(&mesh.face_normals)
        .map(|(c, n)| (t.transform_point(c), t.rotate(n)))
        .collect();
    let mut out = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if cfg.omega > 0.0 && cloud.reliable.get(i) == Some(&false) {
            continue;
        }
        let n = if cfg.omega > 0.0 {
            cloud.normals[i]
        } else {
            Vector3::zeros()
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, (pl, nl)) in faces.iter().enumerate() {
            let nl = if cfg.omega > 0.0 { *nl } else { Vector3::zeros() };
            let cost = (p - pl).norm_squared() + cfg.omega * cfg.omega * (n - nl).norm_squared();
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((j, cost));
            }
        }
        if let Some((j, cost)) = best {
            if cost <= cfg.max_cost {
                out.push(Correspondence {
                    surfel_index: i,
                    face_index: j,
                    match_cost: cost,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    fn random_mesh(rng: &mut ChaCha8Rng, n: usize) -> TriangleMesh {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for i in 0..n {
            let c = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(4.0..12.0),
            );
            let a = unit(rng) * 0.2;
            let b = unit(rng) * 0.2;
            vertices.extend([c, c + a, c + b]);
            faces.push([3 * i, 3 * i + 1, 3 * i + 2]);
        }
        TriangleMesh::from_triangles(vertices, faces, 1e-8).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> SurfelCloud {
        let points: Vec<_> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(4.0..12.0),
                )
            })
            .collect();
        let normals = points
            .iter()
            .map(|p| {
                let n = unit(rng);
                if n.dot(p) > 0.0 {
                    -n
                } else {
                    n
                }
            })
            .collect();
        SurfelCloud {
            reliable: (0..n).map(|i| i % 17 != 0).collect(),
            source_pixels: vec![Vector2::zeros(); n],
            source_disparity: vec![1.0; n],
            points,
            normals,
            ..Default::default()
        }
    }

    #[test]
    fn tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mesh = random_mesh(&mut rng, 800);
        let cloud = random_cloud(&mut rng, 600);
        for omega in [0.0, 0.5, 2.0] {
            let hint = se3_exp(&Twist::new(Vector3::new(0.05, -0.02, 0.1), Vector3::new(0.3, -0.2, 0.1))).unwrap();
            let cfg = AssocConfig {
                omega,
                max_cost: 1e9,
                transform_hint: hint,
            };
            let fast = associate(&cloud, &mesh, &cfg).unwrap();
            let slow = associate_brute_force(&cloud, &mesh, &cfg);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert_eq!(a.surfel_index, b.surfel_index);
                assert_eq!(a.face_index, b.face_index);
                assert!((a.match_cost - b.match_cost).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn omega_zero_is_euclidean_nearest_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mesh = random_mesh(&mut rng, 300);
        let mut cloud = random_cloud(&mut rng, 200);
        cloud.normals.clear();
        let cfg = AssocConfig {
            omega: 0.0,
            max_cost: 1e9,
            transform_hint: RigidTransform::identity(),
        };
        let got = associate(&cloud, &mesh, &cfg).unwrap();
        assert_eq!(got.len(), cloud.len());
        for c in got {
            let p = cloud.points[c.surfel_index];
            let best = (0..mesh.len())
                .min_by(|&a, &b| {
                    (mesh.face_centroids[a] - p)
                        .norm_squared()
                        .total_cmp(&(mesh.face_centroids[b] - p).norm_squared())
                })
                .unwrap();
            assert_eq!(c.face_index, best);
        }
    }

    #[test]
    fn raising_max_cost_keeps_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mesh = random_mesh(&mut rng, 200);
        let cloud = random_cloud(&mut rng, 300);
        let index = FaceIndex::new(&mesh, 0.5).unwrap();
        let hint = RigidTransform::identity();
        let mut prev: Vec<(usize, usize)> = Vec::new();
        for max_cost in [0.05, 0.2, 0.5, 1.0, 4.0] {
            let now: Vec<_> = index
                .associate(&cloud, &hint, max_cost)
                .unwrap()
                .iter()
                .map(|c| (c.surfel_index, c.face_index))
                .collect();
            assert!(prev.iter().all(|p| now.contains(p)));
            prev = now;
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mesh = random_mesh(&mut rng, 5);
        let cloud = random_cloud(&mut rng, 5);
        let cfg = AssocConfig::default();
        assert!(associate(&SurfelCloud::default(), &mesh, &cfg).is_err());
        assert!(associate(&cloud, &TriangleMesh::default(), &cfg).is_err());
    }
}
