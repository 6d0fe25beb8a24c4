//! Geometric primitives built from raw measurements: stereo surfels from
//! disparity, triangle meshes from organized LiDAR scans, and normals.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::kdtree::KdTree;

/// Pinhole intrinsics of a rectified stereo pair (left camera).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.baseline > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(CalibError::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Ray through pixel `(u, v)` scaled to unit depth.
    pub fn unproject_unit_depth(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics of an image downsampled by `2^level` (pixel centers at integers).
    pub fn scaled(&self, level: u32) -> Self {
        let s = 0.5f64.powi(level as i32);
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
            baseline: self.baseline,
            width: self.width >> level,
            height: self.height >> level,
        }
    }

    pub fn with_baseline(&self, baseline: f64) -> Self {
        Self { baseline, ..*self }
    }

    pub fn contains(&self, px: &Vector2<f64>, margin: f64) -> bool {
        px.x >= margin
            && px.y >= margin
            && px.x <= self.width as f64 - 1.0 - margin
            && px.y <= self.height as f64 - 1.0 - margin
    }
}

/// Dense disparity image; values `≤ 0` mark invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DisparityImage {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(CalibError::invalid("disparity buffer size mismatch"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        let d = self.values[(v * self.width + u) as usize];
        (d > 0.0 && d < self.width as f64).then_some(d)
    }
}

/// LiDAR returns on a beam-row × azimuth-column grid. Range 0 marks no return.
#[derive(Clone, Debug, PartialEq)]
pub struct OrganizedScan {
    pub rows: u32,
    pub cols: u32,
    pub ranges: Vec<f64>,
    pub directions: Vec<Vector3<f64>>,
}

impl OrganizedScan {
    pub fn new(rows: u32, cols: u32, ranges: Vec<f64>, directions: Vec<Vector3<f64>>) -> Result<Self> {
        let n = rows as usize * cols as usize;
        if ranges.len() != n || directions.len() != n {
            return Err(CalibError::invalid("scan buffer size mismatch"));
        }
        Ok(Self {
            rows,
            cols,
            ranges,
            directions,
        })
    }

    pub fn index(&self, row: u32, col: u32) -> usize {
        (row * self.cols + col) as usize
    }

    /// Point of a cell, `None` for missing returns.
    pub fn point(&self, row: u32, col: u32) -> Option<Vector3<f64>> {
        let i = self.index(row, col);
        let r = self.ranges[i];
        (r > 0.0 && r.is_finite()).then(|| self.directions[i] * r)
    }

    pub fn valid_count(&self) -> usize {
        self.ranges.iter().filter(|r| **r > 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MeshDiagnostics {
    /// No face survived reconstruction.
    pub empty: bool,
    pub rejected_range_jump: usize,
    pub rejected_edge: usize,
    pub rejected_area: usize,
}

/// Triangle mesh with per-face unit normals (facing the sensor origin) and centroids.
#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub face_normals: Vec<Vector3<f64>>,
    pub face_centroids: Vec<Vector3<f64>>,
    pub diagnostics: MeshDiagnostics,
}

impl TriangleMesh {
    /// Builds a mesh from raw triangles, dropping faces with area `≤ area_min`
    /// and orienting normals toward the origin.
    pub fn from_triangles(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>, area_min: f64) -> Result<Self> {
        let mut mesh = TriangleMesh {
            vertices,
            ..Default::default()
        };
        for f in faces {
            if f.iter().any(|&i| i >= mesh.vertices.len()) {
                return Err(CalibError::invalid(format!("face {f:?} out of range")));
            }
            if !mesh.push_face(f, area_min) {
                mesh.diagnostics.rejected_area += 1;
            }
        }
        mesh.diagnostics.empty = mesh.faces.is_empty();
        Ok(mesh)
    }

    fn push_face(&mut self, f: [usize; 3], area_min: f64) -> bool {
        let [a, b, c] = f.map(|i| self.vertices[i]);
        let cross = (b - a).cross(&(c - a));
        let area = 0.5 * cross.norm();
        if !(area > area_min) {
            return false;
        }
        let centroid = (a + b + c) / 3.0;
        let mut n = cross / (2.0 * area);
        if n.dot(&centroid) > 0.0 {
            n = -n;
        }
        self.faces.push(f);
        self.face_normals.push(n);
        self.face_centroids.push(centroid);
        true
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_vertices(&self, face: usize) -> [Vector3<f64>; 3] {
        self.faces[face].map(|i| self.vertices[i])
    }

    /// Keeps only the faces for which `keep(face_index)` holds.
    pub fn retain_faces(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let mut w = 0;
        for i in 0..self.faces.len() {
            if keep(i) {
                self.faces.swap(w, i);
                self.face_normals.swap(w, i);
                self.face_centroids.swap(w, i);
                w += 1;
            }
        }
        self.faces.truncate(w);
        self.face_normals.truncate(w);
        self.face_centroids.truncate(w);
        self.diagnostics.empty = self.faces.is_empty();
    }

    /// Checks every mesh invariant.
    pub fn validate(&self, area_min: f64) -> std::result::Result<(), String> {
        let n = self.faces.len();
        if self.face_normals.len() != n || self.face_centroids.len() != n {
            return Err("per-face arrays have inconsistent lengths".into());
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= self.vertices.len()) {
                return Err(format!("face {i} index out of range"));
            }
            let [a, b, c] = self.face_vertices(i);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            if !(area > area_min) {
                return Err(format!("face {i} degenerate (area {area:e})"));
            }
            let mean = (a + b + c) / 3.0;
            if (mean - self.face_centroids[i]).amax() > 1e-9 {
                return Err(format!("face {i} centroid mismatch"));
            }
            let nrm = self.face_normals[i];
            if (nrm.norm() - 1.0).abs() > 1e-6 {
                return Err(format!("face {i} normal not unit"));
            }
            if nrm.dot(&self.face_centroids[i]) >= 0.0 {
                return Err(format!("face {i} normal not facing the sensor"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CloudDiagnostics {
    /// No valid disparity produced a point.
    pub empty: bool,
    pub invalid_disparity: usize,
    pub outside_depth_window: usize,
}

/// Stereo-derived points in the left-camera frame.
#[derive(Clone, Debug, Default)]
pub struct SurfelCloud {
    pub points: Vec<Vector3<f64>>,
    /// Empty until [`estimate_point_normals`] runs.
    pub normals: Vec<Vector3<f64>>,
    /// `false` for surfels whose local neighbourhood is not planar enough.
    pub reliable: Vec<bool>,
    pub source_pixels: Vec<Vector2<f64>>,
    pub source_disparity: Vec<f64>,
    pub diagnostics: CloudDiagnostics,
}

impl SurfelCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.len() == self.points.len() && !self.points.is_empty()
    }

    /// Keeps every `step`-th surfel, preserving order.
    pub fn decimate(&self, max_len: usize) -> SurfelCloud {
        if self.len() <= max_len || max_len == 0 {
            return self.clone();
        }
        let keep: Vec<usize> = (0..max_len).map(|i| i * self.len() / max_len).collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> SurfelCloud {
        let pick = |v: &Vec<Vector3<f64>>| -> Vec<Vector3<f64>> {
            if v.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| v[i]).collect()
            }
        };
        SurfelCloud {
            points: pick(&self.points),
            normals: pick(&self.normals),
            reliable: if self.reliable.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.reliable[i]).collect()
            },
            source_pixels: indices.iter().map(|&i| self.source_pixels[i]).collect(),
            source_disparity: indices.iter().map(|&i| self.source_disparity[i]).collect(),
            diagnostics: self.diagnostics,
        }
    }
}

/// Valid depth interval for stereo points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthWindow {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthWindow {
    fn default() -> Self {
        Self { min: 0.5, max: 80.0 }
    }
}

/// Stereo point for pixel `(u, v)` with disparity `d`.
pub fn disparity_point(k: &CameraIntrinsics, u: f64, v: f64, d: f64) -> Vector3<f64> {
    let z = k.fx * k.baseline / d;
    Vector3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
}

/// Derivative of [`disparity_point`] with respect to the disparity.
pub fn disparity_point_derivative(k: &CameraIntrinsics, u: f64, v: f64, d: f64) -> Vector3<f64> {
    let dz = -k.fx * k.baseline / (d * d);
    Vector3::new((u - k.cx) * dz / k.fx, (v - k.cy) * dz / k.fy, dz)
}

/// Converts a disparity image into stereo points on a `stride` pixel grid.
pub fn disparity_to_points(d: &DisparityImage, k: &CameraIntrinsics, stride: u32) -> Result<SurfelCloud> {
    disparity_to_points_in(d, k, stride, DepthWindow::default())
}

pub fn disparity_to_points_in(
    d: &DisparityImage,
    k: &CameraIntrinsics,
    stride: u32,
    window: DepthWindow,
) -> Result<SurfelCloud> {
    k.validate()?;
    if stride == 0 {
        return Err(CalibError::invalid("stride must be at least 1"));
    }
    let mut cloud = SurfelCloud::default();
    for v in (0..d.height).step_by(stride as usize) {
        for u in (0..d.width).step_by(stride as usize) {
            let Some(disp) = d.get(u, v) else {
                cloud.diagnostics.invalid_disparity += 1;
                continue;
            };
            let p = disparity_point(k, u as f64, v as f64, disp);
            if p.z < window.min || p.z > window.max {
                cloud.diagnostics.outside_depth_window += 1;
                continue;
            }
            cloud.points.push(p);
            cloud.source_pixels.push(Vector2::new(u as f64, v as f64));
            cloud.source_disparity.push(disp);
        }
    }
    cloud.diagnostics.empty = cloud.points.is_empty();
    Ok(cloud)
}

/// Thresholds for range-image triangulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub max_edge: f64,
    pub max_range_jump: f64,
    pub area_min: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            max_edge: 1.0,
            max_range_jump: 0.5,
            area_min: 1e-6,
        }
    }
}

/// Triangulates an organized scan using its grid adjacency.
///
/// Each 2×2 block of valid cells whose ranges differ pairwise by less than
/// `max_range_jump` and whose triangle edges are shorter than `max_edge`
/// yields two triangles.
pub fn reconstruct_mesh(scan: &OrganizedScan, max_edge: f64, max_range_jump: f64) -> Result<TriangleMesh> {
    reconstruct_mesh_with(
        scan,
        &MeshConfig {
            max_edge,
            max_range_jump,
            ..MeshConfig::default()
        },
    )
}

pub fn reconstruct_mesh_with(scan: &OrganizedScan, cfg: &MeshConfig) -> Result<TriangleMesh> {
    if scan.rows < 2 || scan.cols < 2 {
        return Err(CalibError::invalid("scan must be at least 2x2"));
    }
    let mut vertex_of = vec![usize::MAX; scan.ranges.len()];
    let mut vertices = Vec::new();
    for row in 0..scan.rows {
        for col in 0..scan.cols {
            if let Some(p) = scan.point(row, col) {
                vertex_of[scan.index(row, col)] = vertices.len();
                vertices.push(p);
            }
        }
    }
    let mut mesh = TriangleMesh {
        vertices,
        ..Default::default()
    };
    for row in 0..scan.rows - 1 {
        for col in 0..scan.cols - 1 {
            let cells = [
                scan.index(row, col),
                scan.index(row + 1, col),
                scan.index(row, col + 1),
                scan.index(row + 1, col + 1),
            ];
            if cells.iter().any(|&c| vertex_of[c] == usize::MAX) {
                continue;
            }
            let ranges = cells.map(|c| scan.ranges[c]);
            let (lo, hi) = ranges
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
            if hi - lo >= cfg.max_range_jump {
                mesh.diagnostics.rejected_range_jump += 1;
                continue;
            }
            let [a, b, c, d] = cells.map(|c| vertex_of[c]);
            let pos = |i: usize| mesh.vertices[i];
            let edges = [(a, b), (a, c), (b, c), (b, d), (c, d)];
            if edges.iter().any(|&(i, j)| (pos(i) - pos(j)).norm() >= cfg.max_edge) {
                mesh.diagnostics.rejected_edge += 1;
                continue;
            }
            for tri in [[a, b, c], [b, d, c]] {
                if !mesh.push_face(tri, cfg.area_min) {
                    mesh.diagnostics.rejected_area += 1;
                }
            }
        }
    }
    mesh.diagnostics.empty = mesh.faces.is_empty();
    Ok(mesh)
}

/// Eigenvalue ratio (smallest / middle) above which a neighbourhood is not planar.
pub const PLANARITY_RATIO_MAX: f64 = 0.5;

/// Estimates sensor-facing normals from the `k_neighbors` nearest points.
///
/// The normal is the eigenvector of the smallest eigenvalue of the
/// neighbourhood scatter matrix. Surfels whose smallest/middle eigenvalue
/// ratio exceeds [`PLANARITY_RATIO_MAX`] are marked unreliable.
pub fn estimate_point_normals(cloud: &SurfelCloud, k_neighbors: usize) -> Result<SurfelCloud> {
    if k_neighbors < 5 {
        return Err(CalibError::invalid("k_neighbors must be at least 5"));
    }
    if cloud.len() < k_neighbors {
        return Err(CalibError::invalid(format!(
            "cloud has {} points, fewer than k_neighbors = {k_neighbors}",
            cloud.len()
        )));
    }
    let tree = KdTree::build(cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect());
    let mut out = cloud.clone();
    out.normals = Vec::with_capacity(cloud.len());
    out.reliable = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let nbrs = tree.knn(&[p.x, p.y, p.z], k_neighbors);
        let mean = nbrs
            .iter()
            .map(|n| cloud.points[n.index])
            .fold(Vector3::zeros(), |a, b| a + b)
            / nbrs.len() as f64;
        let mut scatter = Matrix3::zeros();
        for n in &nbrs {
            let d = cloud.points[n.index] - mean;
            scatter += d * d.transpose();
        }
        let (normal, ratio) = smallest_eigenvector(&scatter);
        let normal = if normal.dot(p) > 0.0 { -normal } else { normal };
        out.normals.push(normal);
        out.reliable.push(ratio <= PLANARITY_RATIO_MAX);
    }
    Ok(out)
}

/// Unit eigenvector of the smallest eigenvalue and the smallest/middle ratio.
fn smallest_eigenvector(m: &Matrix3<f64>) -> (Vector3<f64>, f64) {
    let eig = SymmetricEigen::new(*m);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let l0 = eig.eigenvalues[idx[0]].max(0.0);
    let l1 = eig.eigenvalues[idx[1]].max(0.0);
    let ratio = if l1 > 0.0 { l0 / l1 } else { 1.0 };
    (eig.eigenvectors.column(idx[0]).normalize(), ratio)
}
