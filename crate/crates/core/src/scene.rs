//! Fixed experiment geometry: relay-wall sampling grids, the hidden-volume
//! description, concentric hemisphere sampling, and ground-truth meshes.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Frame, Vec3};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Rows and columns of a rectangular sampling grid. Points are stored
/// row-major, row index first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        GridDims { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Illuminated and measured points on the planar relay wall.
#[derive(Debug, Clone, PartialEq)]
pub struct WallGrid {
    pub laser_points: Vec<Vec3>,
    pub sensor_points: Vec<Vec3>,
    pub wall_normal: Vec3,
    pub confocal: bool,
    pub laser_dims: GridDims,
    pub sensor_dims: GridDims,
}

impl WallGrid {
    pub fn new(
        laser_points: Vec<Vec3>,
        laser_dims: GridDims,
        sensor_points: Vec<Vec3>,
        sensor_dims: GridDims,
        wall_normal: Vec3,
        confocal: bool,
    ) -> Result<Self> {
        if (wall_normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("wall normal must have unit length".into()));
        }
        if laser_points.len() != laser_dims.len() || sensor_points.len() != sensor_dims.len() {
            return Err(Error::Config(
                "wall point counts do not match grid dimensions".into(),
            ));
        }
        if sensor_points.is_empty() || laser_points.is_empty() {
            return Err(Error::Config("wall grids must be non-empty".into()));
        }
        if confocal && laser_points != sensor_points {
            return Err(Error::Config(
                "confocal walls need identical laser and sensor points".into(),
            ));
        }
        let anchor = sensor_points[0];
        for p in laser_points.iter().chain(sensor_points.iter()) {
            if (*p - anchor).dot(wall_normal).abs() >= 1e-9 {
                return Err(Error::Config("wall points are not coplanar".into()));
            }
        }
        Ok(WallGrid {
            laser_points,
            sensor_points,
            wall_normal,
            confocal,
            laser_dims,
            sensor_dims,
        })
    }

    /// Regular grid of cell centers covering a `width` x `height` rectangle
    /// centered at `center` in the plane `z = center.z`, facing +z.
    pub fn rectangle_points(center: Vec3, width: f64, height: f64, dims: GridDims) -> Vec<Vec3> {
        let mut pts = Vec::with_capacity(dims.len());
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                let x = center.x - 0.5 * width + (c as f64 + 0.5) * width / dims.cols as f64;
                let y = center.y - 0.5 * height + (r as f64 + 0.5) * height / dims.rows as f64;
                pts.push(Vec3::new(x, y, center.z));
            }
        }
        pts
    }

    /// Confocal wall: every sensor point is also a laser point.
    pub fn confocal_rectangle(
        center: Vec3,
        width: f64,
        height: f64,
        dims: GridDims,
    ) -> Result<Self> {
        let pts = Self::rectangle_points(center, width, height, dims);
        Self::new(pts.clone(), dims, pts, dims, Vec3::new(0.0, 0.0, 1.0), true)
    }

    pub fn num_lasers(&self) -> usize {
        if self.confocal {
            1
        } else {
            self.laser_points.len()
        }
    }

    pub fn num_sensors(&self) -> usize {
        self.sensor_points.len()
    }

    /// Number of (laser, sensor) measurement pairs, i.e. pixels of a cube.
    pub fn num_pixels(&self) -> usize {
        self.num_lasers() * self.num_sensors()
    }

    /// Laser point feeding pixel `(l, s)`.
    #[inline]
    pub fn laser_for(&self, l: usize, s: usize) -> Vec3 {
        if self.confocal {
            self.sensor_points[s]
        } else {
            self.laser_points[l]
        }
    }
}

/// The fixed experiment description shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Seconds per temporal bin.
    pub bin_width: f64,
    pub num_bins: usize,
    /// Time of the center of bin 0, seconds.
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    pub volume_origin: [f64; 3],
    pub volume_extent: [f64; 3],
    pub volume_resolution: [usize; 3],
    pub hemisphere_resolution: usize,
    /// Ray-marching step in meters; half the smallest voxel pitch when unset.
    #[serde(default)]
    pub ray_step: Option<f64>,
}

fn default_c() -> f64 {
    SPEED_OF_LIGHT
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0) {
            return Err(Error::Config("bin_width must be positive".into()));
        }
        if self.num_bins < 1 {
            return Err(Error::Config("num_bins must be at least 1".into()));
        }
        if !(self.c > 0.0) {
            return Err(Error::Config("speed of light must be positive".into()));
        }
        if self.volume_extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config(
                "volume_extent must be positive along every axis".into(),
            ));
        }
        if self.volume_resolution.contains(&0) {
            return Err(Error::Config(
                "volume_resolution must be positive along every axis".into(),
            ));
        }
        if self.hemisphere_resolution < 3 {
            return Err(Error::Config(
                "hemisphere_resolution must be at least 3".into(),
            ));
        }
        if let Some(step) = self.ray_step {
            if !(step > 0.0) {
                return Err(Error::Config("ray_step must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn voxel_pitch(&self) -> [f64; 3] {
        [
            self.volume_extent[0] / self.volume_resolution[0] as f64,
            self.volume_extent[1] / self.volume_resolution[1] as f64,
            self.volume_extent[2] / self.volume_resolution[2] as f64,
        ]
    }

    pub fn ray_step(&self) -> f64 {
        self.ray_step.unwrap_or_else(|| {
            let p = self.voxel_pitch();
            0.5 * p[0].min(p[1]).min(p[2])
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.volume_resolution.iter().product()
    }

    /// Checks that a wall and this config describe the same experiment.
    pub fn check_wall(&self, wall: &WallGrid) -> Result<()> {
        self.validate()?;
        let o = Vec3::from_array(self.volume_origin);
        for p in &wall.sensor_points {
            if !p.is_finite() {
                return Err(Error::Shape("wall contains non-finite points".into()));
            }
        }
        // voxels must sit strictly in front of the wall
        let anchor = wall.sensor_points[0];
        let near = [
            o,
            o + Vec3::new(self.volume_extent[0], 0.0, 0.0),
            o + Vec3::new(0.0, self.volume_extent[1], 0.0),
            o + Vec3::new(self.volume_extent[0], self.volume_extent[1], 0.0),
        ];
        let behind = near
            .iter()
            .chain(std::iter::once(&(o + Vec3::from_array(self.volume_extent))))
            .all(|c| (*c - anchor).dot(wall.wall_normal) < 0.0);
        if behind {
            return Err(Error::Shape(
                "hidden volume lies behind the relay wall".into(),
            ));
        }
        Ok(())
    }
}

/// Ground-truth triangle mesh with one albedo per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub albedo: Vec<f64>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>, albedo: Vec<f64>) -> Result<Self> {
        if albedo.len() != triangles.len() {
            return Err(Error::Config(format!(
                "{} albedo values for {} triangles",
                albedo.len(),
                triangles.len()
            )));
        }
        for (i, t) in triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= vertices.len()) {
                return Err(Error::Config(format!(
                    "triangle {i} references a missing vertex"
                )));
            }
            let [a, b, c] = t.map(|k| vertices[k]);
            if (b - a).cross(c - a).norm() <= 1e-14 {
                return Err(Error::Config(format!("triangle {i} is degenerate")));
            }
        }
        if let Some(a) = albedo.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("albedo {a} outside [0, 1]")));
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
            albedo,
        })
    }

    pub fn empty() -> Self {
        TriangleMesh {
            vertices: vec![],
            triangles: vec![],
            albedo: vec![],
        }
    }

    /// Axis-aligned rectangle in a plane of constant z, split into two triangles.
    pub fn z_rectangle(center: Vec3, width: f64, height: f64, albedo: f64) -> Result<Self> {
        let (hw, hh) = (0.5 * width, 0.5 * height);
        let v = vec![
            center + Vec3::new(-hw, -hh, 0.0),
            center + Vec3::new(hw, -hh, 0.0),
            center + Vec3::new(hw, hh, 0.0),
            center + Vec3::new(-hw, hh, 0.0),
        ];
        Self::new(v, vec![[0, 1, 2], [0, 2, 3]], vec![albedo; 2])
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn scale_albedo(&mut self, s: f64) {
        for a in &mut self.albedo {
            *a *= s;
        }
    }

    pub fn merge(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|k| k + off)));
        self.albedo.extend_from_slice(&other.albedo);
    }

    #[inline]
    fn corners(&self, i: usize) -> (Vec3, Vec3, Vec3) {
        let t = self.triangles[i];
        (
            self.vertices[t[0]],
            self.vertices[t[1]],
            self.vertices[t[2]],
        )
    }

    /// Geometric normal of triangle `i` (unit length, winding-defined sign).
    pub fn face_normal(&self, i: usize) -> Vec3 {
        let (a, b, c) = self.corners(i);
        (b - a).cross(c - a).normalized()
    }

    /// Closest intersection along `origin + t * dir` with `t > t_min`.
    pub fn nearest_hit(&self, origin: Vec3, dir: Vec3, t_min: f64) -> Option<MeshHit> {
        let mut best: Option<MeshHit> = None;
        for i in 0..self.triangles.len() {
            let (a, b, c) = self.corners(i);
            if let Some(t) = intersect_triangle(origin, dir, a, b, c) {
                if t > t_min && best.as_ref().is_none_or(|h| t < h.t) {
                    best = Some(MeshHit { t, triangle: i });
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshHit {
    pub t: f64,
    pub triangle: usize,
}

/// Two-sided Möller–Trumbore test. Returns the ray parameter of the hit.
#[inline]
pub fn intersect_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(e2);
    let det = e1.dot(p);
    let scale = e1.norm() * e2.norm() * dir.norm();
    if det.abs() <= 1e-14 * scale {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(q) * inv)
}

/// Relative endpoint tolerance for segment occlusion tests.
pub const OCCLUSION_EPS: f64 = 1e-6;

/// True if any triangle crosses the open segment between `a` and `b`.
pub fn ray_occluded(mesh: &TriangleMesh, a: Vec3, b: Vec3) -> bool {
    let dir = b - a;
    (0..mesh.triangles.len()).any(|i| {
        let (p, q, r) = mesh.corners(i);
        matches!(intersect_triangle(a, dir, p, q, r), Some(t) if t > OCCLUSION_EPS && t < 1.0 - OCCLUSION_EPS)
    })
}

/// Shirley–Chiu concentric map from `[-1, 1]^2` onto the unit disk.
pub fn concentric_to_disk(u: f64, v: f64) -> (f64, f64) {
    if u == 0.0 && v == 0.0 {
        return (0.0, 0.0);
    }
    let (r, phi) = if u.abs() > v.abs() {
        (u, FRAC_PI_4 * (v / u))
    } else {
        (v, FRAC_PI_2 - FRAC_PI_4 * (u / v))
    };
    (r * phi.cos(), r * phi.sin())
}

/// Lifts the concentric disk point to the hemisphere around `wall_normal`.
pub fn concentric_to_hemisphere(u: f64, v: f64, wall_normal: Vec3) -> Vec3 {
    let frame = Frame::from_normal(wall_normal);
    concentric_in_frame(u, v, &frame)
}

fn concentric_in_frame(u: f64, v: f64, frame: &Frame) -> Vec3 {
    let (x, y) = concentric_to_disk(u, v);
    let z = (1.0 - x * x - y * y).max(0.0).sqrt();
    frame.to_world(Vec3::new(x, y, z)).normalized()
}

/// Cardinal neighbors of a hemisphere grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbors {
    pub north: usize,
    pub south: usize,
    pub east: usize,
    pub west: usize,
}

/// `n x n` concentric lattice of ray directions. Cell `(row, col)` sits at
/// `u = center(col)`, `v = center(row)`; east is `col + 1`, north is `row + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HemisphereGrid {
    pub n: usize,
    pub dirs: Vec<Vec3>,
}

impl HemisphereGrid {
    pub fn new(n: usize, wall_normal: Vec3) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "hemisphere grid needs n >= 3, got {n}"
            )));
        }
        let frame = Frame::from_normal(wall_normal);
        let mut dirs = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                dirs.push(concentric_in_frame(
                    Self::center(n, c),
                    Self::center(n, r),
                    &frame,
                ));
            }
        }
        Ok(HemisphereGrid { n, dirs })
    }

    /// Lattice cell center coordinate in `[-1, 1]`.
    #[inline]
    pub fn center(n: usize, i: usize) -> f64 {
        -1.0 + (2 * i + 1) as f64 / n as f64
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n + col
    }

    /// Neighbors of an interior cell; `None` on the lattice border.
    pub fn neighbors(&self, idx: usize) -> Option<Neighbors> {
        let (r, c) = (idx / self.n, idx % self.n);
        if r == 0 || c == 0 || r + 1 == self.n || c + 1 == self.n {
            return None;
        }
        Some(Neighbors {
            north: self.index(r + 1, c),
            south: self.index(r - 1, c),
            east: self.index(r, c + 1),
            west: self.index(r, c - 1),
        })
    }
}
