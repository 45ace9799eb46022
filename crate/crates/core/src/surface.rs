//! Implicit surface extraction from a normalized intensity volume, and the
//! per-voxel albedo grid.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::phasor::VolumeGrid;
use crate::scene::{HemisphereGrid, SceneConfig, WallGrid};

/// Softargmax sharpness used throughout.
pub const DEFAULT_BETA: f64 = 1e3;
/// Hit threshold on normalized intensity for synthetic scenes.
pub const DEFAULT_THRESHOLD: f64 = 0.05;
/// Initial albedo of every voxel.
pub const DEFAULT_ALBEDO: f64 = 0.5;

/// Per-voxel albedo on the volume lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoGrid(pub VolumeGrid);

impl AlbedoGrid {
    pub fn uniform(cfg: &SceneConfig, value: f64) -> Self {
        AlbedoGrid(VolumeGrid::filled(cfg, value.clamp(0.0, 1.0)))
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0.values
    }

    pub fn clamp(&mut self) {
        self.0
            .values
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lattice coordinates of one axis: lower corner index and blend weight.
#[inline]
fn axis_lerp(p: f64, origin: f64, pitch: f64, n: usize) -> (usize, usize, f64, f64) {
    let u = (p - origin) / pitch - 0.5;
    if n == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let max = (n - 1) as f64;
    let (uc, du) = if u < 0.0 {
        (0.0, 0.0)
    } else if u > max {
        (max, 0.0)
    } else {
        (u, 1.0 / pitch)
    };
    let i0 = (uc.floor() as usize).min(n - 2);
    (i0, i0 + 1, uc - i0 as f64, du)
}

#[inline]
fn inside(v: &VolumeGrid, p: Vec3) -> bool {
    let hi = v.upper_corner();
    p.x >= v.origin[0]
        && p.y >= v.origin[1]
        && p.z >= v.origin[2]
        && p.x <= hi.x
        && p.y <= hi.y
        && p.z <= hi.z
}

/// Eight corner indices and weights of the trilinear blend at `p`, plus
/// the spatial derivative of every weight. Empty outside the volume.
pub(crate) struct TrilinearStencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [Vec3; 8],
}

pub(crate) fn stencil(v: &VolumeGrid, p: Vec3) -> Option<TrilinearStencil> {
    if !inside(v, p) {
        return None;
    }
    let (x0, x1, fx, dx) = axis_lerp(p.x, v.origin[0], v.pitch[0], v.dims[0]);
    let (y0, y1, fy, dy) = axis_lerp(p.y, v.origin[1], v.pitch[1], v.dims[1]);
    let (z0, z1, fz, dz) = axis_lerp(p.z, v.origin[2], v.pitch[2], v.dims[2]);
    let mut s = TrilinearStencil {
        idx: [0; 8],
        w: [0.0; 8],
        dw: [Vec3::ZERO; 8],
    };
    let mut k = 0;
    for (zi, wz, gz) in [(z0, 1.0 - fz, -dz), (z1, fz, dz)] {
        for (yi, wy, gy) in [(y0, 1.0 - fy, -dy), (y1, fy, dy)] {
            for (xi, wx, gx) in [(x0, 1.0 - fx, -dx), (x1, fx, dx)] {
                s.idx[k] = v.index(xi, yi, zi);
                s.w[k] = wx * wy * wz;
                s.dw[k] = Vec3::new(gx * wy * wz, wx * gy * wz, wx * wy * gz);
                k += 1;
            }
        }
    }
    Some(s)
}

/// Trilinear blend of voxel-center values; clamps to the edge voxels inside
/// the bounding box and returns 0 outside it.
pub fn trilinear(v: &VolumeGrid, p: Vec3) -> f64 {
    if !inside(v, p) {
        return 0.0;
    }
    // same weights and summation order as `stencil`
    let (x0, x1, fx, _) = axis_lerp(p.x, v.origin[0], v.pitch[0], v.dims[0]);
    let (y0, y1, fy, _) = axis_lerp(p.y, v.origin[1], v.pitch[1], v.dims[1]);
    let (z0, z1, fz, _) = axis_lerp(p.z, v.origin[2], v.pitch[2], v.dims[2]);
    let mut acc = 0.0;
    for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                acc += wx * wy * wz * v.values[v.index(xi, yi, zi)];
            }
        }
    }
    acc
}

/// Value and spatial gradient of [`trilinear`].
pub fn trilinear_grad(v: &VolumeGrid, p: Vec3) -> (f64, Vec3) {
    match stencil(v, p) {
        Some(s) => {
            let mut val = 0.0;
            let mut g = Vec3::ZERO;
            for k in 0..8 {
                val += s.w[k] * v.values[s.idx[k]];
                g += s.dw[k] * v.values[s.idx[k]];
            }
            (val, g)
        }
        None => (0.0, Vec3::ZERO),
    }
}

/// Entry and exit ray parameters of the volume's bounding box.
fn slab(v: &VolumeGrid, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let hi = v.upper_corner();
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (o, d, lo, up) = (origin[a], dir[a], v.origin[a], hi[a]);
        if d == 0.0 {
            if o < lo || o > up {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo - o) / d, (up - o) / d);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t1 >= t0.max(0.0)).then_some((t0.max(0.0), t1))
}

/// Sample distances `(i + ½)·step` that fall inside the bounding box.
pub(crate) fn march_distances(v: &VolumeGrid, origin: Vec3, dir: Vec3, step: f64) -> Vec<f64> {
    let Some((t0, t1)) = slab(v, origin, dir) else {
        return Vec::new();
    };
    let first = ((t0 / step - 0.5).ceil()).max(0.0) as usize;
    let mut out = Vec::new();
    let mut i = first;
    loop {
        let d = (i as f64 + 0.5) * step;
        if d > t1 {
            break;
        }
        if inside(v, origin + dir * d) {
            out.push(d);
        }
        i += 1;
    }
    out
}

/// Samples `(d_i, I_i)` along a ray at `d_i = (i + ½)·step` inside the volume.
pub fn ray_march(v: &VolumeGrid, origin: Vec3, dir: Vec3, step: f64) -> Result<Vec<(f64, f64)>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("ray step must be positive".into()));
    }
    Ok(march_distances(v, origin, dir, step)
        .into_iter()
        .map(|d| (d, trilinear(v, origin + dir * d)))
        .collect())
}

/// Softargmax depth with max-shifted weights; `None` when the peak
/// intensity is below `threshold` or there are no samples.
pub fn soft_depth(samples: &[(f64, f64)], beta: f64, threshold: f64) -> Option<f64> {
    let m = samples
        .iter()
        .map(|s| s.1)
        .fold(f64::NEG_INFINITY, f64::max);
    if samples.is_empty() || !(m >= threshold) {
        return None;
    }
    Some(soft_depth_unchecked(samples, beta, m))
}

#[inline]
fn soft_depth_unchecked(samples: &[(f64, f64)], beta: f64, m: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(d, i) in samples {
        let w = (beta * (i - m)).exp();
        num += w * d;
        den += w;
    }
    num / den
}

/// `∂D/∂I_i = β w_i (d_i − D) / Σ w`.
pub(crate) fn soft_depth_grad(samples: &[(f64, f64)], beta: f64) -> (f64, Vec<f64>) {
    let m = samples
        .iter()
        .map(|s| s.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = samples.iter().map(|s| (beta * (s.1 - m)).exp()).collect();
    let den: f64 = w.iter().sum();
    let d = samples.iter().zip(&w).map(|(s, w)| w * s.0).sum::<f64>() / den;
    let g = samples
        .iter()
        .zip(&w)
        .map(|(s, w)| beta * w * (s.0 - d) / den)
        .collect();
    (d, g)
}

/// Surface normal of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellNormal {
    pub normal: Vec3,
    /// True when the cell fell back to the reversed ray direction.
    pub fallback: bool,
}

/// Orientation choices of a two-triangle normal estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NormalMode {
    Fallback,
    /// Sign applied to each raw triangle normal.
    Triangles(i8, i8),
}

fn triangle_points(
    depth: &[Option<f64>],
    grid: &HemisphereGrid,
    x_s: Vec3,
    idx: usize,
) -> Option<[Vec3; 4]> {
    let nb = grid.neighbors(idx)?;
    let p = |i: usize| depth[i].map(|d| x_s + grid.dirs[i] * d);
    Some([p(nb.north)?, p(nb.east)?, p(nb.south)?, p(nb.west)?])
}

/// Raw triangle normals `(E−N)×(S−N)` and `(W−S)×(N−S)`.
#[inline]
fn raw_normals(p: &[Vec3; 4]) -> (Vec3, Vec3) {
    let [pn, pe, ps, pw] = *p;
    ((pe - pn).cross(ps - pn), (pw - ps).cross(pn - ps))
}

fn degenerate(n: Vec3, a: Vec3, b: Vec3) -> bool {
    n.norm() <= 1e-12 * a.norm() * b.norm()
}

/// Chooses fallback or triangle orientation for a cell.
pub(crate) fn normal_mode(
    depth: &[Option<f64>],
    grid: &HemisphereGrid,
    x_s: Vec3,
    idx: usize,
) -> NormalMode {
    let Some(p) = triangle_points(depth, grid, x_s, idx) else {
        return NormalMode::Fallback;
    };
    let [pn, pe, ps, pw] = p;
    let (n1, n2) = raw_normals(&p);
    if degenerate(n1, pe - pn, ps - pn) || degenerate(n2, pw - ps, pn - ps) {
        return NormalMode::Fallback;
    }
    let dir = grid.dirs[idx];
    let s1: i8 = if n1.dot(dir) > 0.0 { -1 } else { 1 };
    let s2: i8 = if n2.dot(dir) > 0.0 { -1 } else { 1 };
    let sum = n1.normalized() * s1 as f64 + n2.normalized() * s2 as f64;
    if sum.norm() <= 1e-12 {
        return NormalMode::Fallback;
    }
    NormalMode::Triangles(s1, s2)
}

pub(crate) fn normal_from_mode(
    depth: &[Option<f64>],
    grid: &HemisphereGrid,
    x_s: Vec3,
    idx: usize,
    mode: NormalMode,
) -> Vec3 {
    match mode {
        NormalMode::Fallback => -grid.dirs[idx],
        NormalMode::Triangles(s1, s2) => match triangle_points(depth, grid, x_s, idx) {
            Some(p) => {
                let (n1, n2) = raw_normals(&p);
                (n1.normalized() * s1 as f64 + n2.normalized() * s2 as f64).normalized()
            }
            None => -grid.dirs[idx],
        },
    }
}

/// Gradients of a triangle-mode normal with respect to the four neighbor
/// depths `[N, E, S, W]`, contracted with `upstream`.
pub(crate) fn normal_backward(
    depth: &[Option<f64>],
    grid: &HemisphereGrid,
    x_s: Vec3,
    idx: usize,
    mode: NormalMode,
    upstream: Vec3,
) -> Option<([usize; 4], [f64; 4])> {
    let NormalMode::Triangles(s1, s2) = mode else {
        return None;
    };
    let nb = grid.neighbors(idx)?;
    let p = triangle_points(depth, grid, x_s, idx)?;
    let [pn, pe, ps, pw] = p;
    let (n1, n2) = raw_normals(&p);
    let (s1, s2) = (s1 as f64, s2 as f64);
    let sum = n1.normalized() * s1 + n2.normalized() * s2;
    let g_sum = crate::geom::normalize_backward(sum, upstream);
    let g1 = crate::geom::normalize_backward(n1, g_sum * s1);
    let g2 = crate::geom::normalize_backward(n2, g_sum * s2);
    // c = a × b: ā = b × c̄, b̄ = c̄ × a
    let (a1, b1) = (pe - pn, ps - pn);
    let (ga1, gb1) = (b1.cross(g1), g1.cross(a1));
    let (a2, b2) = (pw - ps, pn - ps);
    let (ga2, gb2) = (b2.cross(g2), g2.cross(a2));
    let g_n = -ga1 - gb1 + gb2;
    let g_e = ga1;
    let g_s = gb1 - ga2 - gb2;
    let g_w = ga2;
    let ids = [nb.north, nb.east, nb.south, nb.west];
    let gp = [g_n, g_e, g_s, g_w];
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = gp[k].dot(grid.dirs[ids[k]]);
    }
    Some((ids, out))
}

/// Two-triangle normals for every hit cell; `None` for misses.
pub fn estimate_normals(
    depth: &[Option<f64>],
    grid: &HemisphereGrid,
    x_s: Vec3,
) -> Result<Vec<Option<CellNormal>>> {
    if depth.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} depths for a {}-cell grid",
            depth.len(),
            grid.len()
        )));
    }
    Ok((0..grid.len())
        .map(|i| {
            depth[i].map(|_| {
                let mode = normal_mode(depth, grid, x_s, i);
                CellNormal {
                    normal: normal_from_mode(depth, grid, x_s, i, mode),
                    fallback: mode == NormalMode::Fallback,
                }
            })
        })
        .collect())
}

/// One hemisphere-grid record of an [`ImplicitSurface`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceCell {
    pub hit: bool,
    pub depth: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub fallback: bool,
}

impl SurfaceCell {
    const MISS: SurfaceCell = SurfaceCell {
        hit: false,
        depth: 0.0,
        point: Vec3::ZERO,
        normal: Vec3::ZERO,
        fallback: false,
    };
}

/// Per-sensor grids of extracted surface points and normals.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitSurface {
    pub n: usize,
    pub sensor_ids: Vec<usize>,
    pub dirs: Vec<Vec3>,
    /// `n²` cells per entry of `sensor_ids`, in that order.
    pub cells: Vec<SurfaceCell>,
}

impl ImplicitSurface {
    pub fn num_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn cells_of(&self, k: usize) -> &[SurfaceCell] {
        let m = self.n * self.n;
        &self.cells[k * m..(k + 1) * m]
    }

    pub fn num_hits(&self) -> usize {
        self.cells.iter().filter(|c| c.hit).count()
    }
}

/// Discrete choices made while extracting one sensor's grid.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SensorDecisions {
    pub hit: Vec<bool>,
    pub mode: Vec<NormalMode>,
}

fn extract_one(
    v: &VolumeGrid,
    grid: &HemisphereGrid,
    x_s: Vec3,
    step: f64,
    beta: f64,
    threshold: f64,
    frozen: Option<&SensorDecisions>,
) -> (Vec<SurfaceCell>, SensorDecisions) {
    let m = grid.len();
    let mut depth = vec![None; m];
    let mut hit = vec![false; m];
    for i in 0..m {
        let dists = march_distances(v, x_s, grid.dirs[i], step);
        let samples: Vec<(f64, f64)> = dists
            .iter()
            .map(|&d| (d, trilinear(v, x_s + grid.dirs[i] * d)))
            .collect();
        let peak = samples
            .iter()
            .map(|s| s.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let is_hit = match frozen {
            Some(f) => f.hit[i] && !samples.is_empty(),
            None => !samples.is_empty() && peak >= threshold,
        };
        if is_hit {
            hit[i] = true;
            depth[i] = Some(soft_depth_unchecked(&samples, beta, peak));
        }
    }
    let mode: Vec<NormalMode> = (0..m)
        .map(|i| match frozen {
            Some(f) if hit[i] => f.mode[i],
            _ if hit[i] => normal_mode(&depth, grid, x_s, i),
            _ => NormalMode::Fallback,
        })
        .collect();
    let cells = (0..m)
        .map(|i| match depth[i] {
            Some(d) => SurfaceCell {
                hit: true,
                depth: d,
                point: x_s + grid.dirs[i] * d,
                normal: normal_from_mode(&depth, grid, x_s, i, mode[i]),
                fallback: mode[i] == NormalMode::Fallback,
            },
            None => SurfaceCell::MISS,
        })
        .collect();
    (cells, SensorDecisions { hit, mode })
}

pub(crate) fn extract_with(
    v: &VolumeGrid,
    wall: &WallGrid,
    cfg: &SceneConfig,
    beta: f64,
    threshold: f64,
    sensors: &[usize],
    frozen: Option<&[SensorDecisions]>,
) -> Result<(ImplicitSurface, Vec<SensorDecisions>)> {
    v.check_config(cfg)?;
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(
            "softargmax beta must be positive".into(),
        ));
    }
    if sensors.iter().any(|&s| s >= wall.num_sensors()) {
        return Err(Error::Shape("sensor index outside the wall".into()));
    }
    let grid = HemisphereGrid::new(cfg.hemisphere_resolution, wall.wall_normal)?;
    let step = cfg.ray_step();
    let parts: Vec<(Vec<SurfaceCell>, SensorDecisions)> = sensors
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            extract_one(
                v,
                &grid,
                wall.sensor_points[s],
                step,
                beta,
                threshold,
                frozen.map(|f| &f[k]),
            )
        })
        .collect();
    let mut cells = Vec::with_capacity(sensors.len() * grid.len());
    let mut decisions = Vec::with_capacity(sensors.len());
    for (c, d) in parts {
        cells.extend(c);
        decisions.push(d);
    }
    Ok((
        ImplicitSurface {
            n: grid.n,
            sensor_ids: sensors.to_vec(),
            dirs: grid.dirs,
            cells,
        },
        decisions,
    ))
}

/// Ray march, softargmax depth and normals for every sensor point.
pub fn extract_surface(
    v: &VolumeGrid,
    wall: &WallGrid,
    cfg: &SceneConfig,
    beta: f64,
    threshold: f64,
) -> Result<ImplicitSurface> {
    let all: Vec<usize> = (0..wall.num_sensors()).collect();
    Ok(extract_with(v, wall, cfg, beta, threshold, &all, None)?.0)
}

/// Trilinear albedo at `x`, clamped to `[0, 1]`; 0 outside the volume.
pub fn sample_albedo(g: &AlbedoGrid, x: Vec3) -> f64 {
    trilinear(&g.0, x).clamp(0.0, 1.0)
}

/// ASCII PLY with position, normal and albedo of every hit cell.
pub fn export_pointcloud(g: &ImplicitSurface, rho: &AlbedoGrid) -> String {
    let hits: Vec<&SurfaceCell> = g.cells.iter().filter(|c| c.hit).collect();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", hits.len());
    for p in ["x", "y", "z", "nx", "ny", "nz", "albedo"] {
        let _ = writeln!(out, "property double {p}");
    }
    out.push_str("end_header\n");
    for c in hits {
        let a = sample_albedo(rho, c.point);
        let _ = writeln!(
            out,
            "{:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e}",
            c.point.x, c.point.y, c.point.z, c.normal.x, c.normal.y, c.normal.z, a
        );
    }
    out
}

/// One record of an oriented point cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedPoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub albedo: f64,
}

/// Parses the PLY layout written by [`export_pointcloud`].
pub fn parse_pointcloud(text: &str) -> Result<Vec<OrientedPoint>> {
    let bad = |why: &str| Error::format("<ply>", why);
    let mut lines = text.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format ascii 1.0") {
        return Err(bad("not an ASCII PLY file"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| bad("missing vertex count"))?;
    for p in ["x", "y", "z", "nx", "ny", "nz", "albedo"] {
        if lines.next() != Some(&format!("property double {p}")) {
            return Err(bad("unexpected property list"));
        }
    }
    if lines.next() != Some("end_header") {
        return Err(bad("missing end_header"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad number"))?;
        if v.len() != 7 {
            return Err(bad("vertex record needs 7 values"));
        }
        out.push(OrientedPoint {
            position: Vec3::new(v[0], v[1], v[2]),
            normal: Vec3::new(v[3], v[4], v[5]),
            albedo: v[6],
        });
    }
    Ok(out)
}
