//! Three-bounce transient rendering in path space.
//!
//! Paths are `x_l -> x_g -> x_s`. Rays are cast from every sensor point on
//! the concentric hemisphere lattice; each lattice cell carries the same
//! weight `2π / n²`, and a path's contribution is spread over neighboring
//! time bins with a Gaussian of width `sigma_t` bins.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scene::{GridDims, HemisphereGrid, SceneConfig, TriangleMesh, WallGrid};
use crate::surface::{sample_albedo, AlbedoGrid, ImplicitSurface};

/// Default Gaussian binning width, in bins (FWHM of about one bin).
pub const DEFAULT_SIGMA_T: f64 = 0.62;

/// Gaussian binning is truncated beyond this many `sigma_t`.
pub const BIN_TRUNCATION_SIGMAS: f64 = 4.0;

/// Time-resolved measurements `H(x_l, x_s, t)`. Values are stored
/// `(l, s, t)` row-major; confocal cubes have a single laser slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientCube {
    pub num_lasers: usize,
    pub num_sensors: usize,
    pub num_bins: usize,
    pub confocal: bool,
    pub bin_width: f64,
    pub t0: f64,
    pub laser_dims: GridDims,
    pub sensor_dims: GridDims,
    pub values: Vec<f64>,
}

impl TransientCube {
    pub fn zeros(wall: &WallGrid, cfg: &SceneConfig) -> Self {
        let l = wall.num_lasers();
        let s = wall.num_sensors();
        TransientCube {
            num_lasers: l,
            num_sensors: s,
            num_bins: cfg.num_bins,
            confocal: wall.confocal,
            bin_width: cfg.bin_width,
            t0: cfg.t0,
            laser_dims: if wall.confocal {
                wall.sensor_dims
            } else {
                wall.laser_dims
            },
            sensor_dims: wall.sensor_dims,
            values: vec![0.0; l * s * cfg.num_bins],
        }
    }

    pub fn temporal(&self) -> TemporalSpec {
        TemporalSpec {
            t0: self.t0,
            bin_width: self.bin_width,
            num_bins: self.num_bins,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.num_lasers * self.num_sensors
    }

    #[inline]
    pub fn pixel_index(&self, l: usize, s: usize) -> usize {
        l * self.num_sensors + s
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.num_bins..(p + 1) * self.num_bins]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let t = self.num_bins;
        &mut self.values[p * t..(p + 1) * t]
    }

    #[inline]
    pub fn get(&self, l: usize, s: usize, t: usize) -> f64 {
        self.values[self.pixel_index(l, s) * self.num_bins + t]
    }

    /// True when the cube matches the wall and temporal configuration.
    pub fn check_shape(&self, wall: &WallGrid, cfg: &SceneConfig) -> Result<()> {
        if self.confocal != wall.confocal
            || self.num_lasers != wall.num_lasers()
            || self.num_sensors != wall.num_sensors()
            || self.num_bins != cfg.num_bins
        {
            return Err(Error::Shape(format!(
                "cube is {}x{}x{} (confocal={}), wall/config expect {}x{}x{} (confocal={})",
                self.num_lasers,
                self.num_sensors,
                self.num_bins,
                self.confocal,
                wall.num_lasers(),
                wall.num_sensors(),
                cfg.num_bins,
                wall.confocal
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &TransientCube) -> bool {
        self.num_lasers == other.num_lasers
            && self.num_sensors == other.num_sensors
            && self.num_bins == other.num_bins
            && self.confocal == other.confocal
    }

    pub fn scaled(&self, s: f64) -> TransientCube {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Temporal sampling of a cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalSpec {
    pub t0: f64,
    pub bin_width: f64,
    pub num_bins: usize,
}

impl TemporalSpec {
    pub fn from_config(cfg: &SceneConfig) -> Self {
        TemporalSpec {
            t0: cfg.t0,
            bin_width: cfg.bin_width,
            num_bins: cfg.num_bins,
        }
    }

    /// Continuous bin coordinate of time `t`.
    #[inline]
    pub fn to_bins(&self, t: f64) -> f64 {
        (t - self.t0) / self.bin_width
    }
}

/// One three-bounce path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub x_l: Vec3,
    pub x_g: Vec3,
    pub x_s: Vec3,
    pub n_g: Vec3,
    pub n_w: Vec3,
    pub rho: f64,
}

/// Time of flight of a path, no scattering delays at vertices.
pub fn tof(path: &PathSample, c: f64) -> f64 {
    ((path.x_g - path.x_l).norm() + (path.x_s - path.x_g).norm()) / c
}

/// Geometric path throughput with both visibility terms equal to one.
pub fn throughput(path: &PathSample) -> Result<f64> {
    let d_lg = (path.x_g - path.x_l).norm();
    let d_gs = (path.x_s - path.x_g).norm();
    if !(d_lg > 0.0) || !(d_gs > 0.0) {
        return Err(Error::InvalidArgument(
            "surface vertex coincides with a wall point".into(),
        ));
    }
    Ok(throughput_raw(
        path.x_l, path.x_g, path.x_s, path.n_g, path.n_w,
    ))
}

/// `|cos1||cos2|/d_lg² · |cos3||cos4|/d_gs²` written in terms of the
/// unnormalized segment vectors.
#[inline]
pub(crate) fn throughput_raw(x_l: Vec3, x_g: Vec3, x_s: Vec3, n_g: Vec3, n_w: Vec3) -> f64 {
    let a = x_g - x_l;
    let b = x_s - x_g;
    let aa = a.norm_squared();
    let bb = b.norm_squared();
    n_w.dot(a).abs() * n_g.dot(a).abs() * n_g.dot(b).abs() * n_w.dot(b).abs() / (aa * aa * bb * bb)
}

/// Gradients of the throughput with respect to `x_g` and `n_g`.
pub(crate) fn throughput_grad(
    x_l: Vec3,
    x_g: Vec3,
    x_s: Vec3,
    n_g: Vec3,
    n_w: Vec3,
) -> (Vec3, Vec3) {
    let a = x_g - x_l;
    let b = x_s - x_g;
    let aa = a.norm_squared();
    let bb = b.norm_squared();
    let denom = aa * aa * bb * bb;
    let (d1, d2, d3, d4) = (n_w.dot(a), n_g.dot(a), n_g.dot(b), n_w.dot(b));
    let (f1, f2, f3, f4) = (d1.abs(), d2.abs(), d3.abs(), d4.abs());
    let (s1, s2, s3, s4) = (d1.signum(), d2.signum(), d3.signum(), d4.signum());
    let t = f1 * f2 * f3 * f4 / denom;
    let grad_a =
        (n_w * (s1 * f2 * f3 * f4) + n_g * (f1 * s2 * f3 * f4)) / denom - a * (4.0 * t / aa);
    let grad_b =
        (n_g * (f1 * f2 * s3 * f4) + n_w * (f1 * f2 * f3 * s4)) / denom - b * (4.0 * t / bb);
    let grad_n = (a * (f1 * s2 * f3 * f4) + b * (f1 * f2 * s3 * f4)) / denom;
    (grad_a - grad_b, grad_n)
}

/// Bins `[lo, hi)` that receive weight from an event at bin coordinate `center`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinWindow {
    pub lo: usize,
    pub hi: usize,
}

impl BinWindow {
    pub fn new(center: f64, sigma_t: f64, num_bins: usize) -> BinWindow {
        let reach = BIN_TRUNCATION_SIGMAS * sigma_t;
        let lo = (center - reach).ceil();
        let hi = (center + reach).floor() + 1.0;
        if !lo.is_finite() || !hi.is_finite() || hi <= 0.0 || lo >= num_bins as f64 {
            return BinWindow { lo: 0, hi: 0 };
        }
        BinWindow {
            lo: lo.max(0.0) as usize,
            hi: (hi.min(num_bins as f64)) as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }
}

#[inline]
pub(crate) fn gaussian_bin(tau: usize, center: f64, sigma_t: f64) -> f64 {
    let d = tau as f64 - center;
    (-d * d / (2.0 * sigma_t * sigma_t)).exp()
}

/// Sparse Gaussian binning of an event at time `t`.
pub fn bin_weights(t: f64, spec: &TemporalSpec, sigma_t: f64) -> Vec<(usize, f64)> {
    let center = spec.to_bins(t);
    let w = BinWindow::new(center, sigma_t, spec.num_bins);
    (w.lo..w.hi)
        .map(|tau| (tau, gaussian_bin(tau, center, sigma_t)))
        .collect()
}

/// Per-cell quadrature weight of an `n x n` hemisphere lattice.
#[inline]
pub fn ray_weight(n: usize) -> f64 {
    TAU / (n * n) as f64
}

/// Adds one path's contribution `amplitude` to a pixel's time series.
#[inline]
pub(crate) fn splat(buf: &mut [f64], t_bins: f64, amplitude: f64, sigma_t: f64) {
    let w = BinWindow::new(t_bins, sigma_t, buf.len());
    for tau in w.lo..w.hi {
        buf[tau] += amplitude * gaussian_bin(tau, t_bins, sigma_t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshRenderOptions {
    /// Gate paths with segment visibility and keep only the first hit per
    /// ray. When off, every intersection along a ray contributes.
    pub occlusion: bool,
    pub sigma_t: f64,
}

impl Default for MeshRenderOptions {
    fn default() -> Self {
        MeshRenderOptions {
            occlusion: true,
            sigma_t: DEFAULT_SIGMA_T,
        }
    }
}

/// Renders `H_r` for a triangle mesh.
pub fn render_mesh(
    mesh: &TriangleMesh,
    wall: &WallGrid,
    cfg: &SceneConfig,
) -> Result<TransientCube> {
    render_mesh_with(mesh, wall, cfg, MeshRenderOptions::default())
}

pub fn render_mesh_with(
    mesh: &TriangleMesh,
    wall: &WallGrid,
    cfg: &SceneConfig,
    opts: MeshRenderOptions,
) -> Result<TransientCube> {
    cfg.check_wall(wall)?;
    let grid = HemisphereGrid::new(cfg.hemisphere_resolution, wall.wall_normal)?;
    let spec = TemporalSpec::from_config(cfg);
    let n_lasers = wall.num_lasers();
    let t = cfg.num_bins;
    let weight = ray_weight(grid.n);
    let mut cube = TransientCube::zeros(wall, cfg);

    let per_sensor: Vec<Vec<f64>> = (0..wall.num_sensors())
        .into_par_iter()
        .map(|s| {
            let x_s = wall.sensor_points[s];
            let mut buf = vec![0.0; n_lasers * t];
            for dir in &grid.dirs {
                let hits: Vec<(f64, usize)> = if opts.occlusion {
                    mesh.nearest_hit(x_s, *dir, 1e-9)
                        .map(|h| (h.t, h.triangle))
                        .into_iter()
                        .collect()
                } else {
                    all_hits(mesh, x_s, *dir)
                };
                for (dist, tri) in hits {
                    let x_g = x_s + *dir * dist;
                    let n_g = mesh.face_normal(tri);
                    let rho = mesh.albedo[tri];
                    if opts.occlusion && crate::scene::ray_occluded(mesh, x_g, x_s) {
                        continue;
                    }
                    for l in 0..n_lasers {
                        let x_l = wall.laser_for(l, s);
                        if opts.occlusion && crate::scene::ray_occluded(mesh, x_l, x_g) {
                            continue;
                        }
                        let amp =
                            rho * weight * throughput_raw(x_l, x_g, x_s, n_g, wall.wall_normal);
                        let tb = spec.to_bins(((x_g - x_l).norm() + dist) / cfg.c);
                        splat(&mut buf[l * t..(l + 1) * t], tb, amp, opts.sigma_t);
                    }
                }
            }
            buf
        })
        .collect();

    scatter_sensor_buffers(&mut cube, per_sensor);
    Ok(cube)
}

fn all_hits(mesh: &TriangleMesh, origin: Vec3, dir: Vec3) -> Vec<(f64, usize)> {
    (0..mesh.len())
        .filter_map(|i| {
            let t = mesh.triangles[i];
            crate::scene::intersect_triangle(
                origin,
                dir,
                mesh.vertices[t[0]],
                mesh.vertices[t[1]],
                mesh.vertices[t[2]],
            )
            .filter(|&d| d > 1e-9)
            .map(|d| (d, i))
        })
        .collect()
}

fn scatter_sensor_buffers(cube: &mut TransientCube, per_sensor: Vec<Vec<f64>>) {
    let t = cube.num_bins;
    for (s, buf) in per_sensor.into_iter().enumerate() {
        for l in 0..cube.num_lasers {
            let p = cube.pixel_index(l, s);
            cube.pixel_mut(p).copy_from_slice(&buf[l * t..(l + 1) * t]);
        }
    }
}

/// Renders `H_r` from an implicit surface; visibility is taken as one.
pub fn render_implicit(
    g: &ImplicitSurface,
    rho: &AlbedoGrid,
    wall: &WallGrid,
    cfg: &SceneConfig,
) -> Result<TransientCube> {
    if g.num_sensors() != wall.num_sensors()
        || g.sensor_ids.iter().enumerate().any(|(i, &s)| i != s)
    {
        return Err(Error::Shape(
            "implicit surface does not cover every sensor point".into(),
        ));
    }
    render_implicit_sensors(g, rho, wall, cfg, DEFAULT_SIGMA_T)
}

/// Renders only the sensors present in `g`; other pixels stay zero.
pub fn render_implicit_sensors(
    g: &ImplicitSurface,
    rho: &AlbedoGrid,
    wall: &WallGrid,
    cfg: &SceneConfig,
    sigma_t: f64,
) -> Result<TransientCube> {
    Ok(render_implicit_windows(g, rho, wall, cfg, sigma_t, None)?.0)
}

/// Bin windows of every (cell, laser) path of one sensor, cell-major.
pub(crate) type SensorWindows = Vec<BinWindow>;

/// Implicit rendering that records, or replays, the bin window of each path.
pub(crate) fn render_implicit_windows(
    g: &ImplicitSurface,
    rho: &AlbedoGrid,
    wall: &WallGrid,
    cfg: &SceneConfig,
    sigma_t: f64,
    frozen: Option<&[SensorWindows]>,
) -> Result<(TransientCube, Vec<SensorWindows>)> {
    if g.n != cfg.hemisphere_resolution {
        return Err(Error::Shape(format!(
            "implicit surface has {}x{} rays per sensor, config expects {}",
            g.n, g.n, cfg.hemisphere_resolution
        )));
    }
    if g.sensor_ids.iter().any(|&s| s >= wall.num_sensors()) {
        return Err(Error::Shape(
            "implicit surface references sensors outside the wall".into(),
        ));
    }
    if rho.0.dims != cfg.volume_resolution {
        return Err(Error::Shape(
            "albedo grid does not match the volume resolution".into(),
        ));
    }
    let spec = TemporalSpec::from_config(cfg);
    let n_lasers = wall.num_lasers();
    let t = cfg.num_bins;
    let weight = ray_weight(g.n);
    let mut cube = TransientCube::zeros(wall, cfg);
    let parts: Vec<(usize, Vec<f64>, SensorWindows)> = g
        .sensor_ids
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let x_s = wall.sensor_points[s];
            let mut buf = vec![0.0; n_lasers * t];
            let cells = g.cells_of(k);
            let mut windows = Vec::with_capacity(cells.len() * n_lasers);
            for (ci, cell) in cells.iter().enumerate() {
                for l in 0..n_lasers {
                    if !cell.hit {
                        windows.push(BinWindow { lo: 0, hi: 0 });
                        continue;
                    }
                    let x_l = wall.laser_for(l, s);
                    let r = sample_albedo(rho, cell.point);
                    let amp = r
                        * weight
                        * throughput_raw(x_l, cell.point, x_s, cell.normal, wall.wall_normal);
                    let tb = spec
                        .to_bins(((cell.point - x_l).norm() + (x_s - cell.point).norm()) / cfg.c);
                    let w = match frozen {
                        Some(f) => f[k][ci * n_lasers + l],
                        None => BinWindow::new(tb, sigma_t, t),
                    };
                    let px = &mut buf[l * t..(l + 1) * t];
                    for tau in w.lo..w.hi {
                        px[tau] += amp * gaussian_bin(tau, tb, sigma_t);
                    }
                    windows.push(w);
                }
            }
            (s, buf, windows)
        })
        .collect();
    let mut all_windows = Vec::with_capacity(parts.len());
    for (s, buf, w) in parts {
        for l in 0..n_lasers {
            let p = cube.pixel_index(l, s);
            cube.pixel_mut(p).copy_from_slice(&buf[l * t..(l + 1) * t]);
        }
        all_windows.push(w);
    }
    Ok((cube, all_windows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GridDims;
    use crate::surface::SurfaceCell;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    #[test]
    fn tof_examples() {
        let c = 3e8;
        let p = PathSample {
            x_l: Vec3::ZERO,
            x_g: Vec3::new(0.0, 0.0, 1.5),
            x_s: Vec3::new(0.0, 1.5, 1.5),
            n_g: Vec3::new(0.0, 0.0, -1.0),
            n_w: Vec3::new(0.0, 0.0, 1.0),
            rho: 1.0,
        };
        assert!((tof(&p, c) - 1e-8).abs() < 1e-22);
        let conf = PathSample {
            x_s: Vec3::ZERO,
            ..p
        };
        assert!((tof(&conf, c) - 2.0 * 1.5 / c).abs() < 1e-22);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = PathSample {
                x_l: rand_vec(&mut rng, 2.0),
                x_g: rand_vec(&mut rng, 2.0),
                x_s: rand_vec(&mut rng, 2.0),
                ..p
            };
            let d1 = q.x_g - q.x_l;
            let d2 = q.x_s - q.x_g;
            let oracle = ((d1.x * d1.x + d1.y * d1.y + d1.z * d1.z).sqrt()
                + (d2.x * d2.x + d2.y * d2.y + d2.z * d2.z).sqrt())
                / c;
            assert!(((tof(&q, c) - oracle) / oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn throughput_examples() {
        // x_g at unit distance straight out from a confocal wall point
        let p = PathSample {
            x_l: Vec3::ZERO,
            x_g: Vec3::new(0.0, 0.0, 1.0),
            x_s: Vec3::ZERO,
            n_g: Vec3::new(0.0, 0.0, -1.0),
            n_w: Vec3::new(0.0, 0.0, 1.0),
            rho: 1.0,
        };
        assert_eq!(throughput(&p).unwrap(), 1.0);
        let grazing = PathSample {
            n_g: Vec3::new(1.0, 0.0, 0.0),
            ..p
        };
        assert_eq!(throughput(&grazing).unwrap(), 0.0);
        let degenerate = PathSample {
            x_g: Vec3::ZERO,
            ..p
        };
        assert!(throughput(&degenerate).is_err());
    }

    #[test]
    fn throughput_matches_expanded_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n_w = Vec3::new(0.0, 0.0, 1.0);
        for _ in 0..200 {
            let x_l = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.0,
            );
            let x_s = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.0,
            );
            let x_g = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..1.5),
            );
            let n_g = rand_vec(&mut rng, 1.0).normalized();
            let p = PathSample {
                x_l,
                x_g,
                x_s,
                n_g,
                n_w,
                rho: 1.0,
            };
            let d_lg = (x_g - x_l).norm();
            let d_gs = (x_s - x_g).norm();
            let w_lg = (x_g - x_l) / d_lg;
            let w_gs = (x_s - x_g) / d_gs;
            let cos1 = n_w.dot(w_lg).abs();
            let cos2 = n_g.dot(-w_lg).abs();
            let cos3 = n_g.dot(w_gs).abs();
            let cos4 = n_w.dot(-w_gs).abs();
            let oracle = cos1 * cos2 / (d_lg * d_lg) * cos3 * cos4 / (d_gs * d_gs);
            let got = throughput(&p).unwrap();
            assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1e-300));
        }
    }

    #[test]
    fn throughput_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_w = Vec3::new(0.0, 0.0, 1.0);
        for _ in 0..50 {
            let x_l = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.0,
            );
            let x_s = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.0,
            );
            let x_g = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.3..1.5),
            );
            let n_g = rand_vec(&mut rng, 1.0).normalized();
            let (gx, gn) = throughput_grad(x_l, x_g, x_s, n_g, n_w);
            let h = 1e-6;
            for i in 0..3 {
                let mut e = [0.0; 3];
                e[i] = h;
                let e = Vec3::from_array(e);
                let fx = (throughput_raw(x_l, x_g + e, x_s, n_g, n_w)
                    - throughput_raw(x_l, x_g - e, x_s, n_g, n_w))
                    / (2.0 * h);
                let fnn = (throughput_raw(x_l, x_g, x_s, n_g + e, n_w)
                    - throughput_raw(x_l, x_g, x_s, n_g - e, n_w))
                    / (2.0 * h);
                assert!(
                    (fx - gx[i]).abs() <= 1e-5 * (1.0 + fx.abs()),
                    "{fx} vs {}",
                    gx[i]
                );
                assert!(
                    (fnn - gn[i]).abs() <= 1e-5 * (1.0 + fnn.abs()),
                    "{fnn} vs {}",
                    gn[i]
                );
            }
        }
    }

    fn spec() -> TemporalSpec {
        TemporalSpec {
            t0: 0.0,
            bin_width: 1e-11,
            num_bins: 100,
        }
    }

    #[test]
    fn bin_weights_examples() {
        let s = spec();
        let w = bin_weights(40.0 * s.bin_width, &s, DEFAULT_SIGMA_T);
        assert_eq!(w.iter().find(|(t, _)| *t == 40).unwrap().1, 1.0);
        let w = bin_weights((40.0 - DEFAULT_SIGMA_T) * s.bin_width, &s, DEFAULT_SIGMA_T);
        let v = w.iter().find(|(t, _)| *t == 40).unwrap().1;
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.6065).abs() < 1e-4);
        // fully outside the record
        assert!(bin_weights(-10.0 * s.bin_width, &s, DEFAULT_SIGMA_T).is_empty());
        assert!(bin_weights(200.0 * s.bin_width, &s, DEFAULT_SIGMA_T).is_empty());
    }

    #[test]
    fn bin_weight_mass_matches_gaussian_integral() {
        // quadrature oracle: the integral of exp(-x²/2σ²) is σ√(2π)
        let s = spec();
        let oracle = (TAU).sqrt() * DEFAULT_SIGMA_T;
        assert!((oracle - 1.5541).abs() < 1e-4);
        let m = 1000;
        let mut mean = 0.0;
        for k in 0..m {
            let t = (50.0 + k as f64 / m as f64) * s.bin_width;
            let sum: f64 = bin_weights(t, &s, DEFAULT_SIGMA_T)
                .iter()
                .map(|(_, w)| w)
                .sum();
            // aliasing plus the 4σ cut stay below 2.2e-3 pointwise
            assert!((sum - oracle).abs() < 2.5e-3);
            mean += sum / m as f64;
        }
        assert!((mean - oracle).abs() < 1e-3, "mean {mean}");
    }

    #[test]
    fn temporal_locality() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let tb: f64 = rng.random_range(-5.0..105.0);
            for (tau, _) in bin_weights(tb * s.bin_width, &s, DEFAULT_SIGMA_T) {
                assert!((tau as f64 - tb).abs() <= 4.0 * DEFAULT_SIGMA_T + 1e-9);
            }
        }
    }

    pub(crate) fn small_config(n: usize) -> SceneConfig {
        SceneConfig {
            bin_width: 20e-12,
            num_bins: 256,
            t0: 0.0,
            c: crate::scene::SPEED_OF_LIGHT,
            volume_origin: [-0.5, -0.5, 0.2],
            volume_extent: [1.0, 1.0, 0.6],
            volume_resolution: [8, 8, 8],
            hemisphere_resolution: n,
            ray_step: None,
        }
    }

    #[test]
    fn empty_mesh_renders_zero() {
        let wall = WallGrid::confocal_rectangle(Vec3::ZERO, 1.0, 1.0, GridDims::new(4, 4)).unwrap();
        let cube = render_mesh(&TriangleMesh::empty(), &wall, &small_config(8)).unwrap();
        assert!(cube.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn facing_patch_peaks_at_round_trip_time() {
        let d = 0.4;
        let cfg = small_config(15);
        let wall = WallGrid::confocal_rectangle(Vec3::ZERO, 1.0, 1.0, GridDims::new(4, 4)).unwrap();
        let mesh = TriangleMesh::z_rectangle(Vec3::new(0.125, 0.125, d), 0.05, 0.05, 1.0).unwrap();
        let cube = render_mesh(&mesh, &wall, &cfg).unwrap();
        // pixel (row 2, col 2) sits at (0.125, 0.125), right under the patch
        let p = cube.pixel(2 * 4 + 2);
        let peak = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let expected = (2.0 * d / (cfg.c * cfg.bin_width)).round() as usize;
        assert_eq!(peak, expected);
    }

    #[test]
    fn render_is_linear_in_albedo() {
        let cfg = small_config(9);
        let wall = WallGrid::confocal_rectangle(Vec3::ZERO, 1.0, 1.0, GridDims::new(3, 3)).unwrap();
        let mut mesh = TriangleMesh::z_rectangle(Vec3::new(0.0, 0.0, 0.5), 0.6, 0.6, 0.8).unwrap();
        let a = render_mesh(&mesh, &wall, &cfg).unwrap();
        mesh.scale_albedo(0.5);
        let b = render_mesh(&mesh, &wall, &cfg).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(*y, 0.5 * x);
        }
    }

    #[test]
    fn adding_triangles_never_decreases_bins_without_occlusion() {
        let cfg = small_config(9);
        let opts = MeshRenderOptions {
            occlusion: false,
            ..Default::default()
        };
        let wall = WallGrid::confocal_rectangle(Vec3::ZERO, 1.0, 1.0, GridDims::new(3, 3)).unwrap();
        let mut mesh = TriangleMesh::z_rectangle(Vec3::new(0.0, 0.0, 0.6), 0.6, 0.6, 0.8).unwrap();
        let a = render_mesh_with(&mesh, &wall, &cfg, opts).unwrap();
        mesh.merge(&TriangleMesh::z_rectangle(Vec3::new(0.1, 0.0, 0.4), 0.3, 0.3, 0.5).unwrap());
        let b = render_mesh_with(&mesh, &wall, &cfg, opts).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| y >= x));
        assert!(b.values.iter().sum::<f64>() > a.values.iter().sum::<f64>());
    }

    #[test]
    fn swap_symmetric_scene_gives_symmetric_cube() {
        // a row of wall points mirrored about x = 0 and a mirror-symmetric
        // scene; H(l, s) equals H(s, l) for mirror pairs
        let cfg = small_config(11);
        let dims = GridDims::new(1, 6);
        let pts = WallGrid::rectangle_points(Vec3::ZERO, 1.0, 0.2, dims);
        let wall = WallGrid::new(
            pts.clone(),
            dims,
            pts,
            dims,
            Vec3::new(0.0, 0.0, 1.0),
            false,
        )
        .unwrap();
        let mesh = TriangleMesh::z_rectangle(Vec3::new(0.0, 0.0, 0.5), 0.8, 0.4, 0.7).unwrap();
        let cube = render_mesh(&mesh, &wall, &cfg).unwrap();
        for i in 0..6 {
            let j = 5 - i;
            let a = cube.pixel(cube.pixel_index(i, j));
            let b = cube.pixel(cube.pixel_index(j, i));
            let scale = a.iter().cloned().fold(0.0, f64::max);
            assert!(scale > 0.0);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let cfg = small_config(9);
        let wall = WallGrid::confocal_rectangle(Vec3::ZERO, 1.0, 1.0, GridDims::new(3, 3)).unwrap();
        let mut cube = TransientCube::zeros(&wall, &cfg);
        assert!(cube.check_shape(&wall, &cfg).is_ok());
        cube.num_bins = 10;
        assert!(cube.check_shape(&wall, &cfg).is_err());
        let mut bad = cfg.clone();
        bad.volume_origin = [-0.5, -0.5, -2.0];
        bad.volume_extent = [1.0, 1.0, 1.0];
        assert!(render_mesh(&TriangleMesh::empty(), &wall, &bad).is_err());
    }

    /// Implicit surface holding the exact first hits of `mesh` along every
    /// hemisphere ray, with the mesh's face normals.
    fn exact_surface(mesh: &TriangleMesh, wall: &WallGrid, cfg: &SceneConfig) -> ImplicitSurface {
        let grid = HemisphereGrid::new(cfg.hemisphere_resolution, wall.wall_normal).unwrap();
        let mut cells = Vec::new();
        for &x_s in &wall.sensor_points {
            for &dir in &grid.dirs {
                cells.push(match mesh.nearest_hit(x_s, dir, 1e-9) {
                    Some(h) => SurfaceCell {
                        hit: true,
                        depth: h.t,
                        point: x_s + dir * h.t,
                        normal: mesh.face_normal(h.triangle),
                        fallback: false,
                    },
                    None => SurfaceCell {
                        hit: false,
                        depth: 0.0,
                        point: Vec3::ZERO,
                        normal: Vec3::ZERO,
                        fallback: false,
                    },
                });
            }
        }
        ImplicitSurface {
            n: grid.n,
            sensor_ids: (0..wall.num_sensors()).collect(),
            dirs: grid.dirs,
            cells,
        }
    }

    #[test]
    fn implicit_render_of_exact_hits_matches_mesh_render() {
        let cfg = small_config(9);
        let wall = WallGrid::confocal_rectangle(Vec3::ZERO, 1.0, 1.0, GridDims::new(4, 4)).unwrap();
        let mesh = TriangleMesh::z_rectangle(Vec3::new(0.1, 0.0, 0.5), 0.6, 0.5, 0.5).unwrap();
        let g = exact_surface(&mesh, &wall, &cfg);
        assert!(g.num_hits() > 0);
        let implicit = render_implicit(&g, &AlbedoGrid::uniform(&cfg, 0.5), &wall, &cfg).unwrap();
        let reference = render_mesh(&mesh, &wall, &cfg).unwrap();
        let scale = reference.max_value();
        assert!(scale > 0.0);
        for (a, b) in implicit.values.iter().zip(&reference.values) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn implicit_render_is_linear_in_albedo_and_zero_without_hits() {
        let cfg = small_config(7);
        let wall = WallGrid::confocal_rectangle(Vec3::ZERO, 1.0, 1.0, GridDims::new(3, 3)).unwrap();
        let mesh = TriangleMesh::z_rectangle(Vec3::new(0.0, 0.0, 0.45), 0.8, 0.8, 1.0).unwrap();
        let g = exact_surface(&mesh, &wall, &cfg);
        let a = render_implicit(&g, &AlbedoGrid::uniform(&cfg, 0.3), &wall, &cfg).unwrap();
        let b = render_implicit(&g, &AlbedoGrid::uniform(&cfg, 0.6), &wall, &cfg).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
        let empty = exact_surface(&TriangleMesh::empty(), &wall, &cfg);
        let z = render_implicit(&empty, &AlbedoGrid::uniform(&cfg, 0.6), &wall, &cfg).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        let partial = ImplicitSurface {
            sensor_ids: vec![0],
            cells: g.cells_of(0).to_vec(),
            ..g.clone()
        };
        assert!(render_implicit(&partial, &AlbedoGrid::uniform(&cfg, 0.6), &wall, &cfg).is_err());
        let one = render_implicit_sensors(
            &partial,
            &AlbedoGrid::uniform(&cfg, 0.6),
            &wall,
            &cfg,
            DEFAULT_SIGMA_T,
        )
        .unwrap();
        assert_eq!(one.pixel(0), b.pixel(0));
        assert!(one.pixel(1).iter().all(|&v| v == 0.0));
    }
}
