//! Composite loss, reverse-mode gradients of the whole pipeline, Adam
//! updates and the calibration loop.
//!
//! Discrete choices of a forward pass (frequency band, normalization voxel,
//! projection maxima, hit masks, normal orientation, bin windows, kernel
//! support) are recorded in [`Decisions`]. Gradients treat them as
//! constants, and replaying them makes the loss a smooth function of `θ`.

use std::collections::VecDeque;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::phasor::{
    filter_with_kernel, kernel_spectrum, max_project_argmax, max_project_xz, retained_band,
    transient_spectrum, KernelCache, PhasorKernelParams, RsdOperator, TransientSpectrum,
    VolumeGrid,
};
use crate::scene::{HemisphereGrid, SceneConfig, WallGrid};
use crate::sensor::{
    convolve_centered, correlate_centered, kernel_adjoint, psi_kernel_with_grad, LaserSensorParams,
};
use crate::surface::{
    extract_with, march_distances, normal_backward, soft_depth_grad, stencil, trilinear,
    AlbedoGrid, ImplicitSurface, NormalMode, SensorDecisions, DEFAULT_ALBEDO, DEFAULT_BETA,
    DEFAULT_THRESHOLD,
};
use crate::transient::{
    gaussian_bin, ray_weight, render_implicit_windows, throughput_grad, throughput_raw,
    SensorWindows, TransientCube, DEFAULT_SIGMA_T,
};

pub const LAMBDA1: f64 = 1e2;
pub const LAMBDA2: f64 = 5e-3;

/// Names of the six scalar parameters, in optimization order.
pub const SCALAR_NAMES: [&str; 6] = [
    "omega_pf",
    "sigma_pf",
    "intensity",
    "sigma_ls",
    "kappa_s",
    "eta_s",
];

/// Everything the calibration optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub pf: PhasorKernelParams,
    pub ls: LaserSensorParams,
    pub albedo: AlbedoGrid,
}

impl ParamSet {
    /// Starting point: carrier from the wall pitch, two-bin sensor widths,
    /// unit intensity, no offset and albedo 0.5.
    pub fn initial(wall: &WallGrid, cfg: &SceneConfig) -> Self {
        ParamSet {
            pf: PhasorKernelParams::for_wall_pitch(wall_pitch(wall), cfg.c),
            ls: LaserSensorParams {
                intensity: 1.0,
                sigma_ls: 2.0 * cfg.bin_width,
                kappa_s: 1.0 / (2.0 * cfg.bin_width),
                eta_s: 0.0,
            },
            albedo: AlbedoGrid::uniform(cfg, DEFAULT_ALBEDO),
        }
    }

    /// Natural values `[Ω, σ_pf, I_l, σ_ls, κ_s, η_s]`.
    pub fn scalars(&self) -> [f64; 6] {
        [
            self.pf.omega_pf,
            self.pf.sigma_pf,
            self.ls.intensity,
            self.ls.sigma_ls,
            self.ls.kappa_s,
            self.ls.eta_s,
        ]
    }

    pub fn set_scalars(&mut self, v: [f64; 6]) {
        self.pf.omega_pf = v[0];
        self.pf.sigma_pf = v[1];
        self.ls.intensity = v[2];
        self.ls.sigma_ls = v[3];
        self.ls.kappa_s = v[4];
        self.ls.eta_s = v[5];
    }

    /// Optimization coordinates: logs of the positive scalars, `η_s` as is.
    pub fn coords(&self) -> [f64; 6] {
        let s = self.scalars();
        [s[0].ln(), s[1].ln(), s[2].ln(), s[3].ln(), s[4].ln(), s[5]]
    }

    pub fn set_coords(&mut self, c: [f64; 6]) {
        self.set_scalars([
            c[0].exp(),
            c[1].exp(),
            c[2].exp(),
            c[3].exp(),
            c[4].exp(),
            c[5],
        ]);
    }

    pub fn validate(&self) -> Result<()> {
        self.pf.validate()?;
        self.ls.validate()
    }
}

/// Pitch of the sensor lattice along its rows (or columns for one column).
pub fn wall_pitch(wall: &WallGrid) -> f64 {
    let d = wall.sensor_dims;
    if d.cols > 1 {
        (wall.sensor_points[1] - wall.sensor_points[0]).norm()
    } else if d.rows > 1 {
        (wall.sensor_points[d.cols] - wall.sensor_points[0]).norm()
    } else {
        0.01
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub e_h: f64,
    pub e_ipf: f64,
    pub e_rho: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Data-term mean over the pixels in `batch`.
fn data_term(h: &TransientCube, h_r: &TransientCube, batch: &[usize]) -> f64 {
    let t = h.num_bins;
    let mut acc = 0.0;
    for &p in batch {
        for (a, b) in h.pixel(p).iter().zip(h_r.pixel(p)) {
            acc += (a - b) * (a - b);
        }
    }
    acc / (batch.len() * t) as f64
}

/// Number of forward-difference cells of the lateral TV term.
fn tv_cells(dims: [usize; 3]) -> usize {
    dims[0].saturating_sub(1) * dims[1].saturating_sub(1) * dims[2]
}

fn tv_term(rho: &VolumeGrid) -> f64 {
    let [w, h, d] = rho.dims;
    let n = tv_cells(rho.dims);
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for z in 0..d {
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let c = rho.get(x, y, z);
                let dx = rho.get(x + 1, y, z) - c;
                let dy = rho.get(x, y + 1, z) - c;
                acc += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    acc / n as f64
}

fn tv_grad(rho: &VolumeGrid, scale: f64, out: &mut [f64]) {
    let [w, h, d] = rho.dims;
    let n = tv_cells(rho.dims);
    if n == 0 {
        return;
    }
    let s = scale / n as f64;
    for z in 0..d {
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let i = rho.index(x, y, z);
                let c = rho.values[i];
                let dx = rho.get(x + 1, y, z) - c;
                let dy = rho.get(x, y + 1, z) - c;
                let m = (dx * dx + dy * dy).sqrt();
                if m > 0.0 {
                    out[rho.index(x + 1, y, z)] += s * dx / m;
                    out[rho.index(x, y + 1, z)] += s * dy / m;
                    out[i] -= s * (dx + dy) / m;
                }
            }
        }
    }
}

/// `E_H + λ1·mean(max_y I_pf) + λ2·mean|∇_xy ρ|` over the pixel `batch`.
pub fn loss(
    h: &TransientCube,
    h_r: &TransientCube,
    i_pf: &VolumeGrid,
    rho: &AlbedoGrid,
    lambda1: f64,
    lambda2: f64,
    batch: &[usize],
) -> Result<LossBreakdown> {
    if !h.same_shape(h_r) {
        return Err(Error::Shape(
            "measured and rendered cubes differ in shape".into(),
        ));
    }
    if !i_pf.matches(&rho.0) {
        return Err(Error::Shape(
            "intensity volume and albedo grid differ in shape".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss batch is empty".into()));
    }
    if let Some(p) = batch.iter().find(|&&p| p >= h.num_pixels()) {
        return Err(Error::Shape(format!("batch pixel {p} outside the cube")));
    }
    let e_h = data_term(h, h_r, batch);
    let proj = max_project_xz(i_pf);
    let e_ipf =
        lambda1 * proj.values.iter().map(|v| v.abs()).sum::<f64>() / proj.values.len() as f64;
    let e_rho = lambda2 * tv_term(&rho.0);
    Ok(LossBreakdown {
        e_h,
        e_ipf,
        e_rho,
        total: e_h + e_ipf + e_rho,
        lambda1,
        lambda2,
    })
}

/// Knobs of the differentiable pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub beta: f64,
    pub threshold: f64,
    pub sigma_t: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            beta: DEFAULT_BETA,
            threshold: DEFAULT_THRESHOLD,
            sigma_t: DEFAULT_SIGMA_T,
            lambda1: LAMBDA1,
            lambda2: LAMBDA2,
        }
    }
}

/// Discrete branch choices of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Decisions {
    band: Vec<usize>,
    norm_voxel: usize,
    proj_argmax: Vec<usize>,
    sensors: Vec<usize>,
    surface: Vec<SensorDecisions>,
    windows: Vec<SensorWindows>,
    psi_support: usize,
}

impl Decisions {
    pub fn sensors(&self) -> &[usize] {
        &self.sensors
    }
}

/// Intermediates of a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    /// Normalized intensity.
    pub volume: VolumeGrid,
    pub surface: ImplicitSurface,
    pub rendered: TransientCube,
    pub predicted: TransientCube,
    pub decisions: Decisions,
    field: Vec<Complex64>,
    raw_max: f64,
}

/// Measurement, geometry and cached spectra shared by every evaluation.
pub struct Problem<'a> {
    pub h: &'a TransientCube,
    pub wall: &'a WallGrid,
    pub cfg: &'a SceneConfig,
    pub opts: PipelineOptions,
    spectrum: TransientSpectrum,
    grid: HemisphereGrid,
    kernels: KernelCache,
}

/// Gradient in optimization coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub scalars: [f64; 6],
    pub albedo: Vec<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        (self.scalars.iter().map(|g| g * g).sum::<f64>()
            + self.albedo.iter().map(|g| g * g).sum::<f64>())
        .sqrt()
    }
}

fn finite_or(stage: &'static str, vals: impl IntoIterator<Item = f64>) -> Result<()> {
    if vals.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(stage))
    }
}

impl<'a> Problem<'a> {
    pub fn new(
        h: &'a TransientCube,
        wall: &'a WallGrid,
        cfg: &'a SceneConfig,
        opts: PipelineOptions,
    ) -> Result<Self> {
        h.check_shape(wall, cfg)?;
        cfg.check_wall(wall)?;
        Ok(Problem {
            h,
            wall,
            cfg,
            opts,
            spectrum: transient_spectrum(h),
            grid: HemisphereGrid::new(cfg.hemisphere_resolution, wall.wall_normal)?,
            kernels: KernelCache::default(),
        })
    }

    fn pixels_of(&self, sensors: &[usize]) -> Vec<usize> {
        let mut px: Vec<usize> = (0..self.h.num_lasers)
            .flat_map(|l| sensors.iter().map(move |&s| (l, s)))
            .map(|(l, s)| self.h.pixel_index(l, s))
            .collect();
        px.sort_unstable();
        px
    }

    /// Runs the pipeline on `sensors`, replaying `frozen` choices when given.
    pub fn evaluate(
        &self,
        theta: &ParamSet,
        sensors: &[usize],
        frozen: Option<&Decisions>,
    ) -> Result<Evaluation> {
        theta.validate()?;
        if sensors.is_empty() {
            return Err(Error::InvalidArgument(
                "evaluation needs at least one sensor".into(),
            ));
        }
        let spec = self.spectrum.spec;
        let ks = kernel_spectrum(&theta.pf, &spec);
        let band = match frozen {
            Some(f) => f.band.clone(),
            None => retained_band(&ks.values),
        };
        let hpf = filter_with_kernel(&self.spectrum, &ks.values, band.clone());
        let op = RsdOperator::with_cache(self.wall, self.cfg, &hpf.omegas, &self.kernels)?;
        let field = op.forward(&hpf.coeffs);
        let mut raw = VolumeGrid::zeros(self.cfg);
        raw.values = field.iter().map(|u| u.norm_sqr()).collect();
        let norm_voxel = match frozen {
            Some(f) => f.norm_voxel,
            None => raw.argmax(),
        };
        let raw_max = raw.values[norm_voxel];
        if !(raw_max > 0.0) || !raw_max.is_finite() {
            return Err(Error::EmptyReconstruction);
        }
        let mut volume = raw;
        volume.values.iter_mut().for_each(|v| *v /= raw_max);
        let proj_argmax = match frozen {
            Some(f) => f.proj_argmax.clone(),
            None => max_project_argmax(&volume),
        };
        let (surface, surf_dec) = extract_with(
            &volume,
            self.wall,
            self.cfg,
            self.opts.beta,
            self.opts.threshold,
            sensors,
            frozen.map(|f| f.surface.as_slice()),
        )?;
        let (rendered, windows) = render_implicit_windows(
            &surface,
            &theta.albedo,
            self.wall,
            self.cfg,
            self.opts.sigma_t,
            frozen.map(|f| f.windows.as_slice()),
        )?;
        let psi_support = match frozen {
            Some(f) => f.psi_support,
            None => theta
                .ls
                .default_support(spec.bin_width)
                .max(theta.ls.min_support(spec.bin_width)),
        };
        let psi = crate::sensor::psi_kernel(&theta.ls, spec.bin_width, psi_support)?;
        let mut predicted = rendered.clone();
        let t = spec.num_bins;
        predicted
            .values
            .par_chunks_mut(t)
            .zip(rendered.values.par_chunks(t))
            .for_each(|(o, src)| {
                convolve_centered(src, &psi, spec.bin_width, o);
                o.iter_mut().for_each(|v| *v += theta.ls.eta_s);
            });
        let pixels = self.pixels_of(sensors);
        let e_h = data_term(self.h, &predicted, &pixels);
        let proj = &proj_argmax;
        let [w, _, d] = volume.dims;
        let mut e_ipf = 0.0;
        for z in 0..d {
            for x in 0..w {
                e_ipf += volume.get(x, proj[z * w + x], z).abs();
            }
        }
        let e_ipf = self.opts.lambda1 * e_ipf / (w * d) as f64;
        let e_rho = self.opts.lambda2 * tv_term(&theta.albedo.0);
        let loss = LossBreakdown {
            e_h,
            e_ipf,
            e_rho,
            total: e_h + e_ipf + e_rho,
            lambda1: self.opts.lambda1,
            lambda2: self.opts.lambda2,
        };
        Ok(Evaluation {
            loss,
            volume,
            surface,
            rendered,
            predicted,
            decisions: Decisions {
                band,
                norm_voxel,
                proj_argmax,
                sensors: sensors.to_vec(),
                surface: surf_dec,
                windows,
                psi_support,
            },
            field,
            raw_max,
        })
    }

    /// Total loss with every discrete choice replayed from `frozen`.
    pub fn frozen_total(&self, theta: &ParamSet, frozen: &Decisions) -> Result<f64> {
        Ok(self
            .evaluate(theta, &frozen.sensors, Some(frozen))?
            .loss
            .total)
    }

    #[cfg(test)]
    /// Data term computed from a given normalized volume with every
    /// downstream choice replayed from `dec`.
    pub(crate) fn data_from_volume(
        &self,
        theta: &ParamSet,
        volume: &VolumeGrid,
        dec: &Decisions,
    ) -> Result<f64> {
        let (surface, _) = extract_with(
            volume,
            self.wall,
            self.cfg,
            self.opts.beta,
            self.opts.threshold,
            &dec.sensors,
            Some(&dec.surface),
        )?;
        let (rendered, _) = render_implicit_windows(
            &surface,
            &theta.albedo,
            self.wall,
            self.cfg,
            self.opts.sigma_t,
            Some(&dec.windows),
        )?;
        let psi = crate::sensor::psi_kernel(&theta.ls, self.cfg.bin_width, dec.psi_support)?;
        let t = self.cfg.num_bins;
        let pixels = self.pixels_of(&dec.sensors);
        let mut out = vec![0.0; t];
        let mut acc = 0.0;
        for &p in &pixels {
            convolve_centered(rendered.pixel(p), &psi, self.cfg.bin_width, &mut out);
            for (o, m) in out.iter().zip(self.h.pixel(p)) {
                let r = o + theta.ls.eta_s - m;
                acc += r * r;
            }
        }
        Ok(acc / (pixels.len() * t) as f64)
    }

    /// Adjoints of the data term: `(Ī_n, ρ̄, [Ī_l, σ̄_ls, κ̄_s, η̄_s])` in
    /// natural coordinates.
    pub(crate) fn tail_backward(
        &self,
        theta: &ParamSet,
        eval: &Evaluation,
    ) -> Result<(Vec<f64>, Vec<f64>, [f64; 4])> {
        let spec = self.spectrum.spec;
        let dec = &eval.decisions;
        let t = spec.num_bins;
        let dt = spec.bin_width;
        let n_lasers = self.h.num_lasers;
        let pixels = self.pixels_of(&dec.sensors);
        let scale = 2.0 / (pixels.len() * t) as f64;

        // data term and sensor model
        let pw = psi_kernel_with_grad(&theta.ls, dt, dec.psi_support)?;
        let mut hr_bar = vec![0.0; self.h.values.len()];
        let mut psi_bar = vec![0.0; pw.psi.len()];
        let mut eta_bar = 0.0;
        for &p in &pixels {
            let g: Vec<f64> = eval
                .predicted
                .pixel(p)
                .iter()
                .zip(self.h.pixel(p))
                .map(|(a, b)| scale * (a - b))
                .collect();
            eta_bar += g.iter().sum::<f64>();
            correlate_centered(&g, &pw.psi, dt, &mut hr_bar[p * t..(p + 1) * t]);
            kernel_adjoint(&g, eval.rendered.pixel(p), dt, &mut psi_bar);
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let g_int = dot(&psi_bar, &pw.d_intensity);
        let g_sls = dot(&psi_bar, &pw.d_sigma);
        let g_kap = dot(&psi_bar, &pw.d_kappa);
        finite_or("sensor", [eta_bar, g_int, g_sls, g_kap])?;

        // rendering, normals, softargmax and ray sampling, per sensor chunk
        let vol = &eval.volume;
        let n_vox = vol.len();
        let weight = ray_weight(self.grid.n);
        let sigma_t = self.opts.sigma_t;
        let c = self.cfg.c;
        let step = self.cfg.ray_step();
        let m = self.grid.len();
        let chunk = 8;
        let ids: Vec<usize> = (0..dec.sensors.len()).collect();
        let partial: Vec<(Vec<f64>, Vec<f64>)> = ids
            .par_chunks(chunk)
            .map(|ks| {
                let mut in_bar = vec![0.0; n_vox];
                let mut rho_bar = vec![0.0; n_vox];
                for &k in ks {
                    let s = dec.sensors[k];
                    let x_s = self.wall.sensor_points[s];
                    let cells = eval.surface.cells_of(k);
                    let depth: Vec<Option<f64>> =
                        cells.iter().map(|c| c.hit.then_some(c.depth)).collect();
                    let mut d_bar = vec![0.0; m];
                    for (ci, cell) in cells.iter().enumerate().filter(|(_, c)| c.hit) {
                        let x_g = cell.point;
                        let (r_val, r_grad, r_st) = match stencil(&theta.albedo.0, x_g) {
                            Some(st) => {
                                let mut v = 0.0;
                                let mut g = Vec3::ZERO;
                                for j in 0..8 {
                                    v += st.w[j] * theta.albedo.0.values[st.idx[j]];
                                    g += st.dw[j] * theta.albedo.0.values[st.idx[j]];
                                }
                                (v, g, Some(st))
                            }
                            None => (0.0, Vec3::ZERO, None),
                        };
                        let mut xg_bar = Vec3::ZERO;
                        let mut ng_bar = Vec3::ZERO;
                        let mut rho_cell_bar = 0.0;
                        for l in 0..n_lasers {
                            let win = dec.windows[k][ci * n_lasers + l];
                            if win.lo >= win.hi {
                                continue;
                            }
                            let p = self.h.pixel_index(l, s);
                            let gbar = &hr_bar[p * t..(p + 1) * t];
                            let x_l = self.wall.laser_for(l, s);
                            let a = x_g - x_l;
                            let b = x_s - x_g;
                            let tb = spec.to_bins((a.norm() + b.norm()) / c);
                            let mut sum = 0.0;
                            let mut sum_d = 0.0;
                            for tau in win.lo..win.hi {
                                let gv = gaussian_bin(tau, tb, sigma_t);
                                sum += gbar[tau] * gv;
                                sum_d += gbar[tau] * gv * (tau as f64 - tb) / (sigma_t * sigma_t);
                            }
                            if sum == 0.0 && sum_d == 0.0 {
                                continue;
                            }
                            let tp =
                                throughput_raw(x_l, x_g, x_s, cell.normal, self.wall.wall_normal);
                            let (tg_x, tg_n) =
                                throughput_grad(x_l, x_g, x_s, cell.normal, self.wall.wall_normal);
                            let amp = r_val * weight * tp;
                            rho_cell_bar += sum * weight * tp;
                            xg_bar += tg_x * (sum * weight * r_val)
                                + (a.normalized() - b.normalized()) * (amp * sum_d / (c * dt));
                            ng_bar += tg_n * (sum * weight * r_val);
                        }
                        if let Some(st) = &r_st {
                            xg_bar += r_grad * rho_cell_bar;
                            for j in 0..8 {
                                rho_bar[st.idx[j]] += st.w[j] * rho_cell_bar;
                            }
                        }
                        d_bar[ci] += xg_bar.dot(self.grid.dirs[ci]);
                        let mode = dec.surface[k].mode[ci];
                        if mode != NormalMode::Fallback {
                            if let Some((nids, g)) =
                                normal_backward(&depth, &self.grid, x_s, ci, mode, ng_bar)
                            {
                                for j in 0..4 {
                                    d_bar[nids[j]] += g[j];
                                }
                            }
                        }
                    }
                    for (ci, cell) in cells.iter().enumerate() {
                        if !cell.hit || d_bar[ci] == 0.0 {
                            continue;
                        }
                        let dir = self.grid.dirs[ci];
                        let dists = march_distances(vol, x_s, dir, step);
                        let samples: Vec<(f64, f64)> = dists
                            .iter()
                            .map(|&d| (d, trilinear(vol, x_s + dir * d)))
                            .collect();
                        let (_, gi) = soft_depth_grad(&samples, self.opts.beta);
                        for (&d, g) in dists.iter().zip(gi) {
                            if g == 0.0 {
                                continue;
                            }
                            if let Some(st) = stencil(vol, x_s + dir * d) {
                                for j in 0..8 {
                                    in_bar[st.idx[j]] += st.w[j] * g * d_bar[ci];
                                }
                            }
                        }
                    }
                }
                (in_bar, rho_bar)
            })
            .collect();
        let mut in_bar = vec![0.0; n_vox];
        let mut albedo = vec![0.0; n_vox];
        for (a, b) in partial {
            in_bar.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
            albedo.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        finite_or("render", albedo.iter().cloned())?;
        finite_or("surface", in_bar.iter().cloned())?;
        Ok((in_bar, albedo, [g_int, g_sls, g_kap, eta_bar]))
    }

    /// Reverse-mode gradient of the total loss at `eval`.
    pub fn gradient(&self, theta: &ParamSet, eval: &Evaluation) -> Result<Gradient> {
        let spec = self.spectrum.spec;
        let dec = &eval.decisions;
        let t = spec.num_bins;
        let vol = &eval.volume;
        let (mut in_bar, mut albedo, [g_int, g_sls, g_kap, eta_bar]) =
            self.tail_backward(theta, eval)?;
        tv_grad(&theta.albedo.0, self.opts.lambda2, &mut albedo);

        // projection term on the normalized volume
        let [w, _, d] = vol.dims;
        let proj_scale = self.opts.lambda1 / (w * d) as f64;
        for z in 0..d {
            for x in 0..w {
                let i = vol.index(x, dec.proj_argmax[z * w + x], z);
                in_bar[i] += proj_scale * vol.values[i].signum();
            }
        }

        // normalization by the frozen voxel
        let corr: f64 = in_bar.iter().zip(&vol.values).map(|(g, v)| g * v).sum();
        let mut raw_bar: Vec<f64> = in_bar.iter().map(|g| g / eval.raw_max).collect();
        raw_bar[dec.norm_voxel] -= corr / eval.raw_max;

        // |U|² and the RSD operator
        let field_bar: Vec<Complex64> = raw_bar
            .iter()
            .zip(&eval.field)
            .map(|(g, u)| u * (2.0 * g))
            .collect();
        let ks = kernel_spectrum(&theta.pf, &spec);
        let omegas: Vec<f64> = dec
            .band
            .iter()
            .map(|&b| crate::phasor::bin_omega(b, t, spec.bin_width))
            .collect();
        let op = RsdOperator::with_cache(self.wall, self.cfg, &omegas, &self.kernels)?;
        let coeff_bar = op.adjoint(&field_bar);
        finite_or("rsd", coeff_bar.iter().flat_map(|c| [c.re, c.im]))?;

        // phasor filter
        let npx = self.spectrum.num_lasers * self.spectrum.num_sensors;
        let mut g_om = 0.0;
        let mut g_sg = 0.0;
        for (k, &b) in dec.band.iter().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for p in 0..npx {
                acc += coeff_bar[k * npx + p].conj() * self.spectrum.values[p * t + b];
            }
            g_om += (acc * ks.d_omega[b]).re;
            g_sg += (acc * ks.d_sigma[b]).re;
        }
        finite_or("filter", [g_om, g_sg])?;

        let s = theta.scalars();
        Ok(Gradient {
            scalars: [
                g_om * s[0],
                g_sg * s[1],
                g_int * s[2],
                g_sls * s[3],
                g_kap * s[4],
                eta_bar,
            ],
            albedo,
        })
    }
}

/// `filter_H → rsd_fft → normalize_volume → extract_surface →
/// render_implicit → apply_sensor` with default options.
pub fn forward(
    h: &TransientCube,
    theta: &ParamSet,
    wall: &WallGrid,
    cfg: &SceneConfig,
) -> Result<(VolumeGrid, ImplicitSurface, TransientCube)> {
    let prob = Problem::new(h, wall, cfg, PipelineOptions::default())?;
    let all: Vec<usize> = (0..wall.num_sensors()).collect();
    let e = prob.evaluate(theta, &all, None)?;
    Ok((e.volume, e.surface, e.predicted))
}

/// Gradient of the default-option loss over the sensors in `batch`.
pub fn grad(
    h: &TransientCube,
    theta: &ParamSet,
    wall: &WallGrid,
    cfg: &SceneConfig,
    batch: &[usize],
) -> Result<Gradient> {
    let prob = Problem::new(h, wall, cfg, PipelineOptions::default())?;
    let e = prob.evaluate(theta, batch, None)?;
    prob.gradient(theta, &e)
}

/// Adam moments and convergence window.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub iteration: usize,
    pub m_scalar: [f64; 6],
    pub v_scalar: [f64; 6],
    pub m_albedo: Vec<f64>,
    pub v_albedo: Vec<f64>,
    pub lr_scalar: f64,
    pub lr_albedo: f64,
    pub window: VecDeque<f64>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptState {
    pub fn new(num_voxels: usize) -> Self {
        OptState {
            iteration: 0,
            m_scalar: [0.0; 6],
            v_scalar: [0.0; 6],
            m_albedo: vec![0.0; num_voxels],
            v_albedo: vec![0.0; num_voxels],
            lr_scalar: 1e-2,
            lr_albedo: 1e-2,
            window: VecDeque::new(),
        }
    }
}

#[inline]
fn adam(x: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, t: i32) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let mh = *m / (1.0 - ADAM_BETA1.powi(t));
    let vh = *v / (1.0 - ADAM_BETA2.powi(t));
    *x -= lr * mh / (vh.sqrt() + ADAM_EPS);
}

/// One bias-corrected Adam update in optimization coordinates.
pub fn step(state: &OptState, theta: &ParamSet, grads: &Gradient) -> Result<(OptState, ParamSet)> {
    if grads.albedo.len() != theta.albedo.len() || state.m_albedo.len() != theta.albedo.len() {
        return Err(Error::Shape(
            "gradient, state and albedo grid differ in size".into(),
        ));
    }
    let mut st = state.clone();
    st.iteration += 1;
    let t = st.iteration as i32;
    let mut c = theta.coords();
    for i in 0..6 {
        adam(
            &mut c[i],
            &mut st.m_scalar[i],
            &mut st.v_scalar[i],
            grads.scalars[i],
            st.lr_scalar,
            t,
        );
    }
    c[5] = c[5].max(0.0);
    let mut out = theta.clone();
    out.set_coords(c);
    let a = out.albedo.values_mut();
    for i in 0..a.len() {
        adam(
            &mut a[i],
            &mut st.m_albedo[i],
            &mut st.v_albedo[i],
            grads.albedo[i],
            st.lr_albedo,
            t,
        );
    }
    out.albedo.clamp();
    Ok((st, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibOptions {
    pub max_iters: usize,
    /// Fraction of sensor points sampled per iteration.
    pub batch_fraction: f64,
    pub seed: u64,
    pub lr_scalar: f64,
    pub lr_albedo: f64,
    pub window: usize,
    pub tolerance: f64,
    /// Abort when the total exceeds this multiple of the first total.
    pub divergence_factor: f64,
    pub pipeline: PipelineOptions,
}

impl Default for CalibOptions {
    fn default() -> Self {
        CalibOptions {
            max_iters: 200,
            batch_fraction: 0.25,
            seed: 0,
            lr_scalar: 1e-2,
            lr_albedo: 1e-2,
            window: 10,
            tolerance: 1e-4,
            divergence_factor: 1e3,
            pipeline: PipelineOptions::default(),
        }
    }
}

/// Parameters and loss at the start of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub scalars: [f64; 6],
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct CalibResult {
    pub params: ParamSet,
    pub history: Vec<HistoryRow>,
    pub converged: bool,
}

/// Seeded sample of sensor indices without replacement, sorted.
pub fn sample_batch(num_sensors: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = ((num_sensors as f64 * fraction).ceil() as usize).clamp(1, num_sensors);
    let mut v = sample(rng, num_sensors, k).into_vec();
    v.sort_unstable();
    v
}

/// Moving-average convergence test over the last `window + 1` totals.
fn converged(window: &VecDeque<f64>, size: usize, tol: f64) -> bool {
    if window.len() < size + 1 {
        return false;
    }
    let n = window.len();
    let prev: f64 = window.iter().skip(n - size - 1).take(size).sum::<f64>() / size as f64;
    let cur: f64 = window.iter().skip(n - size).sum::<f64>() / size as f64;
    prev > 0.0 && ((cur - prev) / prev).abs() < tol
}

/// Forward → loss → gradient → Adam step until convergence or `max_iters`.
pub fn calibrate(
    h: &TransientCube,
    theta0: &ParamSet,
    wall: &WallGrid,
    cfg: &SceneConfig,
    opts: &CalibOptions,
) -> Result<CalibResult> {
    calibrate_with(h, theta0, wall, cfg, opts, |_, _| {})
}

/// [`calibrate`] with a callback receiving each history row and the
/// parameters it was recorded at.
pub fn calibrate_with(
    h: &TransientCube,
    theta0: &ParamSet,
    wall: &WallGrid,
    cfg: &SceneConfig,
    opts: &CalibOptions,
    mut on_iter: impl FnMut(&HistoryRow, &ParamSet),
) -> Result<CalibResult> {
    if opts.max_iters < 1 {
        return Err(Error::InvalidArgument(
            "max_iters must be at least 1".into(),
        ));
    }
    if !(opts.batch_fraction > 0.0 && opts.batch_fraction <= 1.0) {
        return Err(Error::InvalidArgument(
            "batch_fraction must lie in (0, 1]".into(),
        ));
    }
    let prob = Problem::new(h, wall, cfg, opts.pipeline)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut theta = theta0.clone();
    let mut state = OptState::new(theta.albedo.len());
    state.lr_scalar = opts.lr_scalar;
    state.lr_albedo = opts.lr_albedo;
    let mut history = Vec::new();
    let mut first_total = None;
    let mut done = false;
    for it in 0..opts.max_iters {
        let batch = sample_batch(wall.num_sensors(), opts.batch_fraction, &mut rng);
        let eval = prob.evaluate(&theta, &batch, None)?;
        let total = eval.loss.total;
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                total,
                limit: f64::NAN,
            });
        }
        let limit = opts.divergence_factor * *first_total.get_or_insert(total);
        if total > limit {
            return Err(Error::Diverged {
                iteration: it,
                total,
                limit,
            });
        }
        let row = HistoryRow {
            iteration: it,
            scalars: theta.scalars(),
            loss: eval.loss,
        };
        on_iter(&row, &theta);
        history.push(row);
        state.window.push_back(total);
        while state.window.len() > opts.window + 1 {
            state.window.pop_front();
        }
        if converged(&state.window, opts.window, opts.tolerance) {
            done = true;
            break;
        }
        if it + 1 == opts.max_iters {
            break;
        }
        let g = prob.gradient(&theta, &eval)?;
        let (s, t) = step(&state, &theta, &g)?;
        state = s;
        theta = t;
    }
    Ok(CalibResult {
        params: theta,
        history,
        converged: done,
    })
}
