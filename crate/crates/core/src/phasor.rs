//! Phasor-field filtering and RSD backprojection into the hidden volume.
//!
//! The DFT convention is `X[k] = Σ_t x[t] e^{-2πikt/N}`. A return at time
//! `τ` carries phase `e^{-iωτ}`, so the propagator that refocuses it is
//! `e^{+iω(d_lv+d_vs)/c}/(d_lv·d_vs)`.

use std::borrow::Cow;
use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scene::{SceneConfig, WallGrid};
use crate::transient::{TemporalSpec, TransientCube};

/// Retained kernel bins have magnitude above this fraction of the peak.
pub const BAND_THRESHOLD: f64 = 1e-3;

/// Largest wall side and volume side accepted by [`rsd_direct`].
pub const DIRECT_MAX_WALL_SIDE: usize = 16;
pub const DIRECT_MAX_VOLUME_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasorKernelParams {
    /// Central angular frequency, rad/s.
    pub omega_pf: f64,
    /// Gaussian envelope width, seconds.
    pub sigma_pf: f64,
}

impl PhasorKernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_pf.is_finite()
            && self.omega_pf > 0.0
            && self.sigma_pf.is_finite()
            && self.sigma_pf > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "phasor kernel needs positive omega_pf and sigma_pf, got {} and {}",
                self.omega_pf, self.sigma_pf
            )));
        }
        Ok(())
    }

    /// False when `6 sigma_pf` exceeds the temporal record.
    pub fn fits_record(&self, spec: &TemporalSpec) -> bool {
        6.0 * self.sigma_pf <= spec.num_bins as f64 * spec.bin_width
    }

    /// Wavelength of twice the wall sampling pitch and an envelope of two
    /// cycles.
    pub fn for_wall_pitch(pitch: f64, c: f64) -> Self {
        let wavelength = 2.0 * pitch;
        PhasorKernelParams {
            omega_pf: TAU * c / wavelength,
            sigma_pf: 2.0 * wavelength / c,
        }
    }
}

/// Nonnegative voxel intensities. Voxel `(x, y, z)` has center
/// `origin + (i + ½)·pitch` and index `x + W·(y + H·z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub pitch: [f64; 3],
    pub values: Vec<f64>,
}

impl VolumeGrid {
    pub fn zeros(cfg: &SceneConfig) -> Self {
        VolumeGrid {
            dims: cfg.volume_resolution,
            origin: cfg.volume_origin,
            pitch: cfg.voxel_pitch(),
            values: vec![0.0; cfg.num_voxels()],
        }
    }

    pub fn filled(cfg: &SceneConfig, v: f64) -> Self {
        let mut g = Self::zeros(cfg);
        g.values.iter_mut().for_each(|x| *x = v);
        g
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let w = self.dims[0];
        let h = self.dims[1];
        [i % w, (i / w) % h, i / (w * h)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + (x as f64 + 0.5) * self.pitch[0],
            self.origin[1] + (y as f64 + 0.5) * self.pitch[1],
            self.origin[2] + (z as f64 + 0.5) * self.pitch[2],
        )
    }

    pub fn upper_corner(&self) -> Vec3 {
        Vec3::new(
            self.origin[0] + self.dims[0] as f64 * self.pitch[0],
            self.origin[1] + self.dims[1] as f64 * self.pitch[1],
            self.origin[2] + self.dims[2] as f64 * self.pitch[2],
        )
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// First index holding the maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn matches(&self, other: &VolumeGrid) -> bool {
        self.dims == other.dims && self.origin == other.origin && self.pitch == other.pitch
    }

    pub fn check_config(&self, cfg: &SceneConfig) -> Result<()> {
        if self.dims != cfg.volume_resolution || self.values.len() != cfg.num_voxels() {
            return Err(Error::Shape(format!(
                "volume is {:?}, config expects {:?}",
                self.dims, cfg.volume_resolution
            )));
        }
        Ok(())
    }
}

/// Row-major 2-D image, `values[row * width + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2 {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Filtered wall spectra on a contiguous band of DFT bins.
/// Coefficient `(l, s, k)` lives at `(k·L + l)·S + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    pub num_lasers: usize,
    pub num_sensors: usize,
    pub confocal: bool,
    /// DFT bin indices in `[0, N)`, contiguous modulo `N`.
    pub bins: Vec<usize>,
    /// Signed angular frequency of each retained bin.
    pub omegas: Vec<f64>,
    pub coeffs: Vec<Complex64>,
}

impl SpectralCube {
    pub fn band_len(&self) -> usize {
        self.bins.len()
    }

    #[inline]
    pub fn index(&self, l: usize, s: usize, k: usize) -> usize {
        (k * self.num_lasers + l) * self.num_sensors + s
    }

    #[inline]
    pub fn get(&self, l: usize, s: usize, k: usize) -> Complex64 {
        self.coeffs[self.index(l, s, k)]
    }

    pub fn scaled(&self, a: f64) -> SpectralCube {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= a);
        out
    }
}

/// Angular frequency of DFT bin `k` for `n` samples of width `dt`.
#[inline]
pub fn bin_omega(k: usize, n: usize, dt: f64) -> f64 {
    let signed = if k > n / 2 {
        k as f64 - n as f64
    } else {
        k as f64
    };
    TAU * signed / (n as f64 * dt)
}

/// Samples `e^{iΩt} e^{-t²/(2σ²)}` at `t = (k - N/2)·Δ`.
pub fn phasor_kernel(p: &PhasorKernelParams, spec: &TemporalSpec) -> Vec<Complex64> {
    let mid = (spec.num_bins / 2) as f64;
    (0..spec.num_bins)
        .map(|k| {
            let t = (k as f64 - mid) * spec.bin_width;
            Complex64::from_polar(
                (-t * t / (2.0 * p.sigma_pf * p.sigma_pf)).exp(),
                p.omega_pf * t,
            )
        })
        .collect()
}

/// DFT of the zero-centered kernel and its derivatives in `Ω` and `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpectrum {
    pub values: Vec<Complex64>,
    pub d_omega: Vec<Complex64>,
    pub d_sigma: Vec<Complex64>,
}

pub fn kernel_spectrum(p: &PhasorKernelParams, spec: &TemporalSpec) -> KernelSpectrum {
    let n = spec.num_bins;
    let mid = n / 2;
    let samples = phasor_kernel(p, spec);
    let mut a = vec![Complex64::new(0.0, 0.0); n];
    let mut b = a.clone();
    let mut c = a.clone();
    for (k, v) in samples.iter().enumerate() {
        // time zero moves to index 0
        let j = (k + n - mid) % n;
        let t = (k as f64 - mid as f64) * spec.bin_width;
        a[j] = *v;
        b[j] = *v * Complex64::new(0.0, t);
        c[j] = *v * (t * t / p.sigma_pf.powi(3));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    fft.process(&mut a);
    fft.process(&mut b);
    fft.process(&mut c);
    KernelSpectrum {
        values: a,
        d_omega: b,
        d_sigma: c,
    }
}

/// Contiguous run of bins around the spectral peak above the threshold.
pub fn retained_band(spectrum: &[Complex64]) -> Vec<usize> {
    let n = spectrum.len();
    let mags: Vec<f64> = spectrum.iter().map(|c| c.norm()).collect();
    let mut peak = 0;
    for k in 0..n {
        if mags[k] > mags[peak] {
            peak = k;
        }
    }
    let cut = BAND_THRESHOLD * mags[peak];
    let mut lo = 0usize;
    while lo + 1 < n && mags[(peak + n - lo - 1) % n] > cut {
        lo += 1;
    }
    let mut hi = 0usize;
    while lo + hi + 1 < n && mags[(peak + hi + 1) % n] > cut {
        hi += 1;
    }
    (0..=lo + hi).map(|i| (peak + n - lo + i) % n).collect()
}

/// Per-pixel DFTs of a cube, with the record start phase applied.
/// Entry `(p, k)` lives at `p·N + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientSpectrum {
    pub num_lasers: usize,
    pub num_sensors: usize,
    pub confocal: bool,
    pub spec: TemporalSpec,
    pub values: Vec<Complex64>,
}

pub fn transient_spectrum(h: &TransientCube) -> TransientSpectrum {
    let n = h.num_bins;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let spec = h.temporal();
    let phase: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, -bin_omega(k, n, spec.bin_width) * spec.t0))
        .collect();
    let mut values: Vec<Complex64> = h.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    values.par_chunks_mut(n).for_each(|px| {
        fft.process(px);
        px.iter_mut().zip(&phase).for_each(|(v, p)| *v *= p);
    });
    TransientSpectrum {
        num_lasers: h.num_lasers,
        num_sensors: h.num_sensors,
        confocal: h.confocal,
        spec,
        values,
    }
}

/// Multiplies by the kernel spectrum on `band`, or on the kernel's own
/// retained band when `band` is `None`.
pub fn filter_spectrum(
    ts: &TransientSpectrum,
    p: &PhasorKernelParams,
    band: Option<&[usize]>,
) -> Result<SpectralCube> {
    p.validate()?;
    let ks = kernel_spectrum(p, &ts.spec);
    let bins = match band {
        Some(b) => b.to_vec(),
        None => retained_band(&ks.values),
    };
    Ok(filter_with_kernel(ts, &ks.values, bins))
}

pub(crate) fn filter_with_kernel(
    ts: &TransientSpectrum,
    kernel: &[Complex64],
    bins: Vec<usize>,
) -> SpectralCube {
    let n = ts.spec.num_bins;
    let (l_n, s_n) = (ts.num_lasers, ts.num_sensors);
    let mut coeffs = vec![Complex64::new(0.0, 0.0); bins.len() * l_n * s_n];
    for (k, &b) in bins.iter().enumerate() {
        for p in 0..l_n * s_n {
            coeffs[k * l_n * s_n + p] = kernel[b] * ts.values[p * n + b];
        }
    }
    SpectralCube {
        num_lasers: l_n,
        num_sensors: s_n,
        confocal: ts.confocal,
        omegas: bins
            .iter()
            .map(|&b| bin_omega(b, n, ts.spec.bin_width))
            .collect(),
        bins,
        coeffs,
    }
}

/// Per-pixel DFT times the kernel spectrum, truncated to the kernel band.
#[allow(non_snake_case)]
pub fn filter_H(h: &TransientCube, p: &PhasorKernelParams) -> Result<SpectralCube> {
    filter_spectrum(&transient_spectrum(h), p, None)
}

fn check_spectral(hpf: &SpectralCube, wall: &WallGrid) -> Result<()> {
    if hpf.num_lasers != wall.num_lasers()
        || hpf.num_sensors != wall.num_sensors()
        || hpf.confocal != wall.confocal
    {
        return Err(Error::Shape("spectral cube does not match the wall".into()));
    }
    if hpf.coeffs.len() != hpf.bins.len() * hpf.num_lasers * hpf.num_sensors
        || hpf.omegas.len() != hpf.bins.len()
    {
        return Err(Error::Shape(
            "spectral cube has an inconsistent coefficient count".into(),
        ));
    }
    Ok(())
}

/// Direct summation over every wall pair and frequency. Small inputs only.
pub fn rsd_direct(hpf: &SpectralCube, wall: &WallGrid, cfg: &SceneConfig) -> Result<VolumeGrid> {
    check_spectral(hpf, wall)?;
    cfg.validate()?;
    let side = |d: crate::scene::GridDims| d.rows.max(d.cols);
    if side(wall.sensor_dims) > DIRECT_MAX_WALL_SIDE
        || (!wall.confocal && side(wall.laser_dims) > DIRECT_MAX_WALL_SIDE)
        || cfg
            .volume_resolution
            .iter()
            .any(|&r| r > DIRECT_MAX_VOLUME_SIDE)
    {
        return Err(Error::InvalidArgument(format!(
            "direct RSD is limited to {DIRECT_MAX_WALL_SIDE}x{DIRECT_MAX_WALL_SIDE} walls and {DIRECT_MAX_VOLUME_SIDE}^3 volumes"
        )));
    }
    let mut vol = VolumeGrid::zeros(cfg);
    let c = cfg.c;
    let (w, h) = (vol.dims[0], vol.dims[1]);
    let template = vol.clone();
    let result: Result<Vec<f64>> = (0..vol.len())
        .into_par_iter()
        .map(|i| {
            let xv = template.voxel_center(i % w, (i / w) % h, i / (w * h));
            let ds: Vec<f64> = wall
                .sensor_points
                .iter()
                .map(|p| (xv - *p).norm())
                .collect();
            let dl: Vec<f64> = if wall.confocal {
                ds.clone()
            } else {
                wall.laser_points.iter().map(|p| (xv - *p).norm()).collect()
            };
            if ds.iter().chain(&dl).any(|d| *d == 0.0) {
                return Err(Error::InvalidArgument(
                    "voxel coincides with a wall point".into(),
                ));
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, &om) in hpf.omegas.iter().enumerate() {
                for l in 0..hpf.num_lasers {
                    for s in 0..hpf.num_sensors {
                        let d_l = if wall.confocal { ds[s] } else { dl[l] };
                        let g = Complex64::from_polar(1.0 / (d_l * ds[s]), om * (d_l + ds[s]) / c);
                        acc += g * hpf.get(l, s, k);
                    }
                }
            }
            Ok(acc.norm_sqr())
        })
        .collect();
    vol.values = result?;
    Ok(vol)
}

/// Zero-padded 2-D FFT on a row-major `nx x ny` buffer.
struct Fft2 {
    nx: usize,
    ny: usize,
    fx: Arc<dyn Fft<f64>>,
    fy: Arc<dyn Fft<f64>>,
    ix: Arc<dyn Fft<f64>>,
    iy: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            nx,
            ny,
            fx: planner.plan_fft_forward(nx),
            fy: planner.plan_fft_forward(ny),
            ix: planner.plan_fft_inverse(nx),
            iy: planner.plan_fft_inverse(ny),
        }
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (fx, fy) = if inverse {
            (&self.ix, &self.iy)
        } else {
            (&self.fx, &self.fy)
        };
        for row in buf.chunks_mut(self.nx) {
            fx.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); self.ny];
        for x in 0..self.nx {
            for y in 0..self.ny {
                col[y] = buf[y * self.nx + x];
            }
            fy.process(&mut col);
            for y in 0..self.ny {
                buf[y * self.nx + x] = col[y];
            }
        }
        if inverse {
            let s = 1.0 / (self.nx * self.ny) as f64;
            buf.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, false)
    }

    fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, true)
    }

    fn len(&self) -> usize {
        self.nx * self.ny
    }
}

/// Geometry of a regular sensor lattice relative to the voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PlanarLayout {
    cols: usize,
    rows: usize,
    /// `x_v(0) - x_s(col 0)` and likewise in y.
    offset: [f64; 2],
    pitch: [f64; 2],
    /// Signed distance of each voxel plane from the wall, via `depth(z)`.
    wall_z: f64,
}

fn planar_layout(wall: &WallGrid, vol: &VolumeGrid) -> Result<PlanarLayout> {
    let n = wall.wall_normal;
    if (n.z.abs() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "FFT backprojection needs a wall facing the volume depth axis".into(),
        ));
    }
    let dims = wall.sensor_dims;
    let p0 = wall.sensor_points[0];
    let pitch = [vol.pitch[0], vol.pitch[1]];
    let tol = 1e-9 * pitch[0].max(pitch[1]);
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let want = p0 + Vec3::new(c as f64 * pitch[0], r as f64 * pitch[1], 0.0);
            if (wall.sensor_points[r * dims.cols + c] - want).norm() > tol {
                return Err(Error::InvalidArgument(
                    "FFT backprojection needs a regular sensor grid with the voxel pitch".into(),
                ));
            }
        }
    }
    let layout = PlanarLayout {
        cols: dims.cols,
        rows: dims.rows,
        offset: [
            vol.origin[0] + 0.5 * pitch[0] - p0.x,
            vol.origin[1] + 0.5 * pitch[1] - p0.y,
        ],
        pitch,
        wall_z: p0.z,
    };
    for z in 0..vol.dims[2] {
        if (vol.voxel_center(0, 0, z).z - layout.wall_z) * n.z <= 0.0 {
            return Err(Error::InvalidArgument(
                "voxel plane lies on or behind the wall".into(),
            ));
        }
    }
    Ok(layout)
}

/// Linear RSD operator from band coefficients to the complex field `U`
/// over the voxel lattice, with its exact adjoint.
pub struct RsdOperator {
    confocal: bool,
    num_lasers: usize,
    laser_points: Vec<Vec3>,
    omegas: Vec<f64>,
    c: f64,
    layout: PlanarLayout,
    dims: [usize; 3],
    template: VolumeGrid,
    fft: Fft2,
    cached: Option<Vec<Arc<Vec<Vec<Complex64>>>>>,
}

/// Plane-kernel spectra keyed by frequency, reused across operators built
/// for one wall and volume.
#[derive(Default)]
pub(crate) struct KernelCache {
    map: Mutex<HashMap<u64, Arc<Vec<Vec<Complex64>>>>>,
}

impl RsdOperator {
    pub fn new(wall: &WallGrid, cfg: &SceneConfig, omegas: &[f64]) -> Result<Self> {
        cfg.validate()?;
        let template = VolumeGrid::zeros(cfg);
        let layout = planar_layout(wall, &template)?;
        let d = template.dims;
        let nx = (d[0] + layout.cols - 1).next_power_of_two();
        let ny = (d[1] + layout.rows - 1).next_power_of_two();
        Ok(RsdOperator {
            confocal: wall.confocal,
            num_lasers: wall.num_lasers(),
            laser_points: wall.laser_points.clone(),
            omegas: omegas.to_vec(),
            c: cfg.c,
            layout,
            dims: d,
            template,
            fft: Fft2::new(nx, ny),
            cached: None,
        })
    }

    /// Like [`RsdOperator::new`], taking kernel spectra from `cache`.
    pub(crate) fn with_cache(
        wall: &WallGrid,
        cfg: &SceneConfig,
        omegas: &[f64],
        cache: &KernelCache,
    ) -> Result<Self> {
        let mut op = Self::new(wall, cfg, omegas)?;
        let mut kernels = Vec::with_capacity(omegas.len());
        for k in 0..omegas.len() {
            let key = omegas[k].to_bits();
            let hit = cache.map.lock().unwrap().get(&key).cloned();
            let entry = match hit {
                Some(e) => e,
                None => {
                    let e = Arc::new(
                        (0..op.dims[2])
                            .into_par_iter()
                            .map(|z| op.kernel_hat(k, z))
                            .collect::<Vec<_>>(),
                    );
                    cache.map.lock().unwrap().insert(key, e.clone());
                    e
                }
            };
            kernels.push(entry);
        }
        op.cached = Some(kernels);
        Ok(op)
    }

    fn kernel(&self, k: usize, z: usize) -> Cow<'_, [Complex64]> {
        match &self.cached {
            Some(c) => Cow::Borrowed(&c[k][z]),
            None => Cow::Owned(self.kernel_hat(k, z)),
        }
    }

    fn num_sensors(&self) -> usize {
        self.layout.cols * self.layout.rows
    }

    /// Input length: band × lasers × sensors.
    pub fn input_len(&self) -> usize {
        self.omegas.len() * self.num_lasers * self.num_sensors()
    }

    pub fn output_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Spectrum of the padded plane kernel for frequency `k` at depth `z`.
    fn kernel_hat(&self, k: usize, z: usize) -> Vec<Complex64> {
        let (nx, ny) = (self.fft.nx, self.fft.ny);
        let l = &self.layout;
        let dz = self.template.voxel_center(0, 0, z).z - l.wall_z;
        let om = self.omegas[k] / self.c;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft.len()];
        let (w, h) = (self.dims[0] as i64, self.dims[1] as i64);
        for my in -(l.rows as i64 - 1)..h {
            let dy = my as f64 * l.pitch[1] + l.offset[1];
            let yi = my.rem_euclid(ny as i64) as usize;
            for mx in -(l.cols as i64 - 1)..w {
                let dx = mx as f64 * l.pitch[0] + l.offset[0];
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                let xi = mx.rem_euclid(nx as i64) as usize;
                buf[yi * nx + xi] = if self.confocal {
                    Complex64::from_polar(1.0 / (r * r), 2.0 * om * r)
                } else {
                    Complex64::from_polar(1.0 / r, om * r)
                };
            }
        }
        self.fft.forward(&mut buf);
        buf
    }

    fn pad_sensor_image(&self, a: &[Complex64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft.len()];
        for r in 0..self.layout.rows {
            for c in 0..self.layout.cols {
                buf[r * self.fft.nx + c] = a[r * self.layout.cols + c];
            }
        }
        self.fft.forward(&mut buf);
        buf
    }

    fn laser_factor(&self, k: usize, l: usize, xv: Vec3) -> Complex64 {
        let d = (xv - self.laser_points[l]).norm();
        Complex64::from_polar(1.0 / d, self.omegas[k] / self.c * d)
    }

    /// `U(v) = Σ_k Σ_l Σ_s G_k(v; l, s) a(l, s, k)`.
    pub fn forward(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(coeffs.len(), self.input_len());
        let s_n = self.num_sensors();
        let l_n = self.num_lasers;
        let (w, h) = (self.dims[0], self.dims[1]);
        let a_hat: Vec<Vec<Complex64>> = coeffs
            .par_chunks(s_n)
            .map(|a| self.pad_sensor_image(a))
            .collect();
        let planes: Vec<Vec<Complex64>> = (0..self.dims[2])
            .into_par_iter()
            .map(|z| {
                let mut plane = vec![Complex64::new(0.0, 0.0); w * h];
                let mut acc = vec![Complex64::new(0.0, 0.0); self.fft.len()];
                for k in 0..self.omegas.len() {
                    let kh = self.kernel(k, z);
                    if self.confocal {
                        for (o, (x, y)) in acc.iter_mut().zip(kh.iter().zip(&a_hat[k])) {
                            *o += x * y;
                        }
                        continue;
                    }
                    for l in 0..l_n {
                        let mut b: Vec<Complex64> = kh
                            .iter()
                            .zip(&a_hat[k * l_n + l])
                            .map(|(x, y)| x * y)
                            .collect();
                        self.fft.inverse(&mut b);
                        for y in 0..h {
                            for x in 0..w {
                                let g =
                                    self.laser_factor(k, l, self.template.voxel_center(x, y, z));
                                plane[y * w + x] += g * b[y * self.fft.nx + x];
                            }
                        }
                    }
                }
                if self.confocal {
                    self.fft.inverse(&mut acc);
                    for y in 0..h {
                        for x in 0..w {
                            plane[y * w + x] = acc[y * self.fft.nx + x];
                        }
                    }
                }
                plane
            })
            .collect();
        planes.concat()
    }

    /// Adjoint of [`RsdOperator::forward`] under `<u, v> = Re Σ conj(u) v`.
    pub fn adjoint(&self, field_bar: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(field_bar.len(), self.output_len());
        let s_n = self.num_sensors();
        let l_n = self.num_lasers;
        let (w, h) = (self.dims[0], self.dims[1]);
        let nx = self.fft.nx;
        let restrict = |buf: &[Complex64], out: &mut [Complex64]| {
            for r in 0..self.layout.rows {
                for c in 0..self.layout.cols {
                    out[r * self.layout.cols + c] += buf[r * nx + c];
                }
            }
        };
        let per_plane: Vec<Vec<Complex64>> = (0..self.dims[2])
            .into_par_iter()
            .map(|z| {
                let mut out = vec![Complex64::new(0.0, 0.0); self.input_len()];
                let ubar = &field_bar[z * w * h..(z + 1) * w * h];
                let mut u_hat = vec![Complex64::new(0.0, 0.0); self.fft.len()];
                if self.confocal {
                    for y in 0..h {
                        for x in 0..w {
                            u_hat[y * nx + x] = ubar[y * w + x];
                        }
                    }
                    self.fft.forward(&mut u_hat);
                }
                for k in 0..self.omegas.len() {
                    let kh = self.kernel(k, z);
                    for l in 0..l_n {
                        let src = if self.confocal {
                            u_hat.clone()
                        } else {
                            let mut b = vec![Complex64::new(0.0, 0.0); self.fft.len()];
                            for y in 0..h {
                                for x in 0..w {
                                    let g = self.laser_factor(
                                        k,
                                        l,
                                        self.template.voxel_center(x, y, z),
                                    );
                                    b[y * nx + x] = g.conj() * ubar[y * w + x];
                                }
                            }
                            self.fft.forward(&mut b);
                            b
                        };
                        let mut prod: Vec<Complex64> =
                            kh.iter().zip(&src).map(|(x, y)| x.conj() * y).collect();
                        self.fft.inverse(&mut prod);
                        let base = (k * l_n + l) * s_n;
                        restrict(&prod, &mut out[base..base + s_n]);
                    }
                }
                out
            })
            .collect();
        let mut total = vec![Complex64::new(0.0, 0.0); self.input_len()];
        for p in per_plane {
            total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
        }
        total
    }
}

/// `I(v) = |U(v)|²` over a volume shaped like `cfg`.
pub(crate) fn intensity(field: &[Complex64], cfg: &SceneConfig) -> VolumeGrid {
    let mut vol = VolumeGrid::zeros(cfg);
    vol.values = field.iter().map(|u| u.norm_sqr()).collect();
    vol
}

/// FFT plane-convolution backprojection; equal to [`rsd_direct`].
pub fn rsd_fft(hpf: &SpectralCube, wall: &WallGrid, cfg: &SceneConfig) -> Result<VolumeGrid> {
    check_spectral(hpf, wall)?;
    let op = RsdOperator::new(wall, cfg, &hpf.omegas)?;
    Ok(intensity(&op.forward(&hpf.coeffs), cfg))
}

/// `out(x, z) = max_y v(x, y, z)`, as a `W x D` image with rows indexed by z.
pub fn max_project_xz(v: &VolumeGrid) -> Image2 {
    let [w, h, d] = v.dims;
    let mut values = vec![f64::NEG_INFINITY; w * d];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let o = &mut values[z * w + x];
                *o = o.max(v.get(x, y, z));
            }
        }
    }
    Image2 {
        width: w,
        height: d,
        values,
    }
}

/// First `y` attaining the maximum for every `(x, z)`.
pub(crate) fn max_project_argmax(v: &VolumeGrid) -> Vec<usize> {
    let [w, h, d] = v.dims;
    let mut arg = vec![0usize; w * d];
    for z in 0..d {
        for x in 0..w {
            let mut best = 0;
            for y in 1..h {
                if v.get(x, y, z) > v.get(x, best, z) {
                    best = y;
                }
            }
            arg[z * w + x] = best;
        }
    }
    arg
}

/// Divides by the maximum; the result peaks at exactly 1.
pub fn normalize_volume(v: &VolumeGrid) -> Result<VolumeGrid> {
    let m = v.max_value();
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::EmptyReconstruction);
    }
    let mut out = v.clone();
    out.values.iter_mut().for_each(|x| *x /= m);
    Ok(out)
}

/// `filter_H → rsd_fft → normalize_volume`; `oracle` selects direct summation.
/// Output values are rounded to f32 so that rescaling `h` reproduces them bit for bit.
pub fn reconstruct(
    h: &TransientCube,
    p: &PhasorKernelParams,
    wall: &WallGrid,
    cfg: &SceneConfig,
    oracle: bool,
) -> Result<VolumeGrid> {
    h.check_shape(wall, cfg)?;
    let hpf = filter_H(h, p)?;
    let raw = if oracle {
        rsd_direct(&hpf, wall, cfg)?
    } else {
        rsd_fft(&hpf, wall, cfg)?
    };
    let mut v = normalize_volume(&raw)?;
    v.values.iter_mut().for_each(|x| *x = *x as f32 as f64);
    Ok(v)
}
