//! File formats: NLTC transient cubes, raw volumes with JSON sidecars, OBJ
//! meshes with albedo sidecars, TOML scene files, parameter JSON, history
//! CSV and grayscale PNGs.
//!
//! Every writer is deterministic, and reading then writing again reproduces
//! the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{HistoryRow, LossBreakdown, ParamSet};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::phasor::{Image2, PhasorKernelParams, VolumeGrid};
use crate::scene::{GridDims, SceneConfig, TriangleMesh, WallGrid};
use crate::sensor::LaserSensorParams;
use crate::surface::AlbedoGrid;
use crate::transient::TransientCube;

pub const NLTC_MAGIC: &[u8; 4] = b"NLTC";
pub const NLTC_VERSION: u32 = 1;
pub const NLTC_HEADER_LEN: usize = 64;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `foo.raw` → `foo.raw.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn checked_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| Error::InvalidArgument(format!("{what} = {v} does not fit the cube header")))
}

/// Header: magic, version, L, S, T, confocal flag, bin width, t0, laser
/// rows/cols, sensor rows/cols, 8 reserved zero bytes. Values follow as
/// little-endian f32 in `(l, s, t)` order.
pub fn cube_to_bytes(h: &TransientCube) -> Result<Vec<u8>> {
    let mut b = Vec::with_capacity(NLTC_HEADER_LEN + 4 * h.values.len());
    b.extend_from_slice(NLTC_MAGIC);
    for v in [
        NLTC_VERSION,
        checked_u32(h.num_lasers, "lasers")?,
        checked_u32(h.num_sensors, "sensors")?,
        checked_u32(h.num_bins, "bins")?,
        h.confocal as u32,
    ] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&h.bin_width.to_le_bytes());
    b.extend_from_slice(&h.t0.to_le_bytes());
    for v in [
        h.laser_dims.rows,
        h.laser_dims.cols,
        h.sensor_dims.rows,
        h.sensor_dims.cols,
    ] {
        b.extend_from_slice(&checked_u32(v, "grid dimension")?.to_le_bytes());
    }
    b.extend_from_slice(&[0u8; 8]);
    debug_assert_eq!(b.len(), NLTC_HEADER_LEN);
    for v in &h.values {
        b.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(b)
}

pub fn cube_from_bytes(b: &[u8], path: &Path) -> Result<TransientCube> {
    let bad = |r: &str| Error::format(path, r);
    if b.len() < NLTC_HEADER_LEN || &b[0..4] != NLTC_MAGIC {
        return Err(bad("not an NLTC cube"));
    }
    let version = u32_at(b, 4);
    if version != NLTC_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (l, s, t) = (
        u32_at(b, 8) as usize,
        u32_at(b, 12) as usize,
        u32_at(b, 16) as usize,
    );
    let confocal = match u32_at(b, 20) {
        0 => false,
        1 => true,
        v => return Err(bad(&format!("confocal flag {v}"))),
    };
    let bin_width = f64_at(b, 24);
    let t0 = f64_at(b, 32);
    let laser_dims = GridDims::new(u32_at(b, 40) as usize, u32_at(b, 44) as usize);
    let sensor_dims = GridDims::new(u32_at(b, 48) as usize, u32_at(b, 52) as usize);
    if b[56..64].iter().any(|&x| x != 0) {
        return Err(bad("reserved header bytes are not zero"));
    }
    if !(bin_width > 0.0) || !t0.is_finite() || t == 0 || s == 0 || l == 0 {
        return Err(bad("invalid temporal or pixel dimensions"));
    }
    if sensor_dims.len() != s || (!confocal && laser_dims.len() != l) || (confocal && l != 1) {
        return Err(bad("grid dimensions disagree with the pixel counts"));
    }
    let n = l
        .checked_mul(s)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if b.len() != NLTC_HEADER_LEN + 4 * n {
        return Err(bad(&format!(
            "expected {} value bytes, found {}",
            4 * n,
            b.len() - NLTC_HEADER_LEN
        )));
    }
    let values = b[NLTC_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(TransientCube {
        num_lasers: l,
        num_sensors: s,
        num_bins: t,
        confocal,
        bin_width,
        t0,
        laser_dims,
        sensor_dims,
        values,
    })
}

pub fn write_cube(path: &Path, h: &TransientCube) -> Result<()> {
    write_file(path, &cube_to_bytes(h)?)
}

pub fn read_cube(path: &Path) -> Result<TransientCube> {
    cube_from_bytes(&read_bytes(path)?, path)
}

/// Header fields of a cube, for the JSON companion export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeInfo {
    pub num_lasers: usize,
    pub num_sensors: usize,
    pub num_bins: usize,
    pub confocal: bool,
    pub bin_width: f64,
    pub t0: f64,
    pub laser_dims: [usize; 2],
    pub sensor_dims: [usize; 2],
    pub max_value: f64,
}

pub fn cube_info(h: &TransientCube) -> CubeInfo {
    CubeInfo {
        num_lasers: h.num_lasers,
        num_sensors: h.num_sensors,
        num_bins: h.num_bins,
        confocal: h.confocal,
        bin_width: h.bin_width,
        t0: h.t0,
        laser_dims: [h.laser_dims.rows, h.laser_dims.cols],
        sensor_dims: [h.sensor_dims.rows, h.sensor_dims.cols],
        max_value: h.max_value(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    F32,
    F64,
}

/// Sidecar of a raw volume blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub pitch: [f64; 3],
    pub dtype: SampleType,
    /// Storage order of the blob.
    pub layout: String,
}

const VOLUME_LAYOUT: &str = "x-fastest";

pub fn volume_meta(v: &VolumeGrid, dtype: SampleType) -> VolumeMeta {
    VolumeMeta {
        dims: v.dims,
        origin: v.origin,
        pitch: v.pitch,
        dtype,
        layout: VOLUME_LAYOUT.into(),
    }
}

pub fn volume_to_bytes(v: &VolumeGrid, dtype: SampleType) -> Vec<u8> {
    match dtype {
        SampleType::F32 => v
            .values
            .iter()
            .flat_map(|x| (*x as f32).to_le_bytes())
            .collect(),
        SampleType::F64 => v.values.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

pub fn volume_from_bytes(meta: &VolumeMeta, b: &[u8], path: &Path) -> Result<VolumeGrid> {
    if meta.layout != VOLUME_LAYOUT {
        return Err(Error::format(
            path,
            format!("unknown layout {:?}", meta.layout),
        ));
    }
    if meta.dims.contains(&0) || meta.pitch.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::format(path, "dims and pitch must be positive"));
    }
    let n: usize = meta.dims.iter().product();
    let width = match meta.dtype {
        SampleType::F32 => 4,
        SampleType::F64 => 8,
    };
    if b.len() != n * width {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", n * width, b.len()),
        ));
    }
    let values = match meta.dtype {
        SampleType::F32 => b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        SampleType::F64 => b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(VolumeGrid {
        dims: meta.dims,
        origin: meta.origin,
        pitch: meta.pitch,
        values,
    })
}

/// Writes the blob at `path` and its sidecar at `path.json`.
pub fn write_volume(path: &Path, v: &VolumeGrid, dtype: SampleType) -> Result<()> {
    write_file(path, &volume_to_bytes(v, dtype))?;
    write_json(&sidecar_path(path), &volume_meta(v, dtype))
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    let meta: VolumeMeta = read_json(&sidecar_path(path))?;
    volume_from_bytes(&meta, &read_bytes(path)?, path)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json_string(value)?.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Triangulated `v`/`f` records; other records are ignored. Face indices
/// may carry `/vt/vn` suffixes and may be negative (relative).
pub fn parse_obj(text: &str, path: &Path) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let bad = |r: &str| Error::format(path, format!("line {}: {r}", ln + 1));
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad vertex"))?;
                if c.len() != 3 || c.iter().any(|x| !x.is_finite()) {
                    return Err(bad("vertex needs three finite coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<&str> = it.collect();
                if idx.len() != 3 {
                    return Err(bad("only triangles are supported"));
                }
                let mut tri = [0usize; 3];
                for (k, tok) in idx.iter().enumerate() {
                    let i: i64 = tok
                        .split('/')
                        .next()
                        .unwrap_or("")
                        .parse()
                        .map_err(|_| bad("bad face index"))?;
                    let n = vertices.len() as i64;
                    let r = if i > 0 { i - 1 } else { n + i };
                    if i == 0 || r < 0 || r >= n {
                        return Err(bad("face index out of range"));
                    }
                    tri[k] = r as usize;
                }
                faces.push(tri);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

pub fn mesh_to_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        s.push_str(&format!("v {:.17e} {:.17e} {:.17e}\n", v.x, v.y, v.z));
    }
    for t in &mesh.triangles {
        s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    s
}

/// Albedo sidecar: one value per triangle, or a single value for all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlbedoSpec {
    Uniform { albedo: f64 },
    PerTriangle { albedo: Vec<f64> },
}

/// Loads an OBJ and its albedo sidecar; without a sidecar every triangle
/// gets `default_albedo`.
pub fn read_mesh(obj: &Path, albedo: Option<&Path>, default_albedo: f64) -> Result<TriangleMesh> {
    let (v, f) = parse_obj(&read_text(obj)?, obj)?;
    let a = match albedo {
        None => vec![default_albedo; f.len()],
        Some(p) => match read_json::<AlbedoSpec>(p)? {
            AlbedoSpec::Uniform { albedo } => vec![albedo; f.len()],
            AlbedoSpec::PerTriangle { albedo } => albedo,
        },
    };
    TriangleMesh::new(v, f, a).map_err(|e| Error::format(obj, e.to_string()))
}

pub fn write_mesh(obj: &Path, albedo: &Path, mesh: &TriangleMesh) -> Result<()> {
    write_file(obj, mesh_to_obj(mesh).as_bytes())?;
    write_json(
        albedo,
        &AlbedoSpec::PerTriangle {
            albedo: mesh.albedo.clone(),
        },
    )
}

/// Rectangular wall sampling in the `z = center.z` plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectSpec {
    pub center: [f64; 3],
    pub width: f64,
    pub height: f64,
    pub rows: usize,
    pub cols: usize,
}

impl RectSpec {
    fn points(&self) -> (Vec<Vec3>, GridDims) {
        let d = GridDims::new(self.rows, self.cols);
        (
            WallGrid::rectangle_points(Vec3::from_array(self.center), self.width, self.height, d),
            d,
        )
    }
}

/// Relay wall: sensors on a rectangle, lasers co-located when `lasers` is
/// absent (confocal) or on their own rectangle otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallSpec {
    pub sensors: RectSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lasers: Option<RectSpec>,
}

impl WallSpec {
    pub fn build(&self) -> Result<WallGrid> {
        let (sp, sd) = self.sensors.points();
        let normal = Vec3::new(0.0, 0.0, 1.0);
        match &self.lasers {
            None => WallGrid::new(sp.clone(), sd, sp, sd, normal, true),
            Some(l) => {
                if l.center[2] != self.sensors.center[2] {
                    return Err(Error::Config(
                        "laser and sensor rectangles must share the wall plane".into(),
                    ));
                }
                let (lp, ld) = l.points();
                WallGrid::new(lp, ld, sp, sd, normal, false)
            }
        }
    }
}

/// Scene file: experiment geometry plus optional ground-truth or initial
/// parameters. All quantities in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub scene: SceneConfig,
    pub wall: WallSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<LaserSensorParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phasor: Option<PhasorKernelParams>,
}

impl SceneFile {
    pub fn parse(text: &str, path: &Path) -> Result<SceneFile> {
        let f: SceneFile = toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        f.scene.validate()?;
        if let Some(s) = &f.sensor {
            s.validate()?;
        }
        if let Some(p) = &f.phasor {
            p.validate()?;
        }
        Ok(f)
    }

    pub fn read(path: &Path) -> Result<SceneFile> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn wall(&self) -> Result<WallGrid> {
        let w = self.wall.build()?;
        self.scene.check_wall(&w)?;
        Ok(w)
    }
}

/// Scalar parameters as written next to the albedo blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub phasor: PhasorKernelParams,
    pub sensor: LaserSensorParams,
    /// Blob file name, relative to the JSON file.
    pub albedo: String,
}

/// Writes `dir/<stem>.json` and an f64 albedo blob `dir/<stem>_albedo.f64`.
pub fn write_params(dir: &Path, stem: &str, theta: &ParamSet) -> Result<PathBuf> {
    let blob = format!("{stem}_albedo.f64");
    write_volume(&dir.join(&blob), &theta.albedo.0, SampleType::F64)?;
    let json = dir.join(format!("{stem}.json"));
    write_json(
        &json,
        &ParamsFile {
            phasor: theta.pf,
            sensor: theta.ls,
            albedo: blob,
        },
    )?;
    Ok(json)
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    let f: ParamsFile = read_json(path)?;
    f.phasor.validate()?;
    f.sensor.validate()?;
    let blob = path.parent().unwrap_or(Path::new(".")).join(&f.albedo);
    Ok(ParamSet {
        pf: f.phasor,
        ls: f.sensor,
        albedo: AlbedoGrid(read_volume(&blob)?),
    })
}

pub const HISTORY_HEADER: [&str; 11] = [
    "iteration",
    "omega_pf",
    "sigma_pf",
    "intensity",
    "sigma_ls",
    "kappa_s",
    "eta_s",
    "e_h",
    "e_ipf",
    "e_rho",
    "total",
];

/// Shortest decimal that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn history_to_csv(rows: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER)
        .map_err(|e| Error::Config(e.to_string()))?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string()];
        rec.extend(r.scalars.iter().map(|v| fmt_f64(*v)));
        rec.extend(
            [r.loss.e_h, r.loss.e_ipf, r.loss.e_rho, r.loss.total]
                .iter()
                .map(|v| fmt_f64(*v)),
        );
        w.write_record(&rec)
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

/// Parses a history CSV; the weights are not stored and come back as
/// `lambda1`, `lambda2`.
pub fn parse_history(
    text: &str,
    lambda1: f64,
    lambda2: f64,
    path: &Path,
) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().ne(HISTORY_HEADER.iter().copied()) {
        return Err(Error::format(path, "unexpected history header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let bad = || Error::format(path, format!("bad history row {:?}", rec));
        let iteration: usize = rec[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = (1..11)
            .map(|i| rec[i].parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        out.push(HistoryRow {
            iteration,
            scalars: [v[0], v[1], v[2], v[3], v[4], v[5]],
            loss: LossBreakdown {
                e_h: v[6],
                e_ipf: v[7],
                e_rho: v[8],
                total: v[9],
                lambda1,
                lambda2,
            },
        });
    }
    Ok(out)
}

/// Fraction of samples clipped at each end by [`tone_map`].
pub const TONE_CLIP: f64 = 0.01;

/// Linear map of the `[1%, 99%]` percentile range onto `0..=255`.
pub fn tone_map(values: &[f64]) -> Vec<u8> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return vec![0; values.len()];
    }
    finite.sort_by(f64::total_cmp);
    let pick =
        |q: f64| finite[((q * (finite.len() - 1) as f64).round() as usize).min(finite.len() - 1)];
    let (lo, hi) = (pick(TONE_CLIP), pick(1.0 - TONE_CLIP));
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                0
            } else if hi > lo {
                (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
            } else if v > 0.0 {
                255
            } else {
                0
            }
        })
        .collect()
}

/// Encodes an 8-bit grayscale image, row 0 at the top.
pub fn gray_png(width: usize, height: usize, pixels: Vec<u8>) -> Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Shape("pixel count does not match the image size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Encodes an 8-bit RGB image.
pub fn rgb_png(width: usize, height: usize, pixels: Vec<u8>) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Shape("pixel count does not match the image size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Tone-mapped image with row 0 at the top: the last row of `img`
/// (largest `z` for projections) ends up at the bottom.
pub fn image_png(img: &Image2) -> Result<Vec<u8>> {
    gray_png(img.width, img.height, tone_map(&img.values))
}

pub fn write_image_png(path: &Path, img: &Image2) -> Result<()> {
    write_file(path, &image_png(img)?)
}
