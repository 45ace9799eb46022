//! `nlos`: synthesis, reconstruction, extraction, calibration and noise
//! sweeps over transient cubes. Every command writing files puts them in
//! one output directory together with a `manifest.json`.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nlos_core::calib::{self, CalibOptions, HistoryRow, ParamSet};
use nlos_core::io::{self, SampleType, SceneFile};
use nlos_core::phasor::{self, PhasorKernelParams, VolumeGrid};
use nlos_core::scene::{SceneConfig, WallGrid};
use nlos_core::sensor::{self, LaserSensorParams};
use nlos_core::surface::{self, AlbedoGrid, ImplicitSurface};
use nlos_core::transient::{self, TransientCube};

use manifest::Run;

#[derive(Parser)]
#[command(
    name = "nlos",
    version,
    about = "Phasor-field NLOS reconstruction and self-calibration"
)]
struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "NLOS_THREADS")]
    threads: Option<usize>,
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a mesh into a transient cube, optionally with Poisson noise.
    Render(RenderArgs),
    /// Phasor-field reconstruction of a cube into a normalized volume.
    Reconstruct(ReconstructArgs),
    /// Implicit surface of a volume as a PLY point cloud and PNG mosaics.
    Extract(ExtractArgs),
    /// Fit the imaging parameters to a measured cube.
    Calibrate(CalibrateArgs),
    /// SNR and reconstruction for each photon scale.
    NoiseSweep(NoiseSweepArgs),
    /// Print the header of a cube or volume as JSON.
    Info(InfoArgs),
}

/// Laser/sensor overrides; flags win over the scene file.
#[derive(Args, Clone, Default)]
struct SensorFlags {
    #[arg(long)]
    intensity: Option<f64>,
    #[arg(long)]
    sigma_ls: Option<f64>,
    #[arg(long)]
    kappa_s: Option<f64>,
    #[arg(long)]
    eta_s: Option<f64>,
}

impl SensorFlags {
    fn apply(&self, mut p: LaserSensorParams) -> Result<LaserSensorParams> {
        p.intensity = self.intensity.unwrap_or(p.intensity);
        p.sigma_ls = self.sigma_ls.unwrap_or(p.sigma_ls);
        p.kappa_s = self.kappa_s.unwrap_or(p.kappa_s);
        p.eta_s = self.eta_s.unwrap_or(p.eta_s);
        p.validate()?;
        Ok(p)
    }
}

/// Phasor kernel overrides; flags win over `--params`, which wins over the
/// scene file.
#[derive(Args, Clone, Default)]
struct PhasorFlags {
    #[arg(long)]
    omega_pf: Option<f64>,
    #[arg(long)]
    sigma_pf: Option<f64>,
    /// Parameter JSON written by `calibrate`.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Wavefront OBJ of the hidden geometry.
    #[arg(long)]
    mesh: PathBuf,
    /// One albedo per triangle, whitespace separated.
    #[arg(long)]
    albedo: Option<PathBuf>,
    /// Expected photons per unit intensity; clean output when absent.
    #[arg(long)]
    noise_scale: Option<f64>,
    #[command(flatten)]
    sensor: SensorFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[command(flatten)]
    phasor: PhasorFlags,
    /// Direct Rayleigh-Sommerfeld summation instead of the FFT path.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value_t = surface::DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = surface::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Hemisphere resolution per sensor; the scene value when absent.
    #[arg(long)]
    n: Option<usize>,
    /// Parameter JSON whose albedo colors the point cloud.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    /// Initial parameters; the scene file values or defaults otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = CalibOptions::default().max_iters)]
    iters: usize,
    /// Fraction of sensors per iteration.
    #[arg(long, default_value_t = CalibOptions::default().batch_fraction)]
    batch: f64,
    #[arg(long, default_value_t = CalibOptions::default().lr_scalar)]
    lr_scalar: f64,
    #[arg(long, default_value_t = CalibOptions::default().lr_albedo)]
    lr_albedo: f64,
    #[arg(long, default_value_t = CalibOptions::default().tolerance)]
    tolerance: f64,
    #[arg(long, default_value_t = CalibOptions::default().divergence_factor)]
    divergence_factor: f64,
    /// Write parameters every this many iterations; 0 disables.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseSweepArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Clean cube the noise is drawn around.
    #[arg(long)]
    cube: PathBuf,
    /// Photon scales, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    scales: Vec<f64>,
    #[command(flatten)]
    phasor: PhasorFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InfoArgs {
    #[arg(long)]
    cube: Option<PathBuf>,
    #[arg(long)]
    volume: Option<PathBuf>,
}

struct Scene {
    path: PathBuf,
    file: SceneFile,
    wall: WallGrid,
}

impl Scene {
    fn load(path: &Path) -> Result<Scene> {
        let file = SceneFile::read(path)?;
        let wall = file.wall()?;
        Ok(Scene {
            path: path.to_path_buf(),
            file,
            wall,
        })
    }

    fn cfg(&self) -> &SceneConfig {
        &self.file.scene
    }

    fn read_cube(&self, path: &Path) -> Result<TransientCube> {
        let h = io::read_cube(path)?;
        h.check_shape(&self.wall, self.cfg()).with_context(|| {
            format!("{} does not match {}", path.display(), self.path.display())
        })?;
        Ok(h)
    }

    fn defaults(&self) -> ParamSet {
        ParamSet::initial(&self.wall, self.cfg())
    }

    fn sensor(&self) -> LaserSensorParams {
        self.file.sensor.unwrap_or(self.defaults().ls)
    }

    fn phasor(&self, flags: &PhasorFlags) -> Result<PhasorKernelParams> {
        let mut p = match &flags.params {
            Some(path) => io::read_params(path)?.pf,
            None => self.file.phasor.unwrap_or(self.defaults().pf),
        };
        p.omega_pf = flags.omega_pf.unwrap_or(p.omega_pf);
        p.sigma_pf = flags.sigma_pf.unwrap_or(p.sigma_pf);
        p.validate()?;
        Ok(p)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            let numerical = err
                .chain()
                .filter_map(|e| e.downcast_ref::<nlos_core::Error>())
                .any(nlos_core::Error::is_numerical);
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")?;
    let seed = cli.seed;
    match cli.command {
        Command::Render(a) => render(a, seed, threads),
        Command::Reconstruct(a) => reconstruct(a, seed, threads),
        Command::Extract(a) => extract(a, seed, threads),
        Command::Calibrate(a) => calibrate(a, seed, threads),
        Command::NoiseSweep(a) => noise_sweep(a, seed, threads),
        Command::Info(a) => info(a),
    }
}

fn render(a: RenderArgs, seed: u64, threads: usize) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let ls = a.sensor.apply(scene.sensor())?;
    if let Some(s) = a.noise_scale {
        if !(s.is_finite() && s > 0.0) {
            bail!("--noise-scale must be positive and finite, got {s}");
        }
    }
    let mesh = io::read_mesh(&a.mesh, a.albedo.as_deref(), surface::DEFAULT_ALBEDO)?;
    let mut run = Run::start(&a.out, "render", Some(&a.scene), seed, threads)?;
    let clean = sensor::apply_sensor(
        &transient::render_mesh(&mesh, &scene.wall, scene.cfg())?,
        &ls,
    )?;
    let h = match a.noise_scale {
        Some(s) => sensor::add_poisson_noise(&clean, s, seed)?,
        None => clean,
    };
    io::write_cube(&run.path("cube.nltc"), &h)?;
    run.record("cube.nltc")?;
    run.manifest.parameters = json!({
        "mesh": a.mesh,
        "albedo": a.albedo,
        "sensor": ls,
        "noise_scale": a.noise_scale,
    });
    run.finish()?;
    Ok(())
}

fn write_volume_outputs(run: &mut Run, stem: &str, v: &VolumeGrid) -> Result<()> {
    let blob = format!("{stem}.f32");
    io::write_volume(&run.path(&blob), v, SampleType::F32)?;
    run.record(&blob)?;
    run.record(&format!("{blob}.json"))?;
    Ok(())
}

fn write_xz(run: &mut Run, name: &str, v: &VolumeGrid) -> Result<()> {
    io::write_image_png(&run.path(name), &phasor::max_project_xz(v))?;
    run.record(name)
}

fn reconstruct(a: ReconstructArgs, seed: u64, threads: usize) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let pf = scene.phasor(&a.phasor)?;
    let h = scene.read_cube(&a.cube)?;
    let v = phasor::reconstruct(&h, &pf, &scene.wall, scene.cfg(), a.oracle)?;
    let mut run = Run::start(&a.out, "reconstruct", Some(&a.scene), seed, threads)?;
    write_volume_outputs(&mut run, "volume", &v)?;
    write_xz(&mut run, "xz.png", &v)?;
    run.manifest.parameters = json!({
        "cube": a.cube,
        "phasor": pf,
        "params": a.phasor.params,
        "oracle": a.oracle,
    });
    run.finish()?;
    Ok(())
}

/// Depth and normal mosaics: one `n × n` tile per sensor, laid out on the
/// sensor grid. Misses are black.
fn surface_images(g: &ImplicitSurface, wall: &WallGrid) -> (usize, usize, Vec<f64>, Vec<u8>) {
    let n = g.n;
    let (rows, cols) = (wall.sensor_dims.rows, wall.sensor_dims.cols);
    let (w, h) = (cols * n, rows * n);
    let mut depth = vec![0.0; w * h];
    let mut rgb = vec![0u8; 3 * w * h];
    for (slot, &s) in g.sensor_ids.iter().enumerate() {
        let (sr, sc) = (s / cols, s % cols);
        for (c, cell) in g.cells[slot * n * n..(slot + 1) * n * n].iter().enumerate() {
            if !cell.hit {
                continue;
            }
            let px = (sr * n + c / n) * w + sc * n + c % n;
            depth[px] = cell.depth;
            let nrm = [cell.normal.x, cell.normal.y, cell.normal.z];
            for (k, v) in nrm.iter().enumerate() {
                rgb[3 * px + k] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
            }
        }
    }
    (w, h, depth, rgb)
}

fn write_surface_outputs(
    run: &mut Run,
    g: &ImplicitSurface,
    albedo: &AlbedoGrid,
    wall: &WallGrid,
) -> Result<()> {
    io::write_file(
        &run.path("surface.ply"),
        surface::export_pointcloud(g, albedo).as_bytes(),
    )?;
    run.record("surface.ply")?;
    let (w, h, depth, rgb) = surface_images(g, wall);
    io::write_file(
        &run.path("depth.png"),
        &io::gray_png(w, h, io::tone_map(&depth))?,
    )?;
    run.record("depth.png")?;
    io::write_file(&run.path("normal.png"), &io::rgb_png(w, h, rgb)?)?;
    run.record("normal.png")
}

fn extract(a: ExtractArgs, seed: u64, threads: usize) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let mut cfg = scene.cfg().clone();
    if let Some(n) = a.n {
        cfg.hemisphere_resolution = n;
        cfg.validate()?;
    }
    let v = io::read_volume(&a.volume)?;
    v.check_config(&cfg).with_context(|| {
        format!(
            "{} does not match {}",
            a.volume.display(),
            a.scene.display()
        )
    })?;
    let albedo = match &a.params {
        Some(p) => io::read_params(p)?.albedo,
        None => AlbedoGrid::uniform(&cfg, surface::DEFAULT_ALBEDO),
    };
    let g = surface::extract_surface(&v, &scene.wall, &cfg, a.beta, a.threshold)?;
    let mut run = Run::start(&a.out, "extract", Some(&a.scene), seed, threads)?;
    write_surface_outputs(&mut run, &g, &albedo, &scene.wall)?;
    run.manifest.parameters = json!({
        "volume": a.volume,
        "beta": a.beta,
        "threshold": a.threshold,
        "n": cfg.hemisphere_resolution,
        "params": a.params,
        "hits": g.num_hits(),
    });
    run.finish()?;
    Ok(())
}

fn record_params(run: &mut Run, stem: &str) -> Result<()> {
    run.record(&format!("{stem}.json"))?;
    run.record(&format!("{stem}_albedo.f64"))?;
    run.record(&format!("{stem}_albedo.f64.json"))
}

fn calibrate(a: CalibrateArgs, seed: u64, threads: usize) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let cfg = scene.cfg();
    let h = scene.read_cube(&a.cube)?;
    let theta0 = match &a.params {
        Some(p) => io::read_params(p)?,
        None => {
            let mut t = scene.defaults();
            t.ls = scene.sensor();
            t.pf = scene.file.phasor.unwrap_or(t.pf);
            t
        }
    };
    theta0.validate()?;
    if theta0.albedo.0.dims != cfg.volume_resolution {
        bail!("initial albedo grid does not match the scene volume resolution");
    }
    if !(a.divergence_factor > 0.0) {
        bail!("--divergence-factor must be positive");
    }
    let opts = CalibOptions {
        max_iters: a.iters,
        batch_fraction: a.batch,
        seed,
        lr_scalar: a.lr_scalar,
        lr_albedo: a.lr_albedo,
        tolerance: a.tolerance,
        divergence_factor: a.divergence_factor,
        ..CalibOptions::default()
    };
    let mut run = Run::start(&a.out, "calibrate", Some(&a.scene), seed, threads)?;
    run.manifest.parameters = json!({
        "cube": a.cube,
        "initial_params": a.params,
        "initial_scalars": theta0.scalars(),
        "options": opts,
        "checkpoint_every": a.checkpoint_every,
    });

    let mut rows: Vec<HistoryRow> = Vec::new();
    let mut checkpoints: Vec<String> = Vec::new();
    let mut checkpoint_err = None;
    let result = calib::calibrate_with(&h, &theta0, &scene.wall, cfg, &opts, |row, theta| {
        rows.push(*row);
        let k = a.checkpoint_every;
        if k > 0 && row.iteration % k == 0 && checkpoint_err.is_none() {
            let stem = format!("checkpoint_{:05}", row.iteration);
            match io::write_params(&run.dir, &stem, theta) {
                Ok(_) => checkpoints.push(stem),
                Err(e) => checkpoint_err = Some(e),
            }
        }
    });
    if let Some(e) = checkpoint_err {
        return Err(e).context("writing a checkpoint");
    }
    for stem in &checkpoints {
        record_params(&mut run, stem)?;
    }
    // the history up to a failure is still worth keeping
    io::write_file(
        &run.path("history.csv"),
        io::history_to_csv(&rows)?.as_bytes(),
    )?;
    run.record("history.csv")?;
    let res = match result {
        Ok(r) => r,
        Err(e) => {
            run.finish()?;
            return Err(e).context("calibration failed");
        }
    };

    io::write_params(&run.dir, "params", &res.params)?;
    record_params(&mut run, "params")?;
    let (v, g, _) = calib::forward(&h, &res.params, &scene.wall, cfg)?;
    write_volume_outputs(&mut run, "volume", &v)?;
    write_xz(&mut run, "xz.png", &v)?;
    write_surface_outputs(&mut run, &g, &res.params.albedo, &scene.wall)?;
    if let Some(p) = run.manifest.parameters.as_object_mut() {
        p.insert("iterations".into(), json!(res.history.len()));
        p.insert("converged".into(), json!(res.converged));
        p.insert("final_scalars".into(), json!(res.params.scalars()));
    }
    run.finish()?;
    Ok(())
}

pub const SNR_HEADER: &str = "index,photon_scale,seed,snr_db";

fn noise_sweep(a: NoiseSweepArgs, seed: u64, threads: usize) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let pf = scene.phasor(&a.phasor)?;
    if let Some(s) = a.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        bail!("photon scales must be positive and finite, got {s}");
    }
    let h = scene.read_cube(&a.cube)?;
    let mut run = Run::start(&a.out, "noise-sweep", Some(&a.scene), seed, threads)?;
    let mut csv = format!("{SNR_HEADER}\n");
    for (i, &scale) in a.scales.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let noisy = sensor::add_poisson_noise(&h, scale, s)?;
        let snr = sensor::snr_db(&h, &noisy)?;
        csv.push_str(&format!("{i},{scale:?},{s},{snr:?}\n"));
        let v = phasor::reconstruct(&noisy, &pf, &scene.wall, scene.cfg(), false)
            .with_context(|| format!("reconstructing at photon scale {scale}"))?;
        write_volume_outputs(&mut run, &format!("volume_{i:03}"), &v)?;
        write_xz(&mut run, &format!("xz_{i:03}.png"), &v)?;
    }
    io::write_file(&run.path("snr.csv"), csv.as_bytes())?;
    run.record("snr.csv")?;
    run.manifest.parameters = json!({
        "cube": a.cube,
        "scales": a.scales,
        "phasor": pf,
        "params": a.phasor.params,
    });
    run.finish()?;
    Ok(())
}

fn info(a: InfoArgs) -> Result<()> {
    let text = match (a.cube, a.volume) {
        (Some(c), _) => io::to_json_string(&io::cube_info(&io::read_cube(&c)?))?,
        (None, Some(v)) => {
            let vol = io::read_volume(&v)?;
            let meta: io::VolumeMeta = io::read_json(&io::sidecar_path(&v))?;
            io::to_json_string(&json!({
                "meta": meta,
                "max_value": vol.max_value(),
                "argmax": vol.coords(vol.argmax()),
            }))?
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    print!("{text}");
    Ok(())
}
