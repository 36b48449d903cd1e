//! Command-line driver: dataset synthesis, training, evaluation, ablations,
//! explicit panorama warping, and plotting.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use swl_core::decoder::{MapDomain, PredictionMap};
use swl_core::geom::{UnitQuaternion, UnitVec3};
use swl_core::harness::{
    behavior_table, curve_table, evaluate, run_ablation, train, Axis, RunConfig, TaskModel,
};
use swl_core::numcore::{checkpoint, NumError};
use swl_core::synth::{gen_dataset, read_dataset_file, write_dataset_file, DatasetManifest, SceneSpec, Task};
use swl_core::warp::{warp_fov_to_pano, CameraModel, Image, Pose};

#[derive(Parser)]
#[command(name = "swl", about = "Spherical world-locking at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and compare config variants along one ablation axis.
    Ablate(AblateArgs),
    /// Reproject a camera frame onto a world-locked panorama.
    Warp(WarpArgs),
    /// Render loss curves or prediction maps to PNG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SceneArgs {
    /// Number of sound sources.
    #[arg(long, default_value_t = 1)]
    sources: usize,
    /// Spectrogram frames per episode window.
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Frequency bins.
    #[arg(long, default_value_t = 8)]
    bins: usize,
    /// Head-motion smoothness (higher is slower; inf pins the pose).
    #[arg(long, default_value_t = 1.0)]
    smoothness: f64,
    /// Restrict sources to the equator.
    #[arg(long)]
    equatorial: bool,
}

impl SceneArgs {
    fn scene(&self, seed: u64) -> SceneSpec {
        let mut s = SceneSpec::easy(self.sources, seed);
        s.frames = self.frames;
        s.bins = self.bins;
        s.smoothness = self.smoothness;
        s.equatorial_sources = self.equatorial;
        s
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Task: asl, ssl, or behavior.
    #[arg(long)]
    task: String,
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file (must start with `task = ...`).
    #[arg(long)]
    config: PathBuf,
    /// Dataset file produced by `swl synth`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional loss-curve text table output.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional CSV report path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Optional prediction-map dump prefix (writes PREFIX.map + PREFIX.png
    /// for the first episode).
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Axis: pose, modality, decoder, encoder_flags, window, or horizontal.
    #[arg(long)]
    axis: String,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    eval: usize,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WarpArgs {
    /// Input frame (PNG, read as grayscale).
    #[arg(long)]
    input: PathBuf,
    /// Output panorama PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64.0)]
    radius: f64,
    #[arg(long, default_value_t = 90.0)]
    fov_h: f64,
    #[arg(long, default_value_t = 60.0)]
    fov_v: f64,
    /// Head yaw about the up axis, degrees.
    #[arg(long, default_value_t = 0.0)]
    yaw: f64,
    /// Head pitch about the left axis, degrees.
    #[arg(long, default_value_t = 0.0)]
    pitch: f64,
    /// Head roll about the forward axis, degrees.
    #[arg(long, default_value_t = 0.0)]
    roll: f64,
}

#[derive(Args)]
struct PlotArgs {
    /// Loss-curve text table (as written by `swl train --curve`).
    #[arg(long, conflicts_with = "map")]
    curve: Option<PathBuf>,
    /// Prediction-map raw file (as written by `swl eval --dump`).
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Warp(a) => cmd_warp(a),
        Cmd::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                NumError::Invalid(_) => ExitCode::from(2),
                NumError::ShapeMismatch { .. } | NumError::NonFinite { .. } => ExitCode::from(3),
            }
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, NumError> {
    std::fs::read_to_string(path).map_err(|e| NumError::Invalid(format!("read {}: {e}", path.display())))
}

fn write_string(path: &Path, s: &str) -> Result<(), NumError> {
    std::fs::write(path, s).map_err(|e| NumError::Invalid(format!("write {}: {e}", path.display())))
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, NumError> {
    let mut cfg = RunConfig::from_text(&read_to_string(path)?)?;
    let mut it = overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| NumError::Invalid(format!("expected a --key override, got '{flag}'")))?;
        let value = it
            .next()
            .ok_or_else(|| NumError::Invalid(format!("override --{key} is missing its value")))?;
        cfg.apply(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_run(cfg: &RunConfig, data: &Path) -> Result<(TaskModel, Vec<swl_core::synth::Episode>), NumError> {
    let (manifest, episodes) = read_dataset_file(data)?;
    if manifest.task != cfg.task {
        return Err(NumError::Invalid(format!(
            "dataset task '{}' does not match config task '{}'",
            manifest.task.name(),
            cfg.task.name()
        )));
    }
    let model = swl_core::harness::build_model(cfg, &manifest.scene)?;
    Ok((model, episodes))
}

fn cmd_synth(a: SynthArgs) -> Result<(), NumError> {
    let task = Task::parse(&a.task)?;
    let scene = a.scene.scene(a.seed);
    let episodes = gen_dataset(&scene, task, a.episodes)?;
    let manifest = DatasetManifest {
        task,
        seed: a.seed,
        episodes: episodes.len(),
        scene,
    };
    write_dataset_file(&a.out, &manifest, &episodes)?;
    println!("wrote {} {} episodes to {}", episodes.len(), task.name(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), NumError> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let (model, episodes) = load_run(&cfg, &a.data)?;
    let outcome = train(&model, &episodes)?;
    let table = curve_table(&outcome.curve);
    print!("{table}");
    if let Some(curve_path) = &a.curve {
        write_string(curve_path, &table)?;
    }
    checkpoint::save(&outcome.params, &a.out)?;
    if outcome.aborted {
        eprintln!("training aborted on a non-finite loss; wrote the last good checkpoint");
        return Err(NumError::NonFinite {
            node: "training loss".into(),
        });
    }
    println!("checkpoint: {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), NumError> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let (model, episodes) = load_run(&cfg, &a.data)?;
    let params = checkpoint::load(&a.checkpoint)?;
    let report = evaluate(&model, &params, &episodes)?;
    print!("{}", report.to_table());
    if cfg.task == Task::Behavior {
        let rows = swl_core::harness::eval_behavior(&model, &params, &episodes)?;
        print!("{}", behavior_table(&rows));
    }
    if let Some(csv) = &a.csv {
        write_string(csv, &report.to_csv())?;
    }
    if let Some(prefix) = &a.dump {
        dump_first_map(&model, &params, &episodes, prefix)?;
    }
    Ok(())
}

/// Write the first episode's spherical prediction map as raw + PNG.
fn dump_first_map(
    model: &TaskModel,
    params: &swl_core::numcore::ParamStore,
    episodes: &[swl_core::synth::Episode],
    prefix: &Path,
) -> Result<(), NumError> {
    use swl_core::harness::{forward_episode, TaskOutput};
    let ep = episodes
        .first()
        .ok_or_else(|| NumError::Invalid("dataset is empty".into()))?;
    let mut exec = swl_core::numcore::Executor::new(&model.graph);
    forward_episode(model, &mut exec, params, ep)?;
    let (node, domain) = match &model.output {
        TaskOutput::SparseGrid(n) => (*n, MapDomain::SparseGrid),
        TaskOutput::Dense(n) => (*n, MapDomain::DensePano),
        TaskOutput::Horizontal(n) => (*n, MapDomain::DensePano),
        TaskOutput::Fov { pano, .. } => (*pano, MapDomain::DensePano),
        TaskOutput::SparsePoint { points } => (*points, MapDomain::SparsePoint),
        TaskOutput::Behavior(heads) => (heads[0].2, MapDomain::SparseGrid),
    };
    let v = exec.value(node);
    let shape = if v.shape().len() == 1 {
        vec![model.cfg.grid_rows, model.cfg.grid_cols]
    } else {
        v.shape().to_vec()
    };
    let shape = if shape.iter().product::<usize>() == v.data().len() {
        shape
    } else {
        vec![v.data().len()]
    };
    let map = PredictionMap::new(domain, shape, v.data().to_vec(), true)?;
    map.write_raw(&prefix.with_extension("map"))
        .map_err(|e| NumError::Invalid(format!("write map: {e}")))?;
    map.to_png(&prefix.with_extension("png"))?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), NumError> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let axis = Axis::parse(&a.axis)?;
    let mut seeds = Vec::new();
    for part in a.seeds.split(',').filter(|p| !p.is_empty()) {
        seeds.push(
            part.trim()
                .parse::<u64>()
                .map_err(|_| NumError::Invalid(format!("bad seed '{part}'")))?,
        );
    }
    let scene = a.scene.scene(0);
    let report = run_ablation(&cfg, axis, &scene, a.train, a.eval, &seeds)?;
    print!("{}", report.to_table());
    if let Some(csv) = &a.csv {
        write_string(csv, &report.to_csv())?;
    }
    Ok(())
}

fn cmd_warp(a: WarpArgs) -> Result<(), NumError> {
    let img = image::open(&a.input)
        .map_err(|e| NumError::Invalid(format!("open {}: {e}", a.input.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut frame = Image::new(h, w, 1);
    for i in 0..h {
        for j in 0..w {
            frame.set(i, j, 0, img.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0);
        }
    }
    let cam = CameraModel::new(a.fov_h, a.fov_v, w, h)?;
    let yaw = UnitQuaternion::from_axis_angle(UnitVec3::UP, a.yaw.to_radians());
    let left = UnitVec3::normalize(0.0, 1.0, 0.0)?;
    let pitch = UnitQuaternion::from_axis_angle(left, a.pitch.to_radians());
    let roll = UnitQuaternion::from_axis_angle(UnitVec3::FORWARD, a.roll.to_radians());
    let pose = Pose::from_rotation(yaw.mul(&pitch).mul(&roll));
    let pano = warp_fov_to_pano(&frame, &cam, &pose, a.radius)?;
    let (ph, pw) = (pano.height(), pano.width());
    let mut out = image::GrayImage::new(pw as u32, ph as u32);
    for i in 0..ph {
        for j in 0..pw {
            let v = (pano.image.get(i, j, 0).clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    out.save(&a.out)
        .map_err(|e| NumError::Invalid(format!("save {}: {e}", a.out.display())))?;
    println!("wrote {}x{} panorama to {}", ph, pw, a.out.display());
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<(), NumError> {
    match (&a.curve, &a.map) {
        (Some(curve), None) => plot_curve(curve, &a.out),
        (None, Some(map)) => {
            let m = PredictionMap::read_raw(map)?;
            m.to_png(&a.out)?;
            println!("wrote heatmap to {}", a.out.display());
            Ok(())
        }
        _ => Err(NumError::Invalid("plot needs exactly one of --curve or --map".into())),
    }
}

fn plot_curve(curve: &Path, out: &Path) -> Result<(), NumError> {
    let text = read_to_string(curve)?;
    let mut points = Vec::new();
    for line in text.lines().skip(1) {
        let mut it = line.split_whitespace();
        let (Some(e), Some(l)) = (it.next(), it.next()) else { continue };
        let e: f64 = e.parse().map_err(|_| NumError::Invalid(format!("bad curve line '{line}'")))?;
        let l: f64 = l.parse().map_err(|_| NumError::Invalid(format!("bad curve line '{line}'")))?;
        points.push((e, l));
    }
    if points.is_empty() {
        return Err(NumError::Invalid("curve file has no data rows".into()));
    }
    let (width, height, margin) = (640u32, 400u32, 30.0f64);
    let mut img = image::GrayImage::from_pixel(width, height, image::Luma([255]));
    let (xmin, xmax) = (points[0].0, points[points.len() - 1].0.max(points[0].0 + 1e-9));
    let ymin = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).max(ymin + 1e-9);
    let to_px = |(x, y): (f64, f64)| {
        let px = margin + (x - xmin) / (xmax - xmin) * (width as f64 - 2.0 * margin);
        let py = (height as f64 - margin) - (y - ymin) / (ymax - ymin) * (height as f64 - 2.0 * margin);
        (px, py)
    };
    // Axes.
    for x in margin as u32..(width - margin as u32) {
        img.put_pixel(x, height - margin as u32, image::Luma([0]));
    }
    for y in margin as u32..(height - margin as u32) {
        img.put_pixel(margin as u32, y, image::Luma([0]));
    }
    // Polyline between consecutive epochs.
    for pair in points.windows(2) {
        let (x0, y0) = to_px(pair[0]);
        let (x1, y1) = to_px(pair[1]);
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 + t * (x1 - x0)).round() as u32;
            let y = (y0 + t * (y1 - y0)).round() as u32;
            if x < width && y < height {
                img.put_pixel(x, y, image::Luma([0]));
            }
        }
    }
    img.save(out)
        .map_err(|e| NumError::Invalid(format!("save {}: {e}", out.display())))?;
    println!("wrote loss curve to {}", out.display());
    Ok(())
}
