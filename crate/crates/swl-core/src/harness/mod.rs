//! Training loops, evaluation metrics, ablation drivers, and run
//! configuration. A run is a pure function of (config, dataset): training
//! and every evaluation reproduce bit-identical outputs for a fixed seed.

mod ablation;
mod metrics;
mod model;
mod train;

pub use ablation::{axis_variants, run_ablation, AblationReport, AblationRow, Axis};
pub use metrics::{
    average_precision, behavior_table, eval_behavior, eval_map_fov, eval_mae, eval_spherical_map,
    evaluate, forward_episode, SPHERICAL_MAP_RADII_DEG,
};
pub use model::{build_model, init_params, DecoderKind, TaskModel, TaskOutput};
pub use train::{curve_table, train, TrainOutcome};

use crate::numcore::NumError;
use crate::synth::Task;
use crate::tokens::BehaviorKind;

/// Everything that determines a training or evaluation run besides the
/// dataset itself. Serializes to a flat `key = value` text file; every key
/// can be overridden from the command line.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub spatial_hidden: usize,
    pub spatial_bias: bool,
    pub modality_ln: bool,
    pub modality_qkv: bool,
    pub modality_mlp: bool,
    pub decoder: DecoderKind,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Output rows of the horizontal decoder's final stage.
    pub horizontal_rows: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub audio: bool,
    pub multi_channel: bool,
    pub visual: bool,
    pub behavior: bool,
    /// World-locked token positions; false pins audio/visual positions to
    /// the identity pose (the pose ablation).
    pub world_locked: bool,
    /// Spectrogram frames fed to the model (0 = the whole episode window).
    pub window_frames: usize,
    /// Spectrogram frames per audio token.
    pub patch_frames: usize,
    pub time_bins: usize,
    pub bin_seconds: f64,
    /// Disk radius of dense / FOV training targets, degrees.
    pub target_radius_deg: f64,
    /// Suppression radius for peak extraction, degrees.
    pub nms_radius_deg: f64,
    /// Peaks extracted per episode for threshold-based detection metrics.
    pub peaks_k: usize,
    /// Behavior targets trained jointly (any subset of the three kinds).
    pub behavior_targets: Vec<BehaviorKind>,
}

impl RunConfig {
    pub fn default_for(task: Task) -> RunConfig {
        let mut c = RunConfig {
            task,
            d_model: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            spatial_hidden: 16,
            spatial_bias: true,
            modality_ln: true,
            modality_qkv: true,
            modality_mlp: false,
            decoder: DecoderKind::SparseGrid,
            grid_rows: 6,
            grid_cols: 12,
            horizontal_rows: 5,
            lr: 1e-4,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            audio: true,
            multi_channel: true,
            visual: false,
            behavior: false,
            world_locked: true,
            window_frames: 0,
            patch_frames: 1,
            time_bins: 8,
            bin_seconds: 0.1,
            target_radius_deg: 15.0,
            nms_radius_deg: 20.0,
            peaks_k: 4,
            behavior_targets: BehaviorKind::ALL.to_vec(),
        };
        match task {
            Task::Ssl => {}
            Task::Asl => {
                c.visual = true;
                c.decoder = DecoderKind::Dense;
                c.grid_rows = 4;
                c.grid_cols = 8;
            }
            Task::Behavior => {
                c.audio = false;
                c.behavior = true;
            }
        }
        c
    }

    pub fn encoder_config(&self) -> crate::encoder::EncoderConfig {
        crate::encoder::EncoderConfig {
            layers: self.layers,
            d: self.d_model,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            spatial_hidden: self.spatial_hidden,
            use_spatial_bias: self.spatial_bias,
            use_modality_ln: self.modality_ln,
            use_modality_qkv: self.modality_qkv,
            use_modality_mlp: self.modality_mlp,
        }
    }

    /// Apply one `key = value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), NumError> {
        let bad = |what: &str| NumError::Invalid(format!("config key '{key}': {what} (got '{value}')"));
        macro_rules! parse {
            ($t:ty, $what:expr) => {
                value.parse::<$t>().map_err(|_| bad($what))?
            };
        }
        match key {
            "task" => self.task = Task::parse(value)?,
            "d_model" => self.d_model = parse!(usize, "expected integer"),
            "layers" => self.layers = parse!(usize, "expected integer"),
            "heads" => self.heads = parse!(usize, "expected integer"),
            "mlp_ratio" => self.mlp_ratio = parse!(usize, "expected integer"),
            "spatial_hidden" => self.spatial_hidden = parse!(usize, "expected integer"),
            "spatial_bias" => self.spatial_bias = parse!(bool, "expected true/false"),
            "modality_ln" => self.modality_ln = parse!(bool, "expected true/false"),
            "modality_qkv" => self.modality_qkv = parse!(bool, "expected true/false"),
            "modality_mlp" => self.modality_mlp = parse!(bool, "expected true/false"),
            "decoder" => self.decoder = DecoderKind::parse(value)?,
            "grid_rows" => self.grid_rows = parse!(usize, "expected integer"),
            "grid_cols" => self.grid_cols = parse!(usize, "expected integer"),
            "horizontal_rows" => self.horizontal_rows = parse!(usize, "expected integer"),
            "lr" => self.lr = parse!(f64, "expected number"),
            "epochs" => self.epochs = parse!(usize, "expected integer"),
            "batch_size" => self.batch_size = parse!(usize, "expected integer"),
            "seed" => self.seed = parse!(u64, "expected integer"),
            "audio" => self.audio = parse!(bool, "expected true/false"),
            "multi_channel" => self.multi_channel = parse!(bool, "expected true/false"),
            "visual" => self.visual = parse!(bool, "expected true/false"),
            "behavior" => self.behavior = parse!(bool, "expected true/false"),
            "world_locked" => self.world_locked = parse!(bool, "expected true/false"),
            "window_frames" => self.window_frames = parse!(usize, "expected integer"),
            "patch_frames" => self.patch_frames = parse!(usize, "expected integer"),
            "time_bins" => self.time_bins = parse!(usize, "expected integer"),
            "bin_seconds" => self.bin_seconds = parse!(f64, "expected number"),
            "target_radius_deg" => self.target_radius_deg = parse!(f64, "expected number"),
            "nms_radius_deg" => self.nms_radius_deg = parse!(f64, "expected number"),
            "peaks_k" => self.peaks_k = parse!(usize, "expected integer"),
            "behavior_targets" => {
                let mut kinds = Vec::new();
                for part in value.split('+').filter(|p| !p.is_empty()) {
                    kinds.push(BehaviorKind::parse(part)?);
                }
                if kinds.is_empty() {
                    return Err(bad("expected kinds joined by '+'"));
                }
                self.behavior_targets = kinds;
            }
            other => return Err(NumError::Invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Full flat-text form; reparses to the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("task", self.task.name().into());
        kv("d_model", self.d_model.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("spatial_hidden", self.spatial_hidden.to_string());
        kv("spatial_bias", self.spatial_bias.to_string());
        kv("modality_ln", self.modality_ln.to_string());
        kv("modality_qkv", self.modality_qkv.to_string());
        kv("modality_mlp", self.modality_mlp.to_string());
        kv("decoder", self.decoder.name().into());
        kv("grid_rows", self.grid_rows.to_string());
        kv("grid_cols", self.grid_cols.to_string());
        kv("horizontal_rows", self.horizontal_rows.to_string());
        kv("lr", format!("{}", self.lr));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("audio", self.audio.to_string());
        kv("multi_channel", self.multi_channel.to_string());
        kv("visual", self.visual.to_string());
        kv("behavior", self.behavior.to_string());
        kv("world_locked", self.world_locked.to_string());
        kv("window_frames", self.window_frames.to_string());
        kv("patch_frames", self.patch_frames.to_string());
        kv("time_bins", self.time_bins.to_string());
        kv("bin_seconds", format!("{}", self.bin_seconds));
        kv("target_radius_deg", format!("{}", self.target_radius_deg));
        kv("nms_radius_deg", format!("{}", self.nms_radius_deg));
        kv("peaks_k", self.peaks_k.to_string());
        kv(
            "behavior_targets",
            self.behavior_targets
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join("+"),
        );
        s
    }

    /// Parse a flat `key = value` file body over task defaults; the `task`
    /// key must appear first so the right defaults apply.
    pub fn from_text(text: &str) -> Result<RunConfig, NumError> {
        let pairs = parse_kv(text)?;
        let (first_key, first_val) = pairs
            .first()
            .ok_or_else(|| NumError::Invalid("empty config".into()))?;
        if first_key != "task" {
            return Err(NumError::Invalid("config must start with 'task = ...'".into()));
        }
        let mut cfg = RunConfig::default_for(Task::parse(first_val)?);
        for (k, v) in &pairs[1..] {
            cfg.apply(k, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if !(self.audio || self.visual || self.behavior) {
            return Err(NumError::Invalid("modality subset is empty".into()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(NumError::Invalid(format!(
                "width {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(NumError::Invalid("grid dims must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NumError::Invalid("batch size must be >= 1".into()));
        }
        if self.decoder == DecoderKind::Horizontal && self.grid_rows != 1 {
            return Err(NumError::Invalid(
                "horizontal decoding uses a single equator row of CLS tokens (grid_rows = 1)".into(),
            ));
        }
        Ok(())
    }

    /// Short stable fingerprint of the full config text.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Parse `key = value` lines; '#' starts a comment, blank lines ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, NumError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| NumError::Invalid(format!("config line {}: expected 'key = value'", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Named scalar results of one evaluation, reproducible from
/// (checkpoint, dataset, config).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: Vec<(String, f64)>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let w = self.metrics.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<w$}  value\n", "metric", w = w);
        for (n, v) in &self.metrics {
            s.push_str(&format!("{n:<w$}  {v:.6}\n", w = w));
        }
        s.push_str(&format!("config fingerprint: {}\n", self.fingerprint));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (n, v) in &self.metrics {
            s.push_str(&format!("{n},{v}\n"));
        }
        s
    }
}
