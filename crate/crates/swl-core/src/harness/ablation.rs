//! Ablation drivers: enumerate config variants along one axis, train and
//! evaluate each with shared data seeds, and emit a comparison table.

use crate::numcore::NumError;
use crate::synth::{gen_dataset, SceneSpec, Task};

use super::metrics::{eval_behavior, eval_map_fov, eval_mae};
use super::model::{build_model, DecoderKind};
use super::train::train;
use super::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// World-locked vs head-locked token positions.
    Pose,
    /// Audio channel count and visual stream combinations.
    Modality,
    /// Point vs dense vs grid decoding.
    Decoder,
    /// Spatial bias and modality-wise encoder toggles.
    EncoderFlags,
    /// Audio window length.
    Window,
    /// Equator-row decoding vs full grid on azimuth-only data.
    Horizontal,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Axis, NumError> {
        match s {
            "pose" => Ok(Axis::Pose),
            "modality" => Ok(Axis::Modality),
            "decoder" => Ok(Axis::Decoder),
            "encoder_flags" => Ok(Axis::EncoderFlags),
            "window" => Ok(Axis::Window),
            "horizontal" => Ok(Axis::Horizontal),
            other => Err(NumError::Invalid(format!("unknown ablation axis '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Pose => "pose",
            Axis::Modality => "modality",
            Axis::Decoder => "decoder",
            Axis::EncoderFlags => "encoder_flags",
            Axis::Window => "window",
            Axis::Horizontal => "horizontal",
        }
    }
}

/// The config variants an axis compares, with human-readable labels.
pub fn axis_variants(base: &RunConfig, axis: Axis) -> Result<Vec<(String, RunConfig)>, NumError> {
    let mut out = Vec::new();
    let mut push = |label: &str, cfg: RunConfig| out.push((label.to_string(), cfg));
    match axis {
        Axis::Pose => {
            let mut with = base.clone();
            with.world_locked = true;
            push("with_pose", with);
            let mut without = base.clone();
            without.world_locked = false;
            push("without_pose", without);
        }
        Axis::Modality => {
            for (label, multi, visual) in [
                ("a_mono", false, false),
                ("a_mono+v", false, true),
                ("a_multi", true, false),
                ("a_multi+v", true, true),
            ] {
                let mut c = base.clone();
                c.audio = true;
                c.multi_channel = multi;
                c.visual = visual;
                push(label, c);
            }
        }
        Axis::Decoder => {
            if base.task != Task::Asl {
                return Err(NumError::Invalid(
                    "the decoder axis compares box scoring variants on the box task".into(),
                ));
            }
            for (label, kind) in [
                ("sparse_point", DecoderKind::SparsePoint),
                ("dense", DecoderKind::Dense),
                ("sparse_grid", DecoderKind::SparseGrid),
            ] {
                let mut c = base.clone();
                c.decoder = kind;
                push(label, c);
            }
        }
        Axis::EncoderFlags => {
            push("full", base.clone());
            let mut c = base.clone();
            c.spatial_bias = false;
            push("no_spatial_bias", c);
            let mut c = base.clone();
            c.modality_ln = false;
            push("no_modality_ln", c);
            let mut c = base.clone();
            c.modality_qkv = false;
            push("no_modality_qkv", c);
            let mut c = base.clone();
            c.modality_mlp = true;
            push("with_modality_mlp", c);
        }
        Axis::Window => {
            for frames in [5usize, 10, 15] {
                let mut c = base.clone();
                c.window_frames = frames;
                push(&format!("{}ms", frames * 20), c);
            }
        }
        Axis::Horizontal => {
            if base.task != Task::Ssl {
                return Err(NumError::Invalid("the horizontal axis is an audio-task variant".into()));
            }
            let mut grid = base.clone();
            grid.decoder = DecoderKind::SparseGrid;
            push("sparse_grid", grid);
            let mut horiz = base.clone();
            horiz.decoder = DecoderKind::Horizontal;
            horiz.horizontal_rows = base.grid_rows;
            horiz.grid_rows = 1;
            push("horizontal", horiz);
        }
    }
    Ok(out)
}

/// Scene adjustments an axis needs (dataset shape, not model shape).
fn axis_scene(base: &SceneSpec, axis: Axis) -> SceneSpec {
    let mut scene = base.clone();
    match axis {
        Axis::Window => scene.frames = scene.frames.max(15),
        Axis::Horizontal => scene.equatorial_sources = true,
        _ => {}
    }
    scene
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub axis: String,
    pub metric_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn value(&self, label: &str, seed: u64, metric: &str) -> Option<f64> {
        let mi = self.metric_names.iter().position(|m| m == metric)?;
        self.rows
            .iter()
            .find(|r| r.label == label && r.seed == seed)
            .map(|r| r.values[mi])
    }

    /// Aligned text table: one row per (variant, seed), then a per-variant
    /// mean +- half-range summary of each metric.
    pub fn to_table(&self) -> String {
        let lw = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let mut s = format!("axis: {}\n{:<lw$}  {:<6}", self.axis, "variant", "seed", lw = lw);
        for m in &self.metric_names {
            s.push_str(&format!("  {m:>10}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<lw$}  {:<6}", r.label, r.seed, lw = lw));
            for v in &r.values {
                s.push_str(&format!("  {v:>10.4}"));
            }
            s.push('\n');
        }
        let labels: Vec<&str> = {
            let mut seen = Vec::new();
            for r in &self.rows {
                if !seen.contains(&r.label.as_str()) {
                    seen.push(r.label.as_str());
                }
            }
            seen
        };
        s.push('\n');
        for label in labels {
            s.push_str(&format!("{label:<lw$}  {:<6}", "all", lw = lw));
            for mi in 0..self.metric_names.len() {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.label == label)
                    .map(|r| r.values[mi])
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let half = (vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - vals.iter().cloned().fold(f64::INFINITY, f64::min))
                    / 2.0;
                s.push_str(&format!("  {mean:>6.2}+-{half:<4.2}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed");
        for m in &self.metric_names {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{}", r.label, r.seed));
            for v in &r.values {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn primary_metrics(task: Task) -> Vec<String> {
    match task {
        Task::Asl => vec!["map".into()],
        Task::Ssl => vec!["mae_gp".into(), "mae_pg".into()],
        Task::Behavior => vec!["mae_mean".into()],
    }
}

/// Train and evaluate every variant of an axis with shared data seeds.
/// Evaluation data is derived from a disjoint seed stream so train and eval
/// sets never overlap.
pub fn run_ablation(
    base: &RunConfig,
    axis: Axis,
    scene: &SceneSpec,
    n_train: usize,
    n_eval: usize,
    seeds: &[u64],
) -> Result<AblationReport, NumError> {
    if seeds.is_empty() || n_train == 0 || n_eval == 0 {
        return Err(NumError::Invalid("ablation needs seeds and nonempty datasets".into()));
    }
    let variants = axis_variants(base, axis)?;
    let scene = axis_scene(scene, axis);
    let metric_names = primary_metrics(base.task);
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut train_scene = scene.clone();
        train_scene.seed = seed.wrapping_mul(2).wrapping_add(1);
        let mut eval_scene = scene.clone();
        eval_scene.seed = seed.wrapping_mul(2).wrapping_add(0x5eed_0000_0000_0001);
        let train_eps = gen_dataset(&train_scene, base.task, n_train)?;
        let eval_eps = gen_dataset(&eval_scene, base.task, n_eval)?;
        for (label, cfg) in &variants {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let model = build_model(&cfg, &scene)?;
            let outcome = train(&model, &train_eps)?;
            if outcome.aborted {
                return Err(NumError::NonFinite {
                    node: format!("training loss ({label}, seed {seed})"),
                });
            }
            let values = match base.task {
                Task::Asl => vec![eval_map_fov(&model, &outcome.params, &eval_eps)?],
                Task::Ssl => {
                    let (gp, pg) = eval_mae(&model, &outcome.params, &eval_eps)?;
                    vec![gp, pg]
                }
                Task::Behavior => {
                    let per = eval_behavior(&model, &outcome.params, &eval_eps)?;
                    vec![per.iter().map(|(_, _, v)| *v).sum::<f64>() / per.len() as f64]
                }
            };
            rows.push(AblationRow {
                label: label.clone(),
                seed,
                values,
            });
        }
    }
    Ok(AblationReport {
        axis: axis.name().to_string(),
        metric_names,
        rows,
    })
}
