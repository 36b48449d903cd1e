//! Task model assembly: one static computation graph per (config, scene),
//! reused across episodes by rebinding named inputs. Per-episode variation
//! enters only through input arrays (audio patches, visual frame, behavior
//! features, pairwise position features, sampling matrices, and targets).

use rand_chacha::ChaCha8Rng;

use crate::decoder::{
    bce_loss, declare_dense_head, declare_horizontal_head, declare_mlp_head, dense_decode,
    dense_target, fov_sampling_matrix, fov_target, horizontal_decode, init_dense_head,
    init_horizontal_head, init_mlp_head, point_decode, sample_dense_at_fov, sparse_decode,
    sparse_grid_target,
};
use crate::encoder::{encode, init_encoder_params, spatial_features};
use crate::geom::{great_circle_angle, make_grid, SphereGrid, UnitVec3};
use crate::numcore::{Array, Graph, Inputs, NodeId, NumError, ParamStore};
use crate::synth::{Episode, SceneSpec, Task, BEHAVIOR_HORIZONS_S};
use crate::tokens::{
    assemble, behavior_features, embed_audio, embed_behavior, embed_visual, make_cls_tokens,
    visual_token_positions, BehaviorKind, Modality, Spectrogram, TokenSet, VisualExtractor,
};
use crate::warp::Pose;

use super::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// One logit per CLS grid cell.
    SparseGrid,
    /// Logits at caller-selected directions (box centers), read off the
    /// encoded CLS grid by a selection matrix.
    SparsePoint,
    /// Upsampled panorama logit map (4x grid resolution).
    Dense,
    /// Equator-row CLS tokens decoded to a full lat-lon map.
    Horizontal,
}

impl DecoderKind {
    pub fn parse(s: &str) -> Result<DecoderKind, NumError> {
        match s {
            "sparse_grid" => Ok(DecoderKind::SparseGrid),
            "sparse_point" => Ok(DecoderKind::SparsePoint),
            "dense" => Ok(DecoderKind::Dense),
            "horizontal" => Ok(DecoderKind::Horizontal),
            other => Err(NumError::Invalid(format!("unknown decoder '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::SparseGrid => "sparse_grid",
            DecoderKind::SparsePoint => "sparse_point",
            DecoderKind::Dense => "dense",
            DecoderKind::Horizontal => "horizontal",
        }
    }
}

/// The prediction nodes of a task model.
#[derive(Debug, Clone)]
pub enum TaskOutput {
    /// (N_c) logits over the CLS grid.
    SparseGrid(NodeId),
    /// (H, W) lat-lon logit map.
    Dense(NodeId),
    /// (H', W') lat-lon logit map decoded from the equator row.
    Horizontal(NodeId),
    /// Dense panorama map plus its differentiable FOV readout.
    Fov { pano: NodeId, fov: NodeId },
    /// (K) logits at per-episode selected directions.
    SparsePoint { points: NodeId },
    /// One (N_c) grid logit map per (kind, horizon) target.
    Behavior(Vec<(BehaviorKind, f64, NodeId)>),
}

pub struct TaskModel {
    pub cfg: RunConfig,
    pub scene: SceneSpec,
    pub graph: Graph,
    pub grid: SphereGrid,
    pub tokens: TokenSet,
    pub loss: NodeId,
    pub output: TaskOutput,
    /// Spectrogram frames consumed per episode.
    pub audio_window: usize,
}

/// Trailing `w`-frame slice of a spectrogram with its pose references.
fn windowed(sg: &Spectrogram, w: usize) -> Result<Spectrogram, NumError> {
    if w == 0 || w > sg.frames {
        return Err(NumError::Invalid(format!(
            "window of {w} frames from a {}-frame spectrogram",
            sg.frames
        )));
    }
    let lo = sg.frames - w;
    let mut data = Vec::with_capacity(sg.channels * sg.bins * w);
    for c in 0..sg.channels {
        for h in 0..sg.bins {
            for t in lo..sg.frames {
                data.push(sg.get(c, h, t));
            }
        }
    }
    Spectrogram::new(sg.channels, sg.bins, w, data, sg.frame_poses[lo..].to_vec())
}

fn image_array(img: &crate::warp::Image) -> Result<Array, NumError> {
    Array::from_vec(&[img.height, img.width, img.channels], img.data().to_vec())
}

fn behavior_record_count() -> usize {
    use crate::synth::{BEHAVIOR_CONTEXT_S, BEHAVIOR_STEP_S};
    (((BEHAVIOR_CONTEXT_S / BEHAVIOR_STEP_S).round() as usize) + 1) * 3
}

pub fn build_model(cfg: &RunConfig, scene: &SceneSpec) -> Result<TaskModel, NumError> {
    cfg.validate()?;
    let mut g = Graph::new();
    let grid = make_grid(cfg.grid_rows, cfg.grid_cols)?;
    let d = cfg.d_model;

    let w_c = g.param("cls.w", &[d, 3]);
    let b_c = g.param("cls.b", &[d]);
    let cls = make_cls_tokens(&mut g, &grid, w_c, b_c)?;

    let audio_window = if cfg.window_frames == 0 { scene.frames } else { cfg.window_frames };
    let audio = if cfg.audio {
        if cfg.patch_frames == 0 || audio_window % cfg.patch_frames != 0 {
            return Err(NumError::Invalid(format!(
                "patch_frames {} does not divide the {audio_window}-frame window",
                cfg.patch_frames
            )));
        }
        let ch = if cfg.multi_channel { scene.mic.axes.len() } else { 1 };
        let n_a = audio_window / cfg.patch_frames;
        let m = ch * scene.bins * cfg.patch_frames;
        let patches = g.input("in.audio", &[n_a, m]);
        let w_a = g.param("emb.audio.w", &[m, d]);
        let b_a = g.param("emb.audio.b", &[d]);
        // Placeholder positions; the real ones are bound per episode via
        // the spatial-feature input.
        Some(embed_audio(&mut g, patches, w_a, b_a, vec![UnitVec3::FORWARD; n_a])?)
    } else {
        None
    };

    let visual = if cfg.visual {
        let cam = &scene.cam;
        let frame = g.input("in.frame", &[cam.height, cam.width, 1]);
        let ext = VisualExtractor::declare(&mut g, "emb.visual", d);
        Some(embed_visual(&mut g, frame, cam, &Pose::IDENTITY, &ext, cfg.world_locked)?)
    } else {
        None
    };

    let behavior = if cfg.behavior {
        let n_b = behavior_record_count();
        let dir = g.input("in.beh.dir", &[n_b, 9]);
        let kind = g.input("in.beh.kind", &[n_b, 3]);
        let time = g.input("in.beh.time", &[n_b, cfg.time_bins]);
        let w = g.param("emb.beh.w", &[9, d]);
        let kb = g.param("emb.beh.kb", &[3, d]);
        let te = g.param("emb.beh.t", &[cfg.time_bins, d]);
        Some(embed_behavior(&mut g, (dir, kind, time), w, kb, te, vec![UnitVec3::FORWARD; n_b])?)
    } else {
        None
    };

    let tokens = assemble(&mut g, cls, audio, visual, behavior)?;
    let (encoded, _trace) = encode(&mut g, &tokens, &cfg.encoder_config(), "enc")?;
    let cls_range = encoded.range_of(Modality::Cls);
    let cls_out = g.slice_rows(encoded.semantics, cls_range.start, cls_range.end)?;

    let (output, loss) = match (cfg.task, cfg.decoder) {
        (Task::Behavior, DecoderKind::SparseGrid) => {
            let n_c = grid.directions.len();
            let mut heads = Vec::new();
            let mut losses = Vec::new();
            for &kind in &cfg.behavior_targets {
                for &h in &BEHAVIOR_HORIZONS_S {
                    let ms = (h * 1000.0).round() as usize;
                    let head = declare_mlp_head(&mut g, &format!("dec.beh.{}.{ms}", kind.name()), d, 2 * d);
                    let logits = sparse_decode(&mut g, cls_out, &head)?;
                    let target = g.input(&format!("in.target.{}.{ms}", kind.name()), &[n_c]);
                    losses.push(bce_loss(&mut g, logits, target)?);
                    heads.push((kind, h, logits));
                }
            }
            let mut total = losses[0];
            for l in &losses[1..] {
                total = g.add(total, *l)?;
            }
            let loss = g.scale(total, 1.0 / losses.len() as f64);
            (TaskOutput::Behavior(heads), loss)
        }
        (Task::Behavior, other) => {
            return Err(NumError::Invalid(format!(
                "behavior anticipation decodes grid maps, not '{}'",
                other.name()
            )));
        }
        (_, DecoderKind::SparseGrid) => {
            let head = declare_mlp_head(&mut g, "dec.grid", d, 2 * d);
            let logits = sparse_decode(&mut g, cls_out, &head)?;
            let target = g.input("in.target", &[grid.directions.len()]);
            let loss = bce_loss(&mut g, logits, target)?;
            (TaskOutput::SparseGrid(logits), loss)
        }
        (Task::Asl, DecoderKind::Dense) => {
            let head = declare_dense_head(&mut g, "dec.dense", d, d);
            let pano = dense_decode(&mut g, cls_out, cfg.grid_rows, cfg.grid_cols, &head)?;
            let (mh, mw) = (4 * cfg.grid_rows, 4 * cfg.grid_cols);
            let cam = &scene.cam;
            let sampling = g.input("in.sampling", &[cam.height * cam.width, mh * mw]);
            let fov = sample_dense_at_fov(&mut g, pano, sampling, cam)?;
            let target = g.input("in.target", &[cam.height, cam.width]);
            let loss = bce_loss(&mut g, fov, target)?;
            (TaskOutput::Fov { pano, fov }, loss)
        }
        (Task::Ssl, DecoderKind::Dense) => {
            let head = declare_dense_head(&mut g, "dec.dense", d, d);
            let pano = dense_decode(&mut g, cls_out, cfg.grid_rows, cfg.grid_cols, &head)?;
            let target = g.input("in.target", &[4 * cfg.grid_rows, 4 * cfg.grid_cols]);
            let loss = bce_loss(&mut g, pano, target)?;
            (TaskOutput::Dense(pano), loss)
        }
        (Task::Asl, DecoderKind::SparsePoint) => {
            let head = declare_mlp_head(&mut g, "dec.point", d, 2 * d);
            let k = scene.n_sources.max(1);
            let select = g.input("in.select", &[k, grid.directions.len()]);
            let picked = g.matmul(select, cls_out)?;
            let points = point_decode(&mut g, picked, &head)?;
            let target = g.input("in.target", &[k]);
            let loss = bce_loss(&mut g, points, target)?;
            (TaskOutput::SparsePoint { points }, loss)
        }
        (Task::Ssl, DecoderKind::SparsePoint) => {
            return Err(NumError::Invalid(
                "point decoding needs per-episode query directions; use it with the box task".into(),
            ));
        }
        (Task::Ssl, DecoderKind::Horizontal) => {
            let widths = [d, cfg.horizontal_rows];
            let head = declare_horizontal_head(&mut g, "dec.horiz", d, &widths);
            let map = horizontal_decode(&mut g, cls_out, &head)?;
            let shape = g.shape_of(map).to_vec();
            let target = g.input("in.target", &shape);
            let loss = bce_loss(&mut g, map, target)?;
            (TaskOutput::Horizontal(map), loss)
        }
        (Task::Asl, DecoderKind::Horizontal) => {
            return Err(NumError::Invalid("horizontal decoding is an audio-task variant".into()));
        }
    };

    Ok(TaskModel {
        cfg: cfg.clone(),
        scene: scene.clone(),
        graph: g,
        grid,
        tokens,
        loss,
        output,
        audio_window,
    })
}

/// Seeded initialization of every parameter the model graph declares.
pub fn init_params(model: &TaskModel, rng: &mut ChaCha8Rng) -> ParamStore {
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    store.init_normal("cls.w", &[d, 3], 0.5, rng);
    store.init_const("cls.b", &[d], 0.0);

    if cfg.audio {
        let ch = if cfg.multi_channel { model.scene.mic.axes.len() } else { 1 };
        let m = ch * model.scene.bins * cfg.patch_frames;
        store.init_normal("emb.audio.w", &[m, d], 1.0 / (m as f64).sqrt(), rng);
        store.init_const("emb.audio.b", &[d], 0.0);
    }
    if cfg.visual {
        let widths = [VisualExtractor::DEFAULT_WIDTHS[0], VisualExtractor::DEFAULT_WIDTHS[1], d];
        let mut cin = 1;
        for (k, &cout) in widths.iter().enumerate() {
            let std = 1.0 / (9.0 * cin as f64).sqrt();
            store.init_normal(&format!("emb.visual.conv{k}.w"), &[9 * cin, cout], std, rng);
            store.init_const(&format!("emb.visual.conv{k}.b"), &[cout], 0.0);
            cin = cout;
        }
    }
    if cfg.behavior {
        store.init_normal("emb.beh.w", &[9, d], 0.5, rng);
        store.init_normal("emb.beh.kb", &[3, d], 0.5, rng);
        store.init_normal("emb.beh.t", &[cfg.time_bins, d], 0.5, rng);
    }

    let mut modalities = vec![Modality::Cls];
    if cfg.audio {
        modalities.push(Modality::Audio);
    }
    if cfg.visual {
        modalities.push(Modality::Visual);
    }
    if cfg.behavior {
        modalities.push(Modality::Behavior);
    }
    init_encoder_params(&mut store, "enc", &cfg.encoder_config(), &modalities, rng);

    match &model.output {
        TaskOutput::SparseGrid(_) => init_mlp_head(&mut store, "dec.grid", d, 2 * d, rng),
        TaskOutput::SparsePoint { .. } => init_mlp_head(&mut store, "dec.point", d, 2 * d, rng),
        TaskOutput::Dense(_) | TaskOutput::Fov { .. } => init_dense_head(&mut store, "dec.dense", d, d, rng),
        TaskOutput::Horizontal(_) => {
            init_horizontal_head(&mut store, "dec.horiz", d, &[d, cfg.horizontal_rows], rng)
        }
        TaskOutput::Behavior(heads) => {
            for (kind, h, _) in heads {
                let ms = (h * 1000.0).round() as usize;
                init_mlp_head(&mut store, &format!("dec.beh.{}.{ms}", kind.name()), d, 2 * d, rng);
            }
        }
    }
    store
}

impl TaskModel {
    /// World direction at the center of an episode's FOV box.
    pub fn box_direction(&self, ep: &Episode, b: &crate::synth::FovBox) -> Result<UnitVec3, NumError> {
        let pose = ep
            .frame_pose
            .as_ref()
            .ok_or_else(|| NumError::Invalid("episode has no frame pose".into()))?;
        let fi = (b.i0 + b.i1) as f64 / 2.0 + 0.5;
        let fj = (b.j0 + b.j1) as f64 / 2.0 + 0.5;
        pose.rotation.rotate(crate::warp::fov_ray(fi, fj, &self.scene.cam))
    }

    fn nearest_cell(&self, dir: &UnitVec3) -> usize {
        let mut best = 0;
        let mut ang = f64::INFINITY;
        for (i, p) in self.grid.directions.iter().enumerate() {
            let a = great_circle_angle(p, dir);
            if a < ang {
                ang = a;
                best = i;
            }
        }
        best
    }

    /// Input arrays for one episode: modality features, per-episode token
    /// position features, sampling/selection matrices, and targets.
    pub fn bind_episode(&self, ep: &Episode) -> Result<Inputs, NumError> {
        let cfg = &self.cfg;
        if ep.task != cfg.task {
            return Err(NumError::Invalid(format!(
                "episode task '{}' does not match config task '{}'",
                ep.task.name(),
                cfg.task.name()
            )));
        }
        let mut inputs = Inputs::new();
        let mut positions: Vec<UnitVec3> = self.grid.directions.clone();
        let active = ep.active_dirs();

        if cfg.audio {
            let win = windowed(&ep.spectrogram, self.audio_window)?;
            let win = if cfg.multi_channel { win } else { win.to_mono() };
            inputs.insert("in.audio".into(), win.patch_matrix(cfg.patch_frames)?);
            positions.extend(win.patch_positions(cfg.patch_frames, cfg.world_locked)?);
        }
        if cfg.visual {
            let frame = ep
                .frame
                .as_ref()
                .ok_or_else(|| NumError::Invalid("config uses visual tokens but episode has no frame".into()))?;
            let pose = ep.frame_pose.as_ref().expect("frame implies frame pose");
            inputs.insert("in.frame".into(), image_array(frame)?);
            let cam = &self.scene.cam;
            positions.extend(visual_token_positions(cam, pose, cam.height / 8, cam.width / 8, cfg.world_locked)?);
        }
        if cfg.behavior {
            let data = behavior_features(&ep.behavior_history, cfg.time_bins, cfg.bin_seconds)?;
            inputs.insert("in.beh.dir".into(), data.kind_dir);
            inputs.insert("in.beh.kind".into(), data.kind_onehot);
            inputs.insert("in.beh.time".into(), data.time_onehot);
            positions.extend(data.positions);
        }
        if cfg.spatial_bias {
            inputs.insert("enc.spatial".into(), spatial_features(&positions));
        }

        match &self.output {
            TaskOutput::SparseGrid(_) => {
                inputs.insert(
                    "in.target".into(),
                    sparse_grid_target(cfg.grid_rows, cfg.grid_cols, &active),
                );
            }
            TaskOutput::Dense(_) => {
                inputs.insert(
                    "in.target".into(),
                    dense_target(4 * cfg.grid_rows, 4 * cfg.grid_cols, &active, cfg.target_radius_deg),
                );
            }
            TaskOutput::Horizontal(node) => {
                let shape = self.graph.shape_of(*node).to_vec();
                inputs.insert(
                    "in.target".into(),
                    dense_target(shape[0], shape[1], &active, cfg.target_radius_deg),
                );
            }
            TaskOutput::Fov { .. } => {
                let pose = ep
                    .frame_pose
                    .as_ref()
                    .ok_or_else(|| NumError::Invalid("FOV decoding needs an episode frame pose".into()))?;
                let cam = &self.scene.cam;
                inputs.insert(
                    "in.sampling".into(),
                    fov_sampling_matrix(cam, pose, 4 * cfg.grid_rows, 4 * cfg.grid_cols)?,
                );
                inputs.insert("in.target".into(), fov_target(cam, pose, &active, cfg.target_radius_deg)?);
            }
            TaskOutput::SparsePoint { .. } => {
                let k = self.scene.n_sources.max(1);
                let n_c = self.grid.directions.len();
                let mut sel = Array::zeros(&[k, n_c]);
                let mut target = Array::zeros(&[k]);
                for b in &ep.boxes {
                    let dir = self.box_direction(ep, b)?;
                    sel.data_mut()[b.source * n_c + self.nearest_cell(&dir)] = 1.0;
                    if ep.sources[b.source].active.first().copied().unwrap_or(false) {
                        target.data_mut()[b.source] = 1.0;
                    }
                }
                inputs.insert("in.select".into(), sel);
                inputs.insert("in.target".into(), target);
            }
            TaskOutput::Behavior(heads) => {
                for (kind, h, _) in heads {
                    let ms = (h * 1000.0).round() as usize;
                    let label = ep
                        .future
                        .iter()
                        .find(|f| f.kind == *kind && (f.horizon_s - h).abs() < 1e-9)
                        .ok_or_else(|| {
                            NumError::Invalid(format!("episode lacks a {} label at {ms} ms", kind.name()))
                        })?;
                    inputs.insert(
                        format!("in.target.{}.{ms}", kind.name()),
                        sparse_grid_target(cfg.grid_rows, cfg.grid_cols, &[label.direction]),
                    );
                }
            }
        }
        Ok(inputs)
    }
}
