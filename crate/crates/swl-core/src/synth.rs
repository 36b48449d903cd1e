//! Synthetic egocentric scene generator. Episodes pair a smooth head-pose
//! trajectory with a multichannel spectrogram rendered through a parametric
//! cardioid microphone array, an optional camera frame with Gaussian source
//! blobs, and behavior histories, all labeled with world-frame directions.
//!
//! Audio cues are purely head-frame while labels are world-frame, so
//! recovering the labels requires the pose trajectory by construction.
//! Every episode is a pure function of its scene description and seed.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::geom::{UnitQuaternion, UnitVec3};
use crate::numcore::NumError;
use crate::tokens::{BehaviorKind, BehaviorRecord, Spectrogram};
use crate::warp::{head_dir_to_fov, CameraModel, Image, Pose};

/// Per-channel gain of a cardioid-power lobe at angle theta from the channel
/// axis: ((1 + cos theta) / 2)^kappa.
pub fn cardioid_gain(cos_theta: f64, kappa: f64) -> f64 {
    (0.5 * (1.0 + cos_theta)).max(0.0).powf(kappa)
}

/// Microphone array model: unit channel axes, a shared lobe exponent, and an
/// additive noise level.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MicModel {
    pub axes: Vec<UnitVec3>,
    pub kappa: f64,
    pub noise: f64,
}

impl MicModel {
    /// Four cardioid channels pointing at the vertices of a tetrahedron.
    pub fn tetrahedral(kappa: f64, noise: f64) -> MicModel {
        let s = 1.0 / 3f64.sqrt();
        let axes = [
            (s, s, s),
            (s, -s, -s),
            (-s, s, -s),
            (-s, -s, s),
        ];
        MicModel {
            axes: axes
                .iter()
                .map(|&(x, y, z)| UnitVec3::normalize(x, y, z).expect("unit axis"))
                .collect(),
            kappa,
            noise,
        }
    }

    /// Gain of channel `c` for a head-frame direction.
    pub fn gain(&self, c: usize, head_dir: &UnitVec3) -> f64 {
        cardioid_gain(self.axes[c].dot(head_dir), self.kappa)
    }
}

/// One audio source: a fixed world direction, a frequency band, a level, and
/// a per-frame activity flag.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Source {
    pub direction: UnitVec3,
    /// Half-open bin range [lo, hi) this source occupies.
    pub band: (usize, usize),
    pub level: f64,
    pub active: Vec<bool>,
}

/// Axis-aligned FOV pixel box, inclusive bounds.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FovBox {
    pub i0: usize,
    pub j0: usize,
    pub i1: usize,
    pub j1: usize,
    /// Index of the source this box covers.
    pub source: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Task {
    Asl,
    Ssl,
    Behavior,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task, NumError> {
        match s {
            "asl" => Ok(Task::Asl),
            "ssl" => Ok(Task::Ssl),
            "behavior" => Ok(Task::Behavior),
            other => Err(NumError::Invalid(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Asl => "asl",
            Task::Ssl => "ssl",
            Task::Behavior => "behavior",
        }
    }
}

/// Everything that determines an episode besides the task.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub n_sources: usize,
    /// Spectrogram frames per episode window.
    pub frames: usize,
    /// Seconds per spectrogram frame.
    pub frame_dt: f64,
    /// Frequency bins.
    pub bins: usize,
    pub mic: MicModel,
    pub cam: CameraModel,
    /// Higher values mean slower head motion; infinity pins the pose to
    /// identity.
    pub smoothness: f64,
    /// Cap on the angle between consecutive poses, degrees.
    pub max_step_deg: f64,
    /// Brightness of inactive sources relative to active ones (1.0 makes
    /// activity visually undecidable).
    pub visual_ambiguity: f64,
    /// Background noise level of the rendered frame.
    pub visual_noise: f64,
    /// Probability that a source is active over the window.
    pub activity_p: f64,
    /// Restrict source directions to the equator (azimuth-only variant).
    pub equatorial_sources: bool,
    pub seed: u64,
}

impl SceneSpec {
    /// Small deterministic scene: a 200 ms window at 20 ms frames, 8 bins,
    /// a tetrahedral array, and a 90 x 60 degree camera at 32 x 24 pixels.
    pub fn easy(n_sources: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            n_sources,
            frames: 10,
            frame_dt: 0.02,
            bins: 8,
            mic: MicModel::tetrahedral(2.0, 0.0),
            cam: CameraModel::new(90.0, 60.0, 32, 24).expect("valid camera"),
            smoothness: 1.0,
            max_step_deg: 6.0,
            visual_ambiguity: 0.25,
            visual_noise: 0.02,
            activity_p: 0.7,
            equatorial_sources: false,
            seed,
        }
    }

    fn validate(&self, task: Task) -> Result<(), NumError> {
        if self.mic.axes.is_empty() {
            return Err(NumError::Invalid("scene needs at least one microphone channel".into()));
        }
        if task != Task::Behavior && self.n_sources == 0 {
            return Err(NumError::Invalid("localization tasks need at least one source".into()));
        }
        if self.frames == 0 || self.bins == 0 {
            return Err(NumError::Invalid("scene needs frames >= 1 and bins >= 1".into()));
        }
        if self.frame_dt <= 0.0 {
            return Err(NumError::Invalid("frame_dt must be positive".into()));
        }
        Ok(())
    }
}

/// A future behavior label at a fixed horizon past the episode's reference
/// time.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FutureLabel {
    pub kind: BehaviorKind,
    pub horizon_s: f64,
    pub direction: UnitVec3,
}

/// One fully labeled synthetic sample.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Episode {
    pub task: Task,
    pub poses: Vec<Pose>,
    pub spectrogram: Spectrogram,
    /// Camera frame at the window-center pose; absent for audio-only and
    /// behavior episodes.
    pub frame: Option<Image>,
    /// Pose used to render `frame`.
    pub frame_pose: Option<Pose>,
    pub behavior_history: Vec<BehaviorRecord>,
    pub sources: Vec<Source>,
    pub boxes: Vec<FovBox>,
    pub future: Vec<FutureLabel>,
}

impl Episode {
    /// World directions of sources active over the window.
    pub fn active_dirs(&self) -> Vec<UnitVec3> {
        self.sources
            .iter()
            .filter(|s| s.active.iter().filter(|a| **a).count() * 2 > s.active.len())
            .map(|s| s.direction)
            .collect()
    }
}

/// Smooth random pose trajectory: T poses at `dt` spacing, from integrated
/// band-limited angular velocity whose amplitude scales as 1/smoothness.
/// Consecutive poses differ by at most `max_step_deg`.
pub fn gen_trajectory(
    seed: u64,
    t_count: usize,
    smoothness: f64,
    dt: f64,
    max_step_deg: f64,
) -> Result<Vec<Pose>, NumError> {
    if t_count == 0 {
        return Err(NumError::Invalid("trajectory needs at least one pose".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    // Angular velocity per axis: a short sum of sinusoids with random
    // frequency and phase, so the integrated pose path is C-infinity.
    const N_COMP: usize = 4;
    let mut freqs = [[0.0; N_COMP]; 3];
    let mut phases = [[0.0; N_COMP]; 3];
    let mut amps = [[0.0; N_COMP]; 3];
    let amp_scale = if smoothness.is_finite() && smoothness > 0.0 {
        1.2 / smoothness
    } else {
        0.0
    };
    for k in 0..3 {
        // Natural head motion is dominated by yaw and pitch; keep roll
        // (rotation about the forward axis) small.
        let axis_scale = if k == 0 { 0.2 } else { 1.0 };
        for m in 0..N_COMP {
            freqs[k][m] = rng.gen_range(0.1..1.5);
            phases[k][m] = rng.gen_range(0.0..std::f64::consts::TAU);
            amps[k][m] = axis_scale * amp_scale * rng.gen_range(0.2..1.0);
        }
    }
    let omega = |k: usize, t: f64| -> f64 {
        (0..N_COMP)
            .map(|m| amps[k][m] * (std::f64::consts::TAU * freqs[k][m] * t + phases[k][m]).sin())
            .sum()
    };
    let max_step = max_step_deg.to_radians();
    let mut out = Vec::with_capacity(t_count);
    // Observation windows are short relative to head motion, so without a
    // random start the head frame would stay near the world frame for the
    // whole episode. Randomize the initial heading (full yaw, moderate
    // pitch, slight roll); infinite smoothness keeps the pose pinned at
    // identity.
    let mut q = UnitQuaternion::IDENTITY;
    if amp_scale > 0.0 {
        let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        let pitch = rng.gen_range(-0.5..0.5);
        let roll = rng.gen_range(-0.1..0.1);
        let left = UnitVec3 { x: 0.0, y: 1.0, z: 0.0 };
        q = UnitQuaternion::from_axis_angle(UnitVec3::UP, yaw)
            .mul(&UnitQuaternion::from_axis_angle(left, pitch))
            .mul(&UnitQuaternion::from_axis_angle(UnitVec3::FORWARD, roll));
    }
    for i in 0..t_count {
        let t = i as f64 * dt;
        out.push(Pose {
            rotation: q,
            timestamp: t,
            translation: [0.0; 3],
        });
        let w = (omega(0, t), omega(1, t), omega(2, t));
        let mag = (w.0 * w.0 + w.1 * w.1 + w.2 * w.2).sqrt();
        if mag * dt > 1e-12 {
            let angle = (mag * dt).min(max_step);
            let axis = UnitVec3::normalize(w.0, w.1, w.2)?;
            q = UnitQuaternion::from_axis_angle(axis, angle).mul(&q);
        }
    }
    Ok(out)
}

/// Draw world directions, frequency bands, levels, and window activity for
/// the scene's sources. Bands are disjoint when the bin budget permits, so
/// concurrent sources stay separable in frequency. At least one source is
/// active (resampled if the activity draw leaves none).
pub fn gen_sources(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Source> {
    let n = spec.n_sources;
    if n == 0 {
        return Vec::new();
    }
    let band_w = (spec.bins / n).max(1);
    let mut sources = Vec::with_capacity(n);
    for s in 0..n {
        let direction = if spec.equatorial_sources {
            let lon: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            UnitVec3::normalize(lon.cos(), lon.sin(), 0.0).expect("unit sample")
        } else {
            let v: [f64; 3] = UnitSphere.sample(rng);
            UnitVec3::normalize(v[0], v[1], v[2]).expect("unit sample")
        };
        let lo = (s * band_w).min(spec.bins - 1);
        let hi = if s == n - 1 { spec.bins } else { (lo + band_w).min(spec.bins) };
        sources.push(Source {
            direction,
            band: (lo, hi),
            level: rng.gen_range(0.7..1.0),
            active: Vec::new(),
        });
    }
    loop {
        for src in sources.iter_mut() {
            let on = rng.gen_bool(spec.activity_p.clamp(0.0, 1.0));
            src.active = vec![on; spec.frames];
        }
        if sources.iter().any(|s| s.active[0]) {
            break;
        }
    }
    sources
}

/// Render the multichannel magnitude spectrogram of the sources as heard
/// through the microphone array along the pose trajectory. Channel gains
/// follow the head-frame angle between each source and the channel axis.
pub fn render_audio(
    spec: &SceneSpec,
    poses: &[Pose],
    sources: &[Source],
    rng: &mut ChaCha8Rng,
) -> Result<Spectrogram, NumError> {
    if spec.mic.axes.is_empty() {
        return Err(NumError::Invalid("render_audio needs at least one channel".into()));
    }
    if poses.len() != spec.frames {
        return Err(NumError::Invalid(format!(
            "{} poses for {} spectrogram frames",
            poses.len(),
            spec.frames
        )));
    }
    let c = spec.mic.axes.len();
    let mut data = vec![0.0; c * spec.bins * spec.frames];
    for (t, pose) in poses.iter().enumerate() {
        let inv = pose.rotation.conjugate();
        for src in sources {
            if !src.active[t] {
                continue;
            }
            let head_dir = inv.rotate(src.direction)?;
            for ch in 0..c {
                let g = spec.mic.gain(ch, &head_dir);
                for h in src.band.0..src.band.1 {
                    data[(ch * spec.bins + h) * spec.frames + t] += g * src.level;
                }
            }
        }
    }
    if spec.mic.noise > 0.0 {
        for v in data.iter_mut() {
            *v += spec.mic.noise * rng.gen_range(0.0..1.0);
        }
    }
    let frame_poses = poses.iter().map(|p| p.rotation).collect();
    Spectrogram::new(c, spec.bins, spec.frames, data, frame_poses)
}

/// Gaussian blob footprint in pixels.
const BLOB_SIGMA: f64 = 1.5;

/// Render the camera frame at a pose: one Gaussian blob per source inside
/// the frustum (full brightness when active, `visual_ambiguity` otherwise)
/// over uniform background noise. Returns the frame and a pixel box around
/// each visible blob.
pub fn render_visual(
    spec: &SceneSpec,
    pose: &Pose,
    sources: &[Source],
    rng: &mut ChaCha8Rng,
) -> (Image, Vec<FovBox>) {
    let cam = &spec.cam;
    let mut img = Image::new(cam.height, cam.width, 1);
    if spec.visual_noise > 0.0 {
        for v in img.data_mut().iter_mut() {
            *v = spec.visual_noise * rng.gen_range(0.0..1.0);
        }
    }
    let inv = pose.rotation.conjugate();
    let mut boxes = Vec::new();
    for (si, src) in sources.iter().enumerate() {
        let head_dir = inv.rotate_unchecked(src.direction);
        let Some((fi, fj)) = head_dir_to_fov(&head_dir, cam) else {
            continue;
        };
        let bright = if src.active.first().copied().unwrap_or(false) {
            1.0
        } else {
            spec.visual_ambiguity
        };
        let r = (3.0 * BLOB_SIGMA).ceil() as isize;
        let (ci, cj) = (fi.round() as isize, fj.round() as isize);
        for i in (ci - r).max(0)..=(ci + r).min(cam.height as isize - 1) {
            for j in (cj - r).max(0)..=(cj + r).min(cam.width as isize - 1) {
                let d2 = (i as f64 - fi).powi(2) + (j as f64 - fj).powi(2);
                let v = bright * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                let cur = img.get(i as usize, j as usize, 0);
                img.set(i as usize, j as usize, 0, (cur + v).min(1.0));
            }
        }
        let b = (2.0 * BLOB_SIGMA).ceil() as isize;
        boxes.push(FovBox {
            i0: (ci - b).max(0) as usize,
            j0: (cj - b).max(0) as usize,
            i1: (ci + b).min(cam.height as isize - 1) as usize,
            j1: (cj + b).min(cam.width as isize - 1) as usize,
            source: si,
        });
    }
    (img, boxes)
}

/// Behavior history sampling step and context length, seconds.
pub const BEHAVIOR_STEP_S: f64 = 0.1;
pub const BEHAVIOR_CONTEXT_S: f64 = 0.7;
/// Anticipation horizons, seconds.
pub const BEHAVIOR_HORIZONS_S: [f64; 3] = [0.3, 0.5, 0.7];

fn heading_of(q: &UnitQuaternion) -> UnitVec3 {
    q.rotate_unchecked(UnitVec3::FORWARD)
}

/// Smoothed heading: average of the orientation direction over the trailing
/// window ending at `idx`, renormalized.
fn smoothed_heading(poses: &[Pose], idx: usize, trail: usize) -> UnitVec3 {
    let lo = idx.saturating_sub(trail);
    let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
    for p in &poses[lo..=idx] {
        let d = heading_of(&p.rotation);
        x += d.x;
        y += d.y;
        z += d.z;
    }
    UnitVec3::normalize(x, y, z).unwrap_or(UnitVec3::FORWARD)
}

/// Gaze at a pose index: the orientation direction deflected by a smooth
/// time-varying offset rotation.
fn gaze_of(poses: &[Pose], idx: usize, offset_axis: &UnitVec3, offset_amp: f64, offset_freq: f64) -> UnitVec3 {
    let t = poses[idx].timestamp;
    let angle = offset_amp * (std::f64::consts::TAU * offset_freq * t).sin();
    let dq = UnitQuaternion::from_axis_angle(*offset_axis, angle);
    dq.mul(&poses[idx].rotation).rotate_unchecked(UnitVec3::FORWARD)
}

/// Generate one fully labeled episode. The pose window covers 0 to the
/// window length; behavior episodes extend the trajectory far enough past
/// the reference time to read the future labels off it directly.
pub fn gen_episode(spec: &SceneSpec, task: Task) -> Result<Episode, NumError> {
    spec.validate(task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let traj_seed = rng.gen::<u64>();

    // With the default 20 ms frames each 100 ms behavior step is an integer
    // number of trajectory steps, so history and future labels are exact
    // trajectory samples instead of interpolations.
    let step = (BEHAVIOR_STEP_S / spec.frame_dt).round() as usize;
    if task == Task::Behavior && (step == 0 || (BEHAVIOR_STEP_S / spec.frame_dt - step as f64).abs() > 1e-9) {
        return Err(NumError::Invalid(format!(
            "frame_dt {} does not divide the {} s behavior step",
            spec.frame_dt, BEHAVIOR_STEP_S
        )));
    }

    let (t_count, now_idx) = if task == Task::Behavior {
        // Context plus horizon on both sides of the reference time.
        let half = (BEHAVIOR_CONTEXT_S / spec.frame_dt).round() as usize;
        (2 * half + 1, half)
    } else {
        (spec.frames, spec.frames - 1)
    };
    let poses = gen_trajectory(traj_seed, t_count, spec.smoothness, spec.frame_dt, spec.max_step_deg)?;
    let sources = gen_sources(spec, &mut rng);

    // Audio always covers the trailing window ending at the reference time.
    let win_lo = now_idx + 1 - spec.frames.min(now_idx + 1);
    let window = &poses[win_lo..=now_idx];
    let window = if window.len() == spec.frames {
        window.to_vec()
    } else {
        // Short trajectories repeat the first pose to fill the window.
        let mut w = vec![poses[0]; spec.frames - window.len()];
        w.extend_from_slice(window);
        w
    };
    let spectrogram = render_audio(spec, &window, &sources, &mut rng)?;

    let (frame, frame_pose, boxes) = if task == Task::Asl {
        let center = &poses[t_count / 2];
        let (img, boxes) = render_visual(spec, center, &sources, &mut rng);
        (Some(img), Some(*center), boxes)
    } else {
        (None, None, Vec::new())
    };

    let (behavior_history, future) = if task == Task::Behavior {
        let v: [f64; 3] = UnitSphere.sample(&mut rng);
        let offset_axis = UnitVec3::normalize(v[0], v[1], v[2])?;
        let offset_amp = rng.gen_range(0.05..0.25);
        let offset_freq = rng.gen_range(0.3..1.0);
        let trail = (0.2 / spec.frame_dt).round() as usize;
        let n_steps = (BEHAVIOR_CONTEXT_S / BEHAVIOR_STEP_S).round() as usize;
        let mut hist = Vec::new();
        for s in 0..=n_steps {
            let offset = s as f64 * BEHAVIOR_STEP_S;
            let idx = now_idx - s * step;
            for kind in BehaviorKind::ALL {
                let direction = match kind {
                    BehaviorKind::Gaze => gaze_of(&poses, idx, &offset_axis, offset_amp, offset_freq),
                    BehaviorKind::Orientation => heading_of(&poses[idx].rotation),
                    BehaviorKind::Trajectory => smoothed_heading(&poses, idx, trail),
                };
                hist.push(BehaviorRecord {
                    kind,
                    direction,
                    time_offset: offset,
                });
            }
        }
        let mut fut = Vec::new();
        for &h in &BEHAVIOR_HORIZONS_S {
            let idx = now_idx + (h / spec.frame_dt).round() as usize;
            for kind in BehaviorKind::ALL {
                let direction = match kind {
                    BehaviorKind::Gaze => gaze_of(&poses, idx, &offset_axis, offset_amp, offset_freq),
                    BehaviorKind::Orientation => heading_of(&poses[idx].rotation),
                    BehaviorKind::Trajectory => smoothed_heading(&poses, idx, trail),
                };
                fut.push(FutureLabel {
                    kind,
                    horizon_s: h,
                    direction,
                });
            }
        }
        (hist, fut)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(Episode {
        task,
        poses,
        spectrogram,
        frame,
        frame_pose,
        behavior_history,
        sources,
        boxes,
        future,
    })
}

const DATASET_MAGIC: &str = "SWLDATA v1";

/// Manifest stored as one JSON text line after the magic line.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub seed: u64,
    pub episodes: usize,
    pub scene: SceneSpec,
}

/// Generate `count` episodes with per-episode seeds derived from the base
/// seed.
pub fn gen_dataset(spec: &SceneSpec, task: Task, count: usize) -> Result<Vec<Episode>, NumError> {
    let mut out = Vec::with_capacity(count);
    for e in 0..count {
        let mut s = spec.clone();
        s.seed = spec.seed.wrapping_add(e as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
        out.push(gen_episode(&s, task)?);
    }
    Ok(out)
}

/// Write a dataset: magic line, JSON manifest line, then each episode as an
/// 8-byte little-endian length prefix plus its binary encoding.
pub fn write_dataset<W: Write>(w: &mut W, manifest: &DatasetManifest, episodes: &[Episode]) -> Result<(), NumError> {
    if manifest.episodes != episodes.len() {
        return Err(NumError::Invalid(format!(
            "manifest claims {} episodes, got {}",
            manifest.episodes,
            episodes.len()
        )));
    }
    let io_err = |e: std::io::Error| NumError::Invalid(format!("dataset write: {e}"));
    writeln!(w, "{DATASET_MAGIC}").map_err(io_err)?;
    let mline = serde_json::to_string(manifest).map_err(|e| NumError::Invalid(format!("manifest encode: {e}")))?;
    writeln!(w, "{mline}").map_err(io_err)?;
    for ep in episodes {
        let bytes = bincode::serialize(ep).map_err(|e| NumError::Invalid(format!("episode encode: {e}")))?;
        w.write_all(&(bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&bytes).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<(DatasetManifest, Vec<Episode>), NumError> {
    let io_err = |e: std::io::Error| NumError::Invalid(format!("dataset read: {e}"));
    let mut all = Vec::new();
    r.read_to_end(&mut all).map_err(io_err)?;
    let magic_end = all
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NumError::Invalid("dataset missing magic line".into()))?;
    if &all[..magic_end] != DATASET_MAGIC.as_bytes() {
        return Err(NumError::Invalid("not a dataset file (bad magic)".into()));
    }
    let mrel = all[magic_end + 1..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NumError::Invalid("dataset missing manifest line".into()))?;
    let mline = std::str::from_utf8(&all[magic_end + 1..magic_end + 1 + mrel])
        .map_err(|_| NumError::Invalid("manifest line is not UTF-8".into()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(mline).map_err(|e| NumError::Invalid(format!("manifest decode: {e}")))?;
    let mut pos = magic_end + 1 + mrel + 1;
    let mut episodes = Vec::with_capacity(manifest.episodes);
    for _ in 0..manifest.episodes {
        if pos + 8 > all.len() {
            return Err(NumError::Invalid("dataset truncated (length prefix)".into()));
        }
        let len = u64::from_le_bytes(all[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        if pos + len > all.len() {
            return Err(NumError::Invalid("dataset truncated (episode body)".into()));
        }
        let ep: Episode = bincode::deserialize(&all[pos..pos + len])
            .map_err(|e| NumError::Invalid(format!("episode decode: {e}")))?;
        episodes.push(ep);
        pos += len;
    }
    Ok((manifest, episodes))
}

pub fn write_dataset_file(path: &std::path::Path, manifest: &DatasetManifest, episodes: &[Episode]) -> Result<(), NumError> {
    let f = std::fs::File::create(path).map_err(|e| NumError::Invalid(format!("create {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, manifest, episodes)
}

pub fn read_dataset_file(path: &std::path::Path) -> Result<(DatasetManifest, Vec<Episode>), NumError> {
    let f = std::fs::File::open(path).map_err(|e| NumError::Invalid(format!("open {}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(f);
    read_dataset(&mut r)
}
