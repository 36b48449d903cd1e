//! Implicit spherical world-locking: build paired semantic/position token
//! sets from multisensory inputs. Semantics live on the computation graph
//! (so they train end-to-end); positions are world-frame unit vectors
//! computed host-side and consumed by the encoder's spatial bias.
//!
//! Token order is always [CLS..., audio..., visual..., behavior...].

use crate::geom::{SphereGrid, UnitQuaternion, UnitVec3};
use crate::numcore::{Array, Graph, NodeId, NumError, SliceDim};
use crate::warp::{fov_ray, CameraModel, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Cls,
    Audio,
    Visual,
    Behavior,
}

/// One modality block before assembly: an (N, d) semantics node plus one
/// world-frame position per token.
#[derive(Debug, Clone)]
pub struct TokenPart {
    pub semantics: NodeId,
    pub positions: Vec<UnitVec3>,
    pub modality: Modality,
}

/// The assembled multisensory token set.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub semantics: NodeId,
    pub positions: Vec<UnitVec3>,
    pub tags: Vec<Modality>,
    /// Token counts in order [CLS, audio, visual, behavior].
    pub counts: [usize; 4],
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index range occupied by a modality.
    pub fn range_of(&self, m: Modality) -> std::ops::Range<usize> {
        let order = [Modality::Cls, Modality::Audio, Modality::Visual, Modality::Behavior];
        let mut start = 0;
        for (i, om) in order.iter().enumerate() {
            if *om == m {
                return start..start + self.counts[i];
            }
            start += self.counts[i];
        }
        unreachable!()
    }

    /// Contiguous (start, len) ranges of the modalities actually present.
    pub fn present_ranges(&self) -> Vec<(Modality, std::ops::Range<usize>)> {
        let order = [Modality::Cls, Modality::Audio, Modality::Visual, Modality::Behavior];
        let mut out = Vec::new();
        let mut start = 0;
        for (i, m) in order.iter().enumerate() {
            if self.counts[i] > 0 {
                out.push((*m, start..start + self.counts[i]));
            }
            start += self.counts[i];
        }
        out
    }
}

/// Multichannel magnitude spectrogram with one pose reference per frame.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Spectrogram {
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
    /// Row-major (channel, bin, frame) magnitudes.
    data: Vec<f64>,
    pub frame_poses: Vec<UnitQuaternion>,
}

impl Spectrogram {
    pub fn new(
        channels: usize,
        bins: usize,
        frames: usize,
        data: Vec<f64>,
        frame_poses: Vec<UnitQuaternion>,
    ) -> Result<Spectrogram, NumError> {
        if data.len() != channels * bins * frames {
            return Err(NumError::Invalid(format!(
                "spectrogram data has {} values for {channels}x{bins}x{frames}",
                data.len()
            )));
        }
        if frame_poses.len() != frames {
            return Err(NumError::Invalid(format!(
                "{} pose references for {frames} frames",
                frame_poses.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(NumError::Invalid("spectrogram magnitudes must be finite and non-negative".into()));
        }
        Ok(Spectrogram {
            channels,
            bins,
            frames,
            data,
            frame_poses,
        })
    }

    pub fn get(&self, c: usize, h: usize, t: usize) -> f64 {
        self.data[(c * self.bins + h) * self.frames + t]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Average channels into a single-channel spectrogram (mono ablation).
    pub fn to_mono(&self) -> Spectrogram {
        let mut data = vec![0.0; self.bins * self.frames];
        for c in 0..self.channels {
            for i in 0..self.bins * self.frames {
                data[i] += self.data[c * self.bins * self.frames + i] / self.channels as f64;
            }
        }
        Spectrogram {
            channels: 1,
            bins: self.bins,
            frames: self.frames,
            data,
            frame_poses: self.frame_poses.clone(),
        }
    }

    /// Vertical patches: one row per token, each a flattened
    /// (channels x bins x patch_w) time slice.
    pub fn patch_matrix(&self, patch_w: usize) -> Result<Array, NumError> {
        if patch_w == 0 || self.frames % patch_w != 0 {
            return Err(NumError::Invalid(format!(
                "patch width {patch_w} does not divide {} frames",
                self.frames
            )));
        }
        let n = self.frames / patch_w;
        let m = self.channels * self.bins * patch_w;
        let mut out = Vec::with_capacity(n * m);
        for t in 0..n {
            for c in 0..self.channels {
                for h in 0..self.bins {
                    for f in 0..patch_w {
                        out.push(self.get(c, h, t * patch_w + f));
                    }
                }
            }
        }
        Array::from_vec(&[n, m], out)
    }

    /// World-locked position of each patch token: the forward axis rotated
    /// by the pose of the patch's center frame. With `world_locked` off the
    /// positions are pinned to the identity forward axis (pose ablation).
    pub fn patch_positions(&self, patch_w: usize, world_locked: bool) -> Result<Vec<UnitVec3>, NumError> {
        if patch_w == 0 || self.frames % patch_w != 0 {
            return Err(NumError::Invalid(format!(
                "patch width {patch_w} does not divide {} frames",
                self.frames
            )));
        }
        let n = self.frames / patch_w;
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            if world_locked {
                let q = &self.frame_poses[t * patch_w + patch_w / 2];
                out.push(q.rotate(UnitVec3::FORWARD)?);
            } else {
                out.push(UnitVec3::FORWARD);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BehaviorKind {
    Gaze,
    Orientation,
    Trajectory,
}

impl BehaviorKind {
    pub const ALL: [BehaviorKind; 3] = [BehaviorKind::Gaze, BehaviorKind::Orientation, BehaviorKind::Trajectory];

    pub fn index(self) -> usize {
        match self {
            BehaviorKind::Gaze => 0,
            BehaviorKind::Orientation => 1,
            BehaviorKind::Trajectory => 2,
        }
    }

    pub fn parse(s: &str) -> Result<BehaviorKind, NumError> {
        match s {
            "gaze" => Ok(BehaviorKind::Gaze),
            "orientation" => Ok(BehaviorKind::Orientation),
            "trajectory" => Ok(BehaviorKind::Trajectory),
            other => Err(NumError::Invalid(format!("unknown behavior kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BehaviorKind::Gaze => "gaze",
            BehaviorKind::Orientation => "orientation",
            BehaviorKind::Trajectory => "trajectory",
        }
    }
}

/// One behavioral observation: a world-frame unit direction with a time
/// offset (seconds into the past, non-negative).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BehaviorRecord {
    pub kind: BehaviorKind,
    pub direction: UnitVec3,
    pub time_offset: f64,
}

/// Host-side behavior features feeding `embed_behavior`: kind-gated
/// directions, kind one-hots, and time-bin one-hots.
#[derive(Debug, Clone)]
pub struct BehaviorData {
    /// (N_b, 9): the direction placed in the 3-column block of its kind.
    pub kind_dir: Array,
    /// (N_b, 3) kind one-hot.
    pub kind_onehot: Array,
    /// (N_b, n_bins) time-offset one-hot.
    pub time_onehot: Array,
    pub positions: Vec<UnitVec3>,
}

pub fn behavior_features(
    records: &[BehaviorRecord],
    n_time_bins: usize,
    bin_seconds: f64,
) -> Result<BehaviorData, NumError> {
    if n_time_bins == 0 || bin_seconds <= 0.0 {
        return Err(NumError::Invalid("time bins require n_time_bins >= 1 and bin_seconds > 0".into()));
    }
    let n = records.len();
    let mut kind_dir = Array::zeros(&[n, 9]);
    let mut kind_onehot = Array::zeros(&[n, 3]);
    let mut time_onehot = Array::zeros(&[n, n_time_bins]);
    let mut positions = Vec::with_capacity(n);
    for (i, rec) in records.iter().enumerate() {
        if rec.time_offset < 0.0 || !rec.time_offset.is_finite() {
            return Err(NumError::Invalid(format!(
                "behavior time offset {} must be finite and >= 0",
                rec.time_offset
            )));
        }
        let k = rec.kind.index();
        let d = &rec.direction;
        for (a, v) in [d.x, d.y, d.z].iter().enumerate() {
            kind_dir.data_mut()[i * 9 + k * 3 + a] = *v;
        }
        kind_onehot.data_mut()[i * 3 + k] = 1.0;
        let bin = ((rec.time_offset / bin_seconds) as usize).min(n_time_bins - 1);
        time_onehot.data_mut()[i * n_time_bins + bin] = 1.0;
        positions.push(*d);
    }
    Ok(BehaviorData {
        kind_dir,
        kind_onehot,
        time_onehot,
        positions,
    })
}

/// One learnable CLS token per grid direction: c_i = W_c p_i + b_c with
/// position p_i.
pub fn make_cls_tokens(
    g: &mut Graph,
    grid: &SphereGrid,
    w_c: NodeId,
    b_c: NodeId,
) -> Result<TokenPart, NumError> {
    let n = grid.directions.len();
    if n == 0 {
        return Err(NumError::Invalid("empty sphere grid".into()));
    }
    let sw = g.shape_of(w_c).to_vec();
    if sw.len() != 2 || sw[1] != 3 {
        return Err(NumError::ShapeMismatch {
            node: "make_cls_tokens".into(),
            detail: format!("W_c must be (d, 3), got {sw:?}"),
        });
    }
    let mut pos = Vec::with_capacity(n * 3);
    for p in &grid.directions {
        pos.extend_from_slice(&[p.x, p.y, p.z]);
    }
    let p = g.constant(Array::from_vec(&[n, 3], pos)?);
    let wt = g.transpose(w_c)?;
    let lin = g.matmul(p, wt)?;
    let semantics = g.add_row(lin, b_c)?;
    Ok(TokenPart {
        semantics,
        positions: grid.directions.clone(),
        modality: Modality::Cls,
    })
}

/// Audio patch tokens: a linear projection of flattened vertical patches
/// (rows of `patches`, see `Spectrogram::patch_matrix`), positioned at the
/// pose-rotated forward axis of each patch.
pub fn embed_audio(
    g: &mut Graph,
    patches: NodeId,
    w_a: NodeId,
    b_a: NodeId,
    positions: Vec<UnitVec3>,
) -> Result<TokenPart, NumError> {
    let sp = g.shape_of(patches).to_vec();
    if sp.len() != 2 || sp[0] != positions.len() {
        return Err(NumError::ShapeMismatch {
            node: "embed_audio".into(),
            detail: format!("{} patches vs {} positions", sp.first().copied().unwrap_or(0), positions.len()),
        });
    }
    let lin = g.matmul(patches, w_a)?;
    let semantics = g.add_row(lin, b_a)?;
    Ok(TokenPart {
        semantics,
        positions,
        modality: Modality::Audio,
    })
}

/// A stride-2 3x3 convolution with zero padding 1, composed from pad,
/// strided slice, concat, and matmul. Input (H, W, C_in), weight laid out
/// (9 C_in, C_out) with row index (di*3 + dj)*C_in + c, bias (C_out).
/// Output (ceil(H/2), ceil(W/2), C_out).
pub fn conv2d_s2(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumError> {
    let sx = g.shape_of(x).to_vec();
    if sx.len() != 3 {
        return Err(NumError::ShapeMismatch {
            node: "conv2d_s2".into(),
            detail: format!("input must be (H, W, C), got {sx:?}"),
        });
    }
    let (h, w_in, c) = (sx[0], sx[1], sx[2]);
    let sw = g.shape_of(w).to_vec();
    if sw.len() != 2 || sw[0] != 9 * c {
        return Err(NumError::ShapeMismatch {
            node: "conv2d_s2".into(),
            detail: format!("weight {sw:?} for 9*{c} taps"),
        });
    }
    let (ho, wo) = (h.div_ceil(2), w_in.div_ceil(2));
    // zero-pad spatially to (H+2, W+2, C)
    let zrow = g.constant(Array::zeros(&[1, w_in, c]));
    let xr = g.concat(&[zrow, x, zrow], 0)?;
    let zcol = g.constant(Array::zeros(&[h + 2, 1, c]));
    let xp = g.concat(&[zcol, xr, zcol], 1)?;
    // gather the nine taps as strided slabs and stack on the channel axis
    let mut slabs = Vec::with_capacity(9);
    for di in 0..3 {
        for dj in 0..3 {
            slabs.push(g.slice(
                xp,
                &[
                    SliceDim::strided(di, di + 2 * (ho - 1) + 1, 2),
                    SliceDim::strided(dj, dj + 2 * (wo - 1) + 1, 2),
                    SliceDim::all(c),
                ],
            )?);
        }
    }
    let cols = g.concat(&slabs, 2)?;
    let flat = g.reshape(cols, &[ho * wo, 9 * c])?;
    let mm = g.matmul(flat, w)?;
    let out = g.add_row(mm, b)?;
    g.reshape(out, &[ho, wo, sw[1]])
}

/// The visual feature extractor: three stride-2 conv layers with GELU
/// between them, mapping (H, W, 1) to an (H/8, W/8, d) token grid.
#[derive(Debug, Clone)]
pub struct VisualExtractor {
    pub weights: [(NodeId, NodeId); 3],
    pub widths: [usize; 3],
}

impl VisualExtractor {
    pub const DEFAULT_WIDTHS: [usize; 2] = [16, 32];

    /// Declare parameter nodes named `{prefix}.convK.{w,b}` with channel
    /// widths 16/32/d.
    pub fn declare(g: &mut Graph, prefix: &str, d: usize) -> VisualExtractor {
        let widths = [Self::DEFAULT_WIDTHS[0], Self::DEFAULT_WIDTHS[1], d];
        let mut cin = 1;
        let mut weights = Vec::new();
        for (k, &cout) in widths.iter().enumerate() {
            let w = g.param(&format!("{prefix}.conv{k}.w"), &[9 * cin, cout]);
            let b = g.param(&format!("{prefix}.conv{k}.b"), &[cout]);
            weights.push((w, b));
            cin = cout;
        }
        VisualExtractor {
            weights: [weights[0], weights[1], weights[2]],
            widths,
        }
    }

    pub fn apply(&self, g: &mut Graph, frame: NodeId) -> Result<NodeId, NumError> {
        let mut x = frame;
        for (k, (w, b)) in self.weights.iter().enumerate() {
            x = conv2d_s2(g, x, *w, *b)?;
            if k + 1 < self.weights.len() {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }
}

/// World-locked positions of an h x w visual token grid: each token sits at
/// its patch-center pixel ray under the frame's pose. With `world_locked`
/// off the positions are computed at the identity pose.
pub fn visual_token_positions(
    cam: &CameraModel,
    pose: &Pose,
    ho: usize,
    wo: usize,
    world_locked: bool,
) -> Result<Vec<UnitVec3>, NumError> {
    let mut out = Vec::with_capacity(ho * wo);
    let q = if world_locked { pose.rotation } else { UnitQuaternion::IDENTITY };
    for a in 0..ho {
        for b in 0..wo {
            let fi = cam.height as f64 / ho as f64 * (a as f64 + 0.5);
            let fj = cam.width as f64 / wo as f64 * (b as f64 + 0.5);
            out.push(q.rotate(fov_ray(fi, fj, cam))?);
        }
    }
    Ok(out)
}

/// Visual tokens: extractor features flattened to (N_v, d), positioned at
/// patch-center pixel rays under the pose.
pub fn embed_visual(
    g: &mut Graph,
    frame: NodeId,
    cam: &CameraModel,
    pose: &Pose,
    ext: &VisualExtractor,
    world_locked: bool,
) -> Result<TokenPart, NumError> {
    let sf = g.shape_of(frame).to_vec();
    if sf.len() != 3 || sf[0] != cam.height || sf[1] != cam.width {
        return Err(NumError::ShapeMismatch {
            node: "embed_visual".into(),
            detail: format!("frame {sf:?} vs camera {}x{}", cam.height, cam.width),
        });
    }
    if cam.height % 8 != 0 || cam.width % 8 != 0 {
        return Err(NumError::Invalid(format!(
            "extractor needs dimensions divisible by 8, got {}x{}",
            cam.height, cam.width
        )));
    }
    let feat = ext.apply(g, frame)?;
    let sfeat = g.shape_of(feat).to_vec();
    let (ho, wo, d) = (sfeat[0], sfeat[1], sfeat[2]);
    let semantics = g.reshape(feat, &[ho * wo, d])?;
    let positions = visual_token_positions(cam, pose, ho, wo, world_locked)?;
    Ok(TokenPart {
        semantics,
        positions,
        modality: Modality::Visual,
    })
}

/// Behavior tokens: kind-specific linear embedding of the direction plus a
/// learned time-offset embedding; position = the direction itself.
pub fn embed_behavior(
    g: &mut Graph,
    data_nodes: (NodeId, NodeId, NodeId),
    w_all: NodeId,
    b_all: NodeId,
    t_emb: NodeId,
    positions: Vec<UnitVec3>,
) -> Result<TokenPart, NumError> {
    let (kind_dir, kind_onehot, time_onehot) = data_nodes;
    let lin = g.matmul(kind_dir, w_all)?;
    let kb = g.matmul(kind_onehot, b_all)?;
    let tb = g.matmul(time_onehot, t_emb)?;
    let s1 = g.add(lin, kb)?;
    let semantics = g.add(s1, tb)?;
    if g.shape_of(semantics)[0] != positions.len() {
        return Err(NumError::ShapeMismatch {
            node: "embed_behavior".into(),
            detail: format!(
                "{} semantic rows vs {} positions",
                g.shape_of(semantics)[0],
                positions.len()
            ),
        });
    }
    Ok(TokenPart {
        semantics,
        positions,
        modality: Modality::Behavior,
    })
}

/// Concatenate modality blocks in CLS/audio/visual/behavior order.
pub fn assemble(
    g: &mut Graph,
    cls: TokenPart,
    audio: Option<TokenPart>,
    visual: Option<TokenPart>,
    behavior: Option<TokenPart>,
) -> Result<TokenSet, NumError> {
    let expect = [
        Modality::Cls,
        Modality::Audio,
        Modality::Visual,
        Modality::Behavior,
    ];
    let parts: Vec<TokenPart> = std::iter::once(Some(cls))
        .chain([audio, visual, behavior])
        .flatten()
        .collect();
    let d = g.shape_of(parts[0].semantics)[1];
    let mut counts = [0usize; 4];
    let mut positions = Vec::new();
    let mut tags = Vec::new();
    let mut nodes = Vec::new();
    let mut expect_at = 0;
    for part in &parts {
        let slot = expect.iter().position(|m| *m == part.modality).unwrap();
        if slot < expect_at {
            return Err(NumError::Invalid("token parts out of modality order".into()));
        }
        expect_at = slot;
        let s = g.shape_of(part.semantics).to_vec();
        if s.len() != 2 || s[1] != d {
            return Err(NumError::ShapeMismatch {
                node: "assemble".into(),
                detail: format!("part width {:?} vs d = {d}", s),
            });
        }
        if s[0] != part.positions.len() {
            return Err(NumError::ShapeMismatch {
                node: "assemble".into(),
                detail: format!("{} rows vs {} positions", s[0], part.positions.len()),
            });
        }
        counts[slot] += s[0];
        positions.extend_from_slice(&part.positions);
        tags.extend(std::iter::repeat(part.modality).take(s[0]));
        nodes.push(part.semantics);
    }
    let semantics = if nodes.len() == 1 {
        nodes[0]
    } else {
        g.concat(&nodes, 0)?
    };
    Ok(TokenSet {
        semantics,
        positions,
        tags,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::make_grid;
    use crate::numcore::{Executor, Inputs, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(g: &Graph, node: NodeId, params: &ParamStore) -> Array {
        let mut exec = Executor::new(g);
        exec.forward(g, params, &Inputs::new()).unwrap();
        exec.value(node).clone()
    }

    fn yaw_pose(deg: f64) -> Pose {
        Pose::from_rotation(UnitQuaternion::from_axis_angle(UnitVec3::UP, deg.to_radians()))
    }

    #[test]
    fn cls_tokens_zero_weight_collapse_to_bias() {
        let grid = make_grid(5, 10).unwrap();
        let mut g = Graph::new();
        let d = 4usize;
        let w = g.constant(Array::zeros(&[d, 3]));
        let bias = Array::from_vec(&[d], vec![0.1, -0.2, 0.3, 0.7]).unwrap();
        let b = g.constant(bias.clone());
        let cls = make_cls_tokens(&mut g, &grid, w, b).unwrap();
        assert_eq!(cls.positions.len(), 50);
        let sem = eval(&g, cls.semantics, &ParamStore::new());
        for row in sem.data().chunks(d) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn cls_antipodal_pairs_sum_to_twice_bias() {
        let grid = make_grid(4, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let d = 3usize;
        let wdata: Vec<f64> = (0..d * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bdata: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = g.constant(Array::from_vec(&[d, 3], wdata).unwrap());
        let b = g.constant(Array::from_vec(&[d], bdata.clone()).unwrap());
        let cls = make_cls_tokens(&mut g, &grid, w, b).unwrap();
        let sem = eval(&g, cls.semantics, &ParamStore::new());
        let mut tested = 0;
        for (i, p) in cls.positions.iter().enumerate() {
            for (j, q) in cls.positions.iter().enumerate() {
                if (p.x + q.x).abs() < 1e-9 && (p.y + q.y).abs() < 1e-9 && (p.z + q.z).abs() < 1e-9 {
                    for k in 0..d {
                        let s = sem.data()[i * d + k] + sem.data()[j * d + k];
                        assert!((s - 2.0 * bdata[k]).abs() < 1e-12);
                    }
                    tested += 1;
                }
            }
        }
        assert!(tested >= 8, "found only {tested} antipodal pairs");
    }

    fn test_spectrogram(channels: usize, frames: usize) -> Spectrogram {
        let bins = 3;
        let poses: Vec<UnitQuaternion> = (0..frames)
            .map(|t| UnitQuaternion::from_axis_angle(UnitVec3::UP, 0.02 * t as f64))
            .collect();
        let data: Vec<f64> = (0..channels * bins * frames).map(|i| (i % 7) as f64 * 0.1).collect();
        Spectrogram::new(channels, bins, frames, data, poses).unwrap()
    }

    #[test]
    fn audio_patch_counts_and_positions() {
        let spec = test_spectrogram(2, 30);
        let patches = spec.patch_matrix(2).unwrap();
        assert_eq!(patches.shape(), &[15, 2 * 3 * 2]);
        let pos = spec.patch_positions(2, true).unwrap();
        assert_eq!(pos.len(), 15);
        // center frame of patch t is 2t+1
        for (t, p) in pos.iter().enumerate() {
            let want = spec.frame_poses[2 * t + 1].rotate(UnitVec3::FORWARD).unwrap();
            assert!((p.x - want.x).abs() < 1e-12 && (p.y - want.y).abs() < 1e-12);
        }
        assert!(spec.patch_matrix(4).is_err(), "4 does not divide 30");
    }

    #[test]
    fn audio_zero_input_zero_bias_gives_zero_semantics() {
        let frames = 6;
        let poses = vec![UnitQuaternion::IDENTITY; frames];
        let spec = Spectrogram::new(1, 2, frames, vec![0.0; 2 * frames], poses).unwrap();
        let mut g = Graph::new();
        let pm = g.constant(spec.patch_matrix(1).unwrap());
        let w = g.constant(Array::filled(&[2, 4], 0.3));
        let b = g.constant(Array::zeros(&[4]));
        let pos = spec.patch_positions(1, true).unwrap();
        let tok = embed_audio(&mut g, pm, w, b, pos.clone()).unwrap();
        let sem = eval(&g, tok.semantics, &ParamStore::new());
        assert!(sem.data().iter().all(|v| *v == 0.0));
        // constant pose: all positions identical
        assert!(pos.iter().all(|p| (p.x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn without_pose_pins_audio_positions_forward() {
        let spec = test_spectrogram(2, 10);
        for p in spec.patch_positions(1, false).unwrap() {
            assert_eq!((p.x, p.y, p.z), (1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn conv_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w_in, cin, cout) = (6, 5, 2, 3);
        let xdata: Vec<f64> = (0..h * w_in * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wdata: Vec<f64> = (0..9 * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bdata: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Array::from_vec(&[h, w_in, cin], xdata.clone()).unwrap());
        let w = g.constant(Array::from_vec(&[9 * cin, cout], wdata.clone()).unwrap());
        let b = g.constant(Array::from_vec(&[cout], bdata.clone()).unwrap());
        let y = conv2d_s2(&mut g, x, w, b).unwrap();
        let got = eval(&g, y, &ParamStore::new());
        let (ho, wo) = (h.div_ceil(2), w_in.div_ceil(2));
        assert_eq!(got.shape(), &[ho, wo, cout]);
        for oi in 0..ho {
            for oj in 0..wo {
                for oc in 0..cout {
                    let mut acc = bdata[oc];
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let ii = (2 * oi + di) as isize - 1;
                            let jj = (2 * oj + dj) as isize - 1;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w_in as isize {
                                continue;
                            }
                            for c in 0..cin {
                                let xv = xdata[(ii as usize * w_in + jj as usize) * cin + c];
                                let wv = wdata[((di * 3 + dj) * cin + c) * cout + oc];
                                acc += xv * wv;
                            }
                        }
                    }
                    let gv = got.data()[(oi * wo + oj) * cout + oc];
                    assert!((gv - acc).abs() < 1e-12, "mismatch at {oi},{oj},{oc}");
                }
            }
        }
    }

    #[test]
    fn visual_token_grid_and_positions() {
        let cam = CameraModel::new(80.0, 80.0, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let ext = VisualExtractor::declare(&mut g, "vis", 8);
        let mut params = ParamStore::new();
        let mut cin = 1;
        for (k, cout) in [16usize, 32, 8].into_iter().enumerate() {
            params.init_normal(&format!("vis.conv{k}.w"), &[9 * cin, cout], 0.1, &mut rng);
            params.init_normal(&format!("vis.conv{k}.b"), &[cout], 0.1, &mut rng);
            cin = cout;
        }
        let fdata: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let frame = g.constant(Array::from_vec(&[32, 32, 1], fdata).unwrap());
        let tok = embed_visual(&mut g, frame, &cam, &Pose::IDENTITY, &ext, true).unwrap();
        assert_eq!(tok.positions.len(), 16);
        let sem = eval(&g, tok.semantics, &params);
        assert_eq!(sem.shape(), &[16, 8]);
        assert!(sem.data().iter().all(|v| v.is_finite()));
        // identity pose: positions are symmetric about the forward axis
        let mean = tok.positions.iter().fold([0.0f64; 3], |m, p| [m[0] + p.x, m[1] + p.y, m[2] + p.z]);
        assert!(mean[1].abs() < 1e-9 && mean[2].abs() < 1e-9);
        // yaw equivariance: positions rotate exactly with the pose
        let rotated = visual_token_positions(&cam, &yaw_pose(90.0), 4, 4, true).unwrap();
        for (p, r) in tok.positions.iter().zip(&rotated) {
            let want = yaw_pose(90.0).rotation.rotate(*p).unwrap();
            assert!((r.x - want.x).abs() < 1e-12 && (r.y - want.y).abs() < 1e-12 && (r.z - want.z).abs() < 1e-12);
        }
    }

    #[test]
    fn behavior_tokens_kinds_and_time_bins() {
        let d = 5usize;
        let dir = UnitVec3::from_lat_lon_deg(10.0, 20.0);
        let records = vec![
            BehaviorRecord { kind: BehaviorKind::Gaze, direction: dir, time_offset: 0.0 },
            BehaviorRecord { kind: BehaviorKind::Orientation, direction: dir, time_offset: 0.0 },
            BehaviorRecord { kind: BehaviorKind::Gaze, direction: dir, time_offset: 0.35 },
        ];
        let data = behavior_features(&records, 8, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let kd = g.constant(data.kind_dir.clone());
        let ko = g.constant(data.kind_onehot.clone());
        let to = g.constant(data.time_onehot.clone());
        let mut params = ParamStore::new();
        params.init_normal("beh.w", &[9, d], 0.5, &mut rng);
        params.init_normal("beh.b", &[3, d], 0.5, &mut rng);
        params.init_normal("beh.t", &[8, d], 0.5, &mut rng);
        let w = g.param("beh.w", &[9, d]);
        let b = g.param("beh.b", &[3, d]);
        let t = g.param("beh.t", &[8, d]);
        let tok = embed_behavior(&mut g, (kd, ko, to), w, b, t, data.positions.clone()).unwrap();
        let sem = eval(&g, tok.semantics, &params);
        // same direction, different kinds: equal positions, different semantics
        assert_eq!(data.positions[0].x, data.positions[1].x);
        let row = |i: usize| &sem.data()[i * d..(i + 1) * d];
        assert_ne!(row(0), row(1));
        // same kind and direction, different time bin: different semantics
        assert_ne!(row(0), row(2));
        // record 2 falls in bin 3
        assert_eq!(data.time_onehot.data()[2 * 8 + 3], 1.0);
    }

    #[test]
    fn empty_behavior_is_fine() {
        let data = behavior_features(&[], 4, 0.1).unwrap();
        assert_eq!(data.positions.len(), 0);
        assert_eq!(data.kind_dir.shape(), &[0, 9]);
    }

    #[test]
    fn assemble_counts_order_and_ranges() {
        let grid = make_grid(5, 10).unwrap();
        let mut g = Graph::new();
        let d = 4usize;
        let w = g.constant(Array::zeros(&[d, 3]));
        let b = g.constant(Array::zeros(&[d]));
        let cls = make_cls_tokens(&mut g, &grid, w, b).unwrap();
        let spec = test_spectrogram(2, 15);
        let pm = g.constant(spec.patch_matrix(1).unwrap());
        let wa = g.constant(Array::zeros(&[2 * 3, d]));
        let ba = g.constant(Array::zeros(&[d]));
        let audio = embed_audio(&mut g, pm, wa, ba, spec.patch_positions(1, true).unwrap()).unwrap();
        let vis_sem = g.constant(Array::zeros(&[16, d]));
        let visual = TokenPart {
            semantics: vis_sem,
            positions: vec![UnitVec3::FORWARD; 16],
            modality: Modality::Visual,
        };
        let beh_sem = g.constant(Array::zeros(&[6, d]));
        let behavior = TokenPart {
            semantics: beh_sem,
            positions: vec![UnitVec3::UP; 6],
            modality: Modality::Behavior,
        };
        let ts = assemble(&mut g, cls, Some(audio), Some(visual), Some(behavior)).unwrap();
        assert_eq!(ts.len(), 87);
        assert_eq!(ts.counts, [50, 15, 16, 6]);
        assert_eq!(ts.range_of(Modality::Visual), 65..81);
        assert_eq!(ts.tags[64], Modality::Audio);
        assert_eq!(ts.tags[65], Modality::Visual);
        // every position unit norm
        for p in &ts.positions {
            assert!((p.norm() - 1.0).abs() < 1e-9);
        }
        let sem = eval(&g, ts.semantics, &ParamStore::new());
        assert_eq!(sem.shape(), &[87, d]);
    }

    #[test]
    fn assemble_rejects_width_mismatch() {
        let grid = make_grid(2, 4).unwrap();
        let mut g = Graph::new();
        let w = g.constant(Array::zeros(&[4, 3]));
        let b = g.constant(Array::zeros(&[4]));
        let cls = make_cls_tokens(&mut g, &grid, w, b).unwrap();
        let bad = g.constant(Array::zeros(&[3, 5]));
        let part = TokenPart {
            semantics: bad,
            positions: vec![UnitVec3::FORWARD; 3],
            modality: Modality::Audio,
        };
        assert!(assemble(&mut g, cls, Some(part), None, None).is_err());
    }

    #[test]
    fn cls_only_assembly() {
        let grid = make_grid(5, 10).unwrap();
        let mut g = Graph::new();
        let w = g.constant(Array::zeros(&[4, 3]));
        let b = g.constant(Array::zeros(&[4]));
        let cls = make_cls_tokens(&mut g, &grid, w, b).unwrap();
        let ts = assemble(&mut g, cls, None, None, None).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts.counts, [50, 0, 0, 0]);
        assert_eq!(ts.present_ranges().len(), 1);
    }
}
