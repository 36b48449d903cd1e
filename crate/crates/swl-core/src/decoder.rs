//! Task decoders reading the encoded CLS tokens: pointwise MLP logits on
//! the sparse grid or on caller-chosen points, transposed-convolution
//! upsampling to a dense lat-lon map (with FOV readout by bilinear
//! sampling), and 1D upsampling of the equator row where output channels
//! become the vertical dimension.
//!
//! Dense maps use the sphere grid's row order (south at row 0); longitude
//! wraps circularly, latitude is zero-padded.

use crate::geom::{great_circle_angle, UnitVec3};
use crate::numcore::{Array, Graph, NodeId, NumError, ParamStore, SliceDim};
use crate::warp::{fov_ray, CameraModel, Pose};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapDomain {
    SparseGrid,
    SparsePoint,
    DensePano,
    DenseFov,
}

impl MapDomain {
    pub fn name(self) -> &'static str {
        match self {
            MapDomain::SparseGrid => "sparse_grid",
            MapDomain::SparsePoint => "sparse_point",
            MapDomain::DensePano => "dense_pano",
            MapDomain::DenseFov => "dense_fov",
        }
    }

    pub fn parse(s: &str) -> Result<MapDomain, NumError> {
        match s {
            "sparse_grid" => Ok(MapDomain::SparseGrid),
            "sparse_point" => Ok(MapDomain::SparsePoint),
            "dense_pano" => Ok(MapDomain::DensePano),
            "dense_fov" => Ok(MapDomain::DenseFov),
            other => Err(NumError::Invalid(format!("unknown map domain '{other}'"))),
        }
    }
}

/// An evaluated prediction map, exportable as a PNG heatmap or a raw file
/// with a 3-line text header (domain, shape, logits/probabilities flag)
/// followed by little-endian f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub domain: MapDomain,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub logits: bool,
}

impl PredictionMap {
    pub fn new(domain: MapDomain, shape: Vec<usize>, data: Vec<f64>, logits: bool) -> Result<PredictionMap, NumError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumError::Invalid(format!(
                "map shape {shape:?} vs {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumError::Invalid("prediction map contains non-finite values".into()));
        }
        Ok(PredictionMap {
            domain,
            shape,
            data,
            logits,
        })
    }

    pub fn write_raw(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(f, "{}", self.domain.name())?;
        writeln!(f, "{}", dims.join(" "))?;
        writeln!(f, "{}", if self.logits { "logits" } else { "probabilities" })?;
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<PredictionMap, NumError> {
        let f = std::fs::File::open(path).map_err(|e| NumError::Invalid(format!("{path:?}: {e}")))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| NumError::Invalid(e.to_string()))?;
        let domain = MapDomain::parse(line.trim())?;
        line.clear();
        r.read_line(&mut line).map_err(|e| NumError::Invalid(e.to_string()))?;
        let shape: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| NumError::Invalid(format!("bad shape '{line}'"))))
            .collect::<Result<_, _>>()?;
        line.clear();
        r.read_line(&mut line).map_err(|e| NumError::Invalid(e.to_string()))?;
        let logits = match line.trim() {
            "logits" => true,
            "probabilities" => false,
            other => return Err(NumError::Invalid(format!("bad flag '{other}'"))),
        };
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|e| NumError::Invalid(e.to_string()))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        PredictionMap::new(domain, shape, data, logits)
    }

    /// 8-bit grayscale heatmap, min-max normalized per map. 2-d maps only.
    pub fn to_png(&self, path: &Path) -> Result<(), NumError> {
        if self.shape.len() != 2 {
            return Err(NumError::Invalid(format!("PNG export needs a 2-d map, got {:?}", self.shape)));
        }
        let (h, w) = (self.shape[0], self.shape[1]);
        let lo = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                let v = ((self.data[r * w + c] - lo) / span * 255.0).round() as u8;
                img.put_pixel(c as u32, r as u32, image::Luma([v]));
            }
        }
        img.save(path).map_err(|e| NumError::Invalid(format!("{path:?}: {e}")))
    }
}

/// The shared pointwise decoding head: Linear(GELU(Linear(c))) to one logit.
#[derive(Debug, Clone, Copy)]
pub struct MlpHead {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn declare_mlp_head(g: &mut Graph, prefix: &str, d: usize, hidden: usize) -> MlpHead {
    MlpHead {
        w1: g.param(&format!("{prefix}.w1"), &[d, hidden]),
        b1: g.param(&format!("{prefix}.b1"), &[hidden]),
        w2: g.param(&format!("{prefix}.w2"), &[hidden, 1]),
        b2: g.param(&format!("{prefix}.b2"), &[1]),
    }
}

pub fn init_mlp_head(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) {
    let std = 1.0 / (d as f64).sqrt();
    store.init_normal(&format!("{prefix}.w1"), &[d, hidden], std, rng);
    store.init_const(&format!("{prefix}.b1"), &[hidden], 0.0);
    store.init_normal(&format!("{prefix}.w2"), &[hidden, 1], 1.0 / (hidden as f64).sqrt(), rng);
    store.init_const(&format!("{prefix}.b2"), &[1], 0.0);
}

/// One logit per CLS token via the shared 2-layer MLP. Output shape (N_c).
pub fn sparse_decode(g: &mut Graph, cls: NodeId, head: &MlpHead) -> Result<NodeId, NumError> {
    let n = g.shape_of(cls)[0];
    let h1 = g.matmul(cls, head.w1)?;
    let h1b = g.add_row(h1, head.b1)?;
    let h1a = g.gelu(h1b);
    let h2 = g.matmul(h1a, head.w2)?;
    let h2b = g.add_row(h2, head.b2)?;
    g.reshape(h2b, &[n])
}

/// The sparse-point variant: identical MLP, applied to K caller-selected
/// tokens (for example tokens created at detected face directions).
pub fn point_decode(g: &mut Graph, points: NodeId, head: &MlpHead) -> Result<NodeId, NumError> {
    if g.shape_of(points)[0] == 0 {
        return Err(NumError::Invalid("point decoding needs at least one direction".into()));
    }
    sparse_decode(g, points, head)
}

/// Nearest-neighbor 2x upsampling of an (h, w, c) field.
fn upsample2x(g: &mut Graph, x: NodeId) -> Result<NodeId, NumError> {
    let s = g.shape_of(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let r1 = g.reshape(x, &[h, 1, w * c])?;
    let rr = g.concat(&[r1, r1], 1)?;
    let r2 = g.reshape(rr, &[2 * h * w, 1, c])?;
    let cc = g.concat(&[r2, r2], 1)?;
    g.reshape(cc, &[2 * h, 2 * w, c])
}

/// 3x3 stride-1 convolution on the sphere map: circular in longitude
/// (columns), replicated at the latitude boundaries (rows). Weight layout
/// (9 c_in, c_out) with row index (di*3 + dj)*c_in + c.
fn conv3x3_sphere(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumError> {
    let s = g.shape_of(x).to_vec();
    let (h, wd, c) = (s[0], s[1], s[2]);
    let cout = g.shape_of(w)[1];
    let top = g.slice(x, &[SliceDim::range(0, 1), SliceDim::all(wd), SliceDim::all(c)])?;
    let bot = g.slice(x, &[SliceDim::range(h - 1, h), SliceDim::all(wd), SliceDim::all(c)])?;
    let xr = g.concat(&[top, x, bot], 0)?;
    let left = g.slice(xr, &[SliceDim::all(h + 2), SliceDim::range(wd - 1, wd), SliceDim::all(c)])?;
    let right = g.slice(xr, &[SliceDim::all(h + 2), SliceDim::range(0, 1), SliceDim::all(c)])?;
    let xp = g.concat(&[left, xr, right], 1)?;
    let mut slabs = Vec::with_capacity(9);
    for di in 0..3 {
        for dj in 0..3 {
            slabs.push(g.slice(
                xp,
                &[SliceDim::range(di, di + h), SliceDim::range(dj, dj + wd), SliceDim::all(c)],
            )?);
        }
    }
    let cols9 = g.concat(&slabs, 2)?;
    let flat = g.reshape(cols9, &[h * wd, 9 * c])?;
    let mm = g.matmul(flat, w)?;
    let out = g.add_row(mm, b)?;
    g.reshape(out, &[h, wd, cout])
}

/// Two upsampling-convolution stages with GELU between, mapping a
/// (rows, cols, d) CLS grid to a (4 rows, 4 cols) logit map. Longitude is
/// circular; latitude rows are replicated at the poles, so a constant grid
/// decodes to a constant map.
#[derive(Debug, Clone, Copy)]
pub struct DenseHead {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn declare_dense_head(g: &mut Graph, prefix: &str, d: usize, mid: usize) -> DenseHead {
    DenseHead {
        w1: g.param(&format!("{prefix}.deconv1.w"), &[9 * d, mid]),
        b1: g.param(&format!("{prefix}.deconv1.b"), &[mid]),
        w2: g.param(&format!("{prefix}.deconv2.w"), &[9 * mid, 1]),
        b2: g.param(&format!("{prefix}.deconv2.b"), &[1]),
    }
}

pub fn init_dense_head(store: &mut ParamStore, prefix: &str, d: usize, mid: usize, rng: &mut ChaCha8Rng) {
    let s1 = 1.0 / (9.0 * d as f64).sqrt();
    let s2 = 1.0 / (9.0 * mid as f64).sqrt();
    store.init_normal(&format!("{prefix}.deconv1.w"), &[9 * d, mid], s1, rng);
    store.init_const(&format!("{prefix}.deconv1.b"), &[mid], 0.0);
    store.init_normal(&format!("{prefix}.deconv2.w"), &[9 * mid, 1], s2, rng);
    store.init_const(&format!("{prefix}.deconv2.b"), &[1], 0.0);
}

/// Upsample encoded CLS tokens (ordered row-major over the grid) to a dense
/// (4 rows, 4 cols) panorama logit map.
pub fn dense_decode(
    g: &mut Graph,
    cls: NodeId,
    rows: usize,
    cols: usize,
    head: &DenseHead,
) -> Result<NodeId, NumError> {
    let s = g.shape_of(cls).to_vec();
    if s.len() != 2 || s[0] != rows * cols {
        return Err(NumError::ShapeMismatch {
            node: "dense_decode".into(),
            detail: format!("{s:?} tokens for a {rows}x{cols} grid"),
        });
    }
    let grid = g.reshape(cls, &[rows, cols, s[1]])?;
    let up1 = upsample2x(g, grid)?;
    let u1 = conv3x3_sphere(g, up1, head.w1, head.b1)?;
    let u1a = g.gelu(u1);
    let up2 = upsample2x(g, u1a)?;
    let u2 = conv3x3_sphere(g, up2, head.w2, head.b2)?;
    g.reshape(u2, &[4 * rows, 4 * cols])
}

/// World direction of dense-map pixel centers (south at row 0, longitude
/// -180 at column 0, same convention as SphereGrid).
pub fn dense_cell_dir(r: usize, c: usize, h: usize, w: usize) -> UnitVec3 {
    let lat = (r as f64 + 0.5) / h as f64 * 180.0 - 90.0;
    let lon = (c as f64 + 0.5) / w as f64 * 360.0 - 180.0;
    UnitVec3::from_lat_lon_deg(lat, lon)
}

/// Bilinear sampling matrix S with S[fov_pixel, map_pixel] weights such
/// that fov_logits = S . flatten(map_logits): each FOV pixel reads the map
/// at its world direction under the pose. Longitude wraps, latitude clamps.
pub fn fov_sampling_matrix(
    cam: &CameraModel,
    pose: &Pose,
    map_h: usize,
    map_w: usize,
) -> Result<Array, NumError> {
    let mut s = Array::zeros(&[cam.height * cam.width, map_h * map_w]);
    for i in 0..cam.height {
        for j in 0..cam.width {
            let gdir = pose.rotation.rotate(fov_ray(i as f64 + 0.5, j as f64 + 0.5, cam))?;
            let lat = gdir.z.atan2((gdir.x * gdir.x + gdir.y * gdir.y).sqrt()).to_degrees();
            let lon = gdir.y.atan2(gdir.x).to_degrees();
            let fr = ((lat + 90.0) / 180.0 * map_h as f64 - 0.5).clamp(0.0, (map_h - 1) as f64);
            let fc = (lon + 180.0) / 360.0 * map_w as f64 - 0.5;
            let r0 = fr.floor() as usize;
            let r1 = (r0 + 1).min(map_h - 1);
            let c0f = fc.floor();
            let c0 = (c0f.rem_euclid(map_w as f64)) as usize % map_w;
            let c1 = (c0 + 1) % map_w;
            let (dr, dc) = (fr - r0 as f64, fc - c0f);
            let row = i * cam.width + j;
            let base = row * map_h * map_w;
            let d = s.data_mut();
            d[base + r0 * map_w + c0] += (1.0 - dr) * (1.0 - dc);
            d[base + r0 * map_w + c1] += (1.0 - dr) * dc;
            d[base + r1 * map_w + c0] += dr * (1.0 - dc);
            d[base + r1 * map_w + c1] += dr * dc;
        }
    }
    Ok(s)
}

/// Read a dense panorama logit map into the FOV domain through a sampling
/// matrix node (see `fov_sampling_matrix`). Output (H_v, W_v).
pub fn sample_dense_at_fov(
    g: &mut Graph,
    pano: NodeId,
    sampling: NodeId,
    cam: &CameraModel,
) -> Result<NodeId, NumError> {
    let sp = g.shape_of(pano).to_vec();
    let ss = g.shape_of(sampling).to_vec();
    if sp.len() != 2 || ss != vec![cam.height * cam.width, sp[0] * sp[1]] {
        return Err(NumError::ShapeMismatch {
            node: "sample_dense_at_fov".into(),
            detail: format!("pano {sp:?} vs sampling {ss:?}"),
        });
    }
    let flat = g.reshape(pano, &[sp[0] * sp[1], 1])?;
    let fov = g.matmul(sampling, flat)?;
    g.reshape(fov, &[cam.height, cam.width])
}

/// Nearest-neighbor 2x upsampling along the longitude axis of a (w, c) row.
fn upsample2x_1d(g: &mut Graph, x: NodeId) -> Result<NodeId, NumError> {
    let s = g.shape_of(x).to_vec();
    let (w, c) = (s[0], s[1]);
    let r = g.reshape(x, &[w, 1, c])?;
    let rr = g.concat(&[r, r], 1)?;
    g.reshape(rr, &[2 * w, c])
}

/// Kernel-3 stride-1 circular convolution along longitude. Weight layout
/// (3 c_in, c_out) with row index dj*c_in + c.
fn conv1d3_circular(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumError> {
    let s = g.shape_of(x).to_vec();
    let (wd, c) = (s[0], s[1]);
    let left = g.slice(x, &[SliceDim::range(wd - 1, wd), SliceDim::all(c)])?;
    let right = g.slice(x, &[SliceDim::range(0, 1), SliceDim::all(c)])?;
    let xp = g.concat(&[left, x, right], 0)?;
    let mut slabs = Vec::with_capacity(3);
    for dj in 0..3 {
        slabs.push(g.slice(xp, &[SliceDim::range(dj, dj + wd), SliceDim::all(c)])?);
    }
    let cols3 = g.concat(&slabs, 1)?;
    let mm = g.matmul(cols3, w)?;
    g.add_row(mm, b)
}

/// Upsampling 1D convolution stages along longitude; the final stage's
/// output channels become the vertical dimension of the 2D map.
#[derive(Debug, Clone)]
pub struct HorizontalHead {
    pub stages: Vec<(NodeId, NodeId)>,
    pub widths: Vec<usize>,
}

pub fn declare_horizontal_head(g: &mut Graph, prefix: &str, d: usize, widths: &[usize]) -> HorizontalHead {
    let mut cin = d;
    let mut stages = Vec::new();
    for (k, &cout) in widths.iter().enumerate() {
        let w = g.param(&format!("{prefix}.deconv1d{k}.w"), &[3 * cin, cout]);
        let b = g.param(&format!("{prefix}.deconv1d{k}.b"), &[cout]);
        stages.push((w, b));
        cin = cout;
    }
    HorizontalHead {
        stages,
        widths: widths.to_vec(),
    }
}

pub fn init_horizontal_head(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) {
    let mut cin = d;
    for (k, &cout) in widths.iter().enumerate() {
        let std = 1.0 / (3.0 * cin as f64).sqrt();
        store.init_normal(&format!("{prefix}.deconv1d{k}.w"), &[3 * cin, cout], std, rng);
        store.init_const(&format!("{prefix}.deconv1d{k}.b"), &[cout], 0.0);
        cin = cout;
    }
}

/// Decode the equator CLS row (cols, d) into an (H', W') map where
/// H' = last stage width and W' = cols * 2^stages. Fully circular.
pub fn horizontal_decode(
    g: &mut Graph,
    equator: NodeId,
    head: &HorizontalHead,
) -> Result<NodeId, NumError> {
    let s = g.shape_of(equator).to_vec();
    if s.len() != 2 || s[0] < 2 {
        return Err(NumError::Invalid(format!(
            "horizontal decoding needs >= 2 equator tokens, got {s:?}"
        )));
    }
    let mut x = equator;
    for (k, (w, b)) in head.stages.iter().enumerate() {
        x = upsample2x_1d(g, x)?;
        x = conv1d3_circular(g, x, *w, *b)?;
        if k + 1 < head.stages.len() {
            x = g.gelu(x);
        }
    }
    // (W', C) -> (C, W'): channels become the vertical dimension
    g.transpose(x)
}

/// Mean sigmoid binary cross entropy between a logit map and targets in
/// [0, 1] of the same shape.
pub fn bce_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, NumError> {
    if g.shape_of(pred) != g.shape_of(target) {
        return Err(NumError::ShapeMismatch {
            node: "bce_loss".into(),
            detail: format!("{:?} vs {:?}", g.shape_of(pred), g.shape_of(target)),
        });
    }
    g.bce_with_logits(pred, target)
}

/// Sparse-grid target: cell positive iff a source direction falls inside
/// its lat-lon cell.
pub fn sparse_grid_target(rows: usize, cols: usize, dirs: &[UnitVec3]) -> Array {
    let mut t = Array::zeros(&[rows * cols]);
    for d in dirs {
        let lat = d.z.atan2((d.x * d.x + d.y * d.y).sqrt()).to_degrees();
        let lon = d.y.atan2(d.x).to_degrees();
        let r = (((lat + 90.0) / 180.0 * rows as f64).floor() as usize).min(rows - 1);
        let c = (((lon + 180.0) / 360.0 * cols as f64).floor() as usize).min(cols - 1);
        t.data_mut()[r * cols + c] = 1.0;
    }
    t
}

/// Dense panorama target: hard disks of `radius_deg` around each source.
pub fn dense_target(h: usize, w: usize, dirs: &[UnitVec3], radius_deg: f64) -> Array {
    let mut t = Array::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let cell = dense_cell_dir(r, c, h, w);
            if dirs.iter().any(|d| great_circle_angle(&cell, d) <= radius_deg) {
                t.data_mut()[r * w + c] = 1.0;
            }
        }
    }
    t
}

/// FOV target: disks of `radius_deg` around each source, in the image
/// plane of the given camera and pose.
pub fn fov_target(cam: &CameraModel, pose: &Pose, dirs: &[UnitVec3], radius_deg: f64) -> Result<Array, NumError> {
    let mut t = Array::zeros(&[cam.height, cam.width]);
    for i in 0..cam.height {
        for j in 0..cam.width {
            let ray = pose.rotation.rotate(fov_ray(i as f64 + 0.5, j as f64 + 0.5, cam))?;
            if dirs.iter().any(|d| great_circle_angle(&ray, d) <= radius_deg) {
                t.data_mut()[i * cam.width + j] = 1.0;
            }
        }
    }
    Ok(t)
}
