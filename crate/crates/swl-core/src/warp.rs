//! Explicit spherical world-locking: project a field-of-view image onto a
//! world-locked equirectangular panorama given head pose, and the inverse
//! sampling used for round trips and FOV-domain decoding.
//!
//! The panorama is iterated pixel-by-pixel and sampled from the FOV frame
//! (inverse mapping), which avoids holes from forward scatter; the forward
//! scalar mapping is kept for tests and for positioning tokens.

use crate::geom::{UnitQuaternion, UnitVec3};
use crate::numcore::NumError;

/// Pinhole camera with equiangular pixel mapping.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CameraModel {
    pub theta_hf_deg: f64,
    pub theta_vf_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(theta_hf_deg: f64, theta_vf_deg: f64, width: usize, height: usize) -> Result<CameraModel, NumError> {
        if !(0.0..180.0).contains(&theta_hf_deg)
            || !(0.0..180.0).contains(&theta_vf_deg)
            || theta_hf_deg <= 0.0
            || theta_vf_deg <= 0.0
        {
            return Err(NumError::Invalid(format!(
                "field of view must be in (0, 180), got {theta_hf_deg} x {theta_vf_deg}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(NumError::Invalid("camera dimensions must be >= 1".into()));
        }
        Ok(CameraModel {
            theta_hf_deg,
            theta_vf_deg,
            width,
            height,
        })
    }
}

/// Head pose. Translation is carried for format fidelity but ignored.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion,
    pub timestamp: f64,
    pub translation: [f64; 3],
}

impl Pose {
    pub fn from_rotation(rotation: UnitQuaternion) -> Pose {
        Pose {
            rotation,
            timestamp: 0.0,
            translation: [0.0; 3],
        }
    }

    pub const IDENTITY: Pose = Pose {
        rotation: UnitQuaternion::IDENTITY,
        timestamp: 0.0,
        translation: [0.0; 3],
    };
}

/// A dense H x W x C image with values in [0, 1].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Image {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Image {
        Image {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn get(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + ch]
    }

    pub fn set(&mut self, i: usize, j: usize, ch: usize, v: f64) {
        self.data[(i * self.width + j) * self.channels + ch] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Bilinear sample at continuous pixel coordinates (fi, fj), clamped to
    /// the image border.
    pub fn bilinear(&self, fi: f64, fj: f64, ch: usize) -> f64 {
        let fi = fi.clamp(0.0, (self.height - 1) as f64);
        let fj = fj.clamp(0.0, (self.width - 1) as f64);
        let i0 = fi.floor() as usize;
        let j0 = fj.floor() as usize;
        let i1 = (i0 + 1).min(self.height - 1);
        let j1 = (j0 + 1).min(self.width - 1);
        let (di, dj) = (fi - i0 as f64, fj - j0 as f64);
        self.get(i0, j0, ch) * (1.0 - di) * (1.0 - dj)
            + self.get(i0, j1, ch) * (1.0 - di) * dj
            + self.get(i1, j0, ch) * di * (1.0 - dj)
            + self.get(i1, j1, ch) * di * dj
    }
}

/// World-locked equirectangular panorama of radius R: H_p = round(pi R),
/// W_p = round(2 pi R), with a per-pixel validity mask.
#[derive(Debug, Clone)]
pub struct Panorama {
    pub radius: f64,
    pub image: Image,
    pub mask: Vec<bool>,
}

impl Panorama {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn mask_at(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.image.width + c]
    }
}

pub fn pano_dims(radius: f64) -> (usize, usize) {
    let h = (std::f64::consts::PI * radius).round() as usize;
    let w = (2.0 * std::f64::consts::PI * radius).round() as usize;
    (h, w)
}

/// World direction of the (i, j)-th FOV pixel (pixel centers at half-integer
/// coordinates): the equiangular ray through the pixel, rotated by the pose.
pub fn pixel_to_sphere(
    i: usize,
    j: usize,
    cam: &CameraModel,
    pose: &Pose,
) -> Result<UnitVec3, NumError> {
    if i >= cam.height || j >= cam.width {
        return Err(NumError::Invalid(format!(
            "pixel ({i}, {j}) outside {}x{} frame",
            cam.height, cam.width
        )));
    }
    let d = fov_ray(i as f64 + 0.5, j as f64 + 0.5, cam);
    pose.rotation.rotate(d)
}

/// Ray direction in the head frame for continuous pixel coordinates
/// (fi, fj) measured in pixels from the top-left corner.
pub fn fov_ray(fi: f64, fj: f64, cam: &CameraModel) -> UnitVec3 {
    let alpha = cam.theta_hf_deg.to_radians() * (fj / cam.width as f64 - 0.5);
    let beta = cam.theta_vf_deg.to_radians() * (fi / cam.height as f64 - 0.5);
    // forward = +x, right = -y, down = -z
    UnitVec3::normalize(1.0, -alpha.tan(), -beta.tan()).expect("fov < 180 keeps the ray finite")
}

/// Continuous panorama coordinates (X row, Y column) of a world direction.
/// Row X in [0, pi R] with the up pole at the top boundary; column
/// Y = R (atan2(g_y, g_x) + pi) in [0, 2 pi R).
pub fn sphere_to_pano(g: &UnitVec3, radius: f64) -> (f64, f64) {
    let lat = g.z.atan2((g.x * g.x + g.y * g.y).sqrt());
    let x = radius * (std::f64::consts::FRAC_PI_2 - lat);
    let y = radius * (g.y.atan2(g.x) + std::f64::consts::PI);
    (x, y)
}

/// World direction at the center of panorama pixel (r, c).
pub fn pano_pixel_dir(r: usize, c: usize, radius: f64) -> UnitVec3 {
    let lat = std::f64::consts::FRAC_PI_2 - (r as f64 + 0.5) / radius;
    let lat = lat.clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
    let lon = (c as f64 + 0.5) / radius - std::f64::consts::PI;
    UnitVec3 {
        x: lat.cos() * lon.cos(),
        y: lat.cos() * lon.sin(),
        z: lat.sin(),
    }
}

/// Continuous FOV pixel coordinates of a head-frame direction, or None when
/// the direction is outside the camera frustum.
pub fn head_dir_to_fov(d: &UnitVec3, cam: &CameraModel) -> Option<(f64, f64)> {
    if d.x <= 1e-9 {
        return None;
    }
    let alpha = (-d.y / d.x).atan();
    let beta = (-d.z / d.x).atan();
    let half_h = 0.5 * cam.theta_hf_deg.to_radians();
    let half_v = 0.5 * cam.theta_vf_deg.to_radians();
    if alpha.abs() > half_h || beta.abs() > half_v {
        return None;
    }
    let fj = (alpha / cam.theta_hf_deg.to_radians() + 0.5) * cam.width as f64 - 0.5;
    let fi = (beta / cam.theta_vf_deg.to_radians() + 0.5) * cam.height as f64 - 0.5;
    Some((fi, fj))
}

/// Project a FOV frame onto the world-locked panorama under the given pose.
pub fn warp_fov_to_pano(
    frame: &Image,
    cam: &CameraModel,
    pose: &Pose,
    radius: f64,
) -> Result<Panorama, NumError> {
    if radius < 4.0 {
        return Err(NumError::Invalid(format!(
            "panorama radius {radius} is degenerate (need >= 4)"
        )));
    }
    if frame.height != cam.height || frame.width != cam.width {
        return Err(NumError::ShapeMismatch {
            node: "warp_fov_to_pano".into(),
            detail: format!(
                "frame {}x{} vs camera {}x{}",
                frame.height, frame.width, cam.height, cam.width
            ),
        });
    }
    let (hp, wp) = pano_dims(radius);
    let mut image = Image::new(hp, wp, frame.channels);
    let mut mask = vec![false; hp * wp];
    let inv = pose.rotation.conjugate();
    for r in 0..hp {
        for c in 0..wp {
            let g = pano_pixel_dir(r, c, radius);
            let d = inv.rotate_unchecked(g);
            if let Some((fi, fj)) = head_dir_to_fov(&d, cam) {
                if fi >= 0.0
                    && fi <= (cam.height - 1) as f64
                    && fj >= 0.0
                    && fj <= (cam.width - 1) as f64
                {
                    for ch in 0..frame.channels {
                        image.set(r, c, ch, frame.bilinear(fi, fj, ch));
                    }
                    mask[r * wp + c] = true;
                }
            }
        }
    }
    Ok(Panorama {
        radius,
        image,
        mask,
    })
}

/// Sample the panorama back into the FOV domain. Returns the image and a
/// per-pixel validity flag (false where the panorama was not covered).
pub fn sample_pano_at_fov(
    pano: &Panorama,
    cam: &CameraModel,
    pose: &Pose,
) -> Result<(Image, Vec<bool>), NumError> {
    let mut out = Image::new(cam.height, cam.width, pano.image.channels);
    let mut valid = vec![false; cam.height * cam.width];
    let (hp, wp) = (pano.height(), pano.width());
    for i in 0..cam.height {
        for j in 0..cam.width {
            let g = pose.rotation.rotate(fov_ray(i as f64 + 0.5, j as f64 + 0.5, cam))?;
            let (x, y) = sphere_to_pano(&g, pano.radius);
            // pixel centers at half-integer panorama coordinates
            let fr = (x - 0.5).clamp(0.0, (hp - 1) as f64);
            let fc = y - 0.5;
            let r0 = fr.floor() as usize;
            let r1 = (r0 + 1).min(hp - 1);
            let c0f = fc.floor();
            let c0 = (c0f.rem_euclid(wp as f64)) as usize % wp;
            let c1 = (c0 + 1) % wp;
            let (dr, dc) = (fr - r0 as f64, fc - c0f);
            let corners = [(r0, c0), (r0, c1), (r1, c0), (r1, c1)];
            let ok = corners.iter().all(|&(r, c)| pano.mask_at(r, c));
            if ok {
                for ch in 0..pano.image.channels {
                    let v = pano.image.get(r0, c0, ch) * (1.0 - dr) * (1.0 - dc)
                        + pano.image.get(r0, c1, ch) * (1.0 - dr) * dc
                        + pano.image.get(r1, c0, ch) * dr * (1.0 - dc)
                        + pano.image.get(r1, c1, ch) * dr * dc;
                    out.set(i, j, ch, v);
                }
                valid[i * cam.width + j] = true;
            }
        }
    }
    Ok((out, valid))
}

/// PSNR between two images over pixels where `keep` is true, in dB.
pub fn psnr(a: &Image, b: &Image, keep: impl Fn(usize, usize) -> bool) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.height {
        for j in 0..a.width {
            if !keep(i, j) {
                continue;
            }
            for ch in 0..a.channels {
                let d = a.get(i, j, ch) - b.get(i, j, ch);
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return f64::INFINITY;
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Render a point feature at a fixed world direction into FOV frames
/// under many poses that keep it in view, warp each frame onto the
/// panorama, and locate the brightest pixel. Returns (max row spread,
/// max column spread) in panorama pixels. Used by the world-locking
/// stability checks.
pub fn world_lock_spread(radius: f64, n_poses: usize, seed: u64) -> (f64, f64) {
    use rand::{Rng, SeedableRng};
    let cam = CameraModel::new(90.0, 60.0, 64, 48).unwrap();
    let target = UnitVec3::from_lat_lon_deg(10.0, 25.0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    while rows.len() < n_poses {
        // random small-ish pose; keep the target well inside the frustum
        let ax = UnitVec3::normalize(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let ax = match ax {
            Ok(a) => a,
            Err(_) => continue,
        };
        let base = UnitQuaternion::from_axis_angle(UnitVec3::UP, 25.0f64.to_radians());
        let q = base.mul(&UnitQuaternion::from_axis_angle(ax, rng.gen_range(-0.25..0.25)));
        let pose = Pose::from_rotation(q);
        let head = q.conjugate().rotate_unchecked(target);
        let (fi, fj) = match head_dir_to_fov(&head, &cam) {
            Some(p) => p,
            None => continue,
        };
        if fi < 4.0 || fi > 43.0 || fj < 4.0 || fj > 59.0 {
            continue;
        }
        // Gaussian spot in angular distance to the target, so the world
        // pattern is identical across poses
        let mut frame = Image::new(48, 64, 1);
        let sigma = 3.0f64.to_radians();
        for i in 0..48 {
            for j in 0..64 {
                let ray = q.rotate_unchecked(fov_ray(i as f64 + 0.5, j as f64 + 0.5, &cam));
                let ang = ray.dot(&target).clamp(-1.0, 1.0).acos();
                frame.set(i, j, 0, (-0.5 * (ang / sigma).powi(2)).exp());
            }
        }
        let pano = warp_fov_to_pano(&frame, &cam, &pose, radius).unwrap();
        // sub-pixel feature location: intensity-weighted centroid of the
        // bright core (longitude wrap is irrelevant at lon 25 degrees)
        let peak = pano.image.data().iter().cloned().fold(0.0, f64::max);
        let (mut sr, mut sc, mut sw) = (0.0, 0.0, 0.0);
        for r in 0..pano.height() {
            for c in 0..pano.width() {
                let v = pano.image.get(r, c, 0);
                if v >= 0.2 * peak {
                    sr += v * r as f64;
                    sc += v * c as f64;
                    sw += v;
                }
            }
        }
        rows.push(sr / sw);
        cols.push(sc / sw);
    }
    let span =
        |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
    (span(&rows), span(&cols))
}
