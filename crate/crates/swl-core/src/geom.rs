//! Quaternion algebra and spherical utilities shared by every other module.
//!
//! Axis convention: +x is the initial "forward" direction (optical axis at
//! identity pose), +z is "up" (gravity-aligned), +y is left. Latitude is
//! measured from the xy-plane toward +z.

use crate::numcore::NumError;

/// A rotation as a unit quaternion (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnitVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalize an arbitrary 4-vector into a unit quaternion.
    pub fn normalize(w: f64, x: f64, y: f64, z: f64) -> Result<UnitQuaternion, NumError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(NumError::Invalid(format!(
                "cannot normalize quaternion with norm {n}"
            )));
        }
        Ok(UnitQuaternion {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn from_axis_angle(axis: UnitVec3, angle_rad: f64) -> UnitQuaternion {
        let h = 0.5 * angle_rad;
        let s = h.sin();
        UnitQuaternion {
            w: h.cos(),
            x: s * axis.x,
            y: s * axis.y,
            z: s * axis.z,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> UnitQuaternion {
        UnitQuaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product self ⊗ other.
    pub fn mul(&self, o: &UnitQuaternion) -> UnitQuaternion {
        UnitQuaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Rotate a unit vector by conjugation q v q^{-1}.
    pub fn rotate(&self, v: UnitVec3) -> Result<UnitVec3, NumError> {
        if (self.norm() - 1.0).abs() > 1e-6 {
            return Err(NumError::Invalid(format!(
                "quat_rotate requires a unit quaternion, |q| = {}",
                self.norm()
            )));
        }
        Ok(self.rotate_unchecked(v))
    }

    /// Rotation without the unit check, for hot loops over known-good poses.
    pub fn rotate_unchecked(&self, v: UnitVec3) -> UnitVec3 {
        // q v q* via the cross-product identity: v' = v + 2 w (u x v) + 2 u x (u x v)
        let (ux, uy, uz) = (self.x, self.y, self.z);
        let c1 = (
            uy * v.z - uz * v.y,
            uz * v.x - ux * v.z,
            ux * v.y - uy * v.x,
        );
        let c2 = (
            uy * c1.2 - uz * c1.1,
            uz * c1.0 - ux * c1.2,
            ux * c1.1 - uy * c1.0,
        );
        UnitVec3 {
            x: v.x + 2.0 * (self.w * c1.0 + c2.0),
            y: v.y + 2.0 * (self.w * c1.1 + c2.1),
            z: v.z + 2.0 * (self.w * c1.2 + c2.2),
        }
    }
}

impl UnitVec3 {
    pub const FORWARD: UnitVec3 = UnitVec3 {
        x: 1.0,
        y: 0.0,
        z: 0.0,
    };
    pub const UP: UnitVec3 = UnitVec3 {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };

    pub fn normalize(x: f64, y: f64, z: f64) -> Result<UnitVec3, NumError> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(NumError::Invalid(format!(
                "cannot normalize vector with norm {n}"
            )));
        }
        Ok(UnitVec3 {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn dot(&self, o: &UnitVec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &UnitVec3) -> (f64, f64, f64) {
        (
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Direction at a given latitude/longitude (degrees). Latitude 0 is the
    /// equator, +90 the up pole; longitude 0 is forward, +90 is left (+y).
    pub fn from_lat_lon_deg(lat_deg: f64, lon_deg: f64) -> UnitVec3 {
        let lat = lat_deg.to_radians();
        let lon = lon_deg.to_radians();
        UnitVec3 {
            x: lat.cos() * lon.cos(),
            y: lat.cos() * lon.sin(),
            z: lat.sin(),
        }
    }
}

/// The raw, unnormalized rotation 4-feature (1 + p_i . p_j, p_i x p_j).
/// Antipodal inputs yield the zero vector, which is passed through as a
/// feature and never normalized.
pub fn rotation_between(p_i: &UnitVec3, p_j: &UnitVec3) -> [f64; 4] {
    let d = p_i.dot(p_j);
    let c = p_i.cross(p_j);
    [1.0 + d, c.0, c.1, c.2]
}

/// Great-circle angle between two unit vectors, in degrees in [0, 180].
pub fn great_circle_angle(a: &UnitVec3, b: &UnitVec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// The N_c CLS anchor directions: a rows x cols lat-lon grid of cell centers.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major: directions[r * cols + c].
    pub directions: Vec<UnitVec3>,
    /// The row whose latitude band contains the equator.
    pub equator_row_index: usize,
}

impl SphereGrid {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn direction(&self, r: usize, c: usize) -> UnitVec3 {
        self.directions[r * self.cols + c]
    }

    /// Latitude of a row center, degrees.
    pub fn row_lat_deg(rows: usize, r: usize) -> f64 {
        (r as f64 + 0.5) / rows as f64 * 180.0 - 90.0
    }

    /// Longitude of a column center, degrees.
    pub fn col_lon_deg(cols: usize, c: usize) -> f64 {
        (c as f64 + 0.5) / cols as f64 * 360.0 - 180.0
    }

    /// Directions of the equator row only.
    pub fn equator_row(&self) -> Vec<UnitVec3> {
        let r = self.equator_row_index;
        (0..self.cols).map(|c| self.direction(r, c)).collect()
    }
}

/// Build the lat-lon anchor grid. Cell centers at
/// latitude (r+0.5)/rows*180-90 and longitude (c+0.5)/cols*360-180.
pub fn make_grid(rows: usize, cols: usize) -> Result<SphereGrid, NumError> {
    if rows == 0 || cols == 0 {
        return Err(NumError::Invalid(format!(
            "grid dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let mut directions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let lat = SphereGrid::row_lat_deg(rows, r);
        for c in 0..cols {
            let lon = SphereGrid::col_lon_deg(cols, c);
            directions.push(UnitVec3::from_lat_lon_deg(lat, lon));
        }
    }
    // Row whose latitude center is nearest the equator.
    let equator_row_index = (0..rows)
        .min_by(|&a, &b| {
            SphereGrid::row_lat_deg(rows, a)
                .abs()
                .partial_cmp(&SphereGrid::row_lat_deg(rows, b).abs())
                .expect("finite latitudes")
        })
        .expect("rows >= 1");
    Ok(SphereGrid {
        rows,
        cols,
        directions,
        equator_row_index,
    })
}

/// Result of spherical non-max suppression.
#[derive(Debug, Clone)]
pub struct NmsResult {
    /// Indices into the candidate list, in selection order.
    pub indices: Vec<usize>,
    /// True when fewer than k peaks survived suppression.
    pub underflow: bool,
}

/// Greedy spherical NMS: repeatedly take the highest-scoring candidate and
/// suppress everything within `radius_deg` great-circle distance of it.
/// Ties break toward the lowest candidate index.
pub fn sphere_nms(
    directions: &[UnitVec3],
    scores: &[f64],
    k: usize,
    radius_deg: f64,
) -> Result<NmsResult, NumError> {
    if directions.is_empty() {
        return Err(NumError::Invalid("sphere_nms: empty candidate set".into()));
    }
    if directions.len() != scores.len() {
        return Err(NumError::Invalid(format!(
            "sphere_nms: {} directions vs {} scores",
            directions.len(),
            scores.len()
        )));
    }
    if k == 0 || radius_deg <= 0.0 {
        return Err(NumError::Invalid(format!(
            "sphere_nms: k = {k}, radius = {radius_deg}"
        )));
    }
    let mut alive = vec![true; directions.len()];
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let mut best: Option<usize> = None;
        for i in 0..directions.len() {
            if !alive[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if scores[i] > scores[b] => best = Some(i),
                _ => {}
            }
        }
        let Some(b) = best else { break };
        picked.push(b);
        for i in 0..directions.len() {
            if alive[i] && great_circle_angle(&directions[b], &directions[i]) <= radius_deg {
                alive[i] = false;
            }
        }
    }
    let underflow = picked.len() < k;
    Ok(NmsResult {
        indices: picked,
        underflow,
    })
}
