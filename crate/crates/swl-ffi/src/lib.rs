//! C ABI over the spherical geometry core: quaternion ops, the anchor grid,
//! spherical non-max suppression, and panorama warping.
//!
//! Conventions: quaternions are `[w, x, y, z]`, vectors `[x, y, z]`, images
//! row-major f64 with interleaved channels. Grids and panoramas are opaque
//! handles that must be released with the matching `_free` call. Every
//! fallible function returns a status code and writes results through out
//! pointers; out values are untouched on failure.

use std::os::raw::c_char;

use swl_core::geom::{
    great_circle_angle, make_grid, rotation_between, sphere_nms, SphereGrid, UnitQuaternion,
    UnitVec3,
};
use swl_core::numcore::NumError;
use swl_core::warp::{sample_pano_at_fov, warp_fov_to_pano, CameraModel, Image, Panorama, Pose};

/// Status code returned by every fallible FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwlStatus {
    Ok = 0,
    /// A pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or otherwise invalid.
    InvalidArgument = 2,
    /// A computed value was NaN or infinite.
    NonFinite = 3,
    /// Array dimensions disagreed.
    ShapeMismatch = 4,
}

fn status_of(e: &NumError) -> SwlStatus {
    match e {
        NumError::Invalid(_) => SwlStatus::InvalidArgument,
        NumError::NonFinite { .. } => SwlStatus::NonFinite,
        NumError::ShapeMismatch { .. } => SwlStatus::ShapeMismatch,
    }
}

/// Opaque handle to a lat-lon anchor grid.
pub struct SwlGrid(SphereGrid);

/// Opaque handle to a world-locked panorama.
pub struct SwlPano(Panorama);

const VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn swl_version() -> *const c_char {
    VERSION.as_ptr() as *const c_char
}

unsafe fn read_quat(q: *const f64) -> UnitQuaternion {
    UnitQuaternion {
        w: *q,
        x: *q.add(1),
        y: *q.add(2),
        z: *q.add(3),
    }
}

unsafe fn write_quat(out: *mut f64, q: &UnitQuaternion) {
    *out = q.w;
    *out.add(1) = q.x;
    *out.add(2) = q.y;
    *out.add(3) = q.z;
}

unsafe fn read_vec(v: *const f64) -> Result<UnitVec3, NumError> {
    UnitVec3::normalize(*v, *v.add(1), *v.add(2))
}

unsafe fn write_vec(out: *mut f64, v: &UnitVec3) {
    *out = v.x;
    *out.add(1) = v.y;
    *out.add(2) = v.z;
}

/// Normalize `(w, x, y, z)` into a unit quaternion.
///
/// # Safety
/// `out` must point to 4 writable f64 values.
#[no_mangle]
pub unsafe extern "C" fn swl_quat_normalize(
    w: f64,
    x: f64,
    y: f64,
    z: f64,
    out: *mut f64,
) -> SwlStatus {
    if out.is_null() {
        return SwlStatus::NullPointer;
    }
    match UnitQuaternion::normalize(w, x, y, z) {
        Ok(q) => {
            write_quat(out, &q);
            SwlStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Hamilton product `a * b`.
///
/// # Safety
/// `a` and `b` must point to 4 readable f64 values each; `out` to 4 writable.
#[no_mangle]
pub unsafe extern "C" fn swl_quat_mul(a: *const f64, b: *const f64, out: *mut f64) -> SwlStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return SwlStatus::NullPointer;
    }
    let q = read_quat(a).mul(&read_quat(b));
    write_quat(out, &q);
    SwlStatus::Ok
}

/// Quaternion conjugate.
///
/// # Safety
/// `q` must point to 4 readable f64 values; `out` to 4 writable.
#[no_mangle]
pub unsafe extern "C" fn swl_quat_conjugate(q: *const f64, out: *mut f64) -> SwlStatus {
    if q.is_null() || out.is_null() {
        return SwlStatus::NullPointer;
    }
    write_quat(out, &read_quat(q).conjugate());
    SwlStatus::Ok
}

/// Rotate unit vector `v` by unit quaternion `q`.
///
/// # Safety
/// `q` must point to 4 and `v` to 3 readable f64 values; `out` to 3 writable.
#[no_mangle]
pub unsafe extern "C" fn swl_quat_rotate(q: *const f64, v: *const f64, out: *mut f64) -> SwlStatus {
    if q.is_null() || v.is_null() || out.is_null() {
        return SwlStatus::NullPointer;
    }
    let d = match read_vec(v) {
        Ok(d) => d,
        Err(e) => return status_of(&e),
    };
    match read_quat(q).rotate(d) {
        Ok(r) => {
            write_vec(out, &r);
            SwlStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Unnormalized quaternion `[1 + a.b, a x b]` carrying the rotation from
/// `a` to `b`; antipodal inputs yield the zero quaternion.
///
/// # Safety
/// `a` and `b` must point to 3 readable f64 values each; `out` to 4 writable.
#[no_mangle]
pub unsafe extern "C" fn swl_rotation_between(
    a: *const f64,
    b: *const f64,
    out: *mut f64,
) -> SwlStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return SwlStatus::NullPointer;
    }
    let (pa, pb) = match (read_vec(a), read_vec(b)) {
        (Ok(pa), Ok(pb)) => (pa, pb),
        (Err(e), _) | (_, Err(e)) => return status_of(&e),
    };
    let q = rotation_between(&pa, &pb);
    for (i, v) in q.iter().enumerate() {
        *out.add(i) = *v;
    }
    SwlStatus::Ok
}

/// Angle between two directions, degrees.
///
/// # Safety
/// `a` and `b` must point to 3 readable f64 values each; `out` to 1 writable.
#[no_mangle]
pub unsafe extern "C" fn swl_great_circle_angle(
    a: *const f64,
    b: *const f64,
    out: *mut f64,
) -> SwlStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return SwlStatus::NullPointer;
    }
    let (pa, pb) = match (read_vec(a), read_vec(b)) {
        (Ok(pa), Ok(pb)) => (pa, pb),
        (Err(e), _) | (_, Err(e)) => return status_of(&e),
    };
    *out = great_circle_angle(&pa, &pb);
    SwlStatus::Ok
}

/// Build a rows x cols lat-lon anchor grid (south row first).
///
/// # Safety
/// `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn swl_grid_new(
    rows: usize,
    cols: usize,
    out: *mut *mut SwlGrid,
) -> SwlStatus {
    if out.is_null() {
        return SwlStatus::NullPointer;
    }
    match make_grid(rows, cols) {
        Ok(g) => {
            *out = Box::into_raw(Box::new(SwlGrid(g)));
            SwlStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Release a grid handle. Null is a no-op.
///
/// # Safety
/// `grid` must be a handle from `swl_grid_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn swl_grid_free(grid: *mut SwlGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Number of anchors in the grid, or 0 for a null handle.
///
/// # Safety
/// `grid` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn swl_grid_len(grid: *const SwlGrid) -> usize {
    if grid.is_null() {
        0
    } else {
        (*grid).0.len()
    }
}

/// Index of the row whose latitude band contains the equator.
///
/// # Safety
/// `grid` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn swl_grid_equator_row(grid: *const SwlGrid) -> usize {
    if grid.is_null() {
        0
    } else {
        (*grid).0.equator_row_index
    }
}

/// Anchor direction at (row, col).
///
/// # Safety
/// `grid` must be a live handle; `out` must point to 3 writable f64 values.
#[no_mangle]
pub unsafe extern "C" fn swl_grid_direction(
    grid: *const SwlGrid,
    row: usize,
    col: usize,
    out: *mut f64,
) -> SwlStatus {
    if grid.is_null() || out.is_null() {
        return SwlStatus::NullPointer;
    }
    let g = &(*grid).0;
    if row >= g.rows || col >= g.cols {
        return SwlStatus::InvalidArgument;
    }
    write_vec(out, &g.direction(row, col));
    SwlStatus::Ok
}

/// Greedy spherical non-max suppression: pick up to `k` of `n` scored
/// directions (3 f64 each), suppressing later candidates within
/// `radius_deg` of a pick. Writes the selected candidate indices and their
/// count; `underflow` is 1 when fewer than `k` survive.
///
/// # Safety
/// `directions` must hold 3n readable f64 values and `scores` n; `out_indices`
/// must hold k writable entries; `out_count` and `out_underflow` one each.
#[no_mangle]
pub unsafe extern "C" fn swl_sphere_nms(
    directions: *const f64,
    scores: *const f64,
    n: usize,
    k: usize,
    radius_deg: f64,
    out_indices: *mut usize,
    out_count: *mut usize,
    out_underflow: *mut i32,
) -> SwlStatus {
    if directions.is_null()
        || scores.is_null()
        || (out_indices.is_null() && k > 0)
        || out_count.is_null()
        || out_underflow.is_null()
    {
        return SwlStatus::NullPointer;
    }
    let mut dirs = Vec::with_capacity(n);
    for i in 0..n {
        match read_vec(directions.add(3 * i)) {
            Ok(d) => dirs.push(d),
            Err(e) => return status_of(&e),
        }
    }
    let scores = std::slice::from_raw_parts(scores, n);
    match sphere_nms(&dirs, scores, k, radius_deg) {
        Ok(res) => {
            for (i, idx) in res.indices.iter().enumerate() {
                *out_indices.add(i) = *idx;
            }
            *out_count = res.indices.len();
            *out_underflow = res.underflow as i32;
            SwlStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Project a camera frame onto a world-locked panorama of the given radius.
/// The frame is row-major `height x width x channels`; the pose quaternion
/// maps head-frame directions to world-frame ones.
///
/// # Safety
/// `frame` must hold height*width*channels readable f64 values; `quat` 4;
/// `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn swl_warp_fov_to_pano(
    frame: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    fov_h_deg: f64,
    fov_v_deg: f64,
    quat: *const f64,
    radius: f64,
    out: *mut *mut SwlPano,
) -> SwlStatus {
    if frame.is_null() || quat.is_null() || out.is_null() {
        return SwlStatus::NullPointer;
    }
    let cam = match CameraModel::new(fov_h_deg, fov_v_deg, width, height) {
        Ok(c) => c,
        Err(e) => return status_of(&e),
    };
    let n = height * width * channels;
    let mut img = Image::new(height, width, channels);
    img.data_mut().copy_from_slice(std::slice::from_raw_parts(frame, n));
    let pose = Pose::from_rotation(read_quat(quat));
    match warp_fov_to_pano(&img, &cam, &pose, radius) {
        Ok(p) => {
            *out = Box::into_raw(Box::new(SwlPano(p)));
            SwlStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Release a panorama handle. Null is a no-op.
///
/// # Safety
/// `pano` must be a handle from `swl_warp_fov_to_pano` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn swl_pano_free(pano: *mut SwlPano) {
    if !pano.is_null() {
        drop(Box::from_raw(pano));
    }
}

/// Panorama rows, or 0 for a null handle.
///
/// # Safety
/// `pano` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn swl_pano_height(pano: *const SwlPano) -> usize {
    if pano.is_null() {
        0
    } else {
        (*pano).0.height()
    }
}

/// Panorama columns, or 0 for a null handle.
///
/// # Safety
/// `pano` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn swl_pano_width(pano: *const SwlPano) -> usize {
    if pano.is_null() {
        0
    } else {
        (*pano).0.width()
    }
}

/// Copy the panorama pixels (row-major, interleaved channels) and validity
/// mask (1 where any frame pixel landed).
///
/// # Safety
/// `pano` must be a live handle; `out_pixels` must hold
/// height*width*channels writable f64 values and `out_mask` height*width
/// writable i32 values. Either out pointer may be null to skip that copy.
#[no_mangle]
pub unsafe extern "C" fn swl_pano_read(
    pano: *const SwlPano,
    out_pixels: *mut f64,
    out_mask: *mut i32,
) -> SwlStatus {
    if pano.is_null() {
        return SwlStatus::NullPointer;
    }
    let p = &(*pano).0;
    if !out_pixels.is_null() {
        std::slice::from_raw_parts_mut(out_pixels, p.image.data().len())
            .copy_from_slice(p.image.data());
    }
    if !out_mask.is_null() {
        for (i, m) in p.mask.iter().enumerate() {
            *out_mask.add(i) = *m as i32;
        }
    }
    SwlStatus::Ok
}

/// Sample the panorama back into a camera frame under the given pose.
/// Writes height*width*channels pixel values and a height*width coverage
/// mask (1 where the panorama was valid at the sampled point).
///
/// # Safety
/// `pano` must be a live handle; `quat` must hold 4 readable f64 values;
/// `out_pixels` height*width*channels writable f64 values; `out_mask`
/// height*width writable i32 values (or null to skip).
#[no_mangle]
pub unsafe extern "C" fn swl_sample_pano_at_fov(
    pano: *const SwlPano,
    fov_h_deg: f64,
    fov_v_deg: f64,
    width: usize,
    height: usize,
    quat: *const f64,
    out_pixels: *mut f64,
    out_mask: *mut i32,
) -> SwlStatus {
    if pano.is_null() || quat.is_null() || out_pixels.is_null() {
        return SwlStatus::NullPointer;
    }
    let cam = match CameraModel::new(fov_h_deg, fov_v_deg, width, height) {
        Ok(c) => c,
        Err(e) => return status_of(&e),
    };
    let pose = Pose::from_rotation(read_quat(quat));
    match sample_pano_at_fov(&(*pano).0, &cam, &pose) {
        Ok((img, mask)) => {
            std::slice::from_raw_parts_mut(out_pixels, img.data().len()).copy_from_slice(img.data());
            if !out_mask.is_null() {
                for (i, m) in mask.iter().enumerate() {
                    *out_mask.add(i) = *m as i32;
                }
            }
            SwlStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}
