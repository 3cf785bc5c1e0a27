//! Cameras, procedural scenes, cross-view correspondences and feature warping.

mod camera;
mod correspondence;
mod scene;
mod views;

use thiserror::Error;

pub use camera::{cameras_from_text, cameras_to_text, Camera};
pub use correspondence::{
    correspondence_map, overlap_fraction, raytrace_correspondence, warp_features,
    warp_features_multi, CorrespondenceMap, DepthMap,
};
pub use scene::{Hit, Primitive, Scene, Shape};
pub use views::{pair_overlap, sample_camera, select_views, View, ViewSampling};

use crate::tensor::TensorError;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("overlap undefined: destination has no valid depth")]
    UndefinedOverlap,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("view selection failed after {attempts} attempts ({} views accepted)", best.len())]
    SelectionFailed { attempts: usize, best: Vec<View> },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// `m^T v`.
pub(crate) fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for (row, &x) in m.iter().zip(&v) {
        for k in 0..3 {
            out[k] += row[k] * x;
        }
    }
    out
}

pub(crate) fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation by `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
