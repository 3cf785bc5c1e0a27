#![allow(dead_code)]

use syncd::geometry::{Camera, CorrespondenceMap};

/// Camera on a sphere of radius 3 around the scene, looking slightly above the ground.
pub fn orbit_camera(azimuth_deg: f64, elevation_deg: f64, size: usize) -> Camera {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = [
        3.0 * e.cos() * a.cos(),
        3.0 * e.cos() * a.sin(),
        3.0 * e.sin(),
    ];
    Camera::look_at(eye, [0.0, 0.0, 0.2], 45.0, size, size).unwrap()
}

/// `(agreeing, compared)` pixel counts between a depth-based map and the ray-traced oracle.
///
/// Pixels count when the oracle sees a surface; they agree when validity and
/// visibility match and, if visible, the offsets match to 1e-6.
pub fn oracle_agreement(map: &CorrespondenceMap, oracle: &CorrespondenceMap) -> (usize, usize) {
    let mut agree = 0;
    let mut total = 0;
    for i in 0..map.valid.len() {
        if !oracle.valid[i] {
            continue;
        }
        total += 1;
        let same_offsets =
            (map.du[i] - oracle.du[i]).abs() < 1e-6 && (map.dv[i] - oracle.dv[i]).abs() < 1e-6;
        if map.valid[i] && map.alpha[i] == oracle.alpha[i] && (!map.alpha[i] || same_offsets) {
            agree += 1;
        }
    }
    (agree, total)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
