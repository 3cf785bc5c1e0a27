use std::fmt::Write as _;

use super::{
    add, cross, dot, mat_t_vec, mat_vec, normalize, scale, sub, GeometryError, Mat3, Vec3,
};
use crate::tensor::Tensor;

/// Pinhole camera. `rotation`/`translation` map world points into camera
/// space (x right, y down, z forward); pixel centers sit at integer
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub height: usize,
    pub width: usize,
}

fn check_rotation(r: &Mat3) -> Result<(), GeometryError> {
    for i in 0..3 {
        for j in 0..3 {
            let d = dot(r[i], r[j]);
            let want = if i == j { 1.0 } else { 0.0 };
            if (d - want).abs() > 1e-9 {
                return Err(GeometryError::InvalidCamera(
                    "rotation is not orthonormal".into(),
                ));
            }
        }
    }
    let det = dot(r[0], cross(r[1], r[2]));
    if (det - 1.0).abs() > 1e-9 {
        return Err(GeometryError::InvalidCamera(format!(
            "rotation determinant {det}"
        )));
    }
    Ok(())
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        height: usize,
        width: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths {fx}, {fy}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            height,
            width,
        })
    }

    /// Camera at `eye` looking at `target`, with world `+z` as up and the
    /// principal point at the image center. `fov_deg` is horizontal.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        fov_deg: f64,
        height: usize,
        width: usize,
    ) -> Result<Self, GeometryError> {
        let forward = normalize(sub(target, eye));
        let mut right = cross(forward, [0.0, 0.0, 1.0]);
        if dot(right, right) < 1e-18 {
            right = cross(forward, [0.0, 1.0, 0.0]);
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = scale(mat_vec(&rotation, eye), -1.0);
        let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            height,
            width,
        )
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vec3 {
        scale(mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    /// `(u, v, depth)` of a world point.
    pub fn project(&self, p: Vec3) -> Result<(f64, f64, f64), GeometryError> {
        let [x, y, z] = self.world_to_camera(p);
        if z <= 0.0 {
            return Err(GeometryError::BehindCamera { depth: z });
        }
        Ok((self.fx * x / z + self.cx, self.fy * y / z + self.cy, z))
    }

    /// World point at camera-space depth `depth` along pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let pc = [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ];
        mat_t_vec(&self.rotation, sub(pc, self.translation))
    }

    /// World-space ray direction through pixel `(u, v)`, scaled so that the
    /// ray parameter equals camera-space depth.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        mat_t_vec(
            &self.rotation,
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0],
        )
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Applies a world-space rigid motion `p -> r p + t` to the camera, so
    /// that projections of moved points are unchanged.
    pub fn transformed(&self, r: &Mat3, t: Vec3) -> Camera {
        // New extrinsics: R' = R r^T, t' = t_cam - R r^T t
        let rt = super::transpose(r);
        let rotation = super::mat_mul(&self.rotation, &rt);
        let translation = sub(self.translation, mat_vec(&rotation, t));
        Camera {
            rotation,
            translation,
            ..self.clone()
        }
    }

    /// Flat record: `fx fy cx cy`, row-major rotation, translation.
    pub fn to_record(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        out[..4].copy_from_slice(&[self.fx, self.fy, self.cx, self.cy]);
        for (i, row) in self.rotation.iter().enumerate() {
            out[4 + 3 * i..7 + 3 * i].copy_from_slice(row);
        }
        out[13..].copy_from_slice(&self.translation);
        out
    }

    pub fn from_record(
        record: &[f64; 16],
        height: usize,
        width: usize,
    ) -> Result<Self, GeometryError> {
        let row = |i: usize| [record[4 + 3 * i], record[5 + 3 * i], record[6 + 3 * i]];
        Self::new(
            record[0],
            record[1],
            record[2],
            record[3],
            [row(0), row(1), row(2)],
            [record[13], record[14], record[15]],
            height,
            width,
        )
    }

    /// 4x4 homogeneous projection `K [R | t]` padded with a final `[0 0 0 1]` row.
    pub fn projection_matrix(&self) -> Tensor {
        let k = [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ];
        let mut m = Tensor::zeros(&[4, 4]);
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for (l, krow) in k[i].iter().enumerate() {
                    let e = if j < 3 {
                        self.rotation[l][j]
                    } else {
                        self.translation[l]
                    };
                    acc += krow * e;
                }
                m.set(&[i, j], acc);
            }
        }
        m.set(&[3, 3], 1.0);
        m
    }
}

/// Text sidecar: one camera per line, `height width` followed by the 16-value
/// record, whitespace separated.
pub fn cameras_to_text(cams: &[Camera]) -> String {
    let mut out = String::new();
    for c in cams {
        write!(out, "{} {}", c.height, c.width).unwrap();
        for x in c.to_record() {
            write!(out, " {x:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cameras_from_text(text: &str) -> Result<Vec<Camera>, GeometryError> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|line| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 18 {
                return Err(GeometryError::Parse(format!(
                    "expected 18 fields, got {}",
                    fields.len()
                )));
            }
            let dim = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| GeometryError::Parse(e.to_string()))
            };
            let mut rec = [0.0; 16];
            for (slot, s) in rec.iter_mut().zip(&fields[2..]) {
                *slot = s
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| GeometryError::Parse(e.to_string()))?;
            }
            Camera::from_record(&rec, dim(fields[0])?, dim(fields[1])?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn identity_cam(fx: f64) -> Camera {
        Camera::new(fx, fx, 0.0, 0.0, super::super::IDENTITY, [0.0; 3], 4, 4).unwrap()
    }

    #[test]
    fn projection_examples() {
        assert_eq!(
            identity_cam(1.0).project([0.0, 0.0, 1.0]).unwrap(),
            (0.0, 0.0, 1.0)
        );
        assert_eq!(identity_cam(2.0).project([1.0, 0.0, 1.0]).unwrap().0, 2.0);
        assert!(matches!(
            identity_cam(1.0).project([0.0, 0.0, -1.0]),
            Err(GeometryError::BehindCamera { .. })
        ));
    }

    #[test]
    fn projection_matches_homogeneous_pipeline() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let eye = [
                rng.uniform_range(-4.0, 4.0),
                rng.uniform_range(-4.0, 4.0),
                rng.uniform_range(0.5, 4.0),
            ];
            let cam =
                Camera::look_at(eye, [0.0; 3], rng.uniform_range(30.0, 80.0), 24, 32).unwrap();
            let p = [
                rng.uniform_range(-0.5, 0.5),
                rng.uniform_range(-0.5, 0.5),
                rng.uniform_range(-0.5, 0.5),
            ];
            let m = cam.projection_matrix();
            let h = Tensor::new(vec![4, 1], vec![p[0], p[1], p[2], 1.0]).unwrap();
            let x = m.matmul(&h).unwrap();
            let (u, v, z) = cam.project(p).unwrap();
            assert!((u - x.data()[0] / x.data()[2]).abs() < 1e-9);
            assert!((v - x.data()[1] / x.data()[2]).abs() < 1e-9);
            assert!((z - x.data()[2]).abs() < 1e-9);
            let back = cam.unproject(u, v, z);
            assert!(sub(back, p).iter().all(|d| d.abs() < 1e-9));
        }
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotations() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, super::super::IDENTITY, [0.0; 3], 2, 2).is_err());
        let flip = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, flip, [0.0; 3], 2, 2).is_err());
    }

    #[test]
    fn text_sidecar_round_trip() {
        let cam = Camera::look_at([2.0, 1.0, 1.5], [0.0; 3], 50.0, 16, 20).unwrap();
        let text = cameras_to_text(&[cam.clone(), cam.clone()]);
        assert_eq!(cameras_from_text(&text).unwrap(), vec![cam.clone(), cam]);
        assert!(cameras_from_text("1 2 3").is_err());
    }
}
