use super::{
    add, cross, dot, mat_mul, mat_t_vec, mat_vec, norm, normalize, scale, sub, Camera, DepthMap,
    Mat3, Vec3,
};
use crate::attention::ForegroundMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Bounded rectangle spanned by `axis_u` and `normal x axis_u`.
    Quad {
        center: Vec3,
        normal: Vec3,
        axis_u: Vec3,
        half_u: f64,
        half_v: f64,
    },
    /// Oriented box; the columns of `rotation` are the box axes in world space.
    Box {
        center: Vec3,
        rotation: Mat3,
        half: Vec3,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Object primitives make up the foreground; the rest is background.
    pub object: bool,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter of the hit.
    pub t: f64,
    pub primitive: usize,
    pub point: Vec3,
}

/// A procedural scene of textured spheres, boxes and quads.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

fn intersect_shape(shape: &Shape, origin: Vec3, dir: Vec3) -> Option<f64> {
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = sub(origin, *center);
            let a = dot(dir, dir);
            let b = dot(oc, dir);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            [(-b - sq) / a, (-b + sq) / a]
                .into_iter()
                .find(|&t| t > HIT_EPS)
        }
        Shape::Quad {
            center,
            normal,
            axis_u,
            half_u,
            half_v,
        } => {
            let denom = dot(dir, *normal);
            if denom.abs() < 1e-15 {
                return None;
            }
            let t = dot(sub(*center, origin), *normal) / denom;
            if t <= HIT_EPS {
                return None;
            }
            let rel = sub(add(origin, scale(dir, t)), *center);
            let axis_v = cross(*normal, *axis_u);
            (dot(rel, *axis_u).abs() <= *half_u && dot(rel, axis_v).abs() <= *half_v).then_some(t)
        }
        Shape::Box {
            center,
            rotation,
            half,
        } => {
            // Slab test in box coordinates.
            let o = mat_t_vec(rotation, sub(origin, *center));
            let d = mat_t_vec(rotation, dir);
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if d[k].abs() < 1e-15 {
                    if o[k].abs() > half[k] {
                        return None;
                    }
                    continue;
                }
                let a = (-half[k] - o[k]) / d[k];
                let b = (half[k] - o[k]) / d[k];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            if t0 > t1 {
                return None;
            }
            [t0, t1].into_iter().find(|&t| t > HIT_EPS)
        }
    }
}

fn shape_bounds(shape: &Shape) -> (Vec3, f64) {
    match shape {
        Shape::Sphere { center, radius } => (*center, *radius),
        Shape::Quad {
            center,
            half_u,
            half_v,
            ..
        } => (*center, half_u.hypot(*half_v)),
        Shape::Box { center, half, .. } => (*center, norm(*half)),
    }
}

fn color_name(rgb: [f64; 3]) -> &'static str {
    const PALETTE: [(&str, [f64; 3]); 9] = [
        ("red", [0.85, 0.15, 0.15]),
        ("green", [0.2, 0.75, 0.25]),
        ("blue", [0.2, 0.3, 0.85]),
        ("yellow", [0.9, 0.85, 0.2]),
        ("purple", [0.6, 0.25, 0.75]),
        ("cyan", [0.2, 0.8, 0.85]),
        ("orange", [0.95, 0.55, 0.15]),
        ("white", [0.9, 0.9, 0.9]),
        ("dark", [0.2, 0.2, 0.2]),
    ];
    PALETTE
        .iter()
        .min_by(|a, b| {
            let d = |c: &[f64; 3]| {
                c.iter()
                    .zip(&rgb)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            };
            d(&a.1).total_cmp(&d(&b.1))
        })
        .map(|(name, _)| *name)
        .expect("palette is not empty")
}

fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

impl Scene {
    /// First intersection along `origin + t dir`, `t > 0`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| intersect_shape(&p.shape, origin, dir).map(|t| (i, t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(primitive, t)| Hit {
                t,
                primitive,
                point: add(origin, scale(dir, t)),
            })
    }

    /// Diameter of a sphere enclosing every primitive, centered at the origin.
    pub fn diameter(&self) -> f64 {
        2.0 * self
            .primitives
            .iter()
            .map(|p| {
                let (c, r) = shape_bounds(&p.shape);
                norm(c) + r
            })
            .fold(0.0, f64::max)
    }

    /// Diameter of the foreground objects alone.
    pub fn object_radius(&self) -> f64 {
        self.primitives
            .iter()
            .filter(|p| p.object)
            .map(|p| {
                let (c, r) = shape_bounds(&p.shape);
                norm(c) + r
            })
            .fold(0.0, f64::max)
    }

    /// A ground quad plus one to three random objects near the origin.
    pub fn procedural(seed: u64) -> Scene {
        let mut rng = Rng::new(seed);
        let mut primitives = vec![Primitive {
            shape: Shape::Quad {
                center: [0.0, 0.0, 0.0],
                normal: [0.0, 0.0, 1.0],
                axis_u: [1.0, 0.0, 0.0],
                half_u: 2.5,
                half_v: 2.5,
            },
            object: false,
            albedo: [0.45, 0.42, 0.38],
        }];
        let count = 1 + rng.below(3) as usize;
        for k in 0..count {
            let albedo = [rng.uniform(), rng.uniform(), rng.uniform()];
            let angle =
                std::f64::consts::TAU * (k as f64 / count as f64) + rng.uniform_range(-0.3, 0.3);
            let offset = if count == 1 {
                0.0
            } else {
                rng.uniform_range(0.2, 0.45)
            };
            let base = [offset * angle.cos(), offset * angle.sin(), 0.0];
            let shape = if rng.bernoulli(0.5) {
                let radius = rng.uniform_range(0.2, 0.4);
                Shape::Sphere {
                    center: add(base, [0.0, 0.0, radius]),
                    radius,
                }
            } else {
                let half = [
                    rng.uniform_range(0.12, 0.3),
                    rng.uniform_range(0.12, 0.3),
                    rng.uniform_range(0.12, 0.35),
                ];
                Shape::Box {
                    center: add(base, [0.0, 0.0, half[2]]),
                    rotation: rotation_z(rng.uniform_range(0.0, std::f64::consts::PI)),
                    half,
                }
            };
            primitives.push(Primitive {
                shape,
                object: true,
                albedo,
            });
        }
        Scene {
            primitives,
            background: [0.7, 0.8, 0.95],
        }
    }

    /// A single sphere of the given radius centered at the origin.
    pub fn sphere(radius: f64) -> Scene {
        Scene {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius,
                },
                object: true,
                albedo: [0.8, 0.3, 0.2],
            }],
            background: [0.0; 3],
        }
    }

    /// Applies the rigid motion `p -> r p + t` to every primitive.
    pub fn transformed(&self, r: &Mat3, t: Vec3) -> Scene {
        let move_point = |p: Vec3| add(mat_vec(r, p), t);
        let primitives = self
            .primitives
            .iter()
            .map(|p| {
                let shape = match &p.shape {
                    Shape::Sphere { center, radius } => Shape::Sphere {
                        center: move_point(*center),
                        radius: *radius,
                    },
                    Shape::Quad {
                        center,
                        normal,
                        axis_u,
                        half_u,
                        half_v,
                    } => Shape::Quad {
                        center: move_point(*center),
                        normal: mat_vec(r, *normal),
                        axis_u: mat_vec(r, *axis_u),
                        half_u: *half_u,
                        half_v: *half_v,
                    },
                    Shape::Box {
                        center,
                        rotation,
                        half,
                    } => Shape::Box {
                        center: move_point(*center),
                        rotation: mat_mul(r, rotation),
                        half: *half,
                    },
                };
                Primitive { shape, ..p.clone() }
            })
            .collect();
        Scene {
            primitives,
            background: self.background,
        }
    }

    /// Short object description such as `"red sphere and blue box"`.
    pub fn description(&self) -> String {
        let names: Vec<String> = self
            .primitives
            .iter()
            .filter(|p| p.object)
            .map(|p| {
                let kind = match p.shape {
                    Shape::Sphere { .. } => "sphere",
                    Shape::Quad { .. } => "panel",
                    Shape::Box { .. } => "box",
                };
                format!("{} {kind}", color_name(p.albedo))
            })
            .collect();
        if names.is_empty() {
            "empty ground".to_string()
        } else {
            names.join(" and ")
        }
    }

    fn hit_pixel(&self, cam: &Camera, row: usize, col: usize) -> Option<Hit> {
        self.intersect(cam.center(), cam.ray_direction(col as f64, row as f64))
    }

    /// Camera-space depth per pixel; 0 where the ray escapes.
    pub fn render_depth(&self, cam: &Camera) -> DepthMap {
        let mut data = vec![0.0; cam.height * cam.width];
        for row in 0..cam.height {
            for col in 0..cam.width {
                if let Some(hit) = self.hit_pixel(cam, row, col) {
                    data[row * cam.width + col] = hit.t;
                }
            }
        }
        DepthMap::new(cam.height, cam.width, data).expect("ray depths are positive")
    }

    /// Pixels covered by object primitives.
    pub fn render_mask(&self, cam: &Camera) -> ForegroundMask {
        let cells = (0..cam.height * cam.width)
            .map(|i| {
                self.hit_pixel(cam, i / cam.width, i % cam.width)
                    .is_some_and(|h| self.primitives[h.primitive].object)
            })
            .collect();
        ForegroundMask::new(cam.height, cam.width, cells).expect("mask matches camera")
    }

    /// Checker-textured, head-light shaded color image (`h x w x 3`, values in `[0, 1]`).
    pub fn render_color(&self, cam: &Camera) -> Tensor {
        let mut out = Tensor::zeros(&[cam.height, cam.width, 3]);
        let center = cam.center();
        for row in 0..cam.height {
            for col in 0..cam.width {
                let dir = cam.ray_direction(col as f64, row as f64);
                let color = match self.intersect(center, dir) {
                    None => self.background,
                    Some(hit) => {
                        let prim = &self.primitives[hit.primitive];
                        let n = self.normal_at(prim, hit.point);
                        let shade = 0.35 + 0.65 * dot(n, normalize(scale(dir, -1.0))).abs();
                        let p = hit.point;
                        let checker = ((p[0] * 6.0).floor()
                            + (p[1] * 6.0).floor()
                            + (p[2] * 6.0).floor()) as i64;
                        let tex = if checker.rem_euclid(2) == 0 { 1.0 } else { 0.8 };
                        prim.albedo.map(|a| (a * shade * tex).clamp(0.0, 1.0))
                    }
                };
                for (c, &value) in color.iter().enumerate() {
                    out.set(&[row, col, c], value);
                }
            }
        }
        out
    }

    fn normal_at(&self, prim: &Primitive, p: Vec3) -> Vec3 {
        match &prim.shape {
            Shape::Sphere { center, .. } => normalize(sub(p, *center)),
            Shape::Quad { normal, .. } => *normal,
            Shape::Box {
                center,
                rotation,
                half,
            } => {
                let local = mat_t_vec(rotation, sub(p, *center));
                let k = (0..3)
                    .max_by(|&a, &b| {
                        (local[a].abs() / half[a]).total_cmp(&(local[b].abs() / half[b]))
                    })
                    .unwrap();
                let mut n = [0.0; 3];
                n[k] = local[k].signum();
                mat_vec(rotation, n)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_scene_is_deterministic() {
        assert_eq!(Scene::procedural(5), Scene::procedural(5));
        assert_ne!(Scene::procedural(5), Scene::procedural(6));
    }

    #[test]
    fn sphere_hit_distance() {
        let s = Scene::sphere(1.0);
        let hit = s.intersect([0.0, 0.0, -5.0], [0.0, 0.0, 1.0]).unwrap();
        assert!((hit.t - 4.0).abs() < 1e-12);
        assert!(s.intersect([0.0, 2.0, -5.0], [0.0, 0.0, 1.0]).is_none());
    }

    #[test]
    fn box_and_quad_hits() {
        let b = Scene {
            primitives: vec![Primitive {
                shape: Shape::Box {
                    center: [0.0; 3],
                    rotation: rotation_z(0.3),
                    half: [0.5, 0.5, 0.5],
                },
                object: true,
                albedo: [1.0; 3],
            }],
            background: [0.0; 3],
        };
        let hit = b.intersect([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((hit.t - 2.5).abs() < 1e-12);
        let g = Scene::procedural(1);
        let hit = g.intersect([2.0, 2.0, 1.0], [0.0, 0.0, -1.0]).unwrap();
        assert_eq!(hit.primitive, 0);
        assert!((hit.t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depth_map_matches_camera_depth() {
        let scene = Scene::procedural(2);
        let cam = Camera::look_at([2.0, -1.5, 1.6], [0.0, 0.0, 0.2], 50.0, 12, 16).unwrap();
        let depth = scene.render_depth(&cam);
        for row in 0..12 {
            for col in 0..16 {
                let d = depth.get(row, col);
                if d > 0.0 {
                    let p = cam.unproject(col as f64, row as f64, d);
                    let (u, v, z) = cam.project(p).unwrap();
                    assert!((u - col as f64).abs() < 1e-9 && (v - row as f64).abs() < 1e-9);
                    assert!((z - d).abs() < 1e-9);
                }
            }
        }
        let mask = scene.render_mask(&cam);
        assert!(mask.count() > 0);
    }
}
