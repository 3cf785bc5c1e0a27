use super::{cross, dot, norm, sub, Camera, GeometryError, Scene, Vec3};
use crate::tensor::{bilinear_sample, Tensor};

/// Camera-space depth per pixel, 0 meaning "no surface".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if data.len() != height * width {
            return Err(GeometryError::Shape(format!(
                "depth map {height}x{width} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(GeometryError::Shape(
                "depths must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.get(row, col) > 0.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.data.clone()).expect("positive dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, GeometryError> {
        match t.shape() {
            &[h, w] => Self::new(h, w, t.data().to_vec()),
            other => Err(GeometryError::Shape(format!(
                "depth tensor shape {other:?}"
            ))),
        }
    }

    /// Depth at a continuous source location, if the surface there is known.
    ///
    /// Inverse depth is interpolated bilinearly when all four neighbors carry a
    /// surface (exact on planes); otherwise the nearest pixel is used.
    fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let corners = [
            self.get(y0, x0),
            self.get(y0, x1),
            self.get(y1, x0),
            self.get(y1, x1),
        ];
        if corners.iter().all(|&d| d > 0.0) {
            let fx = u - x0 as f64;
            let fy = v - y0 as f64;
            let inv = |d: f64| 1.0 / d;
            let top = inv(corners[0]) * (1.0 - fx) + inv(corners[1]) * fx;
            let bottom = inv(corners[2]) * (1.0 - fx) + inv(corners[3]) * fx;
            return Some(1.0 / (top * (1.0 - fy) + bottom * fy));
        }
        let d = self.get(v.round() as usize, u.round() as usize);
        (d > 0.0).then_some(d)
    }

    fn neighbors(&self, u: f64, v: f64) -> impl Iterator<Item = (usize, usize)> {
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        [(y0, x0), (y0, x1), (y1, x0), (y1, x1)].into_iter()
    }

    fn inv(&self, row: usize, col: usize) -> Option<f64> {
        let d = self.get(row, col);
        (d > 0.0).then(|| 1.0 / d)
    }

    /// One-sided inverse-depth slope at `(row, col)` along one axis, taking the
    /// smaller of the forward and backward differences so that the estimate
    /// stays on the surface the pixel belongs to.
    fn inv_slope(&self, row: usize, col: usize, along_cols: bool) -> f64 {
        let here = match self.inv(row, col) {
            Some(x) => x,
            None => return 0.0,
        };
        let (pos, len) = if along_cols {
            (col, self.width)
        } else {
            (row, self.height)
        };
        let at = |p: usize| {
            if along_cols {
                self.inv(row, p)
            } else {
                self.inv(p, col)
            }
        };
        let forward = (pos + 1 < len)
            .then(|| at(pos + 1))
            .flatten()
            .map(|x| x - here);
        let backward = (pos > 0).then(|| at(pos - 1)).flatten().map(|x| here - x);
        match (forward, backward) {
            (Some(f), Some(b)) => {
                if f.abs() <= b.abs() {
                    f
                } else {
                    b
                }
            }
            (Some(g), None) | (None, Some(g)) => g,
            (None, None) => 0.0,
        }
    }

    /// Depth predicted at `(u, v)` by extrapolating the surface of pixel
    /// `(row, col)` to first order in inverse depth.
    fn extrapolated_depth(&self, row: usize, col: usize, u: f64, v: f64) -> Option<f64> {
        let base = self.inv(row, col)?;
        let inv = base
            + self.inv_slope(row, col, true) * (u - col as f64)
            + self.inv_slope(row, col, false) * (v - row as f64);
        (inv > 0.0).then(|| 1.0 / inv)
    }
}

impl DepthMap {
    /// Neighbor along one axis lying on the same surface as `(row, col)`:
    /// the side with the smaller inverse-depth jump.
    fn surface_neighbor(&self, row: usize, col: usize, along_cols: bool) -> Option<(usize, usize)> {
        let here = self.inv(row, col)?;
        let (pos, len) = if along_cols {
            (col, self.width)
        } else {
            (row, self.height)
        };
        let cell = |p: usize| if along_cols { (row, p) } else { (p, col) };
        let jump = |p: usize| {
            let (r, c) = cell(p);
            self.inv(r, c).map(|x| (x - here).abs())
        };
        let forward = (pos + 1 < len)
            .then(|| jump(pos + 1).map(|j| (j, pos + 1)))
            .flatten();
        let backward = (pos > 0)
            .then(|| jump(pos - 1).map(|j| (j, pos - 1)))
            .flatten();
        match (forward, backward) {
            (Some(f), Some(b)) => Some(cell(if f.0 <= b.0 { f.1 } else { b.1 })),
            (Some(g), None) | (None, Some(g)) => Some(cell(g.1)),
            (None, None) => None,
        }
    }

    /// Distance from `point` to the tangent plane reconstructed at pixel `(row, col)`.
    fn plane_distance(&self, cam: &Camera, row: usize, col: usize, point: Vec3) -> Option<f64> {
        if self.get(row, col) <= 0.0 {
            return None;
        }
        let world = |r: usize, c: usize| cam.unproject(c as f64, r as f64, self.get(r, c));
        let p = world(row, col);
        let a = self.surface_neighbor(row, col, true)?;
        let b = self.surface_neighbor(row, col, false)?;
        let n = cross(sub(world(a.0, a.1), p), sub(world(b.0, b.1), p));
        let len = norm(n);
        (len > 0.0).then(|| dot(sub(point, p), n).abs() / len)
    }
}

/// Per destination pixel: offset into the source view and binary visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub height: usize,
    pub width: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub alpha: Vec<bool>,
    /// Destination pixels carrying a surface.
    pub valid: Vec<bool>,
}

impl CorrespondenceMap {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            du: vec![0.0; n],
            dv: vec![0.0; n],
            alpha: vec![false; n],
            valid: vec![false; n],
        }
    }

    /// Identity correspondence: zero offsets, visible wherever valid.
    pub fn identity(valid: Vec<bool>, height: usize, width: usize) -> Self {
        Self {
            alpha: valid.clone(),
            valid,
            ..Self::empty(height, width)
        }
    }

    fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// `[h, w, 4]` tensor of `(du, dv, alpha, valid)`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.du.len() * 4);
        for i in 0..self.du.len() {
            data.extend([
                self.du[i],
                self.dv[i],
                f64::from(u8::from(self.alpha[i])),
                f64::from(u8::from(self.valid[i])),
            ]);
        }
        Tensor::new(vec![self.height, self.width, 4], data).expect("positive dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, GeometryError> {
        let &[h, w, 4] = t.shape() else {
            return Err(GeometryError::Shape(format!(
                "correspondence tensor {:?}",
                t.shape()
            )));
        };
        let mut m = Self::empty(h, w);
        for (i, px) in t.data().chunks(4).enumerate() {
            m.du[i] = px[0];
            m.dv[i] = px[1];
            m.alpha[i] = px[2] > 0.5;
            m.valid[i] = px[3] > 0.5;
        }
        Ok(m)
    }
}

fn check_view(cam: &Camera, depth: &DepthMap) -> Result<(), GeometryError> {
    if cam.height != depth.height || cam.width != depth.width {
        return Err(GeometryError::Shape(format!(
            "camera {}x{} vs depth {}x{}",
            cam.height, cam.width, depth.height, depth.width
        )));
    }
    Ok(())
}

/// Where each destination pixel lands in the source view, and whether it is
/// visible there.
///
/// A pixel is visible when it projects inside the source image and the source
/// depth at that location agrees with the reprojected depth within `depth_tol`.
pub fn correspondence_map(
    src: (&Camera, &DepthMap),
    dst: (&Camera, &DepthMap),
    depth_tol: f64,
) -> Result<CorrespondenceMap, GeometryError> {
    let (src_cam, src_depth) = src;
    let (dst_cam, dst_depth) = dst;
    check_view(src_cam, src_depth)?;
    check_view(dst_cam, dst_depth)?;
    if src_depth.height != dst_depth.height || src_depth.width != dst_depth.width {
        return Err(GeometryError::Shape(format!(
            "source {}x{} vs destination {}x{}",
            src_depth.height, src_depth.width, dst_depth.height, dst_depth.width
        )));
    }
    if src_cam == dst_cam && src_depth == dst_depth {
        // Same view: skip the round trip through world space, which is only
        // exact up to round-off.
        let valid = dst_depth.data.iter().map(|&d| d > 0.0).collect();
        return Ok(CorrespondenceMap::identity(
            valid,
            dst_depth.height,
            dst_depth.width,
        ));
    }
    let mut map = CorrespondenceMap::empty(dst_depth.height, dst_depth.width);
    for row in 0..dst_depth.height {
        for col in 0..dst_depth.width {
            let d = dst_depth.get(row, col);
            if d <= 0.0 {
                continue;
            }
            let i = map.idx(row, col);
            map.valid[i] = true;
            let world = dst_cam.unproject(col as f64, row as f64, d);
            let Ok((us, vs, zs)) = src_cam.project(world) else {
                continue;
            };
            map.du[i] = us - col as f64;
            map.dv[i] = vs - row as f64;
            if !src_cam.in_bounds(us, vs) {
                continue;
            }
            let agrees = |s: f64| (s - zs).abs() <= depth_tol;
            // Interpolated depth decides on smooth surfaces. Near depth edges and
            // on strongly curved surfaces, each surrounding pixel's surface is
            // extended to the sub-pixel location and may vouch for visibility.
            let window = 2.0 * zs / src_cam.fx.min(src_cam.fy);
            map.alpha[i] = src_depth.sample(us, vs).is_some_and(agrees)
                || src_depth.neighbors(us, vs).any(|(r, c)| {
                    src_depth
                        .extrapolated_depth(r, c, us, vs)
                        .is_some_and(agrees)
                        || (src_depth.get(r, c) - zs).abs() <= window
                            && src_depth
                                .plane_distance(src_cam, r, c, world)
                                .is_some_and(|d| d <= depth_tol)
                });
        }
    }
    Ok(map)
}

/// Ray-traced correspondence, independent of rendered depth maps.
///
/// Visibility is decided by casting a ray from the source camera center to the
/// destination surface point and checking that nothing is hit first.
pub fn raytrace_correspondence(
    scene: &Scene,
    src: &Camera,
    dst: &Camera,
    tol: f64,
) -> Result<CorrespondenceMap, GeometryError> {
    if src.height != dst.height || src.width != dst.width {
        return Err(GeometryError::Shape("camera sizes differ".into()));
    }
    let mut map = CorrespondenceMap::empty(dst.height, dst.width);
    let src_center = src.center();
    for row in 0..dst.height {
        for col in 0..dst.width {
            let Some(hit) =
                scene.intersect(dst.center(), dst.ray_direction(col as f64, row as f64))
            else {
                continue;
            };
            let i = map.idx(row, col);
            map.valid[i] = true;
            let Ok((us, vs, _)) = src.project(hit.point) else {
                continue;
            };
            map.du[i] = us - col as f64;
            map.dv[i] = vs - row as f64;
            if !src.in_bounds(us, vs) {
                continue;
            }
            let to_point = super::sub(hit.point, src_center);
            let length = super::norm(to_point);
            map.alpha[i] = match scene.intersect(src_center, super::scale(to_point, 1.0 / length)) {
                Some(first) => (first.t - length).abs() <= tol,
                None => false,
            };
        }
    }
    Ok(map)
}

/// Fraction of surface-carrying destination pixels that are visible in the source.
pub fn overlap_fraction(corr: &CorrespondenceMap) -> Result<f64, GeometryError> {
    let valid = corr.valid.iter().filter(|&&v| v).count();
    if valid == 0 {
        return Err(GeometryError::UndefinedOverlap);
    }
    let visible = corr
        .alpha
        .iter()
        .zip(&corr.valid)
        .filter(|&(&a, &v)| a && v)
        .count();
    Ok(visible as f64 / valid as f64)
}

fn feature_dims(f: &Tensor) -> Result<(usize, usize, usize), GeometryError> {
    match f.shape() {
        &[h, w, d] => Ok((h, w, d)),
        other => Err(GeometryError::Shape(format!(
            "feature grid must be h x w x d, got {other:?}"
        ))),
    }
}

/// Visibility and source location of latent cell `(row, col)`.
///
/// Correspondences live at image resolution; the latent cell reads the image
/// pixel nearest its center and divides the offsets by `latent_scale`.
fn latent_lookup(
    corr: &CorrespondenceMap,
    row: usize,
    col: usize,
    latent_scale: f64,
    h: usize,
    w: usize,
) -> Option<(f64, f64)> {
    let iy =
        ((row as f64 * latent_scale + latent_scale / 2.0).floor() as usize).min(corr.height - 1);
    let ix =
        ((col as f64 * latent_scale + latent_scale / 2.0).floor() as usize).min(corr.width - 1);
    let i = corr.idx(iy, ix);
    if !corr.alpha[i] {
        return None;
    }
    let u = col as f64 + corr.du[i] / latent_scale;
    let v = row as f64 + corr.dv[i] / latent_scale;
    let inside = u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64;
    inside.then_some((u, v))
}

fn check_corr_scale(
    corr: &CorrespondenceMap,
    h: usize,
    w: usize,
    latent_scale: f64,
) -> Result<(), GeometryError> {
    let expect = |n: usize| (n as f64 * latent_scale).round() as usize;
    if !(latent_scale > 0.0) || corr.height != expect(h) || corr.width != expect(w) {
        return Err(GeometryError::Shape(format!(
            "correspondence {}x{} does not cover a {h}x{w} latent at scale {latent_scale}",
            corr.height, corr.width
        )));
    }
    Ok(())
}

/// `f(u,v) = alpha * bilinear(f_src, (u+du, v+dv)) + (1 - alpha) * f_dst(u,v)`.
///
/// Cells whose source location falls outside the grid are treated as invisible.
pub fn warp_features(
    f_src: &Tensor,
    f_dst: &Tensor,
    corr: &CorrespondenceMap,
    latent_scale: f64,
) -> Result<Tensor, GeometryError> {
    warp_features_multi(&[(f_src, corr)], f_dst, latent_scale)
}

/// Warping from several source views: visible source samples are averaged
/// before blending with the destination.
pub fn warp_features_multi(
    sources: &[(&Tensor, &CorrespondenceMap)],
    f_dst: &Tensor,
    latent_scale: f64,
) -> Result<Tensor, GeometryError> {
    let (h, w, d) = feature_dims(f_dst)?;
    for (f, corr) in sources {
        if f.shape() != f_dst.shape() {
            return Err(GeometryError::Shape(format!(
                "source features {:?} vs destination {:?}",
                f.shape(),
                f_dst.shape()
            )));
        }
        check_corr_scale(corr, h, w, latent_scale)?;
    }
    let mut out = f_dst.clone();
    for row in 0..h {
        for col in 0..w {
            let mut acc = vec![0.0; d];
            let mut hits = 0usize;
            for (f, corr) in sources {
                if let Some((u, v)) = latent_lookup(corr, row, col, latent_scale, h, w) {
                    let s = bilinear_sample(f, u, v)?;
                    acc.iter_mut().zip(s.data()).for_each(|(a, x)| *a += x);
                    hits += 1;
                }
            }
            if hits > 0 {
                let base = (row * w + col) * d;
                for (k, a) in acc.iter().enumerate() {
                    out.data_mut()[base + k] = a / hits as f64;
                }
            }
        }
    }
    Ok(out)
}
