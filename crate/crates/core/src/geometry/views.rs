use super::{correspondence_map, overlap_fraction, Camera, DepthMap, GeometryError, Scene};
use crate::rng::Rng;

/// Camera placement used by [`select_views`].
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSampling {
    pub radius: f64,
    pub max_elevation_deg: f64,
    pub fov_deg: f64,
    pub height: usize,
    pub width: usize,
    /// Occlusion tolerance as a fraction of the scene diameter.
    pub depth_tol_fraction: f64,
    pub retry_budget: usize,
}

impl Default for ViewSampling {
    fn default() -> Self {
        Self {
            radius: 3.0,
            max_elevation_deg: 70.0,
            fov_deg: 45.0,
            height: 32,
            width: 32,
            depth_tol_fraction: 1e-3,
            retry_budget: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub depth: DepthMap,
}

impl View {
    pub fn render(scene: &Scene, camera: Camera) -> View {
        let depth = scene.render_depth(&camera);
        View { camera, depth }
    }
}

/// Camera on the upper hemisphere looking at the origin, uniform in area up
/// to `max_elevation_deg`.
pub fn sample_camera(rng: &mut Rng, opts: &ViewSampling) -> Result<Camera, GeometryError> {
    let azimuth = rng.uniform_range(0.0, std::f64::consts::TAU);
    let z = rng.uniform_range(0.0, opts.max_elevation_deg.to_radians().sin());
    let elevation = z.asin();
    let eye = [
        opts.radius * elevation.cos() * azimuth.cos(),
        opts.radius * elevation.cos() * azimuth.sin(),
        opts.radius * z,
    ];
    Camera::look_at(eye, [0.0, 0.0, 0.0], opts.fov_deg, opts.height, opts.width)
}

/// Smaller of the two directed overlaps between a pair of views.
pub fn pair_overlap(a: &View, b: &View, depth_tol: f64) -> Result<f64, GeometryError> {
    let ab = correspondence_map((&a.camera, &a.depth), (&b.camera, &b.depth), depth_tol)?;
    let ba = correspondence_map((&b.camera, &b.depth), (&a.camera, &a.depth), depth_tol)?;
    Ok(overlap_fraction(&ab)?.min(overlap_fraction(&ba)?))
}

/// Picks `n_views` cameras whose pairwise overlap is at least `min_overlap`.
///
/// Views are accepted greedily: a candidate joins the set when it overlaps
/// every view accepted so far. Each candidate draw counts against the retry
/// budget; on exhaustion the error carries the views accepted so far.
pub fn select_views(
    scene: &Scene,
    rng: &mut Rng,
    n_views: usize,
    min_overlap: f64,
    opts: &ViewSampling,
) -> Result<Vec<View>, GeometryError> {
    if n_views < 2 {
        return Err(GeometryError::InvalidArgument(format!(
            "n_views = {n_views}, need at least 2"
        )));
    }
    let depth_tol = opts.depth_tol_fraction * scene.diameter();
    let mut accepted: Vec<View> = Vec::with_capacity(n_views);
    let mut attempts = 0;
    while accepted.len() < n_views {
        if attempts >= opts.retry_budget + n_views {
            return Err(GeometryError::SelectionFailed {
                attempts,
                best: accepted,
            });
        }
        attempts += 1;
        let view = View::render(scene, sample_camera(rng, opts)?);
        if view.depth.data().iter().all(|&d| d == 0.0) {
            continue;
        }
        let mut ok = true;
        for other in &accepted {
            if pair_overlap(other, &view, depth_tol)? < min_overlap {
                ok = false;
                break;
            }
        }
        if ok {
            accepted.push(view);
        }
    }
    Ok(accepted)
}
