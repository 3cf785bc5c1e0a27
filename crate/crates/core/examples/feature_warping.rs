//! Pixel correspondences between two rendered views of a procedural scene,
//! checked against ray tracing, and used to warp features across views.
//!
//! Run with `cargo run --example feature_warping [SCENE_SEED]`.

use syncd::geometry::{
    correspondence_map, overlap_fraction, raytrace_correspondence, select_views, warp_features,
    Scene, ViewSampling,
};
use syncd::{Rng, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(4), |s| s.parse())?;
    let scene = Scene::procedural(seed);
    println!("scene: {}", scene.description());

    let opts = ViewSampling {
        height: 64,
        width: 64,
        ..ViewSampling::default()
    };
    let views = select_views(&scene, &mut Rng::new(seed), 2, 0.1, &opts)?;
    let (a, b) = (&views[0], &views[1]);
    let tol = opts.depth_tol_fraction * scene.diameter();

    let corr = correspondence_map((&a.camera, &a.depth), (&b.camera, &b.depth), tol)?;
    let traced = raytrace_correspondence(&scene, &a.camera, &b.camera, tol)?;
    let compared = traced.valid.iter().filter(|&&v| v).count();
    let agree = (0..corr.valid.len())
        .filter(|&i| traced.valid[i] && corr.valid[i] && corr.alpha[i] == traced.alpha[i])
        .count();
    println!(
        "overlap of view 1 in view 0: {:.3}; visibility agrees with ray tracing on {agree}/{compared} pixels",
        overlap_fraction(&corr)?
    );

    // Warp a feature grid: the destination takes the source's values wherever
    // the surface is visible in both views.
    let src = scene.render_color(&a.camera);
    let dst = Tensor::zeros(src.shape());
    let warped = warp_features(&src, &dst, &corr, 1.0)?;
    let filled = warped
        .data()
        .chunks(3)
        .filter(|px| px.iter().any(|&v| v != 0.0))
        .count();
    println!("warped colors filled {filled} of {} pixels", 64 * 64);
    Ok(())
}
