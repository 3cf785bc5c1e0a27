//! Three-branch guided sampling with each combiner, plus a look at how the
//! normalized combiner caps the image-guidance magnitude.
//!
//! Run with `cargo run --example guided_sampling [CHECKPOINT_DIR]`. Without a
//! checkpoint the model has random weights, which is enough to compare modes.

use syncd::denoiser::{
    embed_caption, load_checkpoint, render_object_sets, DenoiserParams, ModelConfig, NoiseSchedule,
};
use syncd::sampler::{
    euler_sample, guidance_combine, guidance_step, DenoiserModel, GuidanceConfig, GuidanceMode,
};
use syncd::{Rng, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = match std::env::args().nth(1) {
        Some(dir) => load_checkpoint(dir.as_ref())?.0,
        None => DenoiserParams::init(ModelConfig::default(), 0)?,
    };
    let cfg = &params.config;
    let sched = NoiseSchedule::flow(1000);
    let shape = cfg.latent_shape();

    let set = render_object_sets(1, 3, cfg.height, cfg.width, 5)?.remove(0);
    let refs = &set.images[1..];
    let mut rng = Rng::new(11);
    let ref_noise: Vec<Tensor> = refs
        .iter()
        .map(|_| Tensor::randn(&shape, &mut rng))
        .collect();
    let caption = embed_caption(&set.description, cfg.text_len, cfg.text_dim);
    let model = DenoiserModel {
        params: &params,
        sched: &sched,
        caption: Some(&caption),
        negative: None,
        refs,
        ref_noise: &ref_noise,
        depth: None,
    };

    let x = Tensor::randn(&shape, &mut Rng::new(12));
    let step = guidance_step(&model, &x, 600.0)?;
    println!(
        "at t=600: |g_I| = {:.3}, |g_c| = {:.3}",
        step.g_image()?.norm(),
        step.g_text()?.norm()
    );
    for mode in [
        GuidanceMode::Normalized,
        GuidanceMode::Vanilla,
        GuidanceMode::Rescale { phi: 0.6 },
    ] {
        let combined = guidance_combine(&step, mode, 8.0, 7.5)?;
        let guidance = GuidanceConfig {
            lambda_i: 8.0,
            lambda_i_ramp: 5.0,
            lambda_c: 7.5,
            mode,
        };
        let sample = euler_sample(&model, &sched, &guidance, &shape, &mut Rng::new(13), 30)?;
        let peak = sample.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!(
            "{mode:?}: |guided prediction - uncond| = {:.3}, final sample max |x| = {peak:.3}",
            combined.sub(&step.eps_uncond)?.norm()
        );
    }
    Ok(())
}
