use syncd::denoiser::{denoiser_forward, Conditioning, DenoiserParams, ModelConfig, NoiseSchedule};
use syncd::sampler::{
    euler_sample, euler_sample_with, guidance_combine, Branch, DenoiserModel, GuidanceConfig,
    GuidanceMode, GuidanceStep, SamplerError,
};
use syncd::{Rng, Tensor};

fn no_guidance() -> GuidanceConfig {
    GuidanceConfig {
        lambda_i: 0.0,
        lambda_i_ramp: 0.0,
        lambda_c: 0.0,
        mode: GuidanceMode::Normalized,
    }
}

#[test]
fn constant_flow_recovers_clean_sample() {
    let sched = NoiseSchedule::flow(1000);
    let mut truth_rng = Rng::new(11);
    let x0 = Tensor::randn(&[4, 4, 3], &mut truth_rng);
    for steps in [1, 10, 30] {
        let mut rng = Rng::new(5);
        let eps = Tensor::randn(&[4, 4, 3], &mut rng.clone());
        let v = eps.sub(&x0).unwrap();
        let model = |_: &Tensor, _: f64, _: Branch| Ok(v.clone());
        let out =
            euler_sample(&model, &sched, &no_guidance(), &[4, 4, 3], &mut rng, steps).unwrap();
        assert!(
            out.max_abs_diff(&x0) < 1e-12,
            "steps {steps}: {}",
            out.max_abs_diff(&x0)
        );
    }
}

#[test]
fn zero_weights_match_unguided_sampling() {
    let cfg = ModelConfig {
        height: 4,
        width: 4,
        ..ModelConfig::default()
    };
    let params = DenoiserParams::init(cfg.clone(), 3).unwrap();
    let sched = NoiseSchedule::flow(1000);
    let mut rng = Rng::new(8);
    let refs = vec![Tensor::randn(&cfg.latent_shape(), &mut rng)];
    let ref_noise = vec![Tensor::randn(&cfg.latent_shape(), &mut rng)];
    let caption = Tensor::randn(&[cfg.text_len, cfg.text_dim], &mut rng);
    let model = DenoiserModel {
        params: &params,
        sched: &sched,
        caption: Some(&caption),
        negative: None,
        refs: &refs,
        ref_noise: &ref_noise,
        depth: None,
    };
    let guided = euler_sample(
        &model,
        &sched,
        &no_guidance(),
        &cfg.latent_shape(),
        &mut Rng::new(1),
        6,
    )
    .unwrap();
    let plain = |x: &Tensor, t: f64, _: Branch| {
        let cond = Conditioning {
            caption: None,
            refs: &refs,
            ref_noise: &ref_noise,
            depth: None,
            ref_rows: None,
        };
        Ok::<_, SamplerError>(denoiser_forward(&params, &sched, x, t, &cond)?)
    };
    let unguided = euler_sample(
        &plain,
        &sched,
        &no_guidance(),
        &cfg.latent_shape(),
        &mut Rng::new(1),
        6,
    )
    .unwrap();
    assert_eq!(guided, unguided);
}

#[test]
fn equal_guidance_norms_make_modes_agree() {
    let mut rng = Rng::new(2);
    let uncond = Tensor::randn(&[5, 2], &mut rng);
    let g = Tensor::randn(&[5, 2], &mut rng);
    let step = GuidanceStep {
        eps_base: uncond.sub(&g).unwrap(),
        eps_full: uncond.add(&g.scale(-1.0)).unwrap(),
        eps_uncond: uncond,
    };
    let a = guidance_combine(&step, GuidanceMode::Normalized, 1.5, 0.7).unwrap();
    let b = guidance_combine(&step, GuidanceMode::Vanilla, 1.5, 0.7).unwrap();
    let c = guidance_combine(&step, GuidanceMode::Rescale { phi: 0.0 }, 1.5, 0.7).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12 && b.max_abs_diff(&c) < 1e-15);
}

#[test]
fn non_finite_state_reports_step() {
    let sched = NoiseSchedule::flow(100);
    let model = |x: &Tensor, t: f64, _: Branch| {
        Ok(if t < 60.0 {
            x.map(|_| f64::NAN)
        } else {
            x.clone()
        })
    };
    let err = euler_sample(
        &model,
        &sched,
        &no_guidance(),
        &[2, 2, 1],
        &mut Rng::new(0),
        10,
    )
    .unwrap_err();
    assert!(
        matches!(err, SamplerError::Divergence { step: 5 }),
        "{err:?}"
    );
}

#[test]
fn hook_sees_every_step() {
    let sched = NoiseSchedule::diffusion(100);
    let model = |x: &Tensor, _: f64, _: Branch| Ok(x.scale(0.1));
    let mut seen = Vec::new();
    euler_sample_with(
        &model,
        &sched,
        &no_guidance(),
        Tensor::full(&[1, 1, 1], 1.0),
        4,
        |i, _| {
            seen.push(i);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2, 3]);
}
