use crate::attention::{
    attention_oracle, build_msa_mask, msa_forward, rope_grid, AttentionBatch, ForegroundMask,
    TokenLayout,
};
use crate::denoiser::{
    gradient_check, DenoiserParams, ModelConfig, NoiseSchedule, ReferenceMode, TrainSample,
};
use crate::geometry::{
    correspondence_map, raytrace_correspondence, Camera, CorrespondenceMap, Scene, View,
};
use crate::rng::Rng;
use crate::sampler::{
    euler_sample, guidance_combine_normalized, Branch, GuidanceConfig, GuidanceMode, GuidanceStep,
};
use crate::tensor::Tensor;

/// One `PASS`/`FAIL` line per invariant.
#[derive(Debug, Clone, Default)]
pub struct SelftestReport {
    pub lines: Vec<String>,
    pub failed: usize,
}

impl SelftestReport {
    fn check(&mut self, name: &str, result: Result<String, String>) {
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        self.lines.push(format!("{tag} {name}: {detail}"));
    }
}

fn within(value: f64, bound: f64, what: &str) -> Result<String, String> {
    let text = format!("{what} {value:.3e} (bound {bound:.0e})");
    if value <= bound {
        Ok(text)
    } else {
        Err(text)
    }
}

fn random_batch(rng: &mut Rng, n_img: usize, n: usize, heads: usize, hd: usize) -> AttentionBatch {
    let mut draw = || -> Vec<Tensor> {
        (0..n_img)
            .map(|_| Tensor::randn(&[n, heads * hd], rng))
            .collect()
    };
    let (q, k, v) = (draw(), draw(), draw());
    AttentionBatch {
        q,
        k,
        v,
        heads,
        head_dim: hd,
    }
}

fn random_masks(rng: &mut Rng, n_img: usize, h: usize, w: usize) -> Vec<ForegroundMask> {
    (0..n_img)
        .map(|_| {
            ForegroundMask::new(h, w, (0..h * w).map(|_| rng.bernoulli(0.5)).collect())
                .expect("mask size matches")
        })
        .collect()
}

fn attention_matches_oracle() -> Result<String, String> {
    let mut rng = Rng::new(1);
    let layout = TokenLayout::new(3, 2, 2, 3).map_err(|e| e.to_string())?;
    let batch = random_batch(&mut rng, 3, layout.per_image(), 2, 4);
    let fg = random_masks(&mut rng, 3, 2, 3);
    let masks = build_msa_mask(&layout, &fg, false).map_err(|e| e.to_string())?;
    let grid = rope_grid(&layout);
    let mut worst: f64 = 0.0;
    for pos in [None, Some(&grid)] {
        let fast = msa_forward(&batch, &masks, pos).map_err(|e| e.to_string())?;
        let slow = attention_oracle(&batch, &masks, pos).map_err(|e| e.to_string())?;
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    within(worst, 1e-10, "max deviation")
}

/// Values behind keys blocked for image `i` must not reach image `i`'s output.
fn blocked_keys_are_ignored() -> Result<String, String> {
    let mut rng = Rng::new(2);
    let layout = TokenLayout::new(3, 2, 3, 3).map_err(|e| e.to_string())?;
    let n = layout.per_image();
    let batch = random_batch(&mut rng, 3, n, 2, 4);
    let fg = random_masks(&mut rng, 3, 3, 3);
    let masks = build_msa_mask(&layout, &fg, false).map_err(|e| e.to_string())?;
    let base = msa_forward(&batch, &masks, None).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let mut probe = batch.clone();
        for j in (0..3).filter(|&j| j != i) {
            for tok in 0..n {
                if masks[i].is_blocked(layout.text_len, j * n + tok) {
                    for v in probe.v[j].row_mut(tok) {
                        *v += 10.0 + rng.normal();
                    }
                }
            }
        }
        let out = msa_forward(&probe, &masks, None).map_err(|e| e.to_string())?;
        worst = worst.max(out[i].max_abs_diff(&base[i]));
    }
    within(worst, 1e-12, "output change")
}

fn orbit(azimuth_deg: f64, size: usize) -> Result<Camera, String> {
    let (a, e) = (azimuth_deg.to_radians(), 30f64.to_radians());
    let eye = [
        3.0 * e.cos() * a.cos(),
        3.0 * e.cos() * a.sin(),
        3.0 * e.sin(),
    ];
    Camera::look_at(eye, [0.0, 0.0, 0.2], 45.0, size, size).map_err(|e| e.to_string())
}

fn identity_correspondence() -> Result<String, String> {
    let scene = Scene::procedural(3);
    let view = View::render(&scene, orbit(20.0, 32)?);
    let map = correspondence_map(
        (&view.camera, &view.depth),
        (&view.camera, &view.depth),
        1e-3 * scene.diameter(),
    )
    .map_err(|e| e.to_string())?;
    let valid: Vec<bool> = view.depth.data().iter().map(|&d| d > 0.0).collect();
    if map == CorrespondenceMap::identity(valid, 32, 32) {
        Ok("exact identity".into())
    } else {
        Err("same-view map is not the identity".into())
    }
}

fn correspondence_matches_raytrace() -> Result<String, String> {
    let (mut agree, mut total) = (0usize, 0usize);
    for seed in 0..5 {
        let scene = Scene::procedural(seed);
        let tol = 1e-3 * scene.diameter();
        let src = View::render(&scene, orbit(0.0, 128)?);
        let dst = View::render(&scene, orbit(40.0, 128)?);
        let map = correspondence_map((&src.camera, &src.depth), (&dst.camera, &dst.depth), tol)
            .map_err(|e| e.to_string())?;
        let oracle = raytrace_correspondence(&scene, &src.camera, &dst.camera, tol)
            .map_err(|e| e.to_string())?;
        for i in 0..map.valid.len() {
            if !oracle.valid[i] {
                continue;
            }
            total += 1;
            let offsets =
                (map.du[i] - oracle.du[i]).abs() < 1e-6 && (map.dv[i] - oracle.dv[i]).abs() < 1e-6;
            if map.valid[i] && map.alpha[i] == oracle.alpha[i] && (!map.alpha[i] || offsets) {
                agree += 1;
            }
        }
    }
    let frac = agree as f64 / total.max(1) as f64;
    let text = format!("{:.2}% of {total} pixels agree", 100.0 * frac);
    if frac >= 0.99 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn gradients_match_differences() -> Result<String, String> {
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        head_dim: 4,
        height: 2,
        width: 2,
        channels: 2,
        cond_channels: 1,
        text_len: 2,
        text_dim: 3,
        mlp_ratio: 2,
        time_features: 2,
        rotary: true,
        reference: ReferenceMode::Noisy,
    };
    let mut params = DenoiserParams::init(cfg.clone(), 5).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(6);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let shape = cfg.latent_shape();
    let sample = TrainSample {
        x: Tensor::randn(&shape, &mut rng),
        refs: vec![Tensor::randn(&shape, &mut rng)],
        ref_noise: vec![Tensor::randn(&shape, &mut rng)],
        caption: Some(Tensor::randn(&[2, 3], &mut rng)),
        depth: Some(Tensor::randn(&[2, 2, 1], &mut rng)),
        t: 7.0,
        eps: Tensor::randn(&shape, &mut rng),
    };
    let report = gradient_check(&sample, &params, &NoiseSchedule::flow(20), 1e-5)
        .map_err(|e| e.to_string())?;
    within(report.max_relative_error, 1e-4, "max relative error")
}

fn guidance_example() -> Result<String, String> {
    let v = |a: f64, b: f64| Tensor::new(vec![1, 2], vec![a, b]).expect("two values");
    let step = GuidanceStep {
        eps_uncond: v(0.0, 0.0),
        eps_base: v(-3.0, -4.0),
        eps_full: v(0.0, 1.0),
    };
    let out = guidance_combine_normalized(&step, 1.0, 1.0).map_err(|e| e.to_string())?;
    let err = (out.data()[0] - 0.6).abs().max((out.data()[1] - 1.8).abs());
    within(err, 1e-15, "deviation from (0.6, 1.8)")
}

fn sampler_is_exact_for_constant_flow() -> Result<String, String> {
    let sched = NoiseSchedule::flow(1000);
    let x0 = Tensor::randn(&[3, 3, 2], &mut Rng::new(7));
    let mut rng = Rng::new(8);
    let eps = Tensor::randn(&[3, 3, 2], &mut rng.clone());
    let velocity = eps.sub(&x0).map_err(|e| e.to_string())?;
    let model = |_: &Tensor, _: f64, _: Branch| Ok(velocity.clone());
    let cfg = GuidanceConfig {
        lambda_i: 0.0,
        lambda_i_ramp: 0.0,
        lambda_c: 0.0,
        mode: GuidanceMode::Vanilla,
    };
    let out =
        euler_sample(&model, &sched, &cfg, &[3, 3, 2], &mut rng, 10).map_err(|e| e.to_string())?;
    within(out.max_abs_diff(&x0), 1e-12, "distance to x0")
}

/// Runs every invariant; never panics.
pub fn run_selftest() -> SelftestReport {
    let mut report = SelftestReport::default();
    report.check("attention oracle", attention_matches_oracle());
    report.check("mask soundness", blocked_keys_are_ignored());
    report.check("correspondence identity", identity_correspondence());
    report.check(
        "correspondence vs ray tracing",
        correspondence_matches_raytrace(),
    );
    report.check("gradient check", gradients_match_differences());
    report.check("guidance example", guidance_example());
    report.check("sampler exactness", sampler_is_exact_for_constant_flow());
    report
}
