mod common;

use syncd::denoiser::tape::Tape;
use syncd::denoiser::*;
use syncd::{Rng, Tensor};

fn tiny_config(reference: ReferenceMode) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 4,
        height: 3,
        width: 3,
        channels: 2,
        cond_channels: 1,
        text_len: 2,
        text_dim: 3,
        mlp_ratio: 2,
        time_features: 2,
        rotary: true,
        reference,
    }
}

/// Parameters with every bias randomized too, so no gradient path is trivially zero.
fn random_params(cfg: ModelConfig, seed: u64) -> DenoiserParams {
    let mut params = DenoiserParams::init(cfg, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xabc);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    params
}

fn latent(cfg: &ModelConfig, rng: &mut Rng) -> Tensor {
    Tensor::randn(&cfg.latent_shape(), rng)
}

fn sample(cfg: &ModelConfig, k: usize, t: f64, rng: &mut Rng) -> TrainSample {
    let refs: Vec<Tensor> = (0..k).map(|_| latent(cfg, rng)).collect();
    TrainSample {
        x: latent(cfg, rng),
        ref_noise: (0..k).map(|_| latent(cfg, rng)).collect(),
        refs,
        caption: Some(Tensor::randn(&[cfg.text_len, cfg.text_dim], rng)),
        depth: Some(Tensor::randn(&[cfg.height, cfg.width, 1], rng)),
        t,
        eps: latent(cfg, rng),
    }
}

mod oracle {
    use super::*;

    fn w<'a>(p: &'a DenoiserParams, name: &str) -> &'a Tensor {
        p.get(name).unwrap()
    }

    fn affine(x: &Tensor, p: &DenoiserParams, wname: &str, bname: &str) -> Tensor {
        let mut y = x.matmul(w(p, wname)).unwrap();
        let b = w(p, bname).data().to_vec();
        for row in y.rows_mut() {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        y
    }

    fn silu(x: &Tensor) -> Tensor {
        x.map(|v| v / (1.0 + (-v).exp()))
    }

    fn rotate(x: &mut Tensor, pos: &[Option<(f64, f64)>], heads: usize, hd: usize) {
        let pairs = hd / 2;
        let row_pairs = pairs.div_ceil(2);
        for (i, p) in pos.iter().enumerate() {
            let Some((r, c)) = *p else { continue };
            for h in 0..heads {
                for j in 0..pairs {
                    let angle = if j < row_pairs {
                        r * 10_000f64.powf(-(j as f64) / row_pairs as f64)
                    } else {
                        c * 10_000f64.powf(-((j - row_pairs) as f64) / (pairs - row_pairs) as f64)
                    };
                    let a = x.get(&[i, h * hd + 2 * j]);
                    let b = x.get(&[i, h * hd + 2 * j + 1]);
                    x.set(&[i, h * hd + 2 * j], a * angle.cos() - b * angle.sin());
                    x.set(&[i, h * hd + 2 * j + 1], a * angle.sin() + b * angle.cos());
                }
            }
        }
    }

    /// The base network for a lone target written with plain loops: no
    /// references, no bias matrix, no tape.
    pub fn forward(
        p: &DenoiserParams,
        x: &Tensor,
        time: f64,
        caption: &Tensor,
        depth: &Tensor,
    ) -> Tensor {
        let cfg = &p.config;
        let (l, n, heads, hd) = (cfg.text_len, cfg.tokens(), cfg.heads, cfg.head_dim);
        let mut text = affine(caption, p, "caption.w", "caption.b");
        let mut rows = Vec::new();
        for i in 0..n {
            let mut r = x.data()[i * cfg.channels..(i + 1) * cfg.channels].to_vec();
            r.push(depth.data()[i]);
            rows.push(r);
        }
        let mut img = affine(&Tensor::from_rows(&rows).unwrap(), p, "input.w", "input.b");
        let mut feats = Vec::new();
        for k in 0..cfg.time_features {
            let a = std::f64::consts::PI * time * (1u64 << k) as f64;
            feats.extend([a.sin(), a.cos()]);
        }
        let temb = silu(&affine(
            &Tensor::new(vec![1, feats.len()], feats).unwrap(),
            p,
            "time.w",
            "time.b",
        ));
        for row in img.rows_mut() {
            for (v, e) in row.iter_mut().zip(temb.data()) {
                *v += e;
            }
        }
        let pos: Vec<Option<(f64, f64)>> = (0..l)
            .map(|_| None)
            .chain((0..n).map(|i| Some(((i / cfg.width) as f64, (i % cfg.width) as f64))))
            .collect();
        for layer in 0..cfg.layers {
            let name = |s: &str, what: &str| format!("layer{layer}.{s}.{what}");
            let proj = |what: &str, text: &Tensor, img: &Tensor| {
                Tensor::concat_rows(&[
                    &text.matmul(w(p, &name("text", what))).unwrap(),
                    &img.matmul(w(p, &name("image", what))).unwrap(),
                ])
                .unwrap()
            };
            let mut q = proj("q", &text, &img);
            let mut k = proj("k", &text, &img);
            let v = proj("v", &text, &img);
            rotate(&mut q, &pos, heads, hd);
            rotate(&mut k, &pos, heads, hd);
            let total = l + n;
            let mut att = Tensor::zeros(&[total, heads * hd]);
            for h in 0..heads {
                for i in 0..total {
                    let mut scores = vec![0.0; total];
                    for (j, s) in scores.iter_mut().enumerate() {
                        for d in 0..hd {
                            *s += q.get(&[i, h * hd + d]) * k.get(&[j, h * hd + d]);
                        }
                        *s /= (hd as f64).sqrt();
                    }
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for d in 0..hd {
                        let mut acc = 0.0;
                        for (j, s) in scores.iter().enumerate() {
                            acc += (s - m).exp() / z * v.get(&[j, h * hd + d]);
                        }
                        att.set(&[i, h * hd + d], acc);
                    }
                }
            }
            let block = |x: &Tensor, a: Tensor, s: &str| {
                let x = x.add(&a.matmul(w(p, &name(s, "o"))).unwrap()).unwrap();
                let hidden = silu(&affine(&x, p, &name(s, "mlp1.w"), &name(s, "mlp1.b")));
                x.add(&affine(&hidden, p, &name(s, "mlp2.w"), &name(s, "mlp2.b")))
                    .unwrap()
            };
            text = block(&text, att.slice_rows(0, l).unwrap(), "text");
            img = block(&img, att.slice_rows(l, n).unwrap(), "image");
        }
        affine(&img, p, "output.w", "output.b")
            .reshape(&cfg.latent_shape())
            .unwrap()
    }
}

#[test]
fn no_reference_forward_matches_plain_oracle() {
    let cfg = tiny_config(ReferenceMode::Noisy);
    let sched = NoiseSchedule::flow(100);
    for seed in 0..5 {
        let params = random_params(cfg.clone(), seed);
        let mut rng = Rng::new(seed + 100);
        let s = sample(&cfg, 0, 37.0, &mut rng);
        let got = denoiser_forward(&params, &sched, &s.x, s.t, &s.conditioning()).unwrap();
        let want = oracle::forward(
            &params,
            &s.x,
            0.37,
            s.caption.as_ref().unwrap(),
            s.depth.as_ref().unwrap(),
        );
        assert!(
            got.max_abs_diff(&want) < 1e-12,
            "{}",
            got.max_abs_diff(&want)
        );
    }
}

#[test]
fn swapping_references_with_their_rows_leaves_target_unchanged() {
    for mode in [ReferenceMode::Noisy, ReferenceMode::Clean] {
        let cfg = tiny_config(mode);
        let sched = NoiseSchedule::diffusion(50);
        let params = random_params(cfg.clone(), 3);
        let s = sample(&cfg, 2, 20.0, &mut Rng::new(8));
        let rows = [3, 6];
        let cond = Conditioning {
            ref_rows: Some(&rows),
            ..s.conditioning()
        };
        let a = denoiser_forward(&params, &sched, &s.x, s.t, &cond).unwrap();
        let swapped = [s.refs[1].clone(), s.refs[0].clone()];
        let swapped_noise = [s.ref_noise[1].clone(), s.ref_noise[0].clone()];
        let swapped_rows = [6, 3];
        let cond = Conditioning {
            refs: &swapped,
            ref_noise: &swapped_noise,
            ref_rows: Some(&swapped_rows),
            ..cond
        };
        let b = denoiser_forward(&params, &sched, &s.x, s.t, &cond).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
        // Default reference rows are (k + 1) H.
        let c = denoiser_forward(
            &params,
            &sched,
            &s.x,
            s.t,
            &s.conditioning().without(false, false),
        )
        .unwrap();
        assert_eq!(a, c);
    }
}

#[test]
fn forward_is_deterministic_and_checks_grids() {
    let cfg = tiny_config(ReferenceMode::Noisy);
    let sched = NoiseSchedule::flow(10);
    let params = DenoiserParams::init(cfg.clone(), 1).unwrap();
    assert_eq!(params, DenoiserParams::init(cfg.clone(), 1).unwrap());
    let s = sample(&cfg, 1, 4.0, &mut Rng::new(2));
    let a = denoiser_forward(&params, &sched, &s.x, s.t, &s.conditioning()).unwrap();
    let b = denoiser_forward(&params, &sched, &s.x, s.t, &s.conditioning()).unwrap();
    assert_eq!(syncd::container::encode(&a), syncd::container::encode(&b));
    let wrong = [Tensor::zeros(&[2, 3, 2])];
    let cond = Conditioning {
        refs: &wrong,
        ref_noise: &s.ref_noise,
        ..s.conditioning()
    };
    assert!(matches!(
        denoiser_forward(&params, &sched, &s.x, s.t, &cond),
        Err(DenoiserError::Shape(_))
    ));
    assert!(matches!(
        denoiser_forward(&params, &sched, &s.x, 11.0, &s.conditioning()),
        Err(DenoiserError::TimeRange { .. })
    ));
}

#[test]
fn reference_features_follow_the_target_time_only_when_noisy() {
    let mut rng = Rng::new(9);
    for (mode, should_change) in [(ReferenceMode::Noisy, true), (ReferenceMode::Clean, false)] {
        let cfg = tiny_config(mode);
        let sched = NoiseSchedule::flow(10);
        let params = random_params(cfg.clone(), 4);
        let s = sample(&cfg, 2, 2.0, &mut rng);
        let a = forward_detailed(&params, &sched, &s.x, 2.0, &s.conditioning()).unwrap();
        let b = forward_detailed(&params, &sched, &s.x, 7.0, &s.conditioning()).unwrap();
        let changed = a
            .reference_features
            .iter()
            .zip(&b.reference_features)
            .any(|(x, y)| x.max_abs_diff(y) > 1e-9);
        assert_eq!(changed, should_change, "{mode:?}");
    }
}

#[test]
fn mse_reduction_examples() {
    let target = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    let mut tape = Tape::new();
    let exact = tape.leaf(target.clone());
    let loss = tape.mse(exact, &target).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
    let shifted = tape.leaf(target.map(|v| v + 1.0));
    let loss = tape.mse(shifted, &target).unwrap();
    assert_eq!(tape.value(loss).data()[0], 1.0);
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        head_dim: 4,
        ..tiny_config(ReferenceMode::Noisy)
    };
    for sched in [NoiseSchedule::flow(20), NoiseSchedule::diffusion(20)] {
        let params = random_params(cfg.clone(), 12);
        let s = sample(&cfg, 1, 9.0, &mut Rng::new(13));
        let report = gradient_check(&s, &params, &sched, 1e-5).unwrap();
        assert_eq!(report.checked, params.count());
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}

#[test]
fn zero_learning_rate_and_repeated_batches() {
    let cfg = tiny_config(ReferenceMode::Clean);
    let sched = NoiseSchedule::flow(10);
    let params = random_params(cfg.clone(), 5);
    let s = sample(&cfg, 1, 3.0, &mut Rng::new(6));
    let mut frozen = params.clone();
    train_step(
        &[s.clone()],
        &mut frozen,
        &mut Adam::new(&params, 0.0),
        &sched,
    )
    .unwrap();
    assert_eq!(frozen, params);
    let mut once = params.clone();
    let mut twice = params.clone();
    train_step(
        &[s.clone()],
        &mut once,
        &mut Adam::new(&params, 1e-2),
        &sched,
    )
    .unwrap();
    train_step(
        &[s.clone(), s.clone(), s],
        &mut twice,
        &mut Adam::new(&params, 1e-2),
        &sched,
    )
    .unwrap();
    for (a, b) in once.tensors().iter().zip(twice.tensors()) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn non_finite_loss_halts_with_snapshot() {
    let cfg = tiny_config(ReferenceMode::Noisy);
    let sched = NoiseSchedule::flow(10);
    let mut params = random_params(cfg.clone(), 5);
    params.tensors_mut()[0].data_mut()[0] = f64::NAN;
    let before = params.clone();
    let s = sample(&cfg, 0, 3.0, &mut Rng::new(6));
    match train_step(&[s], &mut params, &mut Adam::new(&before, 1e-3), &sched) {
        Err(DenoiserError::Divergence { snapshot, .. }) => {
            assert_eq!(snapshot.params.names(), before.names());
            assert!(snapshot.params.tensors()[0].data()[0].is_nan());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(train_step(&[], &mut params, &mut Adam::new(&before, 1e-3), &sched).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = random_params(tiny_config(ReferenceMode::Clean), 21);
    let info = CheckpointInfo {
        schedule: ScheduleMode::Flow,
        step: 42,
    };
    save_checkpoint(dir.path(), &params, &info).unwrap();
    let (loaded, loaded_info) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(loaded_info, info);
    std::fs::write(dir.path().join("manifest.txt"), "not a checkpoint\n").unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(DenoiserError::Checkpoint(_))
    ));
}

#[test]
fn dropout_frequencies_are_close_to_configured() {
    let mut rng = Rng::new(77);
    let d = Dropout::default();
    let (mut refs_only, mut caption_only, mut both) = (0, 0, 0);
    let n = 20_000;
    for _ in 0..n {
        match d.draw(&mut rng) {
            (true, true) => both += 1,
            (true, false) => refs_only += 1,
            (false, true) => caption_only += 1,
            _ => {}
        }
    }
    let f = |c: i32| c as f64 / n as f64;
    assert!((f(refs_only) - 0.1).abs() < 0.01);
    assert!((f(caption_only) - 0.1).abs() < 0.01);
    assert!((f(both) - 0.05).abs() < 0.01);
}

#[test]
fn rendered_sets_feed_training_samples() {
    let cfg = ModelConfig {
        height: 6,
        width: 6,
        ..ModelConfig::default()
    };
    let sched = NoiseSchedule::flow(100);
    let sets = render_object_sets(3, 3, 6, 6, 4).unwrap();
    assert_eq!(sets, render_object_sets(3, 3, 6, 6, 4).unwrap());
    for set in &sets {
        assert_eq!(set.images.len(), 3);
        assert!(set
            .images
            .iter()
            .all(|x| x.shape() == [6, 6, 3] && x.data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }
    let samples = make_samples(&sets, 2, &cfg, &sched, &Dropout::NONE, &mut Rng::new(1));
    assert!(samples
        .iter()
        .all(|s| s.refs.len() == 2 && s.caption.is_some()));
    assert!(
        training_loss(&samples[0], &DenoiserParams::init(cfg, 0).unwrap(), &sched)
            .unwrap()
            .is_finite()
    );
}
