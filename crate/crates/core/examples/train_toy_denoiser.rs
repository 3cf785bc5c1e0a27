//! Trains the toy reference-conditioned denoiser on rendered object sets and
//! saves a checkpoint.
//!
//! Run with `cargo run --release --example train_toy_denoiser [STEPS] [OUT_DIR]`.

use syncd::denoiser::{
    make_sample, make_samples, mean_loss, render_object_sets, save_checkpoint, train_step, Adam,
    CheckpointInfo, DenoiserParams, Dropout, ModelConfig, NoiseSchedule, TrainSample,
};
use syncd::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(Ok(200), |s| s.parse())?;
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("syncd-toy-checkpoint"));

    let cfg = ModelConfig::default();
    let sched = NoiseSchedule::flow(1000);
    let sets = render_object_sets(16, 3, cfg.height, cfg.width, 1)?;
    let batch = make_samples(
        &sets,
        2,
        &cfg,
        &sched,
        &Dropout::default(),
        &mut Rng::new(3),
    );

    let mut params = DenoiserParams::init(cfg.clone(), 0)?;
    println!("{} parameters", params.count());
    let mut adam = Adam::new(&params, 3e-3);
    for step in 0..steps {
        let loss = train_step(&batch, &mut params, &mut adam, &sched)?;
        if step % 25 == 0 || step + 1 == steps {
            println!("step {step:4}  loss {loss:.4}");
        }
    }

    // References help on scenes the model has never seen.
    let held_out = render_object_sets(16, 3, cfg.height, cfg.width, 77)?;
    let mut rng = Rng::new(78);
    let with_refs: Vec<TrainSample> = held_out
        .iter()
        .map(|s| make_sample(s, 0, 2, &cfg, &sched, &Dropout::NONE, &mut rng))
        .collect();
    let without: Vec<TrainSample> = with_refs
        .iter()
        .map(|s| TrainSample {
            refs: Vec::new(),
            ref_noise: Vec::new(),
            ..s.clone()
        })
        .collect();
    println!(
        "held-out loss: two references {:.4}, none {:.4}",
        mean_loss(&with_refs, &params, &sched)?,
        mean_loss(&without, &params, &sched)?
    );

    let info = CheckpointInfo {
        schedule: sched.mode,
        step: steps as u64,
    };
    save_checkpoint(&out, &params, &info)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
