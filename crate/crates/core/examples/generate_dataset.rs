//! End-to-end data generation: rigid and deformable sets, filtering and a
//! manifest on disk.
//!
//! Run with `cargo run --release --example generate_dataset [OUT_DIR]`.
//! The toy model is untrained here, so the images are abstract; the point is
//! the pipeline. Depth guidance is lowered to 2.0 because the default weight
//! saturates an untrained toy model's latents.

use syncd::datagen::{
    filter_set, generate_sets, read_manifest, write_manifest, FilterThresholds, GenPath,
    GenSetConfig, ManifestEntry, SetJob, SetRequest, ToyAesthetic, ToyExtractor,
};
use syncd::denoiser::{DenoiserParams, ModelConfig, NoiseSchedule};
use syncd::geometry::Scene;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("syncd-dataset"));
    let params = DenoiserParams::init(ModelConfig::default(), 0)?;
    let sched = NoiseSchedule::flow(1000);

    let jobs: Vec<SetJob> = (0..4)
        .map(|i| {
            let scene = Scene::procedural(40 + i);
            let subject = scene.description();
            SetJob {
                request: SetRequest {
                    set_id: format!("obj-{i}"),
                    prompts: ["on a table", "in a garden", "on a shelf"]
                        .iter()
                        .map(|bg| format!("{subject}, {bg}"))
                        .collect(),
                    object_description: subject,
                },
                scene: Some(scene),
            }
        })
        .collect();

    let mut entries = Vec::new();
    for path in [GenPath::Rigid, GenPath::Deformable] {
        let cfg = GenSetConfig {
            path,
            steps: 20,
            depth_guidance: 2.0,
            seed: 9,
            ..GenSetConfig::default()
        };
        for result in generate_sets(&cfg, &jobs, &params, &sched) {
            let mut set = result?;
            set.set_id = format!("{}-{path:?}", set.set_id).to_lowercase();
            let masked: Vec<usize> = set.masks.iter().map(|m| m.count()).collect();
            let decision = filter_set(
                &set,
                &ToyExtractor::default(),
                &ToyAesthetic,
                &FilterThresholds {
                    aesthetic_min: 4.0,
                    ..FilterThresholds::default()
                },
            )?;
            println!(
                "{:24} mask sizes {masked:?} similarity {:.3} kept {}",
                set.set_id, decision.similarity, decision.kept
            );
            entries.push(ManifestEntry {
                set,
                filter: Some(decision),
            });
        }
    }

    let manifest = out.join("manifest.jsonl");
    write_manifest(&entries, &manifest)?;
    let back = read_manifest(&manifest)?;
    println!(
        "{} sets written to {} and verified",
        back.len(),
        manifest.display()
    );
    Ok(())
}
