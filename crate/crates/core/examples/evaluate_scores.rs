//! Combining text and object alignment into the geometric score, and
//! measuring intra-set similarity of rendered views with object crops.

use syncd::datagen::{latent_to_image, ToyExtractor};
use syncd::denoiser::render_object_sets;
use syncd::eval::{
    geometric_score, intra_cluster_similarity, masked_crop, summarize, write_scores, ScorePair,
    MID_GRAY,
};
use syncd::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Published method averages: (image metrics, text metric).
    let rows = [
        ("JeDi", (0.771 + 0.775) / 2.0, 0.789),
        ("BLIP-Diffusion", (0.658 + 0.643) / 2.0, 0.782),
    ];
    for (name, image, text) in rows {
        println!(
            "{name:15} image {image:.3} text {text:.3} geometric {:.3}",
            geometric_score(text, image)?
        );
    }

    let samples: Vec<ScorePair> = [(0.91, 0.62), (0.74, 0.80), (0.55, 0.97)]
        .iter()
        .enumerate()
        .map(|(i, &(text, image))| ScorePair {
            sample_id: format!("sample-{i}"),
            text_score: text,
            image_score: image,
        })
        .collect();
    let summary = summarize(&samples)?;
    println!(
        "per-sample mean {:.3} vs score of means {:.3}",
        summary.mean_geometric, summary.geometric_of_means
    );
    write_scores(&samples, "toy", std::io::stdout().lock())?;

    // Views of the same rendered object, compared on their masked crops.
    let sets = render_object_sets(3, 3, 32, 32, 2)?;
    let crops: Vec<Vec<Tensor>> = sets
        .iter()
        .map(|set| {
            set.images
                .iter()
                .zip(&set.masks)
                .map(|(x, m)| masked_crop(&latent_to_image(x), m, MID_GRAY))
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;
    let report = intra_cluster_similarity(&crops, &ToyExtractor::default())?;
    println!("intra-set similarity per object: {:?}", report.per_set);
    Ok(())
}
