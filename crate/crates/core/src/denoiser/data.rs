use super::model::{embed_caption, ModelConfig, TrainSample};
use super::schedule::NoiseSchedule;
use super::DenoiserError;
use crate::attention::ForegroundMask;
use crate::geometry::{select_views, DepthMap, Scene, ViewSampling};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Several rendered views of one procedural scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSet {
    pub description: String,
    /// Color renders mapped to `[-1, 1]`, `H x W x 3`.
    pub images: Vec<Tensor>,
    /// Normalized inverse depth, `H x W x 1`.
    pub depths: Vec<Tensor>,
    pub masks: Vec<ForegroundMask>,
}

/// Inverse depth scaled so the nearest surface is 1; background is 0.
pub fn depth_condition(depth: &DepthMap) -> Tensor {
    let inv: Vec<f64> = depth
        .data()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let max = inv.iter().copied().fold(0.0, f64::max);
    let data = if max > 0.0 {
        inv.iter().map(|v| v / max).collect()
    } else {
        inv
    };
    Tensor::new(vec![depth.height(), depth.width(), 1], data).expect("depth map is nonempty")
}

/// Maps a `[0, 1]` color render to the latent range `[-1, 1]`.
pub fn image_to_latent(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// Scenes tried per set before view selection failure is reported.
const SCENE_ATTEMPTS: usize = 8;

/// Renders `count` sets of `views` images each, one procedural scene per set.
pub fn render_object_sets(
    count: usize,
    views: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<ObjectSet>, DenoiserError> {
    let opts = ViewSampling {
        height,
        width,
        ..ViewSampling::default()
    };
    let root = Rng::new(seed);
    (0..count as u64)
        .map(|i| {
            let mut rng = root.child(i);
            // Some scenes admit no overlapping views at low resolution; draw
            // a new scene from the same stream when that happens.
            let mut attempt = 0;
            let (scene, selected) = loop {
                let scene = Scene::procedural(rng.next_u64());
                match select_views(&scene, &mut rng, views.max(2), 0.1, &opts) {
                    Ok(selected) => break (scene, selected),
                    Err(e) if attempt + 1 >= SCENE_ATTEMPTS => return Err(e.into()),
                    Err(_) => attempt += 1,
                }
            };
            let selected = &selected[..views.max(1).min(selected.len())];
            Ok(ObjectSet {
                description: scene.description(),
                images: selected
                    .iter()
                    .map(|v| image_to_latent(&scene.render_color(&v.camera)))
                    .collect(),
                depths: selected.iter().map(|v| depth_condition(&v.depth)).collect(),
                masks: selected
                    .iter()
                    .map(|v| scene.render_mask(&v.camera))
                    .collect(),
            })
        })
        .collect()
}

/// Classifier-free dropout probabilities. The three events are exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub refs: f64,
    pub caption: f64,
    pub both: f64,
}

impl Default for Dropout {
    fn default() -> Self {
        Self {
            refs: 0.1,
            caption: 0.1,
            both: 0.05,
        }
    }
}

impl Dropout {
    pub const NONE: Dropout = Dropout {
        refs: 0.0,
        caption: 0.0,
        both: 0.0,
    };

    /// `(drop_refs, drop_caption)` for one sample.
    pub fn draw(&self, rng: &mut Rng) -> (bool, bool) {
        let u = rng.uniform();
        if u < self.both {
            (true, true)
        } else if u < self.both + self.refs {
            (true, false)
        } else if u < self.both + self.refs + self.caption {
            (false, true)
        } else {
            (false, false)
        }
    }
}

/// One training sample from `set`: the image at `target` with up to
/// `max_refs` of the remaining views as references.
pub fn make_sample(
    set: &ObjectSet,
    target: usize,
    max_refs: usize,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    dropout: &Dropout,
    rng: &mut Rng,
) -> TrainSample {
    let (drop_refs, drop_caption) = dropout.draw(rng);
    let refs: Vec<Tensor> = if drop_refs {
        Vec::new()
    } else {
        (0..set.images.len())
            .filter(|&i| i != target)
            .take(max_refs)
            .map(|i| set.images[i].clone())
            .collect()
    };
    let shape = cfg.latent_shape();
    let t = rng.uniform_range(0.0, sched.steps as f64);
    let eps = Tensor::randn(&shape, rng);
    let ref_noise = refs.iter().map(|_| Tensor::randn(&shape, rng)).collect();
    TrainSample {
        x: set.images[target].clone(),
        refs,
        ref_noise,
        caption: (!drop_caption)
            .then(|| embed_caption(&set.description, cfg.text_len, cfg.text_dim)),
        depth: (cfg.cond_channels == 1).then(|| set.depths[target].clone()),
        t,
        eps,
    }
}

/// One sample per set with a random target view.
pub fn make_samples(
    sets: &[ObjectSet],
    max_refs: usize,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    dropout: &Dropout,
    rng: &mut Rng,
) -> Vec<TrainSample> {
    sets.iter()
        .map(|set| {
            let target = rng.below(set.images.len() as u64) as usize;
            make_sample(set, target, max_refs, cfg, sched, dropout, rng)
        })
        .collect()
}
