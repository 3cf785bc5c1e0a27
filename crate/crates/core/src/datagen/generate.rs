use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DatagenError;
use crate::attention::{build_msa_mask, ForegroundMask, TokenLayout};
use crate::denoiser::{
    depth_condition, embed_caption, forward_set, stack_bias, DenoiserParams, NoiseSchedule,
};
use crate::geometry::{
    correspondence_map, select_views, warp_features_multi, CorrespondenceMap, Scene, ViewSampling,
};
use crate::rng::Rng;
use crate::sampler::{
    euler_update, guidance_combine, time_grid, GuidanceMode, GuidanceStep, SamplerError,
};
use crate::tensor::Tensor;

/// Average attention over heads and `object_tokens`, min-max normalize and
/// threshold.
///
/// `cross_attn` is `heads x text_len x (height * width)`. A constant map has
/// no contrast to threshold and yields an all-true mask.
pub fn extract_fg_mask(
    cross_attn: &Tensor,
    object_tokens: &[usize],
    threshold: f64,
    height: usize,
    width: usize,
) -> Result<ForegroundMask, DatagenError> {
    if object_tokens.is_empty() {
        return Err(DatagenError::Argument("no object tokens given".into()));
    }
    let [heads, text_len, pixels] = cross_attn.shape() else {
        return Err(DatagenError::Argument(format!(
            "cross-attention must be heads x text x pixels, got {:?}",
            cross_attn.shape()
        )));
    };
    if *pixels != height * width {
        return Err(DatagenError::Argument(format!(
            "{pixels} pixels for a {height}x{width} grid"
        )));
    }
    if let Some(&bad) = object_tokens.iter().find(|&&t| t >= *text_len) {
        return Err(DatagenError::Argument(format!(
            "token {bad} outside a {text_len}-token caption"
        )));
    }
    let mut avg = vec![0.0; *pixels];
    for h in 0..*heads {
        for &tok in object_tokens {
            let row = &cross_attn.data()[(h * text_len + tok) * pixels..][..*pixels];
            avg.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
    let lo = avg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = avg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cells = if hi - lo < 1e-15 {
        vec![true; *pixels]
    } else {
        avg.iter()
            .map(|a| (a - lo) / (hi - lo) >= threshold)
            .collect()
    };
    Ok(ForegroundMask::new(height, width, cells)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenPath {
    /// Depth-conditioned generation of a known asset with warping.
    Rigid,
    /// Free generation with attention-derived masks.
    Deformable,
}

impl std::str::FromStr for GenPath {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rigid" => Ok(Self::Rigid),
            "deformable" => Ok(Self::Deformable),
            other => Err(DatagenError::Config(format!("unknown path `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSetConfig {
    /// Images per set.
    pub images: usize,
    pub path: GenPath,
    pub steps: usize,
    /// Fraction of the leading steps that apply warping (rigid path).
    pub warp_fraction: f64,
    pub depth_guidance: f64,
    pub text_guidance: f64,
    pub negative_prompt: String,
    pub seed: u64,
    /// Masked shared attention across the set; off isolates the images.
    pub msa: bool,
    /// Foreground threshold for attention-derived masks.
    pub mask_threshold: f64,
    /// Minimum pairwise overlap when choosing rigid views.
    pub min_overlap: f64,
}

impl Default for GenSetConfig {
    fn default() -> Self {
        Self {
            images: 3,
            path: GenPath::Rigid,
            steps: 30,
            warp_fraction: 0.2,
            depth_guidance: 10.0,
            text_guidance: 2.5,
            negative_prompt: "3d render, low resolution, blurry, cartoon".into(),
            seed: 0,
            msa: true,
            mask_threshold: 0.4,
            min_overlap: 0.1,
        }
    }
}

impl GenSetConfig {
    /// Accepts 1 to 3 images; a single image reduces to plain sampling.
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::Config(m));
        if !(1..=3).contains(&self.images) {
            return bad(format!("images = {}, expected 1 to 3", self.images));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warp_fraction) {
            return bad(format!(
                "warp_fraction = {} outside [0, 1]",
                self.warp_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return bad(format!(
                "mask_threshold = {} outside [0, 1]",
                self.mask_threshold
            ));
        }
        if !(self.depth_guidance >= 0.0 && self.text_guidance >= 0.0) {
            return bad("guidance weights must be nonnegative".into());
        }
        Ok(())
    }

    /// Number of leading steps that warp: `ceil(warp_fraction * steps)`.
    pub fn warp_steps(&self) -> usize {
        ((self.warp_fraction * self.steps as f64) - 1e-9)
            .ceil()
            .max(0.0) as usize
    }

    /// SHA-256 of the JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

/// What to generate: one prompt per image around a shared object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRequest {
    pub set_id: String,
    pub object_description: String,
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub warp_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub set_id: String,
    /// Final latents, `H x W x C` in roughly `[-1, 1]`.
    pub images: Vec<Tensor>,
    pub masks: Vec<ForegroundMask>,
    pub prompts: Vec<String>,
    pub object_description: String,
    pub path: GenPath,
    pub provenance: Provenance,
}

/// Latent to displayable `[0, 1]` values.
pub fn latent_to_image(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Per-view inputs of the rigid path.
struct RigidViews {
    masks: Vec<ForegroundMask>,
    depths: Vec<Option<Tensor>>,
    /// `corr[j][k]` maps view `j` pixels into view `k < j`.
    corr: Vec<Vec<CorrespondenceMap>>,
}

fn rigid_views(
    scene: &Scene,
    cfg: &GenSetConfig,
    params: &DenoiserParams,
    rng: &mut Rng,
) -> Result<RigidViews, DatagenError> {
    let mc = &params.config;
    let opts = ViewSampling {
        height: mc.height,
        width: mc.width,
        ..ViewSampling::default()
    };
    let mut views = select_views(scene, rng, cfg.images.max(2), cfg.min_overlap, &opts)?;
    views.truncate(cfg.images);
    let tol = opts.depth_tol_fraction * scene.diameter();
    let mut corr = Vec::with_capacity(views.len());
    for (j, dst) in views.iter().enumerate() {
        let row = views[..j]
            .iter()
            .map(|src| {
                correspondence_map((&src.camera, &src.depth), (&dst.camera, &dst.depth), tol)
            })
            .collect::<Result<Vec<_>, _>>()?;
        corr.push(row);
    }
    Ok(RigidViews {
        masks: views.iter().map(|v| scene.render_mask(&v.camera)).collect(),
        depths: views
            .iter()
            .map(|v| (mc.cond_channels > 0).then(|| depth_condition(&v.depth)))
            .collect(),
        corr,
    })
}

/// Generates one consistent set by sampling all images jointly.
///
/// Every step evaluates the set under three conditionings and combines them
/// per image with vanilla guidance: text weight on the caption, depth weight
/// on the depth input (rigid path only). Image tokens share attention
/// through MSA masks; the first step lets them see all of each other. On the
/// rigid path, after each of the first `warp_steps` updates, view `j` takes
/// the warped latents of views `0..j` wherever they are visible.
pub fn generate_set(
    cfg: &GenSetConfig,
    request: &SetRequest,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    scene: Option<&Scene>,
) -> Result<ImageSet, DatagenError> {
    let rng = Rng::new(cfg.seed);
    let shape = params.config.latent_shape();
    let init = (0..cfg.images as u64)
        .map(|i| Tensor::randn(&shape, &mut rng.child(i)))
        .collect();
    generate_set_from(cfg, request, params, sched, scene, init)
}

/// [`generate_set`] starting from the given initial latents, one per image.
pub fn generate_set_from(
    cfg: &GenSetConfig,
    request: &SetRequest,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    scene: Option<&Scene>,
    init: Vec<Tensor>,
) -> Result<ImageSet, DatagenError> {
    cfg.validate()?;
    if request.prompts.len() != cfg.images {
        return Err(DatagenError::Config(format!(
            "{} prompts for {} images",
            request.prompts.len(),
            cfg.images
        )));
    }
    let mc = &params.config;
    let n = cfg.images;
    let rigid = match (cfg.path, scene) {
        (GenPath::Rigid, Some(scene)) => Some(rigid_views(
            scene,
            cfg,
            params,
            &mut Rng::new(cfg.seed).child(u64::MAX),
        )?),
        (GenPath::Rigid, None) => {
            return Err(DatagenError::Config("the rigid path needs a scene".into()))
        }
        (GenPath::Deformable, _) => None,
    };

    let captions: Vec<Tensor> = request
        .prompts
        .iter()
        .map(|p| embed_caption(p, mc.text_len, mc.text_dim))
        .collect();
    let negative = (!cfg.negative_prompt.trim().is_empty())
        .then(|| embed_caption(&cfg.negative_prompt, mc.text_len, mc.text_dim));
    let full_caps: Vec<Option<&Tensor>> = captions.iter().map(Some).collect();
    let neg_caps = vec![negative.as_ref(); n];
    let no_depth = vec![None; n];
    let depths: Vec<Option<&Tensor>> = match &rigid {
        Some(r) => r.depths.iter().map(Option::as_ref).collect(),
        None => no_depth.clone(),
    };
    let depth_weight = if depths.iter().any(Option::is_some) {
        cfg.depth_guidance
    } else {
        0.0
    };

    let layout = TokenLayout::new(n, mc.text_len, mc.height, mc.width)?;
    let isolated = vec![ForegroundMask::filled(mc.height, mc.width, false); n];
    let mut masks = match &rigid {
        Some(r) => r.masks.clone(),
        None => vec![ForegroundMask::filled(mc.height, mc.width, true); n],
    };
    let object_tokens: Vec<usize> = (0..mc.text_len).collect();
    let warp_until = if rigid.is_some() { cfg.warp_steps() } else { 0 };
    let mut warp_steps = Vec::new();

    if init.len() != n || init.iter().any(|x| x.shape() != mc.latent_shape()) {
        return Err(DatagenError::Config(format!(
            "expected {n} initial latents of shape {:?}",
            mc.latent_shape()
        )));
    }
    let mut xs = init;
    let times = time_grid(sched, cfg.steps);
    for step in 0..cfg.steps {
        let biases = if cfg.msa {
            build_msa_mask(&layout, &masks, step == 0)?
        } else {
            build_msa_mask(&layout, &isolated, false)?
        };
        let bias = stack_bias(&biases)?;
        let t = times[step];
        let full = forward_set(params, sched, &xs, t, &full_caps, &depths, &bias)?;
        let uncond = forward_set(params, sched, &xs, t, &neg_caps, &depths, &bias)?;
        let base = if depth_weight > 0.0 {
            Some(forward_set(
                params, sched, &xs, t, &neg_caps, &no_depth, &bias,
            )?)
        } else {
            None
        };
        for i in 0..n {
            let eps_uncond = uncond.predictions[i].clone();
            let g = GuidanceStep {
                eps_base: base
                    .as_ref()
                    .map_or_else(|| eps_uncond.clone(), |b| b.predictions[i].clone()),
                eps_full: full.predictions[i].clone(),
                eps_uncond,
            };
            let v = guidance_combine(&g, GuidanceMode::Vanilla, depth_weight, cfg.text_guidance)?;
            xs[i] = euler_update(&xs[i], &v, t, times[step + 1], sched)?;
        }
        if let Some(r) = &rigid {
            if step < warp_until {
                for j in 1..n {
                    let sources: Vec<(&Tensor, &CorrespondenceMap)> =
                        (0..j).map(|k| (&xs[k], &r.corr[j][k])).collect();
                    let warped = warp_features_multi(&sources, &xs[j], 1.0)?;
                    xs[j] = warped;
                }
                warp_steps.push(step);
            }
        } else if cfg.msa {
            for i in 0..n {
                masks[i] = extract_fg_mask(
                    &full.cross_attention[i],
                    &object_tokens,
                    cfg.mask_threshold,
                    mc.height,
                    mc.width,
                )?;
            }
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(SamplerError::Divergence { step }.into());
        }
    }
    Ok(ImageSet {
        set_id: request.set_id.clone(),
        images: xs,
        masks,
        prompts: request.prompts.clone(),
        object_description: request.object_description.clone(),
        path: cfg.path,
        provenance: Provenance {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            warp_steps,
        },
    })
}

/// One independent generation job.
#[derive(Debug, Clone)]
pub struct SetJob {
    pub request: SetRequest,
    pub scene: Option<Scene>,
}

/// Runs jobs on the current rayon pool. Job `i` is seeded from
/// `Rng::new(cfg.seed).child(i)`, so results do not depend on scheduling.
pub fn generate_sets(
    cfg: &GenSetConfig,
    jobs: &[SetJob],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Vec<Result<ImageSet, DatagenError>> {
    let root = Rng::new(cfg.seed);
    jobs.par_iter()
        .enumerate()
        .map(|(i, job)| {
            let job_cfg = GenSetConfig {
                seed: root.child(i as u64).next_u64(),
                ..cfg.clone()
            };
            generate_set(&job_cfg, &job.request, params, sched, job.scene.as_ref())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_attention_gives_single_pixel() {
        let mut attn = Tensor::zeros(&[2, 2, 9]);
        attn.set(&[0, 1, 4], 1.0);
        attn.set(&[1, 1, 4], 0.5);
        let m = extract_fg_mask(&attn, &[1], 0.4, 3, 3).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 1));
    }

    #[test]
    fn uniform_attention_gives_full_mask() {
        let attn = Tensor::full(&[2, 3, 6], 1.0 / 6.0);
        assert_eq!(
            extract_fg_mask(&attn, &[0, 2], 0.4, 2, 3).unwrap().count(),
            6
        );
        assert!(extract_fg_mask(&attn, &[], 0.4, 2, 3).is_err());
        assert!(extract_fg_mask(&attn, &[3], 0.4, 2, 3).is_err());
    }

    #[test]
    fn warp_window_counts() {
        let cfg = GenSetConfig::default();
        assert_eq!(cfg.warp_steps(), 6);
        let cfg = GenSetConfig {
            warp_fraction: 0.0,
            ..cfg
        };
        assert_eq!(cfg.warp_steps(), 0);
        let cfg = GenSetConfig {
            warp_fraction: 0.25,
            steps: 10,
            ..cfg
        };
        assert_eq!(cfg.warp_steps(), 3);
    }
}
