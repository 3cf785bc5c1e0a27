use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::generate::{latent_to_image, ImageSet};
use super::DatagenError;
use crate::container;
use crate::tensor::Tensor;

/// Maps an image (`H x W x C`, values in `[0, 1]`) to a unit-norm embedding.
pub trait FeatureExtractor: Sync {
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>, DatagenError>;
}

/// Box-downsampled, mean-removed, L2-normalized pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyExtractor {
    /// Side length of the downsampled grid.
    pub grid: usize,
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl FeatureExtractor for ToyExtractor {
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>, DatagenError> {
        if image.rank() != 3 {
            return Err(DatagenError::Argument(format!(
                "expected an HxWxC image, got {:?}",
                image.shape()
            )));
        }
        let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let g = self.grid.max(1);
        let mut feat = vec![0.0; g * g * c];
        let mut counts = vec![0usize; g * g];
        for r in 0..h {
            for col in 0..w {
                let cell = (r * g / h) * g + col * g / w;
                counts[cell] += 1;
                let px = &image.data()[(r * w + col) * c..][..c];
                feat[cell * c..][..c]
                    .iter_mut()
                    .zip(px)
                    .for_each(|(f, v)| *f += v);
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            feat[cell * c..][..c]
                .iter_mut()
                .for_each(|f| *f /= n.max(1) as f64);
        }
        let mean = feat.iter().sum::<f64>() / feat.len() as f64;
        feat.iter_mut().for_each(|f| *f -= mean);
        normalize(feat)
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, DatagenError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(DatagenError::Argument(
            "embedding has no direction (constant image?)".into(),
        ));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// External embedding backend: the image goes to stdin in the tensor
/// container format, whitespace-separated floats come back on stdout.
#[derive(Debug, Clone)]
pub struct CommandExtractor {
    pub program: String,
}

impl FeatureExtractor for CommandExtractor {
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>, DatagenError> {
        let fail = |msg: String| DatagenError::Argument(format!("{}: {msg}", self.program));
        let mut child = Command::new(&self.program)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(&container::encode(image))
            .map_err(|e| fail(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        let values = String::from_utf8_lossy(&out.stdout)
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| fail(format!("bad number `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        normalize(values)
    }
}

/// Scores an image (`[0, 1]` values) on a 0 to 10 scale.
pub trait AestheticScorer: Sync {
    fn score(&self, image: &Tensor) -> f64;
}

impl<F: Fn(&Tensor) -> f64 + Sync> AestheticScorer for F {
    fn score(&self, image: &Tensor) -> f64 {
        self(image)
    }
}

/// Contrast plus saturation heuristic. Only meant to exercise thresholds.
///
/// Contrast is the luminance standard deviation (at most 0.5), saturation
/// the mean per-pixel channel spread; each contributes up to 5 points.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyAesthetic;

impl AestheticScorer for ToyAesthetic {
    fn score(&self, image: &Tensor) -> f64 {
        let c = image.last_dim();
        let n = image.outer_len() as f64;
        let luma: Vec<f64> = image
            .rows()
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect();
        let mean = luma.iter().sum::<f64>() / n;
        let contrast = (luma.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
        let saturation = image
            .rows()
            .map(|px| {
                let (lo, hi) = px
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                hi - lo
            })
            .sum::<f64>()
            / n;
        (5.0 * (2.0 * contrast).min(1.0) + 5.0 * saturation.min(1.0)).clamp(0.0, 10.0)
    }
}

/// Mean cosine similarity over all unordered pairs.
pub fn pairwise_similarity(embeddings: &[Vec<f64>]) -> Result<f64, DatagenError> {
    if embeddings.len() < 2 {
        return Err(DatagenError::Argument(format!(
            "pairwise similarity needs at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in embeddings.iter().enumerate() {
        for b in &embeddings[i + 1..] {
            if a.len() != b.len() {
                return Err(DatagenError::Argument(format!(
                    "embedding sizes {} and {}",
                    a.len(),
                    b.len()
                )));
            }
            total += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterThresholds {
    pub aesthetic_min: f64,
    pub similarity_min: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            aesthetic_min: 6.0,
            similarity_min: 0.7,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(-1.0..=1.0).contains(&self.similarity_min) {
            return Err(DatagenError::Config(format!(
                "similarity_min = {} outside [-1, 1]",
                self.similarity_min
            )));
        }
        if self.aesthetic_min.is_nan() {
            return Err(DatagenError::Config("aesthetic_min is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum RejectReason {
    Aesthetic { image: usize, score: f64 },
    Similarity { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub kept: bool,
    pub reasons: Vec<RejectReason>,
    pub aesthetic: Vec<f64>,
    pub similarity: f64,
}

/// Applies the thresholds to precomputed scores. The whole set is rejected
/// if any image scores low or the set's mean pairwise similarity is low.
pub fn decide(aesthetic: &[f64], similarity: f64, th: &FilterThresholds) -> FilterDecision {
    let mut reasons: Vec<RejectReason> = aesthetic
        .iter()
        .enumerate()
        .filter(|(_, &s)| !(s >= th.aesthetic_min))
        .map(|(image, &score)| RejectReason::Aesthetic { image, score })
        .collect();
    if !(similarity >= th.similarity_min) {
        reasons.push(RejectReason::Similarity { value: similarity });
    }
    FilterDecision {
        kept: reasons.is_empty(),
        reasons,
        aesthetic: aesthetic.to_vec(),
        similarity,
    }
}

/// Scores every image of `set` and applies [`decide`].
pub fn filter_set(
    set: &ImageSet,
    extractor: &dyn FeatureExtractor,
    aesthetic: &dyn AestheticScorer,
    th: &FilterThresholds,
) -> Result<FilterDecision, DatagenError> {
    th.validate()?;
    let images: Vec<Tensor> = set.images.iter().map(latent_to_image).collect();
    let embeddings = images
        .iter()
        .map(|img| extractor.embed(img))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DatagenError::Extractor {
            set_id: set.set_id.clone(),
            message: e.to_string(),
        })?;
    let scores: Vec<f64> = images.iter().map(|img| aesthetic.score(img)).collect();
    let similarity = pairwise_similarity(&embeddings).map_err(|e| DatagenError::Extractor {
        set_id: set.set_id.clone(),
        message: e.to_string(),
    })?;
    Ok(decide(&scores, similarity, th))
}
