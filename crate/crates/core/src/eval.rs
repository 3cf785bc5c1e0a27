//! Metric plumbing: geometric score, intra-cluster similarity and the
//! masked-crop protocol for object-level image similarity.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::ForegroundMask;
use crate::datagen::{pairwise_similarity, DatagenError, FeatureExtractor};
use crate::tensor::Tensor;

/// Background fill used by [`masked_crop`] by default.
pub const MID_GRAY: f64 = 128.0 / 255.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{name} = {value} outside [0, 1]")]
    Range { name: &'static str, value: f64 },
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("image {image:?} and mask {mask:?} disagree in size")]
    Shape { image: Vec<usize>, mask: [usize; 2] },
    #[error("score file: {0}")]
    Csv(#[from] csv::Error),
    #[error("no scores to summarize")]
    NoScores,
    #[error(transparent)]
    Extractor(#[from] DatagenError),
}

/// Text-alignment and object-alignment scores of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub sample_id: String,
    pub text_score: f64,
    pub image_score: f64,
}

/// `sqrt(text_score * image_score)`, both in `[0, 1]`.
pub fn geometric_score(text_score: f64, image_score: f64) -> Result<f64, EvalError> {
    for (name, value) in [("text_score", text_score), ("image_score", image_score)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(EvalError::Range { name, value });
        }
    }
    Ok((text_score * image_score).sqrt())
}

/// Per-set similarities, `None` for sets too small to compare.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub per_set: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
    /// Mean over the sets that were scored; `None` if none were.
    pub mean: Option<f64>,
}

/// Mean pairwise embedding similarity within each set of `[0, 1]` images.
pub fn intra_cluster_similarity(
    sets: &[Vec<Tensor>],
    extractor: &dyn FeatureExtractor,
) -> Result<ClusterReport, EvalError> {
    let per_set = sets
        .par_iter()
        .map(|images| {
            if images.len() < 2 {
                return Ok(None);
            }
            let emb = images
                .iter()
                .map(|img| extractor.embed(img))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Some(pairwise_similarity(&emb)?))
        })
        .collect::<Result<Vec<Option<f64>>, DatagenError>>()?;
    let skipped: Vec<usize> = per_set
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.is_none().then_some(i))
        .collect();
    for &i in &skipped {
        log::warn!("set {i} has fewer than two images; skipped");
    }
    let scored: Vec<f64> = per_set.iter().flatten().copied().collect();
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(ClusterReport {
        per_set,
        skipped,
        mean,
    })
}

/// Fills background pixels with `fill` and crops to the mask's bounding box.
pub fn masked_crop(image: &Tensor, mask: &ForegroundMask, fill: f64) -> Result<Tensor, EvalError> {
    let (h, w) = (mask.height(), mask.width());
    if image.rank() != 3 || image.shape()[0] != h || image.shape()[1] != w {
        return Err(EvalError::Shape {
            image: image.shape().to_vec(),
            mask: [h, w],
        });
    }
    let c = image.shape()[2];
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for col in 0..w {
            if mask.get(r, col) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(col);
                c1 = c1.max(col);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(EvalError::EmptyMask);
    }
    let (ch, cw) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut data = Vec::with_capacity(ch * cw * c);
    for r in r0..=r1 {
        for col in c0..=c1 {
            let px = &image.data()[(r * w + col) * c..][..c];
            if mask.get(r, col) {
                data.extend_from_slice(px);
            } else {
                data.extend(std::iter::repeat_n(fill, c));
            }
        }
    }
    Ok(Tensor::new(vec![ch, cw, c], data).expect("crop size matches data"))
}

/// Reads `sample_id,text_score,image_score` rows (with header).
pub fn read_scores(input: impl Read) -> Result<Vec<ScorePair>, EvalError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<ScorePair>, _>>()?;
    for row in &rows {
        geometric_score(row.text_score, row.image_score)?;
    }
    Ok(rows)
}

/// Aggregate scores in the column order of a method-comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub samples: usize,
    pub mean_image: f64,
    pub mean_text: f64,
    /// Geometric mean of the two averages.
    pub geometric_of_means: f64,
    /// Average of the per-sample geometric scores.
    pub mean_geometric: f64,
}

pub fn summarize(rows: &[ScorePair]) -> Result<ScoreSummary, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::NoScores);
    }
    let n = rows.len() as f64;
    let mean_image = rows.iter().map(|r| r.image_score).sum::<f64>() / n;
    let mean_text = rows.iter().map(|r| r.text_score).sum::<f64>() / n;
    let mut mean_geometric = 0.0;
    for r in rows {
        mean_geometric += geometric_score(r.text_score, r.image_score)? / n;
    }
    Ok(ScoreSummary {
        samples: rows.len(),
        mean_image,
        mean_text,
        geometric_of_means: geometric_score(mean_text, mean_image)?,
        mean_geometric,
    })
}

/// Writes per-sample combined scores followed by a commented summary block
/// (`method, image, text, geometric`).
pub fn write_scores(
    rows: &[ScorePair],
    method: &str,
    out: impl Write,
) -> Result<ScoreSummary, EvalError> {
    let summary = summarize(rows)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "text_score", "image_score", "geometric_score"])?;
    for r in rows {
        let g = geometric_score(r.text_score, r.image_score)?;
        w.write_record([
            r.sample_id.clone(),
            format!("{:.6}", r.text_score),
            format!("{:.6}", r.image_score),
            format!("{g:.6}"),
        ])?;
    }
    let mut out = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    let block = format!(
        "# summary ({} samples)\n# method,image_score,text_score,geometric_score,mean_per_sample_geometric\n# {method},{:.3},{:.3},{:.3},{:.3}\n",
        summary.samples, summary.mean_image, summary.mean_text, summary.geometric_of_means, summary.mean_geometric
    );
    out.write_all(block.as_bytes()).map_err(csv::Error::from)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_examples() {
        assert_eq!(geometric_score(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(geometric_score(0.0, 0.4).unwrap(), 0.0);
        assert!(geometric_score(1.2, 0.5).is_err());
        assert!(geometric_score(0.5, f64::NAN).is_err());
    }

    #[test]
    fn crop_cases() {
        let img = Tensor::new(vec![3, 4, 1], (0..12).map(f64::from).collect()).unwrap();
        let all = ForegroundMask::filled(3, 4, true);
        assert_eq!(masked_crop(&img, &all, MID_GRAY).unwrap(), img);
        let mut cells = vec![false; 12];
        cells[6] = true;
        let one = ForegroundMask::new(3, 4, cells).unwrap();
        assert_eq!(masked_crop(&img, &one, MID_GRAY).unwrap().data(), &[6.0]);
        let none = ForegroundMask::filled(3, 4, false);
        assert!(matches!(
            masked_crop(&img, &none, MID_GRAY),
            Err(EvalError::EmptyMask)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let text = "sample_id,text_score,image_score\n# comment\na,0.789,0.773\nb,0.5,0.5\n";
        let rows = read_scores(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        let mut buf = Vec::new();
        let s = write_scores(&rows, "toy", &mut buf).unwrap();
        let written = String::from_utf8(buf).unwrap();
        assert!(written.contains("# toy,"));
        let back = read_scores(written.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert!((s.mean_text - 0.6445).abs() < 1e-12);
        assert!(read_scores("sample_id,text_score,image_score\nx,1.5,0.2\n".as_bytes()).is_err());
    }
}
