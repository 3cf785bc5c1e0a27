use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use super::CliError;
use crate::tensor::Tensor;

/// What produced a directory of outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub outputs: Vec<String>,
}

/// Writes `provenance.json` into `dir`.
pub fn write_provenance(dir: &Path, record: &RunRecord) -> Result<(), CliError> {
    let path = dir.join("provenance.json");
    let text = serde_json::to_string_pretty(record)?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

/// Saves an `H x W x C` tensor as an 8-bit PNG, stretching each channel to
/// its own min..max range. One channel becomes grayscale; otherwise the first
/// three channels are written as RGB (missing ones repeat the last).
pub fn write_png(t: &Tensor, path: &Path) -> Result<(), CliError> {
    let shape = t.shape();
    if shape.len() != 3 || shape[2] == 0 {
        return Err(CliError::Config(format!(
            "cannot write a {shape:?} tensor as an image"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let out_c = if c == 1 { 1 } else { 3 };
    let ranges: Vec<(f64, f64)> = (0..c)
        .map(|ch| {
            let vals = t.data().iter().skip(ch).step_by(c);
            vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
        })
        .collect();
    let mut pixels = Vec::with_capacity(h * w * out_c);
    for px in t.data().chunks(c) {
        for k in 0..out_c {
            let ch = k.min(c - 1);
            let (lo, hi) = ranges[ch];
            let v = if hi > lo {
                (px[ch] - lo) / (hi - lo)
            } else {
                0.5
            };
            pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if out_c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(())
}
