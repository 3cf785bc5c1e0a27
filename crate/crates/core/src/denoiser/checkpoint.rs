use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::model::{DenoiserParams, ModelConfig};
use super::schedule::ScheduleMode;
use super::DenoiserError;
use crate::container;

const HEADER: &str = "syncd-checkpoint 1";

/// Training metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub schedule: ScheduleMode,
    pub step: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> DenoiserError {
    DenoiserError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one container file per tensor plus `manifest.txt` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &DenoiserParams,
    info: &CheckpointInfo,
) -> Result<(), DenoiserError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    writeln!(manifest, "{HEADER}").unwrap();
    writeln!(manifest, "seed {}", params.seed).unwrap();
    writeln!(manifest, "step {}", info.step).unwrap();
    writeln!(
        manifest,
        "schedule {}",
        serde_json::to_string(&info.schedule)
            .unwrap()
            .trim_matches('"')
    )
    .unwrap();
    writeln!(
        manifest,
        "config {}",
        serde_json::to_string(&params.config).unwrap()
    )
    .unwrap();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let file = format!("{name}.sycd");
        container::save(dir.join(&file), t)?;
        writeln!(manifest, "tensor {name} {file}").unwrap();
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(DenoiserParams, CheckpointInfo), DenoiserError> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(DenoiserError::Checkpoint(format!(
            "{} is not a checkpoint manifest",
            path.display()
        )));
    }
    let bad = |line: &str| DenoiserError::Checkpoint(format!("malformed manifest line `{line}`"));
    let (mut seed, mut step, mut schedule, mut config) = (None, None, None, None);
    let mut named = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
        match key {
            "seed" => seed = Some(rest.parse::<u64>().map_err(|_| bad(line))?),
            "step" => step = Some(rest.parse::<u64>().map_err(|_| bad(line))?),
            "schedule" => schedule = Some(rest.parse::<ScheduleMode>().map_err(|_| bad(line))?),
            "config" => {
                config = Some(serde_json::from_str::<ModelConfig>(rest).map_err(|_| bad(line))?)
            }
            "tensor" => {
                let (name, file) = rest.split_once(' ').ok_or_else(|| bad(line))?;
                named.push((name.to_string(), container::load(dir.join(file))?));
            }
            _ => return Err(bad(line)),
        }
    }
    let missing = |what: &str| DenoiserError::Checkpoint(format!("manifest is missing `{what}`"));
    let params = DenoiserParams::from_tensors(
        config.ok_or_else(|| missing("config"))?,
        seed.ok_or_else(|| missing("seed"))?,
        named,
    )?;
    let info = CheckpointInfo {
        schedule: schedule.ok_or_else(|| missing("schedule"))?,
        step: step.ok_or_else(|| missing("step"))?,
    };
    Ok((params, info))
}
