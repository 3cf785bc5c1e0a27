use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::filter::FilterDecision;
use super::generate::{GenPath, ImageSet, Provenance};
use super::DatagenError;
use crate::attention::ForegroundMask;
use crate::container;

const FORMAT: &str = "syncd-manifest";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    set_id: String,
    path: GenPath,
    prompts: Vec<String>,
    object_description: String,
    image_files: Vec<FileRef>,
    mask_files: Vec<FileRef>,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filter: Option<FilterDecision>,
}

/// A set together with its filtering outcome, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub set: ImageSet,
    pub filter: Option<FilterDecision>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn check_id(id: &str) -> Result<(), DatagenError> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(DatagenError::Manifest(format!(
            "set id `{id}` is not a safe file name"
        )))
    }
}

/// Appends sets to a manifest, storing tensors next to it.
pub struct ManifestWriter {
    root: PathBuf,
    path: PathBuf,
    out: BufWriter<File>,
}

impl ManifestWriter {
    /// Creates (or truncates) the manifest and writes its header line.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, DatagenError> {
        let path = path.as_ref().to_path_buf();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if !root.as_os_str().is_empty() {
            fs::create_dir_all(&root).map_err(io_err(&root))?;
        }
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        let header = serde_json::to_string(&Header {
            format: FORMAT.into(),
            version: VERSION,
        })
        .expect("header serializes");
        writeln!(out, "{header}").map_err(io_err(&path))?;
        Ok(Self { root, path, out })
    }

    fn store(&self, rel: String, bytes: &[u8]) -> Result<FileRef, DatagenError> {
        let full = self.root.join(&rel);
        if let Some(dir) = full.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&full, bytes).map_err(io_err(&full))?;
        Ok(FileRef {
            path: rel,
            sha256: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn append(&mut self, entry: &ManifestEntry) -> Result<(), DatagenError> {
        let set = &entry.set;
        check_id(&set.set_id)?;
        let image_files = set
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                self.store(
                    format!("{}/image_{i}.sycd", set.set_id),
                    &container::encode(img),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mask_files = set
            .masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                self.store(
                    format!("{}/mask_{i}.sycd", set.set_id),
                    &container::encode(&m.to_tensor()),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let record = Record {
            set_id: set.set_id.clone(),
            path: set.path,
            prompts: set.prompts.clone(),
            object_description: set.object_description.clone(),
            image_files,
            mask_files,
            provenance: set.provenance.clone(),
            filter: entry.filter.clone(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), DatagenError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn write_manifest(
    entries: &[ManifestEntry],
    path: impl AsRef<Path>,
) -> Result<(), DatagenError> {
    let mut w = ManifestWriter::create(path)?;
    for e in entries {
        w.append(e)?;
    }
    w.finish()
}

fn load_verified(root: &Path, file: &FileRef) -> Result<crate::tensor::Tensor, DatagenError> {
    if Path::new(&file.path).is_absolute() || file.path.split('/').any(|c| c == "..") {
        return Err(DatagenError::Manifest(format!(
            "file path `{}` escapes the manifest directory",
            file.path
        )));
    }
    let full = root.join(&file.path);
    let bytes = fs::read(&full).map_err(io_err(&full))?;
    if hex::encode(Sha256::digest(&bytes)) != file.sha256 {
        return Err(DatagenError::Corruption {
            file: file.path.clone(),
        });
    }
    Ok(container::decode(&bytes)?)
}

/// Reads a manifest, verifying every referenced file against its hash.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DatagenError> {
    let path = path.as_ref();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatagenError::Manifest("missing header line".into()))?
        .map_err(io_err(path))?;
    let header: Header = serde_json::from_str(&header)
        .map_err(|e| DatagenError::Manifest(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(DatagenError::Manifest(format!(
            "unsupported manifest {} v{}",
            header.format, header.version
        )));
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| DatagenError::Manifest(format!("line {}: {e}", no + 2)))?;
        let images = rec
            .image_files
            .iter()
            .map(|f| load_verified(&root, f))
            .collect::<Result<Vec<_>, _>>()?;
        let masks = rec
            .mask_files
            .iter()
            .map(|f| Ok(ForegroundMask::from_tensor(&load_verified(&root, f)?)?))
            .collect::<Result<Vec<_>, DatagenError>>()?;
        out.push(ManifestEntry {
            set: ImageSet {
                set_id: rec.set_id,
                images,
                masks,
                prompts: rec.prompts,
                object_description: rec.object_description,
                path: rec.path,
                provenance: rec.provenance,
            },
            filter: rec.filter,
        });
    }
    Ok(out)
}
