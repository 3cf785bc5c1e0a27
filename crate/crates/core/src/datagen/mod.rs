//! Consistent image-set generation: caption templates, joint sampling with
//! shared attention and warping, filtering and the dataset manifest.

mod filter;
mod generate;
mod manifest;
mod templates;

use thiserror::Error;

pub use filter::{
    decide, filter_set, pairwise_similarity, AestheticScorer, CommandExtractor, FeatureExtractor,
    FilterDecision, FilterThresholds, RejectReason, ToyAesthetic, ToyExtractor,
};
pub use generate::{
    extract_fg_mask, generate_set, generate_set_from, generate_sets, latent_to_image, GenPath,
    GenSetConfig, ImageSet, Provenance, SetJob, SetRequest,
};
pub use manifest::{read_manifest, write_manifest, FileRef, ManifestEntry, ManifestWriter};
pub use templates::{
    parse_captions, CannedCompleter, CommandCompleter, PromptTemplate, TemplateKind, TextCompleter,
    BACKGROUND_TASK, DESCRIPTION_TASK,
};

use crate::container::ContainerError;
use crate::denoiser::DenoiserError;
use crate::geometry::GeometryError;
use crate::sampler::SamplerError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("template slot `{slot}` was not provided")]
    Template { slot: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("feature extraction failed for set {set_id}: {message}")]
    Extractor { set_id: String, message: String },
    #[error("text completion failed: {0}")]
    Completer(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("corrupted file {file}: content hash does not match the manifest")]
    Corruption { file: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}
