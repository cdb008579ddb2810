//! Synthetic referring-segmentation benchmark built from scenes of colored shapes.

pub mod augment;
pub mod build;
mod pairing;
pub mod scene;
pub mod text;

use serde::{Deserialize, Serialize};

pub use build::{
    build_dataset, load_split, validate_dataset, DatasetConfig, Dataset, GtRecord, LoadedSample, SampleRecord, SplitStats,
    ValidationReport, VisualRecord, SPLITS,
};
pub use pairing::{make_prompt, merge_omni, pair_visual, pair_visual_category, MergeReject, ReferencePool, VisualAssignment};
pub use scene::{generate_scene, select_targets, Category, Color, Scene, SceneConfig, Shape};
pub use text::{annotate_text, interpret, tokenize, Expression, TextAnnotation};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no object could be placed for scene seed {0}")]
    Placement(u64),
    #[error("unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("no eligible reference: {0}")]
    PairingUnavailable(String),
    #[error(transparent)]
    Mask(#[from] crate::maskgeo::MaskError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("image error on {path}: {msg}")]
    Image { path: String, msg: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Whether a prompt refers to one instance, several, or none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Single,
    Multi,
    NoTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    OneVsOne,
    OneVsMany,
    ManyVsOne,
    ManyVsMany,
    NoTarget,
}

impl Case {
    pub const ALL: [Case; 5] = [Case::OneVsOne, Case::OneVsMany, Case::ManyVsOne, Case::ManyVsMany, Case::NoTarget];

    pub fn output_kind(self) -> OutputKind {
        match self {
            Case::OneVsOne | Case::ManyVsOne => OutputKind::Single,
            Case::OneVsMany | Case::ManyVsMany => OutputKind::Multi,
            Case::NoTarget => OutputKind::NoTarget,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Case::OneVsOne => "one_vs_one",
            Case::OneVsMany => "one_vs_many",
            Case::ManyVsOne => "many_vs_one",
            Case::ManyVsMany => "many_vs_many",
            Case::NoTarget => "no_target",
        }
    }

    /// Case of a single-source sample with `n` referred instances.
    pub fn unimodal(n: usize) -> Case {
        match n {
            0 => Case::NoTarget,
            1 => Case::OneVsOne,
            _ => Case::OneVsMany,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Mask,
    Box,
    Scribble,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Mask, PromptKind::Box, PromptKind::Scribble];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Mask => "mask",
            PromptKind::Box => "box",
            PromptKind::Scribble => "scribble",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Text,
    Visual,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Text => "text",
            Source::Visual => "visual",
        }
    }
}

/// Mixes a base seed with a label and index into an independent stream seed.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in label.bytes().chain(index.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
