//! Request handling shared by the `infer` subcommand and the HTTP service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use omniris::maskgeo::{rasterize_box, rasterize_strokes, rle_decode, rle_encode, BinaryMask, BoxRegion, RleMask};
use omniris::omnimodel::{Forward, ModelInput, ModelState, VisualInput};
use omniris::synthref::build::{RgbImage, SampleRecord};
use omniris::synthref::text::{tokenize, PAD};
use omniris::synthref::{Case, Dataset, PromptKind, Source};
use serde::{Deserialize, Serialize};

pub const PAGE_SIZE: usize = 20;
pub use omniris::synthref::SPLITS;

#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Internal(String),
}

impl ApiError {
    pub fn message(&self) -> &str {
        match self {
            ApiError::BadRequest(m) | ApiError::NotFound(m) | ApiError::Internal(m) => m,
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for ApiError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferencePrompt>,
}

/// `payload` is an RLE mask, a box or a list of `(x, y)` polylines,
/// according to `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePrompt {
    pub image_id: String,
    pub kind: PromptKind,
    pub payload: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskOut {
    pub source: Source,
    pub rle: RleMask,
    pub logits: LogitStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub masks: Vec<MaskOut>,
    pub exists_prob: f64,
    pub predicted_no_target: bool,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: String,
    pub case: Case,
    pub exists: bool,
    pub target_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<PromptKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePage {
    pub split: String,
    pub page: usize,
    pub page_size: usize,
    pub pages: usize,
    pub total: usize,
    pub samples: Vec<SampleInfo>,
}

fn image_id(path: &str) -> String {
    path.trim_start_matches("images/").trim_end_matches(".png").to_string()
}

impl SampleInfo {
    fn of(r: &SampleRecord) -> Self {
        Self {
            id: r.id.clone(),
            case: r.case,
            exists: r.exists,
            target_id: image_id(&r.target_image),
            text: r.text.clone(),
            reference_id: r.visual.as_ref().map(|v| image_id(&v.ref_image)),
            kind: r.visual.as_ref().map(|v| v.kind),
        }
    }
}

/// An immutable model snapshot plus the browsable dataset index.
pub struct Segmenter {
    state: ModelState,
    root: PathBuf,
    splits: BTreeMap<String, Vec<SampleInfo>>,
    requests: AtomicU64,
}

impl Segmenter {
    pub fn new(state: ModelState, data: &Path) -> anyhow::Result<Self> {
        let ds = Dataset::open(data)?;
        let mut splits = BTreeMap::new();
        for split in SPLITS {
            if let Ok(records) = ds.records(split) {
                splits.insert(split.to_string(), records.iter().map(SampleInfo::of).collect());
            }
        }
        if splits.is_empty() {
            anyhow::bail!("no splits found under {}", data.display());
        }
        Ok(Self { state, root: data.to_path_buf(), splits, requests: AtomicU64::new(0) })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn split_names(&self) -> Vec<String> {
        self.splits.keys().cloned().collect()
    }

    pub fn sample(&self, id: &str) -> Option<&SampleInfo> {
        self.splits.values().flatten().find(|s| s.id == id)
    }

    pub fn samples(&self, split: &str, page: usize) -> Result<SamplePage, ApiError> {
        let all = self.splits.get(split).ok_or_else(|| ApiError::NotFound(format!("unknown split {split:?}")))?;
        let pages = all.len().div_ceil(PAGE_SIZE);
        if page >= pages.max(1) {
            return Err(ApiError::BadRequest(format!("page {page} out of range (split has {pages} pages)")));
        }
        let samples = all.iter().skip(page * PAGE_SIZE).take(PAGE_SIZE).cloned().collect();
        Ok(SamplePage { split: split.to_string(), page, page_size: PAGE_SIZE, pages, total: all.len(), samples })
    }

    fn image_path(&self, id: &str) -> Result<PathBuf, ApiError> {
        let safe = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let path = self.root.join("images").join(format!("{id}.png"));
        if !safe || !path.is_file() {
            return Err(ApiError::NotFound(format!("unknown image {id:?}")));
        }
        Ok(path)
    }

    pub fn image_png(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        std::fs::read(self.image_path(id)?).map_err(|e| ApiError::Internal(e.to_string()))
    }

    pub fn image(&self, id: &str) -> Result<RgbImage, ApiError> {
        RgbImage::read(&self.image_path(id)?).map_err(|e| ApiError::Internal(e.to_string()))
    }

    pub fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, ApiError> {
        let start = Instant::now();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let tokens = req.text.as_deref().map(tokenize).filter(|t| t.iter().any(|&id| id != PAD));
        if tokens.is_none() && req.reference.is_none() {
            return Err(ApiError::BadRequest("at least one prompt required".into()));
        }
        let target = self.image(&req.target_id)?;
        let reference = match &req.reference {
            Some(r) => {
                let img = self.image(&r.image_id)?;
                let prompt = rasterize_prompt(r, img.height, img.width)?;
                Some((img, prompt))
            }
            None => None,
        };
        let input = ModelInput {
            target: &target,
            text: tokens.as_deref(),
            visual: reference.as_ref().map(|(img, prompt)| VisualInput { reference: img, prompt }),
        };
        let pred = Forward::predict(&self.state, &input).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let masks = pred
            .masks
            .iter()
            .zip(&pred.logit_stats)
            .map(|((source, mask), &(mean, min, max))| {
                let mask = if pred.predicted_no_target { BinaryMask::empty(mask.height(), mask.width()) } else { mask.clone() };
                MaskOut { source: *source, rle: rle_encode(&mask), logits: LogitStats { mean, min, max } }
            })
            .collect();
        Ok(SegmentResponse {
            masks,
            exists_prob: pred.exists_prob,
            predicted_no_target: pred.predicted_no_target,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Turns a reference payload into the binary prompt mask the model takes.
pub fn rasterize_prompt(r: &ReferencePrompt, height: usize, width: usize) -> Result<BinaryMask, ApiError> {
    let bad = |e: &dyn std::fmt::Display| ApiError::BadRequest(format!("{} payload: {e}", r.kind.name()));
    let mask = match r.kind {
        PromptKind::Mask => {
            let rle: RleMask = serde_json::from_value(r.payload.clone()).map_err(|e| bad(&e))?;
            if rle.height != height || rle.width != width {
                return Err(bad(&format!("mask is {}x{}, reference is {height}x{width}", rle.height, rle.width)));
            }
            rle_decode(&rle).map_err(|e| bad(&e))?
        }
        PromptKind::Box => {
            let b: BoxRegion = serde_json::from_value(r.payload.clone()).map_err(|e| bad(&e))?;
            rasterize_box(b, height, width).map_err(|e| bad(&e))?
        }
        PromptKind::Scribble => {
            let strokes: Vec<Vec<(f64, f64)>> = serde_json::from_value(r.payload.clone()).map_err(|e| bad(&e))?;
            if strokes.iter().any(|s| s.is_empty()) {
                return Err(bad(&"empty stroke"));
            }
            rasterize_strokes(&strokes, height, width)
        }
    };
    if mask.is_empty() {
        return Err(bad(&"prompt covers no pixels"));
    }
    Ok(mask)
}
