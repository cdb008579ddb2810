//! Evaluation protocol: per-sample IoU with no-target conventions, cIoU,
//! gIoU, no-target accuracy and precision at IoU thresholds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::maskgeo::{rle_decode, rle_encode, BinaryMask, MaskError, RleMask};
use crate::omnimodel::{Forward, ModelError, ModelInput, ModelState, VisualInput};
use crate::synthref::build::LoadedSample;
use crate::synthref::{Case, PromptKind, Source, SynthError};

pub const PR_THRESHOLDS: [f64; 3] = [0.7, 0.8, 0.9];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no records to score")]
    Empty,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error("missing data for {0:?}")]
    Missing(Vec<String>),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One scored (sample, source) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub source: Source,
    pub case: Case,
    pub gt_empty: bool,
    pub pred_no_target: bool,
    pub intersection: usize,
    /// Union as it enters cIoU: predicted pixels for no-target samples.
    pub union: usize,
    pub iou: f64,
}

/// Scores one prediction. A predicted no-target (`exists_prob < 0.5`)
/// empties the predicted mask.
pub fn score_sample(
    id: &str,
    source: Source,
    case: Case,
    pred: &BinaryMask,
    exists_prob: f64,
    gt: &BinaryMask,
    exists: bool,
) -> Result<EvalRecord> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MaskError::Dimension(pred.height(), pred.width(), gt.height(), gt.width()).into());
    }
    let pred_no_target = exists_prob < 0.5;
    let (inter, pred_px) = if pred_no_target { (0, 0) } else { (pred.intersection_count(gt)?, pred.count()) };
    let (intersection, union, iou) = match (exists, pred_no_target) {
        (false, true) => (0, 0, 1.0),
        (false, false) => (0, pred_px, 0.0),
        (true, true) => (0, gt.count(), 0.0),
        (true, false) => {
            let u = pred_px + gt.count() - inter;
            (inter, u, if u == 0 { 1.0 } else { inter as f64 / u as f64 })
        }
    };
    Ok(EvalRecord { id: id.to_string(), source, case, gt_empty: !exists, pred_no_target, intersection, union, iou })
}

pub fn giou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64)
}

/// Summed intersections over summed unions; 1 when every union is empty.
pub fn ciou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let i: usize = records.iter().map(|r| r.intersection).sum();
    let u: usize = records.iter().map(|r| r.union).sum();
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Fraction of no-target records flagged as such; `None` without any.
pub fn n_acc(records: &[EvalRecord]) -> Option<f64> {
    let nt: Vec<_> = records.iter().filter(|r| r.gt_empty).collect();
    (!nt.is_empty()).then(|| nt.iter().filter(|r| r.pred_no_target).count() as f64 / nt.len() as f64)
}

/// Fraction of target-present records whose IoU strictly exceeds `x`.
pub fn pr_at(records: &[EvalRecord], x: f64) -> Option<f64> {
    let t: Vec<_> = records.iter().filter(|r| !r.gt_empty).collect();
    (!t.is_empty()).then(|| t.iter().filter(|r| r.iou > x).count() as f64 / t.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ciou: f64,
    pub giou: f64,
    pub n_acc: Option<f64>,
    pub pr: BTreeMap<String, Option<f64>>,
    pub records: usize,
}

impl Metrics {
    pub fn of(records: &[EvalRecord]) -> Result<Self> {
        let pr = PR_THRESHOLDS.iter().map(|&x| (format!("{x}"), pr_at(records, x))).collect();
        Ok(Self { ciou: ciou(records)?, giou: giou(records)?, n_acc: n_acc(records), pr, records: records.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    #[serde(flatten)]
    pub pooled: Metrics,
    /// Samples per case.
    pub per_case_counts: BTreeMap<String, usize>,
    pub per_source: BTreeMap<String, Metrics>,
    pub samples: usize,
}

/// Pools every record; per-source metrics use the records of that source.
pub fn report(split: &str, records: &[EvalRecord]) -> Result<MetricsReport> {
    let pooled = Metrics::of(records)?;
    let mut per_source = BTreeMap::new();
    for src in [Source::Text, Source::Visual] {
        let subset: Vec<EvalRecord> = records.iter().filter(|r| r.source == src).cloned().collect();
        if !subset.is_empty() {
            per_source.insert(src.name().to_string(), Metrics::of(&subset)?);
        }
    }
    let mut seen = BTreeSet::new();
    let mut per_case_counts = BTreeMap::new();
    for r in records {
        if seen.insert(&r.id) {
            *per_case_counts.entry(r.case.name().to_string()).or_insert(0) += 1;
        }
    }
    Ok(MetricsReport { split: split.to_string(), pooled, per_case_counts, per_source, samples: seen.len() })
}

/// Raw network output for one (sample, source), kept for replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub id: String,
    pub source: Source,
    pub mask: RleMask,
    pub exists_prob: f64,
    pub record: EvalRecord,
}

/// Runs the model on every sample (optionally re-prompting visual inputs
/// with another prompt kind) and scores each source against its mask.
pub fn evaluate(
    state: &ModelState,
    split: &str,
    samples: &[LoadedSample],
    kind: Option<PromptKind>,
) -> Result<(MetricsReport, Vec<PredictionDump>)> {
    let mut dumps = Vec::new();
    let mut missing = Vec::new();
    for s in samples {
        let visual = match (&s.visual, kind) {
            (Some(v), Some(k)) if v.kind != k => Some(v.with_kind(k, v.prompt_seed)?),
            (v, _) => v.clone(),
        };
        let input = ModelInput {
            target: &s.target,
            text: s.text_tokens.as_deref(),
            visual: visual.as_ref().map(|v| VisualInput { reference: &v.reference, prompt: &v.prompt }),
        };
        let pred = Forward::predict(state, &input)?;
        for (src, mask) in &pred.masks {
            let Some((_, gt)) = s.gt.iter().find(|(g, _)| g == src) else {
                missing.push(format!("{}:{}", s.id, src.name()));
                continue;
            };
            let record = score_sample(&s.id, *src, s.case, mask, pred.exists_prob, gt, s.exists)?;
            dumps.push(PredictionDump {
                id: s.id.clone(),
                source: *src,
                mask: rle_encode(mask),
                exists_prob: pred.exists_prob,
                record,
            });
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::Missing(missing));
    }
    let records: Vec<EvalRecord> = dumps.iter().map(|d| d.record.clone()).collect();
    Ok((report(split, &records)?, dumps))
}

/// Re-scores saved predictions against the ground truth.
pub fn replay(split: &str, dumps: &[PredictionDump], samples: &[LoadedSample]) -> Result<MetricsReport> {
    let by_id: BTreeMap<&str, &LoadedSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut records = Vec::with_capacity(dumps.len());
    let mut missing = Vec::new();
    for d in dumps {
        let Some((s, gt)) = by_id.get(d.id.as_str()).and_then(|s| s.gt.iter().find(|(g, _)| *g == d.source).map(|(_, m)| (s, m)))
        else {
            missing.push(d.id.clone());
            continue;
        };
        let pred = rle_decode(&d.mask)?;
        records.push(score_sample(&d.id, d.source, s.case, &pred, d.exists_prob, gt, s.exists)?);
    }
    if !missing.is_empty() {
        return Err(EvalError::Missing(missing));
    }
    report(split, &records)
}
