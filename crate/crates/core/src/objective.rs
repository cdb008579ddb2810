//! Training loss: per-pixel mask BCE, per-query region BCE against a
//! downsampled soft mask, and existence BCE, combined with fixed weights.

use serde::{Deserialize, Serialize};
use tensorkit::{Graph, Var};

use crate::maskgeo::{resize_soft, BinaryMask};
use crate::omnimodel::ForwardOutput;
use crate::synthref::Source;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("no ground truth for the {0:?} source")]
    MissingTarget(Source),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] tensorkit::TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mask: f64,
    pub region: f64,
    pub nt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mask: 1.0, region: 0.4, nt: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mask, self.region, self.nt];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::Weights(format!("{all:?} must be finite and nonnegative")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(LossError::Weights("at least one weight must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { mask: self.mask * alpha, region: self.region * alpha, nt: self.nt * alpha }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mask: f64,
    pub l_region: f64,
    pub l_nt: f64,
    pub l_total: f64,
}

/// Weighted sum of already computed components.
pub fn total_loss(l_mask: f64, l_region: f64, l_nt: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown { l_mask, l_region, l_nt, l_total: w.mask * l_mask + w.region * l_region + w.nt * l_nt }
}

/// Mean per-pixel BCE of `[H,W]` logits against a binary mask.
pub fn mask_loss(g: &mut Graph, logits: Var, gt: &BinaryMask) -> Result<Var> {
    let shape = g.shape(logits);
    if shape != [gt.height(), gt.width()] {
        return Err(LossError::Size(format!("logits {shape:?} vs mask {}x{}", gt.height(), gt.width())));
    }
    Ok(g.bce_with_logits(logits, &gt.to_f64())?)
}

/// Soft region targets on the `grid×grid` query layout, row-major.
pub fn region_targets(gt: &BinaryMask, grid: usize) -> Vec<f64> {
    resize_soft(gt, grid, grid).values
}

/// BCE between per-query region scores (`[grid², 1]` logits) and the
/// downsampled mask.
pub fn region_loss(g: &mut Graph, scores: Var, gt: &BinaryMask, grid: usize) -> Result<Var> {
    let n = g.value(scores).numel();
    if n != grid * grid {
        return Err(LossError::Size(format!("{n} region scores for a {grid}x{grid} grid")));
    }
    Ok(g.bce_with_logits(scores, &region_targets(gt, grid))?)
}

pub fn nt_loss(g: &mut Graph, exist_logit: Var, exists: bool) -> Result<Var> {
    Ok(g.bce_with_logits(exist_logit, &[if exists { 1.0 } else { 0.0 }])?)
}

/// Graph nodes of one sample's loss.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub mask: Var,
    pub region: Var,
    pub nt: Var,
    pub total: Var,
}

impl SampleLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        LossBreakdown { l_mask: v(self.mask), l_region: v(self.region), l_nt: v(self.nt), l_total: v(self.total) }
    }
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, 1.0 / xs.len() as f64)?)
}

/// Loss of a forward pass. Every term is averaged over the prompt sources;
/// a no-target sample is supervised with empty masks.
pub fn sample_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    gt: &[(Source, BinaryMask)],
    exists: bool,
    w: &LossWeights,
    grid: usize,
) -> Result<SampleLoss> {
    let (mut masks, mut regions, mut nts) = (Vec::new(), Vec::new(), Vec::new());
    for s in &out.sources {
        let (_, m) = gt.iter().find(|(src, _)| *src == s.source).ok_or(LossError::MissingTarget(s.source))?;
        let empty;
        let target = if exists {
            m
        } else {
            empty = BinaryMask::empty(m.height(), m.width());
            &empty
        };
        masks.push(mask_loss(g, s.mask_logits, target)?);
        regions.push(region_loss(g, s.region_logits, target, grid)?);
        nts.push(nt_loss(g, s.exist_logit, exists)?);
    }
    if masks.is_empty() {
        return Err(LossError::Size("forward output has no sources".into()));
    }
    let mask = mean_of(g, &masks)?;
    let region = mean_of(g, &regions)?;
    let nt = mean_of(g, &nts)?;
    let a = g.scale(mask, w.mask)?;
    let b = g.scale(region, w.region)?;
    let c = g.scale(nt, w.nt)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(SampleLoss { mask, region, nt, total })
}
