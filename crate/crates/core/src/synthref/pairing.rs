use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::scene::{Category, Scene};
use super::{Case, OutputKind, PromptKind, Result, SynthError};
use crate::maskgeo::{box_from_mask, rasterize_box, scribble_from_mask, BinaryMask, ScribbleStyle};

/// Reference scenes indexed by the categories they contain.
#[derive(Clone, Debug)]
pub struct ReferencePool {
    scenes: Vec<Scene>,
    index: BTreeMap<Category, Vec<(usize, usize)>>,
}

impl ReferencePool {
    pub fn new(scenes: Vec<Scene>) -> Self {
        let mut index: BTreeMap<Category, Vec<(usize, usize)>> = BTreeMap::new();
        for (si, s) in scenes.iter().enumerate() {
            for (oi, o) in s.objects.iter().enumerate() {
                index.entry(o.category).or_default().push((si, oi));
            }
        }
        Self { scenes, index }
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn categories(&self) -> Vec<Category> {
        self.index.keys().copied().collect()
    }

    pub fn instances(&self, cat: Category) -> &[(usize, usize)] {
        self.index.get(&cat).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualAssignment {
    pub ref_scene: usize,
    pub ref_object: usize,
    pub category: Category,
    pub kind: PromptKind,
    pub prompt_seed: u64,
    pub prompt: BinaryMask,
    pub instance: BinaryMask,
    /// Instances of `category` in the target, all of which form the ground truth.
    pub referents: Vec<usize>,
}

/// Spatial prompt of the given kind for an instance mask.
pub fn make_prompt(instance: &BinaryMask, kind: PromptKind, seed: u64) -> Result<BinaryMask> {
    Ok(match kind {
        PromptKind::Mask => instance.clone(),
        PromptKind::Box => rasterize_box(box_from_mask(instance)?, instance.height(), instance.width())?,
        PromptKind::Scribble => {
            let style = if seed % 4 == 3 { ScribbleStyle::Dots } else { ScribbleStyle::Lines };
            scribble_from_mask(instance, seed, style)?
        }
    })
}

/// Pairs the target with a reference instance of `category`.
pub fn pair_visual_category(
    target: &Scene,
    pool: &ReferencePool,
    category: Category,
    rng: &mut impl Rng,
) -> Result<VisualAssignment> {
    let &(ref_scene, ref_object) = pool
        .instances(category)
        .choose(rng)
        .ok_or_else(|| SynthError::PairingUnavailable(format!("no reference shows a {category}")))?;
    let kind = PromptKind::ALL[rng.gen_range(0..3)];
    let prompt_seed = rng.gen();
    let instance = pool.scenes[ref_scene].objects[ref_object].mask.clone();
    let prompt = make_prompt(&instance, kind, prompt_seed)?;
    Ok(VisualAssignment {
        ref_scene,
        ref_object,
        category,
        kind,
        prompt_seed,
        prompt,
        instance,
        referents: target.instances_of(category),
    })
}

/// Picks a reference category whose multiplicity in the target fits `kind`.
pub fn pair_visual(target: &Scene, pool: &ReferencePool, kind: OutputKind, rng: &mut impl Rng) -> Result<VisualAssignment> {
    if pool.is_empty() {
        return Err(SynthError::PairingUnavailable("empty reference pool".into()));
    }
    let eligible: Vec<Category> = pool
        .categories()
        .into_iter()
        .filter(|&c| {
            let n = target.count_of(c);
            match kind {
                OutputKind::Single => n == 1,
                OutputKind::Multi => n >= 2,
                OutputKind::NoTarget => n == 0,
            }
        })
        .collect();
    let &cat = eligible
        .choose(rng)
        .ok_or_else(|| SynthError::PairingUnavailable(format!("no {kind:?} category for {}", target.id)))?;
    pair_visual_category(target, pool, cat, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MergeReject {
    #[error("one prompt has referents in the target and the other does not")]
    MixedExistence,
    #[error("single-target prompts disagree or the instance is not unique in its category")]
    SingleTargetMismatch,
    #[error("prompts share a category without jointly covering all its instances")]
    PartialCoverage,
}

/// Decides whether a text and a visual prompt on the same target form a valid
/// omni sample, and its case label.
pub fn merge_omni(
    target: &Scene,
    text_referents: &[usize],
    visual_category: Category,
    visual_referents: &[usize],
) -> std::result::Result<Case, MergeReject> {
    let (t, v) = (text_referents, visual_referents);
    match (t.is_empty(), v.is_empty()) {
        (true, true) => return Ok(Case::NoTarget),
        (true, false) | (false, true) => return Err(MergeReject::MixedExistence),
        _ => {}
    }
    let mut union: Vec<usize> = t.iter().chain(v).copied().collect();
    union.sort_unstable();
    union.dedup();
    if union.len() == 1 {
        let i = union[0];
        if target.count_of(target.objects[i].category) != 1 {
            return Err(MergeReject::SingleTargetMismatch);
        }
        return Ok(Case::ManyVsOne);
    }
    let mut shared: Vec<Category> = t.iter().map(|&i| target.objects[i].category).collect();
    shared.push(visual_category);
    shared.sort();
    shared.dedup();
    for c in shared {
        let in_t = t.iter().any(|&i| target.objects[i].category == c);
        let in_v = c == visual_category;
        if in_t && in_v && !target.instances_of(c).iter().all(|i| union.contains(i)) {
            return Err(MergeReject::PartialCoverage);
        }
    }
    Ok(Case::ManyVsMany)
}
