//! Label-preserving training augmentation: a colour permutation shared by
//! target, reference and colour words, and independent horizontal flips of
//! target and reference.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::build::{LoadedSample, RgbImage};
use super::scene::Color;
use super::text::{detokenize, vocab};
use crate::maskgeo::BinaryMask;

/// Per-channel distance within which a pixel counts as drawn in a palette colour.
const PALETTE_TOLERANCE: i32 = 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    /// `perm[c]` replaces colour `c` (indices into [`Color::ALL`]).
    pub perm: [usize; 5],
    pub flip_target: bool,
    pub flip_reference: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { perm: [0, 1, 2, 3, 4], flip_target: false, flip_reference: false };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut perm = [0, 1, 2, 3, 4];
        perm.shuffle(rng);
        Self { perm, flip_target: rng.gen(), flip_reference: rng.gen() }
    }
}

fn palette_index(px: &[u8]) -> Option<usize> {
    Color::ALL
        .iter()
        .position(|c| c.rgb().iter().zip(px).all(|(&b, &p)| (b as i32 - p as i32).abs() <= PALETTE_TOLERANCE))
}

/// Recolours object pixels by `perm` and optionally mirrors columns.
pub fn transform_image(img: &RgbImage, perm: &[usize; 5], flip: bool) -> RgbImage {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0u8; img.pixels.len()];
    for r in 0..h {
        for c in 0..w {
            let src = &img.pixels[(r * w + c) * 3..(r * w + c) * 3 + 3];
            let dc = if flip { w - 1 - c } else { c };
            let dst = &mut out[(r * w + dc) * 3..(r * w + dc) * 3 + 3];
            match palette_index(src) {
                Some(i) if perm[i] != i => {
                    let (from, to) = (Color::ALL[i].rgb(), Color::ALL[perm[i]].rgb());
                    for ch in 0..3 {
                        dst[ch] = (src[ch] as i32 - from[ch] as i32 + to[ch] as i32).clamp(0, 255) as u8;
                    }
                }
                _ => dst.copy_from_slice(src),
            }
        }
    }
    RgbImage { height: h, width: w, pixels: out }
}

pub fn flip_mask(m: &BinaryMask) -> BinaryMask {
    let w = m.width();
    BinaryMask::from_fn(m.height(), w, |r, c| m.get(r, w - 1 - c))
}

fn word_id(word: &str) -> u32 {
    vocab().iter().position(|&v| v == word).expect("word in vocabulary") as u32
}

/// Maps colour words through `perm` and, when `flip`, swaps left and right words.
pub fn transform_tokens(tokens: &[u32], perm: &[usize; 5], flip: bool) -> Vec<u32> {
    let mut map: Vec<(u32, u32)> =
        Color::ALL.iter().enumerate().map(|(i, c)| (word_id(c.word()), word_id(Color::ALL[perm[i]].word()))).collect();
    if flip {
        for (a, b) in [("leftmost", "rightmost"), ("left", "right")] {
            map.push((word_id(a), word_id(b)));
            map.push((word_id(b), word_id(a)));
        }
    }
    tokens.iter().map(|&t| map.iter().find(|(from, _)| *from == t).map_or(t, |&(_, to)| to)).collect()
}

pub fn augment(s: &LoadedSample, aug: &Augmentation) -> LoadedSample {
    if *aug == Augmentation::IDENTITY {
        return s.clone();
    }
    let flip_t = |m: &BinaryMask| if aug.flip_target { flip_mask(m) } else { m.clone() };
    let flip_r = |m: &BinaryMask| if aug.flip_reference { flip_mask(m) } else { m.clone() };
    let visual = s.visual.as_ref().map(|v| {
        let mut v = v.clone();
        v.reference = Arc::new(transform_image(&v.reference, &aug.perm, aug.flip_reference));
        v.prompt = flip_r(&v.prompt);
        v.instance = flip_r(&v.instance);
        let color = Color::ALL[aug.perm[Color::ALL.iter().position(|&c| c == v.category.color).expect("palette colour")]];
        v.category.color = color;
        v
    });
    let text_tokens = s.text_tokens.as_ref().map(|t| transform_tokens(t, &aug.perm, aug.flip_target));
    LoadedSample {
        target: Arc::new(transform_image(&s.target, &aug.perm, aug.flip_target)),
        text: text_tokens.as_deref().map(detokenize),
        text_tokens,
        visual,
        gt: s.gt.iter().map(|(src, m)| (*src, flip_t(m))).collect(),
        ..s.clone()
    }
}
