use std::sync::OnceLock;

use omniris::maskgeo::BinaryMask;
use omniris::synthref::augment::{augment, flip_mask, transform_image, transform_tokens, Augmentation};
use omniris::synthref::build::{LoadedSample, RgbImage};
use omniris::synthref::text::{detokenize, tokenize};
use omniris::synthref::{build_dataset, Color, Dataset, DatasetConfig};
use proptest::prelude::*;

fn samples() -> &'static [LoadedSample] {
    static S: OnceLock<Vec<LoadedSample>> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            seed: 11,
            train_size: 20,
            test_size: 30,
            train_scenes: 15,
            train_reference_scenes: 30,
            test_reference_scenes: 30,
            ..DatasetConfig::default()
        };
        build_dataset(&cfg, dir.path()).unwrap();
        Dataset::open(dir.path()).unwrap().load("omni-train").unwrap()
    })
}

fn solid(c: Color) -> RgbImage {
    RgbImage { height: 1, width: 2, pixels: [c.rgb(), [240, 240, 240]].concat() }
}

#[test]
fn identity_is_a_no_op() {
    for s in samples() {
        let a = augment(s, &Augmentation::IDENTITY);
        assert_eq!(a.target.pixels, s.target.pixels);
        assert_eq!(a.text_tokens, s.text_tokens);
        assert_eq!(a.gt, s.gt);
    }
}

#[test]
fn palette_pixels_follow_the_permutation() {
    let perm = [1, 2, 3, 4, 0];
    for (i, &c) in Color::ALL.iter().enumerate() {
        let out = transform_image(&solid(c), &perm, false);
        assert_eq!(&out.pixels[..3], &Color::ALL[perm[i]].rgb());
        assert_eq!(&out.pixels[3..], &[240, 240, 240], "background untouched");
    }
}

#[test]
fn colour_words_follow_the_same_permutation() {
    let perm = [1, 2, 3, 4, 0];
    for (i, &c) in Color::ALL.iter().enumerate() {
        let t = transform_tokens(&tokenize(&format!("the {} circle", c.word())), &perm, false);
        assert_eq!(detokenize(&t), format!("the {} circle", Color::ALL[perm[i]].word()));
    }
}

#[test]
fn flipping_swaps_sides_in_words_and_pixels() {
    let id = [0, 1, 2, 3, 4];
    let t = transform_tokens(&tokenize("the circle left of the leftmost square"), &id, true);
    assert_eq!(detokenize(&t), "the circle right of the rightmost square");
    let img = solid(Color::Red);
    let f = transform_image(&img, &id, true);
    assert_eq!(&f.pixels[3..], &Color::Red.rgb());
    assert_eq!(&f.pixels[..3], &[240, 240, 240]);
}

#[test]
fn target_flip_moves_ground_truth_and_reference_flip_moves_prompt() {
    for s in samples() {
        let aug = Augmentation { perm: [0, 1, 2, 3, 4], flip_target: true, flip_reference: false };
        let a = augment(s, &aug);
        for ((_, m), (_, n)) in s.gt.iter().zip(&a.gt) {
            assert_eq!(&flip_mask(m), n);
        }
        if let (Some(v), Some(w)) = (&s.visual, &a.visual) {
            assert_eq!(v.prompt, w.prompt);
            let b = augment(s, &Augmentation { flip_target: false, flip_reference: true, ..aug });
            let w = b.visual.as_ref().unwrap();
            assert_eq!(flip_mask(&v.prompt), w.prompt);
            assert_eq!(flip_mask(&v.instance), w.instance);
            assert_eq!(b.gt, s.gt);
        }
    }
}

#[test]
fn text_stays_in_sync_with_tokens() {
    let aug = Augmentation { perm: [4, 3, 2, 1, 0], flip_target: true, flip_reference: true };
    for s in samples() {
        let a = augment(s, &aug);
        if let Some(t) = &a.text_tokens {
            assert_eq!(a.text.as_deref(), Some(detokenize(t).as_str()));
        }
    }
}

proptest! {
    #[test]
    fn double_flip_restores_masks(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
        let m = BinaryMask::from_fn(h, w, |r, c| bits[r * 12 + c]);
        prop_assert_eq!(flip_mask(&flip_mask(&m)), m);
    }
}
