use omniris::maskgeo::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_mask() -> impl Strategy<Value = BinaryMask> {
    (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::from_bits(h, w, bits).unwrap())
    })
}

/// Blob-like masks: unions of random discs and rectangles.
fn blob(rng: &mut ChaCha8Rng) -> BinaryMask {
    let h = rng.gen_range(4..48);
    let w = rng.gen_range(4..48);
    let parts: Vec<(bool, f64, f64, f64, f64)> = (0..rng.gen_range(1..4))
        .map(|_| {
            (rng.gen_bool(0.5), rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(0.5..8.0), rng.gen_range(0.5..8.0))
        })
        .collect();
    let mut m = BinaryMask::from_fn(h, w, |r, c| {
        parts.iter().any(|&(disc, cy, cx, a, b)| {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            if disc {
                dy * dy + dx * dx <= a * a
            } else {
                dy.abs() <= a && dx.abs() <= b
            }
        })
    });
    if m.is_empty() {
        m.set(rng.gen_range(0..h), rng.gen_range(0..w), true);
    }
    m
}

proptest! {
    #[test]
    fn rle_round_trips(m in arb_mask()) {
        let rle = rle_encode(&m);
        prop_assert_eq!(rle.runs.iter().map(|&r| r as usize).sum::<usize>(), m.height() * m.width());
        prop_assert_eq!(rle_decode(&rle).unwrap(), m);
    }

    #[test]
    fn box_is_tight(m in arb_mask()) {
        prop_assume!(!m.is_empty());
        let b = box_from_mask(&m).unwrap();
        let fg = m.foreground();
        prop_assert!(fg.iter().all(|&(r, c)| (b.row_min..=b.row_max).contains(&r) && (b.col_min..=b.col_max).contains(&c)));
        prop_assert!(fg.iter().any(|&(r, _)| r == b.row_min));
        prop_assert!(fg.iter().any(|&(r, _)| r == b.row_max));
        prop_assert!(fg.iter().any(|&(_, c)| c == b.col_min));
        prop_assert!(fg.iter().any(|&(_, c)| c == b.col_max));
        let boxed = rasterize_box(b, m.height(), m.width()).unwrap();
        prop_assert_eq!(boxed.intersection_count(&m).unwrap(), m.count());
    }

    #[test]
    fn iou_is_symmetric(a in arb_mask(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = BinaryMask::from_fn(a.height(), a.width(), |_, _| rng.gen_bool(0.4));
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        if !a.is_empty() {
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn soft_resize_stays_in_unit_range(m in arb_mask(), h in 1usize..12, w in 1usize..12) {
        let g = resize_soft(&m, h, w);
        prop_assert!(g.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn box_of_l_shape() {
    let mut m = BinaryMask::empty(4, 7);
    m.set(1, 1, true);
    m.set(2, 1, true);
    m.set(2, 2, true);
    m.set(2, 5, true);
    let b = box_from_mask(&m).unwrap();
    // Scan oracle.
    let rows: Vec<usize> = m.foreground().iter().map(|p| p.0).collect();
    let cols: Vec<usize> = m.foreground().iter().map(|p| p.1).collect();
    let want = BoxRegion::new(*rows.iter().min().unwrap(), *cols.iter().min().unwrap(), *rows.iter().max().unwrap(), *cols.iter().max().unwrap());
    assert_eq!(b, want);
    assert_eq!(b, BoxRegion::new(1, 1, 2, 5));
}

#[test]
fn scribbles_on_1000_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (lo, hi) = SCRIBBLE_COVERAGE;
    for i in 0..1000u64 {
        let m = blob(&mut rng);
        let style = if i % 3 == 0 { ScribbleStyle::Dots } else { ScribbleStyle::Lines };
        let s = scribble_from_mask(&m, i, style).unwrap();
        assert_eq!(s, scribble_from_mask(&m, i, style).unwrap());
        assert!(!s.is_empty());
        assert_eq!(s.difference(&m).unwrap().count(), 0, "mask {i} scribble leaves the mask");
        if m.count() >= 4 {
            let cov = s.count() as f64 / m.count() as f64;
            assert!((lo..=hi).contains(&cov), "mask {i}: coverage {cov} of {} px", m.count());
        }
    }
}

#[test]
fn empty_mask_has_no_box_or_scribble() {
    let m = BinaryMask::empty(5, 5);
    assert_eq!(box_from_mask(&m), Err(MaskError::EmptyRegion));
    assert!(scribble_from_mask(&m, 0, ScribbleStyle::Lines).is_err());
}
