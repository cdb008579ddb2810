use omniris::maskgeo::BinaryMask;
use omniris::objective::*;
use omniris::omnimodel::{Forward, ModelConfig, ModelInput, ModelState, VisualInput};
use omniris::synthref::build::RgbImage;
use omniris::synthref::Source;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorkit::{Graph, Tensor};

const LN2: f64 = std::f64::consts::LN_2;

fn naive_bce(x: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn mask_loss_of(logits: Vec<f64>, gt: &BinaryMask) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[gt.height(), gt.width()], logits).unwrap());
    let l = mask_loss(&mut g, x, gt).unwrap();
    g.value(l).item()
}

#[test]
fn mask_loss_closed_forms() {
    let gt = BinaryMask::from_fn(6, 5, |r, c| (r + c) % 3 == 0);
    assert!((mask_loss_of(vec![0.0; 30], &gt) - LN2).abs() < 1e-15);
    let confident = gt.bits().iter().map(|&b| if b { 40.0 } else { -40.0 }).collect();
    assert!(mask_loss_of(confident, &gt) < 1e-16);
    let very = gt.bits().iter().map(|&b| if b { 800.0 } else { -800.0 }).collect();
    assert_eq!(mask_loss_of(very, &gt), 0.0);
}

#[test]
fn mask_loss_matches_per_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let gt = BinaryMask::from_fn(7, 9, |_, _| rng.gen_bool(0.4));
        let logits: Vec<f64> = (0..63).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let oracle = logits.iter().zip(gt.bits()).map(|(&x, &b)| naive_bce(x, b as u8 as f64)).sum::<f64>() / 63.0;
        assert!((mask_loss_of(logits, &gt) - oracle).abs() < 1e-12);
    }
}

#[test]
fn mask_loss_rejects_size_mismatch() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[4, 4]));
    assert!(matches!(mask_loss(&mut g, x, &BinaryMask::empty(4, 5)), Err(LossError::Size(_))));
}

#[test]
fn region_targets_of_constant_and_checkerboard_masks() {
    assert!(region_targets(&BinaryMask::full(64, 64), 4).iter().all(|&v| v == 1.0));
    assert!(region_targets(&BinaryMask::empty(64, 64), 4).iter().all(|&v| v == 0.0));
    let checker = BinaryMask::from_fn(8, 8, |r, c| (r + c) % 2 == 0);
    assert!(region_targets(&checker, 4).iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn region_loss_on_checkerboard_is_minimal_at_half() {
    let checker = BinaryMask::from_fn(8, 8, |r, c| (r + c) % 2 == 0);
    let eval = |s: f64| {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[16, 1], s).with_grad());
        let l = region_loss(&mut g, x, &checker, 4).unwrap();
        let v = g.value(l).item();
        g.backward(l).unwrap();
        (v, g.grad(x).unwrap().iter().map(|v| v.abs()).fold(0.0, f64::max))
    };
    let (at_half, grad) = eval(0.0);
    assert!((at_half - LN2).abs() < 1e-12);
    assert!(grad < 1e-15);
    assert!(eval(0.2).0 > at_half && eval(-0.2).0 > at_half);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[9, 1]));
    assert!(region_loss(&mut g, x, &checker, 4).is_err());
}

#[test]
fn region_loss_saturates_on_full_mask() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[16, 1], 50.0));
    let l = region_loss(&mut g, x, &BinaryMask::full(16, 16), 4).unwrap();
    assert!(g.value(l).item() < 1e-20);
}

#[test]
fn existence_loss_values_and_gradient_sign() {
    for y in [true, false] {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1]));
        let l = nt_loss(&mut g, x, y).unwrap();
        assert!((g.value(l).item() - LN2).abs() < 1e-15);
    }
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, 1], 60.0));
    let l = nt_loss(&mut g, x, true).unwrap();
    assert!(g.value(l).item() < 1e-20);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, 1], 0.3).with_grad());
    let l = nt_loss(&mut g, x, true).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap()[0] < 0.0);
}

#[test]
fn weighted_total_arithmetic() {
    let w = LossWeights::default();
    assert!((total_loss(0.5, 0.25, 0.1, &w).l_total - 0.61).abs() < 1e-15);
    let only_mask = LossWeights { mask: 1.0, region: 0.0, nt: 0.0 };
    assert_eq!(total_loss(0.9, 0.3, 0.2, &only_mask).l_total, 0.9);
    assert_eq!(total_loss(0.0, 0.0, 0.0, &w).l_total, 0.0);
    assert!(w.validate().is_ok());
    assert!(LossWeights { mask: 0.0, region: 0.0, nt: 0.0 }.validate().is_err());
    assert!(LossWeights { mask: -1.0, ..w }.validate().is_err());
}

proptest! {
    #[test]
    fn total_is_linear_in_weights(
        m in 0.0..5.0f64, r in 0.0..5.0f64, n in 0.0..5.0f64,
        a in 0.0..4.0f64, w1 in 0.0..2.0f64, w2 in 0.0..2.0f64, w3 in 0.0..2.0f64,
    ) {
        let w = LossWeights { mask: w1, region: w2, nt: w3 };
        let scaled = total_loss(m, r, n, &w.scaled(a)).l_total;
        let base = total_loss(m, r, n, &w).l_total;
        prop_assert!((scaled - a * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
        prop_assert!(base >= 0.0);
    }
}

fn image(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage { height: 8, width: 8, pixels: (0..192).map(|_| rng.gen()).collect() }
}

#[test]
fn sample_loss_averages_sources_and_uses_empty_targets_for_no_target() {
    let cfg = ModelConfig::tiny();
    let st = ModelState::init(&cfg, 3).unwrap();
    let (t, r) = (image(1), image(2));
    let prompt = BinaryMask::from_fn(8, 8, |r, c| r < 4 && c < 4);
    let gt = BinaryMask::from_fn(8, 8, |r, c| r > 3 && c > 2);
    let tokens = [4u32, 5];
    let input = ModelInput { target: &t, text: Some(&tokens), visual: Some(VisualInput { reference: &r, prompt: &prompt }) };
    let w = LossWeights::default();
    let truth = vec![(Source::Text, gt.clone()), (Source::Visual, gt.clone())];

    let mut f = Forward::new(&st, &[], false);
    let out = f.run(&input).unwrap();
    let l = sample_loss(&mut f.g, &out, &truth, true, &w, 4).unwrap().breakdown(&f.g);
    let per: Vec<f64> = out
        .sources
        .iter()
        .map(|s| {
            let x = f.g.value(s.mask_logits).data().to_vec();
            x.iter().zip(gt.bits()).map(|(&x, &b)| naive_bce(x, b as u8 as f64)).sum::<f64>() / 64.0
        })
        .collect();
    assert!((l.l_mask - (per[0] + per[1]) / 2.0).abs() < 1e-12);
    assert!((l.l_total - total_loss(l.l_mask, l.l_region, l.l_nt, &w).l_total).abs() < 1e-12);

    let nt = sample_loss(&mut f.g, &out, &truth, false, &w, 4).unwrap().breakdown(&f.g);
    let empty: Vec<f64> = out
        .sources
        .iter()
        .map(|s| f.g.value(s.mask_logits).data().iter().map(|&x| naive_bce(x, 0.0)).sum::<f64>() / 64.0)
        .collect();
    assert!((nt.l_mask - (empty[0] + empty[1]) / 2.0).abs() < 1e-12);

    let partial = vec![(Source::Text, gt)];
    assert!(matches!(sample_loss(&mut f.g, &out, &partial, true, &w, 4), Err(LossError::MissingTarget(Source::Visual))));
}
