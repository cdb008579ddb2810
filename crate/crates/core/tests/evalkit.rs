use omniris::evalkit::*;
use omniris::maskgeo::BinaryMask;
use omniris::omnimodel::{ModelConfig, ModelState};
use omniris::synthref::{build_dataset, Case, Dataset, DatasetConfig, PromptKind, Source};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rec(gt: &BinaryMask, pred: &BinaryMask, prob: f64, exists: bool) -> EvalRecord {
    let case = if exists { Case::OneVsOne } else { Case::NoTarget };
    score_sample("s", Source::Text, case, pred, prob, gt, exists).unwrap()
}

fn strip(n: usize, from: usize, to: usize) -> BinaryMask {
    BinaryMask::from_fn(1, n, |_, c| (from..to).contains(&c))
}

fn with_iou(iou: f64) -> EvalRecord {
    EvalRecord {
        id: format!("{iou}"),
        source: Source::Visual,
        case: Case::OneVsOne,
        gt_empty: false,
        pred_no_target: false,
        intersection: 0,
        union: 1,
        iou,
    }
}

#[test]
fn no_target_conventions() {
    let empty = BinaryMask::empty(4, 4);
    let tn = rec(&empty, &BinaryMask::full(4, 4), 0.2, false);
    assert_eq!((tn.iou, tn.union, tn.pred_no_target), (1.0, 0, true));
    let fp = rec(&BinaryMask::empty(1, 16), &strip(16, 0, 3), 0.9, false);
    assert_eq!((fp.iou, fp.union), (0.0, 3));
    let fp_empty = rec(&empty, &empty, 0.7, false);
    assert_eq!((fp_empty.iou, fp_empty.union), (0.0, 0));
    // a present target flagged absent scores 0 and its mask is discarded
    let fn_ = rec(&strip(16, 2, 6), &strip(16, 2, 6), 0.49, true);
    assert_eq!((fn_.iou, fn_.intersection, fn_.union), (0.0, 0, 4));
}

#[test]
fn pixel_iou_and_size_check() {
    let r = rec(&strip(10, 0, 4), &strip(10, 2, 6), 0.5, true);
    assert_eq!((r.intersection, r.union), (2, 6));
    assert_eq!(r.iou, 1.0 / 3.0);
    let bad = score_sample("s", Source::Text, Case::OneVsOne, &BinaryMask::empty(2, 3), 0.9, &BinaryMask::empty(3, 2), true);
    assert!(bad.is_err());
    let bad = score_sample("s", Source::Text, Case::NoTarget, &BinaryMask::empty(2, 3), 0.1, &BinaryMask::empty(3, 2), false);
    assert!(bad.is_err());
}

#[test]
fn aggregate_examples() {
    let half = with_iou(0.5);
    let tn = rec(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2), 0.0, false);
    assert_eq!(giou(&[half.clone(), tn.clone()]).unwrap(), 0.75);
    assert_eq!(giou(&[tn.clone(), tn.clone()]).unwrap(), 1.0);
    assert!(giou(&[]).is_err() && ciou(&[]).is_err());

    let base = rec(&strip(10, 0, 4), &strip(10, 2, 6), 0.9, true);
    assert_eq!(ciou(std::slice::from_ref(&base)).unwrap(), 1.0 / 3.0);
    assert_eq!(ciou(&[base.clone(), tn.clone()]).unwrap(), 1.0 / 3.0);
    let fp = rec(&BinaryMask::empty(1, 20), &strip(20, 5, 15), 0.8, false);
    assert_eq!(ciou(&[base.clone(), fp]).unwrap(), 2.0 / 16.0);
    assert_eq!(ciou(&[tn.clone()]).unwrap(), 1.0);

    let flagged = |p: f64| rec(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2), p, false);
    assert_eq!(n_acc(&[flagged(0.1), flagged(0.2), flagged(0.3), flagged(0.6)]), Some(0.75));
    assert_eq!(n_acc(&[flagged(0.1)]), Some(1.0));
    assert_eq!(n_acc(&[flagged(0.9)]), Some(0.0));
    assert_eq!(n_acc(&[half.clone()]), None);

    assert_eq!(pr_at(&[with_iou(0.8), with_iou(0.6), tn.clone()], 0.7), Some(0.5));
    assert_eq!(pr_at(&[with_iou(0.1), with_iou(0.01)], 0.0), Some(1.0));
    assert_eq!(pr_at(&[tn], 0.7), None);
}

#[test]
fn precision_threshold_is_strict() {
    let r = rec(&strip(10, 0, 10), &strip(10, 0, 7), 0.9, true);
    assert_eq!(r.iou, 0.7);
    assert_eq!(pr_at(std::slice::from_ref(&r), 0.7), Some(0.0));
    assert_eq!(pr_at(&[r], 0.69), Some(1.0));
}

#[test]
fn perfect_and_all_empty_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut perfect = Vec::new();
    let mut silent = Vec::new();
    for i in 0..40 {
        let exists = i % 3 != 0;
        let gt = if exists { BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.3)) } else { BinaryMask::empty(8, 8) };
        let gt = if exists && gt.is_empty() { BinaryMask::full(8, 8) } else { gt };
        perfect.push(rec(&gt, &gt, if exists { 0.9 } else { 0.1 }, exists));
        silent.push(rec(&gt, &BinaryMask::empty(8, 8), 0.0, exists));
    }
    let p = report("x", &perfect).unwrap();
    assert_eq!((p.pooled.ciou, p.pooled.giou, p.pooled.n_acc), (1.0, 1.0, Some(1.0)));
    let s = report("x", &silent).unwrap();
    assert_eq!(s.pooled.n_acc, Some(1.0));
    assert_eq!(s.pooled.pr["0.7"], Some(0.0));
}

/// Per-pixel recomputation of a record straight from the definitions.
fn naive(pred: &BinaryMask, prob: f64, gt: &BinaryMask, exists: bool) -> (usize, usize, f64) {
    let flagged = prob < 0.5;
    let (mut i, mut u, mut p) = (0, 0, 0);
    for r in 0..gt.height() {
        for c in 0..gt.width() {
            let a = pred.get(r, c) && !flagged;
            let b = gt.get(r, c);
            i += (a && b) as usize;
            u += (a || b) as usize;
            p += a as usize;
        }
    }
    match (exists, flagged) {
        (false, true) => (0, 0, 1.0),
        (false, false) => (0, p, 0.0),
        (true, true) => (0, u, 0.0),
        (true, false) => (i, u, i as f64 / u as f64),
    }
}

#[test]
fn metrics_equal_brute_force_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut records = Vec::new();
    let mut oracle = Vec::new();
    for k in 0..100 {
        let (h, w) = (rng.gen_range(3..12), rng.gen_range(3..12));
        let exists = rng.gen_bool(0.7);
        let density = rng.gen_range(0.05..0.6);
        let mut gt = BinaryMask::from_fn(h, w, |_, _| exists && rng.gen_bool(density));
        if exists && gt.is_empty() {
            gt.set(0, 0, true);
        }
        let pred = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density));
        let prob = rng.gen_range(0.0..1.0);
        let case = if exists { Case::OneVsMany } else { Case::NoTarget };
        let src = if k % 2 == 0 { Source::Text } else { Source::Visual };
        records.push(score_sample(&format!("r{k}"), src, case, &pred, prob, &gt, exists).unwrap());
        oracle.push((naive(&pred, prob, &gt, exists), exists, prob < 0.5));
    }
    for (r, ((i, u, iou), _, _)) in records.iter().zip(&oracle) {
        assert_eq!((r.intersection, r.union, r.iou), (*i, *u, *iou));
    }
    let g = oracle.iter().map(|o| o.0 .2).sum::<f64>() / 100.0;
    let c = oracle.iter().map(|o| o.0 .0).sum::<usize>() as f64 / oracle.iter().map(|o| o.0 .1).sum::<usize>() as f64;
    let nt: Vec<_> = oracle.iter().filter(|o| !o.1).collect();
    let na = nt.iter().filter(|o| o.2).count() as f64 / nt.len() as f64;
    let present: Vec<_> = oracle.iter().filter(|o| o.1).collect();
    let pr = present.iter().filter(|o| o.0 .2 > 0.7).count() as f64 / present.len() as f64;
    assert_eq!(giou(&records).unwrap(), g);
    assert_eq!(ciou(&records).unwrap(), c);
    assert_eq!(n_acc(&records), Some(na));
    assert_eq!(pr_at(&records, 0.7), Some(pr));

    let rep = report("mix", &records).unwrap();
    assert_eq!(rep.samples, 100);
    assert_eq!(rep.per_case_counts.values().sum::<usize>(), 100);
    assert_eq!(rep.per_source["text"].records + rep.per_source["visual"].records, 100);
}

fn arb_record() -> impl Strategy<Value = EvalRecord> {
    (any::<bool>(), any::<bool>(), 0usize..50, 0usize..50, 0usize..50).prop_map(|(exists, flagged, i, extra, p)| {
        let (intersection, union, iou) = match (exists, flagged) {
            (false, true) => (0, 0, 1.0),
            (false, false) => (0, p, 0.0),
            (true, true) => (0, i + extra + 1, 0.0),
            (true, false) => (i, i + extra + 1, i as f64 / (i + extra + 1) as f64),
        };
        EvalRecord {
            id: format!("{i}-{extra}-{p}"),
            source: Source::Text,
            case: if exists { Case::OneVsOne } else { Case::NoTarget },
            gt_empty: !exists,
            pred_no_target: flagged,
            intersection,
            union,
            iou,
        }
    })
}

proptest! {
    #[test]
    fn aggregates_are_bounded_and_order_free(mut rs in prop::collection::vec(arb_record(), 1..40), seed in any::<u64>()) {
        let g = giou(&rs).unwrap();
        let c = ciou(&rs).unwrap();
        for v in [Some(g), Some(c), n_acc(&rs), pr_at(&rs, 0.7)].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        use rand::seq::SliceRandom;
        rs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((giou(&rs).unwrap() - g).abs() < 1e-12);
        prop_assert_eq!(ciou(&rs).unwrap(), c);

        let tn = EvalRecord { gt_empty: true, pred_no_target: true, intersection: 0, union: 0, iou: 1.0, case: Case::NoTarget, ..rs[0].clone() };
        rs.push(tn);
        prop_assert!(giou(&rs).unwrap() >= g - 1e-12);
        prop_assert_eq!(ciou(&rs).unwrap(), c);
    }
}

#[test]
fn live_evaluation_equals_replay_and_kinds_rederive_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        train_size: 12,
        test_size: 30,
        train_scenes: 10,
        train_reference_scenes: 40,
        test_reference_scenes: 40,
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, dir.path()).unwrap();
    let mut ds = Dataset::open(dir.path()).unwrap();
    let mcfg = ModelConfig { d_model: 16, stem_channels: 4, ..ModelConfig::desk() };
    let st = ModelState::init(&mcfg, 0).unwrap();
    let omni = ds.load("omni-test").unwrap();
    let (live, dumps) = evaluate(&st, "omni-test", &omni, None).unwrap();
    assert_eq!(dumps.len(), 60);
    assert_eq!(live.samples, 30);
    let text = dumps.iter().filter(|d| d.source == Source::Text).count();
    assert_eq!(text, 30);
    let json: Vec<String> = dumps.iter().map(|d| serde_json::to_string(d).unwrap()).collect();
    let back: Vec<PredictionDump> = json.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(replay("omni-test", &back, &omni).unwrap(), live);

    let visual = ds.load("visual-test").unwrap();
    let (native, native_dumps) = evaluate(&st, "visual-test", &visual, None).unwrap();
    for k in PromptKind::ALL {
        let (_, dumps) = evaluate(&st, "visual-test", &visual, Some(k)).unwrap();
        for (s, (a, b)) in visual.iter().zip(native_dumps.iter().zip(&dumps)) {
            assert_eq!(a.id, s.id);
            if s.visual.as_ref().unwrap().kind == k {
                assert_eq!(a, b);
            }
        }
    }
    let value = serde_json::to_value(&native).unwrap();
    for key in ["split", "ciou", "giou", "n_acc", "pr", "per_case_counts", "per_source"] {
        assert!(value.get(key).is_some(), "{key}");
    }
}
