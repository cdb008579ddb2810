use omniris::maskgeo::BinaryMask;
use omniris::omnimodel::*;
use omniris::synthref::build::RgbImage;
use omniris::synthref::Source;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorkit::gradcheck::GradCheckOptions;
use tensorkit::{levels_from_sizes, Graph, Tensor, Var};

fn image(n: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage { height: n, width: n, pixels: (0..n * n * 3).map(|_| rng.gen()).collect() }
}

fn square(n: usize) -> BinaryMask {
    BinaryMask::from_fn(n, n, |r, c| (n / 4..n / 2).contains(&r) && (n / 4..3 * n / 4).contains(&c))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn set(state: &mut ModelState, name: &str, f: impl Fn(usize) -> f64) {
    let t = state.get_mut(name).unwrap_or_else(|| panic!("{name}"));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn zero_prefix(state: &mut ModelState, prefix: &str) {
    let names: Vec<String> = state.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
    assert!(!names.is_empty());
    for n in names {
        set(state, &n, |_| 0.0);
    }
}

fn values(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-wise layer norm with unit gain and zero bias.
fn naive_ln(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            row.iter().map(move |v| (v - mean) / (var + 1e-5).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

fn naive_linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut s = b.data()[o];
            for i in 0..din {
                s += x[r * din + i] * w.data()[i * dout + o];
            }
            out[r * dout + o] = s;
        }
    }
    out
}

#[test]
fn pyramid_shapes_follow_strides() {
    assert_eq!(level_sizes(64), [(16, 16), (8, 8), (4, 4), (2, 2)]);
    let st = ModelState::init(&ModelConfig::desk(), 0).unwrap();
    let img = image(64, 1);
    let mut f = Forward::new(&st, &[], false);
    let fv = f.encode_image(&img).unwrap();
    let shapes: Vec<Vec<usize>> = fv.iter().map(|&v| f.g.shape(v).to_vec()).collect();
    assert_eq!(shapes, vec![vec![256, 64], vec![64, 64], vec![16, 64], vec![4, 64]]);
    let fm = f.pixel_encode(&fv, &level_sizes(64)).unwrap();
    for (v, n) in fm.iter().zip([256, 64, 16, 4]) {
        assert_eq!(f.g.shape(*v), &[n, 64]);
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let st = ModelState::init(&ModelConfig::tiny(), 0).unwrap();
    let mut f = Forward::new(&st, &[], false);
    assert!(matches!(f.encode_image(&image(16, 0)), Err(ModelError::Input(_))));
}

#[test]
fn zero_weights_on_black_image_give_zero_features() {
    let mut st = ModelState::init(&ModelConfig::tiny(), 0).unwrap();
    zero_prefix(&mut st, "image_encoder.");
    let black = RgbImage { height: 8, width: 8, pixels: vec![0; 8 * 8 * 3] };
    let mut f = Forward::new(&st, &[], false);
    for v in f.encode_image(&black).unwrap() {
        assert!(f.g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn identity_projections_without_laterals_pass_normalized_features_through() {
    let cfg = ModelConfig::tiny();
    let d = cfg.d_model;
    let mut st = ModelState::init(&cfg, 0).unwrap();
    zero_prefix(&mut st, "pixel_encoder.");
    for i in 0..4 {
        set(&mut st, &format!("pixel_encoder.proj{i}.w"), |k| if k / d == k % d { 1.0 } else { 0.0 });
        set(&mut st, &format!("pixel_encoder.norm{i}.g"), |_| 1.0);
    }
    let mut f = Forward::new(&st, &[], false);
    let fv = f.encode_image(&image(8, 3)).unwrap();
    let fm = f.pixel_encode(&fv, &level_sizes(8)).unwrap();
    for (a, b) in fv.iter().zip(&fm) {
        assert!(max_diff(&naive_ln(&values(&f.g, *a), d), &values(&f.g, *b)) < 1e-12);
    }
}

#[test]
fn top_down_fusion_matches_hand_computation() {
    let cfg = ModelConfig::tiny();
    let d = cfg.d_model;
    let st = ModelState::init(&cfg, 5).unwrap();
    let sizes = [(4, 4), (2, 2), (1, 1), (1, 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw: Vec<Tensor> = sizes.iter().map(|&(h, w)| random(&[h * w, d], &mut rng)).collect();
    let mut f = Forward::new(&st, &[], false);
    let fv: Vec<Var> = raw.iter().map(|t| f.g.constant(t.clone())).collect();
    let fm = f.pixel_encode(&fv, &sizes).unwrap();

    let p = |n: &str| st.get(n).unwrap();
    let mut expect = vec![Vec::new(); 4];
    expect[3] = naive_linear(raw[3].data(), 1, p("pixel_encoder.proj3.w"), p("pixel_encoder.proj3.b"));
    for i in (0..3).rev() {
        let (h, w) = sizes[i];
        let (hc, wc) = sizes[i + 1];
        let mut up = vec![0.0; h * w * d];
        for r in 0..h {
            for c in 0..w {
                let src = (r * hc / h) * wc + c * wc / w;
                up[(r * w + c) * d..(r * w + c + 1) * d].copy_from_slice(&expect[i + 1][src * d..(src + 1) * d]);
            }
        }
        let lat = naive_linear(&up, h * w, p(&format!("pixel_encoder.lat{i}.w")), p(&format!("pixel_encoder.lat{i}.b")));
        let proj =
            naive_linear(raw[i].data(), h * w, p(&format!("pixel_encoder.proj{i}.w")), p(&format!("pixel_encoder.proj{i}.b")));
        expect[i] = proj.iter().zip(&lat).map(|(a, b)| a + b).collect();
    }
    for i in 0..4 {
        assert!(max_diff(&values(&f.g, fm[i]), &naive_ln(&expect[i], d)) < 1e-12, "level {i}");
    }
}

#[test]
fn text_encoder_is_deterministic_positional_and_closed() {
    let cfg = ModelConfig::desk();
    let st = ModelState::init(&cfg, 2).unwrap();
    let run = |tokens: &[u32]| {
        let mut f = Forward::new(&st, &[], false);
        let (ft, keep) = f.encode_text(tokens).unwrap();
        assert_eq!(f.g.shape(ft), &[20, 64]);
        (values(&f.g, ft), keep)
    };
    let (a, keep) = run(&[4, 9, 17]);
    assert_eq!(keep.iter().filter(|&&k| k).count(), 3);
    assert_eq!(a, run(&[4, 9, 17]).0);
    assert_ne!(a, run(&[9, 4, 17]).0);
    let mut f = Forward::new(&st, &[], false);
    assert!(f.encode_text(&[4, cfg.vocab_size as u32]).is_err());
    assert!(f.encode_text(&[]).is_err());
}

#[test]
fn padding_embedding_never_reaches_the_output() {
    let cfg = ModelConfig::tiny();
    let mut st = ModelState::init(&cfg, 4).unwrap();
    let img = image(8, 9);
    let tokens = [5u32, 6, 7];
    let input = ModelInput { target: &img, text: Some(&tokens), visual: None };
    let before = Forward::predict(&st, &input).unwrap();
    let d = cfg.d_model;
    let t = st.get_mut("text_encoder.token_embed").unwrap();
    t.data_mut()[..d].iter_mut().for_each(|v| *v += 3.0);
    assert_eq!(before, Forward::predict(&st, &input).unwrap());
}

#[test]
fn pem_with_zero_conv_is_identity_and_counts_tokens() {
    let cfg = ModelConfig::desk();
    let mut st = ModelState::init(&cfg, 6).unwrap();
    let sizes = level_sizes(64);
    let img = image(64, 2);
    let fused = |st: &ModelState, prompt: &BinaryMask| {
        let mut f = Forward::new(st, &[], false);
        let fv = f.encode_image(&img).unwrap();
        let fm = f.pixel_encode(&fv, &sizes).unwrap();
        let flat: Vec<f64> = fm.iter().flat_map(|&v| values(&f.g, v)).collect();
        let fr = f.pem_fuse(&fm, &sizes, prompt).unwrap();
        assert_eq!(f.g.shape(fr), &[256 + 64 + 16 + 4, 64]);
        (values(&f.g, fr), flat)
    };
    let (out, flat) = fused(&st, &square(64));
    assert_ne!(out, flat);

    // random kernels, zero bias, empty prompt
    for i in 0..4 {
        set(&mut st, &format!("prompt_encoder.pem{i}.b"), |_| 0.0);
    }
    let (out, flat) = fused(&st, &BinaryMask::empty(64, 64));
    assert_eq!(out, flat);

    for i in 0..4 {
        set(&mut st, &format!("prompt_encoder.pem{i}.w"), |_| 0.0);
    }
    let (out, flat) = fused(&st, &square(64));
    assert_eq!(out, flat);

    let mut f = Forward::new(&st, &[], false);
    let fv = f.encode_image(&img).unwrap();
    let fm = f.pixel_encode(&fv, &sizes).unwrap();
    assert!(matches!(f.pem_fuse(&fm, &sizes, &square(32)), Err(ModelError::Input(_))));
}

fn deform_setup(seed: u64) -> (ModelConfig, ModelState, [(usize, usize); 4], Tensor, Tensor) {
    let cfg = ModelConfig { d_model: 16, ..ModelConfig::tiny() };
    let st = ModelState::init(&cfg, seed).unwrap();
    let sizes = [(4, 5), (3, 3), (2, 2), (1, 2)];
    let tokens: usize = sizes.iter().map(|(h, w)| h * w).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value = random(&[tokens, cfg.d_model], &mut rng);
    let refs = Tensor::from_fn(&[6, 2], |_| rng.gen_range(0.05..0.95));
    (cfg, st, sizes, value, refs)
}

#[test]
fn deformable_attention_degenerate_case_averages_reference_samples() {
    let (cfg, mut st, sizes, value, refs) = deform_setup(7);
    let d = cfg.d_model;
    let prefix = "prompt_encoder.layer0.deform";
    set(&mut st, &format!("{prefix}.offsets.b"), |_| 0.0);
    let levels = levels_from_sizes(&sizes);
    let mut f = Forward::new(&st, &[], false);
    let q = f.g.constant(Tensor::from_fn(&[6, d], |i| (i as f64 * 0.37).sin()));
    let r = f.g.constant(refs.clone());
    let v = f.g.constant(value.clone());
    let out = f.deformable_cross_attention(prefix, q, r, v, &levels).unwrap();

    let p = |n: &str| st.get(&format!("{prefix}.{n}")).unwrap();
    let projected = naive_linear(value.data(), value.shape()[0], p("value.w"), p("value.b"));
    let mut mean = vec![0.0; 6 * d];
    for lv in &levels {
        let map = Tensor::from_fn(&[d, lv.h, lv.w], |i| projected[(lv.start + i % (lv.h * lv.w)) * d + i / (lv.h * lv.w)]);
        let s = tensorkit::bilinear_sample(&map, &refs).unwrap();
        for (m, x) in mean.iter_mut().zip(s.data()) {
            *m += x / levels.len() as f64;
        }
    }
    let expect = naive_linear(&mean, 6, p("out.w"), p("out.b"));
    assert!(max_diff(&values(&f.g, out), &expect) < 1e-12);
}

#[test]
fn deformable_attention_on_constant_values_ignores_offsets() {
    let (cfg, mut st, sizes, _, refs) = deform_setup(8);
    let d = cfg.d_model;
    let prefix = "prompt_encoder.layer1.deform";
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for n in ["offsets.w", "offsets.b", "weights.w", "weights.b"] {
        let vals: Vec<f64> = (0..st.get(&format!("{prefix}.{n}")).unwrap().numel()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        set(&mut st, &format!("{prefix}.{n}"), |i| vals[i]);
    }
    let levels = levels_from_sizes(&sizes);
    let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tokens = levels.last().map(|l| l.start + l.h * l.w).unwrap();
    let mut f = Forward::new(&st, &[], false);
    let q = f.g.constant(random(&[6, d], &mut rng));
    let r = f.g.constant(refs);
    let v = f.g.constant(Tensor::from_fn(&[tokens, d], |i| row[i % d]));
    let out = f.deformable_cross_attention(prefix, q, r, v, &levels).unwrap();
    let p = |n: &str| st.get(&format!("{prefix}.{n}")).unwrap();
    let projected = naive_linear(&row, 1, p("value.w"), p("value.b"));
    let expect = naive_linear(&projected, 1, p("out.w"), p("out.b"));
    for q in values(&f.g, out).chunks(d) {
        assert!(max_diff(q, &expect) < 1e-12);
    }
}

#[test]
fn layer_counts_and_output_multiplicity() {
    let cfg = ModelConfig::tiny();
    let st = ModelState::init(&cfg, 1).unwrap();
    let (t, r, p) = (image(8, 1), image(8, 2), square(8));
    let tokens = [3u32, 8];
    let cases = [
        (Some(&tokens[..]), false, 0, 9, vec![Source::Text]),
        (None, true, 3, 9, vec![Source::Visual]),
        (Some(&tokens[..]), true, 3, 18, vec![Source::Text, Source::Visual]),
    ];
    for (text, vis, gen, dec, sources) in cases {
        let visual = vis.then_some(VisualInput { reference: &r, prompt: &p });
        let input = ModelInput { target: &t, text, visual };
        let mut f = Forward::new(&st, &[], false);
        let out = f.run(&input).unwrap();
        assert_eq!((out.trace.generator_layers, out.trace.decoder_blocks), (gen, dec));
        assert_eq!(out.sources.iter().map(|s| s.source).collect::<Vec<_>>(), sources);
        for s in &out.sources {
            assert_eq!(f.g.shape(s.mask_logits), &[8, 8]);
            assert_eq!(f.g.shape(s.region_logits), &[16, 1]);
            assert_eq!(f.g.shape(s.f_reg), &[16, 16]);
        }
        let pred = Forward::predict(&st, &input).unwrap();
        assert_eq!(pred.masks.len(), sources.len());
    }
    let input = ModelInput { target: &t, text: None, visual: None };
    let err = Forward::predict(&st, &input).unwrap_err();
    assert!(err.to_string().contains("at least one prompt required"));
}

#[test]
fn prompt_generator_output_has_query_length() {
    let cfg = ModelConfig::tiny();
    let st = ModelState::init(&cfg, 1).unwrap();
    let sizes = level_sizes(8);
    let mut f = Forward::new(&st, &[], false);
    let fv = f.encode_image(&image(8, 4)).unwrap();
    let fm = f.pixel_encode(&fv, &sizes).unwrap();
    let fr = f.pem_fuse(&fm, &sizes, &square(8)).unwrap();
    let fp = f.prompt_generate(fr, &levels_from_sizes(&sizes)).unwrap();
    assert_eq!(f.g.shape(fp), &[20, 16]);
    assert_eq!(f.trace.generator_layers, 3);
}

#[test]
fn decoder_is_permutation_equivariant_in_queries() {
    let cfg = ModelConfig::tiny();
    let st = ModelState::init(&cfg, 12).unwrap();
    let d = cfg.d_model;
    let sizes = level_sizes(8);
    let seg = st.get("mask_decoder.seg_queries").unwrap().clone();
    let perm: Vec<usize> = vec![3, 0, 15, 7, 1, 2, 4, 5, 6, 8, 9, 10, 11, 12, 14, 13];
    let permuted = Tensor::from_fn(&[16, d], |i| seg.data()[perm[i / d] * d + i % d]);
    let run = |q: &Tensor| {
        let mut f = Forward::new(&st, &[], false);
        let fv = f.encode_image(&image(8, 5)).unwrap();
        let fm = f.pixel_encode(&fv, &sizes).unwrap();
        let (ft, keep) = f.encode_text(&[6, 7, 8, 9]).unwrap();
        let q = f.g.constant(q.clone());
        let out = f.mask_decode(Some(q), ft, Some(&keep), &fm, &sizes).unwrap();
        assert_eq!(f.trace.decoder_blocks, 9);
        values(&f.g, out)
    };
    let base = run(&seg);
    let moved = run(&permuted);
    for (i, &p) in perm.iter().enumerate() {
        assert!(max_diff(&moved[i * d..(i + 1) * d], &base[p * d..(p + 1) * d]) < 1e-12);
    }
}

#[test]
fn mask_head_with_zero_query_projection_is_the_bias() {
    let cfg = ModelConfig::tiny();
    let mut st = ModelState::init(&cfg, 2).unwrap();
    zero_prefix(&mut st, "mask_head.query_proj");
    set(&mut st, "mask_head.bias", |_| 0.7);
    let (t, tokens) = (image(8, 3), [5u32]);
    let mut f = Forward::new(&st, &[], false);
    let out = f.run(&ModelInput { target: &t, text: Some(&tokens), visual: None }).unwrap();
    let logits = values(&f.g, out.sources[0].mask_logits);
    assert_eq!(logits.len(), 64);
    assert!(logits.iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn existence_head_zero_init_and_bias_monotonicity() {
    let cfg = ModelConfig::tiny();
    let mut st = ModelState::init(&cfg, 2).unwrap();
    zero_prefix(&mut st, "existence_head.");
    let (t, tokens) = (image(8, 3), [5u32, 6]);
    let input = ModelInput { target: &t, text: Some(&tokens), visual: None };
    let p0 = Forward::predict(&st, &input).unwrap();
    assert_eq!(p0.exists_prob, 0.5);
    assert!(!p0.predicted_no_target);
    set(&mut st, "existence_head.fc2.b", |_| -0.01);
    let p1 = Forward::predict(&st, &input).unwrap();
    assert!(p1.exists_prob < 0.5 && p1.predicted_no_target);
    set(&mut st, "existence_head.fc2.b", |_| 0.4);
    let p2 = Forward::predict(&st, &input).unwrap();
    assert!(p2.exists_prob > 0.5 && !p2.predicted_no_target);
}

#[test]
fn omni_existence_is_the_maximum_over_sources() {
    let cfg = ModelConfig::tiny();
    let st = ModelState::init(&cfg, 21).unwrap();
    let (t, r, p) = (image(8, 1), image(8, 2), square(8));
    let tokens = [3u32, 8];
    let input = ModelInput { target: &t, text: Some(&tokens), visual: Some(VisualInput { reference: &r, prompt: &p }) };
    let pred = Forward::predict(&st, &input).unwrap();
    assert_eq!(pred.exist_probs.len(), 2);
    assert_eq!(pred.exists_prob, pred.exist_probs[0].max(pred.exist_probs[1]));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig::tiny();
    let st = ModelState::init(&cfg, 31).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&st, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, st);
    assert_eq!(back.hash(""), st.hash(""));
    let (t, r, p) = (image(8, 1), image(8, 2), square(8));
    let tokens = [3u32, 8];
    let input = ModelInput { target: &t, text: Some(&tokens), visual: Some(VisualInput { reference: &r, prompt: &p }) };
    let a = Forward::predict(&st, &input).unwrap();
    assert_eq!(a, Forward::predict(&back, &input).unwrap());
    assert_eq!(a, Forward::predict(&st, &input).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
    let mut long = bytes;
    long.push(0);
    std::fs::write(&path, &long).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
}

#[test]
fn config_invariants() {
    assert!(ModelConfig::desk().validate().is_ok());
    assert!(ModelConfig::paper_faithful().validate().is_ok());
    assert!(ModelConfig { heads: 7, ..ModelConfig::desk() }.validate().is_err());
    assert!(ModelConfig { decoder_blocks: 8, ..ModelConfig::desk() }.validate().is_err());
    assert!(ModelConfig { prompt_query_len: 16, ..ModelConfig::desk() }.validate().is_err());
}

#[test]
fn whole_network_passes_finite_differences() {
    let opts = GradCheckOptions { max_entries: Some(2), ..Default::default() };
    let report = model_gradcheck(&ModelConfig::tiny(), 0, &opts).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.checked > 300);
}

#[test]
fn bilinear_rows_sum_to_one_and_positions_are_bounded() {
    for (o, i) in [(64, 16), (8, 2), (5, 5), (3, 7)] {
        let m = bilinear_matrix(o, i);
        for row in m.chunks(i) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let p = sinusoidal_positions(4, 4, 16);
    assert!(p.data().iter().all(|v| v.abs() <= 1.0));
    assert_ne!(p.data()[..16], p.data()[16..32]);
}
