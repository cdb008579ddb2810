use tensorkit::{levels_from_sizes, Graph, Level, Tensor, Var};

use super::params::{ModelState, ParamBinder};
use super::{ModelError, Result};
use crate::maskgeo::{resize_any, BinaryMask};
use crate::synthref::build::{LoadedSample, RgbImage};
use crate::synthref::text::PAD;
use crate::synthref::Source;

const LN_EPS: f64 = 1e-5;

/// Spatial sizes of the four pyramid levels (strides 4, 8, 16, 32) for a
/// square input; every stride-2 stage maps `n` to `ceil(n/2)`.
pub fn level_sizes(input: usize) -> [(usize, usize); 4] {
    let half = |n: usize| n.div_ceil(2);
    let s4 = half(half(input));
    let s8 = half(s4);
    let s16 = half(s8);
    let s32 = half(s16);
    [(s4, s4), (s8, s8), (s16, s16), (s32, s32)]
}

/// RGB bytes as a `[1,3,H,W]` tensor scaled to `[-0.5, 0.5]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (h, w) = (img.height, img.width);
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img.pixels[p * 3 + c] as f64 / 255.0 - 0.5
    })
}

/// `[out, in]` matrix of 1-D bilinear interpolation weights (pixel-centre
/// alignment, border clamped); rows sum to one.
pub fn bilinear_matrix(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    for i in 0..out {
        let src = ((i as f64 + 0.5) * input as f64 / out as f64 - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let f = src - i0 as f64;
        m[i * input + i0] += 1.0 - f;
        m[i * input + i1] += f;
    }
    m
}

/// Fixed 2-D sine/cosine positions for an `h×w` grid, `[h·w, d]`. The first
/// half of the channels encodes the row, the second half the column.
pub fn sinusoidal_positions(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let freqs = half / 2;
    Tensor::from_fn(&[h * w, d], |i| {
        let (tok, ch) = (i / d, i % d);
        let (coord, ch) = if ch < half { ((tok / w) as f64, ch) } else { ((tok % w) as f64, ch - half) };
        if freqs == 0 || ch >= 2 * freqs {
            return 0.0;
        }
        let k = (ch / 2) as f64;
        let a = coord / 10000f64.powf(k / freqs as f64);
        if ch % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

pub struct VisualInput<'a> {
    pub reference: &'a RgbImage,
    pub prompt: &'a BinaryMask,
}

/// One forward request: a target image plus at least one prompt.
pub struct ModelInput<'a> {
    pub target: &'a RgbImage,
    pub text: Option<&'a [u32]>,
    pub visual: Option<VisualInput<'a>>,
}

impl<'a> ModelInput<'a> {
    /// Every prompt the sample carries.
    pub fn from_sample(s: &'a LoadedSample) -> Self {
        Self {
            target: &s.target,
            text: s.text_tokens.as_deref(),
            visual: s.visual.as_ref().map(|v| VisualInput { reference: &v.reference, prompt: &v.prompt }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SourceOutput {
    pub source: Source,
    /// `[H, W]` mask logits at input resolution.
    pub mask_logits: Var,
    /// `[Q, 1]` per-query region scores (logits) on the query grid.
    pub region_logits: Var,
    /// `[1, 1]` existence logit.
    pub exist_logit: Var,
    pub f_reg: Var,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub generator_layers: usize,
    pub decoder_blocks: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Ordered text first, then visual.
    pub sources: Vec<SourceOutput>,
    pub trace: Trace,
}

/// Thresholded network output for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Raw masks (logit > 0) per source, text first.
    pub masks: Vec<(Source, BinaryMask)>,
    pub exist_probs: Vec<f64>,
    /// Existence over all sources (their maximum).
    pub exists_prob: f64,
    pub predicted_no_target: bool,
    /// Mean and extreme mask logits per source.
    pub logit_stats: Vec<(f64, f64, f64)>,
}

/// A forward pass under construction: the graph plus the parameters bound
/// into it so far.
pub struct Forward<'a> {
    pub g: Graph,
    pub state: &'a ModelState,
    pub binder: ParamBinder,
    pub trace: Trace,
}

impl<'a> Forward<'a> {
    pub fn new(state: &'a ModelState, frozen: &[String], grads: bool) -> Self {
        Self { g: Graph::new(), state, binder: ParamBinder::new(state, frozen, grads), trace: Trace::default() }
    }

    pub fn with_binder(g: Graph, state: &'a ModelState, binder: ParamBinder) -> Self {
        Self { g, state, binder, trace: Trace::default() }
    }

    pub fn p(&mut self, name: &str) -> Var {
        self.binder.bind(&mut self.g, self.state, name)
    }

    fn d(&self) -> usize {
        self.state.config.d_model
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_row(y, b)?)
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.g"));
        let beta = self.p(&format!("{prefix}.b"));
        Ok(self.g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    pub fn mha(&mut self, prefix: &str, q: Var, k: Var, v: Var, keep: Option<&[bool]>) -> Result<Var> {
        let q = self.linear(q, &format!("{prefix}.q"))?;
        let k = self.linear(k, &format!("{prefix}.k"))?;
        let v = self.linear(v, &format!("{prefix}.v"))?;
        let a = self.g.attention(q, k, v, self.state.config.heads, keep)?;
        self.linear(a, &format!("{prefix}.o"))
    }

    pub fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.g.gelu(h)?;
        self.linear(h, &format!("{prefix}.fc2"))
    }

    fn residual(&mut self, x: Var, delta: Var) -> Result<Var> {
        Ok(self.g.add(x, delta)?)
    }

    /// `[1,C,h,w]` feature map to `[h·w, C]` tokens.
    fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let flat = self.g.reshape(x, &[s[1], s[2] * s[3]])?;
        Ok(self.g.transpose(flat)?)
    }

    /// Four stages (a stride-2 GELU conv plus a residual stride-1 one) after a
    /// stride-2 stem. Returns `F_v` as token
    /// matrices at strides 4, 8, 16, 32.
    pub fn encode_image(&mut self, img: &RgbImage) -> Result<Vec<Var>> {
        let n = self.state.config.input_size;
        if img.height != n || img.width != n {
            return Err(ModelError::Input(format!("image is {}x{}, model expects {n}x{n}", img.height, img.width)));
        }
        let x = self.g.constant(image_tensor(img));
        let conv = |f: &mut Self, x: Var, name: &str, stride: usize| -> Result<Var> {
            let w = f.p(&format!("image_encoder.{name}.w"));
            let b = f.p(&format!("image_encoder.{name}.b"));
            let y = f.g.conv2d(x, w, Some(b), stride, 1)?;
            Ok(f.g.gelu(y)?)
        };
        let mut x = conv(self, x, "stem", 2)?;
        let mut out = Vec::with_capacity(4);
        for i in 1..=4 {
            x = conv(self, x, &format!("stage{i}"), 2)?;
            let r = conv(self, x, &format!("refine{i}"), 1)?;
            x = self.g.add(x, r)?;
            out.push(self.to_tokens(x)?);
        }
        Ok(out)
    }

    /// Projects each level to `d` and adds a projected nearest upsampling of
    /// the next coarser fused level. Returns `F_m0..F_m3`.
    pub fn pixel_encode(&mut self, fv: &[Var], sizes: &[(usize, usize); 4]) -> Result<Vec<Var>> {
        let mut fm = vec![None; 4];
        fm[3] = Some(self.linear(fv[3], "pixel_encoder.proj3")?);
        for i in (0..3).rev() {
            let (h, w) = sizes[i];
            let (hc, wc) = sizes[i + 1];
            let ids: Vec<usize> = (0..h * w).map(|t| (t / w) * hc / h * wc + (t % w) * wc / w).collect();
            let up = self.g.gather(fm[i + 1].expect("coarser level"), &ids)?;
            let lat = self.linear(up, &format!("pixel_encoder.lat{i}"))?;
            let proj = self.linear(fv[i], &format!("pixel_encoder.proj{i}"))?;
            fm[i] = Some(self.g.add(proj, lat)?);
        }
        fm.into_iter().enumerate().map(|(i, v)| self.norm(v.expect("every level"), &format!("pixel_encoder.norm{i}"))).collect()
    }

    /// Token ids (padded or truncated to the maximum length) to `F_t` plus the
    /// key mask of non-padding positions.
    pub fn encode_text(&mut self, tokens: &[u32]) -> Result<(Var, Vec<bool>)> {
        let cfg = &self.state.config;
        let (len, vocab) = (cfg.max_text_len, cfg.vocab_size);
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(ModelError::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut ids: Vec<usize> = tokens.iter().take(len).map(|&t| t as usize).collect();
        ids.resize(len, PAD as usize);
        let keep: Vec<bool> = ids.iter().map(|&t| t != PAD as usize).collect();
        if !keep.iter().any(|&k| k) {
            return Err(ModelError::Input("text prompt has no tokens".into()));
        }
        let table = self.p("text_encoder.token_embed");
        let pos = self.p("text_encoder.pos_embed");
        let emb = self.g.gather(table, &ids)?;
        let mut x = self.g.add(emb, pos)?;
        for l in 0..cfg.text_layers {
            let p = format!("text_encoder.layer{l}");
            let h = self.norm(x, &format!("{p}.ln1"))?;
            let a = self.mha(&format!("{p}.attn"), h, h, h, Some(&keep))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("{p}.ln2"))?;
            let f = self.ffn(h, &format!("{p}.ffn"))?;
            x = self.residual(x, f)?;
        }
        Ok((self.norm(x, "text_encoder.ln")?, keep))
    }

    /// Adds a per-level convolution of the (max-pooled) prompt to the
    /// reference features and concatenates all levels along the token axis.
    pub fn pem_fuse(&mut self, fr: &[Var], sizes: &[(usize, usize); 4], prompt: &BinaryMask) -> Result<Var> {
        let n = self.state.config.input_size;
        if prompt.height() != n || prompt.width() != n {
            return Err(ModelError::Input(format!(
                "prompt is {}x{}, reference is {n}x{n}",
                prompt.height(),
                prompt.width()
            )));
        }
        let level_embed = self.p("prompt_encoder.level_embed");
        let mut parts = Vec::with_capacity(4);
        for (i, &(h, w)) in sizes.iter().enumerate() {
            let pm = resize_any(prompt, h, w);
            let pt = self.g.constant(Tensor::new(&[1, 1, h, w], pm.to_f64())?);
            let k = self.p(&format!("prompt_encoder.pem{i}.w"));
            let b = self.p(&format!("prompt_encoder.pem{i}.b"));
            let c = self.g.conv2d(pt, k, Some(b), 1, 1)?;
            let c = self.to_tokens(c)?;
            let fused = self.g.add(fr[i], c)?;
            let row = self.g.gather(level_embed, &[i])?;
            parts.push(self.g.add_row(fused, row)?);
        }
        Ok(self.g.concat_rows(&parts)?)
    }

    /// Multi-scale deformable cross-attention from `queries` (already
    /// normalized) to the token sequence `value_tokens` laid out as `levels`.
    pub fn deformable_cross_attention(
        &mut self,
        prefix: &str,
        queries: Var,
        ref_points: Var,
        value_tokens: Var,
        levels: &[Level],
    ) -> Result<Var> {
        let cfg = &self.state.config;
        let (heads, points) = (cfg.heads, cfg.deformable_points);
        let nl = levels.len();
        let slots = heads * nl * points;
        let n = self.g.shape(queries)[0];
        let off = self.linear(queries, &format!("{prefix}.offsets"))?;
        let scale = Tensor::from_fn(&[n, 2 * slots], |i| {
            let c = i % (2 * slots);
            let l = (c / 2 / points) % nl;
            if c % 2 == 0 {
                1.0 / levels[l].w as f64
            } else {
                1.0 / levels[l].h as f64
            }
        });
        let scale = self.g.constant(scale);
        let off = self.g.mul(off, scale)?;
        let spread = self.g.constant(Tensor::from_fn(&[2, 2 * slots], |i| if (i / (2 * slots)) == (i % 2) { 1.0 } else { 0.0 }));
        let base = self.g.matmul(ref_points, spread)?;
        let locs = self.g.add(base, off)?;
        let logits = self.linear(queries, &format!("{prefix}.weights"))?;
        let grouped = self.g.reshape(logits, &[n * heads, nl * points])?;
        let probs = self.g.softmax_rows(grouped)?;
        let weights = self.g.reshape(probs, &[n, slots])?;
        let value = self.linear(value_tokens, &format!("{prefix}.value"))?;
        let sampled = self.g.deform_sample(value, levels, heads, points, locs, weights)?;
        self.linear(sampled, &format!("{prefix}.out"))
    }

    /// Learned prompt queries refined by deformable cross-attention into the
    /// prompted reference features, self-attention and an FFN per layer.
    pub fn prompt_generate(&mut self, fr_prime: Var, levels: &[Level]) -> Result<Var> {
        let mut q = self.p("prompt_encoder.queries");
        let raw = self.p("prompt_encoder.ref_points");
        let fr_prime = self.g.gelu(fr_prime)?;
        let refs = self.g.sigmoid(raw)?;
        for l in 0..self.state.config.prompt_generator_layers {
            let p = format!("prompt_encoder.layer{l}");
            let h = self.norm(q, &format!("{p}.ln_cross"))?;
            let a = self.deformable_cross_attention(&format!("{p}.deform"), h, refs, fr_prime, levels)?;
            q = self.residual(q, a)?;
            let h = self.norm(q, &format!("{p}.ln_self"))?;
            let a = self.mha(&format!("{p}.self_attn"), h, h, h, None)?;
            q = self.residual(q, a)?;
            let h = self.norm(q, &format!("{p}.ln_ffn"))?;
            let f = self.ffn(h, &format!("{p}.ffn"))?;
            q = self.residual(q, f)?;
            self.trace.generator_layers += 1;
        }
        self.norm(q, "prompt_encoder.ln")
    }

    /// Decoder blocks over `F_m1..F_m3` (one group per level) and the prompt
    /// features. `seg` overrides the learned segmentation queries.
    pub fn mask_decode(
        &mut self,
        seg: Option<Var>,
        f_pt: Var,
        keep: Option<&[bool]>,
        fm: &[Var],
        sizes: &[(usize, usize); 4],
    ) -> Result<Var> {
        let cfg = &self.state.config;
        let (blocks, d) = (cfg.decoder_blocks, cfg.d_model);
        let per_group = blocks / 3;
        let mut s = match seg {
            Some(s) => s,
            None => self.p("mask_decoder.seg_queries"),
        };
        let mut keys = Vec::with_capacity(3);
        for lvl in 1..=3 {
            let (h, w) = sizes[lvl];
            let pos = self.g.constant(sinusoidal_positions(h, w, d));
            keys.push(self.g.add(fm[lvl], pos)?);
        }
        for b in 0..blocks {
            let group = b / per_group;
            let p = format!("mask_decoder.block{b}");
            let h = self.norm(s, &format!("{p}.ln_image"))?;
            let a = self.mha(&format!("{p}.image_attn"), h, keys[group], fm[group + 1], None)?;
            s = self.residual(s, a)?;
            let h = self.norm(s, &format!("{p}.ln_prompt"))?;
            let a = self.mha(&format!("{p}.prompt_attn"), h, f_pt, f_pt, keep)?;
            s = self.residual(s, a)?;
            let h = self.norm(s, &format!("{p}.ln_self"))?;
            let a = self.mha(&format!("{p}.self_attn"), h, h, h, None)?;
            s = self.residual(s, a)?;
            let h = self.norm(s, &format!("{p}.ln_ffn"))?;
            let f = self.ffn(h, &format!("{p}.ffn"))?;
            s = self.residual(s, f)?;
            self.trace.decoder_blocks += 1;
        }
        self.norm(s, "mask_decoder.ln")
    }

    /// Returns `(mask logits [H,W], region logits [Q,1])`.
    pub fn mask_head(&mut self, f_reg: Var, fm0: Var, size0: (usize, usize)) -> Result<(Var, Var)> {
        let n = self.state.config.input_size;
        let d = self.d();
        let (h0, w0) = size0;
        let region = self.linear(f_reg, "mask_head.region")?;
        let qp = self.linear(f_reg, "mask_head.query_proj")?;
        let pos = self.g.constant(sinusoidal_positions(h0, w0, d));
        let fm0 = self.g.add(fm0, pos)?;
        let pp = self.linear(fm0, "mask_head.pixel_proj")?;
        let per_query = self.g.matmul_t(qp, pp, false, true)?;
        let per_query = self.g.scale(per_query, 1.0 / (d as f64).sqrt())?;
        let gate = self.g.sigmoid(region)?;
        let combined = self.g.matmul_t(gate, per_query, true, false)?;
        let bias = self.p("mask_head.bias");
        let bias = self.g.reshape(bias, &[1, 1])?;
        let ones = self.g.constant(Tensor::full(&[1, h0 * w0], 1.0));
        let bias_row = self.g.matmul(bias, ones)?;
        let combined = self.g.add(combined, bias_row)?;
        let map = self.g.reshape(combined, &[h0, w0])?;
        let a = self.g.constant(Tensor::new(&[n, h0], bilinear_matrix(n, h0))?);
        let b = self.g.constant(Tensor::new(&[n, w0], bilinear_matrix(n, w0))?);
        let rows = self.g.matmul(a, map)?;
        let up = self.g.matmul_t(rows, b, false, true)?;
        Ok((up, region))
    }

    /// Mean-pooled region features through a 2-layer MLP; `[1,1]` logit.
    pub fn existence_head(&mut self, f_reg: Var) -> Result<Var> {
        let pooled = self.g.mean_rows(f_reg)?;
        let h = self.linear(pooled, "existence_head.fc1")?;
        let h = self.g.gelu(h)?;
        self.linear(h, "existence_head.fc2")
    }

    fn decode_source(&mut self, source: Source, f_pt: Var, keep: Option<&[bool]>, fm: &[Var], sizes: &[(usize, usize); 4]) -> Result<SourceOutput> {
        let f_reg = self.mask_decode(None, f_pt, keep, fm, sizes)?;
        let (mask_logits, region_logits) = self.mask_head(f_reg, fm[0], sizes[0])?;
        let exist_logit = self.existence_head(f_reg)?;
        Ok(SourceOutput { source, mask_logits, region_logits, exist_logit, f_reg })
    }

    /// Encodes the target once and decodes once per prompt source.
    pub fn run(&mut self, input: &ModelInput) -> Result<ForwardOutput> {
        if input.text.is_none() && input.visual.is_none() {
            return Err(ModelError::Input("at least one prompt required".into()));
        }
        let sizes = level_sizes(self.state.config.input_size);
        let fv = self.encode_image(input.target)?;
        let fm = self.pixel_encode(&fv, &sizes)?;
        let mut sources = Vec::with_capacity(2);
        if let Some(tokens) = input.text {
            let (f_t, keep) = self.encode_text(tokens)?;
            sources.push(self.decode_source(Source::Text, f_t, Some(&keep), &fm, &sizes)?);
        }
        if let Some(v) = &input.visual {
            let fv_r = self.encode_image(v.reference)?;
            let fm_r = self.pixel_encode(&fv_r, &sizes)?;
            let fr_prime = self.pem_fuse(&fm_r, &sizes, v.prompt)?;
            let levels = levels_from_sizes(&sizes);
            let f_p = self.prompt_generate(fr_prime, &levels)?;
            sources.push(self.decode_source(Source::Visual, f_p, None, &fm, &sizes)?);
        }
        Ok(ForwardOutput { sources, trace: std::mem::take(&mut self.trace) })
    }

    /// Inference without gradients, thresholded.
    pub fn predict(state: &ModelState, input: &ModelInput) -> Result<Prediction> {
        let mut f = Forward::new(state, &[], false);
        let out = f.run(input)?;
        let n = state.config.input_size;
        let mut masks = Vec::new();
        let mut exist_probs = Vec::new();
        let mut logit_stats = Vec::new();
        for s in &out.sources {
            let logits = f.g.value(s.mask_logits).data();
            let bits = logits.iter().map(|&v| v > 0.0).collect();
            masks.push((s.source, BinaryMask::from_bits(n, n, bits).expect("mask dims")));
            let mean = logits.iter().sum::<f64>() / logits.len() as f64;
            let lo = logits.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logit_stats.push((mean, lo, hi));
            exist_probs.push(1.0 / (1.0 + (-f.g.value(s.exist_logit).item()).exp()));
        }
        let exists_prob = exist_probs.iter().copied().fold(0.0, f64::max);
        Ok(Prediction { masks, exist_probs, exists_prob, predicted_no_target: exists_prob < 0.5, logit_stats })
    }
}
