use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tensorkit::{Graph, Tensor, Var};

use super::{ModelConfig, ModelError, Result};

#[derive(Clone, Debug)]
enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    Values(Vec<f64>),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Specs(Vec<Spec>);

impl Specs {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(Spec { name, shape: shape.to_vec(), init });
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        let a = (6.0 / (din + dout) as f64).sqrt();
        self.push(format!("{prefix}.w"), &[din, dout], Init::Uniform(a));
        self.push(format!("{prefix}.b"), &[dout], Init::Zeros);
    }

    fn zero_linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.push(format!("{prefix}.w"), &[din, dout], Init::Zeros);
        self.push(format!("{prefix}.b"), &[dout], Init::Zeros);
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        let a = (6.0 / (cin * k * k) as f64).sqrt();
        self.push(format!("{prefix}.w"), &[cout, cin, k, k], Init::Uniform(a));
        self.push(format!("{prefix}.b"), &[cout], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), &[d], Init::Ones);
        self.push(format!("{prefix}.b"), &[d], Init::Zeros);
    }

    fn attn(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{p}"), d, d);
        }
        self.linear(&format!("{prefix}.o"), d, d);
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.linear(&format!("{prefix}.fc1"), d, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, d);
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Initial sampling offsets: head `h` points along angle `2πh/H`, point `p`
/// at distance `p+1` level pixels, identical across levels.
fn offset_bias(cfg: &ModelConfig) -> Vec<f64> {
    let (heads, levels, points) = (cfg.heads, cfg.n_scales, cfg.deformable_points);
    let mut out = Vec::with_capacity(heads * levels * points * 2);
    for h in 0..heads {
        let a = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
        let (c, s) = (a.cos(), a.sin());
        let m = c.abs().max(s.abs());
        for _ in 0..levels {
            for p in 0..points {
                out.push(c / m * (p + 1) as f64);
                out.push(s / m * (p + 1) as f64);
            }
        }
    }
    out
}

fn specs(cfg: &ModelConfig) -> Specs {
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    let mut s = Specs(Vec::new());

    s.conv("image_encoder.stem", 3, cfg.stem_channels, 3);
    s.conv("image_encoder.stage1", cfg.stem_channels, d, 3);
    for i in 2..=4 {
        s.conv(&format!("image_encoder.stage{i}"), d, d, 3);
    }
    for i in 1..=4 {
        s.conv(&format!("image_encoder.refine{i}"), d, d, 3);
    }

    for i in 0..cfg.n_scales {
        s.linear(&format!("pixel_encoder.proj{i}"), d, d);
    }
    for i in 0..cfg.n_scales - 1 {
        s.linear(&format!("pixel_encoder.lat{i}"), d, d);
    }
    for i in 0..cfg.n_scales {
        s.norm(&format!("pixel_encoder.norm{i}"), d);
    }

    s.push("text_encoder.token_embed".into(), &[cfg.vocab_size, d], Init::Uniform(0.5));
    s.push("text_encoder.pos_embed".into(), &[cfg.max_text_len, d], Init::Uniform(0.5));
    for l in 0..cfg.text_layers {
        let p = format!("text_encoder.layer{l}");
        s.norm(&format!("{p}.ln1"), d);
        s.attn(&format!("{p}.attn"), d);
        s.norm(&format!("{p}.ln2"), d);
        s.ffn(&format!("{p}.ffn"), d, f);
    }
    s.norm("text_encoder.ln", d);

    for i in 0..cfg.n_scales {
        s.conv(&format!("prompt_encoder.pem{i}"), 1, d, 3);
    }
    s.push("prompt_encoder.level_embed".into(), &[cfg.n_scales, d], Init::Zeros);
    s.push("prompt_encoder.queries".into(), &[cfg.prompt_query_len, d], Init::Uniform(0.5));
    let cols = (cfg.prompt_query_len as f64).sqrt().ceil() as usize;
    let rows = cfg.prompt_query_len.div_ceil(cols);
    let refs = (0..cfg.prompt_query_len)
        .flat_map(|i| [logit(((i % cols) as f64 + 0.5) / cols as f64), logit(((i / cols) as f64 + 0.5) / rows as f64)])
        .collect();
    s.push("prompt_encoder.ref_points".into(), &[cfg.prompt_query_len, 2], Init::Values(refs));
    let slots = cfg.heads * cfg.n_scales * cfg.deformable_points;
    for l in 0..cfg.prompt_generator_layers {
        let p = format!("prompt_encoder.layer{l}");
        s.norm(&format!("{p}.ln_cross"), d);
        s.push(format!("{p}.deform.offsets.w"), &[d, 2 * slots], Init::Zeros);
        s.push(format!("{p}.deform.offsets.b"), &[2 * slots], Init::Values(offset_bias(cfg)));
        s.zero_linear(&format!("{p}.deform.weights"), d, slots);
        s.linear(&format!("{p}.deform.value"), d, d);
        s.linear(&format!("{p}.deform.out"), d, d);
        s.norm(&format!("{p}.ln_self"), d);
        s.attn(&format!("{p}.self_attn"), d);
        s.norm(&format!("{p}.ln_ffn"), d);
        s.ffn(&format!("{p}.ffn"), d, f);
    }
    s.norm("prompt_encoder.ln", d);

    s.push("mask_decoder.seg_queries".into(), &[cfg.seg_queries(), d], Init::Uniform(0.5));
    for b in 0..cfg.decoder_blocks {
        let p = format!("mask_decoder.block{b}");
        s.norm(&format!("{p}.ln_image"), d);
        s.attn(&format!("{p}.image_attn"), d);
        s.norm(&format!("{p}.ln_prompt"), d);
        s.attn(&format!("{p}.prompt_attn"), d);
        s.norm(&format!("{p}.ln_self"), d);
        s.attn(&format!("{p}.self_attn"), d);
        s.norm(&format!("{p}.ln_ffn"), d);
        s.ffn(&format!("{p}.ffn"), d, f);
    }
    s.norm("mask_decoder.ln", d);

    s.linear("mask_head.region", d, 1);
    s.linear("mask_head.query_proj", d, d);
    s.linear("mask_head.pixel_proj", d, d);
    s.push("mask_head.bias".into(), &[1], Init::Zeros);

    s.linear("existence_head.fc1", d, d);
    s.linear("existence_head.fc2", d, 1);
    s
}

/// All learnable parameters, addressed by dotted path.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelState {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for spec in specs(config).0 {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
                Init::Values(v) => v,
            };
            names.push(spec.name);
            tensors.push(Tensor::new(&spec.shape, data)?);
        }
        Self::from_parts(config.clone(), names, tensors)
    }

    /// Assembles a state from named tensors, checking them against the
    /// layout `config` implies.
    pub fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = specs(&config).0;
        if expected.len() != names.len() {
            return Err(ModelError::Checkpoint(format!("{} parameters, config implies {}", names.len(), expected.len())));
        }
        for ((spec, name), t) in expected.iter().zip(&names).zip(&tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Checkpoint(format!("parameter {name} has non-finite values")));
            }
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and raw bytes of every parameter whose path
    /// starts with `prefix` (all parameters for an empty prefix).
    pub fn hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if n.starts_with(prefix) {
                h.update(n.as_bytes());
                for &s in t.shape() {
                    h.update((s as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Lazily inserts parameters into a graph the first time a forward pass
/// asks for them.
pub struct ParamBinder {
    vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl ParamBinder {
    /// `frozen` lists path prefixes that never receive gradients; with
    /// `grads == false` no parameter does.
    pub fn new(state: &ModelState, frozen: &[String], grads: bool) -> Self {
        let trainable = state.names.iter().map(|n| grads && !frozen.iter().any(|f| n.starts_with(f.as_str()))).collect();
        Self { vars: vec![None; state.len()], trainable }
    }

    /// A binder whose parameters are already graph leaves, one per state
    /// entry in order (used for finite-difference checks of the network).
    pub fn preset(vars: Vec<Var>) -> Self {
        let trainable = vec![true; vars.len()];
        Self { vars: vars.into_iter().map(Some).collect(), trainable }
    }

    pub fn bind(&mut self, g: &mut Graph, state: &ModelState, name: &str) -> Var {
        let i = state.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let mut t = state.tensors[i].clone();
        t.set_requires_grad(self.trainable[i]);
        let v = g.leaf(t);
        self.vars[i] = Some(v);
        v
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    /// Gradient per parameter after `g.backward`; parameters that were not
    /// used or are frozen get `None`.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| match (v, t) {
                (Some(v), true) => Some(g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).numel()])),
                _ => None,
            })
            .collect()
    }

    pub fn var(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }
}
