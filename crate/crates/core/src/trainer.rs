//! Three-stage training: text alignment, visual tuning with a frozen text
//! encoder, and joint training over a 7:2 text/visual batch mix.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorkit::{adamw_step, poly_decay_lr, AdamState, AdamW};

use crate::objective::{sample_loss, LossBreakdown, LossError, LossWeights};
use crate::omnimodel::{save_checkpoint, Forward, ModelError, ModelInput, ModelState, VisualInput, TEXT_ENCODER_PREFIX};
use crate::synthref::augment::{augment, Augmentation};
use crate::synthref::build::LoadedSample;
use crate::synthref::{derive_seed, PromptKind, SynthError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite {what} at {stage} step {step}; last good state kept")]
    NonFinite { stage: Stage, step: usize, what: String },
    #[error("no {0} samples available")]
    NoData(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] tensorkit::TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    VlAlign,
    VisualTune,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::VlAlign, Stage::VisualTune, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::VlAlign => "vl_align",
            Stage::VisualTune => "visual_tune",
            Stage::Joint => "joint",
        }
    }

    /// Parameter-path prefixes held fixed during the stage.
    pub fn frozen(self) -> Vec<String> {
        match self {
            Stage::VisualTune => vec![TEXT_ENCODER_PREFIX.to_string()],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: [usize; 3],
    pub lr0: f64,
    pub power: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub text_quota: usize,
    pub visual_quota: usize,
    /// Colour-permutation and flip augmentation of training samples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            steps: [600, 600, 800],
            lr0: 1e-3,
            power: 0.9,
            weight_decay: 0.05,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            text_quota: 7,
            visual_quota: 2,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn paper_faithful() -> Self {
        Self { lr0: 1e-5, augment: false, ..Self::default() }
    }

    pub fn steps_for(&self, stage: Stage) -> usize {
        self.steps[stage as usize]
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || self.power < 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(TrainError::Config("lr0 must be positive; power, weight_decay and clip_norm nonnegative".into()));
        }
        if self.text_quota + self.visual_quota == 0 {
            return Err(TrainError::Config("mix quotas are both zero".into()));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps.vl_align", self.steps[0].to_string()),
            ("steps.visual_tune", self.steps[1].to_string()),
            ("steps.joint", self.steps[2].to_string()),
            ("lr0", self.lr0.to_string()),
            ("power", self.power.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("lambda.mask", self.weights.mask.to_string()),
            ("lambda.region", self.weights.region.to_string()),
            ("lambda.nt", self.weights.nt.to_string()),
            ("mix.text", self.text_quota.to_string()),
            ("mix.visual", self.visual_quota.to_string()),
            ("augment", self.augment.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    /// Overrides the keys present in `text`, leaving the others as they are.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let c = self;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: &dyn fmt::Display| TrainError::Config(format!("line {}: {k}: {e}", n + 1));
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
            let float = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
            match k {
                "seed" => c.seed = v.parse().map_err(|e| bad(&e))?,
                "batch_size" => c.batch_size = int(v)?,
                "steps.vl_align" => c.steps[0] = int(v)?,
                "steps.visual_tune" => c.steps[1] = int(v)?,
                "steps.joint" => c.steps[2] = int(v)?,
                "lr0" => c.lr0 = float(v)?,
                "power" => c.power = float(v)?,
                "weight_decay" => c.weight_decay = float(v)?,
                "clip_norm" => c.clip_norm = float(v)?,
                "lambda.mask" => c.weights.mask = float(v)?,
                "lambda.region" => c.weights.region = float(v)?,
                "lambda.nt" => c.weights.nt = float(v)?,
                "mix.text" => c.text_quota = int(v)?,
                "mix.visual" => c.visual_quota = int(v)?,
                "augment" => c.augment = v.parse().map_err(|e| bad(&e))?,
                _ => return Err(TrainError::Config(format!("line {}: unknown key {k}", n + 1))),
            }
        }
        c.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Text,
    Visual,
}

/// Interleaves text and visual batches: each cycle holds exactly
/// `text_quota` text and `visual_quota` visual batches in a seeded order.
#[derive(Clone, Debug)]
pub struct Mixer {
    text_quota: usize,
    visual_quota: usize,
    seed: u64,
    cycle: u64,
    pending: Vec<Stream>,
}

impl Mixer {
    pub fn new(text_quota: usize, visual_quota: usize, seed: u64) -> Self {
        assert!(text_quota + visual_quota > 0, "empty mix cycle");
        Self { text_quota, visual_quota, seed, cycle: 0, pending: Vec::new() }
    }
}

impl Iterator for Mixer {
    type Item = Stream;

    fn next(&mut self) -> Option<Stream> {
        if self.pending.is_empty() {
            let mut c = vec![Stream::Text; self.text_quota];
            c.extend(std::iter::repeat(Stream::Visual).take(self.visual_quota));
            c.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "mix", self.cycle)));
            c.reverse();
            self.pending = c;
            self.cycle += 1;
        }
        self.pending.pop()
    }
}

pub fn mix_batches(n: usize, text_quota: usize, visual_quota: usize, seed: u64) -> Vec<Stream> {
    Mixer::new(text_quota, visual_quota, seed).take(n).collect()
}

/// Training samples split into the two streams. Omni samples belong to the
/// visual stream.
pub struct TrainData {
    pub text: Vec<LoadedSample>,
    pub visual: Vec<LoadedSample>,
}

impl TrainData {
    pub fn new(samples: Vec<LoadedSample>) -> Self {
        let (visual, text) = samples.into_iter().partition(|s| s.visual.is_some());
        Self { text, visual }
    }
}

/// Endless shuffled pass over `n` indices, reshuffled every epoch.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Cursor {
    fn new(n: usize, seed: u64) -> Self {
        Self { order: (0..n).collect(), pos: n, epoch: 0, seed }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "epoch", self.epoch)));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub stream: Stream,
    pub l_mask: f64,
    pub l_region: f64,
    pub l_nt: f64,
    pub l_total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    /// Mean total loss over the first and last 50 steps.
    pub head_mean: Option<f64>,
    pub tail_mean: Option<f64>,
    pub frozen_hash_before: BTreeMap<String, String>,
    pub frozen_hash_after: BTreeMap<String, String>,
    pub seconds: f64,
}

/// Loss and summed parameter gradients of one batch.
struct BatchResult {
    loss: LossBreakdown,
    grads: Vec<Option<Vec<f64>>>,
}

fn batch_gradients(
    state: &ModelState,
    frozen: &[String],
    batch: &[ModelInput],
    samples: &[&LoadedSample],
    cfg: &TrainConfig,
) -> Result<BatchResult> {
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; state.len()];
    let mut sum = [0.0; 4];
    for (input, s) in batch.iter().zip(samples) {
        let mut f = Forward::new(state, frozen, true);
        let out = f.run(input)?;
        let l = sample_loss(&mut f.g, &out, &s.gt, s.exists, &cfg.weights, state.config.seg_grid)?;
        let b = l.breakdown(&f.g);
        for (acc, v) in sum.iter_mut().zip([b.l_mask, b.l_region, b.l_nt, b.l_total]) {
            *acc += v * scale;
        }
        let scaled = f.g.scale(l.total, scale)?;
        f.g.backward(scaled)?;
        for (acc, g) in grads.iter_mut().zip(f.binder.grads(&f.g)) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    let loss = LossBreakdown { l_mask: sum[0], l_region: sum[1], l_nt: sum[2], l_total: sum[3] };
    Ok(BatchResult { loss, grads })
}

/// Runs one stage in place. `state` is only modified by completed steps;
/// on a non-finite loss or gradient it keeps the last good values.
pub fn run_stage(
    state: &mut ModelState,
    stage: Stage,
    cfg: &TrainConfig,
    data: &TrainData,
    log: &mut dyn FnMut(&StepLog),
) -> Result<StageReport> {
    cfg.validate()?;
    let steps = cfg.steps_for(stage);
    let frozen = stage.frozen();
    let hashes = |st: &ModelState| frozen.iter().map(|p| (p.clone(), st.hash(p))).collect::<BTreeMap<_, _>>();
    let frozen_hash_before = hashes(state);
    let started = Instant::now();
    let stage_seed = derive_seed(cfg.seed, stage.name(), 0);

    let needs_text = matches!(stage, Stage::VlAlign) || (matches!(stage, Stage::Joint) && cfg.text_quota > 0);
    let needs_visual = matches!(stage, Stage::VisualTune) || (matches!(stage, Stage::Joint) && cfg.visual_quota > 0);
    if steps > 0 && needs_text && data.text.is_empty() {
        return Err(TrainError::NoData("text"));
    }
    if steps > 0 && needs_visual && data.visual.is_empty() {
        return Err(TrainError::NoData("visual"));
    }
    let mut text_cursor = Cursor::new(data.text.len(), derive_seed(stage_seed, "text", 0));
    let mut visual_cursor = Cursor::new(data.visual.len(), derive_seed(stage_seed, "visual", 0));
    let mut mixer = Mixer::new(cfg.text_quota, cfg.visual_quota, derive_seed(stage_seed, "mixer", 0));
    let mut kind_rng = ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, "kind", 0));
    let mut adam: Vec<AdamState> = state.tensors().iter().map(|t| AdamState::new(t.numel())).collect();
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        let stream = match stage {
            Stage::VlAlign => Stream::Text,
            Stage::VisualTune => Stream::Visual,
            Stage::Joint => mixer.next().expect("mixer is endless"),
        };
        let drawn: Vec<&LoadedSample> = (0..cfg.batch_size)
            .map(|_| match stream {
                Stream::Text => &data.text[text_cursor.next()],
                Stream::Visual => &data.visual[visual_cursor.next()],
            })
            .collect();
        let augmented: Vec<LoadedSample> = if cfg.augment {
            drawn
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, "augment", (step * cfg.batch_size + i) as u64));
                    augment(s, &Augmentation::sample(&mut rng))
                })
                .collect()
        } else {
            Vec::new()
        };
        let samples: Vec<&LoadedSample> = if cfg.augment { augmented.iter().collect() } else { drawn };
        let lr = poly_decay_lr(step, steps, cfg.lr0, cfg.power);

        let result = if stage == Stage::VisualTune {
            // visual prompt only, kind drawn once per step
            let kind = PromptKind::ALL[kind_rng.gen_range(0..3)];
            let visuals = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let v = s.visual.as_ref().expect("visual stream");
                    if v.kind == kind {
                        Ok(v.clone())
                    } else {
                        v.with_kind(kind, derive_seed(stage_seed, "prompt", (step * cfg.batch_size + i) as u64))
                    }
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let inputs: Vec<ModelInput> = samples
                .iter()
                .zip(&visuals)
                .map(|(s, v)| ModelInput {
                    target: &s.target,
                    text: None,
                    visual: Some(VisualInput { reference: &v.reference, prompt: &v.prompt }),
                })
                .collect();
            batch_gradients(state, &frozen, &inputs, &samples, cfg)
        } else {
            let inputs: Vec<ModelInput> = samples.iter().map(|s| ModelInput::from_sample(s)).collect();
            batch_gradients(state, &frozen, &inputs, &samples, cfg)
        };
        let non_finite = |what: String| TrainError::NonFinite { stage, step, what };
        let BatchResult { loss, mut grads } = match result {
            Err(TrainError::Model(ModelError::Tensor(tensorkit::TensorError::NonFinite(m)))) => {
                return Err(non_finite(m));
            }
            Err(TrainError::Tensor(tensorkit::TensorError::NonFinite(m))) => return Err(non_finite(m)),
            r => r?,
        };
        if !loss.l_total.is_finite() {
            return Err(non_finite("loss".into()));
        }
        let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(non_finite("gradient".into()));
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            let c = cfg.clip_norm / norm;
            grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= c));
        }
        let hp = AdamW { lr, weight_decay: cfg.weight_decay, ..AdamW::default() };
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                adamw_step(state.tensor_mut(i).data_mut(), g, &mut adam[i], &hp)?;
            }
        }
        losses.push(loss.l_total);
        log(&StepLog {
            step,
            stage,
            stream,
            l_mask: loss.l_mask,
            l_region: loss.l_region,
            l_nt: loss.l_nt,
            l_total: loss.l_total,
            lr,
            grad_norm: norm,
        });
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let k = losses.len().min(50);
    Ok(StageReport {
        stage,
        steps,
        first_loss: losses.first().copied(),
        last_loss: losses.last().copied(),
        head_mean: mean(&losses[..k]),
        tail_mean: mean(&losses[losses.len() - k..]),
        frozen_hash_before,
        frozen_hash_after: hashes(state),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Where a full run writes its artifacts.
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.0.join(format!("{}.ckpt", stage.name()))
    }

    pub fn log(&self) -> PathBuf {
        self.0.join("train_log.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.0.join("train_report.json")
    }

    pub fn config(&self) -> PathBuf {
        self.0.join("train.cfg")
    }
}

/// All three stages in order, checkpointing after each stage. The log is
/// appended line by line so an aborted run keeps its history; the state of
/// an aborted stage is saved as `<stage>.last_good.ckpt`.
pub fn train_all(state: &mut ModelState, cfg: &TrainConfig, data: &TrainData, out: &Path) -> Result<Vec<StageReport>> {
    use std::io::Write;
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let dir = RunDir(out.to_path_buf());
    std::fs::write(dir.config(), cfg.to_kv())?;
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(dir.log())?);
    let mut io_error = None;
    let mut reports = Vec::new();
    for stage in Stage::ALL {
        let mut sink = |l: &StepLog| {
            let line = serde_json::to_string(l).expect("log line serializes");
            if let Err(e) = writeln!(log_file, "{line}") {
                io_error.get_or_insert(e);
            }
            if l.step % 50 == 0 {
                log::info!("{} step {} loss {:.4} lr {:.2e}", l.stage, l.step, l.l_total, l.lr);
            }
        };
        match run_stage(state, stage, cfg, data, &mut sink) {
            Ok(r) => reports.push(r),
            Err(e) => {
                log_file.flush()?;
                save_checkpoint(state, &out.join(format!("{}.last_good.ckpt", stage.name())))?;
                return Err(e);
            }
        }
        log_file.flush()?;
        if let Some(e) = io_error.take() {
            return Err(e.into());
        }
        save_checkpoint(state, &dir.checkpoint(stage))?;
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    std::fs::write(dir.report(), json)?;
    Ok(reports)
}
