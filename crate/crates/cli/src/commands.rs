use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use omniris::evalkit::evaluate;
use omniris::omnimodel::{load_checkpoint, model_gradcheck, ModelConfig, ModelState};
use omniris::synthref::{build_dataset, validate_dataset, Dataset, DatasetConfig, PromptKind};
use omniris::trainer::{train_all, Stage, TrainConfig, TrainData};
use tensorkit::gradcheck::{op_suite, GradCheckOptions, GradCheckReport};

use crate::segment::{ReferencePrompt, SegmentRequest, Segmenter};
use crate::{Command, Preset};

/// Returns `Ok(false)` when the command ran but its checks failed.
pub fn dispatch(cmd: Command) -> anyhow::Result<bool> {
    match cmd {
        Command::BuildData { seed, out, config } => build_data(seed, &out, config.as_deref()),
        Command::Train { data, out, seed, config, preset, ckpt } => {
            train(&data, &out, seed, config.as_deref(), preset, ckpt.as_deref())
        }
        Command::Eval { data, ckpt, run, split, kind, out } => {
            eval(&data, &resolve_checkpoint(&ckpt, &run)?, &split, kind.as_deref(), out)
        }
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Infer { data, ckpt, sample, request } => infer(&data, &ckpt, sample, request),
        Command::Serve { data, ckpt, port } => {
            let seg = Arc::new(Segmenter::new(load_checkpoint(&ckpt)?, &data)?);
            tokio::runtime::Runtime::new()?.block_on(crate::server::serve(seg, port))?;
            Ok(true)
        }
    }
}

fn build_data(seed: u64, out: &Path, config: Option<&Path>) -> anyhow::Result<bool> {
    let mut cfg = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| p.display().to_string())?,
        None => DatasetConfig::default(),
    };
    cfg.seed = seed;
    let stats = build_dataset(&cfg, out)?;
    for s in stats.values() {
        println!("{}: {} samples", s.split, s.total);
    }
    let report = validate_dataset(out)?;
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    println!("validated {} records, {} violations", report.records, report.violations.len());
    Ok(report.ok())
}

pub fn preset_configs(preset: Preset) -> (ModelConfig, TrainConfig) {
    match preset {
        Preset::Desk => (ModelConfig::desk(), TrainConfig::default()),
        Preset::PaperFaithful => (ModelConfig::paper_faithful(), TrainConfig::paper_faithful()),
    }
}

fn train(
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    config: Option<&Path>,
    preset: Preset,
    ckpt: Option<&Path>,
) -> anyhow::Result<bool> {
    let (model_cfg, mut cfg) = preset_configs(preset);
    if let Some(p) = config {
        cfg.apply_kv(&std::fs::read_to_string(p)?).with_context(|| p.display().to_string())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut state = match ckpt {
        Some(p) => load_checkpoint(p)?,
        None => ModelState::init(&model_cfg, cfg.seed)?,
    };
    let samples = Dataset::open(data)?.load("omni-train")?;
    let reports = train_all(&mut state, &cfg, &TrainData::new(samples), out)?;
    for r in &reports {
        println!(
            "{}: {} steps in {:.0}s, loss {:.4} -> {:.4}",
            r.stage,
            r.steps,
            r.seconds,
            r.head_mean.unwrap_or(f64::NAN),
            r.tail_mean.unwrap_or(f64::NAN)
        );
    }
    Ok(true)
}

/// A path that exists, or a stage name (`joint`, `stage3`) inside `run`.
pub fn resolve_checkpoint(ckpt: &str, run: &Path) -> anyhow::Result<PathBuf> {
    let direct = PathBuf::from(ckpt);
    if direct.is_file() {
        return Ok(direct);
    }
    let stage = Stage::ALL
        .into_iter()
        .enumerate()
        .find(|(i, s)| s.name() == ckpt || format!("stage{}", i + 1) == ckpt)
        .map(|(_, s)| s);
    match stage {
        Some(s) => Ok(run.join(format!("{}.ckpt", s.name()))),
        None => bail!("no checkpoint at {ckpt} and it is not a stage name"),
    }
}

pub fn parse_kind(s: &str) -> anyhow::Result<PromptKind> {
    PromptKind::ALL.into_iter().find(|k| k.name() == s).with_context(|| format!("unknown prompt kind {s:?}"))
}

fn eval(data: &Path, ckpt: &Path, split: &str, kind: Option<&str>, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let kind = kind.map(parse_kind).transpose()?;
    let state = load_checkpoint(ckpt).with_context(|| ckpt.display().to_string())?;
    let samples = Dataset::open(data)?.load(split)?;
    let (report, dumps) = evaluate(&state, split, &samples, kind)?;
    let out = out.unwrap_or_else(|| PathBuf::from(format!("{split}.metrics.json")));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    let mut preds = std::io::BufWriter::new(std::fs::File::create(out.with_extension("predictions.jsonl"))?);
    for d in &dumps {
        writeln!(preds, "{}", serde_json::to_string(d)?)?;
    }
    preds.flush()?;
    println!("{}", serde_json::to_string_pretty(&report.pooled)?);
    Ok(true)
}

/// Every op of the autodiff engine plus the tiny whole model.
pub fn gradcheck_suite(seed: u64) -> anyhow::Result<Vec<(String, GradCheckReport)>> {
    let opts = GradCheckOptions { seed, ..Default::default() };
    let mut out: Vec<(String, GradCheckReport)> =
        op_suite(seed, &opts)?.into_iter().map(|(n, r)| (n.to_string(), r)).collect();
    let model_opts = GradCheckOptions { max_entries: Some(2), ..opts };
    out.push(("model".into(), model_gradcheck(&ModelConfig::tiny(), seed, &model_opts)?));
    Ok(out)
}

fn gradcheck(seed: u64) -> anyhow::Result<bool> {
    let mut ok = true;
    for (name, r) in gradcheck_suite(seed)? {
        let pass = r.passed();
        ok &= pass;
        println!("{} {name}: {} entries, max rel err {:.2e}", if pass { "ok  " } else { "FAIL" }, r.checked, r.max_rel_err);
    }
    Ok(ok)
}

fn infer(data: &Path, ckpt: &Path, sample: Option<String>, request: Option<PathBuf>) -> anyhow::Result<bool> {
    let seg = Segmenter::new(load_checkpoint(ckpt)?, data)?;
    let req = match (sample, request) {
        (_, Some(p)) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
        (Some(id), None) => request_for_sample(data, &id)?,
        (None, None) => bail!("pass --sample or --request"),
    };
    let resp = seg.segment(&req)?;
    println!("{}", serde_json::to_string_pretty(&resp)?);
    Ok(true)
}

/// The segment request that reproduces a stored sample's prompts.
pub fn request_for_sample(data: &Path, id: &str) -> anyhow::Result<SegmentRequest> {
    let ds = Dataset::open(data)?;
    for split in crate::segment::SPLITS {
        let Ok(records) = ds.records(split) else { continue };
        if let Some(r) = records.into_iter().find(|r| r.id == id) {
            let strip = |p: &str| p.trim_start_matches("images/").trim_end_matches(".png").to_string();
            return Ok(SegmentRequest {
                target_id: strip(&r.target_image),
                text: r.text.clone(),
                reference: r.visual.map(|v| ReferencePrompt {
                    image_id: strip(&v.ref_image),
                    kind: PromptKind::Mask,
                    payload: serde_json::to_value(&v.prompt_rle).expect("rle serializes"),
                }),
            });
        }
    }
    bail!("unknown sample {id}")
}
