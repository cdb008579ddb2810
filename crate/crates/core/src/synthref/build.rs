use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pairing::{make_prompt, merge_omni, pair_visual, pair_visual_category, ReferencePool, VisualAssignment};
use super::scene::{generate_scene, is_selectable, Category, Scene, SceneConfig};
use super::text::{annotate_text, interpret, tokenize, Expression, TextAnnotation};
use super::{derive_seed, Case, OutputKind, PromptKind, Result, Source, SynthError};
use crate::maskgeo::{rle_decode, rle_encode, BinaryMask, RleMask};

pub const SPLITS: [&str; 4] = ["omni-train", "text-test", "visual-test", "omni-test"];
const IMAGE_DIR: &str = "images";
const CONFIG_FILE: &str = "dataset.json";
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_size: usize,
    /// Samples in each of the three test splits.
    pub test_size: usize,
    pub train_scenes: usize,
    pub train_reference_scenes: usize,
    pub test_reference_scenes: usize,
    /// Share of text-only and visual-only training samples; the rest are omni.
    pub text_share: f64,
    pub visual_share: f64,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_size: 2000,
            test_size: 300,
            train_scenes: 1000,
            train_reference_scenes: 400,
            test_reference_scenes: 200,
            text_share: 0.40,
            visual_share: 0.35,
            scene: SceneConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn test_scenes(&self) -> usize {
        self.test_size.div_ceil(3)
    }

    fn check(&self) -> Result<()> {
        if self.test_size < 30 {
            return Err(SynthError::Config(format!("test splits need at least 30 samples, got {}", self.test_size)));
        }
        if self.train_size < 3 || self.train_scenes == 0 || self.train_reference_scenes == 0 || self.test_reference_scenes == 0 {
            return Err(SynthError::Config("train size and scene counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&(self.text_share + self.visual_share)) || self.text_share < 0.0 || self.visual_share < 0.0 {
            return Err(SynthError::Config("modality shares must lie in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualRecord {
    pub ref_image: String,
    pub kind: PromptKind,
    pub prompt_rle: RleMask,
    /// Full instance mask in the reference, so any prompt kind can be re-derived.
    pub instance_rle: RleMask,
    pub prompt_seed: u64,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtRecord {
    pub source: Source,
    pub rle: RleMask,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub target_image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<VisualRecord>,
    pub gt: Vec<GtRecord>,
    pub exists: bool,
    pub case: Case,
}

impl SampleRecord {
    pub fn modality(&self) -> &'static str {
        match (self.text_tokens.is_some(), self.visual.is_some()) {
            (true, true) => "omni",
            (true, false) => "text",
            _ => "visual",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub total: usize,
    pub cases: BTreeMap<Case, usize>,
    pub outputs: BTreeMap<OutputKind, usize>,
    pub modalities: BTreeMap<String, usize>,
    pub prompt_kinds: BTreeMap<PromptKind, usize>,
}

impl SplitStats {
    pub fn of(split: &str, records: &[SampleRecord]) -> Self {
        let mut s = SplitStats { split: split.to_string(), total: records.len(), ..Default::default() };
        for r in records {
            *s.cases.entry(r.case).or_default() += 1;
            *s.outputs.entry(r.case.output_kind()).or_default() += 1;
            *s.modalities.entry(r.modality().to_string()).or_default() += 1;
            if let Some(v) = &r.visual {
                *s.prompt_kinds.entry(v.kind).or_default() += 1;
            }
        }
        s
    }
}

fn image_path(scene_id: &str) -> String {
    format!("{IMAGE_DIR}/{scene_id}.png")
}

fn scene_id_of(path: &str) -> Option<&str> {
    path.strip_prefix("images/")?.strip_suffix(".png")
}

/// The four scene collections a dataset is drawn from.
struct SceneSets {
    train: Vec<Scene>,
    train_refs: ReferencePool,
    test: Vec<Scene>,
    test_refs: ReferencePool,
}

fn supports_every_case(s: &Scene) -> bool {
    let cats = s.categories();
    is_selectable(s) && cats.iter().any(|&c| s.count_of(c) == 1) && cats.iter().any(|&c| s.count_of(c) >= 2)
}

fn scene_run(cfg: &DatasetConfig, label: &str, prefix: &str, count: usize, keep: fn(&Scene) -> bool) -> Result<Vec<Scene>> {
    let mut out = Vec::with_capacity(count);
    let mut idx = 0u64;
    while out.len() < count {
        if idx > 50 * count as u64 + 1000 {
            return Err(SynthError::Config(format!("scene config yields too few acceptable {label} scenes")));
        }
        let mut s = generate_scene(derive_seed(cfg.seed, label, idx), &cfg.scene)?;
        idx += 1;
        if keep(&s) {
            s.id = format!("{prefix}{:05}", out.len());
            out.push(s);
        }
    }
    Ok(out)
}

fn scene_sets(cfg: &DatasetConfig) -> Result<SceneSets> {
    Ok(SceneSets {
        train: scene_run(cfg, "train-scene", "tr", cfg.train_scenes, is_selectable)?,
        train_refs: ReferencePool::new(scene_run(cfg, "train-ref", "rf", cfg.train_reference_scenes, |s| !s.objects.is_empty())?),
        test: scene_run(cfg, "test-scene", "te", cfg.test_scenes(), supports_every_case)?,
        test_refs: ReferencePool::new(scene_run(cfg, "test-ref", "rt", cfg.test_reference_scenes, |s| !s.objects.is_empty())?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Modality {
    Text,
    Visual,
    Omni,
}

fn union_of(scene: &Scene, referents: &[usize]) -> BinaryMask {
    scene.union_mask(referents)
}

fn visual_record(v: &VisualAssignment, pool: &ReferencePool) -> VisualRecord {
    VisualRecord {
        ref_image: image_path(&pool.scenes()[v.ref_scene].id),
        kind: v.kind,
        prompt_rle: rle_encode(&v.prompt),
        instance_rle: rle_encode(&v.instance),
        prompt_seed: v.prompt_seed,
        category: v.category,
    }
}

/// One attempt at a sample of the given modality and output kind on `scene`.
/// `Ok(None)` means the draw was rejected and another should be tried.
fn try_sample(
    id: &str,
    scene: &Scene,
    pool: &ReferencePool,
    modality: Modality,
    kind: OutputKind,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(SampleRecord, Option<usize>)>> {
    let all_cats = Category::all();
    let text_part = |t: &TextAnnotation| (Some(t.tokens.clone()), Some(t.text.clone()), GtRecord { source: Source::Text, rle: rle_encode(&union_of(scene, &t.referents)) });
    let soft = |e: SynthError| match e {
        SynthError::Unsatisfiable(_) | SynthError::PairingUnavailable(_) => Ok(None),
        e => Err(e),
    };
    let record = |text: Option<&TextAnnotation>, visual: Option<&VisualAssignment>, case: Case| {
        let mut gt = Vec::new();
        let (mut text_tokens, mut text_str) = (None, None);
        if let Some(t) = text {
            let (a, b, g) = text_part(t);
            text_tokens = a;
            text_str = b;
            gt.push(g);
        }
        if let Some(v) = visual {
            gt.push(GtRecord { source: Source::Visual, rle: rle_encode(&union_of(scene, &v.referents)) });
        }
        let exists = text.is_some_and(|t| !t.referents.is_empty()) || visual.is_some_and(|v| !v.referents.is_empty());
        SampleRecord {
            id: id.to_string(),
            target_image: image_path(&scene.id),
            text_tokens,
            text: text_str,
            visual: visual.map(|v| visual_record(v, pool)),
            gt,
            exists,
            case,
        }
    };
    match modality {
        Modality::Text => {
            let t = match annotate_text(scene, kind, &all_cats, rng) {
                Ok(t) => t,
                Err(e) => return soft(e),
            };
            Ok(Some((record(Some(&t), None, Case::unimodal(t.referents.len())), None)))
        }
        Modality::Visual => {
            let v = match pair_visual(scene, pool, kind, rng) {
                Ok(v) => v,
                Err(e) => return soft(e),
            };
            Ok(Some((record(None, Some(&v), Case::unimodal(v.referents.len())), Some(v.ref_scene))))
        }
        Modality::Omni => {
            let (t, v) = match kind {
                OutputKind::Single => {
                    let uniques: Vec<Category> =
                        scene.categories().into_iter().filter(|&c| scene.count_of(c) == 1 && !pool.instances(c).is_empty()).collect();
                    let Some(&c) = uniques.choose(rng) else { return Ok(None) };
                    let t = TextAnnotation::new(Expression::The { category: c }, scene, rng);
                    match pair_visual_category(scene, pool, c, rng) {
                        Ok(v) => (t, v),
                        Err(e) => return soft(e),
                    }
                }
                OutputKind::Multi => {
                    let tk = if rng.gen_bool(0.5) { OutputKind::Single } else { OutputKind::Multi };
                    let vk = if rng.gen_bool(0.5) { OutputKind::Single } else { OutputKind::Multi };
                    match (annotate_text(scene, tk, &all_cats, rng), pair_visual(scene, pool, vk, rng)) {
                        (Ok(t), Ok(v)) => (t, v),
                        (Err(e), _) | (_, Err(e)) => return soft(e),
                    }
                }
                OutputKind::NoTarget => match (annotate_text(scene, kind, &all_cats, rng), pair_visual(scene, pool, kind, rng)) {
                    (Ok(t), Ok(v)) => (t, v),
                    (Err(e), _) | (_, Err(e)) => return soft(e),
                },
            };
            match merge_omni(scene, &t.referents, v.category, &v.referents) {
                Ok(case) if case.output_kind() == kind => Ok(Some((record(Some(&t), Some(&v), case), Some(v.ref_scene)))),
                Ok(_) => Ok(None),
                Err(reason) => {
                    log::debug!("omni pair rejected on {}: {reason}", scene.id);
                    Ok(None)
                }
            }
        }
    }
}

struct SplitOutput {
    records: Vec<SampleRecord>,
    targets: BTreeSet<usize>,
    refs: BTreeSet<usize>,
}

fn train_split(cfg: &DatasetConfig, sets: &SceneSets) -> Result<SplitOutput> {
    let n = cfg.train_size;
    let n_text = (n as f64 * cfg.text_share).round() as usize;
    let n_visual = ((n as f64 * cfg.visual_share).round() as usize).min(n - n_text);
    let mut plan: Vec<(Modality, OutputKind)> = Vec::with_capacity(n);
    let kinds = [OutputKind::Single, OutputKind::Multi, OutputKind::NoTarget];
    for (m, count) in [(Modality::Text, n_text), (Modality::Visual, n_visual), (Modality::Omni, n - n_text - n_visual)] {
        plan.extend((0..count).map(|i| (m, kinds[i % 3])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-plan", 0));
    plan.shuffle(&mut rng);
    let mut out = SplitOutput { records: Vec::with_capacity(n), targets: BTreeSet::new(), refs: BTreeSet::new() };
    for (i, &(modality, kind)) in plan.iter().enumerate() {
        let id = format!("train-{i:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-sample", i as u64));
        let mut made = None;
        for _ in 0..MAX_ATTEMPTS {
            let si = rng.gen_range(0..sets.train.len());
            if let Some((rec, r)) = try_sample(&id, &sets.train[si], &sets.train_refs, modality, kind, &mut rng)? {
                made = Some((rec, si, r));
                break;
            }
        }
        let (rec, si, r) = made.ok_or_else(|| SynthError::Unsatisfiable(format!("could not build {id} ({modality:?}, {kind:?})")))?;
        out.targets.insert(si);
        out.refs.extend(r);
        out.records.push(rec);
    }
    Ok(out)
}

fn test_split(cfg: &DatasetConfig, sets: &SceneSets, split: &str, modality: Modality) -> Result<SplitOutput> {
    let prefix = split.trim_end_matches("-test");
    let mut out = SplitOutput { records: Vec::with_capacity(cfg.test_size), targets: BTreeSet::new(), refs: BTreeSet::new() };
    let kinds = [OutputKind::Single, OutputKind::Multi, OutputKind::NoTarget];
    'scenes: for (si, scene) in sets.test.iter().enumerate() {
        for (ki, &kind) in kinds.iter().enumerate() {
            if out.records.len() == cfg.test_size {
                break 'scenes;
            }
            let i = out.records.len();
            let id = format!("{prefix}-{i:05}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split, (si * 3 + ki) as u64));
            let mut made = None;
            for _ in 0..MAX_ATTEMPTS {
                if let Some(x) = try_sample(&id, scene, &sets.test_refs, modality, kind, &mut rng)? {
                    made = Some(x);
                    break;
                }
            }
            let (rec, r) = made.ok_or_else(|| SynthError::Unsatisfiable(format!("could not build {id} on {}", scene.id)))?;
            out.targets.insert(si);
            out.refs.extend(r);
            out.records.push(rec);
        }
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

fn write_png(path: &Path, scene: &Scene) -> Result<()> {
    image::save_buffer_with_format(path, &scene.pixels, scene.width as u32, scene.height as u32, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| SynthError::Image { path: path.display().to_string(), msg: e.to_string() })
}

fn write_split(dir: &Path, split: &str, records: &[SampleRecord]) -> Result<()> {
    let path = dir.join(format!("{split}.jsonl"));
    let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| SynthError::Manifest(e.to_string()))?;
        writeln!(f, "{line}").map_err(io_err(&path))?;
    }
    f.flush().map_err(io_err(&path))?;
    let stats_path = dir.join(format!("{split}.stats.json"));
    let stats = serde_json::to_string_pretty(&SplitStats::of(split, records)).map_err(|e| SynthError::Manifest(e.to_string()))?;
    fs::write(&stats_path, stats + "\n").map_err(io_err(&stats_path))
}

fn write_all(dir: &Path, cfg: &DatasetConfig, sets: &SceneSets, splits: &[(&str, SplitOutput)]) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg_json = serde_json::to_string_pretty(cfg).map_err(|e| SynthError::Manifest(e.to_string()))?;
    fs::write(&cfg_path, cfg_json + "\n").map_err(io_err(&cfg_path))?;
    for (name, out) in splits {
        let (targets, refs) = if *name == "omni-train" { (&sets.train, &sets.train_refs) } else { (&sets.test, &sets.test_refs) };
        for &i in &out.targets {
            let p = img_dir.join(format!("{}.png", targets[i].id));
            if !p.exists() {
                write_png(&p, &targets[i])?;
            }
        }
        for &i in &out.refs {
            let s = &refs.scenes()[i];
            let p = img_dir.join(format!("{}.png", s.id));
            if !p.exists() {
                write_png(&p, s)?;
            }
        }
        write_split(dir, name, &out.records)?;
    }
    Ok(())
}

/// Generates the full dataset under `out`: images, one JSONL manifest and a
/// stats sidecar per split, and the generating config.
///
/// Output is staged next to `out` and moved into place only when complete.
/// An existing `out` is replaced only if it is empty or holds a previous
/// dataset.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<BTreeMap<String, SplitStats>> {
    cfg.check()?;
    if out.exists() {
        let previous = out.join(CONFIG_FILE).exists();
        let empty = fs::read_dir(out).map_err(io_err(out))?.next().is_none();
        if !previous && !empty {
            return Err(SynthError::Config(format!("{} exists and does not hold a dataset", out.display())));
        }
    }
    let sets = scene_sets(cfg)?;
    let splits = [
        ("omni-train", train_split(cfg, &sets)?),
        ("text-test", test_split(cfg, &sets, "text-test", Modality::Text)?),
        ("visual-test", test_split(cfg, &sets, "visual-test", Modality::Visual)?),
        ("omni-test", test_split(cfg, &sets, "omni-test", Modality::Omni)?),
    ];
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let staging = out.with_file_name(format!(".{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    if let Err(e) = write_all(&staging, cfg, &sets, &splits) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(io_err(out))?;
    }
    fs::rename(&staging, out).map_err(io_err(out))?;
    Ok(splits.iter().map(|(n, o)| (n.to_string(), SplitStats::of(n, &o.records))).collect())
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<SampleRecord>> {
    if !SPLITS.contains(&split) {
        return Err(SynthError::Manifest(format!("unknown split {split:?}; expected one of {SPLITS:?}")));
    }
    let path = root.join(format!("{split}.jsonl"));
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SynthError::Manifest(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn load_stats(root: &Path, split: &str) -> Result<SplitStats> {
    let path = root.join(format!("{split}.stats.json"));
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Manifest(format!("{}: {e}", path.display())))
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| SynthError::Image { path: path.display().to_string(), msg: e.to_string() })?;
        let rgb = img.to_rgb8();
        Ok(Self { height: rgb.height() as usize, width: rgb.width() as usize, pixels: rgb.into_raw() })
    }
}

#[derive(Clone, Debug)]
pub struct LoadedVisual {
    pub reference: Arc<RgbImage>,
    pub ref_id: String,
    pub kind: PromptKind,
    pub prompt: BinaryMask,
    pub instance: BinaryMask,
    pub prompt_seed: u64,
    pub category: Category,
}

impl LoadedVisual {
    /// The same reference instance prompted with a different kind.
    pub fn with_kind(&self, kind: PromptKind, seed: u64) -> Result<LoadedVisual> {
        Ok(LoadedVisual { kind, prompt: make_prompt(&self.instance, kind, seed)?, prompt_seed: seed, ..self.clone() })
    }
}

/// A decoded sample ready for the model.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub case: Case,
    pub exists: bool,
    pub target_id: String,
    pub target: Arc<RgbImage>,
    pub text_tokens: Option<Vec<u32>>,
    pub text: Option<String>,
    pub visual: Option<LoadedVisual>,
    pub gt: Vec<(Source, BinaryMask)>,
}

/// A dataset directory with an image cache shared across splits.
pub struct Dataset {
    root: PathBuf,
    config: DatasetConfig,
    images: HashMap<String, Arc<RgbImage>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let config = serde_json::from_str(&text).map_err(|e| SynthError::Manifest(format!("{}: {e}", path.display())))?;
        Ok(Self { root: root.to_path_buf(), config, images: HashMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn image(&mut self, rel: &str) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.images.get(rel) {
            return Ok(img.clone());
        }
        let img = Arc::new(RgbImage::read(&self.root.join(rel))?);
        self.images.insert(rel.to_string(), img.clone());
        Ok(img)
    }

    pub fn records(&self, split: &str) -> Result<Vec<SampleRecord>> {
        load_split(&self.root, split)
    }

    pub fn decode(&mut self, r: &SampleRecord) -> Result<LoadedSample> {
        let target = self.image(&r.target_image)?;
        let visual = match &r.visual {
            Some(v) => Some(LoadedVisual {
                reference: self.image(&v.ref_image)?,
                ref_id: scene_id_of(&v.ref_image).unwrap_or(&v.ref_image).to_string(),
                kind: v.kind,
                prompt: rle_decode(&v.prompt_rle)?,
                instance: rle_decode(&v.instance_rle)?,
                prompt_seed: v.prompt_seed,
                category: v.category,
            }),
            None => None,
        };
        let gt = r.gt.iter().map(|g| Ok((g.source, rle_decode(&g.rle)?))).collect::<Result<_>>()?;
        Ok(LoadedSample {
            id: r.id.clone(),
            case: r.case,
            exists: r.exists,
            target_id: scene_id_of(&r.target_image).unwrap_or(&r.target_image).to_string(),
            target,
            text_tokens: r.text_tokens.clone(),
            text: r.text.clone(),
            visual,
            gt,
        })
    }

    /// Loads and decodes a whole split. Missing files are collected and
    /// reported together.
    pub fn load(&mut self, split: &str) -> Result<Vec<LoadedSample>> {
        let records = self.records(split)?;
        let mut out = Vec::with_capacity(records.len());
        let mut missing = Vec::new();
        for r in &records {
            match self.decode(r) {
                Ok(s) => out.push(s),
                Err(SynthError::Image { .. }) => missing.push(r.id.clone()),
                Err(e) => return Err(e),
            }
        }
        if !missing.is_empty() {
            return Err(SynthError::Manifest(format!("unreadable images for samples: {}", missing.join(", "))));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub records: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_record(r: &SampleRecord, scenes: &HashMap<&str, &Scene>, root: &Path, v: &mut Vec<String>) {
    let mut fail = |msg: String| v.push(format!("{}: {msg}", r.id));
    let Some(target) = scene_id_of(&r.target_image).and_then(|id| scenes.get(id)) else {
        fail(format!("unknown target image {}", r.target_image));
        return;
    };
    if !root.join(&r.target_image).is_file() {
        fail(format!("missing file {}", r.target_image));
    }
    if r.text_tokens.is_none() && r.visual.is_none() {
        fail("no prompt".into());
    }
    let want_sources: Vec<Source> =
        r.text_tokens.iter().map(|_| Source::Text).chain(r.visual.iter().map(|_| Source::Visual)).collect();
    let got_sources: Vec<Source> = r.gt.iter().map(|g| g.source).collect();
    if want_sources != got_sources {
        fail(format!("gt sources {got_sources:?}, expected {want_sources:?}"));
        return;
    }
    let mut gts = Vec::new();
    for g in &r.gt {
        match rle_decode(&g.rle) {
            Ok(m) if m.height() == target.height && m.width() == target.width => gts.push(m),
            Ok(_) => return fail("gt size differs from target".into()),
            Err(e) => return fail(format!("gt rle: {e}")),
        }
    }
    if r.exists != gts.iter().any(|m| !m.is_empty()) {
        fail(format!("exists={} disagrees with gt masks", r.exists));
    }
    let mut text_refs = None;
    if let Some(tokens) = &r.text_tokens {
        if r.text.as_deref().map(tokenize).as_ref() != Some(tokens) {
            fail("text and tokens disagree".into());
        }
        match interpret(tokens, target) {
            Some(refs) => {
                if target.union_mask(&refs) != gts[0] {
                    fail("text gt differs from interpreted referents".into());
                }
                text_refs = Some(refs);
            }
            None => fail("text outside template grammar".into()),
        }
    }
    let mut visual_refs = None;
    if let Some(vis) = &r.visual {
        let inst = rle_decode(&vis.instance_rle);
        let prompt = rle_decode(&vis.prompt_rle);
        let reference = scene_id_of(&vis.ref_image).and_then(|id| scenes.get(id));
        match (inst, prompt, reference) {
            (Ok(inst), Ok(prompt), Some(reference)) => {
                if !root.join(&vis.ref_image).is_file() {
                    fail(format!("missing file {}", vis.ref_image));
                }
                if !reference.objects.iter().any(|o| o.category == vis.category && o.mask == inst) {
                    fail("instance mask is not an object of the named category".into());
                }
                match make_prompt(&inst, vis.kind, vis.prompt_seed) {
                    Ok(p) if p == prompt => {}
                    _ => fail(format!("{} prompt does not match its instance", vis.kind.name())),
                }
                if vis.kind == PromptKind::Scribble && prompt.intersection_count(&inst).ok() != Some(prompt.count()) {
                    fail("scribble leaves the instance".into());
                }
                let refs = target.instances_of(vis.category);
                if target.union_mask(&refs) != *gts.last().expect("visual gt") {
                    fail("visual gt is not the union of same-category instances".into());
                }
                visual_refs = Some(refs);
            }
            _ => fail("unreadable visual prompt".into()),
        }
    }
    let expected = match (&text_refs, &visual_refs) {
        (Some(t), Some(vr)) => {
            let cat = r.visual.as_ref().expect("visual").category;
            merge_omni(target, t, cat, vr).ok()
        }
        (Some(t), None) => Some(Case::unimodal(t.len())),
        (None, Some(vr)) => Some(Case::unimodal(vr.len())),
        (None, None) => None,
    };
    if expected != Some(r.case) {
        fail(format!("case {:?}, expected {expected:?}", r.case));
    }
}

/// Checks every record of every split against the scenes regenerated from
/// the stored config, plus bookkeeping invariants across splits.
pub fn validate_dataset(root: &Path) -> Result<ValidationReport> {
    let ds = Dataset::open(root)?;
    let sets = scene_sets(ds.config())?;
    let mut scenes: HashMap<&str, &Scene> = HashMap::new();
    for s in sets.train.iter().chain(&sets.test).chain(sets.train_refs.scenes()).chain(sets.test_refs.scenes()) {
        scenes.insert(&s.id, s);
    }
    let mut report = ValidationReport::default();
    let mut test_targets: Vec<BTreeSet<String>> = Vec::new();
    for split in SPLITS {
        let records = load_split(root, split)?;
        report.records += records.len();
        let want = if split == "omni-train" { ds.config().train_size } else { ds.config().test_size };
        if records.len() != want {
            report.violations.push(format!("{split}: {} records, expected {want}", records.len()));
        }
        let mut ids = BTreeSet::new();
        for r in &records {
            if !ids.insert(&r.id) {
                report.violations.push(format!("{split}: duplicate id {}", r.id));
            }
            check_record(r, &scenes, root, &mut report.violations);
        }
        match load_stats(root, split) {
            Ok(s) if s == SplitStats::of(split, &records) => {}
            Ok(_) => report.violations.push(format!("{split}: stats sidecar disagrees with records")),
            Err(e) => report.violations.push(format!("{split}: {e}")),
        }
        let counts: Vec<usize> =
            [OutputKind::Single, OutputKind::Multi, OutputKind::NoTarget].iter().map(|k| records.iter().filter(|r| r.case.output_kind() == *k).count()).collect();
        let mean = counts.iter().sum::<usize>() as f64 / 3.0;
        let spread = (*counts.iter().max().unwrap_or(&0) - *counts.iter().min().unwrap_or(&0)) as f64;
        if spread > (0.1 * mean).max(3.0) {
            report.violations.push(format!("{split}: output kinds unbalanced {counts:?}"));
        }
        if split != "omni-train" {
            test_targets.push(records.iter().map(|r| r.target_image.clone()).collect());
        }
    }
    if test_targets.windows(2).any(|w| w[0] != w[1]) {
        report.violations.push("test splits do not share target scenes".into());
    }
    for s in sets.train.iter().chain(&sets.test).chain(sets.train_refs.scenes()).chain(sets.test_refs.scenes()) {
        let p = root.join(image_path(&s.id));
        if p.is_file() {
            match RgbImage::read(&p) {
                Ok(img) if img.pixels == s.pixels => {}
                _ => report.violations.push(format!("image {} does not match its scene", s.id)),
            }
        }
    }
    Ok(report)
}
