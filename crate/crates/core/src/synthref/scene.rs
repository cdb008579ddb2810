use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SynthError, Result};
use crate::maskgeo::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
            Shape::Star => "stars",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 50, 50],
            Color::Green => [50, 190, 70],
            Color::Blue => [60, 90, 230],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [160, 70, 200],
        }
    }
}

/// Object category: a (shape, color) pair. There are 20 of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Category {
    pub shape: Shape,
    pub color: Color,
}

impl Category {
    pub fn all() -> Vec<Category> {
        Color::ALL
            .iter()
            .flat_map(|&color| Shape::ALL.iter().map(move |&shape| Category { shape, color }))
            .collect()
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionClass {
    Left,
    Center,
    Right,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub category: Category,
    pub mask: BinaryMask,
    pub size_class: SizeClass,
    pub position_class: PositionClass,
}

impl SceneObject {
    /// Centroid as `(row, col)`.
    pub fn centroid(&self) -> (f64, f64) {
        self.mask.centroid().expect("object masks are non-empty")
    }
}

/// Rendered RGB image with the exact silhouettes of its objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn instances_of(&self, cat: Category) -> Vec<usize> {
        (0..self.objects.len()).filter(|&i| self.objects[i].category == cat).collect()
    }

    pub fn count_of(&self, cat: Category) -> usize {
        self.objects.iter().filter(|o| o.category == cat).count()
    }

    /// Distinct categories in first-appearance order.
    pub fn categories(&self) -> Vec<Category> {
        let mut out: Vec<Category> = Vec::new();
        for o in &self.objects {
            if !out.contains(&o.category) {
                out.push(o.category);
            }
        }
        out
    }

    pub fn union_mask(&self, instances: &[usize]) -> BinaryMask {
        let mut m = BinaryMask::empty(self.height, self.width);
        for &i in instances {
            m = m.union(&self.objects[i].mask).expect("scene masks share dimensions");
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of objects to attempt.
    pub n_objects: (usize, usize),
    /// Inclusive range of object radii in pixels.
    pub radius: (f64, f64),
    /// Probability that a new object repeats a category already placed.
    pub repeat_prob: f64,
    pub min_centroid_dist: f64,
    pub max_retries: usize,
    pub categories: Vec<Category>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_objects: (2, 6),
            radius: (5.0, 9.5),
            repeat_prob: 0.5,
            min_centroid_dist: 8.0,
            max_retries: 200,
            categories: Category::all(),
        }
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Rasterizes one shape at pixel centres.
pub fn shape_mask(shape: Shape, cx: f64, cy: f64, r: f64, height: usize, width: usize) -> BinaryMask {
    let star: Vec<(f64, f64)> = (0..10)
        .map(|k| {
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
            let rr = if k % 2 == 0 { r * 1.1 } else { r * 0.5 };
            (cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect();
    let tri = [(cx, cy - r), (cx + 0.95 * r, cy + 0.7 * r), (cx - 0.95 * r, cy + 0.7 * r)];
    BinaryMask::from_fn(height, width, |row, col| {
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        let (dx, dy) = (x - cx, y - cy);
        match shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => point_in_polygon(x, y, &tri),
            Shape::Star => point_in_polygon(x, y, &star),
        }
    })
}

fn dilate(m: &BinaryMask) -> BinaryMask {
    let (h, w) = (m.height(), m.width());
    BinaryMask::from_fn(h, w, |r, c| {
        (r.saturating_sub(1)..=(r + 1).min(h - 1)).any(|rr| (c.saturating_sub(1)..=(c + 1).min(w - 1)).any(|cc| m.get(rr, cc)))
    })
}

/// Renders a random scene of non-overlapping colored shapes.
///
/// Deterministic in `seed`. Objects that cannot be placed within
/// `max_retries` attempts are dropped; a scene with no object is an error.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    if cfg.n_objects.0 == 0 || cfg.n_objects.0 > cfg.n_objects.1 || cfg.categories.is_empty() {
        return Err(SynthError::Config("n_objects range must start at 1 and be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let want = rng.gen_range(cfg.n_objects.0..=cfg.n_objects.1);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut occupied = BinaryMask::empty(h, w);
    let mut centroids: Vec<(f64, f64)> = Vec::new();
    for _ in 0..want {
        let category = if !objects.is_empty() && rng.gen_bool(cfg.repeat_prob) {
            objects[rng.gen_range(0..objects.len())].category
        } else {
            cfg.categories[rng.gen_range(0..cfg.categories.len())]
        };
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let r = rng.gen_range(cfg.radius.0..=cfg.radius.1);
            let margin = r * 1.15 + 1.0;
            if 2.0 * margin >= w.min(h) as f64 {
                break;
            }
            let cx = rng.gen_range(margin..w as f64 - margin);
            let cy = rng.gen_range(margin..h as f64 - margin);
            let mask = shape_mask(category.shape, cx, cy, r, h, w);
            let Some(cen) = mask.centroid() else { continue };
            if centroids.iter().any(|&(y, x)| ((y - cen.0).powi(2) + (x - cen.1).powi(2)).sqrt() < cfg.min_centroid_dist) {
                continue;
            }
            if dilate(&mask).intersection_count(&occupied).expect("same dims") > 0 {
                continue;
            }
            placed = Some((mask, r, cen));
            break;
        }
        let Some((mask, r, cen)) = placed else { break };
        occupied = occupied.union(&mask).expect("same dims");
        centroids.push(cen);
        let size_class = if r < 6.5 {
            SizeClass::Small
        } else if r < 8.0 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        };
        let position_class = if cen.1 < w as f64 / 3.0 {
            PositionClass::Left
        } else if cen.1 < 2.0 * w as f64 / 3.0 {
            PositionClass::Center
        } else {
            PositionClass::Right
        };
        objects.push(SceneObject { category, mask, size_class, position_class });
    }
    if objects.is_empty() {
        return Err(SynthError::Placement(seed));
    }

    let bg: [i32; 3] = [rng.gen_range(30..60), rng.gen_range(30..60), rng.gen_range(30..60)];
    let mut pixels = vec![0u8; h * w * 3];
    for (i, px) in pixels.chunks_mut(3).enumerate() {
        let _ = i;
        for ch in 0..3 {
            px[ch] = (bg[ch] + rng.gen_range(-6..=6)).clamp(0, 255) as u8;
        }
    }
    for o in &objects {
        let base = o.category.color.rgb();
        let jitter: [i32; 3] = [rng.gen_range(-15..=15), rng.gen_range(-15..=15), rng.gen_range(-15..=15)];
        for (r, c) in o.mask.foreground() {
            for ch in 0..3 {
                let v = base[ch] as i32 + jitter[ch] + rng.gen_range(-4..=4);
                pixels[(r * w + c) * 3 + ch] = v.clamp(0, 255) as u8;
            }
        }
    }
    Ok(Scene { id: format!("s{seed:08}"), height: h, width: w, pixels, objects })
}

/// Keeps scenes with at least three instances and two distinct categories.
pub fn select_targets(scenes: &[Scene]) -> Vec<usize> {
    (0..scenes.len()).filter(|&i| is_selectable(&scenes[i])).collect()
}

pub fn is_selectable(s: &Scene) -> bool {
    s.objects.len() >= 3 && s.categories().len() >= 2
}
