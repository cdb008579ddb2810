//! Closed-vocabulary referring expressions over scenes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Category, Color, Scene, Shape};
use super::{OutputKind, Result, SynthError};

pub const MAX_TOKENS: usize = 20;
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

const WORDS: &[&str] = &[
    "<pad>", "<unk>", "the", "all", "everything", "except", "leftmost", "rightmost", "objects", "red", "green", "blue",
    "yellow", "purple", "circle", "square", "triangle", "star", "circles", "squares", "triangles", "stars", "find",
    "segment", "show", "me", "please", "select", "a", "an", "one", "two", "three", "left", "right", "middle", "center",
    "top", "bottom", "big", "small", "large", "shape", "shapes", "object", "thing", "things", "image", "picture",
    "in", "on", "of", "that", "is", "are", "and", "but", "not", "no", "other", "others", "every",
];

/// Minimum column gap in pixels between the extreme instance and the runner-up
/// for a leftmost/rightmost expression to be generated.
pub const EXTREME_MARGIN: f64 = 4.0;

pub fn vocab() -> &'static [&'static str] {
    WORDS
}

pub fn vocab_size() -> usize {
    WORDS.len()
}

/// Lowercases, strips punctuation, maps words to ids, pads or truncates to
/// [`MAX_TOKENS`]. Unknown words become [`UNK`].
pub fn tokenize(text: &str) -> Vec<u32> {
    let mut ids: Vec<u32> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let w = w.to_lowercase();
            WORDS.iter().position(|&v| v == w).map(|i| i as u32).unwrap_or(UNK)
        })
        .take(MAX_TOKENS)
        .collect();
    ids.resize(MAX_TOKENS, PAD);
    ids
}

pub fn detokenize(ids: &[u32]) -> String {
    ids.iter()
        .filter(|&&i| i != PAD)
        .map(|&i| WORDS.get(i as usize).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Expression {
    The { category: Category },
    Extreme { category: Category, leftmost: bool },
    AllOf { category: Category },
    AllColor { color: Color },
    AllShape { shape: Shape },
    Except { category: Category },
}

impl Expression {
    pub fn render(&self) -> String {
        match *self {
            Expression::The { category } => format!("the {category}"),
            Expression::Extreme { category, leftmost } => {
                format!("the {} {category}", if leftmost { "leftmost" } else { "rightmost" })
            }
            Expression::AllOf { category } => format!("all {} {}", category.color.word(), category.shape.plural()),
            Expression::AllColor { color } => format!("all {} objects", color.word()),
            Expression::AllShape { shape } => format!("all {}", shape.plural()),
            Expression::Except { category } => format!("everything except the {category}"),
        }
    }

    /// Referent set under the generator's semantics.
    pub fn referents(&self, scene: &Scene) -> Vec<usize> {
        let n = scene.objects.len();
        let cat_of = |i: usize| scene.objects[i].category;
        match *self {
            Expression::The { category } | Expression::AllOf { category } => scene.instances_of(category),
            Expression::Extreme { category, leftmost } => {
                let inst = scene.instances_of(category);
                let key = |i: &usize| scene.objects[*i].centroid().1;
                let pick = if leftmost {
                    inst.iter().copied().min_by(|a, b| key(a).total_cmp(&key(b)))
                } else {
                    inst.iter().copied().max_by(|a, b| key(a).total_cmp(&key(b)))
                };
                pick.into_iter().collect()
            }
            Expression::AllColor { color } => (0..n).filter(|&i| cat_of(i).color == color).collect(),
            Expression::AllShape { shape } => (0..n).filter(|&i| cat_of(i).shape == shape).collect(),
            Expression::Except { category } => (0..n).filter(|&i| cat_of(i) != category).collect(),
        }
    }

    /// Categories the expression names or selects in `scene`.
    pub fn categories(&self, scene: &Scene) -> Vec<Category> {
        let mut cats: Vec<Category> = self.referents(scene).iter().map(|&i| scene.objects[i].category).collect();
        cats.sort();
        cats.dedup();
        cats
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextAnnotation {
    pub expression: Expression,
    pub text: String,
    pub tokens: Vec<u32>,
    pub referents: Vec<usize>,
}

impl TextAnnotation {
    /// Renders `expression`, sometimes behind an imperative prefix.
    pub fn new(expression: Expression, scene: &Scene, rng: &mut impl Rng) -> Self {
        let mut text = expression.render();
        match rng.gen_range(0..8) {
            0 => text = format!("find {text}"),
            1 => text = format!("segment {text}"),
            _ => {}
        }
        TextAnnotation { expression, tokens: tokenize(&text), referents: expression.referents(scene), text }
    }
}

fn extreme_ok(scene: &Scene, cat: Category) -> Vec<bool> {
    let mut xs: Vec<f64> = scene.instances_of(cat).iter().map(|&i| scene.objects[i].centroid().1).collect();
    if xs.len() < 2 {
        return vec![false, false];
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    vec![xs[1] - xs[0] >= EXTREME_MARGIN, xs[n - 1] - xs[n - 2] >= EXTREME_MARGIN]
}

/// Candidate expressions for `kind` that are satisfiable on `scene`.
pub fn candidates(scene: &Scene, kind: OutputKind, pool: &[Category]) -> Vec<Expression> {
    let cats = scene.categories();
    let mut out = Vec::new();
    match kind {
        OutputKind::Single => {
            for &c in &cats {
                if scene.count_of(c) == 1 {
                    out.push(Expression::The { category: c });
                } else {
                    let ok = extreme_ok(scene, c);
                    if ok[0] {
                        out.push(Expression::Extreme { category: c, leftmost: true });
                    }
                    if ok[1] {
                        out.push(Expression::Extreme { category: c, leftmost: false });
                    }
                }
            }
        }
        OutputKind::Multi => {
            for &c in &cats {
                if scene.count_of(c) >= 2 {
                    out.push(Expression::AllOf { category: c });
                }
                if scene.count_of(c) == 1 && scene.objects.len() >= 3 {
                    out.push(Expression::Except { category: c });
                }
            }
            for color in Color::ALL {
                let k = scene.objects.iter().filter(|o| o.category.color == color).count();
                let kinds = scene.objects.iter().filter(|o| o.category.color == color).map(|o| o.category).collect::<std::collections::BTreeSet<_>>();
                if k >= 2 && kinds.len() >= 2 {
                    out.push(Expression::AllColor { color });
                }
            }
            for shape in Shape::ALL {
                let kinds = scene.objects.iter().filter(|o| o.category.shape == shape).map(|o| o.category).collect::<std::collections::BTreeSet<_>>();
                if kinds.len() >= 2 {
                    out.push(Expression::AllShape { shape });
                }
            }
        }
        OutputKind::NoTarget => {
            for &c in pool {
                if scene.count_of(c) == 0 {
                    out.push(Expression::The { category: c });
                    out.push(Expression::AllOf { category: c });
                }
            }
            for color in Color::ALL {
                if !scene.objects.iter().any(|o| o.category.color == color) {
                    out.push(Expression::AllColor { color });
                }
            }
        }
    }
    out
}

/// Draws a random expression for the requested output kind.
///
/// Returns [`SynthError::Unsatisfiable`] when no template fits the scene.
pub fn annotate_text(scene: &Scene, kind: OutputKind, pool: &[Category], rng: &mut impl Rng) -> Result<TextAnnotation> {
    let cands = candidates(scene, kind, pool);
    let expr = *cands.choose(rng).ok_or_else(|| SynthError::Unsatisfiable(format!("no {kind:?} text for {}", scene.id)))?;
    Ok(TextAnnotation::new(expr, scene, rng))
}

/// Independent reading of a token sequence: parses the words and evaluates
/// them against the scene without going through [`Expression`].
///
/// Returns `None` for sequences outside the template grammar.
pub fn interpret(tokens: &[u32], scene: &Scene) -> Option<Vec<usize>> {
    let words: Vec<&str> = tokens.iter().filter(|&&t| t != PAD).map(|&t| WORDS.get(t as usize).copied()).collect::<Option<_>>()?;
    let mut w: &[&str] = &words;
    if matches!(w.first(), Some(&"find") | Some(&"segment")) {
        w = &w[1..];
    }
    let color = |s: &str| Color::ALL.into_iter().find(|c| c.word() == s);
    let shape_sing = |s: &str| Shape::ALL.into_iter().find(|c| c.word() == s);
    let shape_plur = |s: &str| Shape::ALL.into_iter().find(|c| c.plural() == s);
    let objs = &scene.objects;
    let matching = |f: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..objs.len()).filter(|&i| f(i)).collect() };
    match w {
        ["the", c, s] => {
            let (c, s) = (color(c)?, shape_sing(s)?);
            let hits = matching(&|i| objs[i].category.color == c && objs[i].category.shape == s);
            // A definite article over several instances is ill-formed.
            if hits.len() > 1 {
                return None;
            }
            Some(hits)
        }
        ["the", side @ ("leftmost" | "rightmost"), c, s] => {
            let (c, s) = (color(c)?, shape_sing(s)?);
            let hits = matching(&|i| objs[i].category.color == c && objs[i].category.shape == s);
            let mut best: Option<(usize, f64)> = None;
            for i in hits {
                let m = &objs[i].mask;
                let (mut sum, mut n) = (0.0, 0.0);
                for r in 0..m.height() {
                    for col in 0..m.width() {
                        if m.get(r, col) {
                            sum += col as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                }
                let x = sum / n;
                let better = match best {
                    None => true,
                    Some((_, bx)) => (*side == "leftmost" && x < bx) || (*side == "rightmost" && x > bx),
                };
                if better {
                    best = Some((i, x));
                }
            }
            Some(best.map(|b| vec![b.0]).unwrap_or_default())
        }
        ["all", c, "objects"] => {
            let c = color(c)?;
            Some(matching(&|i| objs[i].category.color == c))
        }
        ["all", s] => {
            let s = shape_plur(s)?;
            Some(matching(&|i| objs[i].category.shape == s))
        }
        ["all", c, s] => {
            let (c, s) = (color(c)?, shape_plur(s)?);
            Some(matching(&|i| objs[i].category.color == c && objs[i].category.shape == s))
        }
        ["everything", "except", "the", c, s] => {
            let (c, s) = (color(c)?, shape_sing(s)?);
            Some(matching(&|i| !(objs[i].category.color == c && objs[i].category.shape == s)))
        }
        _ => None,
    }
}
