//! Binary masks, their run-length form, and the geometry used to turn an
//! instance mask into box and scribble prompts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions {0}x{1} vs {2}x{3}")]
    Dimension(usize, usize, usize, usize),
    #[error("mask has no foreground pixels")]
    EmptyRegion,
    #[error("malformed run-length mask: {0}")]
    Format(String),
    #[error("box {0:?} outside {1}x{2} image")]
    Bounds(BoxRegion, usize, usize),
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// H×W grid of booleans stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        let mut m = Self::empty(height, width);
        m.bits.fill(true);
        m
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(MaskError::Format(format!("{} bits for {height}x{width}", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for r in 0..height {
            for c in 0..width {
                m.bits[r * width + c] = f(r, c);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixels as `(row, col)` in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(MaskError::Dimension(self.height, self.width, other.height, other.width));
        }
        Ok(())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(Self { bits, ..*self })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(Self { bits, ..*self })
    }

    /// Pixels of `self` not in `other`.
    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect();
        Ok(Self { bits, ..*self })
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count())
    }

    /// Mask as 0/1 doubles, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let fg = self.foreground();
        if fg.is_empty() {
            return None;
        }
        let n = fg.len() as f64;
        let r = fg.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let c = fg.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        Some((r, c))
    }
}

/// Run-length form: alternating background/foreground runs over pixels in
/// column-major order, always starting with a (possibly empty) background
/// run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    pub runs: Vec<u32>,
}

pub fn rle_encode(m: &BinaryMask) -> RleMask {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for c in 0..m.width {
        for r in 0..m.height {
            let b = m.get(r, c);
            if b != current {
                runs.push(len);
                current = b;
                len = 0;
            }
            len += 1;
        }
    }
    runs.push(len);
    RleMask { height: m.height, width: m.width, runs }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    let total: u64 = rle.runs.iter().map(|&r| r as u64).sum();
    let want = (rle.height * rle.width) as u64;
    if rle.height == 0 || rle.width == 0 || total != want {
        return Err(MaskError::Format(format!("runs sum to {total}, expected {want}")));
    }
    let mut m = BinaryMask::empty(rle.height, rle.width);
    let mut pos = 0usize;
    for (i, &run) in rle.runs.iter().enumerate() {
        let fg = i % 2 == 1;
        for p in pos..pos + run as usize {
            if fg {
                let (c, r) = (p / rle.height, p % rle.height);
                m.set(r, c, true);
            }
        }
        pos += run as usize;
    }
    Ok(m)
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoxRegion {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        Self { row_min, col_min, row_max, col_max }
    }
}

/// Tightest axis-aligned rectangle around the foreground.
pub fn box_from_mask(m: &BinaryMask) -> Result<BoxRegion> {
    let mut b: Option<BoxRegion> = None;
    for (r, c) in m.foreground() {
        let bb = b.get_or_insert(BoxRegion::new(r, c, r, c));
        bb.row_min = bb.row_min.min(r);
        bb.row_max = bb.row_max.max(r);
        bb.col_min = bb.col_min.min(c);
        bb.col_max = bb.col_max.max(c);
    }
    b.ok_or(MaskError::EmptyRegion)
}

pub fn rasterize_box(b: BoxRegion, height: usize, width: usize) -> Result<BinaryMask> {
    if b.row_min > b.row_max || b.col_min > b.col_max || b.row_max >= height || b.col_max >= width {
        return Err(MaskError::Bounds(b, height, width));
    }
    Ok(BinaryMask::from_fn(height, width, |r, c| {
        (b.row_min..=b.row_max).contains(&r) && (b.col_min..=b.col_max).contains(&c)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScribbleStyle {
    Lines,
    Dots,
}

/// Minimum and maximum fraction of the instance a scribble may cover.
pub const SCRIBBLE_COVERAGE: (f64, f64) = (0.02, 0.40);

/// Offsets painted by the 2-px brush around an anchor pixel.
const BRUSH: [(isize, isize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

struct Painter<'a> {
    region: &'a BinaryMask,
    out: BinaryMask,
    order: Vec<(usize, usize)>,
}

impl Painter<'_> {
    fn brush(&mut self, r: isize, c: isize) -> usize {
        let mut added = 0;
        for (dr, dc) in BRUSH {
            let (rr, cc) = (r + dr, c + dc);
            if rr < 0 || cc < 0 || rr as usize >= self.region.height || cc as usize >= self.region.width {
                continue;
            }
            let (rr, cc) = (rr as usize, cc as usize);
            if self.region.get(rr, cc) && !self.out.get(rr, cc) {
                self.out.set(rr, cc, true);
                self.order.push((rr, cc));
                added += 1;
            }
        }
        added
    }
}

/// Draws a random scribble inside `m`.
///
/// Lines style: 1-3 random-walk strokes through interior pixels with a 2-px
/// brush, sometimes followed by a dot. Dots style: 2-px dots at random
/// interior pixels. The result is clipped to `m` and trimmed or extended so
/// that it covers between 2% and 40% of `m`. Masks under 4 pixels get a
/// single-pixel dot.
pub fn scribble_from_mask(m: &BinaryMask, seed: u64, style: ScribbleStyle) -> Result<BinaryMask> {
    let fg = m.foreground();
    if fg.is_empty() {
        return Err(MaskError::EmptyRegion);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut painter = Painter { region: m, out: BinaryMask::empty(m.height, m.width), order: Vec::new() };
    if fg.len() < 4 {
        let (r, c) = fg[rng.gen_range(0..fg.len())];
        painter.out.set(r, c, true);
        return Ok(painter.out);
    }
    let interior: Vec<(usize, usize)> = fg
        .iter()
        .copied()
        .filter(|&(r, c)| {
            r > 0 && c > 0 && r + 1 < m.height && c + 1 < m.width
                && m.get(r - 1, c) && m.get(r + 1, c) && m.get(r, c - 1) && m.get(r, c + 1)
        })
        .collect();
    let seeds = if interior.is_empty() { &fg } else { &interior };
    let n = fg.len() as f64;
    let lo = (SCRIBBLE_COVERAGE.0 * n).ceil() as usize;
    let hi = (SCRIBBLE_COVERAGE.1 * n).floor() as usize;
    let target = ((n * rng.gen_range(0.06..0.25)).round() as usize).clamp(lo.max(1), hi.max(1));

    match style {
        ScribbleStyle::Lines => {
            let strokes = rng.gen_range(1..=3);
            let budget = (target / strokes).max(1);
            for _ in 0..strokes {
                let (r0, c0) = seeds[rng.gen_range(0..seeds.len())];
                let (mut y, mut x) = (r0 as f64, c0 as f64);
                let mut theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut painted = 0;
                for _ in 0..(4 * budget + 20) {
                    painted += painter.brush(y.round() as isize, x.round() as isize);
                    if painted >= budget {
                        break;
                    }
                    theta += rng.gen_range(-0.4..0.4);
                    let mut moved = false;
                    for _ in 0..8 {
                        let (ny, nx) = (y + theta.sin(), x + theta.cos());
                        let (ri, ci) = (ny.round(), nx.round());
                        if ri >= 0.0
                            && ci >= 0.0
                            && (ri as usize) < m.height
                            && (ci as usize) < m.width
                            && m.get(ri as usize, ci as usize)
                        {
                            y = ny;
                            x = nx;
                            moved = true;
                            break;
                        }
                        theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    }
                    if !moved {
                        break;
                    }
                }
            }
            if rng.gen_bool(0.3) {
                let (r, c) = seeds[rng.gen_range(0..seeds.len())];
                painter.brush(r as isize, c as isize);
            }
        }
        ScribbleStyle::Dots => {
            for _ in 0..(4 * target + 8) {
                if painter.order.len() >= target {
                    break;
                }
                let (r, c) = seeds[rng.gen_range(0..seeds.len())];
                painter.brush(r as isize, c as isize);
            }
        }
    }

    while painter.order.len() > hi {
        let (r, c) = painter.order.pop().expect("non-empty");
        painter.out.set(r, c, false);
    }
    while painter.order.len() < lo {
        let (r, c) = fg[rng.gen_range(0..fg.len())];
        if !painter.out.get(r, c) {
            painter.out.set(r, c, true);
            painter.order.push((r, c));
        }
    }
    Ok(painter.out)
}

/// Rasterizes polylines given as `(x, y)` image coordinates with the same
/// 2-px brush the scribble generator uses. A single-point polyline is a dot.
pub fn rasterize_strokes(strokes: &[Vec<(f64, f64)>], height: usize, width: usize) -> BinaryMask {
    let full = BinaryMask::full(height, width);
    let mut painter = Painter { region: &full, out: BinaryMask::empty(height, width), order: Vec::new() };
    for line in strokes {
        if let [(x, y)] = line[..] {
            painter.brush(y.floor() as isize, x.floor() as isize);
        }
        for seg in line.windows(2) {
            let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
            let steps = (((x1 - x0).abs().max((y1 - y0).abs())) * 2.0).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                painter.brush((y0 + t * (y1 - y0)).floor() as isize, (x0 + t * (x1 - x0)).floor() as isize);
            }
        }
    }
    painter.out
}

/// `|a∧b| / |a∨b|`, with two empty masks scoring 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.union_count(b)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Dense grid of values in [0,1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    BilinearSoft,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Resized {
    Binary(BinaryMask),
    Soft(SoftGrid),
}

pub fn resize_mask(m: &BinaryMask, height: usize, width: usize, mode: ResizeMode) -> Resized {
    match mode {
        ResizeMode::Nearest => Resized::Binary(resize_nearest(m, height, width)),
        ResizeMode::BilinearSoft => Resized::Soft(resize_soft(m, height, width)),
    }
}

/// Nearest-neighbour resize; output pixel `i` reads source `floor(i·H/H')`.
pub fn resize_nearest(m: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    BinaryMask::from_fn(height, width, |r, c| m.get(r * m.height / height, c * m.width / width))
}

/// Downsampling where an output pixel is set if any pixel of its source
/// block is set.
pub fn resize_any(m: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if height > m.height || width > m.width {
        return resize_nearest(m, height, width);
    }
    let mut out = BinaryMask::empty(height, width);
    for (r, c) in m.foreground() {
        out.set(r * height / m.height, c * width / m.width, true);
    }
    out
}

/// One bilinear resampling step (half-pixel centres, border clamped).
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coords = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let lo = (s.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = coords(oh, h);
    let xs = coords(ow, w);
    let mut out = vec![0.0; oh * ow];
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out[i * ow + j] = (1.0 - fy) * top + fy * bot;
        }
    }
    out
}

/// Soft bilinear resize. Large downscales proceed by repeated exact halving
/// (each halving averages 2×2 blocks) before a final bilinear step, so the
/// result reflects region coverage rather than a few point samples.
pub fn resize_soft(m: &BinaryMask, height: usize, width: usize) -> SoftGrid {
    let (mut h, mut w) = (m.height, m.width);
    let mut vals = m.to_f64();
    while h % 2 == 0 && w % 2 == 0 && h >= 2 * height && w >= 2 * width {
        vals = bilinear_resize(&vals, h, w, h / 2, w / 2);
        h /= 2;
        w /= 2;
    }
    if (h, w) != (height, width) {
        vals = bilinear_resize(&vals, h, w, height, width);
    }
    SoftGrid { height, width, values: vals }
}
