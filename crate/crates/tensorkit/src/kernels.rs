//! Raw numeric kernels shared by forward and backward passes.
//!
//! Everything here works on plain slices; graph bookkeeping lives in
//! `graph.rs`.

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    /// Row-major `[rows, cols]` matrix, optionally read transposed.
    pub fn dense(cols_stored: usize, transposed: bool) -> Self {
        if transposed {
            Self { offset: 0, row_stride: 1, col_stride: cols_stored }
        } else {
            Self { offset: 0, row_stride: cols_stored, col_stride: 1 }
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c[m,n] = beta * c + a[m,k] · b[k,n]` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply handles k == 0 but never reads a or b; keep the
        // scaling semantics explicit.
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.last_index(m, k) < a.len(), "gemm: a view out of bounds");
    assert!(bv.last_index(k, n) < b.len(), "gemm: b view out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: c view out of bounds");
    // SAFETY: the asserts above bound every element each view touches, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// Dense product `op(a) · op(b)` accumulated into (or written to) `c`.
///
/// `a` is stored `[m,k]` (or `[k,m]` when `ta`), `b` is stored `[k,n]`
/// (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let av = MatView::dense(if ta { m } else { k }, ta);
    let bv = MatView::dense(if tb { k } else { n }, tb);
    let cv = MatView::dense(n, false);
    gemm_view(m, k, n, a, av, b, bv, if accumulate { 1.0 } else { 0.0 }, c, cv);
}

/// Output extent of a strided, padded window.
pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `[C,H,W]` image into `[C·kh·kw, Ho·Wo]` columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let npos = g.positions();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let npos = g.positions();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Four-neighbour bilinear tap at a normalized `(x, y)` location.
///
/// Coordinates follow the pixel-centre convention: `(j + 0.5) / W` lands
/// exactly on column `j`. Locations are clamped to the border, first in
/// normalized space and then in pixel space, so every tap is in range.
/// `dwx`/`dwy` are derivatives of the tap weights with respect to the
/// normalized coordinates (zero wherever clamping is active).
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dwx: [f64; 4],
    pub dwy: [f64; 4],
}

fn axis(coord: f64, size: usize) -> (usize, usize, f64, f64) {
    // Returns (lo, hi, frac, d frac / d coord).
    let max = (size - 1) as f64;
    let mut scale = size as f64;
    let c = if coord < 0.0 {
        scale = 0.0;
        0.0
    } else if coord > 1.0 {
        scale = 0.0;
        1.0
    } else {
        coord
    };
    let mut p = c * size as f64 - 0.5;
    if p <= 0.0 {
        p = 0.0;
        scale = 0.0;
    } else if p >= max {
        p = max;
        scale = 0.0;
    }
    let lo = (p.floor() as usize).min(size - 1);
    let hi = (lo + 1).min(size - 1);
    (lo, hi, p - lo as f64, scale)
}

impl BilinearTap {
    pub fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, sx) = axis(x, w);
        let (y0, y1, fy, sy) = axis(y, h);
        let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
        let wts = [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx];
        let dwx = [-(1.0 - fy) * sx, (1.0 - fy) * sx, -fy * sx, fy * sx];
        let dwy = [-(1.0 - fx) * sy, -fx * sy, (1.0 - fx) * sy, fx * sy];
        Self { idx, w: wts, dwx, dwy }
    }
}

/// Geometry of one pyramid level inside a flattened token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Level {
    pub h: usize,
    pub w: usize,
    pub start: usize,
}

/// Flattens a list of `(h, w)` level sizes into token offsets.
pub fn levels_from_sizes(sizes: &[(usize, usize)]) -> Vec<Level> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&(h, w)| {
            let l = Level { h, w, start };
            start += h * w;
            l
        })
        .collect()
}

pub(crate) struct DeformGeom<'a> {
    pub levels: &'a [Level],
    pub heads: usize,
    pub points: usize,
    pub queries: usize,
    pub dim: usize,
}

impl DeformGeom<'_> {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn taps(&self, locs: &[f64], q: usize, h: usize, l: usize, p: usize) -> (usize, BilinearTap) {
        let nl = self.levels.len();
        let slot = ((q * self.heads + h) * nl + l) * self.points + p;
        let lv = self.levels[l];
        (slot, BilinearTap::new(locs[2 * slot], locs[2 * slot + 1], lv.h, lv.w))
    }
}

/// Multi-scale deformable sampling core: attention-weighted bilinear
/// samples of per-head value channels.
pub(crate) fn deform_forward(value: &[f64], locs: &[f64], weights: &[f64], g: &DeformGeom, out: &mut [f64]) {
    let dh = g.head_dim();
    for q in 0..g.queries {
        for h in 0..g.heads {
            let o = &mut out[q * g.dim + h * dh..q * g.dim + (h + 1) * dh];
            for (l, lv) in g.levels.iter().enumerate() {
                for p in 0..g.points {
                    let (slot, tap) = g.taps(locs, q, h, l, p);
                    let a = weights[slot];
                    for t in 0..4 {
                        let coef = a * tap.w[t];
                        if coef == 0.0 {
                            continue;
                        }
                        let base = (lv.start + tap.idx[t]) * g.dim + h * dh;
                        for (oc, v) in o.iter_mut().zip(&value[base..base + dh]) {
                            *oc += coef * v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`deform_forward`] with respect to value, locations and
/// weights (each optional).
#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_backward(
    value: &[f64],
    locs: &[f64],
    weights: &[f64],
    g: &DeformGeom,
    dout: &[f64],
    mut dvalue: Option<&mut [f64]>,
    mut dlocs: Option<&mut [f64]>,
    mut dweights: Option<&mut [f64]>,
) {
    let dh = g.head_dim();
    for q in 0..g.queries {
        for h in 0..g.heads {
            let go = &dout[q * g.dim + h * dh..q * g.dim + (h + 1) * dh];
            for (l, lv) in g.levels.iter().enumerate() {
                for p in 0..g.points {
                    let (slot, tap) = g.taps(locs, q, h, l, p);
                    let a = weights[slot];
                    let mut dot_w = 0.0;
                    let mut dot_x = 0.0;
                    let mut dot_y = 0.0;
                    for t in 0..4 {
                        let base = (lv.start + tap.idx[t]) * g.dim + h * dh;
                        let vals = &value[base..base + dh];
                        let s: f64 = vals.iter().zip(go).map(|(v, d)| v * d).sum();
                        dot_w += tap.w[t] * s;
                        dot_x += tap.dwx[t] * s;
                        dot_y += tap.dwy[t] * s;
                        if let Some(dv) = dvalue.as_deref_mut() {
                            let coef = a * tap.w[t];
                            if coef != 0.0 {
                                for (x, d) in dv[base..base + dh].iter_mut().zip(go) {
                                    *x += coef * d;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dweights.as_deref_mut() {
                        dw[slot] += dot_w;
                    }
                    if let Some(dl) = dlocs.as_deref_mut() {
                        dl[2 * slot] += a * dot_x;
                        dl[2 * slot + 1] += a * dot_y;
                    }
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU and its derivative.
pub(crate) fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}
