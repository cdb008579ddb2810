//! Dense double-precision tensors with define-by-run reverse-mode
//! differentiation, plus the handful of optimizers and schedules needed to
//! train small vision-language models on a CPU.

mod graph;
pub mod gradcheck;
mod kernels;
pub mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::{levels_from_sizes, Level};
pub use optim::{adamw_step, poly_decay_lr, AdamState, AdamW};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Cross-correlation of `x: [N,C,H,W]` with `kernel: [Co,C,kh,kw]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(kernel.clone());
    let out = g.conv2d(xv, kv, None, stride, pad)?;
    Ok(g.value(out).clone())
}

/// Multi-head attention `softmax(q·kᵀ/√(d/heads))·v` per head, heads
/// concatenated and multiplied by `out_proj: [d,d]`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, out_proj: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let wo = g.constant(out_proj.clone());
    let a = g.attention(qv, kv, vv, heads, None)?;
    let out = g.matmul(a, wo)?;
    Ok(g.value(out).clone())
}

/// Bilinear sampling of `featmap: [C,H,W]` at `points: [P,2]`.
///
/// Points are `(x, y)` in `[0,1]²` with the pixel-centre convention: the
/// centre of cell `(row i, col j)` is `((j + 0.5)/W, (i + 0.5)/H)`. Points
/// outside the image are clamped to the border.
pub fn bilinear_sample(featmap: &Tensor, points: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(featmap.clone());
    let p = g.constant(points.clone());
    let out = g.bilinear_sample(f, p)?;
    Ok(g.value(out).clone())
}
