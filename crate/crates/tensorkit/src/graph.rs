use crate::kernels::{self, ConvGeom, DeformGeom, Level};
use crate::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize },
    ResizeNearest(Var),
    BilinearSample { feat: Var, points: Var },
    Deform { value: Var, locs: Var, weights: Var, levels: Vec<Level>, heads: usize, points: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    BceLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run record of differentiable operations.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the backward sweep. A graph is built for one
/// forward pass and dropped afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("{op:?}").chars().take(40).collect()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        let mut value = t;
        let _ = value.set_grad(None);
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// The leaf as a tensor with its `grad` field populated.
    pub fn leaf_with_grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone();
        t.set_requires_grad(node.needs_grad);
        t.set_grad(node.grad.clone()).expect("grad shape");
        t
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- forward operations -------------------------------------------

    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` read the stored matrix
    /// transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return dim_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[d]` (or `[1,d]`) row to every row of a `[n,d]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, d) = self.value(a).dims2()?;
        if self.value(row).numel() != d {
            return dim_err(format!("add_row: row of {} for width {d}", self.value(row).numel()));
        }
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let data = va.data().chunks(d).flat_map(|c| c.iter().zip(&r).map(|(x, y)| x + y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, Op::AddRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| x * c).collect())?;
        self.push(t, Op::Scale(a, c), &[a])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect())?;
        self.push(t, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), |x| kernels::gelu(x).0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        self.push(t, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), &[a])
    }

    /// Row-wise softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.value(a).dims2()?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row, None);
        }
        let t = Tensor::new(self.shape(a), out)?;
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    /// Layer normalization over the last axis of `[n,d]` with affine `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return dim_err("layer_norm: affine width mismatch");
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    fn conv_geom(&self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (co, ck, kh, kw) = self.value(kernel).dims4()?;
        if c != ck {
            return dim_err(format!("conv2d: input has {c} channels, kernel expects {ck}"));
        }
        let ho = kernels::conv_out(h, kh, stride, pad);
        let wo = kernels::conv_out(w, kw, stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((n, co, ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo })),
            _ => dim_err(format!("conv2d: kernel {kh}x{kw} larger than padded {h}x{w} (pad {pad})")),
        }
    }

    /// Cross-correlation of `[N,C,H,W]` with `[Co,C,kh,kw]`, plus optional
    /// per-channel bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, co, g) = self.conv_geom(x, kernel, stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).numel() != co {
                return dim_err("conv2d: bias length mismatch");
            }
        }
        let (k, npos) = (g.patch_len(), g.positions());
        let xs = self.value(x).data();
        let ws = self.value(kernel).data();
        let mut out = vec![0.0; n * co * npos];
        let mut cols = vec![0.0; k * npos];
        let img = g.c * g.h * g.w;
        for i in 0..n {
            kernels::im2col(&xs[i * img..(i + 1) * img], &g, &mut cols);
            kernels::gemm(co, k, npos, ws, false, &cols, false, &mut out[i * co * npos..(i + 1) * co * npos], false);
        }
        if let Some(b) = bias {
            let bs = self.value(b).data();
            for chunk in out.chunks_mut(npos).enumerate() {
                let ch = chunk.0 % co;
                chunk.1.iter_mut().for_each(|v| *v += bs[ch]);
            }
        }
        let t = Tensor::new(&[n, co, g.ho, g.wo], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(t, Op::Conv2d { x, kernel, bias, stride, pad }, &inputs)
    }

    /// Nearest-neighbour resize of `[C,H,W]` to `[C,oh,ow]`
    /// (source index `floor(i · H / oh)`).
    pub fn resize_nearest(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let sy = y * h / oh;
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = src[(ch * h + sy) * w + x * w / ow];
                }
            }
        }
        self.push(Tensor::new(&[c, oh, ow], out)?, Op::ResizeNearest(a), &[a])
    }

    /// Samples `[C,H,W]` at `[P,2]` normalized `(x, y)` points, giving
    /// `[P,C]`. See [`crate::bilinear_sample`] for the coordinate convention.
    pub fn bilinear_sample(&mut self, feat: Var, points: Var) -> Result<Var> {
        let (c, h, w) = self.value(feat).dims3()?;
        let (p, two) = self.value(points).dims2()?;
        if two != 2 {
            return dim_err("bilinear_sample: points must be [P,2]");
        }
        let fs = self.value(feat).data();
        let ps = self.value(points).data();
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let tap = kernels::BilinearTap::new(ps[2 * i], ps[2 * i + 1], h, w);
            for ch in 0..c {
                let plane = &fs[ch * h * w..(ch + 1) * h * w];
                out[i * c + ch] = (0..4).map(|t| tap.w[t] * plane[tap.idx[t]]).sum();
            }
        }
        self.push(Tensor::new(&[p, c], out)?, Op::BilinearSample { feat, points }, &[feat, points])
    }

    /// Multi-scale deformable sampling core.
    ///
    /// `value` is `[T,d]` with tokens laid out level by level as described
    /// by `levels`; `locs` is `[n, heads·L·points·2]` normalized `(x, y)`
    /// sampling locations and `weights` is `[n, heads·L·points]`. Output row
    /// `q`, head `h` is `Σ_{l,p} weights · bilinear(value_h at level l, loc)`.
    pub fn deform_sample(
        &mut self,
        value: Var,
        levels: &[Level],
        heads: usize,
        points: usize,
        locs: Var,
        weights: Var,
    ) -> Result<Var> {
        let (t, d) = self.value(value).dims2()?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let total: usize = levels.iter().map(|l| l.h * l.w).sum();
        if total != t || levels.iter().enumerate().any(|(i, l)| l.start != levels[..i].iter().map(|l| l.h * l.w).sum()) {
            return dim_err(format!("deform_sample: levels cover {total} tokens, value has {t}"));
        }
        let slots = heads * levels.len() * points;
        let (n, lw) = self.value(weights).dims2()?;
        let (n2, ll) = self.value(locs).dims2()?;
        if lw != slots || ll != 2 * slots || n != n2 {
            return dim_err(format!("deform_sample: expected [n,{slots}] weights and [n,{}] locs", 2 * slots));
        }
        if !self.value(locs).is_finite() {
            return Err(TensorError::NonFinite("deformable sampling locations".into()));
        }
        let geom = DeformGeom { levels, heads, points, queries: n, dim: d };
        let mut out = vec![0.0; n * d];
        kernels::deform_forward(
            self.value(value).data(),
            self.value(locs).data(),
            self.value(weights).data(),
            &geom,
            &mut out,
        );
        let op = Op::Deform { value, locs, weights, levels: levels.to_vec(), heads, points };
        self.push(Tensor::new(&[n, d], out)?, op, &[value, locs, weights])
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// Per head `h`: `softmax(q_h · k_hᵀ / sqrt(d/heads)) · v_h`, heads
    /// concatenated along the feature axis. `keep[j] == false` removes key
    /// `j` from every softmax (its weight is exactly zero).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, keep: Option<&[bool]>) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        let (m, dk) = self.value(k).dims2()?;
        let (mv, dv) = self.value(v).dims2()?;
        if dk != d || dv != d || mv != m {
            return dim_err(format!("attention: q [{n},{d}] k [{m},{dk}] v [{mv},{dv}]"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(kp) = keep {
            if kp.len() != m {
                return dim_err("attention: key mask length mismatch");
            }
            if !kp.iter().any(|&b| b) {
                return Err(TensorError::Usage("attention: every key is masked".into()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            let head = kernels::MatView { offset: h * dh, row_stride: d, col_stride: 1 };
            // scores = q_h · k_hᵀ
            kernels::gemm_view(
                n,
                dh,
                m,
                qs,
                head,
                ks,
                kernels::MatView { offset: h * dh, row_stride: 1, col_stride: d },
                0.0,
                p,
                kernels::MatView::dense(m, false),
            );
            for row in p.chunks_mut(m) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row, keep);
            }
            kernels::gemm_view(n, m, dh, p, kernels::MatView::dense(m, false), vs, head, 0.0, &mut out, head);
        }
        let op = Op::Attention { q, k, v, heads, probs };
        self.push(Tensor::new(&[n, d], out)?, op, &[q, k, v])
    }

    /// Stacks 2-D tensors of equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_rows: no inputs");
        }
        let (_, d) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != d {
                return dim_err("concat_rows: width mismatch");
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(&[rows, d], data)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row lookup into a `[V,d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Usage(format!("gather: id {bad} outside table of {vocab}")));
        }
        let src = self.value(table).data();
        let data = ids.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        self.push(Tensor::new(&[ids.len(), d], data)?, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Column means of `[n,d]`, shaped `[1,d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let mut out = vec![0.0; d];
        for row in self.value(a).data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v / n as f64);
        }
        self.push(Tensor::new(&[1, d], out)?, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy between logits and (soft) targets in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let xs = self.value(logits).data();
        if xs.len() != targets.len() {
            return dim_err(format!("bce: {} logits vs {} targets", xs.len(), targets.len()));
        }
        let n = xs.len() as f64;
        let loss = xs
            .iter()
            .zip(targets)
            .map(|(&x, &t)| kernels::softplus(x) - x * t)
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::BceLogits { logits, targets: targets.to_vec() }, &[logits])
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Propagates `∂loss/∂·` to every leaf that requires a gradient.
    ///
    /// Interior gradients are released as soon as they are consumed; only
    /// leaf gradients remain readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = self.nodes[id].grad.take() else { continue };
            let contributions = self.local_grads(id, &gout)?;
            for (input, g) in contributions {
                if self.nodes[input.0].needs_grad {
                    add_into(&mut self.nodes[input.0].grad, &g);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, id: usize, gout: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, n) = node.value.dims2()?;
                let (ar, ac) = self.value(a).dims2()?;
                let k = if ta { ar } else { ac };
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    if ta {
                        // stored [k,m] = op(B) · dCᵀ
                        kernels::gemm(k, n, m, val(b), tb, gout, true, &mut ga, false);
                    } else {
                        kernels::gemm(m, n, k, gout, false, val(b), !tb, &mut ga, false);
                    }
                    res.push((a, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    if tb {
                        // stored [n,k] = dCᵀ · op(A)
                        kernels::gemm(n, m, k, gout, true, val(a), ta, &mut gb, false);
                    } else {
                        kernels::gemm(k, m, n, val(a), !ta, gout, false, &mut gb, false);
                    }
                    res.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                res.push((a, gout.to_vec()));
                res.push((b, gout.to_vec()));
            }
            &Op::Sub(a, b) => {
                res.push((a, gout.to_vec()));
                res.push((b, gout.iter().map(|g| -g).collect()));
            }
            &Op::Mul(a, b) => {
                res.push((a, gout.iter().zip(val(b)).map(|(g, y)| g * y).collect()));
                res.push((b, gout.iter().zip(val(a)).map(|(g, x)| g * x).collect()));
            }
            &Op::AddRow { a, row } => {
                let d = self.value(row).numel();
                res.push((a, gout.to_vec()));
                if self.wants(row) {
                    let mut gr = vec![0.0; d];
                    for c in gout.chunks(d) {
                        gr.iter_mut().zip(c).for_each(|(s, g)| *s += g);
                    }
                    res.push((row, gr));
                }
            }
            &Op::Scale(a, c) => res.push((a, gout.iter().map(|g| g * c).collect())),
            &Op::Relu(a) => {
                res.push((a, gout.iter().zip(val(a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()))
            }
            &Op::Gelu(a) => res.push((a, gout.iter().zip(val(a)).map(|(g, x)| g * kernels::gelu(*x).1).collect())),
            &Op::Sigmoid(a) => {
                res.push((a, gout.iter().zip(node.value.data()).map(|(g, s)| g * s * (1.0 - s)).collect()))
            }
            &Op::Reshape(a) => res.push((a, gout.to_vec())),
            &Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = gout[j * r + i];
                    }
                }
                res.push((a, ga));
            }
            &Op::SoftmaxRows(a) => {
                let (_, c) = node.value.dims2()?;
                let mut ga = vec![0.0; gout.len()];
                for ((gr, pr), dst) in gout.chunks(c).zip(node.value.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    softmax_backward(pr, gr, dst);
                }
                res.push((a, ga));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, d) = node.value.dims2()?;
                let g = val(*gamma);
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * d];
                    for i in 0..n {
                        let go = &gout[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let dxh: Vec<f64> = go.iter().zip(g).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] = rstd[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    res.push((*x, gx));
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += gout[i * d + j] * xhat[i * d + j];
                            gb[j] += gout[i * d + j];
                        }
                    }
                    res.push((*gamma, gg));
                    res.push((*beta, gb));
                }
            }
            &Op::Conv2d { x, kernel, bias, stride, pad } => {
                let (n, co, g) = self.conv_geom(x, kernel, stride, pad)?;
                let (k, npos) = (g.patch_len(), g.positions());
                let img = g.c * g.h * g.w;
                let xs = val(x);
                let ws = val(kernel);
                let mut gx = self.wants(x).then(|| vec![0.0; xs.len()]);
                let mut gw = self.wants(kernel).then(|| vec![0.0; ws.len()]);
                let mut cols = vec![0.0; k * npos];
                for i in 0..n {
                    let go = &gout[i * co * npos..(i + 1) * co * npos];
                    if let Some(gw) = gw.as_mut() {
                        kernels::im2col(&xs[i * img..(i + 1) * img], &g, &mut cols);
                        kernels::gemm(co, npos, k, go, false, &cols, true, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        kernels::gemm(k, co, npos, ws, true, go, false, &mut cols, false);
                        kernels::col2im(&cols, &g, &mut gx[i * img..(i + 1) * img]);
                    }
                }
                if let Some(gx) = gx {
                    res.push((x, gx));
                }
                if let Some(gw) = gw {
                    res.push((kernel, gw));
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; co];
                    for (idx, chunk) in gout.chunks(npos).enumerate() {
                        gb[idx % co] += chunk.iter().sum::<f64>();
                    }
                    res.push((b, gb));
                }
            }
            &Op::ResizeNearest(a) => {
                let (c, h, w) = self.value(a).dims3()?;
                let (_, oh, ow) = node.value.dims3()?;
                let mut ga = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        let sy = y * h / oh;
                        for x in 0..ow {
                            ga[(ch * h + sy) * w + x * w / ow] += gout[(ch * oh + y) * ow + x];
                        }
                    }
                }
                res.push((a, ga));
            }
            &Op::BilinearSample { feat, points } => {
                let (c, h, w) = self.value(feat).dims3()?;
                let (p, _) = self.value(points).dims2()?;
                let fs = val(feat);
                let ps = val(points);
                let mut gf = vec![0.0; fs.len()];
                let mut gp = vec![0.0; ps.len()];
                for i in 0..p {
                    let tap = kernels::BilinearTap::new(ps[2 * i], ps[2 * i + 1], h, w);
                    for ch in 0..c {
                        let go = gout[i * c + ch];
                        let plane = ch * h * w;
                        for t in 0..4 {
                            gf[plane + tap.idx[t]] += tap.w[t] * go;
                            gp[2 * i] += tap.dwx[t] * fs[plane + tap.idx[t]] * go;
                            gp[2 * i + 1] += tap.dwy[t] * fs[plane + tap.idx[t]] * go;
                        }
                    }
                }
                res.push((feat, gf));
                res.push((points, gp));
            }
            Op::Deform { value, locs, weights, levels, heads, points } => {
                let (n, d) = node.value.dims2()?;
                let geom = DeformGeom { levels, heads: *heads, points: *points, queries: n, dim: d };
                let mut gv = self.wants(*value).then(|| vec![0.0; val(*value).len()]);
                let mut gl = self.wants(*locs).then(|| vec![0.0; val(*locs).len()]);
                let mut gw = self.wants(*weights).then(|| vec![0.0; val(*weights).len()]);
                kernels::deform_backward(
                    val(*value),
                    val(*locs),
                    val(*weights),
                    &geom,
                    gout,
                    gv.as_deref_mut(),
                    gl.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                res.extend(gv.map(|g| (*value, g)));
                res.extend(gl.map(|g| (*locs, g)));
                res.extend(gw.map(|g| (*weights, g)));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, d) = node.value.dims2()?;
                let (m, _) = self.value(*k).dims2()?;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; m * d];
                let mut gv = vec![0.0; m * d];
                let mut dp = vec![0.0; n * m];
                let dense_nm = kernels::MatView::dense(m, false);
                let col = |h: usize| kernels::MatView { offset: h * dh, row_stride: d, col_stride: 1 };
                let col_t = |h: usize| kernels::MatView { offset: h * dh, row_stride: 1, col_stride: d };
                for h in 0..*heads {
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    // dV_h = Pᵀ · dO_h
                    kernels::gemm_view(m, n, dh, p, kernels::MatView::dense(m, true), gout, col(h), 1.0, &mut gv, col(h));
                    // dP = dO_h · V_hᵀ
                    kernels::gemm_view(n, dh, m, gout, col(h), vs, col_t(h), 0.0, &mut dp, dense_nm);
                    for (pr, dr) in p.chunks(m).zip(dp.chunks_mut(m)) {
                        let g = dr.to_vec();
                        softmax_backward(pr, &g, dr);
                        dr.iter_mut().for_each(|x| *x *= scale);
                    }
                    // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
                    kernels::gemm_view(n, m, dh, &dp, dense_nm, ks, col(h), 1.0, &mut gq, col(h));
                    kernels::gemm_view(m, n, dh, &dp, kernels::MatView::dense(m, true), qs, col(h), 1.0, &mut gk, col(h));
                }
                res.push((*q, gq));
                res.push((*k, gk));
                res.push((*v, gv));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    res.push((p, gout[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let (_, d) = self.value(*table).dims2()?;
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (row, &i) in ids.iter().enumerate() {
                    gt[i * d..(i + 1) * d].iter_mut().zip(&gout[row * d..(row + 1) * d]).for_each(|(a, b)| *a += b);
                }
                res.push((*table, gt));
            }
            &Op::MeanRows(a) => {
                let (n, _) = self.value(a).dims2()?;
                let ga = (0..n).flat_map(|_| gout.iter().map(move |g| g / n as f64)).collect();
                res.push((a, ga));
            }
            &Op::Sum(a) => res.push((a, vec![gout[0]; self.value(a).numel()])),
            Op::BceLogits { logits, targets } => {
                let n = targets.len() as f64;
                let ga = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| gout[0] * (kernels::sigmoid(x) - t) / n)
                    .collect();
                res.push((*logits, ga));
            }
        }
        Ok(res)
    }
}

/// Stable softmax of one row; masked entries get exactly zero.
fn softmax_in_place(row: &mut [f64], keep: Option<&[bool]>) {
    let allowed = |j: usize| keep.map_or(true, |k| k[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, pi), gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - dot);
    }
}
