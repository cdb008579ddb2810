//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Result, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed elementwise relative error.
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are judged absolutely.
    pub abs_floor: f64,
    /// Entries checked per input tensor (`None` checks every entry).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, abs_floor: 1e-5, max_entries: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    /// `(input index, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every input that requires a gradient.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = g.grad(vars[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < t.numel() => {
                let mut e = sample(&mut rng, t.numel(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..t.numel()).collect(),
        };
        for e in entries {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + opts.step;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - opts.step;
            let down = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic[e], numeric, opts.abs_floor);
            report.checked += 1;
            if err > opts.tolerance {
                report.failures += 1;
            }
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, e, analytic[e], numeric));
            }
        }
    }
    Ok(report)
}

/// Reduces any output to a scalar through fixed pseudo-random weights, so a
/// gradient check exercises every output element with distinct sensitivity.
pub fn projection_loss(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    g.sum(prod)
}

/// Finite-difference checks of every differentiable graph operation on
/// small randomized shapes. Returns one named report per operation.
pub fn op_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).with_grad();
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor>,
                   f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = check_gradients(
            &inputs,
            |g, v| {
                let y = f(g, v)?;
                if g.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    projection_loss(g, y, 11)
                }
            },
            opts,
        )?;
        out.push((name, report));
        Ok(())
    };

    for (name, ta, tb) in [
        ("matmul", false, false),
        ("matmul_ta", true, false),
        ("matmul_tb", false, true),
        ("matmul_ta_tb", true, true),
    ] {
        let a = rand_t(if ta { &[4, 3] } else { &[3, 4] }, -1.0, 1.0);
        let b = rand_t(if tb { &[5, 4] } else { &[4, 5] }, -1.0, 1.0);
        run(name, vec![a, b], &move |g, v| g.matmul_t(v[0], v[1], ta, tb))?;
    }
    let (a, b) = (rand_t(&[3, 4], -1.0, 1.0), rand_t(&[3, 4], -1.0, 1.0));
    run("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]))?;
    run("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]))?;
    run("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]))?;
    run("add_row", vec![a.clone(), rand_t(&[4], -1.0, 1.0)], &|g, v| g.add_row(v[0], v[1]))?;
    run("scale", vec![a.clone()], &|g, v| g.scale(v[0], -1.7))?;
    // Keep relu inputs away from the kink.
    let r = Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.2 - i as f64 * 0.1 }).with_grad();
    run("relu", vec![r], &|g, v| g.relu(v[0]))?;
    run("gelu", vec![rand_t(&[3, 4], -3.0, 3.0)], &|g, v| g.gelu(v[0]))?;
    run("sigmoid", vec![rand_t(&[3, 4], -4.0, 4.0)], &|g, v| g.sigmoid(v[0]))?;
    run("reshape", vec![a.clone()], &|g, v| g.reshape(v[0], &[2, 6]))?;
    run("transpose", vec![a.clone()], &|g, v| g.transpose(v[0]))?;
    run("softmax_rows", vec![rand_t(&[3, 5], -2.0, 2.0)], &|g, v| g.softmax_rows(v[0]))?;
    run(
        "layer_norm",
        vec![rand_t(&[3, 6], -2.0, 2.0), rand_t(&[6], 0.5, 1.5), rand_t(&[6], -0.5, 0.5)],
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    )?;
    run(
        "conv2d",
        vec![rand_t(&[2, 2, 5, 5], -1.0, 1.0), rand_t(&[3, 2, 3, 3], -1.0, 1.0), rand_t(&[3], -1.0, 1.0)],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    )?;
    run("resize_nearest", vec![rand_t(&[2, 2, 3], -1.0, 1.0)], &|g, v| g.resize_nearest(v[0], 4, 6))?;
    run(
        "bilinear_sample",
        vec![rand_t(&[2, 4, 5], -1.0, 1.0), rand_t(&[6, 2], 0.15, 0.85)],
        &|g, v| g.bilinear_sample(v[0], v[1]),
    )?;
    {
        let levels = crate::levels_from_sizes(&[(4, 5), (2, 3), (1, 1)]);
        let (heads, points, n, d) = (2, 2, 3, 4);
        let slots = heads * levels.len() * points;
        let lv = levels.clone();
        run(
            "deform_sample",
            vec![rand_t(&[27, d], -1.0, 1.0), rand_t(&[n, 2 * slots], 0.1, 0.9), rand_t(&[n, slots], 0.0, 1.0)],
            &move |g, v| g.deform_sample(v[0], &lv, heads, points, v[1], v[2]),
        )?;
    }
    run(
        "attention",
        vec![rand_t(&[3, 4], -1.0, 1.0), rand_t(&[5, 4], -1.0, 1.0), rand_t(&[5, 4], -1.0, 1.0)],
        &|g, v| g.attention(v[0], v[1], v[2], 2, Some(&[true, true, false, true, false])),
    )?;
    run(
        "concat_rows",
        vec![rand_t(&[2, 3], -1.0, 1.0), rand_t(&[1, 3], -1.0, 1.0)],
        &|g, v| g.concat_rows(&[v[0], v[1], v[0]]),
    )?;
    run("gather", vec![rand_t(&[5, 3], -1.0, 1.0)], &|g, v| g.gather(v[0], &[4, 0, 4, 2]))?;
    run("mean_rows", vec![a.clone()], &|g, v| g.mean_rows(v[0]))?;
    run("mean", vec![a.clone()], &|g, v| g.mean(v[0]))?;
    let targets: Vec<f64> = (0..12).map(|i| [0.0, 1.0, 0.25][i % 3]).collect();
    run("bce_with_logits", vec![rand_t(&[3, 4], -3.0, 3.0)], &move |g, v| g.bce_with_logits(v[0], &targets))?;
    Ok(out)
}
