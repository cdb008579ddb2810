use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorkit::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use tensorkit::{Graph, Tensor, TensorError, Var};

use super::{Forward, ModelConfig, ModelInput, ModelState, ParamBinder, Result, VisualInput};
use crate::maskgeo::BinaryMask;
use crate::objective::{sample_loss, LossWeights};
use crate::synthref::build::RgbImage;
use crate::synthref::Source;

/// Finite-difference check of the whole network and loss on an omni input
/// at reduced sizes. Zero-initialized parameters are first randomized so
/// every path carries gradient.
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut state = ModelState::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for i in 0..state.len() {
        let t = state.tensor_mut(i);
        if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let n = cfg.input_size;
    let mut image = || RgbImage { height: n, width: n, pixels: (0..n * n * 3).map(|_| rng.gen()).collect() };
    let target = image();
    let reference = image();
    let prompt = BinaryMask::from_fn(n, n, |r, c| r >= n / 4 && r < n / 2 + 1 && c >= n / 4 && c < 3 * n / 4);
    let gt = BinaryMask::from_fn(n, n, |r, c| r + c < n);
    let tokens: Vec<u32> = (0..5).map(|i| 2 + (i * 7 % (cfg.vocab_size as u32 - 2))).collect();
    let truth = vec![(Source::Text, gt.clone()), (Source::Visual, gt)];
    let input = ModelInput {
        target: &target,
        text: Some(&tokens),
        visual: Some(VisualInput { reference: &reference, prompt: &prompt }),
    };
    let weights = LossWeights::default();
    let inputs: Vec<Tensor> = state.tensors().iter().map(|t| t.clone().with_grad()).collect();
    let loss = |g: &mut Graph, vars: &[Var]| -> tensorkit::Result<Var> {
        let mut f = Forward::with_binder(std::mem::take(g), &state, ParamBinder::preset(vars.to_vec()));
        let out = f.run(&input).map_err(|e| TensorError::Dimension(e.to_string()))?;
        let l = sample_loss(&mut f.g, &out, &truth, true, &weights, cfg.seg_grid)
            .map_err(|e| TensorError::Dimension(e.to_string()))?;
        *g = f.g;
        Ok(l.total)
    };
    Ok(check_gradients(&inputs, loss, opts)?)
}
