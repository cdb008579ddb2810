//! The segmentation network: encoders, omni-prompt encoder, mask decoder and
//! heads, its parameter store and checkpoint format.

mod checkpoint;
mod gradcheck;
mod net;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::model_gradcheck;
pub use net::{
    bilinear_matrix, image_tensor, level_sizes, sinusoidal_positions, Forward, ForwardOutput, ModelInput, Prediction,
    SourceOutput, Trace, VisualInput,
};
pub use params::{ModelState, ParamBinder};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] tensorkit::TensorError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Channels of the stride-2 stem convolution.
    pub stem_channels: usize,
    pub n_scales: usize,
    pub prompt_generator_layers: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub deformable_points: usize,
    pub text_layers: usize,
    pub max_text_len: usize,
    pub prompt_query_len: usize,
    /// Side of the square grid of segmentation queries.
    pub seg_grid: usize,
    /// Hidden width of every FFN as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub input_size: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            stem_channels: 16,
            n_scales: 4,
            prompt_generator_layers: 3,
            decoder_blocks: 9,
            heads: 8,
            deformable_points: 4,
            text_layers: 2,
            max_text_len: 20,
            prompt_query_len: 20,
            seg_grid: 4,
            ffn_mult: 2,
            input_size: 64,
            vocab_size: crate::synthref::text::vocab_size(),
        }
    }

    /// Sizes from the implementation notes of the original work.
    pub fn paper_faithful() -> Self {
        Self { d_model: 256, stem_channels: 64, ffn_mult: 4, input_size: 480, ..Self::desk() }
    }

    /// Reduced sizes used for finite-difference checks of the whole network.
    pub fn tiny() -> Self {
        Self { d_model: 16, stem_channels: 4, ffn_mult: 2, input_size: 8, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.prompt_query_len != self.max_text_len {
            return fail("prompt query length must equal the maximum text length".into());
        }
        if self.decoder_blocks == 0 || self.decoder_blocks % 3 != 0 {
            return fail(format!("decoder blocks {} must be a positive multiple of 3", self.decoder_blocks));
        }
        if self.n_scales != 4 {
            return fail("the pyramid has exactly 4 scales".into());
        }
        if self.input_size < 8 {
            return fail("input size must be at least 8".into());
        }
        if self.seg_grid == 0 || self.deformable_points == 0 || self.prompt_generator_layers == 0 || self.vocab_size < 2 {
            return fail("seg grid, deformable points, generator layers and vocab must be positive".into());
        }
        Ok(())
    }

    pub fn seg_queries(&self) -> usize {
        self.seg_grid * self.seg_grid
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// Parameter-path prefix of the text encoder, frozen during visual tuning.
pub const TEXT_ENCODER_PREFIX: &str = "text_encoder.";
