//! Deterministic toy multimodal decoder.
//!
//! A GPT-style pre-norm stack (layer norm, attention, residual, layer norm,
//! MLP, residual) with untrained Gaussian weights. Image patches are
//! projected linearly and occupy positions `0..=e`; the text prompt follows.
//! Every attention layer offers the raw scores of each query row to an
//! optional [`AttentionHook`] before the softmax.

mod config;
mod engine;
mod hooks;
mod params;
mod tensor;

pub use config::{ModelConfig, SequenceLayout};
pub use engine::{forward_full, forward_step, FullOutput, KVCache, StepInput, StepOutput};
pub use hooks::{AttentionHook, HookChain, HookContext, HookOutcome, PassThrough};
pub use params::{init_model, DumpIndex, LayerParams, Matrix, ModelParams, TensorEntry};
pub use tensor::AttentionTensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stand-in for an image: a `num_visual_tokens × patch_dim` grid of patch
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub patch_grid: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticImage {
    /// Standard-normal patch features drawn from a ChaCha8 stream.
    pub fn from_seed(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_grid = (0..config.num_visual_tokens)
            .map(|_| {
                (0..config.patch_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self { patch_grid, seed }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            patch_grid: vec![vec![0.0; config.patch_dim]; config.num_visual_tokens],
            seed: 0,
        }
    }
}

/// One embedding per patch: `patch · visual_projection`, no bias.
pub fn encode_image(image: &SyntheticImage, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    let config = &params.config;
    if image.patch_grid.len() != config.num_visual_tokens
        || image.patch_grid.iter().any(|p| p.len() != config.patch_dim)
    {
        return Err(Error::Input(format!(
            "image grid must be {} x {}",
            config.num_visual_tokens, config.patch_dim
        )));
    }
    if image.patch_grid.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("image contains non-finite features".into()));
    }
    Ok(image
        .patch_grid
        .iter()
        .map(|patch| params.visual_projection.left_mul(patch))
        .collect())
}

/// Visual embeddings followed by prompt tokens, as engine inputs.
pub fn context_inputs<'a>(visual: &'a [Vec<f64>], prompt: &[u32]) -> Vec<StepInput<'a>> {
    visual
        .iter()
        .map(|e| StepInput::Embedding(e))
        .chain(prompt.iter().map(|&t| StepInput::Token(t)))
        .collect()
}
