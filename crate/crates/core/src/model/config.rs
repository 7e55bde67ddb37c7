use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_num_visual_tokens() -> usize {
    16
}

fn default_patch_dim() -> usize {
    16
}

/// Shape and initialization settings of the toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub init_seed: u64,
    /// Multiplier on the `1/sqrt(model_dim)` weight standard deviation.
    pub init_scale: f64,
    /// Number of image patches, i.e. visual positions `0..=e`.
    #[serde(default = "default_num_visual_tokens")]
    pub num_visual_tokens: usize,
    /// Feature length of one image patch.
    #[serde(default = "default_patch_dim")]
    pub patch_dim: usize,
}

impl Default for ModelConfig {
    /// The desk-scale default: 4 layers, 4 heads, width 64, vocabulary 256,
    /// 16 visual positions and a 128-position context.
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            vocab_size: 256,
            max_context: 128,
            init_seed: 7,
            init_scale: 1.0,
            num_visual_tokens: default_num_visual_tokens(),
            patch_dim: default_patch_dim(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("vocab_size", self.vocab_size),
            ("num_visual_tokens", self.num_visual_tokens),
            ("patch_dim", self.patch_dim),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_context < 2 {
            return Err(Error::Config("max_context must be at least 2".into()));
        }
        // At least one text position has to fit after the image.
        if self.num_visual_tokens + 1 > self.max_context {
            return Err(Error::Config(format!(
                "num_visual_tokens {} leaves no room for text in max_context {}",
                self.num_visual_tokens, self.max_context
            )));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::Config(format!(
                "init_scale must be finite and nonnegative, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Index `e` of the last visual position.
    pub fn visual_end(&self) -> usize {
        self.num_visual_tokens - 1
    }
}

/// Partition of the context into the visual span `0..=visual_end`, the
/// prompt `visual_end+1..=prompt_end` and generated text after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub visual_end: usize,
    pub prompt_end: usize,
    pub total_len: usize,
}

impl SequenceLayout {
    pub fn new(visual_end: usize, prompt_end: usize, total_len: usize) -> Result<Self> {
        if !(visual_end < prompt_end && prompt_end < total_len) {
            return Err(Error::Input(format!(
                "invalid layout: need visual_end < prompt_end < total_len, got {visual_end}, {prompt_end}, {total_len}"
            )));
        }
        Ok(Self {
            visual_end,
            prompt_end,
            total_len,
        })
    }

    /// Layout of an image of `num_visual` patches followed by a prompt of
    /// `prompt_len` tokens, with nothing generated yet.
    pub fn for_prompt(num_visual: usize, prompt_len: usize) -> Result<Self> {
        if num_visual == 0 || prompt_len == 0 {
            return Err(Error::Input(
                "layout needs at least one visual and one prompt position".into(),
            ));
        }
        let prompt_end = num_visual + prompt_len - 1;
        Self::new(num_visual - 1, prompt_end, prompt_end + 1)
    }

    /// Same partition, with the sequence grown or shrunk to `total_len`.
    pub fn with_total_len(&self, total_len: usize) -> Result<Self> {
        Self::new(self.visual_end, self.prompt_end, total_len)
    }

    pub fn is_visual(&self, position: usize) -> bool {
        position <= self.visual_end
    }

    /// Semantic positions `visual_end+1..total_len`.
    pub fn semantic_positions(&self) -> std::ops::Range<usize> {
        self.visual_end + 1..self.total_len
    }

    pub fn check_capacity(&self, max_context: usize) -> Result<()> {
        if self.total_len > max_context {
            return Err(Error::Capacity {
                position: self.total_len - 1,
                max_context,
            });
        }
        Ok(())
    }
}
