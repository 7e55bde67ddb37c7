use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Row-major `f32` matrix. Products widen to `f64` before accumulating.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                if std == 0.0 {
                    0.0
                } else {
                    (z * std) as f32
                }
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row vector times matrix: `x · M`, with `x.len() == rows`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0f64; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * f64::from(w);
            }
        }
        out
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    pub w_output: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

/// Every weight of the toy model. Immutable after [`init_model`]; share it
/// by reference across sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub visual_projection: Matrix,
    pub layers: Vec<LayerParams>,
    pub unembedding: Matrix,
}

/// Fill every weight from a ChaCha8 stream seeded with `init_seed`, drawing
/// standard normals scaled by `init_scale / sqrt(model_dim)`. Tensors are
/// filled in the order reported by [`ModelParams::named_tensors`].
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let std = config.init_scale / (config.model_dim as f64).sqrt();
    let d = config.model_dim;
    let mut next = |rows, cols| Matrix::gaussian(rows, cols, std, &mut rng);

    let token_embedding = next(config.vocab_size, d);
    let position_embedding = next(config.max_context, d);
    let visual_projection = next(config.patch_dim, d);
    let layers = (0..config.num_layers)
        .map(|_| LayerParams {
            w_query: next(d, d),
            w_key: next(d, d),
            w_value: next(d, d),
            w_output: next(d, d),
            w_up: next(d, config.mlp_dim()),
            w_down: next(config.mlp_dim(), d),
        })
        .collect();
    let unembedding = next(d, config.vocab_size);

    Ok(ModelParams {
        config: config.clone(),
        token_embedding,
        position_embedding,
        visual_projection,
        layers,
        unembedding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the binary file.
    pub offset: usize,
}

/// JSON sidecar describing a flat little-endian `f32` parameter dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpIndex {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

impl ModelParams {
    /// All tensors in canonical order with their dump names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
            ("visual_projection".to_string(), &self.visual_projection),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.w_query"), &layer.w_query));
            out.push((format!("layers.{i}.w_key"), &layer.w_key));
            out.push((format!("layers.{i}.w_value"), &layer.w_value));
            out.push((format!("layers.{i}.w_output"), &layer.w_output));
            out.push((format!("layers.{i}.w_up"), &layer.w_up));
            out.push((format!("layers.{i}.w_down"), &layer.w_down));
        }
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.visual_projection,
        ];
        for layer in &mut self.layers {
            out.push(&mut layer.w_query);
            out.push(&mut layer.w_key);
            out.push(&mut layer.w_value);
            out.push(&mut layer.w_output);
            out.push(&mut layer.w_up);
            out.push(&mut layer.w_down);
        }
        out.push(&mut self.unembedding);
        out
    }

    /// 64-bit FNV-1a over the little-endian bytes of every weight.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, matrix) in self.named_tensors() {
            for value in &matrix.data {
                for byte in value.to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        hash
    }

    pub fn dump_index(&self) -> DumpIndex {
        let mut offset = 0;
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, m)| {
                let entry = TensorEntry {
                    name,
                    shape: [m.rows, m.cols],
                    offset,
                };
                offset += m.data.len() * 4;
                entry
            })
            .collect();
        DumpIndex {
            config: self.config.clone(),
            tensors,
        }
    }

    /// Write the flat binary to `bin_path` and its JSON sidecar to
    /// `index_path`.
    pub fn write_dump(&self, bin_path: &Path, index_path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        for (_, matrix) in self.named_tensors() {
            for value in &matrix.data {
                bytes.extend_from_slice(&value.to_le_bytes());
            }
        }
        fs::write(bin_path, bytes)?;
        fs::write(
            index_path,
            serde_json::to_string_pretty(&self.dump_index())?,
        )?;
        Ok(())
    }

    pub fn read_dump(bin_path: &Path, index_path: &Path) -> Result<Self> {
        let index: DumpIndex = serde_json::from_str(&fs::read_to_string(index_path)?)?;
        let bytes = fs::read(bin_path)?;
        // Zero-scale init gives the right shapes; the data is overwritten.
        let mut params = init_model(&ModelConfig {
            init_scale: 0.0,
            ..index.config.clone()
        })?;
        params.config = index.config.clone();
        let slots = params.named_tensors_mut();
        if slots.len() != index.tensors.len() {
            return Err(Error::Input(format!(
                "dump lists {} tensors, config implies {}",
                index.tensors.len(),
                slots.len()
            )));
        }
        for (slot, entry) in slots.into_iter().zip(&index.tensors) {
            if [slot.rows, slot.cols] != entry.shape {
                return Err(Error::Input(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    [slot.rows, slot.cols]
                )));
            }
            let end = entry.offset + slot.data.len() * 4;
            let chunk = bytes.get(entry.offset..end).ok_or_else(|| {
                Error::Input(format!("tensor {} runs past end of dump", entry.name))
            })?;
            for (value, raw) in slot.data.iter_mut().zip(chunk.chunks_exact(4)) {
                *value = f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            vocab_size: 12,
            max_context: 24,
            init_seed: 11,
            init_scale: 1.0,
            num_visual_tokens: 4,
            patch_dim: 3,
        }
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&ModelConfig {
            init_seed: 12,
            ..small()
        })
        .unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn zero_scale_gives_zero_weights() {
        let params = init_model(&ModelConfig {
            init_scale: 0.0,
            ..small()
        })
        .unwrap();
        for (name, m) in params.named_tensors() {
            assert!(m.data.iter().all(|&v| v.to_bits() == 0), "{name}");
        }
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let err = init_model(&ModelConfig {
            model_dim: 7,
            ..small()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn dump_round_trips() {
        let params = init_model(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("params.bin");
        let idx = dir.path().join("params.json");
        params.write_dump(&bin, &idx).unwrap();
        let index = params.dump_index();
        let last = index.tensors.last().unwrap();
        let expected_len = last.offset + last.shape[0] * last.shape[1] * 4;
        assert_eq!(fs::metadata(&bin).unwrap().len() as usize, expected_len);
        let back = ModelParams::read_dump(&bin, &idx).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn left_mul_matches_hand_product() {
        let m = Matrix {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert_eq!(m.left_mul(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
    }
}
