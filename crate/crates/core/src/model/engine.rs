use super::config::SequenceLayout;
use super::hooks::{validate_replacement, AttentionHook, HookContext, HookOutcome};
use super::params::{LayerParams, ModelParams};
use super::tensor::AttentionTensor;
use crate::dist::{softmax, LogitDistribution};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// One position's input: a vocabulary token or a precomputed embedding
/// (visual positions).
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    Token(u32),
    Embedding(&'a [f64]),
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Per-layer keys and values of every position processed so far.
#[derive(Debug, Clone)]
pub struct KVCache {
    layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            layers: vec![LayerCache::default(); params.config.num_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.truncate(0);
    }

    fn truncate(&mut self, len: usize) {
        for layer in &mut self.layers {
            layer.keys.truncate(len);
            layer.values.truncate(len);
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Next-token logits after the new position.
    pub logits: LogitDistribution,
    /// Scores that entered the softmax (after any hook), one query row.
    pub raw: Vec<AttentionTensor>,
    /// Softmax of `raw`.
    pub attention: Vec<AttentionTensor>,
}

#[derive(Debug, Clone)]
pub struct FullOutput {
    /// Next-token logits after every position.
    pub logits: Vec<LogitDistribution>,
    /// Full `L × L` scores per layer, `-inf` above the diagonal.
    pub raw: Vec<AttentionTensor>,
    /// Full `L × L` attention per layer, `0` above the diagonal.
    pub attention: Vec<AttentionTensor>,
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

fn embed(params: &ModelParams, input: StepInput<'_>, position: usize) -> Result<Vec<f64>> {
    let config = &params.config;
    let mut x: Vec<f64> = match input {
        StepInput::Token(id) => {
            let id = id as usize;
            if id >= config.vocab_size {
                return Err(Error::Input(format!(
                    "token {id} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            params
                .token_embedding
                .row(id)
                .iter()
                .map(|&w| f64::from(w))
                .collect()
        }
        StepInput::Embedding(e) => {
            if e.len() != config.model_dim {
                return Err(Error::Input(format!(
                    "embedding has length {}, expected {}",
                    e.len(),
                    config.model_dim
                )));
            }
            e.to_vec()
        }
    };
    for (v, &p) in x.iter_mut().zip(params.position_embedding.row(position)) {
        *v += f64::from(p);
    }
    check_finite(&x, "input embedding")?;
    Ok(x)
}

struct Attended {
    mixed: Vec<f64>,
    raw: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

/// Scores one query against `keys[..=pos]`, lets the hook rewrite them,
/// normalizes and mixes the values.
fn attend(
    params: &ModelParams,
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    ctx: &HookContext<'_>,
    hook: &mut Option<&mut dyn AttentionHook>,
) -> Result<Attended> {
    let config = &params.config;
    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let visible = ctx.query_pos + 1;

    let mut raw: Vec<Vec<f64>> = (0..config.num_heads)
        .map(|h| {
            let span = h * head_dim..(h + 1) * head_dim;
            let q = &query[span.clone()];
            keys[..visible]
                .iter()
                .map(|k| {
                    q.iter()
                        .zip(&k[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect()
        })
        .collect();

    if let Some(hook) = hook.as_mut() {
        if let HookOutcome::Replace(rows) = hook.on_scores(ctx, &raw)? {
            validate_replacement(&rows, config.num_heads, visible)?;
            raw = rows;
        }
    }

    let probs = raw.iter().map(|r| softmax(r)).collect::<Result<Vec<_>>>()?;
    let mut mixed = vec![0.0; config.model_dim];
    for (h, p) in probs.iter().enumerate() {
        let span = h * head_dim..(h + 1) * head_dim;
        for (j, &w) in p.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in mixed[span.clone()].iter_mut().zip(&values[j][span.clone()]) {
                *o += w * v;
            }
        }
    }
    Ok(Attended { mixed, raw, probs })
}

/// Output projection, residual, then the MLP sub-block with its residual.
fn finish_block(layer: &LayerParams, x: &mut [f64], mixed: &[f64], index: usize) -> Result<()> {
    for (v, a) in x.iter_mut().zip(layer.w_output.left_mul(mixed)) {
        *v += a;
    }
    let hidden: Vec<f64> = layer
        .w_up
        .left_mul(&layer_norm(x))
        .into_iter()
        .map(gelu)
        .collect();
    for (v, m) in x.iter_mut().zip(layer.w_down.left_mul(&hidden)) {
        *v += m;
    }
    check_finite(x, &format!("hidden state after layer {}", index + 1))
}

fn unembed(params: &ModelParams, x: &[f64]) -> Result<LogitDistribution> {
    let logits = params.unembedding.left_mul(&layer_norm(x));
    check_finite(&logits, "logits")?;
    Ok(LogitDistribution::logits(logits))
}

fn store_row(tensor: &mut AttentionTensor, query: usize, rows: &[Vec<f64>]) {
    for (h, row) in rows.iter().enumerate() {
        tensor.row_mut(h, query)[..row.len()].copy_from_slice(row);
    }
}

/// Process one new position on top of `cache`.
///
/// `layout.total_len` must equal the sequence length including the new
/// position. The hook sees the raw scores of the new query at every layer
/// before they are normalized.
pub fn forward_step(
    params: &ModelParams,
    cache: &mut KVCache,
    input: StepInput<'_>,
    layout: &SequenceLayout,
    mut hook: Option<&mut dyn AttentionHook>,
) -> Result<StepOutput> {
    let config = &params.config;
    let pos = cache.len();
    if pos + 1 > config.max_context {
        return Err(Error::Capacity {
            position: pos,
            max_context: config.max_context,
        });
    }
    if layout.total_len != pos + 1 {
        return Err(Error::Input(format!(
            "layout total_len {} does not match cache length {} + 1",
            layout.total_len, pos
        )));
    }
    let result = step_inner(params, cache, input, layout, &mut hook, pos);
    if result.is_err() {
        cache.truncate(pos);
    }
    result
}

fn step_inner(
    params: &ModelParams,
    cache: &mut KVCache,
    input: StepInput<'_>,
    layout: &SequenceLayout,
    hook: &mut Option<&mut dyn AttentionHook>,
    pos: usize,
) -> Result<StepOutput> {
    let config = &params.config;
    let mut x = embed(params, input, pos)?;
    let mut raw_out = Vec::with_capacity(config.num_layers);
    let mut attn_out = Vec::with_capacity(config.num_layers);

    for (index, layer) in params.layers.iter().enumerate() {
        let a = layer_norm(&x);
        let q = layer.w_query.left_mul(&a);
        let slot = &mut cache.layers[index];
        slot.keys.push(layer.w_key.left_mul(&a));
        slot.values.push(layer.w_value.left_mul(&a));

        let ctx = HookContext {
            layer: index + 1,
            num_layers: config.num_layers,
            query_pos: pos,
            is_current: true,
            layout,
        };
        let attended = attend(params, &q, &slot.keys, &slot.values, &ctx, hook)?;

        let mut raw = AttentionTensor::empty(index + 1, config.num_heads, 1, pos + 1, pos, false);
        let mut norm = AttentionTensor::empty(index + 1, config.num_heads, 1, pos + 1, pos, true);
        store_row(&mut raw, 0, &attended.raw);
        store_row(&mut norm, 0, &attended.probs);
        raw_out.push(raw);
        attn_out.push(norm);

        finish_block(layer, &mut x, &attended.mixed, index)?;
    }

    Ok(StepOutput {
        logits: unembed(params, &x)?,
        raw: raw_out,
        attention: attn_out,
    })
}

/// Prefill: process a whole sequence at once from an empty cache, leaving
/// the cache filled so decoding can continue with [`forward_step`].
///
/// The hook is called for every query row of every layer; `is_current` is
/// set only for the final position.
pub fn forward_full(
    params: &ModelParams,
    cache: &mut KVCache,
    inputs: &[StepInput<'_>],
    layout: &SequenceLayout,
    mut hook: Option<&mut dyn AttentionHook>,
) -> Result<FullOutput> {
    let config = &params.config;
    let n = inputs.len();
    if !cache.is_empty() {
        return Err(Error::Input("forward_full needs an empty cache".into()));
    }
    if n == 0 {
        return Err(Error::Input("empty input sequence".into()));
    }
    if n > config.max_context {
        return Err(Error::Capacity {
            position: n - 1,
            max_context: config.max_context,
        });
    }
    if layout.total_len != n {
        return Err(Error::Input(format!(
            "layout total_len {} does not match {n} inputs",
            layout.total_len
        )));
    }

    let mut xs = inputs
        .iter()
        .enumerate()
        .map(|(pos, &input)| embed(params, input, pos))
        .collect::<Result<Vec<_>>>()?;
    let mut raw_out = Vec::with_capacity(config.num_layers);
    let mut attn_out = Vec::with_capacity(config.num_layers);
    let mut layer_caches = Vec::with_capacity(config.num_layers);

    for (index, layer) in params.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm(x)).collect();
        let keys: Vec<Vec<f64>> = normed.iter().map(|a| layer.w_key.left_mul(a)).collect();
        let values: Vec<Vec<f64>> = normed.iter().map(|a| layer.w_value.left_mul(a)).collect();

        let mut raw = AttentionTensor::empty(index + 1, config.num_heads, n, n, 0, false);
        let mut norm = AttentionTensor::empty(index + 1, config.num_heads, n, n, 0, true);
        let mut mixed_rows = Vec::with_capacity(n);
        for (pos, a) in normed.iter().enumerate() {
            let q = layer.w_query.left_mul(a);
            let ctx = HookContext {
                layer: index + 1,
                num_layers: config.num_layers,
                query_pos: pos,
                is_current: pos + 1 == n,
                layout,
            };
            let attended = attend(params, &q, &keys, &values, &ctx, &mut hook)?;
            store_row(&mut raw, pos, &attended.raw);
            store_row(&mut norm, pos, &attended.probs);
            mixed_rows.push(attended.mixed);
        }
        for (x, mixed) in xs.iter_mut().zip(&mixed_rows) {
            finish_block(layer, x, mixed, index)?;
        }
        raw_out.push(raw);
        attn_out.push(norm);
        layer_caches.push(LayerCache { keys, values });
    }

    let logits = xs
        .iter()
        .map(|x| unembed(params, x))
        .collect::<Result<Vec<_>>>()?;
    cache.layers = layer_caches;
    Ok(FullOutput {
        logits,
        raw: raw_out,
        attention: attn_out,
    })
}
