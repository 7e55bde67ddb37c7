//! Information-flow instruments: attention rollout, semantic-attention
//! share, peak-attention ratios and the vision-masking probe.

use serde::{Deserialize, Serialize};

use crate::align::{categorize_heads, semantic_mass_and_peak};
use crate::decode::jsd;
use crate::error::{Error, Result};
use crate::model::{
    context_inputs, encode_image, forward_full, AttentionHook, AttentionTensor, HookContext,
    HookOutcome, KVCache, ModelParams, SequenceLayout, SyntheticImage,
};

/// Contributions of input embeddings (rows) to representations (columns)
/// after `layer` blocks. Stored row-major, `n × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    pub layer: usize,
    pub size: usize,
    pub contributions: Vec<f64>,
}

impl FlowMatrix {
    /// `F^0`: every representation is its own input.
    pub fn identity(size: usize) -> Self {
        let mut contributions = vec![0.0; size * size];
        for i in 0..size {
            contributions[i * size + i] = 1.0;
        }
        Self {
            layer: 0,
            size,
            contributions,
        }
    }

    /// Contribution of input `i` to representation `j`.
    pub fn get(&self, input: usize, position: usize) -> f64 {
        self.contributions[input * self.size + position]
    }

    pub fn column_sum(&self, position: usize) -> f64 {
        (0..self.size).map(|i| self.get(i, position)).sum()
    }
}

/// One rollout layer: `F^l[:, j] = (F^{l-1}[:, j] + Σ_i W[j, i] F^{l-1}[:, i]) / 2`
/// where `attention_avg` is the head-averaged `n × n` attention (row = query).
pub fn rollout_step(prev: &FlowMatrix, attention_avg: &[f64]) -> Result<FlowMatrix> {
    let n = prev.size;
    if attention_avg.len() != n * n {
        return Err(Error::Input(format!(
            "attention has {} entries, expected {n}x{n}",
            attention_avg.len()
        )));
    }
    let mut next = vec![0.0; n * n];
    for j in 0..n {
        let weights = &attention_avg[j * n..(j + 1) * n];
        for input in 0..n {
            let row = &prev.contributions[input * n..(input + 1) * n];
            let mixed: f64 = weights.iter().zip(row).map(|(w, f)| w * f).sum();
            next[input * n + j] = 0.5 * row[j] + 0.5 * mixed;
        }
    }
    Ok(FlowMatrix {
        layer: prev.layer + 1,
        size: n,
        contributions: next,
    })
}

/// `F^0, F^1, …, F^L` from full prefill attention tensors.
pub fn rollout(tensors: &[AttentionTensor]) -> Result<Vec<FlowMatrix>> {
    let size = tensors.first().map_or(0, |t| t.key_len);
    let mut flows = vec![FlowMatrix::identity(size)];
    for tensor in tensors {
        if !tensor.normalized || tensor.query_len != size || tensor.key_len != size {
            return Err(Error::Input(format!(
                "layer {}: rollout needs normalized {size}x{size} attention",
                tensor.layer
            )));
        }
        let next = rollout_step(
            flows.last().expect("seeded with F^0"),
            &tensor.head_average(),
        )?;
        flows.push(next);
    }
    Ok(flows)
}

/// Visual contribution to visual and to semantic representations, each
/// averaged over its target positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub layer: usize,
    pub vision_to_vision: f64,
    pub vision_to_text: f64,
}

fn summarize(flow: &FlowMatrix, layout: &SequenceLayout) -> FlowSummary {
    let visual_mass = |j: usize| -> f64 { (0..=layout.visual_end).map(|i| flow.get(i, j)).sum() };
    let mean = |range: std::ops::Range<usize>| {
        let len = range.len() as f64;
        range.map(visual_mass).sum::<f64>() / len
    };
    FlowSummary {
        layer: flow.layer,
        vision_to_vision: mean(0..layout.visual_end + 1),
        vision_to_text: mean(layout.semantic_positions()),
    }
}

/// Rollout summaries for layers `0..=L`; layer 0 is the identity.
pub fn compute_flow(
    tensors: &[AttentionTensor],
    layout: &SequenceLayout,
) -> Result<Vec<FlowSummary>> {
    if layout.semantic_positions().is_empty() {
        return Err(Error::Input("layout has no semantic positions".into()));
    }
    if tensors
        .first()
        .is_some_and(|t| t.key_len != layout.total_len)
    {
        return Err(Error::Input("attention size does not match layout".into()));
    }
    Ok(rollout(tensors)?
        .iter()
        .map(|flow| summarize(flow, layout))
        .collect())
}

/// Per layer, the head-mean attention mass the final query puts on semantic
/// positions.
pub fn semantic_attention_share(tensors: &[AttentionTensor], layout: &SequenceLayout) -> Vec<f64> {
    tensors
        .iter()
        .map(|t| {
            let last = t.query_len - 1;
            let total: f64 = (0..t.num_heads)
                .map(|h| semantic_mass_and_peak(t.visible_row(h, last), layout.visual_end).0)
                .sum();
            total / t.num_heads as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakRatio {
    pub layer: usize,
    pub head: usize,
    /// `max W_S / Σ W_S` for the final query row.
    pub ratio: f64,
    /// Whether the head counts as core under the given `kappa`.
    pub core: bool,
}

/// Peak-to-mass ratio of every semantic head's final-row attention.
pub fn peak_attention_stats(
    tensors: &[AttentionTensor],
    layout: &SequenceLayout,
    kappa: f64,
) -> Result<Vec<PeakRatio>> {
    let mut out = Vec::new();
    for t in tensors {
        let rows = t.last_rows();
        let partition = categorize_heads(&rows, layout.visual_end, kappa)?;
        for head in partition.semantic_heads() {
            let (mass, peak) = semantic_mass_and_peak(&rows[head], layout.visual_end);
            out.push(PeakRatio {
                layer: t.layer,
                head,
                ratio: peak / mass,
                core: partition.core_semantic_heads.contains(&head),
            });
        }
    }
    Ok(out)
}

/// Sets scores toward visual keys to `-inf` for every semantic query at
/// layers `>= start_layer`. Visual queries are untouched, as nothing
/// downstream can read them once their keys are masked.
#[derive(Debug, Clone, Copy)]
pub struct VisualKeyMask {
    pub start_layer: usize,
}

impl AttentionHook for VisualKeyMask {
    fn on_scores(&mut self, ctx: &HookContext<'_>, scores: &[Vec<f64>]) -> Result<HookOutcome> {
        if ctx.layer < self.start_layer || ctx.layout.is_visual(ctx.query_pos) {
            return Ok(HookOutcome::PassThrough);
        }
        let visual_end = ctx.layout.visual_end;
        Ok(HookOutcome::Replace(
            scores
                .iter()
                .map(|row| {
                    let mut row = row.clone();
                    row[..=visual_end].fill(f64::NEG_INFINITY);
                    row
                })
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskProbeResult {
    pub mask_start_layer: usize,
    /// Base-2 divergence between the regular and masked next-token
    /// distributions.
    pub jsd: f64,
    /// Natural log of `jsd`; `-inf` when it is 0.
    pub log_jsd: f64,
}

/// Compare the next-token distribution with and without the image visible
/// from `mask_start_layer` on.
pub fn vision_mask_probe(
    params: &ModelParams,
    image: &SyntheticImage,
    prompt: &[u32],
    mask_start_layer: usize,
) -> Result<MaskProbeResult> {
    let num_layers = params.config.num_layers;
    if prompt.is_empty() {
        return Err(Error::Input("probe prompt must not be empty".into()));
    }
    if mask_start_layer < 1 || mask_start_layer > num_layers + 1 {
        return Err(Error::Input(format!(
            "mask_start_layer must lie in 1..={}, got {mask_start_layer}",
            num_layers + 1
        )));
    }
    let visual = encode_image(image, params)?;
    let layout = SequenceLayout::for_prompt(visual.len(), prompt.len())?;
    let inputs = context_inputs(&visual, prompt);

    let regular = forward_full(params, &mut KVCache::new(params), &inputs, &layout, None)?;
    let mut mask = VisualKeyMask {
        start_layer: mask_start_layer,
    };
    let masked = forward_full(
        params,
        &mut KVCache::new(params),
        &inputs,
        &layout,
        Some(&mut mask),
    )?;

    let last = |logits: &[crate::dist::LogitDistribution]| {
        logits.last().expect("nonempty context").to_probabilities()
    };
    let divergence = jsd(&last(&regular.logits)?, &last(&masked.logits)?)?;
    Ok(MaskProbeResult {
        mask_start_layer,
        jsd: divergence,
        log_jsd: if divergence == 0.0 {
            f64::NEG_INFINITY
        } else {
            divergence.ln()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_attention_keeps_flow() {
        let f0 = FlowMatrix::identity(3);
        let eye = FlowMatrix::identity(3).contributions;
        let f1 = rollout_step(&f0, &eye).unwrap();
        assert_eq!(f1.contributions, f0.contributions);
        assert_eq!(f1.layer, 1);
    }

    #[test]
    fn two_position_hand_example() {
        let f1 = rollout_step(&FlowMatrix::identity(2), &[1.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!((f1.get(0, 1), f1.get(1, 1)), (0.25, 0.75));
        assert_eq!((f1.get(0, 0), f1.get(1, 0)), (1.0, 0.0));
    }

    #[test]
    fn rollout_rejects_bad_shape() {
        assert!(rollout_step(&FlowMatrix::identity(2), &[1.0; 3]).is_err());
    }

    #[test]
    fn mask_hook_only_touches_semantic_queries_from_start() {
        let layout = SequenceLayout::new(1, 2, 4).unwrap();
        let mut mask = VisualKeyMask { start_layer: 2 };
        let ctx = |layer, query_pos| HookContext {
            layer,
            num_layers: 3,
            query_pos,
            is_current: false,
            layout: &layout,
        };
        let row = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(
            mask.on_scores(&ctx(1, 2), &row).unwrap(),
            HookOutcome::PassThrough
        );
        assert_eq!(
            mask.on_scores(&ctx(2, 1), &[vec![1.0, 2.0]]).unwrap(),
            HookOutcome::PassThrough
        );
        assert_eq!(
            mask.on_scores(&ctx(3, 2), &row).unwrap(),
            HookOutcome::Replace(vec![vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 3.0]])
        );
    }
}
