//! Semantic-head categorization and two-stage attention alignment.
//!
//! At each aligned layer the decoding query's attention row is inspected per
//! head. Heads that put a strict majority of their mass on semantic
//! positions (after the image) are *semantic*; among those, heads whose
//! single largest semantic weight exceeds `kappa` times their semantic mass
//! are *core*, the rest *global*. Every remaining head is *other*.
//!
//! Alignment then runs two smoothing passes of the form
//! `(W + omega * target) / (1 + omega)`:
//!
//! 1. other heads move toward the mean of the global semantic heads;
//! 2. global semantic heads move toward the elementwise max of the core
//!    semantic heads.
//!
//! Each pass only runs when both of its head sets are nonempty. Core heads
//! are never rewritten.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::softmax;
use crate::error::{Error, Result};
use crate::model::{AttentionHook, HookContext, HookOutcome};

/// Domain in which the smoothing is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixDomain {
    /// Blend the raw pre-softmax scores; the engine's softmax renormalizes.
    #[default]
    RawScores,
    /// Blend softmax probabilities; stage-2 rows are renormalized.
    Probabilities,
}

impl FromStr for MixDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_scores" | "raw-scores" | "raw" => Ok(Self::RawScores),
            "probabilities" | "probs" => Ok(Self::Probabilities),
            other => Err(Error::Config(format!("unknown mix domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Core-head threshold, in `(0, 1)`.
    pub kappa: f64,
    /// Smoothing strength, `>= 0`.
    pub omega: f64,
    /// 1-based first aligned layer; `num_layers + 1` disables alignment.
    pub start_layer: usize,
    #[serde(default)]
    pub mix_domain: MixDomain,
}

impl AlignConfig {
    /// A configuration that never fires on a model of `num_layers` layers.
    pub fn disabled(num_layers: usize) -> Self {
        Self {
            start_layer: num_layers + 1,
            ..preset(Mode::Focused)
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!(
                "kappa must lie in (0, 1), got {}",
                self.kappa
            )));
        }
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::Config(format!(
                "omega must be finite and >= 0, got {}",
                self.omega
            )));
        }
        if self.start_layer < 1 || self.start_layer > num_layers + 1 {
            return Err(Error::Config(format!(
                "start_layer must lie in 1..={}, got {}",
                num_layers + 1,
                self.start_layer
            )));
        }
        Ok(())
    }

    /// Clamp `start_layer` to `num_layers + 1` for models shallower than
    /// the preset assumes. Logs a warning when it clamps.
    pub fn clamped_to(mut self, num_layers: usize) -> Self {
        if self.start_layer > num_layers + 1 {
            log::warn!(
                "start_layer {} exceeds model depth {num_layers}; clamping to {} (alignment disabled)",
                self.start_layer,
                num_layers + 1
            );
            self.start_layer = num_layers + 1;
        }
        self
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        layer >= self.start_layer
    }
}

/// Named hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Strong smoothing from layer 5: fewer hallucinations, less detail.
    Focused,
    /// Mild smoothing from layer 9: more detail retained.
    Balanced,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focused" => Ok(Self::Focused),
            "balanced" => Ok(Self::Balanced),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Focused => "focused",
            Self::Balanced => "balanced",
        })
    }
}

pub fn preset(mode: Mode) -> AlignConfig {
    let (omega, start_layer) = match mode {
        Mode::Focused => (4.0, 5),
        Mode::Balanced => (0.5, 9),
    };
    AlignConfig {
        kappa: 0.2,
        omega,
        start_layer,
        mix_domain: MixDomain::RawScores,
    }
}

/// Disjoint split of a layer's heads. Indices are sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPartition {
    pub other_heads: Vec<usize>,
    pub global_semantic_heads: Vec<usize>,
    pub core_semantic_heads: Vec<usize>,
}

impl HeadPartition {
    /// `H_Sc ∪ H_Sg`, sorted.
    pub fn semantic_heads(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .global_semantic_heads
            .iter()
            .chain(&self.core_semantic_heads)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Semantic mass and peak of one normalized row: `(Σ_{j>e} w, max_{j>e} w)`.
pub(crate) fn semantic_mass_and_peak(row: &[f64], visual_end: usize) -> (f64, f64) {
    let semantic = row.get(visual_end + 1..).unwrap_or(&[]);
    let mass = semantic.iter().sum();
    let peak = semantic.iter().copied().fold(0.0, f64::max);
    (mass, peak)
}

/// Classify heads from normalized attention rows (one row per head over the
/// visible keys). Both tests are strict, so boundary heads fall to
/// `other` and `global` respectively.
pub fn categorize_heads(rows: &[Vec<f64>], visual_end: usize, kappa: f64) -> Result<HeadPartition> {
    let mut partition = HeadPartition::default();
    for (h, row) in rows.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-4 {
            return Err(Error::Input(format!(
                "head {h}: attention row is not normalized (sum {total})"
            )));
        }
        let (semantic, peak) = semantic_mass_and_peak(row, visual_end);
        let other: f64 = row[..row.len().min(visual_end + 1)].iter().sum();
        if semantic > other {
            if peak > kappa * semantic {
                partition.core_semantic_heads.push(h);
            } else {
                partition.global_semantic_heads.push(h);
            }
        } else {
            partition.other_heads.push(h);
        }
    }
    Ok(partition)
}

fn blend(row: &mut [f64], target: &[f64], omega: f64) {
    let denom = 1.0 + omega;
    for (w, &t) in row.iter_mut().zip(target) {
        *w = (*w + omega * t) / denom;
    }
}

/// Align the decoding query's raw attention scores (one row per head).
///
/// Heads are categorized on the softmax of `raw_rows`. The blend is applied
/// to the raw scores or to the probabilities depending on
/// `config.mix_domain`; the returned rows live in that same domain. With
/// `omega == 0` the input of the chosen domain is returned untouched.
pub fn align_attention(
    raw_rows: &[Vec<f64>],
    visual_end: usize,
    config: &AlignConfig,
) -> Result<Vec<Vec<f64>>> {
    if raw_rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite attention score".into()));
    }
    let probs = raw_rows
        .iter()
        .map(|r| softmax(r))
        .collect::<Result<Vec<_>>>()?;
    let partition = categorize_heads(&probs, visual_end, config.kappa)?;
    let base = match config.mix_domain {
        MixDomain::RawScores => raw_rows.to_vec(),
        MixDomain::Probabilities => probs,
    };
    if config.omega == 0.0 {
        return Ok(base);
    }
    let width = base.first().map_or(0, Vec::len);
    let mut out = base.clone();

    let HeadPartition {
        other_heads,
        global_semantic_heads,
        core_semantic_heads,
    } = &partition;

    if !other_heads.is_empty() && !global_semantic_heads.is_empty() {
        let mut mean = vec![0.0; width];
        for &t in global_semantic_heads {
            for (m, v) in mean.iter_mut().zip(&base[t]) {
                *m += v;
            }
        }
        let count = global_semantic_heads.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for &h in other_heads {
            blend(&mut out[h], &mean, config.omega);
        }
    }

    if !core_semantic_heads.is_empty() && !global_semantic_heads.is_empty() {
        let mut peak = vec![f64::NEG_INFINITY; width];
        for &t in core_semantic_heads {
            for (m, &v) in peak.iter_mut().zip(&base[t]) {
                *m = m.max(v);
            }
        }
        for &h in global_semantic_heads {
            blend(&mut out[h], &peak, config.omega);
            if config.mix_domain == MixDomain::Probabilities {
                let sum: f64 = out[h].iter().sum();
                out[h].iter_mut().for_each(|w| *w /= sum);
            }
        }
    }
    Ok(out)
}

/// Engine hook applying [`align_attention`] to the decoding query at every
/// layer `>= start_layer`. Rows of earlier prompt positions are left alone.
#[derive(Debug, Clone)]
pub struct AlignHook {
    pub config: AlignConfig,
}

impl AlignHook {
    pub fn new(config: AlignConfig) -> Self {
        Self { config }
    }
}

impl AttentionHook for AlignHook {
    fn on_scores(&mut self, ctx: &HookContext<'_>, scores: &[Vec<f64>]) -> Result<HookOutcome> {
        if !ctx.is_current || !self.config.applies_to(ctx.layer) {
            return Ok(HookOutcome::PassThrough);
        }
        let aligned = align_attention(scores, ctx.layout.visual_end, &self.config)?;
        Ok(HookOutcome::Replace(match self.config.mix_domain {
            MixDomain::RawScores => aligned,
            // log-probabilities: the engine's softmax recovers the rows exactly
            MixDomain::Probabilities => aligned
                .into_iter()
                .map(|row| row.into_iter().map(f64::ln).collect())
                .collect(),
        }))
    }
}

/// Multiplicative boost of raw scores toward the image on a band of layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualBoostConfig {
    pub factor: f64,
    /// Inclusive 1-based layer interval.
    pub layer_range: (usize, usize),
}

impl VisualBoostConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !self.factor.is_finite() || self.factor < 1.0 {
            return Err(Error::Config(format!(
                "boost factor must be finite and >= 1, got {}",
                self.factor
            )));
        }
        let (lo, hi) = self.layer_range;
        if lo < 1 || lo > hi || hi > num_layers {
            return Err(Error::Config(format!(
                "boost layer range {lo}..={hi} outside 1..={num_layers}"
            )));
        }
        Ok(())
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        (self.layer_range.0..=self.layer_range.1).contains(&layer)
    }
}

/// Scale the scores of keys `0..=visual_end` by `factor`.
pub fn boost_visual_attention(raw_row: &[f64], visual_end: usize, factor: f64) -> Vec<f64> {
    raw_row
        .iter()
        .enumerate()
        .map(|(j, &s)| if j <= visual_end { s * factor } else { s })
        .collect()
}

#[derive(Debug, Clone)]
pub struct VisualBoostHook {
    pub config: VisualBoostConfig,
}

impl AttentionHook for VisualBoostHook {
    fn on_scores(&mut self, ctx: &HookContext<'_>, scores: &[Vec<f64>]) -> Result<HookOutcome> {
        if !ctx.is_current || !self.config.applies_to(ctx.layer) {
            return Ok(HookOutcome::PassThrough);
        }
        Ok(HookOutcome::Replace(
            scores
                .iter()
                .map(|row| boost_visual_attention(row, ctx.layout.visual_end, self.config.factor))
                .collect(),
        ))
    }
}
