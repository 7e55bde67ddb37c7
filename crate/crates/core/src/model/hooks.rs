use super::config::SequenceLayout;
use crate::error::{Error, Result};

/// Where in the forward pass a hook is being called.
#[derive(Debug, Clone, Copy)]
pub struct HookContext<'a> {
    /// 1-based block number.
    pub layer: usize,
    pub num_layers: usize,
    /// Absolute position of the query whose scores are offered.
    pub query_pos: usize,
    /// True for the newest position of the pass, i.e. the decoding query.
    pub is_current: bool,
    pub layout: &'a SequenceLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HookOutcome {
    PassThrough,
    /// New raw scores, one row per head over keys `0..=query_pos`.
    Replace(Vec<Vec<f64>>),
}

/// Observes and optionally rewrites the raw (pre-softmax) scores of one
/// query row at one layer.
pub trait AttentionHook {
    fn on_scores(&mut self, ctx: &HookContext<'_>, scores: &[Vec<f64>]) -> Result<HookOutcome>;
}

impl<F> AttentionHook for F
where
    F: FnMut(&HookContext<'_>, &[Vec<f64>]) -> Result<HookOutcome>,
{
    fn on_scores(&mut self, ctx: &HookContext<'_>, scores: &[Vec<f64>]) -> Result<HookOutcome> {
        self(ctx, scores)
    }
}

/// Hook that never changes anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThrough;

impl AttentionHook for PassThrough {
    fn on_scores(&mut self, _: &HookContext<'_>, _: &[Vec<f64>]) -> Result<HookOutcome> {
        Ok(HookOutcome::PassThrough)
    }
}

/// Runs hooks in order, each seeing the scores left by the previous one.
#[derive(Default)]
pub struct HookChain<'a> {
    hooks: Vec<Box<dyn AttentionHook + 'a>>,
}

impl<'a> HookChain<'a> {
    pub fn new() -> Self {
        Self { hooks: Vec::new() }
    }

    pub fn push(&mut self, hook: impl AttentionHook + 'a) -> &mut Self {
        self.hooks.push(Box::new(hook));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }
}

impl AttentionHook for HookChain<'_> {
    fn on_scores(&mut self, ctx: &HookContext<'_>, scores: &[Vec<f64>]) -> Result<HookOutcome> {
        let mut current: Option<Vec<Vec<f64>>> = None;
        for hook in &mut self.hooks {
            let input = current.as_deref().unwrap_or(scores);
            if let HookOutcome::Replace(rows) = hook.on_scores(ctx, input)? {
                validate_replacement(&rows, scores.len(), ctx.query_pos + 1)?;
                current = Some(rows);
            }
        }
        Ok(current.map_or(HookOutcome::PassThrough, HookOutcome::Replace))
    }
}

/// A replacement must keep the head count and the visible key span, contain
/// no NaN or `+inf`, and leave every row with at least one finite score.
pub(crate) fn validate_replacement(rows: &[Vec<f64>], heads: usize, visible: usize) -> Result<()> {
    if rows.len() != heads {
        return Err(Error::Hook(format!(
            "replacement has {} heads, expected {heads}",
            rows.len()
        )));
    }
    for (h, row) in rows.iter().enumerate() {
        if row.len() > visible {
            return Err(Error::Hook(format!(
                "head {h}: {} keys breaks the causal mask (only {visible} visible)",
                row.len()
            )));
        }
        if row.len() != visible {
            return Err(Error::Hook(format!(
                "head {h}: {} keys, expected {visible}",
                row.len()
            )));
        }
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Hook(format!("head {h}: NaN or +inf score")));
        }
        if !row.iter().any(|v| v.is_finite()) {
            return Err(Error::Hook(format!("head {h}: every key masked")));
        }
    }
    Ok(())
}
