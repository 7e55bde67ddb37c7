//! Token generation with optional attention alignment and cross-image
//! contrastive decoding.
//!
//! With contrast enabled every step runs two sessions on the same text: the
//! positive one sees the real image (and the alignment hooks), the negative
//! one a different synthetic image. Their next-token logits are combined as
//! `(1 + alpha) * pos - alpha * neg`, where
//! `alpha = 1 - log10(JSD(pos, neg))` shrinks as the two distributions
//! disagree more.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::dist::{softmax, LogitDistribution, Space};

use crate::align::{AlignConfig, AlignHook, VisualBoostConfig, VisualBoostHook};
use crate::error::{Error, Result};
use crate::model::{
    context_inputs, encode_image, forward_full, forward_step, AttentionHook, HookChain, KVCache,
    ModelParams, SequenceLayout, StepInput, SyntheticImage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub temperature: f64,
    pub top_p: f64,
    pub rng_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            strategy: Strategy::Sample,
            temperature: 1.0,
            top_p: 1.0,
            rng_seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            strategy: Strategy::Greedy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub enabled: bool,
    pub negative_image_seed: u64,
    /// Lower clamp on the divergence before taking its logarithm.
    pub jsd_floor: f64,
    pub alpha_cap: f64,
    /// Also run the alignment hooks on the negative branch.
    #[serde(default)]
    pub align_negative: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            negative_image_seed: 1,
            jsd_floor: 1e-12,
            alpha_cap: 10.0,
            align_negative: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.jsd_floor > 0.0) {
            return Err(Error::Config(format!(
                "jsd_floor must be positive, got {}",
                self.jsd_floor
            )));
        }
        if !(self.alpha_cap >= 1.0) || !self.alpha_cap.is_finite() {
            return Err(Error::Config(format!(
                "alpha_cap must be finite and >= 1, got {}",
                self.alpha_cap
            )));
        }
        Ok(())
    }
}

/// Attention interventions on the positive branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Interventions {
    pub align: Option<AlignConfig>,
    pub boost: Option<VisualBoostConfig>,
}

impl Interventions {
    fn hooks(&self) -> HookChain<'static> {
        let mut chain = HookChain::new();
        if let Some(boost) = self.boost {
            chain.push(VisualBoostHook { config: boost });
        }
        if let Some(align) = self.align {
            chain.push(AlignHook::new(align));
        }
        chain
    }
}

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
pub fn jsd(p: &LogitDistribution, q: &LogitDistribution) -> Result<f64> {
    if p.space != Space::Probabilities || q.space != Space::Probabilities {
        return Err(Error::Input("jsd needs probability distributions".into()));
    }
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&a, &b) in p.values.iter().zip(&q.values) {
        let m = 0.5 * (a + b);
        let term = |x: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
        // one sum per index keeps the result exactly symmetric
        total += 0.5 * (term(a) + term(b));
    }
    Ok(total.max(0.0))
}

/// `alpha = 1 - log10(max(jsd, floor))`, capped at `alpha_cap`.
pub fn adaptive_alpha(jsd_value: f64, config: &ContrastConfig) -> f64 {
    let alpha = 1.0 - jsd_value.max(config.jsd_floor).log10();
    alpha.min(config.alpha_cap)
}

/// `(1 + alpha) * pos - alpha * neg`, elementwise over logits.
pub fn contrastive_combine(
    pos: &LogitDistribution,
    neg: &LogitDistribution,
    alpha: f64,
) -> Result<LogitDistribution> {
    if pos.len() != neg.len() {
        return Err(Error::Input(format!(
            "logit lengths differ: {} vs {}",
            pos.len(),
            neg.len()
        )));
    }
    if alpha == 0.0 {
        return Ok(LogitDistribution::logits(pos.values.clone()));
    }
    Ok(LogitDistribution::logits(
        pos.values
            .iter()
            .zip(&neg.values)
            .map(|(&a, &b)| {
                if a == b {
                    a
                } else {
                    (1.0 + alpha) * a - alpha * b
                }
            })
            .collect(),
    ))
}

/// Indices kept by nucleus truncation: the most probable tokens (ties by
/// lower index) until their cumulative mass reaches `top_p`.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cumulative = 0.0;
    let mut keep = 0;
    for &i in &order {
        keep += 1;
        cumulative += probs[i];
        if cumulative >= top_p {
            break;
        }
    }
    order.truncate(keep);
    order
}

/// Pick the next token. Greedy takes the first maximal logit; sampling
/// applies temperature, nucleus truncation and a seeded draw.
pub fn sample_token(
    logits: &LogitDistribution,
    config: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    let values = &logits.values;
    if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numeric("NaN or +inf logit".into()));
    }
    if values.iter().all(|&v| v == f64::NEG_INFINITY) {
        return Err(Error::Numeric("every logit is -inf".into()));
    }
    match config.strategy {
        Strategy::Greedy => {
            let mut best = 0;
            for (i, &v) in values.iter().enumerate() {
                if v > values[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        }
        Strategy::Sample => {
            let scaled: Vec<f64> = values.iter().map(|v| v / config.temperature).collect();
            let probs = softmax(&scaled)?;
            let kept = nucleus(&probs, config.top_p);
            let total: f64 = kept.iter().map(|&i| probs[i]).sum();
            let mut target = rng.random::<f64>() * total;
            for &i in &kept {
                target -= probs[i];
                if target < 0.0 {
                    return Ok(i as u32);
                }
            }
            Ok(*kept.last().expect("nucleus keeps at least one token") as u32)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub token: u32,
    /// Divergence between the positive and negative branch; `None` without
    /// contrast.
    pub jsd: Option<f64>,
    pub alpha: Option<f64>,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub trace: Vec<TraceStep>,
}

/// One decoding session: a cache plus an optional hook chain.
struct Branch<'p> {
    params: &'p ModelParams,
    cache: KVCache,
    hooks: HookChain<'static>,
}

impl<'p> Branch<'p> {
    fn hook(&mut self) -> Option<&mut dyn AttentionHook> {
        if self.hooks.is_empty() {
            None
        } else {
            Some(&mut self.hooks)
        }
    }

    fn prefill(
        &mut self,
        visual: &[Vec<f64>],
        prompt: &[u32],
        layout: &SequenceLayout,
    ) -> Result<LogitDistribution> {
        let inputs = context_inputs(visual, prompt);
        let params = self.params;
        let mut cache = KVCache::new(params);
        let hook = self.hook();
        let out = forward_full(params, &mut cache, &inputs, layout, hook)?;
        self.cache = cache;
        Ok(out.logits.into_iter().last().expect("nonempty context"))
    }

    fn step(&mut self, token: u32, layout: &SequenceLayout) -> Result<LogitDistribution> {
        let params = self.params;
        let mut cache = std::mem::replace(&mut self.cache, KVCache::new(params));
        let hook = self.hook();
        let out = forward_step(params, &mut cache, StepInput::Token(token), layout, hook);
        self.cache = cache;
        Ok(out?.logits)
    }
}

/// Autoregressive generation with interventions on the positive branch and
/// optional contrastive decoding against `contrast.negative_image_seed`.
pub fn generate(
    params: &ModelParams,
    image: &SyntheticImage,
    prompt: &[u32],
    interventions: &Interventions,
    contrast: &ContrastConfig,
    gen: &GenerationConfig,
) -> Result<Generation> {
    let config = &params.config;
    gen.validate()?;
    contrast.validate()?;
    if let Some(align) = &interventions.align {
        align.validate(config.num_layers)?;
    }
    if let Some(boost) = &interventions.boost {
        boost.validate(config.num_layers)?;
    }
    if prompt.is_empty() {
        return Err(Error::Input("prompt must not be empty".into()));
    }

    let visual = encode_image(image, params)?;
    let mut layout = SequenceLayout::for_prompt(visual.len(), prompt.len())?;
    layout.check_capacity(config.max_context)?;

    let mut positive = Branch {
        params,
        cache: KVCache::new(params),
        hooks: interventions.hooks(),
    };
    let mut pos_logits = positive.prefill(&visual, prompt, &layout)?;

    let mut negative = None;
    let mut neg_logits = None;
    if contrast.enabled {
        let neg_image = SyntheticImage::from_seed(config, contrast.negative_image_seed);
        let neg_visual = encode_image(&neg_image, params)?;
        let hooks = if contrast.align_negative {
            interventions.hooks()
        } else {
            HookChain::new()
        };
        let mut branch = Branch {
            params,
            cache: KVCache::new(params),
            hooks,
        };
        neg_logits = Some(branch.prefill(&neg_visual, prompt, &layout)?);
        negative = Some(branch);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(gen.rng_seed);
    let mut tokens = Vec::with_capacity(gen.max_new_tokens);
    let mut trace = Vec::with_capacity(gen.max_new_tokens);
    for step in 0..gen.max_new_tokens {
        let (combined, jsd_value, alpha) = match &neg_logits {
            Some(neg) => {
                let divergence = jsd(&pos_logits.to_probabilities()?, &neg.to_probabilities()?)?;
                let alpha = adaptive_alpha(divergence, contrast);
                let combined = contrastive_combine(&pos_logits, neg, alpha)?;
                (combined, Some(divergence), Some(alpha))
            }
            None => (pos_logits.clone(), None, None),
        };
        let token = sample_token(&combined, gen, &mut rng)?;
        tokens.push(token);
        trace.push(TraceStep {
            step,
            token,
            jsd: jsd_value,
            alpha,
            strategy: gen.strategy,
        });
        if step + 1 == gen.max_new_tokens {
            break;
        }
        layout = layout.with_total_len(layout.total_len + 1)?;
        pos_logits = positive.step(token, &layout)?;
        if let Some(branch) = negative.as_mut() {
            neg_logits = Some(branch.step(token, &layout)?);
        }
    }
    Ok(Generation { tokens, trace })
}

/// The bare engine loop: prefill, then one [`forward_step`] per token, no
/// hooks and no contrast.
pub fn plain_decode(
    params: &ModelParams,
    image: &SyntheticImage,
    prompt: &[u32],
    gen: &GenerationConfig,
) -> Result<Vec<u32>> {
    gen.validate()?;
    let visual = encode_image(image, params)?;
    let mut layout = SequenceLayout::for_prompt(visual.len(), prompt.len())?;
    let mut cache = KVCache::new(params);
    let out = forward_full(
        params,
        &mut cache,
        &context_inputs(&visual, prompt),
        &layout,
        None,
    )?;
    let mut logits = out.logits.last().cloned().expect("nonempty context");
    let mut rng = ChaCha8Rng::seed_from_u64(gen.rng_seed);
    let mut tokens = Vec::new();
    while tokens.len() < gen.max_new_tokens {
        let token = sample_token(&logits, gen, &mut rng)?;
        tokens.push(token);
        if tokens.len() == gen.max_new_tokens {
            break;
        }
        layout = layout.with_total_len(layout.total_len + 1)?;
        logits = forward_step(params, &mut cache, StepInput::Token(token), &layout, None)?.logits;
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(v: &[f64]) -> LogitDistribution {
        LogitDistribution::probabilities(v.to_vec()).unwrap()
    }

    #[test]
    fn jsd_identity_and_disjoint() {
        let p = probs(&[0.2, 0.3, 0.5]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert_eq!(jsd(&probs(&[1.0, 0.0]), &probs(&[0.0, 1.0])).unwrap(), 1.0);
    }

    #[test]
    fn jsd_rejects_mismatch_and_logits() {
        assert!(jsd(&probs(&[1.0]), &probs(&[0.5, 0.5])).is_err());
        let l = LogitDistribution::logits(vec![0.0, 0.0]);
        assert!(jsd(&l, &l).is_err());
    }

    #[test]
    fn alpha_arithmetic() {
        let c = ContrastConfig::default();
        assert_eq!(adaptive_alpha(0.1, &c), 2.0);
        assert_eq!(adaptive_alpha(1.0, &c), 1.0);
        assert_eq!(adaptive_alpha(0.0, &c), 10.0);
        let uncapped = ContrastConfig {
            alpha_cap: 100.0,
            ..c
        };
        assert_eq!(adaptive_alpha(0.0, &uncapped), 13.0);
    }

    #[test]
    fn combine_arithmetic() {
        let pos = LogitDistribution::logits(vec![1.0, 2.0]);
        let neg = LogitDistribution::logits(vec![0.0, 1.0]);
        assert_eq!(
            contrastive_combine(&pos, &neg, 2.0).unwrap().values,
            vec![3.0, 4.0]
        );
        assert_eq!(contrastive_combine(&pos, &neg, 0.0).unwrap(), pos);
        assert_eq!(contrastive_combine(&pos, &pos, 7.3).unwrap(), pos);
        let short = LogitDistribution::logits(vec![0.0]);
        assert!(contrastive_combine(&pos, &short, 1.0).is_err());
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let mut v = vec![0.0; 10];
        v[3] = 5.0;
        v[7] = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let token = sample_token(
            &LogitDistribution::logits(v),
            &GenerationConfig::greedy(1),
            &mut rng,
        );
        assert_eq!(token.unwrap(), 3);
    }

    #[test]
    fn point_mass_wins_under_both_strategies() {
        let mut v = vec![f64::NEG_INFINITY; 6];
        v[4] = 0.0;
        let logits = LogitDistribution::logits(v);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for strategy in [Strategy::Greedy, Strategy::Sample] {
            let config = GenerationConfig {
                strategy,
                ..GenerationConfig::default()
            };
            for _ in 0..20 {
                assert_eq!(sample_token(&logits, &config, &mut rng).unwrap(), 4);
            }
        }
    }

    #[test]
    fn nucleus_cut() {
        assert_eq!(nucleus(&[0.6, 0.3, 0.1], 0.5), vec![0]);
        assert_eq!(nucleus(&[0.3, 0.6, 0.1], 0.8), vec![1, 0]);
        assert_eq!(nucleus(&[0.6, 0.3, 0.1], 1.0), vec![0, 1, 2]);
        let config = GenerationConfig {
            top_p: 0.5,
            ..GenerationConfig::default()
        };
        let logits = LogitDistribution::logits(vec![0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(sample_token(&logits, &config, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn degenerate_logits_are_numeric_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = GenerationConfig::default();
        let all_masked = LogitDistribution::logits(vec![f64::NEG_INFINITY; 3]);
        assert!(matches!(
            sample_token(&all_masked, &config, &mut rng),
            Err(Error::Numeric(_))
        ));
        let nan = LogitDistribution::logits(vec![0.0, f64::NAN]);
        assert!(matches!(
            sample_token(&nan, &config, &mut rng),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn generation_config_validation() {
        assert!(GenerationConfig {
            max_new_tokens: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenerationConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenerationConfig {
            top_p: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ContrastConfig {
            jsd_floor: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ContrastConfig {
            alpha_cap: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
