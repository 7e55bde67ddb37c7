mod common;

use proptest::prelude::*;
use sevi_lab::align::{
    align_attention, categorize_heads, preset, AlignConfig, AlignHook, MixDomain, Mode,
    VisualBoostConfig, VisualBoostHook,
};
use sevi_lab::decode::{generate, ContrastConfig, GenerationConfig, Interventions};
use sevi_lab::dist::softmax;
use sevi_lab::model::{
    context_inputs, encode_image, forward_full, init_model, AttentionHook, HookChain, HookContext,
    HookOutcome, KVCache, ModelConfig, SequenceLayout, SyntheticImage,
};

use common::{alignment_reference, random_instance, rng};

fn config(kappa: f64, omega: f64, mix_domain: MixDomain) -> AlignConfig {
    AlignConfig {
        kappa,
        omega,
        start_layer: 1,
        mix_domain,
    }
}

#[test]
fn three_head_hand_instance() {
    // softmax puts head 0 on the image, spreads head 1 evenly over the two
    // semantic keys and concentrates head 2 on key 2.
    let rows = vec![
        vec![3.0, 3.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 1.0],
        vec![0.0, 0.0, 3.0, 0.0],
    ];
    let probs: Vec<Vec<f64>> = rows.iter().map(|r| softmax(r).unwrap()).collect();
    let partition = categorize_heads(&probs, 1, 0.6).unwrap();
    assert_eq!(partition.other_heads, vec![0]);
    assert_eq!(partition.global_semantic_heads, vec![1]);
    assert_eq!(partition.core_semantic_heads, vec![2]);

    let out = align_attention(&rows, 1, &config(0.6, 1.0, MixDomain::RawScores)).unwrap();
    assert_eq!(out[0], vec![1.5, 1.5, 0.5, 0.5]);
    assert_eq!(out[1], vec![0.0, 0.0, 2.0, 0.5]);
    assert_eq!(out[2], rows[2]);
    let reference = alignment_reference(&rows, 1, 0.6, 1.0);
    for (a, b) in out.iter().flatten().zip(reference.iter().flatten()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn matches_reference_on_random_instances() {
    let mut rng = rng(11);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let kappa = 0.2;
        let omega = 1.5;
        let out = align_attention(
            &inst.rows,
            inst.visual_end,
            &config(kappa, omega, MixDomain::RawScores),
        )
        .unwrap();
        let reference = alignment_reference(&inst.rows, inst.visual_end, kappa, omega);
        for (a, b) in out.iter().flatten().zip(reference.iter().flatten()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn core_heads_are_bit_identical() {
    let mut rng = rng(12);
    for _ in 0..300 {
        let inst = random_instance(&mut rng);
        let probs: Vec<Vec<f64>> = inst.rows.iter().map(|r| softmax(r).unwrap()).collect();
        let partition = categorize_heads(&probs, inst.visual_end, 0.2).unwrap();
        for domain in [MixDomain::RawScores, MixDomain::Probabilities] {
            let out =
                align_attention(&inst.rows, inst.visual_end, &config(0.2, 3.0, domain)).unwrap();
            let before = match domain {
                MixDomain::RawScores => &inst.rows,
                MixDomain::Probabilities => &probs,
            };
            for &h in &partition.core_semantic_heads {
                assert_eq!(out[h], before[h]);
            }
        }
    }
}

#[test]
fn probability_mode_keeps_distributions() {
    let mut rng = rng(13);
    for _ in 0..300 {
        let inst = random_instance(&mut rng);
        let probs: Vec<Vec<f64>> = inst.rows.iter().map(|r| softmax(r).unwrap()).collect();
        let partition = categorize_heads(&probs, inst.visual_end, 0.2).unwrap();
        let out = align_attention(
            &inst.rows,
            inst.visual_end,
            &config(0.2, 2.0, MixDomain::Probabilities),
        )
        .unwrap();
        for &h in &partition.other_heads {
            let sum: f64 = out[h].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9 && out[h].iter().all(|&w| w >= 0.0));
        }
        for &h in &partition.global_semantic_heads {
            let sum: f64 = out[h].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn large_omega_reaches_pooled_targets() {
    let mut rng = rng(14);
    let omega = 1e6;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let probs: Vec<Vec<f64>> = inst.rows.iter().map(|r| softmax(r).unwrap()).collect();
        let p = categorize_heads(&probs, inst.visual_end, 0.2).unwrap();
        let out = align_attention(
            &inst.rows,
            inst.visual_end,
            &config(0.2, omega, MixDomain::RawScores),
        )
        .unwrap();
        let width = inst.rows[0].len();
        if !p.global_semantic_heads.is_empty() {
            let mean: Vec<f64> = (0..width)
                .map(|j| {
                    p.global_semantic_heads
                        .iter()
                        .map(|&t| inst.rows[t][j])
                        .sum::<f64>()
                        / p.global_semantic_heads.len() as f64
                })
                .collect();
            for &h in &p.other_heads {
                for j in 0..width {
                    assert!((out[h][j] - mean[j]).abs() <= 1e-4);
                }
            }
        }
        if !p.core_semantic_heads.is_empty() {
            let peak: Vec<f64> = (0..width)
                .map(|j| {
                    p.core_semantic_heads
                        .iter()
                        .map(|&t| inst.rows[t][j])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            for &h in &p.global_semantic_heads {
                for j in 0..width {
                    assert!((out[h][j] - peak[j]).abs() <= 1e-4);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn partition_covers_heads_exactly_once(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..8),
        visual_end in 0usize..5,
        kappa in 0.05f64..0.95,
    ) {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                if s == 0.0 { vec![1.0 / 6.0; 6] } else { r.iter().map(|v| v / s).collect() }
            })
            .collect();
        let p = categorize_heads(&rows, visual_end, kappa).unwrap();
        let mut all: Vec<usize> = p.other_heads.iter()
            .chain(&p.global_semantic_heads)
            .chain(&p.core_semantic_heads)
            .copied()
            .collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..rows.len()).collect::<Vec<_>>());
        prop_assert_eq!(categorize_heads(&rows, visual_end, kappa).unwrap(), p);
    }

    #[test]
    fn zero_omega_is_identity(seed in 0u64..10_000) {
        let mut rng = rng(seed);
        let inst = random_instance(&mut rng);
        for domain in [MixDomain::RawScores, MixDomain::Probabilities] {
            let out = align_attention(&inst.rows, inst.visual_end, &config(0.2, 0.0, domain)).unwrap();
            let expected: Vec<Vec<f64>> = match domain {
                MixDomain::RawScores => inst.rows.clone(),
                MixDomain::Probabilities => inst.rows.iter().map(|r| softmax(r).unwrap()).collect(),
            };
            prop_assert_eq!(out, expected);
        }
    }
}

/// Records which hooks changed anything at which layer.
struct Recording<H> {
    inner: H,
    fired: std::rc::Rc<std::cell::RefCell<Vec<usize>>>,
}

impl<H: AttentionHook> AttentionHook for Recording<H> {
    fn on_scores(
        &mut self,
        ctx: &HookContext<'_>,
        scores: &[Vec<f64>],
    ) -> sevi_lab::Result<HookOutcome> {
        let out = self.inner.on_scores(ctx, scores)?;
        if matches!(out, HookOutcome::Replace(_)) {
            self.fired.borrow_mut().push(ctx.layer);
        }
        Ok(out)
    }
}

#[test]
fn hybrid_boost_and_alignment_fire_in_disjoint_bands() {
    let model = ModelConfig {
        num_layers: 32,
        num_heads: 4,
        model_dim: 16,
        vocab_size: 32,
        max_context: 32,
        init_seed: 2,
        init_scale: 1.0,
        num_visual_tokens: 6,
        patch_dim: 4,
    };
    let params = init_model(&model).unwrap();
    let visual = encode_image(&SyntheticImage::from_seed(&model, 3), &params).unwrap();
    let prompt = [1, 2, 3];
    let layout = SequenceLayout::for_prompt(visual.len(), prompt.len()).unwrap();

    let boost_fired = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
    let align_fired = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
    let mut chain = HookChain::new();
    chain.push(Recording {
        inner: VisualBoostHook {
            config: VisualBoostConfig {
                factor: 2.0,
                layer_range: (2, 15),
            },
        },
        fired: boost_fired.clone(),
    });
    chain.push(Recording {
        inner: AlignHook::new(AlignConfig {
            start_layer: 16,
            ..preset(Mode::Focused)
        }),
        fired: align_fired.clone(),
    });
    forward_full(
        &params,
        &mut KVCache::new(&params),
        &context_inputs(&visual, &prompt),
        &layout,
        Some(&mut chain),
    )
    .unwrap();
    assert_eq!(*boost_fired.borrow(), (2..=15).collect::<Vec<_>>());
    assert_eq!(*align_fired.borrow(), (16..=32).collect::<Vec<_>>());

    // The same hybrid runs end to end through the generator.
    let interventions = Interventions {
        align: Some(AlignConfig {
            start_layer: 16,
            ..preset(Mode::Focused)
        }),
        boost: Some(VisualBoostConfig {
            factor: 2.0,
            layer_range: (2, 15),
        }),
    };
    let out = generate(
        &params,
        &SyntheticImage::from_seed(&model, 3),
        &prompt,
        &interventions,
        &ContrastConfig::default(),
        &GenerationConfig::greedy(4),
    )
    .unwrap();
    assert_eq!(out.tokens.len(), 4);
}

#[test]
fn alignment_changes_the_decoding_query_only() {
    let model = ModelConfig {
        num_layers: 2,
        ..ModelConfig::default()
    };
    let params = init_model(&model).unwrap();
    let visual = encode_image(&SyntheticImage::from_seed(&model, 0), &params).unwrap();
    // a long prompt so that some heads are semantic
    let prompt: Vec<u32> = (0..24).map(|i| (i * 11 + 3) % 256).collect();
    let layout = SequenceLayout::for_prompt(visual.len(), prompt.len()).unwrap();
    let inputs = context_inputs(&visual, &prompt);
    let bare = forward_full(&params, &mut KVCache::new(&params), &inputs, &layout, None).unwrap();
    let mut hook = AlignHook::new(AlignConfig {
        start_layer: 1,
        omega: 4.0,
        ..preset(Mode::Focused)
    });
    let aligned = forward_full(
        &params,
        &mut KVCache::new(&params),
        &inputs,
        &layout,
        Some(&mut hook),
    )
    .unwrap();
    let n = layout.total_len;
    for pos in 0..n - 1 {
        assert_eq!(bare.logits[pos], aligned.logits[pos]);
    }
    assert_ne!(bare.logits[n - 1], aligned.logits[n - 1]);
    // the first layer's earlier rows are untouched
    for h in 0..model.num_heads {
        for q in 0..n - 1 {
            assert_eq!(bare.attention[0].row(h, q), aligned.attention[0].row(h, q));
        }
    }
}
