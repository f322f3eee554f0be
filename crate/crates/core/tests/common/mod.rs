#![allow(dead_code)]

pub mod gradcheck;

use light_peft::fm_prune::MaskSet;
use light_peft::graph::Graph;
use light_peft::model::{model_forward, ForwardOptions, FoundationModel, ModelConfig};
use light_peft::peft::{attach_at, PeftConfig, PeftKind, PeftSet};
use light_peft::tensor::{seeded_rng, SeededRng, Tensor};
use rand::Rng;

pub fn rng(seed: u64) -> SeededRng {
    seeded_rng(seed)
}

/// Small config with a short vocabulary and sequence, for tests that need many forwards.
pub fn tiny(layers: usize, hidden: usize, heads: usize, ffn_dim: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_seq: 6,
        ..ModelConfig::toy(layers, hidden, heads, ffn_dim)
    }
}

pub fn tokens(n: usize, vocab: usize, rng: &mut SeededRng) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Fills every tensor with fresh values so no branch is trivially zero.
pub fn perturb_peft(peft: &mut PeftSet, std: f64, rng: &mut SeededRng) {
    for m in &mut peft.modules {
        m.down = Tensor::randn(m.down.shape().to_vec(), std, rng).with_requires_grad(true);
        m.up = Tensor::randn(m.up.shape().to_vec(), std, rng).with_requires_grad(true);
    }
}

/// Moves LayerNorm gains/biases and the final norm off their identity init.
pub fn perturb_norms(model: &mut FoundationModel, rng: &mut SeededRng) {
    let d = model.config.hidden;
    let near_one = |rng: &mut SeededRng| {
        let mut t = Tensor::randn(vec![d], 0.2, rng);
        t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        t
    };
    for l in &mut model.layers {
        l.ln1_gain = near_one(rng);
        l.ln2_gain = near_one(rng);
        l.ln1_bias = Tensor::randn(vec![d], 0.2, rng);
        l.ln2_bias = Tensor::randn(vec![d], 0.2, rng);
    }
    model.final_gain = near_one(rng);
    model.final_bias = Tensor::randn(vec![d], 0.2, rng);
    model.classifier_b = Tensor::randn(vec![model.config.num_classes], 0.2, rng).with_requires_grad(true);
}

pub fn random_masks(model: &FoundationModel, rng: &mut SeededRng) -> MaskSet {
    let mut masks = MaskSet::ones(&model.layout);
    for t in masks.head.iter_mut().chain(masks.ffn.iter_mut()) {
        for v in t.data_mut() {
            *v = rng.gen_range(0.3..1.5);
        }
    }
    masks
}

/// LoRA on every projection with non-zero factors.
pub fn full_lora(model: &FoundationModel, rank: usize, rng: &mut SeededRng) -> PeftSet {
    let cfg = PeftConfig {
        kind: PeftKind::Lora,
        rank,
        scale: 2.0,
    };
    let mut peft = attach_at(&model.config, &model.layout, &cfg, PeftKind::Lora.sites(), rng.gen()).unwrap();
    perturb_peft(&mut peft, 0.3, rng);
    peft
}

pub fn logits(
    model: &FoundationModel,
    masks: Option<&MaskSet>,
    peft: &PeftSet,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Vec<f64> {
    let mut g = Graph::new();
    let (out, _) = model_forward(
        &mut g,
        model,
        masks,
        peft,
        tokens,
        batch,
        seq,
        ForwardOptions::inference(),
    )
    .unwrap();
    g.value(out).to_vec()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `|a - n| <= rel * max(|a|, |n|) + floor`.
pub fn close(a: f64, n: f64, rel: f64, floor: f64) -> bool {
    (a - n).abs() <= rel * a.abs().max(n.abs()) + floor
}
