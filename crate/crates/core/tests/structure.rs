mod common;

use common::{full_lora, logits, max_abs_diff, perturb_norms, random_masks, rng, tiny, tokens};
use light_peft::fm_prune::MaskSet;
use light_peft::graph::Graph;
use light_peft::model::{
    ffn_forward, mha_forward, model_forward, ForwardOptions, FoundationModel, FoundationParam, ModelConfig, ParamId,
};
use light_peft::peft::{PeftSet, Site};
use light_peft::tensor::Tensor;

fn input(batch: usize, seq: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![batch, seq, d], 1.0, &mut rng(seed))
}

fn mha(model: &FoundationModel, x: &Tensor, masks: Option<&MaskSet>, peft: &PeftSet) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let out = mha_forward(&mut g, model, xv, 0, masks, peft).unwrap();
    g.value(out).to_vec()
}

fn ffn(model: &FoundationModel, x: &Tensor, masks: Option<&MaskSet>) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let out = ffn_forward(&mut g, model, xv, 0, masks, &PeftSet::empty()).unwrap();
    g.value(out).to_vec()
}

fn model(cfg: &ModelConfig, seed: u64) -> FoundationModel {
    FoundationModel::init(cfg, seed).unwrap()
}

#[test]
fn zeroed_head_mask_equals_zeroed_head_weights() {
    let cfg = tiny(1, 12, 3, 8);
    let m = model(&cfg, 1);
    let x = input(2, 5, 12, 2);
    let dh = cfg.head_dim();
    for head in 0..cfg.heads {
        let mut masks = MaskSet::ones(&m.layout);
        masks.head[0].data_mut()[head] = 0.0;
        let masked = mha(&m, &x, Some(&masks), &PeftSet::empty());

        let mut zeroed = m.clone();
        let w = &mut zeroed.layers[0];
        for r in 0..cfg.hidden {
            for c in head * dh..(head + 1) * dh {
                w.wq.set2(r, c, 0.0);
                w.wk.set2(r, c, 0.0);
                w.wv.set2(r, c, 0.0);
                w.wo.set2(c, r, 0.0);
            }
        }
        let reference = mha(&zeroed, &x, None, &PeftSet::empty());
        assert!(max_abs_diff(&masked, &reference) <= 1e-10, "head {head}");
    }
}

#[test]
fn head_contribution_scales_linearly_with_its_mask() {
    let cfg = tiny(1, 12, 3, 8);
    let m = model(&cfg, 3);
    let x = input(2, 4, 12, 4);
    let only = |value: f64| {
        let mut masks = MaskSet::ones(&m.layout);
        masks.head[0].data_mut().copy_from_slice(&[0.0, value, 0.0]);
        mha(&m, &x, Some(&masks), &PeftSet::empty())
    };
    let full = only(1.0);
    let half = only(0.5);
    let halved: Vec<f64> = full.iter().map(|v| 0.5 * v).collect();
    assert!(max_abs_diff(&half, &halved) <= 1e-12);

    // with every head at 0.5 the sub-layer output is also halved, but the model's
    // logits are not: later layer norms and attention are nonlinear
    let big = tiny(2, 12, 3, 8);
    let m2 = model(&big, 5);
    let toks = tokens(8, big.vocab_size, &mut rng(6));
    let ones = MaskSet::ones(&m2.layout);
    let mut halves = ones.clone();
    halves
        .head
        .iter_mut()
        .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.5));
    let a = logits(&m2, Some(&ones), &PeftSet::empty(), &toks, 2, 4);
    let b = logits(&m2, Some(&halves), &PeftSet::empty(), &toks, 2, 4);
    let scaled: Vec<f64> = a.iter().map(|v| 0.5 * v).collect();
    assert!(max_abs_diff(&b, &scaled) > 1e-6);
}

#[test]
fn zeroed_ffn_unit_equals_removed_unit() {
    let cfg = tiny(1, 8, 2, 10);
    let m = model(&cfg, 7);
    let x = input(3, 2, 8, 8);
    for unit in [0, 4, 9] {
        let mut masks = MaskSet::ones(&m.layout);
        masks.ffn[0].data_mut()[unit] = 0.0;
        let masked = ffn(&m, &x, Some(&masks));

        let keep: Vec<usize> = (0..cfg.ffn_dim).filter(|&j| j != unit).collect();
        let mut removed = m.clone();
        removed.layers[0].fc1 = m.layers[0].fc1.select_cols(&keep).unwrap();
        removed.layers[0].fc2 = m.layers[0].fc2.select_rows(&keep).unwrap();
        removed.layout.ffn[0] = keep;
        let reference = ffn(&removed, &x, None);
        assert!(max_abs_diff(&masked, &reference) <= 1e-10, "unit {unit}");
    }
}

#[test]
fn doubled_ffn_mask_doubles_the_branch() {
    let cfg = tiny(1, 8, 2, 10);
    let m = model(&cfg, 9);
    let x = input(2, 3, 8, 10);
    let mut twos = MaskSet::ones(&m.layout);
    twos.ffn[0].data_mut().iter_mut().for_each(|v| *v = 2.0);
    let base = ffn(&m, &x, None);
    let doubled = ffn(&m, &x, Some(&twos));
    let expected: Vec<f64> = base.iter().map(|v| 2.0 * v).collect();
    assert!(max_abs_diff(&doubled, &expected) <= 1e-12);
}

#[test]
fn unit_masks_match_the_unmasked_path() {
    let cfg = tiny(2, 8, 2, 10);
    let m = model(&cfg, 11);
    let x = input(2, 3, 8, 12);
    let ones = MaskSet::ones(&m.layout);
    assert_eq!(
        mha(&m, &x, Some(&ones), &PeftSet::empty()),
        mha(&m, &x, None, &PeftSet::empty())
    );
    assert_eq!(ffn(&m, &x, Some(&ones)), ffn(&m, &x, None));
}

#[test]
fn zeroed_head_receives_no_gradient() {
    let cfg = tiny(2, 12, 3, 8);
    let mut r = rng(13);
    let mut m = model(&cfg, 14);
    perturb_norms(&mut m, &mut r);
    let peft = full_lora(&m, 2, &mut r);
    let mut masks = random_masks(&m, &mut r);
    let head = 1;
    masks.head[1].data_mut()[head] = 0.0;
    let toks = tokens(10, cfg.vocab_size, &mut r);

    let mut g = Graph::new();
    let opts = ForwardOptions {
        track_trainable: true,
        foundation_grads: true,
        observe_modules: false,
    };
    let (out, trace) = model_forward(&mut g, &m, Some(&masks), &peft, &toks, 2, 5, opts).unwrap();
    let loss = g.softmax_ce(out, &[0, 1]).unwrap();
    g.backward(loss).unwrap();

    let dh = cfg.head_dim();
    let cols = head * dh..(head + 1) * dh;
    let grad_of = |p: FoundationParam| {
        let var = trace.foundation.iter().find(|(q, _)| *q == p).unwrap().1;
        g.grad(var).unwrap().to_vec()
    };
    for p in [FoundationParam::Wq(1), FoundationParam::Wk(1), FoundationParam::Wv(1)] {
        let grad = grad_of(p);
        for row in grad.chunks(cfg.hidden) {
            assert!(row[cols.clone()].iter().all(|&v| v == 0.0), "{p:?}");
            assert!(row.iter().any(|&v| v != 0.0), "{p:?} has no signal at all");
        }
    }
    let wo = grad_of(FoundationParam::Wo(1));
    for c in cols.clone() {
        assert!(wo[c * cfg.hidden..(c + 1) * cfg.hidden].iter().all(|&v| v == 0.0));
    }
    // the LoRA up-projections on Q, K and V feed head 1 through the same columns
    let mut ups = 0;
    for (id, var) in &trace.trainable {
        if let ParamId::PeftUp(i) = id {
            let at = peft.modules[*i].attach;
            if at.layer == 1 && matches!(at.site, Site::Q | Site::K | Site::V) {
                let grad = g.grad(*var).unwrap();
                for row in grad.chunks(cfg.hidden) {
                    assert!(row[cols.clone()].iter().all(|&v| v == 0.0));
                }
                ups += 1;
            }
        }
    }
    assert_eq!(ups, 3);
}

/// Straight-line forward of a 1-layer, 1-head model for `[seq]` tokens.
fn reference_logits(m: &FoundationModel, toks: &[u32]) -> Vec<f64> {
    let cfg = &m.config;
    let (d, f, seq) = (cfg.hidden, cfg.ffn_dim, toks.len());
    let w = &m.layers[0];
    let matvec = |x: &[f64], w: &Tensor, cols: usize| -> Vec<f64> {
        (0..cols)
            .map(|c| x.iter().enumerate().map(|(r, xv)| xv * w.get2(r, c)).sum())
            .collect()
    };
    let norm = |x: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = (var + cfg.ln_eps).sqrt();
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / sd * g.data()[j] + b.data()[j])
            .collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());

    let mut h: Vec<Vec<f64>> = toks
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            (0..d)
                .map(|j| m.token_embed.get2(tok as usize, j) + m.pos_embed.get2(t, j))
                .collect()
        })
        .collect();
    let n1: Vec<Vec<f64>> = h.iter().map(|x| norm(x, &w.ln1_gain, &w.ln1_bias)).collect();
    let q: Vec<Vec<f64>> = n1.iter().map(|x| matvec(x, &w.wq, d)).collect();
    let k: Vec<Vec<f64>> = n1.iter().map(|x| matvec(x, &w.wk, d)).collect();
    let v: Vec<Vec<f64>> = n1.iter().map(|x| matvec(x, &w.wv, d)).collect();
    for i in 0..seq {
        let scores: Vec<f64> = (0..seq)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let att: Vec<f64> = (0..d).map(|c| (0..seq).map(|j| e[j] / z * v[j][c]).sum()).collect();
        let o = matvec(&att, &w.wo, d);
        h[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
    }
    for x in h.iter_mut() {
        let n2 = norm(x, &w.ln2_gain, &w.ln2_bias);
        let a: Vec<f64> = matvec(&n2, &w.fc1, f).into_iter().map(gelu).collect();
        let out = matvec(&a, &w.fc2, d);
        x.iter_mut().zip(out).for_each(|(p, q)| *p += q);
    }
    let mut pooled = vec![0.0; d];
    for x in &h {
        for (p, v) in pooled.iter_mut().zip(norm(x, &m.final_gain, &m.final_bias)) {
            *p += v / seq as f64;
        }
    }
    let mut out = matvec(&pooled, &m.classifier_w, cfg.num_classes);
    out.iter_mut().zip(m.classifier_b.data()).for_each(|(o, b)| *o += b);
    out
}

#[test]
fn one_layer_one_head_matches_a_hand_rolled_reference() {
    let cfg = ModelConfig {
        num_classes: 3,
        ..tiny(1, 6, 1, 10)
    };
    let mut r = rng(15);
    let mut m = model(&cfg, 16);
    perturb_norms(&mut m, &mut r);
    let (batch, seq) = (3, 5);
    let toks = tokens(batch * seq, cfg.vocab_size, &mut r);
    let got = logits(&m, None, &PeftSet::empty(), &toks, batch, seq);
    for b in 0..batch {
        let expected = reference_logits(&m, &toks[b * seq..(b + 1) * seq]);
        let row = &got[b * cfg.num_classes..(b + 1) * cfg.num_classes];
        assert!(max_abs_diff(row, &expected) <= 1e-8, "{row:?} vs {expected:?}");
    }
}

#[test]
fn identity_plan_with_unit_masks_is_parameter_identical() {
    use light_peft::model::materialize;
    use light_peft::plan::PruningPlan;
    let cfg = tiny(2, 8, 2, 10);
    let m = model(&cfg, 17);
    let plan = PruningPlan::identity(&m.layout, &PeftSet::empty());
    let same = materialize(&m, &plan, Some(&MaskSet::ones(&m.layout))).unwrap();
    assert_eq!(same, m);
}
