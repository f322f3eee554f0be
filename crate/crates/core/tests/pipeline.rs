#![allow(clippy::field_reassign_with_default)]

mod common;

use common::{logits, max_abs_diff, rng, tokens};
use light_peft::data::{generate, TaskKind};
use light_peft::fm_prune::MaskSet;
use light_peft::model::{count_params, HeadLayout, ModelConfig};
use light_peft::peft::{attach_estimation_set, PeftConfig};
use light_peft::peft_prune::{prune_peft, select_modules, select_ranks, ImportanceLedger};
use light_peft::pipeline::{
    estimate, evaluate, finetune, initial_state, predicted_foundation_params, prune_all, run_all_on, TrainConfig,
};
use light_peft::plan::PruningPlan;
use rand::Rng;

/// Small and quick: 2 layers, d=32, 64 training sequences of length 8.
fn quick() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        max_seq: 8,
        ..ModelConfig::toy(2, 32, 4, 64)
    };
    cfg.task.seq_len = 8;
    cfg.task.train_size = 128;
    cfg.task.eval_size = 64;
    cfg.batch_size = 16;
    cfg.total_steps = 40;
    cfg.estimation_steps = 4;
    cfg
}

#[test]
fn same_seed_gives_the_same_plan_and_ledger() {
    let cfg = quick();
    let (train, _) = generate(&cfg.task).unwrap();
    let once = || {
        let (mut m, mut p, mut k) = initial_state(&cfg).unwrap();
        let est = estimate(&mut m, &mut p, &mut k, &train, &cfg).unwrap();
        let pruned = prune_all(&m, &p, &k, &est.ledger, &cfg).unwrap();
        (est.ledger, pruned.plan)
    };
    let (l1, p1) = once();
    let (l2, p2) = once();
    assert_eq!(p1, p2);
    let bits = |l: &ImportanceLedger| -> Vec<u64> {
        l.module_mean
            .iter()
            .chain(l.rank_scores.iter().flatten())
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(bits(&l1), bits(&l2));
    assert_eq!(l1, l2);
}

#[test]
fn end_to_end_run_is_deterministic() {
    let cfg = quick();
    let (train, eval) = generate(&cfg.task).unwrap();
    let a = run_all_on(&cfg, &train, &eval).unwrap().report;
    let b = run_all_on(&cfg, &train, &eval).unwrap().report;
    assert_eq!(a.plan, b.plan);
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    assert_eq!(a.finetune_losses, b.finetune_losses);
}

#[test]
fn zero_estimation_steps_leave_masks_at_one_and_the_ledger_empty() {
    let mut cfg = quick();
    cfg.estimation_steps = 0;
    let (train, eval) = generate(&cfg.task).unwrap();
    let (mut m, mut p, mut k) = initial_state(&cfg).unwrap();
    let est = estimate(&mut m, &mut p, &mut k, &train, &cfg).unwrap();
    assert!(k.head.iter().chain(&k.ffn).all(|t| t.data().iter().all(|&v| v == 1.0)));
    assert_eq!(est.ledger.steps_observed, 0);
    assert!(est.ledger.module_mean.iter().all(|&v| v == 0.0));
    assert!(est.ledger.rank_scores.iter().flatten().all(|&v| v == 0.0));

    // all-tie selection drops the lowest indices first
    let pruned = prune_all(&m, &p, &k, &est.ledger, &cfg).unwrap();
    assert_eq!(pruned.plan.heads[0], vec![1, 2, 3]);
    let report = run_all_on(&cfg, &train, &eval).unwrap().report;
    assert!(report.estimation_skipped);
    assert!(report.estimation_losses.is_empty());
}

#[test]
fn zero_rates_keep_a_functionally_identical_model() {
    let mut cfg = quick();
    (cfg.rho_a, cfg.rho_f, cfg.rho_m, cfg.rho_r) = (0.0, 0.0, 0.0, 0.0);
    let (train, _) = generate(&cfg.task).unwrap();
    let (mut m, mut p, mut k) = initial_state(&cfg).unwrap();
    let est = estimate(&mut m, &mut p, &mut k, &train, &cfg).unwrap();
    let pruned = prune_all(&m, &p, &k, &est.ledger, &cfg).unwrap();
    assert_eq!(pruned.plan, PruningPlan::identity(&m.layout, &p));
    let toks = tokens(4 * 8, cfg.model.vocab_size, &mut rng(1));
    let masked = logits(&m, Some(&k), &p, &toks, 4, 8);
    let folded = logits(&pruned.model, None, &pruned.peft, &toks, 4, 8);
    assert!(max_abs_diff(&masked, &folded) <= 1e-10);
}

#[test]
fn reported_retention_equals_the_closed_form_prediction() {
    let cfg = quick();
    let (train, eval) = generate(&cfg.task).unwrap();
    let rep = run_all_on(&cfg, &train, &eval).unwrap().report;
    assert_eq!(
        rep.after.foundation,
        predicted_foundation_params(&cfg.model, cfg.rho_a, cfg.rho_f)
    );
    assert_eq!(
        rep.foundation_retention,
        rep.after.foundation as f64 / rep.before.foundation as f64
    );
}

#[test]
fn estimation_never_touches_frozen_weights() {
    let cfg = quick();
    let (train, _) = generate(&cfg.task).unwrap();
    let (mut m, mut p, mut k) = initial_state(&cfg).unwrap();
    let before = m.foundation_fingerprint();
    let snapshot = m.clone();
    estimate(&mut m, &mut p, &mut k, &train, &cfg).unwrap();
    assert_eq!(m.foundation_fingerprint(), before);
    for id in m.foundation_param_ids() {
        let same = m
            .param(id)
            .data()
            .iter()
            .zip(snapshot.param(id).data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{id:?} moved");
    }
}

#[test]
fn zero_finetune_steps_leave_peft_unchanged() {
    let cfg = quick();
    let (train, _) = generate(&cfg.task).unwrap();
    let (mut m, mut p, _) = initial_state(&cfg).unwrap();
    let before = p.clone();
    assert!(finetune(&mut m, &mut p, &train, &cfg, 0).unwrap().is_empty());
    assert_eq!(p, before);
}

#[test]
fn training_loss_is_finite_and_falls() {
    let mut cfg = quick();
    cfg.total_steps = 200;
    cfg.estimation_steps = 20;
    cfg.task.kind = TaskKind::Majority;
    let (train, eval) = generate(&cfg.task).unwrap();
    let rep = run_all_on(&cfg, &train, &eval).unwrap().report;
    let losses = &rep.finetune_losses;
    assert!(losses.iter().all(|l| l.is_finite()));
    // 10-step block means, allowing batch-to-batch noise of 0.1 nats
    let blocks: Vec<f64> = losses.chunks_exact(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    let mut best = f64::INFINITY;
    for (i, &b) in blocks.iter().enumerate() {
        assert!(b <= best + 0.1, "block {i} mean {b} rose above {best}");
        best = best.min(b);
    }
    assert!(blocks.last().unwrap() < &(blocks[0] - 0.1), "{blocks:?}");
}

#[test]
fn random_logits_score_chance_on_balanced_data() {
    let mut cfg = quick();
    cfg.task.eval_size = 1000;
    let (_, eval) = generate(&cfg.task).unwrap();
    assert_eq!(eval.labels.iter().filter(|&&l| l == 1).count(), 500);
    let mut r = rng(9);
    let correct = eval
        .labels
        .iter()
        .filter(|&&label| {
            let (a, b): (f64, f64) = (r.gen(), r.gen());
            usize::from(b > a) == label
        })
        .count();
    let acc = correct as f64 / eval.len() as f64;
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn separable_task_is_learned() {
    let mut cfg = quick();
    cfg.task.kind = TaskKind::Majority;
    cfg.task.seq_len = 3;
    cfg.task.train_size = 1024;
    cfg.task.eval_size = 512;
    cfg.batch_size = 32;
    cfg.total_steps = 300;
    cfg.estimation_steps = 30;
    let (train, eval) = generate(&cfg.task).unwrap();
    let out = run_all_on(&cfg, &train, &eval).unwrap();
    assert!(out.report.accuracy >= 0.95, "{}", out.report.accuracy);
    let again = evaluate(&out.pruned.model, &out.pruned.peft, &eval).unwrap();
    assert_eq!(again.to_bits(), out.report.accuracy.to_bits());
}

#[test]
fn module_and_rank_cuts_shrink_trainable_params() {
    let mut cfg = quick();
    cfg.rho_m = 0.75;
    cfg.rho_r = 0.5;
    let (train, eval) = generate(&cfg.task).unwrap();
    let rep = run_all_on(&cfg, &train, &eval).unwrap().report;
    assert_eq!(rep.plan.modules.len(), 3);
    assert!(
        rep.after.peft as f64 <= 0.25 * rep.before.peft as f64,
        "{} of {}",
        rep.after.peft,
        rep.before.peft
    );
}

#[test]
fn roberta_shape_module_and_rank_cuts_compose_to_an_eighth() {
    let cfg = ModelConfig::roberta_large();
    let layout = HeadLayout::full(&cfg);
    let peft = attach_estimation_set(&cfg, &layout, &PeftConfig::default(), 3).unwrap();
    assert_eq!(peft.len(), 144);
    let mut r = rng(4);
    let mut ledger = ImportanceLedger::new(&peft);
    ledger.module_mean.iter_mut().for_each(|v| *v = r.gen());
    ledger.rank_scores.iter_mut().flatten().for_each(|v| *v = r.gen());
    let kept = select_modules(&ledger, 0.75).unwrap();
    assert_eq!(kept.len(), 36);
    let ranks = select_ranks(&ledger, &kept, 0.5).unwrap();
    assert_eq!(ranks.keep.iter().map(Vec::len).sum::<usize>(), 144);

    let plan = PruningPlan {
        modules: kept.iter().map(|&i| ledger.modules[i]).collect(),
        ranks: ranks.keep,
        ..PruningPlan::identity(&layout, &peft)
    };
    let small = prune_peft(&peft, &plan, &layout, None::<&MaskSet>, cfg.head_dim()).unwrap();
    let ratio = small.param_count() as f64 / peft.param_count() as f64;
    // exactly 1/8 of the ranks; the parameter share depends on which sites survive
    assert!((ratio - 0.125).abs() <= 0.03, "{ratio}");
    assert_eq!(small.total_ranks() * 8, peft.total_ranks());
}

#[test]
fn lora_on_one_weight_adds_two_factor_matrices() {
    let cfg = ModelConfig::toy(1, 32, 4, 64);
    let m = light_peft::model::FoundationModel::init(&cfg, 1).unwrap();
    let peft =
        light_peft::peft::attach_at(&cfg, &m.layout, &PeftConfig::default(), &[light_peft::peft::Site::Q], 2).unwrap();
    let with = count_params(&m, &peft, None);
    let without = count_params(&m, &light_peft::peft::PeftSet::empty(), None);
    assert_eq!(with.trainable - without.trainable, 2 * 32 * 8);
}
