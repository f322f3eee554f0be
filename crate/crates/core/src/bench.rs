//! Forward/backward timing and live-memory accounting for model configurations.
//!
//! Every arm is timed as the sum over ten batches. Repetitions are interleaved
//! across arms so slow drift on the machine affects all arms alike.

use std::fmt;
use std::time::Instant;

use crate::data::{generate, Batch, BatchStream};
use crate::error::{Error, Result};
use crate::fm_prune::MaskSet;
use crate::graph::Graph;
use crate::model::{count_params, materialize, model_forward, ForwardOptions, FoundationModel, ParamCounts};
use crate::optim::AdamW;
use crate::peft::{attach_at, attach_estimation_set, PeftSet, Site};
use crate::peft_prune::prune_peft;
use crate::pipeline::{train_step, TrainConfig};
use crate::plan::PruningPlan;
use crate::tensor::derive_seed;

pub const BATCHES_PER_SAMPLE: usize = 10;
pub const MIN_REPS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    /// Half, default and double `(layers, hidden)`.
    ModelSize,
    /// LoRA on Q and V with rank 8, 16, 32.
    RankSweep,
    /// Equal trainable parameters spread over 1, 2 and 4 attention sites.
    ModuleCountSweep,
    /// Dense LoRA against a materialized model keeping half the heads and FFN units.
    PrunedVsDense,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [
        BenchMode::ModelSize,
        BenchMode::RankSweep,
        BenchMode::ModuleCountSweep,
        BenchMode::PrunedVsDense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::ModelSize => "model-size",
            BenchMode::RankSweep => "rank-sweep",
            BenchMode::ModuleCountSweep => "module-count-sweep",
            BenchMode::PrunedVsDense => "pruned-vs-dense",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One configuration under test.
#[derive(Clone, Debug)]
pub struct BenchArm {
    pub label: String,
    pub model: FoundationModel,
    pub peft: PeftSet,
}

/// Sample mean and unbiased variance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub var: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Stats {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stats { mean, var }
    }
}

/// Live bytes during one training step, by owner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryBreakdown {
    pub weights: usize,
    pub grads: usize,
    pub optimizer: usize,
    pub activations: usize,
}

impl MemoryBreakdown {
    pub fn total(&self) -> usize {
        self.weights + self.grads + self.optimizer + self.activations
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub label: String,
    /// Seconds for ten forward passes, over the repetitions.
    pub forward: Stats,
    /// Seconds for the matching ten backward passes.
    pub backward: Stats,
    pub memory: MemoryBreakdown,
    pub params: ParamCounts,
    /// Per-repetition forward time of the first arm divided by this arm's.
    pub forward_speedup: Stats,
    pub backward_speedup: Stats,
}

/// Times every arm on the same batches; the first arm is the reference for the ratios.
pub fn run_arms(arms: &[BenchArm], batches: &[Batch], reps: usize) -> Result<Vec<BenchResult>> {
    if arms.is_empty() || batches.is_empty() {
        return Err(Error::contract("bench needs at least one arm and one batch"));
    }
    let reps = reps.max(MIN_REPS);
    let mut fwd = vec![Vec::with_capacity(reps); arms.len()];
    let mut bwd = vec![Vec::with_capacity(reps); arms.len()];
    // one untimed pass per arm so first-touch allocation is not charged to anyone
    for arm in arms {
        time_passes(arm, &batches[..1])?;
    }
    for _ in 0..reps {
        for (i, arm) in arms.iter().enumerate() {
            let (f, b) = time_passes(arm, batches)?;
            fwd[i].push(f);
            bwd[i].push(b);
        }
    }
    let ratio = |reference: &[f64], xs: &[f64]| -> Vec<f64> { reference.iter().zip(xs).map(|(r, x)| r / x).collect() };
    arms.iter()
        .enumerate()
        .map(|(i, arm)| {
            Ok(BenchResult {
                label: arm.label.clone(),
                forward: Stats::of(&fwd[i]),
                backward: Stats::of(&bwd[i]),
                memory: training_memory(arm, &batches[0])?,
                params: count_params(&arm.model, &arm.peft, None),
                forward_speedup: Stats::of(&ratio(&fwd[0], &fwd[i])),
                backward_speedup: Stats::of(&ratio(&bwd[0], &bwd[i])),
            })
        })
        .collect()
}

fn time_passes(arm: &BenchArm, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut f, mut b) = (0.0, 0.0);
    for batch in batches {
        let mut g = Graph::new();
        let t0 = Instant::now();
        let (logits, _) = model_forward(
            &mut g,
            &arm.model,
            None,
            &arm.peft,
            &batch.tokens,
            batch.size(),
            batch.seq_len,
            ForwardOptions::training(),
        )?;
        let loss = g.softmax_ce(logits, &batch.labels)?;
        f += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        g.backward(loss)?;
        b += t0.elapsed().as_secs_f64();
    }
    Ok((f, b))
}

/// Weights, gradients, AdamW moments and the tape at the end of backward.
pub fn training_memory(arm: &BenchArm, batch: &Batch) -> Result<MemoryBreakdown> {
    let mut model = arm.model.clone();
    let mut peft = arm.peft.clone();
    let mut opt = AdamW::new(Default::default());
    train_step(
        &mut model,
        &mut peft,
        None,
        &Default::default(),
        batch,
        &mut opt,
        0.0,
        None,
    )?;

    let mut g = Graph::new();
    let (logits, trace) = model_forward(
        &mut g,
        &model,
        None,
        &peft,
        &batch.tokens,
        batch.size(),
        batch.seq_len,
        ForwardOptions::training(),
    )?;
    let loss = g.softmax_ce(logits, &batch.labels)?;
    g.backward(loss)?;
    let grads: usize = trace
        .trainable
        .iter()
        .filter_map(|(_, v)| g.grad(*v))
        .map(std::mem::size_of_val)
        .sum();
    let weights = model.live_bytes()
        + peft
            .modules
            .iter()
            .map(|m| m.down.live_bytes() + m.up.live_bytes())
            .sum::<usize>();
    Ok(MemoryBreakdown {
        weights,
        grads,
        optimizer: opt.live_bytes(),
        activations: g.live_bytes() - grads,
    })
}

/// The arms a mode compares, built from `cfg`.
pub fn arms_for(mode: BenchMode, cfg: &TrainConfig) -> Result<Vec<BenchArm>> {
    let seed = derive_seed(cfg.seed, 0xBE);
    let model = FoundationModel::init(&cfg.model, cfg.foundation_seed)?;
    let lora = |model: &FoundationModel, sites: &[Site], rank: usize| -> Result<PeftSet> {
        let mut p = cfg.peft;
        p.rank = rank;
        attach_at(&model.config, &model.layout, &p, sites, seed)
    };
    let arms = match mode {
        BenchMode::ModelSize => {
            let mut out = Vec::new();
            for (num, den) in [(1, 2), (1, 1), (2, 1)] {
                let mut mc = cfg.model.clone();
                mc.layers = (mc.layers * num / den).max(1);
                mc.hidden = (mc.hidden * num / den).max(mc.heads);
                mc.ffn_dim = (mc.ffn_dim * num / den).max(1);
                let m = FoundationModel::init(&mc, cfg.foundation_seed)?;
                let peft = lora(&m, &[Site::Q, Site::V], cfg.peft.rank)?;
                out.push(BenchArm {
                    label: format!("L={} d={}", mc.layers, mc.hidden),
                    model: m,
                    peft,
                });
            }
            out
        }
        BenchMode::RankSweep => [8, 16, 32]
            .into_iter()
            .map(|r| {
                Ok(BenchArm {
                    label: format!("QV r={r}"),
                    model: model.clone(),
                    peft: lora(&model, &[Site::Q, Site::V], r)?,
                })
            })
            .collect::<Result<_>>()?,
        BenchMode::ModuleCountSweep => [
            (&[Site::Q][..], 32, "Q r=32"),
            (&[Site::Q, Site::K][..], 16, "QK r=16"),
            (&[Site::Q, Site::K, Site::V, Site::O][..], 8, "QKVO r=8"),
        ]
        .into_iter()
        .map(|(sites, r, label)| {
            Ok(BenchArm {
                label: label.to_string(),
                model: model.clone(),
                peft: lora(&model, sites, r)?,
            })
        })
        .collect::<Result<_>>()?,
        BenchMode::PrunedVsDense => {
            let dense_peft = attach_estimation_set(&model.config, &model.layout, &cfg.peft, seed)?;
            let (pruned_model, pruned_peft) = half_pruned(&model, &dense_peft)?;
            vec![
                BenchArm {
                    label: "dense".into(),
                    model,
                    peft: dense_peft,
                },
                BenchArm {
                    label: "pruned".into(),
                    model: pruned_model,
                    peft: pruned_peft,
                },
            ]
        }
    };
    Ok(arms)
}

/// Keeps the first half of the heads and of the FFN units in every layer, and every module.
pub fn half_pruned(model: &FoundationModel, peft: &PeftSet) -> Result<(FoundationModel, PeftSet)> {
    let masks = MaskSet::ones(&model.layout);
    let half = |ids: &Vec<usize>| ids[..ids.len().div_ceil(2)].to_vec();
    let mut plan = PruningPlan::identity(&model.layout, peft);
    plan.heads = model.layout.heads.iter().map(half).collect();
    plan.ffn = model.layout.ffn.iter().map(half).collect();
    let m = materialize(model, &plan, Some(&masks))?;
    let p = prune_peft(peft, &plan, &model.layout, Some(&masks), model.config.head_dim())?;
    Ok((m, p))
}

/// `count` batches of the configured task and batch size.
pub fn bench_batches(cfg: &TrainConfig, count: usize) -> Result<Vec<Batch>> {
    let (train, _) = generate(&cfg.task)?;
    let stream = BatchStream::new(&train, cfg.batch_size, derive_seed(cfg.seed, 0xBE))?;
    Ok(stream.take(count).collect())
}

/// Builds the arms for `mode` and times them.
pub fn bench(mode: BenchMode, cfg: &TrainConfig, reps: usize) -> Result<Vec<BenchResult>> {
    cfg.validate()?;
    let arms = arms_for(mode, cfg)?;
    let batches = bench_batches(cfg, BATCHES_PER_SAMPLE)?;
    run_arms(&arms, &batches, reps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_by_hand() {
        let s = Stats::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.var, 1.0);
        assert_eq!(Stats::of(&[5.0]).var, 0.0);
    }

    #[test]
    fn module_count_arms_hold_trainable_params_fixed() {
        let cfg = TrainConfig::default();
        let arms = arms_for(BenchMode::ModuleCountSweep, &cfg).unwrap();
        let counts: Vec<usize> = arms.iter().map(|a| a.peft.param_count()).collect();
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
        assert_eq!(arms[2].peft.len(), 4 * cfg.model.layers);
    }

    #[test]
    fn half_pruned_keeps_half_the_units() {
        let cfg = TrainConfig::default();
        let arms = arms_for(BenchMode::PrunedVsDense, &cfg).unwrap();
        let layout = &arms[1].model.layout;
        assert_eq!(layout.total_heads() * 2, arms[0].model.layout.total_heads());
        assert_eq!(layout.total_ffn() * 2, arms[0].model.layout.total_ffn());
        assert_eq!(arms[1].peft.len(), arms[0].peft.len());
    }
}
