//! The training lifecycle: estimation (masks + PEFT trained jointly while
//! importance is recorded), one-shot pruning, fine-tuning and evaluation.

use std::time::{Duration, Instant};

use log::{info, warn};

use crate::data::{generate, Batch, BatchStream, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::fm_prune::{check_rate, drop_count, mask_loss, select_ffn_dims, select_heads, MaskPenalty, MaskSet};
use crate::graph::Graph;
use crate::model::{
    count_params, materialize, model_forward, ForwardOptions, FoundationModel, HeadLayout, ModelConfig, ParamCounts,
    ParamId,
};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::peft::{attach_estimation_set, AttachPoint, PeftConfig, PeftSet};
use crate::peft_prune::{norm_ratio, prune_peft, rank_importance, select_modules, select_ranks, ImportanceLedger};
use crate::plan::PruningPlan;
use crate::tensor::derive_seed;

/// Sub-seed streams derived from the run seed.
const PEFT_INIT_STREAM: u64 = 1;
const ESTIMATION_BATCH_STREAM: u64 = 2;
const FINETUNE_BATCH_STREAM: u64 = 3;

/// Evaluation batch size; only affects speed.
const EVAL_BATCH: usize = 256;

/// Every knob of a run. Defaults are the desk-scale recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub peft: PeftConfig,
    /// Total optimizer steps `t`, estimation included.
    pub total_steps: usize,
    /// Estimation steps `t'`.
    pub estimation_steps: usize,
    pub batch_size: usize,
    pub lr_estimation: f64,
    pub lr_finetune: f64,
    pub adam: AdamWConfig,
    /// Fraction of each phase spent in linear warmup.
    pub warmup_frac: f64,
    pub rho_a: f64,
    pub rho_f: f64,
    pub rho_m: f64,
    pub rho_r: f64,
    pub penalty: MaskPenalty,
    /// Drives PEFT initialization and batch order.
    pub seed: u64,
    /// Drives the frozen foundation weights.
    pub foundation_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            peft: PeftConfig::default(),
            total_steps: 300,
            estimation_steps: 30,
            batch_size: 32,
            lr_estimation: 3e-3,
            lr_finetune: 3e-3,
            adam: AdamWConfig::default(),
            warmup_frac: 0.06,
            rho_a: 0.25,
            rho_f: 1.0 / 3.0,
            rho_m: 0.5,
            rho_r: 0.5,
            penalty: MaskPenalty::default(),
            seed: 0,
            foundation_seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.penalty.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocabulary {} differs from model vocabulary {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "task has {} classes, model has {}",
                self.task.num_classes, self.model.num_classes
            )));
        }
        if self.task.seq_len > self.model.max_seq {
            return Err(Error::invalid(
                "seq_len",
                format!("{} exceeds max_seq {}", self.task.seq_len, self.model.max_seq),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps", "must be positive"));
        }
        if self.estimation_steps >= self.total_steps {
            return Err(Error::invalid(
                "estimation_steps",
                format!("must be below total_steps ({})", self.total_steps),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.peft.rank == 0 {
            return Err(Error::invalid("rank", "must be positive"));
        }
        for (name, v) in [("lr_estimation", self.lr_estimation), ("lr_finetune", self.lr_finetune)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.adam.beta1) {
            return Err(Error::invalid("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid("beta2", "must lie in [0, 1)"));
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::invalid("adam_eps", "must be positive"));
        }
        if !(self.adam.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("warmup_frac", "must lie in [0, 1]"));
        }
        check_rate("rho_a", self.rho_a)?;
        check_rate("rho_f", self.rho_f)?;
        check_rate("rho_m", self.rho_m)?;
        check_rate("rho_r", self.rho_r)?;
        if drop_count(self.rho_a, self.model.heads) >= self.model.heads {
            return Err(Error::invalid("rho_a", "would remove every head of a layer"));
        }
        if self.estimation_steps * 10 > self.total_steps {
            warn!(
                "estimation uses {} of {} steps; more than 10% is unusual",
                self.estimation_steps, self.total_steps
            );
        }
        Ok(())
    }

    pub fn finetune_steps(&self) -> usize {
        self.total_steps - self.estimation_steps
    }
}

/// Wall-clock per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    pub estimate: Duration,
    pub prune: Duration,
    pub finetune: Duration,
    pub evaluate: Duration,
}

/// What a run did and how well it ended.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: TrainConfig,
    /// Estimation-phase objective (task loss plus mask penalty) per step.
    pub estimation_losses: Vec<f64>,
    /// Task loss per fine-tuning step.
    pub finetune_losses: Vec<f64>,
    pub accuracy: f64,
    pub before: ParamCounts,
    pub after: ParamCounts,
    /// `after.foundation / before.foundation`.
    pub foundation_retention: f64,
    pub plan: PruningPlan,
    pub forced_ffn_layers: Vec<usize>,
    pub forced_rank_modules: Vec<AttachPoint>,
    pub estimation_skipped: bool,
    pub timings: PhaseTimings,
}

/// Mutable handles to everything an optimizer may touch.
struct Params<'a> {
    model: &'a mut FoundationModel,
    peft: &'a mut PeftSet,
    masks: Option<&'a mut MaskSet>,
}

impl Params<'_> {
    fn tensor(&mut self, id: ParamId) -> Result<&mut crate::tensor::Tensor> {
        match id {
            ParamId::ClassifierW => Ok(&mut self.model.classifier_w),
            ParamId::ClassifierB => Ok(&mut self.model.classifier_b),
            ParamId::PeftDown(i) => Ok(&mut self.peft.modules[i].down),
            ParamId::PeftUp(i) => Ok(&mut self.peft.modules[i].up),
            ParamId::HeadMask(_) | ParamId::FfnMask(_) => self
                .masks
                .as_deref_mut()
                .and_then(|m| m.tensor_mut(id))
                .ok_or_else(|| Error::contract(format!("no mask tensor for {id:?}"))),
        }
    }
}

/// One forward/backward/update step. Returns the optimized objective.
///
/// With a ledger, module importances are recorded from the forward values and
/// rank importances from the gradients, before the optimizer moves the weights.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut FoundationModel,
    peft: &mut PeftSet,
    masks: Option<&mut MaskSet>,
    penalty: &MaskPenalty,
    batch: &Batch,
    opt: &mut AdamW,
    lr: f64,
    ledger: Option<&mut ImportanceLedger>,
) -> Result<f64> {
    let mut g = Graph::new();
    let opts = if ledger.is_some() {
        ForwardOptions::estimation()
    } else {
        ForwardOptions::training()
    };
    let (logits, trace) = model_forward(
        &mut g,
        model,
        masks.as_deref(),
        peft,
        &batch.tokens,
        batch.size(),
        batch.seq_len,
        opts,
    )?;
    let task = g.softmax_ce(logits, &batch.labels)?;
    let loss = if masks.is_some() {
        mask_loss(&mut g, task, &trace, penalty)?
    } else {
        task
    };
    let objective = g.value(loss)[0];
    if !objective.is_finite() {
        return Err(Error::contract(format!("training objective became {objective}")));
    }
    g.backward(loss)?;

    let mut params = Params { model, peft, masks };
    for (id, var) in &trace.trainable {
        if let Some(grad) = g.grad(*var) {
            params.tensor(*id)?.accumulate_grad(grad)?;
        }
    }
    if let Some(ledger) = ledger {
        for obs in &trace.observations {
            ledger.record_module(obs.module, norm_ratio(g.value(obs.branch), g.value(obs.host)));
        }
        for (i, m) in params.peft.modules.iter().enumerate() {
            ledger.record_ranks(i, &rank_importance(m)?)?;
        }
        ledger.steps_observed += 1;
    }
    drop(g);
    opt.begin_step();
    for (id, _) in &trace.trainable {
        let decay = !matches!(id, ParamId::HeadMask(_) | ParamId::FfnMask(_));
        let t = params.tensor(*id)?;
        opt.update(*id, t, lr, decay)?;
        t.zero_grad();
    }
    Ok(objective)
}

/// Result of the estimation phase; masks and PEFT weights are updated in place.
#[derive(Clone, Debug)]
pub struct Estimation {
    pub ledger: ImportanceLedger,
    pub losses: Vec<f64>,
}

/// Runs `cfg.estimation_steps` joint steps on masks, PEFT modules and the classifier.
pub fn estimate(
    model: &mut FoundationModel,
    peft: &mut PeftSet,
    masks: &mut MaskSet,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<Estimation> {
    let mut ledger = ImportanceLedger::new(peft);
    let mut stream = BatchStream::new(train, cfg.batch_size, derive_seed(cfg.seed, ESTIMATION_BATCH_STREAM))?;
    let mut opt = AdamW::new(cfg.adam);
    let steps = cfg.estimation_steps;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = stream.next_batch();
        let lr = lr_at(step, steps, cfg.lr_estimation, cfg.warmup_frac);
        let loss = train_step(
            model,
            peft,
            Some(masks),
            &cfg.penalty,
            &batch,
            &mut opt,
            lr,
            Some(&mut ledger),
        )?;
        losses.push(loss);
    }
    Ok(Estimation { ledger, losses })
}

/// Output of one-shot pruning.
#[derive(Clone, Debug)]
pub struct Pruned {
    pub model: FoundationModel,
    pub peft: PeftSet,
    pub plan: PruningPlan,
    /// Mask values of the surviving heads and units (already folded into `model`).
    pub kept_masks: MaskSet,
    pub forced_ffn_layers: Vec<usize>,
    pub forced_rank_modules: Vec<AttachPoint>,
}

/// Heads, then FFN units, then modules, then ranks; surviving modules are re-sliced
/// to the pruned foundation.
pub fn prune_all(
    model: &FoundationModel,
    peft: &PeftSet,
    masks: &MaskSet,
    ledger: &ImportanceLedger,
    cfg: &TrainConfig,
) -> Result<Pruned> {
    masks.check_layout(&model.layout)?;
    if ledger.modules != peft.attach_points() {
        return Err(Error::layout("importance ledger does not cover the attached modules"));
    }
    let head_pos = select_heads(masks, cfg.rho_a)?;
    let ffn_sel = select_ffn_dims(masks, cfg.rho_f)?;
    let to_original = |current: &[Vec<usize>], pos: &[Vec<usize>]| -> Vec<Vec<usize>> {
        current
            .iter()
            .zip(pos)
            .map(|(ids, p)| p.iter().map(|&i| ids[i]).collect())
            .collect()
    };
    let kept_modules = select_modules(ledger, cfg.rho_m)?;
    let ranks = select_ranks(ledger, &kept_modules, cfg.rho_r)?;
    let plan = PruningPlan {
        heads: to_original(&model.layout.heads, &head_pos),
        ffn: to_original(&model.layout.ffn, &ffn_sel.keep),
        modules: kept_modules.iter().map(|&i| ledger.modules[i]).collect(),
        ranks: ranks.keep,
    };
    let pruned_model = materialize(model, &plan, Some(masks))?;
    let pruned_peft = prune_peft(peft, &plan, &model.layout, Some(masks), model.config.head_dim())?;
    let kept_masks = MaskSet {
        head: masks
            .head
            .iter()
            .zip(&head_pos)
            .map(|(m, p)| gather(m, p))
            .collect::<Result<_>>()?,
        ffn: masks
            .ffn
            .iter()
            .zip(&ffn_sel.keep)
            .map(|(m, p)| gather(m, p))
            .collect::<Result<_>>()?,
    };
    Ok(Pruned {
        model: pruned_model,
        peft: pruned_peft,
        plan,
        kept_masks,
        forced_ffn_layers: ffn_sel.forced,
        forced_rank_modules: ranks.forced.iter().map(|&i| ledger.modules[i]).collect(),
    })
}

fn gather(m: &crate::tensor::Tensor, pos: &[usize]) -> Result<crate::tensor::Tensor> {
    crate::tensor::Tensor::new(vec![pos.len()], pos.iter().map(|&p| m.data()[p]).collect())
}

/// Trains the surviving PEFT modules and the classifier for `steps` steps on the task loss.
pub fn finetune(
    model: &mut FoundationModel,
    peft: &mut PeftSet,
    train: &Dataset,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    finetune_with_stream(model, peft, train, cfg, steps, FINETUNE_BATCH_STREAM, cfg.lr_finetune)
}

fn finetune_with_stream(
    model: &mut FoundationModel,
    peft: &mut PeftSet,
    train: &Dataset,
    cfg: &TrainConfig,
    steps: usize,
    stream_id: u64,
    base_lr: f64,
) -> Result<Vec<f64>> {
    let mut stream = BatchStream::new(train, cfg.batch_size, derive_seed(cfg.seed, stream_id))?;
    let mut opt = AdamW::new(cfg.adam);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = stream.next_batch();
        let lr = lr_at(step, steps, base_lr, cfg.warmup_frac);
        losses.push(train_step(model, peft, None, &cfg.penalty, &batch, &mut opt, lr, None)?);
    }
    Ok(losses)
}

/// Class logits for every sample of `data`, row-major `[n, classes]`.
pub fn predict(model: &FoundationModel, peft: &PeftSet, data: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * model.config.num_classes);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk);
        let mut g = Graph::new();
        let (logits, _) = model_forward(
            &mut g,
            model,
            None,
            peft,
            &batch.tokens,
            batch.size(),
            batch.seq_len,
            ForwardOptions::inference(),
        )?;
        out.extend_from_slice(g.value(logits));
    }
    Ok(out)
}

/// Fraction of samples whose arg-max logit (lowest index on ties) equals the label.
pub fn evaluate(model: &FoundationModel, peft: &PeftSet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let logits = predict(model, peft, data)?;
    let c = model.config.num_classes;
    let correct = logits
        .chunks(c)
        .zip(&data.labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Foundation parameter count predicted from the rates and the shape alone.
pub fn predicted_foundation_params(cfg: &ModelConfig, rho_a: f64, rho_f: f64) -> usize {
    let heads = cfg.heads - drop_count(rho_a, cfg.heads);
    let total_ffn = cfg.layers * cfg.ffn_dim;
    let ffn = total_ffn - drop_count(rho_f, total_ffn);
    let full = HeadLayout::full(cfg);
    let per_head = 4 * cfg.hidden * cfg.head_dim();
    cfg.foundation_params(&full) - cfg.layers * (cfg.heads - heads) * per_head - 2 * cfg.hidden * (total_ffn - ffn)
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub pruned: Pruned,
    pub ledger: ImportanceLedger,
}

/// Freshly initialized dense model, estimation-set PEFT and unit masks for `cfg`.
pub fn initial_state(cfg: &TrainConfig) -> Result<(FoundationModel, PeftSet, MaskSet)> {
    let model = FoundationModel::init(&cfg.model, cfg.foundation_seed)?;
    let peft = attach_estimation_set(
        &cfg.model,
        &model.layout,
        &cfg.peft,
        derive_seed(cfg.seed, PEFT_INIT_STREAM),
    )?;
    let masks = MaskSet::ones(&model.layout);
    Ok((model, peft, masks))
}

/// Estimate, prune, fine-tune and evaluate on the given splits.
pub fn run_all_on(cfg: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let (mut model, mut peft, mut masks) = initial_state(cfg)?;
    let before = count_params(&model, &peft, Some(&masks));
    let estimation_skipped = cfg.estimation_steps == 0;
    if estimation_skipped {
        warn!("estimation skipped; tie-break selection");
    }

    let t0 = Instant::now();
    let est = estimate(&mut model, &mut peft, &mut masks, train, cfg)?;
    let t_est = t0.elapsed();

    let t0 = Instant::now();
    let mut pruned = prune_all(&model, &peft, &masks, &est.ledger, cfg)?;
    let t_prune = t0.elapsed();
    info!("plan: {}", pruned.plan);

    let t0 = Instant::now();
    let finetune_losses = finetune(&mut pruned.model, &mut pruned.peft, train, cfg, cfg.finetune_steps())?;
    let t_ft = t0.elapsed();

    let t0 = Instant::now();
    let accuracy = evaluate(&pruned.model, &pruned.peft, eval)?;
    let t_eval = t0.elapsed();

    let after = count_params(&pruned.model, &pruned.peft, None);
    let report = RunReport {
        config: cfg.clone(),
        estimation_losses: est.losses,
        finetune_losses,
        accuracy,
        before,
        after,
        foundation_retention: after.foundation as f64 / before.foundation as f64,
        plan: pruned.plan.clone(),
        forced_ffn_layers: pruned.forced_ffn_layers.clone(),
        forced_rank_modules: pruned.forced_rank_modules.clone(),
        estimation_skipped,
        timings: PhaseTimings {
            estimate: t_est,
            prune: t_prune,
            finetune: t_ft,
            evaluate: t_eval,
        },
    };
    Ok(RunOutcome {
        report,
        pruned,
        ledger: est.ledger,
    })
}

/// [`run_all_on`] with the splits generated from `cfg.task`.
pub fn run_all(cfg: &TrainConfig) -> Result<RunOutcome> {
    let (train, eval) = generate(&cfg.task)?;
    run_all_on(cfg, &train, &eval)
}

/// Unpruned reference: the estimation-set LoRA/Adapter modules trained for all
/// `t` steps on the task loss, with no masks and no pruning.
pub fn run_baseline_on(cfg: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    let (mut model, mut peft, _) = initial_state(cfg)?;
    let before = count_params(&model, &peft, None);
    let t0 = Instant::now();
    let losses = finetune_with_stream(
        &mut model,
        &mut peft,
        train,
        cfg,
        cfg.total_steps,
        ESTIMATION_BATCH_STREAM,
        cfg.lr_finetune,
    )?;
    let t_ft = t0.elapsed();
    let t0 = Instant::now();
    let accuracy = evaluate(&model, &peft, eval)?;
    Ok(RunReport {
        config: cfg.clone(),
        estimation_losses: Vec::new(),
        finetune_losses: losses,
        accuracy,
        before,
        after: before,
        foundation_retention: 1.0,
        plan: PruningPlan::identity(&model.layout, &peft),
        forced_ffn_layers: Vec::new(),
        forced_rank_modules: Vec::new(),
        estimation_skipped: true,
        timings: PhaseTimings {
            finetune: t_ft,
            evaluate: t0.elapsed(),
            ..PhaseTimings::default()
        },
    })
}

/// Which knob a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Sets both `rho_a` and `rho_f`.
    Rho,
    /// Estimation steps as a fraction of `total_steps`.
    TPrime,
    /// Sets both `lambda_a` and `lambda_f`.
    Lambda,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rho => "rho",
            SweepAxis::TPrime => "t_prime",
            SweepAxis::Lambda => "lambda",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SweepAxis::Rho, SweepAxis::TPrime, SweepAxis::Lambda]
            .into_iter()
            .find(|a| a.name() == s)
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Rho => {
                cfg.rho_a = value;
                cfg.rho_f = value;
            }
            SweepAxis::TPrime => {
                if !(0.0..1.0).contains(&value) {
                    return Err(Error::invalid(
                        "t_prime",
                        format!("fraction must lie in [0, 1), got {value}"),
                    ));
                }
                cfg.estimation_steps = (value * cfg.total_steps as f64).round() as usize;
            }
            SweepAxis::Lambda => {
                cfg.penalty.lambda_a = value;
                cfg.penalty.lambda_f = value;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: f64,
    pub foundation_retention: f64,
    pub foundation_params: usize,
    pub trainable_params: usize,
    pub seconds: f64,
}

/// Runs the full pipeline once per value with the shared seed, fanning out over
/// up to `threads` workers. Rows come back in `values` order.
pub fn sweep(base: &TrainConfig, axis: SweepAxis, values: &[f64], threads: usize) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::Config("a sweep needs at least two values".into()));
    }
    let cfgs: Vec<TrainConfig> = values.iter().map(|&v| axis.apply(base, v)).collect::<Result<_>>()?;
    let (train, eval) = generate(&base.task)?;
    let run = |cfg: &TrainConfig, value: f64| -> Result<SweepRow> {
        let t0 = Instant::now();
        let out = run_all_on(cfg, &train, &eval)?;
        Ok(SweepRow {
            value,
            accuracy: out.report.accuracy,
            foundation_retention: out.report.foundation_retention,
            foundation_params: out.report.after.foundation,
            trainable_params: out.report.after.trainable,
            seconds: t0.elapsed().as_secs_f64(),
        })
    };
    let threads = threads.clamp(1, cfgs.len());
    if threads == 1 {
        return cfgs.iter().zip(values).map(|(c, &v)| run(c, v)).collect();
    }
    let jobs: Vec<(usize, &TrainConfig)> = cfgs.iter().enumerate().collect();
    let mut slots: Vec<Option<Result<SweepRow>>> = (0..cfgs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let jobs = &jobs;
                let run = &run;
                s.spawn(move || {
                    jobs.iter()
                        .skip(w)
                        .step_by(threads)
                        .map(|&(i, c)| (i, run(c, values[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}
