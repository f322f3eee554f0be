//! PEFT pruning: module importance (branch-to-host output norm ratio), rank
//! importance (first-order Taylor scores), global selection, and the
//! re-slicing of surviving modules onto a pruned foundation.

use std::io::Write;

use log::warn;

use crate::error::{Error, Result};
use crate::fm_prune::{check_rate, drop_count, MaskSet};
use crate::graph::Graph;
use crate::kernel::l2_norm;
use crate::model::HeadLayout;
use crate::peft::{AttachPoint, PeftKind, PeftModule, PeftSet, Site};
use crate::plan::PruningPlan;
use crate::tensor::Tensor;

/// Guards the denominator of the norm ratio.
pub const IMPORTANCE_EPS: f64 = 1e-12;

/// `||branch||_2 / max(||host||_2, eps)` over all flattened positions.
pub fn norm_ratio(branch: &[f64], host: &[f64]) -> f64 {
    l2_norm(branch) / l2_norm(host).max(IMPORTANCE_EPS)
}

/// Importance of a LoRA module on input `x`: `||s X W_down W_up|| / ||X W||`.
/// Bias terms are not part of the host path.
pub fn module_importance_lora(x: &Tensor, module: &PeftModule, frozen_w: &Tensor) -> Result<f64> {
    if module.kind != PeftKind::Lora {
        return Err(Error::contract(format!("{} is not a LoRA module", module.attach)));
    }
    let (branch, host) = with_batched(x, |g, xv| {
        let (b, _, _) = module.branch(g, xv, false)?;
        let w = g.constant(frozen_w.clone());
        let h = g.matmul(xv, w)?;
        Ok((b, h))
    })?;
    Ok(norm_ratio(&branch, &host))
}

/// Importance of an adapter on sub-layer output `h`: `||f(h W_down) W_up|| / ||h||`.
pub fn module_importance_adapter(h: &Tensor, module: &PeftModule) -> Result<f64> {
    if module.kind != PeftKind::Adapter {
        return Err(Error::contract(format!("{} is not an adapter", module.attach)));
    }
    let (branch, _) = with_batched(h, |g, hv| {
        let (b, _, _) = module.branch(g, hv, false)?;
        Ok((b, hv))
    })?;
    Ok(norm_ratio(&branch, h.data()))
}

fn with_batched(
    x: &Tensor,
    f: impl FnOnce(&mut Graph, crate::graph::Var) -> Result<(crate::graph::Var, crate::graph::Var)>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let xt = if x.shape().len() >= 2 {
        x.clone()
    } else {
        Tensor::new(vec![1, x.numel()], x.data().to_vec())?
    };
    let xv = g.constant(xt);
    let (a, b) = f(&mut g, xv)?;
    Ok((g.value(a).to_vec(), g.value(b).to_vec()))
}

/// Entry-wise `|dL/dW * W|` for `W_down` and `W_up`, from the gradients stored on the module.
pub fn rank_param_importance(module: &PeftModule) -> Result<(Tensor, Tensor)> {
    let score = |w: &Tensor, which: &str| -> Result<Tensor> {
        let g = w.grad().ok_or_else(|| {
            Error::contract(format!(
                "no gradient on {which} of {}; run backward first",
                module.attach
            ))
        })?;
        let data = w.data().iter().zip(g).map(|(w, g)| (g * w).abs()).collect();
        Tensor::new(w.shape().to_vec(), data)
    };
    Ok((score(&module.down, "W_down")?, score(&module.up, "W_up")?))
}

/// Per active rank `k`: the sum of entry importances over column `k` of `W_down`
/// and row `k` of `W_up`.
pub fn rank_importance(module: &PeftModule) -> Result<Vec<f64>> {
    let (down, up) = rank_param_importance(module)?;
    Ok(rank_sums(&down, &up))
}

pub(crate) fn rank_sums(down: &Tensor, up: &Tensor) -> Vec<f64> {
    let r = down.shape()[1];
    let d_out = up.shape()[1];
    let mut out = vec![0.0; r];
    for row in down.data().chunks(r) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for (k, acc) in out.iter_mut().enumerate() {
        *acc += up.data()[k * d_out..(k + 1) * d_out].iter().sum::<f64>();
    }
    out
}

/// Importance statistics gathered during estimation, one entry per attached module.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceLedger {
    pub modules: Vec<AttachPoint>,
    /// Original rank ids per module, aligned with `rank_scores`.
    pub rank_ids: Vec<Vec<usize>>,
    /// Batches observed per module.
    pub module_count: Vec<u64>,
    /// Running mean of the module importance.
    pub module_mean: Vec<f64>,
    /// Rank importance summed over steps.
    pub rank_scores: Vec<Vec<f64>>,
    pub steps_observed: u64,
}

impl ImportanceLedger {
    pub fn new(peft: &PeftSet) -> Self {
        let n = peft.len();
        ImportanceLedger {
            modules: peft.attach_points(),
            rank_ids: peft.modules.iter().map(|m| m.active_ranks.clone()).collect(),
            module_count: vec![0; n],
            module_mean: vec![0.0; n],
            rank_scores: peft.modules.iter().map(|m| vec![0.0; m.active_rank()]).collect(),
            steps_observed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Folds one batch's module importance into the running mean.
    pub fn record_module(&mut self, module: usize, value: f64) {
        self.module_count[module] += 1;
        let n = self.module_count[module] as f64;
        self.module_mean[module] += (value - self.module_mean[module]) / n;
    }

    /// Adds one step's rank importances.
    pub fn record_ranks(&mut self, module: usize, scores: &[f64]) -> Result<()> {
        let acc = &mut self.rank_scores[module];
        if acc.len() != scores.len() {
            return Err(Error::Dimension {
                op: "record_ranks",
                left: vec![acc.len()],
                right: vec![scores.len()],
            });
        }
        acc.iter_mut().zip(scores).for_each(|(a, s)| *a += s);
        Ok(())
    }

    /// Tab-separated dump: module, mean module importance, batches, then per-rank scores.
    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "module\tlayer\tsite\tmean_im\tbatches\trank_scores")?;
        for i in 0..self.len() {
            let ranks: Vec<String> = self.rank_ids[i]
                .iter()
                .zip(&self.rank_scores[i])
                .map(|(k, s)| format!("{k}:{s:e}"))
                .collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{:e}\t{}\t{}",
                self.modules[i],
                self.modules[i].layer,
                self.modules[i].site,
                self.module_mean[i],
                self.module_count[i],
                ranks.join(",")
            )?;
        }
        Ok(())
    }
}

/// Indices (into the ledger) of modules surviving a global cut of
/// `floor(rho_m * count)` lowest-mean modules; ties drop the earlier attach point.
pub fn select_modules(ledger: &ImportanceLedger, rho_m: f64) -> Result<Vec<usize>> {
    check_rate("rho_m", rho_m)?;
    let mut order: Vec<usize> = (0..ledger.len()).collect();
    order.sort_by(|&a, &b| ledger.module_mean[a].total_cmp(&ledger.module_mean[b]).then(a.cmp(&b)));
    let drop = drop_count(rho_m, order.len());
    let mut keep = order[drop..].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Result of the global rank cut.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankSelection {
    /// Kept original rank ids, aligned with the `kept_modules` argument.
    pub keep: Vec<Vec<usize>>,
    /// Ledger indices of modules that would have lost every rank; each keeps its top rank.
    pub forced: Vec<usize>,
}

/// Pools the ranks of the surviving modules and drops the globally smallest
/// `floor(rho_r * total)` by accumulated score; ties drop lower `(module, rank)` first.
pub fn select_ranks(ledger: &ImportanceLedger, kept_modules: &[usize], rho_r: f64) -> Result<RankSelection> {
    check_rate("rho_r", rho_r)?;
    if let Some(&bad) = kept_modules.iter().find(|&&m| m >= ledger.len()) {
        return Err(Error::Index {
            what: "ledger module",
            index: bad,
            bound: ledger.len(),
        });
    }
    let mut pool: Vec<(f64, usize, usize)> = kept_modules
        .iter()
        .enumerate()
        .flat_map(|(slot, &m)| {
            ledger.rank_scores[m]
                .iter()
                .enumerate()
                .map(move |(p, &s)| (s, slot, p))
        })
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let drop = drop_count(rho_r, pool.len());
    let mut keep_pos: Vec<Vec<usize>> = vec![Vec::new(); kept_modules.len()];
    for &(_, slot, p) in &pool[drop..] {
        keep_pos[slot].push(p);
    }
    let mut forced = Vec::new();
    for (slot, k) in keep_pos.iter_mut().enumerate() {
        if k.is_empty() {
            let &(_, _, p) = pool.iter().rev().find(|e| e.1 == slot).expect("module has ranks");
            k.push(p);
            forced.push(kept_modules[slot]);
            warn!(
                "rank cut would empty module {}; keeping its top rank",
                ledger.modules[kept_modules[slot]]
            );
        }
        k.sort_unstable();
    }
    let keep = keep_pos
        .into_iter()
        .zip(kept_modules)
        .map(|(pos, &m)| pos.into_iter().map(|p| ledger.rank_ids[m][p]).collect())
        .collect();
    Ok(RankSelection { keep, forced })
}

/// Applies the module and rank sections of `plan` and re-slices each surviving
/// module to the plan's foundation layout.
///
/// `layout` and `masks` describe the model the modules are currently attached to;
/// mask values on the input side of O and FC2 are folded into `W_down` exactly as
/// materialization folds them into `W_O` and `W_fc2`.
pub fn prune_peft(
    peft: &PeftSet,
    plan: &PruningPlan,
    layout: &HeadLayout,
    masks: Option<&MaskSet>,
    head_dim: usize,
) -> Result<PeftSet> {
    use crate::model::positions;
    let target = plan.foundation_layout();
    let mut out = Vec::with_capacity(plan.modules.len());
    for (attach, ranks) in plan.modules.iter().zip(&plan.ranks) {
        let idx = peft
            .find(attach.layer, attach.site)
            .ok_or_else(|| Error::layout(format!("plan keeps {attach}, which is not attached")))?;
        let mut m = peft.modules[idx].shrink_ranks(ranks)?;
        let l = attach.layer;
        let head_pos = positions(&layout.heads[l], &target.heads[l], "head", l)?;
        let ffn_pos = positions(&layout.ffn[l], &target.ffn[l], "FFN unit", l)?;
        let head_cols: Vec<usize> = head_pos
            .iter()
            .flat_map(|&p| p * head_dim..(p + 1) * head_dim)
            .collect();
        match attach.site {
            Site::Q | Site::K | Site::V => m.restrict_outputs(&head_cols)?,
            Site::Fc1 => m.restrict_outputs(&ffn_pos)?,
            Site::O => {
                let fold: Option<Vec<f64>> = masks.map(|ms| {
                    head_pos
                        .iter()
                        .flat_map(|&p| std::iter::repeat_n(ms.head[l].data()[p], head_dim))
                        .collect()
                });
                m.restrict_inputs(&head_cols, fold.as_deref())?
            }
            Site::Fc2 => {
                let fold: Option<Vec<f64>> = masks.map(|ms| ffn_pos.iter().map(|&p| ms.ffn[l].data()[p]).collect());
                m.restrict_inputs(&ffn_pos, fold.as_deref())?
            }
            Site::AfterMha | Site::AfterFfn => {}
        }
        out.push(m);
    }
    PeftSet::new(out)
}
