//! Foundation-model pruning: trainable head and FFN masks under an L1 penalty,
//! and the magnitude-based keep-set selection that follows estimation.

use log::warn;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{HeadLayout, ParamId, Trace};
use crate::tensor::Tensor;

/// One scalar gate per attention head (`head`) and per FFN unit (`ffn`), per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub head: Vec<Tensor>,
    pub ffn: Vec<Tensor>,
}

impl MaskSet {
    /// All gates at exactly 1.0, sized to the layout.
    pub fn ones(layout: &HeadLayout) -> Self {
        let gate = |n: usize| Tensor::ones(vec![n]).with_requires_grad(true);
        MaskSet {
            head: layout.heads.iter().map(|h| gate(h.len())).collect(),
            ffn: layout.ffn.iter().map(|f| gate(f.len())).collect(),
        }
    }

    /// Number of mask scalars.
    pub fn len(&self) -> usize {
        self.head.iter().chain(&self.ffn).map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_layout(&self, layout: &HeadLayout) -> Result<()> {
        if self.head.len() != layout.heads.len() || self.ffn.len() != layout.ffn.len() {
            return Err(Error::layout(format!(
                "masks cover {} layers, model has {}",
                self.head.len(),
                layout.heads.len()
            )));
        }
        for (l, (m, h)) in self.head.iter().zip(&layout.heads).enumerate() {
            if m.numel() != h.len() {
                return Err(Error::layout(format!(
                    "layer {l}: head mask has {} entries for {} heads",
                    m.numel(),
                    h.len()
                )));
            }
        }
        for (l, (m, f)) in self.ffn.iter().zip(&layout.ffn).enumerate() {
            if m.numel() != f.len() {
                return Err(Error::layout(format!(
                    "layer {l}: FFN mask has {} entries for {} units",
                    m.numel(),
                    f.len()
                )));
            }
        }
        Ok(())
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::HeadMask(l) => self.head.get_mut(l),
            ParamId::FfnMask(l) => self.ffn.get_mut(l),
            _ => None,
        }
    }

    pub fn zero_grads(&mut self) {
        self.head.iter_mut().chain(&mut self.ffn).for_each(Tensor::zero_grad);
    }

    /// `sum |m_A|` and `sum |m_F|` over all layers.
    pub fn l1_norms(&self) -> (f64, f64) {
        let l1 = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data()).map(|v| v.abs()).sum();
        (l1(&self.head), l1(&self.ffn))
    }
}

/// L1 penalty strengths for head and FFN masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPenalty {
    pub lambda_a: f64,
    pub lambda_f: f64,
}

impl Default for MaskPenalty {
    fn default() -> Self {
        MaskPenalty {
            lambda_a: 1e-4,
            lambda_f: 1e-4,
        }
    }
}

impl MaskPenalty {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_f", self.lambda_f)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(
                    name,
                    format!("must be a finite non-negative number, got {v}"),
                ));
            }
        }
        Ok(())
    }

    /// `lambda_a * sum|m_A| + lambda_f * sum|m_F|` evaluated without a graph.
    pub fn value(&self, masks: &MaskSet) -> f64 {
        let (a, f) = masks.l1_norms();
        self.lambda_a * a + self.lambda_f * f
    }
}

/// `task_loss + lambda_a * sum|m_A| + lambda_f * sum|m_F|` over the mask leaves recorded in `trace`.
///
/// A zero lambda adds no node, so with both off the task loss is returned unchanged.
pub fn mask_loss(g: &mut Graph, task_loss: Var, trace: &Trace, penalty: &MaskPenalty) -> Result<Var> {
    penalty.validate()?;
    let mut loss = task_loss;
    for (id, var) in &trace.trainable {
        let lambda = match id {
            ParamId::HeadMask(_) => penalty.lambda_a,
            ParamId::FfnMask(_) => penalty.lambda_f,
            _ => continue,
        };
        if lambda == 0.0 {
            continue;
        }
        let l1 = g.abs_sum(*var);
        let term = g.scale(l1, lambda);
        loss = g.add(loss, term)?;
    }
    Ok(loss)
}

/// Number of entries a rate removes from `n`: `floor(rate * n)`.
///
/// Products that land within rounding error of an integer (`1/3 * 98304`
/// evaluates to `32767.99...`) are snapped to it before flooring.
pub fn drop_count(rate: f64, n: usize) -> usize {
    let exact = rate * n as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() <= 1e-9 * (n.max(1) as f64) {
        nearest as usize
    } else {
        exact.floor() as usize
    }
}

pub(crate) fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(name, format!("must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Per layer, keeps all but the `floor(rho_a * heads)` heads with smallest `|m_A|`.
///
/// Ties drop the lower index first. Returned indices are positions within each
/// layer's mask vector, ascending.
pub fn select_heads(masks: &MaskSet, rho_a: f64) -> Result<Vec<Vec<usize>>> {
    check_rate("rho_a", rho_a)?;
    masks
        .head
        .iter()
        .enumerate()
        .map(|(layer, m)| {
            let n = m.numel();
            let drop = drop_count(rho_a, n);
            if drop >= n {
                return Err(Error::contract(format!(
                    "rho_a = {rho_a} would remove all {n} heads of layer {layer}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| m.data()[a].abs().total_cmp(&m.data()[b].abs()).then(a.cmp(&b)));
            let mut keep = order[drop..].to_vec();
            keep.sort_unstable();
            Ok(keep)
        })
        .collect()
}

/// Result of the global FFN cut.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FfnSelection {
    /// Kept positions per layer, ascending.
    pub keep: Vec<Vec<usize>>,
    /// Layers the global cut would have emptied; each keeps its largest-|m_F| unit.
    pub forced: Vec<usize>,
}

/// Pools every layer's `|m_F|` and drops the globally smallest `floor(rho_f * total)`.
///
/// Ties drop lower `(layer, unit)` first. A layer the cut would empty keeps its
/// largest unit instead, so the realized drop count can be smaller; such layers
/// are listed in [`FfnSelection::forced`].
pub fn select_ffn_dims(masks: &MaskSet, rho_f: f64) -> Result<FfnSelection> {
    check_rate("rho_f", rho_f)?;
    let mut pool: Vec<(f64, usize, usize)> = masks
        .ffn
        .iter()
        .enumerate()
        .flat_map(|(l, m)| m.data().iter().enumerate().map(move |(j, v)| (v.abs(), l, j)))
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let drop = drop_count(rho_f, pool.len());
    let mut keep: Vec<Vec<usize>> = vec![Vec::new(); masks.ffn.len()];
    for &(_, l, j) in &pool[drop..] {
        keep[l].push(j);
    }
    let mut forced = Vec::new();
    for (l, k) in keep.iter_mut().enumerate() {
        if k.is_empty() {
            // the last entry of this layer in ascending order is its largest
            let &(_, _, j) = pool.iter().rev().find(|e| e.1 == l).expect("layer has units");
            k.push(j);
            forced.push(l);
            warn!("FFN cut would empty layer {l}; keeping unit {j}");
        }
        k.sort_unstable();
    }
    Ok(FfnSelection { keep, forced })
}
