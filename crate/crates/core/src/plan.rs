//! Kept-index sets produced by estimation and consumed by materialization.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{HeadLayout, ModelConfig};
use crate::peft::{AttachPoint, PeftSet};

/// Everything needed to rebuild a pruned model and its PEFT set from the dense base.
///
/// All indices are in original (dense) numbering and sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruningPlan {
    pub heads: Vec<Vec<usize>>,
    pub ffn: Vec<Vec<usize>>,
    /// Surviving PEFT modules in attach-point order.
    pub modules: Vec<AttachPoint>,
    /// Surviving original rank ids, aligned with `modules`.
    pub ranks: Vec<Vec<usize>>,
}

impl PruningPlan {
    /// Keeps everything currently present.
    pub fn identity(layout: &HeadLayout, peft: &PeftSet) -> Self {
        PruningPlan {
            heads: layout.heads.clone(),
            ffn: layout.ffn.clone(),
            modules: peft.attach_points(),
            ranks: peft.modules.iter().map(|m| m.active_ranks.clone()).collect(),
        }
    }

    pub fn foundation_layout(&self) -> HeadLayout {
        HeadLayout {
            heads: self.heads.clone(),
            ffn: self.ffn.clone(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig, rank: usize) -> Result<()> {
        self.foundation_layout().validate(cfg)?;
        if self.modules.len() != self.ranks.len() {
            return Err(Error::layout(format!(
                "plan lists {} modules but {} rank sets",
                self.modules.len(),
                self.ranks.len()
            )));
        }
        if self.modules.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::layout("plan modules must be strictly increasing"));
        }
        for (m, r) in self.modules.iter().zip(&self.ranks) {
            if m.layer >= cfg.layers {
                return Err(Error::layout(format!("plan module {m} is beyond the last layer")));
            }
            if r.is_empty() {
                return Err(Error::layout(format!("plan module {m} keeps no rank")));
            }
            if r.windows(2).any(|w| w[0] >= w[1]) || r.iter().any(|&k| k >= rank) {
                return Err(Error::layout(format!(
                    "plan module {m}: rank ids must be increasing and below {rank}"
                )));
            }
        }
        Ok(())
    }

    pub fn kept_heads(&self) -> usize {
        self.heads.iter().map(Vec::len).sum()
    }

    pub fn kept_ffn(&self) -> usize {
        self.ffn.iter().map(Vec::len).sum()
    }

    pub fn kept_ranks(&self) -> usize {
        self.ranks.iter().map(Vec::len).sum()
    }

    /// First difference between the foundation-side sections of two plans.
    pub fn foundation_mismatch(&self, other: &PruningPlan) -> Option<String> {
        first_difference("heads", &self.heads, &other.heads).or_else(|| first_difference("ffn", &self.ffn, &other.ffn))
    }
}

fn first_difference(what: &str, a: &[Vec<usize>], b: &[Vec<usize>]) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("{what}: {} layers vs {}", a.len(), b.len()));
    }
    for (l, (x, y)) in a.iter().zip(b).enumerate() {
        for i in 0..x.len().max(y.len()) {
            match (x.get(i), y.get(i)) {
                (Some(p), Some(q)) if p == q => {}
                (p, q) => return Some(format!("{what}: layer {l}, position {i}: {} vs {}", show(p), show(q))),
            }
        }
    }
    None
}

fn show(v: Option<&usize>) -> String {
    v.map_or_else(|| "none".to_string(), usize::to_string)
}

impl fmt::Display for PruningPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let per_layer = |sets: &[Vec<usize>]| sets.iter().map(|s| s.len().to_string()).collect::<Vec<_>>().join(",");
        write!(
            f,
            "heads/layer [{}] ffn/layer [{}] modules {} ranks {}",
            per_layer(&self.heads),
            per_layer(&self.ffn),
            self.modules.len(),
            self.kept_ranks()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatch_names_first_differing_index() {
        let a = PruningPlan {
            heads: vec![vec![0, 1, 3], vec![0]],
            ffn: vec![vec![0], vec![1]],
            modules: vec![],
            ranks: vec![],
        };
        let mut b = a.clone();
        assert_eq!(a.foundation_mismatch(&b), None);
        b.heads[0][2] = 2;
        let msg = a.foundation_mismatch(&b).unwrap();
        assert!(msg.contains("layer 0, position 2: 3 vs 2"), "{msg}");
    }
}
