//! LoRA and Adapter modules.
//!
//! A LoRA module sits in parallel with one frozen projection and adds
//! `s * x W_down W_up` to its output. An Adapter sits after a whole sub-layer
//! and maps `h -> h + f(h W_down) W_up`. Both start with `W_up = 0`, so a freshly
//! attached set leaves the host model's function untouched.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{ActivationKind, Graph, Var};
use crate::model::{HeadLayout, ModelConfig};
use crate::tensor::{seeded_rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PeftKind {
    Lora,
    Adapter,
}

impl PeftKind {
    pub fn name(self) -> &'static str {
        match self {
            PeftKind::Lora => "lora",
            PeftKind::Adapter => "adapter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lora" => Some(PeftKind::Lora),
            "adapter" => Some(PeftKind::Adapter),
            _ => None,
        }
    }

    pub fn sites(self) -> &'static [Site] {
        match self {
            PeftKind::Lora => &Site::LORA,
            PeftKind::Adapter => &Site::ADAPTER,
        }
    }
}

/// Where inside a layer a module is attached. The declaration order is the
/// canonical (layer, site) tie-break order used by every global selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
    AfterMha,
    AfterFfn,
}

impl Site {
    pub const LORA: [Site; 6] = [Site::Q, Site::K, Site::V, Site::O, Site::Fc1, Site::Fc2];
    pub const ADAPTER: [Site; 2] = [Site::AfterMha, Site::AfterFfn];
    pub const ALL: [Site; 8] = [
        Site::Q,
        Site::K,
        Site::V,
        Site::O,
        Site::Fc1,
        Site::Fc2,
        Site::AfterMha,
        Site::AfterFfn,
    ];

    pub fn kind(self) -> PeftKind {
        match self {
            Site::AfterMha | Site::AfterFfn => PeftKind::Adapter,
            _ => PeftKind::Lora,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Fc1 => "fc1",
            Site::Fc2 => "fc2",
            Site::AfterMha => "after-mha",
            Site::AfterFfn => "after-ffn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Site::ALL.into_iter().find(|site| site.name() == s)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Site::ALL.get(code as usize).copied()
    }

    /// Input and output widths of the host path at this site.
    pub fn dims(self, cfg: &ModelConfig, layout: &HeadLayout, layer: usize) -> (usize, usize) {
        let d = cfg.hidden;
        let attn = layout.heads[layer].len() * cfg.head_dim();
        let ffn = layout.ffn[layer].len();
        match self {
            Site::Q | Site::K | Site::V => (d, attn),
            Site::O => (attn, d),
            Site::Fc1 => (d, ffn),
            Site::Fc2 => (ffn, d),
            Site::AfterMha | Site::AfterFfn => (d, d),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttachPoint {
    pub layer: usize,
    pub site: Site,
}

impl AttachPoint {
    pub fn new(layer: usize, site: Site) -> Self {
        AttachPoint { layer, site }
    }
}

impl fmt::Display for AttachPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.site)
    }
}

/// One bottleneck module: `down` is `[d_in, r_active]`, `up` is `[r_active, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeftModule {
    pub attach: AttachPoint,
    pub kind: PeftKind,
    pub down: Tensor,
    pub up: Tensor,
    /// Rank at attachment time.
    pub rank: usize,
    /// LoRA scale `s`; unused by adapters.
    pub scale: f64,
    /// Original indices of the ranks still present, one per column of `down`.
    pub active_ranks: Vec<usize>,
    /// Adapter nonlinearity `f`.
    pub activation: ActivationKind,
}

impl PeftModule {
    /// LoRA with `down ~ U(-1/sqrt(d_in), 1/sqrt(d_in))` and `up = 0`.
    pub fn lora(attach: AttachPoint, d_in: usize, d_out: usize, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        Self::fresh(
            attach,
            PeftKind::Lora,
            d_in,
            d_out,
            rank,
            scale,
            ActivationKind::Relu,
            seed,
        )
    }

    pub fn adapter(attach: AttachPoint, d: usize, rank: usize, activation: ActivationKind, seed: u64) -> Result<Self> {
        Self::fresh(attach, PeftKind::Adapter, d, d, rank, 1.0, activation, seed)
    }

    #[allow(clippy::too_many_arguments)]
    fn fresh(
        attach: AttachPoint,
        kind: PeftKind,
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: f64,
        activation: ActivationKind,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::contract("PEFT rank must be at least 1"));
        }
        if attach.site.kind() != kind {
            return Err(Error::contract(format!("{kind:?} cannot attach at {attach}")));
        }
        let mut rng = seeded_rng(seed);
        let bound = 1.0 / (d_in as f64).sqrt();
        let down = Tensor::uniform(vec![d_in, rank], bound, &mut rng).with_requires_grad(true);
        let up = Tensor::zeros(vec![rank, d_out]).with_requires_grad(true);
        Ok(PeftModule {
            attach,
            kind,
            down,
            up,
            rank,
            scale,
            active_ranks: (0..rank).collect(),
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape()[1]
    }

    pub fn active_rank(&self) -> usize {
        self.active_ranks.len()
    }

    pub fn param_count(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    /// Records the module's branch output for input `x` (without the residual or host path).
    pub(crate) fn branch(&self, g: &mut Graph, x: Var, track: bool) -> Result<(Var, Var, Var)> {
        let down = g.leaf_with(&self.down, track);
        let up = g.leaf_with(&self.up, track);
        let hidden = g.matmul(x, down)?;
        let out = match self.kind {
            PeftKind::Lora => {
                // scaling the rank-wide factor keeps the saved tape small
                let h = g.scale(hidden, self.scale);
                g.matmul(h, up)?
            }
            PeftKind::Adapter => {
                let a = g.activation(hidden, self.activation);
                g.matmul(a, up)?
            }
        };
        Ok((out, down, up))
    }

    /// Keeps only the listed original ranks. The result computes exactly what the
    /// old module computes with the other ranks' factor entries zeroed.
    pub fn shrink_ranks(&self, keep: &[usize]) -> Result<PeftModule> {
        if keep.is_empty() {
            return Err(Error::contract(format!(
                "shrink_ranks on {} would leave no rank; remove the module instead",
                self.attach
            )));
        }
        let mut cols = Vec::with_capacity(keep.len());
        for k in keep {
            match self.active_ranks.iter().position(|r| r == k) {
                Some(p) => cols.push(p),
                None => return Err(Error::contract(format!("rank {k} is not active in {}", self.attach))),
            }
        }
        if cols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("rank keep-set must be strictly increasing"));
        }
        if cols.len() == self.active_ranks.len() {
            return Ok(self.clone());
        }
        Ok(PeftModule {
            down: self.down.select_cols(&cols)?,
            up: self.up.select_rows(&cols)?,
            active_ranks: keep.to_vec(),
            ..self.clone()
        })
    }

    /// Keeps the listed output columns of `up` (host output units that survived pruning).
    pub(crate) fn restrict_outputs(&mut self, cols: &[usize]) -> Result<()> {
        self.up = self.up.select_cols(cols)?;
        Ok(())
    }

    /// Keeps the listed input rows of `down`, scaled by the folded mask values.
    pub(crate) fn restrict_inputs(&mut self, rows: &[usize], fold: Option<&[f64]>) -> Result<()> {
        self.down = self.down.select_rows(rows)?;
        if let Some(f) = fold {
            self.down.scale_rows(f)?;
        }
        Ok(())
    }
}

/// LoRA delta `s * x W_down W_up` for a `[..., d_in]` input.
pub fn lora_delta(x: &Tensor, m: &PeftModule) -> Result<Tensor> {
    if m.kind != PeftKind::Lora {
        return Err(Error::contract(format!("{} is not a LoRA module", m.attach)));
    }
    let mut g = Graph::new();
    let xv = g.constant(as_batched(x)?);
    let (out, _, _) = m.branch(&mut g, xv, false)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = m.d_out();
    Tensor::new(shape, g.value(out).to_vec())
}

/// Adapter update `h + f(h W_down) W_up`.
pub fn adapter_apply(h: &Tensor, m: &PeftModule) -> Result<Tensor> {
    if m.kind != PeftKind::Adapter {
        return Err(Error::contract(format!("{} is not an adapter", m.attach)));
    }
    if m.d_in() != m.d_out() {
        return Err(Error::contract("adapter must map d -> d"));
    }
    let mut g = Graph::new();
    let hv = g.constant(as_batched(h)?);
    let (branch, _, _) = m.branch(&mut g, hv, false)?;
    let out = g.add(hv, branch)?;
    Tensor::new(h.shape().to_vec(), g.value(out).to_vec())
}

fn as_batched(x: &Tensor) -> Result<Tensor> {
    // matmul wants at least two axes
    if x.shape().len() >= 2 {
        Ok(x.clone())
    } else {
        Tensor::new(vec![1, x.numel()], x.data().to_vec())
    }
}

/// All modules attached to one model, kept sorted by attach point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PeftSet {
    pub modules: Vec<PeftModule>,
}

impl PeftSet {
    pub fn new(mut modules: Vec<PeftModule>) -> Result<Self> {
        modules.sort_by_key(|m| m.attach);
        if modules.windows(2).any(|w| w[0].attach == w[1].attach) {
            return Err(Error::contract("duplicate PEFT attach point"));
        }
        Ok(PeftSet { modules })
    }

    pub fn empty() -> Self {
        PeftSet::default()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn find(&self, layer: usize, site: Site) -> Option<usize> {
        self.modules
            .binary_search_by_key(&AttachPoint::new(layer, site), |m| m.attach)
            .ok()
    }

    pub fn attach_points(&self) -> Vec<AttachPoint> {
        self.modules.iter().map(|m| m.attach).collect()
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(PeftModule::param_count).sum()
    }

    pub fn total_ranks(&self) -> usize {
        self.modules.iter().map(PeftModule::active_rank).sum()
    }
}

/// Hyper-parameters of the PEFT method used by a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeftConfig {
    pub kind: PeftKind,
    pub rank: usize,
    /// LoRA scale `s`; kept fixed when ranks are pruned.
    pub scale: f64,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            kind: PeftKind::Lora,
            rank: 8,
            scale: 2.0,
        }
    }
}

/// Modules on the given sites of every layer, for the model's current layout.
pub fn attach_at(
    cfg: &ModelConfig,
    layout: &HeadLayout,
    peft: &PeftConfig,
    sites: &[Site],
    seed: u64,
) -> Result<PeftSet> {
    let mut modules = Vec::new();
    for layer in 0..cfg.layers {
        for &site in sites {
            if site.kind() != peft.kind {
                return Err(Error::contract(format!(
                    "site {site} is not a {} site",
                    peft.kind.name()
                )));
            }
            let attach = AttachPoint::new(layer, site);
            let module_seed = crate::tensor::derive_seed(seed, (layer * 16 + site.code() as usize) as u64);
            let (d_in, d_out) = site.dims(cfg, layout, layer);
            let m = match peft.kind {
                PeftKind::Lora => PeftModule::lora(attach, d_in, d_out, peft.rank, peft.scale, module_seed)?,
                PeftKind::Adapter => PeftModule::adapter(attach, d_in, peft.rank, cfg.activation, module_seed)?,
            };
            modules.push(m);
        }
    }
    PeftSet::new(modules)
}

/// The estimation-phase set: LoRA on every projection (Q, K, V, O, FC1, FC2) of every
/// layer, or an Adapter after both sub-layers of every layer.
pub fn attach_estimation_set(cfg: &ModelConfig, layout: &HeadLayout, peft: &PeftConfig, seed: u64) -> Result<PeftSet> {
    attach_at(cfg, layout, peft, peft.kind.sites(), seed)
}
