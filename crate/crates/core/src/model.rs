//! A small pre-norm Transformer classifier with head and FFN mask hooks.
//!
//! Each layer is `x + MHA(LN1(x))` followed by `x + FFN(LN2(x))`; the final
//! hidden states are layer-normed, mean-pooled over the sequence and projected
//! to class logits. Dropout is not used.
//!
//! Attention weights keep the per-head blocks side by side: `W_Q` is
//! `[d, heads * d_head]` and head `i` owns columns `i*d_head .. (i+1)*d_head`;
//! `W_O` is `[heads * d_head, d]` with the matching row blocks. Head masks scale
//! each head's output before the output projection, FFN masks scale each
//! intermediate unit after the activation.

use crate::error::{Error, Result};
use crate::fm_prune::MaskSet;
use crate::graph::{ActivationKind, AttentionGeometry, Graph, Var};
use crate::peft::{PeftSet, Site};
use crate::plan::PruningPlan;
use crate::tensor::{derive_seed, seeded_rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub num_classes: usize,
    pub activation: ActivationKind,
    /// Causal attention mask; sequence classification uses bidirectional attention.
    pub causal: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 32,
            max_seq: 32,
            num_classes: 2,
            activation: ActivationKind::Gelu,
            causal: false,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small config with the given shape; vocab 32, 32 positions, 2 classes.
    pub fn toy(layers: usize, hidden: usize, heads: usize, ffn_dim: usize) -> Self {
        ModelConfig {
            layers,
            hidden,
            heads,
            ffn_dim,
            ..ModelConfig::default()
        }
    }

    /// RoBERTa-Large shape (24 layers, d=1024, 16 heads, d_F=4096).
    pub fn roberta_large() -> Self {
        ModelConfig {
            layers: 24,
            hidden: 1024,
            heads: 16,
            ffn_dim: 4096,
            vocab_size: 50265,
            max_seq: 514,
            num_classes: 2,
            ..ModelConfig::default()
        }
    }

    /// OPT-6.7B shape (32 layers, d=4096, 32 heads, d_F=16384).
    pub fn opt_6_7b() -> Self {
        ModelConfig {
            layers: 32,
            hidden: 4096,
            heads: 32,
            ffn_dim: 16384,
            vocab_size: 50272,
            max_seq: 2048,
            num_classes: 2,
            causal: true,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "heads",
                format!("hidden {} is not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid("ln_eps", "must be positive"));
        }
        Ok(())
    }

    /// Closed-form foundation parameter count (embeddings, encoder, final norm) for a layout.
    pub fn foundation_params(&self, layout: &HeadLayout) -> usize {
        let d = self.hidden;
        let dh = self.head_dim();
        let embeddings = self.vocab_size * d + self.max_seq * d;
        let layers: usize = (0..self.layers)
            .map(|l| {
                let attn = layout.heads[l].len() * dh;
                let ffn = layout.ffn[l].len();
                4 * d * attn + 2 * d * ffn + 4 * d
            })
            .sum();
        embeddings + layers + 2 * d
    }

    pub fn classifier_params(&self) -> usize {
        self.hidden * self.num_classes + self.num_classes
    }
}

/// Surviving heads and FFN units per layer, in original indexing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub heads: Vec<Vec<usize>>,
    pub ffn: Vec<Vec<usize>>,
}

impl HeadLayout {
    pub fn full(cfg: &ModelConfig) -> Self {
        HeadLayout {
            heads: vec![(0..cfg.heads).collect(); cfg.layers],
            ffn: vec![(0..cfg.ffn_dim).collect(); cfg.layers],
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.heads.len() != cfg.layers || self.ffn.len() != cfg.layers {
            return Err(Error::layout(format!(
                "layout covers {}/{} layers, model has {}",
                self.heads.len(),
                self.ffn.len(),
                cfg.layers
            )));
        }
        for (l, (h, f)) in self.heads.iter().zip(&self.ffn).enumerate() {
            if h.is_empty() {
                return Err(Error::layout(format!("layer {l} keeps no attention head")));
            }
            if f.is_empty() {
                return Err(Error::layout(format!("layer {l} keeps no FFN unit")));
            }
            check_sorted_within(h, cfg.heads, "head", l)?;
            check_sorted_within(f, cfg.ffn_dim, "FFN unit", l)?;
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.heads.iter().map(Vec::len).sum()
    }

    pub fn total_ffn(&self) -> usize {
        self.ffn.iter().map(Vec::len).sum()
    }
}

fn check_sorted_within(idx: &[usize], bound: usize, what: &str, layer: usize) -> Result<()> {
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::layout(format!(
            "layer {layer}: {what} indices must be strictly increasing"
        )));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
        return Err(Error::layout(format!(
            "layer {layer}: {what} index {bad} out of range {bound}"
        )));
    }
    Ok(())
}

/// Names every frozen tensor of the foundation model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FoundationParam {
    TokenEmbed,
    PosEmbed,
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo(usize),
    Fc1(usize),
    Fc2(usize),
    Ln1Gain(usize),
    Ln1Bias(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    FinalGain,
    FinalBias,
}

/// Names every trainable tensor: masks, PEFT factors and the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    HeadMask(usize),
    FfnMask(usize),
    PeftDown(usize),
    PeftUp(usize),
    ClassifierW,
    ClassifierB,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub fc1: Tensor,
    pub fc2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoundationModel {
    pub config: ModelConfig,
    pub layout: HeadLayout,
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// Classification head; always trainable.
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    /// Whether the foundation tensors are excluded from optimization.
    pub frozen: bool,
}

impl FoundationModel {
    /// Random "pretrained" weights, fully determined by `(config, seed)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let mut rng = seeded_rng(seed);
        let lin =
            |rows: usize, cols: usize, rng: &mut _| Tensor::randn(vec![rows, cols], 1.0 / (rows as f64).sqrt(), rng);
        let token_embed = Tensor::randn(vec![config.vocab_size, d], 1.0, &mut rng);
        let pos_embed = Tensor::randn(vec![config.max_seq, d], 1.0, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: lin(d, d, &mut rng),
                wk: lin(d, d, &mut rng),
                wv: lin(d, d, &mut rng),
                wo: lin(d, d, &mut rng),
                fc1: lin(d, config.ffn_dim, &mut rng),
                fc2: lin(config.ffn_dim, d, &mut rng),
                ln1_gain: Tensor::ones(vec![d]),
                ln1_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::ones(vec![d]),
                ln2_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        let mut head_rng = seeded_rng(derive_seed(seed, 0xC1A5));
        let classifier_w =
            Tensor::randn(vec![d, config.num_classes], 1.0 / (d as f64).sqrt(), &mut head_rng).with_requires_grad(true);
        let classifier_b = Tensor::zeros(vec![config.num_classes]).with_requires_grad(true);
        Ok(FoundationModel {
            config: config.clone(),
            layout: HeadLayout::full(config),
            token_embed,
            pos_embed,
            layers,
            final_gain: Tensor::ones(vec![d]),
            final_bias: Tensor::zeros(vec![d]),
            classifier_w,
            classifier_b,
            frozen: true,
        })
    }

    pub fn param(&self, p: FoundationParam) -> &Tensor {
        use FoundationParam::*;
        match p {
            TokenEmbed => &self.token_embed,
            PosEmbed => &self.pos_embed,
            Wq(l) => &self.layers[l].wq,
            Wk(l) => &self.layers[l].wk,
            Wv(l) => &self.layers[l].wv,
            Wo(l) => &self.layers[l].wo,
            Fc1(l) => &self.layers[l].fc1,
            Fc2(l) => &self.layers[l].fc2,
            Ln1Gain(l) => &self.layers[l].ln1_gain,
            Ln1Bias(l) => &self.layers[l].ln1_bias,
            Ln2Gain(l) => &self.layers[l].ln2_gain,
            Ln2Bias(l) => &self.layers[l].ln2_bias,
            FinalGain => &self.final_gain,
            FinalBias => &self.final_bias,
        }
    }

    pub fn param_mut(&mut self, p: FoundationParam) -> &mut Tensor {
        use FoundationParam::*;
        match p {
            TokenEmbed => &mut self.token_embed,
            PosEmbed => &mut self.pos_embed,
            Wq(l) => &mut self.layers[l].wq,
            Wk(l) => &mut self.layers[l].wk,
            Wv(l) => &mut self.layers[l].wv,
            Wo(l) => &mut self.layers[l].wo,
            Fc1(l) => &mut self.layers[l].fc1,
            Fc2(l) => &mut self.layers[l].fc2,
            Ln1Gain(l) => &mut self.layers[l].ln1_gain,
            Ln1Bias(l) => &mut self.layers[l].ln1_bias,
            Ln2Gain(l) => &mut self.layers[l].ln2_gain,
            Ln2Bias(l) => &mut self.layers[l].ln2_bias,
            FinalGain => &mut self.final_gain,
            FinalBias => &mut self.final_bias,
        }
    }

    pub fn foundation_param_ids(&self) -> Vec<FoundationParam> {
        use FoundationParam::*;
        let mut ids = vec![TokenEmbed, PosEmbed];
        for l in 0..self.layers.len() {
            ids.extend([
                Wq(l),
                Wk(l),
                Wv(l),
                Wo(l),
                Fc1(l),
                Fc2(l),
                Ln1Gain(l),
                Ln1Bias(l),
                Ln2Gain(l),
                Ln2Bias(l),
            ]);
        }
        ids.extend([FinalGain, FinalBias]);
        ids
    }

    /// Parameters actually stored in the foundation tensors.
    pub fn stored_foundation_params(&self) -> usize {
        self.foundation_param_ids()
            .into_iter()
            .map(|p| self.param(p).numel())
            .sum()
    }

    /// CRC-64 over every foundation tensor's bytes.
    pub fn foundation_fingerprint(&self) -> u64 {
        let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
        let mut digest = crc.digest();
        for p in self.foundation_param_ids() {
            for v in self.param(p).data() {
                digest.update(&v.to_le_bytes());
            }
        }
        digest.finalize()
    }

    pub fn live_bytes(&self) -> usize {
        let foundation: usize = self
            .foundation_param_ids()
            .into_iter()
            .map(|p| self.param(p).live_bytes())
            .sum();
        foundation + self.classifier_w.live_bytes() + self.classifier_b.live_bytes()
    }
}

/// Exact parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub foundation: usize,
    pub classifier: usize,
    pub peft: usize,
    /// Mask scalars; non-zero only while masks are attached (estimation).
    pub masks: usize,
    /// `peft + classifier + masks`.
    pub trainable: usize,
}

pub fn count_params(model: &FoundationModel, peft: &PeftSet, masks: Option<&MaskSet>) -> ParamCounts {
    let foundation = model.stored_foundation_params();
    let classifier = model.classifier_w.numel() + model.classifier_b.numel();
    let peft = peft.param_count();
    let masks = masks.map_or(0, MaskSet::len);
    ParamCounts {
        foundation,
        classifier,
        peft,
        masks,
        trainable: peft + classifier + masks,
    }
}

/// Which leaves are differentiable and what to record while running forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Masks, PEFT factors and the classifier become differentiable leaves.
    pub track_trainable: bool,
    /// Foundation tensors become differentiable leaves too (diagnostics only).
    pub foundation_grads: bool,
    /// Record each PEFT module's branch and host outputs for module importance.
    pub observe_modules: bool,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn training() -> Self {
        ForwardOptions {
            track_trainable: true,
            ..Self::default()
        }
    }

    pub fn estimation() -> Self {
        ForwardOptions {
            track_trainable: true,
            observe_modules: true,
            ..Self::default()
        }
    }
}

/// Branch output of one PEFT module next to the host path it modifies.
#[derive(Clone, Copy, Debug)]
pub struct Observation {
    pub module: usize,
    /// LoRA: `s * X W_down W_up`; Adapter: `f(h W_down) W_up`.
    pub branch: Var,
    /// LoRA: the frozen output `X W`; Adapter: the sub-layer output `h`.
    pub host: Var,
}

/// Leaves and observations recorded by one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub trainable: Vec<(ParamId, Var)>,
    pub foundation: Vec<(FoundationParam, Var)>,
    pub observations: Vec<Observation>,
}

/// One forward pass over a model, its optional masks and its PEFT modules.
pub struct Forward<'a> {
    pub model: &'a FoundationModel,
    pub masks: Option<&'a MaskSet>,
    pub peft: &'a PeftSet,
    pub opts: ForwardOptions,
    pub trace: Trace,
}

impl<'a> Forward<'a> {
    pub fn new(
        model: &'a FoundationModel,
        masks: Option<&'a MaskSet>,
        peft: &'a PeftSet,
        opts: ForwardOptions,
    ) -> Result<Self> {
        if let Some(m) = masks {
            m.check_layout(&model.layout)?;
        }
        Ok(Forward {
            model,
            masks,
            peft,
            opts,
            trace: Trace::default(),
        })
    }

    fn foundation(&mut self, g: &mut Graph, p: FoundationParam) -> Var {
        let v = g.leaf_with(self.model.param(p), self.opts.foundation_grads);
        if self.opts.foundation_grads {
            self.trace.foundation.push((p, v));
        }
        v
    }

    fn trainable(&mut self, g: &mut Graph, t: &Tensor, id: ParamId) -> Var {
        let v = g.leaf_with(t, self.opts.track_trainable);
        if self.opts.track_trainable {
            self.trace.trainable.push((id, v));
        }
        v
    }

    /// `x W` plus the LoRA delta attached at `(layer, site)`, if any.
    fn project(&mut self, g: &mut Graph, x: Var, p: FoundationParam, layer: usize, site: Site) -> Result<Var> {
        let w = self.foundation(g, p);
        let host = g.matmul(x, w)?;
        let Some(idx) = self.peft.find(layer, site) else {
            return Ok(host);
        };
        let branch = self.branch(g, x, idx)?;
        if self.opts.observe_modules {
            self.trace.observations.push(Observation {
                module: idx,
                branch,
                host,
            });
        }
        g.add(host, branch)
    }

    fn branch(&mut self, g: &mut Graph, x: Var, idx: usize) -> Result<Var> {
        let module = &self.peft.modules[idx];
        let (out, down, up) = module.branch(g, x, self.opts.track_trainable)?;
        if self.opts.track_trainable {
            self.trace.trainable.push((ParamId::PeftDown(idx), down));
            self.trace.trainable.push((ParamId::PeftUp(idx), up));
        }
        Ok(out)
    }

    fn adapter(&mut self, g: &mut Graph, h: Var, layer: usize, site: Site) -> Result<Var> {
        let Some(idx) = self.peft.find(layer, site) else {
            return Ok(h);
        };
        let branch = self.branch(g, h, idx)?;
        if self.opts.observe_modules {
            self.trace.observations.push(Observation {
                module: idx,
                branch,
                host: h,
            });
        }
        g.add(h, branch)
    }

    /// Token plus position embeddings, `[batch, seq, d]`.
    pub fn embed(&mut self, g: &mut Graph, tokens: &[u32], batch: usize, seq: usize) -> Result<Var> {
        let cfg = &self.model.config;
        if tokens.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::Dimension {
                op: "model_forward",
                left: vec![batch, seq],
                right: vec![tokens.len()],
            });
        }
        if seq > cfg.max_seq {
            return Err(Error::Index {
                what: "sequence length",
                index: seq,
                bound: cfg.max_seq,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let te = self.foundation(g, FoundationParam::TokenEmbed);
        let pe = self.foundation(g, FoundationParam::PosEmbed);
        let tok = g.gather(te, &ids, &[batch, seq])?;
        let pos = g.gather(pe, &positions, &[batch, seq])?;
        g.add(tok, pos)
    }

    /// Multi-head attention sub-layer on an already normalized input.
    pub fn mha(&mut self, g: &mut Graph, x: Var, layer: usize) -> Result<Var> {
        self.check_layer(layer)?;
        let heads = self.model.layout.heads[layer].len();
        let head_dim = self.model.config.head_dim();
        let q = self.project(g, x, FoundationParam::Wq(layer), layer, Site::Q)?;
        let k = self.project(g, x, FoundationParam::Wk(layer), layer, Site::K)?;
        let v = self.project(g, x, FoundationParam::Wv(layer), layer, Site::V)?;
        let geom = AttentionGeometry {
            heads,
            head_dim,
            causal: self.model.config.causal,
        };
        let mut att = g.attention(q, k, v, geom)?;
        if let Some(masks) = self.masks {
            let m = self.trainable(g, &masks.head[layer], ParamId::HeadMask(layer));
            let per_col = g.repeat_each(m, head_dim);
            att = g.mul(att, per_col)?;
        }
        self.project(g, att, FoundationParam::Wo(layer), layer, Site::O)
    }

    /// Feed-forward sub-layer on an already normalized input.
    pub fn ffn(&mut self, g: &mut Graph, x: Var, layer: usize) -> Result<Var> {
        self.check_layer(layer)?;
        let h = self.project(g, x, FoundationParam::Fc1(layer), layer, Site::Fc1)?;
        let mut a = g.activation(h, self.model.config.activation);
        if let Some(masks) = self.masks {
            let m = self.trainable(g, &masks.ffn[layer], ParamId::FfnMask(layer));
            a = g.mul(a, m)?;
        }
        self.project(g, a, FoundationParam::Fc2(layer), layer, Site::Fc2)
    }

    /// One pre-norm residual layer including any adapters.
    pub fn block(&mut self, g: &mut Graph, x: Var, layer: usize) -> Result<Var> {
        let eps = self.model.config.ln_eps;
        let (g1, b1) = (
            self.foundation(g, FoundationParam::Ln1Gain(layer)),
            self.foundation(g, FoundationParam::Ln1Bias(layer)),
        );
        let n1 = g.layer_norm(x, g1, b1, eps)?;
        let att = self.mha(g, n1, layer)?;
        let att = self.adapter(g, att, layer, Site::AfterMha)?;
        let x = g.add(x, att)?;
        let (g2, b2) = (
            self.foundation(g, FoundationParam::Ln2Gain(layer)),
            self.foundation(g, FoundationParam::Ln2Bias(layer)),
        );
        let n2 = g.layer_norm(x, g2, b2, eps)?;
        let f = self.ffn(g, n2, layer)?;
        let f = self.adapter(g, f, layer, Site::AfterFfn)?;
        g.add(x, f)
    }

    /// Class logits `[batch, classes]` for row-major `[batch, seq]` token ids.
    pub fn logits(&mut self, g: &mut Graph, tokens: &[u32], batch: usize, seq: usize) -> Result<Var> {
        let mut x = self.embed(g, tokens, batch, seq)?;
        for layer in 0..self.model.config.layers {
            x = self.block(g, x, layer)?;
        }
        let fg = self.foundation(g, FoundationParam::FinalGain);
        let fb = self.foundation(g, FoundationParam::FinalBias);
        let x = g.layer_norm(x, fg, fb, self.model.config.ln_eps)?;
        let pooled = g.mean_pool(x)?;
        let w = self.trainable(g, &self.model.classifier_w, ParamId::ClassifierW);
        let b = self.trainable(g, &self.model.classifier_b, ParamId::ClassifierB);
        let logits = g.matmul(pooled, w)?;
        g.add(logits, b)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.model.config.layers {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                bound: self.model.config.layers,
            });
        }
        Ok(())
    }
}

/// Full forward pass; returns the logits node and what was recorded.
#[allow(clippy::too_many_arguments)]
pub fn model_forward(
    g: &mut Graph,
    model: &FoundationModel,
    masks: Option<&MaskSet>,
    peft: &PeftSet,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    opts: ForwardOptions,
) -> Result<(Var, Trace)> {
    let mut fwd = Forward::new(model, masks, peft, opts)?;
    let logits = fwd.logits(g, tokens, batch, seq)?;
    Ok((logits, fwd.trace))
}

/// Attention sub-layer output for a `[batch, seq, d]` input.
pub fn mha_forward(
    g: &mut Graph,
    model: &FoundationModel,
    x: Var,
    layer: usize,
    masks: Option<&MaskSet>,
    peft: &PeftSet,
) -> Result<Var> {
    Forward::new(model, masks, peft, ForwardOptions::inference())?.mha(g, x, layer)
}

/// FFN sub-layer output for a `[batch, seq, d]` input.
pub fn ffn_forward(
    g: &mut Graph,
    model: &FoundationModel,
    x: Var,
    layer: usize,
    masks: Option<&MaskSet>,
    peft: &PeftSet,
) -> Result<Var> {
    Forward::new(model, masks, peft, ForwardOptions::inference())?.ffn(g, x, layer)
}

/// Physically removes the heads and FFN units the plan drops.
///
/// Kept mask values are folded into the rows of `W_O` and `W_fc2` that consume
/// the masked activations, so the result needs no masks and computes exactly what
/// the masked model computes with the dropped entries' masks set to zero. The
/// plan's indices are in original numbering and must be a subset of the current
/// layout; `masks`, when given, are aligned with the current layout.
pub fn materialize(model: &FoundationModel, plan: &PruningPlan, masks: Option<&MaskSet>) -> Result<FoundationModel> {
    let cfg = &model.config;
    if let Some(m) = masks {
        m.check_layout(&model.layout)?;
    }
    let target = plan.foundation_layout();
    target.validate(cfg)?;
    let dh = cfg.head_dim();
    let mut out = model.clone();
    for l in 0..cfg.layers {
        let head_pos = positions(&model.layout.heads[l], &target.heads[l], "head", l)?;
        let ffn_pos = positions(&model.layout.ffn[l], &target.ffn[l], "FFN unit", l)?;
        let cols: Vec<usize> = head_pos.iter().flat_map(|&p| p * dh..(p + 1) * dh).collect();
        let src = &model.layers[l];
        let dst = &mut out.layers[l];
        dst.wq = src.wq.select_cols(&cols)?;
        dst.wk = src.wk.select_cols(&cols)?;
        dst.wv = src.wv.select_cols(&cols)?;
        dst.wo = src.wo.select_rows(&cols)?;
        dst.fc1 = src.fc1.select_cols(&ffn_pos)?;
        dst.fc2 = src.fc2.select_rows(&ffn_pos)?;
        if let Some(m) = masks {
            let head_fold: Vec<f64> = head_pos
                .iter()
                .flat_map(|&p| std::iter::repeat_n(m.head[l].data()[p], dh))
                .collect();
            dst.wo.scale_rows(&head_fold)?;
            let ffn_fold: Vec<f64> = ffn_pos.iter().map(|&p| m.ffn[l].data()[p]).collect();
            dst.fc2.scale_rows(&ffn_fold)?;
        }
    }
    out.layout = target;
    Ok(out)
}

/// Positions inside `current` of each id in `keep`.
pub(crate) fn positions(current: &[usize], keep: &[usize], what: &str, layer: usize) -> Result<Vec<usize>> {
    keep.iter()
        .map(|id| {
            current.binary_search(id).map_err(|_| {
                Error::layout(format!(
                    "layer {layer}: {what} {id} is not present in the current layout"
                ))
            })
        })
        .collect()
}
