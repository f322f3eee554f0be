//! The `LPFT` checkpoint format.
//!
//! Layout (all integers little-endian, all reals IEEE-754 binary64):
//!
//! ```text
//! "LPFT" | u32 version | u8 stage | u64 foundation seed
//! model config | PEFT config | pruning plan | mask values
//! PEFT modules keyed by (layer, site, kind) | classifier weight, bias
//! u8 has-ledger [ledger] | u64 CRC-64/XZ of every preceding byte
//! ```
//!
//! A checkpoint never stores foundation weights: they are regenerated from the
//! seed and, for pruned stages, re-materialized from the plan and mask values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fm_prune::MaskSet;
use crate::graph::ActivationKind;
use crate::model::{materialize, FoundationModel, HeadLayout, ModelConfig};
use crate::peft::{AttachPoint, PeftConfig, PeftKind, PeftModule, PeftSet, Site};
use crate::peft_prune::ImportanceLedger;
use crate::pipeline::{Pruned, TrainConfig};
use crate::plan::PruningPlan;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LPFT";
pub const FORMAT_VERSION: u32 = 1;

const CRC: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
const HEADER_LEN: usize = 8;
const TRAILER_LEN: usize = 8;

/// How far along the lifecycle a checkpoint was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Dense model, live masks and the full estimation-set modules, plus the ledger.
    Estimated,
    /// Pruned foundation (masks folded) and pruned modules, before fine-tuning.
    Pruned,
    Finetuned,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Estimated => 1,
            Stage::Pruned => 2,
            Stage::Finetuned => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Stage::Estimated),
            2 => Some(Stage::Pruned),
            3 => Some(Stage::Finetuned),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Estimated => "estimated",
            Stage::Pruned => "pruned",
            Stage::Finetuned => "finetuned",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model_config: ModelConfig,
    pub peft_config: PeftConfig,
    pub foundation_seed: u64,
    pub plan: PruningPlan,
    /// Mask values of the units the plan keeps, aligned with `plan.heads` / `plan.ffn`.
    pub masks: MaskSet,
    pub peft: PeftSet,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    pub ledger: Option<ImportanceLedger>,
}

impl Checkpoint {
    /// The foundation model this checkpoint runs on, regenerated from the seed.
    ///
    /// For [`Stage::Estimated`] the model is dense and [`Checkpoint::masks`] must be
    /// applied at forward time; later stages come back materialized.
    pub fn build_model(&self) -> Result<FoundationModel> {
        let base = FoundationModel::init(&self.model_config, self.foundation_seed)?;
        let mut model = match self.stage {
            Stage::Estimated => {
                if self.plan.foundation_layout() != base.layout {
                    return Err(Error::Malformed(
                        "estimation checkpoint with a non-identity plan".into(),
                    ));
                }
                base
            }
            Stage::Pruned | Stage::Finetuned => {
                let dense_masks = scatter_masks(&base.layout, &self.plan, &self.masks)?;
                materialize(&base, &self.plan, Some(&dense_masks))?
            }
        };
        model.classifier_w = self.classifier_w.clone();
        model.classifier_b = self.classifier_b.clone();
        Ok(model)
    }

    /// A model and modules ready for inference; live estimation masks are folded in.
    pub fn runnable(&self) -> Result<(FoundationModel, PeftSet)> {
        let model = self.build_model()?;
        let model = match self.stage {
            Stage::Estimated => materialize(&model, &self.plan, Some(&self.masks))?,
            Stage::Pruned | Stage::Finetuned => model,
        };
        Ok((model, self.peft.clone()))
    }

    /// Snapshot after estimation: dense plan, live masks, every module and the ledger.
    pub fn estimated(
        cfg: &TrainConfig,
        model: &FoundationModel,
        peft: &PeftSet,
        masks: &MaskSet,
        ledger: &ImportanceLedger,
    ) -> Self {
        Checkpoint {
            stage: Stage::Estimated,
            model_config: cfg.model.clone(),
            peft_config: cfg.peft,
            foundation_seed: cfg.foundation_seed,
            plan: PruningPlan::identity(&model.layout, peft),
            masks: masks.clone(),
            peft: peft.clone(),
            classifier_w: model.classifier_w.clone(),
            classifier_b: model.classifier_b.clone(),
            ledger: Some(ledger.clone()),
        }
    }

    /// Snapshot of a pruned (and possibly fine-tuned) model.
    pub fn pruned(cfg: &TrainConfig, pruned: &Pruned, stage: Stage) -> Self {
        Checkpoint {
            stage,
            model_config: cfg.model.clone(),
            peft_config: cfg.peft,
            foundation_seed: cfg.foundation_seed,
            plan: pruned.plan.clone(),
            masks: pruned.kept_masks.clone(),
            peft: pruned.peft.clone(),
            classifier_w: pruned.model.classifier_w.clone(),
            classifier_b: pruned.model.classifier_b.clone(),
            ledger: None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.stage.code());
        w.u64(self.foundation_seed);
        write_model_config(&mut w, &self.model_config);
        w.u8(kind_code(self.peft_config.kind));
        w.len(self.peft_config.rank);
        w.f64(self.peft_config.scale);
        write_plan(&mut w, &self.plan);
        for t in self.masks.head.iter().chain(&self.masks.ffn) {
            w.tensor(t);
        }
        w.len(self.peft.len());
        for m in &self.peft.modules {
            write_module(&mut w, m);
        }
        w.tensor(&self.classifier_w);
        w.tensor(&self.classifier_b);
        match &self.ledger {
            None => w.u8(0),
            Some(l) => {
                w.u8(1);
                write_ledger(&mut w, l);
            }
        }
        let sum = CRC.checksum(&w.buf);
        w.u64(sum);
        w.buf
    }

    /// Checks magic, then version, then checksum, then parses.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic_len = MAGIC.len().min(bytes.len());
        if bytes[..magic_len] != MAGIC[..magic_len] || bytes.is_empty() {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN + TRAILER_LEN {
            return Err(Error::Checksum {
                stored: 0,
                computed: CRC.checksum(bytes),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        let computed = CRC.checksum(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader {
            buf: body,
            pos: HEADER_LEN,
        };
        let stage = Stage::from_code(r.u8()?).ok_or_else(|| malformed("unknown stage"))?;
        let foundation_seed = r.u64()?;
        let model_config = read_model_config(&mut r)?;
        let peft_config = PeftConfig {
            kind: kind_from_code(r.u8()?)?,
            rank: r.len()?,
            scale: r.f64()?,
        };
        let plan = read_plan(&mut r)?;
        plan.validate(&model_config, peft_config.rank)
            .map_err(|e| malformed(format!("invalid plan: {e}")))?;
        // estimation masks are still live parameters; folded ones are plain values
        let live = stage == Stage::Estimated;
        let mut mask = || r.tensor().map(|t| t.with_requires_grad(live));
        let head = (0..model_config.layers).map(|_| mask()).collect::<Result<_>>()?;
        let ffn = (0..model_config.layers).map(|_| mask()).collect::<Result<_>>()?;
        let masks = MaskSet { head, ffn };
        masks
            .check_layout(&plan.foundation_layout())
            .map_err(|e| malformed(format!("mask values do not match the plan: {e}")))?;
        let n = r.len()?;
        let modules = (0..n).map(|_| read_module(&mut r)).collect::<Result<Vec<_>>>()?;
        let peft = PeftSet::new(modules).map_err(|e| malformed(e.to_string()))?;
        let classifier_w = r.tensor()?.with_requires_grad(true);
        let classifier_b = r.tensor()?.with_requires_grad(true);
        let ledger = match r.u8()? {
            0 => None,
            1 => Some(read_ledger(&mut r)?),
            _ => return Err(malformed("bad ledger flag")),
        };
        if r.pos != body.len() {
            return Err(malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            stage,
            model_config,
            peft_config,
            foundation_seed,
            plan,
            masks,
            peft,
            classifier_w,
            classifier_b,
            ledger,
        })
    }
}

/// Dense-layout masks holding the kept values at kept positions and zero elsewhere.
pub fn scatter_masks(dense: &HeadLayout, plan: &PruningPlan, kept: &MaskSet) -> Result<MaskSet> {
    kept.check_layout(&plan.foundation_layout())?;
    let scatter = |ids: &[usize], keep: &[usize], vals: &Tensor| -> Result<Tensor> {
        let mut out = vec![0.0; ids.len()];
        for (k, v) in keep.iter().zip(vals.data()) {
            let p = ids
                .binary_search(k)
                .map_err(|_| Error::layout(format!("plan keeps unit {k}, which the base lacks")))?;
            out[p] = *v;
        }
        Tensor::new(vec![ids.len()], out)
    };
    let head = (0..dense.heads.len())
        .map(|l| scatter(&dense.heads[l], &plan.heads[l], &kept.head[l]))
        .collect::<Result<_>>()?;
    let ffn = (0..dense.ffn.len())
        .map(|l| scatter(&dense.ffn[l], &plan.ffn[l], &kept.ffn[l]))
        .collect::<Result<_>>()?;
    Ok(MaskSet { head, ffn })
}

/// Assembles a runnable model from a base checkpoint's pruned foundation and another
/// checkpoint's PEFT modules and classifier.
///
/// Both must come from the same base: equal model config, foundation seed,
/// head/FFN keep-sets and folded mask values. Otherwise the first difference is reported.
pub fn swap_adapter(base: &Checkpoint, adapter: &Checkpoint) -> Result<(FoundationModel, PeftSet)> {
    if base.model_config != adapter.model_config {
        return Err(Error::Compatibility("model configurations differ".into()));
    }
    if base.foundation_seed != adapter.foundation_seed {
        return Err(Error::Compatibility(format!(
            "foundation seed {} vs {}",
            base.foundation_seed, adapter.foundation_seed
        )));
    }
    if (base.stage == Stage::Estimated) != (adapter.stage == Stage::Estimated) {
        return Err(Error::Compatibility(format!(
            "cannot combine a {} base with a {} adapter",
            base.stage.name(),
            adapter.stage.name()
        )));
    }
    if let Some(diff) = base.plan.foundation_mismatch(&adapter.plan) {
        return Err(Error::Compatibility(format!("pruning plans differ at {diff}")));
    }
    let mask_sets = [
        ("head mask", &base.masks.head, &adapter.masks.head),
        ("ffn mask", &base.masks.ffn, &adapter.masks.ffn),
    ];
    for (what, a, b) in mask_sets {
        for (l, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            if let Some(i) = (0..x.numel()).find(|&i| x.data()[i].to_bits() != y.data()[i].to_bits()) {
                return Err(Error::Compatibility(format!(
                    "{what} values differ at layer {l}, position {i}: {} vs {}",
                    x.data()[i],
                    y.data()[i]
                )));
            }
        }
    }
    let mut model = base.build_model()?;
    model.classifier_w = adapter.classifier_w.clone();
    model.classifier_b = adapter.classifier_b.clone();
    Ok((model, adapter.peft.clone()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "path has no file name",
        ))
    })?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Malformed(msg.into())
}

fn kind_code(k: PeftKind) -> u8 {
    match k {
        PeftKind::Lora => 1,
        PeftKind::Adapter => 2,
    }
}

fn kind_from_code(c: u8) -> Result<PeftKind> {
    match c {
        1 => Ok(PeftKind::Lora),
        2 => Ok(PeftKind::Adapter),
        _ => Err(malformed(format!("unknown PEFT kind {c}"))),
    }
}

fn activation_code(a: ActivationKind) -> u8 {
    match a {
        ActivationKind::Relu => 1,
        ActivationKind::Gelu => 2,
    }
}

fn activation_from_code(c: u8) -> Result<ActivationKind> {
    match c {
        1 => Ok(ActivationKind::Relu),
        2 => Ok(ActivationKind::Gelu),
        _ => Err(malformed(format!("unknown activation {c}"))),
    }
}

fn write_model_config(w: &mut Writer, c: &ModelConfig) {
    for v in [
        c.layers,
        c.hidden,
        c.heads,
        c.ffn_dim,
        c.vocab_size,
        c.max_seq,
        c.num_classes,
    ] {
        w.len(v);
    }
    w.u8(activation_code(c.activation));
    w.u8(u8::from(c.causal));
    w.f64(c.ln_eps);
}

fn read_model_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        layers: r.len()?,
        hidden: r.len()?,
        heads: r.len()?,
        ffn_dim: r.len()?,
        vocab_size: r.len()?,
        max_seq: r.len()?,
        num_classes: r.len()?,
        activation: activation_from_code(r.u8()?)?,
        causal: r.u8()? != 0,
        ln_eps: r.f64()?,
    };
    cfg.validate()
        .map_err(|e| malformed(format!("invalid model config: {e}")))?;
    Ok(cfg)
}

fn write_plan(w: &mut Writer, p: &PruningPlan) {
    for sets in [&p.heads, &p.ffn] {
        w.len(sets.len());
        for s in sets.iter() {
            w.indices(s);
        }
    }
    w.len(p.modules.len());
    for (m, r) in p.modules.iter().zip(&p.ranks) {
        w.len(m.layer);
        w.u8(m.site.code());
        w.indices(r);
    }
}

fn read_plan(r: &mut Reader<'_>) -> Result<PruningPlan> {
    let mut sets = || -> Result<Vec<Vec<usize>>> {
        let n = r.len()?;
        (0..n).map(|_| r.indices()).collect()
    };
    let heads = sets()?;
    let ffn = sets()?;
    let n = r.len()?;
    let mut modules = Vec::with_capacity(n.min(1 << 16));
    let mut ranks = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        modules.push(read_attach(r)?);
        ranks.push(r.indices()?);
    }
    Ok(PruningPlan {
        heads,
        ffn,
        modules,
        ranks,
    })
}

fn read_attach(r: &mut Reader<'_>) -> Result<AttachPoint> {
    let layer = r.len()?;
    let code = r.u8()?;
    let site = Site::from_code(code).ok_or_else(|| malformed(format!("unknown site {code}")))?;
    Ok(AttachPoint::new(layer, site))
}

fn write_module(w: &mut Writer, m: &PeftModule) {
    w.len(m.attach.layer);
    w.u8(m.attach.site.code());
    w.u8(kind_code(m.kind));
    w.len(m.rank);
    w.f64(m.scale);
    w.u8(activation_code(m.activation));
    w.indices(&m.active_ranks);
    w.tensor(&m.down);
    w.tensor(&m.up);
}

fn read_module(r: &mut Reader<'_>) -> Result<PeftModule> {
    let attach = read_attach(r)?;
    let kind = kind_from_code(r.u8()?)?;
    if attach.site.kind() != kind {
        return Err(malformed(format!("{kind:?} module keyed at {attach}")));
    }
    let rank = r.len()?;
    let scale = r.f64()?;
    let activation = activation_from_code(r.u8()?)?;
    let active_ranks = r.indices()?;
    let down = r.tensor()?.with_requires_grad(true);
    let up = r.tensor()?.with_requires_grad(true);
    let consistent = down.shape().len() == 2
        && up.shape().len() == 2
        && down.shape()[1] == active_ranks.len()
        && up.shape()[0] == active_ranks.len()
        && !active_ranks.is_empty()
        && active_ranks.iter().all(|&k| k < rank);
    if !consistent {
        return Err(malformed(format!("inconsistent factor shapes for {attach}")));
    }
    Ok(PeftModule {
        attach,
        kind,
        down,
        up,
        rank,
        scale,
        active_ranks,
        activation,
    })
}

fn write_ledger(w: &mut Writer, l: &ImportanceLedger) {
    w.len(l.len());
    for i in 0..l.len() {
        w.len(l.modules[i].layer);
        w.u8(l.modules[i].site.code());
        w.u64(l.module_count[i]);
        w.f64(l.module_mean[i]);
        w.indices(&l.rank_ids[i]);
        w.len(l.rank_scores[i].len());
        for &s in &l.rank_scores[i] {
            w.f64(s);
        }
    }
    w.u64(l.steps_observed);
}

fn read_ledger(r: &mut Reader<'_>) -> Result<ImportanceLedger> {
    let n = r.len()?;
    let mut l = ImportanceLedger {
        modules: Vec::new(),
        rank_ids: Vec::new(),
        module_count: Vec::new(),
        module_mean: Vec::new(),
        rank_scores: Vec::new(),
        steps_observed: 0,
    };
    for _ in 0..n {
        l.modules.push(read_attach(r)?);
        l.module_count.push(r.u64()?);
        l.module_mean.push(r.f64()?);
        let ids = r.indices()?;
        let k = r.len()?;
        if k != ids.len() {
            return Err(malformed("ledger rank ids and scores differ in length"));
        }
        l.rank_ids.push(ids);
        l.rank_scores.push((0..k).map(|_| r.f64()).collect::<Result<_>>()?);
    }
    l.steps_observed = r.u64()?;
    Ok(l)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn indices(&mut self, v: &[usize]) {
        self.len(v.len());
        v.iter().for_each(|&i| self.len(i));
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| self.len(d));
        t.data().iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| malformed(format!("length {v} does not fit in memory")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count that must be coverable by the remaining bytes at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.len()?;
        if n.checked_mul(unit).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(malformed(format!("count {n} overruns the data")));
        }
        Ok(n)
    }

    fn indices(&mut self) -> Result<Vec<usize>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.len()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(malformed(format!("tensor rank {ndim}")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| self.len()).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| malformed(format!("tensor of shape {shape:?} overruns the data")))?;
        let data = (0..numel).map(|_| self.f64()).collect::<Result<_>>()?;
        Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))
    }
}
