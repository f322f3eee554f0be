//! Central finite-difference checks of the tape's gradients.

#![allow(clippy::needless_range_loop)]

use light_peft::fm_prune::{mask_loss, MaskPenalty, MaskSet};
use light_peft::graph::{ActivationKind, AttentionGeometry, Graph, Var};
use light_peft::model::{model_forward, ForwardOptions, FoundationModel, ParamId};
use light_peft::peft::PeftSet;
use light_peft::tensor::{SeededRng, Tensor};
use rand::Rng;

use super::{close, full_lora, perturb_norms, random_masks, rng, tiny, tokens};

pub const STEP: f64 = 1e-5;

/// Elements checked and the first few mismatches.
#[derive(Debug, Default)]
pub struct Worst {
    pub checked: usize,
    pub failures: Vec<String>,
}

impl Worst {
    fn see(&mut self, a: f64, n: f64, rel: f64, floor: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if !close(a, n, rel, floor) && self.failures.len() < 10 {
            self.failures.push(format!("{}: analytic {a:e} numeric {n:e}", at()));
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

type OpFn<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Var;

/// Scalar probe `sum(f(inputs) * r)` with a fixed random `r`, so every output
/// element contributes with its own weight.
fn probe(inputs: &[Tensor], f: OpFn, r: &mut Option<Tensor>, seed: u64, grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf_with(t, grads)).collect();
    let out = f(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let weights = r.get_or_insert_with(|| Tensor::randn(shape, 1.0, &mut rng(seed)));
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let value = g.value(loss)[0];
    if !grads {
        return (value, vec![]);
    }
    g.backward(loss).unwrap();
    let gs = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    (value, gs)
}

/// Checks every input element of one op.
pub fn check_op(name: &str, inputs: &[Tensor], f: OpFn, rel: f64, floor: f64) -> Worst {
    let mut r = None;
    let (_, analytic) = probe(inputs, f, &mut r, 0x0D, true);
    let mut worst = Worst::default();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut at = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += delta;
                probe(&xs, f, &mut r, 0x0D, false).0
            };
            let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            let a = analytic[i].get(j).copied().unwrap_or(0.0);
            worst.see(a, numeric, rel, floor, || format!("{name} input {i} element {j}"));
        }
    }
    worst
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..2.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Every differentiable operation of the tape, each at the given tolerance.
pub fn check_all_ops(rel: f64, floor: f64) -> Vec<(String, Worst)> {
    let mut r = rng(0x6C);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: OpFn| {
        out.push((name.to_string(), check_op(name, &inputs, f, rel, floor)));
    };
    run(
        "matmul",
        vec![randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)],
        &|g, v| g.matmul(v[0], v[1]).unwrap(),
    );
    run(
        "matmul_batched",
        vec![randn(&[2, 3, 4], &mut r), randn(&[4, 5], &mut r)],
        &|g, v| g.matmul(v[0], v[1]).unwrap(),
    );
    run("add", vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)], &|g, v| {
        g.add(v[0], v[1]).unwrap()
    });
    run(
        "add_broadcast",
        vec![randn(&[2, 3, 4], &mut r), randn(&[4], &mut r)],
        &|g, v| g.add(v[0], v[1]).unwrap(),
    );
    run(
        "mul_broadcast",
        vec![randn(&[5, 4], &mut r), randn(&[4], &mut r)],
        &|g, v| g.mul(v[0], v[1]).unwrap(),
    );
    run(
        "mul_scalar",
        vec![randn(&[2, 3], &mut r), randn(&[1], &mut r)],
        &|g, v| g.mul(v[0], v[1]).unwrap(),
    );
    run("scale", vec![randn(&[2, 3], &mut r)], &|g, v| g.scale(v[0], -1.7));
    run("relu", vec![away_from_zero(&[4, 5], &mut r)], &|g, v| {
        g.activation(v[0], ActivationKind::Relu)
    });
    run("gelu", vec![Tensor::randn(vec![4, 5], 2.0, &mut r)], &|g, v| {
        g.activation(v[0], ActivationKind::Gelu)
    });
    run(
        "layer_norm",
        vec![
            randn(&[2, 3, 5], &mut r),
            away_from_zero(&[5], &mut r),
            randn(&[5], &mut r),
        ],
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
    );
    for causal in [false, true] {
        let geom = AttentionGeometry {
            heads: 2,
            head_dim: 3,
            causal,
        };
        let qkv = vec![
            randn(&[2, 4, 6], &mut r),
            randn(&[2, 4, 6], &mut r),
            randn(&[2, 4, 6], &mut r),
        ];
        let name = if causal { "attention_causal" } else { "attention" };
        run(name, qkv, &move |g, v| g.attention(v[0], v[1], v[2], geom).unwrap());
    }
    run("repeat_each", vec![randn(&[3], &mut r)], &|g, v| g.repeat_each(v[0], 4));
    run("gather", vec![randn(&[5, 3], &mut r)], &|g, v| {
        g.gather(v[0], &[4, 0, 4, 2], &[2, 2]).unwrap()
    });
    run("mean_pool", vec![randn(&[2, 3, 4], &mut r)], &|g, v| {
        g.mean_pool(v[0]).unwrap()
    });
    run("sum", vec![randn(&[3, 2], &mut r)], &|g, v| g.sum(v[0]));
    run("abs_sum", vec![away_from_zero(&[3, 4], &mut r)], &|g, v| {
        g.abs_sum(v[0])
    });
    run("softmax_ce", vec![randn(&[4, 3], &mut r)], &|g, v| {
        g.softmax_ce(v[0], &[0, 2, 1, 2]).unwrap()
    });
    out
}

/// Where a trainable id lives, for perturbation.
fn trainable_mut<'a>(
    model: &'a mut FoundationModel,
    peft: &'a mut PeftSet,
    masks: &'a mut MaskSet,
    id: ParamId,
) -> &'a mut Tensor {
    match id {
        ParamId::ClassifierW => &mut model.classifier_w,
        ParamId::ClassifierB => &mut model.classifier_b,
        ParamId::PeftDown(i) => &mut peft.modules[i].down,
        ParamId::PeftUp(i) => &mut peft.modules[i].up,
        ParamId::HeadMask(_) | ParamId::FfnMask(_) => masks.tensor_mut(id).unwrap(),
    }
}

struct ModelCase {
    model: FoundationModel,
    peft: PeftSet,
    masks: MaskSet,
    tokens: Vec<u32>,
    labels: Vec<usize>,
    batch: usize,
    seq: usize,
}

impl ModelCase {
    fn objective(&self) -> f64 {
        self.run(false).0
    }

    /// Task loss plus the mask penalty, and (when asked) the graph with gradients.
    fn run(&self, grads: bool) -> (f64, Option<(Graph, light_peft::model::Trace)>) {
        let opts = ForwardOptions {
            track_trainable: grads,
            foundation_grads: grads,
            observe_modules: false,
        };
        let mut g = Graph::new();
        let (logits, trace) = model_forward(
            &mut g,
            &self.model,
            Some(&self.masks),
            &self.peft,
            &self.tokens,
            self.batch,
            self.seq,
            opts,
        )
        .unwrap();
        let task = g.softmax_ce(logits, &self.labels).unwrap();
        let penalty = MaskPenalty {
            lambda_a: 1e-2,
            lambda_f: 1e-2,
        };
        let loss = if grads {
            mask_loss(&mut g, task, &trace, &penalty).unwrap()
        } else {
            task
        };
        let value = g.value(loss)[0];
        if !grads {
            // the penalty has no tape node without tracked masks
            return (value + penalty.value(&self.masks), None);
        }
        g.backward(loss).unwrap();
        (value, Some((g, trace)))
    }
}

/// Gradient of every parameter (foundation, masks, LoRA factors, classifier) of a
/// 2-layer toy model against central differences.
pub fn check_model(seed: u64, rel: f64, floor: f64) -> Worst {
    let mut r = rng(seed);
    let cfg = tiny(2, 8, 2, 16);
    let mut model = FoundationModel::init(&cfg, r.gen()).unwrap();
    perturb_norms(&mut model, &mut r);
    let peft = full_lora(&model, 2, &mut r);
    let masks = random_masks(&model, &mut r);
    let (batch, seq) = (3, 5);
    let case = ModelCase {
        tokens: tokens(batch * seq, cfg.vocab_size, &mut r),
        labels: (0..batch).map(|_| r.gen_range(0..cfg.num_classes)).collect(),
        model,
        peft,
        masks,
        batch,
        seq,
    };
    let (_, graph) = case.run(true);
    let (g, trace) = graph.unwrap();
    let mut worst = Worst::default();

    for &(p, var) in &trace.foundation {
        let analytic = g
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; case.model.param(p).numel()]);
        for j in 0..analytic.len() {
            let at = |delta: f64| {
                let mut c = case.clone_all();
                c.model.param_mut(p).data_mut()[j] += delta;
                c.objective()
            };
            let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            worst.see(analytic[j], numeric, rel, floor, || format!("{p:?}[{j}]"));
        }
    }
    for &(id, var) in &trace.trainable {
        let analytic = g.grad(var).unwrap().to_vec();
        for j in 0..analytic.len() {
            let at = |delta: f64| {
                let mut c = case.clone_all();
                let (m, p, k) = (&mut c.model, &mut c.peft, &mut c.masks);
                trainable_mut(m, p, k, id).data_mut()[j] += delta;
                c.objective()
            };
            let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            worst.see(analytic[j], numeric, rel, floor, || format!("{id:?}[{j}]"));
        }
    }
    worst
}

impl ModelCase {
    fn clone_all(&self) -> ModelCase {
        ModelCase {
            model: self.model.clone(),
            peft: self.peft.clone(),
            masks: self.masks.clone(),
            tokens: self.tokens.clone(),
            labels: self.labels.clone(),
            batch: self.batch,
            seq: self.seq,
        }
    }
}
