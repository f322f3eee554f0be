//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! whatever it needs for the backward pass. Nodes can only reference earlier
//! nodes, so the tape order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//! Leaves are copies of [`Tensor`]s; after a backward pass their gradients are
//! read back with [`Graph::grad`]. A fresh graph is built for every step.

use crate::error::{Error, Result};
use crate::kernel::{self, MatMut, MatRef};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    /// Tanh approximation:
    /// `gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(ActivationKind::Relu),
            "gelu" => Some(ActivationKind::Gelu),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
}

/// Multi-head layout of the last axis of the attention inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

// libm tanh is several times slower than exp; this form is exact to rounding.
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Elementwise(ElementwiseKind, Var, Var),
    Scale(Var, f64),
    Activation(Var, ActivationKind),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: Vec<f64>,
    },
    RepeatEach(Var, usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool(Var),
    Sum(Var),
    AbsSum(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_with(t, t.requires_grad())
    }

    /// Records a copy of `t` as a leaf with an explicit differentiability flag.
    pub fn leaf_with(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a differentiable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Bytes held by computed values, saved backward buffers and leaf gradients.
    /// Leaf values are copies of parameters owned elsewhere and are not counted.
    pub fn live_bytes(&self) -> usize {
        let floats: usize = self
            .nodes
            .iter()
            .map(|n| match &n.op {
                Op::Leaf => 0,
                Op::LayerNorm { mean, rstd, .. } => n.value.len() + mean.len() + rstd.len(),
                Op::Attention { probs, .. } | Op::SoftmaxCe { probs, .. } => n.value.len() + probs.len(),
                _ => n.value.len(),
            })
            .sum();
        let grads: usize = self.leaf_grads.iter().flatten().map(Vec::len).sum();
        (floats + grads) * std::mem::size_of::<f64>()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = *sa.last().expect("non-empty shape");
        if sb.len() != 2 || sa.len() < 2 || sb[0] != k {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let n = sb[1];
        let m = self.nodes[a.0].value.len() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        kernel::gemm(
            1.0,
            MatRef::dense(self.value(a), m, k),
            MatRef::dense(self.value(b), k, n),
            0.0,
            MatMut::dense(&mut out, m, n),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, rg, Op::MatMul(a, b)))
    }

    /// Elementwise add or multiply. `b` must have the same shape as `a`, equal the
    /// trailing axes of `a` (broadcast over the leading axes), or hold one element.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: ElementwiseKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcastable =
            sa == sb || self.nodes[b.0].value.len() == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !broadcastable {
            return Err(Error::Dimension {
                op: "elementwise",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        let out: Vec<f64> = match kind {
            ElementwiseKind::Add => av
                .chunks(nb)
                .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x + y))
                .collect(),
            ElementwiseKind::Mul => av
                .chunks(nb)
                .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x * y))
                .collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Elementwise(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, out, rg, Op::Scale(a, c))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let out = match kind {
            ActivationKind::Relu => self.value(x).iter().map(|&v| v.max(0.0)).collect(),
            ActivationKind::Gelu => self.value(x).iter().map(|&v| gelu(v)).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(shape, out, rg, Op::Activation(x, kind))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let d = *self.shape(x).last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut means = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        if !rg {
            means = Vec::new();
            rstd = Vec::new();
        }
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd,
            },
        ))
    }

    /// Scaled dot-product attention over `[batch, seq, heads * head_dim]` inputs;
    /// head `h` owns columns `h*head_dim .. (h+1)*head_dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttentionGeometry) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let width = geom.heads * geom.head_dim;
        if sq.len() != 3 || sq[2] != width || self.shape(k) != sq || self.shape(v) != sq {
            return Err(Error::Dimension {
                op: "attention",
                left: sq,
                right: vec![geom.heads, geom.head_dim],
            });
        }
        let (batch, seq) = (sq[0], sq[1]);
        let scale = 1.0 / (geom.head_dim as f64).sqrt();
        let mut probs = vec![0.0; batch * geom.heads * seq * seq];
        let mut out = vec![0.0; batch * seq * width];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..geom.heads {
                let off = b * seq * width + h * geom.head_dim;
                let p_off = (b * geom.heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                let qh = head_view(qv, off, seq, geom.head_dim, width);
                let kh_t = head_view(kv, off, seq, geom.head_dim, width).t();
                kernel::gemm(scale, qh, kh_t, 0.0, MatMut::dense(p, seq, seq));
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    if geom.causal {
                        row[i + 1..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                    }
                    kernel::softmax_row(row);
                }
                let vh = head_view(vv, off, seq, geom.head_dim, width);
                let oh = MatMut {
                    data: &mut out,
                    offset: off,
                    rows: seq,
                    cols: geom.head_dim,
                    rs: width,
                    cs: 1,
                };
                kernel::gemm(1.0, MatRef::dense(p, seq, seq), vh, 0.0, oh);
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(sq, out, rg, Op::Attention { q, k, v, geom, probs }))
    }

    /// `[n] -> [n * times]`, each entry repeated `times` times consecutively.
    pub fn repeat_each(&mut self, x: Var, times: usize) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let n = out.len();
        let rg = self.any_grad(&[x]);
        self.push(vec![n], out, rg, Op::RepeatEach(x, times))
    }

    /// Rows of a `[rows, d]` table selected by `ids`; the output has shape `prefix ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension {
                op: "gather",
                left: st,
                right: prefix.to_vec(),
            });
        }
        let (rows, d) = (st[0], st[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding row",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over axis 1 of a `[batch, seq, d]` tensor.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension {
                op: "mean_pool",
                left: s,
                right: vec![],
            });
        }
        let (b, seq, d) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; b * d];
        let inv = 1.0 / seq as f64;
        for bi in 0..b {
            for t in 0..seq {
                let row = &xv[(bi * seq + t) * d..(bi * seq + t + 1) * d];
                for j in 0..d {
                    out[bi * d + j] += row[j];
                }
            }
            out[bi * d..(bi + 1) * d].iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![b, d], out, rg, Op::MeanPool(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    /// L1 norm; the subgradient at exactly zero is taken as zero.
    pub fn abs_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.abs()).sum();
        let rg = self.any_grad(&[x]);
        self.push(vec![1], vec![s], rg, Op::AbsSum(x))
    }

    /// Mean cross-entropy of `[batch, classes]` logits against integer labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Dimension {
                op: "softmax_ce",
                left: s,
                right: vec![labels.len()],
            });
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: classes,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss -= row[label] - max - lse;
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - max - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Accumulates d(loss)/d(leaf) into every differentiable leaf reachable from `loss`.
    /// Calling it again without [`Graph::zero_grads`] adds to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = Accumulator {
                nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(buf) => buf.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gout),
                },
                Op::MatMul(a, b) => {
                    let (k, n) = (nodes[b.0].shape[0], nodes[b.0].shape[1]);
                    let m = nodes[a.0].value.len() / k;
                    acc.gemm_into(*a, MatRef::dense(&gout, m, n), MatRef::dense_t(&nodes[b.0].value, k, n));
                    acc.gemm_into(*b, MatRef::dense_t(&nodes[a.0].value, m, k), MatRef::dense(&gout, m, n));
                }
                Op::Elementwise(kind, a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let nb = bv.len();
                    if acc.wants(*b) {
                        let mut db = vec![0.0; nb];
                        match kind {
                            ElementwiseKind::Add => {
                                for gc in gout.chunks(nb) {
                                    db.iter_mut().zip(gc).for_each(|(d, g)| *d += g);
                                }
                            }
                            ElementwiseKind::Mul => {
                                for (gc, ac) in gout.chunks(nb).zip(av.chunks(nb)) {
                                    for ((d, g), x) in db.iter_mut().zip(gc).zip(ac) {
                                        *d += g * x;
                                    }
                                }
                            }
                        }
                        acc.add(*b, db);
                    }
                    if acc.wants(*a) {
                        match kind {
                            ElementwiseKind::Add => acc.add(*a, gout),
                            ElementwiseKind::Mul => {
                                let mut da = gout;
                                for dc in da.chunks_mut(nb) {
                                    dc.iter_mut().zip(bv).for_each(|(d, x)| *d *= x);
                                }
                                acc.add(*a, da);
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = gout.iter().map(|g| g * c).collect();
                    acc.add(*a, da);
                }
                Op::Activation(x, kind) => {
                    let xv = &nodes[x.0].value;
                    let dx: Vec<f64> = match kind {
                        ActivationKind::Relu => xv
                            .iter()
                            .zip(&gout)
                            .map(|(&v, g)| if v > 0.0 { *g } else { 0.0 })
                            .collect(),
                        ActivationKind::Gelu => xv.iter().zip(&gout).map(|(&v, g)| g * gelu_grad(v)).collect(),
                    };
                    acc.add(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let d = nodes[gain.0].value.len();
                    let g = &nodes[gain.0].value;
                    let rows = gout.len() / d;
                    // the normalized input is recomputed rather than kept on the tape
                    let xv = &nodes[x.0].value;
                    let xhat: Vec<f64> = xv
                        .chunks(d)
                        .zip(mean.iter().zip(rstd))
                        .flat_map(|(row, (m, rs))| row.iter().map(move |v| (v - m) * rs))
                        .collect();
                    if acc.wants(*gain) || acc.wants(*bias) {
                        let mut dg = vec![0.0; d];
                        let mut db = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += gout[r * d + j] * xhat[r * d + j];
                                db[j] += gout[r * d + j];
                            }
                        }
                        acc.add(*gain, dg);
                        acc.add(*bias, db);
                    }
                    if acc.wants(*x) {
                        let mut dx = vec![0.0; gout.len()];
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..d {
                                dxhat[j] = gout[r * d + j] * g[j];
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xhat[r * d + j];
                            }
                            mean_d /= d as f64;
                            mean_dx /= d as f64;
                            for j in 0..d {
                                dx[r * d + j] = rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                            }
                        }
                        acc.add(*x, dx);
                    }
                }
                Op::Attention { q, k, v, geom, probs } => {
                    let (batch, seq) = (node.shape[0], node.shape[1]);
                    let width = geom.heads * geom.head_dim;
                    let scale = 1.0 / (geom.head_dim as f64).sqrt();
                    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let mut dq = vec![0.0; gout.len()];
                    let mut dk = vec![0.0; gout.len()];
                    let mut dv = vec![0.0; gout.len()];
                    let mut dp = vec![0.0; seq * seq];
                    for b in 0..batch {
                        for h in 0..geom.heads {
                            let off = b * seq * width + h * geom.head_dim;
                            let p_off = (b * geom.heads + h) * seq * seq;
                            let p = &probs[p_off..p_off + seq * seq];
                            let go = head_view(&gout, off, seq, geom.head_dim, width);
                            kernel::gemm(
                                1.0,
                                MatRef::dense_t(p, seq, seq),
                                go,
                                1.0,
                                head_view_mut(&mut dv, off, seq, geom.head_dim, width),
                            );
                            let vh_t = head_view(vv, off, seq, geom.head_dim, width).t();
                            kernel::gemm(1.0, go, vh_t, 0.0, MatMut::dense(&mut dp, seq, seq));
                            for i in 0..seq {
                                let prow = &p[i * seq..(i + 1) * seq];
                                let drow = &mut dp[i * seq..(i + 1) * seq];
                                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                                for j in 0..seq {
                                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                                }
                            }
                            kernel::gemm(
                                1.0,
                                MatRef::dense(&dp, seq, seq),
                                head_view(kv, off, seq, geom.head_dim, width),
                                1.0,
                                head_view_mut(&mut dq, off, seq, geom.head_dim, width),
                            );
                            kernel::gemm(
                                1.0,
                                MatRef::dense_t(&dp, seq, seq),
                                head_view(qv, off, seq, geom.head_dim, width),
                                1.0,
                                head_view_mut(&mut dk, off, seq, geom.head_dim, width),
                            );
                        }
                    }
                    acc.add(*q, dq);
                    acc.add(*k, dk);
                    acc.add(*v, dv);
                }
                Op::RepeatEach(x, times) => {
                    let dx: Vec<f64> = gout.chunks(*times).map(|c| c.iter().sum()).collect();
                    acc.add(*x, dx);
                }
                Op::Gather { table, ids } => {
                    let d = nodes[table.0].shape[1];
                    let mut dt = vec![0.0; nodes[table.0].value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gout[r * d + j];
                        }
                    }
                    acc.add(*table, dt);
                }
                Op::MeanPool(x) => {
                    let s = &nodes[x.0].shape;
                    let (b, seq, d) = (s[0], s[1], s[2]);
                    let inv = 1.0 / seq as f64;
                    let mut dx = vec![0.0; b * seq * d];
                    for bi in 0..b {
                        for t in 0..seq {
                            for j in 0..d {
                                dx[(bi * seq + t) * d + j] = gout[bi * d + j] * inv;
                            }
                        }
                    }
                    acc.add(*x, dx);
                }
                Op::Sum(x) => {
                    let dx = vec![gout[0]; nodes[x.0].value.len()];
                    acc.add(*x, dx);
                }
                Op::AbsSum(x) => {
                    let dx: Vec<f64> = nodes[x.0]
                        .value
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                gout[0]
                            } else if v < 0.0 {
                                -gout[0]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc.add(*x, dx);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let classes = nodes[logits.0].shape[1];
                    let inv = gout[0] / labels.len() as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * inv).collect();
                    for (r, &label) in labels.iter().enumerate() {
                        dl[r * classes + label] -= inv;
                    }
                    acc.add(*logits, dl);
                }
            }
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `a * b` to the gradient of `v` without a temporary.
    fn gemm_into(&mut self, v: Var, a: MatRef<'_>, b: MatRef<'_>) {
        if !self.wants(v) {
            return;
        }
        let (m, n) = (a.rows, b.cols);
        match &mut self.grads[v.0] {
            Some(buf) => kernel::gemm(1.0, a, b, 1.0, MatMut::dense(buf, m, n)),
            slot @ None => {
                let mut buf = vec![0.0; m * n];
                kernel::gemm(1.0, a, b, 0.0, MatMut::dense(&mut buf, m, n));
                *slot = Some(buf);
            }
        }
    }
}

fn head_view(data: &[f64], offset: usize, seq: usize, head_dim: usize, width: usize) -> MatRef<'_> {
    MatRef {
        data,
        offset,
        rows: seq,
        cols: head_dim,
        rs: width,
        cs: 1,
    }
}

fn head_view_mut(data: &mut [f64], offset: usize, seq: usize, head_dim: usize, width: usize) -> MatMut<'_> {
    MatMut {
        data,
        offset,
        rows: seq,
        cols: head_dim,
        rs: width,
        cs: 1,
    }
}
