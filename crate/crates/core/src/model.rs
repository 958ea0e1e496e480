//! GATv2 layers and the multi-layer, multi-head network.
//!
//! For a directed entry `i ← j` (target `i`, source `j`) a head computes the
//! un-normalized score `e_ij = aᵀ LeakyReLU(W₂ [h_i ‖ h_j])`, normalizes the
//! scores over the closed neighborhood of `i` with a softmax, and aggregates
//! `Σ_j α_ij W h_j`. Hidden layers apply ELU and concatenate heads; the final
//! layer averages heads and emits class logits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::rng::{self, streams};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::glorot_init;
use crate::{Error, Result};

/// Negative slope of the LeakyReLU inside the score function.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Directed view of a graph for message passing.
///
/// Entries are sorted by target, then source, and contain both orientations
/// of every undirected edge plus one self-loop per node (when the graph has
/// self-loop injection enabled).
#[derive(Debug, Clone)]
pub struct DirectedEdgeIndex {
    num_nodes: usize,
    targets: Arc<[usize]>,
    sources: Arc<[usize]>,
    origin: Vec<Option<usize>>,
}

impl DirectedEdgeIndex {
    pub fn new(graph: &Graph) -> Self {
        let n = graph.num_nodes();
        let loops = graph.self_loops_added();
        let cap = 2 * graph.num_edges() + if loops { n } else { 0 };
        let mut targets = Vec::with_capacity(cap);
        let mut sources = Vec::with_capacity(cap);
        let mut origin = Vec::with_capacity(cap);
        let edges = graph.edges();
        for i in 0..n {
            let nbrs = graph.neighbors(i);
            let split = nbrs.partition_point(|&j| j < i);
            let lower = nbrs[..split].iter().map(|&j| (j, false));
            let upper = nbrs[split..].iter().map(|&j| (j, false));
            let self_loop = loops.then_some((i, true));
            for (j, is_loop) in lower.chain(self_loop).chain(upper) {
                targets.push(i);
                sources.push(j);
                origin.push(if is_loop {
                    None
                } else {
                    let key = (i.min(j), i.max(j));
                    edges.binary_search(&key).ok()
                });
            }
        }
        DirectedEdgeIndex {
            num_nodes: n,
            targets: targets.into(),
            sources: sources.into(),
            origin,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &Arc<[usize]> {
        &self.targets
    }

    pub fn sources(&self) -> &Arc<[usize]> {
        &self.sources
    }

    /// Index into `Graph::edges()` of the undirected edge entry `k` came
    /// from; `None` for self-loops.
    pub fn undirected_origin(&self, k: usize) -> Option<usize> {
        self.origin[k]
    }

    pub fn is_self_loop(&self, k: usize) -> bool {
        self.origin[k].is_none()
    }

    /// `(target, source)` of entry `k`.
    pub fn entry(&self, k: usize) -> (usize, usize) {
        (self.targets[k], self.sources[k])
    }

    /// Keep-mask that zeroes attention on entries whose endpoints carry
    /// different labels. Self-loops are always kept.
    pub fn intra_class_mask(&self, labels: &[usize]) -> Arc<[bool]> {
        (0..self.len())
            .map(|k| labels[self.targets[k]] == labels[self.sources[k]])
            .collect()
    }
}

/// Weights of one attention head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `W₂`, shape `d_out × 2·d_in`; the first `d_in` columns act on the
    /// target representation.
    pub w_score: Tensor,
    /// `a`, shape `d_out × 1`.
    pub attn: Tensor,
    /// `W`, shape `d_out × d_in`, the value transform.
    pub w_value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
}

impl LayerParams {
    pub fn in_dim(&self) -> usize {
        self.heads[0].w_value.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].w_value.rows()
    }
}

/// Network shape. Hidden layers concatenate heads, so every layer after the
/// first sees `heads · hidden_dim` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.layers) {
            return Err(Error::Config(format!("layers = {} not in {{1, 2}}", self.layers)));
        }
        if self.heads == 0 || self.hidden_dim == 0 || self.in_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    /// `(d_in, d_out)` per head for each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layers);
        let mut d_in = self.in_dim;
        for t in 0..self.layers {
            if t + 1 == self.layers {
                dims.push((d_in, self.num_classes));
            } else {
                dims.push((d_in, self.hidden_dim));
                d_in = self.hidden_dim * self.heads;
            }
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Glorot-uniform initialisation of every weight.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(t, (d_in, d_out))| LayerParams {
                heads: (0..arch.heads)
                    .map(|k| {
                        let s = |which: u64| rng::derive(seed, &[streams::INIT, t as u64, k as u64, which]);
                        HeadParams {
                            w_score: glorot_init(d_out, 2 * d_in, s(0)),
                            attn: glorot_init(d_out, 1, s(1)),
                            w_value: glorot_init(d_out, d_in, s(2)),
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(ModelParams { layers })
    }

    /// Every tensor with its checkpoint path, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (t, layer) in self.layers.iter().enumerate() {
            for (k, h) in layer.heads.iter().enumerate() {
                out.push((format!("layer{t}/head{k}/w_score"), &h.w_score));
                out.push((format!("layer{t}/head{k}/attn"), &h.attn));
                out.push((format!("layer{t}/head{k}/w_value"), &h.w_value));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.heads.iter_mut())
            .flat_map(|h| [&mut h.w_score, &mut h.attn, &mut h.w_value])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.heads
                        .iter()
                        .map(|h| HeadVars {
                            w_score: tape.param(h.w_score.clone()),
                            attn: tape.param(h.attn.clone()),
                            w_value: tape.param(h.w_value.clone()),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Arranges vars given in [`ModelParams::tensors`] order into the
    /// layer/head structure, checking shapes.
    pub fn bind(&self, vars: &[Var]) -> Result<ParamVars> {
        let tensors = self.tensors();
        if vars.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameter tensors",
                vars.len(),
                tensors.len()
            )));
        }
        for (v, t) in vars.iter().zip(&tensors) {
            if v.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "bind",
                    lhs: t.shape(),
                    rhs: v.shape(),
                });
            }
        }
        let mut it = vars.chunks(3);
        Ok(ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.heads
                        .iter()
                        .map(|_| {
                            let c = it.next().expect("length checked");
                            HeadVars {
                                w_score: c[0],
                                attn: c[1],
                                w_value: c[2],
                            }
                        })
                        .collect()
                })
                .collect(),
        })
    }

    /// Rebuilds parameters from a flat list in [`ModelParams::tensors`] order.
    pub fn with_tensors(&self, mut values: impl Iterator<Item = Tensor>) -> Result<Self> {
        let mut out = self.clone();
        for slot in out.tensors_mut() {
            let v = values
                .next()
                .ok_or_else(|| Error::Contract("too few tensors for parameters".into()))?;
            if v.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "with_tensors",
                    lhs: slot.shape(),
                    rhs: v.shape(),
                });
            }
            *slot = v;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_score: Var,
    pub attn: Var,
    pub w_value: Var,
}

/// Tape handles mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<Vec<HeadVars>>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|h| [h.w_score, h.attn, h.w_value])
            .collect()
    }
}

/// Per-head intermediate values of one layer.
#[derive(Debug, Clone, Copy)]
pub struct HeadTrace {
    /// Un-normalized scores `e`, one per directed entry (`E' × 1`).
    pub scores: Var,
    /// Normalized attention `α` before attention dropout (`E' × 1`).
    pub alpha: Var,
    /// `W h_j` for every node (`N × d_out`).
    pub values: Var,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
    pub input: Var,
    pub output: Var,
}

/// Everything the objective and the analyses need from a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub training: bool,
    /// Applied to layer inputs and to normalized attention while training.
    pub dropout: f64,
    pub dropout_seed: u64,
    /// When set, attention on entries with `false` is forced to zero.
    pub attention_mask: Option<Arc<[bool]>>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            training: false,
            dropout: 0.0,
            dropout_seed: 0,
            attention_mask: None,
        }
    }

    pub fn train(dropout: f64, dropout_seed: u64) -> Self {
        ForwardOptions {
            training: true,
            dropout,
            dropout_seed,
            attention_mask: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    /// ELU, heads concatenated.
    Hidden,
    /// Identity, heads averaged.
    Output,
}

/// Scores of a single head evaluated literally as
/// `aᵀ LeakyReLU(W₂ [h_i ‖ h_j])` on every directed entry.
///
/// [`layer_forward`] computes the same quantity by splitting `W₂` into its
/// target and source blocks and projecting nodes before gathering.
pub fn unnormalized_scores(tape: &mut Tape, h: Var, head: &HeadVars, idx: &DirectedEdgeIndex) -> Result<Var> {
    check_rows(h, idx)?;
    let hi = tape.gather_rows(h, idx.targets().clone())?;
    let hj = tape.gather_rows(h, idx.sources().clone())?;
    let pair = tape.concat_cols(&[hi, hj])?;
    let z = tape.matmul_nt(pair, head.w_score)?;
    let z = tape.leaky_relu(z, LEAKY_SLOPE);
    tape.matmul(z, head.attn)
}

fn check_rows(h: Var, idx: &DirectedEdgeIndex) -> Result<()> {
    if h.rows() != idx.num_nodes() {
        return Err(Error::Shape {
            op: "layer input",
            lhs: h.shape(),
            rhs: (idx.num_nodes(), h.cols()),
        });
    }
    Ok(())
}

/// One GATv2 layer over all heads.
pub fn layer_forward(
    tape: &mut Tape,
    h: Var,
    heads: &[HeadVars],
    idx: &DirectedEdgeIndex,
    role: LayerRole,
    opts: &ForwardOptions,
    layer: usize,
) -> Result<(Var, LayerTrace)> {
    check_rows(h, idx)?;
    let d_in = h.cols();
    let Some(first) = heads.first() else {
        return Err(Error::Config("layer without heads".into()));
    };
    let d_out = first.w_value.rows();
    for hv in heads {
        if hv.w_score.shape() != (d_out, 2 * d_in) || hv.attn.shape() != (d_out, 1) || hv.w_value.shape() != (d_out, d_in) {
            return Err(Error::Shape {
                op: "layer params",
                lhs: hv.w_score.shape(),
                rhs: (d_out, 2 * d_in),
            });
        }
    }
    let nh = heads.len();
    let width = nh * d_out;

    // Project every node once with the target blocks, source blocks and
    // value transforms of all heads stacked into a single matrix.
    let mut blocks = Vec::with_capacity(3 * nh);
    for hv in heads {
        blocks.push(tape.slice_cols(hv.w_score, 0, d_in)?);
    }
    for hv in heads {
        blocks.push(tape.slice_cols(hv.w_score, d_in, d_in)?);
    }
    blocks.extend(heads.iter().map(|hv| hv.w_value));
    let stacked = tape.concat_rows(&blocks)?;
    let proj = tape.matmul_nt(h, stacked)?;
    let tgt = tape.slice_cols(proj, 0, width)?;
    let src = tape.slice_cols(proj, width, width)?;
    let val = tape.slice_cols(proj, 2 * width, width)?;

    let tgt_e = tape.gather_rows(tgt, idx.targets().clone())?;
    let src_e = tape.gather_rows(src, idx.sources().clone())?;
    let pre = tape.add(tgt_e, src_e)?;
    let z = tape.leaky_relu(pre, LEAKY_SLOPE);
    let val_e = tape.gather_rows(val, idx.sources().clone())?;

    // Head k owns columns k*d_out..(k+1)*d_out. `blocks` maps those
    // columns to column k, so z·(a ⊙ blocks) gives every head's scores.
    let mut blocks = Tensor::zeros(width, nh);
    for c in 0..width {
        blocks.set(c, c / d_out, 1.0);
    }
    let blocks = tape.constant(blocks);
    let attn = heads.iter().map(|hv| hv.attn).collect::<Vec<_>>();
    let attn = tape.concat_rows(&attn)?;
    let attn_blocks = tape.mul(blocks, attn)?;
    let scores = tape.matmul(z, attn_blocks)?;
    let alpha = match &opts.attention_mask {
        Some(keep) => tape.segment_softmax_masked(scores, idx.targets().clone(), keep.clone())?,
        None => tape.segment_softmax(scores, idx.targets().clone())?,
    };
    let mut attn_rng = rng::stream(opts.dropout_seed, &[streams::DROPOUT, layer as u64, 1]);
    let alpha_d = tape.dropout(alpha, opts.dropout, &mut attn_rng, opts.training)?;
    let alpha_wide = tape.matmul_nt(alpha_d, blocks)?;
    let msg = tape.mul(val_e, alpha_wide)?;
    // heads side by side, i.e. already concatenated
    let agg = tape.segment_sum(msg, idx.targets().clone(), idx.num_nodes())?;

    let mut trace = Vec::with_capacity(nh);
    for k in 0..nh {
        trace.push(HeadTrace {
            scores: tape.slice_cols(scores, k, 1)?,
            alpha: tape.slice_cols(alpha, k, 1)?,
            values: tape.slice_cols(val, k * d_out, d_out)?,
        });
    }

    let out = match role {
        LayerRole::Hidden => tape.elu(agg),
        LayerRole::Output => {
            let mut avg = Tensor::zeros(width, d_out);
            for c in 0..width {
                avg.set(c, c % d_out, 1.0 / nh as f64);
            }
            let avg = tape.constant(avg);
            tape.matmul(agg, avg)?
        }
    };
    Ok((
        out,
        LayerTrace {
            heads: trace,
            input: h,
            output: out,
        },
    ))
}

/// Full network: feature dropout before every layer, logits from the last.
pub fn model_forward(
    tape: &mut Tape,
    features: Var,
    params: &ParamVars,
    idx: &DirectedEdgeIndex,
    opts: &ForwardOptions,
) -> Result<(Var, ForwardTrace)> {
    let depth = params.layers.len();
    if !(1..=2).contains(&depth) {
        return Err(Error::Config(format!("layers = {depth} not in {{1, 2}}")));
    }
    let mut h = features;
    let mut trace = ForwardTrace::default();
    for (t, heads) in params.layers.iter().enumerate() {
        let mut feat_rng = rng::stream(opts.dropout_seed, &[streams::DROPOUT, t as u64, 0]);
        let input = tape.dropout(h, opts.dropout, &mut feat_rng, opts.training)?;
        let role = if t + 1 == depth { LayerRole::Output } else { LayerRole::Hidden };
        let (out, lt) = layer_forward(tape, input, heads, idx, role, opts, t)?;
        trace.layers.push(lt);
        h = out;
    }
    Ok((h, trace))
}
