//! Training objective: node cross-entropy plus supervision of the
//! un-normalized attention scores with intra-/inter-class edge labels.

use std::sync::Arc;

use crate::graph::NodeData;
use crate::model::{DirectedEdgeIndex, ForwardTrace, ParamVars};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Default weight of the attention-supervision term.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Directed, non-self-loop entries whose endpoints are both training nodes,
/// labelled 1 when the endpoints share a class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedEdgeSet {
    pub entries: Arc<[usize]>,
    pub labels: Vec<f64>,
}

impl SupervisedEdgeSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn empty() -> Self {
        SupervisedEdgeSet {
            entries: Arc::from(Vec::new()),
            labels: Vec::new(),
        }
    }

    pub fn contains(&self, entry: usize) -> bool {
        self.entries.binary_search(&entry).is_ok()
    }
}

pub fn build_supervised_edges(data: &NodeData, idx: &DirectedEdgeIndex) -> SupervisedEdgeSet {
    let train = data.train_mask();
    let mut entries = Vec::new();
    let mut labels = Vec::new();
    for k in 0..idx.len() {
        if idx.is_self_loop(k) {
            continue;
        }
        let (i, j) = idx.entry(k);
        if train[i] && train[j] {
            entries.push(k);
            labels.push(if data.labels[i] == data.labels[j] { 1.0 } else { 0.0 });
        }
    }
    SupervisedEdgeSet {
        entries: entries.into(),
        labels,
    }
}

/// Mean negative log-likelihood of the true class over training nodes.
pub fn node_loss(tape: &mut Tape, logits: Var, data: &NodeData) -> Result<Var> {
    if data.train_idx.is_empty() {
        return Err(Error::Empty("node loss needs at least one training node".into()));
    }
    let logp = tape.log_softmax_rows(logits);
    let rows: Arc<[usize]> = data.train_idx.clone().into();
    let cols: Arc<[usize]> = data.train_idx.iter().map(|&i| data.labels[i]).collect();
    let picked = tape.gather_elements(logp, rows, cols)?;
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// Binary cross-entropy on `σ(e)` for supervised entries, averaged over
/// entries, then heads within a layer, then layers. Zero when `edges` is
/// empty.
pub fn edge_loss(tape: &mut Tape, trace: &ForwardTrace, edges: &SupervisedEdgeSet) -> Result<Var> {
    if edges.is_empty() || trace.layers.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pos = tape.constant(Tensor::column(edges.labels.clone()));
    let neg = tape.constant(Tensor::column(edges.labels.iter().map(|y| 1.0 - y).collect()));
    let mut per_layer = Vec::with_capacity(trace.layers.len());
    for layer in &trace.layers {
        let mut per_head = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let e = tape.gather_rows(head.scores, edges.entries.clone())?;
            let log_p = tape.log_sigmoid(e);
            let minus_e = tape.neg(e);
            let log_q = tape.log_sigmoid(minus_e);
            let a = tape.mul(pos, log_p)?;
            let b = tape.mul(neg, log_q)?;
            let ll = tape.add(a, b)?;
            per_head.push(tape.mean(ll));
        }
        let s = tape.add_all(&per_head)?;
        per_layer.push(tape.scale(s, 1.0 / layer.heads.len() as f64));
    }
    let s = tape.add_all(&per_layer)?;
    Ok(tape.scale(s, -1.0 / trace.layers.len() as f64))
}

/// Squared norm of every parameter tensor.
pub fn l2_penalty(tape: &mut Tape, params: &ParamVars) -> Result<Var> {
    let terms: Vec<Var> = params.all().into_iter().map(|v| tape.sum_squares(v)).collect();
    tape.add_all(&terms)
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub node: Var,
    pub edge: Var,
}

/// `L_V + λ·L_E + weight_decay·Σ‖θ‖²`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    trace: &ForwardTrace,
    data: &NodeData,
    edges: &SupervisedEdgeSet,
    lambda: f64,
    params: &ParamVars,
    weight_decay: f64,
) -> Result<LossParts> {
    if !(lambda >= 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::Range(format!(
            "lambda = {lambda} and weight_decay = {weight_decay} must be non-negative"
        )));
    }
    let node = node_loss(tape, logits, data)?;
    let edge = edge_loss(tape, trace, edges)?;
    let mut terms = vec![node];
    if lambda > 0.0 {
        terms.push(tape.scale(edge, lambda));
    }
    if weight_decay > 0.0 {
        let l2 = l2_penalty(tape, params)?;
        terms.push(tape.scale(l2, weight_decay));
    }
    let total = tape.add_all(&terms)?;
    Ok(LossParts { total, node, edge })
}

/// Per node, the norm of the head-averaged message mass arriving over
/// inter-class entries at `layer`: `‖mean_k Σ_{j inter} α_ij W_k h_j‖₂`.
pub fn noise_norm(
    tape: &Tape,
    trace: &ForwardTrace,
    labels: &[usize],
    idx: &DirectedEdgeIndex,
    layer: usize,
) -> Result<Vec<f64>> {
    let lt = trace
        .layers
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("trace has no layer {layer}")))?;
    let n = idx.num_nodes();
    let d = lt.heads[0].values.cols();
    let mut acc = Tensor::zeros(n, d);
    let scale = 1.0 / lt.heads.len() as f64;
    for head in &lt.heads {
        let alpha = tape.value(head.alpha).data();
        let values = tape.value(head.values);
        for k in 0..idx.len() {
            let (i, j) = idx.entry(k);
            if labels[i] == labels[j] {
                continue;
            }
            let w = alpha[k] * scale;
            for (o, v) in acc.row_mut(i).iter_mut().zip(values.row(j)) {
                *o += w * v;
            }
        }
    }
    Ok((0..n).map(|i| acc.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, Graph, SbmSpec};
    use crate::model::{model_forward, Architecture, ForwardOptions, HeadTrace, LayerTrace, ModelParams};
    use std::f64::consts::LN_2;

    fn logistic(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn data(labels: Vec<usize>, classes: usize, train: Vec<usize>) -> NodeData {
        let n = labels.len();
        NodeData {
            features: Tensor::zeros(n, 1),
            labels,
            num_classes: classes,
            train_idx: train,
            val_idx: vec![],
            test_idx: vec![],
        }
    }

    /// A single-layer trace whose head scores are the given constants.
    fn trace_with_scores(tape: &mut Tape, heads: &[Vec<f64>]) -> ForwardTrace {
        let hs = heads
            .iter()
            .map(|s| {
                let scores = tape.param(Tensor::column(s.clone()));
                HeadTrace {
                    scores,
                    alpha: scores,
                    values: scores,
                }
            })
            .collect();
        let dummy = tape.constant(Tensor::zeros(1, 1));
        ForwardTrace {
            layers: vec![LayerTrace {
                heads: hs,
                input: dummy,
                output: dummy,
            }],
        }
    }

    fn set(entries: Vec<usize>, labels: Vec<f64>) -> SupervisedEdgeSet {
        SupervisedEdgeSet {
            entries: entries.into(),
            labels,
        }
    }

    #[test]
    fn supervised_edges_trivial_cases() {
        // path 0-1-2-3 with training nodes {0, 2}: no adjacent pair
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let idx = DirectedEdgeIndex::new(&g);
        let d = data(vec![0, 0, 1, 1], 2, vec![0, 2]);
        assert!(build_supervised_edges(&d, &idx).is_empty());

        let d = data(vec![1; 4], 2, vec![0, 1, 2, 3]);
        let s = build_supervised_edges(&d, &idx);
        assert_eq!(s.len(), 2 * g.num_edges());
        assert!(s.labels.iter().all(|&y| y == 1.0));
    }

    #[test]
    fn supervised_edges_match_brute_force_on_sbm() {
        let (g, d) = generate_sbm(&SbmSpec {
            num_nodes: 60,
            num_classes: 3,
            p_intra: 0.3,
            p_inter: 0.1,
            feature_dim: 3,
            feature_noise: 0.1,
            seed: 21,
        })
        .unwrap();
        let idx = DirectedEdgeIndex::new(&g);
        let s = build_supervised_edges(&d, &idx);
        let mut expect = Vec::new();
        for &(i, j) in g.edges() {
            if d.train_idx.contains(&i) && d.train_idx.contains(&j) {
                let y = if d.labels[i] == d.labels[j] { 1.0 } else { 0.0 };
                expect.push(((i, j), y));
                expect.push(((j, i), y));
            }
        }
        let mut got: Vec<_> = s
            .entries
            .iter()
            .zip(&s.labels)
            .map(|(&k, &y)| (idx.entry(k), y))
            .collect();
        expect.sort_by(|a, b| a.0.cmp(&b.0));
        got.sort_by(|a, b| a.0.cmp(&b.0));
        assert!(!expect.is_empty());
        assert_eq!(got, expect);
    }

    #[test]
    fn node_loss_values() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(4, 3));
        let d = data(vec![0, 1, 2, 0], 3, vec![0, 1, 3]);
        let l = node_loss(&mut tape, uniform, &d).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-15);

        let mut sharp = Tensor::zeros(4, 3);
        for (i, &y) in d.labels.iter().enumerate() {
            sharp.set(i, y, 50.0);
        }
        let sharp = tape.constant(sharp);
        let l = node_loss(&mut tape, sharp, &d).unwrap();
        assert!(tape.value(l).item() < 1e-20);

        // hand-set 2-class logits for three training nodes
        let logits: [[f64; 2]; 3] = [[2.0, -1.0], [0.5, 0.5], [-0.3, 1.2]];
        let labels = vec![0, 1, 0];
        let want = -(1.0 / 3.0)
            * logits
                .iter()
                .zip(&labels)
                .map(|(z, &y)| z[y] - (z[0].exp() + z[1].exp()).ln())
                .sum::<f64>();
        let lv = tape.constant(Tensor::from_rows(&logits.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
        let l = node_loss(&mut tape, lv, &data(labels, 2, vec![0, 1, 2])).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-15);

        assert!(matches!(node_loss(&mut tape, lv, &data(vec![0, 1, 0], 2, vec![])), Err(Error::Empty(_))));
    }

    #[test]
    fn edge_loss_values() {
        let mut tape = Tape::new();
        let trace = trace_with_scores(&mut tape, &[vec![0.0; 4]]);
        let l = edge_loss(&mut tape, &trace, &set(vec![0, 1, 3], vec![1.0, 0.0, 1.0])).unwrap();
        assert!((tape.value(l).item() - LN_2).abs() < 1e-15);

        let trace = trace_with_scores(&mut tape, &[vec![1.0, -1.0]]);
        let l = edge_loss(&mut tape, &trace, &set(vec![0, 1], vec![1.0, 0.0])).unwrap();
        let want = -0.5 * (logistic(1.0).ln() + (1.0 - logistic(-1.0)).ln());
        assert!((tape.value(l).item() - want).abs() < 1e-15);
        assert!((want + logistic(1.0).ln()).abs() < 1e-15);

        let trace = trace_with_scores(&mut tape, &[vec![40.0]]);
        let l = edge_loss(&mut tape, &trace, &set(vec![0], vec![1.0])).unwrap();
        assert!(tape.value(l).item() < 1e-16);

        let l = edge_loss(&mut tape, &trace, &SupervisedEdgeSet::empty()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn edge_loss_averages_heads() {
        let mut tape = Tape::new();
        let trace = trace_with_scores(&mut tape, &[vec![2.0], vec![-0.5]]);
        let l = edge_loss(&mut tape, &trace, &set(vec![0], vec![1.0])).unwrap();
        let want = -0.5 * (logistic(2.0).ln() + logistic(-0.5).ln());
        assert!((tape.value(l).item() - want).abs() < 1e-15);
    }

    #[test]
    fn edge_loss_is_monotone_in_scores() {
        let labels = vec![0.0, 1.0];
        let eval = |s0: f64, s1: f64| {
            let mut tape = Tape::new();
            let trace = trace_with_scores(&mut tape, &[vec![s0, s1]]);
            let l = edge_loss(&mut tape, &trace, &set(vec![0, 1], labels.clone())).unwrap();
            tape.value(l).item()
        };
        assert!(eval(0.2, 0.3) < eval(0.5, 0.3));
        assert!(eval(0.2, 0.9) < eval(0.2, 0.3));
    }

    #[test]
    fn total_loss_combines_terms() {
        let d = data(vec![0, 1], 2, vec![0, 1]);
        let mut tape = Tape::new();
        let trace = trace_with_scores(&mut tape, &[vec![1.0, -1.0]]);
        let logits = tape.constant(Tensor::from_rows(&[vec![0.4, -0.2], vec![1.0, 3.0]]).unwrap());
        let edges = set(vec![0, 1], vec![1.0, 0.0]);
        let arch = Architecture {
            in_dim: 1,
            hidden_dim: 1,
            heads: 1,
            layers: 1,
            num_classes: 2,
        };
        let params = ModelParams::init(&arch, 0).unwrap();
        let pv = params.register(&mut tape);

        let lv = -0.5 * ((0.4 - (0.4f64.exp() + (-0.2f64).exp()).ln()) + (3.0 - (1f64.exp() + 3f64.exp()).ln()));
        let le = -logistic(1.0).ln();
        let l2: f64 = params.tensors().iter().map(|t| t.sum_squares()).sum();

        let parts = total_loss(&mut tape, logits, &trace, &d, &edges, 0.1, &pv, 0.0).unwrap();
        assert!((tape.value(parts.total).item() - (lv + 0.1 * le)).abs() < 1e-15);
        let parts = total_loss(&mut tape, logits, &trace, &d, &edges, 0.0, &pv, 5e-5).unwrap();
        assert!((tape.value(parts.total).item() - (lv + 5e-5 * l2)).abs() < 1e-15);
        assert!(total_loss(&mut tape, logits, &trace, &d, &edges, -1.0, &pv, 0.0).is_err());
    }

    #[test]
    fn noise_norm_matches_explicit_loop_and_vanishes_when_homophilic() {
        let (g, d) = generate_sbm(&SbmSpec {
            num_nodes: 18,
            num_classes: 3,
            p_intra: 0.5,
            p_inter: 0.2,
            feature_dim: 4,
            feature_noise: 0.3,
            seed: 5,
        })
        .unwrap();
        let idx = DirectedEdgeIndex::new(&g);
        let arch = Architecture {
            in_dim: 4,
            hidden_dim: 3,
            heads: 2,
            layers: 2,
            num_classes: 3,
        };
        let params = ModelParams::init(&arch, 2).unwrap();
        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let x = tape.constant(d.features.clone());
        let (_, trace) = model_forward(&mut tape, x, &pv, &idx, &ForwardOptions::eval()).unwrap();
        let got = noise_norm(&tape, &trace, &d.labels, &idx, 0).unwrap();

        // explicit loop: recompute W_k h_j from the raw parameters
        let h = &d.features;
        for i in 0..18 {
            let mut v = vec![0.0; 3];
            for (k, head) in params.layers[0].heads.iter().enumerate() {
                let alpha = tape.value(trace.layers[0].heads[k].alpha).data();
                for e in 0..idx.len() {
                    let (t, j) = idx.entry(e);
                    if t != i || d.labels[j] == d.labels[i] {
                        continue;
                    }
                    for (r, o) in v.iter_mut().enumerate() {
                        let wh: f64 = (0..4).map(|c| head.w_value.get(r, c) * h.get(j, c)).sum();
                        *o += 0.5 * alpha[e] * wh;
                    }
                }
            }
            let want = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((got[i] - want).abs() < 1e-12);
        }
        assert!(got.iter().any(|&x| x > 0.0));

        let homo = g.filter_edges(|i, j| d.labels[i] == d.labels[j]);
        let idx = DirectedEdgeIndex::new(&homo);
        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let x = tape.constant(d.features.clone());
        let (_, trace) = model_forward(&mut tape, x, &pv, &idx, &ForwardOptions::eval()).unwrap();
        for layer in 0..2 {
            assert!(noise_norm(&tape, &trace, &d.labels, &idx, layer).unwrap().iter().all(|&x| x == 0.0));
        }
    }
}
