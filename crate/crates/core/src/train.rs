//! Initialisation, Adam, the full-batch epoch loop and evaluation.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeData};
use crate::model::{model_forward, Architecture, DirectedEdgeIndex, ForwardOptions, ModelParams};
use crate::objective::{build_supervised_edges, node_loss, total_loss, SupervisedEdgeSet, DEFAULT_LAMBDA};
use crate::rng::{self, streams};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Hyperparameter grids searched by default.
pub mod grid {
    pub const LAYERS: &[usize] = &[1, 2];
    pub const HEADS: &[usize] = &[1, 4, 8];
    pub const HIDDEN: &[usize] = &[8, 16, 32, 64, 128];
    pub const LEARNING_RATE: &[f64] = &[0.001, 0.005];
    pub const DROPOUT: &[f64] = &[0.0, 0.2, 0.5];
    pub const WEIGHT_DECAY: f64 = 5e-5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 2,
            heads: 8,
            hidden_dim: 8,
            learning_rate: 0.005,
            dropout: 0.5,
            weight_decay: grid::WEIGHT_DECAY,
            lambda: DEFAULT_LAMBDA,
            epochs: 1000,
            patience: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=2).contains(&self.layers) {
            return bad(format!("layers = {} not in {{1, 2}}", self.layers));
        }
        if self.heads == 0 || self.hidden_dim == 0 {
            return bad("heads and hidden_dim must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return bad("weight_decay and lambda must be non-negative".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        Ok(())
    }

    /// Whether every searched hyperparameter lies on the default grids.
    pub fn on_default_grid(&self) -> bool {
        grid::LAYERS.contains(&self.layers)
            && grid::HEADS.contains(&self.heads)
            && grid::HIDDEN.contains(&self.hidden_dim)
            && grid::LEARNING_RATE.contains(&self.learning_rate)
            && grid::DROPOUT.contains(&self.dropout)
    }

    pub fn architecture(&self, data: &NodeData) -> Architecture {
        Architecture {
            in_dim: data.feature_dim(),
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            layers: self.layers,
            num_classes: data.num_classes,
        }
    }
}

/// Uniform samples in `±√(6 / (fan_in + fan_out))` for a `rows × cols`
/// weight acting as `x ↦ W x` (fan-in = cols, fan-out = rows).
pub fn glorot_init(rows: usize, cols: usize, seed: u64) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut r = rng::stream(seed, &[streams::INIT]);
    let data = (0..rows * cols).map(|_| r.gen_range(-limit..=limit)).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, `θ ← θ − lr · m̂ / (√v̂ + ε)`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn indices(self, data: &NodeData) -> &[usize] {
        match self {
            Split::Train => &data.train_idx,
            Split::Val => &data.val_idx,
            Split::Test => &data.test_idx,
        }
    }
}

/// Fraction of `nodes` whose row-argmax (lowest index on ties) equals the
/// label.
pub fn accuracy(logits: &Tensor, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Empty("accuracy on an empty split".into()));
    }
    let pred = logits.argmax_rows();
    let correct = nodes.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(correct as f64 / nodes.len() as f64)
}

/// Logits in evaluation mode (no dropout).
pub fn predict(idx: &DirectedEdgeIndex, data: &NodeData, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let x = tape.constant(data.features.clone());
    let (logits, _) = model_forward(&mut tape, x, &pv, idx, &ForwardOptions::eval())?;
    Ok(tape.value(logits).clone())
}

pub fn evaluate(graph: &Graph, data: &NodeData, params: &ModelParams, split: Split) -> Result<f64> {
    let idx = DirectedEdgeIndex::new(graph);
    let logits = predict(&idx, data, params)?;
    accuracy(&logits, &data.labels, split.indices(data))
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_V")]
    pub loss_v: f64,
    #[serde(rename = "L_E")]
    pub loss_e: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub fn write_history<W: Write>(mut out: W, history: &[EpochRecord]) -> Result<()> {
    for rec in history {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Full-batch training with early stopping on validation accuracy.
///
/// An epoch counts as an improvement when validation accuracy rises, or
/// stays equal while the validation cross-entropy falls. The parameters of
/// the last improving epoch are returned. Training stops after `patience`
/// epochs without improvement or after `epochs`. Without validation nodes
/// the training split is used for selection.
pub fn train(graph: &Graph, data: &NodeData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    if graph.num_nodes() != data.num_nodes() {
        return Err(Error::InvalidData(format!(
            "graph has {} nodes, data has {}",
            graph.num_nodes(),
            data.num_nodes()
        )));
    }
    let idx = DirectedEdgeIndex::new(graph);
    // built for λ = 0 as well so L_E stays comparable in the history
    let edges = build_supervised_edges(data, &idx);
    train_with_edges(&idx, data, config, &edges)
}

fn train_with_edges(
    idx: &DirectedEdgeIndex,
    data: &NodeData,
    config: &TrainConfig,
    edges: &SupervisedEdgeSet,
) -> Result<TrainOutcome> {
    let arch = config.architecture(data);
    let mut params = ModelParams::init(&arch, rng::derive(config.seed, &[streams::RUN, 0]))?;
    let mut adam = AdamState::new(params.tensors());
    let select_split: &[usize] = if data.val_idx.is_empty() {
        &data.train_idx
    } else {
        &data.val_idx
    };

    let mut history = Vec::new();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let x = tape.constant(data.features.clone());
        let opts = ForwardOptions::train(config.dropout, rng::derive(config.seed, &[streams::DROPOUT, epoch as u64]));
        let (logits, trace) = model_forward(&mut tape, x, &pv, idx, &opts)?;
        let parts = total_loss(
            &mut tape,
            logits,
            &trace,
            data,
            edges,
            config.lambda,
            &pv,
            config.weight_decay,
        )?;
        let total = tape.value(parts.total).item();
        let loss_v = tape.value(parts.node).item();
        let loss_e = tape.value(parts.edge).item();
        if !total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("loss = {total} (L_V = {loss_v}, L_E = {loss_e})"),
            });
        }
        let mut grads = tape.backward(parts.total)?;
        let g: Vec<Tensor> = pv.all().into_iter().map(|v| grads.take(v)).collect();
        adam_step(&mut params.tensors_mut(), &g, &mut adam, config.learning_rate)?;

        let (train_acc, val_acc, sel_acc, sel_loss) = {
            let mut tape = Tape::new();
            let pv = params.register(&mut tape);
            let x = tape.constant(data.features.clone());
            let (logits, _) = model_forward(&mut tape, x, &pv, idx, &ForwardOptions::eval())?;
            let lv = tape.value(logits);
            let train_acc = accuracy(lv, &data.labels, &data.train_idx)?;
            let val_acc = if data.val_idx.is_empty() {
                f64::NAN
            } else {
                accuracy(lv, &data.labels, &data.val_idx)?
            };
            let sel_acc = accuracy(lv, &data.labels, select_split)?;
            let sel_data = NodeData {
                train_idx: select_split.to_vec(),
                ..data_without_features(data)
            };
            let sel_loss = node_loss(&mut tape, logits, &sel_data)?;
            (train_acc, val_acc, sel_acc, tape.value(sel_loss).item())
        };
        history.push(EpochRecord {
            epoch,
            loss_v,
            loss_e,
            train_acc,
            val_acc,
        });

        if sel_acc > best_acc || (sel_acc == best_acc && sel_loss < best_loss) {
            best_acc = sel_acc;
            best_loss = sel_loss;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
        best_val_acc: best_acc,
    })
}

fn data_without_features(data: &NodeData) -> NodeData {
    NodeData {
        features: Tensor::zeros(0, 0),
        labels: data.labels.clone(),
        num_classes: data.num_classes,
        train_idx: Vec::new(),
        val_idx: Vec::new(),
        test_idx: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmSpec};

    #[test]
    fn glorot_bounds_and_determinism() {
        let t = glorot_init(1, 1, 3);
        assert!(t.item().abs() <= 3f64.sqrt());
        assert_eq!(glorot_init(4, 7, 9), glorot_init(4, 7, 9));
        assert_ne!(glorot_init(4, 7, 9), glorot_init(4, 7, 10));
    }

    #[test]
    fn glorot_variance() {
        // Var of U(-l, l) is l²/3 = 2/(fan_in + fan_out)
        let (rows, cols) = (250, 400);
        let t = glorot_init(rows, cols, 1);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / (rows + cols) as f64;
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        assert!(t.data().iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn adam_zero_gradient_only_advances_step() {
        let mut p = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 3)], &mut st, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        let g = [3.0, -0.02, 1e-3];
        let mut p = Tensor::zeros(1, 3);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::from_vec(1, 3, g.to_vec()).unwrap()], &mut st, 0.005).unwrap();
        for (x, gi) in p.data().iter().zip(g) {
            let want = -0.005 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = Tensor::zeros(2, 2);
        let mut st = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(1, 4)], &mut st, 0.1).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut st, 0.1).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let perfect = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&perfect, &[0, 1], &[0, 1]).unwrap(), 1.0);
        let flat = Tensor::zeros(3, 4);
        assert_eq!(accuracy(&flat, &[0, 0, 0], &[0, 1, 2]).unwrap(), 1.0);
        let logits = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 1.0],
            vec![0.0, 3.0],
            vec![5.0, 4.0],
        ])
        .unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 1, 0, 0], &[0, 1, 2, 3, 4]).unwrap(), 0.6);
        assert!(accuracy(&flat, &[0, 0, 0], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::default().on_default_grid());
        assert!(TrainConfig { layers: 3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(!TrainConfig { hidden_dim: 12, ..Default::default() }.on_default_grid());
    }

    fn easy_sbm(seed: u64) -> (Graph, NodeData) {
        generate_sbm(&SbmSpec {
            num_nodes: 90,
            num_classes: 3,
            p_intra: 0.15,
            p_inter: 0.0,
            feature_dim: 3,
            feature_noise: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn learns_separable_sbm() {
        let (g, d) = easy_sbm(1);
        for lambda in [0.0, 0.1] {
            let cfg = TrainConfig {
                layers: 2,
                heads: 2,
                hidden_dim: 8,
                learning_rate: 0.005,
                dropout: 0.0,
                lambda,
                epochs: 200,
                patience: 200,
                seed: 3,
                ..Default::default()
            };
            let out = train(&g, &d, &cfg).unwrap();
            assert!(out.history.len() <= 200);
            assert_eq!(evaluate(&g, &d, &out.params, Split::Test).unwrap(), 1.0);
            let best = out.history.iter().map(|r| r.val_acc).fold(0.0, f64::max);
            assert_eq!(out.best_val_acc, best);
            assert_eq!(evaluate(&g, &d, &out.params, Split::Val).unwrap(), best);
        }
    }

    #[test]
    fn identical_runs_have_identical_history() {
        let (g, d) = easy_sbm(2);
        let cfg = TrainConfig {
            heads: 2,
            epochs: 15,
            dropout: 0.5,
            ..Default::default()
        };
        let a = train(&g, &d, &cfg).unwrap();
        let b = train(&g, &d, &cfg).unwrap();
        let (mut ha, mut hb) = (Vec::new(), Vec::new());
        write_history(&mut ha, &a.history).unwrap();
        write_history(&mut hb, &b.history).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params, b.params);
        let first = String::from_utf8(ha).unwrap();
        let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["epoch", "L_V", "L_E", "train_acc", "val_acc"] {
            assert!(line.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn patience_stops_early() {
        // noisy, high-dimensional features: validation loss turns up once
        // the model starts to overfit
        let (g, d) = generate_sbm(&SbmSpec {
            num_nodes: 60,
            num_classes: 3,
            p_intra: 0.1,
            p_inter: 0.05,
            feature_dim: 40,
            feature_noise: 1.5,
            seed: 4,
        })
        .unwrap();
        let cfg = TrainConfig {
            heads: 1,
            epochs: 500,
            patience: 5,
            learning_rate: 0.05,
            dropout: 0.0,
            ..Default::default()
        };
        let out = train(&g, &d, &cfg).unwrap();
        assert!(out.history.len() < 500);
        assert!(out.history.len() - 1 - out.best_epoch <= 5);
    }
}
