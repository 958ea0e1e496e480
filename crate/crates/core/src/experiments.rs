//! Multi-seed runs, the homophily sweep, attention-score distributions and
//! grid search.
//!
//! All randomness comes from one base seed. Run `i` trains with
//! `rng::derive(base, [SEEDS, i])`, and that run seed in turn drives
//! initialisation, dropout and (in the sweep) edge removal.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{edge_homophily, remove_inter_class_edges, Graph, NodeData};
use crate::model::{model_forward, DirectedEdgeIndex, ForwardOptions, ModelParams};
use crate::rng::{self, streams};
use crate::tensor::Tape;
use crate::train::{evaluate, grid, train, Split, TrainConfig, TrainOutcome};
use crate::{Error, Result};

pub fn expand_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| rng::derive(base, &[streams::SEEDS, i])).collect()
}

/// Mean and population standard deviation; `(NaN, NaN)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// One trained model and its scores.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub test_acc: f64,
}

/// Trains one model per seed in parallel. Results are in seed order.
pub fn run_seeds(graph: &Graph, data: &NodeData, config: &TrainConfig, seeds: &[u64]) -> Result<Vec<SeedRun>> {
    config.validate()?;
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..config.clone() };
            let outcome = train(graph, data, &cfg)?;
            let test_acc = evaluate(graph, data, &outcome.params, Split::Test)?;
            Ok(SeedRun { seed, outcome, test_acc })
        })
        .collect()
}

/// Summary of a multi-seed training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    /// `config.seed` is the base seed the run seeds were expanded from.
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub test_acc: Vec<f64>,
    /// Best validation accuracy per seed; `null` without validation nodes.
    pub val_acc: Vec<Option<f64>>,
    pub best_epoch: Vec<usize>,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    /// Edge homophily of the input graph; `null` when it has no edges.
    pub homophily: Option<f64>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn new(dataset: &str, config: &TrainConfig, graph: &Graph, data: &NodeData, runs: &[SeedRun], wall_time_secs: f64) -> Self {
        let test_acc: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let (mean, std) = mean_std(&test_acc);
        RunReport {
            dataset: dataset.to_string(),
            config: config.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            val_acc: runs
                .iter()
                .map(|r| if data.val_idx.is_empty() { None } else { finite(r.outcome.best_val_acc) })
                .collect(),
            best_epoch: runs.iter().map(|r| r.outcome.best_epoch).collect(),
            test_acc,
            mean_test_acc: mean,
            std_test_acc: std,
            homophily: edge_homophily(graph, &data.labels).ok(),
            wall_time_secs,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains `num_seeds` models and reports test accuracy.
pub fn train_report(
    dataset: &str,
    graph: &Graph,
    data: &NodeData,
    config: &TrainConfig,
    num_seeds: usize,
) -> Result<(RunReport, Vec<SeedRun>)> {
    if num_seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let start = Instant::now();
    let seeds = expand_seeds(config.seed, num_seeds);
    let runs = run_seeds(graph, data, config, &seeds)?;
    let report = RunReport::new(dataset, config, graph, data, &runs, start.elapsed().as_secs_f64());
    Ok((report, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Mean over seeds of the homophily after removal.
    pub homophily: f64,
}

pub const SWEEP_COLUMNS: [&str; 4] = ["k", "mean_acc", "std_acc", "homophily"];

/// For each `k` and seed: drop `round(k·|E_inter|)` inter-class edges chosen
/// with the run seed (using all labels), retrain and score on test.
pub fn homophily_sweep(
    graph: &Graph,
    data: &NodeData,
    config: &TrainConfig,
    k_grid: &[f64],
    num_seeds: usize,
) -> Result<Vec<SweepRow>> {
    if num_seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if let Some(k) = k_grid.iter().find(|k| !(0.0..=1.0).contains(*k)) {
        return Err(Error::Range(format!("k = {k} outside [0, 1]")));
    }
    config.validate()?;
    let seeds = expand_seeds(config.seed, num_seeds);
    let jobs: Vec<(f64, u64)> = k_grid.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let results: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let g = remove_inter_class_edges(graph, &data.labels, k, seed)?;
            let h = edge_homophily(&g, &data.labels).unwrap_or(f64::NAN);
            let outcome = train(&g, data, &TrainConfig { seed, ..config.clone() })?;
            Ok((evaluate(&g, data, &outcome.params, Split::Test)?, h))
        })
        .collect::<Result<_>>()?;
    Ok(k_grid
        .iter()
        .zip(results.chunks(num_seeds))
        .map(|(&k, chunk)| {
            let accs: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let hs: Vec<f64> = chunk.iter().map(|r| r.1).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            SweepRow {
                k,
                mean_acc,
                std_acc,
                homophily: mean_std(&hs).0,
            }
        })
        .collect())
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([r.k, r.mean_acc, r.std_acc, r.homophily].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Which directed entries count as held out from edge supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeldOut {
    /// At least one endpoint outside the training split.
    AnyEndpoint,
    /// Both endpoints outside the training split.
    BothEndpoints,
}

/// Non-self-loop entries selected by `rule`, in index order.
pub fn held_out_entries(idx: &DirectedEdgeIndex, data: &NodeData, rule: HeldOut) -> Vec<usize> {
    let in_train = data.train_mask();
    (0..idx.len())
        .filter(|&k| !idx.is_self_loop(k))
        .filter(|&k| {
            let (i, j) = idx.entry(k);
            match rule {
                HeldOut::AnyEndpoint => !(in_train[i] && in_train[j]),
                HeldOut::BothEndpoints => !in_train[i] && !in_train[j],
            }
        })
        .collect()
}

/// One un-normalized score. `head` is `None` for the head average.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSample {
    pub layer: usize,
    pub head: Option<usize>,
    pub target: usize,
    pub source: usize,
    pub intra: bool,
    pub score: f64,
}

pub const SCORE_COLUMNS: [&str; 6] = ["layer", "head", "target", "source", "group", "score"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl GroupStats {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        GroupStats {
            count: values.len(),
            mean,
            std,
        }
    }
}

/// Shared equal-width bins over both groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub intra: Vec<usize>,
    pub inter: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 30;

impl Histogram {
    fn of(intra: &[f64], inter: &[f64], bins: usize) -> Self {
        let all = intra.iter().chain(inter);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|b| lo + b as f64 * width).collect();
        let count = |xs: &[f64]| {
            let mut c = vec![0; bins];
            for &x in xs {
                c[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            c
        };
        Histogram {
            edges,
            intra: count(intra),
            inter: count(inter),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub layer: usize,
    /// Head index, or `"avg"` for the head average.
    pub head: String,
    pub intra: GroupStats,
    pub inter: GroupStats,
    /// `intra.mean - inter.mean`.
    pub separation: f64,
    /// Separation over the pooled standard deviation; `null` when both
    /// groups have zero spread or either group is empty.
    pub standardized_mean_difference: Option<f64>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnSummary {
    pub held_out: HeldOut,
    pub num_entries: usize,
    pub groups: Vec<HeadSummary>,
}

impl AttnSummary {
    pub fn group(&self, layer: usize, head: &str) -> Option<&HeadSummary> {
        self.groups.iter().find(|g| g.layer == layer && g.head == head)
    }
}

#[derive(Debug, Clone)]
pub struct AttnDistribution {
    pub samples: Vec<ScoreSample>,
    pub summary: AttnSummary,
}

fn summarize(layer: usize, head: String, intra: &[f64], inter: &[f64]) -> HeadSummary {
    let (a, b) = (GroupStats::of(intra), GroupStats::of(inter));
    let separation = a.mean - b.mean;
    let n = (a.count + b.count) as f64;
    let pooled = ((a.count as f64 * a.std.powi(2) + b.count as f64 * b.std.powi(2)) / n).sqrt();
    let smd = (a.count > 0 && b.count > 0 && pooled > 0.0).then(|| separation / pooled);
    HeadSummary {
        layer,
        head,
        histogram: Histogram::of(intra, inter, HISTOGRAM_BINS),
        intra: a,
        inter: b,
        separation,
        standardized_mean_difference: smd,
    }
}

/// Un-normalized attention scores of held-out entries under an evaluation
/// forward pass, split by whether the endpoints share a true label.
pub fn attention_distribution(
    graph: &Graph,
    data: &NodeData,
    params: &ModelParams,
    rule: HeldOut,
) -> Result<AttnDistribution> {
    let idx = DirectedEdgeIndex::new(graph);
    let entries = held_out_entries(&idx, data, rule);
    if entries.is_empty() {
        return Err(Error::Empty("no held-out edges".into()));
    }
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let x = tape.constant(data.features.clone());
    let (_, trace) = model_forward(&mut tape, x, &pv, &idx, &ForwardOptions::eval())?;

    let mut samples = Vec::new();
    let mut groups = Vec::new();
    for (t, layer) in trace.layers.iter().enumerate() {
        let scores: Vec<&[f64]> = layer.heads.iter().map(|h| tape.value(h.scores).data()).collect();
        let avg: Vec<f64> = (0..idx.len())
            .map(|k| scores.iter().map(|s| s[k]).sum::<f64>() / scores.len() as f64)
            .collect();
        let per_head = scores.iter().enumerate().map(|(k, s)| (Some(k), *s));
        for (head, s) in per_head.chain(std::iter::once((None, avg.as_slice()))) {
            let (mut intra, mut inter) = (Vec::new(), Vec::new());
            for &k in &entries {
                let (i, j) = idx.entry(k);
                let same = data.labels[i] == data.labels[j];
                if same { &mut intra } else { &mut inter }.push(s[k]);
                samples.push(ScoreSample {
                    layer: t,
                    head,
                    target: i,
                    source: j,
                    intra: same,
                    score: s[k],
                });
            }
            let name = head.map_or_else(|| "avg".to_string(), |h| h.to_string());
            groups.push(summarize(t, name, &intra, &inter));
        }
    }
    Ok(AttnDistribution {
        samples,
        summary: AttnSummary {
            held_out: rule,
            num_entries: entries.len(),
            groups,
        },
    })
}

pub fn write_scores_csv<W: Write>(out: W, samples: &[ScoreSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORE_COLUMNS)?;
    for s in samples {
        w.write_record([
            s.layer.to_string(),
            s.head.map_or_else(|| "avg".to_string(), |h| h.to_string()),
            s.target.to_string(),
            s.source.to_string(),
            if s.intra { "intra" } else { "inter" }.to_string(),
            s.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Value lists searched by [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub hidden_dim: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            layers: grid::LAYERS.to_vec(),
            heads: grid::HEADS.to_vec(),
            hidden_dim: grid::HIDDEN.to_vec(),
            learning_rate: grid::LEARNING_RATE.to_vec(),
            dropout: grid::DROPOUT.to_vec(),
        }
    }
}

impl GridSpec {
    /// Cartesian product in a fixed order (layers outermost, dropout
    /// innermost). Other fields come from `base`.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &layers in &self.layers {
            for &heads in &self.heads {
                for &hidden_dim in &self.hidden_dim {
                    for &learning_rate in &self.learning_rate {
                        for &dropout in &self.dropout {
                            out.push(TrainConfig {
                                layers,
                                heads,
                                hidden_dim,
                                learning_rate,
                                dropout,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: TrainConfig,
    pub mean_val_acc: f64,
    pub std_val_acc: f64,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Row with the highest mean validation accuracy (first on ties).
    pub best_index: usize,
    pub best: RunReport,
}

/// Index of the largest value, first on ties; NaN never wins.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best.or((!values.is_empty()).then_some(0))
}

/// Exhaustive search; every configuration sees the same run seeds.
pub fn grid_search(
    dataset: &str,
    graph: &Graph,
    data: &NodeData,
    spec: &GridSpec,
    base: &TrainConfig,
    num_seeds: usize,
) -> Result<GridReport> {
    let configs = spec.configs(base);
    if configs.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    if num_seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    for c in &configs {
        c.validate()?;
    }
    let start = Instant::now();
    let seeds = expand_seeds(base.seed, num_seeds);
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = TrainConfig { seed, ..configs[c].clone() };
            let outcome = train(graph, data, &cfg)?;
            let test_acc = evaluate(graph, data, &outcome.params, Split::Test)?;
            Ok(SeedRun { seed, outcome, test_acc })
        })
        .collect::<Result<_>>()?;
    let per_config: Vec<&[SeedRun]> = runs.chunks(num_seeds).collect();
    let rows: Vec<GridRow> = configs
        .iter()
        .zip(&per_config)
        .map(|(config, runs)| {
            let val: Vec<f64> = runs.iter().map(|r| r.outcome.best_val_acc).collect();
            let test: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
            let (mean_val_acc, std_val_acc) = mean_std(&val);
            let (mean_test_acc, std_test_acc) = mean_std(&test);
            GridRow {
                config: config.clone(),
                mean_val_acc,
                std_val_acc,
                mean_test_acc,
                std_test_acc,
            }
        })
        .collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_val_acc).collect();
    let best_index = argmax_first(&means).expect("grid is non-empty");
    let best = RunReport::new(
        dataset,
        &configs[best_index],
        graph,
        data,
        per_config[best_index],
        start.elapsed().as_secs_f64(),
    );
    Ok(GridReport { rows, best_index, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmSpec};

    fn sbm(seed: u64) -> (Graph, NodeData) {
        generate_sbm(&SbmSpec {
            num_nodes: 40,
            num_classes: 2,
            p_intra: 0.25,
            p_inter: 0.05,
            feature_dim: 6,
            feature_noise: 0.8,
            seed,
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            layers: 1,
            heads: 1,
            hidden_dim: 8,
            epochs: 15,
            patience: 15,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn seed_expansion_is_stable_and_distinct() {
        let a = expand_seeds(3, 5);
        assert_eq!(a, expand_seeds(3, 5));
        assert_eq!(&expand_seeds(3, 8)[..5], &a[..]);
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d.len(), 5);
        assert_ne!(a, expand_seeds(4, 5));
    }

    #[test]
    fn argmax_prefers_first_and_skips_nan() {
        assert_eq!(argmax_first(&[0.1, 0.3, 0.3]), Some(1));
        assert_eq!(argmax_first(&[f64::NAN, 0.2]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn report_shape_and_json_round_trip() {
        let (g, d) = sbm(1);
        let (report, runs) = train_report("sbm", &g, &d, &quick(), 3).unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(report.test_acc.len(), 3);
        assert!(report.test_acc.iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(report.homophily, Some(edge_homophily(&g, &d.labels).unwrap()));
        let json = report.to_json().unwrap();
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn one_seed_has_zero_std() {
        let (g, d) = sbm(2);
        let (report, _) = train_report("sbm", &g, &d, &quick(), 1).unwrap();
        assert_eq!(report.std_test_acc, 0.0);
    }

    #[test]
    fn sweep_k0_matches_train_and_k1_is_homophilic() {
        let (g, d) = sbm(3);
        let cfg = quick();
        let rows = homophily_sweep(&g, &d, &cfg, &[0.0, 1.0], 2).unwrap();
        let (report, _) = train_report("sbm", &g, &d, &cfg, 2).unwrap();
        assert_eq!(rows[0].mean_acc, report.mean_test_acc);
        assert_eq!(rows[0].std_acc, report.std_test_acc);
        assert_eq!(rows[0].homophily, report.homophily.unwrap());
        assert_eq!(rows[1].homophily, 1.0);
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,mean_acc,std_acc,homophily\n0,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn sweep_rejects_bad_k() {
        let (g, d) = sbm(3);
        assert!(homophily_sweep(&g, &d, &quick(), &[1.5], 1).is_err());
    }

    #[test]
    fn held_out_rules() {
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let d = NodeData {
            features: crate::Tensor::zeros(4, 1),
            labels: vec![0, 0, 1, 1],
            num_classes: 2,
            train_idx: vec![0, 1],
            val_idx: vec![2],
            test_idx: vec![3],
        };
        let idx = DirectedEdgeIndex::new(&g);
        let any: Vec<_> = held_out_entries(&idx, &d, HeldOut::AnyEndpoint).iter().map(|&k| idx.entry(k)).collect();
        assert_eq!(any, vec![(1, 2), (2, 1), (2, 3), (3, 2)]);
        let both: Vec<_> = held_out_entries(&idx, &d, HeldOut::BothEndpoints).iter().map(|&k| idx.entry(k)).collect();
        assert_eq!(both, vec![(2, 3), (3, 2)]);
    }

    #[test]
    fn no_held_out_edges_is_an_error() {
        let g = Graph::new(3, [(0, 1)]).unwrap();
        let d = NodeData {
            features: crate::Tensor::zeros(3, 2),
            labels: vec![0, 1, 1],
            num_classes: 2,
            train_idx: vec![0, 1],
            val_idx: vec![],
            test_idx: vec![2],
        };
        let cfg = quick();
        let params = ModelParams::init(&cfg.architecture(&d), 0).unwrap();
        assert!(matches!(
            attention_distribution(&g, &d, &params, HeldOut::AnyEndpoint),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn distribution_groups_and_csv() {
        let (g, d) = sbm(4);
        let cfg = TrainConfig { layers: 2, heads: 3, ..quick() };
        let params = ModelParams::init(&cfg.architecture(&d), 9).unwrap();
        let dist = attention_distribution(&g, &d, &params, HeldOut::AnyEndpoint).unwrap();
        let n = dist.summary.num_entries;
        assert_eq!(dist.summary.groups.len(), 2 * 4);
        assert_eq!(dist.samples.len(), 2 * 4 * n);
        for grp in &dist.summary.groups {
            assert_eq!(grp.intra.count + grp.inter.count, n);
            assert_eq!(grp.histogram.intra.iter().sum::<usize>(), grp.intra.count);
            assert_eq!(grp.histogram.inter.iter().sum::<usize>(), grp.inter.count);
        }
        // head average is the mean of the per-head samples
        let layer1: Vec<&ScoreSample> = dist.samples.iter().filter(|s| s.layer == 1).collect();
        for e in 0..n {
            let heads: f64 = (0..3).map(|h| layer1[h * n + e].score).sum::<f64>() / 3.0;
            assert!((layer1[3 * n + e].score - heads).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &dist.samples).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,head,target,source,group,score\n"));
        assert_eq!(text.lines().count(), dist.samples.len() + 1);
    }

    #[test]
    fn grid_configs_and_empty_grid() {
        let spec = GridSpec::default();
        let configs = spec.configs(&TrainConfig::default());
        assert_eq!(configs.len(), 2 * 3 * 5 * 2 * 3);
        assert!(configs.iter().all(|c| c.on_default_grid()));
        let (g, d) = sbm(5);
        let empty = GridSpec { heads: vec![], ..spec };
        assert!(matches!(grid_search("sbm", &g, &d, &empty, &quick(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn grid_selects_max_validation_mean() {
        let (g, d) = sbm(6);
        let spec = GridSpec {
            layers: vec![1],
            heads: vec![1, 2],
            hidden_dim: vec![8],
            learning_rate: vec![0.001, 0.05],
            dropout: vec![0.0],
        };
        let report = grid_search("sbm", &g, &d, &spec, &quick(), 2).unwrap();
        assert_eq!(report.rows.len(), 4);
        let best = report.rows[report.best_index].mean_val_acc;
        assert!(report.rows.iter().all(|r| r.mean_val_acc <= best));
        let first = report.rows.iter().position(|r| r.mean_val_acc == best).unwrap();
        assert_eq!(first, report.best_index);
        assert_eq!(report.best.config, report.rows[report.best_index].config);
    }

    #[test]
    fn singleton_grid_matches_train() {
        let (g, d) = sbm(7);
        let cfg = quick();
        let spec = GridSpec {
            layers: vec![cfg.layers],
            heads: vec![cfg.heads],
            hidden_dim: vec![cfg.hidden_dim],
            learning_rate: vec![cfg.learning_rate],
            dropout: vec![cfg.dropout],
        };
        let grid = grid_search("sbm", &g, &d, &spec, &cfg, 2).unwrap();
        let (report, _) = train_report("sbm", &g, &d, &cfg, 2).unwrap();
        assert_eq!(grid.best.test_acc, report.test_acc);
        assert_eq!(grid.best.config, report.config);
        assert_eq!(grid.best.val_acc, report.val_acc);
    }
}
