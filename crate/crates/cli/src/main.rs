use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hsgat::checkpoint::Checkpoint;
use hsgat::dataset::{load_dataset, save_dataset};
use hsgat::experiments::{
    attention_distribution, expand_seeds, grid_search, homophily_sweep, train_report, write_scores_csv,
    write_sweep_csv, GridSpec, HeldOut,
};
use hsgat::graph::{generate_sbm, SbmSpec};
use hsgat::train::{train, write_history, TrainConfig};

const TRAIN_HELP: &str = "\
Report JSON keys: dataset, config, seeds, test_acc, val_acc, best_epoch,
mean_test_acc, std_test_acc (population std), homophily, wall_time_secs.
History JSON lines: epoch, L_V, L_E, train_acc, val_acc.
With --seeds N > 1, history and checkpoint paths get a `.seed<i>` suffix
before the extension.";

const SWEEP_HELP: &str = "\
CSV columns: k, mean_acc, std_acc, homophily.
One row per k. Each seed removes round(k * inter-class edges) chosen with
that seed using the true labels of all nodes, retrains and scores test
accuracy. homophily is the mean over seeds after removal.";

const ATTN_HELP: &str = "\
Summary JSON keys: held_out, num_entries, groups[]; each group has layer,
head (index or \"avg\"), intra and inter {count, mean, std}, separation,
standardized_mean_difference, histogram {edges, intra, inter}.
Scores CSV columns: layer, head, target, source, group (intra|inter), score.
Held-out entries have at least one endpoint outside the training split
(both with --strict-heldout); self-loops are excluded.";

const GRID_HELP: &str = "\
Report JSON keys: rows[] {config, mean_val_acc, std_val_acc, mean_test_acc,
std_test_acc}, best_index, best (a train report for the selected config).
Selection is by mean validation accuracy, first row on ties.";

#[derive(Parser)]
#[command(name = "hsgat", version, about = "Attention-supervised GATv2 experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over several seeds and report test accuracy.
    #[command(after_help = TRAIN_HELP)]
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Report JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training history, JSON lines.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Parameters of the trained model, JSON.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Remove inter-class edges at each k and retrain.
    #[command(name = "homophily-sweep", after_help = SWEEP_HELP)]
    HomophilySweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        k_grid: Vec<f64>,
        /// CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Un-normalized attention scores on held-out edges.
    #[command(name = "attn-dist", after_help = ATTN_HELP)]
    AttnDist {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Use these parameters instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        strict_heldout: bool,
        /// Summary JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Raw scores CSV; defaults to the --out path with a .csv extension.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Exhaustive hyperparameter search.
    #[command(name = "grid-search", after_help = GRID_HELP)]
    GridSearch {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Report JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a stochastic block model dataset directory.
    #[command(name = "generate-sbm")]
    GenerateSbm {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        nodes: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.05)]
        p_intra: f64,
        #[arg(long, default_value_t = 0.01)]
        p_inter: f64,
        #[arg(long, default_value_t = 16)]
        feature_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory with edges.txt, features.csv, labels.txt and splits.json.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct SharedArgs {
    #[arg(long, default_value_t = 5e-5)]
    weight_decay: f64,
    /// Weight of the edge loss; 0 trains plain GATv2.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    heads: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
    hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.005")]
    lr: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5")]
    dropout: Vec<f64>,
    #[command(flatten)]
    shared: SharedArgs,
}

impl SharedArgs {
    fn config(&self, layers: usize, heads: usize, hidden_dim: usize, learning_rate: f64, dropout: f64) -> TrainConfig {
        TrainConfig {
            layers,
            heads,
            hidden_dim,
            learning_rate,
            dropout,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

impl ModelArgs {
    fn config(&self) -> TrainConfig {
        self.shared.config(self.layers, self.heads, self.hidden, self.lr, self.dropout)
    }
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn load(data: &DataArgs) -> Result<(hsgat::Graph, hsgat::NodeData)> {
    load_dataset(&data.dataset).with_context(|| format!("loading dataset {}", data.dataset.display()))
}

/// `a/b.jsonl` -> `a/b.seed3.jsonl`
fn seed_path(path: &Path, i: usize, total: usize) -> PathBuf {
    if total == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.seed{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{i}"),
    };
    path.with_file_name(name)
}

fn emit(out: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> hsgat::Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
            write(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            write(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    emit(out, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            model,
            seeds,
            out,
            history,
            checkpoint,
        } => {
            let (graph, nodes) = load(&data)?;
            let config = model.config();
            let (report, runs) = train_report(&dataset_name(&data.dataset), &graph, &nodes, &config, seeds)?;
            for (i, r) in runs.iter().enumerate() {
                if let Some(path) = &history {
                    emit(Some(&seed_path(path, i, runs.len())), |w| write_history(w, &r.outcome.history))?;
                }
                if let Some(path) = &checkpoint {
                    Checkpoint::new(config.architecture(&nodes), &r.outcome.params).save(seed_path(path, i, runs.len()))?;
                }
            }
            emit_json(out.as_deref(), &report)
        }
        Command::HomophilySweep {
            data,
            model,
            seeds,
            k_grid,
            out,
        } => {
            let (graph, nodes) = load(&data)?;
            let rows = homophily_sweep(&graph, &nodes, &model.config(), &k_grid, seeds)?;
            emit(out.as_deref(), |w| write_sweep_csv(w, &rows))
        }
        Command::AttnDist {
            data,
            model,
            checkpoint,
            strict_heldout,
            out,
            scores,
        } => {
            let (graph, nodes) = load(&data)?;
            let params = match checkpoint {
                Some(path) => Checkpoint::load(&path)
                    .and_then(|c| c.to_params())
                    .with_context(|| format!("loading checkpoint {}", path.display()))?,
                None => {
                    let seed = expand_seeds(model.shared.seed, 1)[0];
                    train(&graph, &nodes, &TrainConfig { seed, ..model.config() })?.params
                }
            };
            let rule = if strict_heldout { HeldOut::BothEndpoints } else { HeldOut::AnyEndpoint };
            let dist = attention_distribution(&graph, &nodes, &params, rule)?;
            let scores = scores.or_else(|| out.as_ref().map(|p| p.with_extension("csv")));
            if let Some(path) = &scores {
                emit(Some(path), |w| write_scores_csv(w, &dist.samples))?;
            }
            emit_json(out.as_deref(), &dist.summary)
        }
        Command::GridSearch { data, grid, seeds, out } => {
            let (graph, nodes) = load(&data)?;
            let spec = GridSpec {
                layers: grid.layers.clone(),
                heads: grid.heads.clone(),
                hidden_dim: grid.hidden.clone(),
                learning_rate: grid.lr.clone(),
                dropout: grid.dropout.clone(),
            };
            let base = grid.shared.config(1, 1, 1, 0.005, 0.0);
            let report = grid_search(&dataset_name(&data.dataset), &graph, &nodes, &spec, &base, seeds)?;
            emit_json(out.as_deref(), &report)
        }
        Command::GenerateSbm {
            out,
            nodes,
            classes,
            p_intra,
            p_inter,
            feature_dim,
            noise,
            seed,
        } => {
            let (graph, data) = generate_sbm(&SbmSpec {
                num_nodes: nodes,
                num_classes: classes,
                p_intra,
                p_inter,
                feature_dim,
                feature_noise: noise,
                seed,
            })?;
            save_dataset(&out, &graph, &data)?;
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
