//! Command-line interface: task mining, training, evaluation and the
//! ablation suites over tab-separated edge-list datasets.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ausrec::data::{load_dataset, DatasetStats, RunConfig};
use ausrec::encoder::{load_checkpoint, propagate_values, save_checkpoint};
use ausrec::eval::{ndcg_at_k, rank_all, recall_at_k};
use ausrec::sparse::Dataset;
use ausrec::tape::SpmmOperand;
use ausrec::tasks::{mine_all, TaskId};
use ausrec::trainer::{
    split_primary, train, EpochMetrics, Hyperparams, Mode, SplitEdges, TrainOutcome,
    DEFAULT_SPLIT_RATIO, EVAL_KS,
};
use ausrec::weightnet::WeightNetArch;

#[derive(Parser)]
#[command(
    name = "ausrec",
    version,
    about = "Social recommender with automatically weighted self-supervised auxiliary tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Interactions file: `user<TAB>item[<TAB>rating]` per line.
    #[arg(long)]
    interactions: PathBuf,
    /// Social file: `user<TAB>user` per line.
    #[arg(long)]
    social: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// full | no-aw | primary-only | single-task:<1-7> | single-task-no-aw:<1-7>
    #[arg(long, default_value = "full")]
    mode: String,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Weighting-network learning rate.
    #[arg(long, default_value_t = 0.0001)]
    mlr: f64,
    #[arg(long, default_value_t = 2048)]
    batch_size: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Propagation layers.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 0.05)]
    meta_fraction: f64,
    /// Weighting-network architecture, e.g. 8-1000-1.
    #[arg(long, default_value = "8-1000-1")]
    arch: String,
    /// L2 coefficient on batch embedding rows.
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    /// Early-stopping patience on Recall@10, in epochs.
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory for metrics.csv, weights.csv, config.json, checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Mine the seven auxiliary relation sets and write them as edge lists.
    Mine {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write run artifacts.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the original training run (fixes the split).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        meta_fraction: f64,
    },
    /// Run an ablation suite and write a comparison table.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// no-aw | single-task | arch
        #[arg(long)]
        suite: String,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ausrec::init_threads_from_env();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Mine { data, out } => mine(&data, &out),
        Command::Train(args) => {
            let (dataset, _) = load(&args.data)?;
            run_training(&dataset, &args, &args.out).map(|_| ())
        }
        Command::Eval {
            data,
            checkpoint,
            seed,
            meta_fraction,
        } => eval_checkpoint(&data, &checkpoint, seed, meta_fraction),
        Command::Ablate { train, suite } => ablate(&train, &suite),
    }
}

fn load(data: &DataArgs) -> Result<(Dataset, ausrec::data::IdMaps)> {
    let (dataset, ids) = load_dataset(&data.interactions, &data.social)
        .with_context(|| format!("loading {}", data.interactions.display()))?;
    let stats = DatasetStats::of(&dataset);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok((dataset, ids))
}

fn mine(data: &DataArgs, out: &Path) -> Result<()> {
    let (dataset, ids) = load(data)?;
    std::fs::create_dir_all(out)?;
    let sets = mine_all(&dataset)?;
    let mut summary = Vec::new();
    for set in &sets {
        let task = set.task();
        let path = out.join(format!("ssl{}.tsv", task.index()));
        let mut file = std::io::BufWriter::new(File::create(&path)?);
        for (a, b, _) in set.pairs().iter() {
            writeln!(file, "{}\t{}", ids.users[a], ids.users[b])?;
        }
        file.flush()?;
        summary.push(serde_json::json!({
            "task_index": task.index(),
            "kind": format!("{:?}", task.kind()),
            "positive_count": set.positive_count(),
        }));
        println!(
            "{task}: {} pairs -> {}",
            set.positive_count(),
            path.display()
        );
    }
    std::fs::write(
        out.join("mine_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn hyperparams(args: &TrainArgs) -> Result<Hyperparams> {
    Ok(Hyperparams {
        batch_size: args.batch_size,
        lr: args.lr,
        meta_lr: args.mlr,
        l2: args.l2,
        dim: args.dim,
        k_layers: args.layers,
        arch: WeightNetArch::parse(&args.arch).map_err(anyhow::Error::from)?,
        epochs: args.epochs,
        meta_fraction: args.meta_fraction,
        patience: args.patience,
        seed: args.seed,
    })
}

fn run_config(args: &TrainArgs, mode: &Mode, out: &Path) -> RunConfig {
    RunConfig {
        interactions: args.data.interactions.clone(),
        social: args.data.social.clone(),
        out_dir: out.to_path_buf(),
        mode: mode.as_str(),
        arch: args.arch.clone(),
        batch_size: args.batch_size,
        lr: args.lr,
        meta_lr: args.mlr,
        l2: args.l2,
        dim: args.dim,
        layers: args.layers,
        epochs: args.epochs,
        meta_fraction: args.meta_fraction,
        patience: args.patience,
        seed: args.seed,
    }
}

fn metrics_line(m: &EpochMetrics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.epoch, m.recall[0], m.recall[1], m.recall[2], m.ndcg[0], m.ndcg[1], m.ndcg[2]
    )
}

fn run_training(dataset: &Dataset, args: &TrainArgs, out: &Path) -> Result<TrainOutcome> {
    let mode = Mode::parse(&args.mode).map_err(anyhow::Error::from)?;
    let hp = hyperparams(args)?;
    std::fs::create_dir_all(out)?;
    run_config(args, &mode, out).save(&out.join("config.json"))?;

    let mut metrics_file = std::io::BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(
        metrics_file,
        "epoch,recall@5,recall@10,recall@20,ndcg@5,ndcg@10,ndcg@20"
    )?;
    let outcome = train(dataset, hp, mode, |m| {
        log::info!(
            "epoch {}: recall@10 {:.4} ndcg@10 {:.4}",
            m.epoch,
            m.recall[1],
            m.ndcg[1]
        );
        let _ = writeln!(metrics_file, "{}", metrics_line(m));
        let _ = metrics_file.flush();
    })
    .map_err(anyhow::Error::from)?;
    drop(metrics_file);

    if !outcome.weight_log.is_empty() {
        let tasks: Vec<TaskId> = outcome.weight_log[0]
            .weights
            .iter()
            .map(|&(t, _)| t)
            .collect();
        let mut file = std::io::BufWriter::new(File::create(out.join("weights.csv"))?);
        let header: Vec<String> = std::iter::once("step".to_string())
            .chain(tasks.iter().map(|t| t.label()))
            .collect();
        writeln!(file, "{}", header.join(","))?;
        for entry in &outcome.weight_log {
            let mut row = vec![entry.step.to_string()];
            for task in &tasks {
                let w = entry
                    .weights
                    .iter()
                    .find(|(t, _)| t == task)
                    .map(|&(_, w)| format!("{w:.6}"))
                    .unwrap_or_default();
                row.push(w);
            }
            writeln!(file, "{}", row.join(","))?;
        }
        file.flush()?;
    }

    save_checkpoint(&out.join("checkpoint.json"), &outcome.emb)?;
    if let Some(best) = outcome
        .metrics
        .iter()
        .find(|m| m.epoch == outcome.best_epoch)
    {
        println!(
            "best epoch {}: recall@5/10/20 = {:.4}/{:.4}/{:.4}, ndcg@5/10/20 = {:.4}/{:.4}/{:.4} ({:?})",
            best.epoch,
            best.recall[0],
            best.recall[1],
            best.recall[2],
            best.ndcg[0],
            best.ndcg[1],
            best.ndcg[2],
            outcome.stop,
        );
    }
    Ok(outcome)
}

fn eval_checkpoint(
    data: &DataArgs,
    checkpoint: &Path,
    seed: u64,
    meta_fraction: f64,
) -> Result<()> {
    let (dataset, _) = load(data)?;
    let emb = load_checkpoint(checkpoint)?;
    if emb.num_users() != dataset.num_users() || emb.num_items() != dataset.num_items() {
        bail!(
            "checkpoint is for {}x{} nodes but the dataset has {}x{}",
            emb.num_users(),
            emb.num_items(),
            dataset.num_users(),
            dataset.num_items()
        );
    }
    let splits = split_primary(&dataset, DEFAULT_SPLIT_RATIO, meta_fraction, seed)?;
    let training_edges = splits.training_edges();
    let r_train = ausrec::sparse::SparseMatrix::from_pairs(
        dataset.num_users(),
        dataset.num_items(),
        &training_edges,
    )?;
    let train_view = Dataset::new(
        dataset.num_users(),
        dataset.num_items(),
        r_train,
        dataset.social().clone(),
    )?;
    let a_hat = SpmmOperand::new(train_view.joint_adjacency().sym_normalize()?);
    let prop = propagate_values(&a_hat, &emb)?;
    let ranking = rank_all(
        &prop,
        &SplitEdges::items_by_user(&training_edges),
        &SplitEdges::items_by_user(&splits.test),
        EVAL_KS[2].min(dataset.num_items()),
    )?;
    for &k in &EVAL_KS {
        let k = k.min(dataset.num_items());
        println!(
            "recall@{k} = {:.6}  ndcg@{k} = {:.6}",
            recall_at_k(&ranking, k)?,
            ndcg_at_k(&ranking, k)?
        );
    }
    Ok(())
}

fn best_metrics(outcome: &TrainOutcome) -> [f64; 6] {
    outcome
        .metrics
        .iter()
        .find(|m| m.epoch == outcome.best_epoch)
        .map(|m| {
            [
                m.recall[0],
                m.recall[1],
                m.recall[2],
                m.ndcg[0],
                m.ndcg[1],
                m.ndcg[2],
            ]
        })
        .unwrap_or([0.0; 6])
}

fn write_comparison(path: &Path, rows: &[(String, [f64; 6])]) -> Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    writeln!(
        file,
        "run,recall@5,recall@10,recall@20,ndcg@5,ndcg@10,ndcg@20"
    )?;
    println!(
        "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "run", "recall@5", "recall@10", "recall@20", "ndcg@5", "ndcg@10", "ndcg@20"
    );
    for (name, m) in rows {
        writeln!(
            file,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m[0], m[1], m[2], m[3], m[4], m[5]
        )?;
        println!(
            "{name:<24} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            m[0], m[1], m[2], m[3], m[4], m[5]
        );
    }
    file.flush()?;
    Ok(())
}

fn ablate(args: &TrainArgs, suite: &str) -> Result<()> {
    let (dataset, _) = load(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let mut rows: Vec<(String, [f64; 6])> = Vec::new();

    let mut run_one = |name: String, mut sub: TrainArgs| -> Result<()> {
        log::info!("ablation run `{name}` starting");
        let dir = args.out.join(&name);
        sub.out = dir.clone();
        let outcome = run_training(&dataset, &sub, &dir)?;
        rows.push((name, best_metrics(&outcome)));
        Ok(())
    };

    match suite {
        "no-aw" => {
            for mode in ["full", "no-aw"] {
                let mut sub = args.clone();
                sub.mode = mode.into();
                run_one(format!("mode-{mode}"), sub)?;
            }
        }
        "single-task" => {
            for index in 1..=7 {
                for (label, mode) in [
                    ("aw", format!("single-task:{index}")),
                    ("no-aw", format!("single-task-no-aw:{index}")),
                ] {
                    let mut sub = args.clone();
                    sub.mode = mode;
                    run_one(format!("ssl{index}-{label}"), sub)?;
                }
            }
        }
        "arch" => {
            for arch in ["8-1000-1", "8-500-1", "8-100-100-1", "8-1000-1000-1"] {
                let mut sub = args.clone();
                sub.mode = "full".into();
                sub.arch = arch.into();
                run_one(format!("arch-{arch}"), sub)?;
            }
        }
        other => bail!("unknown suite `{other}` (expected no-aw, single-task or arch)"),
    }

    write_comparison(&args.out.join(format!("ablate_{suite}.csv")), &rows)?;
    Ok(())
}
