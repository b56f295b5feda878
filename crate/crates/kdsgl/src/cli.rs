use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kdsgl_core::trainer::TrainConfig;

use crate::bundle::{assignments_csv, read_bundle};
use crate::config::load_config;
use crate::data::load_labels_csv;
use crate::report::{flat_report, metrics_csv, value_histograms};
use crate::workflow::{
    load_dataset, train_to_dir, write_metrics, write_synthetic, Dataset, TrainOptions,
    DEFAULT_INTERVAL_MINUTES,
};

pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const HISTOGRAM_FILE: &str = "histograms.csv";

#[derive(Debug, Parser)]
#[command(
    name = "kdsgl",
    version,
    about = "Sub-graph distillation forecaster for sensor graphs"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Overrides the config seed (`train`) or seeds the generator (`synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key=value training config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, or output file for `cluster`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory holding series.csv and adjacency.csv.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-cluster dataset.
    Synth {
        #[arg(long, default_value_t = 30)]
        nodes: usize,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Train a model and write its run directory with untimed metrics.
    Train {
        /// Also train an ensemble of this many teachers as a baseline.
        #[arg(long, default_value_t = 0)]
        ensemble: usize,
        /// Train the students on one thread each.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        dataset: DatasetArgs,
    },
    /// Evaluate a run on the test segment and write metrics.json and metrics.csv.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Record prediction wall-clock time in the report.
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        dataset: DatasetArgs,
    },
    /// Export node memberships as node_id,cluster,z_0..
    Cluster {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write a key=value report, per-horizon CSV and optional value histograms.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Bins per node for value histograms; 0 skips them.
        #[arg(long, default_value_t = 0)]
        bins: usize,
        #[command(flatten)]
        dataset: DatasetArgs,
    },
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Minutes between consecutive readings.
    #[arg(long, default_value_t = DEFAULT_INTERVAL_MINUTES)]
    pub interval_minutes: f64,
    /// Keep edge-list adjacency directed instead of taking max(W, Wᵀ).
    #[arg(long)]
    pub directed: bool,
}

/// A command line that parsed but cannot run; exits like a clap usage error.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => Err(UsageError(format!("--{flag} is required for this command")).into()),
    }
}

fn dataset(global: &Global, args: &DatasetArgs) -> anyhow::Result<Dataset> {
    let dir = required(&global.data, "data")?;
    Ok(load_dataset(dir, args.interval_minutes, !args.directed)?)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth {
            nodes,
            clusters,
            steps,
        } => {
            let out = required(&g.out, "out")?;
            write_synthetic(out, *nodes, *clusters, *steps, g.seed.unwrap_or(0))?;
        }
        Command::Train {
            ensemble,
            parallel,
            dataset: args,
        } => {
            let out = required(&g.out, "out")?;
            let mut config = match &g.config {
                Some(path) => load_config(path)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = g.seed {
                config.seed = seed;
            }
            if *ensemble == 1 {
                return Err(UsageError("--ensemble needs at least 2 members".into()).into());
            }
            let data = dataset(g, args)?;
            let options = TrainOptions {
                ensemble: *ensemble,
                parallel: *parallel,
            };
            train_to_dir(out, &data, &config, options)?;
        }
        Command::Evaluate {
            run,
            timing,
            dataset: args,
        } => {
            let bundle = read_bundle(run)?;
            let data = dataset(g, args)?;
            let out = g.out.as_deref().unwrap_or(run);
            write_metrics(out, &bundle, &data.series, *timing)?;
        }
        Command::Cluster { run } => {
            let out = required(&g.out, "out")?;
            let bundle = read_bundle(run)?;
            write(
                out,
                &assignments_csv(&bundle.node_ids, &bundle.model.assignments.z),
            )?;
        }
        Command::Report {
            run,
            bins,
            dataset: args,
        } => {
            let bundle = read_bundle(run)?;
            let data = dataset(g, args)?;
            let out = g.out.as_deref().unwrap_or(run);
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let reports = crate::report::evaluate(&bundle, &data.series, false)?;
            let mut text = flat_report(&bundle, &reports);
            let labels_path = g.data.as_deref().map(|d| d.join(crate::data::LABELS_FILE));
            if let Some(path) = labels_path.filter(|p| p.exists()) {
                let truth = load_labels_csv(&path)?;
                let planted: Vec<usize> = bundle
                    .node_ids
                    .iter()
                    .map(|id| truth.iter().find(|(n, _)| n == id).map(|(_, l)| *l))
                    .collect::<Option<_>>()
                    .with_context(|| format!("{} does not cover every node", path.display()))?;
                let ari =
                    kdsgl_core::metrics::adjusted_rand_index(&bundle.model.labels(), &planted)?;
                text.push_str(&format!("ari_vs_planted={ari}\n"));
            }
            write(&out.join(REPORT_FILE), &text)?;
            write(&out.join(REPORT_CSV), &metrics_csv(&reports))?;
            if *bins > 0 {
                let hist = value_histograms(&data.series, &bundle.model.labels(), *bins);
                write(&out.join(HISTOGRAM_FILE), &hist)?;
            }
            print!("{text}");
        }
    }
    Ok(())
}
