//! Dataset directories and the train / evaluate steps behind the CLI.

use std::path::Path;

use kdsgl_core::graph::{generate_synthetic, Adjacency, SyntheticDataset, TimeSeries};
use kdsgl_core::metrics::{EnsembleModel, MetricsReport};
use kdsgl_core::trainer::{
    prepare_data, run_pipeline_with, sequential_students, train_ensemble, TrainConfig,
};

use crate::bundle::{write_bundle, RunBundle};
use crate::data::{
    load_adjacency, load_series_csv, write_adjacency_csv, write_labels_csv, write_series_csv,
    ADJACENCY_FILE, LABELS_FILE, SERIES_FILE,
};
use crate::error::{io, Result};
use crate::parallel::parallel_students;
use crate::report::{evaluate, metrics_csv, metrics_json};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const DEFAULT_INTERVAL_MINUTES: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: TimeSeries,
    pub adjacency: Adjacency,
}

/// Loads `series.csv` and `adjacency.csv` from `dir`.
pub fn load_dataset(dir: &Path, interval_minutes: f64, symmetrize: bool) -> Result<Dataset> {
    let series = load_series_csv(&dir.join(SERIES_FILE), interval_minutes)?;
    let adjacency = load_adjacency(&dir.join(ADJACENCY_FILE), series.node_ids(), symmetrize)?;
    Ok(Dataset { series, adjacency })
}

/// Writes a planted-cluster dataset in the loader's formats.
pub fn write_synthetic(
    dir: &Path,
    nodes: usize,
    clusters: usize,
    steps: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let data = generate_synthetic(nodes, clusters, steps, seed)?;
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    write_series_csv(&dir.join(SERIES_FILE), &data.series)?;
    write_adjacency_csv(&dir.join(ADJACENCY_FILE), &data.adjacency)?;
    write_labels_csv(&dir.join(LABELS_FILE), data.series.node_ids(), &data.labels)?;
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Ensemble baseline size; 0 trains none.
    pub ensemble: usize,
    pub parallel: bool,
}

pub fn train(dataset: &Dataset, config: &TrainConfig, options: TrainOptions) -> Result<RunBundle> {
    let model = if options.parallel {
        run_pipeline_with(
            &dataset.series,
            &dataset.adjacency,
            config,
            parallel_students,
        )?
    } else {
        run_pipeline_with(
            &dataset.series,
            &dataset.adjacency,
            config,
            sequential_students,
        )?
    };
    let ensemble: Option<EnsembleModel> = match options.ensemble {
        0 => None,
        m => Some(train_ensemble(
            &prepare_data(&dataset.series, config)?,
            config,
            m,
        )?),
    };
    Ok(RunBundle {
        model,
        node_ids: dataset.series.node_ids().to_vec(),
        interval_minutes: dataset.series.interval_minutes(),
        ensemble,
    })
}

/// Evaluates `bundle` and writes `metrics.json` and `metrics.csv` into `out`.
pub fn write_metrics(
    out: &Path,
    bundle: &RunBundle,
    series: &TimeSeries,
    timing: bool,
) -> Result<Vec<MetricsReport>> {
    let reports = evaluate(bundle, series, timing)?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let json = out.join(METRICS_JSON);
    std::fs::write(&json, metrics_json(&reports)).map_err(io(&json))?;
    let csv = out.join(METRICS_CSV);
    std::fs::write(&csv, metrics_csv(&reports)).map_err(io(&csv))?;
    Ok(reports)
}

/// Trains, writes the run directory and its untimed metrics.
pub fn train_to_dir(
    run: &Path,
    dataset: &Dataset,
    config: &TrainConfig,
    options: TrainOptions,
) -> Result<RunBundle> {
    let bundle = train(dataset, config, options)?;
    write_bundle(run, &bundle)?;
    write_metrics(run, &bundle, &dataset.series, false)?;
    Ok(bundle)
}
