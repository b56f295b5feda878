//! Test-set evaluation and the report formats built from it.

use std::time::Instant;

use kdsgl_core::graph::{TimeSeries, WindowBatch};
use kdsgl_core::metrics::{compute_metrics, MetricsReport, REPORT_HORIZONS};
use kdsgl_core::trainer::{prepare_data_with, Stage};
use kdsgl_core::{Matrix, Result};
use serde_json::{json, Map, Value};

use crate::bundle::RunBundle;

pub const TEACHER_LABEL: &str = "teacher";
pub const KD_SGL_LABEL: &str = "kd_sgl";
pub const ENSEMBLE_LABEL: &str = "ensemble";

/// Windows per prediction call during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Runs `predict` over every test window in chunks, returning de-normalized
/// `(targets, predictions)` chunk pairs and the time spent inside `predict`.
fn predict_chunks(
    bundle: &RunBundle,
    test: &WindowBatch,
    predict: impl Fn(&Matrix) -> Result<Matrix>,
) -> Result<(Vec<Matrix>, Vec<Matrix>, f64)> {
    let scaler = bundle.model.scaler;
    let all: Vec<usize> = (0..test.len()).collect();
    let (mut truth, mut preds, mut seconds) = (Vec::new(), Vec::new(), 0.0);
    for idx in all.chunks(EVAL_CHUNK) {
        let x = test.stacked_inputs(idx);
        let start = Instant::now();
        let y_hat = predict(&x)?;
        seconds += start.elapsed().as_secs_f64();
        truth.push(scaler.inverse(&test.stacked_targets(idx)));
        preds.push(scaler.inverse(&y_hat));
    }
    Ok((truth, preds, seconds))
}

/// Reported horizons that fit inside the configured forecast length.
pub fn report_horizons(horizon: usize) -> Vec<usize> {
    REPORT_HORIZONS
        .iter()
        .copied()
        .filter(|h| *h <= horizon)
        .collect()
}

/// Evaluates the teacher, the fused model and, when present, the ensemble
/// on the test segment of `series`. Timings are kept only with `timing`.
pub fn evaluate(
    bundle: &RunBundle,
    series: &TimeSeries,
    timing: bool,
) -> Result<Vec<MetricsReport>> {
    let model = &bundle.model;
    let data = prepare_data_with(series, &model.config, model.scaler)?;
    let horizons = report_horizons(model.config.horizon);
    let interval = series.interval_minutes();
    let counts = model.param_counts();
    let mut runs: Vec<(&str, usize, Box<dyn Fn(&Matrix) -> Result<Matrix> + '_>)> = vec![
        (
            TEACHER_LABEL,
            counts.teacher,
            Box::new(|x| model.predict_teacher(x)),
        ),
        (
            KD_SGL_LABEL,
            counts.kd_sgl_total(),
            Box::new(|x| model.predict_fused(x)),
        ),
    ];
    if let Some(e) = &bundle.ensemble {
        runs.push((
            ENSEMBLE_LABEL,
            e.param_count(),
            Box::new(|x| e.predict_stacked(x)),
        ));
    }
    runs.into_iter()
        .map(|(label, params, predict)| {
            let (truth, preds, seconds) = predict_chunks(bundle, &data.test, predict)?;
            Ok(MetricsReport {
                model: label.to_string(),
                horizons: compute_metrics(&truth, &preds, &horizons, interval)?,
                params,
                predict_seconds: timing.then_some(seconds),
            })
        })
        .collect()
}

/// `model → {horizon label → {mae, mape, rmse}, params, predict_seconds}`
/// with keys sorted, so equal reports serialize to equal bytes.
pub fn metrics_json(reports: &[MetricsReport]) -> String {
    let mut root = Map::new();
    for r in reports {
        let mut entry = Map::new();
        for h in &r.horizons {
            entry.insert(
                h.label(),
                json!({ "mae": h.mae, "mape": h.mape, "rmse": h.rmse }),
            );
        }
        entry.insert("params".into(), json!(r.params));
        entry.insert("predict_seconds".into(), json!(r.predict_seconds));
        root.insert(r.model.clone(), Value::Object(entry));
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(root)).expect("metrics serialize");
    text.push('\n');
    text
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per model and horizon, for plotting.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("model,step,minutes,mae,mape,rmse\n");
    for r in reports {
        for h in &r.horizons {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.model,
                h.step,
                h.minutes,
                h.mae,
                cell(h.mape),
                h.rmse
            ));
        }
    }
    out
}

/// Flat `key=value` summary of a run and its metrics.
pub fn flat_report(bundle: &RunBundle, reports: &[MetricsReport]) -> String {
    let model = &bundle.model;
    let counts = model.param_counts();
    let mut lines = vec![
        format!("nodes={}", model.n_nodes()),
        format!("k={}", model.config.k),
        format!("seed={}", model.config.seed),
        format!("params.teacher={}", counts.teacher),
        format!("params.clustering={}", counts.clustering),
    ];
    for (k, (c, rho)) in counts.students.iter().zip(&model.rhos).enumerate() {
        lines.push(format!("params.student_{k}={c}"));
        lines.push(format!("rho.student_{k}={rho}"));
    }
    lines.push(format!("params.kd_sgl={}", counts.kd_sgl_total()));
    let mut sizes = vec![0usize; model.config.k];
    for l in model.labels() {
        sizes[l] += 1;
    }
    for (k, s) in sizes.iter().enumerate() {
        lines.push(format!("cluster_size.{k}={s}"));
    }
    for c in model.curves.iter().filter(|c| c.stage == Stage::Done) {
        lines.push(format!("loss.{}={}", c.term, c.validation));
    }
    for r in reports {
        for h in &r.horizons {
            let key = format!("{}.{}", r.model, h.label());
            lines.push(format!("{key}.mae={}", h.mae));
            lines.push(format!("{key}.mape={}", cell(h.mape)));
            lines.push(format!("{key}.rmse={}", h.rmse));
        }
        if let Some(s) = r.predict_seconds {
            lines.push(format!("{}.predict_seconds={s}", r.model));
        }
    }
    lines.join("\n") + "\n"
}

/// Histogram of every node's readings, binned per node:
/// `node_id,cluster,bin_lo,bin_hi,count`.
pub fn value_histograms(series: &TimeSeries, labels: &[usize], bins: usize) -> String {
    let values = series.values();
    let data = values.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut out = String::from("node_id,cluster,bin_lo,bin_hi,count\n");
    for (n, id) in series.node_ids().iter().enumerate() {
        let mut counts = vec![0usize; bins];
        for &v in values.row(n) {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let edge = |i: usize| lo + width * i as f64;
            out.push_str(&format!(
                "{id},{},{},{},{c}\n",
                labels[n],
                edge(b),
                edge(b + 1)
            ));
        }
    }
    out
}
