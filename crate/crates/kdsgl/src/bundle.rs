//! Run directories: a trained model plus everything needed to reload it.
//!
//! ```text
//! run/
//!   config.snapshot
//!   bundle.csv                  interval and scaler
//!   teacher/                    manifest.csv + one csv per parameter
//!   clustering/                 same, including centers.csv
//!   clustering/assignments.csv  node_id,cluster,z_0..z_{K-1}
//!   students/k_<i>/
//!   students/rhos.csv
//!   curves.csv
//!   ensemble/m_<j>/             only with an ensemble baseline
//! ```

use std::io::Write;
use std::path::Path;

use kdsgl_core::clustering::{
    soft_assignment_q, target_distribution_p, AssignmentMatrix, ClusterNet,
};
use kdsgl_core::graph::ZScore;
use kdsgl_core::metrics::EnsembleModel;
use kdsgl_core::students::StudentModel;
use kdsgl_core::teacher::TeacherModel;
use kdsgl_core::trainer::{CurveRecord, Stage, TrainConfig, TrainedBundle};
use kdsgl_core::Matrix;

use crate::config::{load_config, render_config};
use crate::data::{create, join};
use crate::error::{csv_err, io, layout, Result};
use crate::params::{read_params, write_params};

pub const CONFIG_FILE: &str = "config.snapshot";
pub const BUNDLE_FILE: &str = "bundle.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const RHOS_FILE: &str = "rhos.csv";

/// A trained model together with the dataset facts it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunBundle {
    pub model: TrainedBundle,
    pub node_ids: Vec<String>,
    pub interval_minutes: f64,
    pub ensemble: Option<EnsembleModel>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io(path))?;
    w.flush().map_err(io(path))
}

fn records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let file = std::fs::File::open(path).map_err(io(path))?;
    csv::Reader::from_reader(file)
        .records()
        .map(|r| r.map_err(csv_err(path)))
        .collect()
}

fn number(path: &Path, record: &csv::StringRecord, i: usize) -> Result<f64> {
    record.get(i).and_then(|c| c.parse().ok()).ok_or_else(|| {
        layout(
            path,
            format!(
                "bad number in row {:?}",
                record.position().map(|p| p.line())
            ),
        )
    })
}

/// Renders `node_id,cluster,z_0..z_{K-1}` with the argmax cluster per node.
pub fn assignments_csv(node_ids: &[String], z: &Matrix) -> String {
    let labels = z.argmax_rows();
    let mut out = String::from("node_id,cluster");
    for k in 0..z.cols() {
        out.push_str(&format!(",z_{k}"));
    }
    out.push('\n');
    for (i, id) in node_ids.iter().enumerate() {
        out.push_str(&format!(
            "{id},{},{}\n",
            labels[i],
            join(z.row(i).iter().copied())
        ));
    }
    out
}

fn read_assignments(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for r in records(path)? {
        if r.len() < 3 {
            return Err(layout(path, "expected node_id,cluster,z_0.."));
        }
        ids.push(r[0].to_string());
        rows.push(
            (2..r.len())
                .map(|i| number(path, &r, i))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(layout(
            path,
            "assignments must be a non-empty rectangular table",
        ));
    }
    Ok((ids, Matrix::from_rows(&rows)))
}

fn curves_csv(curves: &[CurveRecord]) -> String {
    let mut out = String::from("stage,epoch,term,train,validation\n");
    for c in curves {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.stage.as_str(),
            c.epoch,
            c.term,
            c.train,
            c.validation
        ));
    }
    out
}

fn read_curves(path: &Path) -> Result<Vec<CurveRecord>> {
    records(path)?
        .iter()
        .map(|r| {
            if r.len() != 5 {
                return Err(layout(path, "expected stage,epoch,term,train,validation"));
            }
            Ok(CurveRecord {
                stage: Stage::parse(&r[0])?,
                epoch: r[1]
                    .parse()
                    .map_err(|_| layout(path, format!("bad epoch `{}`", &r[1])))?,
                term: r[2].to_string(),
                train: number(path, r, 3)?,
                validation: number(path, r, 4)?,
            })
        })
        .collect()
}

fn student_dir(run: &Path, k: usize) -> std::path::PathBuf {
    run.join("students").join(format!("k_{k}"))
}

fn member_dir(run: &Path, m: usize) -> std::path::PathBuf {
    run.join("ensemble").join(format!("m_{m}"))
}

/// Writes `bundle` under `run`, creating directories as needed.
pub fn write_bundle(run: &Path, bundle: &RunBundle) -> Result<()> {
    let m = &bundle.model;
    std::fs::create_dir_all(run).map_err(io(run))?;
    write_text(&run.join(CONFIG_FILE), &render_config(&m.config))?;
    write_text(
        &run.join(BUNDLE_FILE),
        &format!(
            "key,value\ninterval_minutes,{}\nscaler_mean,{}\nscaler_std,{}\n",
            bundle.interval_minutes, m.scaler.mean, m.scaler.std
        ),
    )?;
    write_params(&run.join("teacher"), m.teacher.params())?;
    let clustering = run.join("clustering");
    write_params(&clustering, m.cluster.params())?;
    write_text(
        &clustering.join(ASSIGNMENTS_FILE),
        &assignments_csv(&bundle.node_ids, &m.assignments.z),
    )?;
    for s in &m.students {
        write_params(&student_dir(run, s.index()), s.params())?;
    }
    let mut rhos = String::from("k,rho\n");
    for (k, rho) in m.rhos.iter().enumerate() {
        rhos.push_str(&format!("{k},{rho}\n"));
    }
    write_text(&run.join("students").join(RHOS_FILE), &rhos)?;
    write_text(&run.join(CURVES_FILE), &curves_csv(&m.curves))?;
    if let Some(ensemble) = &bundle.ensemble {
        for (j, member) in ensemble.members().iter().enumerate() {
            write_params(&member_dir(run, j), member.params())?;
        }
    }
    Ok(())
}

fn read_scalars(path: &Path) -> Result<(f64, ZScore)> {
    let mut interval = None;
    let (mut mean, mut std) = (None, None);
    for r in records(path)? {
        let v = number(path, &r, 1)?;
        match &r[0] {
            "interval_minutes" => interval = Some(v),
            "scaler_mean" => mean = Some(v),
            "scaler_std" => std = Some(v),
            other => return Err(layout(path, format!("unknown key `{other}`"))),
        }
    }
    match (interval, mean, std) {
        (Some(interval), Some(mean), Some(std)) => Ok((interval, ZScore { mean, std })),
        _ => Err(layout(
            path,
            "needs interval_minutes, scaler_mean and scaler_std",
        )),
    }
}

/// Reloads a run directory. `Q` and `P` are recomputed from the stored
/// parameters; `Z` is read back from the assignments file.
pub fn read_bundle(run: &Path) -> Result<RunBundle> {
    let config: TrainConfig = load_config(&run.join(CONFIG_FILE))?;
    let (interval_minutes, scaler) = read_scalars(&run.join(BUNDLE_FILE))?;
    let teacher =
        TeacherModel::from_params(config.teacher_config(), read_params(&run.join("teacher"))?)?;
    let clustering = run.join("clustering");
    let cluster = ClusterNet::from_params(config.clustering_config(), read_params(&clustering)?)?;
    let assignments_path = clustering.join(ASSIGNMENTS_FILE);
    let (node_ids, z) = read_assignments(&assignments_path)?;
    if z.shape() != (teacher.n_nodes(), config.k) {
        return Err(layout(
            &assignments_path,
            format!(
                "expected {} nodes and {} clusters",
                teacher.n_nodes(),
                config.k
            ),
        ));
    }
    let e = teacher.embeddings();
    let encoded = cluster.ae_forward(e.as_matrix())?;
    let q = soft_assignment_q(
        encoded.layers.last().expect("encoder output"),
        &cluster.centers(),
    )?;
    let p = target_distribution_p(&q)?;
    let students = (0..config.k)
        .map(|k| {
            StudentModel::from_params(
                k,
                config.student_config(),
                read_params(&student_dir(run, k))?,
            )
            .map_err(Into::into)
        })
        .collect::<Result<Vec<_>>>()?;
    let rhos_path = run.join("students").join(RHOS_FILE);
    let rhos = records(&rhos_path)?
        .iter()
        .map(|r| number(&rhos_path, r, 1))
        .collect::<Result<Vec<_>>>()?;
    if rhos.len() != config.k {
        return Err(layout(&rhos_path, format!("expected {} rows", config.k)));
    }
    let curves = read_curves(&run.join(CURVES_FILE))?;
    let ensemble_dir = run.join("ensemble");
    let ensemble = if ensemble_dir.is_dir() {
        let mut members = Vec::new();
        while member_dir(run, members.len()).is_dir() {
            let params = read_params(&member_dir(run, members.len()))?;
            members.push(TeacherModel::from_params(config.teacher_config(), params)?);
        }
        Some(EnsembleModel::new(members)?)
    } else {
        None
    };
    Ok(RunBundle {
        model: TrainedBundle {
            config,
            scaler,
            teacher,
            cluster,
            assignments: AssignmentMatrix { z, q, p },
            students,
            rhos,
            curves,
        },
        node_ids,
        interval_minutes,
        ensemble,
    })
}
