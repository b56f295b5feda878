//! Flat `key=value` training configuration.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use kdsgl_core::clustering::ExponentMode;
use kdsgl_core::graph::SplitSpec;
use kdsgl_core::trainer::TrainConfig;

use crate::error::{io, Error, Result};

pub const KEYS: [&str; 20] = [
    "k",
    "alpha",
    "beta",
    "rho_grid",
    "v",
    "t_kernel_exponent",
    "t_in",
    "horizon",
    "embed_dim",
    "teacher_hidden",
    "student_hidden",
    "lr",
    "epochs_teacher",
    "epochs_ae",
    "epochs_cluster",
    "epochs_student",
    "p_refresh",
    "patience",
    "seed",
    "split",
];

fn list(value: &str) -> std::result::Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{v}` is not a number"))
        })
        .collect()
}

fn scalar<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{value}` is not valid here"))
}

fn apply(config: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "k" => config.k = scalar(value)?,
        "alpha" => config.alpha = scalar(value)?,
        "beta" => config.beta = scalar(value)?,
        "rho_grid" => config.rho_grid = list(value)?,
        "v" => config.v = scalar(value)?,
        "t_kernel_exponent" => {
            config.exponent = ExponentMode::parse(value).map_err(|e| e.to_string())?
        }
        "t_in" => config.t_in = scalar(value)?,
        "horizon" => config.horizon = scalar(value)?,
        "embed_dim" => config.embed_dim = scalar(value)?,
        "teacher_hidden" => config.teacher_hidden = scalar(value)?,
        "student_hidden" => config.student_hidden = scalar(value)?,
        "lr" => config.lr = scalar(value)?,
        "epochs_teacher" => config.epochs_teacher = scalar(value)?,
        "epochs_ae" => config.epochs_ae = scalar(value)?,
        "epochs_cluster" => config.epochs_cluster = scalar(value)?,
        "epochs_student" => config.epochs_student = scalar(value)?,
        "p_refresh" => config.p_refresh = scalar(value)?,
        "patience" => config.patience = scalar(value)?,
        "seed" => config.seed = scalar(value)?,
        "split" => {
            let f = list(value)?;
            let [train, val, test] = f[..] else {
                return Err("split needs three fractions".into());
            };
            config.split = SplitSpec { train, val, test };
        }
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

/// Parses config text on top of the defaults, then validates the result.
///
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_config(text: &str, origin: &Path) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i as u64 + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("expected key=value, found `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(fail(format!("duplicate key `{key}`")));
        }
        apply(&mut config, key, value).map_err(fail)?;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    parse_config(&text, path)
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes every key in [`KEYS`] order; floats use their shortest exact form.
pub fn render_config(c: &TrainConfig) -> String {
    let values = [
        c.k.to_string(),
        c.alpha.to_string(),
        c.beta.to_string(),
        join(&c.rho_grid),
        c.v.to_string(),
        c.exponent.as_str().to_string(),
        c.t_in.to_string(),
        c.horizon.to_string(),
        c.embed_dim.to_string(),
        c.teacher_hidden.to_string(),
        c.student_hidden.to_string(),
        c.lr.to_string(),
        c.epochs_teacher.to_string(),
        c.epochs_ae.to_string(),
        c.epochs_cluster.to_string(),
        c.epochs_student.to_string(),
        c.p_refresh.to_string(),
        c.patience.to_string(),
        c.seed.to_string(),
        join(&[c.split.train, c.split.val, c.split.test]),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}
