//! CSV dataset formats: series, adjacency and planted labels.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use kdsgl_core::graph::{Adjacency, TimeSeries};
use kdsgl_core::Matrix;

use crate::error::{csv_err, io, layout, Error, Result};

pub const SERIES_FILE: &str = "series.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const LABELS_FILE: &str = "labels.csv";
const EDGE_HEADER: [&str; 3] = ["src", "dst", "weight"];

fn reader(path: &Path, headers: bool) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(io(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_error(path: &Path, record: &csv::StringRecord, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: record.position().map_or(0, |p| p.line()),
        message,
    }
}

fn parse_cell(path: &Path, record: &csv::StringRecord, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_error(path, record, format!("`{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, record, format!("`{cell}` is not finite")));
    }
    Ok(v)
}

/// Reads a header of node ids followed by one row of readings per timestep.
///
/// Empty cells are treated as missing and filled forward.
///
/// Lines are split on commas directly, so a blank line in a one-column file
/// is a missing reading rather than a skipped record.
pub fn load_series_csv(path: &Path, interval_minutes: f64) -> Result<TimeSeries> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
    let header = lines.next().unwrap_or("");
    let ids: Vec<String> = header
        .split(',')
        .map(|id| id.trim().trim_matches('"').to_string())
        .collect();
    if ids.iter().all(String::is_empty) {
        return Err(kdsgl_core::Error::EmptyDataset.into());
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fail = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message,
        };
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != ids.len() {
            return Err(fail(format!(
                "expected {} cells, found {}",
                ids.len(),
                cells.len()
            )));
        }
        let row = cells
            .iter()
            .map(|cell| match cell {
                &"" => Ok(None),
                c => match c.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(fail(format!("`{c}` is not a finite number"))),
                },
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(TimeSeries::from_timestep_rows(
        ids,
        &rows,
        interval_minutes,
    )?)
}

/// Reads a dense `N x N` CSV without header, or an edge list with header
/// `src,dst,weight`.
pub fn load_adjacency(path: &Path, node_ids: &[String], symmetrize: bool) -> Result<Adjacency> {
    let mut rdr = reader(path, false)?;
    let mut records = Vec::new();
    for record in rdr.records() {
        records.push(record.map_err(csv_err(path))?);
    }
    let is_edge_list = records
        .first()
        .is_some_and(|r| r.iter().eq(EDGE_HEADER.iter().copied()));
    if is_edge_list {
        let mut edges = Vec::with_capacity(records.len() - 1);
        for r in &records[1..] {
            if r.len() != 3 {
                return Err(parse_error(
                    path,
                    r,
                    format!("expected 3 cells, found {}", r.len()),
                ));
            }
            edges.push((
                r[0].to_string(),
                r[1].to_string(),
                parse_cell(path, r, &r[2])?,
            ));
        }
        return Ok(Adjacency::from_edges(node_ids, &edges, symmetrize)?);
    }
    let n = node_ids.len();
    if records.len() != n {
        return Err(layout(
            path,
            format!("dense adjacency has {} rows, expected {n}", records.len()),
        ));
    }
    let mut raw = Matrix::zeros(n, n);
    for (i, r) in records.iter().enumerate() {
        if r.len() != n {
            return Err(parse_error(
                path,
                r,
                format!("expected {n} cells, found {}", r.len()),
            ));
        }
        for (j, cell) in r.iter().enumerate() {
            raw[(i, j)] = parse_cell(path, r, cell)?;
        }
    }
    Ok(Adjacency::from_raw(raw)?)
}

/// Reads `node_id,true_cluster` rows in file order.
pub fn load_labels_csv(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut rdr = reader(path, true)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err(path))?;
        if record.len() != 2 {
            return Err(parse_error(
                path,
                &record,
                "expected node_id,true_cluster".into(),
            ));
        }
        let label = record[1]
            .parse()
            .map_err(|_| parse_error(path, &record, format!("`{}` is not a label", &record[1])))?;
        out.push((record[0].to_string(), label));
    }
    Ok(out)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io(path))?))
}

pub(crate) fn join(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_series_csv(path: &Path, series: &TimeSeries) -> Result<()> {
    let mut w = create(path)?;
    let values = series.values();
    let mut body = series.node_ids().join(",");
    body.push('\n');
    for t in 0..series.n_steps() {
        body.push_str(&join((0..series.n_nodes()).map(|n| values[(n, t)])));
        body.push('\n');
    }
    w.write_all(body.as_bytes()).map_err(io(path))?;
    w.flush().map_err(io(path))
}

/// Writes the raw weights as a dense CSV.
pub fn write_adjacency_csv(path: &Path, adjacency: &Adjacency) -> Result<()> {
    write_matrix_csv(path, adjacency.raw())
}

pub(crate) fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = create(path)?;
    for r in 0..m.rows() {
        writeln!(w, "{}", join(m.row(r).iter().copied())).map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

pub(crate) fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut rdr = reader(path, false)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err(path))?;
        let row = record
            .iter()
            .map(|c| parse_cell(path, &record, c))
            .collect::<Result<Vec<_>>>()?;
        if rows.first().is_some_and(|f| f.len() != row.len()) {
            return Err(parse_error(path, &record, "ragged matrix row".into()));
        }
        rows.push(row);
    }
    Ok(Matrix::from_rows(&rows))
}

pub fn write_labels_csv(path: &Path, node_ids: &[String], labels: &[usize]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "node_id,true_cluster").map_err(io(path))?;
    for (id, l) in node_ids.iter().zip(labels) {
        writeln!(w, "{id},{l}").map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}
