//! Parameter sets on disk: `manifest.csv` (`name,rows,cols`) plus one
//! headerless `<name>.csv` per matrix.

use std::io::Write;
use std::path::Path;

use kdsgl_core::{Matrix, ParamSet};

use crate::data::{create, read_matrix_csv, write_matrix_csv};
use crate::error::{csv_err, io, layout, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

fn file_name(name: &str) -> String {
    format!("{name}.csv")
}

pub fn write_params(dir: &Path, params: &ParamSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = create(&manifest)?;
    writeln!(w, "name,rows,cols").map_err(io(&manifest))?;
    for (name, m) in params.iter() {
        writeln!(w, "{name},{},{}", m.rows(), m.cols()).map_err(io(&manifest))?;
        write_matrix_csv(&dir.join(file_name(name)), m)?;
    }
    w.flush().map_err(io(&manifest))
}

pub fn read_params(dir: &Path) -> Result<ParamSet> {
    let manifest = dir.join(MANIFEST_FILE);
    let file = std::fs::File::open(&manifest).map_err(io(&manifest))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut params = ParamSet::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err(&manifest))?;
        let (name, rows, cols) = match (record.get(0), record.get(1), record.get(2)) {
            (Some(n), Some(r), Some(c)) => (n, r.parse::<usize>(), c.parse::<usize>()),
            _ => return Err(layout(&manifest, "expected name,rows,cols")),
        };
        let (Ok(rows), Ok(cols)) = (rows, cols) else {
            return Err(layout(&manifest, format!("bad shape for `{name}`")));
        };
        let path = dir.join(file_name(name));
        let m = if rows == 0 || cols == 0 {
            Matrix::zeros(rows, cols)
        } else {
            read_matrix_csv(&path)?
        };
        if m.shape() != (rows, cols) {
            return Err(layout(
                &path,
                format!(
                    "shape {:?} disagrees with manifest ({rows}, {cols})",
                    m.shape()
                ),
            ));
        }
        params.insert(name, m)?;
    }
    Ok(params)
}
