use std::path::{Path, PathBuf};

use kdsgl::config::{parse_config, render_config};
use kdsgl::data::{
    load_adjacency, load_labels_csv, load_series_csv, write_adjacency_csv, write_series_csv,
};
use kdsgl::params::{read_params, write_params};
use kdsgl::Error;
use kdsgl_core::graph::generate_synthetic;
use kdsgl_core::trainer::TrainConfig;
use kdsgl_core::{Matrix, ParamSet};
use tempfile::TempDir;

fn file(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn ids(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[test]
fn series_is_transposed_to_node_rows() {
    let dir = TempDir::new().unwrap();
    let s = load_series_csv(&file(&dir, "s.csv", "a,b\n1,4\n2,5\n3,6\n"), 5.0).unwrap();
    assert_eq!(s.node_ids(), ["a", "b"]);
    assert_eq!(
        s.values(),
        &Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    );
    assert_eq!(s.missing_count(), 0);
}

#[test]
fn empty_cell_is_masked_and_carried_forward() {
    let dir = TempDir::new().unwrap();
    let s = load_series_csv(&file(&dir, "s.csv", "a,b\n1,4\n,5\n3,6\n"), 5.0).unwrap();
    assert!(s.is_missing(0, 1));
    assert_eq!(s.values()[(0, 1)], 1.0);
    assert_eq!(s.missing_count(), 1);
}

#[test]
fn leading_gap_takes_first_valid_reading() {
    let dir = TempDir::new().unwrap();
    let s = load_series_csv(&file(&dir, "s.csv", "a\n\n\n7\n8\n"), 5.0).unwrap();
    assert_eq!(s.values().row(0), [7.0, 7.0, 7.0, 8.0]);
}

#[test]
fn ragged_row_reports_its_line() {
    let dir = TempDir::new().unwrap();
    match load_series_csv(&file(&dir, "s.csv", "a,b\n1,4\n2\n"), 5.0) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_numeric_cell_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    match load_series_csv(&file(&dir, "s.csv", "a,b\n1,x\n"), 5.0) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 2);
            assert!(message.contains("`x`"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn file_without_columns_is_empty() {
    let dir = TempDir::new().unwrap();
    let err = load_series_csv(&file(&dir, "s.csv", ""), 5.0).unwrap_err();
    assert!(
        matches!(err, Error::Core(kdsgl_core::Error::EmptyDataset)),
        "{err:?}"
    );
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_series_csv(Path::new("/nonexistent/series.csv"), 5.0).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn edge_list_symmetrize_flag() {
    let dir = TempDir::new().unwrap();
    let path = file(&dir, "e.csv", "src,dst,weight\na,b,1.0\n");
    let nodes = ids(&["a", "b"]);
    let sym = load_adjacency(&path, &nodes, true).unwrap();
    assert_eq!(sym.raw(), &Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
    let directed = load_adjacency(&path, &nodes, false).unwrap();
    assert_eq!(
        directed.raw(),
        &Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]])
    );
}

#[test]
fn empty_edge_list_normalizes_to_identity() {
    let dir = TempDir::new().unwrap();
    let a = load_adjacency(
        &file(&dir, "e.csv", "src,dst,weight\n"),
        &ids(&["a", "b", "c"]),
        true,
    )
    .unwrap();
    assert_eq!(a.raw(), &Matrix::zeros(3, 3));
    assert_eq!(a.normalized(), &Matrix::identity(3));
}

#[test]
fn duplicate_edges_are_summed() {
    let dir = TempDir::new().unwrap();
    let path = file(&dir, "e.csv", "src,dst,weight\na,b,1\na,b,2\n");
    let a = load_adjacency(&path, &ids(&["a", "b"]), false).unwrap();
    assert_eq!(a.raw()[(0, 1)], 3.0);
}

#[test]
fn dense_matches_its_edge_list_expansion() {
    let dir = TempDir::new().unwrap();
    let nodes = ids(&["a", "b", "c"]);
    let dense = load_adjacency(
        &file(&dir, "d.csv", "0,2,0\n2,0,0.5\n0,0.5,0\n"),
        &nodes,
        true,
    )
    .unwrap();
    let edges = "src,dst,weight\na,b,2\nb,c,0.5\n";
    let listed = load_adjacency(&file(&dir, "e.csv", edges), &nodes, true).unwrap();
    assert_eq!(dense, listed);
}

#[test]
fn adjacency_errors() {
    let dir = TempDir::new().unwrap();
    let nodes = ids(&["a", "b"]);
    let unknown = load_adjacency(
        &file(&dir, "u.csv", "src,dst,weight\na,z,1\n"),
        &nodes,
        true,
    );
    assert!(
        matches!(unknown, Err(Error::Core(kdsgl_core::Error::UnknownNode(ref id))) if id == "z")
    );
    let negative = load_adjacency(
        &file(&dir, "n.csv", "src,dst,weight\na,b,-1\n"),
        &nodes,
        true,
    );
    assert!(matches!(
        negative,
        Err(Error::Core(kdsgl_core::Error::Domain(_)))
    ));
    let dense_negative = load_adjacency(&file(&dir, "dn.csv", "0,-1\n1,0\n"), &nodes, true);
    assert!(matches!(
        dense_negative,
        Err(Error::Core(kdsgl_core::Error::Domain(_)))
    ));
    let short = load_adjacency(&file(&dir, "s.csv", "0,1\n"), &nodes, true);
    assert!(matches!(short, Err(Error::Layout { .. })));
}

#[test]
fn synthetic_files_round_trip_exactly() {
    let dir = TempDir::new().unwrap();
    let data = generate_synthetic(6, 2, 50, 3).unwrap();
    let (s, a) = (dir.path().join("s.csv"), dir.path().join("a.csv"));
    write_series_csv(&s, &data.series).unwrap();
    write_adjacency_csv(&a, &data.adjacency).unwrap();
    let series = load_series_csv(&s, data.series.interval_minutes()).unwrap();
    assert_eq!(series, data.series);
    assert_eq!(
        load_adjacency(&a, series.node_ids(), true).unwrap(),
        data.adjacency
    );
}

#[test]
fn labels_file_reads_back() {
    let dir = TempDir::new().unwrap();
    let labels =
        load_labels_csv(&file(&dir, "l.csv", "node_id,true_cluster\nn0,0\nn1,2\n")).unwrap();
    assert_eq!(labels, vec![("n0".to_string(), 0), ("n1".to_string(), 2)]);
}

#[test]
fn params_round_trip_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let mut ps = ParamSet::new();
    ps.insert(
        "w",
        Matrix::from_rows(&[[0.1, -1e-300], [std::f64::consts::PI, 1.0 / 3.0]]),
    )
    .unwrap();
    ps.insert(
        "mlp.l0.b",
        Matrix::from_rows(&[[f64::MIN_POSITIVE, -0.0, 12345.678]]),
    )
    .unwrap();
    write_params(dir.path(), &ps).unwrap();
    let back = read_params(dir.path()).unwrap();
    assert_eq!(back.names().collect::<Vec<_>>(), ["w", "mlp.l0.b"]);
    for ((_, a), (_, b)) in ps.iter().zip(back.iter()) {
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn params_shape_must_match_manifest() {
    let dir = TempDir::new().unwrap();
    let mut ps = ParamSet::new();
    ps.insert("w", Matrix::zeros(2, 2)).unwrap();
    write_params(dir.path(), &ps).unwrap();
    std::fs::write(dir.path().join("w.csv"), "0,0\n").unwrap();
    assert!(matches!(read_params(dir.path()), Err(Error::Layout { .. })));
}

#[test]
fn default_config_file_round_trips() {
    let text = render_config(&TrainConfig::default());
    assert!(text.contains("k=4\n") && text.contains("alpha=0.1\n") && text.contains("beta=0.1\n"));
    assert!(text.contains("t_kernel_exponent=as_printed\n"));
    assert!(text.contains("split=0.7,0.1,0.2\n"));
    assert_eq!(
        parse_config(&text, Path::new("c")).unwrap(),
        TrainConfig::default()
    );
}
