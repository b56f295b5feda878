use kdsgl_core::graph::{
    generate_synthetic, split_dataset, Adjacency, SplitSpec, SyntheticDataset, TimeSeries,
};
use kdsgl_core::loss::LossTerm;
use kdsgl_core::trainer::{prepare_data, run_pipeline, Stage, TrainConfig, TrainedBundle};
use kdsgl_core::{Error, Matrix};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        k: 2,
        rho_grid: vec![0.0, 0.3, 0.6],
        epochs_teacher: 4,
        epochs_ae: 4,
        epochs_cluster: 6,
        epochs_student: 3,
        seed: 2,
        ..TrainConfig::default()
    }
}

fn tiny_data() -> SyntheticDataset {
    generate_synthetic(8, 2, 300, 4).unwrap()
}

fn trained() -> (SyntheticDataset, TrainedBundle) {
    let data = tiny_data();
    let bundle = run_pipeline(&data.series, &data.adjacency, &tiny_config()).unwrap();
    (data, bundle)
}

#[test]
fn fused_forecast_matches_membership_mix() {
    let (data, bundle) = trained();
    let prepared = prepare_data(&data.series, &bundle.config).unwrap();
    let windows: Vec<usize> = (0..prepared.test.len()).collect();
    let x = prepared.test.stacked_inputs(&windows);
    let teacher = bundle.predict_teacher(&x).unwrap();
    let students = bundle.predict_students(&x).unwrap();
    let fused = bundle.predict_fused(&x).unwrap();
    let z = &bundle.assignments.z;
    let n = bundle.n_nodes();
    for r in 0..x.rows() {
        for c in 0..teacher.cols() {
            let mix: f64 = (0..z.cols())
                .map(|k| z[(r % n, k)] * students[k][(r, c)])
                .sum();
            let want = 0.5 * (teacher[(r, c)] + mix);
            assert!((fused[(r, c)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn curves_follow_stage_order_and_total_adds_up() {
    let (_, bundle) = trained();
    let stages: Vec<Stage> = bundle.curves.iter().map(|c| c.stage).collect();
    assert!(stages.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(stages.first(), Some(&Stage::Teacher));
    assert_eq!(stages.last(), Some(&Stage::Done));
    let done = |term: LossTerm| {
        let name = term.to_string();
        bundle
            .curves
            .iter()
            .find(|c| c.stage == Stage::Done && c.term == name)
            .unwrap_or_else(|| panic!("{name}"))
            .validation
    };
    let (a, b) = (bundle.config.alpha, bundle.config.beta);
    let students: f64 = (0..bundle.config.k)
        .map(|k| done(LossTerm::Student(k)))
        .sum();
    let want = done(LossTerm::Teacher)
        + done(LossTerm::Reconstruction)
        + a * done(LossTerm::Clustering)
        + b * done(LossTerm::Gnn)
        + students;
    assert!((done(LossTerm::Total) - want).abs() < 1e-12);
}

#[test]
fn memberships_are_row_stochastic_and_rhos_come_from_the_grid() {
    let (_, bundle) = trained();
    for m in [
        &bundle.assignments.z,
        &bundle.assignments.q,
        &bundle.assignments.p,
    ] {
        assert_eq!(m.shape(), (8, 2));
        assert!(m.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-9));
    }
    assert_eq!(bundle.rhos.len(), 2);
    assert!(bundle
        .rhos
        .iter()
        .all(|r| bundle.config.rho_grid.contains(r)));
    assert_eq!(bundle.labels(), bundle.assignments.z.argmax_rows());
}

#[test]
fn different_seeds_give_different_models() {
    let data = tiny_data();
    let a = run_pipeline(&data.series, &data.adjacency, &tiny_config()).unwrap();
    let config = TrainConfig {
        seed: 3,
        ..tiny_config()
    };
    let b = run_pipeline(&data.series, &data.adjacency, &config).unwrap();
    assert_ne!(a.teacher, b.teacher);
}

#[test]
fn pipeline_rejects_bad_inputs() {
    let data = tiny_data();
    let too_many = TrainConfig {
        k: 9,
        ..tiny_config()
    };
    assert!(matches!(
        run_pipeline(&data.series, &data.adjacency, &too_many),
        Err(Error::Config(_))
    ));
    let small = Adjacency::from_raw(Matrix::zeros(3, 3)).unwrap();
    assert!(matches!(
        run_pipeline(&data.series, &small, &tiny_config()),
        Err(Error::Shape { .. })
    ));
    let bad_rho = TrainConfig {
        rho_grid: vec![1.5],
        ..tiny_config()
    };
    assert!(matches!(
        run_pipeline(&data.series, &data.adjacency, &bad_rho),
        Err(Error::Config(_))
    ));
    let short = TimeSeries::new(
        data.series.node_ids().to_vec(),
        data.series.values().slice_cols(0, 40),
        5.0,
    )
    .unwrap();
    assert!(matches!(
        run_pipeline(&short, &data.adjacency, &tiny_config()),
        Err(Error::InsufficientData { .. })
    ));
}

#[test]
fn protocol_length_splits_on_floor_boundaries() {
    let t = 34272usize;
    let ids = vec!["n".to_string()];
    let series = TimeSeries::new(ids, Matrix::zeros(1, t), 5.0).unwrap();
    let (train, val, test) = split_dataset(&series, &SplitSpec::default()).unwrap();
    let (a, b) = (t * 7 / 10, t * 8 / 10);
    assert_eq!((a, b), (23990, 27417));
    assert_eq!(
        (train.n_steps(), val.n_steps(), test.n_steps()),
        (a, b - a, t - b)
    );
}
