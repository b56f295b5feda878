//! Staged training pipeline, the optimizer, and the aggregate loss.
//!
//! Stages run in a fixed order: the teacher is fitted first and frozen,
//! the clustering autoencoder is pre-trained on the teacher's embeddings,
//! centers are seeded by k-means and the full clustering network is then
//! optimized against a periodically refreshed target distribution, and
//! finally one student per sub-graph is distilled with a grid search over
//! the imitation factor.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tape, Var};
use crate::clustering::{
    clustering_losses, init_centers_kmeans, joint_loss_tape, reconstruction_loss,
    reconstruction_loss_tape, target_distribution_p, AssignmentMatrix, ClusterNet,
    ClusteringConfig, ExponentMode,
};
use crate::error::{Error, Result};
use crate::graph::{
    make_windows, split_dataset, Adjacency, SplitSpec, TimeSeries, WindowBatch, ZScore,
};
use crate::loss::{LossTerm, ScalarLoss};
use crate::matrix::Matrix;
use crate::metrics::ParamCounts;
use crate::students::{
    fuse_predictions, student_loss, student_loss_tape, StudentConfig, StudentModel,
};
use crate::teacher::{
    teacher_loss, teacher_loss_tape, EmbeddingMatrix, TeacherConfig, TeacherModel,
};

/// Windows per mini-batch in the teacher and student stages.
pub const BATCH_WINDOWS: usize = 32;

const TEACHER_STREAM: u64 = 1;
const CLUSTER_STREAM: u64 = 2;
const KMEANS_STREAM: u64 = 3;
const STUDENT_STREAM: u64 = 100;
const ENSEMBLE_STREAM: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub rho_grid: Vec<f64>,
    /// Degrees of freedom of the t-kernel.
    pub v: f64,
    pub exponent: ExponentMode,
    pub t_in: usize,
    pub horizon: usize,
    pub embed_dim: usize,
    pub teacher_hidden: usize,
    pub student_hidden: usize,
    pub lr: f64,
    pub epochs_teacher: usize,
    pub epochs_ae: usize,
    pub epochs_cluster: usize,
    pub epochs_student: usize,
    pub p_refresh: usize,
    pub patience: usize,
    pub seed: u64,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 4,
            alpha: 0.1,
            beta: 0.1,
            rho_grid: (0..10).map(|i| i as f64 / 10.0).collect(),
            v: 1.0,
            exponent: ExponentMode::AsPrinted,
            t_in: 12,
            horizon: 12,
            embed_dim: 16,
            teacher_hidden: 64,
            student_hidden: 16,
            lr: 1e-3,
            epochs_teacher: 100,
            epochs_ae: 50,
            epochs_cluster: 100,
            epochs_student: 100,
            p_refresh: 5,
            patience: 10,
            seed: 0,
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if self.rho_grid.is_empty() || self.rho_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(
                "rho_grid must be a non-empty list within [0, 1]".into(),
            ));
        }
        if !(self.v > 0.0) {
            return Err(Error::Config("v must be positive".into()));
        }
        let widths = [
            ("t_in", self.t_in),
            ("horizon", self.horizon),
            ("embed_dim", self.embed_dim),
            ("teacher_hidden", self.teacher_hidden),
            ("student_hidden", self.student_hidden),
            ("p_refresh", self.p_refresh),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        self.split.validate()
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            t_in: self.t_in,
            horizon: self.horizon,
            embed_dim: self.embed_dim,
            hidden: self.teacher_hidden,
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            t_in: self.t_in,
            horizon: self.horizon,
            embed_dim: self.embed_dim,
            hidden: self.student_hidden,
        }
    }

    pub fn clustering_config(&self) -> ClusteringConfig {
        ClusteringConfig {
            dof: self.v,
            exponent: self.exponent,
            ..ClusteringConfig::new(self.k, self.embed_dim)
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent seed for one consumer of randomness.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Aggregate loss `teacher + ae + α·clu + β·gnn + Σ students`.
pub fn total_loss(
    l_teacher: f64,
    l_ae: f64,
    l_clu: f64,
    l_gnn: f64,
    student_losses: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<ScalarLoss> {
    let parts = [l_teacher, l_ae, l_clu, l_gnn];
    if let Some(bad) = parts.iter().chain(student_losses).find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("loss component {bad} is negative")));
    }
    let students: f64 = student_losses.iter().sum();
    Ok(ScalarLoss::new(
        LossTerm::Total,
        l_teacher + l_ae + alpha * l_clu + beta * l_gnn + students,
    ))
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t = self.t.saturating_add(1);
        let c1 = 1.0 - libm::pow(Self::BETA1, self.t as f64);
        let c2 = 1.0 - libm::pow(Self::BETA2, self.t as f64);
        for i in 0..params.len() {
            let g = params.grad_at(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for ((mj, vj), gj) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mj = Self::BETA1 * *mj + (1.0 - Self::BETA1) * gj;
                *vj = Self::BETA2 * *vj + (1.0 - Self::BETA2) * gj * gj;
            }
            let value = params.value_at_mut(i).data_mut();
            for ((p, mj), vj) in value.iter_mut().zip(self.m[i].data()).zip(self.v[i].data()) {
                *p -= self.lr * (mj / c1) / (libm::sqrt(vj / c2) + Self::EPS);
            }
        }
    }
}

/// A training problem driven by [`optimize`].
///
/// One epoch is one evaluation interval: every batch is stepped once and
/// the validation loss is measured afterwards.
pub trait Objective {
    fn batch_count(&self) -> usize;

    /// Called before each epoch; may reshuffle or refresh targets.
    fn prepare_epoch(&mut self, _epoch: usize, _params: &ParamSet) -> Result<()> {
        Ok(())
    }

    fn batch_loss(&mut self, tape: &mut Tape, params: &ParamSet, batch: usize) -> Result<Var>;

    fn validation_loss(&mut self, params: &ParamSet) -> Result<f64>;

    /// Whether to hand back the best-validation parameters rather than the last.
    fn restore_best(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_validation: f64,
    pub steps: usize,
}

fn as_divergence(err: Error, step: usize) -> Error {
    match err {
        Error::NonFinite(_) => Error::Divergence { step },
        other => other,
    }
}

/// Adam updates with early stopping on the objective's validation loss.
///
/// Training stops once `patience` consecutive epochs fail to improve the
/// best validation loss, so `patience = 0` runs a single epoch.
pub fn optimize<O: Objective + ?Sized>(
    params: &mut ParamSet,
    objective: &mut O,
    options: &OptimizeOptions,
) -> Result<OptimizeReport> {
    if !(options.lr >= 0.0) || !options.lr.is_finite() {
        return Err(Error::Config(format!(
            "learning rate {} is invalid",
            options.lr
        )));
    }
    let mut adam = Adam::new(params, options.lr);
    let mut report = OptimizeReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_validation: f64::INFINITY,
        steps: 0,
    };
    let mut best = params.clone();
    let mut stale = 0usize;
    for epoch in 0..options.epochs {
        objective.prepare_epoch(epoch, params)?;
        let batches = objective.batch_count();
        let mut train = 0.0;
        for b in 0..batches {
            let step = report.steps;
            let mut tape = Tape::new();
            let loss = objective
                .batch_loss(&mut tape, params, b)
                .map_err(|e| as_divergence(e, step))?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence { step });
            }
            tape.backward(loss, params)
                .map_err(|e| as_divergence(e, step))?;
            adam.step(params);
            if params.iter().any(|(_, m)| !m.is_finite()) {
                return Err(Error::Divergence { step });
            }
            train += value;
            report.steps += 1;
        }
        let validation = objective
            .validation_loss(params)
            .map_err(|e| as_divergence(e, report.steps))?;
        if !validation.is_finite() {
            return Err(Error::Divergence { step: report.steps });
        }
        report.epochs.push(EpochRecord {
            epoch,
            train: train / batches.max(1) as f64,
            validation,
        });
        if validation < report.best_validation {
            report.best_validation = validation;
            report.best_epoch = Some(epoch);
            best.clone_from(params);
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= options.patience {
            break;
        }
    }
    if objective.restore_best() && report.best_epoch.is_some() {
        *params = best;
    }
    Ok(report)
}

/// Normalized train/validation/test windows.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub scaler: ZScore,
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub test: WindowBatch,
}

/// Splits chronologically, fits the scaler on the training segment and
/// windows each segment separately.
pub fn prepare_data(series: &TimeSeries, config: &TrainConfig) -> Result<PreparedData> {
    let (train, _, _) = split_dataset(series, &config.split)?;
    prepare_data_with(series, config, ZScore::fit(&train))
}

/// [`prepare_data`] with a previously fitted scaler.
pub fn prepare_data_with(
    series: &TimeSeries,
    config: &TrainConfig,
    scaler: ZScore,
) -> Result<PreparedData> {
    let (train, val, test) = split_dataset(series, &config.split)?;
    let windows =
        |s: &TimeSeries| make_windows(&scaler.transform_series(s), config.t_in, config.horizon, 1);
    Ok(PreparedData {
        scaler,
        train: windows(&train)?,
        val: windows(&val)?,
        test: windows(&test)?,
    })
}

fn all_windows(batch: &WindowBatch) -> Vec<usize> {
    (0..batch.len()).collect()
}

fn chunk(order: &[usize], batch: usize) -> &[usize] {
    let start = batch * BATCH_WINDOWS;
    &order[start..(start + BATCH_WINDOWS).min(order.len())]
}

fn batch_count(windows: usize) -> usize {
    windows.div_ceil(BATCH_WINDOWS)
}

struct TeacherObjective<'a> {
    model: &'a TeacherModel,
    train: &'a WindowBatch,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    val_x: Matrix,
    val_y: Matrix,
}

impl Objective for TeacherObjective<'_> {
    fn batch_count(&self) -> usize {
        batch_count(self.order.len())
    }

    fn prepare_epoch(&mut self, _epoch: usize, _params: &ParamSet) -> Result<()> {
        self.order.shuffle(&mut self.rng);
        Ok(())
    }

    fn batch_loss(&mut self, tape: &mut Tape, params: &ParamSet, batch: usize) -> Result<Var> {
        let idx = chunk(&self.order, batch);
        let x = self.train.stacked_inputs(idx);
        let y = self.train.stacked_targets(idx);
        let y_hat = self.model.build(tape, params, &x)?;
        teacher_loss_tape(tape, y_hat, &y)
    }

    fn validation_loss(&mut self, params: &ParamSet) -> Result<f64> {
        let mut tape = Tape::new();
        let y_hat = self.model.build(&mut tape, params, &self.val_x)?;
        Ok(teacher_loss(&self.val_y, tape.value(y_hat))?.value)
    }
}

/// Fits one teacher; `stream` separates the KD-SGL teacher from ensemble members.
pub fn train_teacher(
    data: &PreparedData,
    config: &TrainConfig,
    stream: u64,
) -> Result<(TeacherModel, OptimizeReport)> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seed = derive_seed(config.seed, stream);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TeacherModel::init(data.train.n_nodes(), config.teacher_config(), &mut rng)?;
    let val = all_windows(&data.val);
    let mut params = model.params().clone();
    let report = {
        let mut objective = TeacherObjective {
            model: &model,
            train: &data.train,
            order: all_windows(&data.train),
            rng,
            val_x: data.val.stacked_inputs(&val),
            val_y: data.val.stacked_targets(&val),
        };
        optimize(
            &mut params,
            &mut objective,
            &OptimizeOptions {
                epochs: config.epochs_teacher,
                lr: config.lr,
                patience: config.patience,
            },
        )?
    };
    *model.params_mut() = params;
    Ok((model, report))
}

/// `members` teachers, each from its own seed stream.
pub fn train_ensemble(
    data: &PreparedData,
    config: &TrainConfig,
    members: usize,
) -> Result<crate::metrics::EnsembleModel> {
    let models = (0..members as u64)
        .map(|m| train_teacher(data, config, ENSEMBLE_STREAM + m).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    crate::metrics::EnsembleModel::new(models)
}

struct AeObjective<'a> {
    net: &'a ClusterNet,
    e: &'a Matrix,
    adj: &'a Matrix,
}

impl Objective for AeObjective<'_> {
    fn batch_count(&self) -> usize {
        1
    }

    fn batch_loss(&mut self, tape: &mut Tape, params: &ParamSet, _batch: usize) -> Result<Var> {
        let vars = self.net.build(tape, params, self.e, self.adj)?;
        reconstruction_loss_tape(tape, self.e, vars.reconstruction)
    }

    fn validation_loss(&mut self, params: &ParamSet) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, params, 0)?;
        tape.scalar(loss)
    }
}

struct JointObjective<'a> {
    net: &'a ClusterNet,
    e: &'a Matrix,
    adj: &'a Matrix,
    p: Matrix,
    alpha: f64,
    beta: f64,
    refresh: usize,
}

impl JointObjective<'_> {
    fn target_from(&self, params: &ParamSet) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.net.build(&mut tape, params, self.e, self.adj)?;
        target_distribution_p(tape.value(vars.q))
    }
}

impl Objective for JointObjective<'_> {
    fn batch_count(&self) -> usize {
        1
    }

    fn prepare_epoch(&mut self, epoch: usize, params: &ParamSet) -> Result<()> {
        if epoch.is_multiple_of(self.refresh) {
            self.p = self.target_from(params)?;
        }
        Ok(())
    }

    fn batch_loss(&mut self, tape: &mut Tape, params: &ParamSet, _batch: usize) -> Result<Var> {
        let vars = self.net.build(tape, params, self.e, self.adj)?;
        joint_loss_tape(tape, &vars, self.e, &self.p, self.alpha, self.beta)
    }

    /// Joint loss against the target implied by `params` themselves, so
    /// the score does not jump when the training target is refreshed.
    fn validation_loss(&mut self, params: &ParamSet) -> Result<f64> {
        let p = self.target_from(params)?;
        let mut tape = Tape::new();
        let vars = self.net.build(&mut tape, params, self.e, self.adj)?;
        let loss = joint_loss_tape(&mut tape, &vars, self.e, &p, self.alpha, self.beta)?;
        tape.scalar(loss)
    }
}

/// Fits the clustering autoencoder to reconstruct frozen embeddings.
pub fn pretrain_autoencoder(
    e: &Matrix,
    adj: &Matrix,
    config: &TrainConfig,
) -> Result<(ClusterNet, OptimizeReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, CLUSTER_STREAM));
    let mut net = ClusterNet::init(config.clustering_config(), &mut rng)?;
    let mut params = net.params().clone();
    let report = optimize(
        &mut params,
        &mut AeObjective { net: &net, e, adj },
        &OptimizeOptions {
            epochs: config.epochs_ae,
            lr: config.lr,
            patience: config.patience,
        },
    )?;
    *net.params_mut() = params;
    Ok((net, report))
}

/// Seeds centers by k-means on the encoder output, then optimizes the
/// whole clustering network against the refreshed target distribution.
pub fn train_clustering(
    mut net: ClusterNet,
    e: &Matrix,
    adj: &Matrix,
    config: &TrainConfig,
) -> Result<(ClusterNet, OptimizeReport)> {
    let ae = net.ae_forward(e)?;
    let a_l = ae.layers.last().expect("encoder");
    let centers = init_centers_kmeans(
        a_l,
        config.k,
        derive_seed(config.seed, KMEANS_STREAM),
        config.v,
        config.exponent,
    )?;
    net.set_centers(centers.mu)?;
    let mut params = net.params().clone();
    let report = optimize(
        &mut params,
        &mut JointObjective {
            net: &net,
            e,
            adj,
            p: Matrix::zeros(0, 0),
            alpha: config.alpha,
            beta: config.beta,
            refresh: config.p_refresh,
        },
        &OptimizeOptions {
            epochs: config.epochs_cluster,
            lr: config.lr,
            patience: config.patience,
        },
    )?;
    *net.params_mut() = params;
    Ok((net, report))
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Teacher,
    AePretrain,
    ClusterJoint,
    Students,
    Done,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Teacher,
        Stage::AePretrain,
        Stage::ClusterJoint,
        Stage::Students,
        Stage::Done,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::AePretrain => "ae_pretrain",
            Stage::ClusterJoint => "cluster_joint",
            Stage::Students => "students",
            Stage::Done => "done",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::Teacher => Some(Stage::AePretrain),
            Stage::AePretrain => Some(Stage::ClusterJoint),
            Stage::ClusterJoint => Some(Stage::Students),
            Stage::Students => Some(Stage::Done),
            Stage::Done => None,
        }
    }
}

/// One row of a loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub term: String,
    pub train: f64,
    pub validation: f64,
}

fn curve_rows<'a>(
    stage: Stage,
    term: &str,
    report: &'a OptimizeReport,
) -> impl Iterator<Item = CurveRecord> + 'a {
    let term = String::from(term);
    report.epochs.iter().map(move |r| CurveRecord {
        stage,
        epoch: r.epoch,
        term: term.clone(),
        train: r.train,
        validation: r.validation,
    })
}

/// Progress through the stages and the frozen artifacts produced so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    stage: Stage,
    curves: Vec<CurveRecord>,
    embeddings: Option<EmbeddingMatrix>,
    memberships: Option<Matrix>,
}

impl Default for PipelineState {
    fn default() -> Self {
        Self::new()
    }
}

impl PipelineState {
    pub fn new() -> Self {
        Self {
            stage: Stage::Teacher,
            curves: Vec::new(),
            embeddings: None,
            memberships: None,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn curves(&self) -> &[CurveRecord] {
        &self.curves
    }

    pub fn embeddings(&self) -> Option<&EmbeddingMatrix> {
        self.embeddings.as_ref()
    }

    pub fn memberships(&self) -> Option<&Matrix> {
        self.memberships.as_ref()
    }

    pub fn freeze_embeddings(&mut self, e: EmbeddingMatrix) {
        self.embeddings = Some(e);
    }

    pub fn freeze_memberships(&mut self, z: Matrix) {
        self.memberships = Some(z);
    }

    pub fn record(&mut self, rows: impl IntoIterator<Item = CurveRecord>) {
        self.curves.extend(rows);
    }

    /// Moves to the next stage once its inputs exist.
    pub fn advance(&mut self, to: Stage) -> Result<()> {
        if self.stage.next() != Some(to) {
            return Err(Error::Contract(format!(
                "cannot move from stage {} to {}",
                self.stage.as_str(),
                to.as_str()
            )));
        }
        let missing = match to {
            Stage::AePretrain | Stage::ClusterJoint => self.embeddings.is_none(),
            Stage::Students | Stage::Done => self.memberships.is_none(),
            Stage::Teacher => false,
        };
        if missing {
            return Err(Error::Contract(format!(
                "stage {} started before its inputs were frozen",
                to.as_str()
            )));
        }
        self.stage = to;
        Ok(())
    }

    pub fn into_curves(self) -> Vec<CurveRecord> {
        self.curves
    }
}

/// Frozen inputs shared by every student; students can train in parallel.
#[derive(Debug, Clone)]
pub struct StudentStage {
    config: TrainConfig,
    embeddings: EmbeddingMatrix,
    z: Matrix,
    train: WindowBatch,
    val: WindowBatch,
    teacher_train: Matrix,
    teacher_val: Matrix,
}

/// A trained student with its selected imitation factor.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutcome {
    pub model: StudentModel,
    pub rho: f64,
    /// Membership-weighted ground-truth MAE on validation windows.
    pub validation: f64,
    pub curve: Vec<CurveRecord>,
}

fn window_rows(stacked: &Matrix, windows: &[usize], n: usize) -> Matrix {
    let rows: Vec<usize> = windows.iter().flat_map(|w| w * n..(w + 1) * n).collect();
    stacked.select_rows(&rows)
}

struct StudentObjective<'a> {
    stage: &'a StudentStage,
    model: &'a StudentModel,
    z_col: Vec<f64>,
    rho: f64,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    val_x: Matrix,
    val_y: Matrix,
}

impl Objective for StudentObjective<'_> {
    fn batch_count(&self) -> usize {
        batch_count(self.order.len())
    }

    fn prepare_epoch(&mut self, _epoch: usize, _params: &ParamSet) -> Result<()> {
        self.order.shuffle(&mut self.rng);
        Ok(())
    }

    fn batch_loss(&mut self, tape: &mut Tape, params: &ParamSet, batch: usize) -> Result<Var> {
        let idx = chunk(&self.order, batch);
        let s = self.stage;
        let x = s.train.stacked_inputs(idx);
        let y = s.train.stacked_targets(idx);
        let y_teacher = window_rows(&s.teacher_train, idx, s.train.n_nodes());
        let y_hat = self.model.build(tape, params, &x, &s.embeddings)?;
        student_loss_tape(tape, y_hat, &y, &y_teacher, &self.z_col, self.rho)
    }

    fn validation_loss(&mut self, params: &ParamSet) -> Result<f64> {
        let mut tape = Tape::new();
        let y_hat = self
            .model
            .build(&mut tape, params, &self.val_x, &self.stage.embeddings)?;
        let y_hat = tape.value(y_hat);
        Ok(student_loss(
            self.model.index(),
            &self.val_y,
            y_hat,
            y_hat,
            &self.z_col,
            0.0,
        )?
        .value)
    }
}

impl StudentStage {
    pub fn k(&self) -> usize {
        self.z.cols()
    }

    pub fn memberships(&self) -> &Matrix {
        &self.z
    }

    /// Trains student `k` once per grid value and keeps the one with the
    /// lowest validation score; ties go to the earlier grid entry.
    pub fn train_student(&self, k: usize) -> Result<StudentOutcome> {
        if k >= self.k() {
            return Err(Error::Config(format!(
                "student {k} out of range 0..{}",
                self.k()
            )));
        }
        let seed = derive_seed(self.config.seed, STUDENT_STREAM + k as u64);
        let z_col = self.z.column_values(k);
        let val = all_windows(&self.val);
        let val_x = self.val.stacked_inputs(&val);
        let val_y = self.val.stacked_targets(&val);
        let mut best: Option<StudentOutcome> = None;
        for &rho in &self.config.rho_grid {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = StudentModel::init(k, self.config.student_config(), &mut rng)?;
            let mut params = model.params().clone();
            let report = {
                let mut objective = StudentObjective {
                    stage: self,
                    model: &model,
                    z_col: z_col.clone(),
                    rho,
                    order: all_windows(&self.train),
                    rng,
                    val_x: val_x.clone(),
                    val_y: val_y.clone(),
                };
                optimize(
                    &mut params,
                    &mut objective,
                    &OptimizeOptions {
                        epochs: self.config.epochs_student,
                        lr: self.config.lr,
                        patience: self.config.patience,
                    },
                )?
            };
            *model.params_mut() = params;
            let validation = report.best_validation;
            if best.as_ref().is_none_or(|b| validation < b.validation) {
                let term = format!("{}", LossTerm::Student(k));
                best = Some(StudentOutcome {
                    model,
                    rho,
                    validation,
                    curve: curve_rows(Stage::Students, &term, &report).collect(),
                });
            }
        }
        best.ok_or_else(|| Error::Config("rho_grid is empty".into()))
    }
}

/// Runs students one after another.
pub fn sequential_students(stage: &StudentStage) -> Result<Vec<StudentOutcome>> {
    (0..stage.k()).map(|k| stage.train_student(k)).collect()
}

/// Everything needed to predict, evaluate and export a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBundle {
    pub config: TrainConfig,
    pub scaler: ZScore,
    pub teacher: TeacherModel,
    pub cluster: ClusterNet,
    pub assignments: AssignmentMatrix,
    pub students: Vec<StudentModel>,
    pub rhos: Vec<f64>,
    pub curves: Vec<CurveRecord>,
}

impl TrainedBundle {
    pub fn n_nodes(&self) -> usize {
        self.teacher.n_nodes()
    }

    /// Hard sub-graph labels, `argmax` of each membership row.
    pub fn labels(&self) -> Vec<usize> {
        self.assignments.z.argmax_rows()
    }

    /// Teacher forecast on normalized stacked windows.
    pub fn predict_teacher(&self, stacked: &Matrix) -> Result<Matrix> {
        self.teacher.forward_stacked(stacked)
    }

    /// Per-student forecasts on normalized stacked windows.
    pub fn predict_students(&self, stacked: &Matrix) -> Result<Vec<Matrix>> {
        let e = self.teacher.embeddings();
        self.students
            .iter()
            .map(|s| s.forward_stacked(stacked, &e))
            .collect()
    }

    /// Fused KD-SGL forecast on normalized stacked windows.
    pub fn predict_fused(&self, stacked: &Matrix) -> Result<Matrix> {
        let teacher = self.predict_teacher(stacked)?;
        let students = self.predict_students(stacked)?;
        fuse_predictions(&teacher, &students, &self.assignments.z)
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            teacher: self.teacher.param_count(),
            clustering: self.cluster.param_count(),
            students: self
                .students
                .iter()
                .map(StudentModel::param_count)
                .collect(),
        }
    }
}

/// Parameter counts implied by a config for `n_nodes` nodes, without training.
pub fn param_counts_for(config: &TrainConfig, n_nodes: usize) -> Result<ParamCounts> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let teacher = TeacherModel::init(n_nodes, config.teacher_config(), &mut rng)?;
    let cluster = ClusterNet::init(config.clustering_config(), &mut rng)?;
    let student = StudentModel::init(0, config.student_config(), &mut rng)?;
    Ok(ParamCounts {
        teacher: teacher.param_count(),
        clustering: cluster.param_count(),
        students: alloc::vec![student.param_count(); config.k],
    })
}

pub fn run_pipeline(
    series: &TimeSeries,
    adjacency: &Adjacency,
    config: &TrainConfig,
) -> Result<TrainedBundle> {
    run_pipeline_with(series, adjacency, config, sequential_students)
}

/// [`run_pipeline`] with a caller-supplied runner for the student stage.
///
/// The runner must return one outcome per sub-graph, in sub-graph order.
pub fn run_pipeline_with<F>(
    series: &TimeSeries,
    adjacency: &Adjacency,
    config: &TrainConfig,
    run_students: F,
) -> Result<TrainedBundle>
where
    F: FnOnce(&StudentStage) -> Result<Vec<StudentOutcome>>,
{
    config.validate()?;
    if adjacency.n_nodes() != series.n_nodes() {
        return Err(Error::shape(
            "run_pipeline",
            (series.n_nodes(), series.n_steps()),
            adjacency.raw().shape(),
        ));
    }
    if config.k > series.n_nodes() {
        return Err(Error::Config(format!(
            "k = {} exceeds the number of nodes ({})",
            config.k,
            series.n_nodes()
        )));
    }
    let data = prepare_data(series, config)?;
    let adj = adjacency.normalized();
    let mut state = PipelineState::new();

    let (teacher, report) =
        train_teacher(&data, config, TEACHER_STREAM).map_err(|e| e.in_stage("teacher"))?;
    state.record(curve_rows(Stage::Teacher, "l_teacher", &report));
    let val = all_windows(&data.val);
    let val_x = data.val.stacked_inputs(&val);
    let val_y = data.val.stacked_targets(&val);
    let teacher_val = teacher.forward_stacked(&val_x)?;
    let l_teacher = teacher_loss(&val_y, &teacher_val)?.value;
    state.freeze_embeddings(teacher.embeddings());

    state.advance(Stage::AePretrain)?;
    let e = state.embeddings().expect("frozen").as_matrix().clone();
    let (net, report) =
        pretrain_autoencoder(&e, adj, config).map_err(|err| err.in_stage("ae_pretrain"))?;
    state.record(curve_rows(Stage::AePretrain, "l_ae", &report));

    state.advance(Stage::ClusterJoint)?;
    let (net, report) =
        train_clustering(net, &e, adj, config).map_err(|err| err.in_stage("cluster_joint"))?;
    state.record(curve_rows(Stage::ClusterJoint, "l_joint", &report));
    let assignments = net
        .assignments(&e, adj)
        .map_err(|err| err.in_stage("cluster_joint"))?;
    let l_ae = reconstruction_loss(&e, &net.ae_forward(&e)?.reconstruction)?.value;
    let (l_clu, l_gnn) = clustering_losses(&assignments.p, &assignments.q, &assignments.z)?;
    state.freeze_memberships(assignments.z.clone());

    state.advance(Stage::Students)?;
    let train_all = all_windows(&data.train);
    let stage = StudentStage {
        config: config.clone(),
        embeddings: state.embeddings().expect("frozen").clone(),
        z: state.memberships().expect("frozen").clone(),
        teacher_train: teacher.forward_stacked(&data.train.stacked_inputs(&train_all))?,
        teacher_val: teacher_val.clone(),
        train: data.train.clone(),
        val: data.val.clone(),
    };
    let outcomes = run_students(&stage).map_err(|err| err.in_stage("students"))?;
    if outcomes.len() != config.k
        || outcomes
            .iter()
            .enumerate()
            .any(|(k, o)| o.model.index() != k)
    {
        return Err(Error::Contract(
            "student runner must return one outcome per sub-graph in order".into(),
        ));
    }
    let mut student_losses = Vec::with_capacity(config.k);
    for (k, o) in outcomes.iter().enumerate() {
        state.record(o.curve.iter().cloned());
        let y_hat = o.model.forward_stacked(&val_x, &stage.embeddings)?;
        let z_col = stage.z.column_values(k);
        student_losses
            .push(student_loss(k, &val_y, &stage.teacher_val, &y_hat, &z_col, o.rho)?.value);
    }
    let total = total_loss(
        l_teacher,
        l_ae,
        l_clu.value,
        l_gnn.value,
        &student_losses,
        config.alpha,
        config.beta,
    )?;

    state.advance(Stage::Done)?;
    let summary = [
        (format!("{}", LossTerm::Teacher), l_teacher),
        (format!("{}", LossTerm::Reconstruction), l_ae),
        (format!("{}", LossTerm::Clustering), l_clu.value),
        (format!("{}", LossTerm::Gnn), l_gnn.value),
    ]
    .into_iter()
    .chain(
        student_losses
            .iter()
            .enumerate()
            .map(|(k, l)| (format!("{}", LossTerm::Student(k)), *l)),
    )
    .chain(core::iter::once((
        format!("{}", LossTerm::Total),
        total.value,
    )));
    state.record(summary.map(|(term, value)| CurveRecord {
        stage: Stage::Done,
        epoch: 0,
        term,
        train: value,
        validation: value,
    }));

    let (students, rhos) = outcomes.into_iter().map(|o| (o.model, o.rho)).unzip();
    Ok(TrainedBundle {
        config: config.clone(),
        scaler: data.scaler,
        teacher,
        cluster: net,
        assignments,
        students,
        rhos,
        curves: state.into_curves(),
    })
}
