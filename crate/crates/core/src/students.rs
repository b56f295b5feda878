//! Local student forecasters, the imitation loss, and output fusion.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{LossTerm, ScalarLoss};
use crate::matrix::Matrix;
use crate::mlp::Mlp;
use crate::teacher::{check_layout, EmbeddingMatrix};

const MLP_PREFIX: &str = "mlp";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudentConfig {
    pub t_in: usize,
    pub horizon: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

/// One-hidden-layer per-node MLP on `[window ‖ frozen embedding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    index: usize,
    config: StudentConfig,
    params: ParamSet,
    mlp: Mlp,
}

impl StudentModel {
    pub fn init<R: Rng>(index: usize, config: StudentConfig, rng: &mut R) -> Result<Self> {
        if config.t_in == 0 || config.horizon == 0 || config.hidden == 0 {
            return Err(Error::Config("student widths must be positive".into()));
        }
        let mut params = ParamSet::new();
        let widths = [
            config.t_in + config.embed_dim,
            config.hidden,
            config.horizon,
        ];
        let mlp = Mlp::init(&mut params, MLP_PREFIX, &widths, rng)?;
        Ok(Self {
            index,
            config,
            params,
            mlp,
        })
    }

    pub fn from_params(index: usize, config: StudentConfig, params: ParamSet) -> Result<Self> {
        let expected = Self::init(index, config, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&expected.params, &params)?;
        Ok(Self { params, ..expected })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn features(&self, stacked: &Matrix, embeddings: &EmbeddingMatrix) -> Result<Matrix> {
        let e = embeddings.as_matrix();
        let n = e.rows().max(1);
        if stacked.cols() != self.config.t_in
            || e.cols() != self.config.embed_dim
            || !stacked.rows().is_multiple_of(n)
        {
            return Err(Error::shape(
                "student_forward",
                stacked.shape(),
                (e.rows(), self.config.t_in),
            ));
        }
        stacked.concat_cols(&e.tile_rows(stacked.rows() / n))
    }

    /// Forecast for one `N x t_in` window.
    pub fn forward(&self, window: &Matrix, embeddings: &EmbeddingMatrix) -> Result<Matrix> {
        self.forward_stacked(window, embeddings)
    }

    pub fn forward_stacked(
        &self,
        stacked: &Matrix,
        embeddings: &EmbeddingMatrix,
    ) -> Result<Matrix> {
        let x = self.features(stacked, embeddings)?;
        self.mlp.eval(&self.params, &x)
    }

    pub fn build(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        stacked: &Matrix,
        embeddings: &EmbeddingMatrix,
    ) -> Result<Var> {
        let x = tape.constant(self.features(stacked, embeddings)?)?;
        self.mlp.build(tape, params, x)
    }
}

/// Knowledge-distillation imitation factor `ρ ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImitationConfig {
    rho: f64,
}

impl ImitationConfig {
    pub fn new(rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!(
                "imitation factor {rho} outside [0, 1]"
            )));
        }
        Ok(Self { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

fn membership_rows(z_col: &[f64], rows: usize) -> Result<Vec<f64>> {
    if z_col.is_empty() || !rows.is_multiple_of(z_col.len()) {
        return Err(Error::shape("student_loss", (rows, 1), (z_col.len(), 1)));
    }
    if z_col.iter().any(|z| !(0.0..=1.0).contains(z)) {
        return Err(Error::Domain(
            "membership weights must lie in [0, 1]".into(),
        ));
    }
    Ok(z_col.iter().copied().cycle().take(rows).collect())
}

fn weighted_mae(a: &Matrix, b: &Matrix, weights: &[f64]) -> Result<f64> {
    let d = a.sub(b)?;
    let mut total = 0.0;
    for (r, w) in weights.iter().enumerate() {
        total += w * d.row(r).iter().map(|v| libm::fabs(*v)).sum::<f64>();
    }
    Ok(total / d.len().max(1) as f64)
}

/// Membership-weighted blend of ground-truth error and teacher-imitation
/// error for student `k`.
///
/// Predictions may stack several windows (`reps * N` rows); `z_col` holds
/// the `N` memberships of the student's sub-graph and is repeated per
/// window. Both terms are normalized by the total entry count.
pub fn student_loss(
    k: usize,
    y_true: &Matrix,
    y_teacher: &Matrix,
    y_student: &Matrix,
    z_col: &[f64],
    rho: f64,
) -> Result<ScalarLoss> {
    let rho = ImitationConfig::new(rho)?.rho();
    if y_teacher.shape() != y_student.shape() {
        return Err(Error::shape(
            "student_loss",
            y_teacher.shape(),
            y_student.shape(),
        ));
    }
    let w = membership_rows(z_col, y_student.rows())?;
    let truth = weighted_mae(y_true, y_student, &w)?;
    let imitation = weighted_mae(y_teacher, y_student, &w)?;
    Ok(ScalarLoss::new(
        LossTerm::Student(k),
        (1.0 - rho) * truth + rho * imitation,
    ))
}

/// Tape version of [`student_loss`].
pub fn student_loss_tape(
    tape: &mut Tape,
    y_student: Var,
    y_true: &Matrix,
    y_teacher: &Matrix,
    z_col: &[f64],
    rho: f64,
) -> Result<Var> {
    let rho = ImitationConfig::new(rho)?.rho();
    let rows = tape.value(y_student).rows();
    let w = membership_rows(z_col, rows)?;
    let term = |target: &Matrix, coef: f64, tape: &mut Tape| -> Result<Var> {
        let t = tape.constant(target.clone())?;
        let d = tape.sub(y_student, t)?;
        let d = tape.abs(d)?;
        let d = tape.scale_rows(d, w.clone())?;
        let m = tape.mean(d)?;
        tape.scale(m, coef)
    };
    let truth = term(y_true, 1.0 - rho, tape)?;
    if rho == 0.0 {
        return Ok(truth);
    }
    let imitation = term(y_teacher, rho, tape)?;
    tape.add(truth, imitation)
}

/// `½ (teacher + Σ_k z_ik · student_k)` per node.
///
/// Predictions may stack several windows; row `r` uses membership row
/// `r mod N`.
pub fn fuse_predictions(y_teacher: &Matrix, students: &[Matrix], z: &Matrix) -> Result<Matrix> {
    if students.len() != z.cols() {
        return Err(Error::shape(
            "fuse_predictions",
            (students.len(), 1),
            z.shape(),
        ));
    }
    if z.rows() == 0 || !y_teacher.rows().is_multiple_of(z.rows()) {
        return Err(Error::shape(
            "fuse_predictions",
            y_teacher.shape(),
            z.shape(),
        ));
    }
    for (r, s) in z.row_sums().iter().enumerate() {
        if libm::fabs(s - 1.0) > 1e-6 {
            return Err(Error::Contract(format!(
                "membership row {r} sums to {s}, not 1"
            )));
        }
    }
    for s in students {
        if s.shape() != y_teacher.shape() {
            return Err(Error::shape(
                "fuse_predictions",
                s.shape(),
                y_teacher.shape(),
            ));
        }
    }
    let n = z.rows();
    Ok(Matrix::from_fn(
        y_teacher.rows(),
        y_teacher.cols(),
        |r, c| {
            let mix: f64 = students
                .iter()
                .enumerate()
                .map(|(k, s)| z[(r % n, k)] * s[(r, c)])
                .sum();
            0.5 * (y_teacher[(r, c)] + mix)
        },
    ))
}
