//! The global teacher forecaster.
//!
//! Each node is forecast independently from its input window concatenated
//! with its learned embedding row, through two `tanh` hidden layers and a
//! linear head of width `H`. The embeddings are trained jointly with the
//! MLP and later feed the clustering network.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{LossTerm, ScalarLoss};
use crate::matrix::Matrix;
use crate::mlp::Mlp;

pub const EMBED_PARAM: &str = "embed";
const MLP_PREFIX: &str = "mlp";

/// Learned node embeddings `E` (`N x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn new(e: Matrix) -> Result<Self> {
        e.ensure_finite("EmbeddingMatrix")?;
        Ok(Self(e))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n_nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeacherConfig {
    pub t_in: usize,
    pub horizon: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    config: TeacherConfig,
    n_nodes: usize,
    params: ParamSet,
    mlp: Mlp,
}

impl TeacherModel {
    /// Embeddings start uniform on `[-0.1, 0.1]`; MLP weights are Glorot-uniform.
    pub fn init<R: Rng>(n_nodes: usize, config: TeacherConfig, rng: &mut R) -> Result<Self> {
        if config.embed_dim == 0 || config.t_in == 0 || config.horizon == 0 || config.hidden == 0 {
            return Err(Error::Config("teacher widths must be positive".into()));
        }
        let mut params = ParamSet::new();
        let e = Matrix::from_fn(n_nodes, config.embed_dim, |_, _| {
            rng.random_range(-0.1..=0.1)
        });
        params.insert(EMBED_PARAM, e)?;
        let widths = [
            config.t_in + config.embed_dim,
            config.hidden,
            config.hidden,
            config.horizon,
        ];
        let mlp = Mlp::init(&mut params, MLP_PREFIX, &widths, rng)?;
        Ok(Self {
            config,
            n_nodes,
            params,
            mlp,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: TeacherConfig, params: ParamSet) -> Result<Self> {
        let e = params.require(EMBED_PARAM)?;
        let n_nodes = e.rows();
        let expected = Self::init(n_nodes, config, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&expected.params, &params)?;
        Ok(Self { params, ..expected })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
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

    pub fn embeddings(&self) -> EmbeddingMatrix {
        EmbeddingMatrix(self.params.require(EMBED_PARAM).expect("embed").clone())
    }

    /// Records the forward pass of stacked windows (`reps * N` rows) on a tape.
    pub fn build(&self, tape: &mut Tape, params: &ParamSet, stacked: &Matrix) -> Result<Var> {
        let reps = self.check_stacked(stacked)?;
        let x = tape.constant(stacked.clone())?;
        let e = tape.param(params, EMBED_PARAM)?;
        let e = tape.tile_rows(e, reps)?;
        let input = tape.concat_cols(x, e)?;
        self.mlp.build(tape, params, input)
    }

    /// Forecast for one `N x t_in` window, giving `N x H`.
    pub fn forward(&self, window: &Matrix) -> Result<Matrix> {
        self.forward_stacked(window)
    }

    /// Forecast for windows stacked along rows.
    pub fn forward_stacked(&self, stacked: &Matrix) -> Result<Matrix> {
        let reps = self.check_stacked(stacked)?;
        let e = self.params.require(EMBED_PARAM)?.tile_rows(reps);
        self.mlp.eval(&self.params, &stacked.concat_cols(&e)?)
    }

    fn check_stacked(&self, stacked: &Matrix) -> Result<usize> {
        if stacked.cols() != self.config.t_in || !stacked.rows().is_multiple_of(self.n_nodes.max(1)) {
            return Err(Error::shape(
                "teacher_forward",
                stacked.shape(),
                (self.n_nodes, self.config.t_in),
            ));
        }
        Ok(stacked.rows() / self.n_nodes.max(1))
    }
}

pub(crate) fn check_layout(expected: &ParamSet, actual: &ParamSet) -> Result<()> {
    let want: Vec<_> = expected.iter().map(|(n, m)| (n, m.shape())).collect();
    let got: Vec<_> = actual.iter().map(|(n, m)| (n, m.shape())).collect();
    if want != got {
        return Err(Error::Contract(format!(
            "parameter layout mismatch: expected {want:?}, found {got:?}"
        )));
    }
    Ok(())
}

/// Mean absolute error over all nodes and horizon steps.
pub fn teacher_loss(y_true: &Matrix, y_hat: &Matrix) -> Result<ScalarLoss> {
    let diff = y_true.sub(y_hat)?;
    let value = diff.data().iter().map(|d| libm::fabs(*d)).sum::<f64>() / diff.len().max(1) as f64;
    Ok(ScalarLoss::new(LossTerm::Teacher, value))
}

/// Tape version of [`teacher_loss`].
pub fn teacher_loss_tape(tape: &mut Tape, y_hat: Var, y_true: &Matrix) -> Result<Var> {
    let y = tape.constant(y_true.clone())?;
    let d = tape.sub(y_hat, y)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}
