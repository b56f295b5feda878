//! Reverse-mode differentiation over matrix-valued expressions.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse, accumulating
//! adjoints, and deposits the gradient of a scalar loss into the gradient
//! slots of the [`ParamSet`] the parameters were read from.
//!
//! ```
//! use kdsgl_core::{Matrix, ParamSet, Tape};
//!
//! let mut params = ParamSet::new();
//! params.insert("p", Matrix::scalar(3.0)).unwrap();
//! let mut tape = Tape::new();
//! let p = tape.param(&params, "p").unwrap();
//! let sq = tape.square(p).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss, &mut params).unwrap();
//! assert_eq!(params.grad("p").unwrap()[(0, 0)], 6.0);
//! ```

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Lower clamp applied to probabilities inside KL logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Matrix,
    grad: Matrix,
}

/// Gradient slots are scratch space and do not take part in equality.
impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.value == other.value
    }
}

/// Named parameter matrices with matching gradient slots, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Contract(alloc::format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.push(Param { name, value, grad });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.grad)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    /// `(name, value)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn value_at(&self, index: usize) -> &Matrix {
        &self.entries[index].value
    }

    pub fn value_at_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.entries[index].value
    }

    pub fn grad_at(&self, index: usize) -> &Matrix {
        &self.entries[index].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    RowSoftmax(Var),
    RowNormalize(Var),
    ConcatCols(Var, Var),
    TileRows(Var, usize),
    ScaleRows(Var, Vec<f64>),
    SqDist(Var, Var),
    StudentT { input: Var, dof: f64, exponent: f64 },
    Sum(Var),
    KlDiv { target: Matrix, input: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> Result<f64> {
        let m = self.value(var);
        m.as_scalar().ok_or(Error::NotScalar(m.rows(), m.cols()))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRowBias(a, b)
            | Op::ConcatCols(a, b)
            | Op::SqDist(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::RowSoftmax(a)
            | Op::RowNormalize(a)
            | Op::TileRows(a, _)
            | Op::ScaleRows(a, _)
            | Op::Sum(a) => self.needs(*a),
            Op::StudentT { input, .. } | Op::KlDiv { input, .. } => self.needs(*input),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let index = params
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.push(params.value_at(index).clone(), Op::Param(index), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_bias(self.value(bias))?;
        self.push(value, Op::AddRowBias(a, bias), "add_row_bias")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(libm::tanh);
        self.push(value, Op::Tanh(a), "tanh")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(libm::fabs);
        self.push(value, Op::Abs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * v);
        self.push(value, Op::Square(a), "square")
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_softmax();
        self.push(value, Op::RowSoftmax(a), "row_softmax")
    }

    /// Divides each row by its sum. Rows must have positive sums.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let total: f64 = value.row(r).iter().sum();
            if total <= 0.0 {
                return Err(Error::NonFinite("row_normalize"));
            }
            value.row_mut(r).iter_mut().for_each(|v| *v /= total);
        }
        self.push(value, Op::RowNormalize(a), "row_normalize")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        self.push(value, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn tile_rows(&mut self, a: Var, reps: usize) -> Result<Var> {
        let value = self.value(a).tile_rows(reps);
        self.push(value, Op::TileRows(a, reps), "tile_rows")
    }

    /// Multiplies row `r` by `weights[r]`.
    pub fn scale_rows(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let src = self.value(a);
        if weights.len() != src.rows() {
            return Err(Error::shape("scale_rows", src.shape(), (weights.len(), 1)));
        }
        let mut value = src.clone();
        for (r, w) in weights.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v *= w);
        }
        self.push(value, Op::ScaleRows(a, weights), "scale_rows")
    }

    /// Squared Euclidean distance between every row of `a` and every row of `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.cols() != mb.cols() {
            return Err(Error::shape("sq_dist", ma.shape(), mb.shape()));
        }
        let value = Matrix::from_fn(ma.rows(), mb.rows(), |i, j| {
            ma.row(i)
                .iter()
                .zip(mb.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        });
        self.push(value, Op::SqDist(a, b), "sq_dist")
    }

    /// Elementwise `(1 + x / dof)^exponent` for `x >= 0`.
    pub fn student_t(&mut self, a: Var, dof: f64, exponent: f64) -> Result<Var> {
        let value = self.value(a).map(|x| libm::pow(1.0 + x / dof, exponent));
        self.push(
            value,
            Op::StudentT {
                input: a,
                dof,
                exponent,
            },
            "student_t",
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.nodes.push(Node {
            needs_grad: self.needs(a),
            value,
            op: Op::Sum(a),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `KL(target ‖ input) = Σ p ln(p / q)` with `target` held constant.
    pub fn kl_div(&mut self, target: &Matrix, input: Var) -> Result<Var> {
        let q = self.value(input);
        if q.shape() != target.shape() {
            return Err(Error::shape("kl_div", target.shape(), q.shape()));
        }
        let value = Matrix::scalar(kl_divergence(target, q));
        self.push(
            value,
            Op::KlDiv {
                target: target.clone(),
                input,
            },
            "kl_div",
        )
    }

    /// Sign pattern of every `abs` input on the tape (`0` marks an exact kink).
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Abs(a) = node.op {
                sig.extend(self.value(a).data().iter().map(|&x| {
                    if x > 0.0 {
                        1
                    } else if x < 0.0 {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        sig
    }

    /// Fills every gradient slot of `params` with `∂loss/∂param`.
    ///
    /// Slots of parameters that do not reach `loss` are left at zero.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let root = self.value(loss);
        if root.shape() != (1, 1) {
            return Err(Error::NotScalar(root.rows(), root.cols()));
        }
        root.ensure_finite("backward")?;
        params.zero_grads();
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => {
                    if params.entries.len() <= *p || params.entries[*p].value.shape() != g.shape() {
                        return Err(Error::Contract(
                            "tape parameters do not belong to this ParamSet".to_string(),
                        ));
                    }
                    params.entries[*p].grad.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.scale(-1.0));
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.scale(*c)),
                Op::AddRowBias(a, b) => {
                    if self.needs(*b) {
                        let gb = Matrix::new(1, g.cols(), g.col_sums())?;
                        accumulate(&mut adj, *b, gb);
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, "tanh'", |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), "abs'", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), "square'", |g, x| 2.0 * x * g)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                        for (o, &yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o = yv * (*o - inner);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::RowNormalize(a) => {
                    let y = &node.value;
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let total: f64 = x.row(r).iter().sum();
                        let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                        for o in ga.row_mut(r) {
                            *o = (*o - inner) / total;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).cols();
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.slice_cols(0, split));
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.slice_cols(split, g.cols()));
                    }
                }
                Op::TileRows(a, reps) => {
                    let src = self.value(*a);
                    let block = src.len();
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..*reps {
                        for (o, v) in ga
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[r * block..(r + 1) * block])
                        {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::ScaleRows(a, w) => {
                    let mut ga = g;
                    for (r, w) in w.iter().enumerate() {
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= w);
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SqDist(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(ma.rows(), ma.cols());
                    let mut gb = Matrix::zeros(mb.rows(), mb.cols());
                    for i in 0..ma.rows() {
                        for j in 0..mb.rows() {
                            let w = 2.0 * g[(i, j)];
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..ma.cols() {
                                let d = w * (ma[(i, c)] - mb[(j, c)]);
                                ga[(i, c)] += d;
                                gb[(j, c)] -= d;
                            }
                        }
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::StudentT {
                    input,
                    dof,
                    exponent,
                } => {
                    let x = self.value(*input);
                    let mut ga = g;
                    for ((o, &xv), &yv) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .zip(node.value.data())
                    {
                        *o *= exponent / dof * yv / (1.0 + xv / dof);
                    }
                    accumulate(&mut adj, *input, ga);
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let ga = Matrix::filled(src.rows(), src.cols(), g[(0, 0)]);
                    accumulate(&mut adj, *a, ga);
                }
                Op::KlDiv { target, input } => {
                    let scale = g[(0, 0)];
                    let ga = target.zip_map(self.value(*input), "kl'", |p, q| {
                        if q > PROB_FLOOR {
                            -scale * p / q
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut adj, *input, ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], var: Var, grad: Matrix) {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}

/// `Σ p ln(p / q)` with both probabilities clamped below at [`PROB_FLOOR`].
///
/// Shapes must already agree.
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> f64 {
    p.data()
        .iter()
        .zip(q.data())
        .map(|(&p, &q)| {
            if p <= 0.0 {
                0.0
            } else {
                p * (libm::log(p.max(PROB_FLOOR)) - libm::log(q.max(PROB_FLOOR)))
            }
        })
        .sum()
}

/// Worst entry seen by [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    /// Entries whose central difference straddles an `abs` kink.
    pub excluded: usize,
    pub failures: usize,
    pub worst: Option<FdEntry>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares backward gradients against central differences for every
/// parameter entry.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// An entry is excluded when the `+step` and `-step` evaluations see
/// different `abs` sign patterns. Failures are reported, not returned as
/// errors; `Err` only signals that the loss could not be built.
pub fn finite_difference_check<F>(
    build: F,
    params: &ParamSet,
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(
            "finite-difference step must be positive".to_string(),
        ));
    }
    let mut work = params.clone();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let analytic: Vec<Matrix> = (0..work.len()).map(|i| work.grad_at(i).clone()).collect();

    let eval = |set: &ParamSet| -> Result<(f64, Vec<i8>)> {
        let mut t = Tape::new();
        let l = build(&mut t, set)?;
        Ok((t.scalar(l)?, t.kink_signature()))
    };

    let mut report = FdReport {
        checked: 0,
        excluded: 0,
        failures: 0,
        worst: None,
    };
    for p in 0..work.len() {
        for e in 0..work.value_at(p).len() {
            let original = work.value_at(p).data()[e];
            work.value_at_mut(p).data_mut()[e] = original + step;
            let (plus, sig_plus) = eval(&work)?;
            work.value_at_mut(p).data_mut()[e] = original - step;
            let (minus, sig_minus) = eval(&work)?;
            work.value_at_mut(p).data_mut()[e] = original;

            if sig_plus != sig_minus {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].data()[e];
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-8);
            let rel_error = libm::fabs(a - numeric) / denom;
            report.checked += 1;
            if rel_error > tolerance {
                report.failures += 1;
            }
            if report
                .worst
                .as_ref()
                .is_none_or(|w| rel_error > w.rel_error)
            {
                report.worst = Some(FdEntry {
                    param: work.entries[p].name.clone(),
                    index: e,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(name: &str, m: Matrix) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, m).unwrap();
        p
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_chain_forward() {
        let mut tape = Tape::new();
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let v = tape.constant(m.clone()).unwrap();
        assert_eq!(tape.value(v), &m);

        let s = tape.constant(Matrix::zeros(1, 2)).unwrap();
        let s = tape.row_softmax(s).unwrap();
        assert_eq!(tape.value(s), &Matrix::from_rows(&[[0.5, 0.5]]));

        let x = tape.constant(Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        let w = tape.constant(Matrix::from_rows(&[[0.5], [2.0]])).unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.tanh(h).unwrap();
        assert!((tape.value(h)[(0, 0)] - 0.4621171572600098).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3)).unwrap();
        let b = tape.constant(Matrix::zeros(2, 3)).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        assert_eq!(
            tape.constant(Matrix::scalar(f64::NAN)),
            Err(Error::NonFinite("constant"))
        );
    }

    #[test]
    fn gradient_of_square() {
        let mut params = single("p", Matrix::scalar(3.0));
        let mut tape = Tape::new();
        let p = tape.param(&params, "p").unwrap();
        let sq = tape.square(p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("p").unwrap(), &Matrix::scalar(6.0));
    }

    #[test]
    fn gradient_of_mean_abs_error() {
        let mut params = single("p", Matrix::scalar(2.0));
        let mut tape = Tape::new();
        let p = tape.param(&params, "p").unwrap();
        let y = tape.constant(Matrix::scalar(5.0)).unwrap();
        let d = tape.sub(p, y).unwrap();
        let d = tape.abs(d).unwrap();
        let loss = tape.mean(d).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("p").unwrap(), &Matrix::scalar(-1.0));
    }

    #[test]
    fn abs_subgradient_is_zero_at_kink() {
        let mut params = single("p", Matrix::scalar(5.0));
        let mut tape = Tape::new();
        let p = tape.param(&params, "p").unwrap();
        let y = tape.constant(Matrix::scalar(5.0)).unwrap();
        let d = tape.sub(p, y).unwrap();
        let d = tape.abs(d).unwrap();
        let loss = tape.sum(d);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("p").unwrap(), &Matrix::scalar(0.0));
    }

    #[test]
    fn gradient_of_softmax_kl() {
        let mut params = single("p", Matrix::zeros(1, 2));
        let target = Matrix::from_rows(&[[1.0, 0.0]]);
        let mut tape = Tape::new();
        let p = tape.param(&params, "p").unwrap();
        let q = tape.row_softmax(p).unwrap();
        let loss = tape.kl_div(&target, q).unwrap();
        assert!((tape.scalar(loss).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        tape.backward(loss, &mut params).unwrap();
        let g = params.grad("p").unwrap();
        assert!((g[(0, 0)] + 0.5).abs() < 1e-12);
        assert!((g[(0, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut params = ParamSet::new();
        params.insert("used", Matrix::scalar(1.5)).unwrap();
        params.insert("unused", Matrix::filled(2, 2, 7.0)).unwrap();
        let mut tape = Tape::new();
        let _ = tape.param(&params, "unused").unwrap();
        let u = tape.param(&params, "used").unwrap();
        let loss = tape.sum(u);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("unused").unwrap(), &Matrix::zeros(2, 2));
        assert_eq!(params.grad("used").unwrap(), &Matrix::scalar(1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut params = single("p", Matrix::zeros(2, 1));
        let mut tape = Tape::new();
        let p = tape.param(&params, "p").unwrap();
        assert_eq!(tape.backward(p, &mut params), Err(Error::NotScalar(2, 1)));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut params = single("w", Matrix::zeros(1, 1));
        assert!(params.insert("w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn fd_check_passes_on_quadratic() {
        let params = single("p", Matrix::from_rows(&[[0.3, -0.7], [1.1, 2.0]]));
        let report = finite_difference_check(
            |tape, ps| {
                let p = tape.param(ps, "p")?;
                let sq = tape.square(p)?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn fd_check_excludes_kinks() {
        let params = single("p", Matrix::from_rows(&[[5.0, 1.0]]));
        let report = finite_difference_check(
            |tape, ps| {
                let p = tape.param(ps, "p")?;
                let y = tape.constant(Matrix::from_rows(&[[5.0, 0.0]]))?;
                let d = tape.sub(p, y)?;
                let d = tape.abs(d)?;
                Ok(tape.sum(d))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn fd_check_reports_wrong_gradient() {
        // A loss builder that reads a different parameter set than the one
        // being perturbed yields zero analytic gradient for a live input.
        let params = single("p", Matrix::scalar(1.0));
        let report = finite_difference_check(
            |tape, ps| {
                let p = ps.require("p")?.clone();
                let c = tape.constant(p)?;
                let sq = tape.square(c)?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst.unwrap().param, "p");
    }

    #[test]
    fn every_operation_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        params.insert("a", random(&mut rng, 4, 3)).unwrap();
        params.insert("w", random(&mut rng, 3, 2)).unwrap();
        params.insert("b", random(&mut rng, 1, 2)).unwrap();
        params.insert("c", random(&mut rng, 2, 3)).unwrap();
        params.insert("e", random(&mut rng, 2, 1)).unwrap();
        let target = Matrix::from_rows(&[[0.7, 0.3], [0.2, 0.8], [0.5, 0.5], [0.9, 0.1]]);
        let report = finite_difference_check(
            |t, ps| {
                let a = t.param(ps, "a")?;
                let w = t.param(ps, "w")?;
                let b = t.param(ps, "b")?;
                let c = t.param(ps, "c")?;
                let e = t.param(ps, "e")?;
                let h = t.matmul(a, w)?;
                let h = t.add_row_bias(h, b)?;
                let h = t.tanh(h)?;
                let s = t.row_softmax(h)?;
                let kl = t.kl_div(&target, s)?;
                let d = t.sq_dist(a, c)?;
                let k = t.student_t(d, 1.0, -2.0)?;
                let q = t.row_normalize(k)?;
                let kl2 = t.kl_div(&target, q)?;
                let tiled = t.tile_rows(e, 2)?;
                let cat = t.concat_cols(h, tiled)?;
                let cat = t.scale_rows(cat, vec![1.0, 0.5, 2.0, 0.25])?;
                let sq = t.square(cat)?;
                let sq = t.mean(sq)?;
                let diff = t.sub(kl, kl2)?;
                let diff = t.scale(diff, 0.3)?;
                let total = t.add(diff, sq)?;
                let ad = t.abs(total)?;
                Ok(t.sum(ad))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, params.param_count());
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = single("w", random(&mut rng, 5, 4));
        let run = || {
            let mut ps = base.clone();
            let mut t = Tape::new();
            let w = t.param(&ps, "w").unwrap();
            let h = t.tanh(w).unwrap();
            let s = t.row_softmax(h).unwrap();
            let l = t.square(s).unwrap();
            let l = t.sum(l);
            t.backward(l, &mut ps).unwrap();
            (
                t.scalar(l).unwrap().to_bits(),
                ps.grad("w").unwrap().clone(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let m = Matrix::new(3, 4, vals).unwrap();
            let s = m.row_softmax();
            for r in 0..3 {
                let total: f64 = s.row(r).iter().sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-9);
                for &v in s.row(r) {
                    proptest::prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn composed_losses_match_finite_differences(seed in 0u64..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = single("w", random(&mut rng, 3, 3));
            let x = random(&mut rng, 4, 3);
            let y = random(&mut rng, 4, 3);
            let report = finite_difference_check(
                |t, ps| {
                    let w = t.param(ps, "w")?;
                    let x = t.constant(x.clone())?;
                    let h = t.matmul(x, w)?;
                    let h = t.tanh(h)?;
                    let y = t.constant(y.clone())?;
                    let d = t.sub(h, y)?;
                    let d = t.abs(d)?;
                    t.mean(d)
                },
                &params,
                1e-5,
                1e-4,
            ).unwrap();
            proptest::prop_assert!(report.passed(), "{:?}", report);
        }
    }
}
