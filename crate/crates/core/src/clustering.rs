//! Soft node-to-sub-graph assignment.
//!
//! An autoencoder compresses the teacher embeddings `E` down to `K`
//! dimensions. A parallel graph-convolution tower propagates over the
//! normalized adjacency, mixing each autoencoder layer into the next
//! convolution input, and ends in a softmax classification layer giving
//! the memberships `Z`. A Student-t kernel between the encoder output and
//! `K` centers gives `Q`; the sharpened target `P` supervises both `Q` and
//! `Z` through KL divergences.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kl_divergence, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{LossTerm, ScalarLoss};
use crate::matrix::Matrix;

pub const CENTERS_PARAM: &str = "centers";
pub const CLASSIFIER_PARAM: &str = "cls.w";

/// Exponent of the Student-t kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExponentMode {
    /// `-(v + 1) / v`
    #[default]
    AsPrinted,
    /// `-(v + 1) / 2`, the usual deep-embedded-clustering kernel.
    DecStandard,
}

impl ExponentMode {
    pub fn exponent(self, dof: f64) -> f64 {
        match self {
            ExponentMode::AsPrinted => -(dof + 1.0) / dof,
            ExponentMode::DecStandard => -(dof + 1.0) / 2.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExponentMode::AsPrinted => "as_printed",
            ExponentMode::DecStandard => "dec_standard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "as_printed" => Ok(ExponentMode::AsPrinted),
            "dec_standard" => Ok(ExponentMode::DecStandard),
            other => Err(Error::Config(format!(
                "unknown t-kernel exponent `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringConfig {
    pub k: usize,
    pub embed_dim: usize,
    /// Encoder widths between `embed_dim` and `k`; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub dof: f64,
    pub exponent: ExponentMode,
    /// Weight of the autoencoder layer when mixing into the next graph layer.
    pub psi: f64,
}

impl ClusteringConfig {
    pub fn new(k: usize, embed_dim: usize) -> Self {
        Self {
            k,
            embed_dim,
            hidden: vec![32],
            dof: 1.0,
            exponent: ExponentMode::AsPrinted,
            psi: 0.5,
        }
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.embed_dim];
        w.extend_from_slice(&self.hidden);
        w.push(self.k);
        w
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config(
                "number of sub-graphs must be at least 1".into(),
            ));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        if !(self.dof > 0.0) {
            return Err(Error::Config(
                "t-kernel degrees of freedom must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Cluster centers `μ_j` in the encoder output space, plus the kernel settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCenters {
    pub mu: Matrix,
    pub dof: f64,
    pub exponent: ExponentMode,
}

/// Row-stochastic memberships from the three sources.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub z: Matrix,
    pub q: Matrix,
    pub p: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeOutput {
    /// `A^(1) .. A^(L)`; the last one is the `N x K` representation.
    pub layers: Vec<Matrix>,
    pub reconstruction: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnOutput {
    pub layers: Vec<Matrix>,
    pub z: Matrix,
}

/// Tape handles for one forward pass of the clustering network.
#[derive(Debug, Clone)]
pub struct ClusterVars {
    pub ae_layers: Vec<Var>,
    pub reconstruction: Var,
    pub gnn_layers: Vec<Var>,
    pub z: Var,
    pub q: Var,
}

/// Autoencoder, graph tower, classifier and centers in one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNet {
    config: ClusteringConfig,
    params: ParamSet,
}

fn enc_w(l: usize) -> String {
    format!("ae.enc{l}.w")
}
fn enc_b(l: usize) -> String {
    format!("ae.enc{l}.b")
}
fn dec_w(l: usize) -> String {
    format!("ae.dec{l}.w")
}
fn dec_b(l: usize) -> String {
    format!("ae.dec{l}.b")
}
fn gnn_w(l: usize) -> String {
    format!("gnn{l}.w")
}

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

impl ClusterNet {
    pub fn init<R: Rng>(config: ClusteringConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder_widths();
        let layers = enc.len() - 1;
        let mut params = ParamSet::new();
        for l in 0..layers {
            params.insert(enc_w(l), glorot(rng, enc[l], enc[l + 1]))?;
            params.insert(enc_b(l), Matrix::zeros(1, enc[l + 1]))?;
        }
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        for l in 0..layers {
            params.insert(dec_w(l), glorot(rng, dec[l], dec[l + 1]))?;
            params.insert(dec_b(l), Matrix::zeros(1, dec[l + 1]))?;
        }
        for l in 0..layers {
            params.insert(gnn_w(l), glorot(rng, enc[l], enc[l + 1]))?;
        }
        params.insert(CLASSIFIER_PARAM, glorot(rng, config.k, config.k))?;
        params.insert(CENTERS_PARAM, Matrix::zeros(config.k, config.k))?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ClusteringConfig, params: ParamSet) -> Result<Self> {
        let expected = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        crate::teacher::check_layout(&expected.params, &params)?;
        Ok(Self { params, ..expected })
    }

    pub fn config(&self) -> &ClusteringConfig {
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

    fn layers(&self) -> usize {
        self.config.hidden.len() + 1
    }

    pub fn centers(&self) -> ClusterCenters {
        ClusterCenters {
            mu: self.params.require(CENTERS_PARAM).expect("centers").clone(),
            dof: self.config.dof,
            exponent: self.config.exponent,
        }
    }

    pub fn set_centers(&mut self, mu: Matrix) -> Result<()> {
        let slot = self.params.get_mut(CENTERS_PARAM).expect("centers");
        if slot.shape() != mu.shape() {
            return Err(Error::shape("set_centers", slot.shape(), mu.shape()));
        }
        *slot = mu;
        Ok(())
    }

    pub fn ae_forward(&self, e: &Matrix) -> Result<AeOutput> {
        ae_forward(e, self)
    }

    pub fn gnn_forward(&self, e: &Matrix, ae_layers: &[Matrix], adj: &Matrix) -> Result<GnnOutput> {
        gnn_forward(e, ae_layers, adj, self)
    }

    /// All three memberships for frozen parameters and a given target `P`
    /// source: `P` is recomputed from the current `Q`.
    pub fn assignments(&self, e: &Matrix, adj: &Matrix) -> Result<AssignmentMatrix> {
        let ae = self.ae_forward(e)?;
        let gnn = self.gnn_forward(e, &ae.layers, adj)?;
        let q = soft_assignment_q(ae.layers.last().expect("encoder"), &self.centers())?;
        let p = target_distribution_p(&q)?;
        Ok(AssignmentMatrix { z: gnn.z, q, p })
    }

    /// Records autoencoder, graph tower and `Q` on a tape.
    pub fn build(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        e: &Matrix,
        adj: &Matrix,
    ) -> Result<ClusterVars> {
        let layers = self.layers();
        let e_var = tape.constant(e.clone())?;

        let mut ae_layers = Vec::with_capacity(layers);
        let mut h = e_var;
        for l in 0..layers {
            let w = tape.param(params, &enc_w(l))?;
            let b = tape.param(params, &enc_b(l))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row_bias(h, b)?;
            h = tape.tanh(h)?;
            ae_layers.push(h);
        }
        for l in 0..layers {
            let w = tape.param(params, &dec_w(l))?;
            let b = tape.param(params, &dec_b(l))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row_bias(h, b)?;
            if l + 1 < layers {
                h = tape.tanh(h)?;
            }
        }
        let reconstruction = h;

        let adj_var = tape.constant(adj.clone())?;
        let mut gnn_layers = Vec::with_capacity(layers);
        let mut mixed = e_var;
        for l in 0..layers {
            if l > 0 {
                let z = tape.scale(gnn_layers[l - 1], 1.0 - self.config.psi)?;
                let a = tape.scale(ae_layers[l - 1], self.config.psi)?;
                mixed = tape.add(z, a)?;
            }
            let w = tape.param(params, &gnn_w(l))?;
            let prop = tape.matmul(adj_var, mixed)?;
            let prop = tape.matmul(prop, w)?;
            gnn_layers.push(tape.tanh(prop)?);
        }
        let cls = tape.param(params, CLASSIFIER_PARAM)?;
        let logits = tape.matmul(adj_var, gnn_layers[layers - 1])?;
        let logits = tape.matmul(logits, cls)?;
        let z = tape.row_softmax(logits)?;

        let mu = tape.param(params, CENTERS_PARAM)?;
        let d = tape.sq_dist(ae_layers[layers - 1], mu)?;
        let w = tape.student_t(
            d,
            self.config.dof,
            self.config.exponent.exponent(self.config.dof),
        )?;
        let q = tape.row_normalize(w)?;

        Ok(ClusterVars {
            ae_layers,
            reconstruction,
            gnn_layers,
            z,
            q,
        })
    }
}

pub fn ae_forward(e: &Matrix, net: &ClusterNet) -> Result<AeOutput> {
    if e.cols() != net.config.embed_dim {
        return Err(Error::shape(
            "ae_forward",
            e.shape(),
            (e.rows(), net.config.embed_dim),
        ));
    }
    let layers = net.layers();
    let p = &net.params;
    let mut out = Vec::with_capacity(layers);
    let mut h = e.clone();
    for l in 0..layers {
        h = h
            .matmul(p.require(&enc_w(l))?)?
            .add_row_bias(p.require(&enc_b(l))?)?
            .map(libm::tanh);
        out.push(h.clone());
    }
    for l in 0..layers {
        h = h
            .matmul(p.require(&dec_w(l))?)?
            .add_row_bias(p.require(&dec_b(l))?)?;
        if l + 1 < layers {
            h = h.map(libm::tanh);
        }
    }
    Ok(AeOutput {
        layers: out,
        reconstruction: h,
    })
}

pub fn gnn_forward(
    e: &Matrix,
    ae_layers: &[Matrix],
    adj: &Matrix,
    net: &ClusterNet,
) -> Result<GnnOutput> {
    let layers = net.layers();
    if ae_layers.len() != layers {
        return Err(Error::shape(
            "gnn_forward",
            (ae_layers.len(), 1),
            (layers, 1),
        ));
    }
    if adj.rows() != e.rows() || adj.cols() != e.rows() {
        return Err(Error::shape(
            "gnn_forward",
            adj.shape(),
            (e.rows(), e.rows()),
        ));
    }
    let psi = net.config.psi;
    let mut out: Vec<Matrix> = Vec::with_capacity(layers);
    for l in 0..layers {
        let mixed = if l == 0 {
            e.clone()
        } else {
            out[l - 1]
                .scale(1.0 - psi)
                .add(&ae_layers[l - 1].scale(psi))?
        };
        let z = adj
            .matmul(&mixed)?
            .matmul(net.params.require(&gnn_w(l))?)?
            .map(libm::tanh);
        out.push(z);
    }
    let z = adj
        .matmul(&out[layers - 1])?
        .matmul(net.params.require(CLASSIFIER_PARAM)?)?
        .row_softmax();
    Ok(GnnOutput { layers: out, z })
}

/// Mean over nodes of the squared Euclidean reconstruction error.
pub fn reconstruction_loss(e: &Matrix, e_hat: &Matrix) -> Result<ScalarLoss> {
    let d = e.sub(e_hat)?;
    let total: f64 = d.data().iter().map(|v| v * v).sum();
    Ok(ScalarLoss::new(
        LossTerm::Reconstruction,
        total / e.rows().max(1) as f64,
    ))
}

/// Tape version of [`reconstruction_loss`].
pub fn reconstruction_loss_tape(tape: &mut Tape, e: &Matrix, e_hat: Var) -> Result<Var> {
    let target = tape.constant(e.clone())?;
    let d = tape.sub(e_hat, target)?;
    let sq = tape.square(d)?;
    let total = tape.sum(sq);
    tape.scale(total, 1.0 / e.rows().max(1) as f64)
}

/// Student-t similarity between representation rows and centers,
/// normalized per row.
pub fn soft_assignment_q(a_l: &Matrix, centers: &ClusterCenters) -> Result<Matrix> {
    let mu = &centers.mu;
    if mu.rows() == 0 {
        return Err(Error::Config(
            "at least one cluster center is required".into(),
        ));
    }
    if a_l.cols() != mu.cols() {
        return Err(Error::shape("soft_assignment_q", a_l.shape(), mu.shape()));
    }
    let e = centers.exponent.exponent(centers.dof);
    let mut q = Matrix::from_fn(a_l.rows(), mu.rows(), |i, j| {
        let d: f64 = a_l
            .row(i)
            .iter()
            .zip(mu.row(j))
            .map(|(a, m)| (a - m) * (a - m))
            .sum();
        libm::pow(1.0 + d / centers.dof, e)
    });
    for r in 0..q.rows() {
        let total: f64 = q.row(r).iter().sum();
        q.row_mut(r).iter_mut().for_each(|v| *v /= total);
    }
    q.ensure_finite("soft_assignment_q")?;
    Ok(q)
}

/// `p_ij ∝ q_ij² / f_j` with soft frequencies `f_j = Σ_i q_ij`.
pub fn target_distribution_p(q: &Matrix) -> Result<Matrix> {
    let freq = q.col_sums();
    if let Some(j) = freq.iter().position(|f| !(*f > 0.0)) {
        return Err(Error::DegenerateCluster(j));
    }
    let mut p = Matrix::from_fn(q.rows(), q.cols(), |i, j| q[(i, j)] * q[(i, j)] / freq[j]);
    for r in 0..p.rows() {
        // Scaling by the row maximum first keeps tied rows exactly uniform.
        let max = p.row(r).iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            p.row_mut(r).iter_mut().for_each(|v| *v /= max);
            let total: f64 = p.row(r).iter().sum();
            p.row_mut(r).iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(p)
}

/// `(KL(P‖Q), KL(P‖Z))` with natural logarithms.
pub fn clustering_losses(p: &Matrix, q: &Matrix, z: &Matrix) -> Result<(ScalarLoss, ScalarLoss)> {
    if p.shape() != q.shape() {
        return Err(Error::shape("clustering_losses", p.shape(), q.shape()));
    }
    if p.shape() != z.shape() {
        return Err(Error::shape("clustering_losses", p.shape(), z.shape()));
    }
    Ok((
        ScalarLoss::new(LossTerm::Clustering, kl_divergence(p, q)),
        ScalarLoss::new(LossTerm::Gnn, kl_divergence(p, z)),
    ))
}

/// `L_ae + α·KL(P‖Q) + β·KL(P‖Z)` with `P` held constant.
pub fn joint_loss_tape(
    tape: &mut Tape,
    vars: &ClusterVars,
    e: &Matrix,
    p: &Matrix,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let ae = reconstruction_loss_tape(tape, e, vars.reconstruction)?;
    let clu = tape.kl_div(p, vars.q)?;
    let clu = tape.scale(clu, alpha)?;
    let gnn = tape.kl_div(p, vars.z)?;
    let gnn = tape.scale(gnn, beta)?;
    let s = tape.add(ae, clu)?;
    tape.add(s, gnn)
}

const KMEANS_MAX_ITER: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from k-means++ seeding.
///
/// Stops after 300 iterations or once no center moves by more than `1e-6`.
/// A cluster that loses all its points is moved to the point farthest from
/// its assigned center. Returns `k x width` centers.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= number of points (k = {k}, points = {n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            WeightedIndex::new(&nearest)
                .map_err(|e| Error::Domain(format!("k-means++ weights: {e}")))?
                .sample(&mut rng)
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centers = points.select_rows(&chosen);
    let mut labels = vec![0usize; n];

    for _ in 0..KMEANS_MAX_ITER {
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for j in 0..k {
                let d = sq_dist(points.row(i), centers.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            *label = best.1;
        }
        let mut next = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &j) in labels.iter().enumerate() {
            counts[j] += 1;
            for (c, v) in next.row_mut(j).iter_mut().zip(points.row(i)) {
                *c += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                next.row_mut(j).iter_mut().for_each(|v| *v *= inv);
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centers.row(labels[a]));
                        let db = sq_dist(points.row(b), centers.row(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                next.row_mut(j).copy_from_slice(points.row(far));
            }
        }
        let shift = (0..k)
            .map(|j| libm::sqrt(sq_dist(next.row(j), centers.row(j))))
            .fold(0.0, f64::max);
        centers = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(centers)
}

/// Cluster centers for the t-kernel from k-means on the pre-trained
/// encoder output.
pub fn init_centers_kmeans(
    a_l: &Matrix,
    k: usize,
    seed: u64,
    dof: f64,
    exponent: ExponentMode,
) -> Result<ClusterCenters> {
    if !(dof > 0.0) {
        return Err(Error::Config(
            "t-kernel degrees of freedom must be positive".into(),
        ));
    }
    Ok(ClusterCenters {
        mu: kmeans(a_l, k, seed)?,
        dof,
        exponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::graph::normalize_adjacency;

    fn centers(mu: Matrix, exponent: ExponentMode) -> ClusterCenters {
        ClusterCenters {
            mu,
            dof: 1.0,
            exponent,
        }
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.max_abs_diff(b).unwrap() < tol
    }

    #[test]
    fn zero_embeddings_propagate_zero() {
        let mut net = ClusterNet::init(
            ClusteringConfig::new(3, 4),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        for i in 0..net.params().len() {
            net.params_mut()
                .value_at_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let out = net.ae_forward(&Matrix::zeros(5, 4)).unwrap();
        for a in &out.layers {
            assert!(a.data().iter().all(|v| *v == 0.0));
        }
        assert_eq!(out.reconstruction, Matrix::zeros(5, 4));
    }

    #[test]
    fn single_layer_hand_evaluation() {
        let mut cfg = ClusteringConfig::new(1, 1);
        cfg.hidden.clear();
        let mut net = ClusterNet::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        *net.params_mut().get_mut("ae.enc0.w").unwrap() = Matrix::scalar(1.0);
        *net.params_mut().get_mut("ae.enc0.b").unwrap() = Matrix::scalar(0.5);
        let out = net.ae_forward(&Matrix::scalar(0.0)).unwrap();
        assert!((out.layers[0][(0, 0)] - libm::tanh(0.5)).abs() < 1e-15);
        assert!((out.layers[0][(0, 0)] - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn reconstruction_loss_hand_cases() {
        let e = Matrix::from_rows(&[[1.0, 2.0]]);
        assert_eq!(reconstruction_loss(&e, &e).unwrap().value, 0.0);
        assert_eq!(
            reconstruction_loss(&e, &Matrix::zeros(1, 2)).unwrap().value,
            5.0
        );
        let e = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]);
        let eh = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(reconstruction_loss(&e, &eh).unwrap().value, 1.0);
        assert!(reconstruction_loss(&e, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn isolated_node_with_zero_weights_is_uniform() {
        let mut net = ClusterNet::init(
            ClusteringConfig::new(4, 3),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        for i in 0..net.params().len() {
            net.params_mut()
                .value_at_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let e = Matrix::from_rows(&[[0.3, -0.2, 0.9]]);
        let ae = net.ae_forward(&e).unwrap();
        let g = net
            .gnn_forward(&e, &ae.layers, &Matrix::identity(1))
            .unwrap();
        assert!(close(&g.z, &Matrix::filled(1, 4, 0.25), 1e-15));
    }

    #[test]
    fn two_node_complete_graph_hand_chain() {
        let mut cfg = ClusteringConfig::new(2, 1);
        cfg.hidden.clear();
        let mut net = ClusterNet::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        *net.params_mut().get_mut("gnn0.w").unwrap() = Matrix::from_rows(&[[1.0, -1.0]]);
        *net.params_mut().get_mut(CLASSIFIER_PARAM).unwrap() =
            Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]);
        let adj = normalize_adjacency(&Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        let e = Matrix::from_rows(&[[1.0], [3.0]]);
        let ae = net.ae_forward(&e).unwrap();
        let g = net.gnn_forward(&e, &ae.layers, &adj).unwrap();
        // adj·E = [[2],[2]]; Z1 = tanh([2, -2]) per row; adj·Z1 = Z1.
        let t = libm::tanh(2.0);
        let logits = [2.0 * t, -t];
        let m = logits[0].max(logits[1]);
        let (a, b) = (libm::exp(logits[0] - m), libm::exp(logits[1] - m));
        let want = Matrix::from_rows(&[[a / (a + b), b / (a + b)], [a / (a + b), b / (a + b)]]);
        assert!(close(&g.z, &want, 1e-12));
    }

    #[test]
    fn q_hand_cases() {
        let a = Matrix::from_rows(&[[0.0, 0.0]]);
        let sym = centers(
            Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]),
            ExponentMode::AsPrinted,
        );
        assert!(close(
            &soft_assignment_q(&a, &sym).unwrap(),
            &Matrix::from_rows(&[[0.5, 0.5]]),
            1e-15
        ));

        let mu = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        let q = soft_assignment_q(&a, &centers(mu.clone(), ExponentMode::AsPrinted)).unwrap();
        assert!(close(&q, &Matrix::from_rows(&[[0.8, 0.2]]), 1e-12));
        let q = soft_assignment_q(&a, &centers(mu, ExponentMode::DecStandard)).unwrap();
        assert!(close(
            &q,
            &Matrix::from_rows(&[[2.0 / 3.0, 1.0 / 3.0]]),
            1e-12
        ));

        let empty = centers(Matrix::zeros(0, 2), ExponentMode::AsPrinted);
        assert!(matches!(
            soft_assignment_q(&a, &empty),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn p_hand_cases() {
        let u = Matrix::filled(2, 2, 0.5);
        assert_eq!(target_distribution_p(&u).unwrap(), u);
        let one = Matrix::from_rows(&[[0.8, 0.2]]);
        assert!(close(&target_distribution_p(&one).unwrap(), &one, 1e-12));

        let q = Matrix::from_rows(&[[0.9, 0.1], [0.5, 0.5]]);
        // f = (1.4, 0.6); row 0 ∝ (0.81/1.4, 0.01/0.6), row 1 ∝ (0.25/1.4, 0.25/0.6)
        let r0 = [0.81 / 1.4, 0.01 / 0.6];
        let r1 = [0.25 / 1.4, 0.25 / 0.6];
        let want = Matrix::from_rows(&[
            [r0[0] / (r0[0] + r0[1]), r0[1] / (r0[0] + r0[1])],
            [r1[0] / (r1[0] + r1[1]), r1[1] / (r1[0] + r1[1])],
        ]);
        let p = target_distribution_p(&q).unwrap();
        assert!(close(&p, &want, 1e-12));
        assert!((p[(0, 0)] - 0.972).abs() < 1e-3 && (p[(1, 1)] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn uniform_q_maps_to_itself_exactly() {
        for k in 1..=7 {
            for n in [1, 3, 11] {
                let q = Matrix::filled(n, k, 1.0 / k as f64);
                assert_eq!(target_distribution_p(&q).unwrap(), q, "k {k} n {n}");
            }
        }
    }

    #[test]
    fn degenerate_cluster_is_reported() {
        let q = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(target_distribution_p(&q), Err(Error::DegenerateCluster(1)));
    }

    #[test]
    fn kl_hand_cases() {
        let p = Matrix::from_rows(&[[1.0, 0.0]]);
        let q = Matrix::from_rows(&[[0.5, 0.5]]);
        let (clu, _) = clustering_losses(&p, &q, &q).unwrap();
        assert!((clu.value - core::f64::consts::LN_2).abs() < 1e-12);

        let p = Matrix::from_rows(&[[0.8, 0.2]]);
        let (_, gnn) = clustering_losses(&p, &p, &q).unwrap();
        let want = 0.8 * libm::log(1.6) + 0.2 * libm::log(0.4);
        assert!((gnn.value - want).abs() < 1e-12);
        assert!((gnn.value - 0.1927).abs() < 1e-4);

        let (a, b) = clustering_losses(&p, &p, &p).unwrap();
        assert_eq!((a.value, b.value), (0.0, 0.0));
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let pts = Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]]);
        let c = kmeans(&pts, 1, 0).unwrap();
        assert!(close(&c, &Matrix::from_rows(&[[2.0, 1.0]]), 1e-12));
        assert!(kmeans(&pts, 4, 0).is_err());
    }

    #[test]
    fn kmeans_identical_rows_collapse() {
        let pts = Matrix::filled(6, 3, 0.25);
        let c = kmeans(&pts, 3, 9).unwrap();
        assert_eq!(c, Matrix::filled(3, 3, 0.25));
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let radius = 0.5;
        let means = [[0.0, 0.0], [10.0 * radius * 2.0, 0.0]];
        let mut rows = Vec::new();
        let mut truth = [[0.0f64; 2]; 2];
        for (b, m) in means.iter().enumerate() {
            for _ in 0..40 {
                let ang = rng.random_range(0.0..core::f64::consts::TAU);
                let r = radius * libm::sqrt(rng.random_range(0.0..1.0f64));
                let p = [m[0] + r * libm::cos(ang), m[1] + r * libm::sin(ang)];
                truth[b][0] += p[0] / 40.0;
                truth[b][1] += p[1] / 40.0;
                rows.push(p);
            }
        }
        let pts = Matrix::from_rows(&rows);
        for seed in 0..5 {
            let c = kmeans(&pts, 2, seed).unwrap();
            for t in &truth {
                let best = (0..2)
                    .map(|j| libm::sqrt(sq_dist(c.row(j), t)))
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 0.1 * radius, "seed {seed}: {best}");
            }
        }
    }

    fn toy(seed: u64) -> (ClusterNet, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ClusteringConfig::new(3, 4);
        cfg.hidden = vec![5];
        let mut net = ClusterNet::init(cfg, &mut rng).unwrap();
        for i in 0..net.params().len() {
            let v = net.params_mut().value_at_mut(i);
            v.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        let e = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let raw = Matrix::from_fn(
            6,
            6,
            |i, j| if i != j && (i + j) % 3 == 0 { 1.0 } else { 0.0 },
        );
        (net, e, normalize_adjacency(&raw))
    }

    #[test]
    fn tape_matches_plain_forward() {
        let (net, e, adj) = toy(4);
        let mut tape = Tape::new();
        let vars = net.build(&mut tape, net.params(), &e, &adj).unwrap();
        let ae = net.ae_forward(&e).unwrap();
        let g = net.gnn_forward(&e, &ae.layers, &adj).unwrap();
        assert!(close(
            tape.value(vars.reconstruction),
            &ae.reconstruction,
            1e-14
        ));
        assert!(close(tape.value(vars.z), &g.z, 1e-14));
        let q = soft_assignment_q(ae.layers.last().unwrap(), &net.centers()).unwrap();
        assert!(close(tape.value(vars.q), &q, 1e-14));
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        for seed in 0..3 {
            let (net, e, adj) = toy(seed);
            let p = net.assignments(&e, &adj).unwrap().p;
            let report = finite_difference_check(
                |tape, ps| {
                    let vars = net.build(tape, ps, &e, &adj)?;
                    joint_loss_tape(tape, &vars, &e, &p, 0.1, 0.1)
                },
                net.params(),
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn relabeling_clusters_preserves_losses() {
        let q = Matrix::from_rows(&[[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.2, 0.5, 0.3]]);
        let z = Matrix::from_rows(&[[0.5, 0.4, 0.1], [0.2, 0.2, 0.6], [0.1, 0.8, 0.1]]);
        let p = target_distribution_p(&q).unwrap();
        let perm = [2usize, 0, 1];
        let permute = |m: &Matrix| Matrix::from_fn(m.rows(), 3, |r, c| m[(r, perm[c])]);
        let (a, b) = clustering_losses(&p, &q, &z).unwrap();
        let pp = target_distribution_p(&permute(&q)).unwrap();
        assert!(close(&pp, &permute(&p), 1e-15));
        let (a2, b2) = clustering_losses(&pp, &permute(&q), &permute(&z)).unwrap();
        assert!((a.value - a2.value).abs() < 1e-15 && (b.value - b2.value).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn assignments_are_row_stochastic(seed in 0u64..200) {
            let (net, e, adj) = toy(seed);
            let asg = net.assignments(&e, &adj).unwrap();
            for m in [&asg.z, &asg.q, &asg.p] {
                for s in m.row_sums() {
                    proptest::prop_assert!((s - 1.0).abs() < 1e-6);
                }
                proptest::prop_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let (clu, gnn) = clustering_losses(&asg.p, &asg.q, &asg.z).unwrap();
            proptest::prop_assert!(clu.value >= 0.0 && gnn.value >= 0.0);
        }

        #[test]
        fn p_sharpens_q_when_frequencies_are_equal(a in 0.05f64..0.95) {
            // Two mirrored rows give equal column frequencies.
            let q = Matrix::from_rows(&[[a, 1.0 - a], [1.0 - a, a]]);
            let p = target_distribution_p(&q).unwrap();
            let entropy = |r: &[f64]| -r.iter().map(|v| if *v > 0.0 { v * libm::log(*v) } else { 0.0 }).sum::<f64>();
            for r in 0..2 {
                proptest::prop_assert!(entropy(p.row(r)) <= entropy(q.row(r)) + 1e-12);
            }
        }
    }
}
