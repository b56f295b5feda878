//! Forecast metrics, the averaging ensemble baseline, and parameter counts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::teacher::TeacherModel;

/// Entries with `|y|` at or below this are left out of MAPE.
pub const MAPE_MASK: f64 = 1e-3;

/// Horizon steps reported by default.
pub const REPORT_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonMetrics {
    pub step: usize,
    pub minutes: f64,
    pub mae: f64,
    /// `None` when every target is masked.
    pub mape: Option<f64>,
    pub rmse: f64,
}

impl HorizonMetrics {
    pub fn label(&self) -> String {
        format!("{}min", self.minutes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub horizons: Vec<HorizonMetrics>,
    pub params: usize,
    pub predict_seconds: Option<f64>,
}

/// Per-horizon MAE, RMSE and masked MAPE over aligned `N x H` matrices.
///
/// Horizon step `h` reads column `h - 1` of every matrix.
pub fn compute_metrics(
    y_true: &[Matrix],
    y_pred: &[Matrix],
    horizon_steps: &[usize],
    interval_minutes: f64,
) -> Result<Vec<HorizonMetrics>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(
            "compute_metrics",
            (y_true.len(), 0),
            (y_pred.len(), 0),
        ));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (t, p) in y_true.iter().zip(y_pred) {
        if t.shape() != p.shape() {
            return Err(Error::shape("compute_metrics", t.shape(), p.shape()));
        }
    }
    let width = y_true[0].cols();
    let mut out = Vec::with_capacity(horizon_steps.len());
    for &step in horizon_steps {
        if step == 0 || step > width {
            return Err(Error::Config(format!(
                "horizon step {step} outside [1, {width}]"
            )));
        }
        let c = step - 1;
        let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
        let (mut pct, mut pct_count) = (0.0, 0usize);
        for (t, p) in y_true.iter().zip(y_pred) {
            for r in 0..t.rows() {
                let (y, yh) = (t[(r, c)], p[(r, c)]);
                let e = libm::fabs(y - yh);
                abs += e;
                sq += e * e;
                count += 1;
                if libm::fabs(y) > MAPE_MASK {
                    pct += e / libm::fabs(y);
                    pct_count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        out.push(HorizonMetrics {
            step,
            minutes: step as f64 * interval_minutes,
            mae: abs / count as f64,
            mape: (pct_count > 0).then(|| 100.0 * pct / pct_count as f64),
            rmse: libm::sqrt(sq / count as f64),
        });
    }
    Ok(out)
}

/// Unweighted mean of equally shaped predictions.
pub fn mean_predictions(preds: &[Matrix]) -> Result<Matrix> {
    let first = preds.first().ok_or(Error::EmptyDataset)?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for p in preds {
        if p.shape() != first.shape() {
            return Err(Error::Contract(format!(
                "ensemble member shape {:?} differs from {:?}",
                p.shape(),
                first.shape()
            )));
        }
        acc.add_assign(p);
    }
    Ok(acc.scale(1.0 / preds.len() as f64))
}

/// `M >= 2` teacher-architecture models averaged at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<TeacherModel>,
}

impl EnsembleModel {
    pub fn new(members: Vec<TeacherModel>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let (config, n) = (*members[0].config(), members[0].n_nodes());
        if members
            .iter()
            .any(|m| *m.config() != config || m.n_nodes() != n)
        {
            return Err(Error::Contract(
                "ensemble members differ in architecture".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[TeacherModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.members.iter().map(TeacherModel::param_count).sum()
    }

    pub fn predict_stacked(&self, stacked: &Matrix) -> Result<Matrix> {
        let preds = self
            .members
            .iter()
            .map(|m| m.forward_stacked(stacked))
            .collect::<Result<Vec<_>>>()?;
        mean_predictions(&preds)
    }
}

pub fn ensemble_predict(models: &EnsembleModel, window: &Matrix) -> Result<Matrix> {
    models.predict_stacked(window)
}

/// Parameter counts of each KD-SGL component and of a teacher ensemble.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub teacher: usize,
    pub clustering: usize,
    pub students: Vec<usize>,
}

impl ParamCounts {
    pub fn kd_sgl_total(&self) -> usize {
        self.teacher + self.clustering + self.students.iter().sum::<usize>()
    }

    pub fn ensemble_total(&self, members: usize) -> usize {
        members * self.teacher
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "adjusted_rand_index",
            (a.len(), 1),
            (b.len(), 1),
        ));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = Matrix::zeros(ka, kb);
    for (&i, &j) in a.iter().zip(b) {
        table[(i, j)] += 1.0;
    }
    let pairs = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = table.data().iter().map(|&c| pairs(c)).sum();
    let rows: f64 = table.row_sums().iter().map(|&c| pairs(c)).sum();
    let cols: f64 = table.col_sums().iter().map(|&c| pairs(c)).sum();
    let expected = rows * cols / pairs(n as f64);
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::TeacherConfig;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Matrix {
        Matrix::column(v)
    }

    #[test]
    fn hand_cases() {
        let m = compute_metrics(&[col(&[2.0, 4.0])], &[col(&[3.0, 3.0])], &[1], 5.0).unwrap();
        assert!((m[0].mae - 1.0).abs() < 1e-12);
        assert!((m[0].rmse - 1.0).abs() < 1e-12);
        assert!((m[0].mape.unwrap() - 37.5).abs() < 1e-12);
        assert_eq!(m[0].label(), "5min");

        let y = Matrix::filled(3, 4, 10.0);
        let m = compute_metrics(&[y.clone()], &[y.map(|v| v + 1.0)], &[2, 4], 5.0).unwrap();
        for h in &m {
            assert!((h.mae - 1.0).abs() < 1e-12 && (h.rmse - 1.0).abs() < 1e-12);
            assert!((h.mape.unwrap() - 10.0).abs() < 1e-12);
        }
        assert_eq!(m[1].label(), "20min");

        let perfect = compute_metrics(&[y.clone()], &[y.clone()], &[1], 5.0).unwrap();
        assert_eq!(
            (perfect[0].mae, perfect[0].rmse, perfect[0].mape),
            (0.0, 0.0, Some(0.0))
        );
    }

    #[test]
    fn fully_masked_mape_is_not_available() {
        let m = compute_metrics(
            &[Matrix::zeros(2, 1)],
            &[Matrix::filled(2, 1, 1.0)],
            &[1],
            5.0,
        )
        .unwrap();
        assert_eq!(m[0].mape, None);
        assert_eq!(m[0].mae, 1.0);
    }

    #[test]
    fn out_of_range_horizon_is_rejected() {
        let y = Matrix::zeros(2, 3);
        assert!(compute_metrics(&[y.clone()], &[y.clone()], &[4], 5.0).is_err());
        assert!(compute_metrics(&[y.clone()], &[y], &[0], 5.0).is_err());
    }

    #[test]
    fn mean_of_two_and_four_is_three() {
        let m = mean_predictions(&[Matrix::filled(2, 2, 2.0), Matrix::filled(2, 2, 4.0)]).unwrap();
        assert_eq!(m, Matrix::filled(2, 2, 3.0));
        assert!(matches!(
            mean_predictions(&[Matrix::zeros(2, 2), Matrix::zeros(2, 3)]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ensemble_matches_column_mean_oracle() {
        let config = TeacherConfig {
            t_in: 3,
            horizon: 2,
            embed_dim: 2,
            hidden: 4,
        };
        let members: Vec<_> = (0..4)
            .map(|s| TeacherModel::init(3, config, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
            .collect();
        let window = Matrix::from_fn(3, 3, |r, c| r as f64 - 0.5 * c as f64);
        let ens = EnsembleModel::new(members.clone()).unwrap();
        let got = ensemble_predict(&ens, &window).unwrap();
        let outs: Vec<_> = members
            .iter()
            .map(|m| m.forward(&window).unwrap())
            .collect();
        for r in 0..3 {
            for c in 0..2 {
                let oracle = outs.iter().map(|o| o[(r, c)]).sum::<f64>() / 4.0;
                assert!((got[(r, c)] - oracle).abs() < 1e-12);
            }
        }
        let same = EnsembleModel::new(vec![members[0].clone(), members[0].clone()]).unwrap();
        assert!(
            same.predict_stacked(&window)
                .unwrap()
                .max_abs_diff(&outs[0])
                .unwrap()
                < 1e-15
        );
        assert!(EnsembleModel::new(vec![members[0].clone()]).is_err());
    }

    #[test]
    fn ari_cases() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        // Hand-computed contingency [[2,1],[0,1]] for the classic 4-item case.
        let ari = adjusted_rand_index(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        let (index, rows, cols, total) = (1.0, 3.0, 2.0, 6.0);
        let expected = rows * cols / total;
        let oracle = (index - expected) / (0.5 * (rows + cols) - expected);
        assert!((ari - oracle).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn rmse_dominates_mae_and_sample_order_is_irrelevant(
            vals in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..30),
        ) {
            let y: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let p: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let m = compute_metrics(&[col(&y)], &[col(&p)], &[1], 5.0).unwrap();
            proptest::prop_assert!(m[0].rmse + 1e-12 >= m[0].mae);
            proptest::prop_assert!(m[0].mae >= 0.0);
            let (mut yr, mut pr) = (y.clone(), p.clone());
            yr.reverse();
            pr.reverse();
            let r = compute_metrics(&[col(&yr)], &[col(&pr)], &[1], 5.0).unwrap();
            proptest::prop_assert!((r[0].mae - m[0].mae).abs() < 1e-9);
            proptest::prop_assert!((r[0].rmse - m[0].rmse).abs() < 1e-9);
        }

        #[test]
        fn ensemble_mse_is_at_most_mean_member_mse(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
            y in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let (a, b, y) = (col(&a), col(&b), col(&y));
            let mse = |p: &Matrix| p.sub(&y).unwrap().map(|d| d * d).mean();
            let ens = mean_predictions(&[a.clone(), b.clone()]).unwrap();
            proptest::prop_assert!(mse(&ens) <= 0.5 * (mse(&a) + mse(&b)) + 1e-12);
        }
    }
}
