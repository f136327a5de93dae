use nalgebra::{DMatrix, DVector};

use super::{check_theta, Accumulator, Capabilities, DataSet, Evaluation, ObjectiveModel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::resampling::BatchSelector;

/// Least squares: `Q(θ) = Σ w_i (y_i − x_i′θ)² / (2 Σ w_i)`.
#[derive(Clone, Debug)]
pub struct Ols {
    n: usize,
    d: usize,
    /// Row-major design.
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Ols {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        if n != y.len() {
            return Err(Error::Model(format!("design has {n} rows but response has {}", y.len())));
        }
        if d == 0 || n < d {
            return Err(Error::Model(format!("need at least d = {d} >= 1 observations, got {n}")));
        }
        let xtx = x.transpose() * x;
        let ev = linalg::sym_eigenvalues(&xtx);
        let top = ev.last().copied().unwrap_or(0.0);
        if ev[0] <= 1e-12 * top.max(f64::MIN_POSITIVE) {
            return Err(Error::Model(format!("design matrix is rank deficient (X'X spectrum {ev:?})")));
        }
        let mut rows = Vec::with_capacity(n * d);
        for i in 0..n {
            rows.extend(x.row(i).iter());
        }
        Ok(Self {
            n,
            d,
            x: rows,
            y: y.iter().copied().collect(),
        })
    }

    pub fn from_dataset(data: &DataSet, regressors: &[String], intercept: bool) -> Result<Self> {
        Self::new(&data.design(regressors, intercept)?, &data.response_column()?)
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.x)
    }

    pub fn response(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    /// Least-squares fit on a batch via the normal equations.
    pub fn fit_batch(&self, batch: &BatchSelector) -> Result<DVector<f64>> {
        let d = self.d;
        let mut xtx = DMatrix::zeros(d, d);
        let mut xty = DVector::zeros(d);
        batch.for_each(|i, w| {
            let r = self.row(i);
            for j in 0..d {
                xty[j] += w * r[j] * self.y[i];
                for k in j..d {
                    xtx[(j, k)] += w * r[j] * r[k];
                }
            }
        });
        for j in 0..d {
            for k in 0..j {
                xtx[(j, k)] = xtx[(k, j)];
            }
        }
        linalg::solve_symmetric(&xtx, &xty).ok_or_else(|| Error::Conditioning {
            spectrum: linalg::sym_eigenvalues(&xtx),
        })
    }

    pub fn fit(&self) -> Result<DVector<f64>> {
        self.fit_batch(&self.full_batch())
    }

    /// Homoskedastic standard errors with the `n − d` degrees-of-freedom correction.
    pub fn homoskedastic_se(&self) -> Result<DVector<f64>> {
        let theta = self.fit()?;
        let x = self.design();
        let resid = self.response() - &x * &theta;
        let s2 = resid.norm_squared() / (self.n - self.d) as f64;
        let inv = linalg::spd_inverse(&(x.transpose() * &x))?;
        Ok(DVector::from_iterator(self.d, (0..self.d).map(|j| (s2 * inv[(j, j)]).sqrt())))
    }
}

impl ObjectiveModel for Ols {
    fn dim(&self) -> usize {
        self.d
    }

    fn n_obs(&self) -> usize {
        self.n
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            analytic_gradient: true,
            analytic_hessian: true,
            per_observation_score: true,
        }
    }

    fn evaluate(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<Evaluation> {
        check_theta(theta, self.d)?;
        batch.validate(self.n)?;
        let t = theta.as_slice();
        let mut acc = Accumulator::new(self.d);
        batch.for_each(|i, w| {
            let r = self.row(i);
            let resid = self.y[i] - r.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
            acc.add_rank_one(w, 0.5 * resid * resid, -resid, 1.0, r);
        });
        super::check_evaluation(theta, acc.finish(batch.total_weight(), 0))
    }

    fn value(&self, theta: &DVector<f64>, batch: &BatchSelector) -> Result<f64> {
        check_theta(theta, self.d)?;
        batch.validate(self.n)?;
        let t = theta.as_slice();
        let mut q = 0.0;
        batch.for_each(|i, w| {
            let resid = self.y[i] - self.row(i).iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
            q += w * 0.5 * resid * resid;
        });
        Ok(q / batch.total_weight())
    }

    fn scores(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_theta(theta, self.d)?;
        let t = theta.as_slice();
        Ok(DMatrix::from_fn(self.n, self.d, |i, j| {
            let r = self.row(i);
            let resid = self.y[i] - r.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
            -r[j] * resid
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testing::assert_derivatives;
    use crate::resampling::{ResamplePlan, RngStream};

    fn hand_data() -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0]);
        (x, y)
    }

    #[test]
    fn hand_example_matches_matrix_formulas() {
        // Direct matrix arithmetic at θ = (0.5, 1):
        // residuals y − Xθ = (0.5, 0.5, 1.5); Q = (0.25+0.25+2.25)/6 = 0.458333…
        // G = −X′e/3 = −(2.5, 3.5)/3; H = X′X/3 = [[3,3],[3,5]]/3.
        let (x, y) = hand_data();
        let m = Ols::new(&x, &y).unwrap();
        let theta = DVector::from_vec(vec![0.5, 1.0]);
        let e = m.evaluate(&theta, &m.full_batch()).unwrap();
        assert!((e.value - 2.75 / 6.0).abs() < 1e-15);
        assert!((e.gradient[0] + 2.5 / 3.0).abs() < 1e-15);
        assert!((e.gradient[1] + 3.5 / 3.0).abs() < 1e-15);
        assert!((e.hessian[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((e.hessian[(0, 1)] - 1.0).abs() < 1e-15);
        assert!((e.hessian[(1, 1)] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normal_equations_on_four_rows() {
        // X′X = [[4,10],[10,30]], X′y = (10.5, 32), det 20,
        // so θ̂ = [[30,−10],[−10,4]]/20 · (10.5, 32) = (−0.25, 1.15).
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.5]);
        let m = Ols::new(&x, &y).unwrap();
        let fit = m.fit().unwrap();
        assert!((fit[0] + 0.25).abs() < 1e-12, "{fit}");
        assert!((fit[1] - 1.15).abs() < 1e-12, "{fit}");
        let g = m.evaluate(&fit, &m.full_batch()).unwrap().gradient;
        assert!(g.amax() < 1e-14);
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.3, 1.0, -1.0, 1.0, 2.5, 1.0, 0.0]);
        let y = &x * DVector::from_vec(vec![1.0, 1.0]);
        let m = Ols::new(&x, &y).unwrap();
        let fit = m.fit().unwrap();
        assert!((fit[0] - 1.0).abs() < 1e-13 && (fit[1] - 1.0).abs() < 1e-13);
        assert!(m.value(&fit, &m.full_batch()).unwrap() < 1e-28);
    }

    #[test]
    fn rank_deficiency_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(Ols::new(&x, &y), Err(Error::Model(_))));
    }

    #[test]
    fn batch_modes_agree_bit_for_bit() {
        let x = DMatrix::from_fn(30, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 3.0 + if j == 0 { 1.0 } else { 0.0 });
        let y = DVector::from_fn(30, |i, _| (i as f64).sin());
        let m = Ols::new(&x, &y).unwrap();
        let theta = DVector::from_vec(vec![0.2, -0.1, 0.4]);
        let a = m.evaluate(&theta, &BatchSelector::full(30)).unwrap();
        let b = m.evaluate(&theta, &BatchSelector::Weights(vec![1.0; 30])).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.hessian, b.hessian);
    }

    #[test]
    fn hessian_constant_and_batch_fit_zeroes_gradient() {
        let x = DMatrix::from_fn(40, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).cos() });
        let y = DVector::from_fn(40, |i, _| 1.0 + (i as f64 * 1.3).sin());
        let m = Ols::new(&x, &y).unwrap();
        let plan = ResamplePlan::iid(40, 20).unwrap();
        let stream = RngStream::new(1, 2);
        for k in 0..10 {
            let batch = plan.draw_batch(&stream, k);
            let h1 = m.evaluate(&DVector::from_vec(vec![0.0, 0.0]), &batch).unwrap().hessian;
            let h2 = m.evaluate(&DVector::from_vec(vec![3.0, -2.0]), &batch).unwrap().hessian;
            assert!((h1 - h2).amax() < 1e-14);
            if let Ok(fit) = m.fit_batch(&batch) {
                assert!(m.gradient(&fit, &batch).unwrap().amax() < 1e-12);
            }
            assert_derivatives(&m, &DVector::from_vec(vec![0.3, -0.7]), &batch, 1e-5, 1e-4);
        }
    }

    #[test]
    fn scores_average_to_gradient() {
        let (x, y) = hand_data();
        let m = Ols::new(&x, &y).unwrap();
        let theta = DVector::from_vec(vec![0.1, 0.9]);
        let s = m.scores(&theta).unwrap();
        let g = m.gradient(&theta, &m.full_batch()).unwrap();
        for j in 0..2 {
            assert!((s.column(j).mean() - g[j]).abs() < 1e-15);
        }
    }
}
