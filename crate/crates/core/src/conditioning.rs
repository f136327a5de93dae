//! Conditioning matrices `P_b` applied to the batch gradient.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Smallest eigenvalue at or below `PD_TOL·‖H‖` triggers the ridge repair.
pub const PD_TOL: f64 = 1e-10;

/// Curvature-condition threshold for skipping a BFGS update.
pub const BFGS_SKIP_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    /// `P = I` (resampled gradient descent).
    Identity,
    /// `P = H⁻¹` (resampled Newton-Raphson).
    #[default]
    InverseHessian,
    /// `P = (H′H)^{−1/2}`, positive definite even when `H` is not.
    InverseSqrtSymmetrized,
    /// `(B′B)^{−1/2}` applied to a BFGS approximation `B` (resampled quasi-Newton).
    BfgsApprox,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub kind: ConditioningKind,
    /// Ridge added when the Hessian is not positive definite;
    /// `None` means `1e-6·|trace(H)|/d`.
    #[serde(default)]
    pub pd_repair_c: Option<f64>,
}

/// A conditioned direction and whether the ridge repair was used.
#[derive(Clone, Debug)]
pub struct Direction {
    pub step: DVector<f64>,
    pub repaired: bool,
}

impl Conditioning {
    pub fn new(kind: ConditioningKind) -> Self {
        Self { kind, pd_repair_c: None }
    }

    pub fn with_repair(mut self, c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("pd_repair_c must be finite and nonnegative, got {c}")));
        }
        self.pd_repair_c = Some(c);
        Ok(self)
    }

    pub fn needs_hessian(&self) -> bool {
        self.kind != ConditioningKind::Identity
    }

    /// `P g`, where `h` is the batch Hessian (or the BFGS matrix for `BfgsApprox`).
    pub fn direction(&self, h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.direction_flagged(h, g)?.step)
    }

    pub fn direction_flagged(&self, h: &DMatrix<f64>, g: &DVector<f64>) -> Result<Direction> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite gradient passed to conditioning".into()));
        }
        match self.kind {
            ConditioningKind::Identity => Ok(Direction {
                step: g.clone(),
                repaired: false,
            }),
            ConditioningKind::InverseHessian => inverse_hessian_direction(h, g, self.pd_repair_c),
            ConditioningKind::InverseSqrtSymmetrized | ConditioningKind::BfgsApprox => Ok(Direction {
                step: inverse_sqrt_symmetrized(h)? * g,
                repaired: false,
            }),
        }
    }

    /// The matrix `P` itself (used by the coupling replay and SMD chain 2).
    pub fn matrix(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = h.nrows();
        match self.kind {
            ConditioningKind::Identity => Ok(DMatrix::identity(d, d)),
            ConditioningKind::InverseHessian => {
                let (a, _) = repaired(h, self.pd_repair_c);
                linalg::solve_symmetric_matrix(&a, &DMatrix::identity(d, d)).ok_or_else(|| Error::Conditioning {
                    spectrum: linalg::sym_eigenvalues(&a),
                })
            }
            ConditioningKind::InverseSqrtSymmetrized | ConditioningKind::BfgsApprox => inverse_sqrt_symmetrized(h),
        }
    }
}

fn default_ridge(h: &DMatrix<f64>) -> f64 {
    let c = 1e-6 * h.trace().abs() / h.nrows() as f64;
    if c > 0.0 {
        c
    } else {
        1e-6
    }
}

/// `H + cI` with `c > 0` only when `H` fails the positive-definiteness check.
fn repaired(h: &DMatrix<f64>, c: Option<f64>) -> (DMatrix<f64>, bool) {
    let ev = linalg::sym_eigenvalues(h);
    let norm = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if ev[0] > PD_TOL * norm {
        return (h.clone(), false);
    }
    let c = c.unwrap_or_else(|| default_ridge(h));
    let d = h.nrows();
    (h + DMatrix::identity(d, d) * c, true)
}

fn inverse_hessian_direction(h: &DMatrix<f64>, g: &DVector<f64>, c: Option<f64>) -> Result<Direction> {
    let (a, repaired) = repaired(h, c);
    let step = linalg::solve_symmetric(&a, g).ok_or_else(|| Error::Conditioning {
        spectrum: linalg::sym_eigenvalues(&a),
    })?;
    Ok(Direction { step, repaired })
}

/// `(H′H)^{−1/2}` through the eigendecomposition of `H′H`.
pub fn inverse_sqrt_symmetrized(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let hh = h.transpose() * h;
    let hh = (&hh + hh.transpose()) * 0.5;
    let eig = SymmetricEigen::new(hh);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&l| l <= PD_TOL * PD_TOL * top || !l.is_finite()) || top == 0.0 {
        let mut spectrum: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        spectrum.sort_by(|a, b| a.total_cmp(b));
        return Err(Error::Conditioning { spectrum });
    }
    let scaled = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let p = &eig.eigenvectors * scaled * eig.eigenvectors.transpose();
    Ok((&p + p.transpose()) * 0.5)
}

/// Online BFGS approximation of the Hessian, owned by one chain.
#[derive(Clone, Debug)]
pub struct BfgsState {
    approx: DMatrix<f64>,
    anchor: Option<(DVector<f64>, DVector<f64>)>,
    pub updates: usize,
    pub skips: usize,
}

impl BfgsState {
    pub fn new(initial: DMatrix<f64>) -> Self {
        let approx = (&initial + initial.transpose()) * 0.5;
        Self {
            approx,
            anchor: None,
            updates: 0,
            skips: 0,
        }
    }

    pub fn approximation(&self) -> &DMatrix<f64> {
        &self.approx
    }

    /// Replaces the approximation (e.g. by a finite-difference Hessian after a rejection).
    pub fn reset(&mut self, h: DMatrix<f64>) {
        self.approx = (&h + h.transpose()) * 0.5;
        self.anchor = None;
    }

    /// Records the previous point and gradient for the next secant pair.
    pub fn set_anchor(&mut self, theta: DVector<f64>, grad: DVector<f64>) {
        self.anchor = Some((theta, grad));
    }

    /// Secant update with `s = θ_new − θ_old`, `y = g_new − g_old` from the anchor.
    /// Returns whether the approximation changed.
    pub fn update(&mut self, theta_new: &DVector<f64>, grad_new: &DVector<f64>) -> bool {
        let Some((theta_old, grad_old)) = self.anchor.take() else {
            self.anchor = Some((theta_new.clone(), grad_new.clone()));
            return false;
        };
        let s = theta_new - theta_old;
        let y = grad_new - grad_old;
        self.anchor = Some((theta_new.clone(), grad_new.clone()));
        self.apply(&s, &y)
    }

    /// The BFGS formula for one `(s, y)` pair, skipped when `s′y ≤ 1e-10‖s‖‖y‖`.
    pub fn apply(&mut self, s: &DVector<f64>, y: &DVector<f64>) -> bool {
        let sy = s.dot(y);
        if !(sy > BFGS_SKIP_TOL * s.norm() * y.norm()) {
            self.skips += 1;
            return false;
        }
        let bs = &self.approx * s;
        let sbs = s.dot(&bs);
        if !(sbs > 0.0) {
            self.skips += 1;
            return false;
        }
        let next = &self.approx - (&bs * bs.transpose()) / sbs + (y * y.transpose()) / sy;
        if next.iter().any(|v| !v.is_finite()) {
            self.skips += 1;
            return false;
        }
        self.approx = (&next + next.transpose()) * 0.5;
        self.updates += 1;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn trivial_directions() {
        let h = DMatrix::identity(2, 2) * 2.0;
        let g = v(&[2.0, 4.0]);
        let d = Conditioning::new(ConditioningKind::InverseHessian).direction(&h, &g).unwrap();
        assert!((d - v(&[1.0, 2.0])).amax() < 1e-15);
        assert_eq!(Conditioning::new(ConditioningKind::Identity).direction(&h, &g).unwrap(), g);
        let h = DMatrix::from_diagonal(&v(&[-4.0, 9.0]));
        let d = Conditioning::new(ConditioningKind::InverseSqrtSymmetrized)
            .direction(&h, &v(&[4.0, 9.0]))
            .unwrap();
        assert!((d - v(&[1.0, 1.0])).amax() < 1e-14);
    }

    #[test]
    fn scaled_identity_gives_equal_directions() {
        let h = DMatrix::identity(3, 3) * 2.5;
        let g = v(&[1.0, -2.0, 0.5]);
        let a = Conditioning::new(ConditioningKind::InverseHessian).direction(&h, &g).unwrap();
        let b = Conditioning::new(ConditioningKind::InverseSqrtSymmetrized).direction(&h, &g).unwrap();
        assert!((a - b).amax() < 1e-14);
    }

    #[test]
    fn singular_hessian_is_repaired() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = Conditioning::new(ConditioningKind::InverseHessian).with_repair(0.5).unwrap();
        let d = c.direction_flagged(&h, &v(&[1.0, 0.0])).unwrap();
        assert!(d.repaired);
        let back = (&h + DMatrix::identity(2, 2) * 0.5) * &d.step;
        assert!((back - v(&[1.0, 0.0])).amax() < 1e-12);
        let zero = Conditioning::new(ConditioningKind::InverseHessian).with_repair(0.0).unwrap();
        assert!(matches!(zero.direction(&h, &v(&[1.0, 0.0])), Err(Error::Conditioning { .. })));
        assert!(Conditioning::new(ConditioningKind::InverseHessian).with_repair(-1.0).is_err());
    }

    #[test]
    fn bfgs_skip_rule() {
        let mut st = BfgsState::new(DMatrix::identity(2, 2));
        assert!(!st.apply(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])));
        assert!(!st.apply(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])));
        assert_eq!(st.approximation(), &DMatrix::identity(2, 2));
        assert_eq!(st.skips, 2);
    }

    #[test]
    fn bfgs_with_exact_line_search_recovers_newton_on_quadratic() {
        // Q(x) = ½x′Hx − b′x; exact line searches along −B⁻¹g make the
        // search directions H-conjugate, so after two updates B = H.
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = v(&[1.0, 2.0]);
        let grad = |x: &DVector<f64>| &h * x - &b;
        let mut x = v(&[5.0, -3.0]);
        let mut st = BfgsState::new(DMatrix::identity(2, 2));
        for _ in 0..2 {
            let g = grad(&x);
            let p = -crate::linalg::solve_symmetric(st.approximation(), &g).unwrap();
            let alpha = -g.dot(&p) / p.dot(&(&h * &p));
            let x_new = &x + &p * alpha;
            st.set_anchor(x.clone(), g);
            assert!(st.update(&x_new, &grad(&x_new)));
            x = x_new;
        }
        let g = v(&[0.7, -1.3]);
        let quasi = Conditioning::new(ConditioningKind::InverseHessian).direction(st.approximation(), &g).unwrap();
        let newton = crate::linalg::solve_symmetric(&h, &g).unwrap();
        assert!((quasi - newton).amax() < 1e-8);
    }

    proptest! {
        #[test]
        fn inverse_hessian_solves_system(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, g0 in -5.0f64..5.0, g1 in -5.0f64..5.0, g2 in -5.0f64..5.0) {
            let m = DMatrix::from_row_slice(3, 3, &[1.0, a, b, 0.0, 1.0, c, 0.0, 0.0, 1.0]);
            let h = &m * m.transpose() + DMatrix::identity(3, 3) * 0.5;
            let g = v(&[g0, g1, g2]);
            let d = Conditioning::new(ConditioningKind::InverseHessian).direction(&h, &g).unwrap();
            prop_assert!((&h * d - &g).norm() <= 1e-10 * g.norm().max(1e-300));
        }

        #[test]
        fn inverse_sqrt_squares_to_inverse(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, e in 0.2f64..3.0) {
            let h = DMatrix::from_row_slice(2, 2, &[a, b, b, c]) + DMatrix::identity(2, 2) * e * a.signum();
            prop_assume!(linalg::sym_eigenvalues(&h).iter().all(|l| l.abs() > 1e-3));
            let p = inverse_sqrt_symmetrized(&h).unwrap();
            prop_assert_eq!(&p, &p.transpose());
            prop_assert!(linalg::sym_eigenvalues(&p)[0] > 0.0);
            let inv = linalg::spd_inverse(&(h.transpose() * &h)).unwrap();
            prop_assert!((&p * &p - &inv).amax() <= 1e-8 * inv.amax());
        }

        #[test]
        fn bfgs_stays_symmetric(steps in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..20)) {
            let mut st = BfgsState::new(DMatrix::identity(2, 2));
            for (s0, s1, y0, y1) in steps {
                st.apply(&v(&[s0, s1]), &v(&[y0, y1]));
                let a = st.approximation();
                prop_assert_eq!(a, &a.transpose());
            }
        }
    }
}
