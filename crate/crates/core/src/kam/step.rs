//! Near-identity symplectic maps given by a generating function `theta.rho + S(theta, t, rho)`.
//!
//! The map sends new coordinates `(phi, rho)` to old ones `(theta, I)` through
//! `phi = theta + d_rho S(theta, t, rho)` and `I = rho + d_theta S(theta, t, rho)`.

use nalgebra::DMatrix;

use crate::error::{KamError, Result};
use crate::series::{Domain, FourierTaylorSeries, Var};
use crate::taylor::{layout, Taylor};

#[derive(Clone, Debug)]
pub struct SymplecticStep {
    s: FourierTaylorSeries,
    ds_dtheta: Vec<FourierTaylorSeries>,
    ds_drho: Vec<FourierTaylorSeries>,
    pub tol: f64,
    pub max_iter: usize,
    /// Majorant of the mixed second derivatives of `S`.
    pub contraction: f64,
    /// Majorant of all second derivatives of `S`; bounds the derivative of the map minus identity.
    pub deriv_bound: f64,
}

impl SymplecticStep {
    /// The map generated by `S`; no size checks.
    pub fn new(s: FourierTaylorSeries, tol: f64, max_iter: usize) -> Result<SymplecticStep> {
        let d = s.dim();
        let (ds_dtheta, ds_drho) = if s.degree() == 0 {
            let z = FourierTaylorSeries::zero(s.center().to_vec(), 0, s.cutoff());
            ((0..d).map(|j| s.derive(Var::Angle(j))).collect::<Result<_>>()?, vec![z; d])
        } else {
            (
                (0..d).map(|j| s.derive(Var::Angle(j))).collect::<Result<_>>()?,
                (0..d).map(|j| s.derive(Var::Action(j))).collect::<Result<_>>()?,
            )
        };
        Ok(SymplecticStep { s, ds_dtheta, ds_drho, tol, max_iter, contraction: 0.0, deriv_bound: 0.0 })
    }

    pub fn identity(center: Vec<f64>, degree: usize) -> SymplecticStep {
        SymplecticStep::new(FourierTaylorSeries::zero(center, degree, 0), 1e-14, 50).expect("zero series derives")
    }

    pub fn generating(&self) -> &FourierTaylorSeries {
        &self.s
    }

    pub fn dim(&self) -> usize {
        self.s.dim()
    }

    pub fn is_identity(&self) -> bool {
        self.s.is_zero()
    }

    /// `(theta, I)` at jet arguments `(phi, rho)`.
    pub fn apply_jet(&self, phi: &[Taylor], t: f64, rho: &[Taylor]) -> Result<(Vec<Taylor>, Vec<Taylor>)> {
        if self.is_identity() {
            return Ok((phi.to_vec(), rho.to_vec()));
        }
        let d = self.dim();
        let mut theta = phi.to_vec();
        let mut converged = self.ds_drho.iter().all(FourierTaylorSeries::is_zero);
        let mut last = 0.0;
        for _ in 0..self.max_iter {
            if converged {
                break;
            }
            let next: Vec<Taylor> = (0..d).map(|j| &phi[j] - &self.ds_drho[j].eval_jet(&theta, t, rho)).collect();
            last = next.iter().zip(&theta).map(|(a, b)| (a - b).max_abs()).fold(0.0, f64::max);
            theta = next;
            converged = last <= self.tol;
        }
        if !converged {
            return Err(KamError::StepTooLarge(format!(
                "angle fixed point not converged after {} iterations (last change {last:e})",
                self.max_iter
            )));
        }
        let action = (0..d).map(|j| &rho[j] + &self.ds_dtheta[j].eval_jet(&theta, t, rho)).collect();
        Ok((theta, action))
    }

    pub fn apply(&self, phi: &[f64], t: f64, rho: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let lay = layout(self.dim(), 0);
        let pj: Vec<Taylor> = phi.iter().map(|&x| Taylor::real(&lay, x)).collect();
        let rj: Vec<Taylor> = rho.iter().map(|&x| Taylor::real(&lay, x)).collect();
        let (th, ac) = self.apply_jet(&pj, t, &rj)?;
        Ok((th.iter().map(|x| x.value().re).collect(), ac.iter().map(|x| x.value().re).collect()))
    }

    /// Jacobian of `(phi, rho) -> (theta, I)`, exact through first-order jets.
    pub fn jacobian(&self, phi: &[f64], t: f64, rho: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let lay = layout(2 * d, 1);
        let pj: Vec<Taylor> = (0..d).map(|j| Taylor::variable(&lay, j, phi[j])).collect();
        let rj: Vec<Taylor> = (0..d).map(|j| Taylor::variable(&lay, d + j, rho[j])).collect();
        let (th, ac) = self.apply_jet(&pj, t, &rj)?;
        Ok(DMatrix::from_fn(2 * d, 2 * d, |i, j| {
            let row = if i < d { &th[i] } else { &ac[i - d] };
            row.coeffs()[1 + j].re
        }))
    }
}

/// Build the map generated by `S`, refusing generating functions that are not small on `dom`.
pub fn invert_generating(s: FourierTaylorSeries, dom: &Domain, tol: f64, max_iter: usize) -> Result<SymplecticStep> {
    let mut step = SymplecticStep::new(s, tol, max_iter)?;
    let d = step.dim();
    let mut mixed: f64 = 0.0;
    let mut all: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let tt = step.ds_dtheta[i].derive(Var::Angle(j))?.majorant_norm(dom)?;
            all = all.max(tt);
            if step.s.degree() >= 1 {
                let tr = step.ds_drho[i].derive(Var::Angle(j))?.majorant_norm(dom)?;
                mixed = mixed.max(tr);
                all = all.max(tr);
            }
            if step.s.degree() >= 2 {
                all = all.max(step.ds_drho[i].derive(Var::Action(j))?.majorant_norm(dom)?);
            }
        }
    }
    step.contraction = mixed;
    step.deriv_bound = all;
    if mixed >= 0.5 {
        return Err(KamError::StepTooLarge(format!("mixed second derivative majorant {mixed:e} >= 1/2")));
    }
    Ok(step)
}

/// `max |J^T Omega J - Omega|` for a `2d x 2d` Jacobian ordered `(angles, actions)`.
pub fn symplectic_defect(j: &DMatrix<f64>) -> f64 {
    let n = j.nrows();
    let d = n / 2;
    let omega = DMatrix::from_fn(n, n, |r, c| {
        if c == r + d {
            1.0
        } else if r == c + d {
            -1.0
        } else {
            0.0
        }
    });
    (j.transpose() * &omega * j - &omega).abs().max()
}

/// Composition of steps, oldest first; points are pushed through newest to oldest.
#[derive(Clone, Debug, Default)]
pub struct Chain {
    steps: Vec<SymplecticStep>,
}

impl Chain {
    pub fn new() -> Chain {
        Chain::default()
    }

    pub fn push(&mut self, step: SymplecticStep) {
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[SymplecticStep] {
        &self.steps
    }

    pub fn apply_jet(&self, phi: &[Taylor], t: f64, rho: &[Taylor]) -> Result<(Vec<Taylor>, Vec<Taylor>)> {
        let (mut th, mut ac) = (phi.to_vec(), rho.to_vec());
        for step in self.steps.iter().rev() {
            (th, ac) = step.apply_jet(&th, t, &ac)?;
        }
        Ok((th, ac))
    }

    pub fn apply(&self, phi: &[f64], t: f64, rho: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut th, mut ac) = (phi.to_vec(), rho.to_vec());
        for step in self.steps.iter().rev() {
            (th, ac) = step.apply(&th, t, &ac)?;
        }
        Ok((th, ac))
    }

    pub fn jacobian(&self, phi: &[f64], t: f64, rho: &[f64]) -> Result<DMatrix<f64>> {
        let d = phi.len();
        let lay = layout(2 * d, 1);
        let pj: Vec<Taylor> = (0..d).map(|j| Taylor::variable(&lay, j, phi[j])).collect();
        let rj: Vec<Taylor> = (0..d).map(|j| Taylor::variable(&lay, d + j, rho[j])).collect();
        let (th, ac) = self.apply_jet(&pj, t, &rj)?;
        Ok(DMatrix::from_fn(2 * d, 2 * d, |i, j| {
            let row = if i < d { &th[i] } else { &ac[i - d] };
            row.coeffs()[1 + j].re
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taylor::layout;
    use num_complex::Complex64 as C64;
    use proptest::prelude::*;

    fn sample_s(amp: f64, c: f64) -> FourierTaylorSeries {
        // S = amp * (1 + c (rho - 1)) sin(theta - t) + amp/3 * cos(2 theta) (rho - 1)^2
        let lay = layout(1, 2);
        let mut s = FourierTaylorSeries::zero(vec![1.0], 2, 2);
        let mut p = Taylor::zero(&lay);
        p.coeffs_mut()[0] = C64::new(0.0, -amp / 2.0);
        p.coeffs_mut()[1] = C64::new(0.0, -amp * c / 2.0);
        s.insert(crate::series::ModeIndex::new(vec![1], -1), p.clone()).unwrap();
        s.insert(crate::series::ModeIndex::new(vec![-1], 1), p.conj()).unwrap();
        let mut q = Taylor::zero(&lay);
        q.coeffs_mut()[2] = C64::new(amp / 6.0, 0.0);
        s.insert(crate::series::ModeIndex::new(vec![2], 0), q.clone()).unwrap();
        s.insert(crate::series::ModeIndex::new(vec![-2], 0), q).unwrap();
        s
    }

    fn dom() -> Domain {
        Domain::new(0.1, 0.1, vec![1.0]).unwrap()
    }

    #[test]
    fn generating_relations_hold() {
        let st = invert_generating(sample_s(0.05, 0.7), &dom(), 1e-14, 50).unwrap();
        let (phi, t, rho) = (0.8, 0.3, 1.02);
        let (th, ac) = st.apply(&[phi], t, &[rho]).unwrap();
        let s = st.generating();
        let drho = s.derive(Var::Action(0)).unwrap().eval(&th, t, &[rho]).re;
        let dth = s.derive(Var::Angle(0)).unwrap().eval(&th, t, &[rho]).re;
        assert!((th[0] + drho - phi).abs() < 1e-14);
        assert!((rho + dth - ac[0]).abs() < 1e-14);
    }

    #[test]
    fn large_generating_function_is_refused() {
        assert!(matches!(invert_generating(sample_s(2.0, 3.0), &dom(), 1e-14, 50), Err(KamError::StepTooLarge(_))));
    }

    /// Finite-difference Jacobian with Richardson extrapolation.
    fn fd_jacobian(st: &SymplecticStep, phi: f64, t: f64, rho: f64) -> DMatrix<f64> {
        let f = |p: f64, r: f64| {
            let (a, b) = st.apply(&[p], t, &[r]).unwrap();
            [a[0], b[0]]
        };
        let diff = |h: f64, col: usize| {
            let (dp, dr) = if col == 0 { (h, 0.0) } else { (0.0, h) };
            let a = f(phi + dp, rho + dr);
            let b = f(phi - dp, rho - dr);
            [(a[0] - b[0]) / (2.0 * h), (a[1] - b[1]) / (2.0 * h)]
        };
        DMatrix::from_fn(2, 2, |i, j| {
            let h = 1e-3;
            (4.0 * diff(h / 2.0, j)[i] - diff(h, j)[i]) / 3.0
        })
    }

    proptest! {
        #[test]
        fn maps_are_symplectic(amp in 0.0f64..0.1, c in -1.0f64..1.0, phi in 0.0f64..6.0, t in 0.0f64..6.0, dr in -0.05f64..0.05) {
            let st = invert_generating(sample_s(amp, c), &dom(), 1e-14, 50).unwrap();
            let j = st.jacobian(&[phi], t, &[1.0 + dr]).unwrap();
            prop_assert!(symplectic_defect(&j) < 1e-12);
            let fd = fd_jacobian(&st, phi, t, 1.0 + dr);
            prop_assert!((&fd - &j).abs().max() < 1e-8, "{} vs {}", fd, j);
            prop_assert!(symplectic_defect(&fd) < 1e-8);
        }
    }

    #[test]
    fn chain_composes_newest_first() {
        let a = invert_generating(sample_s(0.05, 0.2), &dom(), 1e-14, 50).unwrap();
        let b = invert_generating(sample_s(-0.03, 0.5), &dom(), 1e-14, 50).unwrap();
        let mut ch = Chain::new();
        ch.push(a.clone());
        ch.push(b.clone());
        let (t1, a1) = b.apply(&[0.4], 0.9, &[1.01]).unwrap();
        let (t2, a2) = a.apply(&t1, 0.9, &a1).unwrap();
        let (t3, a3) = ch.apply(&[0.4], 0.9, &[1.01]).unwrap();
        assert_eq!((t2, a2), (t3, a3));
        let j = ch.jacobian(&[0.4], 0.9, &[1.01]).unwrap();
        assert!(symplectic_defect(&j) < 1e-12);
    }
}
