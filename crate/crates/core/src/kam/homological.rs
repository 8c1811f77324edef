//! Solving `<omega(rho), d_theta S>/eps^a + d_t S + c P = c <P>` mode by mode.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::series::{FourierTaylorSeries, ModeIndex, Var};
use crate::taylor::Taylor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HomologicalMode {
    /// Remove every `k != 0` mode; the angle mean stays.
    AnglesOnly,
    /// Remove every `(k, l) != (0, 0)` mode.
    AnglesAndTime,
}

impl HomologicalMode {
    pub fn solves(self, m: &ModeIndex) -> bool {
        match self {
            HomologicalMode::AnglesOnly => !m.k_is_zero(),
            HomologicalMode::AnglesAndTime => !m.is_zero(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HomologicalSolution {
    pub s: FourierTaylorSeries,
    /// Smallest `|divisor| / bound` over the solved `k != 0` modes (infinite if none).
    pub min_margin: f64,
    pub min_divisor: f64,
}

/// Divisor `<k, omega(rho)>/eps^a + l` as a jet about the series center.
fn divisor(m: &ModeIndex, omega: &[Taylor], eps_a: f64) -> Taylor {
    let mut dv = Taylor::real(omega[0].layout(), m.l as f64);
    for (kj, w) in m.k.iter().zip(omega) {
        if *kj != 0 {
            dv.axpy(C64::new(*kj as f64 / eps_a, 0.0), w);
        }
    }
    dv
}

/// Solve for `S` with `omega` given as jets about the center of `p_low`.
///
/// `bound(m)` is the lower bound required of `|divisor|` at the center for
/// modes with `k != 0`; `k = 0` time modes only need `|l| >= 1`.
pub fn solve_homological(
    p_low: &FourierTaylorSeries,
    omega: &[Taylor],
    eps_a: f64,
    scale_num: f64,
    mode: HomologicalMode,
    bound: &dyn Fn(&ModeIndex) -> f64,
) -> Result<HomologicalSolution> {
    if omega.len() != p_low.dim() {
        return Err(KamError::DimensionMismatch { expected: p_low.dim(), got: omega.len() });
    }
    let lay = p_low.layout().clone();
    let omega: Vec<Taylor> = omega.iter().map(|w| w.relayout(&lay)).collect();
    let mut s = FourierTaylorSeries::zero(p_low.center().to_vec(), p_low.degree(), p_low.cutoff());
    let mut min_margin = f64::INFINITY;
    let mut min_divisor = f64::INFINITY;
    for (m, p) in p_low.modes() {
        if !mode.solves(m) {
            continue;
        }
        let dv = divisor(m, &omega, eps_a);
        let v = dv.value().norm();
        min_divisor = min_divisor.min(v);
        if !m.k_is_zero() {
            let b = bound(m);
            if !(v >= b) {
                return Err(KamError::SmallDivisor { k: m.k.clone(), l: m.l as i64, value: v, bound: b });
            }
            min_margin = min_margin.min(v / b);
        }
        let coeff = (p * &dv.recip()).scale(C64::new(0.0, scale_num));
        s.insert(m.clone(), coeff)?;
    }
    Ok(HomologicalSolution { s, min_margin, min_divisor })
}

/// Left side minus right side of the equation, computed through series derivatives.
pub fn homological_residual(
    s: &FourierTaylorSeries,
    p_low: &FourierTaylorSeries,
    omega: &[Taylor],
    eps_a: f64,
    scale_num: f64,
    mode: HomologicalMode,
) -> Result<FourierTaylorSeries> {
    let lay = p_low.layout().clone();
    let mut out = s.derive(Var::Time)?;
    for (j, w) in omega.iter().enumerate() {
        let w = w.relayout(&lay).scale_re(1.0 / eps_a);
        let ds = s.derive(Var::Angle(j))?;
        for (m, p) in ds.modes() {
            let q = &out.coeff(m) + &(p * &w);
            out.insert(m.clone(), q)?;
        }
    }
    for (m, p) in p_low.modes() {
        if mode.solves(m) {
            let q = &out.coeff(m) + &p.scale_re(scale_num);
            out.insert(m.clone(), q)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Domain;
    use crate::taylor::layout;
    use proptest::prelude::*;

    fn omega_jets(w: &[f64], slope: f64, degree: usize) -> Vec<Taylor> {
        let lay = layout(w.len(), degree);
        w.iter()
            .enumerate()
            .map(|(j, &x)| {
                let mut t = Taylor::real(&lay, x);
                if degree > 0 {
                    t.coeffs_mut()[1 + j] = C64::new(slope, 0.0);
                }
                t
            })
            .collect()
    }

    #[test]
    fn single_mode_solution_matches_closed_form() {
        // S = -c * sin(theta - t) / (w - 1) solves w dS/dtheta + dS/dt + c cos(theta - t) = 0
        let mut p = FourierTaylorSeries::zero(vec![1.0], 0, 1);
        p.add_trig(vec![1], -1, 1.0, false).unwrap();
        let w = 3.0;
        let sol = solve_homological(&p, &omega_jets(&[w], 0.0, 0), 1.0, 2.0, HomologicalMode::AnglesOnly, &|_| 0.1).unwrap();
        for &(th, t) in &[(0.3, 1.1), (2.0, -0.5)] {
            let v = sol.s.eval(&[th], t, &[1.0]);
            let want = -2.0 * (th - t).sin() / (w - 1.0);
            assert!((v.re - want).abs() < 1e-15 && v.im.abs() < 1e-15);
        }
        assert_eq!(sol.min_divisor, 2.0);
    }

    #[test]
    fn angle_only_mode_keeps_time_modes() {
        let mut p = FourierTaylorSeries::zero(vec![0.0], 1, 2);
        p.add_trig(vec![0], 1, 1.0, false).unwrap();
        p.add_trig(vec![1], 0, 1.0, false).unwrap();
        let w = omega_jets(&[1.7], 0.3, 1);
        let s1 = solve_homological(&p, &w, 1.0, 1.0, HomologicalMode::AnglesOnly, &|_| 0.0).unwrap();
        assert!(s1.s.modes().all(|(m, _)| !m.k_is_zero()));
        let s2 = solve_homological(&p, &w, 1.0, 1.0, HomologicalMode::AnglesAndTime, &|_| 0.0).unwrap();
        assert_eq!(s2.s.len(), 4);
    }

    #[test]
    fn small_divisor_is_reported() {
        let mut p = FourierTaylorSeries::zero(vec![0.0], 0, 3);
        p.add_trig(vec![2], -1, 1.0, false).unwrap();
        let err = solve_homological(&p, &omega_jets(&[0.5], 0.0, 0), 1.0, 1.0, HomologicalMode::AnglesAndTime, &|_| 1e-3)
            .unwrap_err();
        match err {
            KamError::SmallDivisor { k, value, .. } => {
                assert_eq!(k.iter().map(|x| x.abs()).sum::<i32>(), 2);
                assert!(value < 1e-15);
            }
            e => panic!("unexpected {e}"),
        }
    }

    fn arb_series() -> impl Strategy<Value = FourierTaylorSeries> {
        proptest::collection::vec((-3i32..=3, -3i32..=3, -1.0f64..1.0, -1.0f64..1.0, any::<bool>()), 1..8).prop_map(|ts| {
            let mut f = FourierTaylorSeries::zero(vec![0.0, 0.0], 2, 6);
            for (k, l, a, b, sine) in ts {
                f.add_trig(vec![k, -k / 2], l, a, sine).unwrap();
                let lay = f.layout().clone();
                let m = ModeIndex::new(vec![k, 1], l);
                let mut c = f.coeff(&m);
                c.coeffs_mut()[2] += C64::new(0.3 * b, 0.0);
                c.coeffs_mut()[3] += C64::new(0.1 * a, 0.0);
                f.insert(m.clone(), c.relayout(&lay)).unwrap();
            }
            f.symmetrize()
        })
    }

    proptest! {
        #[test]
        fn residual_vanishes(p in arb_series(), w1 in 1.1f64..2.0, w2 in 0.1f64..0.9, slope in -0.5f64..0.5) {
            let mut om = omega_jets(&[w1, w2], slope, 2);
            om[0].coeffs_mut()[3] = C64::new(0.2, 0.0);
            for mode in [HomologicalMode::AnglesOnly, HomologicalMode::AnglesAndTime] {
                let sol = match solve_homological(&p, &om, 1.0, 10.0, mode, &|_| 0.5) {
                    Ok(s) => s,
                    Err(KamError::SmallDivisor { .. }) => continue,
                    Err(e) => panic!("{e}"),
                };
                let res = homological_residual(&sol.s, &p, &om, 1.0, 10.0, mode).unwrap();
                let dom = Domain::new(0.1, 0.05, vec![0.0, 0.0]).unwrap();
                prop_assert!(res.majorant_norm(&dom).unwrap() <= 1e-12, "{}", res.majorant_norm(&dom).unwrap());
                prop_assert!(sol.s.reality_defect() <= 1e-15);
            }
        }
    }
}
