//! Derived constants and step sequences for both iteration phases.

use serde::{Deserialize, Serialize};

use crate::diophantine::DioParams;
use crate::error::{KamError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub dio: DioParams,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    /// The two candidates whose maximum sets `m0`.
    pub e1: f64,
    pub e2: f64,
    pub m0: u64,
}

impl ScheduleParams {
    pub fn new(dio: DioParams) -> Result<ScheduleParams> {
        let (a, b, big_b, ell) = (dio.a, dio.b, dio.big_b, dio.ell);
        let (t1, t2) = (dio.tau1, dio.tau2);
        let mu1 = dio.mu_term;
        let mu2 = 2.0 * mu1;
        let mu3 = (a - b) * dio.mu / (10.0 * big_b);
        let den1 = a - b - 2.0 * (t1 + 2.0) * big_b / ell - 2.0 * mu1;
        let den2 = big_b
            - 2.0 * a
            - 2.0 * (t2 + 1.0) * b
            - 2.0 * (2.0 * t1 + 5.0) * (t2 + 1.0) * big_b / ell
            - 8.0 * mu1 * (t2 + 1.0)
            - 2.0 * mu2;
        if den1 <= 0.0 {
            return Err(KamError::ScheduleRejected(format!("first m0 denominator is {den1:e} <= 0")));
        }
        if den2 <= 0.0 {
            return Err(KamError::ScheduleRejected(format!("second m0 denominator is {den2:e} <= 0")));
        }
        let e1 = 4.0 * big_b / den1;
        let e2 = 2.0 * (2.0 * t1 + 3.0) * (t2 + 1.0) * big_b / den2;
        let e = e1.max(e2);
        if !(e.is_finite() && e < 9.0e15) {
            return Err(KamError::ScheduleRejected(format!("m0 candidate {e:e} is not representable")));
        }
        let m0 = 10 + e.floor() as u64;
        let s = ScheduleParams { dio, mu1, mu2, mu3, e1, e2, m0 };
        s.check_monotone()?;
        Ok(s)
    }

    fn ln_eps(&self) -> f64 {
        self.dio.eps.ln()
    }

    fn m0f(&self) -> f64 {
        self.m0 as f64
    }

    /// `ln eps_j`.
    pub fn ln_eps_j(&self, j: u64) -> f64 {
        let b = self.dio.big_b;
        if j <= self.m0 {
            j as f64 * b / self.m0f() * self.ln_eps()
        } else {
            b * self.ln_eps() * (1.0 + self.mu3).powf((j - self.m0) as f64)
        }
    }

    pub fn eps_j(&self, j: u64) -> f64 {
        self.ln_eps_j(j).exp()
    }

    pub fn s_j(&self, j: u64) -> f64 {
        (self.ln_eps_j(j + 1) / self.dio.ell).exp()
    }

    pub fn ln_r_j(&self, j: u64) -> f64 {
        let p = &self.dio;
        let first = |i: u64| {
            ((i + 1) as f64 * (p.tau1 + 1.0) * p.big_b / (p.ell * self.m0f()) + self.mu1 + p.big_b / p.ell) * self.ln_eps()
        };
        if j <= self.m0 {
            first(j)
        } else {
            first(self.m0) * (1.0 + self.mu3).powf((j - self.m0) as f64)
        }
    }

    pub fn r_j(&self, j: u64) -> f64 {
        self.ln_r_j(j).exp()
    }

    pub fn k_j(&self, j: u64) -> f64 {
        2.0 * self.dio.big_b / self.s_j(j) * (1.0 / self.dio.eps).ln()
    }

    pub fn ln_eps_tilde(&self, j: u64) -> f64 {
        self.dio.big_b * self.ln_eps() * (1.0 + self.mu3).powf(j as f64)
    }

    pub fn eps_tilde(&self, j: u64) -> f64 {
        self.ln_eps_tilde(j).exp()
    }

    pub fn s_tilde(&self, j: u64) -> f64 {
        let p = &self.dio;
        let m = self.m0f();
        let e0 = p.b + (m + 1.0) * (2.0 * p.tau1 + 3.0) * p.big_b / (p.ell * m) + 4.0 * self.mu1 + 2.0 * p.big_b / p.ell;
        (e0 * self.ln_eps() * (1.0 + self.mu3).powf(j as f64)).exp()
    }

    pub fn r_tilde(&self, j: u64) -> f64 {
        let p = &self.dio;
        let m = self.m0f();
        let t2 = p.tau2 + 1.0;
        let e0 = p.a
            + t2 * p.b
            + (m + 1.0) * (2.0 * p.tau1 + 3.0) * t2 * p.big_b / (m * p.ell)
            + 4.0 * self.mu1 * t2
            + self.mu2
            + 2.0 * p.big_b * t2 / p.ell;
        (e0 * self.ln_eps() * (1.0 + self.mu3).powf(j as f64)).exp()
    }

    pub fn k_tilde(&self, j: u64) -> f64 {
        2.0 / self.s_tilde(j) * (-self.ln_eps_tilde(j))
    }

    /// `h_j = h0 (2 - 2^-j)`; the same law gives `M_j`.
    pub fn cap(base: f64, j: u64) -> f64 {
        base * (2.0 - 0.5f64.powi(j.min(1000) as i32))
    }

    /// Sampled monotonicity and ordering checks (first steps, around `m0`, and the tilde phase).
    fn check_monotone(&self) -> Result<()> {
        let mut idx: Vec<u64> = (0..32).collect();
        idx.extend((self.m0.saturating_sub(3))..(self.m0 + 4));
        for w in idx.windows(2) {
            let (i, j) = (w[0], w[1]);
            if j <= i {
                continue;
            }
            let dec = self.ln_eps_j(j) < self.ln_eps_j(i) && self.s_j(j) <= self.s_j(i) && self.ln_r_j(j) < self.ln_r_j(i);
            if !dec {
                return Err(KamError::ScheduleRejected(format!("sequences not decreasing between steps {i} and {j}")));
            }
        }
        for j in idx {
            if self.ln_r_j(j) >= (self.ln_eps_j(j + 1) / self.dio.ell) {
                return Err(KamError::ScheduleRejected(format!("r_{j} >= s_{j}")));
            }
        }
        for j in 0..16 {
            if !(self.eps_tilde(j + 1) <= self.eps_tilde(j) && self.s_tilde(j + 1) <= self.s_tilde(j) && self.r_tilde(j + 1) <= self.r_tilde(j)) {
                return Err(KamError::ScheduleRejected(format!("main-phase sequences not decreasing at {j}")));
            }
        }
        Ok(())
    }

    /// Report of the constants and the first `n` entries of every sequence.
    pub fn echo(&self, n: u64) -> ScheduleEcho {
        let js: Vec<u64> = (0..n).collect();
        ScheduleEcho {
            big_b: self.dio.big_b,
            ell: self.dio.ell,
            gamma: self.dio.gamma,
            tau1: self.dio.tau1,
            tau2: self.dio.tau2,
            cutoff: self.dio.cutoff,
            mu1: self.mu1,
            mu2: self.mu2,
            mu3: self.mu3,
            e1: self.e1,
            e2: self.e2,
            m0: self.m0,
            eps_m0: self.eps_j(self.m0),
            eps: js.iter().map(|&j| self.eps_j(j)).collect(),
            s: js.iter().map(|&j| self.s_j(j)).collect(),
            r: js.iter().map(|&j| self.r_j(j)).collect(),
            k: js.iter().map(|&j| self.k_j(j)).collect(),
            eps_tilde: js.iter().map(|&j| self.eps_tilde(j)).collect(),
            s_tilde: js.iter().map(|&j| self.s_tilde(j)).collect(),
            r_tilde: js.iter().map(|&j| self.r_tilde(j)).collect(),
            k_tilde: js.iter().map(|&j| self.k_tilde(j)).collect(),
        }
    }
}

/// Make the schedule for given parameters.
pub fn make_schedule(p: &DioParams) -> Result<ScheduleParams> {
    ScheduleParams::new(p.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEcho {
    pub big_b: f64,
    pub ell: f64,
    pub gamma: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub cutoff: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub e1: f64,
    pub e2: f64,
    pub m0: u64,
    pub eps_m0: f64,
    pub eps: Vec<f64>,
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub k: Vec<f64>,
    pub eps_tilde: Vec<f64>,
    pub s_tilde: Vec<f64>,
    pub r_tilde: Vec<f64>,
    pub k_tilde: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(eps: f64) -> ScheduleParams {
        make_schedule(&DioParams::derive(2.0, 1.0, 1, 1e-3, eps).unwrap()).unwrap()
    }

    /// Independent evaluation of the `m0` formula.
    fn m0_oracle(a: f64, b: f64, d: f64, mu: f64) -> u64 {
        let bb = 5.0 * a - b + 2.0 * a * d;
        let ell = 2.0 * (d + 1.0) * bb / (a - b) + mu;
        let mu1 = (a - b) * (a - b) * mu / (1000.0 * (a + b + 1.0) * (d + 3.0) * bb);
        let (t1, t2) = (d - 1.0 + mu1, d + mu1);
        let x = 4.0 * bb / (a - b - 2.0 * (t1 + 2.0) * bb / ell - 2.0 * mu1);
        let y = 2.0 * (2.0 * t1 + 3.0) * (t2 + 1.0) * bb
            / (bb - 2.0 * a - 2.0 * (t2 + 1.0) * b - 2.0 * (2.0 * t1 + 5.0) * (t2 + 1.0) * bb / ell - 8.0 * mu1 * (t2 + 1.0) - 4.0 * mu1);
        10 + x.max(y).floor() as u64
    }

    #[test]
    fn m0_matches_oracle() {
        let s = sched(1e-3);
        assert_eq!(s.m0, m0_oracle(2.0, 1.0, 1.0, 1e-3));
        assert!(s.m0 > 2_000_000 && s.m0 < 3_000_000, "{}", s.m0);
        let s2 = make_schedule(&DioParams::derive(3.0, 1.0, 2, 1e-2, 1e-3).unwrap()).unwrap();
        assert_eq!(s2.m0, m0_oracle(3.0, 1.0, 2.0, 1e-2));
    }

    #[test]
    fn eps_reaches_eps_b_at_m0() {
        let s = sched(1e-3);
        let want = 1e-3f64.powf(13.0);
        assert!((s.eps_j(s.m0) / want - 1.0).abs() < 1e-12);
        assert!((s.eps_tilde(0) / want - 1.0).abs() < 1e-12);
        // continuation applies the exponent once
        let next = want.powf(1.0 + s.mu3);
        assert!((s.eps_j(s.m0 + 1) / next - 1.0).abs() < 1e-12);
        assert!((s.eps_tilde(1) / next - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mu3_value() {
        let s = sched(1e-3);
        assert!((s.mu3 - 1e-4 / 13.0).abs() < 1e-20);
        assert_eq!(s.mu2, 2.0 * s.mu1);
    }

    #[test]
    fn cutoff_laws_are_exact() {
        let s = sched(0.1);
        for j in [0u64, 1, 5, s.m0, s.m0 + 2] {
            assert_eq!(s.k_j(j), 2.0 * 13.0 / s.s_j(j) * (10.0f64).ln());
        }
        for j in 0..4 {
            assert_eq!(s.k_tilde(j), 2.0 / s.s_tilde(j) * (1.0 / s.eps_tilde(j)).ln());
        }
    }

    #[test]
    fn sequences_decrease_and_r_below_s() {
        let s = sched(0.1);
        for j in 0..20 {
            assert!(s.eps_j(j + 1) < s.eps_j(j));
            assert!(s.r_j(j + 1) < s.r_j(j));
            assert!(s.r_j(j) < s.s_j(j));
        }
        assert!(s.r_tilde(0) < s.s_tilde(0));
        assert_eq!(ScheduleParams::cap(2.0, 0), 2.0);
        assert_eq!(ScheduleParams::cap(2.0, 1), 3.0);
    }

    proptest::proptest! {
        #[test]
        fn valid_parameters_give_a_schedule(a in 1.01f64..50.0, frac in 0.001f64..0.999, d in 1usize..8, mu in 1e-6f64..0.99) {
            let b = a * frac;
            let s = make_schedule(&DioParams::derive(a, b, d, mu, 1e-3).unwrap()).unwrap();
            proptest::prop_assert!(s.e1 > 0.0 && s.e2 > 0.0 && s.m0 >= 10);
        }
    }
}
