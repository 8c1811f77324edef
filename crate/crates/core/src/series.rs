//! Fourier series in the angles and time with Taylor-polynomial action dependence.
//!
//! A [`FourierTaylorSeries`] represents
//! `f(theta, t, I) = sum_{k,l} p_{k,l}(I - center) exp(i(<k,theta> + l t))`
//! with a sparse mode map and polynomials truncated at a fixed total degree.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::taylor::{jet_monomials, layout, scalar_monomials, Layout, Taylor};

const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModeIndex {
    pub k: Vec<i32>,
    pub l: i32,
}

impl ModeIndex {
    pub fn new(k: Vec<i32>, l: i32) -> ModeIndex {
        ModeIndex { k, l }
    }

    pub fn zero(d: usize) -> ModeIndex {
        ModeIndex { k: vec![0; d], l: 0 }
    }

    /// `|k|_1 + |l|`.
    pub fn order(&self) -> u32 {
        self.k.iter().map(|x| x.unsigned_abs()).sum::<u32>() + self.l.unsigned_abs()
    }

    pub fn k_norm(&self) -> u32 {
        self.k.iter().map(|x| x.unsigned_abs()).sum()
    }

    pub fn euclid(&self) -> f64 {
        let s: f64 = self.k.iter().map(|&x| (x as f64).powi(2)).sum();
        (s + (self.l as f64).powi(2)).sqrt()
    }

    pub fn neg(&self) -> ModeIndex {
        ModeIndex { k: self.k.iter().map(|x| -x).collect(), l: -self.l }
    }

    pub fn is_zero(&self) -> bool {
        self.l == 0 && self.k_is_zero()
    }

    pub fn k_is_zero(&self) -> bool {
        self.k.iter().all(|&x| x == 0)
    }

    pub fn phase(&self, theta: &[f64], t: f64) -> f64 {
        self.k.iter().zip(theta).map(|(&k, &x)| k as f64 * x).sum::<f64>() + self.l as f64 * t
    }

    fn add(&self, other: &ModeIndex) -> ModeIndex {
        ModeIndex {
            k: self.k.iter().zip(&other.k).map(|(a, b)| a + b).collect(),
            l: self.l + other.l,
        }
    }
}

impl std::fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(k={:?}, l={})", self.k, self.l)
    }
}

/// Analyticity domain `D(s, r)`: angle strip width `s`, action polydisc radius `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub s: f64,
    pub r: f64,
    pub center: Vec<f64>,
}

impl Domain {
    pub fn new(s: f64, r: f64, center: Vec<f64>) -> Result<Domain> {
        if !(s >= 0.0 && r >= 0.0) {
            return Err(KamError::InvalidParameter(format!("domain needs s, r >= 0 (got s={s}, r={r})")));
        }
        Ok(Domain { s, r, center })
    }
}

/// Differentiation variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    Angle(usize),
    Time,
    Action(usize),
}

/// Which periodic variables [`FourierTaylorSeries::zero_mode`] averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Average {
    Angles,
    AnglesAndTime,
}

#[derive(Clone, Debug)]
pub struct FourierTaylorSeries {
    center: Vec<f64>,
    layout: Arc<Layout>,
    cutoff: u32,
    coeffs: BTreeMap<ModeIndex, Taylor>,
}

impl PartialEq for FourierTaylorSeries {
    fn eq(&self, other: &Self) -> bool {
        self.center == other.center
            && self.layout.degree() == other.layout.degree()
            && self.cutoff == other.cutoff
            && self.coeffs == other.coeffs
    }
}

fn same_center(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-15 * (1.0 + x.abs()))
}

impl FourierTaylorSeries {
    pub fn zero(center: Vec<f64>, degree: usize, cutoff: u32) -> FourierTaylorSeries {
        let layout = layout(center.len(), degree);
        FourierTaylorSeries { center, layout, cutoff, coeffs: BTreeMap::new() }
    }

    pub fn constant(center: Vec<f64>, degree: usize, v: f64) -> FourierTaylorSeries {
        let mut f = FourierTaylorSeries::zero(center, degree, 0);
        let d = f.dim();
        let p = Taylor::real(&f.layout, v);
        f.coeffs.insert(ModeIndex::zero(d), p);
        f.drop_zeros();
        f
    }

    /// Series from `(mode, coefficient)` pairs; the cutoff is the largest mode order.
    pub fn from_modes<It>(center: Vec<f64>, degree: usize, modes: It) -> Result<FourierTaylorSeries>
    where
        It: IntoIterator<Item = (ModeIndex, Taylor)>,
    {
        let mut f = FourierTaylorSeries::zero(center, degree, 0);
        for (m, p) in modes {
            f.check_mode(&m)?;
            if p.dim() != f.dim() || p.degree() != degree {
                return Err(KamError::DimensionMismatch { expected: f.layout.len(), got: p.coeffs().len() });
            }
            f.cutoff = f.cutoff.max(m.order());
            *f.coeffs.entry(m).or_insert_with(|| Taylor::zero(&p.layout().clone())) += &p;
        }
        f.drop_zeros();
        Ok(f)
    }

    /// Pure action polynomial (only the zero mode).
    pub fn action_polynomial(center: Vec<f64>, p: Taylor) -> FourierTaylorSeries {
        let d = center.len();
        let degree = p.degree();
        FourierTaylorSeries::from_modes(center, degree, [(ModeIndex::zero(d), p)])
            .expect("zero mode is always admissible")
    }

    fn check_mode(&self, m: &ModeIndex) -> Result<()> {
        if m.k.len() != self.dim() {
            return Err(KamError::DimensionMismatch { expected: self.dim(), got: m.k.len() });
        }
        Ok(())
    }

    /// Set one coefficient, raising the cutoff if needed.
    pub fn insert(&mut self, m: ModeIndex, p: Taylor) -> Result<()> {
        self.check_mode(&m)?;
        self.cutoff = self.cutoff.max(m.order());
        if p.is_zero() {
            self.coeffs.remove(&m);
        } else {
            self.coeffs.insert(m, p.relayout(&self.layout));
        }
        Ok(())
    }

    /// Add a real-valued term `c * cos(<k,theta> + l t)` (or `sin`) times a constant.
    pub fn add_trig(&mut self, k: Vec<i32>, l: i32, amp: f64, sine: bool) -> Result<()> {
        let m = ModeIndex::new(k, l);
        if m.is_zero() {
            if !sine {
                let p = self.coeff(&m).add_scalar(C64::new(amp, 0.0));
                self.insert(m, p)?;
            }
            return Ok(());
        }
        let (a, b) = if sine { (C64::new(0.0, -amp / 2.0), C64::new(0.0, amp / 2.0)) } else { (C64::new(amp / 2.0, 0.0), C64::new(amp / 2.0, 0.0)) };
        let neg = m.neg();
        let pa = self.coeff(&m).add_scalar(a);
        let pb = self.coeff(&neg).add_scalar(b);
        self.insert(m, pa)?;
        self.insert(neg, pb)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn degree(&self) -> usize {
        self.layout.degree()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn cutoff(&self) -> u32 {
        self.cutoff
    }

    pub fn with_cutoff(mut self, cutoff: u32) -> FourierTaylorSeries {
        self.cutoff = self.cutoff.max(cutoff);
        self
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.values().all(Taylor::is_zero)
    }

    pub fn modes(&self) -> impl Iterator<Item = (&ModeIndex, &Taylor)> {
        self.coeffs.iter()
    }

    pub fn get(&self, m: &ModeIndex) -> Option<&Taylor> {
        self.coeffs.get(m)
    }

    /// Coefficient at `m`, zero if absent.
    pub fn coeff(&self, m: &ModeIndex) -> Taylor {
        self.coeffs.get(m).cloned().unwrap_or_else(|| Taylor::zero(&self.layout))
    }

    fn drop_zeros(&mut self) {
        self.coeffs.retain(|_, p| !p.is_zero());
    }

    fn require_center(&self, other: &FourierTaylorSeries) -> Result<()> {
        if !same_center(&self.center, &other.center) {
            return Err(KamError::CenterMismatch { left: self.center.clone(), right: other.center.clone() });
        }
        if self.degree() != other.degree() {
            return Err(KamError::DimensionMismatch { expected: self.degree(), got: other.degree() });
        }
        Ok(())
    }

    /// Same function stored with a different Taylor degree (truncating or zero-padding).
    pub fn with_degree(&self, degree: usize) -> FourierTaylorSeries {
        let target = layout(self.dim(), degree);
        let coeffs = self.coeffs.iter().map(|(m, p)| (m.clone(), p.relayout(&target))).collect();
        let mut f = FourierTaylorSeries { center: self.center.clone(), layout: target, cutoff: self.cutoff, coeffs };
        f.drop_zeros();
        f
    }

    /// Coefficient majorant `sum_{k,l} sum_a |c_a| r^|a| e^{(|k|+|l|) s}`.
    pub fn majorant_norm(&self, dom: &Domain) -> Result<f64> {
        if !same_center(&self.center, &dom.center) {
            return Err(KamError::CenterMismatch { left: self.center.clone(), right: dom.center.clone() });
        }
        Ok(self
            .coeffs
            .iter()
            .map(|(m, p)| p.majorant(dom.r) * (m.order() as f64 * dom.s).exp())
            .sum())
    }

    /// Largest coefficient magnitude over all modes and monomials.
    pub fn max_coeff(&self) -> f64 {
        self.coeffs.values().map(Taylor::max_abs).fold(0.0, f64::max)
    }

    pub fn add(&self, other: &FourierTaylorSeries) -> Result<FourierTaylorSeries> {
        self.require_center(other)?;
        let mut out = self.clone();
        out.cutoff = self.cutoff.max(other.cutoff);
        for (m, p) in &other.coeffs {
            *out.coeffs.entry(m.clone()).or_insert_with(|| Taylor::zero(&self.layout)) += p;
        }
        out.drop_zeros();
        Ok(out)
    }

    pub fn sub(&self, other: &FourierTaylorSeries) -> Result<FourierTaylorSeries> {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, k: C64) -> FourierTaylorSeries {
        let mut out = self.clone();
        for p in out.coeffs.values_mut() {
            *p = p.scale(k);
        }
        out.drop_zeros();
        out
    }

    pub fn scale_re(&self, k: f64) -> FourierTaylorSeries {
        self.scale(C64::new(k, 0.0))
    }

    /// Exact product (cutoff is the sum of both cutoffs), Taylor-truncated.
    pub fn mul(&self, other: &FourierTaylorSeries) -> Result<FourierTaylorSeries> {
        self.mul_truncated(other, self.cutoff + other.cutoff)
    }

    /// Product keeping only modes of order `<= cutoff`.
    pub fn mul_truncated(&self, other: &FourierTaylorSeries, cutoff: u32) -> Result<FourierTaylorSeries> {
        self.require_center(other)?;
        let mut out = FourierTaylorSeries::zero(self.center.clone(), self.degree(), cutoff);
        for (ma, pa) in &self.coeffs {
            for (mb, pb) in &other.coeffs {
                let m = ma.add(mb);
                if m.order() > cutoff {
                    continue;
                }
                let prod = pa * pb;
                *out.coeffs.entry(m).or_insert_with(|| Taylor::zero(&self.layout)) += &prod;
            }
        }
        out.drop_zeros();
        Ok(out)
    }

    pub fn derive(&self, var: Var) -> Result<FourierTaylorSeries> {
        let mut out = FourierTaylorSeries::zero(self.center.clone(), self.degree(), self.cutoff);
        match var {
            Var::Angle(j) => {
                if j >= self.dim() {
                    return Err(KamError::DimensionMismatch { expected: self.dim(), got: j + 1 });
                }
                for (m, p) in &self.coeffs {
                    out.coeffs.insert(m.clone(), p.scale(I * m.k[j] as f64));
                }
            }
            Var::Time => {
                for (m, p) in &self.coeffs {
                    out.coeffs.insert(m.clone(), p.scale(I * m.l as f64));
                }
            }
            Var::Action(j) => {
                if self.degree() == 0 {
                    return Err(KamError::DegreeZeroDerivative);
                }
                if j >= self.dim() {
                    return Err(KamError::DimensionMismatch { expected: self.dim(), got: j + 1 });
                }
                for (m, p) in &self.coeffs {
                    out.coeffs.insert(m.clone(), p.deriv(j));
                }
            }
        }
        out.drop_zeros();
        Ok(out)
    }

    /// Antiderivative in `t` of the `l != 0` part; modes with `l = 0` are dropped.
    pub fn antiderive_t(&self) -> FourierTaylorSeries {
        let mut out = FourierTaylorSeries::zero(self.center.clone(), self.degree(), self.cutoff);
        for (m, p) in &self.coeffs {
            if m.l != 0 {
                out.coeffs.insert(m.clone(), p.scale(1.0 / (I * m.l as f64)));
            }
        }
        out
    }

    /// `(low, high)` with `low` holding exactly the modes of order `<= k`.
    pub fn split_by_cutoff(&self, k: u32) -> (FourierTaylorSeries, FourierTaylorSeries) {
        let mut low = FourierTaylorSeries::zero(self.center.clone(), self.degree(), k.min(self.cutoff));
        let mut high = FourierTaylorSeries::zero(self.center.clone(), self.degree(), self.cutoff);
        for (m, p) in &self.coeffs {
            if m.order() <= k {
                low.coeffs.insert(m.clone(), p.clone());
            } else {
                high.coeffs.insert(m.clone(), p.clone());
            }
        }
        (low, high)
    }

    /// Keep the modes for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(&ModeIndex) -> bool) -> FourierTaylorSeries {
        let mut out = self.clone();
        out.coeffs.retain(|m, _| keep(m));
        out
    }

    /// Mean over the angles (keeps `t`), or over angles and time.
    pub fn zero_mode(&self, over: Average) -> FourierTaylorSeries {
        match over {
            Average::Angles => self.filter(|m| m.k_is_zero()),
            Average::AnglesAndTime => self.filter(|m| m.is_zero()),
        }
    }

    /// Re-expand every coefficient about a new center (exact polynomial shift).
    pub fn recenter(&self, new_center: &[f64]) -> Result<FourierTaylorSeries> {
        if new_center.len() != self.dim() {
            return Err(KamError::DimensionMismatch { expected: self.dim(), got: new_center.len() });
        }
        let shift: Vec<f64> = new_center.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let coeffs = self.coeffs.iter().map(|(m, p)| (m.clone(), p.rebase(&shift))).collect();
        let mut out = FourierTaylorSeries { center: new_center.to_vec(), layout: self.layout.clone(), cutoff: self.cutoff, coeffs };
        out.drop_zeros();
        Ok(out)
    }

    /// Drop modes whose largest coefficient is below `tol`.
    pub fn prune(&self, tol: f64) -> FourierTaylorSeries {
        let mut out = self.clone();
        out.coeffs.retain(|_, p| p.max_abs() > tol);
        out
    }

    /// Largest violation of `c(-m) = conj(c(m))`.
    pub fn reality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (m, p) in &self.coeffs {
            let q = self.coeff(&m.neg()).conj();
            worst = worst.max((p - &q).max_abs());
        }
        worst
    }

    /// Project onto real-valued functions: `c(m) <- (c(m) + conj(c(-m)))/2`.
    pub fn symmetrize(&self) -> FourierTaylorSeries {
        let mut out = FourierTaylorSeries::zero(self.center.clone(), self.degree(), self.cutoff);
        let keys: Vec<ModeIndex> = self.coeffs.keys().flat_map(|m| [m.clone(), m.neg()]).collect();
        for m in keys {
            if out.coeffs.contains_key(&m) {
                continue;
            }
            let p = &self.coeff(&m) + &self.coeff(&m.neg()).conj();
            out.coeffs.insert(m, p.scale_re(0.5));
        }
        out.drop_zeros();
        out
    }

    /// Value at a real point.
    pub fn eval(&self, theta: &[f64], t: f64, action: &[f64]) -> C64 {
        let x: Vec<C64> = action.iter().zip(&self.center).map(|(a, c)| C64::new(a - c, 0.0)).collect();
        let mono = scalar_monomials(&self.layout, &x);
        self.coeffs
            .iter()
            .map(|(m, p)| {
                let v: C64 = p.coeffs().iter().zip(&mono).map(|(a, b)| a * b).sum();
                v * C64::from_polar(1.0, m.phase(theta, t))
            })
            .sum()
    }

    /// Value at jet arguments: angles and absolute actions as jets sharing one layout.
    pub fn eval_jet(&self, theta: &[Taylor], t: f64, action: &[Taylor]) -> Taylor {
        let target = action[0].layout().clone();
        let offsets: Vec<Taylor> =
            action.iter().zip(&self.center).map(|(a, &c)| a.add_scalar(C64::new(-c, 0.0))).collect();
        let mono = jet_monomials(&self.layout, &offsets);
        let kmax = self.coeffs.keys().map(|m| m.k_norm()).max().unwrap_or(0) as usize;
        let powers = AnglePowers::new(theta, kmax);
        let mut total = Taylor::zero(&target);
        let mut acc = Taylor::zero(&target);
        let mut iter = self.coeffs.iter().peekable();
        while let Some((m, p)) = iter.next() {
            let e = C64::from_polar(1.0, m.l as f64 * t);
            for (c, mo) in p.coeffs().iter().zip(&mono) {
                if c.re != 0.0 || c.im != 0.0 {
                    acc.axpy(c * e, mo);
                }
            }
            let last_of_k = iter.peek().is_none_or(|(n, _)| n.k != m.k);
            if last_of_k {
                total += &powers.mul_by(&m.k, &acc);
                acc = Taylor::zero(&target);
            }
        }
        total
    }

    pub fn to_record(&self) -> SeriesRecord {
        SeriesRecord {
            center: self.center.clone(),
            taylor_degree: self.degree(),
            angle_cutoff: self.cutoff,
            modes: self
                .coeffs
                .iter()
                .map(|(m, p)| ModeRecord {
                    k: m.k.clone(),
                    l: m.l,
                    coeffs: p.coeffs().iter().map(|z| [z.re, z.im]).collect(),
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &SeriesRecord) -> Result<FourierTaylorSeries> {
        let lay = layout(rec.center.len(), rec.taylor_degree);
        let mut f = FourierTaylorSeries::zero(rec.center.clone(), rec.taylor_degree, rec.angle_cutoff);
        for mr in &rec.modes {
            if mr.coeffs.len() != lay.len() {
                return Err(KamError::DimensionMismatch { expected: lay.len(), got: mr.coeffs.len() });
            }
            let m = ModeIndex::new(mr.k.clone(), mr.l);
            f.check_mode(&m)?;
            if m.order() > rec.angle_cutoff {
                return Err(KamError::CutoffExceeded { order: m.order(), cutoff: rec.angle_cutoff });
            }
            let c = mr.coeffs.iter().map(|&[re, im]| C64::new(re, im)).collect();
            f.coeffs.insert(m, Taylor::from_coeffs(&lay, c));
        }
        Ok(f)
    }
}

/// `exp(i n theta_j)` for `|n| <= kmax`, as jets.
struct AnglePowers {
    pos: Vec<Vec<Taylor>>,
    neg: Vec<Vec<Taylor>>,
}

impl AnglePowers {
    fn new(theta: &[Taylor], kmax: usize) -> AnglePowers {
        let mut pos = Vec::with_capacity(theta.len());
        let mut neg = Vec::with_capacity(theta.len());
        for th in theta {
            let one = Taylor::real(th.layout(), 1.0);
            let (ep, en) = if kmax > 0 { (th.scale(I).exp(), th.scale(-I).exp()) } else { (one.clone(), one.clone()) };
            let mut p = vec![one.clone()];
            let mut n = vec![one];
            for i in 1..=kmax {
                p.push(&p[i - 1] * &ep);
                n.push(&n[i - 1] * &en);
            }
            pos.push(p);
            neg.push(n);
        }
        AnglePowers { pos, neg }
    }

    fn get(&self, j: usize, k: i32) -> &Taylor {
        if k >= 0 {
            &self.pos[j][k as usize]
        } else {
            &self.neg[j][(-k) as usize]
        }
    }

    fn mul_by(&self, k: &[i32], x: &Taylor) -> Taylor {
        let mut out = x.clone();
        for (j, &kj) in k.iter().enumerate() {
            if kj != 0 {
                out = &out * self.get(j, kj);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub k: Vec<i32>,
    pub l: i32,
    /// Taylor coefficients in graded monomial order as `[re, im]` pairs.
    pub coeffs: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub center: Vec<f64>,
    pub taylor_degree: usize,
    pub angle_cutoff: u32,
    pub modes: Vec<ModeRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn c1(v: f64) -> C64 {
        C64::new(v, 0.0)
    }

    fn single(d: usize, k: Vec<i32>, l: i32, amp: C64) -> FourierTaylorSeries {
        let lay = layout(d, 2);
        FourierTaylorSeries::from_modes(vec![1.5; d], 2, [(ModeIndex::new(k, l), Taylor::constant(&lay, amp))]).unwrap()
    }

    fn cos_series(d: usize, k: Vec<i32>, l: i32, amp: f64) -> FourierTaylorSeries {
        let mut f = FourierTaylorSeries::zero(vec![1.5; d], 2, 0);
        f.add_trig(k, l, amp, false).unwrap();
        f
    }

    /// Sup of |f| over a dense real grid in (theta, t) at the center action.
    fn sampled_sup(f: &FourierTaylorSeries, n: usize) -> f64 {
        let mut sup: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let th = 2.0 * PI * i as f64 / n as f64;
                let t = 2.0 * PI * j as f64 / n as f64;
                sup = sup.max(f.eval(&[th], t, f.center()).norm());
            }
        }
        sup
    }

    #[test]
    fn majorant_of_constant() {
        let f = FourierTaylorSeries::constant(vec![1.2], 2, 1.0);
        let dom = Domain::new(0.7, 0.1, vec![1.2]).unwrap();
        assert_eq!(f.majorant_norm(&dom).unwrap(), 1.0);
    }

    #[test]
    fn majorant_of_single_mode_vs_complex_sampling() {
        let f = single(1, vec![1], 1, c1(1.0));
        let dom = Domain::new(0.1, 0.0, vec![1.5]).unwrap();
        let norm = f.majorant_norm(&dom).unwrap();
        assert!((norm - 0.2f64.exp()).abs() < 1e-15);
        // |e^{i(theta+t)}| at Im theta = Im t = -0.1 is the sup over the strip
        let mut sup: f64 = 0.0;
        for i in 0..64 {
            for y1 in [-0.1, 0.0, 0.1] {
                for y2 in [-0.1, 0.0, 0.1] {
                    let x = 2.0 * PI * i as f64 / 64.0;
                    let z = C64::new(x, y1) + C64::new(x / 3.0, y2);
                    sup = sup.max((I * z).exp().norm());
                }
            }
        }
        assert!((sup - norm).abs() < 1e-14);
    }

    #[test]
    fn majorant_of_two_cos() {
        let f = cos_series(1, vec![1], 0, 2.0);
        let dom = Domain::new(0.0, 0.0, vec![1.5]).unwrap();
        assert!((f.majorant_norm(&dom).unwrap() - 2.0).abs() < 1e-15);
        assert!((sampled_sup(&f, 64) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn majorant_center_mismatch() {
        let f = FourierTaylorSeries::constant(vec![1.2], 2, 1.0);
        let dom = Domain::new(0.1, 0.1, vec![1.3]).unwrap();
        assert!(matches!(f.majorant_norm(&dom), Err(KamError::CenterMismatch { .. })));
    }

    #[test]
    fn add_zero_and_mode_cancellation() {
        let f = cos_series(1, vec![2], -1, 0.3);
        let z = FourierTaylorSeries::zero(vec![1.5], 2, 0);
        assert_eq!(f.add(&z).unwrap().to_record().modes, f.to_record().modes);
        let p = single(1, vec![1], 0, c1(1.0)).mul(&single(1, vec![-1], 0, c1(1.0))).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.get(&ModeIndex::zero(1)).unwrap().value(), c1(1.0));
    }

    #[test]
    fn cos_squared_identity() {
        let f = cos_series(1, vec![1], 0, 1.0);
        let sq = f.mul(&f).unwrap();
        for i in 0..50 {
            let th = 0.37 * i as f64;
            let want = 0.5 + 0.5 * (2.0 * th).cos();
            assert!((sq.eval(&[th], 0.0, &[1.5]) - want).norm() < 1e-15);
        }
        assert!((sq.coeff(&ModeIndex::zero(1)).value() - 0.5).norm() < 1e-16);
    }

    #[test]
    fn center_mismatch_is_rejected() {
        let f = FourierTaylorSeries::constant(vec![1.2], 2, 1.0);
        let g = FourierTaylorSeries::constant(vec![1.3], 2, 1.0);
        assert!(matches!(f.add(&g), Err(KamError::CenterMismatch { .. })));
        assert!(matches!(f.mul(&g), Err(KamError::CenterMismatch { .. })));
    }

    #[test]
    fn derive_rules() {
        let c = FourierTaylorSeries::constant(vec![1.0], 2, 3.0);
        assert!(c.derive(Var::Time).unwrap().is_zero());
        let f = single(1, vec![2], 1, c1(1.0));
        let df = f.derive(Var::Angle(0)).unwrap();
        assert_eq!(df.coeff(&ModeIndex::new(vec![2], 1)).value(), C64::new(0.0, 2.0));
        let f0 = FourierTaylorSeries::constant(vec![1.0], 0, 3.0);
        assert!(matches!(f0.derive(Var::Action(0)), Err(KamError::DegreeZeroDerivative)));
    }

    #[test]
    fn cauchy_bound_holds() {
        let lay = layout(1, 2);
        let modes = (-10..=10).map(|k: i32| {
            (ModeIndex::new(vec![k], 0), Taylor::real(&lay, (-(k.abs() as f64)).exp()))
        });
        let f = FourierTaylorSeries::from_modes(vec![1.0], 2, modes).unwrap();
        let df = f.derive(Var::Angle(0)).unwrap();
        let (s, delta) = (1.0, 0.5);
        let lhs = df.majorant_norm(&Domain::new(s - delta, 0.0, vec![1.0]).unwrap()).unwrap();
        let rhs = f.majorant_norm(&Domain::new(s, 0.0, vec![1.0]).unwrap()).unwrap() / (std::f64::consts::E * delta);
        assert!(lhs <= rhs, "{lhs} > {rhs}");
    }

    #[test]
    fn split_partitions() {
        let mut f = FourierTaylorSeries::constant(vec![1.0], 2, 1.0);
        f.insert(ModeIndex::new(vec![5], 0), Taylor::real(&layout(1, 2), 1.0)).unwrap();
        let (lo, hi) = f.split_by_cutoff(2);
        assert_eq!(lo.len(), 1);
        assert!(lo.get(&ModeIndex::zero(1)).is_some());
        assert_eq!(hi.len(), 1);
        assert!(hi.get(&ModeIndex::new(vec![5], 0)).is_some());
        let (_, none) = f.split_by_cutoff(f.cutoff());
        assert!(none.is_empty());
    }

    #[test]
    fn tail_norm_follows_exponential_pattern() {
        // |f(k,l)| = e^{-(|k|+|l|) s0}; tail beyond K at width s0/2 should scale like
        // K^{d+1} e^{-K s0/2} (d = 1).
        let s0 = 0.8;
        let lay = layout(1, 0);
        let n = 80;
        let mut modes = Vec::new();
        for k in -n..=n {
            for l in -n..=n {
                let m = ModeIndex::new(vec![k], l);
                if m.order() as i32 <= n {
                    modes.push((m.clone(), Taylor::real(&lay, (-(m.order() as f64) * s0).exp())));
                }
            }
        }
        let f = FourierTaylorSeries::from_modes(vec![1.0], 0, modes).unwrap();
        let dom = Domain::new(s0 / 2.0, 0.0, vec![1.0]).unwrap();
        let tails: Vec<(f64, f64)> = [10u32, 20, 30, 40]
            .iter()
            .map(|&k| {
                let (_, hi) = f.split_by_cutoff(k);
                (k as f64, hi.majorant_norm(&dom).unwrap())
            })
            .collect();
        let envelope = |k: f64, p: i32| k.powi(p) * (-k * s0 / 2.0).exp();
        let c = tails[0].1 / envelope(tails[0].0, 2);
        for &(k, tail) in &tails {
            assert!(tail <= c * envelope(k, 2) * (1.0 + 1e-12), "K={k}: {tail}");
        }
        // the tail is in fact sharper by one power of K
        let ratios: Vec<f64> = tails.iter().map(|&(k, t)| t / envelope(k, 1)).collect();
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
        assert!(hi / lo < 1.5, "{ratios:?}");
    }

    #[test]
    fn zero_mode_examples() {
        let mut f = FourierTaylorSeries::constant(vec![1.0], 2, 3.0);
        f.add_trig(vec![1], 0, 1.0, false).unwrap();
        let avg = f.zero_mode(Average::Angles);
        assert_eq!(avg.len(), 1);
        assert_eq!(avg.coeff(&ModeIndex::zero(1)).value(), c1(3.0));

        let g = cos_series(1, vec![0], 1, 1.0);
        assert_eq!(g.zero_mode(Average::Angles), g);

        let h = cos_series(1, vec![1], -1, 1.0);
        assert!(h.zero_mode(Average::AnglesAndTime).is_zero());
    }

    #[test]
    fn recenter_preserves_values() {
        let lay = layout(2, 3);
        let x = Taylor::variable(&lay, 0, 0.0);
        let y = Taylor::variable(&lay, 1, 0.0);
        let p = &(&x * &y) + &(&x * &x).scale_re(0.5);
        let f = FourierTaylorSeries::from_modes(vec![1.0, 1.5], 3, [(ModeIndex::new(vec![1, 0], 0), p.clone()), (ModeIndex::new(vec![-1, 0], 0), p)]).unwrap();
        let g = f.recenter(&[1.1, 1.4]).unwrap();
        let pt = [1.05, 1.45];
        assert!((f.eval(&[0.3, 0.2], 0.1, &pt) - g.eval(&[0.3, 0.2], 0.1, &pt)).norm() < 1e-15);
    }

    #[test]
    fn eval_jet_matches_scalar_eval() {
        let mut f = cos_series(2, vec![1, -2], 3, 0.7);
        f.add_trig(vec![0, 1], -1, 0.2, true).unwrap();
        let lay = layout(2, 0);
        let th = [Taylor::real(&lay, 0.4), Taylor::real(&lay, -1.1)];
        let act = [Taylor::real(&lay, 1.5), Taylor::real(&lay, 1.5)];
        let jet = f.eval_jet(&th, 0.9, &act).value();
        assert!((jet - f.eval(&[0.4, -1.1], 0.9, &[1.5, 1.5])).norm() < 1e-15);
    }

    fn arb_series(d: usize, deg: usize, kmax: i32) -> impl Strategy<Value = FourierTaylorSeries> {
        let lay = layout(d, deg);
        let n = lay.len();
        prop::collection::vec(
            (prop::collection::vec(-kmax..=kmax, d), -kmax..=kmax, prop::collection::vec(-1.0f64..1.0, n)),
            0..12,
        )
        .prop_map(move |terms| {
            let mut f = FourierTaylorSeries::zero(vec![1.25; d], deg, 0);
            for (k, l, c) in terms {
                let m = ModeIndex::new(k, l);
                let p = Taylor::from_coeffs(&lay, c.iter().map(|&v| c1(v)).collect());
                let q = &f.coeff(&m) + &p;
                let r = &f.coeff(&m.neg()) + &p.conj();
                f.insert(m.clone(), q).unwrap();
                if !m.is_zero() {
                    f.insert(m.neg(), r).unwrap();
                }
            }
            f.symmetrize()
        })
    }

    proptest! {
        #[test]
        fn majorant_dominates_sampling(f in arb_series(1, 2, 6)) {
            let dom = Domain::new(0.0, 0.0, vec![1.25]).unwrap();
            prop_assert!(f.majorant_norm(&dom).unwrap() >= sampled_sup(&f, 32) - 1e-12);
        }

        #[test]
        fn majorant_monotone(f in arb_series(2, 2, 4), s in 0.0f64..1.0, r in 0.0f64..0.5) {
            let c = vec![1.25; 2];
            let a = f.majorant_norm(&Domain::new(s, r, c.clone()).unwrap()).unwrap();
            let b = f.majorant_norm(&Domain::new(s + 0.1, r + 0.1, c).unwrap()).unwrap();
            prop_assert!(b >= a);
        }

        #[test]
        fn product_is_submultiplicative(f in arb_series(1, 2, 5), g in arb_series(1, 2, 5)) {
            let dom = Domain::new(0.3, 0.2, vec![1.25]).unwrap();
            let lhs = f.mul(&g).unwrap().majorant_norm(&dom).unwrap();
            let rhs = f.majorant_norm(&dom).unwrap() * g.majorant_norm(&dom).unwrap();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn operations_preserve_reality(f in arb_series(1, 2, 5), g in arb_series(1, 2, 5)) {
            prop_assert!(f.add(&g).unwrap().reality_defect() < 1e-14);
            prop_assert!(f.mul(&g).unwrap().reality_defect() < 1e-13);
            prop_assert!(f.derive(Var::Angle(0)).unwrap().reality_defect() < 1e-13);
            prop_assert!(f.derive(Var::Action(0)).unwrap().reality_defect() < 1e-13);
            prop_assert!(f.recenter(&[1.3]).unwrap().reality_defect() < 1e-13);
        }

        #[test]
        fn split_reconstructs(f in arb_series(2, 1, 5), k in 0u32..12) {
            let (lo, hi) = f.split_by_cutoff(k);
            prop_assert!(lo.modes().all(|(m, _)| m.order() <= k));
            prop_assert!(hi.modes().all(|(m, _)| m.order() > k));
            prop_assert_eq!(lo.add(&hi).unwrap().to_record().modes, f.to_record().modes);
        }

        #[test]
        fn time_antiderivative_roundtrip(f in arb_series(1, 2, 5)) {
            let zero_mean = f.filter(|m| m.l != 0);
            let back = zero_mean.antiderive_t().derive(Var::Time).unwrap();
            prop_assert!(back.sub(&zero_mean).unwrap().max_coeff() < 1e-15);
        }

        #[test]
        fn record_roundtrip_is_bit_exact(f in arb_series(2, 2, 4)) {
            let text = serde_json::to_string(&f.to_record()).unwrap();
            let rec: SeriesRecord = serde_json::from_str(&text).unwrap();
            let g = FourierTaylorSeries::from_record(&rec).unwrap();
            prop_assert_eq!(g, f);
        }
    }
}
