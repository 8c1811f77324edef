//! Truncated multivariate Taylor polynomials with complex coefficients.
//!
//! The same type serves two roles: the action dependence of a Fourier
//! coefficient (a polynomial in `I - center`), and forward-mode jets used to
//! push action variations through maps and compositions. All products are
//! truncated at the layout degree.

use std::collections::HashMap;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::{Arc, LazyLock, Mutex};

use num_complex::Complex64 as C64;

/// Monomial bookkeeping for polynomials in `dim` variables of total degree `<= degree`.
#[derive(Debug)]
pub struct Layout {
    dim: usize,
    degree: usize,
    exps: Vec<Vec<u8>>,
    degs: Vec<usize>,
    index: HashMap<Vec<u8>, usize>,
    /// `(idx(alpha - e_j), j)` for every monomial of degree >= 1.
    parent: Vec<Option<(usize, usize)>>,
    /// `lower[j][i]` is the index of `exps[i] - e_j`, if that is a valid exponent.
    lower: Vec<Vec<Option<usize>>>,
    mul: Vec<(u32, u32, u32)>,
}

impl Layout {
    fn build(dim: usize, degree: usize) -> Layout {
        let mut exps: Vec<Vec<u8>> = vec![vec![0; dim]];
        let mut frontier = vec![vec![0u8; dim]];
        for _ in 0..degree {
            let mut next: Vec<Vec<u8>> = Vec::new();
            for e in &frontier {
                // graded order: only raise variables at or after the last nonzero one
                let last = e.iter().rposition(|&x| x > 0).unwrap_or(0);
                for j in last..dim {
                    let mut f = e.clone();
                    f[j] += 1;
                    next.push(f);
                }
            }
            exps.extend(next.iter().cloned());
            frontier = next;
        }
        let degs: Vec<usize> = exps.iter().map(|e| e.iter().map(|&x| x as usize).sum()).collect();
        let index: HashMap<Vec<u8>, usize> =
            exps.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let parent = exps
            .iter()
            .map(|e| {
                let j = e.iter().position(|&x| x > 0)?;
                let mut f = e.clone();
                f[j] -= 1;
                Some((index[&f], j))
            })
            .collect();
        let lower = (0..dim)
            .map(|j| {
                exps.iter()
                    .map(|e| {
                        if e[j] == 0 {
                            return None;
                        }
                        let mut f = e.clone();
                        f[j] -= 1;
                        Some(index[&f])
                    })
                    .collect()
            })
            .collect();
        let mut mul = Vec::new();
        for (i, a) in exps.iter().enumerate() {
            for (j, b) in exps.iter().enumerate() {
                if degs[i] + degs[j] > degree {
                    continue;
                }
                let s: Vec<u8> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                mul.push((i as u32, j as u32, index[&s] as u32));
            }
        }
        Layout { dim, degree, exps, degs, index, parent, lower, mul }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u8>] {
        &self.exps
    }

    pub fn monomial_degree(&self, i: usize) -> usize {
        self.degs[i]
    }

    pub fn index_of(&self, exp: &[u8]) -> Option<usize> {
        self.index.get(exp).copied()
    }
}

type LayoutCache = Mutex<HashMap<(usize, usize), Arc<Layout>>>;

static LAYOUTS: LazyLock<LayoutCache> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Shared layout for `dim` variables truncated at total degree `degree`.
pub fn layout(dim: usize, degree: usize) -> Arc<Layout> {
    let mut cache = LAYOUTS.lock().expect("layout cache poisoned");
    cache
        .entry((dim, degree))
        .or_insert_with(|| Arc::new(Layout::build(dim, degree)))
        .clone()
}

#[derive(Clone, Debug)]
pub struct Taylor {
    layout: Arc<Layout>,
    c: Vec<C64>,
}

impl PartialEq for Taylor {
    fn eq(&self, other: &Self) -> bool {
        self.layout.dim == other.layout.dim
            && self.layout.degree == other.layout.degree
            && self.c == other.c
    }
}

impl Taylor {
    pub fn zero(layout: &Arc<Layout>) -> Taylor {
        Taylor { layout: layout.clone(), c: vec![C64::new(0.0, 0.0); layout.len()] }
    }

    pub fn constant(layout: &Arc<Layout>, v: C64) -> Taylor {
        let mut t = Taylor::zero(layout);
        t.c[0] = v;
        t
    }

    pub fn real(layout: &Arc<Layout>, v: f64) -> Taylor {
        Taylor::constant(layout, C64::new(v, 0.0))
    }

    /// The jet `value + x_j`.
    pub fn variable(layout: &Arc<Layout>, j: usize, value: f64) -> Taylor {
        let mut t = Taylor::real(layout, value);
        if layout.degree >= 1 {
            let mut e = vec![0u8; layout.dim];
            e[j] = 1;
            t.c[layout.index[&e]] = C64::new(1.0, 0.0);
        }
        t
    }

    pub fn from_coeffs(layout: &Arc<Layout>, c: Vec<C64>) -> Taylor {
        assert_eq!(c.len(), layout.len(), "coefficient count does not match layout");
        Taylor { layout: layout.clone(), c }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.c
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.c
    }

    pub fn value(&self) -> C64 {
        self.c[0]
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn degree(&self) -> usize {
        self.layout.degree
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|z| z.re == 0.0 && z.im == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.c.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `sum_a |c_a| r^|a|`: sup bound over the polydisc of radius `r`.
    pub fn majorant(&self, r: f64) -> f64 {
        self.c
            .iter()
            .zip(&self.layout.degs)
            .map(|(z, &d)| z.norm() * r.powi(d as i32))
            .sum()
    }

    pub fn conj(&self) -> Taylor {
        Taylor { layout: self.layout.clone(), c: self.c.iter().map(|z| z.conj()).collect() }
    }

    pub fn scale(&self, k: C64) -> Taylor {
        Taylor { layout: self.layout.clone(), c: self.c.iter().map(|z| z * k).collect() }
    }

    pub fn scale_re(&self, k: f64) -> Taylor {
        Taylor { layout: self.layout.clone(), c: self.c.iter().map(|z| z * k).collect() }
    }

    pub fn add_scalar(&self, v: C64) -> Taylor {
        let mut out = self.clone();
        out.c[0] += v;
        out
    }

    /// `out += k * other`.
    pub fn axpy(&mut self, k: C64, other: &Taylor) {
        debug_assert_eq!(self.c.len(), other.c.len());
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += k * b;
        }
    }

    pub fn deriv(&self, j: usize) -> Taylor {
        let mut out = Taylor::zero(&self.layout);
        for (i, e) in self.layout.exps.iter().enumerate() {
            if let Some(lo) = self.layout.lower[j][i] {
                out.c[lo] += self.c[i] * e[j] as f64;
            }
        }
        out
    }

    /// Multiplicative inverse, `1/(a0 + r) = a0^-1 sum (-r/a0)^n`. Requires `a0 != 0`.
    pub fn recip(&self) -> Taylor {
        let a0 = self.c[0];
        let mut q = self.scale(-1.0 / a0);
        q.c[0] = C64::new(0.0, 0.0);
        let mut res = Taylor::real(&self.layout, 1.0);
        for _ in 0..self.layout.degree {
            res = (&q * &res).add_scalar(C64::new(1.0, 0.0));
        }
        res.scale(1.0 / a0)
    }

    pub fn exp(&self) -> Taylor {
        let a0 = self.c[0];
        let mut r = self.clone();
        r.c[0] = C64::new(0.0, 0.0);
        let mut res = Taylor::real(&self.layout, 1.0);
        for n in (1..=self.layout.degree).rev() {
            res = (&r * &res).scale_re(1.0 / n as f64).add_scalar(C64::new(1.0, 0.0));
        }
        res.scale(a0.exp())
    }

    /// Integer power by repeated squaring; negative powers go through `recip`.
    pub fn powi(&self, n: i32) -> Taylor {
        if n < 0 {
            return self.recip().powi(-n);
        }
        let mut base = self.clone();
        let mut acc = Taylor::real(&self.layout, 1.0);
        let mut e = n as u32;
        while e > 0 {
            if e & 1 == 1 {
                acc = &acc * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        acc
    }

    /// Evaluate at the offset point `x` (relative to the expansion center).
    pub fn eval(&self, x: &[C64]) -> C64 {
        let mono = scalar_monomials(&self.layout, x);
        self.c.iter().zip(&mono).map(|(a, m)| a * m).sum()
    }

    pub fn eval_real(&self, x: &[f64]) -> C64 {
        let xc: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
        self.eval(&xc)
    }

    /// Substitute jets for the variables: `p(args)`, result in the layout of `args`.
    pub fn compose(&self, args: &[Taylor]) -> Taylor {
        let mono = jet_monomials(&self.layout, args);
        self.compose_with(&mono)
    }

    /// `p(args)` given precomputed monomials from [`jet_monomials`].
    pub fn compose_with(&self, mono: &[Taylor]) -> Taylor {
        let mut out = Taylor::zero(mono[0].layout());
        for (a, m) in self.c.iter().zip(mono) {
            if a.re != 0.0 || a.im != 0.0 {
                out.axpy(*a, m);
            }
        }
        out
    }

    /// Re-expand about `center + shift`: returns `q` with `q(x) = p(x + shift)`.
    pub fn rebase(&self, shift: &[f64]) -> Taylor {
        let args: Vec<Taylor> = (0..self.layout.dim)
            .map(|j| Taylor::variable(&self.layout, j, shift[j]))
            .collect();
        self.compose(&args)
    }

    /// Copy into another layout of the same dimension, truncating or zero-padding.
    pub fn relayout(&self, target: &Arc<Layout>) -> Taylor {
        assert_eq!(target.dim, self.layout.dim);
        let mut out = Taylor::zero(target);
        for (i, e) in self.layout.exps.iter().enumerate() {
            if let Some(&k) = target.index.get(e) {
                out.c[k] = self.c[i];
            }
        }
        out
    }
}

/// `x^a` for every exponent `a` of `layout`, at a complex point.
pub fn scalar_monomials(layout: &Layout, x: &[C64]) -> Vec<C64> {
    let mut mono = Vec::with_capacity(layout.len());
    mono.push(C64::new(1.0, 0.0));
    for i in 1..layout.len() {
        let (p, j) = layout.parent[i].expect("monomial of positive degree has a parent");
        let v = mono[p] * x[j];
        mono.push(v);
    }
    mono
}

/// `args^a` for every exponent `a` of `layout`, as jets in the layout of `args`.
pub fn jet_monomials(layout: &Layout, args: &[Taylor]) -> Vec<Taylor> {
    let target = args[0].layout().clone();
    let mut mono: Vec<Taylor> = Vec::with_capacity(layout.len());
    mono.push(Taylor::real(&target, 1.0));
    for i in 1..layout.len() {
        let (p, j) = layout.parent[i].expect("monomial of positive degree has a parent");
        let v = &mono[p] * &args[j];
        mono.push(v);
    }
    mono
}

impl<'a> Add<&'a Taylor> for &'a Taylor {
    type Output = Taylor;
    fn add(self, rhs: &Taylor) -> Taylor {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl<'a> Sub<&'a Taylor> for &'a Taylor {
    type Output = Taylor;
    fn sub(self, rhs: &Taylor) -> Taylor {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl AddAssign<&Taylor> for Taylor {
    fn add_assign(&mut self, rhs: &Taylor) {
        debug_assert_eq!(self.c.len(), rhs.c.len());
        for (a, b) in self.c.iter_mut().zip(&rhs.c) {
            *a += b;
        }
    }
}

impl SubAssign<&Taylor> for Taylor {
    fn sub_assign(&mut self, rhs: &Taylor) {
        debug_assert_eq!(self.c.len(), rhs.c.len());
        for (a, b) in self.c.iter_mut().zip(&rhs.c) {
            *a -= b;
        }
    }
}

impl Neg for &Taylor {
    type Output = Taylor;
    fn neg(self) -> Taylor {
        self.scale_re(-1.0)
    }
}

impl<'a> Mul<&'a Taylor> for &'a Taylor {
    type Output = Taylor;
    fn mul(self, rhs: &Taylor) -> Taylor {
        debug_assert_eq!(self.layout.dim, rhs.layout.dim);
        debug_assert_eq!(self.layout.degree, rhs.layout.degree);
        let mut out = Taylor::zero(&self.layout);
        let (a, b) = (&self.c, &rhs.c);
        for &(i, j, k) in &self.layout.mul {
            let x = a[i as usize];
            if x.re == 0.0 && x.im == 0.0 {
                continue;
            }
            out.c[k as usize] += x * b[j as usize];
        }
        out
    }
}
