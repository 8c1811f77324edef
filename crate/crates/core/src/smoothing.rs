//! Analytic smoothing by a compactly supported radial Fourier multiplier, and the
//! dyadic-style decomposition of a perturbation into analytic pieces.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::series::FourierTaylorSeries;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingKernel {
    /// Support radius of the multiplier.
    pub a1: f64,
    /// Radius up to which the multiplier is identically one.
    pub plateau: f64,
}

impl Default for SmoothingKernel {
    fn default() -> Self {
        SmoothingKernel { a1: 1.0, plateau: 0.5 }
    }
}

fn bump(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

impl SmoothingKernel {
    pub fn new(a1: f64, plateau: f64) -> Result<SmoothingKernel> {
        if !(plateau > 0.0 && plateau < a1) {
            return Err(KamError::InvalidParameter(format!("kernel needs 0 < plateau < a1 (got {plateau}, {a1})")));
        }
        Ok(SmoothingKernel { a1, plateau })
    }

    /// Radial multiplier value at radius `x >= 0`.
    pub fn multiplier(&self, x: f64) -> f64 {
        let x = x.abs();
        if x <= self.plateau {
            1.0
        } else if x >= self.a1 {
            0.0
        } else {
            let y = (x - self.plateau) / (self.a1 - self.plateau);
            let (p, q) = (bump(1.0 - y), bump(y));
            p / (p + q)
        }
    }
}

/// Apply `S_s`: multiply the `(k, l)` coefficient by the multiplier at `s |(k, l)|`.
pub fn smooth(f: &FourierTaylorSeries, s: f64, kernel: &SmoothingKernel) -> FourierTaylorSeries {
    multiply(f, |m| kernel.multiplier(s * m.euclid()))
}

fn multiply(f: &FourierTaylorSeries, mut w: impl FnMut(&crate::ModeIndex) -> f64) -> FourierTaylorSeries {
    let mut out = FourierTaylorSeries::zero(f.center().to_vec(), f.degree(), f.cutoff());
    for (m, p) in f.modes() {
        let k = w(m);
        if k != 0.0 {
            out.insert(m.clone(), p.scale_re(k)).expect("same dimension");
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSchedule {
    pub s_list: Vec<f64>,
    pub target_ell: f64,
}

impl DecompositionSchedule {
    pub fn new(s_list: Vec<f64>, target_ell: f64) -> Result<DecompositionSchedule> {
        if s_list.is_empty() {
            return Err(KamError::InvalidParameter("empty decomposition schedule".into()));
        }
        if s_list[0] > 0.25 {
            return Err(KamError::InvalidParameter(format!("s_0 = {} exceeds 1/4", s_list[0])));
        }
        if s_list.iter().any(|&s| s <= 0.0) || s_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(KamError::InvalidParameter("widths must be positive and strictly decreasing".into()));
        }
        Ok(DecompositionSchedule { s_list, target_ell })
    }

    /// Geometric widths `s0 q^nu`, extended until the plateau at width `2 s` covers `max_xi`.
    pub fn geometric(s0: f64, q: f64, min_len: usize, max_xi: f64, kernel: &SmoothingKernel, target_ell: f64) -> Result<DecompositionSchedule> {
        let mut s = vec![s0];
        while s.len() < min_len || 2.0 * s[s.len() - 1] * max_xi > kernel.plateau {
            let next = s[s.len() - 1] * q;
            s.push(next);
            if s.len() > 10_000 {
                return Err(KamError::InvalidParameter("decomposition schedule does not terminate".into()));
            }
        }
        DecompositionSchedule::new(s, target_ell)
    }
}

/// One analytic piece with its certified strip width `2 s_nu`.
#[derive(Clone, Debug)]
pub struct Piece {
    pub series: FourierTaylorSeries,
    pub width: f64,
}

/// `F_0 = S_{2 s_0} f`, `F_{nu+1} = S_{2 s_{nu+1}} f - S_{2 s_nu} f`.
pub fn decompose(f: &FourierTaylorSeries, sched: &DecompositionSchedule, kernel: &SmoothingKernel) -> Result<Vec<Piece>> {
    let last = *sched.s_list.last().expect("schedule is non-empty");
    if let Some((m, _)) = f.modes().find(|(m, _)| kernel.multiplier(2.0 * last * m.euclid()) != 1.0) {
        return Err(KamError::ScheduleTooShort { xi: m.euclid() });
    }
    let mut pieces = Vec::with_capacity(sched.s_list.len());
    let mut prev: Option<f64> = None;
    for &s in &sched.s_list {
        let series = match prev {
            None => smooth(f, 2.0 * s, kernel),
            Some(sp) => multiply(f, |m| kernel.multiplier(2.0 * s * m.euclid()) - kernel.multiplier(2.0 * sp * m.euclid())),
        };
        pieces.push(Piece { series, width: 2.0 * s });
        prev = Some(s);
    }
    Ok(pieces)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSample {
    pub x: f64,
    pub y: f64,
    pub abs_k: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDecayReport {
    pub beta: u32,
    pub p: u32,
    /// Smallest `c` with `|d^beta K(x+iy)| <= c (1+|x|)^-p e^{a1 |y|}` on the grid.
    pub c: f64,
    /// Same constant fitted on the inner half of the `x` range only.
    pub c_inner: f64,
    pub passed: bool,
    pub samples: Vec<KernelSample>,
}

/// `d^beta K(x+iy) = (1/2pi) int K^(xi) (i xi)^beta e^{i(x+iy) xi} dxi` by the trapezoid rule,
/// doubling the node count until successive values agree.
pub fn kernel_derivative(kernel: &SmoothingKernel, beta: u32, x: f64, y: f64) -> Result<C64> {
    let a = kernel.a1;
    let integrand = |xi: f64| {
        let w = kernel.multiplier(xi) * xi.powi(beta as i32);
        let ib = C64::new(0.0, 1.0).powu(beta);
        ib * w * C64::from_polar((-y * xi).exp(), x * xi)
    };
    let trap = |n: usize| {
        let h = 2.0 * a / n as f64;
        // endpoints vanish (compact support)
        let s: C64 = (1..n).map(|i| integrand(-a + i as f64 * h)).sum();
        s * h / (2.0 * PI)
    };
    let mut n = 64usize.max((4.0 * a * x.abs()) as usize);
    let mut prev = trap(n);
    while n < 1 << 22 {
        n *= 2;
        let cur = trap(n);
        if (cur - prev).norm() <= 1e-13 * (1.0 + cur.norm()) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(KamError::QuadratureNonConvergence(format!("kernel at x={x}, y={y}")))
}

/// Fit the decay envelope of the kernel on an `(x, y)` grid.
pub fn validate_kernel_decay(kernel: &SmoothingKernel, beta: u32, p: u32, xs: &[f64], ys: &[f64]) -> Result<KernelDecayReport> {
    if beta > 4 || p > 4 {
        return Err(KamError::InvalidParameter("kernel validation supports beta, p <= 4".into()));
    }
    let xmax = xs.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let mut raw = Vec::with_capacity(xs.len() * ys.len());
    let (mut c, mut c_inner) = (0.0f64, 0.0f64);
    for &y in ys {
        for &x in xs {
            let v = kernel_derivative(kernel, beta, x, y)?.norm();
            let env = (1.0 + x.abs()).powi(-(p as i32)) * (kernel.a1 * y.abs()).exp();
            c = c.max(v / env);
            if x.abs() <= xmax / 2.0 {
                c_inner = c_inner.max(v / env);
            }
            raw.push((x, y, v, env));
        }
    }
    let samples = raw.into_iter().map(|(x, y, v, env)| KernelSample { x, y, abs_k: v, bound: c * env }).collect();
    Ok(KernelDecayReport { beta, p, c, c_inner, passed: c.is_finite() && c <= c_inner * (1.0 + 1e-12), samples })
}

/// Real test series with `|f(k,l)| = (1 + |k| + |l|)^(-ell-2)` on every mode of order `<= order`.
pub fn algebraic_series(d: usize, ell: f64, order: u32) -> FourierTaylorSeries {
    let lay = crate::taylor::layout(d, 0);
    let mut f = FourierTaylorSeries::zero(vec![0.0; d], 0, order);
    crate::grid::for_each_mode(d, order, |m| {
        let c = (1.0 + m.order() as f64).powf(-ell - 2.0);
        f.insert(m, crate::taylor::Taylor::real(&lay, c)).expect("dimension matches");
    });
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub ell: f64,
    /// `s_nu` for the fitted pieces.
    pub widths: Vec<f64>,
    /// Majorant norm of `F_{nu+1}` at width `2 s_{nu+1}`.
    pub norms: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// `norm / s_nu^ell`.
    pub constants: Vec<f64>,
    /// Ratio of the largest to the smallest fitted constant.
    pub spread: f64,
}

/// Least-squares fit of `log ||F_{nu+1}||` against `log s_nu` over the first `count` pieces.
pub fn decay_regression(f: &FourierTaylorSeries, sched: &DecompositionSchedule, kernel: &SmoothingKernel, count: usize) -> Result<DecayFit> {
    if count < 2 || sched.s_list.len() < count + 1 {
        return Err(KamError::InvalidParameter(format!("need at least {} widths for {count} fitted pieces", count + 1)));
    }
    let pieces = decompose(f, sched, kernel)?;
    let ell = sched.target_ell;
    let center = f.center().to_vec();
    let mut widths = Vec::with_capacity(count);
    let mut norms = Vec::with_capacity(count);
    for nu in 0..count {
        let dom = crate::series::Domain::new(2.0 * sched.s_list[nu + 1], 1.0, center.clone())?;
        widths.push(sched.s_list[nu]);
        norms.push(pieces[nu + 1].series.majorant_norm(&dom)?);
    }
    let xs: Vec<f64> = widths.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|n| n.ln()).collect();
    let n = count as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let constants: Vec<f64> = norms.iter().zip(&widths).map(|(nv, s)| nv / s.powf(ell)).collect();
    let cmax = constants.iter().cloned().fold(0.0, f64::max);
    let cmin = constants.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(DecayFit { ell, widths, norms, slope, intercept: my - slope * mx, constants, spread: cmax / cmin })
}
