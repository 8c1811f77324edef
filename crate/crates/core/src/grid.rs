//! Regular grids on the torus `T^dims` and their discrete Fourier transforms.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};

use crate::series::{FourierTaylorSeries, ModeIndex};
use crate::taylor::{layout, Taylor};

/// `n` points per axis, `dims` axes, row-major with the last axis fastest.
#[derive(Clone)]
pub struct Grid {
    n: usize,
    dims: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Grid({}^{})", self.n, self.dims)
    }
}

impl Grid {
    pub fn new(n: usize, dims: usize) -> Grid {
        let mut planner = FftPlanner::new();
        Grid { n, dims, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dims as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn multi_index(&self, mut p: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims];
        for j in (0..self.dims).rev() {
            idx[j] = p % self.n;
            p /= self.n;
        }
        idx
    }

    pub fn coords(&self, p: usize) -> Vec<f64> {
        self.multi_index(p).into_iter().map(|i| 2.0 * PI * i as f64 / self.n as f64).collect()
    }

    /// Signed frequency of each axis index at point `p` of a transformed array.
    pub fn freq(&self, p: usize) -> Vec<i32> {
        let n = self.n as i32;
        self.multi_index(p).into_iter().map(|i| if (i as i32) < (n + 1) / 2 { i as i32 } else { i as i32 - n }).collect()
    }

    /// Array position of a signed frequency vector.
    pub fn position(&self, freq: &[i32]) -> usize {
        let n = self.n as i32;
        freq.iter().fold(0usize, |acc, &f| acc * self.n + f.rem_euclid(n) as usize)
    }

    fn along_axes(&self, data: &mut [C64], plan: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.len(), "grid data has the wrong length");
        let n = self.n;
        let mut line = vec![C64::new(0.0, 0.0); n];
        let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        for axis in 0..self.dims {
            let stride = n.pow((self.dims - 1 - axis) as u32);
            let block = stride * n;
            for start in (0..data.len()).step_by(block) {
                for off in 0..stride {
                    let base = start + off;
                    for (i, v) in line.iter_mut().enumerate() {
                        *v = data[base + i * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (i, v) in line.iter().enumerate() {
                        data[base + i * stride] = *v;
                    }
                }
            }
        }
    }

    /// Samples to Fourier coefficients (`1/len` normalization).
    pub fn forward(&self, data: &mut [C64]) {
        self.along_axes(data, &self.fwd);
        let k = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|v| *v *= k);
    }

    /// Fourier coefficients to samples.
    pub fn inverse(&self, data: &mut [C64]) {
        self.along_axes(data, &self.inv);
    }
}

/// Turn jet samples on a `(theta, t)` grid into a series.
///
/// Keeps modes of order `<= cutoff` (which must sit below the Nyquist index),
/// projects onto real functions and drops modes below `rel_tol` times the
/// largest coefficient.
pub fn samples_to_series(
    grid: &Grid,
    values: &[Taylor],
    center: &[f64],
    cutoff: u32,
    rel_tol: f64,
) -> FourierTaylorSeries {
    let d = grid.dims() - 1;
    let degree = values[0].degree();
    let lay = layout(d, degree);
    let nc = lay.len();
    let mut channels: Vec<Vec<C64>> = (0..nc).map(|a| values.iter().map(|v| v.coeffs()[a]).collect()).collect();
    for ch in channels.iter_mut() {
        grid.forward(ch);
    }
    let half = (grid.n() as u32 - 1) / 2;
    let cutoff = cutoff.min(half);
    let mut out = FourierTaylorSeries::zero(center.to_vec(), degree, cutoff);
    for_each_mode(d, cutoff, |m| {
        let mut f = m.k.clone();
        f.push(m.l);
        let pos = grid.position(&f);
        let c: Vec<C64> = channels.iter().map(|ch| ch[pos]).collect();
        let p = Taylor::from_coeffs(&lay, c);
        if !p.is_zero() {
            out.insert(m, p).expect("dimension matches by construction");
        }
    });
    let out = out.symmetrize();
    let scale = out.max_coeff();
    out.prune(rel_tol * scale)
}

/// Visit every mode `(k, l)` with `|k|_1 + |l| <= cutoff`.
pub fn for_each_mode(d: usize, cutoff: u32, mut f: impl FnMut(ModeIndex)) {
    let c = cutoff as i32;
    let mut k = vec![-c; d];
    loop {
        let kn: i32 = k.iter().map(|x| x.abs()).sum();
        if kn <= c {
            let rest = c - kn;
            for l in -rest..=rest {
                f(ModeIndex::new(k.clone(), l));
            }
        }
        // odometer over [-c, c]^d
        let mut j = 0;
        loop {
            if j == d {
                return;
            }
            if k[j] < c {
                k[j] += 1;
                break;
            }
            k[j] = -c;
            j += 1;
        }
    }
}
