//! Coupled Duffing oscillators `x_i'' + x_i^{2n+1} + dF/dx_i = 0` with a forcing
//! polynomial `F(t, x) = sum_alpha p_alpha(t) x^alpha`.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diophantine::wilson_interval;
use crate::error::{KamError, Result};

/// `I = (n+1) xdot^2 + x^{2n+2}`.
pub fn action_of(x: f64, xdot: f64, n: u32) -> f64 {
    (n as f64 + 1.0) * xdot * xdot + x.powi(2 * n as i32 + 2)
}

/// One time mode `c e^{ilt}` of a coefficient `p_alpha(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeMode {
    pub l: i32,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingTerm {
    pub alpha: Vec<u32>,
    pub modes: Vec<TimeMode>,
}

impl ForcingTerm {
    /// `amp * cos(l t) * x^alpha`.
    pub fn cosine(alpha: Vec<u32>, l: i32, amp: f64) -> ForcingTerm {
        let modes = if l == 0 {
            vec![TimeMode { l: 0, re: amp, im: 0.0 }]
        } else {
            vec![TimeMode { l, re: amp / 2.0, im: 0.0 }, TimeMode { l: -l, re: amp / 2.0, im: 0.0 }]
        };
        ForcingTerm { alpha, modes }
    }

    fn coeff(&self, t: f64) -> f64 {
        self.modes.iter().map(|m| m.re * (m.l as f64 * t).cos() - m.im * (m.l as f64 * t).sin()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuffingNetwork {
    m: usize,
    n: u32,
    terms: Vec<ForcingTerm>,
}

impl DuffingNetwork {
    pub fn new(m: usize, n: u32, terms: Vec<ForcingTerm>) -> Result<DuffingNetwork> {
        let mut errs = Vec::new();
        if m == 0 {
            errs.push("need m >= 1 oscillators".to_string());
        }
        if n == 0 {
            errs.push("need n >= 1".to_string());
        }
        for (i, term) in terms.iter().enumerate() {
            if term.alpha.len() != m {
                errs.push(format!("terms[{i}].alpha has length {}, expected {m}", term.alpha.len()));
            }
            let deg: u32 = term.alpha.iter().sum();
            if deg > 2 * n + 1 {
                errs.push(format!("terms[{i}].alpha has degree {deg} > 2n+1 = {}", 2 * n + 1));
            }
            for md in &term.modes {
                let partner = term.modes.iter().filter(|o| o.l == -md.l).fold((0.0, 0.0), |a, o| (a.0 + o.re, a.1 + o.im));
                let own = term.modes.iter().filter(|o| o.l == md.l).fold((0.0, 0.0), |a, o| (a.0 + o.re, a.1 + o.im));
                if (own.0 - partner.0).abs() > 1e-14 * (1.0 + own.0.abs()) || (own.1 + partner.1).abs() > 1e-14 * (1.0 + own.1.abs()) {
                    errs.push(format!("terms[{i}] mode l={} is not conjugate-symmetric", md.l));
                    break;
                }
            }
        }
        if !errs.is_empty() {
            return Err(KamError::InvalidParameter(errs.join("; ")));
        }
        Ok(DuffingNetwork { m, n, terms })
    }

    pub fn free(m: usize, n: u32) -> Result<DuffingNetwork> {
        DuffingNetwork::new(m, n, Vec::new())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn terms(&self) -> &[ForcingTerm] {
        &self.terms
    }

    /// `F(t, x)`.
    pub fn forcing(&self, t: f64, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|term| term.coeff(t) * term.alpha.iter().zip(x).map(|(&a, &xi)| xi.powi(a as i32)).product::<f64>())
            .sum()
    }

    /// `x'' = -x^{2n+1} - dF/dx`.
    pub fn accel(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let p = 2 * self.n as i32 + 1;
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = -xi.powi(p);
        }
        for term in &self.terms {
            let c = term.coeff(t);
            if c == 0.0 {
                continue;
            }
            for (i, o) in out.iter_mut().enumerate() {
                let ai = term.alpha[i];
                if ai == 0 {
                    continue;
                }
                let mut mono = c * ai as f64;
                for (j, (&aj, &xj)) in term.alpha.iter().zip(x).enumerate() {
                    mono *= xj.powi(if j == i { aj as i32 - 1 } else { aj as i32 });
                }
                *o -= mono;
            }
        }
    }

    pub fn energy(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        let q = 2.0 * self.n as f64 + 2.0;
        x.iter().zip(v).map(|(&xi, &vi)| 0.5 * vi * vi + xi.powi(2 * self.n as i32 + 2) / q).sum::<f64>() + self.forcing(t, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Verlet,
    /// Fourth-order symplectic splitting (position-extended Forest-Ruth-like).
    Pefrl,
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    /// Left the escape ball or produced non-finite values.
    pub escaped: bool,
    pub non_finite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub method: Integrator,
    /// Keep every `record_every`-th step.
    pub record_every: usize,
    pub escape_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { method: Integrator::Pefrl, record_every: 1, escape_bound: f64::INFINITY }
    }
}

const PEFRL_XI: f64 = 0.178_617_895_844_809_1;
const PEFRL_LAMBDA: f64 = -0.212_341_831_062_605_4;
const PEFRL_CHI: f64 = -0.066_264_582_669_818_5;

struct Stepper<'a> {
    net: &'a DuffingNetwork,
    a: Vec<f64>,
    k: [Vec<f64>; 8],
}

impl<'a> Stepper<'a> {
    fn new(net: &'a DuffingNetwork) -> Stepper<'a> {
        let m = net.m();
        Stepper { net, a: vec![0.0; m], k: std::array::from_fn(|_| vec![0.0; m]) }
    }

    fn drift(x: &mut [f64], v: &[f64], h: f64) {
        x.iter_mut().zip(v).for_each(|(xi, vi)| *xi += h * vi);
    }

    fn kick(&mut self, t: f64, x: &[f64], v: &mut [f64], h: f64) {
        self.net.accel(t, x, &mut self.a);
        v.iter_mut().zip(&self.a).for_each(|(vi, ai)| *vi += h * ai);
    }

    fn step(&mut self, method: Integrator, t: f64, x: &mut [f64], v: &mut [f64], dt: f64) {
        match method {
            Integrator::Verlet => {
                self.kick(t, x, v, dt / 2.0);
                Self::drift(x, v, dt);
                self.kick(t + dt, x, v, dt / 2.0);
            }
            Integrator::Pefrl => {
                // time advances with the drifts
                let (xi, la, chi) = (PEFRL_XI, PEFRL_LAMBDA, PEFRL_CHI);
                let mut tx = t;
                Self::drift(x, v, xi * dt);
                tx += xi * dt;
                self.kick(tx, x, v, (1.0 - 2.0 * la) * dt / 2.0);
                Self::drift(x, v, chi * dt);
                tx += chi * dt;
                self.kick(tx, x, v, la * dt);
                Self::drift(x, v, (1.0 - 2.0 * (chi + xi)) * dt);
                tx += (1.0 - 2.0 * (chi + xi)) * dt;
                self.kick(tx, x, v, la * dt);
                Self::drift(x, v, chi * dt);
                tx += chi * dt;
                self.kick(tx, x, v, (1.0 - 2.0 * la) * dt / 2.0);
                Self::drift(x, v, xi * dt);
            }
            Integrator::Rk4 => {
                let m = x.len();
                let [kx1, kv1, kx2, kv2, kx3, kv3, xs, vs] = &mut self.k;
                kx1.copy_from_slice(v);
                self.net.accel(t, x, kv1);
                for i in 0..m {
                    xs[i] = x[i] + 0.5 * dt * kx1[i];
                    vs[i] = v[i] + 0.5 * dt * kv1[i];
                }
                kx2.copy_from_slice(vs);
                self.net.accel(t + 0.5 * dt, xs, kv2);
                for i in 0..m {
                    xs[i] = x[i] + 0.5 * dt * kx2[i];
                    vs[i] = v[i] + 0.5 * dt * kv2[i];
                }
                kx3.copy_from_slice(vs);
                self.net.accel(t + 0.5 * dt, xs, kv3);
                for i in 0..m {
                    xs[i] = x[i] + dt * kx3[i];
                    vs[i] = v[i] + dt * kv3[i];
                }
                self.net.accel(t + dt, xs, &mut self.a);
                for i in 0..m {
                    x[i] += dt / 6.0 * (kx1[i] + 2.0 * kx2[i] + 2.0 * kx3[i] + vs[i]);
                    v[i] += dt / 6.0 * (kv1[i] + 2.0 * kv2[i] + 2.0 * kv3[i] + self.a[i]);
                }
            }
        }
    }
}

/// Integrate from `t0` for `steps` steps of size `dt` (negative `dt` integrates backwards).
pub fn simulate(net: &DuffingNetwork, x0: &[f64], v0: &[f64], t0: f64, dt: f64, steps: usize, opts: &SimOptions) -> Result<TrajectoryRecord> {
    let m = net.m();
    if x0.len() != m || v0.len() != m {
        return Err(KamError::DimensionMismatch { expected: m, got: x0.len().min(v0.len()) });
    }
    if !(dt != 0.0 && dt.is_finite()) || opts.record_every == 0 {
        return Err(KamError::InvalidParameter("need finite nonzero dt and record_every >= 1".into()));
    }
    let n = net.n();
    let cap = steps / opts.record_every + 1;
    let mut rec = TrajectoryRecord {
        times: Vec::with_capacity(cap),
        x: Vec::with_capacity(cap),
        v: Vec::with_capacity(cap),
        actions: Vec::with_capacity(cap),
        energy: Vec::with_capacity(cap),
        escaped: false,
        non_finite: false,
    };
    let (mut x, mut v) = (x0.to_vec(), v0.to_vec());
    let push = |rec: &mut TrajectoryRecord, t: f64, x: &[f64], v: &[f64]| {
        rec.times.push(t);
        rec.actions.push(x.iter().zip(v).map(|(&a, &b)| action_of(a, b, n)).collect());
        rec.energy.push(net.energy(t, x, v));
        rec.x.push(x.to_vec());
        rec.v.push(v.to_vec());
    };
    push(&mut rec, t0, &x, &v);
    let mut st = Stepper::new(net);
    for s in 0..steps {
        let t = t0 + s as f64 * dt;
        st.step(opts.method, t, &mut x, &mut v, dt);
        let t_next = t0 + (s + 1) as f64 * dt;
        if x.iter().chain(&v).any(|z| !z.is_finite()) {
            rec.non_finite = true;
            rec.escaped = true;
            break;
        }
        if x.iter().any(|z| z.abs() > opts.escape_bound) {
            rec.escaped = true;
            push(&mut rec, t_next, &x, &v);
            break;
        }
        if (s + 1) % opts.record_every == 0 {
            push(&mut rec, t_next, &x, &v);
        }
    }
    Ok(rec)
}

/// `max_t sum_i |x_i| + |xdot_i|` over the samples.
pub fn boundedness_sup(traj: &TrajectoryRecord) -> f64 {
    traj.x
        .iter()
        .zip(&traj.v)
        .map(|(x, v)| x.iter().chain(v).map(|z| z.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Period of `x'' + x^{2n+1} = 0` at amplitude `amp`:
/// `4 sqrt(n+1) amp^-n int_0^1 (1 - y^{2n+2})^{-1/2} dy`.
pub fn exact_period(amp: f64, n: u32) -> Result<f64> {
    if !(amp > 0.0) {
        return Err(KamError::InvalidParameter(format!("amplitude must be positive (got {amp})")));
    }
    // y = sin(phi) leaves int_0^{pi/2} (sum_{j<=n} sin^{2j} phi)^{-1/2}, smooth and even at both ends
    let g = |phi: f64| {
        let s2 = phi.sin().powi(2);
        let mut acc = 0.0;
        let mut p = 1.0;
        for _ in 0..=n {
            acc += p;
            p *= s2;
        }
        1.0 / acc.sqrt()
    };
    let half = PI / 2.0;
    let mut m = 4usize;
    let mut prev = f64::NAN;
    for _ in 0..20 {
        let h = half / m as f64;
        let inner: f64 = (1..m).map(|i| g(i as f64 * h)).sum();
        let val = h * (inner + 0.5 * (g(0.0) + g(half)));
        if (val - prev).abs() <= 1e-15 * val {
            return Ok(4.0 * (n as f64 + 1.0).sqrt() * amp.powi(-(n as i32)) * val);
        }
        prev = val;
        m *= 2;
    }
    Err(KamError::QuadratureNonConvergence(format!("period integral for n={n}")))
}

/// Angle in the `(x, xdot)` plane, increasing along the flow.
pub fn phase_angle(x: f64, xdot: f64) -> f64 {
    (-xdot).atan2(x)
}

fn wrap(d: f64) -> f64 {
    let r = (d + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

fn bump(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        (-1.0 / (s * (1.0 - s))).exp()
    }
}

/// Weighted Birkhoff average of successive angle increments divided by the sample spacing.
pub fn birkhoff_rate(angles: &[f64], dt: f64) -> Result<f64> {
    if angles.len() < 3 {
        return Err(KamError::InsufficientWinding("fewer than three samples".into()));
    }
    let n = angles.len() - 1;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..n {
        let w = bump((k as f64 + 0.5) / n as f64);
        num += w * wrap(angles[k + 1] - angles[k]);
        den += w;
    }
    Ok(num / den / dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    pub omega: f64,
    /// Estimate from the first half of the window.
    pub omega_half: f64,
    pub change: f64,
    pub turns: f64,
}

/// Rotation frequency (radians per unit time) of one oscillator.
pub fn frequency_extract(traj: &TrajectoryRecord, osc: usize, min_turns: f64) -> Result<FrequencyEstimate> {
    let angles: Vec<f64> = traj.x.iter().zip(&traj.v).map(|(x, v)| phase_angle(x[osc], v[osc])).collect();
    frequency_from_angles(&angles, sample_spacing(traj)?, min_turns)
}

fn sample_spacing(traj: &TrajectoryRecord) -> Result<f64> {
    if traj.times.len() < 3 {
        return Err(KamError::InsufficientWinding("trajectory too short".into()));
    }
    Ok(traj.times[1] - traj.times[0])
}

pub fn frequency_from_angles(angles: &[f64], dt: f64, min_turns: f64) -> Result<FrequencyEstimate> {
    let turns = angles.windows(2).map(|w| wrap(w[1] - w[0])).sum::<f64>().abs() / TAU;
    if turns < min_turns {
        return Err(KamError::InsufficientWinding(format!("{turns:.2} turns, need {min_turns}")));
    }
    let omega = birkhoff_rate(angles, dt)?;
    let omega_half = birkhoff_rate(&angles[..angles.len() / 2 + 1], dt)?;
    let change = (omega - omega_half).abs() / omega.abs().max(f64::MIN_POSITIVE);
    Ok(FrequencyEstimate { omega, omega_half, change, turns })
}

/// Phase space point with action `action` at normalized time `frac` along the unforced orbit.
pub fn orbit_point(action: f64, frac: f64, n: u32) -> Result<(f64, f64)> {
    if action == 0.0 {
        return Ok((0.0, 0.0));
    }
    let amp = action.powf(1.0 / (2.0 * n as f64 + 2.0));
    let frac = frac.rem_euclid(1.0);
    if frac == 0.0 {
        return Ok((amp, 0.0));
    }
    let period = exact_period(amp, n)?;
    let steps = 4000usize;
    let free = DuffingNetwork::free(1, n)?;
    let opts = SimOptions { method: Integrator::Pefrl, record_every: steps, escape_bound: f64::INFINITY };
    let tr = simulate(&free, &[amp], &[0.0], 0.0, frac * period / steps as f64, steps, &opts)?;
    let last = tr.x.len() - 1;
    Ok((tr.x[last][0], tr.v[last][0]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityOptions {
    /// Ratio of the outer to the inner shell radius in total action.
    pub c4: f64,
    /// Horizon in periods of the slowest oscillator at the inner shell.
    pub periods: f64,
    pub steps_per_period: usize,
    pub samples_per_period: usize,
    /// Escape ball radius as a multiple of the largest amplitude in the shell.
    pub escape_factor: f64,
    /// Allowed sup relative to the shell bound.
    pub sup_factor: f64,
    pub birkhoff_tol: f64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            c4: 2.0,
            periods: 200.0,
            steps_per_period: 400,
            samples_per_period: 20,
            escape_factor: 100.0,
            sup_factor: 4.0,
            birkhoff_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub actions: Vec<f64>,
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
    pub sup: f64,
    pub escaped: bool,
    pub birkhoff_change: f64,
    pub omega: Vec<f64>,
    pub stable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub shell: f64,
    pub n_samples: usize,
    pub n_stable: usize,
    pub fraction: f64,
    pub ci: (f64, f64),
    pub shell_bound: f64,
    pub sup_max: f64,
    pub sup_mean: f64,
    pub seed: u64,
    pub samples: Vec<SampleOutcome>,
}

/// Step size, horizon and escape ball shared by every trajectory of one shell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShellSetup {
    /// Largest `sum |x_i| + |v_i|` reachable inside the outer shell without forcing.
    pub shell_bound: f64,
    pub dt: f64,
    pub steps: usize,
    pub sim: SimOptions,
}

impl ShellSetup {
    pub fn new(m: usize, n: u32, shell: f64, opts: &StabilityOptions) -> Result<ShellSetup> {
        if !(opts.c4 > 1.0) || !(shell > 0.0) {
            return Err(KamError::InvalidParameter("need c4 > 1 and a positive shell".into()));
        }
        let q = 2.0 * n as f64 + 2.0;
        let a_max = (opts.c4 * shell).powf(1.0 / q);
        let v_max = (opts.c4 * shell / (n as f64 + 1.0)).sqrt();
        let dt = exact_period(a_max, n)? / opts.steps_per_period as f64;
        let horizon = opts.periods * exact_period(shell.powf(1.0 / q), n)?;
        let record_every = (opts.steps_per_period / opts.samples_per_period.max(1)).max(1);
        Ok(ShellSetup {
            shell_bound: m as f64 * (a_max + v_max),
            dt,
            steps: (horizon / dt).ceil() as usize,
            sim: SimOptions { method: Integrator::Pefrl, record_every, escape_bound: opts.escape_factor * a_max },
        })
    }
}

/// Initial data of sample `index`: actions and the matching `(x, v)`.
///
/// Total action has density `~ S^(m-1)` on `[A, c4 A]`, split along a uniform simplex
/// direction; each oscillator starts at a uniform normalized time along its orbit.
pub fn shell_sample(m: usize, n: u32, shell: f64, c4: f64, seed: u64, index: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let u: f64 = rng.gen();
    let lo = shell.powi(m as i32);
    let hi = (c4 * shell).powi(m as i32);
    let total = (lo + u * (hi - lo)).powf(1.0 / m as f64);
    let e: Vec<f64> = (0..m).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let es: f64 = e.iter().sum();
    let actions: Vec<f64> = e.iter().map(|w| total * w / es).collect();
    let mut x0 = vec![0.0; m];
    let mut v0 = vec![0.0; m];
    for j in 0..m {
        let frac: f64 = rng.gen();
        (x0[j], v0[j]) = orbit_point(actions[j], frac, n)?;
    }
    Ok((actions, x0, v0))
}

/// Monte-Carlo fraction of initial data in the shell `A <= sum I_i <= c4 A` whose
/// trajectories stay bounded and rotate quasi-periodically.
pub fn stability_fraction(net: &DuffingNetwork, shell: f64, n_samples: usize, seed: u64, opts: &StabilityOptions) -> Result<StabilityReport> {
    if n_samples < 50 {
        return Err(KamError::InvalidParameter(format!("need at least 50 samples (got {n_samples})")));
    }
    let (m, n) = (net.m(), net.n());
    let setup = ShellSetup::new(m, n, shell, opts)?;
    let samples: Vec<SampleOutcome> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let (actions, x0, v0) = shell_sample(m, n, shell, opts.c4, seed, i as u64)?;
            let tr = simulate(net, &x0, &v0, 0.0, setup.dt, setup.steps, &setup.sim)?;
            let sup = boundedness_sup(&tr);
            let mut change: f64 = 0.0;
            let mut omega = Vec::with_capacity(m);
            if !tr.escaped {
                for j in 0..m {
                    match frequency_extract(&tr, j, 10.0) {
                        Ok(f) => {
                            change = change.max(f.change);
                            omega.push(f.omega);
                        }
                        Err(KamError::InsufficientWinding(_)) => {
                            change = f64::INFINITY;
                            omega.push(f64::NAN);
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            let stable = !tr.escaped && sup <= opts.sup_factor * setup.shell_bound && change < opts.birkhoff_tol;
            Ok(SampleOutcome { actions, x0, v0, sup, escaped: tr.escaped, birkhoff_change: change, omega, stable })
        })
        .collect::<Result<_>>()?;
    let n_stable = samples.iter().filter(|s| s.stable).count();
    let sup_max = samples.iter().map(|s| s.sup).fold(0.0, f64::max);
    let sup_mean = samples.iter().map(|s| s.sup).sum::<f64>() / n_samples as f64;
    Ok(StabilityReport {
        shell,
        n_samples,
        n_stable,
        fraction: n_stable as f64 / n_samples as f64,
        ci: wilson_interval(n_stable, n_samples, 1.96),
        shell_bound: setup.shell_bound,
        sup_max,
        sup_mean,
        seed,
        samples,
    })
}
