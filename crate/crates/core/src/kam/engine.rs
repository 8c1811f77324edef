//! The iteration: angle-averaging steps, one time-averaging transform, full steps,
//! and reconstruction of the torus in the original coordinates.

use std::f64::consts::TAU;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::anchor::anchor_frequency;
use super::homological::{homological_residual, solve_homological, HomologicalMode};
use super::schedule::{make_schedule, ScheduleParams};
use super::step::{invert_generating, symplectic_defect, Chain, SymplecticStep};
use crate::diophantine::{check_high, check_low, DioParams, FrequencyMap};
use crate::error::{KamError, Result};
use crate::grid::{samples_to_series, Grid};
use crate::series::{Average, Domain, FourierTaylorSeries, ModeIndex, Var};
use crate::smoothing::{decompose, DecompositionSchedule, SmoothingKernel};
use crate::taylor::{layout, Taylor};

/// Gauss-Legendre nodes and weights on `[0, 1]`.
const GL5: [(f64, f64); 5] = [
    (0.5, 0.284_444_444_444_444_4),
    (0.5 - 0.5 * 0.538_469_310_105_683_1, 0.239_314_335_249_683_2),
    (0.5 + 0.5 * 0.538_469_310_105_683_1, 0.239_314_335_249_683_2),
    (0.5 - 0.5 * 0.906_179_845_938_664, 0.118_463_442_528_094_5),
    (0.5 + 0.5 * 0.906_179_845_938_664, 0.118_463_442_528_094_5),
];

#[derive(Clone, Debug)]
pub struct KamProblem {
    pub params: DioParams,
    /// Integrable part, a pure action polynomial.
    pub h0: FourierTaylorSeries,
    pub perturbation: FourierTaylorSeries,
    /// Initial action; its frequency is preserved.
    pub i0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KamConfig {
    /// Angle-averaging steps actually performed before the time average.
    pub pre_steps: usize,
    pub main_steps: usize,
    /// Stop the full steps early once the perturbation norm drops below this.
    pub target_norm: f64,
    pub taylor_degree: usize,
    /// Points per axis of the `(theta, t)` grid.
    pub grid: usize,
    pub cutoff_cap: u32,
    pub action_radius: f64,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
    pub prune_rel: f64,
    pub slack: f64,
    /// Random points per composition check; zero disables the check.
    pub check_points: usize,
    pub check_seed: u64,
    pub embedding_samples: usize,
    pub residual_grid: usize,
    pub anchor_tol: f64,
    pub require_diophantine: bool,
    pub decomposition_s0: f64,
    pub decomposition_q: f64,
}

impl Default for KamConfig {
    fn default() -> Self {
        KamConfig {
            pre_steps: 2,
            main_steps: 3,
            target_norm: 0.0,
            taylor_degree: 2,
            grid: 32,
            cutoff_cap: 15,
            action_radius: 1e-4,
            fixed_point_tol: 1e-13,
            fixed_point_max_iter: 50,
            prune_rel: 1e-13,
            slack: 10.0,
            check_points: 50,
            check_seed: 7,
            embedding_samples: 16,
            residual_grid: 32,
            anchor_tol: 1e-13,
            require_diophantine: true,
            decomposition_s0: 0.25,
            decomposition_q: 0.5,
        }
    }
}

impl KamConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.taylor_degree == 0 {
            e.push("taylor_degree must be >= 1".to_string());
        }
        if self.grid < 4 {
            e.push(format!("grid must be >= 4 (got {})", self.grid));
        }
        if self.residual_grid < 4 {
            e.push(format!("residual_grid must be >= 4 (got {})", self.residual_grid));
        }
        if !(self.action_radius > 0.0) {
            e.push("action_radius must be positive".to_string());
        }
        if !(self.fixed_point_tol > 0.0) || self.fixed_point_max_iter == 0 {
            e.push("fixed point tolerance and iteration count must be positive".to_string());
        }
        if !(self.slack >= 1.0) {
            e.push("slack must be >= 1".to_string());
        }
        if !(self.decomposition_s0 > 0.0 && self.decomposition_s0 <= 0.25) {
            e.push("decomposition_s0 must lie in (0, 1/4]".to_string());
        }
        if !(self.decomposition_q > 0.0 && self.decomposition_q < 1.0) {
            e.push("decomposition_q must lie in (0, 1)".to_string());
        }
        e
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    Averaging,
    Main,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub phase: Phase,
    pub step: usize,
    pub cutoff_used: u32,
    pub cutoff_schedule: f64,
    pub s: f64,
    pub r: f64,
    /// Size parameter the perturbation is measured against after the step.
    pub scale: f64,
    pub norm_before: f64,
    pub norm_after: f64,
    pub bound_after: f64,
    pub min_divisor: f64,
    pub divisor_margin: f64,
    pub homological_residual: f64,
    pub contraction: f64,
    pub deriv_bound: f64,
    pub composition_defect: Option<f64>,
    pub symplectic_defect: f64,
    pub anchor: Vec<f64>,
    pub anchor_shift: f64,
    pub absorbed_piece: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSample {
    pub phi: Vec<f64>,
    pub t: f64,
    pub theta: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max: f64,
    /// Largest Fourier coefficient next to the Nyquist index, and the largest overall.
    pub nyquist: f64,
    pub total: f64,
    /// Sup of the embedding minus the trivial one.
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusResult {
    pub i0: Vec<f64>,
    pub omega0: Vec<f64>,
    pub anchor: Vec<f64>,
    pub anchor_trajectory: Vec<Vec<f64>>,
    pub decay_log: Vec<StepLog>,
    pub residual: ResidualReport,
    /// Bound on the deviation of the embedding from the identity.
    pub deviation_bound: f64,
    pub pieces: usize,
    pub unabsorbed_pieces: usize,
    pub final_norm: f64,
    pub embedding: Vec<EmbeddingSample>,
}

/// Hamiltonian in the current coordinates.
#[derive(Clone, Debug)]
struct State {
    h0: FourierTaylorSeries,
    /// Angle-independent part (time and actions only).
    h: FourierTaylorSeries,
    q: FourierTaylorSeries,
    next_piece: usize,
}

impl State {
    fn center(&self) -> &[f64] {
        self.q.center()
    }

    fn recenter(&mut self, c: &[f64]) -> Result<()> {
        self.h0 = self.h0.recenter(c)?;
        self.h = self.h.recenter(c)?;
        self.q = self.q.recenter(c)?;
        Ok(())
    }
}

pub struct Engine {
    problem: KamProblem,
    config: KamConfig,
    sched: ScheduleParams,
    grid: Grid,
    pieces: Vec<FourierTaylorSeries>,
    chain: Chain,
    state: State,
    omega0: Vec<f64>,
    log: Vec<StepLog>,
    trajectory: Vec<Vec<f64>>,
    c_ref: Option<f64>,
    c_ref_main: Option<f64>,
    pre_done: usize,
    main_done: usize,
    averaged: bool,
    /// Product of `1 + deriv_bound` over the near-identity steps.
    deriv_product: f64,
}

fn max_euclid(f: &FourierTaylorSeries) -> f64 {
    f.modes().map(|(m, _)| m.euclid()).fold(0.0, f64::max)
}

fn real_jets(lay: &std::sync::Arc<crate::taylor::Layout>, x: &[f64]) -> Vec<Taylor> {
    x.iter().map(|&v| Taylor::real(lay, v)).collect()
}

impl Engine {
    pub fn new(problem: KamProblem, config: KamConfig) -> Result<Engine> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(KamError::Config(errs));
        }
        let d = problem.params.d;
        for (name, n) in [("h0", problem.h0.dim()), ("perturbation", problem.perturbation.dim()), ("i0", problem.i0.len())] {
            if n != d {
                return Err(KamError::InvalidParameter(format!("{name} has dimension {n}, expected {d}")));
            }
        }
        let sched = make_schedule(&problem.params)?;
        let n_deg = config.taylor_degree;
        let dh = problem.h0.degree().max(n_deg).max(2);
        let h0 = problem.h0.with_degree(dh).recenter(&problem.i0)?;
        let fm0 = FrequencyMap::new(h0.clone())?;
        let omega0 = fm0.omega(&problem.i0);
        if config.require_diophantine {
            let p = &problem.params;
            let low = check_low(&omega0, p, 10_000_000);
            let k_max = (10.0 * p.cutoff.ceil()).max(1.0) as u64;
            let high = check_high(&omega0, p, k_max, 10_000_000)?;
            for c in [low, high] {
                if !c.passed {
                    let w = c.worst.expect("a failed check has a witness");
                    return Err(KamError::SmallDivisor { k: w.k, l: w.l, value: w.value, bound: w.bound });
                }
            }
        }
        // widths min(s_nu, s0 q^nu), long enough for the plateau to cover every mode
        let kernel = SmoothingKernel::default();
        let xi = max_euclid(&problem.perturbation);
        let mut widths = Vec::new();
        let mut nu = 0u64;
        loop {
            let w = sched.s_j(nu).min(config.decomposition_s0 * config.decomposition_q.powi(nu as i32));
            widths.push(w);
            nu += 1;
            if 2.0 * w * xi <= kernel.plateau {
                break;
            }
            if nu > 200 {
                return Err(KamError::ScheduleTooShort { xi });
            }
        }
        let dsched = DecompositionSchedule::new(widths, problem.params.ell)?;
        let pieces: Vec<FourierTaylorSeries> =
            decompose(&problem.perturbation, &dsched, &kernel)?.into_iter().map(|p| p.series).collect();
        let z = FourierTaylorSeries::zero(problem.i0.clone(), n_deg, 0);
        let q = pieces[0].recenter(&problem.i0)?.with_degree(n_deg);
        let state = State { h0, h: z, q, next_piece: 1 };
        let grid = Grid::new(config.grid, d + 1);
        let trajectory = vec![problem.i0.clone()];
        Ok(Engine {
            problem,
            config,
            sched,
            grid,
            pieces,
            chain: Chain::new(),
            state,
            omega0,
            log: Vec::new(),
            trajectory,
            c_ref: None,
            c_ref_main: None,
            pre_done: 0,
            main_done: 0,
            averaged: false,
            deriv_product: 1.0,
        })
    }

    pub fn schedule(&self) -> &ScheduleParams {
        &self.sched
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn pieces(&self) -> &[FourierTaylorSeries] {
        &self.pieces
    }

    pub fn perturbation(&self) -> &FourierTaylorSeries {
        &self.state.q
    }

    /// Angle averages collected by the pre-steps, still time dependent until averaging.
    pub fn angle_mean(&self) -> &FourierTaylorSeries {
        &self.state.h
    }

    pub fn integrable_part(&self) -> &FourierTaylorSeries {
        &self.state.h0
    }

    pub fn omega0(&self) -> &[f64] {
        &self.omega0
    }

    fn p(&self) -> &DioParams {
        &self.problem.params
    }

    fn eps_b(&self) -> f64 {
        self.p().eps.powf(self.p().b)
    }

    fn half(&self) -> u32 {
        (self.config.grid as u32 - 1) / 2
    }

    fn used_cutoff(&self, k: f64) -> u32 {
        let k = if k.is_finite() { k.floor().max(0.0) } else { f64::MAX };
        (k.min(u32::MAX as f64) as u32).min(self.config.cutoff_cap).min(self.half())
    }

    fn omega_jets(&self, h0: &FourierTaylorSeries) -> Result<Vec<Taylor>> {
        let lay = layout(h0.dim(), self.config.taylor_degree);
        let z = ModeIndex::zero(h0.dim());
        (0..h0.dim()).map(|j| Ok(h0.derive(Var::Action(j))?.coeff(&z).relayout(&lay))).collect()
    }

    /// Current Hamiltonian at a real point.
    pub fn hamiltonian(&self, phi: &[f64], t: f64, rho: &[f64]) -> Result<f64> {
        hamiltonian_value(self.p(), &self.pieces, &self.state, &self.chain, phi, t, rho)
    }

    /// Sample the transformed perturbation on the grid.
    fn resample(
        &self,
        step: &SymplecticStep,
        q_kept: &FourierTaylorSeries,
        remainder: Option<bool>,
        piece: Option<&FourierTaylorSeries>,
    ) -> Result<FourierTaylorSeries> {
        let d = self.p().d;
        let old = &self.state;
        let center = old.center().to_vec();
        let lay = layout(d, self.config.taylor_degree);
        let eps_b = self.eps_b();
        let quad_k = eps_b / self.p().eps_a();
        let hess: Vec<Vec<FourierTaylorSeries>> = (0..d)
            .map(|i| {
                let g = old.h0.derive(Var::Action(i))?;
                (0..d).map(|j| g.derive(Var::Action(j))).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let dq: Vec<FourierTaylorSeries> = (0..d).map(|j| old.q.derive(Var::Action(j))).collect::<Result<_>>()?;
        let dh: Vec<FourierTaylorSeries> = (0..d).map(|j| old.h.derive(Var::Action(j))).collect::<Result<_>>()?;
        let chain = &self.chain;
        let values: Vec<Taylor> = (0..self.grid.len())
            .into_par_iter()
            .map(|pt| {
                let x = self.grid.coords(pt);
                let (phi, t) = (&x[..d], x[d]);
                let phi_j = real_jets(&lay, phi);
                let rho: Vec<Taylor> = (0..d).map(|j| Taylor::variable(&lay, j, center[j])).collect();
                let (theta, act) = step.apply_jet(&phi_j, t, &rho)?;
                let mut val = q_kept.eval_jet(&theta, t, &rho);
                if let Some(with_h) = remainder {
                    let u: Vec<Taylor> = act.iter().zip(&rho).map(|(a, r)| a - r).collect();
                    if u.iter().any(|x| !x.is_zero()) {
                        for &(node, w) in &GL5 {
                            let at: Vec<Taylor> = rho.iter().zip(&u).map(|(r, ui)| r + &ui.scale_re(node)).collect();
                            let mut quad = Taylor::zero(&lay);
                            for i in 0..d {
                                for j in 0..d {
                                    let hij = hess[i][j].eval_jet(&theta, t, &at);
                                    quad += &(&(&u[i] * &hij) * &u[j]);
                                }
                            }
                            val.axpy(C64::new(w * (1.0 - node) * quad_k, 0.0), &quad);
                            for j in 0..d {
                                let mut g = dq[j].eval_jet(&theta, t, &at);
                                if with_h {
                                    g += &dh[j].eval_jet(&theta, t, &at);
                                }
                                val.axpy(C64::new(w, 0.0), &(&g * &u[j]));
                            }
                        }
                    }
                }
                if let Some(pc) = piece {
                    let (th0, i0) = chain.apply_jet(&theta, t, &act)?;
                    val += &pc.eval_jet(&th0, t, &i0);
                }
                Ok(val)
            })
            .collect::<Result<_>>()?;
        Ok(samples_to_series(&self.grid, &values, &center, u32::MAX, self.config.prune_rel))
    }

    fn check_points(&self, r: f64, salt: u64) -> Vec<(Vec<f64>, f64, Vec<f64>)> {
        let d = self.p().d;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.check_seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let c = self.state.center().to_vec();
        (0..self.config.check_points.max(8))
            .map(|_| {
                let phi = (0..d).map(|_| rng.gen::<f64>() * TAU).collect();
                let t = rng.gen::<f64>() * TAU;
                let rho = c.iter().map(|x| x + (rng.gen::<f64>() - 0.5) * r).collect();
                (phi, t, rho)
            })
            .collect()
    }

    /// Compare the new Hamiltonian with the old one pulled back through the step.
    fn composition_defect(&self, before: &State, after: &State, step: &SymplecticStep, r: f64, salt: u64) -> Result<Option<f64>> {
        if self.config.check_points == 0 {
            return Ok(None);
        }
        let ds_dt = step.generating().derive(Var::Time)?;
        let mut after_chain = self.chain.clone();
        after_chain.push(step.clone());
        let pts = self.check_points(r, salt);
        let worst = pts
            .par_iter()
            .take(self.config.check_points)
            .map(|(phi, t, rho)| {
                let (th, ac) = step.apply(phi, *t, rho)?;
                let hb = hamiltonian_value(self.p(), &self.pieces, before, &self.chain, &th, *t, &ac)?;
                let lhs = hb + ds_dt.eval(&th, *t, rho).re;
                let ha = hamiltonian_value(self.p(), &self.pieces, after, &after_chain, phi, *t, rho)?;
                Ok((ha - lhs).abs() / (1.0 + hb.abs()))
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Ok(Some(worst))
    }

    fn symplectic_check(&self, step: &SymplecticStep, r: f64, salt: u64) -> Result<f64> {
        let pts = self.check_points(r, salt ^ 0x5a5a);
        let mut worst: f64 = 0.0;
        for (phi, t, rho) in pts.iter().take(8) {
            worst = worst.max(symplectic_defect(&step.jacobian(phi, *t, rho)?));
        }
        Ok(worst)
    }

    fn check_derivative(&mut self, step: &SymplecticStep) -> Result<()> {
        let allowed = 0.5f64.powi(self.log.len() as i32 + 2);
        if step.deriv_bound > allowed {
            return Err(KamError::StepTooLarge(format!("derivative bound {:e} above {allowed:e}", step.deriv_bound)));
        }
        self.deriv_product *= 1.0 + step.deriv_bound;
        if self.deriv_product > 2.0 {
            return Err(KamError::StepTooLarge(format!("composed derivative bound {:e} above 2", self.deriv_product)));
        }
        Ok(())
    }

    fn piece(&self, idx: usize) -> Option<&FourierTaylorSeries> {
        self.pieces.get(idx).filter(|p| !p.is_zero())
    }

    /// One angle-averaging step.
    pub fn pre_step(&mut self) -> Result<&StepLog> {
        let m = self.pre_done;
        self.pre_step_inner(m).map_err(|e| e.in_step("pre", m))?;
        Ok(self.log.last().expect("step logged"))
    }

    fn pre_step_inner(&mut self, m: usize) -> Result<()> {
        if self.averaged {
            return Err(KamError::InvalidParameter("angle-averaging step after the time average".into()));
        }
        let mj = m as u64;
        let p = self.p().clone();
        let center = self.state.center().to_vec();
        let r_used = self.sched.r_j(mj).min(self.config.action_radius);
        let dom = Domain::new(self.sched.s_j(mj), r_used, center.clone())?;
        let norm_before = self.state.q.majorant_norm(&dom)?;
        let c_ref = *self.c_ref.get_or_insert(norm_before / self.sched.eps_j(mj));
        let k_sched = self.sched.k_j(mj);
        let kk = self.used_cutoff(k_sched);
        let (q1, q2) = self.state.q.split_by_cutoff(kk);
        let omega = self.omega_jets(&self.state.h0)?;
        let scale = 1.0 / self.eps_b();
        let bound = |md: &ModeIndex| p.low_bound(md.k_norm() as f64) / 2.0;
        let sol = solve_homological(&q1, &omega, p.eps_a(), scale, HomologicalMode::AnglesOnly, &bound)?;
        let hres = homological_residual(&sol.s, &q1, &omega, p.eps_a(), scale, HomologicalMode::AnglesOnly)?.majorant_norm(&dom)?;
        let step = invert_generating(sol.s, &dom, self.config.fixed_point_tol, self.config.fixed_point_max_iter)?;
        self.check_derivative(&step)?;
        let next = self.state.next_piece;
        let q_new = self.resample(&step, &q2, Some(true), self.piece(next))?;
        let mut after = self.state.clone();
        after.h = self.state.h.add(&q1.zero_mode(Average::Angles))?;
        after.q = q_new;
        after.next_piece = next + 1;
        let comp = self.composition_defect(&self.state, &after, &step, r_used, self.log.len() as u64)?;
        let sdef = self.symplectic_check(&step, r_used, self.log.len() as u64)?;
        let dom_next = Domain::new(self.sched.s_j(mj + 1), self.sched.r_j(mj + 1).min(self.config.action_radius), center.clone())?;
        let norm_after = after.q.majorant_norm(&dom_next)?;
        let scale_next = self.sched.eps_j(mj + 1);
        let bound_after = self.config.slack * c_ref * scale_next;
        let entry = StepLog {
            phase: Phase::Pre,
            step: m,
            cutoff_used: kk,
            cutoff_schedule: k_sched,
            s: dom.s,
            r: dom.r,
            scale: scale_next,
            norm_before,
            norm_after,
            bound_after,
            min_divisor: sol.min_divisor,
            divisor_margin: sol.min_margin,
            homological_residual: hres,
            contraction: step.contraction,
            deriv_bound: step.deriv_bound,
            composition_defect: comp,
            symplectic_defect: sdef,
            anchor: center,
            anchor_shift: 0.0,
            absorbed_piece: self.piece(next).map(|_| next),
        };
        self.chain.push(step);
        self.state = after;
        self.log.push(entry);
        self.pre_done += 1;
        if norm_after > bound_after.max(f64::MIN_POSITIVE) {
            return Err(KamError::NormBlowup { id: format!("pre {m}"), value: norm_after, bound: bound_after });
        }
        Ok(())
    }

    /// Remove the time dependence of the angle-independent part, then re-anchor.
    pub fn average(&mut self) -> Result<&StepLog> {
        self.average_inner().map_err(|e| e.in_step("averaging", 0))?;
        Ok(self.log.last().expect("step logged"))
    }

    fn average_inner(&mut self) -> Result<()> {
        if self.averaged {
            return Err(KamError::InvalidParameter("time average already applied".into()));
        }
        let p = self.p().clone();
        let eps_b = self.eps_b();
        let center = self.state.center().to_vec();
        let d = p.d;
        let h = &self.state.h;
        let mean = h.zero_mode(Average::AnglesAndTime);
        // S = -eps^-b sum_{l != 0} h_l (e^{ilt} - 1)/(il)
        let osc = h.filter(|m| m.l != 0).antiderive_t().scale_re(-1.0 / eps_b);
        let mut s = osc.clone();
        let mut c0 = Taylor::zero(h.layout());
        for (_, pm) in osc.modes() {
            c0 -= pm;
        }
        let zm = ModeIndex::zero(d);
        let c0 = &s.coeff(&zm) + &c0;
        s.insert(zm, c0)?;
        let s = s.symmetrize();
        let check = h.add(&s.derive(Var::Time)?.scale_re(eps_b))?.filter(|m| m.l != 0).max_coeff();
        if check > 1e-12 {
            return Err(KamError::NormBlowup { id: "time average".into(), value: check, bound: 1e-12 });
        }
        let r_used = self.sched.r_tilde(0).min(self.config.action_radius);
        let dom = Domain::new(self.sched.s_tilde(0), r_used, center.clone())?;
        let step = invert_generating(s, &dom, self.config.fixed_point_tol, self.config.fixed_point_max_iter)?;
        let norm_before = self.state.q.majorant_norm(&dom)?;
        let q_new = self.resample(&step, &self.state.q, None, None)?;
        let mut after = self.state.clone();
        let dh = after.h0.degree();
        after.h0 = after.h0.add(&mean.scale_re(p.eps.powf(p.a - p.b)).with_degree(dh))?;
        after.h = FourierTaylorSeries::zero(center.clone(), self.config.taylor_degree, 0);
        after.q = q_new;
        let comp = self.composition_defect(&self.state, &after, &step, r_used, 1000)?;
        let sdef = self.symplectic_check(&step, r_used, 1000)?;
        let fm = FrequencyMap::new(after.h0.clone())?;
        let an = anchor_frequency(&fm, &self.omega0, &center, self.sched.r_tilde(0), self.config.anchor_tol, 50)?;
        after.recenter(&an.anchor)?;
        let shift = an.anchor.iter().zip(&center).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dom_after = Domain::new(self.sched.s_tilde(0), r_used, an.anchor.clone())?;
        let norm_after = after.q.majorant_norm(&dom_after)?;
        let entry = StepLog {
            phase: Phase::Averaging,
            step: 0,
            cutoff_used: 0,
            cutoff_schedule: 0.0,
            s: dom.s,
            r: dom.r,
            scale: self.sched.eps_tilde(0),
            norm_before,
            norm_after,
            bound_after: f64::INFINITY,
            min_divisor: f64::INFINITY,
            divisor_margin: f64::INFINITY,
            homological_residual: check,
            contraction: step.contraction,
            deriv_bound: step.deriv_bound,
            composition_defect: comp,
            symplectic_defect: sdef,
            anchor: an.anchor.clone(),
            anchor_shift: shift,
            absorbed_piece: None,
        };
        self.chain.push(step);
        self.state = after;
        self.trajectory.push(an.anchor);
        self.log.push(entry);
        self.averaged = true;
        Ok(())
    }

    /// One full step: removes every non-constant mode below the cutoff.
    pub fn main_step(&mut self) -> Result<&StepLog> {
        let m = self.main_done;
        self.main_step_inner(m).map_err(|e| e.in_step("main", m))?;
        Ok(self.log.last().expect("step logged"))
    }

    fn main_step_inner(&mut self, m: usize) -> Result<()> {
        if !self.averaged {
            return Err(KamError::InvalidParameter("full step before the time average".into()));
        }
        let mj = m as u64;
        let p = self.p().clone();
        let center = self.state.center().to_vec();
        let r_used = self.sched.r_tilde(mj).min(self.config.action_radius);
        let dom = Domain::new(self.sched.s_tilde(mj), r_used, center.clone())?;
        let norm_before = self.state.q.majorant_norm(&dom)?;
        let c_ref = *self.c_ref_main.get_or_insert(norm_before / self.sched.eps_tilde(mj));
        let k_sched = self.sched.k_tilde(mj);
        let kk = self.used_cutoff(k_sched);
        let (q1, q2) = self.state.q.split_by_cutoff(kk);
        let omega = self.omega_jets(&self.state.h0)?;
        let scale = 1.0 / self.eps_b();
        let bound = |md: &ModeIndex| p.high_bound(md.k_norm() as f64) / 2.0;
        let sol = solve_homological(&q1, &omega, p.eps_a(), scale, HomologicalMode::AnglesAndTime, &bound)?;
        let hres = homological_residual(&sol.s, &q1, &omega, p.eps_a(), scale, HomologicalMode::AnglesAndTime)?.majorant_norm(&dom)?;
        let step = invert_generating(sol.s, &dom, self.config.fixed_point_tol, self.config.fixed_point_max_iter)?;
        self.check_derivative(&step)?;
        let next = self.state.next_piece;
        let q_new = self.resample(&step, &q2, Some(false), self.piece(next))?;
        let mut after = self.state.clone();
        let dh = after.h0.degree();
        let mean = q1.zero_mode(Average::AnglesAndTime).scale_re(p.eps.powf(p.a - p.b)).with_degree(dh);
        after.h0 = after.h0.add(&mean)?;
        after.q = q_new;
        after.next_piece = next + 1;
        let salt = self.log.len() as u64;
        let comp = self.composition_defect(&self.state, &after, &step, r_used, salt)?;
        let sdef = self.symplectic_check(&step, r_used, salt)?;
        let fm = FrequencyMap::new(after.h0.clone())?;
        let an = anchor_frequency(&fm, &self.omega0, &center, self.sched.r_tilde(mj), self.config.anchor_tol, 50)?;
        after.recenter(&an.anchor)?;
        let shift = an.anchor.iter().zip(&center).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dom_next = Domain::new(self.sched.s_tilde(mj + 1), self.sched.r_tilde(mj + 1).min(self.config.action_radius), an.anchor.clone())?;
        let norm_after = after.q.majorant_norm(&dom_next)?;
        let scale_next = self.sched.eps_tilde(mj + 1);
        let bound_after = self.config.slack * c_ref * scale_next;
        let entry = StepLog {
            phase: Phase::Main,
            step: m,
            cutoff_used: kk,
            cutoff_schedule: k_sched,
            s: dom.s,
            r: dom.r,
            scale: scale_next,
            norm_before,
            norm_after,
            bound_after,
            min_divisor: sol.min_divisor,
            divisor_margin: sol.min_margin,
            homological_residual: hres,
            contraction: step.contraction,
            deriv_bound: step.deriv_bound,
            composition_defect: comp,
            symplectic_defect: sdef,
            anchor: an.anchor.clone(),
            anchor_shift: shift,
            absorbed_piece: self.piece(next).map(|_| next),
        };
        self.chain.push(step);
        self.state = after;
        self.trajectory.push(an.anchor);
        self.log.push(entry);
        self.main_done += 1;
        if norm_after > bound_after.max(f64::MIN_POSITIVE) {
            return Err(KamError::NormBlowup { id: format!("main {m}"), value: norm_after, bound: bound_after });
        }
        Ok(())
    }

    pub fn anchor(&self) -> &[f64] {
        self.state.center()
    }

    /// Residual of the reconstructed torus for the original Hamiltonian.
    pub fn residual(&self) -> Result<ResidualReport> {
        let fm0 = FrequencyMap::new(self.problem.h0.with_degree(self.problem.h0.degree().max(2)))?;
        invariance_residual(&self.chain, &fm0, &self.problem.perturbation, self.p(), &self.omega0, self.anchor(), self.config.residual_grid)
    }

    pub fn finish(self) -> Result<TorusResult> {
        let residual = self.residual()?;
        let d = self.p().d;
        let n = self.config.embedding_samples.max(1);
        let g = Grid::new(n, d + 1);
        let anchor = self.anchor().to_vec();
        let embedding = (0..g.len())
            .into_par_iter()
            .map(|pt| {
                let x = g.coords(pt);
                let (theta, action) = self.chain.apply(&x[..d], x[d], &anchor)?;
                Ok(EmbeddingSample { phi: x[..d].to_vec(), t: x[d], theta, action })
            })
            .collect::<Result<Vec<_>>>()?;
        let dom = Domain::new(0.0, 0.0, anchor.clone())?;
        let deviation_bound = self.sched.eps_tilde(0).powf(1.0 / (2.0 * self.p().ell));
        let unabsorbed = self.pieces.iter().skip(self.state.next_piece).filter(|p| !p.is_zero()).count();
        Ok(TorusResult {
            i0: self.problem.i0.clone(),
            omega0: self.omega0.clone(),
            anchor,
            anchor_trajectory: self.trajectory.clone(),
            decay_log: self.log.clone(),
            residual,
            deviation_bound,
            pieces: self.pieces.len(),
            unabsorbed_pieces: unabsorbed,
            final_norm: self.state.q.majorant_norm(&dom)?,
            embedding,
        })
    }
}

fn hamiltonian_value(
    p: &DioParams,
    pieces: &[FourierTaylorSeries],
    st: &State,
    chain: &Chain,
    phi: &[f64],
    t: f64,
    rho: &[f64],
) -> Result<f64> {
    let mut v = st.h0.eval(phi, t, rho).re / p.eps_a();
    let mut pert = st.h.eval(phi, t, rho).re + st.q.eval(phi, t, rho).re;
    let rest = pieces.iter().skip(st.next_piece).filter(|f| !f.is_zero()).collect::<Vec<_>>();
    if !rest.is_empty() {
        let (th, ac) = chain.apply(phi, t, rho)?;
        for f in rest {
            pert += f.eval(&th, t, &ac).re;
        }
    }
    v += pert / p.eps.powf(p.b);
    Ok(v)
}

/// Defect of `K(phi, t) = chain(phi, t, anchor)` as a solution of the original equations
/// `(omega0/eps^a . d_phi + d_t) K = X_H(K, t)`, sup over a grid.
pub fn invariance_residual(
    chain: &Chain,
    fm0: &FrequencyMap,
    perturbation: &FourierTaylorSeries,
    p: &DioParams,
    omega0: &[f64],
    anchor: &[f64],
    n: usize,
) -> Result<ResidualReport> {
    let d = p.d;
    let grid = Grid::new(n, d + 1);
    let eps_a = p.eps_a();
    let eps_b = p.eps.powf(p.b);
    let pts: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.len())
        .into_par_iter()
        .map(|pt| {
            let x = grid.coords(pt);
            chain.apply(&x[..d], x[d], anchor)
        })
        .collect::<Result<_>>()?;
    // periodic parts: theta - phi and I
    let mut chans: Vec<Vec<C64>> = (0..2 * d)
        .map(|c| {
            (0..grid.len())
                .map(|pt| {
                    let v = if c < d { pts[pt].0[c] - grid.coords(pt)[c] } else { pts[pt].1[c - d] };
                    C64::new(v, 0.0)
                })
                .collect()
        })
        .collect();
    let mut hi: f64 = 0.0;
    let mut total: f64 = 0.0;
    let mut deviation: f64 = 0.0;
    for (pt, (th, ac)) in pts.iter().enumerate() {
        let x = grid.coords(pt);
        for j in 0..d {
            deviation = deviation.max((th[j] - x[j]).abs()).max((ac[j] - anchor[j]).abs());
        }
    }
    let edge = (n as i32) / 2 - 1;
    for ch in chans.iter_mut() {
        grid.forward(ch);
        for (pos, c) in ch.iter_mut().enumerate() {
            let f = grid.freq(pos);
            let a = c.norm();
            total = total.max(a);
            if f.iter().any(|x| x.abs() >= edge) {
                hi = hi.max(a);
            }
            let w: f64 = f[..d].iter().zip(omega0).map(|(k, w)| *k as f64 * w).sum::<f64>() / eps_a + f[d] as f64;
            *c *= C64::new(0.0, w);
        }
        grid.inverse(ch);
    }
    if hi > 1e-10 * total && hi > 1e-13 {
        return Err(KamError::GridTooCoarse { hi, total });
    }
    let dp_di: Vec<FourierTaylorSeries> = if perturbation.degree() == 0 {
        vec![FourierTaylorSeries::zero(perturbation.center().to_vec(), 0, 0); d]
    } else {
        (0..d).map(|j| perturbation.derive(Var::Action(j))).collect::<Result<_>>()?
    };
    let dp_dth: Vec<FourierTaylorSeries> = (0..d).map(|j| perturbation.derive(Var::Angle(j))).collect::<Result<_>>()?;
    let max = pts
        .par_iter()
        .enumerate()
        .map(|(pt, (th, ac))| {
            let t = grid.coords(pt)[d];
            let w = fm0.omega(ac);
            let mut worst: f64 = 0.0;
            for j in 0..d {
                let lhs_th = omega0[j] / eps_a + chans[j][pt].re;
                let rhs_th = w[j] / eps_a + dp_di[j].eval(th, t, ac).re / eps_b;
                let lhs_i = chans[d + j][pt].re;
                let rhs_i = -dp_dth[j].eval(th, t, ac).re / eps_b;
                worst = worst.max((lhs_th - rhs_th).abs()).max((lhs_i - rhs_i).abs());
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    Ok(ResidualReport { max, nyquist: hi, total, deviation })
}

/// Run the whole iteration.
pub fn run(problem: KamProblem, config: KamConfig) -> Result<TorusResult> {
    let (pre, main, target) = (config.pre_steps, config.main_steps, config.target_norm);
    let mut eng = Engine::new(problem, config)?;
    for _ in 0..pre {
        eng.pre_step()?;
    }
    eng.average()?;
    for _ in 0..main {
        let norm = eng.log().last().map(|l| l.norm_after).unwrap_or(f64::INFINITY);
        if norm <= target {
            break;
        }
        eng.main_step()?;
    }
    eng.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(eps: f64, amp: f64) -> KamProblem {
        let params = DioParams::derive(2.0, 1.0, 1, 1e-3, eps).unwrap();
        let lay = layout(1, 2);
        let mut h = Taylor::zero(&lay);
        h.coeffs_mut()[2] = C64::new(0.5, 0.0);
        let h0 = FourierTaylorSeries::action_polynomial(vec![0.0], h);
        let mut pert = FourierTaylorSeries::zero(vec![0.0], 0, 2);
        pert.add_trig(vec![1], -1, amp, false).unwrap();
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        KamProblem { params, h0, perturbation: pert, i0: vec![1.3 + golden / 100.0] }
    }

    #[test]
    fn toy_run_converges() {
        let t0 = std::time::Instant::now();
        let res = run(toy(0.1, 1e-3), KamConfig::default()).unwrap();
        for l in &res.decay_log {
            eprintln!(
                "{:?} {} K={} norm {:e} -> {:e} (bound {:e}) comp {:?} sym {:e} db {:e} shift {:e}",
                l.phase, l.step, l.cutoff_used, l.norm_before, l.norm_after, l.bound_after, l.composition_defect, l.symplectic_defect, l.deriv_bound, l.anchor_shift
            );
        }
        eprintln!("residual {:?} elapsed {:?}", res.residual, t0.elapsed());
        assert!(res.residual.max < 1e-6);
    }
}
