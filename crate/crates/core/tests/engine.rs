use std::f64::consts::TAU;

use kam_core::diophantine::{DioParams, FrequencyMap};
use kam_core::kam::{anchor_frequency, invariance_residual, invert_generating, run, Chain, Engine, KamConfig, KamProblem, Phase};
use kam_core::taylor::layout;
use kam_core::{Domain, FourierTaylorSeries, KamError, ModeIndex, Taylor};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn half_square(c3: f64) -> FourierTaylorSeries {
    let lay = layout(1, 3);
    let mut h = Taylor::zero(&lay);
    h.coeffs_mut()[2] = C64::new(0.5, 0.0);
    h.coeffs_mut()[3] = C64::new(c3, 0.0);
    FourierTaylorSeries::action_polynomial(vec![0.0], h)
}

fn problem(terms: &[(i32, i32, f64, bool)], i0: f64) -> KamProblem {
    let mut pert = FourierTaylorSeries::zero(vec![0.0], 0, 0);
    for &(k, l, amp, sine) in terms {
        pert.add_trig(vec![k], l, amp, sine).unwrap();
    }
    KamProblem { params: DioParams::derive(2.0, 1.0, 1, 1e-3, 0.1).unwrap(), h0: half_square(0.0), perturbation: pert, i0: vec![i0] }
}

#[test]
fn zero_perturbation_gives_the_exact_torus() {
    let i0 = 1.3 + GOLDEN / 100.0;
    let p = problem(&[], i0);
    let h0 = p.h0.clone();
    let mut eng = Engine::new(p, KamConfig::default()).unwrap();
    eng.pre_step().unwrap();
    eng.average().unwrap();
    eng.main_step().unwrap();
    assert!(eng.chain().steps().iter().all(|s| s.is_identity()));
    assert!(eng.log().iter().all(|l| l.anchor == vec![i0] && l.norm_after == 0.0));
    let z = ModeIndex::zero(1);
    let shifted = h0.recenter(&[i0]).unwrap();
    for x in [1.3, 1.31, 1.32] {
        let a = eng.integrable_part().eval(&[0.0], 0.0, &[x]).re;
        let b = shifted.eval(&[0.0], 0.0, &[x]).re;
        assert!((a - b).abs() <= 1e-15, "{a} {b}");
    }
    assert!(eng.integrable_part().modes().all(|(m, _)| *m == z));

    let res = run(problem(&[], i0), KamConfig::default()).unwrap();
    assert_eq!(res.residual.max, 0.0);
    assert_eq!(res.residual.deviation, 0.0);
    assert_eq!(res.anchor, vec![i0]);
}

#[test]
fn rational_frequency_is_refused() {
    // omega0 / eps^a = 130 exactly up to rounding
    let err = run(problem(&[(1, -1, 1e-3, false)], 1.3), KamConfig::default()).unwrap_err();
    assert!(matches!(err, KamError::SmallDivisor { .. }), "{err}");
    assert_eq!(err.exit_code(), 10);
}

#[test]
fn zero_generating_function_is_the_identity() {
    let s = FourierTaylorSeries::zero(vec![1.0], 2, 3);
    let dom = Domain::new(0.1, 0.1, vec![1.0]).unwrap();
    let step = invert_generating(s, &dom, 1e-15, 10).unwrap();
    assert!(step.is_identity());
    assert_eq!(step.apply(&[0.3], 1.1, &[1.02]).unwrap(), (vec![0.3], vec![1.02]));
}

#[test]
fn action_independent_generator_keeps_angles() {
    let delta = 1e-6;
    let mut s = FourierTaylorSeries::zero(vec![1.0], 0, 2);
    s.add_trig(vec![1], -1, delta, true).unwrap();
    let dom = Domain::new(0.1, 0.1, vec![1.0]).unwrap();
    let step = invert_generating(s.clone(), &dom, 1e-15, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let phi = rng.gen::<f64>() * TAU;
        let t = rng.gen::<f64>() * TAU;
        let rho = 1.0 + (rng.gen::<f64>() - 0.5) * 0.1;
        let (th, ac) = step.apply(&[phi], t, &[rho]).unwrap();
        // no action dependence: theta = phi exactly, I = rho + dS/dtheta
        assert_eq!(th[0], phi);
        assert!((ac[0] - rho - delta * (phi - t).cos()).abs() < 1e-14);
    }
}

#[test]
fn time_average_closed_form() {
    // P = c cos t: the pre-step leaves it in the angle mean; averaging generates -eps^-b c sin t
    let c = 2e-4;
    let i0 = 1.3 + GOLDEN / 100.0;
    let mut eng = Engine::new(problem(&[(0, 1, c, false)], i0), KamConfig::default()).unwrap();
    eng.pre_step().unwrap();
    eng.average().unwrap();
    let s = eng.chain().steps().last().unwrap().generating().clone();
    let eps_b = 0.1;
    for t in [0.0, 0.4, 1.7, 3.9] {
        let got = s.eval(&[0.2], t, &[i0]).re;
        let want = -c * t.sin() / eps_b;
        assert!((got - want).abs() < 1e-18, "t={t}: {got} vs {want}");
    }
}

#[test]
fn time_independent_mean_needs_no_averaging() {
    let i0 = 1.3 + GOLDEN / 100.0;
    let mut eng = Engine::new(problem(&[(1, 0, 1e-3, false)], i0), KamConfig::default()).unwrap();
    eng.pre_step().unwrap();
    eng.pre_step().unwrap();
    assert!(eng.angle_mean().modes().all(|(m, _)| m.l == 0));
    eng.average().unwrap();
    assert!(eng.chain().steps().last().unwrap().is_identity());
}

#[test]
fn main_steps_contract_superlinearly() {
    let i0 = 1.3 + GOLDEN / 100.0;
    let p = problem(&[(1, -1, 1e-4, false)], i0);
    let mu3 = kam_core::kam::make_schedule(&p.params).unwrap().mu3;
    let res = run(p, KamConfig::default()).unwrap();
    let mains: Vec<_> = res.decay_log.iter().filter(|l| l.phase == Phase::Main).collect();
    assert!(mains.len() >= 3);
    for l in &mains[..3] {
        if l.norm_before > 0.0 {
            assert!(l.norm_after <= l.norm_before.powf(1.0 + 0.5 * mu3), "{:e} -> {:e}", l.norm_before, l.norm_after);
        }
    }
    assert!(res.residual.deviation <= res.deviation_bound, "{} > {}", res.residual.deviation, res.deviation_bound);
}

#[test]
fn residual_responds_linearly_to_a_shifted_torus() {
    let p = DioParams::derive(2.0, 1.0, 1, 1e-3, 0.1).unwrap();
    let fm = FrequencyMap::new(half_square(0.0).recenter(&[1.3]).unwrap()).unwrap();
    let zero = FourierTaylorSeries::zero(vec![1.3], 0, 0);
    let omega0 = [1.3];
    let at = |shift: f64| invariance_residual(&Chain::new(), &fm, &zero, &p, &omega0, &[1.3 + shift], 16).unwrap().max;
    assert_eq!(at(0.0), 0.0);
    let (r1, r2) = (at(1e-4), at(2e-4));
    assert!(r1 > 0.0);
    assert!((r2 / r1 - 2.0).abs() < 1e-6, "{r1} {r2}");
}

#[test]
fn anchor_examples() {
    let fm = FrequencyMap::new(half_square(0.0)).unwrap();
    let r = anchor_frequency(&fm, &[1.3], &[1.2], 1.0, 1e-14, 10).unwrap();
    assert!((r.anchor[0] - 1.3).abs() < 1e-15);
    let fm = FrequencyMap::new(half_square(1e-6)).unwrap();
    let r = anchor_frequency(&fm, &[1.3], &[1.3], 1.0, 1e-15, 10).unwrap();
    // I + 3e-6 I^2 = 1.3, stable form of the quadratic root
    let root = 2.0 * 1.3 / (1.0 + (1.0f64 + 4.0 * 3e-6 * 1.3).sqrt());
    assert!((r.anchor[0] - root).abs() < 1e-15, "{} vs {root}", r.anchor[0]);
}
