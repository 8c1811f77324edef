//! Newton solve for the action whose frequency equals a prescribed vector.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::diophantine::FrequencyMap;
use crate::error::{KamError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorResult {
    pub anchor: Vec<f64>,
    /// Newton iterates, starting point first.
    pub iterates: Vec<Vec<f64>>,
    /// `max_j |omega_j(anchor) - target_j|`.
    pub mismatch: f64,
}

fn mismatch(fm: &FrequencyMap, x: &[f64], target: &[f64]) -> Vec<f64> {
    fm.omega(x).iter().zip(target).map(|(a, b)| a - b).collect()
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solve `omega(x) = target` starting from `start`, staying within `radius` (sup norm).
pub fn anchor_frequency(
    fm: &FrequencyMap,
    target: &[f64],
    start: &[f64],
    radius: f64,
    tol: f64,
    max_iter: usize,
) -> Result<AnchorResult> {
    if target.len() != fm.dim() || start.len() != fm.dim() {
        return Err(KamError::DimensionMismatch { expected: fm.dim(), got: target.len().min(start.len()) });
    }
    let mut x = start.to_vec();
    let mut iterates = vec![x.clone()];
    let mut f = mismatch(fm, &x, target);
    let mut it = 0;
    while sup(&f) > tol {
        if it == max_iter {
            return Err(KamError::AnchorLost(format!("Newton did not converge in {max_iter} iterations (mismatch {:e})", sup(&f))));
        }
        let h = fm.hessian(&x);
        let dx = h
            .lu()
            .solve(&DVector::from_vec(f.clone()))
            .ok_or_else(|| KamError::AnchorLost(format!("singular frequency Jacobian at {x:?}")))?;
        let next: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a - b).collect();
        let moved = sup(&next.iter().zip(start).map(|(a, b)| a - b).collect::<Vec<_>>());
        if !(moved <= radius) {
            return Err(KamError::AnchorLost(format!("anchor moved {moved:e}, allowed {radius:e}")));
        }
        let stalled = next == x;
        x = next;
        iterates.push(x.clone());
        f = mismatch(fm, &x, target);
        it += 1;
        if stalled {
            break;
        }
    }
    let m = sup(&f);
    if m > tol {
        return Err(KamError::AnchorLost(format!("Newton stalled at mismatch {m:e}")));
    }
    Ok(AnchorResult { anchor: x, iterates, mismatch: m })
}
