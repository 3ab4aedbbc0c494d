//! Zero-delay stabilizing seed gain for the bilinear search.
//!
//! An LQR gain of the delay-free system `(A + Ad, B)` fixes a direction; it is
//! shrunk along a logarithmic grid to the scale that minimizes the delayed
//! loop's spectral abscissa and, for [`SeedGain::FastestDecay`], polished by
//! Nelder–Mead on that abscissa.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::delay_lmi::rightmost_candidate;
use crate::linalg::{care, spectral_abscissa};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedGain {
    /// Keep `K = 0` whenever the open loop is already stable at `h_m`.
    Minimal,
    /// Start from the gain minimizing the delayed loop's spectral abscissa.
    #[default]
    FastestDecay,
}

const SEED_NODES: usize = 24;

pub(super) fn abscissa(a: &DMatrix<f64>, a_d: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>, h: f64) -> f64 {
    let v = rightmost_candidate(a, &(a_d + b * k), h, SEED_NODES).re;
    if v.is_finite() { v } else { f64::INFINITY }
}

/// Seed gain in the coordinates of `(a, a_d, b)`.
pub(super) fn seed_gain(
    a: &DMatrix<f64>,
    a_d: &DMatrix<f64>,
    b: &DMatrix<f64>,
    h: f64,
    mode: SeedGain,
) -> Result<DMatrix<f64>> {
    let (n, m) = (a.nrows(), b.ncols());
    let zero = DMatrix::zeros(m, n);
    let open_stable = spectral_abscissa(&(a + a_d)) < 0.0 && abscissa(a, a_d, b, &zero, h) < 0.0;
    if mode == SeedGain::Minimal && open_stable {
        return Ok(zero);
    }

    let sum = a + a_d;
    let x = care(&sum, b, &DMatrix::identity(n, n), &DMatrix::identity(m, m))?;
    let lqr = -b.transpose() * x;
    let closed = spectral_abscissa(&(&sum + b * &lqr));
    if closed >= 0.0 {
        return Err(Error::UnstableAtZeroDelay { abscissa: closed });
    }

    let mut best = (if open_stable { abscissa(a, a_d, b, &zero, h) } else { f64::INFINITY }, zero);
    for i in 0..=80 {
        let k = &lqr * 10f64.powf(-8.0 + 0.1 * i as f64);
        if spectral_abscissa(&(&sum + b * &k)) >= 0.0 {
            continue;
        }
        let v = abscissa(a, a_d, b, &k, h);
        if v < best.0 {
            best = (v, k);
        }
    }
    if !best.0.is_finite() {
        // nothing on the grid survives the delay; fall back to the zero-delay gain
        best = (abscissa(a, a_d, b, &lqr, h), lqr);
    }
    if mode == SeedGain::Minimal {
        return Ok(best.1);
    }

    let k0 = best.1;
    let scale = k0.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1e-12);
    let objective = |y: &[f64]| {
        let k = DMatrix::from_row_slice(m, n, y).map(|v| v * scale);
        if spectral_abscissa(&(&sum + b * &k)) >= 0.0 {
            return f64::INFINITY;
        }
        abscissa(a, a_d, b, &k, h)
    };
    let start: Vec<f64> = k0.transpose().iter().map(|v| v / scale).collect();
    let (y, value) = nelder_mead(&objective, &start, 0.1, 1500);
    if value < best.0 {
        Ok(DMatrix::from_row_slice(m, n, &y).map(|v| v * scale))
    } else {
        Ok(k0)
    }
}

/// Plain Nelder–Mead simplex minimization (reflection 1, expansion 2,
/// contraction ½, shrink ½).
pub(super) fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let dim = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += if x[i] != 0.0 { step * x[i].abs().max(1e-3) } else { step };
        let v = f(&x);
        simplex.push((x, v));
    }
    let mut evals = dim + 1;
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    let lerp = |from: &[f64], to: &[f64], t: f64| -> Vec<f64> {
        from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect()
    };
    while evals < max_evals {
        order(&mut simplex);
        let spread = simplex[dim].1 - simplex[0].1;
        if spread.is_finite() && spread.abs() <= 1e-12 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(x, _)| x[j]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let reflected = lerp(&worst.0, &centroid, 2.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = lerp(&worst.0, &centroid, 3.0);
            let fe = f(&expanded);
            evals += 1;
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let contracted = if fr < worst.1 { lerp(&centroid, &reflected, 0.5) } else { lerp(&centroid, &worst.0, 0.5) };
            let fc = f(&contracted);
            evals += 1;
            if fc < worst.1.min(fr) {
                simplex[dim] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let x = lerp(&best, &entry.0, 0.5);
                    let v = f(&x);
                    *entry = (x, v);
                }
                evals += dim;
            }
        }
    }
    order(&mut simplex);
    simplex.swap_remove(0)
}
