//! Numerical search for Lyapunov-Krasovskii matrices.
//!
//! `P`, `Q` and `R` are parametrized by square-root factors (`P = L Lᵀ`), so
//! positive semidefiniteness holds by construction. The objective is the
//! largest eigenvalue of the constrained form divided by
//! `tr P + tr Q + tr R`, which makes it invariant to the overall scale of the
//! factors. The maximum eigenvalue is smoothed with a log-sum-exp of the
//! spectrum whose temperature decays over the run, and the factors follow
//! Adam steps on that smoothed objective. The search only has to *find* a
//! candidate: callers always re-verify it with an exact eigenvalue check.
//!
//! All work happens in balanced coordinates `x = T x̃` with `T` diagonal;
//! results are mapped back before they leave this module.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{constraint_unchecked, gamma_adjoint, gamma_unchecked, null_space_basis, LkParams};
use crate::linalg::{self, balance};

/// Budget and tuning of the matrix search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOptions {
    /// Independent seeded restarts; the best result wins.
    pub restarts: usize,
    /// Descent steps per restart.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Stop a restart once the normalized maximum eigenvalue is below `-target`.
    pub target: f64,
    pub seed: u64,
    /// Upper end of delay-margin searches, seconds.
    pub h_cap: f64,
    /// Run restarts on the rayon pool. Results do not depend on this flag.
    pub parallel: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            iterations: 4000,
            learning_rate: 0.02,
            target: 1e-6,
            seed: 0,
            h_cap: 50.0,
            parallel: true,
        }
    }
}

/// Seed of restart `index`, derived from the base seed.
pub(crate) fn restart_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `f` for every restart index and keeps the lowest score; ties go to
/// the lowest index.
pub(crate) fn best_of<T: Send>(
    restarts: usize,
    parallel: bool,
    f: impl Fn(usize) -> (f64, T) + Sync + Send,
) -> T {
    let runs: Vec<(f64, T)> = if parallel {
        (0..restarts.max(1)).into_par_iter().map(&f).collect()
    } else {
        (0..restarts.max(1)).map(&f).collect()
    };
    let mut best: Option<(f64, T)> = None;
    for (score, item) in runs {
        let better = match &best {
            None => true,
            Some((b, _)) => score < *b || (b.is_nan() && !score.is_nan()),
        };
        if better {
            best = Some((score, item));
        }
    }
    best.expect("at least one restart").1
}

/// Diagonal change of coordinates `x = T x̃`.
#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    pub t: DVector<f64>,
}

impl Scaling {
    pub fn new(a: &DMatrix<f64>, a_d: &DMatrix<f64>) -> Self {
        Self { t: balance(a, a_d) }
    }

    pub fn dim(&self) -> usize {
        self.t.len()
    }

    /// `T⁻¹ M T`
    pub fn similar(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * self.t[j] / self.t[i])
    }

    /// `T⁻¹ B`
    pub fn input(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] / self.t[i])
    }

    /// Gain in balanced coordinates: `K̃ = K T`.
    #[cfg(test)]
    pub fn gain_to(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] * self.t[j])
    }

    pub fn gain_from(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] / self.t[j])
    }

    fn repeated(&self, blocks: usize) -> DVector<f64> {
        let n = self.dim();
        DVector::from_fn(n * blocks, |i, _| self.t[i % n])
    }

    /// Quadratic-form matrix seen in original coordinates: `D⁻¹ M̃ D⁻¹`
    /// with `D` the `T` blocks repeated.
    pub fn form_from(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.repeated(m.nrows() / self.dim());
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (d[i] * d[j]))
    }

    pub fn form_to(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.repeated(m.nrows() / self.dim());
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[i] * d[j])
    }

    /// Slack matrix in original coordinates: `X = D⁻¹ X̃ T⁻¹`.
    pub fn slack_from(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.repeated(x.nrows() / self.dim());
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] / (d[i] * self.t[j]))
    }

    #[cfg(test)]
    pub fn slack_to(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.repeated(x.nrows() / self.dim());
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * d[i] * self.t[j])
    }
}

/// Adam moment estimates for one matrix parameter.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    pub fn new(shape: (usize, usize)) -> Self {
        Self { m: DMatrix::zeros(shape.0, shape.1), v: DMatrix::zeros(shape.0, shape.1), t: 0 }
    }

    pub fn step(&mut self, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-12);
        }
    }
}

/// Square-root factors of `(P, Q, R)`.
#[derive(Debug, Clone)]
pub(crate) struct Factors {
    pub lp: DMatrix<f64>,
    pub lq: DMatrix<f64>,
    pub lr: DMatrix<f64>,
}

impl Factors {
    pub fn identity(n: usize, r: usize) -> Self {
        Self {
            lp: DMatrix::identity(n, n),
            lq: DMatrix::identity(r * n, r * n),
            lr: DMatrix::identity(n, n),
        }
    }

    pub fn perturbed(n: usize, r: usize, rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let mut f = Self::identity(n, r);
        for m in [&mut f.lp, &mut f.lq, &mut f.lr] {
            for v in m.iter_mut() {
                *v += amplitude * rng.random_range(-1.0..1.0);
            }
        }
        f
    }

    /// Factors of an existing certificate, expressed in balanced coordinates.
    pub fn from_lk(lk: &LkParams, scaling: &Scaling) -> Self {
        Self {
            lp: sqrt_factor(&scaling.form_to(&lk.p)),
            lq: sqrt_factor(&scaling.form_to(&lk.q)),
            lr: sqrt_factor(&scaling.form_to(&lk.r_mat)),
        }
    }

    pub fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (
            &self.lp * self.lp.transpose(),
            &self.lq * self.lq.transpose(),
            &self.lr * self.lr.transpose(),
        )
    }

    pub fn to_lk(&self, scaling: &Scaling, h: f64, r: usize) -> LkParams {
        let (p, q, rm) = self.matrices();
        LkParams {
            p: linalg::symmetrize(&scaling.form_from(&p)),
            q: linalg::symmetrize(&scaling.form_from(&q)),
            r_mat: linalg::symmetrize(&scaling.form_from(&rm)),
            h_m: h,
            r,
        }
    }
}

/// Symmetric square root used as a factor of a (near) positive definite matrix.
fn sqrt_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(linalg::symmetrize(m));
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(*v));
    let floor = 1e-10 * top.max(f64::MIN_POSITIVE);
    let root = eig.eigenvalues.map(|v| v.max(floor).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Smoothed maximum eigenvalue of a symmetric matrix and its gradient.
pub(crate) struct SmoothMax {
    pub lambda_max: f64,
    pub grad: DMatrix<f64>,
}

pub(crate) fn smooth_max(f: &DMatrix<f64>, temperature: f64) -> SmoothMax {
    let eig = SymmetricEigen::new(linalg::symmetrize(f));
    let w = &eig.eigenvalues;
    let wmax = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = w.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let mu = temperature * spread;
    let mut weights = w.map(|v| ((v - wmax) / mu).exp());
    let total: f64 = weights.sum();
    weights /= total;
    let v = &eig.eigenvectors;
    let grad = v * DMatrix::from_diagonal(&weights) * v.transpose();
    SmoothMax { lambda_max: wmax, grad }
}

pub(crate) fn temperature(k: usize) -> f64 {
    (1e-3 * 0.997f64.powi(k as i32)).max(1e-6)
}

/// Gradients of `λ/tr` with respect to the three factors, where `g_*` are the
/// gradients of `λ` with respect to `P`, `Q`, `R`.
pub(crate) fn factor_grads(
    f: &Factors,
    (gp, gq, gr): (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>),
    lambda: f64,
    trace: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let shift = lambda / (trace * trace);
    let norm = |g: DMatrix<f64>, l: &DMatrix<f64>| {
        let n = g.nrows();
        let g = linalg::symmetrize(&g) / trace - DMatrix::identity(n, n) * shift;
        g * l * 2.0
    };
    (norm(gp, &f.lp), norm(gq, &f.lq), norm(gr, &f.lr))
}

pub(crate) fn trace3(p: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    p.trace() + q.trace() + r.trace()
}

/// Descends on `λ_max(S⊥ᵀ Γ S⊥) / tr` for one restart. Returns the best
/// normalized value and the factors achieving it.
fn descend_projected(
    basis: &DMatrix<f64>,
    n: usize,
    h: f64,
    r: usize,
    mut f: Factors,
    opts: &SearchOptions,
) -> (f64, Factors) {
    let mut adam = [
        Adam::new(f.lp.shape()),
        Adam::new(f.lq.shape()),
        Adam::new(f.lr.shape()),
    ];
    let mut best = (f64::INFINITY, f.clone());
    for k in 0..opts.iterations {
        let (p, q, rm) = f.matrices();
        let tr = trace3(&p, &q, &rm);
        let gamma = gamma_unchecked(&p, &q, &rm, h, r);
        let form = basis.transpose() * &gamma * basis;
        let sm = smooth_max(&form, temperature(k));
        let score = sm.lambda_max / tr;
        if score < best.0 {
            best = (score, f.clone());
        }
        if score < -opts.target || !score.is_finite() {
            break;
        }
        let g_gamma = basis * &sm.grad * basis.transpose();
        let grads = factor_grads(&f, gamma_adjoint(&g_gamma, n, h, r), sm.lambda_max, tr);
        adam[0].step(&mut f.lp, &grads.0, opts.learning_rate);
        adam[1].step(&mut f.lq, &grads.1, opts.learning_rate);
        adam[2].step(&mut f.lr, &grads.2, opts.learning_rate);
    }
    best
}

/// Best functional matrices found for `ẋ = A x + Ad x(t−h)`, in original
/// coordinates. Not yet verified.
pub(crate) fn search_analysis(
    a: &DMatrix<f64>,
    a_d: &DMatrix<f64>,
    h: f64,
    r: usize,
    opts: &SearchOptions,
    warm: Option<&LkParams>,
) -> LkParams {
    let n = a.nrows();
    let scaling = Scaling::new(a, a_d);
    let s = constraint_unchecked(&scaling.similar(a), &scaling.similar(a_d), r);
    let basis = null_space_basis(&s).expect("canonical constraint matrix");
    let warm = warm.filter(|lk| lk.dim() == n && lk.r == r);
    let best = best_of(opts.restarts, opts.parallel, |i| {
        let init = match (i, warm) {
            (0, Some(lk)) => Factors::from_lk(lk, &scaling),
            (0, None) => Factors::identity(n, r),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(opts.seed, i));
                Factors::perturbed(n, r, &mut rng, 0.3)
            }
        };
        descend_projected(&basis, n, h, r, init, opts)
    });
    best.to_lk(&scaling, h, r)
}
