//! Delay-dependent stability of `ẋ = A x(t) + Ad x(t−h)` through a
//! Lyapunov-Krasovskii functional whose delay interval is split into `r`
//! pieces.
//!
//! With the extended vector `ξ = (ẋ(t), x(t), x(t−h/r), …, x(t−h))` the
//! derivative of the functional is the quadratic form `ξᵀ Γ ξ` restricted to
//! `S ξ = 0`. Stability for every delay up to `h_m` follows when the form is
//! negative definite on the kernel of `S`, i.e. `S⊥ᵀ Γ S⊥ ≺ 0`.
//!
//! The existence of `(P, Q, R)` is searched for numerically (see [`search`]),
//! and every claimed certificate is re-checked with a direct eigenvalue
//! computation before it is reported as feasible.

mod roots;
pub(crate) mod search;

use log::debug;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, lambda_max, lambda_min, serde_rows, spectral_abscissa, sym_norm};
use crate::model::TdsSystem;
use crate::{Error, Result};

pub(crate) use roots::rightmost_candidate;
pub use roots::{oracle_delay_margin, rightmost_root, rightmost_root_with, RootOptions};
pub use search::SearchOptions;

/// Relative strictness of `λ_max < 0`.
pub const EPS_MARGIN: f64 = 1e-9;
/// Relative strictness of positive definiteness.
pub const EPS_PD: f64 = 1e-8;

/// Matrices of the discretized functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LkParams {
    #[serde(with = "serde_rows")]
    pub p: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub r_mat: DMatrix<f64>,
    pub h_m: f64,
    pub r: usize,
}

impl LkParams {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// Checks shapes and strict positive definiteness of `P`, `Q`, `R`.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.r == 0 {
            return Err(Error::InvalidParameter("discretization step r must be >= 1".into()));
        }
        if !(self.h_m > 0.0) {
            return Err(Error::InvalidParameter(format!("h_m must be positive, got {}", self.h_m)));
        }
        if self.p.shape() != (n, n)
            || self.r_mat.shape() != (n, n)
            || self.q.shape() != (self.r * n, self.r * n)
        {
            return Err(Error::Dimension(format!(
                "P {:?}, Q {:?}, R {:?} inconsistent with n = {n}, r = {}",
                self.p.shape(),
                self.q.shape(),
                self.r_mat.shape(),
                self.r
            )));
        }
        Ok(())
    }

    /// `true` when `P`, `Q` and `R` are all positive definite with the
    /// relative margin [`EPS_PD`].
    pub fn is_positive_definite(&self) -> bool {
        [&self.p, &self.q, &self.r_mat]
            .iter()
            .all(|m| lambda_min(m) > EPS_PD * sym_norm(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Feasible,
    Infeasible,
    /// The search ran out of budget. Never evidence of instability.
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub lk: LkParams,
    /// `λ_max(S⊥ᵀ Γ S⊥)` in the system's own coordinates.
    pub margin: f64,
    pub verdict: Verdict,
}

impl StabilityCertificate {
    pub fn is_feasible(&self) -> bool {
        self.verdict == Verdict::Feasible
    }
}

/// Assembles `Γ = Γ₁ + Γ₂ − Γ₃` of size `(r+2)n`.
///
/// Block layout follows `ξ`: block 0 is `ẋ`, block 1 is `x(t)`, block `k+1`
/// is `x(t − k h/r)`.
pub fn build_gamma(lk: &LkParams, n: usize) -> Result<DMatrix<f64>> {
    if lk.dim() != n {
        return Err(Error::Dimension(format!("P is {}x{0}, expected n = {n}", lk.dim())));
    }
    lk.validate()?;
    Ok(gamma_unchecked(&lk.p, &lk.q, &lk.r_mat, lk.h_m, lk.r))
}

pub(crate) fn gamma_unchecked(
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    rm: &DMatrix<f64>,
    h: f64,
    r: usize,
) -> DMatrix<f64> {
    let n = p.nrows();
    let size = (r + 2) * n;
    let rf = r as f64;
    let mut g = DMatrix::zeros(size, size);
    let mut add = |bi: usize, bj: usize, m: &DMatrix<f64>| {
        let mut v = g.view_mut((bi * n, bj * n), (n, n));
        v += m;
    };
    add(0, 0, &(rm * (h / rf)));
    add(0, 1, p);
    add(1, 0, p);
    let jensen = rm * (rf / h);
    add(1, 1, &(-&jensen));
    add(1, 2, &jensen);
    add(2, 1, &jensen);
    add(2, 2, &(-&jensen));
    let rn = r * n;
    {
        let mut v = g.view_mut((n, n), (rn, rn));
        v += q;
    }
    {
        let mut v = g.view_mut((2 * n, 2 * n), (rn, rn));
        v -= q;
    }
    g
}

/// Adjoint of [`gamma_unchecked`] with respect to `(P, Q, R)`: given the
/// gradient `G` of a scalar with respect to `Γ`, returns the gradients with
/// respect to `P`, `Q` and `R`.
pub(crate) fn gamma_adjoint(
    grad: &DMatrix<f64>,
    n: usize,
    h: f64,
    r: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let blk = |i: usize, j: usize| grad.view((i * n, j * n), (n, n)).into_owned();
    let rf = r as f64;
    let dp = blk(0, 1) + blk(1, 0);
    let dr = blk(0, 0) * (h / rf) + (blk(1, 2) + blk(2, 1) - blk(1, 1) - blk(2, 2)) * (rf / h);
    let rn = r * n;
    let dq = grad.view((n, n), (rn, rn)).into_owned() - grad.view((2 * n, 2 * n), (rn, rn));
    (dp, dq, dr)
}

/// `S = [−I, A, 0_{n×(r−1)n}, Ad (+ B K)]`.
pub fn constraint_matrix(sys: &TdsSystem, r: usize, gain: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    if r == 0 {
        return Err(Error::InvalidParameter("discretization step r must be >= 1".into()));
    }
    let last = match gain {
        Some(k) => {
            if k.shape() != (sys.inputs(), sys.dim()) {
                return Err(Error::Dimension(format!(
                    "gain is {:?}, expected {}x{}",
                    k.shape(),
                    sys.inputs(),
                    sys.dim()
                )));
            }
            sys.closed_loop_delayed(k)
        }
        None => sys.a_d.clone(),
    };
    Ok(constraint_unchecked(&sys.a, &last, r))
}

pub(crate) fn constraint_unchecked(a: &DMatrix<f64>, last: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut s = DMatrix::zeros(n, (r + 2) * n);
    s.view_mut((0, 0), (n, n)).fill_with_identity();
    s.view_mut((0, 0), (n, n)).neg_mut();
    s.view_mut((0, n), (n, n)).copy_from(a);
    s.view_mut((0, (r + 1) * n), (n, n)).copy_from(last);
    s
}

/// Basis of the kernel of a constraint matrix with a leading `−I` block:
/// `S⊥ = [M; I]` where `S = [−I, M]`.
pub fn null_space_basis(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let cols = s.ncols();
    if n == 0 || cols <= n || !cols.is_multiple_of(n) {
        return Err(Error::Dimension(format!("constraint matrix has shape {:?}", s.shape())));
    }
    let lead = s.view((0, 0), (n, n));
    let canonical = (0..n).all(|i| (0..n).all(|j| lead[(i, j)] == if i == j { -1.0 } else { 0.0 }));
    if !canonical {
        return Err(Error::InvalidParameter(
            "constraint matrix must start with a -I block".into(),
        ));
    }
    let k = cols - n;
    let mut basis = DMatrix::zeros(cols, k);
    basis.view_mut((0, 0), (n, k)).copy_from(&s.view((0, n), (n, k)));
    basis.view_mut((n, 0), (k, k)).fill_with_identity();
    Ok(basis)
}

/// Projected form `S⊥ᵀ Γ S⊥` for a given set of functional matrices.
pub fn projected_form(a: &DMatrix<f64>, a_d: &DMatrix<f64>, lk: &LkParams) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let gamma = build_gamma(lk, n)?;
    let s = constraint_unchecked(a, a_d, lk.r);
    let basis = null_space_basis(&s)?;
    Ok(linalg::symmetrize(&(basis.transpose() * gamma * basis)))
}

/// Re-checks a set of functional matrices directly: returns the margin
/// `λ_max(S⊥ᵀ Γ S⊥)` and the verdict it supports.
pub fn verify_analysis(a: &DMatrix<f64>, a_d: &DMatrix<f64>, lk: &LkParams) -> Result<(f64, Verdict)> {
    let n = a.nrows();
    let gamma = build_gamma(lk, n)?;
    let form = projected_form(a, a_d, lk)?;
    let margin = lambda_max(&form);
    let ok = margin < -EPS_MARGIN * sym_norm(&gamma) && lk.is_positive_definite();
    Ok((margin, if ok { Verdict::Feasible } else { Verdict::Undecided }))
}

/// Searches for a functional proving stability of `ẋ = A x + Ad x(t−h)` for
/// every `h ≤ h_m`. Any gain must already be folded into `sys.a_d`.
pub fn analysis_feasible(sys: &TdsSystem, h_m: f64, r: usize, opts: &SearchOptions) -> Result<StabilityCertificate> {
    analysis_feasible_from(sys, h_m, r, opts, None)
}

/// Same as [`analysis_feasible`], seeding the first restart with `warm`.
pub fn analysis_feasible_from(
    sys: &TdsSystem,
    h_m: f64,
    r: usize,
    opts: &SearchOptions,
    warm: Option<&LkParams>,
) -> Result<StabilityCertificate> {
    if r == 0 {
        return Err(Error::InvalidParameter("discretization step r must be >= 1".into()));
    }
    if !(h_m > 0.0 && h_m.is_finite()) {
        return Err(Error::InvalidParameter(format!("h_m must be positive, got {h_m}")));
    }
    let lk = search::search_analysis(&sys.a, &sys.a_d, h_m, r, opts, warm);
    let (margin, verdict) = verify_analysis(&sys.a, &sys.a_d, &lk)?;
    debug!("analysis h_m={h_m:.6} r={r}: margin {margin:.3e} -> {verdict:?}");
    Ok(StabilityCertificate { lk, margin, verdict })
}

/// Certified delay interval `[0, h_max]` from bisection over
/// [`analysis_feasible`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub r: usize,
    /// Largest delay with a verified certificate (0 when none was found).
    pub h_max: f64,
    /// Smallest delay at which the search failed (`h_max` when capped).
    pub h_fail: f64,
    pub certificate: Option<StabilityCertificate>,
    /// The certified delay reached the search cap.
    pub capped: bool,
    pub diagnostic: Option<String>,
}

/// Largest delay certified by the functional with `r` pieces, bisected to
/// `tol`. The lower end of the bracket is always a verified certificate.
pub fn max_stable_delay(sys: &TdsSystem, r: usize, tol: f64, opts: &SearchOptions) -> Result<MarginReport> {
    let abscissa = spectral_abscissa(&(&sys.a + &sys.a_d));
    if abscissa >= 0.0 {
        return Err(Error::UnstableAtZeroDelay { abscissa });
    }
    let cap = opts.h_cap;
    let probe = |h: f64, warm: Option<&LkParams>| analysis_feasible_from(sys, h, r, opts, warm);

    let mut lo_cert = None;
    let mut h = (1e-2f64).min(cap);
    let mut first_fail = h;
    while h >= 1e-6 {
        let cert = probe(h, None)?;
        if cert.is_feasible() {
            lo_cert = Some((h, cert));
            break;
        }
        first_fail = h;
        h /= 10.0;
    }
    let Some((mut lo, mut cert)) = lo_cert else {
        return Ok(MarginReport {
            r,
            h_max: 0.0,
            h_fail: first_fail.min(1e-6),
            certificate: None,
            capped: false,
            diagnostic: Some(format!("no certificate even for h_m = {:.1e} s", first_fail.min(1e-6))),
        });
    };

    // grow until the first failure or the cap
    let mut hi = None;
    while lo < cap {
        let next = (lo * 2.0).min(cap);
        let c = probe(next, Some(&cert.lk))?;
        if c.is_feasible() {
            lo = next;
            cert = c;
        } else {
            hi = Some(next);
            break;
        }
    }
    let Some(mut hi) = hi else {
        return Ok(MarginReport {
            r,
            h_max: lo,
            h_fail: lo,
            certificate: Some(cert),
            capped: true,
            diagnostic: Some(format!("certified up to the search cap {cap} s")),
        });
    };

    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let c = probe(mid, Some(&cert.lk))?;
        if c.is_feasible() {
            lo = mid;
            cert = c;
        } else {
            hi = mid;
        }
    }
    Ok(MarginReport { r, h_max: lo, h_fail: hi, certificate: Some(cert), capped: false, diagnostic: None })
}
