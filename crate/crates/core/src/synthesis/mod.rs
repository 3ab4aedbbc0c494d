//! Delay-dependent state-feedback synthesis.
//!
//! A gain `K` is accepted when some functional matrices `(P, Q, R)` and a
//! slack matrix `X` make `Γ + X S + Sᵀ Xᵀ` negative definite, with `S` built
//! from `Ad + B K`. The condition is bilinear in `(X, K)`; it is attacked by
//! alternating descent (functional and slack matrices with `K` frozen, then
//! `K` with the rest frozen) from a zero-delay stabilizing seed, over several
//! seeded restarts.
//!
//! Whatever the search returns is re-validated from scratch: an exact
//! eigenvalue check of the assembled inequality and the characteristic-root
//! oracle on the closed loop. Gains that fail either check are reported as
//! undecided.

mod seed;

use std::path::Path;

use log::debug;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delay_lmi::search::{
    best_of, factor_grads, restart_seed, smooth_max, temperature, trace3, Adam, Factors, Scaling,
};
use crate::delay_lmi::{
    self, analysis_feasible, constraint_unchecked, gamma_adjoint, gamma_unchecked, rightmost_root,
    LkParams, SearchOptions, StabilityCertificate, Verdict, EPS_MARGIN,
};
use crate::linalg::{lambda_max, serde_rows, sym_norm, symmetrize};
use crate::model::TdsSystem;
use crate::{Error, Result};

pub use seed::SeedGain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainFlavor {
    /// `δp = k1 δW + k2 δq`
    Plain,
    /// `δp = k1 δW + k2 δq + k3 ∫δq`
    Integral,
    /// Any other state dimension.
    General,
}

impl GainFlavor {
    pub fn for_dim(n: usize) -> Self {
        match n {
            2 => GainFlavor::Plain,
            3 => GainFlavor::Integral,
            _ => GainFlavor::General,
        }
    }
}

/// State-feedback gain `u = K x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub flavor: GainFlavor,
    #[serde(with = "serde_rows")]
    pub k: DMatrix<f64>,
}

impl Gains {
    pub fn plain(k1: f64, k2: f64) -> Self {
        Self { flavor: GainFlavor::Plain, k: DMatrix::from_row_slice(1, 2, &[k1, k2]) }
    }

    pub fn integral(k1: f64, k2: f64, k3: f64) -> Self {
        Self { flavor: GainFlavor::Integral, k: DMatrix::from_row_slice(1, 3, &[k1, k2, k3]) }
    }

    pub fn from_matrix(k: DMatrix<f64>) -> Self {
        Self { flavor: GainFlavor::for_dim(k.ncols()), k }
    }

    /// Gains from a flat list: two entries are plain, three integral.
    pub fn from_slice(k: &[f64]) -> Result<Self> {
        match *k {
            [k1, k2] => Ok(Self::plain(k1, k2)),
            [k1, k2, k3] => Ok(Self::integral(k1, k2, k3)),
            _ => Err(Error::InvalidParameter(format!(
                "expected 2 (plain) or 3 (integral) gains, got {}",
                k.len()
            ))),
        }
    }

    /// Published state-feedback gain for the reference network.
    pub fn reference_plain() -> Self {
        Self::plain(-0.2372e-3, 0.0429e-3)
    }

    /// Published integral state-feedback gain for the reference network.
    pub fn reference_integral() -> Self {
        Self::integral(0.9385e-4, 0.5717e-4, 0.3559e-4)
    }

    /// `(k1, k2, k3)` of a single-input TCP gain, `k3 = 0` for plain gains.
    pub fn tcp_components(&self) -> Result<(f64, f64, f64)> {
        match (self.k.nrows(), self.k.ncols()) {
            (1, 2) => Ok((self.k[(0, 0)], self.k[(0, 1)], 0.0)),
            (1, 3) => Ok((self.k[(0, 0)], self.k[(0, 1)], self.k[(0, 2)])),
            shape => Err(Error::Dimension(format!("TCP gain must be 1x2 or 1x3, got {shape:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("gain entries must be finite".into()));
        }
        if self.flavor != GainFlavor::for_dim(self.k.ncols()) {
            return Err(Error::InvalidParameter(format!(
                "flavor {:?} inconsistent with {} gain columns",
                self.flavor,
                self.k.ncols()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisOptions {
    pub search: SearchOptions,
    /// Alternation rounds after the first functional-only descent.
    pub rounds: usize,
    /// Descent steps per alternation phase.
    pub inner_steps: usize,
    /// Weight of the `½‖K̃‖²` penalty (balanced coordinates).
    pub gain_reg: f64,
    pub seed_gain: SeedGain,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            search: SearchOptions::default(),
            rounds: 200,
            inner_steps: 25,
            gain_reg: 1e-4,
            seed_gain: SeedGain::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisCertificate {
    pub verdict: Verdict,
    /// `λ_max(Γ + X S + Sᵀ Xᵀ)` in the system's own coordinates.
    pub margin: f64,
    pub gains: Gains,
    pub lk: LkParams,
    #[serde(with = "serde_rows")]
    pub slack: DMatrix<f64>,
    /// Rightmost characteristic root of the closed loop at `h_m`, `[re, im]`.
    pub oracle_root: [f64; 2],
}

impl SynthesisCertificate {
    pub fn is_feasible(&self) -> bool {
        self.verdict == Verdict::Feasible
    }

    /// Assembles `Γ + X S + Sᵀ Xᵀ` from the stored matrices.
    pub fn assembled(&self, sys: &TdsSystem) -> Result<DMatrix<f64>> {
        let n = sys.dim();
        let gamma = delay_lmi::build_gamma(&self.lk, n)?;
        let s = delay_lmi::constraint_matrix(sys, self.lk.r, Some(&self.gains.k))?;
        if self.slack.shape() != (s.ncols(), n) {
            return Err(Error::Dimension(format!(
                "slack is {:?}, expected {}x{n}",
                self.slack.shape(),
                s.ncols()
            )));
        }
        let xs = &self.slack * &s;
        Ok(symmetrize(&(gamma + &xs + xs.transpose())))
    }

    /// Re-derives the margin from the stored matrices.
    pub fn recompute_margin(&self, sys: &TdsSystem) -> Result<f64> {
        Ok(lambda_max(&self.assembled(sys)?))
    }

    pub fn to_toml(&self) -> Result<String> {
        let doc = CertificateDoc { schema: 1, certificate: self.clone() };
        toml::to_string(&doc).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: CertificateDoc = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if doc.schema != 1 {
            return Err(Error::Parse(format!("unsupported certificate schema {}", doc.schema)));
        }
        doc.certificate.gains.validate()?;
        doc.certificate.lk.validate()?;
        Ok(doc.certificate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CertificateDoc {
    schema: u32,
    #[serde(flatten)]
    certificate: SynthesisCertificate,
}

/// Validates gains, functional and slack matrices against the system and
/// returns the resulting certificate.
pub fn validate_synthesis(
    sys: &TdsSystem,
    gains: Gains,
    lk: LkParams,
    slack: DMatrix<f64>,
) -> Result<SynthesisCertificate> {
    let n = sys.dim();
    let gamma = delay_lmi::build_gamma(&lk, n)?;
    let mut cert = SynthesisCertificate {
        verdict: Verdict::Undecided,
        margin: f64::NAN,
        oracle_root: [f64::NAN, f64::NAN],
        gains,
        lk,
        slack,
    };
    cert.margin = cert.recompute_margin(sys)?;
    let root = rightmost_root(&sys.a, &sys.closed_loop_delayed(&cert.gains.k), cert.lk.h_m);
    if let Ok(root) = root {
        cert.oracle_root = [root.re, root.im];
    }
    let certified = cert.margin < -EPS_MARGIN * sym_norm(&gamma)
        && cert.lk.is_positive_definite()
        && cert.gains.k.iter().all(|v| v.is_finite())
        && matches!(root, Ok(r) if r.re < 0.0);
    if certified {
        cert.verdict = Verdict::Feasible;
    }
    Ok(cert)
}

/// Search state of one restart, in balanced coordinates.
#[derive(Debug, Clone)]
struct Candidate {
    factors: Factors,
    slack: DMatrix<f64>,
    gain: DMatrix<f64>,
}

struct Balanced {
    a: DMatrix<f64>,
    a_d: DMatrix<f64>,
    b: DMatrix<f64>,
    n: usize,
    h: f64,
    r: usize,
}

impl Balanced {
    fn constraint(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        constraint_unchecked(&self.a, &(&self.a_d + &self.b * k), self.r)
    }

    /// Normalized `λ_max(Γ + XS + SᵀXᵀ)/tr` with its smoothed gradient pieces.
    fn evaluate(&self, c: &Candidate, k: usize) -> (f64, Grads) {
        let (p, q, rm) = c.factors.matrices();
        let tr = trace3(&p, &q, &rm);
        let s = self.constraint(&c.gain);
        let xs = &c.slack * &s;
        let form = gamma_unchecked(&p, &q, &rm, self.h, self.r) + &xs + xs.transpose();
        let sm = smooth_max(&form, temperature(k));
        let (gl_p, gl_q, gl_r) =
            factor_grads(&c.factors, gamma_adjoint(&sm.grad, self.n, self.h, self.r), sm.lambda_max, tr);
        let g_slack = &sm.grad * s.transpose() * (2.0 / tr);
        let g_s = c.slack.transpose() * &sm.grad * (2.0 / tr);
        let last = g_s.columns((self.r + 1) * self.n, self.n).into_owned();
        let g_gain = self.b.transpose() * last;
        (sm.lambda_max / tr, Grads { lp: gl_p, lq: gl_q, lr: gl_r, slack: g_slack, gain: g_gain })
    }
}

struct Grads {
    lp: DMatrix<f64>,
    lq: DMatrix<f64>,
    lr: DMatrix<f64>,
    slack: DMatrix<f64>,
    gain: DMatrix<f64>,
}

fn alternate(problem: &Balanced, mut c: Candidate, opts: &SynthesisOptions) -> (f64, Candidate) {
    let lr = opts.search.learning_rate;
    let mut adam_l = [
        Adam::new(c.factors.lp.shape()),
        Adam::new(c.factors.lq.shape()),
        Adam::new(c.factors.lr.shape()),
        Adam::new(c.slack.shape()),
    ];
    let mut adam_k = Adam::new(c.gain.shape());
    let gain_scale = c.gain.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-6);
    let mut best = (f64::INFINITY, c.clone());
    let mut step = 0usize;

    let mut run_phase = |c: &mut Candidate, steps: usize, gain_phase: bool, best: &mut (f64, Candidate)| -> bool {
        for _ in 0..steps {
            let (score, g) = problem.evaluate(c, step);
            step += 1;
            if score < best.0 {
                *best = (score, c.clone());
            }
            if score < -opts.search.target {
                return true;
            }
            if !score.is_finite() {
                return false;
            }
            if gain_phase {
                let grad = g.gain + &c.gain * (opts.gain_reg / (gain_scale * gain_scale));
                adam_k.step(&mut c.gain, &grad, lr * gain_scale);
            } else {
                adam_l[0].step(&mut c.factors.lp, &g.lp, lr);
                adam_l[1].step(&mut c.factors.lq, &g.lq, lr);
                adam_l[2].step(&mut c.factors.lr, &g.lr, lr);
                adam_l[3].step(&mut c.slack, &g.slack, lr);
            }
        }
        false
    };

    if run_phase(&mut c, opts.search.iterations, false, &mut best) {
        return best;
    }
    for _ in 0..opts.rounds {
        if run_phase(&mut c, opts.inner_steps, true, &mut best)
            || run_phase(&mut c, opts.inner_steps, false, &mut best)
        {
            break;
        }
    }
    best
}

/// Designs `u = K x` stabilizing `ẋ = A x + (Ad + B K) x(t−h)` for every
/// `h ≤ h_m`, with a certificate of the slack-variable condition.
pub fn synthesize_gain(sys: &TdsSystem, h_m: f64, r: usize, opts: &SynthesisOptions) -> Result<SynthesisCertificate> {
    if r == 0 {
        return Err(Error::InvalidParameter("discretization step r must be >= 1".into()));
    }
    if !(h_m > 0.0 && h_m.is_finite()) {
        return Err(Error::InvalidParameter(format!("h_m must be positive, got {h_m}")));
    }
    let n = sys.dim();
    let scaling = Scaling::new(&sys.a, &sys.a_d);
    let problem = Balanced {
        a: scaling.similar(&sys.a),
        a_d: scaling.similar(&sys.a_d),
        b: scaling.input(&sys.b),
        n,
        h: h_m,
        r,
    };
    let seed_k = seed::seed_gain(&problem.a, &problem.a_d, &problem.b, h_m, opts.seed_gain)?;
    debug!("synthesis seed gain {:?}", scaling.gain_from(&seed_k).as_slice());

    let best = best_of(opts.search.restarts, opts.search.parallel, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(opts.search.seed, i));
        let (factors, gain) = if i == 0 {
            (Factors::identity(n, r), seed_k.clone())
        } else {
            let f = Factors::perturbed(n, r, &mut rng, 0.3);
            let g = seed_k.map(|v| v * (1.0 + 0.1 * rng.random_range(-1.0..1.0)));
            (f, g)
        };
        let slack = problem.constraint(&gain).transpose() * -0.5;
        alternate(&problem, Candidate { factors, slack, gain }, opts)
    });

    let gains = Gains::from_matrix(scaling.gain_from(&best.gain));
    let lk = best.factors.to_lk(&scaling, h_m, r);
    let slack = scaling.slack_from(&best.slack);
    let cert = validate_synthesis(sys, gains, lk, slack)?;
    debug!("synthesis h_m={h_m:.6} r={r}: margin {:.3e} -> {:?}", cert.margin, cert.verdict);
    Ok(cert)
}

/// Closed-loop check of a given gain through the analysis condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopCheck {
    pub certificate: StabilityCertificate,
    /// Rightmost characteristic root of the closed loop at `h_m`.
    pub oracle_root: Complex64,
}

/// Folds `K` into `Ād = Ad + B K` and runs the analysis search on the result.
pub fn verify_closed_loop(
    sys: &TdsSystem,
    gains: &Gains,
    h_m: f64,
    r: usize,
    opts: &SearchOptions,
) -> Result<ClosedLoopCheck> {
    if gains.k.shape() != (sys.inputs(), sys.dim()) {
        return Err(Error::Dimension(format!(
            "gain is {:?}, system needs {}x{}",
            gains.k.shape(),
            sys.inputs(),
            sys.dim()
        )));
    }
    let closed = TdsSystem::autonomous(sys.a.clone(), sys.closed_loop_delayed(&gains.k), h_m)?;
    let certificate = analysis_feasible(&closed, h_m, r, opts)?;
    let oracle_root = rightmost_root(&closed.a, &closed.a_d, h_m)?;
    Ok(ClosedLoopCheck { certificate, oracle_root })
}
