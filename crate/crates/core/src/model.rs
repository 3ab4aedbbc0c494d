//! Fluid-flow TCP model: equilibrium, linearization as a time-delay system,
//! integral augmentation and the cross-traffic transfer function.
//!
//! Units are packets and seconds throughout; probabilities are dimensionless.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::synthesis::Gains;
use crate::{Error, Result};

/// Physical description of the single-bottleneck network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkParams {
    /// Number of long-lived TCP sessions `N`.
    pub n_flows: u32,
    /// Router capacity `C`, packets per second.
    pub capacity: f64,
    /// Propagation delay `Tp`, seconds.
    pub prop_delay: f64,
    /// Target queue length `q0`, packets.
    pub q_target: f64,
    /// Router buffer, packets.
    pub buffer_size: f64,
}

impl NetworkParams {
    /// 60 flows over a 15 Mb/s link with 500-byte packets and a 175 packet
    /// target in an 800 packet buffer.
    pub const REFERENCE: NetworkParams = NetworkParams {
        n_flows: 60,
        capacity: 3750.0,
        prop_delay: 0.2,
        q_target: 175.0,
        buffer_size: 800.0,
    };

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_flows < 1 {
            return bad("n_flows must be at least 1".into());
        }
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return bad(format!("capacity must be positive, got {}", self.capacity));
        }
        if !(self.prop_delay >= 0.0 && self.prop_delay.is_finite()) {
            return bad(format!("prop_delay must be non-negative, got {}", self.prop_delay));
        }
        if !(self.q_target >= 0.0 && self.q_target <= self.buffer_size) {
            return bad(format!(
                "q_target {} must lie in [0, buffer_size = {}]",
                self.q_target, self.buffer_size
            ));
        }
        Ok(())
    }

    pub(crate) fn n(&self) -> f64 {
        f64::from(self.n_flows)
    }
}

/// Equilibrium `(W0, p0, R0)` of the fluid model for a given queue target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub w0: f64,
    pub p0: f64,
    pub r0: f64,
}

/// Computes the equilibrium of the fluid model:
/// `R0 = q0/C + Tp`, `W0 = R0·C/N`, `p0 = 2/W0²`.
pub fn operating_point(params: &NetworkParams) -> Result<OperatingPoint> {
    params.validate()?;
    let r0 = params.q_target / params.capacity + params.prop_delay;
    let w0 = r0 * params.capacity / params.n();
    if w0 < 1.0 {
        return Err(Error::OperatingPoint(format!(
            "equilibrium window W0 = R0*C/N = {r0:.6}*{}/{} = {w0:.4} packets is below one packet; \
             too many flows for this capacity and delay",
            params.capacity, params.n_flows
        )));
    }
    let p0 = 2.0 / (w0 * w0);
    if p0 > 1.0 {
        return Err(Error::OperatingPoint(format!(
            "equilibrium drop probability p0 = 2/W0^2 = {p0:.4} exceeds one (W0 = {w0:.4}, N = {})",
            params.n_flows
        )));
    }
    Ok(OperatingPoint { w0, p0, r0 })
}

/// Linear time-delay system `ẋ = A x + Ad x(t−h) + B u(t−h) + Bd d(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdsSystem {
    pub a: DMatrix<f64>,
    pub a_d: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub delay: f64,
}

impl TdsSystem {
    pub fn new(
        a: DMatrix<f64>,
        a_d: DMatrix<f64>,
        b: DMatrix<f64>,
        b_d: DMatrix<f64>,
        delay: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || a_d.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "A is {:?} and Ad is {:?}; both must be {n}x{n}",
                a.shape(),
                a_d.shape()
            )));
        }
        if b.nrows() != n || b_d.shape() != (n, 1) {
            return Err(Error::Dimension(format!(
                "B is {:?} and Bd is {:?}; need {n} rows and a single disturbance column",
                b.shape(),
                b_d.shape()
            )));
        }
        if !(delay > 0.0) {
            return Err(Error::InvalidParameter(format!("delay must be positive, got {delay}")));
        }
        Ok(Self { a, a_d, b, b_d, delay })
    }

    /// Autonomous system without input or disturbance, useful for pure
    /// stability questions.
    pub fn autonomous(a: DMatrix<f64>, a_d: DMatrix<f64>, delay: f64) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, a_d, DMatrix::zeros(n, 1), DMatrix::zeros(n, 1), delay)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Delayed matrix of the loop closed by `u = K x`: `Ad + B K`.
    pub fn closed_loop_delayed(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a_d + &self.b * k
    }
}

/// Linearizes the fluid model around `op`. The delay is frozen at `R0`.
pub fn linearize(params: &NetworkParams, op: &OperatingPoint) -> TdsSystem {
    let n = params.n();
    let c = params.capacity;
    let r0 = op.r0;
    let r0c = r0 * r0 * c;
    let a = DMatrix::from_row_slice(2, 2, &[-n / r0c, -1.0 / r0c, n / r0, -1.0 / r0]);
    let a_d = DMatrix::from_row_slice(2, 2, &[-n / r0c, 1.0 / r0c, 0.0, 0.0]);
    let b = DMatrix::from_row_slice(2, 1, &[-c * c * r0 / (2.0 * n * n), 0.0]);
    let b_d = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    TdsSystem { a, a_d, b, b_d, delay: r0 }
}

/// Appends the queue integrator `ż₃ = δq` to the two-state TCP system.
/// The resulting state order is `(δW, δq, ∫δq)`.
pub fn augment(sys: &TdsSystem) -> Result<TdsSystem> {
    if sys.dim() != 2 {
        return Err(Error::Dimension(format!(
            "augmentation expects the 2-state TCP system, got dimension {}",
            sys.dim()
        )));
    }
    let m = sys.inputs();
    let mut a = DMatrix::zeros(3, 3);
    a.view_mut((0, 0), (2, 2)).copy_from(&sys.a);
    a[(2, 1)] = 1.0;
    let mut a_d = DMatrix::zeros(3, 3);
    a_d.view_mut((0, 0), (2, 2)).copy_from(&sys.a_d);
    let mut b = DMatrix::zeros(3, m);
    b.view_mut((0, 0), (2, m)).copy_from(&sys.b);
    let mut b_d = DMatrix::zeros(3, 1);
    b_d.view_mut((0, 0), (2, 1)).copy_from(&sys.b_d);
    Ok(TdsSystem { a, a_d, b, b_d, delay: sys.delay })
}

/// Value of the disturbance-to-queue transfer function together with its
/// auxiliary terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceGain {
    pub value: Complex64,
    /// Delayed input gain `a(s) = −(R0 C²/2N²) e^{−hs}`.
    pub a: Complex64,
    /// `b(s) = s + (N/R0²C)(1 + e^{−hs}) − a(s) k1`.
    pub b: Complex64,
}

/// Evaluates `T(s) = ΔQ(s)/D(s)` for the loop closed by state feedback
/// `δp = k1 δW + k2 δq + k3 ∫δq` (missing `k3` means plain feedback).
///
/// The expression is the one obtained by eliminating `δW` from the linear
/// model; `a(s)` is the delayed input gain, so it enters `b(s)` and the
/// denominator with a negative sign.
pub fn disturbance_transfer(
    params: &NetworkParams,
    op: &OperatingPoint,
    gains: &Gains,
    h: f64,
    s: Complex64,
) -> Result<DisturbanceGain> {
    let (k1, k2, k3) = gains.tcp_components()?;
    let n = params.n();
    let c = params.capacity;
    let r0 = op.r0;
    let e = (-s * h).exp();
    let a = -(r0 * c * c / (2.0 * n * n)) * e;
    let b = s + (n / (r0 * r0 * c)) * (1.0 + e) - a * k1;
    let num = b * s;
    let den = (s + 1.0 / r0) * s * b
        + (n / r0) * (s / (r0 * r0 * c) * (1.0 - e) - a * s * k2 - a * k3);
    let scale = num.norm().max(((s + 1.0 / r0) * s * b).norm()).max(f64::MIN_POSITIVE);
    if den.norm() <= 1e-12 * scale {
        return Err(Error::NearPole { s });
    }
    Ok(DisturbanceGain { value: num / den, a, b })
}

/// DC gain `lim_{s→0} T(s)` by evaluation along the positive real axis at
/// `s = 10^{-k}`, `k = 4..=8`, each step Richardson-extrapolated.
pub fn dc_gain(params: &NetworkParams, op: &OperatingPoint, gains: &Gains, h: f64) -> Result<f64> {
    let mut est = f64::NAN;
    for k in 4..=8 {
        let s = 10f64.powi(-k);
        let t1 = disturbance_transfer(params, op, gains, h, Complex64::new(s, 0.0))?.value.re;
        let t2 = disturbance_transfer(params, op, gains, h, Complex64::new(s / 2.0, 0.0))?.value.re;
        est = 2.0 * t2 - t1;
    }
    Ok(est)
}
