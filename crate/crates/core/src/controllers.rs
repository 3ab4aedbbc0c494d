//! Drop-probability laws: state feedback, integral state feedback, PI and
//! RED, plus the window estimate from the aggregate arrival rate.
//!
//! Every law returns a probability clamped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{NetworkParams, OperatingPoint};
use crate::synthesis::Gains;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AqmKind {
    Sf,
    SfiCwnd,
    SfiAggflow,
    Pi,
    Red,
}

impl AqmKind {
    pub const ALL: [AqmKind; 5] = [AqmKind::Red, AqmKind::Pi, AqmKind::Sf, AqmKind::SfiCwnd, AqmKind::SfiAggflow];

    pub fn name(self) -> &'static str {
        match self {
            AqmKind::Sf => "sf",
            AqmKind::SfiCwnd => "sfi_cwnd",
            AqmKind::SfiAggflow => "sfi_aggflow",
            AqmKind::Pi => "pi",
            AqmKind::Red => "red",
        }
    }

    /// Column label used in statistics tables.
    pub fn label(self) -> &'static str {
        match self {
            AqmKind::Sf => "SF",
            AqmKind::SfiCwnd => "SFI_cwnd",
            AqmKind::SfiAggflow => "SFI_aggflow",
            AqmKind::Pi => "PI",
            AqmKind::Red => "RED",
        }
    }
}

impl fmt::Display for AqmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AqmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        AqmKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Scenario(format!("unknown AQM kind {s:?}")))
    }
}

/// Incremental PI on the queue error, sampled at `freq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiParams {
    pub a: f64,
    pub b: f64,
    /// Sampling frequency, Hz.
    pub freq: f64,
}

impl Default for PiParams {
    fn default() -> Self {
        Self { a: 1.822e-5, b: 1.816e-5, freq: 160.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedParams {
    /// Packets.
    pub min_th: f64,
    /// Packets.
    pub max_th: f64,
    pub p_max: f64,
    /// Weight of the newest sample in the average queue, applied per step.
    pub ewma_weight: f64,
}

impl Default for RedParams {
    fn default() -> Self {
        Self { min_th: 150.0, max_th: 200.0, p_max: 0.1, ewma_weight: 0.002 }
    }
}

impl RedParams {
    pub fn validate(&self, buffer_size: f64) -> Result<()> {
        if !(0.0 <= self.min_th && self.min_th < self.max_th && self.max_th <= buffer_size) {
            return Err(Error::InvalidParameter(format!(
                "RED thresholds need 0 <= min_th < max_th <= buffer ({} / {} / {buffer_size})",
                self.min_th, self.max_th
            )));
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return Err(Error::InvalidParameter(format!("RED p_max {} outside [0, 1]", self.p_max)));
        }
        if !(self.ewma_weight > 0.0 && self.ewma_weight <= 1.0) {
            return Err(Error::InvalidParameter(format!("RED ewma_weight {} outside (0, 1]", self.ewma_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AqmConfig {
    pub kind: AqmKind,
    /// `[k1, k2]` for the plain law.
    #[serde(default = "default_sf_gains")]
    pub sf_gains: [f64; 2],
    /// `[k1, k2, k3]` for the integral laws.
    #[serde(default = "default_sfi_gains")]
    pub sfi_gains: [f64; 3],
    #[serde(default)]
    pub pi: PiParams,
    #[serde(default)]
    pub red: RedParams,
}

fn default_sf_gains() -> [f64; 2] {
    let (k1, k2, _) = Gains::reference_plain().tcp_components().expect("1x2 gain");
    [k1, k2]
}

fn default_sfi_gains() -> [f64; 3] {
    let (k1, k2, k3) = Gains::reference_integral().tcp_components().expect("1x3 gain");
    [k1, k2, k3]
}

impl AqmConfig {
    pub fn new(kind: AqmKind) -> Self {
        Self {
            kind,
            sf_gains: default_sf_gains(),
            sfi_gains: default_sfi_gains(),
            pi: PiParams::default(),
            red: RedParams::default(),
        }
    }

    pub fn validate(&self, net: &NetworkParams) -> Result<()> {
        if self.sf_gains.iter().chain(&self.sfi_gains).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("state-feedback gains must be finite".into()));
        }
        match self.kind {
            AqmKind::Pi => {
                if !(self.pi.freq > 0.0 && self.pi.freq.is_finite()) {
                    return Err(Error::InvalidParameter(format!("PI frequency {} must be positive", self.pi.freq)));
                }
                if !(self.pi.a.is_finite() && self.pi.b.is_finite()) {
                    return Err(Error::InvalidParameter("PI coefficients must be finite".into()));
                }
            }
            AqmKind::Red => self.red.validate(net.buffer_size)?,
            _ => {}
        }
        Ok(())
    }

    pub fn plain_gains(&self) -> Gains {
        Gains::plain(self.sf_gains[0], self.sf_gains[1])
    }

    pub fn integral_gains(&self) -> Gains {
        Gains::integral(self.sfi_gains[0], self.sfi_gains[1], self.sfi_gains[2])
    }
}

/// Controller memory carried between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct AqmState {
    /// `∫δq`, packet-seconds.
    pub integral_acc: f64,
    pub prev_dq: f64,
    pub prev_p: f64,
    /// RED average queue, packets.
    pub ewma_q: f64,
    /// Time of the last PI sample, seconds.
    pub last_update: f64,
    /// PI samples taken so far.
    pub samples: u64,
    started: bool,
}

impl AqmState {
    pub fn new(p_init: f64, q_init: f64) -> Self {
        Self {
            integral_acc: 0.0,
            prev_dq: 0.0,
            prev_p: p_init.clamp(0.0, 1.0),
            ewma_q: q_init,
            last_update: f64::NEG_INFINITY,
            samples: 0,
            started: false,
        }
    }
}

fn clamp_p(p: f64) -> f64 {
    if p.is_nan() {
        return 1.0;
    }
    p.clamp(0.0, 1.0)
}

/// `p = p0 + k1 δW + k2 δq`, clamped.
pub fn sf_probability(dw: f64, dq: f64, gains: &Gains, p0: f64) -> f64 {
    let (k1, k2, _) = gains.tcp_components().expect("TCP gain");
    clamp_p(p0 + k1 * dw + k2 * dq)
}

/// `p = p0 + k1 δW + k2 δq + k3 ∫δq`, clamped. The accumulator advances by
/// the trapezoidal rule from the previous call's error, except while the
/// law is saturated; the first call only records the error.
pub fn sfi_probability(dw: f64, dq: f64, mut state: AqmState, gains: &Gains, p0: f64, dt: f64) -> (f64, AqmState) {
    let (k1, k2, k3) = gains.tcp_components().expect("TCP gain");
    let unclamped = p0 + k1 * dw + k2 * dq + k3 * state.integral_acc;
    if state.started && (0.0..=1.0).contains(&unclamped) {
        state.integral_acc += 0.5 * dt * (state.prev_dq + dq);
    }
    let p = clamp_p(p0 + k1 * dw + k2 * dq + k3 * state.integral_acc);
    state.prev_dq = dq;
    state.prev_p = p;
    state.started = true;
    (p, state)
}

/// One PI sample: `p_k = p_{k−1} + a δq_k − b δq_{k−1}`, clamped.
pub fn pi_update(dq_now: f64, mut state: AqmState, pi: &PiParams) -> (f64, AqmState) {
    let prev = if state.started { state.prev_dq } else { dq_now };
    let p = clamp_p(state.prev_p + pi.a * dq_now - pi.b * prev);
    state.prev_dq = dq_now;
    state.prev_p = p;
    state.started = true;
    state.samples += 1;
    (p, state)
}

/// Updates the average queue and maps it through the RED ramp.
pub fn red_probability(q_inst: f64, mut state: AqmState, red: &RedParams) -> (f64, AqmState) {
    state.ewma_q = (1.0 - red.ewma_weight) * state.ewma_q + red.ewma_weight * q_inst;
    let avg = state.ewma_q;
    let p = if avg < red.min_th {
        0.0
    } else if avg < red.max_th {
        red.p_max * (avg - red.min_th) / (red.max_th - red.min_th)
    } else {
        1.0
    };
    state.prev_p = clamp_p(p);
    (state.prev_p, state)
}

/// Per-source window from the aggregate arrival rate: `Ŵ = rate · R / N`.
pub fn estimate_window(agg_rate: f64, rtt: f64, n_flows: u32) -> f64 {
    agg_rate * rtt / f64::from(n_flows)
}

/// What the router sees at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t: f64,
    /// True per-source window, packets.
    pub w: f64,
    /// Queue, packets.
    pub q: f64,
    /// Aggregate TCP arrival rate, packets/second.
    pub agg_rate: f64,
    pub rtt: f64,
}

/// A configured AQM with its state, driven once per simulation step.
#[derive(Debug, Clone)]
pub struct Controller {
    kind: AqmKind,
    plain: Gains,
    integral: Gains,
    pi: PiParams,
    red: RedParams,
    n_flows: u32,
    op: OperatingPoint,
    q_ref: f64,
    state: AqmState,
}

impl Controller {
    pub fn new(config: &AqmConfig, net: &NetworkParams, op: &OperatingPoint, q_init: f64) -> Self {
        Self {
            kind: config.kind,
            plain: config.plain_gains(),
            integral: config.integral_gains(),
            pi: config.pi.clone(),
            red: config.red.clone(),
            n_flows: net.n_flows,
            op: *op,
            q_ref: net.q_target,
            state: AqmState::new(op.p0, q_init),
        }
    }

    pub fn kind(&self) -> AqmKind {
        self.kind
    }

    pub fn state(&self) -> &AqmState {
        &self.state
    }

    /// Probability to apply from `obs.t` until the next step.
    pub fn update(&mut self, obs: &Observation, dt: f64) -> f64 {
        let dq = obs.q - self.q_ref;
        let state = std::mem::replace(&mut self.state, AqmState::new(0.0, 0.0));
        let (p, state) = match self.kind {
            AqmKind::Sf => {
                let p = sf_probability(obs.w - self.op.w0, dq, &self.plain, self.op.p0);
                (p, AqmState { prev_p: p, ..state })
            }
            AqmKind::SfiCwnd => sfi_probability(obs.w - self.op.w0, dq, state, &self.integral, self.op.p0, dt),
            AqmKind::SfiAggflow => {
                let w_hat = estimate_window(obs.agg_rate, obs.rtt, self.n_flows);
                sfi_probability(w_hat - self.op.w0, dq, state, &self.integral, self.op.p0, dt)
            }
            AqmKind::Pi => {
                let due = state.samples as f64 / self.pi.freq;
                if obs.t + 1e-9 >= due {
                    let (p, mut s) = pi_update(dq, state, &self.pi);
                    s.last_update = obs.t;
                    (p, s)
                } else {
                    (state.prev_p, state)
                }
            }
            AqmKind::Red => red_probability(obs.q, state, &self.red),
        };
        self.state = state;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::operating_point;
    use proptest::prelude::*;

    const P0: f64 = 0.008415;

    #[test]
    fn sf_examples() {
        let g = Gains::reference_plain();
        assert_eq!(sf_probability(0.0, 0.0, &g, P0), P0);
        let p = sf_probability(1.0, 0.0, &g, P0);
        assert!((p - (P0 - 2.372e-4)).abs() < 1e-15);
        assert!((p - 0.008178).abs() < 1e-6);
        assert_eq!(sf_probability(0.0, -1e9, &g, P0), 0.0);
    }

    #[test]
    fn sfi_constant_error_integrates_linearly() {
        let g = Gains::integral(0.0, 0.0, 1e-4);
        let mut s = AqmState::new(P0, 0.0);
        let dt = 1e-3;
        let mut p = 0.0;
        for _ in 0..=1000 {
            (p, s) = sfi_probability(0.0, 2.0, s, &g, P0, dt);
        }
        // one second of δq = 2
        assert!((s.integral_acc - 2.0).abs() < 1e-12);
        assert!((p - (P0 + 1e-4 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn sfi_stays_at_p0_without_error() {
        let g = Gains::reference_integral();
        let mut s = AqmState::new(P0, 0.0);
        for _ in 0..100 {
            let (p, next) = sfi_probability(0.0, 0.0, s, &g, P0, 1e-3);
            assert_eq!(p, P0);
            s = next;
        }
    }

    #[test]
    fn sfi_freezes_accumulator_while_saturated() {
        let g = Gains::integral(0.0, 1.0, 1e-3);
        let mut s = AqmState::new(P0, 0.0);
        (_, s) = sfi_probability(0.0, 0.0, s, &g, P0, 1e-3);
        (_, s) = sfi_probability(0.0, 0.5, s, &g, P0, 1e-3);
        let acc = s.integral_acc;
        for _ in 0..50 {
            let (p, next) = sfi_probability(0.0, 10.0, s, &g, P0, 1e-3);
            assert_eq!(p, 1.0);
            assert_eq!(next.integral_acc, acc);
            s = next;
        }
    }

    #[test]
    fn pi_examples() {
        let pi = PiParams::default();
        let mut s = AqmState::new(P0, 0.0);
        (_, s) = pi_update(100.0, s, &pi);
        let before = s.prev_p;
        let (p, _) = pi_update(100.0, s, &pi);
        assert!((p - before - 6e-6).abs() < 1e-15);

        let mut s = AqmState::new(0.5, 0.0);
        for _ in 0..10 {
            let (p, next) = pi_update(0.0, s, &pi);
            assert_eq!(p, 0.5);
            s = next;
        }

        let pi = PiParams { a: 1e-4, b: 1e-4, freq: 160.0 };
        let seq = [3.0, -7.0, 12.0, 0.5, 40.0];
        let mut s = AqmState::new(0.3, 0.0);
        let mut p = 0.0;
        for dq in seq {
            (p, s) = pi_update(dq, s, &pi);
        }
        assert!((p - 0.3 - 1e-4 * (seq[4] - seq[0])).abs() < 1e-15);
    }

    #[test]
    fn red_examples() {
        let red = RedParams::default();
        let (p, _) = red_probability(100.0, AqmState::new(0.0, 100.0), &red);
        assert_eq!(p, 0.0);
        let (p, _) = red_probability(175.0, AqmState::new(0.0, 175.0), &red);
        assert!((p - 0.05).abs() < 1e-12);
        let (p, _) = red_probability(400.0, AqmState::new(0.0, 400.0), &red);
        assert_eq!(p, 1.0);

        let mut s = AqmState::new(0.0, 0.0);
        let q = 180.0;
        for k in 1..=200 {
            (_, s) = red_probability(q, s, &red);
            let want = q * (1.0 - (1.0 - red.ewma_weight).powi(k));
            assert!((s.ewma_q - want).abs() < 1e-9);
        }
    }

    #[test]
    fn window_estimate_inverts_aggregate_rate() {
        let net = NetworkParams::REFERENCE;
        let op = operating_point(&net).unwrap();
        let rate = f64::from(net.n_flows) * op.w0 / op.r0;
        assert!((estimate_window(rate, op.r0, net.n_flows) - op.w0).abs() < 1e-12);
        assert_eq!(estimate_window(0.0, op.r0, net.n_flows), 0.0);
    }

    #[test]
    fn pi_controller_samples_at_its_own_clock() {
        let net = NetworkParams::REFERENCE;
        let op = operating_point(&net).unwrap();
        let mut c = Controller::new(&AqmConfig::new(AqmKind::Pi), &net, &op, net.q_target);
        let dt = 1e-3;
        for k in 0..1000 {
            let t = k as f64 * dt;
            c.update(&Observation { t, w: op.w0, q: 200.0, agg_rate: 0.0, rtt: op.r0 }, dt);
        }
        assert_eq!(c.state().samples, 160);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in AqmKind::ALL {
            assert_eq!(k.name().parse::<AqmKind>().unwrap(), k);
            assert_eq!(k.label().parse::<AqmKind>().unwrap(), k);
        }
        assert!("rem".parse::<AqmKind>().is_err());
    }

    proptest! {
        #[test]
        fn every_law_emits_a_probability(
            dw in -1e6f64..1e6, dq in -1e6f64..1e6, acc in -1e6f64..1e6, q in 0f64..1e4, p_prev in 0f64..1.0,
        ) {
            let mut s = AqmState::new(p_prev, q);
            s.integral_acc = acc;
            let p = sf_probability(dw, dq, &Gains::reference_plain(), P0);
            prop_assert!((0.0..=1.0).contains(&p));
            let (p, s2) = sfi_probability(dw, dq, s.clone(), &Gains::reference_integral(), P0, 1e-3);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(s2.integral_acc.is_finite());
            let (p, _) = pi_update(dq, s.clone(), &PiParams::default());
            prop_assert!((0.0..=1.0).contains(&p));
            let (p, _) = red_probability(q, s, &RedParams::default());
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn sfi_without_integral_matches_sf(dw in -50f64..50.0, dq in -200f64..200.0, k1 in -1e-3f64..1e-3, k2 in -1e-3f64..1e-3) {
            let sf = sf_probability(dw, dq, &Gains::plain(k1, k2), P0);
            let s = AqmState::new(P0, 0.0);
            let (sfi, _) = sfi_probability(dw, dq, s, &Gains::integral(k1, k2, 0.0), P0, 1e-3);
            prop_assert_eq!(sf, sfi);
        }

        #[test]
        fn controllers_are_deterministic(qs in proptest::collection::vec(0f64..400.0, 1..60)) {
            let net = NetworkParams::REFERENCE;
            let op = operating_point(&net).unwrap();
            for kind in AqmKind::ALL {
                let run = || {
                    let mut c = Controller::new(&AqmConfig::new(kind), &net, &op, 175.0);
                    qs.iter().enumerate().map(|(i, &q)| {
                        c.update(&Observation { t: i as f64 * 1e-3, w: 15.0, q, agg_rate: 3600.0, rtt: 0.25 }, 1e-3)
                    }).collect::<Vec<_>>()
                };
                prop_assert_eq!(run(), run());
            }
        }
    }
}
