//! Fixed-step integration of the fluid model with a router AQM in the loop.
//!
//! The nonlinear model
//!
//! ```text
//! Ẇ = 1/R − W·W(t−R) / (2 R(t−R)) · p(t−R)
//! q̇ = N W / R − C + d(t),        R = q/C + Tp
//! ```
//!
//! is integrated with classical RK4. Lagged quantities are read from a ring
//! buffer of past samples with linear interpolation; the drop probability and
//! the disturbance are held constant over each step. The queue is clamped to
//! `[0, buffer]` and the window floored at [`W_FLOOR`] after every step.
//!
//! The linear model integrates `δW`, `δq` with the delay frozen at `R0` and
//! reports absolute values. It is not clamped.

mod history;
pub mod stats;

use std::io::{self, Write};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::controllers::{estimate_window, AqmConfig, Controller, Observation};
use crate::model::{linearize, operating_point, NetworkParams, OperatingPoint};
use crate::{Error, Result};
use history::History;

pub use stats::{periodic_stats, stats_table, Period, PeriodStats, StatsReport};

/// Smallest congestion window the nonlinear model is allowed to reach.
pub const W_FLOOR: f64 = 0.1;

/// Constant-rate cross traffic active on `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    /// Packets per second.
    pub rate: f64,
}

/// Sum of the rates of all segments active at `t`.
pub fn disturbance_signal(schedule: &[Segment], t: f64) -> f64 {
    schedule.iter().filter(|s| s.start <= t && t < s.end).map(|s| s.rate).sum()
}

fn validate_schedule(schedule: &[Segment], duration: f64) -> Result<()> {
    for s in schedule {
        if !(s.start >= 0.0 && s.start < s.end && s.end <= duration) || !s.rate.is_finite() {
            return Err(Error::Scenario(format!(
                "disturbance segment [{}, {}) at {} pkt/s must lie within [0, {duration}] with start < end",
                s.start, s.end, s.rate
            )));
        }
    }
    let mut sorted: Vec<&Segment> = schedule.iter().collect();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::Scenario(format!(
                "disturbance segments [{}, {}) and [{}, {}) overlap",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Nonlinear,
    Linear,
}

/// Constant initial history; unset fields take their equilibrium value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

impl InitialState {
    fn resolve(&self, net: &NetworkParams, op: &OperatingPoint) -> (f64, f64, f64) {
        (self.w.unwrap_or(op.w0), self.q.unwrap_or(net.q_target), self.p.unwrap_or(op.p0))
    }
}

/// Everything one simulation run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub network: NetworkParams,
    pub aqm: AqmConfig,
    /// Seconds.
    pub duration: f64,
    /// Seconds.
    pub dt: f64,
    pub disturbance: Vec<Segment>,
    pub initial: InitialState,
    pub model: ModelKind,
    /// Holds the drop probability at this value instead of consulting the AQM.
    pub fixed_p: Option<f64>,
    /// Carried for run identity; the integrators draw no random numbers.
    pub seed: u64,
}

impl Scenario {
    pub fn new(network: NetworkParams, aqm: AqmConfig) -> Self {
        Self {
            network,
            aqm,
            duration: 100.0,
            dt: 1e-3,
            disturbance: Vec::new(),
            initial: InitialState::default(),
            model: ModelKind::Nonlinear,
            fixed_p: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<OperatingPoint> {
        let op = operating_point(&self.network)?;
        self.aqm.validate(&self.network)?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Scenario(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Scenario(format!("dt must be positive, got {}", self.dt)));
        }
        if self.dt > self.network.prop_delay / 10.0 {
            return Err(Error::Scenario(format!(
                "dt = {} exceeds prop_delay/10 = {}; the delayed terms would be under-resolved",
                self.dt,
                self.network.prop_delay / 10.0
            )));
        }
        validate_schedule(&self.disturbance, self.duration)?;
        let (w, q, p) = self.initial.resolve(&self.network, &op);
        if !(w > 0.0 && w.is_finite()) || !(0.0..=self.network.buffer_size).contains(&q) || !(0.0..=1.0).contains(&p)
        {
            return Err(Error::Scenario(format!(
                "initial state (W = {w}, q = {q}, p = {p}) needs W > 0, q in [0, buffer], p in [0, 1]"
            )));
        }
        if let Some(p) = self.fixed_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Scenario(format!("fixed drop probability {p} outside [0, 1]")));
            }
        }
        Ok(op)
    }

    fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Trace column names in storage order.
pub const TRACE_HEADER: [&str; 8] = ["t", "W", "q", "p", "d", "rtt", "w_hat", "agg_rate"];

/// Per-step samples of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Cross traffic, packets/second.
    pub d: Vec<f64>,
    pub rtt: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub agg_rate: Vec<f64>,
    /// Steps after which the queue had to be clamped to `[0, buffer]`.
    pub queue_clamps: usize,
    /// Steps after which the window had to be raised to [`W_FLOOR`].
    pub window_floors: usize,
}

impl Trace {
    pub fn with_capacity(n: usize) -> Self {
        let v = || Vec::with_capacity(n);
        Self { t: v(), w: v(), q: v(), p: v(), d: v(), rtt: v(), w_hat: v(), agg_rate: v(), ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Appends one row in [`TRACE_HEADER`] order.
    pub fn push(&mut self, row: [f64; 8]) {
        for (col, v) in self.columns_mut().into_iter().zip(row) {
            col.push(v);
        }
    }

    fn columns_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.t,
            &mut self.w,
            &mut self.q,
            &mut self.p,
            &mut self.d,
            &mut self.rtt,
            &mut self.w_hat,
            &mut self.agg_rate,
        ]
    }

    pub fn row(&self, i: usize) -> [f64; 8] {
        [self.t[i], self.w[i], self.q[i], self.p[i], self.d[i], self.rtt[i], self.w_hat[i], self.agg_rate[i]]
    }

    /// Mean of the queue over samples with `t` in `[from, to]`.
    pub fn mean_queue(&self, from: f64, to: f64) -> Option<f64> {
        let v: Vec<f64> = self.t.iter().zip(&self.q).filter(|(t, _)| (from..=to).contains(*t)).map(|(_, q)| *q).collect();
        stats::mean_std(&v).map(|m| m.0)
    }

    /// Writes the CSV form, keeping every `stride`-th row (and always the first).
    pub fn write_csv<W: Write>(&self, mut out: W, stride: usize) -> io::Result<()> {
        writeln!(out, "{}", TRACE_HEADER.join(","))?;
        let stride = stride.max(1);
        let mut line = String::new();
        for i in (0..self.len()).step_by(stride) {
            line.clear();
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&stats::format_number(*v));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Parses the CSV form written by [`Trace::write_csv`].
    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty trace".into()))?;
        if header != TRACE_HEADER.join(",") {
            return Err(Error::Parse(format!("unexpected trace header {header:?}")));
        }
        let mut tr = Trace::default();
        for (no, line) in lines.enumerate() {
            let mut row = [0.0; 8];
            let mut fields = line.split(',');
            for slot in row.iter_mut() {
                let f = fields.next().ok_or_else(|| Error::Parse(format!("short trace row {}", no + 2)))?;
                *slot = f.parse().map_err(|e| Error::Parse(format!("trace row {}: {e}", no + 2)))?;
            }
            tr.push(row);
        }
        Ok(tr)
    }
}

/// Runs the scenario with the model it selects.
pub fn run(scn: &Scenario) -> Result<Trace> {
    match scn.model {
        ModelKind::Nonlinear => simulate(scn),
        ModelKind::Linear => simulate_linear(scn),
    }
}

fn decide(ctrl: &mut Controller, fixed_p: Option<f64>, obs: &Observation, dt: f64) -> f64 {
    let p = ctrl.update(obs, dt);
    fixed_p.unwrap_or(p)
}

fn diverged(t: f64, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { t })
    }
}

/// Integrates the nonlinear fluid model with the state-dependent delay `R(t)`.
pub fn simulate(scn: &Scenario) -> Result<Trace> {
    if scn.model != ModelKind::Nonlinear {
        return Err(Error::Scenario("simulate needs the nonlinear model".into()));
    }
    let op = scn.validate()?;
    let net = &scn.network;
    let (n, c, tp, buffer) = (f64::from(net.n_flows), net.capacity, net.prop_delay, net.buffer_size);
    let dt = scn.dt;
    let steps = scn.steps();
    let (w_init, q_init, p_init) = scn.initial.resolve(net, &op);
    let p_init = scn.fixed_p.unwrap_or(p_init);
    let rtt = |q: f64| q.clamp(0.0, buffer) / c + tp;

    // samples of (W, q, p) at t_k; p is the value applied on [t_k, t_k+1)
    let mut hist = History::<3>::new(dt, buffer / c + tp + 2.0 * dt, [w_init, q_init, p_init]);
    let mut ctrl = Controller::new(&scn.aqm, net, &op, q_init);
    let mut trace = Trace::with_capacity(steps + 1);
    let (mut w, mut q) = (w_init, q_init);

    let deriv = |hist: &History<3>, t: f64, w: f64, q: f64, d: f64| -> (f64, f64) {
        let r = rtt(q);
        let [w_lag, q_lag, p_lag] = hist.at(t - r);
        let r_lag = rtt(q_lag);
        let dw = 1.0 / r - w * w_lag / (2.0 * r_lag) * p_lag;
        let dq = n * w / r - c + d;
        (dw, dq)
    };

    for k in 0..=steps {
        let t = k as f64 * dt;
        let r = rtt(q);
        let agg_rate = n * w / r;
        let d = disturbance_signal(&scn.disturbance, t);
        let obs = Observation { t, w, q, agg_rate, rtt: r };
        let p = decide(&mut ctrl, scn.fixed_p, &obs, dt);
        trace.push([t, w, q, p, d, r, estimate_window(agg_rate, r, net.n_flows), agg_rate]);
        hist.push([w, q, p]);
        if k == steps {
            break;
        }

        let (k1w, k1q) = deriv(&hist, t, w, q, d);
        let (k2w, k2q) = deriv(&hist, t + 0.5 * dt, w + 0.5 * dt * k1w, q + 0.5 * dt * k1q, d);
        let (k3w, k3q) = deriv(&hist, t + 0.5 * dt, w + 0.5 * dt * k2w, q + 0.5 * dt * k2q, d);
        let (k4w, k4q) = deriv(&hist, t + dt, w + dt * k3w, q + dt * k3q, d);
        w += dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
        q += dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
        diverged(t + dt, &[w, q])?;
        if !(0.0..=buffer).contains(&q) {
            q = q.clamp(0.0, buffer);
            trace.queue_clamps += 1;
        }
        if w < W_FLOOR {
            w = W_FLOOR;
            trace.window_floors += 1;
        }
    }
    if trace.queue_clamps > 0 || trace.window_floors > 0 {
        debug!(
            "{}: queue clamped on {} steps, window floored on {} steps",
            scn.aqm.kind, trace.queue_clamps, trace.window_floors
        );
    }
    Ok(trace)
}

/// Integrates the linearization about the operating point with constant
/// delay `R0` and reports absolute values.
pub fn simulate_linear(scn: &Scenario) -> Result<Trace> {
    if scn.model != ModelKind::Linear {
        return Err(Error::Scenario("simulate_linear needs the linear model".into()));
    }
    let op = scn.validate()?;
    let net = &scn.network;
    let sys = linearize(net, &op);
    let (n, c, tp) = (f64::from(net.n_flows), net.capacity, net.prop_delay);
    let dt = scn.dt;
    let h = op.r0;
    let steps = scn.steps();
    let (w_init, q_init, p_init) = scn.initial.resolve(net, &op);
    let p_init = scn.fixed_p.unwrap_or(p_init);
    let x0 = [w_init - op.w0, q_init - net.q_target, p_init - op.p0];

    let a = |i: usize, j: usize| sys.a[(i, j)];
    let ad = |i: usize, j: usize| sys.a_d[(i, j)];
    let b = [sys.b[(0, 0)], sys.b[(1, 0)]];
    let bd = [sys.b_d[(0, 0)], sys.b_d[(1, 0)]];

    let mut hist = History::<3>::new(dt, h + 2.0 * dt, x0);
    let mut ctrl = Controller::new(&scn.aqm, net, &op, q_init);
    let mut trace = Trace::with_capacity(steps + 1);
    let (mut dw, mut dq) = (x0[0], x0[1]);

    let deriv = |hist: &History<3>, t: f64, x: [f64; 2], d: f64| -> [f64; 2] {
        let [lw, lq, lp] = hist.at(t - h);
        let mut out = [0.0; 2];
        for (i, o) in out.iter_mut().enumerate() {
            *o = a(i, 0) * x[0] + a(i, 1) * x[1] + ad(i, 0) * lw + ad(i, 1) * lq + b[i] * lp + bd[i] * d;
        }
        out
    };

    for k in 0..=steps {
        let t = k as f64 * dt;
        let (w, q) = (op.w0 + dw, net.q_target + dq);
        let r = q / c + tp;
        let agg_rate = n * w / r;
        let d = disturbance_signal(&scn.disturbance, t);
        let obs = Observation { t, w, q, agg_rate, rtt: r };
        let p = decide(&mut ctrl, scn.fixed_p, &obs, dt);
        trace.push([t, w, q, p, d, r, estimate_window(agg_rate, r, net.n_flows), agg_rate]);
        hist.push([dw, dq, p - op.p0]);
        if k == steps {
            break;
        }

        let x = [dw, dq];
        let k1 = deriv(&hist, t, x, d);
        let k2 = deriv(&hist, t + 0.5 * dt, [x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]], d);
        let k3 = deriv(&hist, t + 0.5 * dt, [x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]], d);
        let k4 = deriv(&hist, t + dt, [x[0] + dt * k3[0], x[1] + dt * k3[1]], d);
        dw += dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
        dq += dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
        diverged(t + dt, &[dw, dq])?;
    }
    Ok(trace)
}
