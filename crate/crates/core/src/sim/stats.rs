//! Queue statistics before, during and after cross traffic.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Segment, Trace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Period {
    Before,
    During,
    After,
}

impl Period {
    pub const ALL: [Period; 3] = [Period::Before, Period::During, Period::After];

    pub fn code(self) -> &'static str {
        match self {
            Period::Before => "B",
            Period::During => "D",
            Period::After => "A",
        }
    }
}

/// Population statistics of the queue over one period. `None` marks an
/// empty window (or a zero mean for `cv2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodStats {
    pub period: Period,
    /// Window actually used, after trimming, seconds.
    pub start: f64,
    pub end: f64,
    pub samples: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub cv2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub periods: Vec<PeriodStats>,
}

impl StatsReport {
    pub fn period(&self, p: Period) -> &PeriodStats {
        self.periods.iter().find(|s| s.period == p).expect("all periods present")
    }
}

/// Squared coefficient of variation, absent for a zero mean.
pub fn cv2(mean: f64, std: f64) -> Option<f64> {
    (mean != 0.0).then(|| (std / mean).powi(2))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Period boundaries: before the first segment starts, from there to the end
/// of the last segment, and the rest of the run. Without segments the whole
/// run is "before".
pub fn period_bounds(schedule: &[Segment], duration: f64) -> [(f64, f64); 3] {
    let first = schedule.iter().map(|s| s.start).fold(f64::INFINITY, f64::min);
    let last = schedule.iter().map(|s| s.end).fold(f64::NEG_INFINITY, f64::max);
    if schedule.is_empty() {
        return [(0.0, duration), (duration, duration), (duration, duration)];
    }
    [(0.0, first), (first, last), (last, duration)]
}

/// Statistics of the `q` column over the three periods, each trimmed by
/// `settle_margin` at its start. A sample at `t` belongs to `[start, end)`,
/// except that the last period also takes the final sample.
pub fn periodic_stats(trace: &Trace, schedule: &[Segment], settle_margin: f64) -> Result<StatsReport> {
    if !(settle_margin >= 0.0) {
        return Err(Error::InvalidParameter(format!("settle_margin must be non-negative, got {settle_margin}")));
    }
    let duration = trace.t.last().copied().unwrap_or(0.0);
    if schedule.iter().any(|s| s.end > duration + 1e-9) {
        return Err(Error::InvalidParameter("trace does not cover the disturbance schedule".into()));
    }
    let bounds = period_bounds(schedule, duration);
    let periods = Period::ALL
        .iter()
        .zip(bounds)
        .map(|(&period, (start, end))| {
            let start = (start + settle_margin).min(end);
            let inclusive_end = period == Period::After;
            let window: Vec<f64> = trace
                .t
                .iter()
                .zip(&trace.q)
                .filter(|(t, _)| **t >= start && (**t < end || (inclusive_end && **t <= end)))
                .map(|(_, q)| *q)
                .collect();
            let ms = mean_std(&window);
            PeriodStats {
                period,
                start,
                end,
                samples: window.len(),
                mean: ms.map(|m| m.0),
                std: ms.map(|m| m.1),
                cv2: ms.and_then(|(m, s)| cv2(m, s)),
            }
        })
        .collect();
    Ok(StatsReport { periods })
}

/// Decimal rendering with 9 significant digits; `NA` for absent values.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if (-5..15).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_number).unwrap_or_else(|| "NA".into())
}

/// Table with rows `Mean`, `Sdt`, `CV2` for each period `B`, `D`, `A` and one
/// column per labelled report.
pub fn stats_table(columns: &[(String, StatsReport)]) -> String {
    let mut out = String::from("metric,period");
    for (label, _) in columns {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    type Getter = fn(&PeriodStats) -> Option<f64>;
    let metrics: [(&str, Getter); 3] = [("Mean", |s| s.mean), ("Sdt", |s| s.std), ("CV2", |s| s.cv2)];
    for (name, get) in metrics {
        for period in Period::ALL {
            let _ = write!(out, "{name},{}", period.code());
            for (_, report) in columns {
                let _ = write!(out, ",{}", format_opt(get(report.period(period))));
            }
            out.push('\n');
        }
    }
    out
}
