//! Scenario documents: a versioned TOML file with `[network]`, `[aqm]`,
//! `[disturbance]`, `[solver]` and `[run]` sections, plus optional
//! `[compare]` and `[system]` sections.
//!
//! ```toml
//! schema = 1
//!
//! [network]
//! n_flows = 60
//! capacity = 3750.0
//! prop_delay = 0.2
//! q_target = 175.0
//! buffer_size = 800.0
//!
//! [aqm]
//! kind = "sfi_cwnd"
//!
//! [[disturbance.segments]]
//! start = 40.0
//! end = 100.0
//! rate = 937.5
//!
//! [run]
//! duration = 140.0
//! ```
//!
//! Overrides of the form `section.key=value` are applied to the parsed
//! document before it is validated; the value is read as a TOML value and
//! falls back to a bare string.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::controllers::{AqmConfig, AqmKind, PiParams, RedParams};
use crate::delay_lmi::SearchOptions;
use crate::model::{augment, linearize, operating_point, NetworkParams, TdsSystem};
use crate::sim::{InitialState, ModelKind, Scenario, Segment};
use crate::synthesis::{GainFlavor, SeedGain, SynthesisCertificate, SynthesisOptions};
use crate::{Error, Result};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: u32,
    pub network: Option<NetworkParams>,
    #[serde(default)]
    pub aqm: AqmSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
    #[serde(default)]
    pub disturbance: DisturbanceSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AqmSection {
    pub kind: AqmKind,
    pub sf_gains: Option<[f64; 2]>,
    pub sfi_gains: Option<[f64; 3]>,
    /// Certificate whose gains replace the plain or integral gains,
    /// relative to the scenario file.
    pub gains_file: Option<PathBuf>,
    pub pi: PiParams,
    pub red: RedParams,
}

impl Default for AqmSection {
    fn default() -> Self {
        Self {
            kind: AqmKind::SfiCwnd,
            sf_gains: None,
            sfi_gains: None,
            gains_file: None,
            pi: PiParams::default(),
            red: RedParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub kinds: Vec<AqmKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSection {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    /// Pieces of the discretized functional.
    pub r: usize,
    /// Delay bound for analysis and synthesis; defaults to `R0`.
    pub h_m: Option<f64>,
    pub flavor: GainFlavor,
    /// Values of `r` reported by `margin`.
    pub r_sweep: Vec<usize>,
    /// Bisection tolerance of delay margins, seconds.
    pub tol: f64,
    pub restarts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub target: f64,
    pub h_cap: f64,
    pub rounds: usize,
    pub inner_steps: usize,
    pub gain_reg: f64,
    pub seed_gain: SeedGain,
}

impl Default for SolverSection {
    fn default() -> Self {
        let search = SearchOptions::default();
        let synth = SynthesisOptions::default();
        Self {
            r: 1,
            h_m: None,
            flavor: GainFlavor::Integral,
            r_sweep: vec![1, 2, 3],
            tol: 1e-3,
            restarts: search.restarts,
            iterations: search.iterations,
            learning_rate: search.learning_rate,
            target: search.target,
            h_cap: search.h_cap,
            rounds: synth.rounds,
            inner_steps: synth.inner_steps,
            gain_reg: synth.gain_reg,
            seed_gain: synth.seed_gain,
        }
    }
}

impl SolverSection {
    pub fn search_options(&self, seed: u64, parallel: bool) -> SearchOptions {
        SearchOptions {
            restarts: self.restarts,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            target: self.target,
            seed,
            h_cap: self.h_cap,
            parallel,
        }
    }

    pub fn synthesis_options(&self, seed: u64, parallel: bool) -> SynthesisOptions {
        SynthesisOptions {
            search: self.search_options(seed, parallel),
            rounds: self.rounds,
            inner_steps: self.inner_steps,
            gain_reg: self.gain_reg,
            seed_gain: self.seed_gain,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r_sweep.contains(&0) {
            return Err(Error::Scenario("solver.r and solver.r_sweep entries must be >= 1".into()));
        }
        if let Some(h) = self.h_m {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Scenario(format!("solver.h_m must be positive, got {h}")));
            }
        }
        if !(self.tol > 0.0) || !(self.h_cap > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Scenario("solver.tol, solver.h_cap and solver.learning_rate must be positive".into()));
        }
        if self.flavor == GainFlavor::General {
            return Err(Error::Scenario("solver.flavor must be \"plain\" or \"integral\"".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub duration: f64,
    pub dt: f64,
    pub model: ModelKind,
    pub settle_margin: f64,
    /// Keep every n-th trace row in CSV output.
    pub trace_stride: usize,
    pub initial: InitialState,
    pub fixed_p: Option<f64>,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            duration: 140.0,
            dt: 1e-3,
            model: ModelKind::Nonlinear,
            settle_margin: 5.0,
            trace_stride: 1,
            initial: InitialState::default(),
            fixed_p: None,
            seed: 0,
        }
    }
}

/// Explicit `ẋ = A x + Ad x(t−h) + B u(t−h)`, rows as arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Vec<Vec<f64>>,
    pub a_d: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Scenario(format!("system.{name} must be a non-empty rectangular array of rows")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Scenario(format!("system.{name} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl SystemSection {
    pub fn to_system(&self, delay: f64) -> Result<TdsSystem> {
        let a = matrix("a", &self.a)?;
        let a_d = matrix("a_d", &self.a_d)?;
        let n = a.nrows();
        let b = match &self.b {
            Some(rows) => matrix("b", rows)?,
            None => DMatrix::zeros(n, 1),
        };
        TdsSystem::new(a, a_d, b, DMatrix::zeros(n, 1), delay)
    }
}

impl ScenarioFile {
    /// Parses a document and applies `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let file: ScenarioFile = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    /// Reads a scenario and resolves its gains file, if any.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
        let mut file = Self::parse(&text, overrides)?;
        if let Some(gains) = file.aqm.gains_file.clone() {
            let full = path.parent().unwrap_or(Path::new(".")).join(gains);
            let cert = SynthesisCertificate::load(&full)
                .map_err(|e| Error::Scenario(format!("gains_file {}: {e}", full.display())))?;
            let (k1, k2, k3) = cert.gains.tcp_components()?;
            match cert.gains.flavor {
                GainFlavor::Plain => file.aqm.sf_gains = Some([k1, k2]),
                _ => file.aqm.sfi_gains = Some([k1, k2, k3]),
            }
            file.aqm.gains_file = None;
        }
        Ok(file)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Scenario(format!("unsupported schema {} (expected {SCHEMA})", self.schema)));
        }
        if let Some(net) = &self.network {
            net.validate()?;
        }
        self.solver.validate()?;
        if self.run.trace_stride == 0 {
            return Err(Error::Scenario("run.trace_stride must be >= 1".into()));
        }
        if !(self.run.settle_margin >= 0.0) {
            return Err(Error::Scenario("run.settle_margin must be non-negative".into()));
        }
        if let Some(c) = &self.compare {
            if c.kinds.is_empty() {
                return Err(Error::Scenario("compare.kinds must not be empty".into()));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> Result<NetworkParams> {
        self.network.ok_or_else(|| Error::Scenario("missing [network] section".into()))
    }

    pub fn aqm_config(&self, kind: AqmKind) -> AqmConfig {
        let mut cfg = AqmConfig::new(kind);
        if let Some(g) = self.aqm.sf_gains {
            cfg.sf_gains = g;
        }
        if let Some(g) = self.aqm.sfi_gains {
            cfg.sfi_gains = g;
        }
        cfg.pi = self.aqm.pi.clone();
        cfg.red = self.aqm.red.clone();
        cfg
    }

    /// AQMs compared by `compare`; the configured kind when no list is given.
    pub fn compare_kinds(&self) -> Vec<AqmKind> {
        self.compare.as_ref().map_or_else(|| vec![self.aqm.kind], |c| c.kinds.clone())
    }

    /// Simulation scenario for one AQM.
    pub fn scenario(&self, kind: AqmKind) -> Result<Scenario> {
        let scn = Scenario {
            network: self.network()?,
            aqm: self.aqm_config(kind),
            duration: self.run.duration,
            dt: self.run.dt,
            disturbance: self.disturbance.segments.clone(),
            initial: self.run.initial,
            model: self.run.model,
            fixed_p: self.run.fixed_p,
            seed: self.run.seed,
        };
        scn.validate()?;
        Ok(scn)
    }

    /// Delay bound of analysis and synthesis: `solver.h_m`, else `R0`.
    pub fn h_m(&self) -> Result<f64> {
        match self.solver.h_m {
            Some(h) => Ok(h),
            None => Ok(operating_point(&self.network()?)?.r0),
        }
    }

    /// Open-loop plant for synthesis: the `[system]` section when present,
    /// otherwise the linearized network, augmented for integral gains.
    pub fn plant(&self) -> Result<TdsSystem> {
        let h = self.h_m()?;
        if let Some(sys) = &self.system {
            return sys.to_system(h);
        }
        let net = self.network()?;
        let lin = linearize(&net, &operating_point(&net)?);
        match self.solver.flavor {
            GainFlavor::Integral => augment(&lin),
            _ => Ok(lin),
        }
    }
}

/// Sets `dotted.key` in `table` to `value`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Scenario(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Scenario(format!("override key {key:?} is malformed")));
    }
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Scenario(format!("override {key:?}: {part:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
