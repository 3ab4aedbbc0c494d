//! Command-line front end for the `tdaqm` crate.
//!
//! Every command reads a scenario file, writes its artifacts under `--out`
//! with fixed file names and returns one of the [`exit`] codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use tdaqm::controllers::AqmKind;
use tdaqm::delay_lmi::{self, oracle_delay_margin, StabilityCertificate};
use tdaqm::model::{augment, linearize, operating_point, TdsSystem};
use tdaqm::scenario::ScenarioFile;
use tdaqm::sim::{self, periodic_stats, stats_table, StatsReport, Trace};
use tdaqm::synthesis::{synthesize_gain, Gains};
use tdaqm::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const UNDECIDED: u8 = 2;
    pub const NUMERICAL: u8 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "tdaqm", version, about = "Delay-aware AQM design, analysis and fluid simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Design a state-feedback gain and write its certificate.
    Synthesize(Common),
    /// Check closed-loop stability for every delay up to h_m.
    Analyze(Common),
    /// Certified delay margin for each r of the sweep, next to the spectral one.
    Margin(Common),
    /// Simulate the configured AQM.
    Simulate(Common),
    /// Simulate every AQM of the comparison list and tabulate queue statistics.
    Compare(Common),
    /// Queue statistics of existing trace files.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Trace CSV files; the file stem labels the column.
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Seed of every randomized search.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override a scenario entry, e.g. `--set run.duration=60`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Failure of a command, with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Unconverged { .. } | Error::Diverged { .. } | Error::NearPole { .. } => exit::NUMERICAL,
            Error::UnstableAtZeroDelay { .. } => exit::UNDECIDED,
            _ => exit::CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: exit::CONFIG, message: format!("{}: {e}", path.display()) }
}

type CmdResult = Result<u8, Failure>;

pub fn run(cli: Cli) -> CmdResult {
    let common = match &cli.command {
        Command::Synthesize(c)
        | Command::Analyze(c)
        | Command::Margin(c)
        | Command::Simulate(c)
        | Command::Compare(c)
        | Command::Stats { common: c, .. } => c,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = common.jobs {
        pool = pool.num_threads(jobs.max(1));
    }
    let pool = pool
        .build()
        .map_err(|e| Failure { code: exit::CONFIG, message: format!("thread pool: {e}") })?;
    pool.install(|| match &cli.command {
        Command::Synthesize(c) => run_synthesize(c),
        Command::Analyze(c) => run_analyze(c),
        Command::Margin(c) => run_margin(c),
        Command::Simulate(c) => run_simulate(c),
        Command::Compare(c) => run_compare(c),
        Command::Stats { common, traces } => run_stats(common, traces),
    })
}

fn load(c: &Common) -> Result<ScenarioFile, Failure> {
    let mut overrides = c.overrides.clone();
    overrides.push(format!("run.seed={}", c.seed));
    let file = ScenarioFile::load(&c.scenario, &overrides)?;
    fs::create_dir_all(&c.out).map_err(|e| io_failure(&c.out, e))?;
    Ok(file)
}

fn write(c: &Common, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    let path = c.out.join(name);
    fs::write(&path, contents).map_err(|e| io_failure(&path, e))?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn fmt_gains(g: &Gains) -> String {
    let parts: Vec<String> = g.k.iter().map(|v| format!("{v:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn run_synthesize(c: &Common) -> CmdResult {
    let file = load(c)?;
    let plant = file.plant()?;
    let h_m = file.h_m()?;
    let opts = file.solver.synthesis_options(c.seed, true);
    let cert = synthesize_gain(&plant, h_m, file.solver.r, &opts)?;
    write(c, "certificate.toml", &cert.to_toml()?)?;
    println!("verdict {:?}", cert.verdict);
    println!("K = {}", fmt_gains(&cert.gains));
    println!("margin {:.6e} at h_m = {h_m:.6} (r = {})", cert.margin, file.solver.r);
    println!("rightmost root {:.6} {:+.6}i", cert.oracle_root[0], cert.oracle_root[1]);
    Ok(if cert.is_feasible() { exit::OK } else { exit::UNDECIDED })
}

/// Closed loop under test: the `[system]` section as given, otherwise the
/// linearized network closed by the configured state-feedback gains (open
/// loop for PI and RED).
fn loop_under_test(file: &ScenarioFile) -> Result<(TdsSystem, String), Failure> {
    let h = file.h_m()?;
    if let Some(sys) = &file.system {
        return Ok((sys.to_system(h)?, "system section".into()));
    }
    let net = file.network()?;
    let lin = linearize(&net, &operating_point(&net)?);
    let cfg = file.aqm_config(file.aqm.kind);
    let (plant, gains) = match file.aqm.kind {
        AqmKind::Sf => (lin, Some(cfg.plain_gains())),
        AqmKind::SfiCwnd | AqmKind::SfiAggflow => (augment(&lin)?, Some(cfg.integral_gains())),
        AqmKind::Pi | AqmKind::Red => (lin, None),
    };
    let label = match &gains {
        Some(g) => format!("{} loop, K = {}", file.aqm.kind, fmt_gains(g)),
        None => "open-loop linearization".into(),
    };
    let a_d = match &gains {
        Some(g) => plant.closed_loop_delayed(&g.k),
        None => plant.a_d.clone(),
    };
    Ok((TdsSystem::autonomous(plant.a, a_d, h)?, label))
}

#[derive(Serialize)]
struct AnalysisDoc<'a> {
    schema: u32,
    subject: &'a str,
    h_m: f64,
    oracle_root: [f64; 2],
    #[serde(flatten)]
    certificate: &'a StabilityCertificate,
}

pub fn run_analyze(c: &Common) -> CmdResult {
    let file = load(c)?;
    let (sys, subject) = loop_under_test(&file)?;
    let h_m = file.h_m()?;
    let cert = delay_lmi::analysis_feasible(&sys, h_m, file.solver.r, &file.solver.search_options(c.seed, true))?;
    let root: Complex64 = delay_lmi::rightmost_root(&sys.a, &sys.a_d, h_m)?;
    let doc = AnalysisDoc { schema: 1, subject: &subject, h_m, oracle_root: [root.re, root.im], certificate: &cert };
    let text = toml::to_string(&doc).map_err(|e| Failure { code: exit::CONFIG, message: e.to_string() })?;
    write(c, "analysis.toml", &text)?;
    println!("{subject}");
    println!("verdict {:?} (margin {:.6e}) for h <= {h_m:.6}", cert.verdict, cert.margin);
    println!("rightmost root at h_m {:.6} {:+.6}i", root.re, root.im);
    Ok(if cert.is_feasible() { exit::OK } else { exit::UNDECIDED })
}

pub fn run_margin(c: &Common) -> CmdResult {
    let file = load(c)?;
    let (sys, subject) = loop_under_test(&file)?;
    let tol = file.solver.tol;
    let opts = file.solver.search_options(c.seed, true);
    println!("{subject}");
    let oracle = match oracle_delay_margin(&sys.a, &sys.a_d, opts.h_cap, tol * 1e-3) {
        Ok(m) => m,
        Err(Error::UnstableAtZeroDelay { abscissa }) => {
            let msg = format!("no margin: unstable at zero delay (spectral abscissa of A + Ad = {abscissa:.6e})\n");
            write(c, "margin.csv", &msg)?;
            print!("{msg}");
            return Ok(exit::UNDECIDED);
        }
        Err(e) => return Err(e.into()),
    };
    let oracle_text = oracle.map_or_else(|| "none".to_string(), |h| format!("{h:.6}"));
    let mut csv = String::from("r,h_max,oracle_margin,capped\n");
    let mut any = false;
    for &r in &file.solver.r_sweep {
        let report = delay_lmi::max_stable_delay(&sys, r, tol, &opts)?;
        any |= report.h_max > 0.0;
        csv.push_str(&format!("{r},{:.6},{oracle_text},{}\n", report.h_max, report.capped));
        println!("r = {r}: certified h_max = {:.6}, spectral margin = {oracle_text}", report.h_max);
    }
    write(c, "margin.csv", &csv)?;
    Ok(if any { exit::OK } else { exit::UNDECIDED })
}

fn simulate_kinds(c: &Common, file: &ScenarioFile, kinds: &[AqmKind]) -> CmdResult {
    let runs: Vec<Result<(AqmKind, Trace, StatsReport), Error>> = kinds
        .par_iter()
        .map(|&kind| {
            let scn = file.scenario(kind)?;
            let trace = sim::run(&scn)?;
            let stats = periodic_stats(&trace, &scn.disturbance, file.run.settle_margin)?;
            Ok((kind, trace, stats))
        })
        .collect();
    let mut columns = Vec::new();
    for run in runs {
        let (kind, trace, stats) = run?;
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, file.run.trace_stride).expect("writing to memory");
        write(c, &format!("trace_{kind}.csv"), &String::from_utf8(buf).expect("ascii csv"))?;
        if trace.queue_clamps + trace.window_floors > 0 {
            println!(
                "{kind}: queue clamped on {} steps, window floored on {} steps",
                trace.queue_clamps, trace.window_floors
            );
        }
        columns.push((kind.label().to_string(), stats));
    }
    let table = stats_table(&columns);
    write(c, "stats.csv", &table)?;
    print!("{table}");
    Ok(exit::OK)
}

pub fn run_simulate(c: &Common) -> CmdResult {
    let file = load(c)?;
    simulate_kinds(c, &file, &[file.aqm.kind])
}

pub fn run_compare(c: &Common) -> CmdResult {
    let file = load(c)?;
    let mut kinds = file.compare_kinds();
    kinds.dedup();
    simulate_kinds(c, &file, &kinds)
}

pub fn run_stats(c: &Common, traces: &[PathBuf]) -> CmdResult {
    let file = load(c)?;
    let mut columns = Vec::new();
    for path in traces {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        let trace = Trace::read_csv(&text)?;
        let stats = periodic_stats(&trace, &file.disturbance.segments, file.run.settle_margin)?;
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        columns.push((label, stats));
    }
    let table = stats_table(&columns);
    write(c, "stats.csv", &table)?;
    print!("{table}");
    Ok(exit::OK)
}
