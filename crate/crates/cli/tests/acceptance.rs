//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails.

use std::f64::consts::FRAC_PI_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdaqm::controllers::{AqmConfig, AqmKind};
use tdaqm::delay_lmi::{
    analysis_feasible, max_stable_delay, oracle_delay_margin, rightmost_root, verify_analysis, SearchOptions,
};
use tdaqm::linalg::spectral_abscissa;
use tdaqm::model::{augment, dc_gain, linearize, operating_point, NetworkParams, TdsSystem};
use tdaqm::sim::{self, periodic_stats, stats_table, ModelKind, Period, Scenario, Segment, Trace};
use tdaqm::synthesis::{synthesize_gain, Gains, SynthesisOptions};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const Q0: f64 = 175.0;
/// A quarter of the link capacity.
const CROSS_TRAFFIC: f64 = 0.25 * 3750.0;

fn disturbed(kind: AqmKind) -> Scenario {
    let mut scn = Scenario::new(NetworkParams::REFERENCE, AqmConfig::new(kind));
    scn.duration = 140.0;
    scn.initial.q = Some(0.8 * Q0);
    scn.disturbance = vec![Segment { start: 40.0, end: 100.0, rate: CROSS_TRAFFIC }];
    scn
}

/// Last time before the cross traffic starts at which the queue is outside
/// `175 ± 2`.
fn settling_time(tr: &Trace) -> f64 {
    tr.t
        .iter()
        .zip(&tr.q)
        .filter(|(t, q)| **t < 40.0 && (**q - Q0).abs() > 2.0)
        .map(|(t, _)| *t)
        .fold(0.0, f64::max)
}

/// Criterion 3's test for a given integral gain.
fn regulation_test(gains: &Gains) -> Outcome {
    let mut scn = disturbed(AqmKind::SfiCwnd);
    let (k1, k2, k3) = gains.tcp_components().map_err(|e| e.to_string())?;
    scn.aqm.sfi_gains = [k1, k2, k3];
    let tr = sim::simulate(&scn).map_err(|e| e.to_string())?;
    let ts = settling_time(&tr);
    let during = tr.mean_queue(80.0, 100.0).unwrap();
    let after = tr.mean_queue(120.0, 140.0).unwrap();
    check(
        ts < 40.0 && (during - Q0).abs() <= 2.0 && (after - Q0).abs() <= 2.0,
        format!("settled at {ts:.2} s, mean q [80,100] = {during:.3}, [120,140] = {after:.3}"),
    )
}

fn criterion_1() -> Outcome {
    let op = operating_point(&NetworkParams::REFERENCE).map_err(|e| e.to_string())?;
    check(
        (op.r0 - 0.2467).abs() <= 0.001 && (op.w0 - 15.42).abs() <= 0.05 && (op.p0 - 0.00842).abs() <= 0.0002,
        format!("R0 = {:.6} s, W0 = {:.4} pkts, p0 = {:.6}", op.r0, op.w0, op.p0),
    )
}

fn criterion_2() -> Outcome {
    let net = NetworkParams::REFERENCE;
    let op = operating_point(&net).map_err(|e| e.to_string())?;
    let mut scn = Scenario::new(net, AqmConfig::new(AqmKind::Sf));
    scn.duration = 100.0;
    scn.fixed_p = Some(op.p0);
    let tr = sim::simulate(&scn).map_err(|e| e.to_string())?;
    let dev = tr.q.iter().fold(0.0_f64, |m, q| m.max((q - Q0).abs()));
    check(dev < 1e-4, format!("max |q - q0| = {dev:.3e} pkts over 100 s"))
}

fn criterion_3() -> Outcome {
    regulation_test(&Gains::reference_integral())
}

fn criterion_4() -> Outcome {
    let net = NetworkParams::REFERENCE;
    let op = operating_point(&net).map_err(|e| e.to_string())?;
    let dc = dc_gain(&net, &op, &Gains::reference_plain(), op.r0).map_err(|e| e.to_string())?;
    let predicted = dc * CROSS_TRAFFIC;

    let scn = disturbed(AqmKind::Sf);
    let nl = sim::simulate(&scn).map_err(|e| e.to_string())?;
    let nl_offset = nl.mean_queue(80.0, 100.0).unwrap() - Q0;

    let mut lin_scn = scn.clone();
    lin_scn.model = ModelKind::Linear;
    let lin = sim::simulate_linear(&lin_scn).map_err(|e| e.to_string())?;
    let lin_offset = lin.mean_queue(80.0, 100.0).unwrap() - Q0;
    let rel = (lin_offset - predicted).abs() / predicted.abs();
    check(
        nl_offset.signum() == predicted.signum() && nl_offset.abs() > 2.0 && rel <= 0.10,
        format!(
            "T(0)·d = {predicted:+.3} pkts, linear offset {lin_offset:+.3} ({:.2}% off), nonlinear offset {nl_offset:+.3}",
            100.0 * rel
        ),
    )
}

fn criterion_5() -> Outcome {
    let a = DMatrix::from_element(1, 1, 0.0);
    let a_d = DMatrix::from_element(1, 1, -1.0);
    let crossing = oracle_delay_margin(&a, &a_d, 10.0, 1e-7).map_err(|e| e.to_string())?.unwrap_or(f64::NAN);
    let at_crossing = rightmost_root(&a, &a_d, FRAC_PI_2).map_err(|e| e.to_string())?;
    let sys = TdsSystem::autonomous(a, a_d, 1.0).map_err(|e| e.to_string())?;
    let opts = SearchOptions { h_cap: 10.0, ..SearchOptions::default() };
    let mut margins = Vec::new();
    for r in 1..=3 {
        margins.push(max_stable_delay(&sys, r, 1e-4, &opts).map_err(|e| e.to_string())?.h_max);
    }
    let ok = (crossing - FRAC_PI_2).abs() <= 1e-3
        && at_crossing.re.abs() <= 1e-6
        && margins.iter().all(|h| *h <= FRAC_PI_2)
        && margins.windows(2).all(|w| w[1] >= w[0]);
    check(
        ok,
        format!(
            "spectral crossing h = {crossing:.6}, root at π/2 = {:.2e}{:+.6}i, certified h_max r=1..3 = {:.5} / {:.5} / {:.5}",
            at_crossing.re, at_crossing.im, margins[0], margins[1], margins[2]
        ),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Independent recheck of a feasible analysis or synthesis result.
fn confirm(a: &DMatrix<f64>, a_cl: &DMatrix<f64>, h_m: f64, margin: f64) -> Result<(), String> {
    if margin.is_nan() || margin >= 0.0 {
        return Err(format!("recomputed margin {margin:.3e} is not negative"));
    }
    for h in [0.5 * h_m, h_m] {
        let root = rightmost_root(a, a_cl, h).map_err(|e| e.to_string())?;
        if root.re.is_nan() || root.re >= 0.0 {
            return Err(format!("rightmost root {root} at h = {h} is not in the left half-plane"));
        }
    }
    Ok(())
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let opts = SearchOptions { restarts: 4, iterations: 2000, ..SearchOptions::default() };
    let (mut analysis, mut synthesis, mut tried) = (0usize, 0usize, 0usize);

    while analysis < 40 && tried < 400 {
        tried += 1;
        let n = rng.random_range(1..=3);
        let a = random_matrix(&mut rng, n, 1.0) - DMatrix::identity(n, n) * rng.random_range(0.5..2.0);
        let a_d = random_matrix(&mut rng, n, 0.8);
        if spectral_abscissa(&(&a + &a_d)) >= 0.0 {
            continue;
        }
        let h_m = rng.random_range(0.05..1.5);
        let r = rng.random_range(1..=2);
        let sys = TdsSystem::autonomous(a.clone(), a_d.clone(), h_m).map_err(|e| e.to_string())?;
        let cert = analysis_feasible(&sys, h_m, r, &opts).map_err(|e| e.to_string())?;
        if !cert.is_feasible() {
            continue;
        }
        let (margin, _) = verify_analysis(&a, &a_d, &cert.lk).map_err(|e| e.to_string())?;
        confirm(&a, &a_d, h_m, margin).map_err(|e| format!("analysis instance {tried}: {e}"))?;
        analysis += 1;
    }

    let synth_opts = SynthesisOptions { search: opts.clone(), ..SynthesisOptions::default() };
    let mut synth_tried = 0usize;
    while synthesis < 12 && synth_tried < 60 {
        synth_tried += 1;
        let n = rng.random_range(1..=3);
        let a = random_matrix(&mut rng, n, 1.0);
        let a_d = random_matrix(&mut rng, n, 0.3);
        let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let h_m = rng.random_range(0.05..0.4);
        let Ok(sys) = TdsSystem::new(a.clone(), a_d, b, DMatrix::zeros(n, 1), h_m) else { continue };
        let Ok(cert) = synthesize_gain(&sys, h_m, 1, &synth_opts) else { continue };
        if !cert.is_feasible() {
            continue;
        }
        let margin = cert.recompute_margin(&sys).map_err(|e| e.to_string())?;
        confirm(&a, &sys.closed_loop_delayed(&cert.gains.k), h_m, margin)
            .map_err(|e| format!("synthesis instance {synth_tried}: {e}"))?;
        synthesis += 1;
    }

    // the reference network, both gain structures
    let net = NetworkParams::REFERENCE;
    let op = operating_point(&net).map_err(|e| e.to_string())?;
    let lin = linearize(&net, &op);
    let mut reference = 0;
    for sys in [lin.clone(), augment(&lin).map_err(|e| e.to_string())?] {
        let cert = synthesize_gain(&sys, op.r0, 1, &SynthesisOptions::default()).map_err(|e| e.to_string())?;
        if cert.is_feasible() {
            let margin = cert.recompute_margin(&sys).map_err(|e| e.to_string())?;
            confirm(&sys.a, &sys.closed_loop_delayed(&cert.gains.k), op.r0, margin)?;
            reference += 1;
        }
    }

    let total = analysis + synthesis + reference;
    check(
        total >= 50,
        format!("{total} feasible verdicts confirmed ({analysis} analysis, {} synthesis), 0 violations", synthesis + reference),
    )
}

fn criterion_7() -> Outcome {
    let net = NetworkParams::REFERENCE;
    let op = operating_point(&net).map_err(|e| e.to_string())?;
    let sys = augment(&linearize(&net, &op)).map_err(|e| e.to_string())?;
    let cert = synthesize_gain(&sys, op.r0, 1, &SynthesisOptions::default()).map_err(|e| e.to_string())?;
    if !cert.is_feasible() {
        return Err(format!("synthesis {:?} (margin {:.3e})", cert.verdict, cert.margin));
    }
    let k: Vec<String> = cert.gains.k.iter().map(|v| format!("{v:.4e}")).collect();
    regulation_test(&cert.gains).map(|d| format!("K = [{}]: {d}", k.join(", "))).map_err(|d| format!("K = [{}]: {d}", k.join(", ")))
}

fn criterion_8() -> Outcome {
    let mut scn = Scenario::new(NetworkParams::REFERENCE, AqmConfig::new(AqmKind::Pi));
    scn.duration = 100.0;
    scn.initial.q = Some(0.8 * Q0);
    let tr = sim::simulate(&scn).map_err(|e| e.to_string())?;
    let dev = tr.t.iter().zip(&tr.q).filter(|(t, _)| **t >= 60.0).fold(0.0_f64, |m, (_, q)| m.max((q - Q0).abs()));
    let mean = tr.mean_queue(60.0, 100.0).unwrap();
    check(dev <= 5.0, format!("q over [60,100] s: mean {mean:.3}, max deviation {dev:.3} pkts"))
}

fn criterion_9() -> Outcome {
    let mut columns = Vec::new();
    let mut cells = 0;
    for kind in AqmKind::ALL {
        let scn = disturbed(kind);
        let tr = sim::simulate(&scn).map_err(|e| e.to_string())?;
        let report = periodic_stats(&tr, &scn.disturbance, 5.0).map_err(|e| e.to_string())?;
        for p in &report.periods {
            if let (Some(m), Some(s)) = (p.mean, p.std) {
                if p.cv2 != Some((s / m).powi(2)) {
                    return Err(format!("{kind} {:?}: cv2 {:?} != (std/mean)^2", p.period, p.cv2));
                }
                cells += 1;
            }
        }
        columns.push((kind.label().to_string(), report));
    }
    let table = stats_table(&columns);
    let lines: Vec<&str> = table.lines().collect();
    let header_ok = lines[0] == "metric,period,RED,PI,SF,SFI_cwnd,SFI_aggflow";
    let mut rows_ok = lines.len() == 10;
    let mut i = 1;
    for metric in ["Mean", "Sdt", "CV2"] {
        for p in Period::ALL {
            let prefix = format!("{metric},{},", p.code());
            rows_ok &= lines.get(i).is_some_and(|l| l.starts_with(&prefix) && l.split(',').count() == 7);
            i += 1;
        }
    }
    check(header_ok && rows_ok, format!("{cells} cells satisfy cv2 = (std/mean)^2 exactly; 9 rows x 5 AQM columns"))
}

fn run_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_tdaqm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("{args:?} exited with {}: {}", status.status, String::from_utf8_lossy(&status.stderr)));
    }
    Ok(())
}

fn criterion_10() -> Outcome {
    let scenario = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/reference.toml");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_cli(&["compare", "--scenario", scenario, "--seed", "7", "--set", "run.duration=60", "--set", "disturbance.segments=[{start = 20.0, end = 40.0, rate = 937.5}]"], out)?;
        run_cli(&["synthesize", "--scenario", scenario, "--seed", "7"], out)?;
    }
    let mut files: Vec<String> = AqmKind::ALL.iter().map(|k| format!("trace_{k}.csv")).collect();
    files.push("stats.csv".into());
    files.push("certificate.toml".into());
    for f in &files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs between identical invocations"));
        }
    }
    Ok(format!("{} files byte-identical across two invocations", files.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("operating point", criterion_1),
        ("equilibrium invariance", criterion_2),
        ("reference integral gain regulates and rejects cross traffic", criterion_3),
        ("plain gain offset follows the DC limit", criterion_4),
        ("scalar delay equation oracle", criterion_5),
        ("certificate soundness", criterion_6),
        ("synthesized integral gain passes the regulation test", criterion_7),
        ("PI baseline", criterion_8),
        ("statistics contract", criterion_9),
        ("CLI determinism", criterion_10),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let no = i + 1;
        if !only.is_empty() && !only.contains(&no) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {no:>2} PASS ({secs:.1} s) {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {no:>2} FAIL ({secs:.1} s) {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
