//! `chaincalc`: operator calculus on Dirac chains from the command line.
//!
//! Exit codes: 0 when every requested check passes, 1 on a numerical
//! failure (a residual over tolerance), 2 on schema, I/O, or usage errors.

use chaincalc_cli::report::{
    accelerate, convergence_csv, flow_csv, write_text, CheckReport, RunReport,
};
use chaincalc_cli::scenario::{region_from_path, ChainDoc, CheckSpec, Scenario, DEFAULT_SEED};
use chaincalc_cli::suites::{catalog, run_suites, SuiteConfig, SuiteOutcome};
use chaincalc_core::rep::{integrate_stream, ConvergenceRow};
use chaincalc_core::{
    chainops, flow, norms, ChainError, ChainStream, DiracChain, Form, IntegrateOpts, Poly,
    Result, SmoothMap, TimeForm, VectorField,
};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "chaincalc",
    version,
    about = "Exact operator calculus on Dirac chains: verification suites, stream \
             integration, norm estimation, and flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the deterministic verification suites.
    Verify {
        /// Suites to run (default: all; see --list).
        suites: Vec<String>,
        /// List the available suites and exit.
        #[arg(long)]
        list: bool,
        /// Seed for the randomized suites.
        #[arg(long)]
        seed: Option<u64>,
        /// Case-count override.
        #[arg(long)]
        cases: Option<usize>,
        /// Ambient-dimension override.
        #[arg(long)]
        n: Option<usize>,
        /// Grade override.
        #[arg(long)]
        grade: Option<usize>,
        /// Tolerance override.
        #[arg(long)]
        tol: Option<f64>,
        /// Write the outcome matrix as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate a scenario's form against its domain stream.
    Integrate {
        /// Scenario JSON file.
        #[arg(long)]
        scenario: PathBuf,
        /// Final refinement depth (default 8).
        #[arg(long)]
        depth: Option<u32>,
        /// Stop refining once the level difference falls below this.
        #[arg(long)]
        tol: Option<f64>,
        /// Override the scenario seed recorded in the report.
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination for the convergence table (overrides the scenario).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate norm upper and lower bounds for a chain.
    Norm {
        /// Chain document (JSON).
        #[arg(long, conflicts_with = "scenario")]
        chain: Option<PathBuf>,
        /// Scenario whose domain, refined to --depth, provides the chain.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Norm order.
        #[arg(long, default_value_t = 1)]
        r: usize,
        /// JSON region file restricting the test forms.
        #[arg(long)]
        region: Option<PathBuf>,
        /// Refinement depth when the chain comes from a scenario (default 4).
        #[arg(long)]
        depth: Option<u32>,
        /// Write the estimate as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a transport-theorem check from a scenario.
    Flow {
        /// Scenario JSON file with a field and a check.
        #[arg(long)]
        scenario: PathBuf,
        /// Space refinement depth.
        #[arg(long, default_value_t = 8)]
        depth: u32,
        /// Time refinement depth.
        #[arg(long, default_value_t = 10)]
        depth_time: u32,
        /// Tolerance override.
        #[arg(long)]
        tol: Option<f64>,
        /// CSV destination for the residual table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Built-in worked examples.
    Demo {
        #[command(subcommand)]
        which: DemoCommand,
    },
}

#[derive(Subcommand)]
enum DemoCommand {
    /// Cantor boundary integrals and exact stage masses.
    Cantor {
        #[arg(long, default_value_t = 12)]
        depth: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Second moment of the Sierpinski gasket.
    Sierpinski {
        #[arg(long, default_value_t = 10)]
        depth: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-sided divergence theorem on the unit square.
    Divergence {
        #[arg(long, default_value_t = 8)]
        depth: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Signed area of the quadrifolium via a pushforward stream.
    Quadrifolium {
        #[arg(long, default_value_t = 12)]
        depth: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ChainError::Numerical(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Verify {
            suites,
            list,
            seed,
            cases,
            n,
            grade,
            tol,
            out,
        } => cmd_verify(suites, list, seed, cases, n, grade, tol, out),
        Command::Integrate {
            scenario,
            depth,
            tol,
            seed,
            out,
        } => cmd_integrate(&scenario, depth, tol, seed, out),
        Command::Norm {
            chain,
            scenario,
            r,
            region,
            depth,
            out,
        } => cmd_norm(chain, scenario, r, region, depth, out),
        Command::Flow {
            scenario,
            depth,
            depth_time,
            tol,
            out,
        } => cmd_flow(&scenario, depth, depth_time, tol, out),
        Command::Demo { which } => match which {
            DemoCommand::Cantor { depth, out } => demo_cantor(depth, out),
            DemoCommand::Sierpinski { depth, out } => demo_sierpinski(depth, out),
            DemoCommand::Divergence { depth, out } => demo_divergence(depth, out),
            DemoCommand::Quadrifolium { depth, out } => demo_quadrifolium(depth, out),
        },
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| ChainError::Schema(e.to_string()))
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    suites: Vec<String>,
    list: bool,
    seed: Option<u64>,
    cases: Option<usize>,
    n: Option<usize>,
    grade: Option<usize>,
    tol: Option<f64>,
    out: Option<PathBuf>,
) -> Result<bool> {
    if list {
        println!("{:<18} {:>9}  description", "suite", "criterion");
        for (name, crit, blurb) in catalog() {
            println!("{name:<18} {crit:>9}  {blurb}");
        }
        return Ok(true);
    }
    let cfg = SuiteConfig {
        seed: seed.unwrap_or(DEFAULT_SEED),
        cases,
        n,
        grade,
        tol,
    };
    let outcomes = run_suites(&suites, &cfg)?;
    print_matrix(&outcomes);
    let passed = outcomes.iter().all(|o| o.passed);
    let np = outcomes.iter().filter(|o| o.passed).count();
    println!("{np}/{} suites passed (seed {})", outcomes.len(), cfg.seed);
    if let Some(path) = out {
        write_text(&path, &to_json(&outcomes)?)?;
    }
    Ok(passed)
}

fn print_matrix(outcomes: &[SuiteOutcome]) {
    println!(
        "{:<18} {:>4} {:>7} {:>12} {:>9} {:>8}  result",
        "suite", "crit", "cases", "worst", "tol", "time"
    );
    for o in outcomes {
        println!(
            "{:<18} {:>4} {:>7} {:>12.3e} {:>9.1e} {:>7.2}s  {}",
            o.name,
            o.criterion,
            o.cases,
            o.worst,
            o.tolerance,
            o.seconds,
            if o.passed { "PASS" } else { "FAIL" }
        );
    }
    for o in outcomes.iter().filter(|o| !o.passed) {
        println!("  {} failed: {}", o.name, o.detail);
    }
}

// ---------------------------------------------------------------------------
// integrate
// ---------------------------------------------------------------------------

fn cmd_integrate(
    path: &Path,
    depth: Option<u32>,
    tol: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<bool> {
    let mut scn = Scenario::from_path(path)?;
    if let Some(s) = seed {
        scn.seed = s;
    }
    let form = scn
        .form
        .clone()
        .ok_or_else(|| ChainError::Schema("integrate needs a 'form' in the scenario".into()))?;
    let stream = ChainStream::from_spec(&scn.domain)?;
    let j_end = depth.unwrap_or(8);

    let (rows, value, error_bound, converged, diagnostics) = if scn.pipeline.is_empty() {
        let si = integrate_stream(
            &form,
            &stream,
            IntegrateOpts {
                j_start: 0,
                j_end,
                tol,
            },
        )?;
        (si.rows, si.value, si.error_bound, si.converged, si.diagnostics)
    } else {
        // Operators applied per level: materialize, transform, pair.
        let mut rows: Vec<ConvergenceRow> = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        for j in 0..=j_end {
            let chain = chainops::apply_pipeline(&scn.pipeline, &stream.chain(j)?)?;
            let v = form.eval_chain(&chain)?;
            let diff = vals.last().map(|p| v - p).unwrap_or(0.0);
            vals.push(v);
            rows.push(ConvergenceRow {
                j,
                value: v,
                diff,
                accelerated: accelerate(&vals),
                certified_bound: None,
            });
            if vals.len() >= 2 {
                if let Some(t) = tol {
                    if diff.abs() <= t {
                        break;
                    }
                }
            }
        }
        let value = rows.last().map(|r| r.accelerated).unwrap_or(0.0);
        let converged = rows.len() >= 3 && {
            let k = rows.len();
            rows[k - 1].diff.abs() <= rows[k - 2].diff.abs().max(1e-300)
        };
        (
            rows,
            value,
            None,
            converged,
            "pipelined levels: no certified tail".to_string(),
        )
    };

    let mut checks = Vec::new();
    match &scn.check {
        None => {}
        Some(CheckSpec::Integral { expect, tol }) => {
            let residual = (value - expect).abs();
            checks.push(CheckReport {
                name: "integral".into(),
                lhs: value,
                rhs: *expect,
                residual,
                tolerance: *tol,
                passed: residual <= *tol,
            });
        }
        Some(_) => {
            return Err(ChainError::Schema(
                "transport checks belong to the `flow` subcommand".into(),
            ))
        }
    }
    let passed = checks.iter().all(|c| c.passed);

    let csv = convergence_csv(&rows);
    print!("{csv}");
    println!("value = {value}");
    if let Some(b) = error_bound {
        println!("certified tail <= {b:.6e}");
    }
    println!("converged = {converged} ({diagnostics})");
    for c in &checks {
        println!(
            "check {}: |{} - {}| = {:.3e} (tol {:.1e}) {}",
            c.name,
            c.lhs,
            c.rhs,
            c.residual,
            c.tolerance,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }

    let report = RunReport {
        scenario: path.to_str().map(String::from),
        seed: scn.seed,
        value,
        error_bound,
        converged,
        checks,
        passed,
        diagnostics,
    };
    let csv_dest = out.or_else(|| {
        scn.output
            .as_ref()
            .and_then(|o| o.csv.as_ref())
            .map(PathBuf::from)
    });
    if let Some(p) = csv_dest {
        write_text(&p, &csv)?;
    }
    if let Some(p) = scn.output.as_ref().and_then(|o| o.json.as_ref()) {
        write_text(Path::new(p), &report.to_json()?)?;
    }
    Ok(passed)
}

// ---------------------------------------------------------------------------
// norm
// ---------------------------------------------------------------------------

fn cmd_norm(
    chain_path: Option<PathBuf>,
    scenario_path: Option<PathBuf>,
    r: usize,
    region_path: Option<PathBuf>,
    depth: Option<u32>,
    out: Option<PathBuf>,
) -> Result<bool> {
    let chain: DiracChain = if let Some(p) = chain_path {
        ChainDoc::from_path(&p)?.to_chain()?
    } else if let Some(p) = scenario_path {
        let scn = Scenario::from_path(&p)?;
        let stream = ChainStream::from_spec(&scn.domain)?;
        chainops::apply_pipeline(&scn.pipeline, &stream.chain(depth.unwrap_or(4))?)?
    } else {
        return Err(ChainError::Schema("norm needs --chain or --scenario".into()));
    };
    let region = match region_path {
        Some(p) => Some(region_from_path(&p)?),
        None => None,
    };
    let est = norms::estimate(&chain, r, region.as_ref())?;
    let pieces: Vec<serde_json::Value> = est
        .decomposition
        .iter()
        .map(|p| {
            serde_json::json!({
                "point": p.base.point.iter().copied().collect::<Vec<f64>>(),
                "sym": p.base.sym.iter().map(|&b| b as u32).collect::<Vec<u32>>(),
                "mass": p.base.kv.mass(),
                "steps": p
                    .steps
                    .iter()
                    .map(|s| s.iter().copied().collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
                "absorbed": p.absorbed,
                "cost": p.cost,
            })
        })
        .collect();
    let witness = match &est.witness {
        Some(w) => serde_json::to_value(w).map_err(|e| ChainError::Schema(e.to_string()))?,
        None => serde_json::Value::Null,
    };
    let doc = serde_json::json!({
        "r": est.r,
        "upper": est.upper,
        "lower": est.lower,
        "gap": est.upper - est.lower,
        "decomposition": pieces,
        "witness": witness,
    });
    let text = to_json(&doc)?;
    println!("{text}");
    if let Some(p) = out {
        write_text(&p, &text)?;
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// flow
// ---------------------------------------------------------------------------

fn build_time_form(scn: &Scenario) -> Result<TimeForm> {
    if !scn.time_form.is_empty() {
        TimeForm::new(
            scn.time_form
                .iter()
                .map(|t| (t.tpow, t.form.clone()))
                .collect(),
        )
    } else if let Some(f) = &scn.form {
        Ok(TimeForm::constant(f.clone()))
    } else {
        Err(ChainError::Schema(
            "this check needs a 'form' or a 'time_form'".into(),
        ))
    }
}

fn cmd_flow(
    path: &Path,
    depth: u32,
    depth_time: u32,
    tol_flag: Option<f64>,
    out: Option<PathBuf>,
) -> Result<bool> {
    let scn = Scenario::from_path(path)?;
    let stream = ChainStream::from_spec(&scn.domain)?;
    let field = scn
        .field
        .clone()
        .ok_or_else(|| ChainError::Schema("flow needs a 'field' in the scenario".into()))?;
    let check = scn
        .check
        .clone()
        .ok_or_else(|| ChainError::Schema("flow needs a 'check' in the scenario".into()))?;

    let mut rows: Vec<(u32, f64, f64, f64)> = Vec::new();
    let (rep, tol) = match &check {
        CheckSpec::Ftc { a, b, tol } => {
            let w = scn
                .form
                .clone()
                .ok_or_else(|| ChainError::Schema("'ftc' needs a 'form'".into()))?;
            let mut last = None;
            for m in depth_time.saturating_sub(2)..=depth_time {
                let r = flow::ftc_check(&stream, depth, &field, &w, *a, *b, m)?;
                rows.push((m, r.lhs, r.rhs, r.residual));
                last = Some(r);
            }
            (last.expect("at least one m"), tol_flag.unwrap_or(*tol))
        }
        CheckSpec::StokesEvolving { a, b, tol } => {
            let w = scn
                .form
                .clone()
                .ok_or_else(|| ChainError::Schema("'stokes_evolving' needs a 'form'".into()))?;
            let mut last = None;
            for m in depth_time.saturating_sub(2)..=depth_time {
                let r = flow::stokes_evolving_check(&stream, depth, &field, &w, *a, *b, m)?;
                rows.push((m, r.lhs, r.rhs, r.residual));
                last = Some(r);
            }
            (last.expect("at least one m"), tol_flag.unwrap_or(*tol))
        }
        CheckSpec::Leibniz { t0, h, tol } => {
            let tf = build_time_form(&scn)?;
            let r = flow::leibniz_check(&stream, depth, &field, &tf, *t0, *h)?;
            rows.push((0, r.lhs, r.rhs, r.residual));
            (r, tol_flag.unwrap_or(*tol))
        }
        CheckSpec::Reynolds { t0, h, tol } => {
            let tf = build_time_form(&scn)?;
            let r = flow::reynolds_check(&stream, depth, &field, &tf, *t0, *h)?;
            rows.push((0, r.lhs, r.rhs, r.residual));
            (r, tol_flag.unwrap_or(*tol))
        }
        CheckSpec::Integral { .. } => {
            return Err(ChainError::Schema(
                "'integral' checks belong to the `integrate` subcommand".into(),
            ))
        }
    };
    let passed = rep.residual <= tol;

    println!("{}", to_json(&rep)?);
    println!(
        "check {}: residual {:.3e} (tol {:.1e}) {}",
        rep.check,
        rep.residual,
        tol,
        if passed { "PASS" } else { "FAIL" }
    );

    let csv = flow_csv(&rows);
    let csv_dest = out.or_else(|| {
        scn.output
            .as_ref()
            .and_then(|o| o.csv.as_ref())
            .map(PathBuf::from)
    });
    if let Some(p) = csv_dest {
        write_text(&p, &csv)?;
    }
    if let Some(p) = scn.output.as_ref().and_then(|o| o.json.as_ref()) {
        write_text(Path::new(p), &to_json(&rep)?)?;
    }
    Ok(passed)
}

// ---------------------------------------------------------------------------
// demos
// ---------------------------------------------------------------------------

fn demo_cantor(depth: u32, out: Option<PathBuf>) -> Result<bool> {
    use chaincalc_cli::report::fmt_f64;
    let depth = depth.min(20);
    let scaled = ChainStream::cantor(true);
    let unscaled = ChainStream::cantor(false);
    let x0 = Form::poly_from_terms(1, 0, &[(vec![], vec![1], 1.0)])?;
    let mut csv = String::from("n,boundary_integral,scaled_mass,unscaled_mass,unscaled_exact\n");
    let mut worst = 0.0f64;
    let mut exact = true;
    for n in 0..=depth {
        let chain = scaled.chain(n)?;
        let b = x0.eval_chain(&chainops::boundary(&chain)?)?;
        worst = worst.max((b - 1.0).abs());
        let sm = scaled.level_mass(n)?;
        let um = unscaled.level_mass(n)?;
        let ue = 2f64.powi(n as i32) / (3u64.pow(n) as f64);
        exact &= um.to_bits() == ue.to_bits();
        csv.push_str(&format!(
            "{n},{},{},{},{}\n",
            fmt_f64(b),
            fmt_f64(sm),
            fmt_f64(um),
            fmt_f64(ue)
        ));
    }
    print!("{csv}");
    println!("max |∫_∂Γ x - 1| = {worst:.3e}; unscaled masses exactly (2/3)^n: {exact}");
    if let Some(p) = out {
        write_text(&p, &csv)?;
    }
    Ok(worst <= 1e-12 && exact)
}

fn demo_sierpinski(depth: u32, out: Option<PathBuf>) -> Result<bool> {
    let depth = depth.min(13);
    let gasket = ChainStream::sierpinski();
    // Second moment of the gasket's natural area weighting: the self-similar
    // recursion gives E[x^2] = 5/27 on total weight 1/2, so the limit is 5/54.
    let w = Form::poly_from_terms(2, 2, &[(vec![1, 2], vec![2, 0], 1.0)])?;
    let si = integrate_stream(
        &w,
        &gasket,
        IntegrateOpts {
            j_start: 0,
            j_end: depth,
            tol: None,
        },
    )?;
    let oracle = 5.0 / 54.0;
    let err = (si.value - oracle).abs();
    let mut mass_ok = true;
    for j in 0..=depth {
        mass_ok &= (gasket.level_mass(j)? - 0.5).abs() <= 1e-12;
    }
    let csv = convergence_csv(&si.rows);
    print!("{csv}");
    println!("second moment = {} (limit 5/54, error {err:.3e})", si.value);
    println!("level masses stay at 1/2: {mass_ok}");
    if let Some(p) = out {
        write_text(&p, &csv)?;
    }
    Ok(err <= 1e-4 && mass_ok)
}

fn demo_divergence(depth: u32, out: Option<PathBuf>) -> Result<bool> {
    use chaincalc_cli::report::fmt_f64;
    let depth = depth.min(10);
    let square = ChainStream::cube(&[0.0, 0.0], &[1.0, 1.0])?;
    let field = VectorField::new(vec![
        Poly::monomial(2, &[2, 1], 1.0)?.add(&Poly::monomial(2, &[0, 1], 0.5)?),
        Poly::monomial(2, &[1, 1], 1.0)?
            .add(&Poly::monomial(2, &[0, 2], -1.0)?)
            .add(&Poly::constant(2, 0.3)),
    ])?;
    let flux = Form::constant_blade(2, &[1, 2], 1.0)?.interior(&field)?;
    let div = flux.exterior_d()?;
    let boundary = ChainStream::boundary_of(square.clone())?;
    let mut csv = String::from("j,interior,boundary,residual,certified\n");
    let mut last_resid = f64::INFINITY;
    let mut last_bound = 0.0f64;
    for j in 0..=depth {
        let opts = IntegrateOpts {
            j_start: j,
            j_end: j,
            tol: None,
        };
        let lhs = integrate_stream(&div, &square, opts)?;
        let rhs = integrate_stream(&flux, &boundary, opts)?;
        let (lrow, rrow) = (&lhs.rows[0], &rhs.rows[0]);
        let resid = (lrow.value - rrow.value).abs();
        let bound = lrow.certified_bound.unwrap_or(f64::NAN)
            + rrow.certified_bound.unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{j},{},{},{},{}\n",
            fmt_f64(lrow.value),
            fmt_f64(rrow.value),
            fmt_f64(resid),
            fmt_f64(bound)
        ));
        last_resid = resid;
        last_bound = bound;
    }
    print!("{csv}");
    println!(
        "depth {depth}: |∫ div - ∮ flux| = {last_resid:.3e}, certified {last_bound:.3e}"
    );
    if let Some(p) = out {
        write_text(&p, &csv)?;
    }
    Ok(last_resid.is_finite() && last_bound.is_finite() && last_resid <= last_bound)
}

fn demo_quadrifolium(depth: u32, out: Option<PathBuf>) -> Result<bool> {
    let depth = depth.min(14);
    let tau = std::f64::consts::TAU;
    let base = ChainStream::cube(&[0.0], &[tau])?;
    let leaf = ChainStream::pushforward(SmoothMap::Quadrifolium, base)?;
    // Signed area via (x dy - y dx) / 2; the four petals sum to pi/2.
    let w = Form::poly_from_terms(
        2,
        1,
        &[(vec![2], vec![1, 0], 0.5), (vec![1], vec![0, 1], -0.5)],
    )?;
    let si = integrate_stream(
        &w,
        &leaf,
        IntegrateOpts {
            j_start: 0,
            j_end: depth,
            tol: None,
        },
    )?;
    let oracle = std::f64::consts::PI / 2.0;
    let err = (si.value - oracle).abs();
    let csv = convergence_csv(&si.rows);
    print!("{csv}");
    println!("signed area = {} (limit pi/2, error {err:.3e})", si.value);
    if let Some(p) = out {
        write_text(&p, &csv)?;
    }
    Ok(err <= 1e-4)
}
