//! Deterministic verification suites.
//!
//! Each suite checks one family of identities or convergence statements at
//! fixed tolerances, using seeded generators so reruns are bit-reproducible.
//! The `acceptance` integration test and the `verify` subcommand both run
//! these functions; a suite's `passed` flag is the single source of truth.

use crate::scenario::DEFAULT_SEED;
use chaincalc_core::chain::SymMono;
use chaincalc_core::multivec::{dot, norm, vecn};
use chaincalc_core::rep::integrate_stream;
use chaincalc_core::{
    chainops, flow, norms, ChainElement, ChainError, ChainStream, DiracChain, Form,
    IntegrateOpts, KVector, OpenRegion, Poly, Result, SmoothMap, TimeForm, VectorField,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

/// Options shared by every suite; `None` keeps the suite's defaults.
#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seed: u64,
    pub cases: Option<usize>,
    pub n: Option<usize>,
    pub grade: Option<usize>,
    pub tol: Option<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            cases: None,
            n: None,
            grade: None,
            tol: None,
        }
    }
}

/// Result of one suite run.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub criterion: usize,
    pub cases: usize,
    /// Largest residual (or largest inequality violation, for bound suites).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Suites in criterion order: (name, criterion number, summary).
pub fn catalog() -> [(&'static str, usize, &'static str); 11] {
    [
        ("stokes", 1, "exact Stokes on seeded random Dirac chains"),
        ("duality", 2, "ten operator dualities plus Laplace powers"),
        ("algebra", 3, "graded algebra: CAR, Cartan, involutions"),
        ("field_commutators", 4, "vector-field commutator identities"),
        ("cube_rate", 5, "cube-stream refinement-rate bound"),
        ("riemann", 6, "stream integrals against closed forms"),
        ("cantor", 7, "Cantor boundary integral and stage masses"),
        ("div_curl", 8, "two-sided divergence and curl theorems"),
        ("flow", 9, "transport theorems along flows"),
        ("norms", 10, "norm sandwich and monotonicity"),
        ("pushforward", 11, "change of variables and the circle chain"),
    ]
}

pub fn suite_names() -> Vec<&'static str> {
    catalog().iter().map(|(n, _, _)| *n).collect()
}

pub fn run_suite(name: &str, cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    match name {
        "stokes" => suite_stokes(cfg),
        "duality" => suite_duality(cfg),
        "algebra" => suite_algebra(cfg),
        "field_commutators" => suite_field_commutators(cfg),
        "cube_rate" => suite_cube_rate(cfg),
        "riemann" => suite_riemann(cfg),
        "cantor" => suite_cantor(cfg),
        "div_curl" => suite_div_curl(cfg),
        "flow" => suite_flow(cfg),
        "norms" => suite_norms(cfg),
        "pushforward" => suite_pushforward(cfg),
        other => Err(ChainError::Schema(format!(
            "unknown suite '{other}' (see `verify --list`)"
        ))),
    }
}

/// Expands a filter list to suite names, erroring on unknown names.
pub fn resolve_filters(filters: &[String]) -> Result<Vec<&'static str>> {
    let names = suite_names();
    if filters.is_empty() {
        return Ok(names);
    }
    let mut out = Vec::new();
    for f in filters {
        match names.iter().find(|s| **s == f.as_str()) {
            Some(nm) => out.push(*nm),
            None => {
                return Err(ChainError::Schema(format!(
                    "unknown suite '{f}' (see `verify --list`)"
                )))
            }
        }
    }
    Ok(out)
}

/// Worker cap from `CHAINCALC_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("CHAINCALC_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .map(|t| t.clamp(1, 64))
        .unwrap_or(1)
}

/// Runs the selected suites; workers are capped by `CHAINCALC_THREADS` and
/// the report is assembled in catalog order regardless of finish order.
pub fn run_suites(filters: &[String], cfg: &SuiteConfig) -> Result<Vec<SuiteOutcome>> {
    let names = resolve_filters(filters)?;
    let threads = threads_from_env().min(names.len().max(1));
    if threads <= 1 {
        return names.iter().map(|n| run_suite(n, cfg)).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = std::sync::mpsc::channel::<(usize, Result<SuiteOutcome>)>();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let tx = tx.clone();
            let next = &next;
            let names = &names;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= names.len() {
                    break;
                }
                let _ = tx.send((i, run_suite(names[i], cfg)));
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<Result<SuiteOutcome>>> = names.iter().map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    slots
        .into_iter()
        .map(|s| s.expect("every suite reports"))
        .collect()
}

// ---------------------------------------------------------------------------
// Seeded generators
// ---------------------------------------------------------------------------

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..=1.0)
}

fn nonzero_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x = unit(rng);
        if x.abs() > 0.05 {
            return x;
        }
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| unit(rng)).collect()
}

fn random_kv(rng: &mut ChaCha8Rng, n: usize, grade: usize) -> KVector {
    if grade == 0 {
        return KVector::scalar(n, nonzero_unit(rng)).unwrap();
    }
    loop {
        let vs: Vec<Vec<f64>> = (0..grade).map(|_| random_vec(rng, n)).collect();
        let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let kv = KVector::simple(n, &refs).unwrap();
        if kv.mass() > 1e-3 {
            return kv;
        }
    }
}

fn random_element(rng: &mut ChaCha8Rng, n: usize, grade: usize, order: usize) -> ChainElement {
    let point = vecn(&random_vec(rng, n));
    let sym: SymMono = (0..order).map(|_| rng.gen_range(0..n) as u8).collect();
    ChainElement::new(point, sym, random_kv(rng, n, grade))
}

fn random_chain(rng: &mut ChaCha8Rng, n: usize, grade: usize, max_order: usize) -> DiracChain {
    let count = rng.gen_range(1..=3);
    let elems = (0..count)
        .map(|_| {
            let order = if max_order == 0 {
                0
            } else {
                rng.gen_range(0..=max_order)
            };
            random_element(rng, n, grade, order)
        })
        .collect();
    DiracChain::new(n, elems).unwrap()
}

/// Sorted 1-based distinct indices, `k` of them out of `1..=n`.
fn subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (1..=n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        all.swap(i, j);
    }
    let mut out = all[..k].to_vec();
    out.sort_unstable();
    out
}

fn random_form(rng: &mut ChaCha8Rng, n: usize, grade: usize, nterms: usize, max_deg: u8) -> Form {
    let mut terms = Vec::with_capacity(nterms);
    for _ in 0..nterms {
        let idx = subset(rng, n, grade);
        let exps: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=max_deg)).collect();
        terms.push((idx, exps, 1.5 * unit(rng)));
    }
    Form::poly_from_terms(n, grade, &terms).unwrap()
}

fn random_poly(rng: &mut ChaCha8Rng, n: usize, max_deg: u8) -> Poly {
    let mut p = Poly::constant(n, unit(rng));
    for _ in 0..2 {
        let exps: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=max_deg)).collect();
        p = p.add(&Poly::monomial(n, &exps, unit(rng)).unwrap());
    }
    p
}

fn random_field(rng: &mut ChaCha8Rng, n: usize, max_deg: u8) -> VectorField {
    VectorField::new((0..n).map(|_| random_poly(rng, n, max_deg)).collect()).unwrap()
}

fn discrepancy(a: &DiracChain, b: &DiracChain) -> Result<f64> {
    Ok(a.sub_chain(b)?.total_mass())
}

fn outcome(
    name: &str,
    criterion: usize,
    cases: usize,
    worst: f64,
    tolerance: f64,
    passed: bool,
    detail: String,
    started: Instant,
) -> SuiteOutcome {
    SuiteOutcome {
        name: name.to_string(),
        criterion,
        cases,
        worst,
        tolerance,
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn pick_dim(cfg: &SuiteConfig, i: usize, max_n: usize) -> usize {
    match cfg.n {
        Some(n) => n.clamp(1, max_n),
        None => 1 + (i % max_n),
    }
}

fn pick_grade(cfg: &SuiteConfig, i: usize, lo: usize, hi: usize) -> usize {
    match cfg.grade {
        Some(g) => g.clamp(lo, hi),
        None => lo + (i % (hi - lo + 1)),
    }
}

// ---------------------------------------------------------------------------
// 1. Stokes
// ---------------------------------------------------------------------------

fn suite_stokes(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let tol = cfg.tol.unwrap_or(1e-10);
    let total = cfg.cases.unwrap_or(200);
    let mut rng = rng_for(cfg.seed, 1);
    let mut worst = 0.0f64;
    for i in 0..total {
        let mut n = pick_dim(cfg, i, 4);
        if let Some(g) = cfg.grade {
            n = n.max(g.max(1));
        }
        let k = pick_grade(cfg, i, 1, n);
        let order = i % 3;
        let a = random_chain(&mut rng, n, k, order);
        let w = random_form(&mut rng, n, k - 1, 2, 2);
        let lhs = w.eval_chain(&chainops::boundary(&a)?)?;
        let rhs = w.exterior_d()?.eval_chain(&a)?;
        worst = worst.max((lhs - rhs).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    let passed = worst <= tol && secs < 5.0;
    let detail = format!("worst |w(dJ) - dw(J)| = {worst:.3e} over {total} chains in {secs:.2}s");
    Ok(outcome("stokes", 1, total, worst, tol, passed, detail, started))
}

// ---------------------------------------------------------------------------
// 2. Dualities
// ---------------------------------------------------------------------------

/// Codifferential consistent with the chain coboundary: `star d star`.
fn codifferential(w: &Form) -> Result<Form> {
    w.hodge()?.exterior_d()?.hodge()
}

/// Form Laplacian `delta d + d delta`, with the degenerate-grade terms
/// dropped (d of a top form and delta of a 0-form vanish).
fn laplace_dual(w: &Form) -> Result<Form> {
    let n = w.n();
    let g = w.grade();
    let dd = if g < n {
        Some(codifferential(&w.exterior_d()?)?)
    } else {
        None
    };
    let cd = if g > 0 {
        Some(codifferential(w)?.exterior_d()?)
    } else {
        None
    };
    match (dd, cd) {
        (Some(x), Some(y)) => x.add_form(&y),
        (Some(x), None) => Ok(x),
        (None, Some(y)) => Ok(y),
        (None, None) => Err(ChainError::Grade("Laplacian needs n >= 1".into())),
    }
}

fn suite_duality(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let tol = cfg.tol.unwrap_or(1e-10);
    let tol_pow = cfg.tol.unwrap_or(1e-9);
    let per = cfg.cases.unwrap_or(20);
    let mut rng = rng_for(cfg.seed, 2);
    let names = [
        "extrusion/interior",
        "retraction/flat-wedge",
        "prederivative/Lie",
        "boundary/exterior-d",
        "perp/Hodge",
        "coboundary/codifferential",
        "Laplace/Laplacian",
        "dir-boundary/dir-coboundary",
        "multiplication/multiplication",
        "pushforward/pullback",
    ];
    let mut worst = 0.0f64;
    let mut worst_name = names[0];
    let mut cases = 0usize;
    for (d, dname) in names.iter().enumerate() {
        for i in 0..per {
            let n = match cfg.n {
                Some(n) => n.clamp(1, 4),
                None => 2 + (i % 2),
            };
            let (kmin, kmax) = match d {
                0 | 5 => (0, n - 1),
                1 | 3 | 7 => (1, n),
                _ => (0, n),
            };
            if kmin > kmax {
                continue;
            }
            let k = pick_grade(cfg, i, kmin, kmax);
            let order = if d == 9 { 0 } else { i % 3 };
            let a = random_chain(&mut rng, n, k, order);
            let r = match d {
                0 => {
                    let v = random_field(&mut rng, n, 2);
                    let w = random_form(&mut rng, n, k + 1, 2, 2);
                    let lhs = w.eval_chain(&chainops::extrude_field(&a, &v)?)?;
                    let rhs = w.interior(&v)?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                1 => {
                    let v = random_field(&mut rng, n, 2);
                    let w = random_form(&mut rng, n, k - 1, 2, 2);
                    let lhs = w.eval_chain(&chainops::retract_field(&a, &v)?)?;
                    let rhs = w.flat_wedge(&v)?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                2 => {
                    let v = random_field(&mut rng, n, 2);
                    let w = random_form(&mut rng, n, k, 2, 2);
                    let lhs = w.eval_chain(&chainops::prederivative_field(&a, &v)?)?;
                    let rhs = w.lie(&v)?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                3 => {
                    let w = random_form(&mut rng, n, k - 1, 2, 2);
                    let lhs = w.eval_chain(&chainops::boundary(&a)?)?;
                    let rhs = w.exterior_d()?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                4 => {
                    let w = random_form(&mut rng, n, n - k, 2, 2);
                    let lhs = w.eval_chain(&chainops::perp(&a)?)?;
                    let rhs = w.hodge()?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                5 => {
                    let w = random_form(&mut rng, n, k + 1, 2, 2);
                    let lhs = w.eval_chain(&chainops::coboundary(&a)?)?;
                    let rhs = codifferential(&w)?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                6 => {
                    let w = random_form(&mut rng, n, k, 2, 2);
                    let lhs = w.eval_chain(&chainops::laplace(&a)?)?;
                    let rhs = laplace_dual(&w)?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                7 => {
                    let v = random_vec(&mut rng, n);
                    let cf = VectorField::constant(&v)?;
                    let w = random_form(&mut rng, n, k - 1, 2, 2);
                    let lhs = w.eval_chain(&chainops::dir_boundary(&a, &v)?)?;
                    let rhs = w.lie(&cf)?.flat_wedge(&cf)?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                8 => {
                    let f = random_poly(&mut rng, n, 2);
                    let w = random_form(&mut rng, n, k, 2, 2);
                    let lhs = w.eval_chain(&chainops::multiply_poly(&a, &f)?)?;
                    let rhs = w.multiply_poly(&f)?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                9 => {
                    let map = SmoothMap::Poly {
                        comps: (0..n).map(|_| random_poly(&mut rng, n, 2)).collect(),
                        n_in: n,
                    };
                    let w = random_form(&mut rng, n, k, 2, 2);
                    let lhs = w.eval_chain(&chainops::pushforward(&map, &a)?)?;
                    let rhs = w.pullback(&map)?.eval_chain(&a)?;
                    (lhs - rhs).abs()
                }
                _ => unreachable!(),
            };
            if r > worst {
                worst = r;
                worst_name = dname;
            }
            cases += 1;
        }
    }
    // Laplace powers: square the operator on both sides.
    let mut worst_pow = 0.0f64;
    for i in 0..per {
        let n = 2 + (i % 2);
        let k = i % (n + 1);
        let a = random_chain(&mut rng, n, k, i % 3);
        let w = random_form(&mut rng, n, k, 2, 2);
        let lhs = w.eval_chain(&chainops::laplace(&chainops::laplace(&a)?)?)?;
        let rhs = laplace_dual(&laplace_dual(&w)?)?.eval_chain(&a)?;
        worst_pow = worst_pow.max((lhs - rhs).abs());
        cases += 1;
    }
    let passed = worst <= tol && worst_pow <= tol_pow;
    let detail = format!(
        "worst duality residual {worst:.3e} ({worst_name}); squared-Laplace residual {worst_pow:.3e}"
    );
    Ok(outcome("duality", 2, cases, worst, tol, passed, detail, started))
}

// ---------------------------------------------------------------------------
// 3. Graded algebra
// ---------------------------------------------------------------------------

fn suite_algebra(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let tol = cfg.tol.unwrap_or(1e-12);
    let total = cfg.cases.unwrap_or(500);
    let mut rng = rng_for(cfg.seed, 3);
    let mut worst = 0.0f64;
    let mut worst_id = "";
    let track = |r: f64, id: &'static str, worst: &mut f64, worst_id: &mut &'static str| {
        if r > *worst {
            *worst = r;
            *worst_id = id;
        }
    };
    for i in 0..total {
        let n = pick_dim(cfg, i, 4);
        let k = pick_grade(cfg, i, 0, n);
        let a = random_chain(&mut rng, n, k, i % 3);
        let v = random_vec(&mut rng, n);
        let w = random_vec(&mut rng, n);

        let r = chainops::boundary(&chainops::boundary(&a)?)?.total_mass();
        track(r, "dd = 0", &mut worst, &mut worst_id);

        let lhs = chainops::boundary(&chainops::extrude(&a, &v)?)?
            .add_chain(&chainops::extrude(&chainops::boundary(&a)?, &v)?)?;
        let r = discrepancy(&lhs, &chainops::prederivative(&a, &v)?)?;
        track(r, "{d,E_v} = P_v", &mut worst, &mut worst_id);

        let pv_pw = chainops::prederivative(&chainops::prederivative(&a, &w)?, &v)?;
        let pw_pv = chainops::prederivative(&chainops::prederivative(&a, &v)?, &w)?;
        let r = discrepancy(&pv_pw, &pw_pv)?;
        track(r, "[P_v,P_w] = 0", &mut worst, &mut worst_id);

        let ev_pw = chainops::extrude(&chainops::prederivative(&a, &w)?, &v)?;
        let pw_ev = chainops::prederivative(&chainops::extrude(&a, &v)?, &w)?;
        let r = discrepancy(&ev_pw, &pw_ev)?;
        track(r, "[E_v,P_w] = 0", &mut worst, &mut worst_id);

        let et_pw = chainops::retract(&chainops::prederivative(&a, &w)?, &v)?;
        let pw_et = chainops::prederivative(&chainops::retract(&a, &v)?, &w)?;
        let r = discrepancy(&et_pw, &pw_et)?;
        track(r, "[E_v†,P_w] = 0", &mut worst, &mut worst_id);

        let car = chainops::retract(&chainops::extrude(&a, &v)?, &w)?
            .add_chain(&chainops::extrude(&chainops::retract(&a, &w)?, &v)?)?;
        let r = discrepancy(&car, &a.scale(dot(&v, &w)))?;
        track(r, "{E_v,E_w†} = <v,w>I", &mut worst, &mut worst_id);

        let cv2 = chainops::clifford(&chainops::clifford(&a, &v)?, &v)?;
        let r = discrepancy(&cv2, &a.scale(dot(&v, &v)))?;
        track(r, "C_v^2 = <v,v>I", &mut worst, &mut worst_id);

        let pp = chainops::perp(&chainops::perp(&a)?)?;
        let sign = if (k * (n - k)) % 2 == 0 { 1.0 } else { -1.0 };
        let r = discrepancy(&pp, &a.scale(sign))?;
        track(r, "perp^2 = ±I", &mut worst, &mut worst_id);
    }
    let passed = worst <= tol;
    let detail = format!("worst canonical discrepancy {worst:.3e} ({worst_id}) over {total} chains");
    Ok(outcome("algebra", 3, total, worst, tol, passed, detail, started))
}

// ---------------------------------------------------------------------------
// 4. Vector-field commutators
// ---------------------------------------------------------------------------

fn rigid_field(n: usize) -> VectorField {
    if n == 2 {
        VectorField::rotation2()
    } else {
        // Rotation about the z-axis in R^3.
        VectorField::new(vec![
            Poly::monomial(3, &[0, 1, 0], -1.0).unwrap(),
            Poly::monomial(3, &[1, 0, 0], 1.0).unwrap(),
            Poly::constant(3, 0.0),
        ])
        .unwrap()
    }
}

fn suite_field_commutators(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let tol = cfg.tol.unwrap_or(1e-8);
    let per = cfg.cases.unwrap_or(25);
    let mut rng = rng_for(cfg.seed, 4);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let dims: Vec<usize> = match cfg.n {
        Some(n) => vec![n.clamp(2, 3)],
        None => vec![2, 3],
    };
    for &n in &dims {
        for i in 0..per {
            let k = pick_grade(cfg, i, 1, n - 1);
            let a = random_chain(&mut rng, n, k, 0);
            let v1 = random_field(&mut rng, n, 2);
            let v2 = random_field(&mut rng, n, 2);
            let bracket = v1.bracket(&v2)?;

            // [P_V1, P_V2] = P_[V2,V1]: preduality reverses composition.
            let wp = random_form(&mut rng, n, k, 2, 2);
            let p12 =
                chainops::prederivative_field(&chainops::prederivative_field(&a, &v2)?, &v1)?;
            let p21 =
                chainops::prederivative_field(&chainops::prederivative_field(&a, &v1)?, &v2)?;
            let lhs = p12.sub_chain(&p21)?;
            let rhs = chainops::prederivative_field(&a, &bracket.scale_field(-1.0))?;
            worst = worst.max((wp.eval_chain(&lhs)? - wp.eval_chain(&rhs)?).abs());

            // [E_V2, P_V1] = E_[V1,V2].
            let we = random_form(&mut rng, n, k + 1, 2, 2);
            let e2p1 = chainops::extrude_field(&chainops::prederivative_field(&a, &v1)?, &v2)?;
            let p1e2 = chainops::prederivative_field(&chainops::extrude_field(&a, &v2)?, &v1)?;
            let lhs = e2p1.sub_chain(&p1e2)?;
            let rhs = chainops::extrude_field(&a, &bracket)?;
            worst = worst.max((we.eval_chain(&lhs)? - we.eval_chain(&rhs)?).abs());

            // [E_V2†, P_V1] = E† of [V1,V2] + (DV1 + DV1^T) V2.
            let wt = random_form(&mut rng, n, k - 1, 2, 2);
            let t2p1 = chainops::retract_field(&chainops::prederivative_field(&a, &v1)?, &v2)?;
            let p1t2 = chainops::prederivative_field(&chainops::retract_field(&a, &v2)?, &v1)?;
            let lhs = t2p1.sub_chain(&p1t2)?;
            let corrected = bracket.add_field(&v1.symmetrized_jacobian_apply(&v2)?)?;
            let rhs = chainops::retract_field(&a, &corrected)?;
            worst = worst.max((wt.eval_chain(&lhs)? - wt.eval_chain(&rhs)?).abs());

            // Rigid V1: the metric correction vanishes and the literal
            // retraction identity holds.
            let rot = rigid_field(n);
            let t2p1 = chainops::retract_field(&chainops::prederivative_field(&a, &rot)?, &v2)?;
            let p1t2 = chainops::prederivative_field(&chainops::retract_field(&a, &v2)?, &rot)?;
            let lhs = t2p1.sub_chain(&p1t2)?;
            let rhs = chainops::retract_field(&a, &rot.bracket(&v2)?)?;
            worst = worst.max((wt.eval_chain(&lhs)? - wt.eval_chain(&rhs)?).abs());

            cases += 4;
        }
    }
    let passed = worst <= tol;
    let detail = format!(
        "worst paired commutator residual {worst:.3e} over {cases} identities (n = 2, 3)"
    );
    Ok(outcome(
        "field_commutators",
        4,
        cases,
        worst,
        tol,
        passed,
        detail,
        started,
    ))
}

// ---------------------------------------------------------------------------
// 5. Cube refinement rate
// ---------------------------------------------------------------------------

fn suite_cube_rate(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let square = ChainStream::cube(&[0.0, 0.0], &[1.0, 1.0])?;
    let cube = ChainStream::cube(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0])?;
    let jmax = cfg.cases.unwrap_or(8).clamp(1, 8) as u32;
    let mut worst_ratio = 0.0f64;
    let mut cases = 0usize;
    let mut lines = Vec::new();
    for (label, stream) in [("square", &square), ("cube", &cube)] {
        for j in 1..=jmax {
            let ub = stream.difference_norm_upper(j, 1)?;
            let bound = 2f64.powi(1 - j as i32);
            let ratio = ub / bound;
            if ratio > worst_ratio {
                worst_ratio = ratio;
                lines.clear();
                lines.push(format!("{label} j={j}: {ub:.3e} vs 2^{}", 1 - j as i32));
            }
            cases += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let passed = worst_ratio <= 1.0 && secs < 30.0;
    let detail = format!(
        "worst normUB(P_j - P_(j+1), 1) / 2^(1-j) = {worst_ratio:.4} ({}) in {secs:.1}s",
        lines.first().map(String::as_str).unwrap_or("-")
    );
    Ok(outcome(
        "cube_rate", 5, cases, worst_ratio, 1.0, passed, detail, started,
    ))
}

// ---------------------------------------------------------------------------
// 6. Riemann agreement
// ---------------------------------------------------------------------------

fn suite_riemann(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let tol = cfg.tol.unwrap_or(1e-6);
    let mut rng = rng_for(cfg.seed, 6);
    let square = ChainStream::cube(&[0.0, 0.0], &[1.0, 1.0])?;
    let cube = ChainStream::cube(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0])?;
    let mut worst = 0.0f64;
    let mut max_tail = 0.0f64;
    let mut missing_tail = false;
    let mut cases = 0usize;
    for (n, stream, j_end, max_deg) in [(2usize, &square, 10u32, 4u8), (3, &cube, 7, 3)] {
        for _ in 0..5 {
            let idx: Vec<usize> = (1..=n).collect();
            let mut terms = Vec::new();
            let mut closed = 0.0f64;
            for _ in 0..2 {
                let exps: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=max_deg)).collect();
                let c = 1.5 * unit(&mut rng);
                closed += c
                    / exps
                        .iter()
                        .map(|&e| (e as f64) + 1.0)
                        .product::<f64>();
                terms.push((idx.clone(), exps, c));
            }
            let w = Form::poly_from_terms(n, n, &terms)?;
            let got = integrate_stream(
                &w,
                stream,
                IntegrateOpts {
                    j_start: 0,
                    j_end,
                    tol: None,
                },
            )?;
            worst = worst.max((got.value - closed).abs());
            match got.error_bound {
                Some(b) => max_tail = max_tail.max(b),
                None => missing_tail = true,
            }
            cases += 1;
        }
    }
    let passed = worst <= tol && !missing_tail;
    let detail = format!(
        "worst |stream - closed form| = {worst:.3e}; largest certified tail {max_tail:.3e}"
    );
    Ok(outcome("riemann", 6, cases, worst, tol, passed, detail, started))
}

// ---------------------------------------------------------------------------
// 7. Cantor
// ---------------------------------------------------------------------------

fn suite_cantor(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let tol = cfg.tol.unwrap_or(1e-12);
    let x0 = Form::poly_from_terms(1, 0, &[(vec![], vec![1], 1.0)])?;
    let scaled = ChainStream::cantor(true);
    let unscaled = ChainStream::cantor(false);
    let mut worst = 0.0f64;
    let mut exact_masses = true;
    let stages = cfg.cases.unwrap_or(21).clamp(1, 21) as u32;
    for stage in 0..stages {
        let chain = scaled.chain(stage)?;
        let bd = chainops::boundary(&chain)?;
        let v = x0.eval_chain(&bd)?;
        worst = worst.max((v - 1.0).abs());
        let mass = unscaled.level_mass(stage)?;
        let exact = 2f64.powi(stage as i32) / (3u64.pow(stage) as f64);
        if mass.to_bits() != exact.to_bits() {
            exact_masses = false;
        }
    }
    let passed = worst <= tol && exact_masses;
    let detail = format!(
        "worst |∫_∂Γ x - 1| = {worst:.3e} over stages 0..{}; unscaled masses bit-equal to (2/3)^n: {exact_masses}",
        stages - 1
    );
    Ok(outcome(
        "cantor",
        7,
        stages as usize,
        worst,
        tol,
        passed,
        detail,
        started,
    ))
}

// ---------------------------------------------------------------------------
// 8. Divergence and curl
// ---------------------------------------------------------------------------

struct TwoSided {
    label: &'static str,
    residual: f64,
    bound: f64,
}

fn two_sided(label: &'static str, surface: &ChainStream, w: &Form, j: u32) -> Result<TwoSided> {
    let opts = IntegrateOpts {
        j_start: j,
        j_end: j,
        tol: None,
    };
    let lhs = integrate_stream(&w.exterior_d()?, surface, opts)?;
    let boundary = ChainStream::boundary_of(surface.clone())?;
    let rhs = integrate_stream(w, &boundary, opts)?;
    let (lrow, rrow) = (&lhs.rows[0], &rhs.rows[0]);
    let bound = match (lrow.certified_bound, rrow.certified_bound) {
        (Some(a), Some(b)) => a + b,
        _ => {
            return Err(ChainError::Numerical(format!(
                "{label}: missing certified bound"
            )))
        }
    };
    Ok(TwoSided {
        label,
        residual: (lrow.value - rrow.value).abs(),
        bound,
    })
}

fn suite_div_curl(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let tol = cfg.tol.unwrap_or(1e-4);
    let j = 9;
    let square = ChainStream::cube(&[0.0, 0.0], &[1.0, 1.0])?;
    let cube = ChainStream::cube(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0])?;
    let face = ChainStream::cell(
        &[0.0, 0.0, 0.0],
        &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
    )?;

    // Divergence on the square: flux form of V = (x^2 y + y/2, x y - y^2 + 0.3).
    let v2 = VectorField::new(vec![
        Poly::monomial(2, &[2, 1], 1.0)?.add(&Poly::monomial(2, &[0, 1], 0.5)?),
        Poly::monomial(2, &[1, 1], 1.0)?
            .add(&Poly::monomial(2, &[0, 2], -1.0)?)
            .add(&Poly::constant(2, 0.3)),
    ])?;
    let flux2 = Form::constant_blade(2, &[1, 2], 1.0)?.interior(&v2)?;

    // Green's theorem on the square.
    let green = Form::poly_from_terms(
        2,
        1,
        &[
            (vec![1], vec![1, 2], 1.0),
            (vec![2], vec![3, 0], 1.0),
            (vec![2], vec![0, 1], -1.0),
        ],
    )?;

    // Divergence on the cube: flux form of V = (x^2 y, y z, x z - z^2).
    let v3 = VectorField::new(vec![
        Poly::monomial(3, &[2, 1, 0], 1.0)?,
        Poly::monomial(3, &[0, 1, 1], 1.0)?,
        Poly::monomial(3, &[1, 0, 1], 1.0)?.add(&Poly::monomial(3, &[0, 0, 2], -1.0)?),
    ])?;
    let flux3 = Form::constant_blade(3, &[1, 2, 3], 1.0)?.interior(&v3)?;

    // Kelvin–Stokes on a face of the cube.
    let curl3 = Form::poly_from_terms(
        3,
        1,
        &[
            (vec![1], vec![0, 1, 1], 1.0),
            (vec![2], vec![2, 0, 0], 1.0),
            (vec![3], vec![1, 1, 0], 1.0),
        ],
    )?;

    let checks = [
        two_sided("divergence/square", &square, &flux2, j)?,
        two_sided("curl/square", &square, &green, j)?,
        two_sided("divergence/cube", &cube, &flux3, j)?,
        two_sided("curl/cube-face", &face, &curl3, j)?,
    ];
    let mut worst = 0.0f64;
    let mut passed = true;
    let mut lines = Vec::new();
    for c in &checks {
        worst = worst.max(c.residual);
        passed &= c.residual <= tol && c.residual <= c.bound;
        lines.push(format!(
            "{}: {:.3e} (certified {:.3e})",
            c.label, c.residual, c.bound
        ));
    }
    let detail = lines.join("; ");
    Ok(outcome(
        "div_curl",
        8,
        checks.len(),
        worst,
        tol,
        passed,
        detail,
        started,
    ))
}

// ---------------------------------------------------------------------------
// 9. Flows
// ---------------------------------------------------------------------------

fn suite_flow(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let ftc_tol = cfg.tol.unwrap_or(1e-4);
    let rotation = VectorField::rotation2();
    let dilation = VectorField::dilation(2);
    let segment = ChainStream::cell(&[0.2, -0.1], &[vec![0.8, 0.5]])?;
    let square = ChainStream::cube(&[0.0, 0.0], &[1.0, 1.0])?;
    let seg_form = Form::poly_from_terms(2, 1, &[(vec![1], vec![2, 1], 0.7), (vec![2], vec![1, 1], -0.4)])?;
    let sq_form = Form::poly_from_terms(2, 2, &[(vec![1, 2], vec![2, 1], 1.0), (vec![1, 2], vec![0, 0], 0.5)])?;
    let (a, b) = (0.0, 0.5);
    let (space_depth, time_depth) = (8u32, 10u32);

    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (fname, field) in [("rotation", &rotation), ("dilation", &dilation)] {
        for (cname, stream, w) in [("segment", &segment, &seg_form), ("square", &square, &sq_form)]
        {
            let rep = flow::ftc_check(stream, space_depth, field, w, a, b, time_depth)?;
            worst = worst.max(rep.residual);
            lines.push(format!("ftc {fname}/{cname} {:.2e}", rep.residual));
        }
    }

    // Residual reduction per time-depth increment on the rotating segment.
    let mut min_ratio = f64::INFINITY;
    let mut prev: Option<f64> = None;
    for m in 5..=9 {
        let r = flow::ftc_check(&segment, space_depth, &rotation, &seg_form, 0.0, 1.0, m)?.residual;
        if let Some(p) = prev {
            min_ratio = min_ratio.min(p / r);
        }
        prev = Some(r);
    }

    let w1 = Form::poly_from_terms(2, 1, &[(vec![1], vec![1, 1], 1.0), (vec![2], vec![2, 0], -0.5)])?;
    let st = flow::stokes_evolving_check(&square, space_depth, &rotation, &w1, a, b, time_depth)?;

    let area = Form::constant_blade(2, &[1, 2], 1.0)?;
    let rey = flow::reynolds_check(
        &square,
        space_depth,
        &dilation,
        &TimeForm::constant(area),
        0.25,
        1e-3,
    )?;
    let oracle = 2.0 * 0.5f64.exp();
    let rey_oracle_err = (rey.lhs - oracle).abs();

    let passed = worst <= ftc_tol
        && min_ratio >= 3.5
        && st.residual <= 1e-3
        && rey.residual <= 1e-4
        && rey_oracle_err <= 1e-4;
    let detail = format!(
        "{}; min m-refinement ratio {min_ratio:.2}; stokes-evolving {:.2e}; reynolds {:.2e} (oracle gap {:.2e})",
        lines.join(", "),
        st.residual,
        rey.residual,
        rey_oracle_err
    );
    Ok(outcome("flow", 9, 4 + 5 + 2, worst, ftc_tol, passed, detail, started))
}

// ---------------------------------------------------------------------------
// 10. Norms
// ---------------------------------------------------------------------------

fn suite_norms(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let total = cfg.cases.unwrap_or(200);
    let mut rng = rng_for(cfg.seed, 10);
    let mut worst = 0.0f64; // largest inequality violation; 0 when all hold
    let mut worst_id = "none";
    let track = |v: f64, id: &'static str, worst: &mut f64, worst_id: &mut &'static str| {
        if v > *worst {
            *worst = v;
            *worst_id = id;
        }
    };
    for i in 0..total {
        let n = pick_dim(cfg, i, 3);
        let k = pick_grade(cfg, i, 0, n);
        let a = random_chain(&mut rng, n, k, i % 2);
        let r0 = a.max_order();

        let mut prev_upper: Option<f64> = None;
        for r in r0..=3 {
            let est = norms::estimate(&a, r, None)?;
            track(est.lower - est.upper, "lower <= upper", &mut worst, &mut worst_id);
            if let Some(p) = prev_upper {
                track(est.upper - p, "upper decreasing in r", &mut worst, &mut worst_id);
            }
            prev_upper = Some(est.upper);
        }

        let v: Vec<f64> = random_vec(&mut rng, n).iter().map(|x| 0.5 * x).collect();
        let d = a.translate(&v)?.sub_chain(&a)?;
        for r in r0..=2 {
            let lhs = norms::norm_upper(&d, r + 1, None)?;
            let rhs = norm(&v) * norms::norm_upper(&a, r, None)? + 1e-12;
            track(lhs - rhs, "translation inequality", &mut worst, &mut worst_id);
        }

        let (lo, hi) = a.bbox().expect("random chains are nonzero");
        let boxed = |pad: f64| OpenRegion::Box {
            lo: lo.iter().map(|x| x - pad).collect(),
            hi: hi.iter().map(|x| x + pad).collect(),
        };
        let (u1, u2) = (boxed(0.5), boxed(1.5));
        let r = r0.max(1);
        let n1 = norms::norm_upper(&a, r, Some(&u1))?;
        let n2 = norms::norm_upper(&a, r, Some(&u2))?;
        track(n2 - n1, "open-set monotonicity", &mut worst, &mut worst_id);
    }
    let worst = worst.max(0.0);
    let passed = worst <= 0.0;
    let detail = format!(
        "largest inequality violation {worst:.3e} ({worst_id}) over {total} chains"
    );
    Ok(outcome("norms", 10, total, worst, 0.0, passed, detail, started))
}

// ---------------------------------------------------------------------------
// 11. Pushforward / change of variables
// ---------------------------------------------------------------------------

fn suite_pushforward(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let started = Instant::now();
    let tol = cfg.tol.unwrap_or(1e-10);
    let total = cfg.cases.unwrap_or(50);
    let mut rng = rng_for(cfg.seed, 11);
    let mut worst = 0.0f64;
    for i in 0..total {
        let n = match cfg.n {
            Some(n) => n.clamp(1, 4),
            None => 2 + (i % 2),
        };
        let k = pick_grade(cfg, i, 0, n);
        let a = random_chain(&mut rng, n, k, 0);
        let map = SmoothMap::Poly {
            comps: (0..n).map(|_| random_poly(&mut rng, n, 2)).collect(),
            n_in: n,
        };
        let w = random_form(&mut rng, n, k, 2, 2);
        let lhs = w.eval_chain(&chainops::pushforward(&map, &a)?)?;
        let rhs = w.pullback(&map)?.eval_chain(&a)?;
        worst = worst.max((lhs - rhs).abs());
    }

    // The circle as a pushforward stream: the area-form line integral
    // x dy - y dx telescopes to twice the enclosed area, 2 pi.
    let tau = std::f64::consts::TAU;
    let base = ChainStream::cube(&[0.0], &[tau])?;
    let circle = ChainStream::pushforward(SmoothMap::Circle { radius: 1.0 }, base)?;
    let w = Form::poly_from_terms(2, 1, &[(vec![2], vec![1, 0], 1.0), (vec![1], vec![0, 1], -1.0)])?;
    let got = integrate_stream(
        &w,
        &circle,
        IntegrateOpts {
            j_start: 0,
            j_end: 10,
            tol: None,
        },
    )?;
    let circle_err = (got.value - tau).abs();

    let passed = worst <= tol && circle_err <= 1e-4;
    let detail = format!(
        "worst |w(F_*A) - (F^*w)(A)| = {worst:.3e} over {total} quadratic maps; circle area-form error {circle_err:.3e}"
    );
    Ok(outcome(
        "pushforward",
        11,
        total + 1,
        worst,
        tol,
        passed,
        detail,
        started,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(name: &str, cases: usize) -> SuiteOutcome {
        let cfg = SuiteConfig {
            cases: Some(cases),
            ..SuiteConfig::default()
        };
        run_suite(name, &cfg).unwrap()
    }

    #[test]
    fn quick_runs_of_the_random_suites_pass() {
        for (name, cases) in [
            ("stokes", 40),
            ("duality", 4),
            ("algebra", 50),
            ("field_commutators", 5),
            ("norms", 20),
            ("pushforward", 10),
        ] {
            let out = quick(name, cases);
            assert!(out.passed, "{name}: {}", out.detail);
        }
    }

    #[test]
    fn cantor_suite_is_exact_through_stage_twelve() {
        let out = quick("cantor", 13);
        assert!(out.passed, "{}", out.detail);
        assert_eq!(out.worst, 0.0);
    }

    #[test]
    fn suites_are_deterministic_across_runs() {
        let a = quick("stokes", 25);
        let b = quick("stokes", 25);
        assert_eq!(a.worst, b.worst);
        assert_eq!(a.cases, b.cases);
    }

    #[test]
    fn unknown_suites_are_schema_errors() {
        let err = run_suite("nope", &SuiteConfig::default()).unwrap_err();
        assert!(matches!(err, ChainError::Schema(_)));
        assert!(resolve_filters(&["stokes".into(), "nope".into()]).is_err());
        assert_eq!(resolve_filters(&[]).unwrap().len(), 11);
    }
}
