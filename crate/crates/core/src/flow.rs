//! Flows of chains: time-t maps of polynomial vector fields (with the
//! variational equation for the Jacobian), pushforward of chains along a
//! flow, time-integrated evolving chains, and numerical checks of the
//! transport theorems — the fundamental theorem for chains in a flow,
//! Stokes for evolving chains, the Leibniz rule, and Reynolds transport.
//!
//! All trajectory integration is fixed-step classical Runge–Kutta with
//! deterministic step halving: a trajectory is re-run with twice the steps
//! until two successive answers agree to the point tolerance. No adaptive
//! step control is used, so every result is a pure function of its inputs.

use std::sync::Arc;

use crate::chain::{ChainElement, DiracChain};
use crate::chainops;
use crate::error::{ChainError, Result};
use crate::form::{Form, Poly, VectorField};
use crate::multivec::{vecn, KVector, Vecn};
use crate::rep::{ChainStream, ElementSource};
use serde::Serialize;

/// Default point tolerance for trajectory integration.
pub const FLOW_TOL: f64 = 1e-10;

/// Hard cap on Runge–Kutta steps for a single trajectory.
const MAX_STEPS: u32 = 1 << 21;

/// Hard cap on the time depth of an evolving level (2^m samples).
const MAX_TIME_DEPTH: u32 = 30;

// ---------------------------------------------------------------------------
// The integrator
// ---------------------------------------------------------------------------

/// A vector field with its Jacobian entries differentiated once, so the
/// stepper evaluates fixed polynomials instead of re-deriving them.
#[derive(Debug, Clone)]
struct FieldEval {
    n: usize,
    comps: Vec<Poly>,
    /// Row-major: `jac[i * n + q] = d comps[i] / d x_q`.
    jac: Vec<Poly>,
}

impl FieldEval {
    fn new(v: &VectorField) -> Self {
        let n = v.n();
        let comps = v.comps().to_vec();
        let mut jac = Vec::with_capacity(n * n);
        for c in &comps {
            for q in 0..n {
                jac.push(c.partial(q));
            }
        }
        FieldEval { n, comps, jac }
    }

    fn velocity(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.comps) {
            *o = c.eval(x);
        }
    }

    /// `out = DV(x) · m`, with `m` and `out` row-major n×n.
    fn jac_mul(&self, x: &[f64], m: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.fill(0.0);
        for i in 0..n {
            for k in 0..n {
                let a = self.jac[i * n + k].eval(x);
                if a == 0.0 {
                    continue;
                }
                for q in 0..n {
                    out[i * n + q] += a * m[k * n + q];
                }
            }
        }
    }
}

/// Scratch for the classical fourth-order step on the combined system
/// `x' = V(x)`, `J' = DV(x) J`.
struct Rk4 {
    fe: FieldEval,
    with_jac: bool,
    kx: [Vec<f64>; 4],
    kj: [Vec<f64>; 4],
    tx: Vec<f64>,
    tj: Vec<f64>,
}

impl Rk4 {
    fn new(fe: FieldEval, with_jac: bool) -> Self {
        let n = fe.n;
        let nn = if with_jac { n * n } else { 0 };
        Rk4 {
            fe,
            with_jac,
            kx: std::array::from_fn(|_| vec![0.0; n]),
            kj: std::array::from_fn(|_| vec![0.0; nn]),
            tx: vec![0.0; n],
            tj: vec![0.0; nn],
        }
    }

    fn step(&mut self, h: f64, x: &mut [f64], jm: &mut [f64]) {
        let n = self.fe.n;
        self.fe.velocity(x, &mut self.kx[0]);
        if self.with_jac {
            self.fe.jac_mul(x, jm, &mut self.kj[0]);
        }
        for s in 1..4 {
            let w = if s == 3 { h } else { 0.5 * h };
            for i in 0..n {
                self.tx[i] = x[i] + w * self.kx[s - 1][i];
            }
            if self.with_jac {
                for i in 0..jm.len() {
                    self.tj[i] = jm[i] + w * self.kj[s - 1][i];
                }
            }
            self.fe.velocity(&self.tx, &mut self.kx[s]);
            if self.with_jac {
                self.fe.jac_mul(&self.tx, &self.tj, &mut self.kj[s]);
            }
        }
        let w = h / 6.0;
        for i in 0..n {
            x[i] += w * (self.kx[0][i] + 2.0 * self.kx[1][i] + 2.0 * self.kx[2][i] + self.kx[3][i]);
        }
        if self.with_jac {
            for i in 0..jm.len() {
                jm[i] +=
                    w * (self.kj[0][i] + 2.0 * self.kj[1][i] + 2.0 * self.kj[2][i] + self.kj[3][i]);
            }
        }
    }

    fn advance(&mut self, span: f64, steps: u32, x: &mut [f64], jm: &mut [f64]) {
        if span == 0.0 {
            return;
        }
        let h = span / steps as f64;
        for _ in 0..steps {
            self.step(h, x, jm);
        }
    }
}

fn set_identity(jm: &mut [f64], n: usize) {
    jm.fill(0.0);
    for i in 0..n {
        jm[i * n + i] = 1.0;
    }
}

fn identity_flat(n: usize, nn: usize) -> Vec<f64> {
    let mut jm = vec![0.0; nn];
    if nn > 0 {
        set_identity(&mut jm, n);
    }
    jm
}

fn rows_from_flat(n: usize, flat: &[f64]) -> Vec<Vecn> {
    (0..n)
        .map(|i| flat[i * n..(i + 1) * n].iter().copied().collect())
        .collect()
}

/// `(D phi)_*` on k-vectors: the wedge of the selected Jacobian columns.
/// `rows` is the row-major Jacobian; `cols` is reusable scratch.
fn linear_pushforward(
    n: usize,
    rows: &[f64],
    kv: &KVector,
    cols: &mut Vec<f64>,
) -> Result<KVector> {
    let k = kv.grade();
    if k == 0 || kv.is_zero() {
        return Ok(kv.clone());
    }
    cols.clear();
    cols.resize(n * n, 0.0);
    for i in 0..n {
        for q in 0..n {
            cols[q * n + i] = rows[i * n + q];
        }
    }
    let mut acc = KVector::zero(n, k)?;
    let mut chosen: Vec<&[f64]> = Vec::with_capacity(k);
    for (mask, c) in kv.terms() {
        if c == 0.0 {
            continue;
        }
        chosen.clear();
        let mut rest = mask;
        while rest != 0 {
            let q = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            chosen.push(&cols[q * n..(q + 1) * n]);
        }
        acc = acc.add_kv(&KVector::simple(n, &chosen)?.scale(c))?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Flow maps
// ---------------------------------------------------------------------------

/// The time-t map of a polynomial vector field.
///
/// `point` and `jacobian` integrate a single trajectory, doubling the step
/// count until two successive runs agree to the point tolerance. The flow
/// at `t = 0` is the identity, exactly.
#[derive(Debug, Clone)]
pub struct FlowMap {
    field: VectorField,
    tol: f64,
}

impl FlowMap {
    pub fn new(field: VectorField) -> Result<Self> {
        if field.n() == 0 {
            return Err(ChainError::Dimension("flows need n >= 1".into()));
        }
        Ok(FlowMap {
            field,
            tol: FLOW_TOL,
        })
    }

    /// Overrides the point tolerance (default 1e-10).
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol.abs().max(1e-15);
        self
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn n(&self) -> usize {
        self.field.n()
    }

    /// `phi_t(p)`.
    pub fn point(&self, t: f64, p: &[f64]) -> Result<Vecn> {
        Ok(self.solve(t, p, false)?.0)
    }

    /// Rows of `D phi_t` at `p`, from the variational equation.
    pub fn jacobian(&self, t: f64, p: &[f64]) -> Result<Vec<Vecn>> {
        let (_, flat, _) = self.solve(t, p, true)?;
        Ok(rows_from_flat(self.n(), &flat))
    }

    /// `phi_t(p)` together with `D phi_t(p)`.
    pub fn point_and_jacobian(&self, t: f64, p: &[f64]) -> Result<(Vecn, Vec<Vecn>)> {
        let (x, flat, _) = self.solve(t, p, true)?;
        Ok((x, rows_from_flat(self.n(), &flat)))
    }

    /// Integrates one trajectory; returns the endpoint, the flat Jacobian
    /// (empty unless requested), and the accepted step count.
    fn solve(&self, t: f64, p: &[f64], with_jac: bool) -> Result<(Vecn, Vec<f64>, u32)> {
        let n = self.n();
        if p.len() != n {
            return Err(ChainError::Dimension(
                "flow point dimension mismatch".into(),
            ));
        }
        let nn = if with_jac { n * n } else { 0 };
        if t == 0.0 {
            return Ok((vecn(p), identity_flat(n, nn), 0));
        }
        let mut rk = Rk4::new(FieldEval::new(&self.field), with_jac);
        let run = |rk: &mut Rk4, steps: u32| -> (Vec<f64>, Vec<f64>) {
            let mut x = p.to_vec();
            let mut jm = identity_flat(n, nn);
            rk.advance(t, steps, &mut x, &mut jm);
            (x, jm)
        };
        let mut steps: u32 = (t.abs() * 4.0).ceil().max(2.0) as u32;
        let mut prev = run(&mut rk, steps);
        loop {
            let next = steps.saturating_mul(2);
            if next > MAX_STEPS {
                return Err(ChainError::Numerical(format!(
                    "flow over t = {t} did not meet tolerance {} within {MAX_STEPS} steps; \
                     the trajectory is stiff or escapes in finite time",
                    self.tol
                )));
            }
            let cur = run(&mut rk, next);
            let mut d = 0.0f64;
            let mut bad = false;
            for (a, b) in prev.0.iter().zip(cur.0.iter()) {
                let e = (a - b).abs();
                bad |= !e.is_finite();
                d = d.max(e);
            }
            for (a, b) in prev.1.iter().zip(cur.1.iter()) {
                let e = (a - b).abs();
                bad |= !e.is_finite();
                d = d.max(e);
            }
            if !bad && d <= self.tol {
                return Ok((cur.0.iter().copied().collect(), cur.1, next));
            }
            steps = next;
            prev = cur;
        }
    }
}

/// Pushes an order-0 chain along the flow for time `t`: each element
/// `(p; alpha)` maps to `(phi_t(p); (D phi_t)_* alpha)`.
pub fn pushforward_flow(flow: &FlowMap, t: f64, a: &DiracChain) -> Result<DiracChain> {
    let n = flow.n();
    if a.n() != n {
        return Err(ChainError::Dimension(
            "flow and chain dimension mismatch".into(),
        ));
    }
    let mut out = Vec::with_capacity(a.len());
    let mut cols = Vec::new();
    for e in a.elements() {
        if e.order() != 0 {
            return Err(ChainError::Unsupported(
                "flow pushforward is defined on order-0 chains".into(),
            ));
        }
        let (q, flat, _) = flow.solve(t, &e.point, e.kv.grade() > 0)?;
        let kv = linear_pushforward(n, &flat, &e.kv, &mut cols)?;
        if kv.is_zero() {
            continue;
        }
        out.push(ChainElement::order_zero(q, kv));
    }
    DiracChain::new(n, out)
}

// ---------------------------------------------------------------------------
// Evolving chains
// ---------------------------------------------------------------------------

/// The time-integrated evolving chain `{J_t}` of a base representative
/// carried by a flow over `[a, b]`.
///
/// Level `m` of the stream samples the 2^m midpoint times `t_q` and emits
/// `dt * (phi_{t_q}(p); (D phi_{t_q})_* alpha)` for every base element, so
/// pairings approximate `int_a^b int_{J_t} (.) dt` by the composite
/// midpoint rule. Trajectories are marched with a substep density frozen
/// at construction (probed against the point tolerance), which keeps level
/// enumeration deterministic.
#[derive(Debug, Clone)]
pub struct EvolvingChain {
    source: Arc<EvolvingSource>,
    flow: FlowMap,
}

#[derive(Debug)]
struct EvolvingSource {
    n: usize,
    grade: usize,
    base: Vec<ChainElement>,
    field: VectorField,
    a: f64,
    b: f64,
    /// Runge–Kutta substeps per unit time.
    rate: f64,
}

impl EvolvingChain {
    pub fn new(
        j0: &ChainStream,
        space_depth: u32,
        field: &VectorField,
        a: f64,
        b: f64,
    ) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(ChainError::Unsupported(
                "evolving chains need a finite window a < b".into(),
            ));
        }
        if field.n() != j0.n() {
            return Err(ChainError::Dimension(
                "field and stream dimension mismatch".into(),
            ));
        }
        let base_chain = j0.chain(space_depth)?;
        if base_chain.max_order() > 0 {
            return Err(ChainError::Unsupported(
                "evolving chains start from order-0 representatives".into(),
            ));
        }
        let flow = FlowMap::new(field.clone())?;
        // Freeze the substep density from a few probe trajectories run to
        // the far end of the window with step halving.
        let t_far = if a.abs() > b.abs() { a } else { b };
        let mut rate = 8.0 / (b - a);
        if t_far != 0.0 {
            let elems = base_chain.elements();
            let stride = (elems.len() / 8).max(1);
            for e in elems.iter().step_by(stride) {
                let (_, _, steps) = flow.solve(t_far, &e.point, j0.grade() > 0)?;
                rate = rate.max(steps as f64 / t_far.abs());
            }
        }
        rate *= 2.0;
        Ok(EvolvingChain {
            source: Arc::new(EvolvingSource {
                n: j0.n(),
                grade: j0.grade(),
                base: base_chain.elements().to_vec(),
                field: field.clone(),
                a,
                b,
                rate,
            }),
            flow,
        })
    }

    /// The evolving chain as a stream; level `m` uses 2^m time samples.
    pub fn stream(&self) -> Result<ChainStream> {
        ChainStream::from_source(self.source.n, self.source.grade, self.source.clone())
    }

    /// Materialized snapshot at time depth `m` (guarded by size).
    pub fn snapshot(&self, m: u32) -> Result<DiracChain> {
        self.stream()?.chain(m)
    }

    /// The time-t slice `J_t = (phi_t)_* J_0`.
    pub fn slice(&self, t: f64) -> Result<DiracChain> {
        let base = DiracChain::new(self.source.n, self.source.base.clone())?;
        pushforward_flow(&self.flow, t, &base)
    }
}

impl ElementSource for EvolvingSource {
    fn level_len_bound(&self, m: u32) -> u64 {
        (self.base.len() as u64).saturating_mul(1u64 << m.min(62))
    }

    fn support_bbox(&self) -> Option<(Vecn, Vecn)> {
        None
    }

    fn for_each_element(
        &self,
        m: u32,
        f: &mut dyn FnMut(&ChainElement) -> Result<()>,
    ) -> Result<()> {
        if m > MAX_TIME_DEPTH {
            return Err(ChainError::Numerical(format!(
                "time depth {m} exceeds the supported maximum {MAX_TIME_DEPTH}"
            )));
        }
        let parts = 1u64 << m;
        let dt = (self.b - self.a) / parts as f64;
        let n = self.n;
        let with_jac = self.grade > 0;
        let nn = if with_jac { n * n } else { 0 };
        let mut rk = Rk4::new(FieldEval::new(&self.field), with_jac);
        let mut x = vec![0.0; n];
        let mut jm = identity_flat(n, nn);
        let mut cols = Vec::new();
        for e in &self.base {
            x.copy_from_slice(&e.point);
            if with_jac {
                set_identity(&mut jm, n);
            }
            let mut cur_t = 0.0f64;
            for q in 0..parts {
                let target = self.a + (q as f64 + 0.5) * dt;
                let span = target - cur_t;
                let steps = ((span.abs() * self.rate).ceil() as u32).max(1);
                rk.advance(span, steps, &mut x, &mut jm);
                cur_t = target;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(ChainError::Numerical(
                        "evolving trajectory escaped to non-finite values".into(),
                    ));
                }
                let kv = linear_pushforward(n, &jm, &e.kv, &mut cols)?.scale(dt);
                if kv.is_zero() {
                    continue;
                }
                f(&ChainElement::order_zero(x.iter().copied().collect(), kv))?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Time-dependent form families
// ---------------------------------------------------------------------------

/// A form family polynomial in time, `omega_t = sum_i t^{p_i} omega_i`.
#[derive(Debug, Clone)]
pub struct TimeForm {
    terms: Vec<(u32, Form)>,
}

impl TimeForm {
    pub fn new(terms: Vec<(u32, Form)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(ChainError::Unsupported("empty time form".into()));
        }
        let n = terms[0].1.n();
        let grade = terms[0].1.grade();
        for (_, w) in &terms {
            if w.n() != n || w.grade() != grade {
                return Err(ChainError::Dimension(
                    "time-form terms must share dimension and grade".into(),
                ));
            }
        }
        Ok(TimeForm { terms })
    }

    pub fn constant(w: Form) -> Self {
        TimeForm {
            terms: vec![(0, w)],
        }
    }

    pub fn n(&self) -> usize {
        self.terms[0].1.n()
    }

    pub fn grade(&self) -> usize {
        self.terms[0].1.grade()
    }

    /// `omega_{t}` as a single form.
    pub fn at(&self, t: f64) -> Result<Form> {
        let mut acc: Option<Form> = None;
        for (p, w) in &self.terms {
            let scaled = w.scale_form(t.powi(*p as i32))?;
            acc = Some(match acc {
                None => scaled,
                Some(prev) => prev.add_form(&scaled)?,
            });
        }
        Ok(acc.expect("non-empty by construction"))
    }

    /// The time-derivative family `d omega_t / dt`.
    pub fn dt(&self) -> Result<TimeForm> {
        let mut terms = Vec::new();
        for (p, w) in &self.terms {
            if *p == 0 {
                continue;
            }
            terms.push((p - 1, w.scale_form(*p as f64)?));
        }
        if terms.is_empty() {
            terms.push((0, self.terms[0].1.scale_form(0.0)?));
        }
        Ok(TimeForm { terms })
    }

    /// `omega_t` paired with a chain.
    pub fn eval_chain(&self, t: f64, a: &DiracChain) -> Result<f64> {
        let mut acc = 0.0;
        for (p, w) in &self.terms {
            acc += t.powi(*p as i32) * w.eval_chain(a)?;
        }
        Ok(acc)
    }
}

// ---------------------------------------------------------------------------
// Transport-theorem checks
// ---------------------------------------------------------------------------

/// Outcome of a transport-theorem check.
#[derive(Debug, Clone, Serialize)]
pub struct FlowReport {
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Named intermediate quantities, for diagnostics.
    pub terms: Vec<(String, f64)>,
}

impl FlowReport {
    fn build(check: &str, lhs: f64, rhs: f64, terms: Vec<(String, f64)>) -> Self {
        FlowReport {
            check: check.into(),
            lhs,
            rhs,
            residual: (lhs - rhs).abs(),
            terms,
        }
    }
}

/// Fundamental theorem for chains in a flow:
/// `int_{J_b} omega - int_{J_a} omega = int_a^b int_{J_t} L_V omega dt`.
///
/// The left side pushes the level-`space_depth` representative to times
/// `a` and `b`; the right side pairs the evolving chain at time depth `m`
/// with the Lie derivative.
pub fn ftc_check(
    j0: &ChainStream,
    space_depth: u32,
    field: &VectorField,
    omega: &Form,
    a: f64,
    b: f64,
    m: u32,
) -> Result<FlowReport> {
    if omega.grade() != j0.grade() {
        return Err(ChainError::Grade(format!(
            "pairing a grade-{} form with a grade-{} stream",
            omega.grade(),
            j0.grade()
        )));
    }
    let ev = EvolvingChain::new(j0, space_depth, field, a, b)?;
    let at_b = omega.eval_chain(&ev.slice(b)?)?;
    let at_a = omega.eval_chain(&ev.slice(a)?)?;
    let rhs = ev.stream()?.eval_against(m, &omega.lie(field)?)?;
    Ok(FlowReport::build(
        "ftc",
        at_b - at_a,
        rhs,
        vec![
            ("omega(J_b)".into(), at_b),
            ("omega(J_a)".into(), at_a),
        ],
    ))
}

/// Stokes for evolving chains, for a (k-1)-form `omega` against a grade-k
/// stream:
/// `int_{{J_t}} d L_V omega = int_{partial J_b} omega - int_{partial J_a} omega`.
pub fn stokes_evolving_check(
    j0: &ChainStream,
    space_depth: u32,
    field: &VectorField,
    omega: &Form,
    a: f64,
    b: f64,
    m: u32,
) -> Result<FlowReport> {
    if omega.grade() + 1 != j0.grade() {
        return Err(ChainError::Grade(format!(
            "evolving Stokes pairs a grade-{} stream with a grade-{} form",
            j0.grade(),
            omega.grade()
        )));
    }
    let ev = EvolvingChain::new(j0, space_depth, field, a, b)?;
    let integrand = omega.lie(field)?.exterior_d()?;
    let lhs = ev.stream()?.eval_against(m, &integrand)?;
    let bd_b = omega.eval_chain(&chainops::boundary(&ev.slice(b)?)?)?;
    let bd_a = omega.eval_chain(&chainops::boundary(&ev.slice(a)?)?)?;
    Ok(FlowReport::build(
        "stokes_evolving",
        lhs,
        bd_b - bd_a,
        vec![
            ("omega(dJ_b)".into(), bd_b),
            ("omega(dJ_a)".into(), bd_a),
        ],
    ))
}

/// Leibniz rule along a flow at time `t0`:
/// `d/dt int_{J_t} omega_t = int_{P_V J_t} omega_t + int_{J_t} d omega_t/dt`,
/// with the left side taken as a central difference of half-width `h`.
pub fn leibniz_check(
    j0: &ChainStream,
    space_depth: u32,
    field: &VectorField,
    omega: &TimeForm,
    t0: f64,
    h: f64,
) -> Result<FlowReport> {
    if omega.grade() != j0.grade() {
        return Err(ChainError::Grade(format!(
            "pairing a grade-{} family with a grade-{} stream",
            omega.grade(),
            j0.grade()
        )));
    }
    if !(h > 0.0) {
        return Err(ChainError::Unsupported(
            "central differences need a positive half-width".into(),
        ));
    }
    let flow = FlowMap::new(field.clone())?;
    let base = j0.chain(space_depth)?;
    let j_plus = pushforward_flow(&flow, t0 + h, &base)?;
    let j_minus = pushforward_flow(&flow, t0 - h, &base)?;
    let j_mid = pushforward_flow(&flow, t0, &base)?;
    let lhs =
        (omega.eval_chain(t0 + h, &j_plus)? - omega.eval_chain(t0 - h, &j_minus)?) / (2.0 * h);
    let transport = omega.eval_chain(t0, &chainops::prederivative_field(&j_mid, field)?)?;
    let time_term = omega.dt()?.eval_chain(t0, &j_mid)?;
    Ok(FlowReport::build(
        "leibniz",
        lhs,
        transport + time_term,
        vec![
            ("transport".into(), transport),
            ("time".into(), time_term),
        ],
    ))
}

/// Reynolds transport for a top-grade family:
/// `d/dt int_{J_t} omega_t = int_{J_t} d omega_t/dt + int_{partial J_t} i_V omega_t`.
pub fn reynolds_check(
    j0: &ChainStream,
    space_depth: u32,
    field: &VectorField,
    omega: &TimeForm,
    t0: f64,
    h: f64,
) -> Result<FlowReport> {
    if omega.grade() != j0.n() || j0.grade() != j0.n() {
        return Err(ChainError::Grade(
            "Reynolds transport needs a top-grade stream and family".into(),
        ));
    }
    if !(h > 0.0) {
        return Err(ChainError::Unsupported(
            "central differences need a positive half-width".into(),
        ));
    }
    let flow = FlowMap::new(field.clone())?;
    let base = j0.chain(space_depth)?;
    let j_plus = pushforward_flow(&flow, t0 + h, &base)?;
    let j_minus = pushforward_flow(&flow, t0 - h, &base)?;
    let j_mid = pushforward_flow(&flow, t0, &base)?;
    let lhs =
        (omega.eval_chain(t0 + h, &j_plus)? - omega.eval_chain(t0 - h, &j_minus)?) / (2.0 * h);
    let time_term = omega.dt()?.eval_chain(t0, &j_mid)?;
    let flux = omega
        .at(t0)?
        .interior(field)?
        .eval_chain(&chainops::boundary(&j_mid)?)?;
    Ok(FlowReport::build(
        "reynolds",
        lhs,
        time_term + flux,
        vec![("time".into(), time_term), ("flux".into(), flux)],
    ))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn x_dy() -> Form {
        Form::poly_from_terms(2, 1, &[(vec![2], vec![1, 0], 1.0)]).unwrap()
    }

    fn unit_segment() -> ChainStream {
        ChainStream::cell(&[0.0, 0.0], &[vec![1.0, 0.0]]).unwrap()
    }

    fn unit_square() -> ChainStream {
        ChainStream::cube(&[0.0, 0.0], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn flow_at_time_zero_is_the_identity() {
        let flow = FlowMap::new(VectorField::rotation2()).unwrap();
        let p = [0.3, -0.2];
        let (q, rows) = flow.point_and_jacobian(0.0, &p).unwrap();
        assert_eq!(q.as_slice(), &p);
        assert_eq!(rows[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(rows[1].as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn rotation_flow_matches_the_closed_form() {
        let flow = FlowMap::new(VectorField::rotation2()).unwrap();
        let t = std::f64::consts::FRAC_PI_2;
        let (q, rows) = flow.point_and_jacobian(t, &[1.0, 0.0]).unwrap();
        assert!((q[0] - 0.0).abs() < 1e-8, "x(pi/2) = {}", q[0]);
        assert!((q[1] - 1.0).abs() < 1e-8, "y(pi/2) = {}", q[1]);
        // D phi = the rotation matrix [[0,-1],[1,0]].
        assert!((rows[0][0]).abs() < 1e-8);
        assert!((rows[0][1] + 1.0).abs() < 1e-8);
        assert!((rows[1][0] - 1.0).abs() < 1e-8);
        assert!((rows[1][1]).abs() < 1e-8);
    }

    #[test]
    fn constant_field_flow_translates() {
        let v = VectorField::constant(&[0.5, -1.0]).unwrap();
        let flow = FlowMap::new(v).unwrap();
        let (q, rows) = flow.point_and_jacobian(2.0, &[0.1, 0.2]).unwrap();
        assert!((q[0] - 1.1).abs() < 1e-12);
        assert!((q[1] + 1.8).abs() < 1e-12);
        assert!((rows[0][0] - 1.0).abs() < 1e-12 && rows[0][1].abs() < 1e-12);

        // Pushforward along a constant field is translation.
        let chain = unit_square().chain(2).unwrap();
        let pushed = pushforward_flow(&flow, 2.0, &chain).unwrap();
        let translated = chain.translate(&[1.0, -2.0]).unwrap();
        assert_eq!(pushed.len(), translated.len());
        for (a, b) in pushed.elements().iter().zip(translated.elements()) {
            for (x, y) in a.point.iter().zip(b.point.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((a.kv.coeff(0b11) - b.kv.coeff(0b11)).abs() < 1e-12);
        }
    }

    #[test]
    fn dilation_flow_is_exponential() {
        let flow = FlowMap::new(VectorField::dilation(2)).unwrap();
        let (q, rows) = flow.point_and_jacobian(0.7, &[0.3, -0.2]).unwrap();
        let s = 0.7f64.exp();
        assert!((q[0] - 0.3 * s).abs() < 1e-9);
        assert!((q[1] + 0.2 * s).abs() < 1e-9);
        assert!((rows[0][0] - s).abs() < 1e-9);
        assert!((rows[1][1] - s).abs() < 1e-9);
        assert!(rows[0][1].abs() < 1e-12 && rows[1][0].abs() < 1e-12);
    }

    #[test]
    fn group_law_holds_within_tolerance() {
        // A mildly nonlinear field: (-y + x^2/20, x - y^2/10).
        let vx = Poly::coordinate(2, 1)
            .scale(-1.0)
            .add(&Poly::monomial(2, &[2, 0], 0.05).unwrap());
        let vy = Poly::coordinate(2, 0).add(&Poly::monomial(2, &[0, 2], -0.1).unwrap());
        let flow = FlowMap::new(VectorField::new(vec![vx, vy]).unwrap()).unwrap();
        let p = [0.4, 0.1];
        let (s, t) = (0.3, 0.5);
        let direct = flow.point(s + t, &p).unwrap();
        let mid = flow.point(t, &p).unwrap();
        let composed = flow.point(s, &mid).unwrap();
        for (a, b) in direct.iter().zip(composed.iter()) {
            assert!((a - b).abs() <= 10.0 * FLOW_TOL, "{a} vs {b}");
        }
    }

    #[test]
    fn stiff_trajectory_reports_an_error() {
        // x' = x^2 from x(0) = 2 blows up at t = 1/2.
        let v = VectorField::new(vec![Poly::monomial(1, &[2], 1.0).unwrap()]).unwrap();
        let flow = FlowMap::new(v).unwrap();
        let err = flow.point(1.0, &[2.0]).unwrap_err().to_string();
        assert!(err.contains("stiff"), "unexpected error: {err}");
    }

    #[test]
    fn pushforward_flow_at_zero_returns_the_chain() {
        let flow = FlowMap::new(VectorField::rotation2()).unwrap();
        let chain = unit_square().chain(2).unwrap();
        let pushed = pushforward_flow(&flow, 0.0, &chain).unwrap();
        assert_eq!(pushed.len(), chain.len());
        for (a, b) in pushed.elements().iter().zip(chain.elements()) {
            assert_eq!(a.point, b.point);
            assert_eq!(a.kv.coeff(0b11), b.kv.coeff(0b11));
        }
    }

    #[test]
    fn rotation_pushforward_preserves_area() {
        let flow = FlowMap::new(VectorField::rotation2()).unwrap();
        let chain = unit_square().chain(3).unwrap();
        let area = Form::constant_blade(2, &[1, 2], 1.0).unwrap();
        let pushed = pushforward_flow(&flow, 0.8, &chain).unwrap();
        let before = area.eval_chain(&chain).unwrap();
        let after = area.eval_chain(&pushed).unwrap();
        assert!((before - after).abs() < 1e-9, "{before} vs {after}");
        // Points rotate by the closed-form matrix.
        let (c, s) = (0.8f64.cos(), 0.8f64.sin());
        let e = &chain.elements()[0];
        let q = flow.point(0.8, &e.point).unwrap();
        assert!((q[0] - (c * e.point[0] - s * e.point[1])).abs() < 1e-9);
        assert!((q[1] - (s * e.point[0] + c * e.point[1])).abs() < 1e-9);
    }

    #[test]
    fn evolving_snapshot_matches_direct_pushforwards() {
        let field = VectorField::rotation2();
        let j0 = unit_segment();
        let ev = EvolvingChain::new(&j0, 3, &field, 0.0, 1.0).unwrap();
        let omega = x_dy();
        let via_stream = ev.stream().unwrap().eval_against(3, &omega).unwrap();

        let flow = FlowMap::new(field).unwrap();
        let base = j0.chain(3).unwrap();
        let dt = 1.0 / 8.0;
        let mut direct = 0.0;
        for q in 0..8 {
            let t = (q as f64 + 0.5) * dt;
            let slice = pushforward_flow(&flow, t, &base).unwrap();
            direct += dt * omega.eval_chain(&slice).unwrap();
        }
        assert!(
            (via_stream - direct).abs() < 1e-9,
            "{via_stream} vs {direct}"
        );
    }

    #[test]
    fn evolving_chains_reject_higher_order_bases() {
        let dip = ChainStream::dipole(&[1.0, 0.0], unit_segment()).unwrap();
        let err = EvolvingChain::new(&dip, 1, &VectorField::rotation2(), 0.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("order-0"));
    }

    #[test]
    fn ftc_for_a_point_under_a_constant_field() {
        // J_0 = (p; 1), V constant: the check reduces to the fundamental
        // theorem of calculus along the straight trajectory.
        let p = [0.1, 0.3];
        let v = [0.2, 0.4];
        let j0 = ChainStream::cell(&p, &[]).unwrap();
        let field = VectorField::constant(&v).unwrap();
        let f = Form::poly_from_terms(2, 0, &[(vec![], vec![2, 1], 1.0)]).unwrap();
        let report = ftc_check(&j0, 0, &field, &f, 0.0, 1.0, 6).unwrap();
        let closed = |x: f64, y: f64| x * x * y;
        let exact = closed(p[0] + v[0], p[1] + v[1]) - closed(p[0], p[1]);
        assert!((report.lhs - exact).abs() < 1e-9, "lhs {}", report.lhs);
        assert!(report.residual < 1e-5, "residual {}", report.residual);
    }

    #[test]
    fn ftc_time_refinement_is_second_order() {
        let j0 = unit_segment();
        let field = VectorField::rotation2();
        let omega = x_dy();
        let mut prev = f64::NAN;
        for m in 4..=6 {
            let r = ftc_check(&j0, 4, &field, &omega, 0.0, 1.0, m)
                .unwrap()
                .residual;
            if m > 4 {
                assert!(prev / r >= 3.5, "m={m}: {prev} -> {r}");
            }
            prev = r;
        }
    }

    #[test]
    fn ftc_on_the_rotating_segment_at_reference_depths() {
        let j0 = unit_segment();
        let field = VectorField::rotation2();
        let report = ftc_check(&j0, 8, &field, &x_dy(), 0.0, 1.0, 10).unwrap();
        assert!(report.residual <= 1e-4, "residual {}", report.residual);
    }

    #[test]
    fn rotation_invariant_form_residual_is_tiny() {
        // omega = (x^2+y^2)(x dy - y dx) has L_V omega = 0 for the rotation
        // field, so both sides of the fundamental theorem nearly vanish.
        let omega = Form::poly_from_terms(
            2,
            1,
            &[
                (vec![2], vec![3, 0], 1.0),
                (vec![2], vec![1, 2], 1.0),
                (vec![1], vec![2, 1], -1.0),
                (vec![1], vec![0, 3], -1.0),
            ],
        )
        .unwrap();
        let field = VectorField::rotation2();
        let lie = omega.lie(&field).unwrap();
        let probe = ChainElement::order_zero(
            vecn(&[0.7, -0.4]),
            KVector::from_vector(2, &[1.0, 2.0]).unwrap(),
        );
        assert_eq!(lie.eval_element(&probe).unwrap(), 0.0);

        let report = ftc_check(
            &unit_segment(),
            6,
            &field,
            &omega,
            0.0,
            std::f64::consts::FRAC_PI_4,
            8,
        )
        .unwrap();
        assert!(report.residual <= 1e-6, "residual {}", report.residual);
    }

    #[test]
    fn zero_field_gives_an_exactly_zero_residual() {
        let field = VectorField::constant(&[0.0, 0.0]).unwrap();
        // x dy is a 1-form; the square stream has grade 2.
        assert!(ftc_check(&unit_square(), 3, &field, &x_dy(), 0.0, 1.0, 4).is_err());
        let report = ftc_check(&unit_segment(), 3, &field, &x_dy(), 0.0, 1.0, 4).unwrap();
        assert_eq!(report.lhs, 0.0);
        assert_eq!(report.rhs, 0.0);
    }

    #[test]
    fn stokes_for_the_evolving_square() {
        let field = VectorField::rotation2();
        let omega = Form::poly_from_terms(2, 1, &[(vec![2], vec![2, 0], 1.0)]).unwrap();
        let report = stokes_evolving_check(&unit_square(), 4, &field, &omega, 0.0, 1.0, 7).unwrap();
        assert!(report.residual <= 1e-3, "residual {}", report.residual);
    }

    #[test]
    fn evolving_boundary_matches_the_evolving_of_the_boundary() {
        // The two evaluable readings of d{J_t} = {dJ_t}: pair the evolving
        // square with d(L_V omega) and the evolving boundary with L_V omega.
        let field = VectorField::rotation2();
        let omega = Form::poly_from_terms(2, 1, &[(vec![2], vec![2, 0], 1.0)]).unwrap();
        let lie = omega.lie(&field).unwrap();

        let ev_square = EvolvingChain::new(&unit_square(), 6, &field, 0.0, 1.0).unwrap();
        let via_interior = ev_square
            .stream()
            .unwrap()
            .eval_against(7, &lie.exterior_d().unwrap())
            .unwrap();

        let bd = ChainStream::boundary_of(unit_square()).unwrap();
        let ev_bd = EvolvingChain::new(&bd, 6, &field, 0.0, 1.0).unwrap();
        let via_boundary = ev_bd.stream().unwrap().eval_against(7, &lie).unwrap();

        assert!(
            (via_interior - via_boundary).abs() <= 2e-3,
            "{via_interior} vs {via_boundary}"
        );
    }

    #[test]
    fn leibniz_for_a_static_chain_is_nearly_exact() {
        // V = 0 and omega_t = t dx^dy: d/dt integral = area, transport = 0.
        let field = VectorField::constant(&[0.0, 0.0]).unwrap();
        let area = Form::constant_blade(2, &[1, 2], 1.0).unwrap();
        let omega = TimeForm::new(vec![(1, area)]).unwrap();
        let report = leibniz_check(&unit_square(), 3, &field, &omega, 0.4, 1e-3).unwrap();
        assert!(report.residual <= 1e-8, "residual {}", report.residual);
        assert!((report.lhs - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn leibniz_on_a_rotating_square() {
        let field = VectorField::rotation2();
        let w = Form::poly_from_terms(2, 2, &[(vec![1, 2], vec![1, 0], 1.0)]).unwrap();
        let omega = TimeForm::new(vec![(0, w.clone()), (2, w)]).unwrap();
        let report = leibniz_check(&unit_square(), 4, &field, &omega, 0.3, 1e-3).unwrap();
        assert!(report.residual <= 1e-6, "residual {}", report.residual);
    }

    #[test]
    fn reynolds_transport_for_the_dilating_square() {
        // V = x: the unit square dilates, area(t) = e^{2t}.
        let field = VectorField::dilation(2);
        let omega = TimeForm::constant(Form::constant_blade(2, &[1, 2], 1.0).unwrap());
        let t0 = 0.25;
        let report = reynolds_check(&unit_square(), 4, &field, &omega, t0, 1e-3).unwrap();
        assert!(report.residual <= 1e-4, "residual {}", report.residual);
        assert!(
            (report.lhs - 2.0 * (2.0 * t0).exp()).abs() <= 1e-4,
            "d/dt area = {}",
            report.lhs
        );
    }

    #[test]
    fn time_form_families_differentiate() {
        let w = x_dy();
        let omega = TimeForm::new(vec![(2, w.clone())]).unwrap();
        let seg = unit_segment().chain(2).unwrap();
        let base = w.eval_chain(&seg).unwrap();
        assert!((omega.eval_chain(0.5, &seg).unwrap() - 0.25 * base).abs() < 1e-15);
        let dt = omega.dt().unwrap();
        assert!((dt.eval_chain(0.5, &seg).unwrap() - base).abs() < 1e-15);
        let frozen = omega.at(0.5).unwrap();
        assert!((frozen.eval_chain(&seg).unwrap() - 0.25 * base).abs() < 1e-15);
        // Constant families have a zero derivative.
        let zero = TimeForm::constant(w).dt().unwrap();
        assert_eq!(zero.eval_chain(0.7, &seg).unwrap(), 0.0);
    }

    #[test]
    fn prederivative_is_the_time_derivative_of_pushforward() {
        // (omega(phi_t* A) - omega(A)) / t -> omega(P_V A) at rate O(t).
        let vx = Poly::monomial(2, &[2, 0], 1.0).unwrap();
        let vy = Poly::monomial(2, &[1, 1], 1.0).unwrap();
        let field = VectorField::new(vec![vx, vy]).unwrap();
        let flow = FlowMap::new(field.clone()).unwrap();
        let chain = unit_square().chain(3).unwrap();
        let omega = Form::poly_from_terms(2, 2, &[(vec![1, 2], vec![2, 0], 1.0)]).unwrap();
        let exact = omega
            .eval_chain(&chainops::prederivative_field(&chain, &field).unwrap())
            .unwrap();
        let base = omega.eval_chain(&chain).unwrap();
        let quotient = |t: f64| -> f64 {
            let pushed = pushforward_flow(&flow, t, &chain).unwrap();
            (omega.eval_chain(&pushed).unwrap() - base) / t
        };
        let err3 = (quotient(1e-3) - exact).abs();
        let err4 = (quotient(1e-4) - exact).abs();
        assert!(err3 <= 0.05, "err(1e-3) = {err3}");
        assert!(err4 <= err3 / 4.0, "err(1e-3) = {err3}, err(1e-4) = {err4}");
    }
}
