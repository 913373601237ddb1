//! The chain-side operator algebra: extrusion, retraction, prederivative,
//! boundary, perpendicular complement, geometric coboundary and Laplace
//! operators, multiplication by functions, vector-field versions of the
//! primitives, pushforward, and the Cartesian wedge product.
//!
//! Operators act element-by-element (the per-element functions are shared
//! with the streaming evaluator) and results are canonicalized, so operator
//! identities such as `{boundary, E_v} = P_v` hold bit-for-bit: both sides
//! reduce to the same axis-monomial elements with coefficients computed by
//! the same single multiplications.
//!
//! Sign conventions pinned here (and verified against the dual form-side
//! operators in the test suite):
//!
//! * the boundary is `sum_i P_{e_i} E_{e_i}^dagger`, dual to the exterior
//!   derivative;
//! * chain operators are *preduals*: `V -> P_V` is an anti-homomorphism, so
//!   `[P_V1, P_V2] = P_[V2,V1]` with the standard form-side Lie bracket
//!   `[X,Y] = XY - YX`;
//! * `[E_V2, P_V1] = E_[V1,V2]` holds for all fields (Cartan), while the
//!   retraction commutator picks up the symmetric part of `DV1` because
//!   retraction depends on the metric:
//!   `[E_V2^dagger, P_V1] = E^dagger_{[V1,V2] + (DV1 + DV1^T) V2}`,
//!   reducing to `E^dagger_[V1,V2]` exactly when the flow of `V1` is
//!   isometric.

use crate::chain::{expand_sym_factors, ChainElement, DiracChain, SymMono};
use crate::error::{ChainError, Result};
use crate::form::{Form, Poly, SmoothMap, VectorField};
use crate::multivec::{KVector, Vecn};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Element-level operators (shared with the streaming evaluator)
// ---------------------------------------------------------------------------

fn insert_axis(sym: &SymMono, axis: u8) -> SymMono {
    let mut s = sym.clone();
    let pos = s.iter().position(|&a| a > axis).unwrap_or(s.len());
    s.insert(pos, axis);
    s
}

/// `E_v` on one element: wedge the direction into the k-vector.
pub(crate) fn extrude_elem(e: &ChainElement, v: &KVector) -> Option<ChainElement> {
    let kv = v.wedge(&e.kv).ok()?;
    if kv.is_zero() {
        return None;
    }
    Some(ChainElement {
        point: e.point.clone(),
        sym: e.sym.clone(),
        kv,
    })
}

/// `E_v^dagger` on one element: retract the direction from the k-vector.
pub(crate) fn retract_elem(e: &ChainElement, v: &[f64]) -> Option<ChainElement> {
    let kv = e.kv.retract_v(v).ok()?;
    if kv.is_zero() {
        return None;
    }
    Some(ChainElement {
        point: e.point.clone(),
        sym: e.sym.clone(),
        kv,
    })
}

/// `P_v` on one element: the dipole expansion `sum_i v_i (p; (i . sym) (x) a)`.
pub(crate) fn prederiv_elem(e: &ChainElement, v: &[f64], out: &mut Vec<ChainElement>) {
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        out.push(ChainElement {
            point: e.point.clone(),
            sym: insert_axis(&e.sym, i as u8),
            kv: e.kv.scale(vi),
        });
    }
}

/// The boundary `sum_i P_{e_i} E_{e_i}^dagger` on one element.
pub(crate) fn boundary_elems(e: &ChainElement, out: &mut Vec<ChainElement>) {
    if e.grade() == 0 {
        return;
    }
    for i in 0..e.n() {
        let kv = e.kv.retract_axis(i);
        if kv.is_zero() {
            continue;
        }
        out.push(ChainElement {
            point: e.point.clone(),
            sym: insert_axis(&e.sym, i as u8),
            kv,
        });
    }
}

/// The perpendicular complement on one element.
pub(crate) fn perp_elem(e: &ChainElement) -> ChainElement {
    ChainElement {
        point: e.point.clone(),
        sym: e.sym.clone(),
        kv: e.kv.perp(),
    }
}

/// Multiplication by a polynomial 0-form on one element, by the recursion
/// `m_f(p; (i . sym') (x) a) = P_{e_i}(m_f(p; sym' (x) a)) + m_{d_i f}(p; sym' (x) a)`.
pub(crate) fn m_poly_elems(
    point: &Vecn,
    sym: &[u8],
    kv: &KVector,
    f: &Poly,
    out: &mut Vec<ChainElement>,
) {
    if f.is_zero() {
        return;
    }
    if sym.is_empty() {
        let c = f.eval(point);
        if c != 0.0 {
            out.push(ChainElement {
                point: point.clone(),
                sym: SymMono::new(),
                kv: kv.scale(c),
            });
        }
        return;
    }
    let i = sym[0];
    let mut inner = Vec::new();
    m_poly_elems(point, &sym[1..], kv, f, &mut inner);
    for mut e in inner {
        e.sym = insert_axis(&e.sym, i);
        out.push(e);
    }
    m_poly_elems(point, &sym[1..], kv, &f.partial(i as usize), out);
}

// ---------------------------------------------------------------------------
// Chain-level operators
// ---------------------------------------------------------------------------

fn map_elements<F>(a: &DiracChain, mut f: F) -> Result<DiracChain>
where
    F: FnMut(&ChainElement, &mut Vec<ChainElement>),
{
    let mut out = Vec::with_capacity(a.elements().len());
    for e in a.elements() {
        f(e, &mut out);
    }
    DiracChain::new(a.n(), out)
}

/// Extrusion `E_v A = sum (p; sym (x) (v ^ alpha))`.
pub fn extrude(a: &DiracChain, v: &[f64]) -> Result<DiracChain> {
    let kv_v = KVector::from_vector(a.n(), v)?;
    map_elements(a, |e, out| out.extend(extrude_elem(e, &kv_v)))
}

/// Retraction `E_v^dagger A`, the adjoint of extrusion.
pub fn retract(a: &DiracChain, v: &[f64]) -> Result<DiracChain> {
    if v.len() != a.n() {
        return Err(ChainError::Dimension(
            "retraction direction has the wrong dimension".into(),
        ));
    }
    map_elements(a, |e, out| out.extend(retract_elem(e, v)))
}

/// Prederivative `P_v A`: raises order by one in the direction `v`.
pub fn prederivative(a: &DiracChain, v: &[f64]) -> Result<DiracChain> {
    if v.len() != a.n() {
        return Err(ChainError::Dimension(
            "prederivative direction has the wrong dimension".into(),
        ));
    }
    map_elements(a, |e, out| prederiv_elem(e, v, out))
}

/// Boundary `boundary = sum_i P_{e_i} E_{e_i}^dagger`, dual to `d`.
pub fn boundary(a: &DiracChain) -> Result<DiracChain> {
    map_elements(a, boundary_elems)
}

/// Directional boundary `P_v E_v^dagger`, dual to `v^flat ^ L_v`.
pub fn dir_boundary(a: &DiracChain, v: &[f64]) -> Result<DiracChain> {
    prederivative(&retract(a, v)?, v)
}

/// Perpendicular complement, dual to the Hodge star.
pub fn perp(a: &DiracChain) -> Result<DiracChain> {
    map_elements(a, |e, out| out.push(perp_elem(e)))
}

/// Geometric coboundary `perp . boundary . perp`, dual to `star d star`.
pub fn coboundary(a: &DiracChain) -> Result<DiracChain> {
    perp(&boundary(&perp(a)?)?)
}

/// Geometric Laplace operator `coboundary . boundary + boundary . coboundary`.
pub fn laplace(a: &DiracChain) -> Result<DiracChain> {
    let x = coboundary(&boundary(a)?)?;
    let y = boundary(&coboundary(a)?)?;
    x.add_chain(&y)
}

/// Geometric Dirac operator `boundary + coboundary`.
pub fn geometric_dirac(a: &DiracChain) -> Result<DiracChain> {
    boundary(a)?.add_chain(&coboundary(a)?)
}

/// Clifford multiplication `C_v = E_v + E_v^dagger`; `C_v^2 = <v,v> I`.
pub fn clifford(a: &DiracChain, v: &[f64]) -> Result<DiracChain> {
    extrude(a, v)?.add_chain(&retract(a, v)?)
}

/// Forward difference `T_u A - A` (the order-1 difference chain direction).
pub fn difference(a: &DiracChain, u: &[f64]) -> Result<DiracChain> {
    a.translate(u)?.sub_chain(a)
}

/// Multiplication by a smooth function (0-form) of any supported family.
pub fn multiply(a: &DiracChain, f: &Form) -> Result<DiracChain> {
    if f.grade() != 0 {
        return Err(ChainError::Grade(
            "chain multiplication needs a 0-form".into(),
        ));
    }
    if f.n() != a.n() {
        return Err(ChainError::Dimension(
            "scalar field and chain dimension mismatch".into(),
        ));
    }
    let mut out = Vec::with_capacity(a.elements().len());
    for e in a.elements() {
        m_form_elems(&e.point, &e.sym, &e.kv, f, &mut out)?;
    }
    DiracChain::new(a.n(), out)
}

/// Multiplication by a polynomial (fast path used by the field operators).
pub fn multiply_poly(a: &DiracChain, f: &Poly) -> Result<DiracChain> {
    if f.n() != a.n() {
        return Err(ChainError::Dimension(
            "polynomial and chain dimension mismatch".into(),
        ));
    }
    let mut out = Vec::with_capacity(a.elements().len());
    for e in a.elements() {
        m_poly_elems(&e.point, &e.sym, &e.kv, f, &mut out);
    }
    DiracChain::new(a.n(), out)
}

fn scalar_value(f: &Form, p: &Vecn) -> Result<f64> {
    let e = ChainElement::order_zero(p.clone(), KVector::scalar(p.len(), 1.0)?);
    f.eval_element(&e)
}

fn m_form_elems(
    point: &Vecn,
    sym: &[u8],
    kv: &KVector,
    f: &Form,
    out: &mut Vec<ChainElement>,
) -> Result<()> {
    if sym.is_empty() {
        let c = scalar_value(f, point)?;
        if c != 0.0 {
            out.push(ChainElement {
                point: point.clone(),
                sym: SymMono::new(),
                kv: kv.scale(c),
            });
        }
        return Ok(());
    }
    let i = sym[0];
    let mut inner = Vec::new();
    m_form_elems(point, &sym[1..], kv, f, &mut inner)?;
    for mut e in inner {
        e.sym = insert_axis(&e.sym, i);
        out.push(e);
    }
    m_form_elems(point, &sym[1..], kv, &f.partial(i as usize)?, out)
}

// ---------------------------------------------------------------------------
// Vector-field operators
// ---------------------------------------------------------------------------

/// Field extrusion `E_V = sum_i m_{V_i} E_{e_i}`; on order-0 elements this is
/// `(p; alpha) -> (p; V(p) ^ alpha)`.
pub fn extrude_field(a: &DiracChain, v: &VectorField) -> Result<DiracChain> {
    if v.n() != a.n() {
        return Err(ChainError::Dimension(
            "field and chain dimension mismatch".into(),
        ));
    }
    let n = a.n();
    let mut out = Vec::new();
    for e in a.elements() {
        for i in 0..n {
            let mut axis = vec![0.0; n];
            axis[i] = 1.0;
            let kv_axis = KVector::from_vector(n, &axis)?;
            if let Some(ext) = extrude_elem(e, &kv_axis) {
                m_poly_elems(&ext.point, &ext.sym, &ext.kv, &v.comps()[i], &mut out);
            }
        }
    }
    DiracChain::new(n, out)
}

/// Field retraction `E_V^dagger = sum_i m_{V_i} E_{e_i}^dagger`.
pub fn retract_field(a: &DiracChain, v: &VectorField) -> Result<DiracChain> {
    if v.n() != a.n() {
        return Err(ChainError::Dimension(
            "field and chain dimension mismatch".into(),
        ));
    }
    let n = a.n();
    let mut out = Vec::new();
    for e in a.elements() {
        if e.grade() == 0 {
            continue;
        }
        for i in 0..n {
            let kv = e.kv.retract_axis(i);
            if kv.is_zero() {
                continue;
            }
            m_poly_elems(&e.point, &e.sym, &kv, &v.comps()[i], &mut out);
        }
    }
    DiracChain::new(n, out)
}

/// Field prederivative `P_V := boundary . E_V + E_V . boundary`, dual to the
/// Lie derivative.
pub fn prederivative_field(a: &DiracChain, v: &VectorField) -> Result<DiracChain> {
    let x = boundary(&extrude_field(a, v)?)?;
    let y = extrude_field(&boundary(a)?, v)?;
    x.add_chain(&y)
}

// ---------------------------------------------------------------------------
// Pushforward and Cartesian wedge
// ---------------------------------------------------------------------------

/// Pushforward `F_* A`. Order-0 elements map under any smooth map as
/// `(p; alpha) -> (F(p); DF_p alpha)`; elements of order >= 1 are supported
/// for affine maps only (their dipole directions transform linearly), and
/// rejected otherwise rather than silently approximated.
pub fn pushforward(map: &SmoothMap, a: &DiracChain) -> Result<DiracChain> {
    if map.n_in() != a.n() {
        return Err(ChainError::Dimension(format!(
            "map expects dimension {}, chain has {}",
            map.n_in(),
            a.n()
        )));
    }
    let mut out = Vec::new();
    for e in a.elements() {
        let q = map.eval(&e.point);
        let kv = map.pushforward_kv(&e.point, &e.kv)?;
        if kv.is_zero() {
            continue;
        }
        if e.order() == 0 {
            out.push(ChainElement::order_zero(q, kv));
        } else {
            if !map.is_affine() {
                return Err(ChainError::Unsupported(
                    "pushforward of elements of order >= 1 needs an affine map".into(),
                ));
            }
            let jac = map.jacobian(&e.point);
            let factors: Vec<Vecn> = e
                .sym
                .iter()
                .map(|&ax| jac.iter().map(|row| row[ax as usize]).collect())
                .collect();
            out.extend(expand_sym_factors(&q, &factors, &kv));
        }
    }
    DiracChain::new(map.n_out(), out)
}

/// Cartesian wedge product: `(p; sym (x) a) x (q; tau (x) b)` is the element
/// at `(p, q)` whose dipole monomial concatenates the factors (second factor
/// shifted) and whose k-vector is the wedge of the embedded k-vectors.
pub fn cartesian(a: &DiracChain, b: &DiracChain) -> Result<DiracChain> {
    let (na, nb) = (a.n(), b.n());
    let n = na + nb;
    if n > crate::multivec::MAX_DIM {
        return Err(ChainError::Dimension(format!(
            "cartesian product dimension {n} exceeds the supported maximum"
        )));
    }
    let mut out = Vec::new();
    for ea in a.elements() {
        for eb in b.elements() {
            let mut point = ea.point.clone();
            point.extend(eb.point.iter().copied());
            let mut sym = ea.sym.clone();
            sym.extend(eb.sym.iter().map(|&ax| ax + na as u8));
            // All first-factor axes precede the shifted second-factor axes,
            // so the embedded wedge has no inversions: signs are products.
            let mut kv = KVector::zero(n, ea.grade() + eb.grade())?;
            for (ma, ca) in ea.kv.terms() {
                for (mb, cb) in eb.kv.terms() {
                    let term = KVector::term(n, ma | (mb << na), ca * cb)?;
                    kv = kv.add_kv(&term)?;
                }
            }
            if kv.is_zero() {
                continue;
            }
            out.push(ChainElement { point, sym, kv });
        }
    }
    DiracChain::new(n, out)
}

// ---------------------------------------------------------------------------
// Operator pipeline specifications (CLI scenarios)
// ---------------------------------------------------------------------------

/// One named operator in a scenario pipeline, e.g.
/// `["boundary", {"extrude": {"v": [0, 1]}}, "perp"]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OpSpec {
    Boundary,
    Perp,
    Coboundary,
    Laplace,
    GeomDirac,
    Extrude { v: Vec<f64> },
    Retract { v: Vec<f64> },
    Prederivative { v: Vec<f64> },
    DirBoundary { v: Vec<f64> },
    Clifford { v: Vec<f64> },
    Translate { v: Vec<f64> },
    Difference { v: Vec<f64> },
    Scale { c: f64 },
    Multiply { form: Form },
    ExtrudeField { field: VectorField },
    RetractField { field: VectorField },
    PrederivativeField { field: VectorField },
    Pushforward { map: SmoothMap },
}

impl OpSpec {
    pub fn apply(&self, a: &DiracChain) -> Result<DiracChain> {
        match self {
            OpSpec::Boundary => boundary(a),
            OpSpec::Perp => perp(a),
            OpSpec::Coboundary => coboundary(a),
            OpSpec::Laplace => laplace(a),
            OpSpec::GeomDirac => geometric_dirac(a),
            OpSpec::Extrude { v } => extrude(a, v),
            OpSpec::Retract { v } => retract(a, v),
            OpSpec::Prederivative { v } => prederivative(a, v),
            OpSpec::DirBoundary { v } => dir_boundary(a, v),
            OpSpec::Clifford { v } => clifford(a, v),
            OpSpec::Translate { v } => a.translate(v),
            OpSpec::Difference { v } => difference(a, v),
            OpSpec::Scale { c } => Ok(a.scale(*c)),
            OpSpec::Multiply { form } => multiply(a, form),
            OpSpec::ExtrudeField { field } => extrude_field(a, field),
            OpSpec::RetractField { field } => retract_field(a, field),
            OpSpec::PrederivativeField { field } => prederivative_field(a, field),
            OpSpec::Pushforward { map } => pushforward(map, a),
        }
    }
}

/// Applies a pipeline left to right.
pub fn apply_pipeline(ops: &[OpSpec], a: &DiracChain) -> Result<DiracChain> {
    let mut cur = a.clone();
    for op in ops {
        cur = op.apply(&cur)?;
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multivec::vecn;

    fn kv(n: usize, idx: &[usize], c: f64) -> KVector {
        if idx.is_empty() {
            KVector::scalar(n, c).unwrap()
        } else {
            KVector::basis_blade(n, idx, c).unwrap()
        }
    }

    fn elem(p: &[f64], sym: &[u8], k: KVector) -> ChainElement {
        ChainElement::new(vecn(p), SymMono::from_slice(sym), k)
    }

    /// A fixed mixed-order chain in R^3 exercising all grades.
    fn mixed_chain() -> DiracChain {
        DiracChain::new(
            3,
            vec![
                elem(&[0.3, -0.2, 0.9], &[], kv(3, &[1, 2], 1.5)),
                elem(&[-1.0, 0.4, 0.2], &[0], kv(3, &[2], -0.7)),
                elem(&[0.5, 0.5, -0.5], &[1, 2], kv(3, &[1, 2, 3], 0.4)),
                elem(&[0.3, -0.2, 0.9], &[], kv(3, &[3], 2.0)),
            ],
        )
        .unwrap()
    }

    fn discrepancy(a: &DiracChain, b: &DiracChain) -> f64 {
        a.sub_chain(b).unwrap().total_mass()
    }

    #[test]
    fn boundary_of_plane_element() {
        // boundary(p; e1^e2) = (p; {0} (x) e2) - (p; {1} (x) e1).
        let a = DiracChain::singleton(&[0.0, 0.0], kv(2, &[1, 2], 1.0)).unwrap();
        let b = boundary(&a).unwrap();
        let expect = DiracChain::new(
            2,
            vec![
                elem(&[0.0, 0.0], &[0], kv(2, &[2], 1.0)),
                elem(&[0.0, 0.0], &[1], kv(2, &[1], -1.0)),
            ],
        )
        .unwrap();
        assert_eq!(discrepancy(&b, &expect), 0.0);
    }

    #[test]
    fn boundary_squared_is_zero() {
        let bb = boundary(&boundary(&mixed_chain()).unwrap()).unwrap();
        assert!(bb.is_zero(), "residual {}", bb.total_mass());
    }

    #[test]
    fn cartan_anticommutator_is_exact() {
        // {boundary, E_v} = P_v, element-for-element after canonicalization.
        let a = mixed_chain();
        let v = [0.3, -1.2, 0.5];
        let lhs = boundary(&extrude(&a, &v).unwrap())
            .unwrap()
            .add_chain(&extrude(&boundary(&a).unwrap(), &v).unwrap())
            .unwrap();
        let rhs = prederivative(&a, &v).unwrap();
        assert_eq!(discrepancy(&lhs, &rhs), 0.0);
    }

    #[test]
    fn car_and_clifford() {
        let a = mixed_chain();
        let (v, w) = ([0.2, 0.9, -0.4], [1.0, 0.0, 2.0]);
        // {E_v, E_w^dagger} = <v,w> I.
        let lhs = retract(&extrude(&a, &v).unwrap(), &w)
            .unwrap()
            .add_chain(&extrude(&retract(&a, &w).unwrap(), &v).unwrap())
            .unwrap();
        let vw: f64 = v.iter().zip(&w).map(|(x, y)| x * y).sum();
        assert!(discrepancy(&lhs, &a.scale(vw)) < 1e-15);
        // C_v^2 = <v,v> I.
        let cv2 = clifford(&clifford(&a, &v).unwrap(), &v).unwrap();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        assert!(discrepancy(&cv2, &a.scale(vv)) < 1e-15);
    }

    #[test]
    fn constant_direction_commutators_vanish() {
        let a = mixed_chain();
        let (v, w) = ([0.7, -0.1, 0.3], [-0.5, 0.8, 0.2]);
        // The cancelling products are associated in different orders, so
        // the residue is at the ulp level rather than exactly zero.
        let pv_pw = prederivative(&prederivative(&a, &w).unwrap(), &v).unwrap();
        let pw_pv = prederivative(&prederivative(&a, &v).unwrap(), &w).unwrap();
        assert!(discrepancy(&pv_pw, &pw_pv) < 1e-14);
        let ev_pw = extrude(&prederivative(&a, &w).unwrap(), &v).unwrap();
        let pw_ev = prederivative(&extrude(&a, &v).unwrap(), &w).unwrap();
        assert!(discrepancy(&ev_pw, &pw_ev) < 1e-14);
        let et_pw = retract(&prederivative(&a, &w).unwrap(), &v).unwrap();
        let pw_et = prederivative(&retract(&a, &v).unwrap(), &w).unwrap();
        assert!(discrepancy(&et_pw, &pw_et) < 1e-14);
    }

    #[test]
    fn coboundary_squares_to_zero_and_perp_involutes() {
        let a = mixed_chain();
        let cc = coboundary(&coboundary(&a).unwrap()).unwrap();
        assert!(cc.is_zero());
        // perp . perp = (-1)^{k(n-k)} per grade; on a single-grade chain it
        // is a global sign.
        let g1 = DiracChain::singleton(&[0.1, 0.2, 0.3], kv(3, &[2], 1.0)).unwrap();
        let pp = perp(&perp(&g1).unwrap()).unwrap();
        assert_eq!(discrepancy(&pp, &g1), 0.0);
    }

    #[test]
    fn boundary_dual_to_exterior_derivative() {
        // omega(boundary A) = d omega(A) for a polynomial 2-form on R^3.
        let a = mixed_chain();
        let w = Form::poly_from_terms(
            3,
            2,
            &[
                (vec![1, 2], vec![1, 0, 2], 0.8),
                (vec![1, 3], vec![0, 1, 0], -1.1),
                (vec![2, 3], vec![2, 1, 0], 0.3),
            ],
        )
        .unwrap();
        // Pair dw with the full chain, w with its boundary: only grade-3 and
        // grade-2 parts participate respectively.
        let dw = w.exterior_d().unwrap();
        let lhs = w.eval_chain(&boundary(&a).unwrap()).unwrap();
        let rhs = dw.eval_chain(&a).unwrap();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn perp_dual_to_hodge() {
        let a = mixed_chain();
        let w = Form::poly_from_terms(
            3,
            1,
            &[(vec![1], vec![1, 1, 0], 0.9), (vec![3], vec![0, 0, 2], 0.5)],
        )
        .unwrap();
        let lhs = w.eval_chain(&perp(&a).unwrap()).unwrap();
        let rhs = w.hodge().unwrap().eval_chain(&a).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn prederivative_dual_to_directional_derivative() {
        let a = mixed_chain();
        let v = [0.6, -0.2, 1.0];
        let w = Form::poly_from_terms(
            3,
            2,
            &[(vec![1, 2], vec![2, 1, 0], 1.0), (vec![2, 3], vec![0, 0, 1], -0.4)],
        )
        .unwrap();
        let lhs = w.eval_chain(&prederivative(&a, &v).unwrap()).unwrap();
        let rhs = w.dir_deriv(&v).unwrap().eval_chain(&a).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn multiplication_recursion_example() {
        // m_f(p; v (x) alpha) = f(p)(p; v (x) alpha) + (L_v f)(p)(p; alpha)
        // for an axis dipole v = e1 and f = x.
        let x = Poly::coordinate(2, 0);
        let a = DiracChain::new(
            2,
            vec![elem(&[0.7, -0.3], &[0], kv(2, &[2], 1.0))],
        )
        .unwrap();
        let got = multiply_poly(&a, &x).unwrap();
        let expect = DiracChain::new(
            2,
            vec![
                elem(&[0.7, -0.3], &[0], kv(2, &[2], 0.7)),
                elem(&[0.7, -0.3], &[], kv(2, &[2], 1.0)),
            ],
        )
        .unwrap();
        assert_eq!(discrepancy(&got, &expect), 0.0);
    }

    #[test]
    fn multiplication_dual_to_form_multiplication() {
        let a = mixed_chain();
        let f = Poly::monomial(3, &[2, 1, 0], 1.0)
            .unwrap()
            .add(&Poly::constant(3, 0.5));
        let w = Form::poly_from_terms(
            3,
            2,
            &[(vec![1, 2], vec![0, 1, 1], 1.0), (vec![1, 3], vec![1, 0, 0], 2.0)],
        )
        .unwrap();
        let lhs = w.eval_chain(&multiply_poly(&a, &f).unwrap()).unwrap();
        let rhs = w.multiply_poly(&f).unwrap().eval_chain(&a).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn field_extrusion_dual_to_interior_product() {
        let a = mixed_chain();
        let v = VectorField::new(vec![
            Poly::monomial(3, &[0, 1, 0], 1.0).unwrap(),
            Poly::monomial(3, &[1, 0, 1], -2.0).unwrap(),
            Poly::constant(3, 0.7),
        ])
        .unwrap();
        let w = Form::poly_from_terms(
            3,
            3,
            &[(vec![1, 2, 3], vec![1, 1, 0], 1.0)],
        )
        .unwrap();
        let lhs = w.eval_chain(&extrude_field(&a, &v).unwrap()).unwrap();
        let rhs = w.interior(&v).unwrap().eval_chain(&a).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn field_retraction_dual_to_flat_wedge() {
        let a = mixed_chain();
        let v = VectorField::new(vec![
            Poly::monomial(3, &[0, 0, 1], 0.4).unwrap(),
            Poly::constant(3, -1.0),
            Poly::monomial(3, &[1, 0, 0], 1.0).unwrap(),
        ])
        .unwrap();
        let w = Form::poly_from_terms(
            3,
            1,
            &[(vec![2], vec![1, 0, 1], 1.0), (vec![3], vec![0, 2, 0], -0.6)],
        )
        .unwrap();
        let lhs = w.eval_chain(&retract_field(&a, &v).unwrap()).unwrap();
        let rhs = w.flat_wedge(&v).unwrap().eval_chain(&a).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn field_prederivative_dual_to_lie_derivative() {
        let a = mixed_chain();
        let v = VectorField::new(vec![
            Poly::monomial(3, &[0, 1, 0], 1.0).unwrap(),
            Poly::monomial(3, &[1, 0, 0], -1.0).unwrap(),
            Poly::monomial(3, &[0, 0, 2], 0.5).unwrap(),
        ])
        .unwrap();
        let w = Form::poly_from_terms(
            3,
            2,
            &[(vec![1, 2], vec![1, 0, 1], 1.0), (vec![2, 3], vec![0, 1, 0], 0.9)],
        )
        .unwrap();
        let lhs = w.eval_chain(&prederivative_field(&a, &v).unwrap()).unwrap();
        let rhs = w.lie(&v).unwrap().eval_chain(&a).unwrap();
        assert!((lhs - rhs).abs() < 1e-11);
    }

    #[test]
    fn field_commutators_take_their_derived_form() {
        // Order-0 grade-1 chain in R^2, two non-commuting polynomial fields.
        let a = DiracChain::new(
            2,
            vec![
                elem(&[0.4, -0.9], &[], kv(2, &[1], 1.0)),
                elem(&[-0.3, 0.2], &[], kv(2, &[2], -0.8)),
            ],
        )
        .unwrap();
        let v1 = VectorField::new(vec![
            Poly::monomial(2, &[1, 1], 1.0).unwrap(),
            Poly::monomial(2, &[0, 2], -0.5).unwrap(),
        ])
        .unwrap();
        let v2 = VectorField::new(vec![
            Poly::monomial(2, &[0, 1], 2.0).unwrap(),
            Poly::monomial(2, &[1, 0], 1.0).unwrap(),
        ])
        .unwrap();
        let bracket = v1.bracket(&v2).unwrap();

        // [P_V1, P_V2] = P_[V2,V1] (preduality reverses composition).
        let p12 = prederivative_field(&prederivative_field(&a, &v2).unwrap(), &v1).unwrap();
        let p21 = prederivative_field(&prederivative_field(&a, &v1).unwrap(), &v2).unwrap();
        let lhs = p12.sub_chain(&p21).unwrap();
        let rhs = prederivative_field(&a, &bracket.scale_field(-1.0)).unwrap();
        assert!(discrepancy(&lhs, &rhs) < 1e-12);

        // [E_V2, P_V1] = E_[V1,V2] (Cartan, holds for all fields).
        let e2p1 = extrude_field(&prederivative_field(&a, &v1).unwrap(), &v2).unwrap();
        let p1e2 = prederivative_field(&extrude_field(&a, &v2).unwrap(), &v1).unwrap();
        let lhs = e2p1.sub_chain(&p1e2).unwrap();
        let rhs = extrude_field(&a, &bracket).unwrap();
        assert!(discrepancy(&lhs, &rhs) < 1e-12);

        // [E_V2^dagger, P_V1] = E^dagger of [V1,V2] + (DV1 + DV1^T) V2:
        // the metric correction vanishes exactly for isometric flows.
        let t2p1 = retract_field(&prederivative_field(&a, &v1).unwrap(), &v2).unwrap();
        let p1t2 = prederivative_field(&retract_field(&a, &v2).unwrap(), &v1).unwrap();
        let lhs = t2p1.sub_chain(&p1t2).unwrap();
        let corrected = bracket.add_field(&v1.symmetrized_jacobian_apply(&v2).unwrap()).unwrap();
        let rhs = retract_field(&a, &corrected).unwrap();
        assert!(discrepancy(&lhs, &rhs) < 1e-12);

        // Rigid V1 (rotation): the literal retraction commutator identity.
        let rot = VectorField::rotation2();
        let t2p1 = retract_field(&prederivative_field(&a, &rot).unwrap(), &v2).unwrap();
        let p1t2 = prederivative_field(&retract_field(&a, &v2).unwrap(), &rot).unwrap();
        let lhs = t2p1.sub_chain(&p1t2).unwrap();
        let rhs = retract_field(&a, &rot.bracket(&v2).unwrap()).unwrap();
        assert!(discrepancy(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn field_car_is_multiplication_by_inner_product() {
        let a = mixed_chain();
        let v1 = VectorField::new(vec![
            Poly::monomial(3, &[0, 1, 0], 1.0).unwrap(),
            Poly::constant(3, 2.0),
            Poly::monomial(3, &[0, 0, 1], -1.0).unwrap(),
        ])
        .unwrap();
        let v2 = VectorField::new(vec![
            Poly::constant(3, 0.5),
            Poly::monomial(3, &[1, 0, 0], 1.0).unwrap(),
            Poly::monomial(3, &[0, 1, 0], 3.0).unwrap(),
        ])
        .unwrap();
        let lhs = retract_field(&extrude_field(&a, &v1).unwrap(), &v2)
            .unwrap()
            .add_chain(&extrude_field(&retract_field(&a, &v2).unwrap(), &v1).unwrap())
            .unwrap();
        let mut inner = Poly::zero(3);
        for i in 0..3 {
            inner = inner.add(&v1.comps()[i].mul(&v2.comps()[i]));
        }
        let rhs = multiply_poly(&a, &inner).unwrap();
        assert!(discrepancy(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn pushforward_duality_and_affine_orders() {
        // Quadratic map on an order-0 chain: F_* dual to F^*.
        let f = SmoothMap::Poly {
            comps: vec![
                Poly::monomial(2, &[2, 0], 1.0).unwrap(),
                Poly::monomial(2, &[1, 1], 1.0).unwrap(),
            ],
            n_in: 2,
        };
        let a = DiracChain::new(
            2,
            vec![
                elem(&[0.8, 0.3], &[], kv(2, &[1], 1.0)),
                elem(&[-0.2, 0.5], &[], kv(2, &[2], 2.0)),
            ],
        )
        .unwrap();
        let w = Form::poly_from_terms(2, 1, &[(vec![2], vec![1, 0], 1.0)]).unwrap();
        let lhs = w.eval_chain(&pushforward(&f, &a).unwrap()).unwrap();
        let rhs = w.pullback(&f).unwrap().eval_chain(&a).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        // Affine map on an order-1 chain: duality still holds.
        let aff = SmoothMap::Affine {
            linear: vec![vecn(&[1.0, 2.0]), vecn(&[0.0, 1.0])],
            shift: vecn(&[0.3, -0.7]),
        };
        let a1 = DiracChain::new(
            2,
            vec![elem(&[0.1, 0.9], &[1], kv(2, &[1], 1.0))],
        )
        .unwrap();
        let lhs = w.eval_chain(&pushforward(&aff, &a1).unwrap()).unwrap();
        let rhs = w.pullback(&aff).unwrap().eval_chain(&a1).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        // Non-affine on order >= 1 is rejected.
        assert!(pushforward(&f, &a1).is_err());
    }

    #[test]
    fn cartesian_wedge_and_leibniz_boundary() {
        // (p; e1) x (q; e1') = ((p,q); e1 ^ e3).
        let a = DiracChain::singleton(&[1.0, 2.0], kv(2, &[1], 1.0)).unwrap();
        let b = DiracChain::singleton(&[3.0], kv(1, &[1], 1.0)).unwrap();
        let ab = cartesian(&a, &b).unwrap();
        let expect =
            DiracChain::singleton(&[1.0, 2.0, 3.0], kv(3, &[1, 3], 1.0)).unwrap();
        assert_eq!(discrepancy(&ab, &expect), 0.0);

        // boundary(J x K) = boundary J x K + (-1)^k J x boundary K onplane
        // elements (k = 2).
        let j = DiracChain::singleton(&[0.2, -0.4], kv(2, &[1, 2], 1.0)).unwrap();
        let k = DiracChain::singleton(&[0.5], kv(1, &[1], 2.0)).unwrap();
        let lhs = boundary(&cartesian(&j, &k).unwrap()).unwrap();
        let rhs = cartesian(&boundary(&j).unwrap(), &k)
            .unwrap()
            .add_chain(&cartesian(&j, &boundary(&k).unwrap()).unwrap())
            .unwrap();
        assert_eq!(discrepancy(&lhs, &rhs), 0.0);

        // Pairing factorizes: (pi1* w ^ pi2* eta)(J x K) = w(J) eta(K) for
        // blade forms.
        let w3 = Form::poly_from_terms(
            3,
            3,
            &[(vec![1, 2, 3], vec![1, 0, 0], 1.0)],
        )
        .unwrap();
        let val = w3.eval_chain(&cartesian(&j, &k).unwrap()).unwrap();
        // x dxdyd z on ((0.2,-0.4,0.5); 2 e123) = 0.2 * 2.
        assert!((val - 0.4).abs() < 1e-14);
    }

    #[test]
    fn difference_quotient_converges_to_prederivative() {
        // ||(T_{tv} - I)/t - P_v|| paired against a fixed form is O(t).
        let a = DiracChain::singleton(&[0.2, 0.7], kv(2, &[1], 1.0)).unwrap();
        let v = [0.3, -0.8];
        let w = Form::poly_from_terms(2, 1, &[(vec![1], vec![2, 1], 1.0)]).unwrap();
        let exact = w
            .eval_chain(&prederivative(&a, &v).unwrap())
            .unwrap();
        let resid = |t: f64| {
            let tv = [t * v[0], t * v[1]];
            let dq = difference(&a, &tv).unwrap().scale(1.0 / t);
            (w.eval_chain(&dq).unwrap() - exact).abs()
        };
        let (r1, r2) = (resid(1e-3), resid(5e-4));
        assert!(r2 < 0.6 * r1, "no first-order decay: {r1} -> {r2}");
    }

    #[test]
    fn pipeline_roundtrip() {
        let json = r#"["boundary",{"extrude":{"v":[0.0,1.0]}},"perp"]"#;
        let ops: Vec<OpSpec> = serde_json::from_str(json).unwrap();
        assert_eq!(ops.len(), 3);
        let emitted = serde_json::to_string(&ops).unwrap();
        let back: Vec<OpSpec> = serde_json::from_str(&emitted).unwrap();
        let a = DiracChain::singleton(&[0.1, 0.2], kv(2, &[1, 2], 1.0)).unwrap();
        let out1 = apply_pipeline(&ops, &a).unwrap();
        let out2 = apply_pipeline(&back, &a).unwrap();
        assert_eq!(discrepancy(&out1, &out2), 0.0);
        assert!(!out1.is_zero());
    }
}
