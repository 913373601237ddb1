//! Differential forms of bounded differentiability class, paired with chain
//! elements through iterated directional derivatives:
//! `omega(p; sigma (x) alpha) = L_sigma omega(p; alpha)`.
//!
//! Built-in families carry *exact* derivative closures — polynomial forms,
//! trigonometric forms, and compactly supported piecewise-polynomial bump
//! 0-forms (B-spline products, for partitions of unity) — so chain/form
//! duality tests are exact to rounding. Black-box forms fall back to central
//! finite differences with one Richardson step.
//!
//! Form-side operators (exterior derivative, Hodge star via the chain-side
//! perpendicular complement, interior product, flat-wedge, Lie derivative,
//! multiplication, pullback) are computed symbolically on the polynomial
//! family, giving the independent "other side" of every operator duality.

use crate::chain::{ChainElement, DiracChain, OpenRegion};
use crate::error::{ChainError, Result};
use crate::multivec::{dot, mask_to_indices, vecn, KVector, PairwiseSum, Vecn};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use smallvec::SmallVec;
use std::rc::Rc;

/// Exponent tuple of one monomial (length = ambient dimension).
pub type Exps = SmallVec<[u8; 4]>;

/// Order budget reported by infinitely differentiable families.
pub const ORDER_UNLIMITED: usize = usize::MAX / 2;

// ---------------------------------------------------------------------------
// Multivariate polynomials
// ---------------------------------------------------------------------------

/// Sparse multivariate polynomial over R^n, terms sorted by exponent tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    n: u8,
    terms: Vec<(Exps, f64)>,
}

impl Poly {
    pub fn zero(n: usize) -> Self {
        Self {
            n: n as u8,
            terms: Vec::new(),
        }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Self::zero(n);
        if c != 0.0 {
            p.terms.push((smallvec::smallvec![0; n], c));
        }
        p
    }

    /// Single monomial `c * x^exps`.
    pub fn monomial(n: usize, exps: &[u8], c: f64) -> Result<Self> {
        if exps.len() != n {
            return Err(ChainError::Dimension(format!(
                "monomial exponent tuple has length {} in dimension {n}",
                exps.len()
            )));
        }
        let mut p = Self::zero(n);
        if c != 0.0 {
            p.terms.push((Exps::from_slice(exps), c));
        }
        Ok(p)
    }

    /// The coordinate function `x_i` (0-based axis).
    pub fn coordinate(n: usize, i: usize) -> Self {
        let mut exps: Exps = smallvec::smallvec![0; n];
        exps[i] = 1;
        let mut p = Self::zero(n);
        p.terms.push((exps, 1.0));
        p
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[(Exps, f64)] {
        &self.terms
    }

    pub fn degree(&self) -> usize {
        self.terms
            .iter()
            .map(|(e, _)| e.iter().map(|&x| x as usize).sum())
            .max()
            .unwrap_or(0)
    }

    fn normal(mut terms: Vec<(Exps, f64)>, n: usize) -> Self {
        terms.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out: Vec<(Exps, f64)> = Vec::with_capacity(terms.len());
        for (e, c) in terms {
            if let Some(last) = out.last_mut() {
                if last.0 == e {
                    last.1 += c;
                    continue;
                }
            }
            out.push((e, c));
        }
        out.retain(|t| t.1 != 0.0);
        Self {
            n: n as u8,
            terms: out,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Self::normal(terms, self.n())
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero(self.n());
        }
        let mut p = self.clone();
        for t in &mut p.terms {
            t.1 *= c;
        }
        p
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Exps = ea.iter().zip(eb.iter()).map(|(x, y)| x + y).collect();
                terms.push((e, ca * cb));
            }
        }
        Self::normal(terms, self.n())
    }

    /// Partial derivative along 0-based axis `i`.
    pub fn partial(&self, i: usize) -> Self {
        let mut terms = Vec::new();
        for (e, c) in &self.terms {
            if e[i] == 0 {
                continue;
            }
            let mut d = e.clone();
            d[i] -= 1;
            terms.push((d, c * e[i] as f64));
        }
        Self::normal(terms, self.n())
    }

    /// Directional derivative along a constant vector.
    pub fn dir_deriv(&self, u: &[f64]) -> Self {
        let mut acc = Self::zero(self.n());
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                acc = acc.add(&self.partial(i).scale(ui));
            }
        }
        acc
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut v = *c;
            for (x, &d) in p.iter().zip(e.iter()) {
                v *= x.powi(d as i32);
            }
            acc += v;
        }
        acc
    }

    /// Evaluates the mixed partial `prod_i d^{d_i}/dx_i^{d_i}` at `p` without
    /// materializing the derivative polynomial (hot path for chain pairing).
    pub fn eval_partial(&self, d: &[u8], p: &[f64]) -> f64 {
        let mut acc = 0.0;
        'terms: for (e, c) in &self.terms {
            let mut v = *c;
            for i in 0..e.len() {
                let (ei, di) = (e[i] as i32, d[i] as i32);
                if ei < di {
                    continue 'terms;
                }
                // Falling factorial e*(e-1)*...*(e-d+1).
                for f in 0..di {
                    v *= (ei - f) as f64;
                }
                v *= p[i].powi(ei - di);
            }
            acc += v;
        }
        acc
    }

    /// Substitutes `x_i := gs[i]`, producing the composite polynomial.
    pub fn compose(&self, gs: &[Poly]) -> Result<Self> {
        if gs.len() != self.n() {
            return Err(ChainError::Dimension(format!(
                "composition needs {} inner polynomials, got {}",
                self.n(),
                gs.len()
            )));
        }
        let m = gs.first().map(|g| g.n()).unwrap_or(0);
        let mut acc = Poly::zero(m);
        for (e, c) in &self.terms {
            let mut term = Poly::constant(m, *c);
            for (i, &d) in e.iter().enumerate() {
                for _ in 0..d {
                    term = term.mul(&gs[i]);
                }
            }
            acc = acc.add(&term);
        }
        Ok(acc)
    }

    /// Certified bound on `sup |self|` over the closed box `[lo, hi]`
    /// (interval-arithmetic style: sum of per-term maxima).
    pub fn sup_abs_box(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut v = c.abs();
            for i in 0..e.len() {
                let m = lo[i].abs().max(hi[i].abs());
                v *= m.powi(e[i] as i32);
            }
            acc += v;
        }
        acc
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolyTermRepr {
    exps: Vec<u8>,
    c: f64,
}

impl Serialize for Poly {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<PolyTermRepr> = self
            .terms
            .iter()
            .map(|(e, c)| PolyTermRepr {
                exps: e.to_vec(),
                c: *c,
            })
            .collect();
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Poly {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<PolyTermRepr>::deserialize(d)?;
        let n = v
            .first()
            .map(|t| t.exps.len())
            .ok_or_else(|| D::Error::custom("polynomial needs at least one term"))?;
        let mut terms = Vec::with_capacity(v.len());
        for t in &v {
            if t.exps.len() != n {
                return Err(D::Error::custom("inconsistent exponent tuple lengths"));
            }
            terms.push((Exps::from_slice(&t.exps), t.c));
        }
        Ok(Poly::normal(terms, n))
    }
}

// ---------------------------------------------------------------------------
// Polynomial forms
// ---------------------------------------------------------------------------

/// A k-form with polynomial coefficients: `sum_I g_I de_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyForm {
    n: u8,
    grade: u8,
    /// Sorted by blade mask.
    comps: Vec<(u32, Poly)>,
}

impl PolyForm {
    pub fn zero(n: usize, grade: usize) -> Self {
        Self {
            n: n as u8,
            grade: grade as u8,
            comps: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn grade(&self) -> usize {
        self.grade as usize
    }

    pub fn comps(&self) -> &[(u32, Poly)] {
        &self.comps
    }

    fn normal(n: usize, grade: usize, mut comps: Vec<(u32, Poly)>) -> Self {
        comps.sort_by_key(|c| c.0);
        let mut out: Vec<(u32, Poly)> = Vec::with_capacity(comps.len());
        for (m, g) in comps {
            if let Some(last) = out.last_mut() {
                if last.0 == m {
                    last.1 = last.1.add(&g);
                    continue;
                }
            }
            out.push((m, g));
        }
        out.retain(|c| !c.1.is_zero());
        Self {
            n: n as u8,
            grade: grade as u8,
            comps: out,
        }
    }

    /// Builds from (1-based blade tuple, coefficient polynomial) pairs.
    pub fn from_components(n: usize, grade: usize, comps: Vec<(Vec<usize>, Poly)>) -> Result<Self> {
        let mut raw = Vec::with_capacity(comps.len());
        for (idx, g) in comps {
            if idx.len() != grade {
                return Err(ChainError::Grade(format!(
                    "blade tuple {idx:?} does not match grade {grade}"
                )));
            }
            if g.n() != n {
                return Err(ChainError::Dimension(
                    "coefficient polynomial dimension mismatch".into(),
                ));
            }
            // Reuse KVector's tuple validation and sign normalization.
            let kv = KVector::basis_blade(n, &idx, 1.0)?;
            let (mask, sign) = kv.terms().next().map(|(m, c)| (m, c)).unwrap_or((0, 1.0));
            raw.push((mask, g.scale(sign)));
        }
        Ok(Self::normal(n, grade, raw))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(ChainError::Dimension(
                "form sum needs equal dimension".into(),
            ));
        }
        // The zero form belongs to every grade.
        if self.grade != other.grade {
            if self.is_zero() {
                return Ok(other.clone());
            }
            if other.is_zero() {
                return Ok(self.clone());
            }
            return Err(ChainError::Grade(
                "form sum needs equal grade".into(),
            ));
        }
        let mut comps = self.comps.clone();
        comps.extend(other.comps.iter().cloned());
        Ok(Self::normal(self.n(), self.grade(), comps))
    }

    pub fn scale(&self, c: f64) -> Self {
        let comps = self
            .comps
            .iter()
            .map(|(m, g)| (*m, g.scale(c)))
            .collect::<Vec<_>>();
        Self::normal(self.n(), self.grade(), comps)
    }

    pub fn is_zero(&self) -> bool {
        self.comps.is_empty()
    }

    /// Exterior derivative `d(g de_I) = sum_i (d_i g) de_i ^ de_I`.
    pub fn exterior_d(&self) -> Self {
        let n = self.n();
        let mut comps = Vec::new();
        for (mask, g) in &self.comps {
            for i in 0..n {
                let bit = 1u32 << i;
                if mask & bit != 0 {
                    continue;
                }
                let gi = g.partial(i);
                if gi.is_zero() {
                    continue;
                }
                let sign = crate::multivec::merge_sign(bit, *mask);
                comps.push((mask | bit, gi.scale(sign)));
            }
        }
        Self::normal(n, self.grade() + 1, comps)
    }

    /// Hodge star through the chain-side perpendicular complement:
    /// `(star w)(p; alpha) := w(p; perp alpha)`.
    pub fn hodge(&self) -> Self {
        let n = self.n();
        let mut comps = Vec::new();
        for (mask, g) in &self.comps {
            let full: u32 = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
            let comp_mask = full & !mask;
            // Sign: coefficient of e_mask inside perp(e_comp_mask).
            let blade = if comp_mask == 0 {
                KVector::scalar(n, 1.0).expect("dim ok")
            } else {
                KVector::basis_blade(n, &mask_to_indices(comp_mask), 1.0).expect("dim ok")
            };
            let s = blade.perp().coeff(*mask);
            debug_assert!(s == 1.0 || s == -1.0);
            comps.push((comp_mask, g.scale(s)));
        }
        Self::normal(n, n - self.grade(), comps)
    }

    /// Lie derivative along a constant direction (coefficient-wise).
    pub fn dir_deriv(&self, u: &[f64]) -> Self {
        let comps = self
            .comps
            .iter()
            .map(|(m, g)| (*m, g.dir_deriv(u)))
            .collect::<Vec<_>>();
        Self::normal(self.n(), self.grade(), comps)
    }

    pub fn partial(&self, axis: usize) -> Self {
        let comps = self
            .comps
            .iter()
            .map(|(m, g)| (*m, g.partial(axis)))
            .collect::<Vec<_>>();
        Self::normal(self.n(), self.grade(), comps)
    }

    /// Interior product `(i_V w)(p; alpha) = w(p; V(p) ^ alpha)`.
    pub fn interior(&self, v: &VectorField) -> Result<Self> {
        if v.n() != self.n() {
            return Err(ChainError::Dimension(
                "vector field and form dimension mismatch".into(),
            ));
        }
        if self.grade() == 0 {
            return Ok(Self::zero(self.n(), 0));
        }
        let mut comps = Vec::new();
        for (mask, g) in &self.comps {
            // w_I de_I contributes to blades J = I minus {j}, j in I.
            let mut rest = *mask;
            while rest != 0 {
                let j = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                let bit = 1u32 << j;
                let jmask = mask & !bit;
                // e_j ^ e_J = sign * e_I.
                let sign = crate::multivec::merge_sign(bit, jmask);
                comps.push((jmask, g.mul(&v.comps()[j]).scale(sign)));
            }
        }
        Ok(Self::normal(self.n(), self.grade() - 1, comps))
    }

    /// Flat-wedge `V^flat ^ w = sum_j V_j de_j ^ w`.
    pub fn flat_wedge(&self, v: &VectorField) -> Result<Self> {
        if v.n() != self.n() {
            return Err(ChainError::Dimension(
                "vector field and form dimension mismatch".into(),
            ));
        }
        let n = self.n();
        let mut comps = Vec::new();
        for (mask, g) in &self.comps {
            for j in 0..n {
                let bit = 1u32 << j;
                if mask & bit != 0 {
                    continue;
                }
                let sign = crate::multivec::merge_sign(bit, *mask);
                let prod = g.mul(&v.comps()[j]);
                if prod.is_zero() {
                    continue;
                }
                comps.push((mask | bit, prod.scale(sign)));
            }
        }
        Ok(Self::normal(n, self.grade() + 1, comps))
    }

    /// Lie derivative along a polynomial field, via Cartan's magic formula
    /// `L_V = i_V d + d i_V`.
    pub fn lie(&self, v: &VectorField) -> Result<Self> {
        let a = self.exterior_d().interior(v)?;
        let b = self.interior(v)?.exterior_d();
        a.add(&b)
    }

    /// Multiplication by a polynomial 0-form.
    pub fn multiply(&self, f: &Poly) -> Self {
        let comps = self
            .comps
            .iter()
            .map(|(m, g)| (*m, g.mul(f)))
            .collect::<Vec<_>>();
        Self::normal(self.n(), self.grade(), comps)
    }

    /// Exterior product of polynomial forms.
    pub fn wedge(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(ChainError::Dimension("form wedge dimension mismatch".into()));
        }
        let mut comps = Vec::new();
        for (ma, ga) in &self.comps {
            for (mb, gb) in &other.comps {
                if ma & mb != 0 {
                    continue;
                }
                let sign = crate::multivec::merge_sign(*ma, *mb);
                comps.push((ma | mb, ga.mul(gb).scale(sign)));
            }
        }
        Ok(Self::normal(
            self.n(),
            self.grade() + other.grade(),
            comps,
        ))
    }

    /// Pullback under a polynomial (or affine) map `F: R^m -> R^n`:
    /// `F*(g de_I) = (g o F) dF_{i_1} ^ ... ^ dF_{i_k}`.
    pub fn pullback(&self, f: &SmoothMap) -> Result<Self> {
        let comps_f = f.poly_components().ok_or_else(|| {
            ChainError::Unsupported(
                "pullback is symbolic and needs a polynomial or affine map".into(),
            )
        })?;
        if comps_f.len() != self.n() {
            return Err(ChainError::Dimension(
                "map codomain does not match form dimension".into(),
            ));
        }
        let m = f.n_in();
        // dF_i as polynomial 1-forms over R^m.
        let df: Vec<PolyForm> = comps_f
            .iter()
            .map(|fi| {
                let comps = (0..m)
                    .map(|j| (1u32 << j, fi.partial(j)))
                    .collect::<Vec<_>>();
                PolyForm::normal(m, 1, comps)
            })
            .collect();
        let mut acc = PolyForm::zero(m, self.grade());
        for (mask, g) in &self.comps {
            let gof = g.compose(&comps_f)?;
            let mut wedgeprod = PolyForm {
                n: m as u8,
                grade: 0,
                comps: vec![(0, Poly::constant(m, 1.0))],
            };
            let mut rest = *mask;
            while rest != 0 {
                let i = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                wedgeprod = wedgeprod.wedge(&df[i])?;
            }
            acc = acc.add(&wedgeprod.multiply(&gof))?;
        }
        Ok(acc)
    }

    fn eval_element(&self, e: &ChainElement) -> f64 {
        let mut d: SmallVec<[u8; 8]> = smallvec::smallvec![0; self.n()];
        for &ax in &e.sym {
            d[ax as usize] += 1;
        }
        let mut acc = 0.0;
        for (mask, c) in e.kv.terms() {
            if let Ok(pos) = self.comps.binary_search_by_key(&mask, |t| t.0) {
                acc += self.comps[pos].1.eval_partial(&d, &e.point) * c;
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Trigonometric forms
// ---------------------------------------------------------------------------

/// One term `amp * sin(<freq, x> + phase) de_I`. Cosines are phase shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigTerm {
    pub mask: u32,
    pub amp: f64,
    pub freq: Vecn,
    pub phase: f64,
}

/// A k-form with sinusoidal coefficients; closed under d, directional
/// derivatives, and the Hodge star.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigForm {
    n: u8,
    grade: u8,
    terms: Vec<TrigTerm>,
}

impl TrigForm {
    pub fn new(n: usize, grade: usize, terms: Vec<TrigTerm>) -> Self {
        Self {
            n: n as u8,
            grade: grade as u8,
            terms,
        }
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn grade(&self) -> usize {
        self.grade as usize
    }

    fn eval_element(&self, e: &ChainElement) -> f64 {
        let m = e.sym.len();
        let mut acc = 0.0;
        for t in &self.terms {
            let kc = e.kv.coeff(t.mask);
            if kc == 0.0 {
                continue;
            }
            let mut v = t.amp;
            for &ax in &e.sym {
                v *= t.freq[ax as usize];
            }
            let theta =
                dot(&t.freq, &e.point) + t.phase + (m as f64) * std::f64::consts::FRAC_PI_2;
            acc += v * theta.sin() * kc;
        }
        acc
    }

    pub fn partial(&self, axis: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| TrigTerm {
                mask: t.mask,
                amp: t.amp * t.freq[axis],
                freq: t.freq.clone(),
                phase: t.phase + std::f64::consts::FRAC_PI_2,
            })
            .filter(|t| t.amp != 0.0)
            .collect();
        Self::new(self.n(), self.grade(), terms)
    }

    pub fn dir_deriv(&self, u: &[f64]) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| TrigTerm {
                mask: t.mask,
                amp: t.amp * dot(&t.freq, u),
                freq: t.freq.clone(),
                phase: t.phase + std::f64::consts::FRAC_PI_2,
            })
            .filter(|t| t.amp != 0.0)
            .collect();
        Self::new(self.n(), self.grade(), terms)
    }

    pub fn exterior_d(&self) -> Self {
        let n = self.n();
        let mut terms = Vec::new();
        for t in &self.terms {
            for i in 0..n {
                let bit = 1u32 << i;
                if t.mask & bit != 0 || t.freq[i] == 0.0 {
                    continue;
                }
                let sign = crate::multivec::merge_sign(bit, t.mask);
                terms.push(TrigTerm {
                    mask: t.mask | bit,
                    amp: t.amp * t.freq[i] * sign,
                    freq: t.freq.clone(),
                    phase: t.phase + std::f64::consts::FRAC_PI_2,
                });
            }
        }
        Self::new(n, self.grade() + 1, terms)
    }

    pub fn hodge(&self) -> Self {
        let n = self.n();
        let full: u32 = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let comp_mask = full & !t.mask;
                let blade = if comp_mask == 0 {
                    KVector::scalar(n, 1.0).expect("dim ok")
                } else {
                    KVector::basis_blade(n, &mask_to_indices(comp_mask), 1.0).expect("dim ok")
                };
                let s = blade.perp().coeff(t.mask);
                TrigTerm {
                    mask: comp_mask,
                    amp: t.amp * s,
                    freq: t.freq.clone(),
                    phase: t.phase,
                }
            })
            .collect();
        Self::new(n, n - self.grade(), terms)
    }
}

// ---------------------------------------------------------------------------
// Bump forms (compactly supported piecewise polynomials)
// ---------------------------------------------------------------------------

/// Univariate piecewise polynomial, zero outside `[breaks[0], breaks[last]]`.
/// Piece `j` is a polynomial in the local coordinate `x - breaks[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Piecewise1 {
    breaks: Vec<f64>,
    /// Coefficients ascending by degree, in local coordinates.
    pieces: Vec<Vec<f64>>,
}

impl Piecewise1 {
    pub fn new(breaks: Vec<f64>, pieces: Vec<Vec<f64>>) -> Result<Self> {
        if breaks.len() != pieces.len() + 1 {
            return Err(ChainError::Schema(
                "piecewise polynomial needs one more break than pieces".into(),
            ));
        }
        if breaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ChainError::Schema(
                "piecewise breaks must be strictly increasing".into(),
            ));
        }
        Ok(Self { breaks, pieces })
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x < self.breaks[0] || x > *self.breaks.last().unwrap() {
            return 0.0;
        }
        let mut j = match self
            .breaks
            .binary_search_by(|b| b.total_cmp(&x))
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if j >= self.pieces.len() {
            j = self.pieces.len() - 1;
        }
        let t = x - self.breaks[j];
        let mut v = 0.0;
        for &c in self.pieces[j].iter().rev() {
            v = v * t + c;
        }
        v
    }

    pub fn derivative(&self) -> Self {
        let pieces = self
            .pieces
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .skip(1)
                    .map(|(m, &cm)| cm * m as f64)
                    .collect()
            })
            .collect();
        Self {
            breaks: self.breaks.clone(),
            pieces,
        }
    }

    /// Certified sup of |value| over the whole line (support is compact):
    /// per-piece interval bound in local coordinates.
    pub fn sup_abs(&self) -> f64 {
        let mut best = 0.0f64;
        for (j, coeffs) in self.pieces.iter().enumerate() {
            let w = self.breaks[j + 1] - self.breaks[j];
            let mut bound = 0.0;
            let mut pw = 1.0;
            for &c in coeffs {
                bound += c.abs() * pw;
                pw *= w;
            }
            best = best.max(bound);
        }
        best
    }

    /// The uniform cubic B-spline basis bump B((x - c + 2h)/h) supported on
    /// `[c - 2h, c + 2h]`: translates on the grid `c = k*h` sum to 1.
    pub fn bspline3(center: f64, h: f64) -> Result<Self> {
        if h <= 0.0 {
            return Err(ChainError::Schema("bump scale must be positive".into()));
        }
        // Local forms on [0,1] in s; piece j covers t in [j, j+1], s = t - j.
        let local: [[f64; 4]; 4] = [
            [0.0, 0.0, 0.0, 1.0 / 6.0],                       // s^3/6
            [1.0 / 6.0, 0.5, 0.5, -0.5],                      // (-3s^3+3s^2+3s+1)/6
            [4.0 / 6.0, 0.0, -1.0, 0.5],                      // (3s^3-6s^2+4)/6
            [1.0 / 6.0, -0.5, 0.5, -1.0 / 6.0],               // (1-s)^3/6
        ];
        let breaks: Vec<f64> = (0..=4).map(|j| center + (j as f64 - 2.0) * h).collect();
        // Local coordinate of piece j is x - breaks[j] = h*s, so substitute
        // s = t/h: coefficient of t^m is c_m / h^m.
        let pieces = local
            .iter()
            .map(|c| {
                (0..4)
                    .map(|m| c[m] / h.powi(m as i32))
                    .collect::<Vec<f64>>()
            })
            .collect();
        Self::new(breaks, pieces)
    }
}

/// Tensor-product bump 0-form `f(x) = prod_i f_i(x_i)` built from piecewise
/// polynomials; class C^2 for the cubic B-spline profile.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpForm {
    axes: Vec<Piecewise1>,
    order: usize,
}

impl BumpForm {
    pub fn new(axes: Vec<Piecewise1>, order: usize) -> Self {
        Self { axes, order }
    }

    /// Product of cubic B-spline bumps centered at `center` with per-axis
    /// half-support `2h = halfwidth`.
    pub fn bspline(center: &[f64], halfwidth: &[f64]) -> Result<Self> {
        if center.len() != halfwidth.len() {
            return Err(ChainError::Dimension(
                "bump center and halfwidth lengths differ".into(),
            ));
        }
        let axes = center
            .iter()
            .zip(halfwidth)
            .map(|(&c, &w)| Piecewise1::bspline3(c, w / 2.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { axes, order: 2 })
    }

    pub fn n(&self) -> usize {
        self.axes.len()
    }

    fn eval_element(&self, e: &ChainElement) -> f64 {
        // L_sigma over axis monomials factorizes: order d_i derivative on
        // axis i.
        let kc = e.kv.coeff(0);
        if kc == 0.0 {
            return 0.0;
        }
        let mut v = kc;
        let mut d: SmallVec<[u8; 8]> = smallvec::smallvec![0; self.n()];
        for &ax in &e.sym {
            d[ax as usize] += 1;
        }
        for (i, g) in self.axes.iter().enumerate() {
            let mut gi = g.clone();
            for _ in 0..d[i] {
                gi = gi.derivative();
            }
            v *= gi.eval(e.point[i]);
        }
        v
    }

    pub fn partial(&self, axis: usize) -> Result<Self> {
        if self.order == 0 {
            return Err(ChainError::Order(
                "bump form differentiability budget exhausted".into(),
            ));
        }
        let mut axes = self.axes.clone();
        axes[axis] = axes[axis].derivative();
        Ok(Self {
            axes,
            order: self.order - 1,
        })
    }

    pub fn sup_abs(&self) -> f64 {
        self.axes.iter().map(|g| g.sup_abs()).product()
    }
}

// ---------------------------------------------------------------------------
// Custom black-box forms
// ---------------------------------------------------------------------------

type CoeffFn = Rc<dyn Fn(&[f64], u32) -> f64>;

/// A user-supplied form: a coefficient function per blade mask, with finite
/// differences (central, step `1e-5 * (1+|p|)`, one Richardson step) standing
/// in for the missing derivative closure.
#[derive(Clone)]
pub struct CustomForm {
    n: usize,
    grade: usize,
    order: usize,
    coeff: CoeffFn,
    /// Optional certified norm bound per derivative level j.
    cert: Option<Rc<dyn Fn(usize) -> f64>>,
}

impl CustomForm {
    pub fn new(n: usize, grade: usize, order: usize, coeff: CoeffFn) -> Self {
        Self {
            n,
            grade,
            order,
            coeff,
            cert: None,
        }
    }

    pub fn with_cert(mut self, cert: Rc<dyn Fn(usize) -> f64>) -> Self {
        self.cert = Some(cert);
        self
    }

    fn eval_coeff_lsigma(&self, p: &[f64], mask: u32, axes: &[u8]) -> f64 {
        if axes.is_empty() {
            return (self.coeff)(p, mask);
        }
        let (ax, rest) = (axes[0] as usize, &axes[1..]);
        let h = 1e-5 * (1.0 + crate::multivec::norm(p));
        let d = |step: f64| {
            let mut pp = vecn(p);
            pp[ax] += step;
            let plus = self.eval_coeff_lsigma(&pp, mask, rest);
            pp[ax] -= 2.0 * step;
            let minus = self.eval_coeff_lsigma(&pp, mask, rest);
            (plus - minus) / (2.0 * step)
        };
        let dh = d(h);
        let dh2 = d(h / 2.0);
        (4.0 * dh2 - dh) / 3.0
    }

    fn eval_element(&self, e: &ChainElement) -> f64 {
        let mut acc = 0.0;
        for (mask, c) in e.kv.terms() {
            acc += self.eval_coeff_lsigma(&e.point, mask, &e.sym) * c;
        }
        acc
    }
}

impl std::fmt::Debug for CustomForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomForm")
            .field("n", &self.n)
            .field("grade", &self.grade)
            .field("order", &self.order)
            .finish_non_exhaustive()
    }
}

// ---------------------------------------------------------------------------
// Form: the public wrapper
// ---------------------------------------------------------------------------

/// A differential form of class `B^order`, optionally restricted to a region.
#[derive(Debug, Clone)]
pub struct Form {
    kind: FormKind,
    region: Option<OpenRegion>,
}

#[derive(Debug, Clone)]
pub enum FormKind {
    Poly(PolyForm),
    Trig(TrigForm),
    Bump(BumpForm),
    Custom(CustomForm),
}

/// A smooth function (0-form); alias used where the scalar role matters.
pub type ScalarField = Form;

impl Form {
    pub fn poly(pf: PolyForm) -> Self {
        Self {
            kind: FormKind::Poly(pf),
            region: None,
        }
    }

    pub fn trig(tf: TrigForm) -> Self {
        Self {
            kind: FormKind::Trig(tf),
            region: None,
        }
    }

    pub fn bump(bf: BumpForm) -> Self {
        Self {
            kind: FormKind::Bump(bf),
            region: None,
        }
    }

    pub fn custom(cf: CustomForm) -> Self {
        Self {
            kind: FormKind::Custom(cf),
            region: None,
        }
    }

    /// Convenience: polynomial form from (blade tuple, exponents, coeff).
    pub fn poly_from_terms(
        n: usize,
        grade: usize,
        terms: &[(Vec<usize>, Vec<u8>, f64)],
    ) -> Result<Self> {
        let mut comps = Vec::new();
        for (idx, exps, c) in terms {
            comps.push((idx.clone(), Poly::monomial(n, exps, *c)?));
        }
        Ok(Self::poly(PolyForm::from_components(n, grade, comps)?))
    }

    /// Constant-coefficient blade form `c de_I`.
    pub fn constant_blade(n: usize, idx: &[usize], c: f64) -> Result<Self> {
        let comps = vec![(idx.to_vec(), Poly::constant(n, c))];
        Ok(Self::poly(PolyForm::from_components(n, idx.len(), comps)?))
    }

    pub fn with_region(mut self, region: OpenRegion) -> Self {
        self.region = Some(region);
        self
    }

    pub fn region(&self) -> Option<&OpenRegion> {
        self.region.as_ref()
    }

    pub fn kind(&self) -> &FormKind {
        &self.kind
    }

    pub fn n(&self) -> usize {
        match &self.kind {
            FormKind::Poly(f) => f.n(),
            FormKind::Trig(f) => f.n(),
            FormKind::Bump(f) => f.n(),
            FormKind::Custom(f) => f.n,
        }
    }

    pub fn grade(&self) -> usize {
        match &self.kind {
            FormKind::Poly(f) => f.grade(),
            FormKind::Trig(f) => f.grade(),
            FormKind::Bump(_) => 0,
            FormKind::Custom(f) => f.grade,
        }
    }

    /// Differentiability budget (how many dipole factors pairing supports).
    pub fn order(&self) -> usize {
        match &self.kind {
            FormKind::Poly(_) | FormKind::Trig(_) => ORDER_UNLIMITED,
            FormKind::Bump(f) => f.order,
            FormKind::Custom(f) => f.order,
        }
    }

    /// Pairing with one chain element: `L_sigma omega(p; alpha)`.
    pub fn eval_element(&self, e: &ChainElement) -> Result<f64> {
        if e.n() != self.n() {
            return Err(ChainError::Dimension(
                "element and form dimension mismatch".into(),
            ));
        }
        if e.grade() != self.grade() {
            return Err(ChainError::Grade(format!(
                "pairing a grade-{} form with a grade-{} element",
                self.grade(),
                e.grade()
            )));
        }
        if e.order() > self.order() {
            return Err(ChainError::Order(format!(
                "element order {} exceeds form differentiability {}",
                e.order(),
                self.order()
            )));
        }
        if let Some(r) = &self.region {
            if !r.contains(&e.point) {
                return Err(ChainError::Unsupported(
                    "evaluation outside the form's region".into(),
                ));
            }
        }
        Ok(match &self.kind {
            FormKind::Poly(f) => f.eval_element(e),
            FormKind::Trig(f) => f.eval_element(e),
            FormKind::Bump(f) => f.eval_element(e),
            FormKind::Custom(f) => f.eval_element(e),
        })
    }

    /// Evaluates a 0-form as a plain scalar function.
    pub fn eval_scalar(&self, p: &[f64]) -> Result<f64> {
        self.eval_element(&ChainElement::order_zero(
            vecn(p),
            KVector::scalar(self.n(), 1.0)?,
        ))
    }

    /// Pairing with a chain: sums the matching-grade elements (pairwise).
    pub fn eval_chain(&self, a: &DiracChain) -> Result<f64> {
        let mut acc = PairwiseSum::new();
        for e in a.elements() {
            if e.grade() != self.grade() {
                continue;
            }
            acc.push(self.eval_element(e)?);
        }
        Ok(acc.total())
    }

    /// Exterior derivative (grade +1, order -1 in class).
    pub fn exterior_d(&self) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(self.rewrap(FormKind::Poly(f.exterior_d()))),
            FormKind::Trig(f) => Ok(self.rewrap(FormKind::Trig(f.exterior_d()))),
            _ => Err(ChainError::Unsupported(
                "exterior derivative is symbolic; available for polynomial and trigonometric forms"
                    .into(),
            )),
        }
    }

    /// Hodge star, defined through the perpendicular complement.
    pub fn hodge(&self) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(self.rewrap(FormKind::Poly(f.hodge()))),
            FormKind::Trig(f) => Ok(self.rewrap(FormKind::Trig(f.hodge()))),
            _ => Err(ChainError::Unsupported(
                "hodge star is symbolic; available for polynomial and trigonometric forms".into(),
            )),
        }
    }

    /// Lie derivative along the constant direction `u`.
    pub fn dir_deriv(&self, u: &[f64]) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(self.rewrap(FormKind::Poly(f.dir_deriv(u)))),
            FormKind::Trig(f) => Ok(self.rewrap(FormKind::Trig(f.dir_deriv(u)))),
            _ => {
                // Axis-aligned directions reduce to partials, which bump
                // forms support.
                let nz: Vec<usize> = u
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(i, _)| i)
                    .collect();
                if nz.len() == 1 {
                    let mut f = self.partial(nz[0])?;
                    f = f.scale_form(u[nz[0]])?;
                    return Ok(f);
                }
                Err(ChainError::Unsupported(
                    "directional derivative of this family needs an axis direction".into(),
                ))
            }
        }
    }

    /// Partial derivative along a 0-based axis.
    pub fn partial(&self, axis: usize) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(self.rewrap(FormKind::Poly(f.partial(axis)))),
            FormKind::Trig(f) => Ok(self.rewrap(FormKind::Trig(f.partial(axis)))),
            FormKind::Bump(f) => Ok(self.rewrap(FormKind::Bump(f.partial(axis)?))),
            FormKind::Custom(f) => {
                if f.order == 0 {
                    return Err(ChainError::Order(
                        "custom form differentiability budget exhausted".into(),
                    ));
                }
                let inner = f.clone();
                let coeff: CoeffFn = Rc::new(move |p, mask| {
                    inner.eval_coeff_lsigma(p, mask, &[axis as u8])
                });
                Ok(self.rewrap(FormKind::Custom(CustomForm {
                    n: f.n,
                    grade: f.grade,
                    order: f.order - 1,
                    coeff,
                    cert: None,
                })))
            }
        }
    }

    pub fn scale_form(&self, c: f64) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(self.rewrap(FormKind::Poly(f.scale(c)))),
            FormKind::Trig(f) => {
                let terms = f
                    .terms
                    .iter()
                    .map(|t| TrigTerm {
                        mask: t.mask,
                        amp: t.amp * c,
                        freq: t.freq.clone(),
                        phase: t.phase,
                    })
                    .collect();
                Ok(self.rewrap(FormKind::Trig(TrigForm::new(f.n(), f.grade(), terms))))
            }
            FormKind::Custom(f) => {
                let inner = f.clone();
                let coeff: CoeffFn = Rc::new(move |p, mask| c * (inner.coeff)(p, mask));
                Ok(self.rewrap(FormKind::Custom(CustomForm {
                    n: f.n,
                    grade: f.grade,
                    order: f.order,
                    coeff,
                    cert: None,
                })))
            }
            FormKind::Bump(_) => Err(ChainError::Unsupported(
                "scaling a bump form is not provided; wrap it in a custom form".into(),
            )),
        }
    }

    pub fn add_form(&self, other: &Form) -> Result<Form> {
        match (&self.kind, &other.kind) {
            (FormKind::Poly(a), FormKind::Poly(b)) => Ok(self.rewrap(FormKind::Poly(a.add(b)?))),
            _ => Err(ChainError::Unsupported(
                "form addition is symbolic; available for polynomial forms".into(),
            )),
        }
    }

    /// Interior product with a polynomial vector field: dual of extrusion.
    pub fn interior(&self, v: &VectorField) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(self.rewrap(FormKind::Poly(f.interior(v)?))),
            _ => Err(ChainError::Unsupported(
                "interior product is symbolic; available for polynomial forms".into(),
            )),
        }
    }

    /// Flat-wedge with a polynomial vector field: dual of retraction.
    pub fn flat_wedge(&self, v: &VectorField) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(self.rewrap(FormKind::Poly(f.flat_wedge(v)?))),
            _ => Err(ChainError::Unsupported(
                "flat-wedge is symbolic; available for polynomial forms".into(),
            )),
        }
    }

    /// Lie derivative along a polynomial vector field: dual of the
    /// prederivative.
    pub fn lie(&self, v: &VectorField) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(self.rewrap(FormKind::Poly(f.lie(v)?))),
            _ => Err(ChainError::Unsupported(
                "lie derivative is symbolic; available for polynomial forms".into(),
            )),
        }
    }

    /// Multiplication by a polynomial 0-form: dual of m_f.
    pub fn multiply_poly(&self, f: &Poly) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(w) => Ok(self.rewrap(FormKind::Poly(w.multiply(f)))),
            _ => Err(ChainError::Unsupported(
                "form multiplication is symbolic; available for polynomial forms".into(),
            )),
        }
    }

    /// Pullback under a polynomial or affine map: dual of pushforward.
    pub fn pullback(&self, map: &SmoothMap) -> Result<Form> {
        match &self.kind {
            FormKind::Poly(f) => Ok(Form {
                kind: FormKind::Poly(f.pullback(map)?),
                region: None,
            }),
            _ => Err(ChainError::Unsupported(
                "pullback is symbolic; available for polynomial forms".into(),
            )),
        }
    }

    /// `star d star`: the dual of the geometric coboundary.
    pub fn star_d_star(&self) -> Result<Form> {
        self.hodge()?.exterior_d()?.hodge()
    }

    /// `d(star d star) + (star d star)d`: the dual of the geometric Laplace
    /// operator.
    pub fn laplace_dual(&self) -> Result<Form> {
        let a = self.star_d_star()?.exterior_d()?;
        let b = self.exterior_d()?.star_d_star()?;
        a.add_form(&b)
    }

    /// Directional 1-form `d_v = v^flat ^ L_v omega` dual to the directional
    /// boundary; `v` constant.
    pub fn dir_boundary_dual(&self, v: &[f64]) -> Result<Form> {
        let vf = VectorField::constant(v)?;
        self.dir_deriv(v)?.flat_wedge(&vf)
    }

    fn rewrap(&self, kind: FormKind) -> Form {
        Form {
            kind,
            region: self.region.clone(),
        }
    }

    /// Certified upper bound on the B^r norm of the form over `region`
    /// (falling back to the form's own region, then to all of R^n):
    /// `max_{j<=r} ||(C_I^{(j)})_I||_2` with
    /// `C_I^{(j)} = sum over ordered axis tuples t of sup |d^t g_I|`.
    ///
    /// Sound because each directional factor of a unit sigma has components
    /// of magnitude <= 1 and `|<c, alpha>| <= ||c||_2 ||alpha||_2
    /// <= ||c||_2 mass(alpha)`.
    pub fn certified_norm(&self, r: usize, region: Option<&OpenRegion>) -> Result<f64> {
        let reg = region.or(self.region.as_ref());
        if let FormKind::Custom(f) = &self.kind {
            let cert = f.cert.as_ref().ok_or_else(|| {
                ChainError::Unsupported(
                    "custom form carries no certified norm bound".into(),
                )
            })?;
            return Ok((0..=r).map(|j| cert(j)).fold(0.0, f64::max));
        }
        let n = self.n();
        let mut best = 0.0f64;
        for j in 0..=r {
            // Sum over ordered tuples; group by the derivative multiset to
            // avoid recomputation: multiplicity = multinomial coefficient.
            let mut per_blade: std::collections::BTreeMap<u32, f64> = Default::default();
            let mut stack: Vec<(Vec<u8>, usize)> = vec![(vec![0u8; n], j)];
            // Enumerate multisets d with |d| = j as exponent vectors.
            let mut multisets: Vec<Vec<u8>> = Vec::new();
            while let Some((d, left)) = stack.pop() {
                if left == 0 {
                    multisets.push(d);
                    continue;
                }
                // Distribute remaining derivatives across axes >= first
                // incomplete axis to avoid duplicates.
                let start = d
                    .iter()
                    .rposition(|&x| x > 0)
                    .unwrap_or(0);
                for ax in start..n {
                    let mut dd = d.clone();
                    dd[ax] += 1;
                    stack.push((dd, left - 1));
                }
            }
            for d in &multisets {
                let mult = multinomial(d);
                let mut f = self.clone();
                for (ax, &cnt) in d.iter().enumerate() {
                    for _ in 0..cnt {
                        f = f.partial(ax)?;
                    }
                }
                for (mask, s) in f.component_sups(reg)? {
                    *per_blade.entry(mask).or_insert(0.0) += mult * s;
                }
            }
            let l2: f64 = per_blade.values().map(|c| c * c).sum::<f64>().sqrt();
            best = best.max(l2);
        }
        Ok(best)
    }

    /// Per-blade certified sup of |coefficient| over the region.
    fn component_sups(&self, region: Option<&OpenRegion>) -> Result<Vec<(u32, f64)>> {
        match &self.kind {
            FormKind::Poly(f) => {
                let mut out = Vec::with_capacity(f.comps.len());
                for (mask, g) in &f.comps {
                    if g.degree() == 0 {
                        out.push((*mask, g.eval(&vec![0.0; f.n()]).abs()));
                        continue;
                    }
                    let (lo, hi) = region
                        .and_then(|r| r.bbox())
                        .ok_or_else(|| {
                            ChainError::Unsupported(
                                "certified norm of a non-constant polynomial form needs a bounded region"
                                    .into(),
                            )
                        })?;
                    out.push((*mask, g.sup_abs_box(&lo, &hi)));
                }
                Ok(out)
            }
            FormKind::Trig(f) => {
                let mut map: std::collections::BTreeMap<u32, f64> = Default::default();
                for t in &f.terms {
                    *map.entry(t.mask).or_insert(0.0) += t.amp.abs();
                }
                Ok(map.into_iter().collect())
            }
            FormKind::Bump(f) => Ok(vec![(0u32, f.sup_abs())]),
            FormKind::Custom(_) => Err(ChainError::Unsupported(
                "custom forms need a user-supplied certified bound".into(),
            )),
        }
    }
}

fn multinomial(d: &[u8]) -> f64 {
    let total: u32 = d.iter().map(|&x| x as u32).sum();
    let mut num = 1.0;
    for k in 1..=total {
        num *= k as f64;
    }
    let mut den = 1.0;
    for &x in d {
        for k in 1..=(x as u32) {
            den *= k as f64;
        }
    }
    num / den
}

// ---------------------------------------------------------------------------
// Vector fields
// ---------------------------------------------------------------------------

/// A polynomial vector field on R^n.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    n: u8,
    comps: Vec<Poly>,
}

impl VectorField {
    pub fn new(comps: Vec<Poly>) -> Result<Self> {
        let n = comps.len();
        for c in &comps {
            if c.n() != n {
                return Err(ChainError::Dimension(
                    "vector field components must live on R^n with n = component count".into(),
                ));
            }
        }
        Ok(Self { n: n as u8, comps })
    }

    pub fn constant(v: &[f64]) -> Result<Self> {
        let n = v.len();
        Self::new(v.iter().map(|&c| Poly::constant(n, c)).collect())
    }

    /// Planar rotation field (-y, x).
    pub fn rotation2() -> Self {
        let comps = vec![
            Poly::coordinate(2, 1).scale(-1.0),
            Poly::coordinate(2, 0),
        ];
        Self::new(comps).expect("well-formed")
    }

    /// Dilation field x (any dimension).
    pub fn dilation(n: usize) -> Self {
        let comps = (0..n).map(|i| Poly::coordinate(n, i)).collect();
        Self::new(comps).expect("well-formed")
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn comps(&self) -> &[Poly] {
        &self.comps
    }

    pub fn eval(&self, p: &[f64]) -> Vecn {
        self.comps.iter().map(|c| c.eval(p)).collect()
    }

    /// Jacobian rows: row i = gradient of component i at p.
    pub fn jacobian(&self, p: &[f64]) -> Vec<Vecn> {
        let n = self.n();
        self.comps
            .iter()
            .map(|c| (0..n).map(|j| c.partial(j).eval(p)).collect())
            .collect()
    }

    pub fn scale_field(&self, c: f64) -> Self {
        Self {
            n: self.n,
            comps: self.comps.iter().map(|p| p.scale(c)).collect(),
        }
    }

    pub fn add_field(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(ChainError::Dimension(
                "sum of fields in different dimensions".into(),
            ));
        }
        Ok(Self {
            n: self.n,
            comps: self
                .comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| a.add(b))
                .collect(),
        })
    }

    /// `(D self + D self^T) other`: the symmetric-gradient correction that
    /// enters the retraction commutator (zero exactly when the flow of
    /// `self` is isometric). Component `j = sum_i other^i (d_j self^i +
    /// d_i self^j)`.
    pub fn symmetrized_jacobian_apply(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(ChainError::Dimension(
                "fields live in different dimensions".into(),
            ));
        }
        let n = self.n();
        let comps = (0..n)
            .map(|j| {
                let mut acc = Poly::zero(n);
                for i in 0..n {
                    let sym = self.comps[i].partial(j).add(&self.comps[j].partial(i));
                    acc = acc.add(&other.comps[i].mul(&sym));
                }
                acc
            })
            .collect();
        Self::new(comps)
    }

    /// Lie bracket `[X, Y]^i = sum_j (X^j d_j Y^i - Y^j d_j X^i)`.
    pub fn bracket(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(ChainError::Dimension(
                "bracket of fields in different dimensions".into(),
            ));
        }
        let n = self.n();
        let comps = (0..n)
            .map(|i| {
                let mut acc = Poly::zero(n);
                for j in 0..n {
                    acc = acc.add(&self.comps[j].mul(&other.comps[i].partial(j)));
                    acc = acc.sub(&other.comps[j].mul(&self.comps[i].partial(j)));
                }
                acc
            })
            .collect();
        Self::new(comps)
    }

    /// Certified B^r bound over a region:
    /// `max(sup ||V||, max_{i,j} ||d_j V_i||_{B^{r-1}})`.
    pub fn certified_norm(&self, r: usize, region: Option<&OpenRegion>) -> Result<f64> {
        let n = self.n();
        let sup0: f64 = {
            let mut sq = 0.0;
            for c in &self.comps {
                let s = if c.degree() == 0 {
                    c.eval(&vec![0.0; n]).abs()
                } else {
                    let (lo, hi) = region.and_then(|g| g.bbox()).ok_or_else(|| {
                        ChainError::Unsupported(
                            "certified field norm of a non-constant field needs a bounded region"
                                .into(),
                        )
                    })?;
                    c.sup_abs_box(&lo, &hi)
                };
                sq += s * s;
            }
            sq.sqrt()
        };
        if r == 0 {
            return Ok(sup0);
        }
        let mut best = sup0;
        for i in 0..n {
            for j in 0..n {
                let dji = self.comps[i].partial(j);
                if dji.is_zero() {
                    continue;
                }
                let sub = VectorField::new(
                    (0..n)
                        .map(|k| if k == i { dji.clone() } else { Poly::zero(n) })
                        .collect(),
                )?;
                best = best.max(sub.certified_norm(r - 1, region)?);
            }
        }
        Ok(best)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorFieldRepr {
    comps: Vec<Poly>,
}

impl Serialize for VectorField {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VectorFieldRepr {
            comps: self.comps.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VectorField {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = VectorFieldRepr::deserialize(d)?;
        VectorField::new(repr.comps).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Smooth maps
// ---------------------------------------------------------------------------

/// A smooth map F: R^{n_in} -> R^{n_out} with exact Jacobians, used for
/// pushforward of chains and pullback of forms.
#[derive(Debug, Clone)]
pub enum SmoothMap {
    /// x -> A x + b, rows of `linear` are the rows of A.
    Affine { linear: Vec<Vecn>, shift: Vecn },
    /// Polynomial components.
    Poly { comps: Vec<Poly>, n_in: usize },
    /// t -> (r cos t, r sin t).
    Circle { radius: f64 },
    /// t -> cos(2t) (cos t, sin t), the four-petaled rose (area pi/2).
    Quadrifolium,
    /// x -> |x| on R (the fold map; its pushforward cancels chains).
    Fold,
}

impl SmoothMap {
    pub fn n_in(&self) -> usize {
        match self {
            SmoothMap::Affine { linear, .. } => {
                linear.first().map(|r| r.len()).unwrap_or(0)
            }
            SmoothMap::Poly { n_in, .. } => *n_in,
            SmoothMap::Circle { .. } | SmoothMap::Quadrifolium => 1,
            SmoothMap::Fold => 1,
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            SmoothMap::Affine { linear, .. } => linear.len(),
            SmoothMap::Poly { comps, .. } => comps.len(),
            SmoothMap::Circle { .. } | SmoothMap::Quadrifolium => 2,
            SmoothMap::Fold => 1,
        }
    }

    pub fn is_affine(&self) -> bool {
        match self {
            SmoothMap::Affine { .. } => true,
            SmoothMap::Poly { comps, .. } => comps.iter().all(|c| c.degree() <= 1),
            _ => false,
        }
    }

    pub fn eval(&self, p: &[f64]) -> Vecn {
        match self {
            SmoothMap::Affine { linear, shift } => linear
                .iter()
                .zip(shift.iter())
                .map(|(row, b)| dot(row, p) + b)
                .collect(),
            SmoothMap::Poly { comps, .. } => comps.iter().map(|c| c.eval(p)).collect(),
            SmoothMap::Circle { radius } => {
                vecn(&[radius * p[0].cos(), radius * p[0].sin()])
            }
            SmoothMap::Quadrifolium => {
                let r = (2.0 * p[0]).cos();
                vecn(&[r * p[0].cos(), r * p[0].sin()])
            }
            SmoothMap::Fold => vecn(&[p[0].abs()]),
        }
    }

    /// Jacobian rows at p (n_out rows of length n_in).
    pub fn jacobian(&self, p: &[f64]) -> Vec<Vecn> {
        match self {
            SmoothMap::Affine { linear, .. } => linear.clone(),
            SmoothMap::Poly { comps, n_in } => comps
                .iter()
                .map(|c| (0..*n_in).map(|j| c.partial(j).eval(p)).collect())
                .collect(),
            SmoothMap::Circle { radius } => {
                vec![
                    vecn(&[-radius * p[0].sin()]),
                    vecn(&[radius * p[0].cos()]),
                ]
            }
            SmoothMap::Quadrifolium => {
                let (t, r) = (p[0], (2.0 * p[0]).cos());
                let dr = -2.0 * (2.0 * t).sin();
                vec![
                    vecn(&[dr * t.cos() - r * t.sin()]),
                    vecn(&[dr * t.sin() + r * t.cos()]),
                ]
            }
            SmoothMap::Fold => vec![vecn(&[if p[0] < 0.0 { -1.0 } else { 1.0 }])],
        }
    }

    /// Polynomial components, available for affine and polynomial maps
    /// (enables symbolic pullback).
    pub fn poly_components(&self) -> Option<Vec<Poly>> {
        match self {
            SmoothMap::Affine { linear, shift } => {
                let n = self.n_in();
                Some(
                    linear
                        .iter()
                        .zip(shift.iter())
                        .map(|(row, b)| {
                            let mut p = Poly::constant(n, *b);
                            for (j, &a) in row.iter().enumerate() {
                                p = p.add(&Poly::coordinate(n, j).scale(a));
                            }
                            p
                        })
                        .collect(),
                )
            }
            SmoothMap::Poly { comps, .. } => Some(comps.clone()),
            _ => None,
        }
    }

    /// Applies the derivative at p to a k-vector: blades map to wedges of
    /// Jacobian columns.
    pub fn pushforward_kv(&self, p: &[f64], kv: &KVector) -> Result<KVector> {
        let rows = self.jacobian(p);
        let n_out = self.n_out();
        let k = kv.grade();
        let mut acc = KVector::zero(n_out, k)?;
        if k == 0 {
            return KVector::scalar(n_out, kv.coeff(0));
        }
        // Columns of the Jacobian.
        let cols: Vec<Vecn> = (0..self.n_in())
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        for (mask, c) in kv.terms() {
            let mut chosen: Vec<&[f64]> = Vec::with_capacity(k);
            let mut rest = mask;
            while rest != 0 {
                let j = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                chosen.push(&cols[j]);
            }
            let image = KVector::simple(n_out, &chosen)?;
            acc = acc.add_kv(&image.scale(c))?;
        }
        Ok(acc)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum MapRepr {
    Affine { linear: Vec<Vec<f64>>, shift: Vec<f64> },
    Poly { comps: Vec<Poly>, n_in: usize },
    Circle { radius: f64 },
    Quadrifolium,
    Fold,
}

impl Serialize for SmoothMap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            SmoothMap::Affine { linear, shift } => MapRepr::Affine {
                linear: linear.iter().map(|r| r.to_vec()).collect(),
                shift: shift.to_vec(),
            },
            SmoothMap::Poly { comps, n_in } => MapRepr::Poly {
                comps: comps.clone(),
                n_in: *n_in,
            },
            SmoothMap::Circle { radius } => MapRepr::Circle { radius: *radius },
            SmoothMap::Quadrifolium => MapRepr::Quadrifolium,
            SmoothMap::Fold => MapRepr::Fold,
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SmoothMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MapRepr::deserialize(d)?;
        Ok(match repr {
            MapRepr::Affine { linear, shift } => {
                let rows: Vec<Vecn> = linear.iter().map(|r| vecn(r)).collect();
                let n_in = rows.first().map(|r| r.len()).unwrap_or(0);
                if rows.iter().any(|r| r.len() != n_in) || rows.len() != shift.len() {
                    return Err(D::Error::custom("inconsistent affine map shape"));
                }
                SmoothMap::Affine {
                    linear: rows,
                    shift: vecn(&shift),
                }
            }
            MapRepr::Poly { comps, n_in } => {
                if comps.iter().any(|c| c.n() != n_in) {
                    return Err(D::Error::custom(
                        "polynomial map components must live on R^{n_in}",
                    ));
                }
                SmoothMap::Poly { comps, n_in }
            }
            MapRepr::Circle { radius } => SmoothMap::Circle { radius },
            MapRepr::Quadrifolium => SmoothMap::Quadrifolium,
            MapRepr::Fold => SmoothMap::Fold,
        })
    }
}

// ---------------------------------------------------------------------------
// Form JSON (scenario schema)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolyFormTermRepr {
    idx: Vec<usize>,
    monomial: MonomialRepr,
    c: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonomialRepr {
    exps: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrigTermRepr {
    idx: Vec<usize>,
    kind: String,
    amp: f64,
    freq: Vec<f64>,
    #[serde(default)]
    phase: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
enum FormRepr {
    Poly {
        grade: usize,
        terms: Vec<PolyFormTermRepr>,
        #[serde(skip_serializing_if = "Option::is_none")]
        region: Option<OpenRegion>,
    },
    Trig {
        grade: usize,
        terms: Vec<TrigTermRepr>,
        #[serde(skip_serializing_if = "Option::is_none")]
        region: Option<OpenRegion>,
    },
    Bump {
        center: Vec<f64>,
        halfwidth: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        region: Option<OpenRegion>,
    },
}

impl Serialize for Form {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match &self.kind {
            FormKind::Poly(f) => FormRepr::Poly {
                grade: f.grade(),
                terms: f
                    .comps
                    .iter()
                    .flat_map(|(mask, g)| {
                        let idx = mask_to_indices(*mask);
                        g.terms().iter().map(move |(e, c)| PolyFormTermRepr {
                            idx: idx.clone(),
                            monomial: MonomialRepr { exps: e.to_vec() },
                            c: *c,
                        })
                    })
                    .collect(),
                region: self.region.clone(),
            },
            FormKind::Trig(f) => FormRepr::Trig {
                grade: f.grade(),
                terms: f
                    .terms
                    .iter()
                    .map(|t| TrigTermRepr {
                        idx: mask_to_indices(t.mask),
                        kind: "sin".into(),
                        amp: t.amp,
                        freq: t.freq.to_vec(),
                        phase: t.phase,
                    })
                    .collect(),
                region: self.region.clone(),
            },
            FormKind::Bump(_) => {
                return Err(serde::ser::Error::custom(
                    "bump forms serialize only through their construction parameters",
                ))
            }
            FormKind::Custom(_) => {
                return Err(serde::ser::Error::custom(
                    "custom forms are not serializable",
                ))
            }
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Form {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = FormRepr::deserialize(d)?;
        match repr {
            FormRepr::Poly {
                grade,
                terms,
                region,
            } => {
                let n = terms
                    .first()
                    .map(|t| t.monomial.exps.len())
                    .ok_or_else(|| D::Error::custom("polynomial form needs at least one term"))?;
                let mut comps = Vec::with_capacity(terms.len());
                for t in &terms {
                    if t.monomial.exps.len() != n {
                        return Err(D::Error::custom("inconsistent exponent tuple lengths"));
                    }
                    let g = Poly::monomial(n, &t.monomial.exps, t.c).map_err(D::Error::custom)?;
                    comps.push((t.idx.clone(), g));
                }
                let pf = PolyForm::from_components(n, grade, comps).map_err(D::Error::custom)?;
                let mut f = Form::poly(pf);
                if let Some(r) = region {
                    f = f.with_region(r);
                }
                Ok(f)
            }
            FormRepr::Trig {
                grade,
                terms,
                region,
            } => {
                let n = terms
                    .first()
                    .map(|t| t.freq.len())
                    .ok_or_else(|| D::Error::custom("trigonometric form needs at least one term"))?;
                let mut out = Vec::with_capacity(terms.len());
                for t in &terms {
                    if t.freq.len() != n {
                        return Err(D::Error::custom("inconsistent frequency lengths"));
                    }
                    let kv = KVector::basis_blade(n, &t.idx, 1.0).map_err(D::Error::custom)?;
                    let (mask, sign) =
                        kv.terms().next().map(|(m, c)| (m, c)).unwrap_or((0, 1.0));
                    let extra = match t.kind.as_str() {
                        "sin" => 0.0,
                        "cos" => std::f64::consts::FRAC_PI_2,
                        other => {
                            return Err(D::Error::custom(format!(
                                "unknown trigonometric kind {other:?}"
                            )))
                        }
                    };
                    out.push(TrigTerm {
                        mask,
                        amp: t.amp * sign,
                        freq: vecn(&t.freq),
                        phase: t.phase + extra,
                    });
                }
                let grade_terms = out.iter().map(|t| t.mask.count_ones() as usize).max();
                if let Some(g) = grade_terms {
                    if g != grade {
                        return Err(D::Error::custom("trig term blades do not match grade"));
                    }
                }
                let mut f = Form::trig(TrigForm::new(n, grade, out));
                if let Some(r) = region {
                    f = f.with_region(r);
                }
                Ok(f)
            }
            FormRepr::Bump {
                center,
                halfwidth,
                region,
            } => {
                let bf = BumpForm::bspline(&center, &halfwidth).map_err(D::Error::custom)?;
                let mut f = Form::bump(bf);
                if let Some(r) = region {
                    f = f.with_region(r);
                }
                Ok(f)
            }
        }
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainElement;
    use crate::chain::SymMono;

    fn x_dy() -> Form {
        // omega = x dy over R^2.
        Form::poly_from_terms(2, 1, &[(vec![2], vec![1, 0], 1.0)]).unwrap()
    }

    #[test]
    fn eval_element_examples() {
        let w = x_dy();
        // x dy at ((0,0); e1 (x) e2) = L_{e1}(x dy)(e2) = dy(e2) = 1.
        let e = ChainElement::new(
            vecn(&[0.0, 0.0]),
            SymMono::from_slice(&[0]),
            KVector::from_vector(2, &[0.0, 1.0]).unwrap(),
        );
        assert_eq!(w.eval_element(&e).unwrap(), 1.0);
        // x dy at ((3,5); e2) = 3.
        let e = ChainElement::order_zero(
            vecn(&[3.0, 5.0]),
            KVector::from_vector(2, &[0.0, 1.0]).unwrap(),
        );
        assert_eq!(w.eval_element(&e).unwrap(), 3.0);
    }

    #[test]
    fn eval_errors() {
        let w = x_dy();
        let wrong_grade = ChainElement::order_zero(
            vecn(&[0.0, 0.0]),
            KVector::scalar(2, 1.0).unwrap(),
        );
        assert!(w.eval_element(&wrong_grade).is_err());
    }

    #[test]
    fn exterior_d_examples() {
        let w = x_dy();
        let dw = w.exterior_d().unwrap();
        // d(x dy) = dx ^ dy.
        let e = ChainElement::order_zero(
            vecn(&[7.0, -2.0]),
            KVector::basis_blade(2, &[1, 2], 1.0).unwrap(),
        );
        assert_eq!(dw.eval_element(&e).unwrap(), 1.0);
        // d(d(f)) = 0 for polynomial f = x^2 y.
        let f = Form::poly_from_terms(2, 0, &[(vec![], vec![2, 1], 1.0)]).unwrap();
        let ddf = f.exterior_d().unwrap().exterior_d().unwrap();
        match ddf.kind() {
            FormKind::Poly(pf) => assert!(pf.is_zero()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn hodge_examples() {
        // star(dx) applied to (p; e2) = dx(p; perp e2) = dx(e1) = 1.
        let dx = Form::constant_blade(2, &[1], 1.0).unwrap();
        let star = dx.hodge().unwrap();
        let e = ChainElement::order_zero(
            vecn(&[0.0, 0.0]),
            KVector::from_vector(2, &[0.0, 1.0]).unwrap(),
        );
        assert_eq!(star.eval_element(&e).unwrap(), 1.0);
        // Double star: (-1)^{k(n-k)} pointwise.
        let twice = star.hodge().unwrap();
        let e1 = ChainElement::order_zero(
            vecn(&[0.3, 0.4]),
            KVector::from_vector(2, &[1.0, 0.0]).unwrap(),
        );
        assert_eq!(
            twice.eval_element(&e1).unwrap(),
            -dx.eval_element(&e1).unwrap()
        );
    }

    #[test]
    fn pullback_example() {
        // F(x,y) = (x, x+y): (F* dy)(p; e1) = dy(DF e1) = 1.
        let f = SmoothMap::Affine {
            linear: vec![vecn(&[1.0, 0.0]), vecn(&[1.0, 1.0])],
            shift: vecn(&[0.0, 0.0]),
        };
        let dy = Form::constant_blade(2, &[2], 1.0).unwrap();
        let fdy = dy.pullback(&f).unwrap();
        let e = ChainElement::order_zero(
            vecn(&[0.0, 0.0]),
            KVector::from_vector(2, &[1.0, 0.0]).unwrap(),
        );
        assert_eq!(fdy.eval_element(&e).unwrap(), 1.0);
    }

    #[test]
    fn certified_norm_examples() {
        let unit_box = OpenRegion::Box {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        };
        let w = x_dy();
        for r in 0..=3 {
            let b = w.certified_norm(r, Some(&unit_box)).unwrap();
            assert!((b - 1.0).abs() < 1e-14, "r={r} bound={b}");
        }
        // sin(x) dx has certified norm 1 for every r (all derivatives
        // bounded by 1), with no region needed.
        let sinx = Form::trig(TrigForm::new(
            2,
            1,
            vec![TrigTerm {
                mask: 1,
                amp: 1.0,
                freq: vecn(&[1.0, 0.0]),
                phase: 0.0,
            }],
        ));
        for r in 0..=3 {
            assert!((sinx.certified_norm(r, None).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn certified_norm_dominates_pairing() {
        // |omega(A)| <= ||omega||_{B^0} * mass for order-0 unit elements.
        let unit_box = OpenRegion::Box {
            lo: vec![-1.0, -1.0],
            hi: vec![1.0, 1.0],
        };
        let w = Form::poly_from_terms(
            2,
            1,
            &[(vec![1], vec![1, 1], 0.7), (vec![2], vec![2, 0], -0.4)],
        )
        .unwrap();
        let bound = w.certified_norm(0, Some(&unit_box)).unwrap();
        for (px, py) in [(0.3, -0.8), (-0.9, 0.9), (0.5, 0.5)] {
            for dir in [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]] {
                let e = ChainElement::order_zero(
                    vecn(&[px, py]),
                    KVector::from_vector(2, &dir).unwrap(),
                );
                assert!(w.eval_element(&e).unwrap().abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn trig_derivatives_are_exact() {
        // L_u sin(2x + 3y) = (2u1 + 3u2) cos(2x + 3y).
        let f = Form::trig(TrigForm::new(
            2,
            0,
            vec![TrigTerm {
                mask: 0,
                amp: 1.0,
                freq: vecn(&[2.0, 3.0]),
                phase: 0.0,
            }],
        ));
        let u = [0.4, -0.7];
        let df = f.dir_deriv(&u).unwrap();
        let p = [0.3, 0.9];
        let e = ChainElement::order_zero(vecn(&p), KVector::scalar(2, 1.0).unwrap());
        let expect = (2.0 * u[0] + 3.0 * u[1]) * (2.0 * p[0] + 3.0 * p[1]).cos();
        assert!((df.eval_element(&e).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn bump_partition_of_unity() {
        // Translates of the cubic B-spline sum to 1 where fully covered.
        let h = 0.5;
        let mut total = 0.0;
        let x = 0.37;
        for k in -3..=3 {
            let b = Piecewise1::bspline3(k as f64 * h, h).unwrap();
            total += b.eval(x);
        }
        assert!((total - 1.0).abs() < 1e-12);
        // C^2: first and second derivatives are continuous across breaks.
        let b = Piecewise1::bspline3(0.0, 1.0).unwrap();
        let d1 = b.derivative();
        let d2 = d1.derivative();
        for brk in [-1.0f64, 0.0, 1.0] {
            let eps = 1e-9;
            assert!((d1.eval(brk - eps) - d1.eval(brk + eps)).abs() < 1e-6);
            assert!((d2.eval(brk - eps) - d2.eval(brk + eps)).abs() < 1e-5);
        }
    }

    #[test]
    fn custom_form_fd_matches_symbolic() {
        // Black-box x^2 y dy: FD derivative vs exact polynomial pairing.
        let coeff: CoeffFn = Rc::new(|p: &[f64], mask: u32| {
            if mask == 2 {
                p[0] * p[0] * p[1]
            } else {
                0.0
            }
        });
        let w = Form::custom(CustomForm::new(2, 1, 3, coeff));
        let exact = Form::poly_from_terms(2, 1, &[(vec![2], vec![2, 1], 1.0)]).unwrap();
        let e = ChainElement::new(
            vecn(&[1.3, -0.4]),
            SymMono::from_slice(&[0]),
            KVector::from_vector(2, &[0.0, 1.0]).unwrap(),
        );
        let approx = w.eval_element(&e).unwrap();
        let truth = exact.eval_element(&e).unwrap();
        assert!(
            (approx - truth).abs() < 1e-8,
            "fd {approx} vs exact {truth}"
        );
    }

    #[test]
    fn vector_field_bracket() {
        // [x d/dx, d/dx] = -d/dx.
        let x_ddx = VectorField::new(vec![Poly::coordinate(1, 0)]).unwrap();
        let ddx = VectorField::constant(&[1.0]).unwrap();
        let b = x_ddx.bracket(&ddx).unwrap();
        assert_eq!(b.eval(&[5.0]).as_slice(), &[-1.0]);
    }

    #[test]
    fn smooth_map_pushforward_kv() {
        let f = SmoothMap::Poly {
            comps: vec![
                Poly::monomial(2, &[2, 0], 1.0).unwrap(),
                Poly::coordinate(2, 1),
            ],
            n_in: 2,
        };
        // DF at (1,2) = [[2,0],[0,1]]; e1^e2 -> 2 e1^e2.
        let kv = KVector::basis_blade(2, &[1, 2], 1.0).unwrap();
        let img = f.pushforward_kv(&[1.0, 2.0], &kv).unwrap();
        assert!((img.coeff(0b11) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn form_json_roundtrip() {
        let json = r#"{"family":"poly","grade":1,"terms":[{"idx":[2],"monomial":{"exps":[1,0]},"c":1.0}]}"#;
        let w: Form = serde_json::from_str(json).unwrap();
        let e = ChainElement::order_zero(
            vecn(&[3.0, 5.0]),
            KVector::from_vector(2, &[0.0, 1.0]).unwrap(),
        );
        assert_eq!(w.eval_element(&e).unwrap(), 3.0);
        let emitted = serde_json::to_string(&w).unwrap();
        let back: Form = serde_json::from_str(&emitted).unwrap();
        assert_eq!(back.eval_element(&e).unwrap(), 3.0);
        // Unknown keys are rejected.
        let bad = r#"{"family":"poly","grade":1,"terms":[],"bogus":1}"#;
        assert!(serde_json::from_str::<Form>(bad).is_err());
    }

    #[test]
    fn lie_via_cartan_matches_direct_derivative_for_functions() {
        // For 0-forms, L_V f = i_V df = sum V_i d_i f.
        let f = Form::poly_from_terms(2, 0, &[(vec![], vec![1, 2], 2.0)]).unwrap();
        let v = VectorField::rotation2();
        let lf = f.lie(&v).unwrap();
        let p = [0.6, -1.1];
        let e = ChainElement::order_zero(vecn(&p), KVector::scalar(2, 1.0).unwrap());
        // Direct: V . grad f with f = 2xy^2.
        let grad = [2.0 * p[1] * p[1], 4.0 * p[0] * p[1]];
        let vv = v.eval(&p);
        let expect = vv[0] * grad[0] + vv[1] * grad[1];
        assert!((lf.eval_element(&e).unwrap() - expect).abs() < 1e-12);
    }
}
