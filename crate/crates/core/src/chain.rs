//! Dirac chains: finite weighted sums of pointed k-vector elements, with
//! higher-order elements carrying symmetric dipole directions, plus the open
//! regions used to localize norms and streams.
//!
//! Canonical form: an element of order s stores its symmetric tensor expanded
//! over the monomial basis of the s-th symmetric power — a sorted multiset of
//! *axis indices* — with all scalar weight folded into the k-vector. General
//! direction vectors are expanded on construction:
//! `(p; v (x) alpha) = sum_i v_i (p; e_i (x) alpha)`.
//! This linearization makes operator identities like `{boundary, E_v} = P_v`
//! hold element-for-element after canonicalization, not merely numerically.
//! Elements are sorted by (point, order, monomial, grade) and merged when
//! point (within 1e-12 per coordinate), monomial, and grade coincide.

use crate::error::{ChainError, Result};
use crate::multivec::{add, vecn, KVector, PairwiseSum, SymTensor, Vecn, MAX_DIM};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use smallvec::SmallVec;
use std::cmp::Ordering;

/// Absolute per-coordinate tolerance for merging element points.
pub const POINT_MERGE_TOL: f64 = 1e-12;

/// A sorted multiset of 0-based axis indices: the canonical symmetric
/// monomial `e_{i_1} o ... o e_{i_s}`.
pub type SymMono = SmallVec<[u8; 4]>;

/// One term of a Dirac chain: `(p; e_{mono} (x) kv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainElement {
    pub point: Vecn,
    /// Sorted axis indices of the symmetric monomial (empty for order 0).
    pub sym: SymMono,
    pub kv: KVector,
}

impl ChainElement {
    pub fn order_zero(point: Vecn, kv: KVector) -> Self {
        Self {
            point,
            sym: SymMono::new(),
            kv,
        }
    }

    pub fn new(point: Vecn, mut sym: SymMono, kv: KVector) -> Self {
        sym.sort_unstable();
        Self { point, sym, kv }
    }

    /// Order s of the element (number of dipole factors).
    pub fn order(&self) -> usize {
        self.sym.len()
    }

    pub fn grade(&self) -> usize {
        self.kv.grade()
    }

    pub fn n(&self) -> usize {
        self.kv.n()
    }

    /// Canonical total order: point (coordinate-lex), then order, then
    /// monomial, then grade.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.point.iter().zip(other.point.iter()) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        self.sym
            .len()
            .cmp(&other.sym.len())
            .then_with(|| self.sym.cmp(&other.sym))
            .then_with(|| self.kv.grade().cmp(&other.kv.grade()))
    }

    fn merge_key_matches(&self, other: &Self) -> bool {
        self.sym == other.sym
            && self.kv.grade() == other.kv.grade()
            && self
                .point
                .iter()
                .zip(other.point.iter())
                .all(|(a, b)| (a - b).abs() <= POINT_MERGE_TOL)
    }
}

/// Expands `(p; u_1 o ... o u_s (x) kv)` with arbitrary direction vectors
/// into canonical axis-monomial elements.
pub fn expand_sym_factors(point: &[f64], factors: &[Vecn], kv: &KVector) -> Vec<ChainElement> {
    let n = kv.n();
    let mut monos: Vec<(SymMono, f64)> = vec![(SymMono::new(), 1.0)];
    for f in factors {
        let mut next: Vec<(SymMono, f64)> = Vec::with_capacity(monos.len() * n);
        for (mono, c) in &monos {
            for (i, &fi) in f.iter().enumerate() {
                if fi == 0.0 {
                    continue;
                }
                let mut m = mono.clone();
                m.push(i as u8);
                m.sort_unstable();
                next.push((m, c * fi));
            }
        }
        next.sort_by(|a, b| a.0.cmp(&b.0));
        // Combine identical monomials.
        let mut merged: Vec<(SymMono, f64)> = Vec::with_capacity(next.len());
        for (m, c) in next {
            if let Some(last) = merged.last_mut() {
                if last.0 == m {
                    last.1 += c;
                    continue;
                }
            }
            merged.push((m, c));
        }
        monos = merged;
    }
    monos
        .into_iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|(m, c)| ChainElement {
            point: vecn(point),
            sym: m,
            kv: kv.scale(c),
        })
        .collect()
}

/// A canonical Dirac chain in R^n. Elements may mix grades and orders.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracChain {
    n: u8,
    elements: Vec<ChainElement>,
}

impl DiracChain {
    pub fn zero(n: usize) -> Result<Self> {
        if n > MAX_DIM {
            return Err(ChainError::Dimension(format!(
                "dimension {n} exceeds supported maximum {MAX_DIM}"
            )));
        }
        Ok(Self {
            n: n as u8,
            elements: Vec::new(),
        })
    }

    /// Builds a canonical chain from raw elements (validates dimensions,
    /// sorts, merges, prunes zeros).
    pub fn new(n: usize, elements: Vec<ChainElement>) -> Result<Self> {
        let mut chain = Self::zero(n)?;
        for e in &elements {
            if e.point.len() != n || e.kv.n() != n {
                return Err(ChainError::Dimension(format!(
                    "element in dimension {} inside chain of dimension {n}",
                    e.kv.n()
                )));
            }
            if e.sym.iter().any(|&i| i as usize >= n) {
                return Err(ChainError::Dimension(
                    "symmetric monomial axis out of range".into(),
                ));
            }
        }
        chain.elements = elements;
        chain.canonicalize();
        Ok(chain)
    }

    /// Single order-0 element chain.
    pub fn singleton(point: &[f64], kv: KVector) -> Result<Self> {
        let n = kv.n();
        if point.len() != n {
            return Err(ChainError::Dimension(format!(
                "point has {} coordinates, k-vector lives in dimension {n}",
                point.len()
            )));
        }
        Self::new(n, vec![ChainElement::order_zero(vecn(point), kv)])
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn elements(&self) -> &[ChainElement] {
        &self.elements
    }

    pub fn is_zero(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Largest element order present (0 for the zero chain).
    pub fn max_order(&self) -> usize {
        self.elements.iter().map(|e| e.order()).max().unwrap_or(0)
    }

    /// Sorted list of distinct grades present.
    pub fn grades(&self) -> Vec<usize> {
        let mut gs: Vec<usize> = self.elements.iter().map(|e| e.grade()).collect();
        gs.sort_unstable();
        gs.dedup();
        gs
    }

    fn canonicalize(&mut self) {
        self.elements.retain(|e| !e.kv.is_zero());
        self.elements.sort_by(ChainElement::canonical_cmp);
        let mut out: Vec<ChainElement> = Vec::with_capacity(self.elements.len());
        for e in self.elements.drain(..) {
            if let Some(last) = out.last_mut() {
                if last.merge_key_matches(&e) {
                    match last.kv.add_kv(&e.kv) {
                        Ok(sum) => {
                            last.kv = sum;
                            continue;
                        }
                        Err(_) => unreachable!("merge key guarantees equal grade"),
                    }
                }
            }
            out.push(e);
        }
        out.retain(|e| !e.kv.is_zero());
        self.elements = out;
    }

    pub fn add_chain(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(ChainError::Dimension(format!(
                "chains in dimensions {} and {}",
                self.n, other.n
            )));
        }
        let mut elements = self.elements.clone();
        elements.extend(other.elements.iter().cloned());
        Self::new(self.n(), elements)
    }

    pub fn sub_chain(&self, other: &Self) -> Result<Self> {
        self.add_chain(&other.scale(-1.0))
    }

    /// Sum of element k-vector masses: the mass norm for order-0 chains and
    /// a convenient canonical-discrepancy metric in general (axis monomials
    /// are unit symmetric factors).
    pub fn total_mass(&self) -> f64 {
        let mut acc = PairwiseSum::new();
        for e in &self.elements {
            acc.push(e.kv.mass());
        }
        acc.total()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        if c == 0.0 {
            out.elements.clear();
            return out;
        }
        for e in &mut out.elements {
            e.kv = e.kv.scale(c);
        }
        out.elements.retain(|e| !e.kv.is_zero());
        out
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    /// Translates every element point by `v`.
    pub fn translate(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.n() {
            return Err(ChainError::Dimension(format!(
                "translation vector has {} coordinates in dimension {}",
                v.len(),
                self.n
            )));
        }
        let elements = self
            .elements
            .iter()
            .map(|e| ChainElement {
                point: add(&e.point, v),
                sym: e.sym.clone(),
                kv: e.kv.clone(),
            })
            .collect();
        Self::new(self.n(), elements)
    }

    /// Distinct support points, in canonical order.
    pub fn support(&self) -> Vec<Vecn> {
        let mut pts: Vec<Vecn> = Vec::new();
        for e in &self.elements {
            if pts.last().map(|p| p != &e.point).unwrap_or(true) {
                pts.push(e.point.clone());
            }
        }
        pts.dedup();
        pts
    }

    /// Axis-aligned bounding box of the support (None for the zero chain).
    pub fn bbox(&self) -> Option<(Vecn, Vecn)> {
        let first = self.elements.first()?;
        let mut lo = first.point.clone();
        let mut hi = first.point.clone();
        for e in &self.elements {
            for (i, &x) in e.point.iter().enumerate() {
                lo[i] = lo[i].min(x);
                hi[i] = hi[i].max(x);
            }
        }
        Some((lo, hi))
    }

    /// Keeps the elements whose point lies in the region. Restriction is a
    /// sheaf-style operation; it is *not* continuous in the B^r norms (see
    /// module tests), so downstream certified bounds never cross a restrict.
    pub fn restrict(&self, region: &OpenRegion) -> Result<Self> {
        if region.dim() != self.n() {
            return Err(ChainError::Dimension(format!(
                "region in dimension {} applied to chain in dimension {}",
                region.dim(),
                self.n
            )));
        }
        let elements = self
            .elements
            .iter()
            .filter(|e| region.contains(&e.point))
            .cloned()
            .collect();
        Self::new(self.n(), elements)
    }

    /// The j-difference chain `Delta_{sigma^j}(p; kv)`: `2^j` signed copies
    /// of an order-0 element at the corners of the parallelepiped spanned by
    /// the factors of `sigma`, with sign `(-1)^{j - sum eps}`.
    /// `Delta_{sigma^0}` is the element itself.
    pub fn difference_chain(point: &[f64], sigma: &SymTensor, kv: &KVector) -> Result<Self> {
        let n = kv.n();
        if point.len() != n || sigma.n() != n {
            return Err(ChainError::Dimension(
                "difference chain pieces live in different dimensions".into(),
            ));
        }
        let j = sigma.order();
        let mut elements = Vec::with_capacity(1 << j);
        for bits in 0u32..(1u32 << j) {
            let mut p = vecn(point);
            let mut ones = 0;
            for (i, f) in sigma.factors().iter().enumerate() {
                if bits & (1 << i) != 0 {
                    ones += 1;
                    for (c, fc) in p.iter_mut().zip(f.iter()) {
                        *c += fc;
                    }
                }
            }
            let sign = if (j - ones) % 2 == 0 { 1.0 } else { -1.0 };
            elements.push(ChainElement::order_zero(p, kv.scale(sign)));
        }
        Self::new(n, elements)
    }
}

// ---------------------------------------------------------------------------
// Open regions
// ---------------------------------------------------------------------------

/// An open subset of R^n with exact membership, optional signed distance,
/// and exact containment certificates for boxes and convex hulls of finite
/// point sets (used by the localized norms and Whitney streams).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OpenRegion {
    /// Open axis-aligned box `{lo < x < hi}`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Open Euclidean ball.
    Ball { center: Vec<f64>, radius: f64 },
    /// Open half-space `{<normal, x> < offset}`.
    Halfspace { normal: Vec<f64>, offset: f64 },
    /// Open disk of the given radius about the origin in R^2, minus the
    /// nonnegative x-axis. The standard example of a non-convex region whose
    /// localized norms see the slit.
    Slitdisk { radius: f64 },
    /// All of R^n.
    All { n: usize },
}

impl OpenRegion {
    pub fn dim(&self) -> usize {
        match self {
            OpenRegion::Box { lo, .. } => lo.len(),
            OpenRegion::Ball { center, .. } => center.len(),
            OpenRegion::Halfspace { normal, .. } => normal.len(),
            OpenRegion::Slitdisk { .. } => 2,
            OpenRegion::All { n } => *n,
        }
    }

    /// Exact membership (open conditions are strict).
    pub fn contains(&self, p: &[f64]) -> bool {
        match self {
            OpenRegion::Box { lo, hi } => p
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(x, (l, h))| *l < *x && *x < *h),
            OpenRegion::Ball { center, radius } => {
                crate::multivec::norm(&crate::multivec::sub(p, center)) < *radius
            }
            OpenRegion::Halfspace { normal, offset } => crate::multivec::dot(normal, p) < *offset,
            OpenRegion::Slitdisk { radius } => {
                let r2 = p[0] * p[0] + p[1] * p[1];
                r2 < radius * radius && !(p[1] == 0.0 && p[0] >= 0.0)
            }
            OpenRegion::All { .. } => true,
        }
    }

    /// Signed distance to the boundary (positive inside), when available.
    pub fn signed_distance(&self, p: &[f64]) -> Option<f64> {
        match self {
            OpenRegion::Box { lo, hi } => {
                let mut d = f64::INFINITY;
                for (x, (l, h)) in p.iter().zip(lo.iter().zip(hi.iter())) {
                    d = d.min(x - l).min(h - x);
                }
                Some(d)
            }
            OpenRegion::Ball { center, radius } => {
                Some(radius - crate::multivec::norm(&crate::multivec::sub(p, center)))
            }
            OpenRegion::Halfspace { normal, offset } => {
                let nn = crate::multivec::norm(normal);
                if nn == 0.0 {
                    None
                } else {
                    Some((offset - crate::multivec::dot(normal, p)) / nn)
                }
            }
            OpenRegion::Slitdisk { radius } => {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let slit = if p[0] >= 0.0 {
                    p[1].abs()
                } else {
                    r
                };
                Some((radius - r).min(slit))
            }
            OpenRegion::All { .. } => Some(f64::INFINITY),
        }
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self, OpenRegion::Slitdisk { .. })
    }

    pub fn is_bounded(&self) -> bool {
        matches!(
            self,
            OpenRegion::Box { .. } | OpenRegion::Ball { .. } | OpenRegion::Slitdisk { .. }
        )
    }

    /// Bounding box of the region, when bounded.
    pub fn bbox(&self) -> Option<(Vecn, Vecn)> {
        match self {
            OpenRegion::Box { lo, hi } => Some((vecn(lo), vecn(hi))),
            OpenRegion::Ball { center, radius } => Some((
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            )),
            OpenRegion::Slitdisk { radius } => {
                Some((vecn(&[-radius, -radius]), vecn(&[*radius, *radius])))
            }
            _ => None,
        }
    }

    /// Exactly decides whether the closed box `[lo, hi]` lies inside the
    /// region. Used by the Whitney stream's dilated-cube keep test.
    pub fn contains_box(&self, lo: &[f64], hi: &[f64]) -> bool {
        match self {
            OpenRegion::Slitdisk { radius } => {
                let corners_ok = [lo[0], hi[0]].iter().all(|&x| {
                    [lo[1], hi[1]]
                        .iter()
                        .all(|&y| x * x + y * y < radius * radius)
                });
                let hits_slit = lo[1] <= 0.0 && 0.0 <= hi[1] && hi[0] >= 0.0;
                corners_ok && !hits_slit
            }
            _ => self.corners_inside(lo, hi),
        }
    }

    fn corners_inside(&self, lo: &[f64], hi: &[f64]) -> bool {
        let n = lo.len();
        let mut p = vecn(lo);
        for bits in 0u32..(1u32 << n) {
            for i in 0..n {
                p[i] = if bits & (1 << i) != 0 { hi[i] } else { lo[i] };
            }
            if !self.contains(&p) {
                return false;
            }
        }
        true
    }

    /// Certifies that the convex hull of the given points lies inside the
    /// region. Exact for convex kinds (vertex membership); for the slit disk
    /// it combines vertex membership with an exact pairwise slit-crossing
    /// test that over-approximates the hull's slice at y = 0 (conservative:
    /// may reject a hull that barely misses the slit, never accepts one that
    /// hits it).
    pub fn contains_hull(&self, pts: &[Vecn]) -> bool {
        if pts.is_empty() {
            return true;
        }
        if self.is_convex() {
            return pts.iter().all(|p| self.contains(p));
        }
        match self {
            OpenRegion::Slitdisk { .. } => {
                if !pts.iter().all(|p| self.contains(p)) {
                    return false;
                }
                // Any segment between hull points crossing y = 0 at x >= 0
                // would put the hull on the slit.
                for (a, bidx) in pts.iter().zip(1..) {
                    for b in &pts[bidx..] {
                        let (ya, yb) = (a[1], b[1]);
                        if ya == 0.0 && a[0] >= 0.0 {
                            return false;
                        }
                        if (ya < 0.0 && yb > 0.0) || (ya > 0.0 && yb < 0.0) {
                            let t = -ya / (yb - ya);
                            let x = a[0] + t * (b[0] - a[0]);
                            if x >= 0.0 {
                                return false;
                            }
                        }
                    }
                }
                true
            }
            _ => unreachable!("non-convex kinds handled above"),
        }
    }
}

/// Certifies that the convex hull of all `2^j` vertices of the difference
/// chain `Delta_{sigma}(p; .)` lies inside `region` ("the difference happens
/// inside U").
pub fn difference_inside_region(
    point: &[f64],
    sigma: &SymTensor,
    region: &OpenRegion,
) -> bool {
    let j = sigma.order();
    let mut pts: Vec<Vecn> = Vec::with_capacity(1 << j);
    for bits in 0u32..(1u32 << j) {
        let mut p = vecn(point);
        for (i, f) in sigma.factors().iter().enumerate() {
            if bits & (1 << i) != 0 {
                for (c, fc) in p.iter_mut().zip(f.iter()) {
                    *c += fc;
                }
            }
        }
        pts.push(p);
    }
    region.contains_hull(&pts)
}

// ---------------------------------------------------------------------------
// JSON encoding
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementRepr {
    p: Vec<f64>,
    sym: Vec<Vec<f64>>,
    kv: KVector,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainRepr {
    n: usize,
    elements: Vec<ElementRepr>,
}

impl Serialize for DiracChain {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.n();
        let repr = ChainRepr {
            n,
            elements: self
                .elements
                .iter()
                .map(|e| ElementRepr {
                    p: e.point.to_vec(),
                    sym: e
                        .sym
                        .iter()
                        .map(|&i| {
                            let mut unit = vec![0.0; n];
                            unit[i as usize] = 1.0;
                            unit
                        })
                        .collect(),
                    kv: e.kv.clone(),
                })
                .collect(),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiracChain {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ChainRepr::deserialize(d)?;
        let mut elements = Vec::new();
        for e in &repr.elements {
            if e.kv.n() != repr.n || e.p.len() != repr.n {
                return Err(D::Error::custom(
                    "element dimension does not match chain dimension",
                ));
            }
            let factors: Vec<Vecn> = e.sym.iter().map(|f| vecn(f)).collect();
            for f in &factors {
                if f.len() != repr.n {
                    return Err(D::Error::custom(
                        "symmetric factor dimension does not match chain dimension",
                    ));
                }
            }
            elements.extend(expand_sym_factors(&e.p, &factors, &e.kv));
        }
        DiracChain::new(repr.n, elements).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multivec::vecn;

    fn unit_kv(n: usize) -> KVector {
        KVector::scalar(n, 1.0).unwrap()
    }

    #[test]
    fn canonical_merge_and_cancel() {
        let kv = KVector::from_vector(2, &[1.0, 0.0]).unwrap();
        let a = ChainElement::order_zero(vecn(&[0.5, 0.5]), kv.clone());
        let b = ChainElement::order_zero(vecn(&[0.5, 0.5]), kv.scale(-1.0));
        let chain = DiracChain::new(2, vec![a, b]).unwrap();
        assert!(chain.is_zero());
    }

    #[test]
    fn merge_respects_tolerance() {
        let kv = unit_kv(1);
        let a = ChainElement::order_zero(vecn(&[0.0]), kv.clone());
        let b = ChainElement::order_zero(vecn(&[POINT_MERGE_TOL / 2.0]), kv.clone());
        let c = ChainElement::order_zero(vecn(&[1.0]), kv.clone());
        let chain = DiracChain::new(1, vec![a, b, c]).unwrap();
        assert_eq!(chain.len(), 2, "nearby points merge, distant ones do not");
        assert!((chain.elements()[0].kv.coeff(0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sym_expansion_linearizes_directions() {
        // (p; v (x) 1) with v = 2 e1 + 3 e2 expands to 2 (p; e1) + 3 (p; e2)
        // monomial elements.
        let kv = unit_kv(2);
        let elems = expand_sym_factors(&[0.0, 0.0], &[vecn(&[2.0, 3.0])], &kv);
        assert_eq!(elems.len(), 2);
        let chain = DiracChain::new(2, elems).unwrap();
        assert_eq!(chain.len(), 2);
        assert_eq!(chain.elements()[0].sym.as_slice(), &[0]);
        assert!((chain.elements()[0].kv.coeff(0) - 2.0).abs() < 1e-15);
        assert_eq!(chain.elements()[1].sym.as_slice(), &[1]);
        assert!((chain.elements()[1].kv.coeff(0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn sym_expansion_merges_symmetric_duplicates() {
        // (e1+e2) o (e1+e2) has monomials {1,1}, {1,2} (twice), {2,2}.
        let kv = unit_kv(2);
        let v = vecn(&[1.0, 1.0]);
        let elems = expand_sym_factors(&[0.0, 0.0], &[v.clone(), v], &kv);
        assert_eq!(elems.len(), 3);
        let mid = elems.iter().find(|e| e.sym.as_slice() == [0, 1]).unwrap();
        assert!((mid.kv.coeff(0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn difference_chain_signs_and_mass() {
        // Delta_{u o v}(p; 1): four vertices with checkerboard signs.
        let sigma = SymTensor::new(
            2,
            vec![vecn(&[1.0, 0.0]), vecn(&[0.0, 1.0])],
        )
        .unwrap();
        let d = DiracChain::difference_chain(&[0.0, 0.0], &sigma, &unit_kv(2)).unwrap();
        assert_eq!(d.len(), 4);
        let coeff_at = |x: f64, y: f64| {
            d.elements()
                .iter()
                .find(|e| e.point.as_slice() == [x, y])
                .unwrap()
                .kv
                .coeff(0)
        };
        assert_eq!(coeff_at(0.0, 0.0), 1.0);
        assert_eq!(coeff_at(1.0, 0.0), -1.0);
        assert_eq!(coeff_at(0.0, 1.0), -1.0);
        assert_eq!(coeff_at(1.0, 1.0), 1.0);
    }

    #[test]
    fn difference_chain_order_zero_is_identity() {
        let sigma = SymTensor::empty(2);
        let d = DiracChain::difference_chain(&[1.0, 2.0], &sigma, &unit_kv(2)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.elements()[0].kv.coeff(0), 1.0);
    }

    #[test]
    fn translate_moves_support() {
        let chain = DiracChain::singleton(&[1.0, 2.0], unit_kv(2)).unwrap();
        let t = chain.translate(&[0.5, -1.0]).unwrap();
        assert_eq!(t.elements()[0].point.as_slice(), &[1.5, 1.0]);
    }

    #[test]
    fn restrict_keeps_only_inside_points() {
        let kv = unit_kv(2);
        let a = ChainElement::order_zero(vecn(&[0.25, 0.25]), kv.clone());
        let b = ChainElement::order_zero(vecn(&[2.0, 2.0]), kv.clone());
        let chain = DiracChain::new(2, vec![a, b]).unwrap();
        let q = OpenRegion::Box {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        };
        let r = chain.restrict(&q).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.elements()[0].point.as_slice(), &[0.25, 0.25]);
    }

    #[test]
    fn region_membership_and_boxes() {
        let ball = OpenRegion::Ball {
            center: vec![0.0, 0.0],
            radius: 1.0,
        };
        assert!(ball.contains(&[0.5, 0.0]));
        assert!(!ball.contains(&[1.0, 0.0]));
        assert!(ball.contains_box(&[-0.5, -0.5], &[0.5, 0.5]));
        assert!(!ball.contains_box(&[0.0, 0.0], &[0.9, 0.9]));

        let slit = OpenRegion::Slitdisk { radius: 1.0 };
        assert!(slit.contains(&[-0.5, 0.0]));
        assert!(!slit.contains(&[0.5, 0.0]));
        assert!(slit.contains(&[0.5, 0.1]));
        // A box straddling the positive x-axis is rejected exactly.
        assert!(!slit.contains_box(&[0.1, -0.1], &[0.3, 0.1]));
        assert!(slit.contains_box(&[0.1, 0.05], &[0.3, 0.2]));
    }

    #[test]
    fn hull_certificates() {
        let slit = OpenRegion::Slitdisk { radius: 1.0 };
        // A difference straddling the slit is rejected.
        let sigma = SymTensor::new(2, vec![vecn(&[0.0, 0.2])]).unwrap();
        assert!(!difference_inside_region(&[0.5, -0.1], &sigma, &slit));
        // The same difference on the far side of the origin is fine.
        assert!(difference_inside_region(&[-0.5, -0.1], &sigma, &slit));
        // Convex region: exact vertex test.
        let ball = OpenRegion::Ball {
            center: vec![0.0, 0.0],
            radius: 1.0,
        };
        assert!(difference_inside_region(&[-0.5, -0.1], &sigma, &ball));
        assert!(!difference_inside_region(&[0.99, 0.0], &sigma, &ball));
    }

    #[test]
    fn chain_json_roundtrip_is_canonical() {
        let kv = KVector::from_vector(2, &[1.0, 0.0]).unwrap();
        let chain = DiracChain::new(
            2,
            vec![ChainElement::new(
                vecn(&[0.0, 0.0]),
                SymMono::from_slice(&[1]),
                kv,
            )],
        )
        .unwrap();
        let json = serde_json::to_string(&chain).unwrap();
        let back: DiracChain = serde_json::from_str(&json).unwrap();
        assert_eq!(back, chain);
        // The emitted sym factors are unit basis vectors.
        assert!(json.contains(r#""sym":[[0.0,1.0]]"#));
    }

    #[test]
    fn chain_json_expands_general_directions() {
        let json = r#"{
            "n": 2,
            "elements": [
                {"p": [0.0, 0.0], "sym": [[2.0, 3.0]], "kv": {"n":2,"grade":0,"terms":[{"idx":[],"c":1.0}]}}
            ]
        }"#;
        let chain: DiracChain = serde_json::from_str(json).unwrap();
        assert_eq!(chain.len(), 2);
        assert_eq!(chain.max_order(), 1);
    }

    #[test]
    fn support_and_bbox() {
        let kv = unit_kv(2);
        let chain = DiracChain::new(
            2,
            vec![
                ChainElement::order_zero(vecn(&[0.0, 1.0]), kv.clone()),
                ChainElement::order_zero(vecn(&[2.0, -1.0]), kv.clone()),
            ],
        )
        .unwrap();
        assert_eq!(chain.support().len(), 2);
        let (lo, hi) = chain.bbox().unwrap();
        assert_eq!(lo.as_slice(), &[0.0, -1.0]);
        assert_eq!(hi.as_slice(), &[2.0, 1.0]);
    }
}
