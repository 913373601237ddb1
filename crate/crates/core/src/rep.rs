//! Representative approximation streams for classical domains — cubes,
//! affine cells, polyhedral chains, open sets (Whitney decomposition),
//! the Cantor set, the Sierpinski triangle, vector fields, algebraic
//! (pushforward) chains, and dipole cells — plus extrapolated integration
//! over streams with certified tail bounds.
//!
//! A stream produces, for each index `j`, a Dirac chain `A_j` approximating
//! a domain; the chains are Cauchy in a `B^r` norm and their pairings with
//! smooth forms converge to the classical integrals. Streams are evaluated
//! chunk-free: `for_each_element` visits elements without materializing the
//! level, so deep levels (hundreds of millions of elements) can be paired
//! against forms in constant memory.

use crate::chain::{ChainElement, DiracChain, OpenRegion};
use crate::chainops;
use crate::error::{ChainError, Result};
use crate::form::{Form, SmoothMap};
use crate::multivec::{norm, vecn, KVector, PairwiseSum, Vecn};
use crate::norms;
use serde::{Deserialize, Serialize};

/// Hard cap on `chain(j)` materialization (elements).
const MAX_MATERIALIZE: u64 = 1 << 22;

/// Multiplicative guard folded into certified Cauchy rates.
const RATE_GUARD: f64 = 1.0 + 1e-9;

// ---------------------------------------------------------------------------
// Domain specifications (scenario JSON)
// ---------------------------------------------------------------------------

/// A weighted oriented affine cell for polyhedral streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedCell {
    #[serde(default = "one")]
    pub weight: f64,
    pub base: Vec<f64>,
    pub edges: Vec<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

/// One component of a k-vector field: a blade index tuple and a scalar
/// coefficient function.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldComp {
    pub idx: Vec<usize>,
    pub coeff: Form,
}

/// Serializable description of a stream domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    /// Axis-aligned n-cube (volume chain).
    Cube { lo: Vec<f64>, hi: Vec<f64> },
    /// Oriented affine k-cell.
    Cell { base: Vec<f64>, edges: Vec<Vec<f64>> },
    /// Weighted sum of affine cells.
    Polyhedral { cells: Vec<WeightedCell> },
    /// Whitney-style dyadic decomposition of a bounded open set.
    OpenSet { region: OpenRegion },
    /// Middle-thirds Cantor set, weighted by (3/2)^n per stage.
    Cantor {
        #[serde(default = "default_true")]
        scaled: bool,
    },
    /// Endpoint 0-chains of the Cantor stages.
    CantorBoundary {
        #[serde(default = "default_true")]
        scaled: bool,
    },
    /// Sierpinski triangle on (0,0), (1,0), (0,1), weighted by (4/3)^k.
    Sierpinski,
    /// Representative of a k-vector field with compact support in a region.
    VectorField {
        comps: Vec<FieldComp>,
        region: OpenRegion,
    },
    /// Pushforward of a base stream under a smooth map (algebraic chain).
    Pushforward {
        map: SmoothMap,
        base: Box<DomainSpec>,
    },
    /// Dipole cell: prederivative of a base stream along v.
    Dipole { v: Vec<f64>, base: Box<DomainSpec> },
    /// Boundary stream of a cell-like base (faces with induced orientation).
    BoundaryOf { base: Box<DomainSpec> },
}

fn default_true() -> bool {
    true
}

// ---------------------------------------------------------------------------
// Affine cells
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct AffineCell {
    base: Vecn,
    edges: Vec<Vecn>,
    /// Wedge of the edges (oriented k-volume), weight folded in.
    kv: KVector,
}

impl AffineCell {
    fn new(n: usize, base: Vecn, edges: Vec<Vecn>, weight: f64) -> Result<Self> {
        if base.len() != n || edges.iter().any(|u| u.len() != n) {
            return Err(ChainError::Dimension(
                "cell base/edges dimension mismatch".into(),
            ));
        }
        let refs: Vec<&[f64]> = edges.iter().map(|u| u.as_slice()).collect();
        let kv = KVector::simple(n, &refs)?.scale(weight);
        if kv.is_zero() && weight != 0.0 {
            return Err(ChainError::Unsupported(
                "degenerate cell: edges are linearly dependent".into(),
            ));
        }
        Ok(Self { base, edges, kv })
    }

    fn k(&self) -> usize {
        self.edges.len()
    }

    /// Emits the 2^{kj} midpoint elements of the level-j subdivision.
    fn for_each(
        &self,
        j: u32,
        f: &mut dyn FnMut(&ChainElement) -> Result<()>,
    ) -> Result<()> {
        let k = self.k();
        let bits = k as u64 * j as u64;
        if bits > 62 {
            return Err(ChainError::Numerical(format!(
                "cell level {j} needs 2^{bits} elements"
            )));
        }
        let per_axis = 1u64 << j;
        let h = 0.5f64.powi(j as i32);
        let kvj = self.kv.scale(0.5f64.powi((k as i32) * (j as i32)));
        let total = 1u64 << bits;
        let mut center = self.base.clone();
        for idx in 0..total {
            center.copy_from_slice(&self.base);
            for (t, u) in self.edges.iter().enumerate() {
                let m = (idx >> (j as u64 * t as u64)) & (per_axis - 1);
                let frac = (m as f64 + 0.5) * h;
                for (d, &ud) in u.iter().enumerate() {
                    center[d] += frac * ud;
                }
            }
            f(&ChainElement::order_zero(center.clone(), kvj.clone()))?;
        }
        Ok(())
    }

    /// Corners of the cell (for support boxes).
    fn corners(&self) -> Vec<Vecn> {
        let k = self.k();
        let mut out = Vec::with_capacity(1 << k);
        for mask in 0u32..(1 << k) {
            let mut p = self.base.clone();
            for (t, u) in self.edges.iter().enumerate() {
                if mask >> t & 1 == 1 {
                    for (d, &ud) in u.iter().enumerate() {
                        p[d] += ud;
                    }
                }
            }
            out.push(p);
        }
        out
    }

    /// The oriented boundary as weighted (k-1)-cells: for edge t (0-based),
    /// the top face at base+u_t with sign (-1)^t and the bottom face at base
    /// with sign -(-1)^t, both spanned by the remaining edges.
    fn boundary_cells(&self, n: usize, weight: f64) -> Result<Vec<(f64, AffineCell)>> {
        let mut out = Vec::new();
        for t in 0..self.k() {
            let rest: Vec<Vecn> = self
                .edges
                .iter()
                .enumerate()
                .filter(|(s, _)| *s != t)
                .map(|(_, u)| u.clone())
                .collect();
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            let mut top_base = self.base.clone();
            for (d, &ud) in self.edges[t].iter().enumerate() {
                top_base[d] += ud;
            }
            out.push((
                weight * sign,
                AffineCell::new(n, top_base, rest.clone(), 1.0)?,
            ));
            out.push((
                -weight * sign,
                AffineCell::new(n, self.base.clone(), rest, 1.0)?,
            ));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// The stream
// ---------------------------------------------------------------------------

/// A pluggable element generator, so other modules (e.g. flows) can expose
/// their approximations through the same streaming interface.
pub trait ElementSource: std::fmt::Debug + Send + Sync {
    /// Upper bound on the number of elements at level `j`.
    fn level_len_bound(&self, j: u32) -> u64;
    /// Support box of the limit chain, when known.
    fn support_bbox(&self) -> Option<(Vecn, Vecn)>;
    /// Visits every element of `A_j` in a fixed deterministic order.
    fn for_each_element(
        &self,
        j: u32,
        f: &mut dyn FnMut(&ChainElement) -> Result<()>,
    ) -> Result<()>;
}

#[derive(Debug, Clone)]
enum Kind {
    /// Weighted affine cells (cube, cell, polyhedral, boundary streams).
    Cells(Vec<AffineCell>),
    /// Whitney decomposition of a bounded open set.
    OpenSet { region: OpenRegion },
    /// Cantor stages: midpoint 1-elements (or endpoint 0-elements).
    Cantor { scaled: bool, boundary: bool },
    /// Sierpinski stages: centroid 2-elements.
    Sierpinski,
    /// Sum over blades of m_{f_I} E_{e_I} perp(U-stream).
    FieldRep {
        comps: Vec<(Vec<usize>, Form)>,
        region: OpenRegion,
        /// Sign of perp applied to the volume blade.
        perp_sign: f64,
    },
    Pushforward {
        map: SmoothMap,
        base: Box<ChainStream>,
    },
    Dipole { v: Vecn, base: Box<ChainStream> },
    /// Elements supplied by another module through [`ElementSource`].
    Source(std::sync::Arc<dyn ElementSource>),
}

/// A deterministic generator of Dirac-chain approximations `A_j`.
#[derive(Debug, Clone)]
pub struct ChainStream {
    n: usize,
    grade: usize,
    kind: Kind,
}

impl ChainStream {
    // -- constructors -------------------------------------------------------

    pub fn cube(lo: &[f64], hi: &[f64]) -> Result<Self> {
        let n = lo.len();
        if hi.len() != n || n == 0 {
            return Err(ChainError::Dimension("cube needs matching lo/hi".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(a, b)| !(a < b)) {
            return Err(ChainError::Unsupported(
                "degenerate cube: need lo < hi on every axis".into(),
            ));
        }
        let edges: Vec<Vecn> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|d| if d == i { hi[i] - lo[i] } else { 0.0 })
                    .collect()
            })
            .collect();
        let cell = AffineCell::new(n, vecn(lo), edges, 1.0)?;
        Ok(Self {
            n,
            grade: n,
            kind: Kind::Cells(vec![cell]),
        })
    }

    pub fn cell(base: &[f64], edges: &[Vec<f64>]) -> Result<Self> {
        let n = base.len();
        let cell = AffineCell::new(
            n,
            vecn(base),
            edges.iter().map(|u| vecn(u)).collect(),
            1.0,
        )?;
        let grade = cell.k();
        Ok(Self {
            n,
            grade,
            kind: Kind::Cells(vec![cell]),
        })
    }

    pub fn polyhedral(cells: &[WeightedCell]) -> Result<Self> {
        if cells.is_empty() {
            return Err(ChainError::Unsupported("empty polyhedral chain".into()));
        }
        let n = cells[0].base.len();
        let k = cells[0].edges.len();
        let mut list = Vec::with_capacity(cells.len());
        for c in cells {
            if c.base.len() != n || c.edges.len() != k {
                return Err(ChainError::Dimension(
                    "polyhedral cells must share dimension and grade".into(),
                ));
            }
            list.push(AffineCell::new(
                n,
                vecn(&c.base),
                c.edges.iter().map(|u| vecn(u)).collect(),
                c.weight,
            )?);
        }
        Ok(Self {
            n,
            grade: k,
            kind: Kind::Cells(list),
        })
    }

    pub fn open_set(region: OpenRegion) -> Result<Self> {
        let n = region.dim();
        if region.bbox().is_none() {
            return Err(ChainError::Unsupported(
                "open-set streams need a bounded region".into(),
            ));
        }
        Ok(Self {
            n,
            grade: n,
            kind: Kind::OpenSet { region },
        })
    }

    pub fn cantor(scaled: bool) -> Self {
        Self {
            n: 1,
            grade: 1,
            kind: Kind::Cantor {
                scaled,
                boundary: false,
            },
        }
    }

    pub fn cantor_boundary(scaled: bool) -> Self {
        Self {
            n: 1,
            grade: 0,
            kind: Kind::Cantor {
                scaled,
                boundary: true,
            },
        }
    }

    pub fn sierpinski() -> Self {
        Self {
            n: 2,
            grade: 2,
            kind: Kind::Sierpinski,
        }
    }

    pub fn field_rep(comps: Vec<(Vec<usize>, Form)>, region: OpenRegion) -> Result<Self> {
        let n = region.dim();
        if region.bbox().is_none() {
            return Err(ChainError::Unsupported(
                "field representatives need a bounded region".into(),
            ));
        }
        if comps.is_empty() {
            return Err(ChainError::Unsupported("field has no components".into()));
        }
        let k = comps[0].0.len();
        for (idx, f) in &comps {
            if idx.len() != k {
                return Err(ChainError::Grade(
                    "field components must share their blade grade".into(),
                ));
            }
            if f.n() != n || f.grade() != 0 {
                return Err(ChainError::Grade(
                    "field coefficients must be 0-forms on the ambient space".into(),
                ));
            }
        }
        // perp of the volume blade is a scalar; its sign rides on every
        // element of the representative.
        let full: Vec<usize> = (1..=n).collect();
        let perp_sign = KVector::basis_blade(n, &full, 1.0)?.perp().coeff(0);
        Ok(Self {
            n,
            grade: k,
            kind: Kind::FieldRep {
                comps,
                region,
                perp_sign,
            },
        })
    }

    pub fn pushforward(map: SmoothMap, base: ChainStream) -> Result<Self> {
        if map.n_in() != base.n {
            return Err(ChainError::Dimension(format!(
                "map expects dimension {}, base stream has {}",
                map.n_in(),
                base.n
            )));
        }
        Ok(Self {
            n: map.n_out(),
            grade: base.grade,
            kind: Kind::Pushforward {
                map,
                base: Box::new(base),
            },
        })
    }

    pub fn dipole(v: &[f64], base: ChainStream) -> Result<Self> {
        if v.len() != base.n {
            return Err(ChainError::Dimension(
                "dipole direction dimension mismatch".into(),
            ));
        }
        Ok(Self {
            n: base.n,
            grade: base.grade,
            kind: Kind::Dipole {
                v: vecn(v),
                base: Box::new(base),
            },
        })
    }

    /// Boundary stream: faces with induced orientation for cell-like bases,
    /// endpoint chains for the Cantor stages.
    /// Wraps an external element generator as a stream.
    pub fn from_source(
        n: usize,
        grade: usize,
        source: std::sync::Arc<dyn ElementSource>,
    ) -> Result<Self> {
        if n == 0 || grade > n {
            return Err(ChainError::Dimension(
                "source stream needs 0 < n and grade <= n".into(),
            ));
        }
        Ok(ChainStream {
            n,
            grade,
            kind: Kind::Source(source),
        })
    }

    pub fn boundary_of(base: ChainStream) -> Result<Self> {
        match &base.kind {
            Kind::Cells(cells) => {
                if base.grade == 0 {
                    return Err(ChainError::Grade(
                        "0-cells have empty boundary".into(),
                    ));
                }
                let mut faces = Vec::new();
                for c in cells {
                    // The cell kv carries the weight; recover it as the ratio
                    // against the unweighted wedge along the leading blade.
                    let unweighted =
                        AffineCell::new(base.n, c.base.clone(), c.edges.clone(), 1.0)?;
                    let (m0, c0) = unweighted.kv.terms().next().ok_or_else(|| {
                        ChainError::Unsupported("degenerate cell in boundary".into())
                    })?;
                    let w = c.kv.coeff(m0) / c0;
                    for (fw, face) in c.boundary_cells(base.n, w)? {
                        faces.push(AffineCell::new(
                            base.n,
                            face.base.clone(),
                            face.edges.clone(),
                            fw,
                        )?);
                    }
                }
                Ok(Self {
                    n: base.n,
                    grade: base.grade - 1,
                    kind: Kind::Cells(faces),
                })
            }
            Kind::Cantor {
                scaled,
                boundary: false,
            } => Ok(Self::cantor_boundary(*scaled)),
            _ => Err(ChainError::Unsupported(
                "boundary streams exist for cells and the Cantor set".into(),
            )),
        }
    }

    pub fn from_spec(spec: &DomainSpec) -> Result<Self> {
        match spec {
            DomainSpec::Cube { lo, hi } => Self::cube(lo, hi),
            DomainSpec::Cell { base, edges } => Self::cell(base, edges),
            DomainSpec::Polyhedral { cells } => Self::polyhedral(cells),
            DomainSpec::OpenSet { region } => Self::open_set(region.clone()),
            DomainSpec::Cantor { scaled } => Ok(Self::cantor(*scaled)),
            DomainSpec::CantorBoundary { scaled } => Ok(Self::cantor_boundary(*scaled)),
            DomainSpec::Sierpinski => Ok(Self::sierpinski()),
            DomainSpec::VectorField { comps, region } => Self::field_rep(
                comps.iter().map(|c| (c.idx.clone(), c.coeff.clone())).collect(),
                region.clone(),
            ),
            DomainSpec::Pushforward { map, base } => {
                Self::pushforward(map.clone(), Self::from_spec(base)?)
            }
            DomainSpec::Dipole { v, base } => Self::dipole(v, Self::from_spec(base)?),
            DomainSpec::BoundaryOf { base } => Self::boundary_of(Self::from_spec(base)?),
        }
    }

    // -- geometry -----------------------------------------------------------

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn grade(&self) -> usize {
        self.grade
    }

    /// The `B^r` class in which the stream is Cauchy.
    pub fn norm_order(&self) -> usize {
        match &self.kind {
            Kind::Dipole { base, .. } => base.norm_order() + 1,
            _ => 1,
        }
    }

    /// Upper bound on the number of elements at level j.
    pub fn level_len_bound(&self, j: u32) -> u64 {
        match &self.kind {
            Kind::Cells(cells) => cells
                .iter()
                .map(|c| 1u64 << ((c.k() as u64 * j as u64).min(63)))
                .sum(),
            Kind::OpenSet { region } => {
                let (lo, hi) = region.bbox().expect("bounded by construction");
                let h = 0.5f64.powi(j as i32);
                lo.iter()
                    .zip(hi.iter())
                    .map(|(a, b)| (((b - a) / h).ceil() as u64).saturating_add(5))
                    .product()
            }
            Kind::Cantor { boundary, .. } => 1u64 << (j + u32::from(*boundary)).min(63),
            Kind::Sierpinski => 3u64.saturating_pow(j),
            Kind::FieldRep { comps, region, .. } => {
                let (lo, hi) = region.bbox().expect("bounded by construction");
                let h = 0.5f64.powi(j as i32);
                let cubes: u64 = lo
                    .iter()
                    .zip(hi.iter())
                    .map(|(a, b)| (((b - a) / h).ceil() as u64).saturating_add(5))
                    .product();
                cubes.saturating_mul(comps.len() as u64)
            }
            Kind::Pushforward { base, .. } => base.level_len_bound(j),
            Kind::Dipole { base, .. } => base.level_len_bound(j).saturating_mul(self.n as u64),
            Kind::Source(s) => s.level_len_bound(j),
        }
    }

    /// Support box of the limit chain, when known.
    pub fn support_bbox(&self) -> Option<(Vecn, Vecn)> {
        match &self.kind {
            Kind::Cells(cells) => {
                let mut lo: Option<Vecn> = None;
                let mut hi: Option<Vecn> = None;
                for c in cells {
                    for p in c.corners() {
                        match (&mut lo, &mut hi) {
                            (Some(l), Some(h)) => {
                                for d in 0..p.len() {
                                    l[d] = l[d].min(p[d]);
                                    h[d] = h[d].max(p[d]);
                                }
                            }
                            _ => {
                                lo = Some(p.clone());
                                hi = Some(p);
                            }
                        }
                    }
                }
                lo.zip(hi)
            }
            Kind::OpenSet { region } | Kind::FieldRep { region, .. } => region.bbox(),
            Kind::Cantor { .. } => Some((vecn(&[0.0]), vecn(&[1.0]))),
            Kind::Sierpinski => Some((vecn(&[0.0, 0.0]), vecn(&[1.0, 1.0]))),
            Kind::Pushforward { map, base } => {
                let (lo, hi) = base.support_bbox()?;
                match map {
                    SmoothMap::Affine { .. } => {
                        // Map the corners of the base box.
                        let n_in = lo.len();
                        let mut out_lo: Option<Vecn> = None;
                        let mut out_hi: Option<Vecn> = None;
                        for mask in 0u32..(1 << n_in) {
                            let p: Vecn = (0..n_in)
                                .map(|d| if mask >> d & 1 == 1 { hi[d] } else { lo[d] })
                                .collect();
                            let q = map.eval(&p);
                            match (&mut out_lo, &mut out_hi) {
                                (Some(l), Some(h)) => {
                                    for d in 0..q.len() {
                                        l[d] = l[d].min(q[d]);
                                        h[d] = h[d].max(q[d]);
                                    }
                                }
                                _ => {
                                    out_lo = Some(q.clone());
                                    out_hi = Some(q);
                                }
                            }
                        }
                        out_lo.zip(out_hi)
                    }
                    SmoothMap::Circle { radius } => {
                        let r = radius.abs();
                        Some((vecn(&[-r, -r]), vecn(&[r, r])))
                    }
                    SmoothMap::Quadrifolium => {
                        Some((vecn(&[-1.0, -1.0]), vecn(&[1.0, 1.0])))
                    }
                    SmoothMap::Fold => {
                        let m = hi[0].abs().max(lo[0].abs());
                        Some((vecn(&[0.0]), vecn(&[m])))
                    }
                    SmoothMap::Poly { .. } => None,
                }
            }
            Kind::Dipole { base, .. } => base.support_bbox(),
            Kind::Source(s) => s.support_bbox(),
        }
    }

    // -- element generation --------------------------------------------------

    /// Visits every element of `A_j` in a fixed deterministic order.
    pub fn for_each_element(
        &self,
        j: u32,
        f: &mut dyn FnMut(&ChainElement) -> Result<()>,
    ) -> Result<()> {
        match &self.kind {
            Kind::Cells(cells) => {
                for c in cells {
                    c.for_each(j, f)?;
                }
                Ok(())
            }
            Kind::OpenSet { region } => {
                let full: Vec<usize> = (1..=self.n).collect();
                whitney_for_each(region, j, &mut |center, vol| {
                    let kv = KVector::basis_blade(self.n, &full, vol)?;
                    f(&ChainElement::order_zero(center.clone(), kv))
                })
            }
            Kind::Cantor { scaled, boundary } => cantor_for_each(j, *scaled, *boundary, f),
            Kind::Sierpinski => sierpinski_for_each(j, f),
            Kind::FieldRep {
                comps,
                region,
                perp_sign,
                ..
            } => {
                let n = self.n;
                whitney_for_each(region, j, &mut |center, vol| {
                    for (idx, coeff) in comps {
                        let g = coeff.eval_scalar(center)?;
                        if g == 0.0 {
                            continue;
                        }
                        let kv = KVector::basis_blade(n, idx, g * vol * perp_sign)?;
                        f(&ChainElement::order_zero(center.clone(), kv))?;
                    }
                    Ok(())
                })
            }
            Kind::Pushforward { map, base } => base.for_each_element(j, &mut |e| {
                if e.order() != 0 {
                    return Err(ChainError::Unsupported(
                        "pushforward streams need order-0 bases".into(),
                    ));
                }
                let q = map.eval(&e.point);
                let kv = map.pushforward_kv(&e.point, &e.kv)?;
                if kv.is_zero() {
                    return Ok(());
                }
                f(&ChainElement::order_zero(q, kv))
            }),
            Kind::Dipole { v, base } => {
                let mut buf: Vec<ChainElement> = Vec::with_capacity(self.n);
                base.for_each_element(j, &mut |e| {
                    buf.clear();
                    chainops::prederiv_elem(e, v, &mut buf);
                    for out in &buf {
                        f(out)?;
                    }
                    Ok(())
                })
            }
            Kind::Source(s) => s.for_each_element(j, f),
        }
    }

    /// Materializes `A_j` as a canonical Dirac chain (guarded by size).
    pub fn chain(&self, j: u32) -> Result<DiracChain> {
        let bound = self.level_len_bound(j);
        if bound > MAX_MATERIALIZE {
            return Err(ChainError::Numerical(format!(
                "level {j} may hold {bound} elements; evaluate it as a stream instead"
            )));
        }
        let mut elems = Vec::new();
        self.for_each_element(j, &mut |e| {
            elems.push(e.clone());
            Ok(())
        })?;
        DiracChain::new(self.n, elems)
    }

    /// Streaming pairing `omega(A_j)` with pairwise summation.
    pub fn eval_against(&self, j: u32, form: &Form) -> Result<f64> {
        if form.n() != self.n {
            return Err(ChainError::Dimension(
                "form and stream dimension mismatch".into(),
            ));
        }
        if form.grade() != self.grade {
            return Err(ChainError::Grade(format!(
                "pairing a grade-{} form with a grade-{} stream",
                form.grade(),
                self.grade
            )));
        }
        let mut acc = PairwiseSum::new();
        self.for_each_element(j, &mut |e| {
            acc.push(form.eval_element(e)?);
            Ok(())
        })?;
        Ok(acc.total())
    }

    /// Total mass of `A_j` (sum of element k-vector masses).
    pub fn level_mass(&self, j: u32) -> Result<f64> {
        let mut acc = PairwiseSum::new();
        self.for_each_element(j, &mut |e| {
            acc.push(e.kv.mass());
            Ok(())
        })?;
        Ok(acc.total())
    }

    // -- Cauchy structure ----------------------------------------------------

    /// Certified rate bound `c_j >= normUB(A_j - A_{j+1}, normOrder)`, when
    /// the stream carries one.
    pub fn cauchy_rate(&self, j: u32) -> Option<f64> {
        match &self.kind {
            Kind::Cells(cells) => {
                let mut rate = 0.0f64;
                for c in cells {
                    let edge_len: f64 = c.edges.iter().map(|u| norm(u)).sum();
                    rate += c.kv.mass_upper() * edge_len;
                }
                Some(rate * 0.25 * 0.5f64.powi(j as i32) * RATE_GUARD)
            }
            Kind::Cantor {
                scaled: true,
                boundary: false,
            } => Some(3f64.powi(-(j as i32) - 1) * RATE_GUARD),
            // Unscaled stages lose mass: each parent keeps an uncancelled
            // (1/3) 3^{-n} remainder, so the difference norm is dominated by
            // 2^n 3^{-n-1} = (2/3)^n / 3.
            Kind::Cantor {
                scaled: false,
                boundary: false,
            } => Some(0.34 * (2.0 / 3.0f64).powi(j as i32)),
            Kind::Sierpinski => Some(0.17 * 0.5f64.powi(j as i32)),
            _ => None,
        }
    }

    /// Certified tail `sum_{i >= j} c_i`.
    pub fn cauchy_tail(&self, j: u32) -> Option<f64> {
        match &self.kind {
            // geometric ratio 1/2
            Kind::Cells(_) | Kind::Sierpinski => self.cauchy_rate(j).map(|c| 2.0 * c),
            // ratio 1/3
            Kind::Cantor {
                scaled: true,
                boundary: false,
            } => self.cauchy_rate(j).map(|c| 1.5 * c),
            // ratio 2/3
            Kind::Cantor {
                scaled: false,
                boundary: false,
            } => self.cauchy_rate(j).map(|c| 3.0 * c),
            _ => None,
        }
    }

    /// Measured certified upper bound on `||A_j - A_{j+1}||_{B^r}`.
    ///
    /// Refinement streams (cells, Cantor, Sierpinski) run the norm matcher
    /// blockwise — one parent with its children per block — which is both
    /// memory-free and exactly the pairing the global greedy matcher makes
    /// (each child's nearest compatible partner is its own parent). Other
    /// streams materialize both levels.
    pub fn difference_norm_upper(&self, j: u32, r: usize) -> Result<f64> {
        match &self.kind {
            Kind::Cells(cells) => norms::norm_upper_blockwise(r, |sink| {
                for c in cells {
                    cell_difference_blocks(c, j, sink)?;
                }
                Ok(())
            }),
            Kind::Cantor {
                scaled,
                boundary: false,
            } => {
                let scaled = *scaled;
                norms::norm_upper_blockwise(r, |sink| {
                    cantor_difference_blocks(j, scaled, sink)
                })
            }
            Kind::Sierpinski => {
                norms::norm_upper_blockwise(r, |sink| sierpinski_difference_blocks(j, sink))
            }
            _ => {
                let bound = self
                    .level_len_bound(j)
                    .saturating_add(self.level_len_bound(j + 1));
                if bound > MAX_MATERIALIZE {
                    return Err(ChainError::Numerical(format!(
                        "difference at level {j} is too large to materialize"
                    )));
                }
                let mut elems = Vec::new();
                self.for_each_element(j, &mut |e| {
                    elems.push(e.clone());
                    Ok(())
                })?;
                self.for_each_element(j + 1, &mut |e| {
                    let mut neg = e.clone();
                    neg.kv = neg.kv.scale(-1.0);
                    elems.push(neg);
                    Ok(())
                })?;
                norms::norm_upper_from_elements(elems, r, None)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Element enumerators
// ---------------------------------------------------------------------------

/// Whitney-style enumeration: dyadic cubes of side 2^{-j} on the absolute
/// grid whose 3x dilate lies inside the region; calls back with the cube
/// center and volume.
fn whitney_for_each(
    region: &OpenRegion,
    j: u32,
    f: &mut dyn FnMut(&Vecn, f64) -> Result<()>,
) -> Result<()> {
    let n = region.dim();
    let (lo, hi) = region
        .bbox()
        .ok_or_else(|| ChainError::Unsupported("open-set streams need a bounded region".into()))?;
    let h = 0.5f64.powi(j as i32);
    let vol = h.powi(n as i32);
    let klo: Vec<i64> = lo.iter().map(|x| (x / h).floor() as i64 - 1).collect();
    let khi: Vec<i64> = hi.iter().map(|x| (x / h).ceil() as i64 + 1).collect();
    if klo.iter().zip(khi.iter()).any(|(a, b)| a >= b) {
        return Ok(());
    }
    let mut idx = klo.clone();
    let mut center: Vecn = vecn(&vec![0.0; n]);
    let mut corners: Vec<Vecn> = vec![vecn(&vec![0.0; n]); 1 << n];
    loop {
        for d in 0..n {
            center[d] = (idx[d] as f64 + 0.5) * h;
        }
        // Corners of the 3x dilate: center +- 1.5 h.
        for (mask, corner) in corners.iter_mut().enumerate() {
            for d in 0..n {
                let off = if mask >> d & 1 == 1 { 1.5 } else { -1.5 };
                corner[d] = center[d] + off * h;
            }
        }
        if region.contains_hull(&corners) {
            f(&center, vol)?;
        }
        // Odometer.
        let mut d = 0;
        loop {
            if d == n {
                return Ok(());
            }
            idx[d] += 1;
            if idx[d] < khi[d] {
                break;
            }
            idx[d] = klo[d];
            d += 1;
        }
    }
}

/// Integer powers of 3 (exact in u64 for n <= 40).
fn pow3_u64(n: u32) -> u64 {
    3u64.pow(n)
}

/// Stage-n Cantor enumeration. Interval i (bits b_0..b_{n-1}, most
/// significant digit first) has left endpoint a_i / 3^n with
/// a_i = sum 2 b_t 3^{n-1-t}, exact in u64 for n <= 33.
fn cantor_for_each(
    n: u32,
    scaled: bool,
    boundary: bool,
    f: &mut dyn FnMut(&ChainElement) -> Result<()>,
) -> Result<()> {
    if n > 32 {
        return Err(ChainError::Numerical(
            "Cantor stages above 32 overflow the exact integer bookkeeping".into(),
        ));
    }
    let pow3 = pow3_u64(n) as f64; // exact: 3^32 < 2^53
    // Per-interval weights: the scaled stage carries (3/2)^n, making the
    // midpoint element weight (3/2)^n 3^{-n} = 2^{-n} exactly dyadic.
    let mid_coeff = if scaled {
        0.5f64.powi(n as i32)
    } else {
        1.0 / pow3
    };
    let endpoint_w = if scaled {
        pow3 * 0.5f64.powi(n as i32) // (3/2)^n, exact product
    } else {
        1.0
    };
    for i in 0..(1u64 << n) {
        let mut a = 0u64;
        for t in 0..n {
            if i >> (n - 1 - t) & 1 == 1 {
                a += 2 * pow3_u64(n - 1 - t);
            }
        }
        let af = a as f64; // exact: a < 3^n < 2^53
        if boundary {
            let l = af / pow3;
            let r = (af + 1.0) / pow3;
            f(&ChainElement::order_zero(
                vecn(&[l]),
                KVector::scalar(1, -endpoint_w)?,
            ))?;
            f(&ChainElement::order_zero(
                vecn(&[r]),
                KVector::scalar(1, endpoint_w)?,
            ))?;
        } else {
            let mid = (af + 0.5) / pow3;
            f(&ChainElement::order_zero(
                vecn(&[mid]),
                KVector::from_vector(1, &[mid_coeff])?,
            ))?;
        }
    }
    Ok(())
}

/// Stage-k Sierpinski enumeration on the right triangle (0,0),(1,0),(0,1).
/// Element weight (4/3)^k * 4^{-k} * (1/2) = 3^{-k} / 2, stored exactly as
/// that quotient.
fn sierpinski_for_each(k: u32, f: &mut dyn FnMut(&ChainElement) -> Result<()>) -> Result<()> {
    if k > 20 {
        return Err(ChainError::Numerical("Sierpinski stage too deep".into()));
    }
    let coeff = 0.5 / 3f64.powi(k as i32);
    let kv = KVector::basis_blade(2, &[1, 2], coeff)?;
    let total = 3u64.pow(k);
    for i in 0..total {
        let mut v = [[0.0f64, 0.0], [1.0, 0.0], [0.0, 1.0]];
        for t in (0..k).rev() {
            let d = ((i / 3u64.pow(t)) % 3) as usize;
            let (a, b, c) = (v[d], v[(d + 1) % 3], v[(d + 2) % 3]);
            v = [
                a,
                [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0],
                [(a[0] + c[0]) / 2.0, (a[1] + c[1]) / 2.0],
            ];
        }
        let centroid = vecn(&[
            (v[0][0] + v[1][0] + v[2][0]) / 3.0,
            (v[0][1] + v[1][1] + v[2][1]) / 3.0,
        ]);
        f(&ChainElement::order_zero(centroid, kv.clone()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Difference blocks (parent with children) for the blockwise norm
// ---------------------------------------------------------------------------

fn cell_difference_blocks(
    cell: &AffineCell,
    j: u32,
    sink: &mut dyn FnMut(&[ChainElement]) -> Result<()>,
) -> Result<()> {
    let k = cell.k();
    let bits = k as u64 * j as u64;
    if bits + k as u64 > 62 {
        return Err(ChainError::Numerical("difference level too deep".into()));
    }
    let per_axis = 1u64 << j;
    let h_parent = 0.5f64.powi(j as i32);
    let h_child = 0.5f64.powi(j as i32 + 1);
    let kv_parent = cell.kv.scale(0.5f64.powi((k as i32) * (j as i32)));
    let kv_child = cell
        .kv
        .scale(0.5f64.powi((k as i32) * (j as i32 + 1)))
        .scale(-1.0);
    let mut block: Vec<ChainElement> = Vec::with_capacity(1 + (1 << k));
    let mut center = cell.base.clone();
    for idx in 0..(1u64 << bits) {
        block.clear();
        center.copy_from_slice(&cell.base);
        for (t, u) in cell.edges.iter().enumerate() {
            let m = (idx >> (j as u64 * t as u64)) & (per_axis - 1);
            let frac = (m as f64 + 0.5) * h_parent;
            for (d, &ud) in u.iter().enumerate() {
                center[d] += frac * ud;
            }
        }
        block.push(ChainElement::order_zero(center.clone(), kv_parent.clone()));
        // Children: the same standalone formula the level j+1 enumeration
        // uses, so coordinates agree bitwise with the true stream.
        for sub in 0u64..(1 << k) {
            center.copy_from_slice(&cell.base);
            for (t, u) in cell.edges.iter().enumerate() {
                let m = (idx >> (j as u64 * t as u64)) & (per_axis - 1);
                let mc = 2 * m + (sub >> t & 1);
                let frac = (mc as f64 + 0.5) * h_child;
                for (d, &ud) in u.iter().enumerate() {
                    center[d] += frac * ud;
                }
            }
            block.push(ChainElement::order_zero(center.clone(), kv_child.clone()));
        }
        sink(&block)?;
    }
    Ok(())
}

fn cantor_difference_blocks(
    n: u32,
    scaled: bool,
    sink: &mut dyn FnMut(&[ChainElement]) -> Result<()>,
) -> Result<()> {
    if n + 1 > 32 {
        return Err(ChainError::Numerical("Cantor stage too deep".into()));
    }
    let pow3 = pow3_u64(n) as f64;
    let pow3c = pow3_u64(n + 1) as f64;
    let c_parent = if scaled {
        0.5f64.powi(n as i32)
    } else {
        1.0 / pow3
    };
    let c_child = if scaled {
        0.5f64.powi(n as i32 + 1)
    } else {
        1.0 / pow3c
    };
    // Pairing keys compare k-vectors bitwise, so the parent is emitted
    // pre-split into child-sized pieces. The leftover c_parent - 2 c_child
    // is exact (Sterbenz: the operands are within a factor of two); it is
    // zero for the dyadic scaled weights and the genuine uncancelled
    // remainder for the unscaled ones.
    let c_rem = c_parent - 2.0 * c_child;
    let mut block: Vec<ChainElement> = Vec::with_capacity(5);
    for i in 0..(1u64 << n) {
        let mut a = 0u64;
        for t in 0..n {
            if i >> (n - 1 - t) & 1 == 1 {
                a += 2 * pow3_u64(n - 1 - t);
            }
        }
        block.clear();
        let mid = vecn(&[(a as f64 + 0.5) / pow3]);
        for _ in 0..2 {
            block.push(ChainElement::order_zero(
                mid.clone(),
                KVector::from_vector(1, &[c_child])?,
            ));
        }
        if c_rem != 0.0 {
            block.push(ChainElement::order_zero(
                mid.clone(),
                KVector::from_vector(1, &[c_rem])?,
            ));
        }
        // Children intervals have left endpoints 3a and 3a+2 at stage n+1.
        for off in [0u64, 2] {
            let ac = 3 * a + off;
            block.push(ChainElement::order_zero(
                vecn(&[(ac as f64 + 0.5) / pow3c]),
                KVector::from_vector(1, &[-c_child])?,
            ));
        }
        sink(&block)?;
    }
    Ok(())
}

fn sierpinski_difference_blocks(
    k: u32,
    sink: &mut dyn FnMut(&[ChainElement]) -> Result<()>,
) -> Result<()> {
    let c_parent = 0.5 / 3f64.powi(k as i32);
    let c_child = 0.5 / 3f64.powi(k as i32 + 1);
    // Parent pre-split into three child-sized pieces so the bitwise pairing
    // keys match, plus exact float dust: with p3 = fl(3 c_child),
    // e = 3 c_child - p3 (exact via fma) and r = c_parent - p3 (exact by
    // Sterbenz), the pieces 3 c_child + r - e sum to exactly c_parent.
    let p3 = 3.0 * c_child;
    let e = 3.0f64.mul_add(c_child, -p3);
    let r = c_parent - p3;
    let kv_piece = KVector::basis_blade(2, &[1, 2], c_child)?;
    let kv_child = KVector::basis_blade(2, &[1, 2], -c_child)?;
    let total = 3u64.pow(k);
    let mut block: Vec<ChainElement> = Vec::with_capacity(8);
    for i in 0..total {
        let mut v = [[0.0f64, 0.0], [1.0, 0.0], [0.0, 1.0]];
        for t in (0..k).rev() {
            let d = ((i / 3u64.pow(t)) % 3) as usize;
            let (a, b, c) = (v[d], v[(d + 1) % 3], v[(d + 2) % 3]);
            v = [
                a,
                [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0],
                [(a[0] + c[0]) / 2.0, (a[1] + c[1]) / 2.0],
            ];
        }
        block.clear();
        let centroid = vecn(&[
            (v[0][0] + v[1][0] + v[2][0]) / 3.0,
            (v[0][1] + v[1][1] + v[2][1]) / 3.0,
        ]);
        for _ in 0..3 {
            block.push(ChainElement::order_zero(centroid.clone(), kv_piece.clone()));
        }
        for dust in [r, -e] {
            if dust != 0.0 {
                block.push(ChainElement::order_zero(
                    centroid.clone(),
                    KVector::basis_blade(2, &[1, 2], dust)?,
                ));
            }
        }
        for d in 0..3usize {
            let (a, b, c) = (v[d], v[(d + 1) % 3], v[(d + 2) % 3]);
            let w = [
                a,
                [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0],
                [(a[0] + c[0]) / 2.0, (a[1] + c[1]) / 2.0],
            ];
            block.push(ChainElement::order_zero(
                vecn(&[
                    (w[0][0] + w[1][0] + w[2][0]) / 3.0,
                    (w[0][1] + w[1][1] + w[2][1]) / 3.0,
                ]),
                kv_child.clone(),
            ));
        }
        sink(&block)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Extrapolated integration
// ---------------------------------------------------------------------------

/// One row of the convergence table (CSV columns j, value, diff,
/// accelerated, certified_bound).
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub j: u32,
    pub value: f64,
    pub diff: f64,
    pub accelerated: f64,
    pub certified_bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamIntegral {
    /// Best estimate (iterated-Aitken value when stable, else the last raw
    /// value).
    pub value: f64,
    /// Certified bound on |value - limit|, when the form carries a
    /// certified norm and the stream a Cauchy rate.
    pub error_bound: Option<f64>,
    pub rows: Vec<ConvergenceRow>,
    pub converged: bool,
    pub diagnostics: String,
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrateOpts {
    pub j_start: u32,
    pub j_end: u32,
    /// Early-stop tolerance on the level differences.
    pub tol: Option<f64>,
}

impl Default for IntegrateOpts {
    fn default() -> Self {
        Self {
            j_start: 0,
            j_end: 10,
            tol: None,
        }
    }
}

/// One Aitken delta-squared pass; entries where the difference ratio leaves
/// the stability window (0.1, 0.9) fall back to the raw value.
fn aitken_pass(vals: &[f64]) -> Vec<f64> {
    let mut out = vals.to_vec();
    for i in 2..vals.len() {
        let d1 = vals[i] - vals[i - 1];
        let d0 = vals[i - 1] - vals[i - 2];
        if d0 == 0.0 || d1 == 0.0 {
            continue;
        }
        let ratio = d1 / d0;
        if !(0.1..=0.9).contains(&ratio) {
            continue;
        }
        let denom = d1 - d0;
        if denom == 0.0 {
            continue;
        }
        out[i] = vals[i] - d1 * d1 / denom;
    }
    out
}

/// Evaluates `omega(A_j)` along the stream with Aitken acceleration and a
/// certified tail bound when available.
pub fn integrate_stream(
    form: &Form,
    stream: &ChainStream,
    opts: IntegrateOpts,
) -> Result<StreamIntegral> {
    if opts.j_end < opts.j_start {
        return Err(ChainError::Schema("empty level range".into()));
    }
    // Certified norm of the form over a box slightly larger than the
    // stream's support, at the stream's Cauchy order.
    let cert_norm = stream.support_bbox().and_then(|(lo, hi)| {
        let pad: f64 = 1e-6
            * (1.0
                + lo.iter()
                    .zip(hi.iter())
                    .map(|(a, b)| (b - a).abs())
                    .fold(0.0, f64::max));
        let region = OpenRegion::Box {
            lo: lo.iter().map(|x| x - pad).collect(),
            hi: hi.iter().map(|x| x + pad).collect(),
        };
        form.certified_norm(stream.norm_order(), Some(&region)).ok()
    });
    let mut raw: Vec<f64> = Vec::new();
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for j in opts.j_start..=opts.j_end {
        let v = stream.eval_against(j, form)?;
        raw.push(v);
        let i = raw.len() - 1;
        let diff = if i == 0 { 0.0 } else { raw[i] - raw[i - 1] };
        let acc = aitken_pass(&raw);
        let certified_bound = match (cert_norm, stream.cauchy_tail(j)) {
            (Some(c), Some(t)) => Some(c * t),
            _ => None,
        };
        rows.push(ConvergenceRow {
            j,
            value: v,
            diff,
            accelerated: *acc.last().unwrap(),
            certified_bound,
        });
        if let Some(tol) = opts.tol {
            if i >= 2 && diff.abs() <= tol / 4.0 {
                break;
            }
        }
    }
    // Iterated Aitken (two passes) for the reported value.
    let once = aitken_pass(&raw);
    let twice = aitken_pass(&once);
    let value = *twice.last().unwrap();
    let last_row = rows.last().unwrap();
    let error_bound = last_row
        .certified_bound
        .map(|b| b + (value - last_row.value).abs());
    let diffs: Vec<f64> = raw.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let converged = diffs.len() < 2
        || diffs.last().unwrap() <= &(diffs[0] + 1e-300)
        || *diffs.last().unwrap() == 0.0;
    let diagnostics = if converged {
        "contracting differences".to_string()
    } else {
        "non-contracting differences detected".to_string()
    };
    Ok(StreamIntegral {
        value,
        error_bound,
        rows,
        converged,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::Form;

    fn unit_square() -> ChainStream {
        ChainStream::cube(&[0.0, 0.0], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn cube_level_zero_is_the_center_element() {
        let s = unit_square();
        let a = s.chain(0).unwrap();
        assert_eq!(a.elements().len(), 1);
        let e = &a.elements()[0];
        assert_eq!(e.point.as_slice(), &[0.5, 0.5]);
        assert_eq!(e.kv.coeff(0b11), 1.0);
    }

    #[test]
    fn cube_mass_is_exact_at_every_level() {
        let s = unit_square();
        for j in 0..=8 {
            assert_eq!(s.level_mass(j).unwrap(), 1.0, "j={j}");
        }
    }

    #[test]
    fn riemann_xy_over_unit_square() {
        // closed form: 1/4.
        let s = unit_square();
        let w = Form::poly_from_terms(2, 2, &[(vec![1, 2], vec![1, 1], 1.0)]).unwrap();
        let out = integrate_stream(&w, &s, IntegrateOpts { j_start: 2, j_end: 10, tol: None })
            .unwrap();
        assert!(
            (out.value - 0.25).abs() <= 1e-6,
            "value {} rows {:?}",
            out.value,
            out.rows.last()
        );
        assert!(out.converged);
        // The certified bound must cover the true gap of the raw value.
        let last = out.rows.last().unwrap();
        assert!(last.certified_bound.unwrap() >= (last.value - 0.25).abs());
    }

    #[test]
    fn segment_stream_and_constant_form() {
        // Unit segment in R^2: two elements of e1/2 at level 1; dx integrates
        // to 1 exactly at every level.
        let s = ChainStream::cell(&[0.0, 0.0], &[vec![1.0, 0.0]]).unwrap();
        let a = s.chain(1).unwrap();
        assert_eq!(a.elements().len(), 2);
        for e in a.elements() {
            assert_eq!(e.kv.coeff(0b01), 0.5);
        }
        let dx = Form::constant_blade(2, &[1], 1.0).unwrap();
        for j in 0..=6 {
            assert_eq!(s.eval_against(j, &dx).unwrap(), 1.0, "j={j}");
        }
    }

    #[test]
    fn point_mass_limit_of_rescaled_cubes() {
        // 2^{nk}-weighted shrinking cubes converge to the point element.
        let p = [0.3, 0.7];
        let w = Form::poly_from_terms(2, 2, &[(vec![1, 2], vec![2, 1], 1.0)]).unwrap();
        let target = w
            .eval_element(&ChainElement::order_zero(
                vecn(&p),
                KVector::basis_blade(2, &[1, 2], 1.0).unwrap(),
            ))
            .unwrap();
        let mut prev = f64::INFINITY;
        for k in [2, 5, 8, 11, 14] {
            let side = 0.5f64.powi(k);
            let cells = vec![WeightedCell {
                weight: 4f64.powi(k),
                base: p.to_vec(),
                edges: vec![vec![side, 0.0], vec![0.0, side]],
            }];
            let s = ChainStream::polyhedral(&cells).unwrap();
            let v = s.eval_against(0, &w).unwrap();
            let err = (v - target).abs();
            assert!(err < prev, "k={k}: {err} !< {prev}");
            prev = err;
        }
        assert!(prev <= 1e-4);
    }

    #[test]
    fn whitney_square_volume_converges() {
        let s = ChainStream::open_set(OpenRegion::Box {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        })
        .unwrap();
        let vol = Form::constant_blade(2, &[1, 2], 1.0).unwrap();
        let out = integrate_stream(&vol, &s, IntegrateOpts { j_start: 3, j_end: 11, tol: None })
            .unwrap();
        assert!(
            (out.value - 1.0).abs() <= 1e-6,
            "value {} (err {:.2e})",
            out.value,
            (out.value - 1.0).abs()
        );
    }

    #[test]
    fn whitney_disk_area_is_pi() {
        let s = ChainStream::open_set(OpenRegion::Ball {
            center: vec![0.0, 0.0],
            radius: 1.0,
        })
        .unwrap();
        let vol = Form::constant_blade(2, &[1, 2], 1.0).unwrap();
        let out = integrate_stream(&vol, &s, IntegrateOpts { j_start: 3, j_end: 10, tol: None })
            .unwrap();
        let err = (out.value - std::f64::consts::PI).abs();
        assert!(err <= 1e-3, "err {err:.2e}");
    }

    #[test]
    fn slit_disk_converges_to_the_full_disk_integral() {
        // The slit has measure zero: integrals over the slit disk equal
        // integrals over the disk. Integral of x^2 over the unit disk is
        // pi/4.
        let slit = ChainStream::open_set(OpenRegion::Slitdisk { radius: 1.0 }).unwrap();
        let w = Form::poly_from_terms(2, 2, &[(vec![1, 2], vec![2, 0], 1.0)]).unwrap();
        let opts = IntegrateOpts { j_start: 3, j_end: 9, tol: None };
        let b = integrate_stream(&w, &slit, opts).unwrap();
        let oracle = std::f64::consts::PI / 4.0;
        assert!((b.value - oracle).abs() <= 2e-3, "slit {}", b.value);
    }

    #[test]
    fn cantor_masses_are_exact() {
        let unscaled = ChainStream::cantor(false);
        let scaled = ChainStream::cantor(true);
        for n in 0..=20 {
            let expect = 2f64.powi(n) * (1.0 / 3f64.powi(n));
            assert_eq!(unscaled.level_mass(n as u32).unwrap(), expect, "n={n}");
            assert_eq!(scaled.level_mass(n as u32).unwrap(), 1.0, "n={n}");
        }
    }

    #[test]
    fn cantor_boundary_integral_of_x_is_one() {
        // Through the boundary operator: the pairing is a sum of 2^n equal
        // dyadic weights, exactly 1.
        let s = ChainStream::cantor(true);
        let x = Form::poly_from_terms(1, 0, &[(vec![], vec![1], 1.0)]).unwrap();
        for n in [1u32, 4, 10, 16] {
            let stage = s.chain(n).unwrap();
            let boundary = chainops::boundary(&stage).unwrap();
            let val = x.eval_chain(&boundary).unwrap();
            assert!((val - 1.0).abs() <= 1e-12, "n={n}: {val}");
        }
    }

    #[test]
    fn cantor_endpoint_telescoping() {
        // The endpoint stream pairing of f equals the direct telescoping sum
        // sum_i w (f(r_i) - f(l_i)); for affine f that is exactly
        // (f(1) - f(0)) * total weight derivative.
        let s = ChainStream::cantor_boundary(true);
        let f = Form::poly_from_terms(1, 0, &[(vec![], vec![2], 1.0)]).unwrap(); // x^2
        for n in [2u32, 5, 8] {
            let via_stream = {
                let mut acc = PairwiseSum::new();
                s.for_each_element(n, &mut |e| {
                    acc.push(f.eval_element(e)?);
                    Ok(())
                })
                .unwrap();
                acc.total()
            };
            // Direct telescoping oracle.
            let pow3 = 3f64.powi(n as i32);
            let w = pow3 * 0.5f64.powi(n as i32);
            let mut tele = PairwiseSum::new();
            cantor_for_each(n, true, false, &mut |e| {
                let m = e.point[0];
                let h = 0.5 / pow3;
                let (l, r) = (m - h, m + h);
                tele.push(w * (r * r - l * l));
                Ok(())
            })
            .unwrap();
            assert!(
                (via_stream - tele.total()).abs() <= 1e-8,
                "n={n}: {} vs {}",
                via_stream,
                tele.total()
            );
        }
        // Affine f: d(2x+1) pairs the scaled stage to exactly 2.
        let df = Form::poly_from_terms(1, 1, &[(vec![1], vec![0], 2.0)]).unwrap();
        let stage = ChainStream::cantor(true);
        for n in [1u32, 6, 12] {
            let v = stage.eval_against(n, &df).unwrap();
            assert!((v - 2.0).abs() <= 1e-13, "n={n}: {v}");
        }
    }

    #[test]
    fn sierpinski_mass_is_constant() {
        let s = ChainStream::sierpinski();
        for k in 0..=7 {
            let m = s.level_mass(k).unwrap();
            assert!((m - 0.5).abs() <= 1e-12, "k={k}: {m}");
        }
    }

    #[test]
    fn measured_rates_stay_under_certified_rates() {
        let cube3 = ChainStream::cube(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        for j in 1..=4 {
            let measured = cube3.difference_norm_upper(j, 1).unwrap();
            let cert = cube3.cauchy_rate(j).unwrap();
            assert!(measured <= cert, "cube j={j}: {measured} > {cert}");
        }
        let cantor = ChainStream::cantor(true);
        for n in 1..=8 {
            let measured = cantor.difference_norm_upper(n, 1).unwrap();
            let cert = cantor.cauchy_rate(n).unwrap();
            assert!(measured <= cert, "cantor n={n}: {measured} > {cert}");
        }
        let sier = ChainStream::sierpinski();
        for k in 1..=5 {
            let measured = sier.difference_norm_upper(k, 1).unwrap();
            let cert = sier.cauchy_rate(k).unwrap();
            assert!(measured <= cert, "sierpinski k={k}: {measured} > {cert}");
        }
    }

    #[test]
    fn blockwise_difference_norm_matches_the_generic_matcher() {
        let square = unit_square();
        for j in 1..=3 {
            let blockwise = square.difference_norm_upper(j, 1).unwrap();
            // Generic run on the materialized difference.
            let a = square.chain(j).unwrap();
            let b = square.chain(j + 1).unwrap();
            let diff = a.sub_chain(&b).unwrap();
            let generic = norms::norm_upper(&diff, 1, None).unwrap();
            assert!(
                (blockwise - generic).abs() <= 1e-12 * (1.0 + generic),
                "j={j}: {blockwise} vs {generic}"
            );
            // And the measured value is the expected sqrt(2) 2^{-j-2}.
            let expect = 2f64.sqrt() * 0.25 * 0.5f64.powi(j as i32);
            assert!((blockwise - expect).abs() <= 1e-12, "j={j}");
        }
    }

    #[test]
    fn boundary_of_square_pairs_x_dy_exactly() {
        let square = unit_square();
        let bnd = ChainStream::boundary_of(square).unwrap();
        assert_eq!(bnd.grade(), 1);
        let xdy = Form::poly_from_terms(2, 1, &[(vec![2], vec![1, 0], 1.0)]).unwrap();
        for j in 0..=5 {
            let v = bnd.eval_against(j, &xdy).unwrap();
            assert!((v - 1.0).abs() <= 1e-13, "j={j}: {v}");
        }
    }

    #[test]
    fn stream_stokes_on_the_square() {
        // integral over the boundary of omega equals integral of d omega.
        let square = unit_square();
        let bnd = ChainStream::boundary_of(square.clone()).unwrap();
        let w = Form::poly_from_terms(
            2,
            1,
            &[(vec![1], vec![2, 1], 1.0), (vec![2], vec![1, 2], -0.5)],
        )
        .unwrap();
        let dw = w.exterior_d().unwrap();
        let opts = IntegrateOpts { j_start: 2, j_end: 9, tol: None };
        let lhs = integrate_stream(&w, &bnd, opts).unwrap().value;
        let rhs = integrate_stream(&dw, &square, opts).unwrap().value;
        assert!((lhs - rhs).abs() <= 1e-8, "{lhs} vs {rhs}");
    }

    #[test]
    fn two_subdivision_phases_agree() {
        // Same square, different cell decompositions, ten 2-form dictionary.
        let a = unit_square();
        let b = ChainStream::polyhedral(&[
            WeightedCell {
                weight: 1.0,
                base: vec![0.0, 0.0],
                edges: vec![vec![0.5, 0.0], vec![0.0, 1.0]],
            },
            WeightedCell {
                weight: 1.0,
                base: vec![0.5, 0.0],
                edges: vec![vec![0.5, 0.0], vec![0.0, 1.0]],
            },
        ])
        .unwrap();
        let opts = IntegrateOpts { j_start: 2, j_end: 8, tol: None };
        for (ex, ey) in [(0, 0), (1, 1), (2, 0), (2, 1), (2, 2), (3, 0)] {
            let w =
                Form::poly_from_terms(2, 2, &[(vec![1, 2], vec![ex, ey], 1.0)]).unwrap();
            let va = integrate_stream(&w, &a, opts).unwrap().value;
            let vb = integrate_stream(&w, &b, opts).unwrap().value;
            assert!(
                (va - vb).abs() <= 1e-6,
                "x^{ex} y^{ey}: {va} vs {vb}"
            );
        }
    }

    #[test]
    fn field_representative_reduces_to_the_volume_integral() {
        // Constant field e1 on the unit square, omega = dx: the pairing is
        // the kept-cube volume, converging to 1.
        let one = Form::poly_from_terms(2, 0, &[(vec![], vec![0, 0], 1.0)]).unwrap();
        let s = ChainStream::field_rep(
            vec![(vec![1], one)],
            OpenRegion::Box {
                lo: vec![0.0, 0.0],
                hi: vec![1.0, 1.0],
            },
        )
        .unwrap();
        let dx = Form::constant_blade(2, &[1], 1.0).unwrap();
        let out = integrate_stream(&dx, &s, IntegrateOpts { j_start: 3, j_end: 11, tol: None })
            .unwrap();
        assert!((out.value - 1.0).abs() <= 1e-6, "value {}", out.value);
        // A form orthogonal to the field pairs to zero identically.
        let dy = Form::constant_blade(2, &[2], 1.0).unwrap();
        assert_eq!(s.eval_against(6, &dy).unwrap(), 0.0);
    }

    #[test]
    fn field_representative_with_bump_coefficient() {
        // X = f e1 with a tensor B-spline bump; integral of dx against the
        // representative is the integral of f, a product of per-axis
        // B-spline integrals halfwidth_i / 2.
        let f = Form::bump(
            crate::form::BumpForm::bspline(&[0.5, 0.5], &[0.3, 0.2]).unwrap(),
        );
        let s = ChainStream::field_rep(
            vec![(vec![1], f)],
            OpenRegion::Box {
                lo: vec![0.0, 0.0],
                hi: vec![1.0, 1.0],
            },
        )
        .unwrap();
        let dx = Form::constant_blade(2, &[1], 1.0).unwrap();
        let out = integrate_stream(&dx, &s, IntegrateOpts { j_start: 4, j_end: 10, tol: None })
            .unwrap();
        let oracle = (0.3 / 2.0) * (0.2 / 2.0);
        assert!(
            (out.value - oracle).abs() <= 1e-4,
            "value {} oracle {}",
            out.value,
            oracle
        );
    }

    #[test]
    fn circle_stream_reproduces_two_pi() {
        // F(t) = (cos t, sin t) over [0, 2pi]; x dy - y dx integrates to 2pi.
        let base = ChainStream::cell(&[0.0], &[vec![2.0 * std::f64::consts::PI]]).unwrap();
        let s = ChainStream::pushforward(SmoothMap::Circle { radius: 1.0 }, base).unwrap();
        let w = Form::poly_from_terms(
            2,
            1,
            &[(vec![2], vec![1, 0], 1.0), (vec![1], vec![0, 1], -1.0)],
        )
        .unwrap();
        let v = s.eval_against(7, &w).unwrap();
        assert!(
            (v - 2.0 * std::f64::consts::PI).abs() <= 1e-8,
            "{v}"
        );
    }

    #[test]
    fn fold_pushforward_cancels_exactly() {
        let base = ChainStream::cell(&[-1.0], &[vec![2.0]]).unwrap();
        let s = ChainStream::pushforward(SmoothMap::Fold, base).unwrap();
        for j in 1..=6 {
            let a = s.chain(j).unwrap();
            assert!(a.is_zero(), "j={j}: {} elements", a.elements().len());
        }
    }

    #[test]
    fn dipole_stream_pairs_like_the_lie_derivative() {
        // P_{e2} over the unit segment; pairing with omega equals the
        // integral of L_{e2} omega over the segment: for omega = x^2 y dx
        // that is the integral of x^2 dx = 1/3.
        let base = ChainStream::cell(&[0.0, 0.0], &[vec![1.0, 0.0]]).unwrap();
        let s = ChainStream::dipole(&[0.0, 1.0], base).unwrap();
        assert_eq!(s.norm_order(), 2);
        let w = Form::poly_from_terms(2, 1, &[(vec![1], vec![2, 1], 1.0)]).unwrap();
        let out = integrate_stream(&w, &s, IntegrateOpts { j_start: 2, j_end: 9, tol: None })
            .unwrap();
        assert!(
            (out.value - 1.0 / 3.0).abs() <= 1e-8,
            "value {}",
            out.value
        );
    }

    #[test]
    fn domain_spec_round_trips() {
        let spec = DomainSpec::Pushforward {
            map: SmoothMap::Circle { radius: 2.0 },
            base: Box::new(DomainSpec::Cell {
                base: vec![0.0],
                edges: vec![vec![6.0]],
            }),
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: DomainSpec = serde_json::from_str(&text).unwrap();
        let s = ChainStream::from_spec(&back).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.grade(), 1);
        // Strict schema: unknown keys rejected.
        assert!(serde_json::from_str::<DomainSpec>(
            r#"{"kind":"cube","lo":[0],"hi":[1],"extra":3}"#
        )
        .is_err());
        // Spec sketch from the docs parses.
        let cube: DomainSpec =
            serde_json::from_str(r#"{"kind":"cube","lo":[0.0,0.0],"hi":[1.0,1.0]}"#).unwrap();
        assert!(matches!(cube, DomainSpec::Cube { .. }));
        let cantor: DomainSpec = serde_json::from_str(r#"{"kind":"cantor"}"#).unwrap();
        assert!(matches!(cantor, DomainSpec::Cantor { scaled: true }));
    }

    #[test]
    fn materialization_guard_trips() {
        let cube3 = ChainStream::cube(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(cube3.chain(9).is_err());
        let err = cube3.chain(9).unwrap_err().to_string();
        assert!(err.contains("stream"), "{err}");
    }
}
