//! Exterior-algebra primitives: k-vectors over the standard orthonormal basis
//! of R^n, symmetric tensors of direction vectors, and the vector helpers the
//! rest of the crate builds on.
//!
//! Blades are encoded as bitmasks (`bit i` set means axis `i+1` participates,
//! using 1-based axis names externally). A [`KVector`] stores a sparse sorted
//! list of `(blade, coefficient)` pairs; zero coefficients are never stored,
//! and after arithmetic any coefficient below 1e-14 relative to the largest
//! surviving one is pruned.

use crate::error::{ChainError, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use smallvec::SmallVec;

/// Maximum supported ambient dimension. Blade masks are `u32`; keeping n
/// small guards factorial blowups in perp/wedge tables.
pub const MAX_DIM: usize = 16;

/// Relative threshold below which coefficients are pruned after arithmetic.
pub const PRUNE_REL: f64 = 1e-14;

/// A point or direction vector in R^n (inline up to n = 4, heap beyond).
pub type Vecn = SmallVec<[f64; 4]>;

/// Builds a [`Vecn`] from a slice.
pub fn vecn(xs: &[f64]) -> Vecn {
    SmallVec::from_slice(xs)
}

/// Euclidean inner product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Component-wise difference `a - b`.
pub fn sub(a: &[f64], b: &[f64]) -> Vecn {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Component-wise sum `a + b`.
pub fn add(a: &[f64], b: &[f64]) -> Vecn {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `a + t*b`.
pub fn add_scaled(a: &[f64], t: f64, b: &[f64]) -> Vecn {
    a.iter().zip(b).map(|(x, y)| x + t * y).collect()
}

/// Exact-association pairwise (binary-counter) summation.
///
/// Summing 2^m copies of the same value is exact, and long streams lose only
/// O(log N) rounding rather than O(N). Used everywhere a deterministic,
/// high-accuracy reduction over chain elements is needed.
#[derive(Debug, Clone, Default)]
pub struct PairwiseSum {
    slots: SmallVec<[f64; 8]>,
    count: u64,
}

impl PairwiseSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        let mut v = x;
        let mut c = self.count;
        let mut i = 0usize;
        while c & 1 == 1 {
            v += self.slots[i];
            c >>= 1;
            i += 1;
        }
        if i == self.slots.len() {
            self.slots.push(v);
        } else {
            self.slots[i] = v;
        }
        self.count += 1;
    }

    /// Total of everything pushed so far (low levels first).
    pub fn total(&self) -> f64 {
        let mut acc = 0.0;
        let mut c = self.count;
        let mut i = 0usize;
        while c != 0 {
            if c & 1 == 1 {
                acc += self.slots[i];
            }
            c >>= 1;
            i += 1;
        }
        acc
    }
}

/// Pairwise sum of a slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    let mut s = PairwiseSum::new();
    for &x in xs {
        s.push(x);
    }
    s.total()
}

// ---------------------------------------------------------------------------
// Blade-mask helpers
// ---------------------------------------------------------------------------

/// Sign `(-1)^inversions` of merging sorted index sets `a` and `b`
/// (disjoint), counting pairs `(x in a, y in b)` with `y < x`.
#[inline]
pub(crate) fn merge_sign(a: u32, b: u32) -> f64 {
    let mut inv = 0u32;
    let mut rest = a;
    while rest != 0 {
        let bit = rest.trailing_zeros();
        inv += (b & ((1u32 << bit) - 1)).count_ones();
        rest &= rest - 1;
    }
    if inv & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// 1-based sorted index tuple of a blade mask.
pub fn mask_to_indices(mask: u32) -> Vec<usize> {
    let mut out = Vec::with_capacity(mask.count_ones() as usize);
    let mut rest = mask;
    while rest != 0 {
        let bit = rest.trailing_zeros() as usize;
        out.push(bit + 1);
        rest &= rest - 1;
    }
    out
}

// ---------------------------------------------------------------------------
// KVector
// ---------------------------------------------------------------------------

/// A k-vector in Lambda_k(R^n), stored sparsely over basis blades.
#[derive(Debug, Clone, PartialEq)]
pub struct KVector {
    n: u8,
    grade: u8,
    /// Sorted by blade mask; no zero coefficients.
    terms: SmallVec<[(u32, f64); 2]>,
}

impl KVector {
    /// The zero k-vector of the given grade. Grades above `n` are permitted
    /// (the space is trivial, so the term list stays empty forever).
    pub fn zero(n: usize, grade: usize) -> Result<Self> {
        if n > MAX_DIM {
            return Err(ChainError::Dimension(format!(
                "dimension {n} exceeds supported maximum {MAX_DIM}"
            )));
        }
        Ok(Self {
            n: n as u8,
            grade: grade.min(255) as u8,
            terms: SmallVec::new(),
        })
    }

    /// Grade-0 scalar.
    pub fn scalar(n: usize, c: f64) -> Result<Self> {
        let mut kv = Self::zero(n, 0)?;
        if c != 0.0 {
            kv.terms.push((0, c));
        }
        Ok(kv)
    }

    /// Single term from a raw axis bitmask (bit i set = axis i present).
    pub fn term(n: usize, mask: u32, c: f64) -> Result<Self> {
        if n > MAX_DIM || (mask >> n) != 0 {
            return Err(ChainError::Dimension(format!(
                "blade mask {mask:#b} does not fit in dimension {n}"
            )));
        }
        let mut kv = Self::zero(n, mask.count_ones() as usize)?;
        if c != 0.0 {
            kv.terms.push((mask, c));
        }
        Ok(kv)
    }

    /// Grade-1 vector with the given components.
    pub fn from_vector(n: usize, comps: &[f64]) -> Result<Self> {
        if comps.len() != n {
            return Err(ChainError::Dimension(format!(
                "vector has {} components in dimension {n}",
                comps.len()
            )));
        }
        let mut kv = Self::zero(n, 1)?;
        for (i, &c) in comps.iter().enumerate() {
            if c != 0.0 {
                kv.terms.push((1u32 << i, c));
            }
        }
        kv.prune();
        Ok(kv)
    }

    /// Single basis blade `c * e_{idx}` from 1-based distinct indices in any
    /// order; the sign of sorting the tuple is absorbed into the coefficient.
    pub fn basis_blade(n: usize, idx: &[usize], c: f64) -> Result<Self> {
        let mut kv = Self::zero(n, idx.len())?;
        let mut mask = 0u32;
        let mut sign = 1.0;
        for &i in idx {
            if i == 0 || i > n {
                return Err(ChainError::Dimension(format!(
                    "blade index {i} out of range 1..={n}"
                )));
            }
            let bit = 1u32 << (i - 1);
            if mask & bit != 0 {
                return Err(ChainError::Grade(format!("repeated blade index {i}")));
            }
            // Parity of how many already-placed indices exceed this one.
            let higher = (mask >> (i - 1)).count_ones() as usize;
            if higher % 2 == 1 {
                sign = -sign;
            }
            mask |= bit;
        }
        if c != 0.0 {
            kv.terms.push((mask, sign * c));
        }
        Ok(kv)
    }

    /// Wedge of the given 1-vectors (a simple k-vector).
    pub fn simple(n: usize, vectors: &[&[f64]]) -> Result<Self> {
        let mut acc = Self::scalar(n, 1.0)?;
        for v in vectors {
            let kv = Self::from_vector(n, v)?;
            acc = acc.wedge(&kv)?;
        }
        Ok(acc)
    }

    /// The unit volume blade `e_1 ^ ... ^ e_n`.
    pub fn volume(n: usize) -> Result<Self> {
        if n == 0 {
            return Self::scalar(0, 1.0);
        }
        let idx: Vec<usize> = (1..=n).collect();
        Self::basis_blade(n, &idx, 1.0)
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn grade(&self) -> usize {
        self.grade as usize
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Iterator over `(blade mask, coefficient)` pairs, sorted by mask.
    pub fn terms(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.terms.iter().copied()
    }

    /// Coefficient of the given blade mask (0.0 if absent).
    pub fn coeff(&self, mask: u32) -> f64 {
        match self.terms.binary_search_by_key(&mask, |t| t.0) {
            Ok(i) => self.terms[i].1,
            Err(_) => 0.0,
        }
    }

    fn check_same_space(&self, other: &Self) -> Result<()> {
        if self.n != other.n {
            return Err(ChainError::Dimension(format!(
                "k-vectors in dimensions {} and {}",
                self.n, other.n
            )));
        }
        Ok(())
    }

    /// Drops exact zeros and coefficients below `PRUNE_REL` relative to the
    /// largest magnitude present.
    fn prune(&mut self) {
        let max = self
            .terms
            .iter()
            .map(|t| t.1.abs())
            .fold(0.0f64, f64::max);
        let floor = max * PRUNE_REL;
        self.terms.retain(|t| t.1 != 0.0 && t.1.abs() > floor);
    }

    /// Sum of two k-vectors of equal dimension and grade.
    pub fn add_kv(&self, other: &Self) -> Result<Self> {
        self.check_same_space(other)?;
        if self.grade != other.grade {
            if self.is_zero() {
                return Ok(other.clone());
            }
            if other.is_zero() {
                return Ok(self.clone());
            }
            return Err(ChainError::Grade(format!(
                "cannot add grades {} and {}",
                self.grade, other.grade
            )));
        }
        let mut out = Self::zero(self.n(), self.grade())?;
        let (a, b) = (&self.terms, &other.terms);
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
                out.terms.push(a[i]);
                i += 1;
            } else if i == a.len() || b[j].0 < a[i].0 {
                out.terms.push(b[j]);
                j += 1;
            } else {
                let c = a[i].1 + b[j].1;
                if c != 0.0 {
                    out.terms.push((a[i].0, c));
                }
                i += 1;
                j += 1;
            }
        }
        out.prune();
        Ok(out)
    }

    pub fn sub_kv(&self, other: &Self) -> Result<Self> {
        self.add_kv(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        if c == 0.0 {
            out.terms.clear();
            return out;
        }
        for t in &mut out.terms {
            t.1 *= c;
        }
        out.prune();
        out
    }

    /// Exterior product. Grades add; if the result grade exceeds n the
    /// product is the zero element of that (trivial) grade.
    pub fn wedge(&self, other: &Self) -> Result<Self> {
        self.check_same_space(other)?;
        let g = self.grade() + other.grade();
        let mut out = Self::zero(self.n(), g)?;
        if g > self.n() {
            return Ok(out);
        }
        let mut buf: Vec<(u32, f64)> = Vec::with_capacity(self.terms.len() * other.terms.len());
        for &(ma, ca) in &self.terms {
            for &(mb, cb) in &other.terms {
                if ma & mb != 0 {
                    continue;
                }
                let s = merge_sign(ma, mb);
                buf.push((ma | mb, s * ca * cb));
            }
        }
        buf.sort_unstable_by_key(|t| t.0);
        for (mask, c) in buf {
            if let Some(last) = out.terms.last_mut() {
                if last.0 == mask {
                    last.1 += c;
                    continue;
                }
            }
            out.terms.push((mask, c));
        }
        out.terms.retain(|t| t.1 != 0.0);
        out.prune();
        Ok(out)
    }

    /// Euclidean inner product extended to k-vectors: basis blades are
    /// orthonormal, so this is the dot product of coefficient vectors.
    /// Different grades are orthogonal (returns 0).
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_same_space(other)?;
        if self.grade != other.grade {
            return Ok(0.0);
        }
        let mut acc = PairwiseSum::new();
        let (a, b) = (&self.terms, &other.terms);
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            if a[i].0 < b[j].0 {
                i += 1;
            } else if b[j].0 < a[i].0 {
                j += 1;
            } else {
                acc.push(a[i].1 * b[j].1);
                i += 1;
                j += 1;
            }
        }
        Ok(acc.total())
    }

    /// The l2 norm of blade coefficients: sqrt(<a, a>).
    ///
    /// This equals the mass exactly when the grade is 0, 1, n-1 or n (every
    /// k-vector of those grades is simple); for intermediate grades it is a
    /// valid *lower* bound of the mass. See [`KVector::mass_upper`].
    pub fn mass(&self) -> f64 {
        self.inner(self).expect("same space").sqrt()
    }

    /// Retraction against the basis axis `e_i` (0-based): the fast path of
    /// [`KVector::retract_v`] used by the boundary operator.
    pub fn retract_axis(&self, axis: usize) -> Self {
        if self.grade() == 0 {
            return Self::zero(self.n(), 0).expect("dim ok");
        }
        let bit = 1u32 << axis;
        let mut terms: SmallVec<[(u32, f64); 2]> = SmallVec::new();
        for &(m, c) in &self.terms {
            if m & bit == 0 {
                continue;
            }
            let below = (m & (bit - 1)).count_ones();
            let s = if below % 2 == 0 { 1.0 } else { -1.0 };
            terms.push((m & !bit, s * c));
        }
        // Clearing the same bit preserves the sorted order of the masks.
        Self {
            n: self.n,
            grade: self.grade - 1,
            terms,
        }
    }

    /// True when [`KVector::mass`] is guaranteed exact for this grade/dim.
    pub fn mass_is_exact(&self) -> bool {
        let (k, n) = (self.grade(), self.n());
        k == 0 || k == 1 || k + 1 == n || k == n || self.terms.len() <= 1
    }

    /// Certified upper bound on the mass (infimum of sum of simple-piece
    /// norms), valid for every grade. Exact on guaranteed-simple grades.
    ///
    /// Strategy: detect simplicity where cheap (single blade; grade 2 via
    /// the Pluecker test a^a = 0, applied through perp for co-grade 2),
    /// otherwise greedily peel groups of blades sharing a common axis
    /// (each group e_a ^ gamma satisfies mass <= mass(gamma), recursing on
    /// the strictly lower grade) and sum group bounds.
    pub fn mass_upper(&self) -> f64 {
        let (k, n) = (self.grade(), self.n());
        if self.mass_is_exact() {
            return self.mass();
        }
        // Grade 2 (or co-grade 2): simple iff alpha ^ alpha = 0.
        if k == 2 || n - k == 2 {
            let two = if k == 2 { self.clone() } else { self.perp() };
            if let Ok(sq) = two.wedge(&two) {
                let scale = two.mass();
                if sq.terms.iter().all(|t| t.1.abs() <= 1e-12 * scale * scale) {
                    return self.mass();
                }
            }
        }
        let direct = self.greedy_group_bound();
        if n - k == 2 && k != 2 {
            direct.min(self.perp().greedy_group_bound())
        } else {
            direct
        }
    }

    fn greedy_group_bound(&self) -> f64 {
        let mut remaining: Vec<(u32, f64)> = self.terms.to_vec();
        let mut total = 0.0;
        while !remaining.is_empty() {
            if remaining.len() == 1 {
                total += remaining[0].1.abs();
                break;
            }
            // Most frequent axis (ties: lowest axis index).
            let mut counts = [0usize; 32];
            for &(m, _) in &remaining {
                let mut rest = m;
                while rest != 0 {
                    counts[rest.trailing_zeros() as usize] += 1;
                    rest &= rest - 1;
                }
            }
            let axis = (0..32).max_by_key(|&i| (counts[i], 31 - i)).unwrap();
            let bit = 1u32 << axis;
            let group: Vec<(u32, f64)> = remaining.iter().copied().filter(|t| t.0 & bit != 0).collect();
            remaining.retain(|t| t.0 & bit == 0);
            // Strip the shared axis: e_I = s * e_axis ^ e_{I minus axis},
            // where s = (-1)^{number of indices below axis in I} = +1 here
            // because axis participates; the merge sign of {axis} with the
            // remainder counts indices *below* axis.
            let mut gamma = KVector::zero(self.n(), self.grade() - 1).expect("dim ok");
            for (m, c) in group {
                let rest_mask = m & !bit;
                let s = merge_sign(bit, rest_mask);
                gamma.terms.push((rest_mask, s * c));
            }
            gamma.terms.sort_unstable_by_key(|t| t.0);
            total += gamma.mass_upper();
        }
        total
    }

    /// Retraction of a vector against a k-vector: the adjoint of wedging by
    /// `v`, i.e. `inner(wedge(v, a), b) = inner(a, retract(v, b))`.
    ///
    /// On a blade `e_J` this is `sum_{j in J} (-1)^{pos(j)+1} v_j e_{J - j}`.
    /// Grade 0 retracts to the zero element.
    pub fn retract_v(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.n() {
            return Err(ChainError::Dimension(format!(
                "retract vector has {} components in dimension {}",
                v.len(),
                self.n
            )));
        }
        if self.grade() == 0 {
            return Self::zero(self.n(), 0);
        }
        let mut buf: Vec<(u32, f64)> = Vec::new();
        for &(m, c) in &self.terms {
            let mut rest = m;
            while rest != 0 {
                let bit_idx = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                let vi = v[bit_idx];
                if vi == 0.0 {
                    continue;
                }
                let bit = 1u32 << bit_idx;
                // (-1)^{pos+1} where pos is the 1-based position of the index
                // inside the sorted tuple: pos-1 = number of lower bits set.
                let below = (m & (bit - 1)).count_ones();
                let sign = if below % 2 == 0 { 1.0 } else { -1.0 };
                buf.push((m & !bit, sign * vi * c));
            }
        }
        let mut out = Self::zero(self.n(), self.grade() - 1)?;
        buf.sort_unstable_by_key(|t| t.0);
        for (mask, c) in buf {
            if let Some(last) = out.terms.last_mut() {
                if last.0 == mask {
                    last.1 += c;
                    continue;
                }
            }
            out.terms.push((mask, c));
        }
        out.terms.retain(|t| t.1 != 0.0);
        out.prune();
        Ok(out)
    }

    /// Perpendicular complement, blade-wise:
    /// `perp(e_I) = (-1)^{k(n-k)} eps_I e_{I^c}` with `eps_I` the sign of the
    /// shuffle `e_I ^ e_{I^c} = eps_I e_{1..n}`.
    ///
    /// This is the unique sign choice that satisfies the involution
    /// `perp(perp(a)) = (-1)^{k(n-k)} a` in *every* dimension and agrees with
    /// the defining relation `a ^ perp(a) = (-1)^k <a,a> e_{1..n}` whenever n
    /// is even (the relation itself cannot hold together with the involution
    /// when n is odd and k is odd; see `perp_sign_report`).
    pub fn perp(&self) -> Self {
        let n = self.n();
        let k = self.grade();
        let full: u32 = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
        let mut out = Self::zero(n, n.saturating_sub(k)).expect("dim ok");
        if k > n {
            return out;
        }
        let outer = if (k * (n - k)) % 2 == 0 { 1.0 } else { -1.0 };
        let mut buf: Vec<(u32, f64)> = Vec::with_capacity(self.terms.len());
        for &(m, c) in &self.terms {
            let comp = full & !m;
            let eps = merge_sign(m, comp);
            buf.push((comp, outer * eps * c));
        }
        buf.sort_unstable_by_key(|t| t.0);
        out.terms.extend(buf);
        out
    }

    /// Gram-determinant inner product of two simple k-vectors given by their
    /// factor lists: `det <u_i, v_j>`. Used as an independent oracle for
    /// [`KVector::inner`] in tests.
    pub fn gram_inner(us: &[&[f64]], vs: &[&[f64]]) -> Result<f64> {
        if us.len() != vs.len() {
            return Err(ChainError::Grade(
                "gram_inner needs equally many factors".into(),
            ));
        }
        let k = us.len();
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] = dot(us[i], vs[j]);
            }
        }
        Ok(det_in_place(&mut g, k))
    }
}

/// Determinant by partial-pivot Gaussian elimination (small k only).
fn det_in_place(a: &mut [f64], k: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..k {
        let mut piv = col;
        for r in col + 1..k {
            if a[r * k + col].abs() > a[piv * k + col].abs() {
                piv = r;
            }
        }
        if a[piv * k + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for c in 0..k {
                a.swap(piv * k + c, col * k + c);
            }
            det = -det;
        }
        det *= a[col * k + col];
        for r in col + 1..k {
            let f = a[r * k + col] / a[col * k + col];
            for c in col..k {
                a[r * k + c] -= f * a[col * k + c];
            }
        }
    }
    det
}

/// Sign table comparing the operator product `prod_i (E_{e_i} + E_{e_i}^+)`
/// against the blade-wise perpendicular complement, per grade. Returned as a
/// diagnostic (the two disagree by grade-dependent signs); each entry is
/// `(grade, ratio)` where `ratio` is the sign the operator product carries
/// relative to `perp` on basis blades, or 0 when the images differ by more
/// than sign.
pub fn perp_sign_report(n: usize) -> Result<Vec<(usize, i32)>> {
    let mut table = Vec::new();
    for k in 0..=n {
        let mut ratio: Option<i32> = None;
        let mut consistent = true;
        // Enumerate all grade-k blade masks.
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let blade = {
                let mut kv = KVector::zero(n, k)?;
                kv.terms.push((mask, 1.0));
                kv
            };
            // Apply C_{e_1} ... C_{e_n} = prod (E + E^+), left to right.
            let mut img = blade.clone();
            for i in (0..n).rev() {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                let ev = KVector::from_vector(n, &e)?;
                let up = ev.wedge(&img)?;
                let down = img.retract_v(&e)?;
                img = if up.is_zero() {
                    down
                } else if down.is_zero() {
                    up
                } else {
                    // Mixed grades can only appear transiently; the final
                    // product on a blade is again a blade, so one of the two
                    // is always zero here.
                    up
                };
            }
            let perp = blade.perp();
            let (pm, pc) = match perp.terms.first() {
                Some(&t) => t,
                None => continue,
            };
            let ic = img.coeff(pm);
            if img.num_terms() != 1 || ic == 0.0 {
                consistent = false;
                break;
            }
            let r = if (ic / pc) > 0.0 { 1 } else { -1 };
            match ratio {
                None => ratio = Some(r),
                Some(prev) if prev != r => {
                    consistent = false;
                    break;
                }
                _ => {}
            }
        }
        table.push((k, if consistent { ratio.unwrap_or(1) } else { 0 }));
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// SymTensor
// ---------------------------------------------------------------------------

/// A symmetric tensor of direction vectors: an unordered multiset of factors
/// `u_1 o ... o u_j`. The empty tensor (order 0) acts as the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor {
    n: u8,
    factors: Vec<Vecn>,
}

impl SymTensor {
    pub fn new(n: usize, factors: Vec<Vecn>) -> Result<Self> {
        if n > MAX_DIM {
            return Err(ChainError::Dimension(format!(
                "dimension {n} exceeds supported maximum {MAX_DIM}"
            )));
        }
        for f in &factors {
            if f.len() != n {
                return Err(ChainError::Dimension(format!(
                    "symmetric factor has {} components in dimension {n}",
                    f.len()
                )));
            }
        }
        let mut t = Self {
            n: n as u8,
            factors,
        };
        t.canonical_sort();
        Ok(t)
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n: n as u8,
            factors: Vec::new(),
        }
    }

    fn canonical_sort(&mut self) {
        self.factors.sort_by(|a, b| {
            for (x, y) in a.iter().zip(b.iter()) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            std::cmp::Ordering::Equal
        });
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    /// Number of factors (the order of the element it decorates).
    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[Vecn] {
        &self.factors
    }

    /// Product of factor Euclidean norms; 1 for the empty tensor.
    pub fn sym_norm(&self) -> f64 {
        self.factors.iter().map(|f| norm(f)).product()
    }

    /// Multiset union of factors.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(ChainError::Dimension(format!(
                "symmetric tensors in dimensions {} and {}",
                self.n, other.n
            )));
        }
        let mut factors = self.factors.clone();
        factors.extend(other.factors.iter().cloned());
        Self::new(self.n(), factors)
    }
}

// ---------------------------------------------------------------------------
// JSON encodings
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermRepr {
    idx: Vec<usize>,
    c: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KVectorRepr {
    n: usize,
    grade: usize,
    terms: Vec<TermRepr>,
}

impl Serialize for KVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = KVectorRepr {
            n: self.n(),
            grade: self.grade(),
            terms: self
                .terms
                .iter()
                .map(|&(m, c)| TermRepr {
                    idx: mask_to_indices(m),
                    c,
                })
                .collect(),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = KVectorRepr::deserialize(d)?;
        let mut kv = KVector::zero(repr.n, repr.grade).map_err(D::Error::custom)?;
        let mut terms: Vec<(u32, f64)> = Vec::with_capacity(repr.terms.len());
        for t in &repr.terms {
            if t.idx.len() != repr.grade {
                return Err(D::Error::custom(format!(
                    "blade tuple {:?} does not match grade {}",
                    t.idx, repr.grade
                )));
            }
            let mut mask = 0u32;
            let mut prev = 0usize;
            for &i in &t.idx {
                if i <= prev || i > repr.n {
                    return Err(D::Error::custom(format!(
                        "blade tuple {:?} must be strictly increasing within 1..={}",
                        t.idx, repr.n
                    )));
                }
                mask |= 1u32 << (i - 1);
                prev = i;
            }
            terms.push((mask, t.c));
        }
        terms.sort_unstable_by_key(|t| t.0);
        for w in terms.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(D::Error::custom("duplicate blade tuple"));
            }
        }
        kv.terms.extend(terms.into_iter().filter(|t| t.1 != 0.0));
        Ok(kv)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SymTensorRepr {
    n: usize,
    factors: Vec<Vec<f64>>,
}

impl Serialize for SymTensor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = SymTensorRepr {
            n: self.n(),
            factors: self.factors.iter().map(|f| f.to_vec()).collect(),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = SymTensorRepr::deserialize(d)?;
        SymTensor::new(repr.n, repr.factors.iter().map(|f| vecn(f)).collect())
            .map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
