//! Strict JSON scenario schema for the command-line driver.
//!
//! A scenario bundles a domain, a form (or a time-indexed family), an
//! operator pipeline, a vector field, a check, and output paths. Parsing is
//! strict — unknown keys are rejected — and a parsed scenario serializes
//! back to a document that parses to the same scenario.

use chaincalc_core::chain::SymMono;
use chaincalc_core::chainops::OpSpec;
use chaincalc_core::multivec::vecn;
use chaincalc_core::{
    ChainElement, ChainError, DiracChain, DomainSpec, Form, KVector, Result, VectorField,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default seed for every randomized run, kept in one place so identical
/// invocations produce byte-identical artifacts.
pub const DEFAULT_SEED: u64 = 0x00C0_FFEE;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// One term `t^tpow * form` of a time-indexed family of forms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeTerm {
    pub tpow: u32,
    pub form: Form,
}

/// Which identity a scenario verifies, with its tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "theorem", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckSpec {
    /// Fundamental theorem for chains in a flow over `[a, b]`.
    Ftc { a: f64, b: f64, tol: f64 },
    /// Stokes along the evolving chain over `[a, b]`.
    StokesEvolving { a: f64, b: f64, tol: f64 },
    /// Leibniz rule at `t0` against a centred difference of half-width `h`.
    Leibniz { t0: f64, h: f64, tol: f64 },
    /// Reynolds transport at `t0` (top-grade stream and family).
    Reynolds { t0: f64, h: f64, tol: f64 },
    /// `|integral - expect| <= tol` for the (pipelined) stream integral.
    Integral { expect: f64, tol: f64 },
}

impl CheckSpec {
    pub fn tol(&self) -> f64 {
        match self {
            CheckSpec::Ftc { tol, .. }
            | CheckSpec::StokesEvolving { tol, .. }
            | CheckSpec::Leibniz { tol, .. }
            | CheckSpec::Reynolds { tol, .. }
            | CheckSpec::Integral { tol, .. } => *tol,
        }
    }
}

/// Where to write the convergence table (CSV) and the full report (JSON).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<String>,
}

/// A complete scenario document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub domain: DomainSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form: Option<Form>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub time_form: Vec<TimeTerm>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pipeline: Vec<OpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<VectorField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ChainError::Schema(format!("scenario: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| ChainError::Schema(format!("scenario serialization: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Chain documents (for `norm --chain` and demo emission)
// ---------------------------------------------------------------------------

/// One basis-blade term `c e_{idx}` with 1-based, distinct indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BladeDoc {
    pub idx: Vec<usize>,
    pub c: f64,
}

/// One chain element: a point, an optional dipole monomial (0-based axes),
/// and the k-vector as a sum of blades of a common grade.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementDoc {
    pub point: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sym: Vec<u8>,
    pub blades: Vec<BladeDoc>,
}

/// A Dirac chain as a JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDoc {
    pub n: usize,
    pub elements: Vec<ElementDoc>,
}

impl ChainDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ChainError::Schema(format!("chain: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_chain(&self) -> Result<DiracChain> {
        let mut elems = Vec::with_capacity(self.elements.len());
        for e in &self.elements {
            if e.blades.is_empty() {
                return Err(ChainError::Schema(
                    "chain element needs at least one blade".into(),
                ));
            }
            let mut kv: Option<KVector> = None;
            for b in &e.blades {
                let one = if b.idx.is_empty() {
                    KVector::scalar(self.n, b.c)?
                } else {
                    KVector::basis_blade(self.n, &b.idx, b.c)?
                };
                kv = Some(match kv {
                    Some(acc) => acc.add_kv(&one)?,
                    None => one,
                });
            }
            elems.push(ChainElement::new(
                vecn(&e.point),
                SymMono::from_slice(&e.sym),
                kv.unwrap(),
            ));
        }
        DiracChain::new(self.n, elems)
    }

    pub fn from_chain(a: &DiracChain) -> Self {
        let elements = a
            .elements()
            .iter()
            .map(|e| ElementDoc {
                point: e.point.to_vec(),
                sym: e.sym.to_vec(),
                blades: e
                    .kv
                    .terms()
                    .map(|(mask, c)| BladeDoc {
                        idx: chaincalc_core::multivec::mask_to_indices(mask)
                            .into_iter()
                            .map(|i| i + 1)
                            .collect(),
                        c,
                    })
                    .collect(),
            })
            .collect();
        Self {
            n: a.n(),
            elements,
        }
    }
}

/// Loads an open region from a JSON file (same schema as in forms/streams).
pub fn region_from_path(path: &Path) -> Result<chaincalc_core::OpenRegion> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ChainError::Schema(format!("region: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> &'static str {
        r#"{
          "domain": { "kind": "cube", "lo": [0.0, 0.0], "hi": [1.0, 1.0] },
          "form": { "family": "poly", "grade": 2,
                    "terms": [ { "idx": [1, 2], "monomial": { "exps": [1, 0] }, "c": 1.0 } ] },
          "pipeline": [ "boundary", { "extrude": { "v": [0.0, 1.0] } } ],
          "field": { "comps": [ [ { "exps": [0, 1], "c": -1.0 } ], [ { "exps": [1, 0], "c": 1.0 } ] ] },
          "check": { "theorem": "integral", "expect": 0.5, "tol": 1e-9 },
          "output": { "csv": "out.csv" },
          "seed": 7
        }"#
    }

    #[test]
    fn scenario_round_trips_unchanged() {
        let one = Scenario::from_json(sample_json()).unwrap();
        let text1 = one.to_json().unwrap();
        let two = Scenario::from_json(&text1).unwrap();
        let text2 = two.to_json().unwrap();
        assert_eq!(text1, text2);
        assert_eq!(one.seed, 7);
        assert_eq!(one.pipeline.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = sample_json().replace("\"seed\": 7", "\"seed\": 7, \"extra\": 1");
        let err = Scenario::from_json(&bad).unwrap_err();
        assert!(matches!(err, ChainError::Schema(_)), "{err}");
        let bad_check = r#"{
          "domain": { "kind": "cube", "lo": [0.0], "hi": [1.0] },
          "check": { "theorem": "integral", "expect": 1.0, "tol": 1e-9, "oops": true }
        }"#;
        assert!(Scenario::from_json(bad_check).is_err());
    }

    #[test]
    fn default_seed_applies_when_missing() {
        let s = Scenario::from_json(r#"{ "domain": { "kind": "sierpinski" } }"#).unwrap();
        assert_eq!(s.seed, DEFAULT_SEED);
        assert!(s.form.is_none() && s.pipeline.is_empty());
    }

    #[test]
    fn chain_documents_build_real_chains() {
        let doc = ChainDoc::from_json(
            r#"{ "n": 2, "elements": [
                 { "point": [0.25, -0.5], "sym": [1], "blades": [ { "idx": [1], "c": 2.0 } ] },
                 { "point": [0.0, 0.0], "blades": [ { "idx": [2], "c": -1.0 } ] } ] }"#,
        )
        .unwrap();
        let chain = doc.to_chain().unwrap();
        assert_eq!(chain.n(), 2);
        assert_eq!(chain.max_order(), 1);
        let back = ChainDoc::from_chain(&chain);
        assert_eq!(back.to_chain().unwrap().total_mass(), chain.total_mass());
        // Scalar blades (idx == []) make grade-0 elements.
        let pt = ChainDoc::from_json(
            r#"{ "n": 1, "elements": [ { "point": [0.5], "blades": [ { "idx": [], "c": 1.5 } ] } ] }"#,
        )
        .unwrap()
        .to_chain()
        .unwrap();
        assert_eq!(pt.elements()[0].kv.grade(), 0);
    }
}
