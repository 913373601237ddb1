//! Byte-stable CSV and JSON report emission.
//!
//! Floats are printed with Rust's shortest round-trip formatting, which is
//! deterministic, so identical runs produce identical bytes.

use chaincalc_core::rep::ConvergenceRow;
use chaincalc_core::{ChainError, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

/// Shortest round-trip decimal form of a float (empty for None cells).
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // Avoid "-0" flicker between otherwise identical runs.
        "0".to_string()
    } else {
        format!("{x}")
    }
}

/// Convergence table: one row per level.
pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = String::from("j,value,diff,accelerated,certified_bound\n");
    for r in rows {
        let bound = r.certified_bound.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.j,
            fmt_f64(r.value),
            fmt_f64(r.diff),
            fmt_f64(r.accelerated),
            bound
        );
    }
    s
}

/// Residual table for flow checks: one row per time depth.
pub fn flow_csv(rows: &[(u32, f64, f64, f64)]) -> String {
    let mut s = String::from("m,lhs,rhs,residual\n");
    for (m, lhs, rhs, resid) in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            m,
            fmt_f64(*lhs),
            fmt_f64(*rhs),
            fmt_f64(*resid)
        );
    }
    s
}

/// One verified identity inside a run report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Machine-readable result of a scenario run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    pub seed: u64,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_bound: Option<f64>,
    pub converged: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckReport>,
    pub passed: bool,
    pub diagnostics: String,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| ChainError::Schema(format!("report serialization: {e}")))
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_output_is_byte_stable() {
        let rows = vec![
            ConvergenceRow {
                j: 0,
                value: 0.5,
                diff: 0.0,
                accelerated: 0.5,
                certified_bound: Some(0.125),
            },
            ConvergenceRow {
                j: 1,
                value: 0.3333333333333333,
                diff: -0.16666666666666669,
                accelerated: 0.3333333333333333,
                certified_bound: None,
            },
        ];
        let expect = "j,value,diff,accelerated,certified_bound\n\
                      0,0.5,0,0.5,0.125\n\
                      1,0.3333333333333333,-0.16666666666666669,0.3333333333333333,\n";
        assert_eq!(convergence_csv(&rows), expect);
        assert_eq!(convergence_csv(&rows), convergence_csv(&rows));
    }

    #[test]
    fn negative_zero_prints_as_zero() {
        assert_eq!(fmt_f64(-0.0), "0");
        assert_eq!(fmt_f64(-1.25e-9), "-0.00000000125");
    }
}

/// Aitken delta-squared extrapolation of the last three entries, falling
/// back to the raw tail when the differences are not geometric.
pub fn accelerate(vals: &[f64]) -> f64 {
    let k = vals.len();
    if k < 3 {
        return vals.last().copied().unwrap_or(0.0);
    }
    let (a, b, c) = (vals[k - 3], vals[k - 2], vals[k - 1]);
    let (d0, d1) = (b - a, c - b);
    let den = d1 - d0;
    if den == 0.0 || d0 == 0.0 || !(0.02..=0.98).contains(&(d1 / d0).abs()) {
        return c;
    }
    c - d1 * d1 / den
}
