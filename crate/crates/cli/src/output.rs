//! CSV artifacts and the pass/fail summary.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use savflow_core::adaptive::AttemptRecord;
use savflow_core::sav::EnergyLedgerEntry;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    #[serde(rename = "E_original")]
    pub e_original: f64,
    /// Empty for comparators without an auxiliary variable.
    #[serde(rename = "E_modified")]
    pub e_modified: Option<f64>,
    pub residual: Option<f64>,
    pub mass: f64,
    pub growth: u8,
}

impl From<&EnergyLedgerEntry> for LedgerRow {
    fn from(e: &EnergyLedgerEntry) -> Self {
        LedgerRow {
            step: e.step,
            t: e.time,
            dt: e.dt,
            e_original: e.original_energy,
            e_modified: Some(e.modified_energy),
            residual: Some(e.dissipation_residual),
            mass: e.mass,
            growth: e.growth_detected as u8,
        }
    }
}

pub fn ledger_rows(entries: &[EnergyLedgerEntry]) -> Vec<LedgerRow> {
    entries.iter().map(LedgerRow::from).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub level: usize,
    pub attempt: usize,
    pub t: f64,
    pub tau: f64,
    pub e: f64,
    pub accepted: u8,
}

impl From<&AttemptRecord> for TraceRow {
    fn from(a: &AttemptRecord) -> Self {
        TraceRow {
            level: a.level,
            attempt: a.attempt,
            t: a.t,
            tau: a.tau,
            e: a.e,
            accepted: a.accepted as u8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub scheme: String,
    pub dt: f64,
    pub error: f64,
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusRow {
    pub t: f64,
    #[serde(rename = "R_computed")]
    pub r_computed: f64,
    #[serde(rename = "R_theory")]
    pub r_theory: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> anyhow::Result<Vec<LedgerRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<LedgerRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

/// One acceptance threshold of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

pub fn write_summary(path: &Path, experiment: &str, checks: &[Check]) -> anyhow::Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    writeln!(f, "experiment: {experiment}")?;
    for c in checks {
        writeln!(f, "{}", c.line())?;
    }
    let all = checks.iter().all(|c| c.passed);
    writeln!(f, "result: {}", if all { "PASS" } else { "FAIL" })?;
    Ok(())
}

/// First step whose energy exceeds its predecessor by more than
/// `1e−10 (1 + |E|)`.
pub fn first_increase(values: &[(usize, f64)]) -> Option<(usize, f64)> {
    values.windows(2).find_map(|w| {
        let (_, a) = w[0];
        let (step, b) = w[1];
        (b > a + 1e-10 * (1.0 + a.abs())).then_some((step, b - a))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_round_trip_keeps_empty_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.csv");
        let rows = vec![
            LedgerRow {
                step: 0,
                t: 0.0,
                dt: 0.5,
                e_original: 1.25,
                e_modified: Some(2.0),
                residual: Some(0.0),
                mass: 0.07,
                growth: 0,
            },
            LedgerRow {
                step: 1,
                t: 0.5,
                dt: 0.5,
                e_original: 1.0,
                e_modified: None,
                residual: None,
                mass: 0.07,
                growth: 1,
            },
        ];
        write_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "step,t,dt,E_original,E_modified,residual,mass,growth"
        );
        assert_eq!(text.lines().nth(2).unwrap(), "1,0.5,0.5,1.0,,,0.07,1");
        assert_eq!(read_ledger(&p).unwrap(), rows);
    }

    #[test]
    fn increase_detection_uses_relative_tolerance() {
        let v = [(0, 1e6), (1, 1e6 + 1e-5), (2, 1e6 - 1.0)];
        assert_eq!(first_increase(&v), None);
        let v = [(0, 1.0), (1, 0.5), (2, 0.6)];
        let (s, d) = first_increase(&v).unwrap();
        assert_eq!(s, 2);
        assert!((d - 0.1).abs() < 1e-12);
    }

    #[test]
    fn summary_lists_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.txt");
        let checks = [Check::new("a", true, "ok"), Check::new("b", false, "bad")];
        write_summary(&p, "mbe", &checks).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "experiment: mbe\nPASS a: ok\nFAIL b: bad\nresult: FAIL\n");
    }
}
