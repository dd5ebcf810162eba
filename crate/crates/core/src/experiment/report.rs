//! Aggregation of run records into summary tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::{fem_evaluations, Mode, RunRecord};
use crate::pde::LedgerCounts;

use super::ExperimentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub problem: Option<String>,
    pub mode: Mode,
    pub n_params: usize,
    pub final_e_i: Option<f64>,
    pub final_e_d: f64,
    pub online_evaluations: u64,
    pub diagnostic_evaluations: u64,
    pub cycles_used: usize,
    pub refinements: usize,
    /// Full-order UKI cost the row is compared against.
    pub fem_reference: u64,
    /// `fem_reference / ((Q + T) · cycles used)`; 1 for full-order runs.
    pub speedup: Option<f64>,
    /// `fem_reference / online_evaluations`.
    pub measured_speedup: Option<f64>,
    pub stop: String,
    pub seconds: Option<f64>,
    pub ledger: LedgerCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn config_usize(rec: &RunRecord, section: &str, key: &str) -> Option<usize> {
    rec.config.as_ref()?.get(section)?.get(key)?.as_u64().map(|v| v as usize)
}

fn problem_of(rec: &RunRecord) -> Option<String> {
    rec.config.as_ref()?.get("problem")?.as_str().map(str::to_string)
}

fn stop_label(rec: &RunRecord) -> String {
    serde_json::to_value(&rec.stop)
        .ok()
        .map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        })
        .unwrap_or_default()
}

/// Pure function of the records, in input order.
pub fn build_report(records: &[(String, RunRecord)]) -> Report {
    let fem_for = |problem: &Option<String>| {
        records
            .iter()
            .find(|(_, r)| r.mode == Mode::FemUki && problem_of(r) == *problem)
            .map(|(_, r)| r.online_evaluations)
    };
    let rows = records
        .iter()
        .map(|(label, rec)| {
            let problem = problem_of(rec);
            let t_fem = config_usize(rec, "uki", "t_fem").unwrap_or(20);
            let fem_reference = fem_for(&problem).unwrap_or_else(|| fem_evaluations(rec.n_params, t_fem));
            let (speedup, measured) = match rec.mode {
                Mode::FemUki => (Some(1.0), Some(1.0)),
                Mode::DeeponetDirect => (None, None),
                Mode::DeeponetAdaptive => {
                    let budget = rec
                        .policy
                        .as_ref()
                        .map(|p| ((p.q + p.t) * rec.cycles.len()) as f64)
                        .filter(|b| *b > 0.0);
                    let online = rec.online_evaluations as f64;
                    (
                        budget.map(|b| fem_reference as f64 / b),
                        (online > 0.0).then(|| fem_reference as f64 / online),
                    )
                }
            };
            ReportRow {
                label: label.clone(),
                problem,
                mode: rec.mode,
                n_params: rec.n_params,
                final_e_i: rec.final_e_i,
                final_e_d: rec.final_e_d,
                online_evaluations: rec.online_evaluations,
                diagnostic_evaluations: rec.ledger.diagnostic,
                cycles_used: rec.cycles.len(),
                refinements: rec.refinements(),
                fem_reference,
                speedup,
                measured_speedup: measured,
                stop: stop_label(rec),
                seconds: rec.timings.get("total").copied(),
                ledger: rec.ledger,
            }
        })
        .collect();
    Report { rows }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

impl Report {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "label,problem,mode,n_params,final_e_i,final_e_d,online_evaluations,diagnostic_evaluations,cycles_used,refinements,fem_reference,speedup,measured_speedup,stop\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6e},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.problem.as_deref().unwrap_or(""),
                r.mode,
                r.n_params,
                opt(r.final_e_i),
                r.final_e_d,
                r.online_evaluations,
                r.diagnostic_evaluations,
                r.cycles_used,
                r.refinements,
                r.fem_reference,
                opt(r.speedup),
                opt(r.measured_speedup),
                r.stop
            ));
        }
        out
    }

    /// Timings are left out so that the table is reproducible.
    pub fn summary_json(&self) -> String {
        let mut rows = self.rows.clone();
        for r in &mut rows {
            r.seconds = None;
        }
        serde_json::to_string_pretty(&Report { rows }).expect("report serializes")
    }
}

pub fn curves_csv(records: &[(String, RunRecord)]) -> String {
    let mut out = String::from("label,mode,cycle,iteration,e_d,e_m,e_i\n");
    for (label, rec) in records {
        for p in &rec.series {
            out.push_str(&format!(
                "{label},{},{},{},{:.6e},{},{}\n",
                rec.mode,
                p.cycle,
                p.iteration,
                p.e_d,
                opt(p.e_m),
                opt(p.e_i)
            ));
        }
    }
    out
}

/// Reads records (a run directory or a record file each) and writes the
/// summary tables into `out`.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<Report, ExperimentError> {
    if paths.is_empty() {
        return Err(ExperimentError::Config("report needs at least one record".into()));
    }
    let mut records = Vec::with_capacity(paths.len());
    for p in paths {
        let file = if p.is_dir() { p.join("record.json") } else { p.clone() };
        let rec = RunRecord::read_json(&file).map_err(|e| ExperimentError::Config(format!("{}: {e}", file.display())))?;
        records.push((p.display().to_string(), rec));
    }
    let report = build_report(&records);
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.csv"), report.summary_csv())?;
    fs::write(out.join("summary.json"), report.summary_json())?;
    fs::write(out.join("curves.csv"), curves_csv(&records))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::adaptive::{CycleRecord, RefinePolicy, StopReason};

    fn record(mode: Mode, online: u64, cycles: usize) -> RunRecord {
        let cycle = CycleRecord {
            cycle: 0,
            uki_steps: 10,
            anchor_step: 1,
            e_d: 1.0,
            e_prev: None,
            relative_change: None,
            refined: false,
            e_m_before: None,
            e_m_after: None,
            e_i: None,
            training: None,
            ledger: LedgerCounts::default(),
        };
        RunRecord {
            mode,
            n_params: 128,
            cycles: vec![cycle; cycles],
            series: Vec::new(),
            ledger: LedgerCounts {
                inversion: online,
                total: online,
                ..LedgerCounts::default()
            },
            online_evaluations: online,
            final_r: Vec::new(),
            final_c_diag: Vec::new(),
            final_e_d: 1.0,
            final_e_i: Some(0.1),
            stop: StopReason::Completed,
            timings: BTreeMap::from([("total".to_string(), 1.5)]),
            seeds: BTreeMap::new(),
            policy: Some(RefinePolicy::default()),
            config: Some(serde_json::json!({"problem": "darcy", "uki": {"t_fem": 20}})),
            setup_ledger: None,
            states: Vec::new(),
        }
    }

    #[test]
    fn fem_row_has_unit_speedup() {
        let r = build_report(&[("fem".into(), record(Mode::FemUki, 5140, 1))]);
        assert_eq!(r.rows[0].speedup, Some(1.0));
        assert_eq!(r.rows[0].fem_reference, 5140);
    }

    #[test]
    fn adaptive_speedup_uses_cycles_used() {
        let recs = vec![
            ("fem".to_string(), record(Mode::FemUki, 5140, 1)),
            ("ada".to_string(), record(Mode::DeeponetAdaptive, 400, 4)),
        ];
        let r = build_report(&recs);
        assert!((r.rows[1].speedup.unwrap() - 5140.0 / (60.0 * 4.0)).abs() < 1e-12);
        assert!((r.rows[1].measured_speedup.unwrap() - 5140.0 / 400.0).abs() < 1e-12);
        assert_eq!(r.summary_json(), build_report(&recs).summary_json());
        assert!(!r.summary_json().contains("1.5"));
    }
}
