use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RetrievalReport;

/// A labelled evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
    /// `variant − base` for every metric the base also reports.
    pub deltas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub base: String,
    pub dataset_hashes: BTreeMap<String, String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One line per run and metric, deltas signed.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.name);
            for (metric, value) in &row.metrics {
                match row.deltas.get(metric) {
                    Some(d) if row.name != self.base => {
                        let _ = writeln!(out, "  {metric:<40} {value:>8.4} ({d:+.4})");
                    }
                    _ => {
                        let _ = writeln!(out, "  {metric:<40} {value:>8.4}");
                    }
                }
            }
        }
        out
    }
}

/// Tabulates variants against `base`. All runs must share dataset hashes.
pub fn ablation_report(base: &NamedReport, variants: &[NamedReport]) -> Result<AblationTable> {
    for v in variants {
        if v.report.dataset_hashes != base.report.dataset_hashes {
            return Err(Error::IncomparableRuns(format!(
                "{} and {} were evaluated on different datasets",
                base.name, v.name
            )));
        }
    }
    let base_metrics = base.report.metric_map();
    let row = |r: &NamedReport| {
        let metrics = r.report.metric_map();
        let deltas = metrics
            .iter()
            .filter_map(|(k, v)| base_metrics.get(k).map(|b| (k.clone(), v - b)))
            .collect();
        AblationRow {
            name: r.name.clone(),
            metrics,
            deltas,
        }
    };
    let mut rows = vec![row(base)];
    rows.extend(variants.iter().map(row));
    Ok(AblationTable {
        base: base.name.clone(),
        dataset_hashes: base.report.dataset_hashes.clone(),
        rows,
    })
}

/// Median of the values; `None` when empty or any value is NaN.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
