use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AttackReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub variant: String,
    pub top1: f64,
    pub top1_std: f64,
    pub top5: f64,
    /// Top-1 gain over the baseline row of the same mode; empty for the
    /// baseline itself.
    pub improvement: Option<f64>,
    pub knn_dist: f64,
    pub overfit_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<AttackReport>,
}

impl Comparison {
    pub fn from_reports(reports: Vec<AttackReport>) -> Self {
        let rows = reports
            .iter()
            .map(|r| {
                let base = reports
                    .iter()
                    .find(|b| b.mode == r.mode && b.variant == "baseline")
                    .map(|b| b.top1.mean);
                ComparisonRow {
                    mode: r.mode.clone(),
                    variant: r.variant.clone(),
                    top1: r.top1.mean,
                    top1_std: r.top1.std,
                    top5: r.top5.mean,
                    improvement: base.filter(|_| r.variant != "baseline").map(|b| r.top1.mean - b),
                    knn_dist: r.knn_dist,
                    overfit_fraction: r.overfit_fraction,
                }
            })
            .collect();
        Comparison { rows, reports }
    }

    pub fn row(&self, mode: &str, variant: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.mode == mode && r.variant == variant)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["mode", "variant", "top1", "top1_std", "top5", "improvement", "knn_dist", "overfit_fraction"])
            .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.mode.clone(),
                r.variant.clone(),
                r.top1.to_string(),
                r.top1_std.to_string(),
                r.top5.to_string(),
                opt(r.improvement),
                r.knn_dist.to_string(),
                opt(r.overfit_fraction),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Attack | Variant | Top-1 Acc ↑ | Top-5 Acc ↑ | Imp. ↑ | KNN Dist ↓ | Overfit |\n|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let label = match r.variant.as_str() {
                "baseline" => "baseline".to_string(),
                v => format!("+ {}", v.to_uppercase()),
            };
            s += &format!(
                "| {} | {} | {:.2} ± {:.2} | {:.2} | {} | {:.2} | {} |\n",
                r.mode.to_uppercase(),
                label,
                r.top1,
                r.top1_std,
                r.top5,
                r.improvement.map(|v| format!("{v:+.2}")).unwrap_or_default(),
                r.knn_dist,
                r.overfit_fraction.map(|v| format!("{:.1}%", 100.0 * v)).unwrap_or_default(),
            );
        }
        s
    }
}
