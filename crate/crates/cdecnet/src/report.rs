//! Metric tables as aligned text and JSON.

use cdecnet_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

pub fn metric_table(r: &MetricReport) -> String {
    let mut s = format!("dataset: {}\nmodel: {}\n", r.dataset, r.model);
    s.push_str(&format!("{:<6}{:>8}{:>11}{:>8}{:>8}\n", "IoU", "Recall", "Precision", "F1", "mAP"));
    for row in &r.rows {
        s.push_str(&format!(
            "{:<6.2}{:>8.3}{:>11.3}{:>8.3}{:>8.3}\n",
            row.iou_thr, row.recall, row.precision, row.f1, row.ap
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub composite: bool,
    pub deformable: bool,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub iou_thr: f64,
    pub rows: Vec<AblationRow>,
    /// Set when the full model does not reach the cascade-only mAP.
    pub note: Option<String>,
}

pub fn ablation_table(t: &AblationTable) -> String {
    let mut s = format!("dataset: {}  IoU: {}\n", t.dataset, t.iou_thr);
    s.push_str(&format!("{:<36}{:>8}{:>11}{:>8}{:>8}\n", "Model", "Recall", "Precision", "F1", "mAP"));
    for r in &t.rows {
        s.push_str(&format!(
            "{:<36}{:>8.3}{:>11.3}{:>8.3}{:>8.3}\n",
            r.model, r.recall, r.precision, r.f1, r.map
        ));
    }
    if let Some(n) = &t.note {
        s.push_str(&format!("note: {n}\n"));
    }
    s
}
