//! Evaluation report files: one CSV row per image plus a JSON summary.

use std::fs;
use std::path::Path;

use madad_core::eval::EvalReport;

use crate::error::{CliError, CliResult};

pub fn write_report(report: &EvalReport, out_dir: &Path) -> CliResult<()> {
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let csv_path = out_dir.join("report.csv");
    let mut csv = String::from("id,size_class,max_dice,best_threshold\n");
    for row in &report.per_image {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.id,
            row.size_class.name(),
            row.max_dice,
            row.best_threshold
        ));
    }
    fs::write(&csv_path, csv).map_err(CliError::io(&csv_path))?;

    let summary = serde_json::json!({
        "mean_max_dice": report.mean_max_dice(),
        "global_max_dice": report.global_max_dice,
        "per_size_class": report
            .per_size_class
            .iter()
            .map(|(class, mean, count)| serde_json::json!({
                "class": class.name(),
                "mean_max_dice": mean,
                "count": count,
            }))
            .collect::<Vec<_>>(),
        "mask_auroc": report.mask_auroc,
        "config_fingerprint": report.config_fingerprint,
        "n_images": report.per_image.len(),
    });
    let json_path = out_dir.join("summary.json");
    fs::write(&json_path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(CliError::io(&json_path))
}

/// Reads back the values needed to cross-check a summary against its rows.
pub fn read_summary(out_dir: &Path) -> CliResult<serde_json::Value> {
    let path = out_dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Format { path, reason: e.to_string() })
}

/// Parses the per-image CSV back into `(id, max_dice)` pairs.
pub fn read_report_rows(out_dir: &Path) -> CliResult<Vec<(String, f64)>> {
    let path = out_dir.join("report.csv");
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let dice: f64 = fields
            .nth(1)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| CliError::Format { path: path.clone(), reason: format!("bad row: {line}") })?;
        rows.push((id, dice));
    }
    Ok(rows)
}
