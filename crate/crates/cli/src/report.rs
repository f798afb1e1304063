//! The `report` subcommand: aggregate a run directory into plot-ready CSVs
//! and a text summary.

use crate::TrainSummary;
use skewgrad_core::csvio;
use skewgrad_core::error::{Error, Result};
use skewgrad_core::stats;
use skewgrad_core::trainer::TrainingLog;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct ReportOutput {
    pub report_dir: PathBuf,
    pub files: Vec<String>,
}

pub const LOSS_CURVE_HEADER: [&str; 7] =
    ["step", "stage", "L_total", "L_c_s", "L_ssl_s", "L_ssl_t", "retained_count"];

/// Read a run directory (as written by `train` / `diagnose` / `sweep`) and
/// emit per-figure CSVs plus `summary.txt`.
pub fn cmd_report(run_dir: &Path) -> Result<ReportOutput> {
    let log_path = run_dir.join("train_log.jsonl");
    let summary_path = run_dir.join("summary.json");
    let missing: Vec<String> = [&log_path, &summary_path]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }

    let log = TrainingLog::read_jsonl(&log_path)?;
    let summary: TrainSummary = {
        let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: summary_path.display().to_string(),
            reason: e.to_string(),
        })?
    };

    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    let mut files = Vec::new();

    // Loss curves.
    let rows: Vec<Vec<String>> = log
        .records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.stage.to_string(),
                r.l_total.to_string(),
                r.l_cls.to_string(),
                r.l_ssl_source.to_string(),
                r.l_ssl_target.to_string(),
                r.retained_count.to_string(),
            ]
        })
        .collect();
    csvio::write_csv(&report_dir.join("loss_curves.csv"), &LOSS_CURVE_HEADER, &rows)?;
    files.push("loss_curves.csv".to_string());

    // Conflict curves pass through when the run was diagnosed.
    let conflict_src = run_dir.join("conflict.csv");
    if conflict_src.exists() {
        let table = csvio::read_csv(&conflict_src)?;
        let header: Vec<&str> = table.header.iter().map(|s| s.as_str()).collect();
        csvio::write_csv(&report_dir.join("conflict_curves.csv"), &header, &table.rows)?;
        files.push("conflict_curves.csv".to_string());
    }

    // Confusion matrix, row = true class.
    let k = summary.confusion_matrix.len();
    let mut header: Vec<String> = vec!["true_class".to_string()];
    header.extend((0..k).map(|c| format!("pred_{c}")));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = summary
        .confusion_matrix
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let mut out = vec![c.to_string()];
            out.extend(row.iter().map(|n| n.to_string()));
            out
        })
        .collect();
    csvio::write_csv(&report_dir.join("confusion_matrix.csv"), &header_refs, &rows)?;
    files.push("confusion_matrix.csv".to_string());

    // Sweep curves: mean target accuracy per (param, value, stage, step).
    let sweep_src = run_dir.join("sweep.csv");
    if sweep_src.exists() {
        let table = csvio::read_csv(&sweep_src)?;
        let param_idx = table.column("param").ok_or(Error::Csv {
            line: 1,
            reason: "sweep.csv missing `param`".to_string(),
        })?;
        let value = table.f64_column("value")?;
        let stage = table.f64_column("stage")?;
        let step = table.f64_column("step")?;
        let acc = table.f64_column("target_accuracy")?;
        let mut keys: Vec<(String, String, String, String)> = Vec::new();
        for (i, row) in table.rows.iter().enumerate() {
            keys.push((
                row[param_idx].clone(),
                value[i].to_string(),
                stage[i].to_string(),
                step[i].to_string(),
            ));
        }
        let mut unique = keys.clone();
        unique.sort();
        unique.dedup();
        let rows: Vec<Vec<String>> = unique
            .iter()
            .map(|key| {
                let accs: Vec<f64> = keys
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| *k == key)
                    .map(|(i, _)| acc[i])
                    .collect();
                vec![
                    key.0.clone(),
                    key.1.clone(),
                    key.2.clone(),
                    key.3.clone(),
                    stats::mean(&accs).to_string(),
                    accs.len().to_string(),
                ]
            })
            .collect();
        csvio::write_csv(
            &report_dir.join("sweep_curves.csv"),
            &["param", "value", "stage", "step", "mean_target_accuracy", "runs"],
            &rows,
        )?;
        files.push("sweep_curves.csv".to_string());
    }

    let mut text = String::new();
    text.push_str(&format!(
        "seed {}\nfinal source accuracy  {:.4}\nfinal target accuracy  {:.4}\nstage-1 target accuracy {:.4}\npseudo-label accuracy  {:.4}\n",
        summary.seed,
        summary.final_source_accuracy,
        summary.final_target_accuracy,
        summary.stage1_target_accuracy,
        summary.pseudo_label_accuracy,
    ));
    text.push_str("per-class target accuracy:");
    for (c, acc) in summary.per_class_target_accuracy.iter().enumerate() {
        text.push_str(&format!(" class{c}={acc:.3}"));
    }
    text.push('\n');
    text.push_str(&format!("log records {}\nreport files: {}\n", log.records.len(), files.join(", ")));
    let summary_txt = report_dir.join("summary.txt");
    std::fs::write(&summary_txt, text).map_err(|e| Error::io(&summary_txt, e))?;
    files.push("summary.txt".to_string());

    Ok(ReportOutput { report_dir, files })
}
