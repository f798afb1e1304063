//! Command wiring for the `skewgrad` binary: configuration resolution
//! (defaults < config file < flags < SKEWGRAD_SEED), the five subcommands,
//! and their file outputs.

pub mod config;
pub mod report;

use serde::{Deserialize, Serialize};
use skewgrad_core::csvio;
use skewgrad_core::diagnostics;
use skewgrad_core::error::{Error, Result};
use skewgrad_core::pointcloud::{self, make_uda_benchmark, ManifestEntry};
use skewgrad_core::stats;
use skewgrad_core::trainer::{self, run_pipeline, Checkpoint, PipelineResult};
use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ── gen-data ─────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct GenDataReport {
    pub source_files: usize,
    pub target_files: usize,
    pub manifest: PathBuf,
}

/// Write one XYZ file per cloud plus a manifest tying ids to files, labels,
/// and domains. Byte-identical across reruns of the same config.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenDataReport> {
    cfg.validate()?;
    let (source, target) = make_uda_benchmark(&cfg.benchmark_spec()?)?;
    let out = cfg.output_path();
    ensure_dir(&out.join("source"))?;
    ensure_dir(&out.join("target"))?;

    let mut entries = Vec::new();
    for ds in [&source, &target] {
        for pc in &ds.samples {
            let rel = format!("{}/cloud_{:010}.xyz", pc.domain, pc.id);
            pointcloud::save_xyz(&[pc], &out.join(&rel))?;
            // Generation owns the labels before they are hidden; the
            // manifest is how oracle and evaluation paths recover them.
            entries.push(ManifestEntry {
                id: pc.id,
                file: rel,
                label: pointcloud::label_audit::with_oracle_access(|| pc.oracle_label()),
                domain: pc.domain,
            });
        }
    }
    let manifest = out.join("manifest.json");
    pointcloud::save_manifest(&entries, &manifest)?;
    Ok(GenDataReport {
        source_files: source.len(),
        target_files: target.len(),
        manifest,
    })
}

// ── train ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_source_accuracy: f64,
    pub final_target_accuracy: f64,
    pub stage1_target_accuracy: f64,
    pub pseudo_label_accuracy: f64,
    pub per_class_target_accuracy: Vec<f64>,
    pub confusion_matrix: Vec<Vec<usize>>,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub seed: u64,
}

pub fn summarize(cfg: &ExperimentConfig, result: &PipelineResult) -> TrainSummary {
    TrainSummary {
        final_source_accuracy: result.eval_source.accuracy,
        final_target_accuracy: result.eval_target.accuracy,
        stage1_target_accuracy: result.stage1_eval_target.accuracy,
        pseudo_label_accuracy: result.pseudo_accuracy,
        per_class_target_accuracy: result.eval_target.per_class.clone(),
        confusion_matrix: result.eval_target.confusion.clone(),
        steps_stage1: cfg.steps_stage1,
        steps_stage2: cfg.steps_stage2,
        seed: cfg.seed,
    }
}

pub const SKEWNESS_CSV_HEADER: [&str; 6] =
    ["step", "stage", "sample_id", "domain", "skewness", "retained"];

pub fn write_skewness_csv(rows: &[trainer::SkewnessRow], path: &Path) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.stage.to_string(),
                r.record.sample_id.to_string(),
                r.record.domain.to_string(),
                r.record.skewness.to_string(),
                (r.retained as u8).to_string(),
            ]
        })
        .collect();
    csvio::write_csv(path, &SKEWNESS_CSV_HEADER, &body)
}

/// Run the two-stage pipeline and persist config, logs, checkpoints, and the
/// summary under the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg.output_path();
    ensure_dir(&out)?;
    write_json(cfg, &out.join("config.json"))?;

    let pipeline = cfg.pipeline_config()?;
    let result = run_pipeline(&pipeline)?;

    result.log.write_jsonl(&out.join("train_log.jsonl"))?;
    let ckpt1 = Checkpoint::capture(
        &pipeline.train,
        &result.stage1_params,
        1,
        pipeline.train.steps_stage1,
        result.final_rng,
    );
    trainer::save_checkpoint(&ckpt1, &out.join("checkpoint_stage1.json"))?;
    let ckpt = Checkpoint::capture(
        &pipeline.train,
        &result.params,
        2,
        pipeline.train.steps_stage2,
        result.final_rng,
    );
    trainer::save_checkpoint(&ckpt, &out.join("checkpoint_final.json"))?;

    if pipeline.diagnostics_stride > 0 {
        diagnostics::write_conflict_csv(&result.conflicts, &out.join("conflict.csv"))?;
        write_skewness_csv(&result.skewness, &out.join("skewness.csv"))?;
    }
    if !result.periodic.is_empty() {
        write_json(&result.periodic, &out.join("periodic_eval.json"))?;
    }

    let summary = summarize(cfg, &result);
    write_json(&summary, &out.join("summary.json"))?;
    Ok(summary)
}

// ── sweep ────────────────────────────────────────────────────────────────

pub const SWEEP_CSV_HEADER: [&str; 6] = ["param", "value", "seed", "stage", "step", "target_accuracy"];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub stage: u8,
    pub step: usize,
    pub target_accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct SweepSummary {
    pub rows: usize,
    pub runs: usize,
    /// Mean final target accuracy per (param, value).
    pub means: Vec<(String, f64, f64)>,
}

/// Grid runs over beta and/or alpha values times the sweep seeds. Each run
/// contributes periodic target-accuracy rows (when eval_stride is set) plus
/// one final row.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    let grid: Vec<(String, f64)> = cfg
        .sweep_betas
        .iter()
        .map(|&b| ("beta".to_string(), b))
        .chain(cfg.sweep_alphas.iter().map(|&a| ("alpha".to_string(), a)))
        .collect();
    if grid.is_empty() {
        return Err(Error::config("sweep_betas/sweep_alphas", "sweep grid is empty"));
    }
    let seeds = if cfg.sweep_seeds.is_empty() { vec![cfg.seed] } else { cfg.sweep_seeds.clone() };

    let out = cfg.output_path();
    ensure_dir(&out)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut runs = 0;
    for (param, value) in &grid {
        for &seed in &seeds {
            let mut run_cfg = cfg.clone();
            match param.as_str() {
                "beta" => run_cfg.beta = *value,
                _ => run_cfg.alpha = *value,
            }
            run_cfg.seed = seed;
            run_cfg.diagnostics_stride = 0;
            let pipeline = run_cfg.pipeline_config()?;
            let result = run_pipeline(&pipeline)?;
            runs += 1;
            for pe in &result.periodic {
                rows.push(SweepRow {
                    param: param.clone(),
                    value: *value,
                    seed,
                    stage: pe.stage,
                    step: pe.step,
                    target_accuracy: pe.target_accuracy,
                });
            }
            rows.push(SweepRow {
                param: param.clone(),
                value: *value,
                seed,
                stage: 2,
                step: pipeline.train.steps_stage2,
                target_accuracy: result.eval_target.accuracy,
            });
        }
    }

    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.param.clone(),
                r.value.to_string(),
                r.seed.to_string(),
                r.stage.to_string(),
                r.step.to_string(),
                r.target_accuracy.to_string(),
            ]
        })
        .collect();
    csvio::write_csv(&out.join("sweep.csv"), &SWEEP_CSV_HEADER, &body)?;

    let mut means = Vec::new();
    for (param, value) in &grid {
        let finals: Vec<f64> = rows
            .iter()
            .filter(|r| &r.param == param && r.value == *value && r.step == cfg.steps_stage2 && r.stage == 2)
            .map(|r| r.target_accuracy)
            .collect();
        means.push((param.clone(), *value, stats::mean(&finals)));
    }
    Ok(SweepSummary { rows: rows.len(), runs, means })
}

// ── diagnose ─────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct Diagnosis {
    pub records: usize,
    /// Correlation of per-batch mean skewness vs sim(G_SSL, G_oracle).
    pub batch_skew_vs_ssl_oracle: Option<stats::Correlation>,
    /// Correlation pairing each measured sample's skewness with its step's
    /// sim(G_SSL, G_oracle).
    pub sample_skew_vs_ssl_oracle: Option<stats::Correlation>,
    pub anm: Option<stats::AnmDecision>,
    pub notices: Vec<String>,
    pub summary: TrainSummary,
}

/// Train with conflict diagnostics enabled, stream the conflict and skewness
/// CSVs, and report the skewness/conflict correlations plus the causal
/// direction verdict.
pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<Diagnosis> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if cfg.diagnostics_stride == 0 {
        cfg.diagnostics_stride = 25;
    }
    let out = cfg.output_path();
    ensure_dir(&out)?;
    write_json(&cfg, &out.join("config.json"))?;

    let pipeline = cfg.pipeline_config()?;
    let result = run_pipeline(&pipeline)?;
    let mut notices = Vec::new();

    diagnostics::write_conflict_csv(&result.conflicts, &out.join("conflict.csv"))?;
    write_skewness_csv(&result.skewness, &out.join("skewness.csv"))?;
    if result.conflicts.is_empty() {
        notices.push(format!(
            "diagnostics stride {} exceeds the run length; conflict.csv is header-only",
            cfg.diagnostics_stride
        ));
    }

    let skew: Vec<f64> = result.conflicts.iter().map(|c| c.mean_batch_skewness).collect();
    let sim: Vec<f64> = result.conflicts.iter().map(|c| c.sim_ssl_oracle).collect();
    let batch_corr = stats::correlation(&skew, &sim).ok();

    // Per-sample pairing: each measurer record at an audited step against
    // that step's similarity.
    let mut per_sample_skew = Vec::new();
    let mut per_sample_sim = Vec::new();
    for rec in &result.conflicts {
        for row in result.skewness.iter().filter(|r| r.step == rec.step) {
            per_sample_skew.push(row.record.skewness);
            per_sample_sim.push(rec.sim_ssl_oracle);
        }
    }
    let sample_corr = stats::correlation(&per_sample_skew, &per_sample_sim).ok();
    if sample_corr.is_none() {
        notices.push(
            "per-sample correlation needs the sm-dsb measurer; run with --selection-mode sm-dsb"
                .to_string(),
        );
    }

    let anm = if skew.len() >= stats::ANM_MIN_SAMPLES {
        match stats::anm_direction_test(&skew, &sim) {
            Ok(d) => Some(d),
            Err(e) => {
                notices.push(format!("anm test skipped: {e}"));
                None
            }
        }
    } else {
        notices.push(format!(
            "anm test needs at least {} conflict records, have {}",
            stats::ANM_MIN_SAMPLES,
            skew.len()
        ));
        None
    };

    result.log.write_jsonl(&out.join("train_log.jsonl"))?;
    let summary = summarize(&cfg, &result);
    write_json(&summary, &out.join("summary.json"))?;
    let diagnosis = Diagnosis {
        records: result.conflicts.len(),
        batch_skew_vs_ssl_oracle: batch_corr,
        sample_skew_vs_ssl_oracle: sample_corr,
        anm,
        notices,
        summary,
    };
    write_json(&diagnosis, &out.join("diagnosis.json"))?;
    Ok(diagnosis)
}

// ── pilot ────────────────────────────────────────────────────────────────

/// Random-freezing pilot: {all, random-freeze(0.5), sm-dsb} over the sweep
/// seeds; writes the pilot CSV.
pub fn cmd_pilot(cfg: &ExperimentConfig) -> Result<diagnostics::PilotTable> {
    cfg.validate()?;
    let seeds = if cfg.sweep_seeds.is_empty() {
        (0..5).map(|i| cfg.seed + i).collect()
    } else {
        cfg.sweep_seeds.clone()
    };
    let out = cfg.output_path();
    ensure_dir(&out)?;
    let mut pipeline = cfg.pipeline_config()?;
    pipeline.diagnostics_stride = 0;
    let table = diagnostics::pilot_random_freeze(&pipeline, &seeds)?;
    diagnostics::write_pilot_csv(&table, &out.join("pilot.csv"))?;
    write_json(&table.summaries, &out.join("pilot_summary.json"))?;
    Ok(table)
}
