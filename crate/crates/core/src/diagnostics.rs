//! Gradient-conflict instrumentation.
//!
//! At audited steps the trainer hands over its assembled batch; each task
//! loss is recomputed on an isolated graph and the shared-encoder gradient is
//! flattened in canonical layer order. Because differentiation is linear, the
//! sum-task snapshot equals the elementwise sum of the per-task snapshots.
//!
//! The oracle snapshot is the gradient of the target-domain classification
//! loss under the hidden true labels; it exists only because the benchmark is
//! synthetic, and reading those labels happens strictly inside the audit
//! permit.

use crate::autodiff::Graph;
use crate::csvio;
use crate::error::{Error, Result};
use crate::model::{self, bind, combined_loss, ClsExample, LossWeights, ModelParams};
use crate::pointcloud::label_audit;
use crate::selection::masked_ssl_loss;
use crate::trainer::{run_pipeline, PipelineConfig, SelectionMode, StepBatch};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Cls,
    SslSource,
    SslTarget,
    Sum,
    Oracle,
}

#[derive(Debug, Clone)]
pub struct GradientSnapshot {
    pub task: TaskKind,
    /// Flattened over shared-encoder parameters only, canonical layer order.
    pub vector: Vec<f64>,
    pub step: usize,
}

fn encoder_grad_flat(g: &Graph, bm: &model::BoundModel) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &bm.encoder {
        match g.grad(layer.weight) {
            Some(grad) => out.extend_from_slice(grad),
            None => {
                let (r, c) = g.shape(layer.weight);
                out.extend(std::iter::repeat(0.0).take(r * c));
            }
        }
        match g.grad(layer.bias) {
            Some(grad) => out.extend_from_slice(grad),
            None => {
                let (r, c) = g.shape(layer.bias);
                out.extend(std::iter::repeat(0.0).take(r * c));
            }
        }
    }
    out
}

/// Isolated backward pass of one task's (weighted) loss over the step batch.
pub fn grad_for_task(
    params: &ModelParams,
    batch: &StepBatch,
    task: TaskKind,
    weights: LossWeights,
    step: usize,
) -> Result<GradientSnapshot> {
    let mut g = Graph::new();
    let bm = bind(params, &mut g, true)?;
    let loss = match task {
        TaskKind::Sum => {
            combined_loss(
                &mut g,
                &bm,
                &batch.source_cls,
                &batch.target_cls,
                &batch.source_ssl,
                &batch.target_ssl,
                &batch.lambda_source,
                &batch.lambda_target,
                weights,
            )?
            .total
        }
        TaskKind::Cls => {
            if batch.source_cls.is_empty() {
                return Err(Error::EmptyBatch { what: "classification gradient" });
            }
            let l = combined_loss(
                &mut g,
                &bm,
                &batch.source_cls,
                &batch.target_cls,
                &[],
                &[],
                &[],
                &[],
                weights,
            )?;
            g.scale(l.cls, weights[0])
        }
        TaskKind::SslSource => {
            let losses = ssl_losses(&mut g, &bm, &batch.source_ssl)?;
            let masked = masked_ssl_loss(&mut g, &losses, &batch.lambda_source)?;
            g.scale(masked, weights[1])
        }
        TaskKind::SslTarget => {
            let losses = ssl_losses(&mut g, &bm, &batch.target_ssl)?;
            let masked = masked_ssl_loss(&mut g, &losses, &batch.lambda_target)?;
            g.scale(masked, weights[2])
        }
        TaskKind::Oracle => {
            if batch.target_originals.is_empty() {
                return Err(Error::EmptyBatch { what: "oracle gradient" });
            }
            let examples: Vec<ClsExample> = label_audit::with_oracle_access(|| {
                batch
                    .target_originals
                    .iter()
                    .map(|pc| ClsExample {
                        points: pc.points.clone(),
                        label: pc.oracle_label(),
                        sample_id: pc.id,
                    })
                    .collect()
            });
            let mut logits = None;
            for ex in &examples {
                let pts = model::points_leaf(&mut g, &ex.points, false)?;
                let feat = model::encode(&mut g, &bm, pts)?;
                let l = model::classify(&mut g, &bm, feat)?;
                logits = Some(match logits {
                    None => l,
                    Some(acc) => g.concat_rows(acc, l)?,
                });
            }
            let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
            g.softmax_cross_entropy(logits.expect("batch checked nonempty"), &labels)?
        }
    };
    g.backward(loss)?;
    Ok(GradientSnapshot { task, vector: encoder_grad_flat(&g, &bm), step })
}

fn ssl_losses(
    g: &mut Graph,
    bm: &model::BoundModel,
    samples: &[model::SslSample],
) -> Result<Vec<crate::autodiff::Tensor>> {
    samples
        .iter()
        .map(|s| {
            let pts = model::points_leaf(g, &s.rotated_points, false)?;
            let feat = model::encode(g, bm, pts)?;
            let logits = model::ssl_predict(g, bm, feat)?;
            g.softmax_cross_entropy(logits, &[s.rotation_label])
        })
        .collect()
}

/// Cosine similarity of two equal-length vectors; 0 when either norm
/// degenerates below 1e-12.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { what: "cosine vectors", left: a.len(), right: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

pub fn cosine_similarity(a: &GradientSnapshot, b: &GradientSnapshot) -> Result<f64> {
    cosine(&a.vector, &b.vector)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub step: usize,
    pub sim_sum_oracle: f64,
    pub sim_ssl_cls: f64,
    pub sim_ssl_oracle: f64,
    pub mean_batch_skewness: f64,
}

/// All conflict similarities for one audited step. The SSL vector is the sum
/// of the source and target SSL snapshots, i.e. the auxiliary-task gradient
/// as actually applied (masks included).
pub fn conflict_record(
    params: &ModelParams,
    batch: &StepBatch,
    step: usize,
    weights: LossWeights,
) -> Result<ConflictRecord> {
    let cls = grad_for_task(params, batch, TaskKind::Cls, weights, step)?;
    let ssl_s = grad_for_task(params, batch, TaskKind::SslSource, weights, step)?;
    let ssl_t = grad_for_task(params, batch, TaskKind::SslTarget, weights, step)?;
    let sum = grad_for_task(params, batch, TaskKind::Sum, weights, step)?;
    let oracle = grad_for_task(params, batch, TaskKind::Oracle, weights, step)?;
    let ssl: Vec<f64> = ssl_s.vector.iter().zip(&ssl_t.vector).map(|(a, b)| a + b).collect();
    Ok(ConflictRecord {
        step,
        sim_sum_oracle: cosine(&sum.vector, &oracle.vector)?,
        sim_ssl_cls: cosine(&ssl, &cls.vector)?,
        sim_ssl_oracle: cosine(&ssl, &oracle.vector)?,
        mean_batch_skewness: batch.mean_skewness(),
    })
}

/// Fixed probe panel for conflict instrumentation.
///
/// Snapshots taken on the training batch inherit all of its sampling noise
/// (class mix, rotation draws, member draws), which swamps the model-state
/// signal the conflict series is after. The panel pins the measurement: a
/// deterministic subset of each domain, every quarter-turn of every member
/// in the SSL losses, and the full target subset as the oracle batch. Audit
/// records are then smooth functions of the parameters and replayable from a
/// checkpoint alone.
#[derive(Debug, Clone)]
pub struct ProbePanel {
    pub source: Vec<crate::pointcloud::PointCloud>,
    pub target: Vec<crate::pointcloud::PointCloud>,
    pub alpha: f64,
}

impl ProbePanel {
    /// Deterministic panel: up to `max_per_domain` members per domain,
    /// strided across each dataset (datasets are class-ordered, so striding
    /// keeps classes balanced).
    pub fn build(
        source: &crate::pointcloud::DomainDataset,
        target: &crate::pointcloud::DomainDataset,
        max_per_domain: usize,
        alpha: f64,
    ) -> Self {
        let pick = |ds: &crate::pointcloud::DomainDataset| -> Vec<crate::pointcloud::PointCloud> {
            let stride = ds.len().div_ceil(max_per_domain).max(1);
            ds.samples.iter().step_by(stride).cloned().collect()
        };
        ProbePanel { source: pick(source), target: pick(target), alpha }
    }

    /// The panel as a step batch: rotation-complete SSL sets, all lambdas
    /// set, the target subset as oracle batch. `records` holds fresh
    /// skewness measurements of the source members under the given params.
    pub fn step_batch(&self, params: &ModelParams) -> Result<StepBatch> {
        let source_cls: Vec<ClsExample> = self
            .source
            .iter()
            .map(|pc| ClsExample {
                points: pc.points.clone(),
                label: pc.visible_label().expect("panel source labels are visible"),
                sample_id: pc.id,
            })
            .collect();
        let rotation_complete = |clouds: &[crate::pointcloud::PointCloud]| -> Vec<model::SslSample> {
            clouds
                .iter()
                .flat_map(|pc| {
                    (0..model::ROTATION_CLASSES).map(|k| model::SslSample {
                        rotated_points: model::rotate_z_quarter(&pc.points, k),
                        rotation_label: k,
                        sample_id: pc.id,
                    })
                })
                .collect()
        };
        let source_ssl = rotation_complete(&self.source);
        let target_ssl = rotation_complete(&self.target);
        let measured: Vec<(&crate::pointcloud::PointCloud, usize)> = self
            .source
            .iter()
            .map(|pc| (pc, pc.visible_label().expect("panel source labels are visible")))
            .collect();
        let records = crate::selection::measure_batch(params, &measured, self.alpha)?;
        let record_lambdas = vec![true; records.len()];
        let lambda_source = vec![true; source_ssl.len()];
        let lambda_target = vec![true; target_ssl.len()];
        Ok(StepBatch {
            source_cls,
            target_cls: Vec::new(),
            source_ssl,
            target_ssl,
            lambda_source,
            lambda_target,
            tau: None,
            records,
            record_lambdas,
            target_originals: self.target.clone(),
        })
    }

    /// One audit record at the current parameters.
    pub fn conflict_record(
        &self,
        params: &ModelParams,
        step: usize,
        weights: LossWeights,
    ) -> Result<ConflictRecord> {
        let batch = self.step_batch(params)?;
        conflict_record(params, &batch, step, weights)
    }
}

/// Measure skewness records for plain classification examples (used when a
/// mode without a measurer is audited).
pub fn measure_cls_examples(
    params: &ModelParams,
    examples: &[ClsExample],
    alpha: f64,
) -> Result<Vec<crate::selection::SkewnessRecord>> {
    use crate::pointcloud::{Domain, PointCloud};
    let clouds: Vec<PointCloud> = examples
        .iter()
        .map(|ex| PointCloud::new(ex.points.clone(), ex.label, Domain::Source, ex.sample_id))
        .collect();
    let batch: Vec<(&PointCloud, usize)> = clouds.iter().map(|pc| (pc, pc.visible_label().unwrap())).collect();
    crate::selection::measure_batch(params, &batch, alpha)
}

pub const CONFLICT_CSV_HEADER: [&str; 5] =
    ["step", "sim_sum_oracle", "sim_ssl_cls", "sim_ssl_oracle", "mean_skewness"];

pub fn write_conflict_csv(records: &[ConflictRecord], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.sim_sum_oracle.to_string(),
                r.sim_ssl_cls.to_string(),
                r.sim_ssl_oracle.to_string(),
                r.mean_batch_skewness.to_string(),
            ]
        })
        .collect();
    csvio::write_csv(path, &CONFLICT_CSV_HEADER, &rows)
}

pub fn read_conflict_csv(path: &Path) -> Result<Vec<ConflictRecord>> {
    let table = csvio::read_csv(path)?;
    let step = table.f64_column("step")?;
    let sum_oracle = table.f64_column("sim_sum_oracle")?;
    let ssl_cls = table.f64_column("sim_ssl_cls")?;
    let ssl_oracle = table.f64_column("sim_ssl_oracle")?;
    let skew = table.f64_column("mean_skewness")?;
    Ok((0..step.len())
        .map(|i| ConflictRecord {
            step: step[i] as usize,
            sim_sum_oracle: sum_oracle[i],
            sim_ssl_cls: ssl_cls[i],
            sim_ssl_oracle: ssl_oracle[i],
            mean_batch_skewness: skew[i],
        })
        .collect())
}

// ── Random-freezing pilot ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotRow {
    pub mode: String,
    pub seed: u64,
    pub target_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotSummary {
    pub mode: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotTable {
    pub rows: Vec<PilotRow>,
    pub summaries: Vec<PilotSummary>,
}

impl PilotTable {
    pub fn mean_for(&self, mode: &str) -> Option<f64> {
        self.summaries.iter().find(|s| s.mode == mode).map(|s| s.mean)
    }
}

pub fn summarize_pilot(rows: &[PilotRow]) -> Vec<PilotSummary> {
    let mut modes: Vec<String> = rows.iter().map(|r| r.mode.clone()).collect();
    modes.dedup();
    modes
        .into_iter()
        .map(|mode| {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.target_accuracy)
                .collect();
            let mean = crate::stats::mean(&accs);
            let std = crate::stats::population_variance(&accs).sqrt();
            PilotSummary { mode, mean, std, runs: accs.len() }
        })
        .collect()
}

/// Run {all, random-freeze(0.5), sm-dsb} over the same seeds and benchmark
/// configuration and tabulate final target accuracy per run.
pub fn pilot_random_freeze(base: &PipelineConfig, seeds: &[u64]) -> Result<PilotTable> {
    if seeds.len() < 5 {
        return Err(Error::config("seeds", "pilot needs at least 5 seeds"));
    }
    let modes = [SelectionMode::All, SelectionMode::RandomFreeze(0.5), SelectionMode::SmDsb];
    let mut rows = Vec::new();
    for &mode in &modes {
        for &seed in seeds {
            let mut cfg = base.clone().with_seed(seed);
            cfg.train.selection_mode = mode;
            let result = run_pipeline(&cfg)?;
            rows.push(PilotRow {
                mode: mode.to_string(),
                seed,
                target_accuracy: result.eval_target.accuracy,
            });
        }
    }
    let summaries = summarize_pilot(&rows);
    Ok(PilotTable { rows, summaries })
}

pub const PILOT_CSV_HEADER: [&str; 3] = ["mode", "seed", "target_accuracy"];

pub fn write_pilot_csv(table: &PilotTable, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| vec![r.mode.clone(), r.seed.to_string(), r.target_accuracy.to_string()])
        .collect();
    csvio::write_csv(path, &PILOT_CSV_HEADER, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_ssl_sample, ModelDims};
    use crate::pointcloud::{generate_shape, Domain, PointCloud};
    use crate::rng::Rng;

    fn snapshot(v: &[f64], task: TaskKind) -> GradientSnapshot {
        GradientSnapshot { task, vector: v.to_vec(), step: 0 }
    }

    #[test]
    fn cosine_basics() {
        let v = [1.0, 2.0, -0.5];
        let a = snapshot(&v, TaskKind::Cls);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let b = snapshot(&neg, TaskKind::Sum);
        assert!((cosine_similarity(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        let e1 = snapshot(&[1.0, 0.0, 0.0], TaskKind::Oracle);
        let e2 = snapshot(&[0.0, 1.0, 0.0], TaskKind::Oracle);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let zero = snapshot(&[0.0, 0.0, 0.0], TaskKind::Oracle);
        assert_eq!(cosine_similarity(&a, &zero).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn toy_batch(params_seed: u64) -> (ModelParams, StepBatch) {
        let dims = ModelDims { hidden: 6, feature: 10, classes: 4, rotations: 4 };
        let params = ModelParams::init(dims, &mut Rng::new(params_seed)).unwrap();
        let mut source: Vec<PointCloud> = (0..3)
            .map(|i| {
                let mut pc = generate_shape(i % 4, 16, 40 + i as u64).unwrap();
                pc.id = i as u64;
                pc
            })
            .collect();
        for pc in &mut source {
            *pc = PointCloud::new(pc.points.clone(), pc.visible_label().unwrap(), Domain::Source, pc.id);
        }
        let target: Vec<PointCloud> = (0..3)
            .map(|i| {
                let pc = generate_shape((i + 1) % 4, 16, 80 + i as u64).unwrap();
                PointCloud::with_hidden_label(pc.points.clone(), (i + 1) % 4, Domain::Target, 100 + i as u64)
            })
            .collect();
        let source_cls: Vec<ClsExample> = source
            .iter()
            .map(|pc| ClsExample {
                points: pc.points.clone(),
                label: pc.visible_label().unwrap(),
                sample_id: pc.id,
            })
            .collect();
        let source_ssl = source.iter().enumerate().map(|(i, pc)| make_ssl_sample(pc, i as u64)).collect();
        let target_ssl = target.iter().enumerate().map(|(i, pc)| make_ssl_sample(pc, 10 + i as u64)).collect();
        let batch = StepBatch {
            source_cls,
            target_cls: Vec::new(),
            source_ssl,
            target_ssl,
            lambda_source: vec![true, false, true],
            lambda_target: vec![true, true, true],
            tau: None,
            records: Vec::new(),
            record_lambdas: Vec::new(),
            target_originals: target,
        };
        (params, batch)
    }

    #[test]
    fn sum_snapshot_is_linear_in_tasks() {
        let (params, batch) = toy_batch(3);
        let w = [1.0, 1.0, 1.0];
        let cls = grad_for_task(&params, &batch, TaskKind::Cls, w, 0).unwrap();
        let ssl_s = grad_for_task(&params, &batch, TaskKind::SslSource, w, 0).unwrap();
        let ssl_t = grad_for_task(&params, &batch, TaskKind::SslTarget, w, 0).unwrap();
        let sum = grad_for_task(&params, &batch, TaskKind::Sum, w, 0).unwrap();
        for i in 0..sum.vector.len() {
            let composed = cls.vector[i] + ssl_s.vector[i] + ssl_t.vector[i];
            assert!(
                (sum.vector[i] - composed).abs() < 1e-10,
                "component {i}: {} vs {composed}",
                sum.vector[i]
            );
        }
    }

    #[test]
    fn masked_out_ssl_gives_zero_vector() {
        let (params, mut batch) = toy_batch(5);
        batch.lambda_source = vec![false, false, false];
        let snap = grad_for_task(&params, &batch, TaskKind::SslSource, [1.0; 3], 0).unwrap();
        assert!(snap.vector.iter().all(|&v| v == 0.0));
        assert_eq!(snap.vector.len(), params.encoder_parameter_count());
    }

    #[test]
    fn snapshot_matches_finite_difference_on_one_weight() {
        // Perturb a single encoder weight and difference the cls loss.
        let (params, batch) = toy_batch(7);
        let w = [1.0, 1.0, 1.0];
        let snap = grad_for_task(&params, &batch, TaskKind::Cls, w, 0).unwrap();

        let loss_of = |p: &ModelParams| {
            let mut g = Graph::new();
            let bm = bind(p, &mut g, false).unwrap();
            let l = combined_loss(
                &mut g,
                &bm,
                &batch.source_cls,
                &[],
                &[],
                &[],
                &[],
                &[],
                w,
            )
            .unwrap();
            g.scalar_value(l.cls)
        };
        let h = 1e-5;
        for idx in [0usize, 3, 10] {
            let mut plus = params.clone();
            plus.encoder[0].weight[idx] += h;
            let mut minus = params.clone();
            minus.encoder[0].weight[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (snap.vector[idx] - fd).abs() / (snap.vector[idx].abs() + 1e-12);
            assert!(rel < 1e-4, "weight {idx}: {} vs {fd}", snap.vector[idx]);
        }
    }

    #[test]
    fn oracle_snapshot_reads_labels_under_permit_only() {
        let (params, batch) = toy_batch(11);
        label_audit::reset();
        let before = label_audit::violation_count();
        let _ = grad_for_task(&params, &batch, TaskKind::Oracle, [1.0; 3], 0).unwrap();
        assert_eq!(label_audit::violation_count(), before);
    }

    #[test]
    fn conflict_record_bounds() {
        let (params, batch) = toy_batch(13);
        let rec = conflict_record(&params, &batch, 4, [1.0; 3]).unwrap();
        for v in [rec.sim_sum_oracle, rec.sim_ssl_cls, rec.sim_ssl_oracle] {
            assert!((-1.0..=1.0).contains(&v), "similarity {v} out of range");
        }
        assert_eq!(rec.step, 4);
    }

    #[test]
    fn conflict_csv_round_trip() {
        let records = vec![
            ConflictRecord {
                step: 0,
                sim_sum_oracle: 0.25,
                sim_ssl_cls: -0.125,
                sim_ssl_oracle: 0.0625,
                mean_batch_skewness: 1.5,
            },
            ConflictRecord {
                step: 25,
                sim_sum_oracle: -0.5,
                sim_ssl_cls: 0.75,
                sim_ssl_oracle: -0.0078125,
                mean_batch_skewness: 0.3333333333333333,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conflict.csv");
        write_conflict_csv(&records, &path).unwrap();
        let back = read_conflict_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].step, 25);
        assert_eq!(back[1].sim_ssl_oracle, records[1].sim_ssl_oracle);
        assert_eq!(back[1].mean_batch_skewness, records[1].mean_batch_skewness);
    }

    #[test]
    fn pilot_summary_aggregates_by_mode() {
        let rows = vec![
            PilotRow { mode: "all".into(), seed: 1, target_accuracy: 0.8 },
            PilotRow { mode: "all".into(), seed: 2, target_accuracy: 0.6 },
            PilotRow { mode: "sm-dsb".into(), seed: 1, target_accuracy: 0.9 },
        ];
        let sums = summarize_pilot(&rows);
        assert_eq!(sums.len(), 2);
        assert!((sums[0].mean - 0.7).abs() < 1e-12);
        assert!((sums[0].std - 0.1).abs() < 1e-12);
        assert_eq!(sums[1].runs, 1);
    }

    #[test]
    fn pilot_requires_five_seeds() {
        let cfg = PipelineConfig {
            train: Default::default(),
            dims: ModelDims::default(),
            benchmark: crate::pointcloud::BenchmarkSpec {
                class_count: 4,
                points_per_cloud: 16,
                source_per_class: 2,
                target_per_class: 2,
                shift: Default::default(),
                seed: 1,
            },
            diagnostics_stride: 0,
            diagnostics_warmup: 0,
            diagnostics_panel: 48,
            eval_stride: 0,
        };
        assert!(pilot_random_freeze(&cfg, &[1, 2]).is_err());
    }
}
