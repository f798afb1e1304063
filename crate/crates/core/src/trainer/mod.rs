//! Two-stage multi-task training for unsupervised domain adaptation.
//!
//! Stage 1 trains jointly: cross-entropy on labeled source data plus the
//! rotation pretext task on both domains, with the selector gating which
//! source samples join the SSL loss. Pseudo-labels for the target domain come
//! from the stage-1 model's most confident predictions. Stage 2 fine-tunes
//! with source labels and target pseudo-labels; the measurer then scores both
//! domains and pseudo-labeled target scores are perturbed before selection.
//!
//! Everything is driven by two splitmix streams: `main` (init, batch
//! assembly, rotations) and `select` (freeze masks, perturbation seeds), so
//! selection modes can differ while batches stay identical. State at a step
//! boundary is exactly (params, rng states, optimizer moments), which is
//! what checkpoints capture and why resumed runs are bit-identical.

pub mod checkpoint;

use crate::autodiff::Graph;
use crate::diagnostics::{self, ConflictRecord};
use crate::error::{Error, Result};
use crate::model::{
    self, bind, combined_loss, make_ssl_sample, ClsExample, LossWeights, ModelDims, ModelParams,
    SslSample,
};
use crate::pointcloud::{label_audit, BenchmarkSpec, DomainDataset, PointCloud};
use crate::rng::{derive_seed, Rng};
use crate::selection::{self, SkewnessRecord};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};

const MAIN_STREAM: u64 = 0x4d41_494e;
const SELECT_STREAM: u64 = 0x5345_4c45;
const DATA_STREAM: u64 = 0x4441_5441;

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    /// Skewness-scored adaptive selection.
    SmDsb,
    /// Every sample joins the SSL loss.
    All,
    /// Freeze the SSL loss for a uniformly random fraction of the batch.
    RandomFreeze(f64),
    /// SSL disabled entirely.
    None,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionMode::SmDsb => write!(f, "sm-dsb"),
            SelectionMode::All => write!(f, "all"),
            SelectionMode::None => write!(f, "none"),
            SelectionMode::RandomFreeze(p) => write!(f, "random-freeze:{p}"),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sm-dsb" => Ok(SelectionMode::SmDsb),
            "all" => Ok(SelectionMode::All),
            "none" => Ok(SelectionMode::None),
            _ => {
                if let Some(rest) = s.strip_prefix("random-freeze") {
                    let p = match rest.strip_prefix(':') {
                        None if rest.is_empty() => 0.5,
                        Some(v) => v.parse::<f64>().map_err(|_| {
                            Error::config("selection_mode", format!("bad freeze fraction `{v}`"))
                        })?,
                        _ => {
                            return Err(Error::config("selection_mode", format!("unknown mode `{s}`")))
                        }
                    };
                    Ok(SelectionMode::RandomFreeze(p))
                } else {
                    Err(Error::config("selection_mode", format!("unknown mode `{s}`")))
                }
            }
        }
    }
}

impl Serialize for SelectionMode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SelectionMode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Saliency rescaling exponent.
    pub alpha: f64,
    /// Selection ratio.
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub seed: u64,
    /// Mean of the Gaussian added to pseudo-labeled target skewness scores.
    pub perturb_mu: f64,
    pub perturb_sigma: f64,
    pub selection_mode: SelectionMode,
    /// Plain SGD by default; Adam kept behind configuration.
    pub optimizer: OptimizerKind,
    /// Keep the high-skewness side instead of excluding it (the alternative
    /// reading of the selector rule; off by default).
    pub invert_selection: bool,
    /// Weights for (classification, source SSL, target SSL).
    pub loss_weights: LossWeights,
    /// Drop pseudo-labels below this confidence in stage 2.
    pub pseudo_confidence_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.7,
            learning_rate: 0.05,
            batch_size: 32,
            steps_stage1: 4000,
            steps_stage2: 2000,
            seed: 7,
            perturb_mu: 0.1,
            perturb_sigma: 0.02,
            selection_mode: SelectionMode::SmDsb,
            optimizer: OptimizerKind::Sgd,
            invert_selection: false,
            loss_weights: [1.0, 1.0, 1.0],
            pseudo_confidence_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("beta", "must be in (0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be >= 2"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be > 0"));
        }
        if !(self.perturb_sigma >= 0.0) {
            return Err(Error::config("perturb_sigma", "must be >= 0"));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss_weights", "must be finite and >= 0"));
        }
        if let SelectionMode::RandomFreeze(p) = self.selection_mode {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("selection_mode", "freeze fraction must be in [0, 1]"));
            }
        }
        if let Some(t) = self.pseudo_confidence_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("pseudo_confidence_threshold", "must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

// ── Gradients and SGD ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients per layer in canonical order (encoder, cls head, ssl head).
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

pub fn extract_grads(g: &Graph, bm: &model::BoundModel) -> ParamGrads {
    let layers = bm
        .layers()
        .map(|l| LayerGrads {
            weight: g.grad(l.weight).map(|s| s.to_vec()).unwrap_or_else(|| {
                let (r, c) = g.shape(l.weight);
                vec![0.0; r * c]
            }),
            bias: g.grad(l.bias).map(|s| s.to_vec()).unwrap_or_else(|| {
                let (r, c) = g.shape(l.bias);
                vec![0.0; r * c]
            }),
        })
        .collect();
    ParamGrads { layers }
}

/// Plain SGD: p <- p - lr * g.
pub fn sgd_step(params: &mut ModelParams, grads: &ParamGrads, lr: f64) -> Result<()> {
    let mut layers = params.layers_mut();
    if layers.len() != grads.layers.len() {
        return Err(Error::LengthMismatch {
            what: "sgd layers",
            left: layers.len(),
            right: grads.layers.len(),
        });
    }
    for (layer, grad) in layers.iter_mut().zip(&grads.layers) {
        if layer.weight.len() != grad.weight.len() || layer.bias.len() != grad.bias.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: vec![layer.weight.len(), layer.bias.len()],
                right: vec![grad.weight.len(), grad.bias.len()],
            });
        }
        for (p, g) in layer.weight.iter_mut().zip(&grad.weight) {
            *p -= lr * g;
        }
        for (p, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *p -= lr * g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates per layer, same shapes as the gradients.
/// Empty until the first Adam step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub updates: usize,
    pub m: Vec<LayerMoments>,
    pub v: Vec<LayerMoments>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerMoments {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn ensure_moments(state: &mut OptimizerState, grads: &ParamGrads) {
    if state.m.len() != grads.layers.len() {
        state.m = grads
            .layers
            .iter()
            .map(|g| LayerMoments { weight: vec![0.0; g.weight.len()], bias: vec![0.0; g.bias.len()] })
            .collect();
        state.v = state.m.clone();
    }
}

/// Apply one optimizer update in place.
pub fn optimizer_step(
    kind: OptimizerKind,
    params: &mut ModelParams,
    grads: &ParamGrads,
    lr: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    match kind {
        OptimizerKind::Sgd => sgd_step(params, grads, lr),
        OptimizerKind::Adam => {
            ensure_moments(state, grads);
            state.updates += 1;
            let t = state.updates as i32;
            let bias1 = 1.0 - ADAM_BETA1.powi(t);
            let bias2 = 1.0 - ADAM_BETA2.powi(t);
            let mut layers = params.layers_mut();
            if layers.len() != grads.layers.len() {
                return Err(Error::LengthMismatch {
                    what: "adam layers",
                    left: layers.len(),
                    right: grads.layers.len(),
                });
            }
            for (i, layer) in layers.iter_mut().enumerate() {
                let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for j in 0..p.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let m_hat = m[j] / bias1;
                        let v_hat = v[j] / bias2;
                        p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                };
                update(
                    &mut layer.weight,
                    &grads.layers[i].weight,
                    &mut state.m[i].weight,
                    &mut state.v[i].weight,
                );
                update(
                    &mut layer.bias,
                    &grads.layers[i].bias,
                    &mut state.m[i].bias,
                    &mut state.v[i].bias,
                );
            }
            Ok(())
        }
    }
}

// ── Step batches ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn index(&self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Everything one optimization step consumes, fixed before any gradient
/// work; diagnostics recompute task losses from the same batch.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub source_cls: Vec<ClsExample>,
    /// Pseudo-labeled target classification examples (stage 2 only).
    pub target_cls: Vec<ClsExample>,
    pub source_ssl: Vec<SslSample>,
    pub target_ssl: Vec<SslSample>,
    pub lambda_source: Vec<bool>,
    pub lambda_target: Vec<bool>,
    pub tau: Option<f64>,
    /// Skewness records the selector consumed this step (empty outside
    /// sm-dsb mode).
    pub records: Vec<SkewnessRecord>,
    /// Selector verdict aligned with `records`.
    pub record_lambdas: Vec<bool>,
    /// Unrotated target batch members; the oracle gradient reads their
    /// hidden labels under audit.
    pub target_originals: Vec<PointCloud>,
}

impl StepBatch {
    pub fn retained_count(&self) -> usize {
        self.lambda_source.iter().chain(&self.lambda_target).filter(|&&l| l).count()
    }

    pub fn mean_skewness(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.skewness).sum::<f64>() / self.records.len() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoLabel {
    pub sample_id: u64,
    pub label: usize,
    pub confidence: f64,
}

/// Assemble one step's batch: sample both domains, draw pretext rotations,
/// and build the SSL participation masks for the configured selection mode.
#[allow(clippy::too_many_arguments)]
pub fn assemble_step(
    cfg: &TrainConfig,
    stage: Stage,
    params: &ModelParams,
    source: &DomainDataset,
    target: &DomainDataset,
    pseudo: Option<&[PseudoLabel]>,
    rng_main: &mut Rng,
    rng_select: &mut Rng,
) -> Result<StepBatch> {
    let b = cfg.batch_size;
    // Source batches are class-balanced (labels are known there); per-class
    // saliency skewness differs a lot, so unbalanced batches would make the
    // batch-mean skewness track composition instead of model state. Target
    // labels are hidden, so the target batch stays uniform.
    let src_idx = balanced_indices(source, b, rng_main);
    let tgt_idx = rng_main.sample_indices(target.len(), b);

    let source_cls: Vec<ClsExample> = src_idx
        .iter()
        .map(|&i| {
            let pc = &source.samples[i];
            ClsExample {
                points: pc.points.clone(),
                label: pc.visible_label().expect("source labels are visible"),
                sample_id: pc.id,
            }
        })
        .collect();

    let source_ssl: Vec<SslSample> = src_idx
        .iter()
        .map(|&i| make_ssl_sample(&source.samples[i], rng_main.next_u64()))
        .collect();
    let target_ssl: Vec<SslSample> = tgt_idx
        .iter()
        .map(|&i| make_ssl_sample(&target.samples[i], rng_main.next_u64()))
        .collect();

    let target_originals: Vec<PointCloud> = tgt_idx.iter().map(|&i| target.samples[i].clone()).collect();

    // Pseudo-labels for the sampled target batch (stage 2).
    let target_pseudo: Vec<Option<&PseudoLabel>> = match (stage, pseudo) {
        (Stage::Two, Some(labels)) => target_originals
            .iter()
            .map(|pc| labels.iter().find(|pl| pl.sample_id == pc.id))
            .collect(),
        _ => vec![None; target_originals.len()],
    };
    let target_cls: Vec<ClsExample> = target_originals
        .iter()
        .zip(&target_pseudo)
        .filter_map(|(pc, pl)| {
            pl.and_then(|pl| {
                let confident = cfg.pseudo_confidence_threshold.map_or(true, |t| pl.confidence >= t);
                confident.then(|| ClsExample {
                    points: pc.points.clone(),
                    label: pl.label,
                    sample_id: pc.id,
                })
            })
        })
        .collect();

    let measure_source = |params: &ModelParams| -> Result<Vec<SkewnessRecord>> {
        let batch: Vec<(&PointCloud, usize)> = src_idx
            .iter()
            .map(|&i| {
                let pc = &source.samples[i];
                (pc, pc.visible_label().expect("source labels are visible"))
            })
            .collect();
        selection::measure_batch(params, &batch, cfg.alpha)
    };
    // Stage-2 measurement of the target side uses pseudo-labels, never the
    // hidden ground truth.
    let measure_target = |params: &ModelParams| -> Result<Vec<SkewnessRecord>> {
        let batch: Vec<(&PointCloud, usize)> = target_originals
            .iter()
            .zip(&target_pseudo)
            .filter_map(|(pc, pl)| pl.map(|pl| (pc, pl.label)))
            .collect();
        selection::measure_batch(params, &batch, cfg.alpha)
    };

    let n_src = source_ssl.len();
    let n_tgt = target_ssl.len();
    let (lambda_source, lambda_target, tau, records, record_lambdas) = match cfg.selection_mode {
        SelectionMode::All => (vec![true; n_src], vec![true; n_tgt], None, Vec::new(), Vec::new()),
        SelectionMode::None => (vec![false; n_src], vec![false; n_tgt], None, Vec::new(), Vec::new()),
        SelectionMode::RandomFreeze(p) => {
            let total = n_src + n_tgt;
            let k = ((total as f64) * p).floor() as usize;
            let mut lambdas = vec![true; total];
            for idx in rng_select.sample_indices(total, k) {
                lambdas[idx] = false;
            }
            let lambda_target = lambdas.split_off(n_src);
            (lambdas, lambda_target, None, Vec::new(), Vec::new())
        }
        SelectionMode::SmDsb => match stage {
            // Stage 1: the selector sees only source scores; the target side
            // has no labels yet and every target sample participates.
            Stage::One => {
                let records = measure_source(params)?;
                let mask = selection::select_with(&records, cfg.beta, cfg.invert_selection)?;
                (mask.lambdas.clone(), vec![true; n_tgt], Some(mask.tau), records, mask.lambdas)
            }
            // Stage 2: source and pseudo-labeled target scores share one
            // threshold; target scores are perturbed first.
            Stage::Two => {
                let src_records = measure_source(params)?;
                let tgt_records = measure_target(params)?;
                let perturb_seed = rng_select.next_u64();
                let tgt_records =
                    selection::perturb_target_scores(&tgt_records, perturb_seed, cfg.perturb_mu, cfg.perturb_sigma);
                let mut records = src_records;
                let measured_tgt = tgt_records.len();
                records.extend(tgt_records);
                let mask = selection::select_with(&records, cfg.beta, cfg.invert_selection)?;
                let (src_l, tgt_l) = mask.lambdas.split_at(n_src);
                // Target samples without a pseudo-label (confidence-filtered)
                // were never measured; they stay in the SSL loss.
                let mut lambda_target = vec![true; n_tgt];
                let mut it = tgt_l.iter();
                for (slot, pl) in lambda_target.iter_mut().zip(&target_pseudo) {
                    if pl.is_some() {
                        *slot = *it.next().expect("one lambda per measured target");
                    }
                }
                debug_assert_eq!(measured_tgt, tgt_l.len());
                (src_l.to_vec(), lambda_target, Some(mask.tau), records, mask.lambdas)
            }
        },
    };

    Ok(StepBatch {
        source_cls,
        target_cls,
        source_ssl,
        target_ssl,
        lambda_source,
        lambda_target,
        tau,
        records,
        record_lambdas,
        target_originals,
    })
}

/// Class-balanced sampling without replacement: an equal quota per class,
/// remainder slots going to a random subset of classes.
fn balanced_indices(dataset: &DomainDataset, batch: usize, rng: &mut Rng) -> Vec<usize> {
    let k = dataset.class_count;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, pc) in dataset.samples.iter().enumerate() {
        if let Some(label) = pc.visible_label() {
            by_class[label].push(i);
        }
    }
    if by_class.iter().any(|pool| pool.is_empty()) {
        // Not every class represented; fall back to uniform sampling.
        return rng.sample_indices(dataset.len(), batch);
    }
    let quota = batch / k;
    let remainder = batch % k;
    let extra_classes = rng.sample_indices(k, remainder);
    let mut out = Vec::with_capacity(batch);
    for (class, pool) in by_class.iter().enumerate() {
        let want = quota + usize::from(extra_classes.contains(&class));
        for pick in rng.sample_indices(pool.len(), want.min(pool.len())) {
            out.push(pool[pick]);
        }
    }
    out
}

// ── Logging ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "L_c_s")]
    pub l_cls: f64,
    #[serde(rename = "L_ssl_s")]
    pub l_ssl_source: f64,
    #[serde(rename = "L_ssl_t")]
    pub l_ssl_target: f64,
    pub retained_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_sum_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_ssl_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_ssl_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_skewness: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingLog { records })
    }
}

// ── The training loop ────────────────────────────────────────────────────

/// One measurer verdict, retained for the skewness stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkewnessRow {
    pub step: usize,
    pub stage: u8,
    #[serde(flatten)]
    pub record: SkewnessRecord,
    pub retained: bool,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub params: ModelParams,
    pub rng: RngState,
    pub optimizer: OptimizerState,
    pub log: TrainingLog,
    pub conflicts: Vec<ConflictRecord>,
    pub skewness: Vec<SkewnessRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct DiagnosticsOptions {
    /// Record a conflict snapshot every `stride` steps (0 disables).
    pub stride: usize,
    /// First audited step; earlier steps are the random-init transient.
    pub warmup: usize,
    /// Probe-panel size per domain; 0 audits the live training batch
    /// instead.
    pub panel_size: usize,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        DiagnosticsOptions { stride: 0, warmup: 0, panel_size: 0 }
    }
}

impl DiagnosticsOptions {
    pub fn with_stride(stride: usize) -> Self {
        DiagnosticsOptions { stride, ..Default::default() }
    }

    fn audits(&self, step: usize) -> bool {
        // Audit points sit at the end of each stride window, so a stride
        // longer than the run produces no records.
        self.stride > 0 && step >= self.warmup && (step - self.warmup + 1) % self.stride == 0
    }
}

struct LoopState<'a> {
    params: ModelParams,
    optimizer: OptimizerState,
    rng_main: Rng,
    rng_select: Rng,
    source: &'a DomainDataset,
    target: &'a DomainDataset,
    pseudo: Option<&'a [PseudoLabel]>,
}

#[allow(clippy::too_many_arguments)]
fn run_steps(
    cfg: &TrainConfig,
    stage: Stage,
    state: &mut LoopState<'_>,
    from_step: usize,
    to_step: usize,
    diag: DiagnosticsOptions,
    panel: Option<&diagnostics::ProbePanel>,
    log: &mut TrainingLog,
    conflicts: &mut Vec<ConflictRecord>,
    skewness: &mut Vec<SkewnessRow>,
    mut on_step: Option<&mut dyn FnMut(usize, &ModelParams)>,
) -> Result<()> {
    for step in from_step..to_step {
        let batch = assemble_step(
            cfg,
            stage,
            &state.params,
            state.source,
            state.target,
            state.pseudo,
            &mut state.rng_main,
            &mut state.rng_select,
        )
        .map_err(|e| match e {
            // A blown-up model surfaces first in the measurer's saliency
            // pass; report it as divergence with the step index.
            Error::NonFiniteSaliency { .. } => Error::Diverged { step },
            other => other,
        })?;
        for (record, &retained) in batch.records.iter().zip(&batch.record_lambdas) {
            skewness.push(SkewnessRow { step, stage: stage.index(), record: record.clone(), retained });
        }

        let conflict = if diag.audits(step) {
            // Panel instrument when configured; otherwise snapshot the live
            // training batch (masks included).
            let rec = match panel {
                Some(panel) => panel.conflict_record(&state.params, step, cfg.loss_weights)?,
                None if batch.records.is_empty() => {
                    // Modes without a measurer still need the skewness side
                    // of the record; measure the source batch on the spot.
                    let mut audited = batch.clone();
                    audited.records =
                        diagnostics::measure_cls_examples(&state.params, &batch.source_cls, cfg.alpha)?;
                    diagnostics::conflict_record(&state.params, &audited, step, cfg.loss_weights)?
                }
                None => diagnostics::conflict_record(&state.params, &batch, step, cfg.loss_weights)?,
            };
            conflicts.push(rec.clone());
            Some(rec)
        } else {
            None
        };

        let mut g = Graph::new();
        let bm = bind(&state.params, &mut g, true)?;
        let loss = combined_loss(
            &mut g,
            &bm,
            &batch.source_cls,
            &batch.target_cls,
            &batch.source_ssl,
            &batch.target_ssl,
            &batch.lambda_source,
            &batch.lambda_target,
            cfg.loss_weights,
        )?;
        let l_total = g.scalar_value(loss.total);
        if !l_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        g.backward(loss.total)?;
        let grads = extract_grads(&g, &bm);
        let record = StepRecord {
            step,
            stage: stage.index(),
            l_total,
            l_cls: g.scalar_value(loss.cls),
            l_ssl_source: g.scalar_value(loss.ssl_source),
            l_ssl_target: g.scalar_value(loss.ssl_target),
            retained_count: batch.retained_count(),
            tau: batch.tau,
            sim_sum_oracle: conflict.as_ref().map(|c| c.sim_sum_oracle),
            sim_ssl_cls: conflict.as_ref().map(|c| c.sim_ssl_cls),
            sim_ssl_oracle: conflict.as_ref().map(|c| c.sim_ssl_oracle),
            mean_skewness: conflict.as_ref().map(|c| c.mean_batch_skewness),
        };
        optimizer_step(cfg.optimizer, &mut state.params, &grads, cfg.learning_rate, &mut state.optimizer)?;
        log.records.push(record);
        if let Some(cb) = on_step.as_mut() {
            cb(step, &state.params);
        }
    }
    Ok(())
}

/// Fresh stage-1 run: initialize the model from the seed and train
/// `steps_stage1` joint steps.
pub fn train_stage1(
    cfg: &TrainConfig,
    dims: ModelDims,
    source: &DomainDataset,
    target: &DomainDataset,
    diag: DiagnosticsOptions,
) -> Result<StageOutput> {
    cfg.validate()?;
    let mut rng_main = Rng::new(derive_seed(cfg.seed, MAIN_STREAM));
    let rng_select = Rng::new(derive_seed(cfg.seed, SELECT_STREAM));
    let params = ModelParams::init(dims, &mut rng_main)?;
    let panel = (diag.stride > 0 && diag.panel_size > 0)
        .then(|| diagnostics::ProbePanel::build(source, target, diag.panel_size, cfg.alpha));
    let mut state = LoopState {
        params,
        optimizer: OptimizerState::default(),
        rng_main,
        rng_select,
        source,
        target,
        pseudo: None,
    };
    let mut log = TrainingLog::default();
    let mut conflicts = Vec::new();
    let mut skewness = Vec::new();
    run_steps(
        cfg,
        Stage::One,
        &mut state,
        0,
        cfg.steps_stage1,
        diag,
        panel.as_ref(),
        &mut log,
        &mut conflicts,
        &mut skewness,
        None,
    )?;
    Ok(StageOutput {
        params: state.params,
        rng: RngState { main: state.rng_main.state(), select: state.rng_select.state() },
        optimizer: state.optimizer,
        log,
        conflicts,
        skewness,
    })
}

/// Continue a stage from checkpointed state; the (params, rng) pair fully
/// determines the remainder, so this matches an uninterrupted run bit for
/// bit.
#[allow(clippy::too_many_arguments)]
pub fn resume_stage(
    cfg: &TrainConfig,
    stage: Stage,
    params: ModelParams,
    rng: RngState,
    optimizer: OptimizerState,
    from_step: usize,
    source: &DomainDataset,
    target: &DomainDataset,
    pseudo: Option<&[PseudoLabel]>,
    diag: DiagnosticsOptions,
) -> Result<StageOutput> {
    cfg.validate()?;
    let to_step = match stage {
        Stage::One => cfg.steps_stage1,
        Stage::Two => cfg.steps_stage2,
    };
    let panel = (diag.stride > 0 && diag.panel_size > 0)
        .then(|| diagnostics::ProbePanel::build(source, target, diag.panel_size, cfg.alpha));
    let mut state = LoopState {
        params,
        optimizer,
        rng_main: Rng::from_state(rng.main),
        rng_select: Rng::from_state(rng.select),
        source,
        target,
        pseudo,
    };
    let mut log = TrainingLog::default();
    let mut conflicts = Vec::new();
    let mut skewness = Vec::new();
    run_steps(
        cfg,
        stage,
        &mut state,
        from_step,
        to_step,
        diag,
        panel.as_ref(),
        &mut log,
        &mut conflicts,
        &mut skewness,
        None,
    )?;
    Ok(StageOutput {
        params: state.params,
        rng: RngState { main: state.rng_main.state(), select: state.rng_select.state() },
        optimizer: state.optimizer,
        log,
        conflicts,
        skewness,
    })
}

/// Stage-2 fine-tuning from stage-1 parameters and pseudo-labels.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    cfg: &TrainConfig,
    params: ModelParams,
    rng: RngState,
    optimizer: OptimizerState,
    source: &DomainDataset,
    target: &DomainDataset,
    pseudo: &[PseudoLabel],
    diag: DiagnosticsOptions,
) -> Result<StageOutput> {
    resume_stage(cfg, Stage::Two, params, rng, optimizer, 0, source, target, Some(pseudo), diag)
}

// ── Pseudo-labels and evaluation ─────────────────────────────────────────

fn forward_logits(params: &ModelParams, points: &[[f64; 3]]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bm = bind(params, &mut g, false)?;
    let pts = model::points_leaf(&mut g, points, false)?;
    let feat = model::encode(&mut g, &bm, pts)?;
    let logits = model::classify(&mut g, &bm, feat)?;
    Ok(g.values(logits).to_vec())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Predict a label for every target sample from maximum softmax confidence.
/// Ties break to the lowest class index.
pub fn generate_pseudo_labels(params: &ModelParams, target: &DomainDataset) -> Result<Vec<PseudoLabel>> {
    target
        .samples
        .iter()
        .map(|pc| {
            let probs = softmax(&forward_logits(params, &pc.points)?);
            let label = argmax(&probs);
            Ok(PseudoLabel { sample_id: pc.id, label, confidence: probs[label] })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

/// Accuracy and the confusion matrix over a labeled dataset. This is one of
/// the two sanctioned readers of hidden target labels.
pub fn evaluate(params: &ModelParams, dataset: &DomainDataset) -> Result<EvalReport> {
    let k = dataset.class_count;
    let mut confusion = vec![vec![0usize; k]; k];
    label_audit::with_oracle_access(|| -> Result<()> {
        for pc in &dataset.samples {
            let logits = forward_logits(params, &pc.points)?;
            let pred = argmax(&logits);
            let truth = pc.oracle_label();
            confusion[truth][pred] += 1;
        }
        Ok(())
    })?;
    let total = dataset.len();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            let n: usize = confusion[c].iter().sum();
            if n == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / n as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        per_class,
        confusion,
        total,
    })
}

/// Fraction of pseudo-labels matching the hidden ground truth (reporting
/// only; runs under the evaluation audit permit).
pub fn pseudo_label_accuracy(pseudo: &[PseudoLabel], target: &DomainDataset) -> f64 {
    if pseudo.is_empty() {
        return 0.0;
    }
    label_audit::with_oracle_access(|| {
        let hits = pseudo
            .iter()
            .filter(|pl| {
                target
                    .samples
                    .iter()
                    .find(|s| s.id == pl.sample_id)
                    .is_some_and(|s| s.oracle_label() == pl.label)
            })
            .count();
        hits as f64 / pseudo.len() as f64
    })
}

// ── Full pipeline ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub dims: ModelDims,
    pub benchmark: BenchmarkSpec,
    /// Conflict-snapshot stride (0 disables diagnostics).
    pub diagnostics_stride: usize,
    /// First audited step.
    #[serde(default)]
    pub diagnostics_warmup: usize,
    /// Probe-panel size per domain (0 audits the live batch).
    #[serde(default)]
    pub diagnostics_panel: usize,
    /// Periodic target-accuracy evaluation stride (0 disables).
    pub eval_stride: usize,
}

impl PipelineConfig {
    pub fn diagnostics_options(&self) -> DiagnosticsOptions {
        DiagnosticsOptions {
            stride: self.diagnostics_stride,
            warmup: self.diagnostics_warmup,
            panel_size: self.diagnostics_panel,
        }
    }

    /// Tie the benchmark data seed to the training seed so one seed value
    /// reproduces the whole experiment.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.benchmark.seed = derive_data_seed(seed);
        self
    }
}

/// Benchmark data seed derived from a training seed.
pub fn derive_data_seed(seed: u64) -> u64 {
    derive_seed(seed, DATA_STREAM)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicEval {
    pub stage: u8,
    pub step: usize,
    pub target_accuracy: f64,
}

pub struct PipelineResult {
    pub params: ModelParams,
    pub stage1_params: ModelParams,
    pub final_optimizer: OptimizerState,
    pub log: TrainingLog,
    pub conflicts: Vec<ConflictRecord>,
    pub skewness: Vec<SkewnessRow>,
    pub pseudo: Vec<PseudoLabel>,
    pub pseudo_accuracy: f64,
    pub eval_source: EvalReport,
    pub eval_target: EvalReport,
    pub stage1_eval_target: EvalReport,
    pub periodic: Vec<PeriodicEval>,
    pub final_rng: RngState,
}

/// The two-step procedure end to end: stage-1 joint training, pseudo-label
/// generation, stage-2 fine-tuning, final evaluation.
pub fn run_pipeline(pc: &PipelineConfig) -> Result<PipelineResult> {
    pc.train.validate()?;
    let (source, target) = crate::pointcloud::make_uda_benchmark(&pc.benchmark)?;
    let diag = pc.diagnostics_options();
    let panel = (diag.stride > 0 && diag.panel_size > 0)
        .then(|| diagnostics::ProbePanel::build(&source, &target, diag.panel_size, pc.train.alpha));

    let mut rng_main = Rng::new(derive_seed(pc.train.seed, MAIN_STREAM));
    let rng_select = Rng::new(derive_seed(pc.train.seed, SELECT_STREAM));
    let params = ModelParams::init(pc.dims, &mut rng_main)?;

    let mut periodic = Vec::new();
    let mut log = TrainingLog::default();
    let mut conflicts = Vec::new();
    let mut skewness = Vec::new();

    let mut state = LoopState {
        params,
        optimizer: OptimizerState::default(),
        rng_main,
        rng_select,
        source: &source,
        target: &target,
        pseudo: None,
    };
    {
        let eval_stride = pc.eval_stride;
        let target_ref = &target;
        let mut hook = |step: usize, params: &ModelParams| {
            if eval_stride > 0 && (step + 1) % eval_stride == 0 {
                if let Ok(report) = evaluate(params, target_ref) {
                    periodic.push(PeriodicEval { stage: 1, step, target_accuracy: report.accuracy });
                }
            }
        };
        run_steps(
            &pc.train,
            Stage::One,
            &mut state,
            0,
            pc.train.steps_stage1,
            diag,
            panel.as_ref(),
            &mut log,
            &mut conflicts,
            &mut skewness,
            Some(&mut hook),
        )?;
    }
    let stage1_params = state.params.clone();
    let stage1_eval_target = evaluate(&stage1_params, &target)?;

    let pseudo = generate_pseudo_labels(&state.params, &target)?;
    let pseudo_accuracy = pseudo_label_accuracy(&pseudo, &target);

    state.pseudo = Some(&pseudo);
    {
        let eval_stride = pc.eval_stride;
        let target_ref = &target;
        let mut hook = |step: usize, params: &ModelParams| {
            if eval_stride > 0 && (step + 1) % eval_stride == 0 {
                if let Ok(report) = evaluate(params, target_ref) {
                    periodic.push(PeriodicEval { stage: 2, step, target_accuracy: report.accuracy });
                }
            }
        };
        run_steps(
            &pc.train,
            Stage::Two,
            &mut state,
            0,
            pc.train.steps_stage2,
            diag,
            panel.as_ref(),
            &mut log,
            &mut conflicts,
            &mut skewness,
            Some(&mut hook),
        )?;
    }

    let final_rng = RngState { main: state.rng_main.state(), select: state.rng_select.state() };
    let final_optimizer = state.optimizer;
    let params = state.params;

    let eval_source = evaluate(&params, &source)?;
    let eval_target = evaluate(&params, &target)?;
    Ok(PipelineResult {
        stage1_params,
        log,
        conflicts,
        skewness,
        pseudo,
        pseudo_accuracy,
        eval_source,
        eval_target,
        stage1_eval_target,
        periodic,
        final_rng,
        final_optimizer,
        params,
    })
}
