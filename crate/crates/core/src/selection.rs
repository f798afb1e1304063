//! The SM-DSB measurer/selector block.
//!
//! The measurer scores every batch sample by the skewness of its saliency
//! map. The selector sorts the scores ascending, takes the round(B*beta)-th
//! smallest as the adaptive threshold tau, and excludes samples with
//! skewness >= tau from the self-supervision loss (high skewness reads as
//! high estimated gradient conflict). In the fine-tuning stage,
//! pseudo-labeled target scores receive a small Gaussian perturbation before
//! thresholding to compensate for pseudo-label noise.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pointcloud::{Domain, PointCloud};
use crate::rng::{derive_seed, Rng};
use crate::saliency;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkewnessRecord {
    pub sample_id: u64,
    pub skewness: f64,
    pub domain: Domain,
    pub perturbed: bool,
}

#[derive(Debug, Clone)]
pub struct SelectionMask {
    /// lambda_b per record: true keeps the sample in the SSL loss.
    pub lambdas: Vec<bool>,
    pub tau: f64,
    pub beta: f64,
    pub records: Vec<SkewnessRecord>,
}

impl SelectionMask {
    pub fn retained_count(&self) -> usize {
        self.lambdas.iter().filter(|&&l| l).count()
    }
}

/// Score one batch: skewness of each sample's saliency map under its label
/// (ground truth on source, pseudo-label on target).
pub fn measure_batch(
    params: &ModelParams,
    batch: &[(&PointCloud, usize)],
    alpha: f64,
) -> Result<Vec<SkewnessRecord>> {
    batch
        .iter()
        .map(|(pc, label)| {
            let map = saliency::saliency_map(params, &pc.points, *label, alpha, pc.id)?;
            Ok(SkewnessRecord {
                sample_id: pc.id,
                skewness: saliency::skewness(&map.scores),
                domain: pc.domain,
                perturbed: false,
            })
        })
        .collect()
}

fn threshold(records: &[SkewnessRecord], beta: f64) -> Result<f64> {
    let b = records.len();
    if b < 2 {
        return Err(Error::BatchTooSmall { minimum: 2, got: b });
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::config("beta", "must be in (0, 1]"));
    }
    let mut sorted: Vec<f64> = records.iter().map(|r| r.skewness).collect();
    sorted.sort_by(f64::total_cmp);
    // round-half-up, 1-indexed, clamped into [1, B]
    let rank = ((b as f64) * beta).round() as usize;
    let rank = rank.clamp(1, b);
    Ok(sorted[rank - 1])
}

/// Selector: lambda_b = 0 iff sk_b >= tau, ties at tau all excluded.
pub fn select(records: &[SkewnessRecord], beta: f64) -> Result<SelectionMask> {
    select_with(records, beta, false)
}

/// `invert` keeps the high-skewness side instead (lambda_b = 1 iff
/// sk_b >= tau); retained for experimentation, not the default reading.
pub fn select_with(records: &[SkewnessRecord], beta: f64, invert: bool) -> Result<SelectionMask> {
    let tau = threshold(records, beta)?;
    let lambdas: Vec<bool> = records
        .iter()
        .map(|r| if invert { r.skewness >= tau } else { r.skewness < tau })
        .collect();
    Ok(SelectionMask { lambdas, tau, beta, records: records.to_vec() })
}

/// Shift pseudo-labeled target scores by Normal(mu, sigma), drawn
/// deterministically per (seed, sample_id). Source records pass through.
pub fn perturb_target_scores(
    records: &[SkewnessRecord],
    seed: u64,
    mu: f64,
    sigma: f64,
) -> Vec<SkewnessRecord> {
    records
        .iter()
        .map(|r| {
            if r.domain == Domain::Target {
                let mut rng = Rng::new(derive_seed(seed, r.sample_id));
                SkewnessRecord {
                    sample_id: r.sample_id,
                    skewness: r.skewness + rng.normal(mu, sigma),
                    domain: r.domain,
                    perturbed: true,
                }
            } else {
                r.clone()
            }
        })
        .collect()
}

/// Mean of the per-sample SSL losses where lambda is set; an exact constant
/// zero (no gradient) when nothing is selected.
pub fn masked_ssl_loss(g: &mut Graph, per_sample: &[Tensor], lambdas: &[bool]) -> Result<Tensor> {
    if per_sample.len() != lambdas.len() {
        return Err(Error::LengthMismatch {
            what: "ssl mask",
            left: lambdas.len(),
            right: per_sample.len(),
        });
    }
    let selected: Vec<Tensor> = per_sample
        .iter()
        .zip(lambdas)
        .filter(|(_, &keep)| keep)
        .map(|(t, _)| *t)
        .collect();
    if selected.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let mut acc = selected[0];
    for t in &selected[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(g.scale(acc, 1.0 / selected.len() as f64))
}
