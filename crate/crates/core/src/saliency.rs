//! Per-point saliency maps and their skewness.
//!
//! A point's saliency is the classification-loss gradient projected onto the
//! inward radial direction around the spherical core (the component-wise
//! median of the cloud), rescaled by r^(1+alpha):
//!
//! ```text
//! s_i = -(dL/dr_i) * r_i^(1+alpha),   dL/dr_i = g_i . (p_i - c) / r_i
//! ```
//!
//! The core is treated as a constant under differentiation; the extra
//! backward pass runs on its own graph, so training gradients are untouched.
//! Skewness of the resulting score set is the standardized third central
//! moment with the population (divide-by-n) standard deviation.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use serde::{Deserialize, Serialize};

/// Radii below this have no usable radial direction; their score is 0.
pub const CORE_RADIUS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub scores: Vec<f64>,
    pub alpha: f64,
    pub core: [f64; 3],
    pub sample_id: u64,
}

/// Component-wise median of the points; even counts average the two middle
/// values.
pub fn spherical_core(points: &[[f64; 3]]) -> [f64; 3] {
    assert!(!points.is_empty(), "spherical core of an empty cloud");
    let mut core = [0.0; 3];
    let n = points.len();
    let mut axis_vals: Vec<f64> = Vec::with_capacity(n);
    for (axis, c) in core.iter_mut().enumerate() {
        axis_vals.clear();
        axis_vals.extend(points.iter().map(|p| p[axis]));
        axis_vals.sort_by(f64::total_cmp);
        *c = if n % 2 == 1 {
            axis_vals[n / 2]
        } else {
            0.5 * (axis_vals[n / 2 - 1] + axis_vals[n / 2])
        };
    }
    core
}

/// Compute saliency scores from the gradients already extracted for a cloud.
///
/// Shared by the model-backed path below and by oracles that obtain the
/// coordinate gradient some other way.
pub fn scores_from_gradient(
    points: &[[f64; 3]],
    gradient: &[[f64; 3]],
    core: [f64; 3],
    alpha: f64,
) -> Vec<f64> {
    points
        .iter()
        .zip(gradient)
        .map(|(p, g)| {
            let diff = [p[0] - core[0], p[1] - core[1], p[2] - core[2]];
            let r = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            if r < CORE_RADIUS_EPS {
                0.0
            } else {
                let dl_dr = (g[0] * diff[0] + g[1] * diff[1] + g[2] * diff[2]) / r;
                -dl_dr * r.powf(1.0 + alpha)
            }
        })
        .collect()
}

/// Saliency map of one sample under the classification loss for `label`.
///
/// Runs a forward/backward pass on an isolated graph with the point
/// coordinates as the gradient target.
pub fn saliency_map(
    params: &ModelParams,
    points: &[[f64; 3]],
    label: usize,
    alpha: f64,
    sample_id: u64,
) -> Result<SaliencyMap> {
    if !(alpha > 0.0) {
        return Err(Error::config("alpha", "must be > 0"));
    }
    let mut g = Graph::new();
    let bm = model::bind(params, &mut g, false)?;
    let pts = model::points_leaf(&mut g, points, true)?;
    let feat = model::encode(&mut g, &bm, pts)?;
    let logits = model::classify(&mut g, &bm, feat)?;
    let loss = g.softmax_cross_entropy(logits, &[label])?;
    g.backward(loss)?;
    let flat = g.grad(pts).expect("points leaf requires grad");
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSaliency { sample_id });
    }
    let gradient: Vec<[f64; 3]> = flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let core = spherical_core(points);
    let scores = scores_from_gradient(points, &gradient, core, alpha);
    Ok(SaliencyMap { scores, alpha, core, sample_id })
}

/// Standardized third central moment with population sigma. Returns 0 when
/// sigma degenerates below 1e-12.
pub fn skewness(scores: &[f64]) -> f64 {
    let n = scores.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let mean = scores.iter().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for s in scores {
        let d = s - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    let sigma = (m2 / nf).sqrt();
    if sigma < 1e-12 {
        return 0.0;
    }
    m3 / (nf * sigma * sigma * sigma)
}
