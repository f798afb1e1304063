//! Statistics for the diagnostics layer: correlation, kernel machinery,
//! and the additive-noise-model causal-direction score.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; 0 by contract when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { what: "correlation series", left: x.len(), right: y.len() });
    }
    if x.len() < 3 {
        return Err(Error::SeriesTooShort { what: "correlation", got: x.len(), minimum: 3 });
    }
    let (mx, my) = (mean(x), mean(y));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx < 1e-24 || vy < 1e-24 {
        return Ok(0.0);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Ranks with ties sharing the average rank (1-indexed).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation via average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { what: "correlation series", left: x.len(), right: y.len() });
    }
    if x.len() < 3 {
        return Err(Error::SeriesTooShort { what: "correlation", got: x.len(), minimum: 3 });
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

pub fn correlation(x: &[f64], y: &[f64]) -> Result<Correlation> {
    Ok(Correlation { pearson: pearson(x, y)?, spearman: spearman(x, y)? })
}

// ── Kernels and HSIC ─────────────────────────────────────────────────────

/// Median of |x_i - x_j| over i < j, floored at 1e-9; the usual bandwidth
/// heuristic for Gaussian kernels.
pub fn median_pairwise_distance(x: &[f64]) -> f64 {
    let mut dists = Vec::with_capacity(x.len() * (x.len() - 1) / 2);
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            dists.push((x[i] - x[j]).abs());
        }
    }
    if dists.is_empty() {
        return 1e-9;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let med = if n % 2 == 1 { dists[n / 2] } else { 0.5 * (dists[n / 2 - 1] + dists[n / 2]) };
    med.max(1e-9)
}

/// Gaussian Gram matrix K_ij = exp(-(x_i - x_j)^2 / (2 sigma^2)), row-major.
pub fn gaussian_gram(x: &[f64], sigma: f64) -> Vec<f64> {
    let n = x.len();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d = x[i] - x[j];
            let v = (-d * d * inv).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn center_gram(k: &[f64], n: usize) -> Vec<f64> {
    let mut row_means = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += k[i * n + j];
        }
        row_means[i] = s / n as f64;
        total += s;
    }
    let grand = total / (n * n) as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - row_means[i] - row_means[j] + grand;
        }
    }
    out
}

/// Biased HSIC estimate from two Gram matrices: tr(HKxH Ky) / (n-1)^2.
pub fn hsic_from_grams(kx: &[f64], ky: &[f64], n: usize) -> f64 {
    let cx = center_gram(kx, n);
    let mut tr = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr += cx[i * n + j] * ky[j * n + i];
        }
    }
    (tr / ((n - 1) as f64).powi(2)).max(0.0)
}

// ── Kernel ridge regression ──────────────────────────────────────────────

/// Solve A x = b for symmetric positive-definite A (in place Cholesky).
pub(crate) fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    // Lower-triangular factor written over A.
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::DegenerateInput { what: "cholesky (matrix not positive definite)" });
                }
                a[i * n + j] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= a[i * n + k] * y[k];
        }
        y[i] = sum / a[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= a[k * n + i] * x[k];
        }
        x[i] = sum / a[i * n + i];
    }
    Ok(x)
}

/// Gaussian-kernel ridge regression fitted values at the training inputs.
pub fn krr_fitted(x: &[f64], y: &[f64], sigma: f64, ridge: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let k = gaussian_gram(x, sigma);
    let mut system = k.clone();
    for i in 0..n {
        system[i * n + i] += ridge;
    }
    let alpha = cholesky_solve(&mut system, y, n)?;
    let mut fitted = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += k[i * n + j] * alpha[j];
        }
        fitted[i] = s;
    }
    Ok(fitted)
}

// ── Additive-noise-model direction score ─────────────────────────────────

pub const ANM_MIN_SAMPLES: usize = 30;
const ANM_RIDGE: f64 = 1e-3;

fn standardize(xs: &[f64]) -> Option<Vec<f64>> {
    let m = mean(xs);
    let sd = population_variance(xs).sqrt();
    if sd < 1e-12 {
        return None;
    }
    Some(xs.iter().map(|x| (x - m) / sd).collect())
}

/// Fit y ~ f(x) with Gaussian-kernel ridge regression (median-heuristic
/// bandwidth, ridge 1e-3) and score how dependent the residuals stay on x.
///
/// The dependence statistic is HSIC(residual, x) normalized by
/// sqrt(HSIC(x,x) * HSIC(y,y)); the residual kernel uses the bandwidth of y,
/// so a near-perfect fit scores near 0 no matter how the vanishing residuals
/// are structured. Lower score = residuals more independent = direction more
/// plausible.
pub fn anm_fit_score(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { what: "anm series", left: x.len(), right: y.len() });
    }
    if x.len() < ANM_MIN_SAMPLES {
        return Err(Error::SeriesTooShort { what: "anm", got: x.len(), minimum: ANM_MIN_SAMPLES });
    }
    let xs = standardize(x).ok_or(Error::DegenerateInput { what: "anm cause series (zero variance)" })?;
    let ys = match standardize(y) {
        Some(v) => v,
        // Constant effect: any function fits exactly, residuals vanish.
        None => return Ok(0.0),
    };
    let n = xs.len();
    let sigma_x = median_pairwise_distance(&xs);
    let sigma_y = median_pairwise_distance(&ys);

    let fitted = krr_fitted(&xs, &ys, sigma_x, ANM_RIDGE)?;
    let residuals: Vec<f64> = ys.iter().zip(&fitted).map(|(a, b)| a - b).collect();

    let kx = gaussian_gram(&xs, sigma_x);
    let ky = gaussian_gram(&ys, sigma_y);
    let ke = gaussian_gram(&residuals, sigma_y);

    let num = hsic_from_grams(&ke, &kx, n);
    let denom = (hsic_from_grams(&kx, &kx, n) * hsic_from_grams(&ky, &ky, n)).sqrt();
    if denom < 1e-15 {
        return Ok(0.0);
    }
    Ok(num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CausalVerdict {
    XCausesY,
    YCausesX,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnmDecision {
    pub score_x_to_y: f64,
    pub score_y_to_x: f64,
    pub verdict: CausalVerdict,
}

/// Score both directions; the lower fit score wins.
pub fn anm_direction_test(x: &[f64], y: &[f64]) -> Result<AnmDecision> {
    let score_x_to_y = anm_fit_score(x, y)?;
    let score_y_to_x = anm_fit_score(y, x)?;
    let verdict = if score_x_to_y <= score_y_to_x {
        CausalVerdict::XCausesY
    } else {
        CausalVerdict::YCausesX
    };
    Ok(AnmDecision { score_x_to_y, score_y_to_x, verdict })
}
