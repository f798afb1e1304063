//! Synthetic point-cloud data with a controllable source/target domain gap.
//!
//! Shapes are sampled uniformly over procedural primitive surfaces and
//! normalized to the unit sphere. The target domain applies scaling,
//! half-space occlusion, random point drop, and Gaussian jitter, emulating
//! partial real-world scans. Target labels are kept but flagged hidden; the
//! [`label_audit`] machinery catches any read outside the sanctioned oracle
//! and evaluation paths.
//!
//! The primitives are oriented so that a quarter-turn about z is recoverable
//! from geometry for most classes (cylinder/cone/torus axes point along x);
//! the rotation pretext task would otherwise be unlearnable noise. The
//! remaining rotation-symmetric classes (sphere, cube) are kept as natural
//! sources of unhelpful self-supervision gradients.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Minimum points a cloud may hold; the skewness statistic needs a
/// nondegenerate score distribution.
pub const MIN_POINTS: usize = 8;

pub const PRIMITIVE_COUNT: usize = 6;
pub const PRIMITIVE_NAMES: [&str; PRIMITIVE_COUNT] =
    ["sphere", "cube", "cylinder", "cone", "torus", "plane"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// Tracks reads of hidden (target-domain) labels.
///
/// Oracle-gradient extraction and final evaluation run inside
/// [`label_audit::with_oracle_access`]; a hidden-label read anywhere else
/// counts as a violation, which tests assert to be zero.
pub mod label_audit {
    use std::cell::Cell;

    thread_local! {
        static PERMIT_DEPTH: Cell<u32> = const { Cell::new(0) };
        static VIOLATIONS: Cell<u64> = const { Cell::new(0) };
    }

    pub fn with_oracle_access<T>(f: impl FnOnce() -> T) -> T {
        PERMIT_DEPTH.with(|d| d.set(d.get() + 1));
        let out = f();
        PERMIT_DEPTH.with(|d| d.set(d.get() - 1));
        out
    }

    pub(super) fn record_hidden_read() {
        PERMIT_DEPTH.with(|d| {
            if d.get() == 0 {
                VIOLATIONS.with(|v| v.set(v.get() + 1));
            }
        });
    }

    pub fn violation_count() -> u64 {
        VIOLATIONS.with(|v| v.get())
    }

    pub fn reset() {
        VIOLATIONS.with(|v| v.set(0));
    }
}

#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    label: usize,
    hidden: bool,
    pub domain: Domain,
    pub id: u64,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, label: usize, domain: Domain, id: u64) -> Self {
        PointCloud { points, label, hidden: false, domain, id }
    }

    pub fn with_hidden_label(points: Vec<[f64; 3]>, label: usize, domain: Domain, id: u64) -> Self {
        PointCloud { points, label, hidden: true, domain, id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The label when it is not hidden.
    pub fn visible_label(&self) -> Option<usize> {
        if self.hidden {
            None
        } else {
            Some(self.label)
        }
    }

    /// The true label regardless of hiding. Reads of hidden labels outside an
    /// oracle-access scope are recorded as audit violations.
    pub fn oracle_label(&self) -> usize {
        if self.hidden {
            label_audit::record_hidden_read();
        }
        self.label
    }

    pub fn label_is_hidden(&self) -> bool {
        self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < MIN_POINTS {
            return Err(Error::ShiftTooAggressive { remaining: self.points.len(), minimum: MIN_POINTS });
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput { what: "point cloud coordinates" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub samples: Vec<PointCloud>,
    pub class_count: usize,
    pub domain: Domain,
    pub seed: u64,
}

impl DomainDataset {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.samples.len() {
            return Err(Error::DegenerateInput { what: "duplicate sample ids in dataset" });
        }
        for s in &self.samples {
            if s.domain != self.domain {
                return Err(Error::DegenerateInput { what: "mixed domains in dataset" });
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HalfSpace {
    /// Unit normal of the cut plane.
    pub normal: [f64; 3],
    /// Points with dot(p, normal) > offset are removed.
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShiftConfig {
    pub jitter_sigma: f64,
    pub drop_fraction: f64,
    pub occlusion: Option<HalfSpace>,
    pub scale: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig { jitter_sigma: 0.0, drop_fraction: 0.0, occlusion: None, scale: 1.0 }
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::config("jitter_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::config("drop_fraction", "must be in [0, 1)"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("scale", "must be > 0"));
        }
        if let Some(h) = &self.occlusion {
            let norm = (h.normal[0].powi(2) + h.normal[1].powi(2) + h.normal[2].powi(2)).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::config("occlusion.normal", "must be a unit vector"));
            }
        }
        Ok(())
    }
}

// ── Generation ───────────────────────────────────────────────────────────

/// Center at the centroid and scale so the farthest point sits on the unit
/// sphere.
pub fn normalize_unit_sphere(points: &mut [[f64; 3]]) {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for a in 0..3 {
        c[a] /= n;
    }
    let mut max_r: f64 = 0.0;
    for p in points.iter_mut() {
        for a in 0..3 {
            p[a] -= c[a];
        }
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        max_r = max_r.max(r);
    }
    if max_r > 0.0 {
        for p in points.iter_mut() {
            for a in 0..3 {
                p[a] /= max_r;
            }
        }
    }
}

fn sample_primitive(class_id: usize, rng: &mut Rng) -> [f64; 3] {
    match class_id {
        // Sphere of radius 1.
        0 => {
            let z = rng.uniform(-1.0, 1.0);
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            [r * theta.cos(), r * theta.sin(), z]
        }
        // Axis-aligned cube surface, faces at +-1.
        1 => {
            let face = rng.below(6);
            let u = rng.uniform(-1.0, 1.0);
            let v = rng.uniform(-1.0, 1.0);
            match face {
                0 => [1.0, u, v],
                1 => [-1.0, u, v],
                2 => [u, 1.0, v],
                3 => [u, -1.0, v],
                4 => [u, v, 1.0],
                _ => [u, v, -1.0],
            }
        }
        // Cylinder lateral surface, axis along x.
        2 => {
            let x = rng.uniform(-1.0, 1.0);
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            [x, 0.5 * theta.cos(), 0.5 * theta.sin()]
        }
        // Cone lateral surface, apex at (1,0,0), base rim radius 0.8 at x=-1.
        3 => {
            let t = rng.next_f64().sqrt(); // area element grows linearly from the apex
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            [1.0 - 2.0 * t, 0.8 * t * theta.cos(), 0.8 * t * theta.sin()]
        }
        // Torus, axis along x: center circle radius 0.7 in the yz-plane,
        // tube radius 0.25. Rejection-sample the tube angle.
        4 => {
            let big = 0.7;
            let small = 0.25;
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            let phi = loop {
                let phi = rng.uniform(0.0, std::f64::consts::TAU);
                let accept = (1.0 + (small / big) * phi.cos()) / (1.0 + small / big);
                if rng.next_f64() < accept {
                    break phi;
                }
            };
            let ring = big + small * phi.cos();
            [small * phi.sin(), ring * theta.cos(), ring * theta.sin()]
        }
        // Rectangular plane patch in z = 0.
        5 => [rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5), 0.0],
        _ => unreachable!("class id validated by caller"),
    }
}

/// Sample `n_points` uniformly over one primitive surface, normalized to the
/// unit sphere. Deterministic in `seed`.
pub fn generate_shape(class_id: usize, n_points: usize, seed: u64) -> Result<PointCloud> {
    if class_id >= PRIMITIVE_COUNT {
        return Err(Error::UnknownClass { class_id, available: PRIMITIVE_COUNT });
    }
    if n_points < MIN_POINTS {
        return Err(Error::config("n_points", format!("must be >= {MIN_POINTS}")));
    }
    let mut rng = Rng::new(seed);
    let mut points: Vec<[f64; 3]> = (0..n_points).map(|_| sample_primitive(class_id, &mut rng)).collect();
    normalize_unit_sphere(&mut points);
    Ok(PointCloud::new(points, class_id, Domain::Source, 0))
}

// ── Domain shift ─────────────────────────────────────────────────────────

pub fn occlude_halfspace(points: &[[f64; 3]], cut: &HalfSpace) -> Vec<[f64; 3]> {
    points
        .iter()
        .filter(|p| p[0] * cut.normal[0] + p[1] * cut.normal[1] + p[2] * cut.normal[2] <= cut.offset)
        .copied()
        .collect()
}

/// Remove exactly round(n * fraction) points, chosen uniformly without
/// replacement; survivors keep their original order.
pub fn drop_points(points: &[[f64; 3]], fraction: f64, rng: &mut Rng) -> Vec<[f64; 3]> {
    let n = points.len();
    let n_drop = ((n as f64) * fraction).round() as usize;
    if n_drop == 0 {
        return points.to_vec();
    }
    let mut dropped = vec![false; n];
    for idx in rng.sample_indices(n, n_drop) {
        dropped[idx] = true;
    }
    points
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(p, _)| *p)
        .collect()
}

pub fn jitter_points(points: &mut [[f64; 3]], sigma: f64, rng: &mut Rng) {
    if sigma == 0.0 {
        return;
    }
    for p in points.iter_mut() {
        for a in 0..3 {
            p[a] += rng.normal(0.0, sigma);
        }
    }
}

/// Apply scale, occlusion, point drop, and jitter in that order, then
/// renormalize to the unit sphere. Label, id, and domain tag survive.
pub fn apply_domain_shift(pc: &PointCloud, cfg: &ShiftConfig, seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut points: Vec<[f64; 3]> = pc
        .points
        .iter()
        .map(|p| [p[0] * cfg.scale, p[1] * cfg.scale, p[2] * cfg.scale])
        .collect();
    if let Some(cut) = &cfg.occlusion {
        points = occlude_halfspace(&points, cut);
    }
    if points.len() < MIN_POINTS {
        return Err(Error::ShiftTooAggressive { remaining: points.len(), minimum: MIN_POINTS });
    }
    points = drop_points(&points, cfg.drop_fraction, &mut rng);
    if points.len() < MIN_POINTS {
        return Err(Error::ShiftTooAggressive { remaining: points.len(), minimum: MIN_POINTS });
    }
    jitter_points(&mut points, cfg.jitter_sigma, &mut rng);
    normalize_unit_sphere(&mut points);
    Ok(PointCloud {
        points,
        label: pc.label,
        hidden: pc.hidden,
        domain: pc.domain,
        id: pc.id,
    })
}

// ── XYZ persistence ──────────────────────────────────────────────────────

/// Write clouds as XYZ text: one `x y z` line per point, 12 decimals, clouds
/// separated by a blank line.
pub fn save_xyz(clouds: &[&PointCloud], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, pc) in clouds.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for p in &pc.points {
            out.push_str(&format!("{:.12} {:.12} {:.12}\n", p[0], p[1], p[2]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read XYZ text back. `#` lines are comments; blank lines split clouds.
/// Labels and domains live in the sidecar manifest, so clouds come back as
/// unlabeled source data with sequential ids.
pub fn load_xyz(path: &Path) -> Result<Vec<PointCloud>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let path_str = path.display().to_string();
    let mut clouds: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut current: Vec<[f64; 3]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.is_empty() {
            if !current.is_empty() {
                clouds.push(std::mem::take(&mut current));
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::MalformedXyz {
                path: path_str,
                line: lineno + 1,
                reason: format!("expected 3 coordinates, got {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (a, f) in fields.iter().enumerate() {
            p[a] = f.parse::<f64>().map_err(|_| Error::MalformedXyz {
                path: path_str.clone(),
                line: lineno + 1,
                reason: format!("`{f}` is not a number"),
            })?;
        }
        current.push(p);
    }
    if !current.is_empty() {
        clouds.push(current);
    }
    if clouds.is_empty() {
        return Err(Error::EmptyXyz { path: path_str });
    }
    Ok(clouds
        .into_iter()
        .enumerate()
        .map(|(i, points)| PointCloud::new(points, 0, Domain::Source, i as u64))
        .collect())
}

/// Sidecar manifest entry: which file holds which sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub file: String,
    pub label: usize,
    pub domain: Domain,
}

pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)
        .map_err(|e| Error::Parse { path: path.display().to_string(), reason: e.to_string() })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.display().to_string(), reason: e.to_string() })
}

// ── Benchmark assembly ───────────────────────────────────────────────────

/// Target-domain ids start here so the two domains never collide.
pub const TARGET_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchmarkSpec {
    pub class_count: usize,
    pub points_per_cloud: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub shift: ShiftConfig,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 4 || self.class_count > PRIMITIVE_COUNT {
            return Err(Error::config(
                "class_count",
                format!("must be in [4, {PRIMITIVE_COUNT}]"),
            ));
        }
        if self.points_per_cloud < MIN_POINTS {
            return Err(Error::config("points_per_cloud", format!("must be >= {MIN_POINTS}")));
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return Err(Error::config("per_class", "must be >= 1"));
        }
        self.shift.validate()
    }
}

/// Build the labeled-source / hidden-label-target split: clean primitives on
/// the source side, shifted primitives on the target side. Per-sample seeds
/// derive from (benchmark seed, id), so generation order is immaterial.
pub fn make_uda_benchmark(spec: &BenchmarkSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    let mut source = Vec::with_capacity(spec.class_count * spec.source_per_class);
    for class in 0..spec.class_count {
        for j in 0..spec.source_per_class {
            let id = (class * spec.source_per_class + j) as u64;
            let pc = generate_shape(class, spec.points_per_cloud, derive_seed(spec.seed, id))?;
            source.push(PointCloud { id, ..pc });
        }
    }
    let mut target = Vec::with_capacity(spec.class_count * spec.target_per_class);
    for class in 0..spec.class_count {
        for j in 0..spec.target_per_class {
            let id = TARGET_ID_BASE + (class * spec.target_per_class + j) as u64;
            let clean = generate_shape(class, spec.points_per_cloud, derive_seed(spec.seed, id))?;
            let shifted = apply_domain_shift(&clean, &spec.shift, derive_seed(spec.seed, id ^ 0xABCD_EF01))?;
            target.push(PointCloud {
                points: shifted.points,
                label: class,
                hidden: true,
                domain: Domain::Target,
                id,
            });
        }
    }
    let source = DomainDataset {
        samples: source,
        class_count: spec.class_count,
        domain: Domain::Source,
        seed: spec.seed,
    };
    let target = DomainDataset {
        samples: target,
        class_count: spec.class_count,
        domain: Domain::Target,
        seed: spec.seed,
    };
    source.validate()?;
    target.validate()?;
    Ok((source, target))
}
