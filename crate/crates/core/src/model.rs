//! Shared point encoder with task heads.
//!
//! The encoder is a per-point MLP (3 -> h -> h -> d, relu throughout)
//! max-pooled over points, so features are exactly permutation invariant.
//! Two private heads sit on top: classification (d -> h -> K) and rotation
//! prediction (d -> h -> R) as the self-supervision pretext task. Parameters
//! are plain arrays; each training step binds them as leaves into a fresh
//! graph.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::Rng;
use crate::selection::masked_ssl_loss;
use serde::{Deserialize, Serialize};

/// Number of quarter-turn rotation classes in the pretext task.
pub const ROTATION_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: usize,
    pub feature: usize,
    pub classes: usize,
    pub rotations: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { hidden: 64, feature: 128, classes: 4, rotations: ROTATION_CLASSES }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.feature == 0 {
            return Err(Error::config("dims", "hidden and feature must be nonzero"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.rotations != ROTATION_CLASSES {
            return Err(Error::config("rotations", "quarter-turn pretext task uses exactly 4 rotations"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Row-major (in_dim x out_dim).
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.uniform(-limit, limit)).collect();
        DenseLayer { weight, bias: vec![0.0; out_dim], in_dim, out_dim }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: Vec<DenseLayer>,
    pub cls_head: Vec<DenseLayer>,
    pub ssl_head: Vec<DenseLayer>,
}

impl ModelParams {
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let h = dims.hidden;
        let d = dims.feature;
        Ok(ModelParams {
            dims,
            encoder: vec![
                DenseLayer::init(3, h, rng),
                DenseLayer::init(h, h, rng),
                DenseLayer::init(h, d, rng),
            ],
            cls_head: vec![DenseLayer::init(d, h, rng), DenseLayer::init(h, dims.classes, rng)],
            ssl_head: vec![DenseLayer::init(d, h, rng), DenseLayer::init(h, dims.rotations, rng)],
        })
    }

    /// Layers in canonical order with stable names; gradient flattening,
    /// checkpoints, and SGD all walk this order.
    pub fn named_layers(&self) -> Vec<(String, &DenseLayer)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}"), l));
        }
        for (i, l) in self.cls_head.iter().enumerate() {
            out.push((format!("cls_head.{i}"), l));
        }
        for (i, l) in self.ssl_head.iter().enumerate() {
            out.push((format!("ssl_head.{i}"), l));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        self.encoder
            .iter_mut()
            .chain(self.cls_head.iter_mut())
            .chain(self.ssl_head.iter_mut())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_layers().iter().map(|(_, l)| l.parameter_count()).sum()
    }

    pub fn encoder_parameter_count(&self) -> usize {
        self.encoder.iter().map(|l| l.parameter_count()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_layers()
            .iter()
            .all(|(_, l)| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

pub struct BoundLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Model parameters inserted as leaves of one graph.
pub struct BoundModel {
    pub encoder: Vec<BoundLayer>,
    pub cls_head: Vec<BoundLayer>,
    pub ssl_head: Vec<BoundLayer>,
}

impl BoundModel {
    pub fn layers(&self) -> impl Iterator<Item = &BoundLayer> {
        self.encoder.iter().chain(self.cls_head.iter()).chain(self.ssl_head.iter())
    }
}

pub fn bind(params: &ModelParams, g: &mut Graph, requires_grad: bool) -> Result<BoundModel> {
    let mut bind_layers = |layers: &[DenseLayer]| -> Result<Vec<BoundLayer>> {
        layers
            .iter()
            .map(|l| {
                Ok(BoundLayer {
                    weight: g.leaf(l.in_dim, l.out_dim, l.weight.clone(), requires_grad)?,
                    bias: g.leaf(1, l.out_dim, l.bias.clone(), requires_grad)?,
                })
            })
            .collect()
    };
    Ok(BoundModel {
        encoder: bind_layers(&params.encoder)?,
        cls_head: bind_layers(&params.cls_head)?,
        ssl_head: bind_layers(&params.ssl_head)?,
    })
}

fn dense(g: &mut Graph, layer: &BoundLayer, x: Tensor) -> Result<Tensor> {
    let z = g.matmul(x, layer.weight)?;
    g.add_bias(z, layer.bias)
}

/// Per-point MLP with relu, then max-pool over points: (N x 3) -> (1 x d).
pub fn encode(g: &mut Graph, bm: &BoundModel, points: Tensor) -> Result<Tensor> {
    let mut x = points;
    for layer in &bm.encoder {
        x = dense(g, layer, x)?;
        x = g.relu(x);
    }
    g.max_over_rows(x)
}

fn head(g: &mut Graph, layers: &[BoundLayer], feature: Tensor) -> Result<Tensor> {
    let mut x = feature;
    for (i, layer) in layers.iter().enumerate() {
        x = dense(g, layer, x)?;
        if i + 1 < layers.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Classification logits: (1 x d) -> (1 x K). Softmax happens in the loss.
pub fn classify(g: &mut Graph, bm: &BoundModel, feature: Tensor) -> Result<Tensor> {
    head(g, &bm.cls_head, feature)
}

/// Rotation-prediction logits: (1 x d) -> (1 x R).
pub fn ssl_predict(g: &mut Graph, bm: &BoundModel, feature: Tensor) -> Result<Tensor> {
    head(g, &bm.ssl_head, feature)
}

/// Insert a cloud's coordinates as a graph leaf.
pub fn points_leaf(g: &mut Graph, points: &[[f64; 3]], requires_grad: bool) -> Result<Tensor> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    g.leaf(points.len(), 3, flat, requires_grad)
}

/// Exact quarter-turn about z: k in {0,1,2,3}, each step maps (x, y) -> (-y, x).
pub fn rotate_z_quarter(points: &[[f64; 3]], k: usize) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| match k % 4 {
            0 => *p,
            1 => [-p[1], p[0], p[2]],
            2 => [-p[0], -p[1], p[2]],
            _ => [p[1], -p[0], p[2]],
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SslSample {
    pub rotated_points: Vec<[f64; 3]>,
    pub rotation_label: usize,
    pub sample_id: u64,
}

/// Rotation pretext sample: draw k deterministically from `seed`, rotate the
/// cloud by k quarter turns about z, label it with k.
pub fn make_ssl_sample(pc: &PointCloud, seed: u64) -> SslSample {
    let k = Rng::new(seed).below(ROTATION_CLASSES);
    SslSample {
        rotated_points: rotate_z_quarter(&pc.points, k),
        rotation_label: k,
        sample_id: pc.id,
    }
}

/// A classification example inside one step's batch.
#[derive(Debug, Clone)]
pub struct ClsExample {
    pub points: Vec<[f64; 3]>,
    pub label: usize,
    pub sample_id: u64,
}

/// Weights for the three loss parts (classification, source SSL, target SSL).
pub type LossWeights = [f64; 3];

pub struct LossBreakdown {
    pub total: Tensor,
    pub cls: Tensor,
    pub ssl_source: Tensor,
    pub ssl_target: Tensor,
}

fn batch_cross_entropy(g: &mut Graph, bm: &BoundModel, batch: &[ClsExample]) -> Result<Tensor> {
    let mut logits: Option<Tensor> = None;
    for ex in batch {
        let pts = points_leaf(g, &ex.points, false)?;
        let feat = encode(g, bm, pts)?;
        let l = classify(g, bm, feat)?;
        logits = Some(match logits {
            None => l,
            Some(acc) => g.concat_rows(acc, l)?,
        });
    }
    let logits = logits.expect("caller checks batch is nonempty");
    let labels: Vec<usize> = batch.iter().map(|ex| ex.label).collect();
    g.softmax_cross_entropy(logits, &labels)
}

fn per_sample_ssl_losses(g: &mut Graph, bm: &BoundModel, samples: &[SslSample]) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| {
            let pts = points_leaf(g, &s.rotated_points, false)?;
            let feat = encode(g, bm, pts)?;
            let logits = ssl_predict(g, bm, feat)?;
            g.softmax_cross_entropy(logits, &[s.rotation_label])
        })
        .collect()
}

/// The combined objective: classification plus masked self-supervision on
/// both domains. SSL parts are means over the selected samples, so the
/// selection ratio does not rescale the effective SSL step size. The three
/// parts come back separately for logging and gradient diagnostics;
/// `total = w0*cls + w1*ssl_source + w2*ssl_target` holds exactly.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    g: &mut Graph,
    bm: &BoundModel,
    source_cls: &[ClsExample],
    target_cls: &[ClsExample],
    source_ssl: &[SslSample],
    target_ssl: &[SslSample],
    lambda_source: &[bool],
    lambda_target: &[bool],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    if source_cls.is_empty() {
        return Err(Error::EmptyBatch { what: "source classification batch" });
    }
    if lambda_source.len() != source_ssl.len() {
        return Err(Error::LengthMismatch {
            what: "source ssl mask",
            left: lambda_source.len(),
            right: source_ssl.len(),
        });
    }
    if lambda_target.len() != target_ssl.len() {
        return Err(Error::LengthMismatch {
            what: "target ssl mask",
            left: lambda_target.len(),
            right: target_ssl.len(),
        });
    }

    let mut cls = batch_cross_entropy(g, bm, source_cls)?;
    if !target_cls.is_empty() {
        let tgt = batch_cross_entropy(g, bm, target_cls)?;
        cls = g.add(cls, tgt)?;
    }

    let src_losses = per_sample_ssl_losses(g, bm, source_ssl)?;
    let ssl_source = masked_ssl_loss(g, &src_losses, lambda_source)?;
    let tgt_losses = per_sample_ssl_losses(g, bm, target_ssl)?;
    let ssl_target = masked_ssl_loss(g, &tgt_losses, lambda_target)?;

    let wc = g.scale(cls, weights[0]);
    let ws = g.scale(ssl_source, weights[1]);
    let wt = g.scale(ssl_target, weights[2]);
    let partial = g.add(wc, ws)?;
    let total = g.add(partial, wt)?;
    Ok(LossBreakdown { total, cls, ssl_source, ssl_target })
}
