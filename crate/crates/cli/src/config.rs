//! Flat experiment configuration with three-layer resolution:
//! built-in defaults, then the JSON config file, then `--key value` flags.
//! `SKEWGRAD_SEED` overrides the seed last.

use serde::{Deserialize, Serialize};
use skewgrad_core::error::{Error, Result};
use skewgrad_core::model::ModelDims;
use skewgrad_core::pointcloud::{BenchmarkSpec, HalfSpace, ShiftConfig};
use skewgrad_core::trainer::{derive_data_seed, OptimizerKind, PipelineConfig, SelectionMode, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // training
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub seed: u64,
    pub perturb_mu: f64,
    pub perturb_sigma: f64,
    pub selection_mode: String,
    pub optimizer: String,
    pub invert_selection: bool,
    pub cls_weight: f64,
    pub ssl_source_weight: f64,
    pub ssl_target_weight: f64,
    pub pseudo_confidence_threshold: Option<f64>,
    // model
    pub hidden_dim: usize,
    pub feature_dim: usize,
    // benchmark
    pub class_count: usize,
    pub points_per_cloud: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub jitter_sigma: f64,
    pub drop_fraction: f64,
    pub occlusion_offset: Option<f64>,
    pub occlusion_normal: [f64; 3],
    pub shift_scale: f64,
    /// Benchmark data seed; derived from `seed` when absent.
    pub data_seed: Option<u64>,
    // run
    pub output_dir: String,
    pub diagnostics_stride: usize,
    pub diagnostics_warmup: usize,
    pub diagnostics_panel: usize,
    pub eval_stride: usize,
    // sweep
    pub sweep_betas: Vec<f64>,
    pub sweep_alphas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let inv_sqrt3 = 1.0 / 3f64.sqrt();
        ExperimentConfig {
            alpha: 1.0,
            beta: 0.7,
            learning_rate: 0.05,
            batch_size: 32,
            steps_stage1: 4000,
            steps_stage2: 2000,
            seed: 7,
            perturb_mu: 0.1,
            perturb_sigma: 0.02,
            selection_mode: "sm-dsb".to_string(),
            optimizer: "sgd".to_string(),
            invert_selection: false,
            cls_weight: 1.0,
            ssl_source_weight: 1.0,
            ssl_target_weight: 1.0,
            pseudo_confidence_threshold: None,
            hidden_dim: 64,
            feature_dim: 128,
            class_count: 4,
            points_per_cloud: 256,
            source_per_class: 24,
            target_per_class: 24,
            jitter_sigma: 0.01,
            drop_fraction: 0.2,
            occlusion_offset: Some(0.55),
            occlusion_normal: [inv_sqrt3, inv_sqrt3, inv_sqrt3],
            shift_scale: 1.0,
            data_seed: None,
            output_dir: "runs/latest".to_string(),
            diagnostics_stride: 0,
            diagnostics_warmup: 0,
            diagnostics_panel: 0,
            eval_stride: 0,
            sweep_betas: Vec::new(),
            sweep_alphas: Vec::new(),
            sweep_seeds: Vec::new(),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_as::<T>(key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig {
            field: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Apply one `--key value` override; keys are kebab-case field names.
    pub fn apply_flag(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse_as(key, value)?,
            "beta" => self.beta = parse_as(key, value)?,
            "learning-rate" => self.learning_rate = parse_as(key, value)?,
            "batch-size" => self.batch_size = parse_as(key, value)?,
            "steps-stage1" => self.steps_stage1 = parse_as(key, value)?,
            "steps-stage2" => self.steps_stage2 = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "perturb-mu" => self.perturb_mu = parse_as(key, value)?,
            "perturb-sigma" => self.perturb_sigma = parse_as(key, value)?,
            "selection-mode" => self.selection_mode = value.to_string(),
            "optimizer" => self.optimizer = value.to_string(),
            "invert-selection" => self.invert_selection = parse_as(key, value)?,
            "cls-weight" => self.cls_weight = parse_as(key, value)?,
            "ssl-source-weight" => self.ssl_source_weight = parse_as(key, value)?,
            "ssl-target-weight" => self.ssl_target_weight = parse_as(key, value)?,
            "ssl-weight" => {
                let w = parse_as(key, value)?;
                self.ssl_source_weight = w;
                self.ssl_target_weight = w;
            }
            "pseudo-confidence-threshold" => {
                self.pseudo_confidence_threshold =
                    if value == "none" { None } else { Some(parse_as(key, value)?) };
            }
            "hidden-dim" => self.hidden_dim = parse_as(key, value)?,
            "feature-dim" => self.feature_dim = parse_as(key, value)?,
            "class-count" => self.class_count = parse_as(key, value)?,
            "points-per-cloud" => self.points_per_cloud = parse_as(key, value)?,
            "source-per-class" => self.source_per_class = parse_as(key, value)?,
            "target-per-class" => self.target_per_class = parse_as(key, value)?,
            "jitter-sigma" => self.jitter_sigma = parse_as(key, value)?,
            "drop-fraction" => self.drop_fraction = parse_as(key, value)?,
            "occlusion-offset" => {
                self.occlusion_offset =
                    if value == "none" { None } else { Some(parse_as(key, value)?) };
            }
            "occlusion-normal" => {
                let parts: Vec<f64> = parse_list(key, value)?;
                if parts.len() != 3 {
                    return Err(Error::config(key, "expected x,y,z"));
                }
                self.occlusion_normal = [parts[0], parts[1], parts[2]];
            }
            "shift-scale" => self.shift_scale = parse_as(key, value)?,
            "data-seed" => {
                self.data_seed = if value == "none" { None } else { Some(parse_as(key, value)?) };
            }
            "output-dir" | "out" => self.output_dir = value.to_string(),
            "diagnostics-stride" => self.diagnostics_stride = parse_as(key, value)?,
            "diagnostics-warmup" => self.diagnostics_warmup = parse_as(key, value)?,
            "diagnostics-panel" => self.diagnostics_panel = parse_as(key, value)?,
            "eval-stride" => self.eval_stride = parse_as(key, value)?,
            "sweep-betas" => self.sweep_betas = parse_list(key, value)?,
            "sweep-alphas" => self.sweep_alphas = parse_list(key, value)?,
            "sweep-seeds" => self.sweep_seeds = parse_list(key, value)?,
            _ => return Err(Error::config(key, "unknown flag")),
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(value) = std::env::var("SKEWGRAD_SEED") {
            self.seed = parse_as("SKEWGRAD_SEED", &value)?;
        }
        Ok(())
    }

    pub fn output_path(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }

    pub fn selection(&self) -> Result<SelectionMode> {
        self.selection_mode.parse()
    }

    fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.optimizer.as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config("optimizer", format!("unknown optimizer `{other}`"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps_stage1: self.steps_stage1,
            steps_stage2: self.steps_stage2,
            seed: self.seed,
            perturb_mu: self.perturb_mu,
            perturb_sigma: self.perturb_sigma,
            selection_mode: self.selection()?,
            optimizer: self.optimizer_kind()?,
            invert_selection: self.invert_selection,
            loss_weights: [self.cls_weight, self.ssl_source_weight, self.ssl_target_weight],
            pseudo_confidence_threshold: self.pseudo_confidence_threshold,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            hidden: self.hidden_dim,
            feature: self.feature_dim,
            classes: self.class_count,
            ..ModelDims::default()
        }
    }

    pub fn shift_config(&self) -> ShiftConfig {
        ShiftConfig {
            jitter_sigma: self.jitter_sigma,
            drop_fraction: self.drop_fraction,
            occlusion: self.occlusion_offset.map(|offset| HalfSpace {
                normal: self.occlusion_normal,
                offset,
            }),
            scale: self.shift_scale,
        }
    }

    pub fn benchmark_spec(&self) -> Result<BenchmarkSpec> {
        let spec = BenchmarkSpec {
            class_count: self.class_count,
            points_per_cloud: self.points_per_cloud,
            source_per_class: self.source_per_class,
            target_per_class: self.target_per_class,
            shift: self.shift_config(),
            seed: self.data_seed.unwrap_or_else(|| derive_data_seed(self.seed)),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            train: self.train_config()?,
            dims: self.dims(),
            benchmark: self.benchmark_spec()?,
            diagnostics_stride: self.diagnostics_stride,
            diagnostics_warmup: self.diagnostics_warmup,
            diagnostics_panel: self.diagnostics_panel,
            eval_stride: self.eval_stride,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        self.dims().validate()?;
        self.benchmark_spec()?;
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        Ok(())
    }
}

/// Resolve a config from CLI arguments: `--config file` first, every other
/// `--key value` pair on top, environment override last.
pub fn resolve(args: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    // config file first, regardless of flag position
    let mut i = 0;
    while i + 1 < args.len() {
        if args[i] == "--config" {
            cfg = ExperimentConfig::load_file(Path::new(&args[i + 1]))?;
        }
        i += 2;
    }
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let key = arg.strip_prefix("--").ok_or_else(|| {
            Error::config(arg, "expected a --key value pair")
        })?;
        let value = args.get(i + 1).ok_or_else(|| Error::config(key, "missing value"))?;
        if key != "config" {
            cfg.apply_flag(key, value)?;
        }
        i += 2;
    }
    cfg.apply_env()?;
    Ok(cfg)
}
