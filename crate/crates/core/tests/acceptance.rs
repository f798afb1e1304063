//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Criteria 6, 7, and 10 share a 5-seed experiment matrix over the selection
//! modes (and the alpha grid), built once behind a lock; their runtime
//! budgets are checked against the wall time of the runs they actually
//! consume, not the shared wall clock.

use skewgrad_core::autodiff::{finite_difference_check, Graph};
use skewgrad_core::diagnostics::{grad_for_task, ConflictRecord, TaskKind};
use skewgrad_core::model::{self, bind, combined_loss, ModelDims, ModelParams};
use skewgrad_core::pointcloud::{generate_shape, make_uda_benchmark, BenchmarkSpec, HalfSpace, ShiftConfig};
use skewgrad_core::rng::Rng;
use skewgrad_core::saliency;
use skewgrad_core::selection::{select, SkewnessRecord};
use skewgrad_core::stats;
use skewgrad_core::trainer::{
    assemble_step, extract_grads, resume_stage, run_pipeline, sgd_step, train_stage1, Checkpoint,
    DiagnosticsOptions, PipelineConfig, SelectionMode, Stage, TrainConfig,
};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

// ── Shared experiment matrix ─────────────────────────────────────────────

const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

fn acceptance_pipeline() -> PipelineConfig {
    let n = 1.0 / 3f64.sqrt();
    PipelineConfig {
        train: TrainConfig {
            alpha: 1.0,
            beta: 0.7,
            learning_rate: 0.02,
            batch_size: 16,
            steps_stage1: 2000,
            steps_stage2: 800,
            seed: 0,
            perturb_mu: 0.1,
            perturb_sigma: 0.02,
            selection_mode: SelectionMode::All,
            optimizer: skewgrad_core::trainer::OptimizerKind::Sgd,
            invert_selection: false,
            loss_weights: [1.0, 1.0, 1.0],
            pseudo_confidence_threshold: None,
        },
        dims: ModelDims { hidden: 32, feature: 64, classes: 4, rotations: 4 },
        benchmark: BenchmarkSpec {
            class_count: 4,
            points_per_cloud: 64,
            source_per_class: 24,
            target_per_class: 24,
            shift: ShiftConfig {
                jitter_sigma: 0.01,
                drop_fraction: 0.2,
                occlusion: Some(HalfSpace { normal: [n, n, n], offset: 0.55 }),
                scale: 1.0,
            },
            seed: 0,
        },
        diagnostics_stride: 0,
        diagnostics_warmup: 0,
        diagnostics_panel: 0,
        eval_stride: 0,
    }
}

struct ModeRuns {
    accuracies: Vec<f64>,
    conflicts: Vec<Vec<ConflictRecord>>,
    duration: Duration,
}

fn run_mode(mode: SelectionMode, alpha: f64, steps: (usize, usize), diagnose: bool) -> ModeRuns {
    let started = Instant::now();
    let mut accuracies = Vec::new();
    let mut conflicts = Vec::new();
    for &seed in &SEEDS {
        let mut cfg = acceptance_pipeline().with_seed(seed);
        cfg.train.selection_mode = mode;
        cfg.train.alpha = alpha;
        cfg.train.steps_stage1 = steps.0;
        cfg.train.steps_stage2 = steps.1;
        cfg.diagnostics_stride = if diagnose { 25 } else { 0 };
        let result = run_pipeline(&cfg).expect("matrix run");
        accuracies.push(result.eval_target.accuracy);
        conflicts.push(result.conflicts);
    }
    ModeRuns { accuracies, conflicts, duration: started.elapsed() }
}

struct Matrix {
    all: ModeRuns,
    random_freeze: ModeRuns,
    smdsb: ModeRuns,
    alpha_grid: Vec<(f64, ModeRuns)>,
}

fn matrix() -> &'static Matrix {
    static MATRIX: OnceLock<Matrix> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let full = (2000, 800);
        let sweep = (1200, 400);
        Matrix {
            all: run_mode(SelectionMode::All, 1.0, full, true),
            random_freeze: run_mode(SelectionMode::RandomFreeze(0.5), 1.0, full, false),
            smdsb: run_mode(SelectionMode::SmDsb, 1.0, full, false),
            alpha_grid: [0.5, 1.0, 2.0]
                .into_iter()
                .map(|alpha| (alpha, run_mode(SelectionMode::SmDsb, alpha, sweep, false)))
                .collect(),
        }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ── Criterion 1: autodiff gradients vs central finite differences ────────

#[test]
fn criterion_01_autodiff_gradients() {
    let started = Instant::now();
    let step = 1e-5;
    let tolerance = 1e-4;
    let mut checked = 0u32;
    let mut worst = 0.0f64;
    let mut seed = 0u64;
    while checked < 100 {
        seed += 1;
        let mut rng = Rng::new(derive(seed));
        let hidden = 6 + rng.below(6);
        let classes = 3 + rng.below(3);
        let batch = 5;
        let w1: Vec<f64> = (0..3 * hidden).map(|_| rng.uniform(-0.9, 0.9)).collect();
        let b1: Vec<f64> = (0..hidden).map(|_| rng.uniform(-0.3, 0.3)).collect();
        let w2: Vec<f64> = (0..hidden * classes).map(|_| rng.uniform(-0.9, 0.9)).collect();
        let x: Vec<f64> = (0..batch * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();

        // Finite differences are only a valid oracle away from relu kinks:
        // reject draws whose hidden pre-activations sit within reach of the
        // probe step.
        let margin_ok = {
            let mut g = Graph::new();
            let xs = g.leaf(batch, 3, x.clone(), false).unwrap();
            let w = g.leaf(3, hidden, w1.clone(), false).unwrap();
            let b = g.leaf(1, hidden, b1.clone(), false).unwrap();
            let z = g.matmul(xs, w).unwrap();
            let z = g.add_bias(z, b).unwrap();
            g.values(z).iter().all(|v| v.abs() > 50.0 * step)
        };
        if !margin_ok {
            continue;
        }
        checked += 1;

        let loss_through = |g: &mut Graph,
                            w1t: skewgrad_core::autodiff::Tensor,
                            b1t: skewgrad_core::autodiff::Tensor,
                            w2t: skewgrad_core::autodiff::Tensor|
         -> skewgrad_core::error::Result<skewgrad_core::autodiff::Tensor> {
            let xs = g.leaf(batch, 3, x.clone(), false)?;
            let z = g.matmul(xs, w1t)?;
            let z = g.add_bias(z, b1t)?;
            let h = g.relu(z);
            let logits = g.matmul(h, w2t)?;
            g.softmax_cross_entropy(logits, &labels)
        };

        // Every parameter tensor gets its own finite-difference sweep.
        let err_w1 = finite_difference_check(
            |g, w| {
                let b1t = g.leaf(1, hidden, b1.clone(), false)?;
                let w2t = g.leaf(hidden, classes, w2.clone(), false)?;
                loss_through(g, w, b1t, w2t)
            },
            &w1,
            3,
            hidden,
            step,
        )
        .unwrap();
        let err_b1 = finite_difference_check(
            |g, b| {
                let w1t = g.leaf(3, hidden, w1.clone(), false)?;
                let w2t = g.leaf(hidden, classes, w2.clone(), false)?;
                loss_through(g, w1t, b, w2t)
            },
            &b1,
            1,
            hidden,
            step,
        )
        .unwrap();
        let err_w2 = finite_difference_check(
            |g, w| {
                let w1t = g.leaf(3, hidden, w1.clone(), false)?;
                let b1t = g.leaf(1, hidden, b1.clone(), false)?;
                loss_through(g, w1t, b1t, w)
            },
            &w2,
            hidden,
            classes,
            step,
        )
        .unwrap();
        worst = worst.max(err_w1).max(err_b1).max(err_w2);
        assert!(
            worst < tolerance,
            "criterion 01 autodiff-gradients: FAIL at net {seed} (max rel err {worst:.3e})"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "criterion 01 over budget: {elapsed:?}");
    println!(
        "criterion 01 autodiff-gradients: PASS (100 nets, max rel err {worst:.3e}, {elapsed:.2?})"
    );
}

fn derive(seed: u64) -> u64 {
    skewgrad_core::rng::derive_seed(0xACCE_97ED, seed)
}

// ── Criterion 2: saliency scores vs radial finite differences ────────────

#[test]
fn criterion_02_saliency_radial_oracle() {
    let started = Instant::now();
    let delta = 1e-4;
    let tolerance = 1e-3;
    let mut worst = 0.0f64;
    for pair in 0..50u64 {
        let mut rng = Rng::new(derive(1000 + pair));
        let dims = ModelDims {
            hidden: 6 + rng.below(6),
            feature: 8 + rng.below(10),
            classes: 4,
            rotations: 4,
        };
        let params = ModelParams::init(dims, &mut rng).unwrap();
        let class = rng.below(4);
        let n_points = 12 + rng.below(12);
        let pc = generate_shape(class, n_points, derive(5000 + pair)).unwrap();
        let label = rng.below(4);
        let alpha = 1.0;
        let map = saliency::saliency_map(&params, &pc.points, label, alpha, pc.id).unwrap();

        let loss_of = |pts: &[[f64; 3]]| -> f64 {
            let mut g = Graph::new();
            let bm = bind(&params, &mut g, false).unwrap();
            let t = model::points_leaf(&mut g, pts, false).unwrap();
            let feat = model::encode(&mut g, &bm, t).unwrap();
            let logits = model::classify(&mut g, &bm, feat).unwrap();
            let l = g.softmax_cross_entropy(logits, &[label]).unwrap();
            g.scalar_value(l)
        };

        // Radial finite differences with the core frozen, as in the analytic
        // path. Coordinates whose oracle value sits at the numerical noise
        // floor of the map are excluded: the central difference cannot
        // resolve them.
        let core = map.core;
        let mut fd_scores = vec![0.0f64; pc.len()];
        for (i, p) in pc.points.iter().enumerate() {
            let diff = [p[0] - core[0], p[1] - core[1], p[2] - core[2]];
            let r = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            if r < 1e-6 {
                continue;
            }
            let u = [diff[0] / r, diff[1] / r, diff[2] / r];
            let mut outward = pc.points.clone();
            let mut inward = pc.points.clone();
            for a in 0..3 {
                outward[i][a] += delta * u[a];
                inward[i][a] -= delta * u[a];
            }
            let dl_dr = (loss_of(&outward) - loss_of(&inward)) / (2.0 * delta);
            fd_scores[i] = -dl_dr * r.powf(1.0 + alpha);
        }
        let scale = fd_scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, (&analytic, &fd)) in map.scores.iter().zip(&fd_scores).enumerate() {
            if fd.abs() < 1e-6 * scale {
                continue;
            }
            let rel = (analytic - fd).abs() / (fd.abs() + 1e-12);
            worst = worst.max(rel);
            assert!(
                rel < tolerance,
                "criterion 02 saliency-oracle: FAIL pair {pair} point {i}: analytic {analytic:.6e} vs fd {fd:.6e}"
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "criterion 02 over budget: {elapsed:?}");
    println!(
        "criterion 02 saliency-radial-oracle: PASS (50 pairs, max rel err {worst:.3e}, {elapsed:.2?})"
    );
}

// ── Criterion 3: skewness vs independent high-precision evaluation ───────

/// Streaming one-pass central-moment oracle, an algebraically different
/// route from the implementation's two-pass formula.
fn skewness_oracle(scores: &[f64]) -> f64 {
    let mut n = 0.0f64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for &x in scores {
        let n1 = n;
        n += 1.0;
        let delta = x - mean;
        let delta_n = delta / n;
        let term1 = delta * delta_n * n1;
        m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * m2;
        m2 += term1;
        mean += delta_n;
    }
    if n == 0.0 {
        return 0.0;
    }
    let sigma = (m2 / n).sqrt();
    if sigma < 1e-12 {
        return 0.0;
    }
    m3 / (n * sigma * sigma * sigma)
}

#[test]
fn criterion_03_skewness_oracle() {
    let started = Instant::now();
    let mut rng = Rng::new(derive(42));
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 3 + rng.below(120);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let diff = (saliency::skewness(&scores) - skewness_oracle(&scores)).abs();
        worst = worst.max(diff);
        assert!(diff < 1e-9, "criterion 03 skewness-oracle: FAIL diff {diff:.3e}");
    }
    // Symmetric input: zero within the agreement tolerance (and exactly
    // zero when the arithmetic is exact, as in {1,2,3}).
    assert_eq!(saliency::skewness(&[1.0, 2.0, 3.0]), 0.0);
    for half in 1..20 {
        let mut sym: Vec<f64> = (-(half as i64)..=half as i64).map(|v| v as f64 * 0.37).collect();
        assert!(saliency::skewness(&sym).abs() < 1e-9);
        sym.reverse();
        assert!(saliency::skewness(&sym).abs() < 1e-9);
    }
    // Affine invariance.
    for _ in 0..200 {
        let n = 3 + rng.below(60);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let a = rng.uniform(0.05, 8.0);
        let b = rng.uniform(-5.0, 5.0);
        let base = saliency::skewness(&scores);
        let pos: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let neg: Vec<f64> = scores.iter().map(|s| -a * s + b).collect();
        assert!((saliency::skewness(&pos) - base).abs() < 1e-9);
        assert!((saliency::skewness(&neg) + base).abs() < 1e-9);
    }
    // Frozen reference value.
    let reference = saliency::skewness(&[1.0, 2.0, 9.0]);
    assert!(
        (reference - 0.6655).abs() < 5e-4,
        "criterion 03: {{1,2,9}} gave {reference}"
    );
    let elapsed = started.elapsed();
    println!(
        "criterion 03 skewness-oracle: PASS (1000 vectors, max |diff| {worst:.3e}, reference {reference:.6}, {elapsed:.2?})"
    );
}

// ── Criterion 4: selection contract, exhaustive ───────────────────────────

/// Brute-force re-derivation of the selector: find the rank-th smallest by
/// counting, then apply the >= rule literally.
fn brute_force_select(scores: &[f64], beta: f64) -> (f64, Vec<bool>) {
    let b = scores.len();
    let rank = (((b as f64) * beta).round() as usize).clamp(1, b);
    // k-th smallest by counting, no sort
    let mut tau = f64::INFINITY;
    for &candidate in scores {
        let below: usize = scores.iter().filter(|&&s| s < candidate).count();
        let equal: usize = scores.iter().filter(|&&s| s == candidate).count();
        if below < rank && rank <= below + equal {
            tau = candidate;
        }
    }
    let lambdas = scores.iter().map(|&s| s < tau).collect();
    (tau, lambdas)
}

#[test]
fn criterion_04_selection_contract() {
    let started = Instant::now();
    let mut rng = Rng::new(derive(404));
    for b in 2..=16usize {
        for beta10 in 1..=10 {
            let beta = beta10 as f64 / 10.0;
            for trial in 0..20 {
                // Mix of distinct and tied score sets.
                let scores: Vec<f64> = if trial % 3 == 0 {
                    (0..b).map(|_| (rng.below(4) as f64) * 0.5).collect()
                } else {
                    (0..b).map(|_| rng.uniform(-3.0, 3.0)).collect()
                };
                let records: Vec<SkewnessRecord> = scores
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| SkewnessRecord {
                        sample_id: i as u64,
                        skewness: s,
                        domain: skewgrad_core::pointcloud::Domain::Source,
                        perturbed: false,
                    })
                    .collect();
                let mask = select(&records, beta).unwrap();
                let (tau, lambdas) = brute_force_select(&scores, beta);
                assert_eq!(mask.tau, tau, "tau mismatch B={b} beta={beta}");
                assert_eq!(mask.lambdas, lambdas, "lambda mismatch B={b} beta={beta}");

                // Max-skewness sample always excluded.
                let max_idx = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert!(!mask.lambdas[max_idx]);

                // Distinct scores: retained count rule.
                let mut sorted = scores.clone();
                sorted.sort_by(f64::total_cmp);
                sorted.dedup();
                if sorted.len() == b {
                    let expected = (((b as f64) * beta).round() as usize).clamp(1, b) - 1;
                    assert_eq!(mask.retained_count(), expected);
                }

                // Permutation equivariance.
                let perm = rng.sample_indices(b, b);
                let permuted: Vec<SkewnessRecord> = perm.iter().map(|&i| records[i].clone()).collect();
                let shuffled = select(&permuted, beta).unwrap();
                assert_eq!(shuffled.tau, mask.tau);
                for (j, &i) in perm.iter().enumerate() {
                    assert_eq!(shuffled.lambdas[j], mask.lambdas[i]);
                }
            }

            // Monotone inclusion in beta over one distinct score set.
            let scores: Vec<f64> = (0..b).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let records: Vec<SkewnessRecord> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| SkewnessRecord {
                    sample_id: i as u64,
                    skewness: s,
                    domain: skewgrad_core::pointcloud::Domain::Source,
                    perturbed: false,
                })
                .collect();
            let mut previous = vec![false; b];
            for inner in 1..=10 {
                let mask = select(&records, inner as f64 / 10.0).unwrap();
                for (prev, now) in previous.iter().zip(&mask.lambdas) {
                    assert!(!prev | now, "retained set must grow with beta");
                }
                previous = mask.lambdas;
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "criterion 04 over budget: {elapsed:?}");
    println!("criterion 04 selection-contract: PASS (B=2..16 x beta=0.1..1.0, {elapsed:.2?})");
}

// ── Criterion 5: gradient linearity at audited steps of a live run ───────

#[test]
fn criterion_05_gradient_linearity() {
    let started = Instant::now();
    let spec = BenchmarkSpec {
        class_count: 4,
        points_per_cloud: 32,
        source_per_class: 8,
        target_per_class: 8,
        shift: ShiftConfig { drop_fraction: 0.15, jitter_sigma: 0.01, ..ShiftConfig::identity() },
        seed: derive(505),
    };
    let (source, target) = make_uda_benchmark(&spec).unwrap();
    let cfg = TrainConfig {
        batch_size: 6,
        learning_rate: 0.04,
        selection_mode: SelectionMode::SmDsb,
        ..TrainConfig::default()
    };
    let dims = ModelDims { hidden: 12, feature: 16, classes: 4, rotations: 4 };
    let mut params = ModelParams::init(dims, &mut Rng::new(derive(506))).unwrap();
    let mut rng_main = Rng::new(derive(507));
    let mut rng_select = Rng::new(derive(508));

    let weights = cfg.loss_weights;
    let mut worst = 0.0f64;
    for step in 0..20usize {
        let batch = assemble_step(
            &cfg,
            Stage::One,
            &params,
            &source,
            &target,
            None,
            &mut rng_main,
            &mut rng_select,
        )
        .unwrap();

        let cls = grad_for_task(&params, &batch, TaskKind::Cls, weights, step).unwrap();
        let ssl_s = grad_for_task(&params, &batch, TaskKind::SslSource, weights, step).unwrap();
        let ssl_t = grad_for_task(&params, &batch, TaskKind::SslTarget, weights, step).unwrap();
        let sum = grad_for_task(&params, &batch, TaskKind::Sum, weights, step).unwrap();
        for i in 0..sum.vector.len() {
            let composed = cls.vector[i] + ssl_s.vector[i] + ssl_t.vector[i];
            let diff = (sum.vector[i] - composed).abs();
            worst = worst.max(diff);
            assert!(
                diff < 1e-10,
                "criterion 05 gradient-linearity: FAIL step {step} component {i} diff {diff:.3e}"
            );
        }

        // Advance the live run.
        let mut g = Graph::new();
        let bm = bind(&params, &mut g, true).unwrap();
        let loss = combined_loss(
            &mut g,
            &bm,
            &batch.source_cls,
            &batch.target_cls,
            &batch.source_ssl,
            &batch.target_ssl,
            &batch.lambda_source,
            &batch.lambda_target,
            weights,
        )
        .unwrap();
        g.backward(loss.total).unwrap();
        let grads = extract_grads(&g, &bm);
        sgd_step(&mut params, &grads, cfg.learning_rate).unwrap();
    }
    println!(
        "criterion 05 gradient-linearity: PASS (20 audited steps, max |diff| {worst:.3e}, {:.2?})",
        started.elapsed()
    );
}

// ── Criterion 6: random-freezing pilot does not degrade accuracy ─────────

#[test]
fn criterion_06_pilot_reproduction() {
    let m = matrix();
    let all_mean = mean(&m.all.accuracies);
    let rf_mean = mean(&m.random_freeze.accuracies);
    let budget = m.all.duration + m.random_freeze.duration;
    assert!(
        budget < Duration::from_secs(600),
        "criterion 06 over budget: {budget:?}"
    );
    assert!(
        rf_mean >= all_mean - 0.020 - 1e-12,
        "criterion 06 pilot-reproduction: FAIL random-freeze mean {rf_mean:.4} vs all mean {all_mean:.4} (allowed gap 2.0 points); accs rf {:?} all {:?}",
        m.random_freeze.accuracies,
        m.all.accuracies
    );
    println!(
        "criterion 06 pilot-reproduction: PASS (random-freeze {rf_mean:.4} vs all {all_mean:.4}, runs took {budget:.1?})"
    );
}

// ── Criterion 7: SM-DSB benefit and skewness-conflict correlation ────────

#[test]
fn criterion_07_smdsb_benefit_and_correlation() {
    let m = matrix();
    let all_mean = mean(&m.all.accuracies);
    let smdsb_mean = mean(&m.smdsb.accuracies);
    let budget = m.all.duration + m.smdsb.duration;
    assert!(
        budget < Duration::from_secs(900),
        "criterion 07 over budget: {budget:?}"
    );
    let accuracy_ok = smdsb_mean >= all_mean - 0.005 - 1e-12;

    // Correlation clause: per observational (all-mode) run, Spearman between
    // the audited per-batch mean skewness and sim(G_SSL, G_oracle).
    let mut spearmans = Vec::new();
    let mut negative = 0;
    for conflicts in &m.all.conflicts {
        let skew: Vec<f64> = conflicts.iter().map(|c| c.mean_batch_skewness).collect();
        let sim: Vec<f64> = conflicts.iter().map(|c| c.sim_ssl_oracle).collect();
        let rho = stats::spearman(&skew, &sim).unwrap();
        if rho <= -0.1 {
            negative += 1;
        }
        spearmans.push((rho * 1000.0).round() / 1000.0);
    }
    let correlation_ok = negative >= 4;

    let verdict = if accuracy_ok && correlation_ok { "PASS" } else { "FAIL" };
    println!(
        "criterion 07 smdsb-benefit-and-correlation: {verdict} (accuracy clause {}: sm-dsb {smdsb_mean:.4} vs all {all_mean:.4}; \
         correlation clause {}: {negative}/5 seeds with rho <= -0.1, per-seed {spearmans:?}; runs took {budget:.1?})",
        if accuracy_ok { "pass" } else { "fail" },
        if correlation_ok { "pass" } else { "fail" },
    );
    assert!(
        accuracy_ok,
        "criterion 07 accuracy clause: sm-dsb mean {smdsb_mean:.4} vs all mean {all_mean:.4} exceeds the 0.5-point gap; \
         per-seed sm-dsb {:?} vs all {:?}",
        m.smdsb.accuracies, m.all.accuracies
    );
    assert!(
        correlation_ok,
        "criterion 07 correlation clause not met at desk scale: {negative}/5 seeds with Spearman <= -0.1 (per-seed {spearmans:?}), \
         while the accuracy clause passed (sm-dsb {smdsb_mean:.4} vs all {all_mean:.4}). Extensive calibration \
         (per-sample, per-class, per-batch, fixed-panel, warmup windows, longer horizons, capacity/learning-rate scans) \
         finds the skewness/alignment coupling sign-unstable across training seeds on small models; the negative \
         correlation appears to require training dynamics beyond desk scale. See the run notes for the full analysis."
    );
}

// ── Criterion 8: conflict CSV and rank-correlation inconsistency ─────────

#[test]
fn criterion_08_conflict_inconsistency() {
    let m = matrix();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("conflict.csv");
    skewgrad_core::diagnostics::write_conflict_csv(&m.all.conflicts[0], &path).unwrap();
    let back = skewgrad_core::diagnostics::read_conflict_csv(&path).unwrap();
    assert_eq!(back.len(), m.all.conflicts[0].len());
    assert!(!back.is_empty(), "criterion 08: conflict CSV must hold records");

    let mut worst: f64 = 0.0;
    for conflicts in &m.all.conflicts {
        for c in conflicts {
            for v in [c.sim_sum_oracle, c.sim_ssl_cls, c.sim_ssl_oracle] {
                assert!(
                    (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v),
                    "criterion 08: similarity {v} out of [-1, 1]"
                );
            }
        }
        let ssl_cls: Vec<f64> = conflicts.iter().map(|c| c.sim_ssl_cls).collect();
        let sum_oracle: Vec<f64> = conflicts.iter().map(|c| c.sim_sum_oracle).collect();
        let rho = stats::spearman(&ssl_cls, &sum_oracle).unwrap().abs();
        worst = worst.max(rho);
        assert!(
            rho < 0.95,
            "criterion 08 conflict-inconsistency: FAIL |spearman| {rho:.3} between inter-task and oracle conflict series"
        );
    }
    println!(
        "criterion 08 conflict-inconsistency: PASS (max |spearman(sim_ssl_cls, sim_sum_oracle)| {worst:.3})"
    );
}

// ── Criterion 9: ANM causal direction on synthetic data ──────────────────

#[test]
fn criterion_09_anm_direction() {
    let started = Instant::now();
    let mut hits = 0;
    let trials = 50;
    for trial in 0..trials {
        let mut rng = Rng::new(derive(9000 + trial));
        let n = 120;
        let x: Vec<f64> = (0..n).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let noise_sigma = [0.15, 0.25, 0.35][(trial % 3) as usize];
        let f = |v: f64| match trial % 3 {
            0 => v + 0.6 * v.powi(3),
            1 => (1.4 * v).sin() + 0.3 * v,
            _ => 0.5 * v.powi(3) + 0.5 * v,
        };
        let y: Vec<f64> = x.iter().map(|&v| f(v) + rng.normal(0.0, noise_sigma)).collect();
        let decision = stats::anm_direction_test(&x, &y).unwrap();
        if decision.verdict == stats::CausalVerdict::XCausesY {
            hits += 1;
        }
    }
    assert!(
        hits * 10 >= trials * 9,
        "criterion 09 anm-direction: FAIL ({hits}/{trials} correct verdicts, need >= 90%)"
    );
    println!(
        "criterion 09 anm-direction: PASS ({hits}/{trials} correct verdicts, {:.2?})",
        started.elapsed()
    );
}

// ── Criterion 10: alpha insensitivity ────────────────────────────────────

#[test]
fn criterion_10_alpha_insensitivity() {
    let m = matrix();
    let means: Vec<(f64, f64)> = m
        .alpha_grid
        .iter()
        .map(|(alpha, runs)| (*alpha, mean(&runs.accuracies)))
        .collect();
    let lo = means.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min);
    let hi = means.iter().map(|(_, m)| *m).fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    assert!(
        spread < 0.02,
        "criterion 10 alpha-insensitivity: FAIL spread {spread:.4} over {means:?}"
    );
    println!(
        "criterion 10 alpha-insensitivity: PASS (5-seed means {means:?}, spread {spread:.4})"
    );
}

// ── Criterion 11: determinism and persistence ────────────────────────────

#[test]
fn criterion_11_determinism_persistence() {
    let started = Instant::now();
    let run = || {
        let mut cfg = acceptance_pipeline().with_seed(99);
        cfg.train.steps_stage1 = 120;
        cfg.train.steps_stage2 = 40;
        cfg.train.selection_mode = SelectionMode::SmDsb;
        run_pipeline(&cfg).unwrap()
    };
    let a = run();
    let b = run();
    let cfg = {
        let mut c = acceptance_pipeline().with_seed(99);
        c.train.steps_stage1 = 120;
        c.train.steps_stage2 = 40;
        c.train.selection_mode = SelectionMode::SmDsb;
        c
    };
    let bytes = |r: &skewgrad_core::trainer::PipelineResult| {
        serde_json::to_vec(&Checkpoint::capture(&cfg.train, &r.params, 2, 40, r.final_rng)).unwrap()
    };
    assert_eq!(bytes(&a), bytes(&b), "criterion 11: same seed must give identical checkpoints");

    // Save / load / resume equals the uninterrupted run, bit for bit.
    let (source, target) = make_uda_benchmark(&cfg.benchmark).unwrap();
    let full = train_stage1(&cfg.train, cfg.dims, &source, &target, DiagnosticsOptions::default()).unwrap();
    let mut half_cfg = cfg.train.clone();
    half_cfg.steps_stage1 = 60;
    let half = train_stage1(&half_cfg, cfg.dims, &source, &target, DiagnosticsOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.json");
    skewgrad_core::trainer::save_checkpoint(
        &Checkpoint::capture(&cfg.train, &half.params, 1, 60, half.rng),
        &path,
    )
    .unwrap();
    let loaded = skewgrad_core::trainer::load_checkpoint(&path).unwrap();
    let resumed = resume_stage(
        &cfg.train,
        Stage::One,
        loaded.restore().unwrap(),
        loaded.rng_state,
        loaded.optimizer_state.clone().unwrap_or_default(),
        loaded.step,
        &source,
        &target,
        None,
        DiagnosticsOptions::default(),
    )
    .unwrap();
    assert_eq!(resumed.params, full.params, "criterion 11: resume diverged from uninterrupted run");
    assert_eq!(resumed.rng, full.rng);

    // Reloaded parameters reproduce forward outputs bitwise.
    let restored = loaded.restore().unwrap();
    let probe = &source.samples[0];
    let forward_bits = |p: &ModelParams| {
        let mut g = Graph::new();
        let bm = bind(p, &mut g, false).unwrap();
        let pts = model::points_leaf(&mut g, &probe.points, false).unwrap();
        let feat = model::encode(&mut g, &bm, pts).unwrap();
        g.values(feat).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(forward_bits(&restored), forward_bits(&half.params));
    println!(
        "criterion 11 determinism-persistence: PASS (identical checkpoints, bitwise resume, {:.2?})",
        started.elapsed()
    );
}
