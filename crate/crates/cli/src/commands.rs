//! `evaluate`, `prune-retrain` and `benchmark` subcommands.

use std::fs;
use std::path::Path;
use std::time::Instant;

use dlrt_core::dlrt::{dlrt_step, parameter_counts, rank_for_threshold, LowRankFactors, TruncationPolicy};
use dlrt_core::linalg::svd_small;
use dlrt_core::netcore::{forward, Network, Weight};
use dlrt_core::optim::OptimizerStates;
use dlrt_core::data::{batch_indices, Dataset};
use dlrt_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Overrides, PolicyConfig, RunConfig};
use crate::error::{io_err, CliError, Result};
use crate::logs::{write_timings, TimingRow, TIMINGS_CSV};
use crate::train::{evaluate_dataset, initial_network, load_splits, train_network, EVAL_CHUNK};

/// Result of evaluating a checkpoint on its run's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub ranks: Vec<usize>,
    pub eval_params: usize,
    pub full_params: usize,
    pub eval_compression: f64,
    /// Largest logit difference between the stored form and the deploy form on the first
    /// evaluation chunk.
    pub deploy_logit_gap: f64,
}

/// Run config recorded in a checkpoint, with command-line overrides applied.
fn checkpoint_config(manifest: &checkpoint::Manifest, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = manifest
        .config
        .clone()
        .ok_or_else(|| CliError::Checkpoint("checkpoint does not record its run config".into()))?;
    cfg.apply(overrides);
    Ok(cfg)
}

/// Loss and accuracy of the deploy form of `net` on `ds`, plus the deploy/stored logit gap.
pub fn evaluate_network(net: &Network, ds: &Dataset, threads: usize) -> Result<(f64, f64, f64)> {
    let deploy = net.to_deploy();
    let (loss, accuracy) = evaluate_dataset(&deploy, ds, threads)?;
    let probe: Vec<usize> = (0..ds.len().min(EVAL_CHUNK)).collect();
    let x = ds.batch(&probe).inputs;
    let gap = forward(net, &x, false)?.0.max_abs_diff(&forward(&deploy, &x, false)?.0);
    Ok((loss, accuracy, gap))
}

pub fn cmd_evaluate(checkpoint_dir: &Path, overrides: &Overrides) -> Result<EvalReport> {
    let (net, manifest) = checkpoint::load(checkpoint_dir)?;
    let cfg = checkpoint_config(&manifest, overrides)?;
    let splits = load_splits(&cfg)?;
    if splits.test.features() != net.input_width() {
        return Err(CliError::Config(format!(
            "network expects {} inputs but images have {} pixels",
            net.input_width(),
            splits.test.features()
        )));
    }
    let (loss, accuracy, deploy_logit_gap) = evaluate_network(&net, &splits.test, cfg.eval_threads)?;
    let counts = parameter_counts(&net.spec());
    Ok(EvalReport {
        samples: splits.test.len(),
        loss,
        accuracy,
        ranks: net.ranks(),
        eval_params: counts.eval,
        full_params: counts.full,
        eval_compression: counts.eval_compression(),
        deploy_logit_gap,
    })
}

/// Rank choice for SVD pruning.
#[derive(Debug, Clone, PartialEq)]
pub enum PruneTarget {
    /// One rank per pruned layer, in layer order.
    Ranks(Vec<usize>),
    /// Per layer, the smallest rank whose discarded singular values have 2-norm at most
    /// `tau` times the Frobenius norm of the weight.
    Tau(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub ranks: Vec<usize>,
    pub pre_loss: f64,
    pub pre_accuracy: f64,
    pub post_loss: f64,
    pub post_accuracy: f64,
    pub retrain_epochs: usize,
    pub eval_params: usize,
    pub eval_compression: f64,
}

pub const PRUNE_REPORT: &str = "prune_report.json";

/// Replaces every dense weight except the head by its truncated SVD.
pub fn svd_prune(net: &Network, target: &PruneTarget) -> Result<Network> {
    let weight_layers: Vec<usize> =
        (0..net.layers.len()).filter(|&k| net.layers[k].affine().is_some()).collect();
    let Some((_, pruned)) = weight_layers.split_last() else {
        return Err(CliError::Config("network has no weight layers".into()));
    };
    if let PruneTarget::Ranks(r) = target {
        if r.len() != pruned.len() {
            return Err(CliError::Config(format!("{} ranks given for {} prunable layers", r.len(), pruned.len())));
        }
    }
    let mut out = net.clone();
    for (i, &k) in pruned.iter().enumerate() {
        let a = out.layers[k].affine_mut().expect("weight layer");
        let Weight::Dense(w) = &a.weight else {
            return Err(CliError::Config(format!("layer {k} is already factorized; prune needs a dense checkpoint")));
        };
        let rank = match target {
            PruneTarget::Ranks(r) => r[i],
            PruneTarget::Tau(tau) => {
                if !(*tau > 0.0 && *tau < 1.0) {
                    return Err(CliError::Config(format!("tau must lie in (0, 1), got {tau}")));
                }
                let sigma = svd_small(w).sigma;
                let norm = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
                rank_for_threshold(&sigma, tau * norm).max(1)
            }
        };
        a.weight = Weight::LowRank(LowRankFactors::from_dense(w, rank)?);
    }
    Ok(out)
}

/// `prune-retrain`: SVD-truncate a dense checkpoint, report test accuracy, retrain with
/// fixed ranks and report again.
pub fn cmd_prune_retrain(checkpoint_dir: &Path, target: &PruneTarget, overrides: &Overrides) -> Result<PruneReport> {
    let (dense, manifest) = checkpoint::load(checkpoint_dir)?;
    let mut cfg = checkpoint_config(&manifest, overrides)?;
    let pruned = svd_prune(&dense, target)?;
    let ranks = pruned.ranks();
    cfg.policy = Some(PolicyConfig::Fixed { ranks: Some(ranks.clone()) });
    cfg.arch = None;
    cfg.widths = None;
    cfg.layers = Some(pruned.spec().layers);
    cfg.validate()?;
    let splits = load_splits(&cfg)?;
    let (pre_loss, pre_accuracy) = evaluate_dataset(&pruned, &splits.test, cfg.eval_threads)?;
    log::info!("pruned to ranks {ranks:?}: test accuracy {pre_accuracy:.4} before retraining");
    let outcome = train_network(&cfg, pruned, &splits, Some(&cfg.out_dir))?;
    let counts = parameter_counts(&outcome.net.spec());
    let report = PruneReport {
        ranks,
        pre_loss,
        pre_accuracy,
        post_loss: outcome.summary.test_loss,
        post_accuracy: outcome.summary.test_accuracy,
        retrain_epochs: cfg.epochs,
        eval_params: counts.eval,
        eval_compression: counts.eval_compression(),
    };
    let path = cfg.out_dir.join(PRUNE_REPORT);
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(io_err(&path))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub ranks: Vec<usize>,
    /// Timed training steps per model, after a short warm-up.
    pub warm_batches: usize,
    /// Timed passes over the prediction set per model.
    pub repeats: usize,
    /// Prediction set size; the whole test split when `None`.
    pub predict_samples: Option<usize>,
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { ranks: vec![8, 16, 32, 64, 128], warm_batches: 50, repeats: 10, predict_samples: None, threads: 1 }
    }
}

const WARMUP_STEPS: usize = 3;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn bench_model(
    cfg: &RunConfig,
    model: &str,
    rank: Option<usize>,
    train: &Dataset,
    predict: &Dataset,
    opts: &BenchOptions,
) -> Result<TimingRow> {
    let mut net = initial_network(cfg)?;
    let spec = net.spec();
    let mut states = OptimizerStates::new();
    let integrator = cfg.integrator.at_epoch(0);
    let total = WARMUP_STEPS + opts.warm_batches;
    let mut batches = Vec::new();
    let mut epoch = 0u64;
    while batches.len() < total {
        batches.extend(batch_indices(train.len(), cfg.batch_size, derive_seed(cfg.seed, 99), epoch)?);
        epoch += 1;
    }
    let mut step_times = Vec::with_capacity(opts.warm_batches);
    for (i, idx) in batches.iter().take(total).enumerate() {
        let batch = train.batch(idx);
        let t = Instant::now();
        dlrt_step(&mut net, &batch, &TruncationPolicy::Fixed, &integrator, &mut states)?;
        if i >= WARMUP_STEPS {
            step_times.push(t.elapsed().as_secs_f64());
        }
    }
    let deploy = net.to_deploy();
    let mut predict_times = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let t = Instant::now();
        evaluate_dataset(&deploy, predict, opts.threads)?;
        predict_times.push(t.elapsed().as_secs_f64());
    }
    let (step_mean_s, step_std_s) = mean_std(&step_times);
    let (predict_mean_s, predict_std_s) = mean_std(&predict_times);
    log::info!("{model}: step {step_mean_s:.4}s ± {step_std_s:.4}, predict {predict_mean_s:.4}s ± {predict_std_s:.4}");
    Ok(TimingRow {
        model: model.into(),
        rank,
        batch_size: cfg.batch_size,
        step_mean_s,
        step_std_s,
        predict_mean_s,
        predict_std_s,
        predict_samples: predict.len(),
        op_count: dlrt_core::dlrt::step_cost_model(&spec),
        eval_params: parameter_counts(&spec).eval,
    })
}

/// `benchmark`: training-step and prediction timings for every rank in `opts.ranks`
/// (all low-rank layers at that rank) and for the dense baseline; writes `timings.csv`.
pub fn cmd_benchmark(cfg: &RunConfig, opts: &BenchOptions) -> Result<Vec<TimingRow>> {
    if opts.warm_batches == 0 || opts.repeats == 0 {
        return Err(CliError::Config("warm_batches and repeats must be positive".into()));
    }
    let base = RunConfig { policy: Some(PolicyConfig::Fixed { ranks: None }), ..cfg.clone() };
    let n_low_rank = base.network_spec()?.layers.iter().filter(|l| l.is_low_rank()).count();
    let mut runs = Vec::new();
    for &r in &opts.ranks {
        let c = RunConfig { policy: Some(PolicyConfig::Fixed { ranks: Some(vec![r; n_low_rank]) }), ..cfg.clone() };
        c.validate()?;
        runs.push((format!("dlrt-r{r}"), Some(r), c));
    }
    let dense = RunConfig { policy: Some(PolicyConfig::Dense), ..cfg.clone() };
    dense.validate()?;
    runs.push(("dense".into(), None, dense));

    let splits = load_splits(cfg)?;
    let predict = match opts.predict_samples {
        Some(n) => splits.test.subset(&(0..n.min(splits.test.len())).collect::<Vec<_>>()),
        None => splits.test.clone(),
    };
    let mut rows = Vec::with_capacity(runs.len());
    for (model, rank, c) in &runs {
        rows.push(bench_model(c, model, *rank, &splits.train, &predict, opts)?);
    }
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    write_timings(&cfg.out_dir.join(TIMINGS_CSV), &rows)?;
    Ok(rows)
}
