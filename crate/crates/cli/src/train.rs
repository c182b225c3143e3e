//! Data preparation, evaluation and the epoch loop shared by `train` and `prune-retrain`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use dlrt_core::data::{batch_indices, load_mnist, split, synthetic_clusters, Dataset, SplitSpec, Splits};
use dlrt_core::dlrt::{dlrt_step, parameter_counts};
use dlrt_core::netcore::{cross_entropy_loss, forward, predictions, Network};
use dlrt_core::optim::OptimizerStates;
use dlrt_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, Variant};
use crate::config::{DataSource, RunConfig};
use crate::error::{io_err, Result};
use crate::logs::{join_ranks, EpochRecord, MetricsWriter, RanksWriter, METRICS_CSV, RANKS_CSV};

const SPLIT_TAG: u64 = 1;
const INIT_TAG: u64 = 2;
const BATCH_TAG: u64 = 3;
const SYNTHETIC_TAG: u64 = 4;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 500;

pub const SUMMARY_JSON: &str = "summary.json";
pub const LAST_CHECKPOINT: &str = "checkpoint-last";
pub const BEST_CHECKPOINT: &str = "checkpoint-best";
pub const DEPLOY_CHECKPOINT: &str = "checkpoint-deploy";

/// Train/validation/test sets for a run, resampled from the pooled data with the run seed.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let spec = SplitSpec { train: d.train, val: d.val, test: d.test, seed: derive_seed(cfg.seed, SPLIT_TAG) };
    let pool = match d.source {
        DataSource::Mnist => {
            let (train, test) = load_mnist(&d.resolve_dir()?)?;
            train.concat(&test)?
        }
        DataSource::Synthetic => {
            synthetic_clusters(spec.total(), 28, 28, 10, derive_seed(cfg.seed, SYNTHETIC_TAG))
        }
    };
    Ok(split(&pool, &spec)?)
}

/// Seeded initial network for a run.
pub fn initial_network(cfg: &RunConfig) -> Result<Network> {
    Ok(Network::build(&cfg.network_spec()?, derive_seed(cfg.seed, INIT_TAG))?)
}

/// Mean loss and accuracy over a dataset, in chunks spread over `threads` workers.
/// Chunk results are combined in chunk order, so the value does not depend on `threads`.
pub fn evaluate_dataset(net: &Network, ds: &Dataset, threads: usize) -> Result<(f64, f64)> {
    let chunks: Vec<Vec<usize>> =
        (0..ds.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let eval_chunk = |idx: &Vec<usize>| -> dlrt_core::Result<(f64, usize)> {
        let batch = ds.batch(idx);
        let (logits, _) = forward(net, &batch.inputs, false)?;
        let loss = cross_entropy_loss(&logits, &batch.labels)? * idx.len() as f64;
        let correct = predictions(&logits).iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        Ok((loss, correct))
    };
    let threads = threads.max(1).min(chunks.len().max(1));
    let results: Vec<dlrt_core::Result<(f64, usize)>> = if threads == 1 {
        chunks.iter().map(eval_chunk).collect()
    } else {
        let mut slots: Vec<Option<dlrt_core::Result<(f64, usize)>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let chunks = &chunks;
                    let eval_chunk = &eval_chunk;
                    scope.spawn(move || {
                        (t..chunks.len()).step_by(threads).map(|i| (i, eval_chunk(&chunks[i]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
    };
    let (mut loss, mut correct) = (0.0, 0);
    for r in results {
        let (l, c) = r?;
        loss += l;
        correct += c;
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Final numbers of a training run, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub ranks: Vec<usize>,
    pub eval_params: usize,
    pub train_params: usize,
    pub full_params: usize,
    pub eval_compression: f64,
    pub train_compression: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub history: Vec<EpochRecord>,
    pub summary: Summary,
}

/// Runs `cfg.epochs` epochs on `net`. When `out` is set, writes the CSV logs, the last,
/// best-validation and deploy checkpoints, and the summary there.
pub fn train_network(cfg: &RunConfig, mut net: Network, splits: &Splits, out: Option<&Path>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let low_rank = net.low_rank_layers();
    let (mut metrics, mut ranks_log) = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let cfg_path = dir.join("config.toml");
            fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
            (
                Some(MetricsWriter::create(&dir.join(METRICS_CSV))?),
                Some(RanksWriter::create(&dir.join(RANKS_CSV), &low_rank)?),
            )
        }
        None => (None, None),
    };
    let mut states = OptimizerStates::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best_val, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let batch_seed = derive_seed(cfg.seed, BATCH_TAG);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let policy = cfg.step_policy(epoch)?;
        let integrator = cfg.integrator.at_epoch(epoch);
        let (mut loss_sum, mut acc_sum, mut seen) = (0.0, 0.0, 0usize);
        for idx in batch_indices(splits.train.len(), cfg.batch_size, batch_seed, epoch as u64)? {
            let batch = splits.train.batch(&idx);
            let stats = dlrt_step(&mut net, &batch, &policy, &integrator, &mut states)?;
            loss_sum += stats.loss * idx.len() as f64;
            acc_sum += stats.accuracy * idx.len() as f64;
            seen += idx.len();
            step += 1;
            if cfg.log_every > 0 && step.is_multiple_of(cfg.log_every) {
                log::info!(
                    "epoch {} step {step}: loss {:.4} acc {:.4} ranks {:?}",
                    epoch + 1,
                    stats.loss,
                    stats.accuracy,
                    net.ranks()
                );
            }
        }
        let (val_loss, val_accuracy) = evaluate_dataset(&net, &splits.val, cfg.eval_threads)?;
        let counts = parameter_counts(&net.spec());
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_accuracy: acc_sum / seen as f64,
            val_loss,
            val_accuracy,
            ranks: join_ranks(&net.ranks()),
            eval_params: counts.eval,
            train_params: counts.train,
            eval_compression: counts.eval_compression(),
            train_compression: counts.train_compression(),
            lr: integrator.lr(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4} | ranks [{}]",
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            val_loss,
            val_accuracy,
            record.ranks
        );
        if let Some(w) = metrics.as_mut() {
            w.write(&record)?;
        }
        if let Some(w) = ranks_log.as_mut() {
            w.write(record.epoch, &net.ranks())?;
        }
        if val_accuracy > best_val {
            best_val = val_accuracy;
            best_epoch = record.epoch;
            if let Some(dir) = out {
                checkpoint::save(&dir.join(BEST_CHECKPOINT), &net, Variant::Training, &meta(cfg, &record))?;
            }
        }
        history.push(record);
    }

    let (test_loss, test_accuracy) = evaluate_dataset(&net.to_deploy(), &splits.test, cfg.eval_threads)?;
    let counts = parameter_counts(&net.spec());
    let summary = Summary {
        epochs: cfg.epochs,
        test_loss,
        test_accuracy,
        best_val_accuracy: best_val,
        best_epoch,
        ranks: net.ranks(),
        eval_params: counts.eval,
        train_params: counts.train,
        full_params: counts.full,
        eval_compression: counts.eval_compression(),
        train_compression: counts.train_compression(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        let mut m = history.last().map(|r| meta(cfg, r)).unwrap_or_default();
        m.metrics.insert("test_loss".into(), test_loss);
        m.metrics.insert("test_accuracy".into(), test_accuracy);
        checkpoint::save(&dir.join(LAST_CHECKPOINT), &net, Variant::Training, &m)?;
        checkpoint::save(&dir.join(DEPLOY_CHECKPOINT), &net, Variant::Deploy, &m)?;
        let path = dir.join(SUMMARY_JSON);
        fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&path))?;
    }
    log::info!("test loss {test_loss:.4} acc {test_accuracy:.4}, ranks {:?}", summary.ranks);
    Ok(TrainOutcome { net, history, summary })
}

fn meta(cfg: &RunConfig, r: &EpochRecord) -> CheckpointMeta {
    let metrics = BTreeMap::from([
        ("train_loss".to_string(), r.train_loss),
        ("train_accuracy".to_string(), r.train_accuracy),
        ("val_loss".to_string(), r.val_loss),
        ("val_accuracy".to_string(), r.val_accuracy),
    ]);
    CheckpointMeta { seed: cfg.seed, epoch: r.epoch, metrics, config: Some(cfg.clone()) }
}

/// `train` subcommand: validates the config and loads data before the first step.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let net = initial_network(cfg)?;
    train_network(cfg, net, &splits, Some(&cfg.out_dir))
}
