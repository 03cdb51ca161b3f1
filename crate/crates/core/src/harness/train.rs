use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::ActionStats;
use crate::diffusion::Policy;
use crate::tensor::{AdamW, Tape};

use super::dataset::{build_dataset, Dataset};
use super::store::EpisodeStore;
use super::{fmt6, io_err, ExperimentConfig, HarnessError};

const STATS_FILE: &str = "action_stats.json";

/// Policy together with the action normalization it was trained with.
#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub policy: Policy<f32>,
    pub stats: ActionStats,
}

impl TrainedPolicy {
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.policy.save(dir)?;
        let path = dir.join(STATS_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.stats).expect("stats serialize")).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let policy = Policy::load(dir)?;
        let path = dir.join(STATS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let stats = serde_json::from_str(&text).map_err(|e| HarnessError::Store { path, msg: e.to_string() })?;
        Ok(Self { policy, stats })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub samples: usize,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        let mut text = String::from("epoch,loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            text.push_str(&format!("{},{}\n", e + 1, fmt6(*l)));
        }
        f.write_all(text.as_bytes()).map_err(io_err(path))
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains a policy on `dataset`; deterministic given `seed`.
pub fn train_on(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<(TrainedPolicy, TrainReport), HarnessError> {
    let mut policy = Policy::<f32>::new(cfg.policy_config(), seed)?;
    let mut opt = AdamW::new(cfg.train.optimizer.clone(), &policy.store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f0d_e2);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff_0000_57e9);
    let n = dataset.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.train.epochs);
    let mut steps = 0usize;
    let total_steps = (cfg.train.epochs * n.div_ceil(cfg.train.batch_size.max(1))).max(1);
    let base_lr = cfg.train.optimizer.lr;
    let mut ema = (cfg.train.ema_decay > 0.0).then(|| policy.store.clone());
    let started = Instant::now();
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.train.batch_size) {
            let obs: Vec<_> = batch.iter().map(|&k| &dataset.samples[k].obs).collect();
            let acts: Vec<&[f32]> = batch.iter().map(|&k| dataset.samples[k].actions.as_slice()).collect();
            let mut tape = Tape::new();
            let loss = policy.net.loss(&mut tape, &policy.store, &obs, &acts, &mut noise_rng)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: steps,
                    diagnostics: format!("loss {value}, lr {}, batch {:?}", opt.config.lr, &batch[..batch.len().min(8)]),
                });
            }
            let grads = tape.backward(loss)?;
            if cfg.train.cosine_lr {
                opt.config.lr = 0.5 * base_lr * (1.0 + (std::f64::consts::PI * steps as f64 / total_steps as f64).cos());
            }
            let norm = opt.step(&mut policy.store, &grads);
            if !norm.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: steps,
                    diagnostics: format!("gradient norm {norm} at loss {value}"),
                });
            }
            if let Some(avg) = ema.as_mut() {
                let decay = cfg.train.ema_decay.min((1.0 + steps as f64) / (10.0 + steps as f64));
                avg.blend_from(&policy.store, decay);
            }
            sum += value * batch.len() as f64;
            count += batch.len();
            steps += 1;
        }
        let mean = sum / count as f64;
        log::debug!("epoch {} loss {mean:.6} ({:.1} s)", epoch + 1, started.elapsed().as_secs_f64());
        epoch_losses.push(mean);
    }
    if let Some(avg) = ema {
        policy.store = avg;
    }
    let report = TrainReport { epoch_losses, steps, samples: n };
    Ok((TrainedPolicy { policy, stats: dataset.stats.clone() }, report))
}

/// Builds the dataset from `store`, trains, and writes the checkpoint and
/// `loss.csv` into `out` when given.
pub fn train(cfg: &ExperimentConfig, store: &EpisodeStore, out: Option<&Path>, seed: u64) -> Result<(TrainedPolicy, TrainReport), HarnessError> {
    cfg.validate()?;
    if store.manifest().task != cfg.task {
        return Err(super::ConfigError::Invalid(format!("store holds {:?} episodes but config task is {:?}", store.manifest().task, cfg.task)).into());
    }
    let dataset = build_dataset(store, cfg)?;
    let (trained, report) = train_on(cfg, &dataset, seed)?;
    if let Some(dir) = out {
        trained.save(&dir.join("checkpoint"))?;
        report.write_csv(&dir.join("loss.csv"))?;
    }
    Ok((trained, report))
}
