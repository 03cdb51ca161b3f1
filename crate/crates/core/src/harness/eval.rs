//! Closed-loop evaluation with receding-horizon execution. Episodes run in
//! lockstep so one batched denoising pass plans for every active episode.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::align::DeltaPose;
use crate::sim::{Env, Expert, Failure, StepOutput, TaskSpec};

use super::collect::{compensate_stream, eval_seed};
use super::dataset::{EpisodeStreams, ObsBuilder, ACTION_DIMS};
use super::train::TrainedPolicy;
use super::{fmt6, io_err, ExperimentConfig, HarnessError};

pub const THREADS_ENV: &str = "FMTFORGE_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub frames: usize,
    pub failure: Option<Failure>,
    /// Compensated wrench trace `(t, w)`.
    pub trace: Vec<(f64, [f32; 6])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeResult>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }

    /// One row per episode plus a header.
    pub fn episodes_csv(&self) -> String {
        let mut s = String::from("episode,seed,success,frames,failure\n");
        for e in &self.episodes {
            let failure = e.failure.map_or("none".to_string(), |f| format!("{f:?}").to_lowercase());
            let _ = writeln!(s, "{},{},{},{},{}", e.episode, e.seed, u8::from(e.success), e.frames, failure);
        }
        s
    }

    pub fn traces_csv(&self) -> String {
        let mut s = String::from("episode,t,fx,fy,fz,tx,ty,tz\n");
        for e in &self.episodes {
            for (t, w) in &e.trace {
                let _ = write!(s, "{},{}", e.episode, fmt6(*t));
                for v in w {
                    let _ = write!(s, ",{}", fmt6(*v as f64));
                }
                s.push('\n');
            }
        }
        s
    }

    /// Writes `episodes.csv`, `traces.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, text) in [
            ("episodes.csv", self.episodes_csv()),
            ("traces.csv", self.traces_csv()),
            ("summary.csv", format!("episodes,success_rate\n{},{}\n", self.episodes.len(), fmt6(self.success_rate()))),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Rollout parallelism: `FMTFORGE_THREADS` if set, else all cores.
pub fn rollout_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_parallel<F>(cfg: &ExperimentConfig, f: F) -> Result<EvalReport, HarnessError>
where
    F: Fn(&[usize]) -> Result<Vec<EpisodeResult>, HarnessError> + Sync,
{
    let n = cfg.eval_episodes;
    let threads = rollout_threads().min(n).max(1);
    let ids: Vec<usize> = (0..n).collect();
    let chunk = n.div_ceil(threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let parts: Vec<Result<Vec<EpisodeResult>, HarnessError>> = pool.install(|| ids.par_chunks(chunk).map(&f).collect());
    let mut episodes = Vec::with_capacity(n);
    for p in parts {
        episodes.extend(p?);
    }
    Ok(EvalReport { episodes })
}

struct Rollout {
    env: Env,
    streams: EpisodeStreams,
    queue: VecDeque<DeltaPose>,
    rng: ChaCha8Rng,
    trace: Vec<(f64, [f32; 6])>,
}

impl Rollout {
    fn start(spec: &TaskSpec, seed: u64, render: bool) -> Result<Self, HarnessError> {
        let (env, frame) = Env::reset(spec, seed, render)?;
        let side = (frame.cam1.len() as f64).sqrt() as usize;
        let streams = EpisodeStreams {
            side,
            cam1_t: vec![frame.cam1_t],
            cam1: frame.cam1,
            cam2_t: vec![frame.cam2_t],
            cam2: frame.cam2,
            pose: vec![env.state().pose().to_array()],
            ..EpisodeStreams::default()
        };
        Ok(Self { env, streams, queue: VecDeque::new(), rng: ChaCha8Rng::seed_from_u64(seed), trace: Vec::new() })
    }

    fn record(&mut self, out: StepOutput) -> Result<(), HarnessError> {
        let raw: Vec<[f64; 6]> = out.ft.iter().map(|s| s.1).collect();
        let imu: Vec<[f64; 3]> = out.imu.iter().map(|s| s.1).collect();
        let comp = compensate_stream(self.env.spec(), &raw, &imu)?;
        for ((t, _), w) in out.ft.iter().zip(comp) {
            self.streams.ft_t.push(*t);
            self.streams.ft.push(w.map(|v| v as f64));
            self.trace.push((*t, w));
        }
        let f = out.frame;
        self.streams.cam1_t.push(f.cam1_t);
        self.streams.cam1.extend_from_slice(&f.cam1);
        self.streams.cam2_t.push(f.cam2_t);
        self.streams.cam2.extend_from_slice(&f.cam2);
        self.streams.pose.push(self.env.state().pose().to_array());
        Ok(())
    }

    fn finish(self, episode: usize, seed: u64) -> EpisodeResult {
        let st = self.env.state();
        EpisodeResult { episode, seed, success: st.success, frames: st.frame + 1, failure: st.failure, trace: self.trace }
    }
}

fn policy_rollouts(policy: &TrainedPolicy, cfg: &ExperimentConfig, ids: &[usize]) -> Result<Vec<EpisodeResult>, HarnessError> {
    let spec = cfg.task_spec();
    let net_cfg = &policy.policy.net.config;
    let builder = ObsBuilder::new(&net_cfg.fmt, cfg.ft_rate);
    let (h, a) = (net_cfg.head.horizon, net_cfg.head.action_dim);
    let seeds: Vec<u64> = ids.iter().map(|&i| eval_seed(cfg.seed, i)).collect();
    let mut runs = seeds.iter().map(|&s| Rollout::start(&spec, s, true)).collect::<Result<Vec<_>, _>>()?;
    loop {
        let active: Vec<usize> = (0..runs.len()).filter(|&k| !runs[k].env.done()).collect();
        if active.is_empty() {
            break;
        }
        let plan: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&k| runs[k].queue.is_empty() || runs[k].env.state().frame % cfg.n_exec == 0)
            .collect();
        if !plan.is_empty() {
            let obs = plan
                .iter()
                .map(|&k| builder.observation(&runs[k].streams, runs[k].env.state().frame))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<_> = obs.iter().collect();
            let mut rngs: Vec<ChaCha8Rng> = plan.iter().map(|&k| runs[k].rng.clone()).collect();
            let chunks = policy.policy.sample(&refs, &mut rngs)?;
            for ((&k, chunk), rng) in plan.iter().zip(chunks).zip(rngs) {
                let run = &mut runs[k];
                run.rng = rng;
                run.queue.clear();
                for step in chunk.chunks(a).take(cfg.n_exec.min(h)) {
                    let v: Vec<f64> = step.iter().map(|&x| x as f64).collect();
                    let d = policy.stats.denormalize(&v);
                    let mut delta = [0.0; 6];
                    for (slot, val) in ACTION_DIMS.iter().zip(d) {
                        delta[*slot] = val;
                    }
                    run.queue.push_back(delta);
                }
            }
        }
        for &k in &active {
            let run = &mut runs[k];
            let action = run.queue.pop_front().unwrap_or([0.0; 6]);
            let out = run.env.step(&action)?;
            run.record(out)?;
        }
    }
    Ok(runs.into_iter().zip(ids.iter().zip(seeds)).map(|(r, (&i, s))| r.finish(i, s)).collect())
}

/// Evaluates a trained policy on `cfg.eval_episodes` fresh seeds.
pub fn eval_policy(policy: &TrainedPolicy, cfg: &ExperimentConfig) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let want = cfg.policy_config();
    let have = &policy.policy.net.config;
    if have.fmt != want.fmt || have.head != want.head {
        return Err(super::ConfigError::Invalid("checkpoint architecture does not match the config (model or ablation flags)".into()).into());
    }
    run_parallel(cfg, |ids| policy_rollouts(policy, cfg, ids))
}

/// Runs the scripted expert through the same rollout loop.
pub fn eval_expert(cfg: &ExperimentConfig) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let spec = cfg.task_spec();
    run_parallel(cfg, |ids| {
        ids.iter()
            .map(|&i| {
                let seed = eval_seed(cfg.seed, i);
                let mut run = Rollout::start(&spec, seed, false)?;
                let mut expert = Expert::new(cfg.n_exec);
                while !run.env.done() {
                    let action = expert.act(run.env.spec(), run.env.state());
                    let out = run.env.step(&action)?;
                    run.record(out)?;
                }
                Ok(run.finish(i, seed))
            })
            .collect()
    })
}
