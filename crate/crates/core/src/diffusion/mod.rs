//! Denoising diffusion action head conditioned on fused observation tokens.

mod schedule;

pub use schedule::{DiffusionSchedule, ScheduleConfig, ScheduleError};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::fmt::{FmtConfig, FmtEncoder, Observation};
use crate::nn::{repeat_rows, sinusoidal_embedding, Attention, KeyValues, LayerNorm, Linear, Mlp};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub action_dim: usize,
    /// Actions per predicted chunk.
    pub horizon: usize,
    pub layers: usize,
    pub heads: usize,
    pub step_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { action_dim: 3, horizon: 8, layers: 2, heads: 4, step_embed_dim: 64, mlp_ratio: 4 }
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

/// Noise-prediction network: causal self-attention over action tokens,
/// cross-attention to the observation tokens, MLP.
#[derive(Debug, Clone)]
pub struct NoiseHead {
    pub config: HeadConfig,
    d: usize,
    action_in: Linear,
    pos: ParamId,
    step_fc1: Linear,
    step_fc2: Linear,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    action_out: Linear,
}

/// Per-layer keys/values of the observation tokens, reused across all
/// denoising steps of one sampling call.
#[derive(Debug, Clone)]
pub struct ObsCache {
    kv: Vec<KeyValues>,
    batch: usize,
}

impl NoiseHead {
    pub fn new<T: Scalar>(config: HeadConfig, d: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, TensorError> {
        if config.action_dim == 0 || config.horizon == 0 || config.step_embed_dim < 2 {
            return Err(TensorError::Invalid { op: "head_config", msg: format!("{config:?}") });
        }
        let layers = (0..config.layers)
            .map(|i| {
                let n = format!("head.layer{i}");
                Ok(DecoderLayer {
                    norm_self: LayerNorm::new(store, &format!("{n}.norm_self"), d)?,
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), d, config.heads, rng)?,
                    norm_cross: LayerNorm::new(store, &format!("{n}.norm_cross"), d)?,
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), d, config.heads, rng)?,
                    norm_mlp: LayerNorm::new(store, &format!("{n}.norm_mlp"), d)?,
                    mlp: Mlp::new(store, &format!("{n}.mlp"), d, config.mlp_ratio * d, rng)?,
                })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(Self {
            d,
            action_in: Linear::new(store, "head.action_in", config.action_dim, d, rng)?,
            pos: store.normal("head.pos", &[config.horizon, d], 0.02, rng)?,
            step_fc1: Linear::new(store, "head.step_fc1", config.step_embed_dim, d, rng)?,
            step_fc2: Linear::new(store, "head.step_fc2", d, d, rng)?,
            layers,
            final_norm: LayerNorm::new(store, "head.final_norm", d)?,
            action_out: Linear::new(store, "head.action_out", d, config.action_dim, rng)?,
            config,
        })
    }

    pub fn prepare<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, t_obs: Var) -> Result<ObsCache, TensorError> {
        let shape = t.shape(t_obs).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(TensorError::Shape { op: "predict_noise", lhs: shape, rhs: vec![self.d] });
        }
        let kv = self.layers.iter().map(|l| l.cross_attn.key_values(t, s, t_obs)).collect::<Result<Vec<_>, _>>()?;
        Ok(ObsCache { kv, batch: shape[0] })
    }

    /// Predicted noise `[B, H, A]` for noisy actions `a_k` at steps `ks`.
    pub fn predict<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        a_k: Var,
        ks: &[usize],
        cache: &ObsCache,
    ) -> Result<Var, TensorError> {
        let c = &self.config;
        let shape = t.shape(a_k).to_vec();
        if shape != [cache.batch, c.horizon, c.action_dim] || ks.len() != cache.batch {
            return Err(TensorError::Shape { op: "predict_noise", lhs: shape, rhs: vec![cache.batch, c.horizon, c.action_dim] });
        }
        let mut x = self.action_in.forward(t, s, a_k)?;
        let pos = t.param(s, self.pos);
        x = t.embedding_add(x, pos)?;
        let steps = t.constant(sinusoidal_embedding(ks, c.step_embed_dim));
        let e = self.step_fc1.forward(t, s, steps)?;
        let e = t.gelu(e)?;
        let e = self.step_fc2.forward(t, s, e)?;
        let e = repeat_rows(t, e, c.horizon)?;
        x = t.add(x, e)?;
        for (layer, kv) in self.layers.iter().zip(&cache.kv) {
            let h = layer.norm_self.forward(t, s, x)?;
            let h = layer.self_attn.forward(t, s, h, h, true)?;
            x = t.add(x, h)?;
            let h = layer.norm_cross.forward(t, s, x)?;
            let (h, _) = layer.cross_attn.attend(t, s, h, *kv, false)?;
            x = t.add(x, h)?;
            let h = layer.norm_mlp.forward(t, s, x)?;
            let h = layer.mlp.forward(t, s, h)?;
            x = t.add(x, h)?;
        }
        let x = self.final_norm.forward(t, s, x)?;
        self.action_out.forward(t, s, x)
    }
}

/// Noised training targets for one batch.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub a_k: Vec<f64>,
    pub eps: Vec<f64>,
    pub ks: Vec<usize>,
}

/// Draws one step per batch element uniformly from `1..=K` and Gaussian
/// noise per coordinate; `a0` is `batch` chunks of equal length.
pub fn noise_batch(schedule: &DiffusionSchedule, a0: &[f64], batch: usize, rng: &mut impl Rng) -> NoisedBatch {
    let per = a0.len() / batch.max(1);
    let ks: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps: Vec<f64> = (0..a0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let mut a_k = Vec::with_capacity(a0.len());
    for (b, &k) in ks.iter().enumerate() {
        let r = b * per..(b + 1) * per;
        a_k.extend(schedule.forward_noise(&a0[r.clone()], k, &eps[r]).expect("k drawn in range"));
    }
    NoisedBatch { a_k, eps, ks }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub fmt: FmtConfig,
    pub head: HeadConfig,
    pub diffusion: ScheduleConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { fmt: FmtConfig::default(), head: HeadConfig::default(), diffusion: ScheduleConfig::default() }
    }
}

/// Encoder, noise head and schedule; parameters are held separately.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub encoder: FmtEncoder,
    pub head: NoiseHead,
    pub schedule: DiffusionSchedule,
}

impl PolicyNet {
    pub fn new<T: Scalar>(config: PolicyConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, TensorError> {
        let schedule = DiffusionSchedule::from_config(&config.diffusion)
            .map_err(|e| TensorError::Invalid { op: "schedule", msg: e.to_string() })?;
        let encoder = FmtEncoder::new(config.fmt.clone(), store, rng)?;
        let head = NoiseHead::new(config.head.clone(), config.fmt.d, store, rng)?;
        Ok(Self { config, encoder, head, schedule })
    }

    pub fn chunk_len(&self) -> usize {
        self.config.head.horizon * self.config.head.action_dim
    }

    /// Noise-prediction MSE for a batch of observations and clean
    /// normalized action chunks.
    pub fn loss<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        obs: &[&Observation],
        actions: &[&[f32]],
        rng: &mut impl Rng,
    ) -> Result<Var, TensorError> {
        let (h, a) = (self.config.head.horizon, self.config.head.action_dim);
        if actions.len() != obs.len() || actions.iter().any(|c| c.len() != h * a) {
            return Err(TensorError::Shape { op: "diffusion_loss", lhs: vec![actions.len(), actions.first().map_or(0, |c| c.len())], rhs: vec![obs.len(), h * a] });
        }
        let a0: Vec<f64> = actions.iter().flat_map(|c| c.iter().map(|&v| v as f64)).collect();
        let nb = noise_batch(&self.schedule, &a0, obs.len(), rng);
        let t_obs = self.encoder.encode(t, s, obs)?;
        let cache = self.head.prepare(t, s, t_obs)?;
        let a_k = t.constant(Tensor::from_f64(&[obs.len(), h, a], &nb.a_k)?);
        let eps = t.constant(Tensor::from_f64(&[obs.len(), h, a], &nb.eps)?);
        let pred = self.head.predict(t, s, a_k, &nb.ks, &cache)?;
        t.mse_loss(pred, eps)
    }

    /// Ancestral sampling of one action chunk per observation; row `i`
    /// draws all of its noise from `rngs[i]`.
    pub fn sample<T: Scalar>(&self, s: &ParamStore<T>, obs: &[&Observation], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Vec<f32>>, TensorError> {
        let mut t = Tape::new().with_finite_check(true);
        let t_obs = self.encoder.encode(&mut t, s, obs)?;
        let cache = self.head.prepare(&mut t, s, t_obs)?;
        sample_with(&self.head, &self.schedule, &mut t, s, &cache, rngs)
    }
}

/// Reverse diffusion loop from pure noise given prepared observation keys.
pub fn sample_with<T: Scalar>(
    head: &NoiseHead,
    schedule: &DiffusionSchedule,
    t: &mut Tape<T>,
    s: &ParamStore<T>,
    cache: &ObsCache,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<f32>>, TensorError> {
    let (h, a) = (head.config.horizon, head.config.action_dim);
    let b = cache.batch;
    if rngs.len() != b {
        return Err(TensorError::Contract(format!("{} rngs for batch of {b}", rngs.len())));
    }
    let per = h * a;
    let mut x: Vec<f64> = Vec::with_capacity(b * per);
    for rng in rngs.iter_mut() {
        x.extend((0..per).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let mark = t.len();
    for k in (1..=schedule.steps()).rev() {
        let xk = t.constant(Tensor::from_f64(&[b, h, a], &x)?);
        let eps = head.predict(t, s, xk, &vec![k; b], cache)?;
        let eps = t.value(eps).to_f64_vec();
        t.truncate(mark);
        for (row, rng) in rngs.iter_mut().enumerate() {
            let r = row * per..(row + 1) * per;
            let noise: Vec<f64> = if k > 1 { (0..per).map(|_| rng.sample(StandardNormal)).collect() } else { vec![0.0; per] };
            schedule.reverse_step(&mut x[r.clone()], &eps[r], k, &noise);
        }
    }
    Ok(x.chunks(per).map(|c| c.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect()).collect())
}

/// Trainable policy with its own parameters.
#[derive(Debug, Clone)]
pub struct Policy<T> {
    pub net: PolicyNet,
    pub store: ParamStore<T>,
}

const CONFIG_FILE: &str = "policy.json";

impl<T: Scalar> Policy<T> {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, TensorError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PolicyNet::new(config, &mut store, &mut rng)?;
        Ok(Self { net, store })
    }

    pub fn sample(&self, obs: &[&Observation], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Vec<f32>>, TensorError> {
        self.net.sample(&self.store, obs, rngs)
    }

    /// Writes the parameter checkpoint and `policy.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TensorError> {
        save_checkpoint(dir, &self.store)?;
        let path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.net.config)
            .map_err(|e| TensorError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })?;
        std::fs::write(&path, json).map_err(|e| TensorError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })
    }

    pub fn load(dir: &Path) -> Result<Self, TensorError> {
        let path = dir.join(CONFIG_FILE);
        let err = |msg: String| TensorError::Checkpoint { path: path.display().to_string(), msg };
        let text = std::fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
        let config: PolicyConfig = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let mut policy = Self::new(config, 0)?;
        let loaded = load_checkpoint(dir)?;
        policy.store.load_from(&loaded)?;
        Ok(policy)
    }
}

#[cfg(test)]
mod tests;
