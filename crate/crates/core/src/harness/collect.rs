use std::path::Path;

use nalgebra::Vector3;

use crate::sim::{Env, Expert, TaskSpec, FRAME_HZ, FT_HZ};
use crate::wrench::{compensate_with_imu, FrameId, RigidRotation, ToolInertia, Wrench};

use super::store::{EpisodeMeta, EpisodeStore, StreamData, StreamValues};
use super::{ExperimentConfig, HarnessError};

/// Seed of demonstration `i` for base seed `base`.
pub fn demo_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(100_000).wrapping_add(i as u64)
}

/// Seed of evaluation episode `i`; disjoint from demonstration seeds.
pub fn eval_seed(base: u64, i: usize) -> u64 {
    (1u64 << 40).wrapping_add(base.wrapping_mul(100_000)).wrapping_add(i as u64)
}

const MAX_ATTEMPTS_PER_DEMO: usize = 5;

/// Runs the scripted expert on one seed and returns the recorded streams,
/// with the wrench stream gravity-compensated from the IMU.
pub fn record_episode(spec: &TaskSpec, seed: u64, n_exec: usize) -> Result<(EpisodeMeta, Vec<StreamData>), HarnessError> {
    let (mut env, first) = Env::reset(spec, seed, true)?;
    let mut expert = Expert::new(n_exec);
    let (mut cam1_t, mut cam1, mut cam2_t, mut cam2) = (vec![first.cam1_t], first.cam1, vec![first.cam2_t], first.cam2);
    let mut pose = env.state().pose().to_array().to_vec();
    let (mut ft_t, mut ft_raw, mut imu) = (Vec::new(), Vec::new(), Vec::new());
    while !env.done() {
        let action = expert.act(env.spec(), env.state());
        let out = env.step(&action)?;
        cam1_t.push(out.frame.cam1_t);
        cam1.extend_from_slice(&out.frame.cam1);
        cam2_t.push(out.frame.cam2_t);
        cam2.extend_from_slice(&out.frame.cam2);
        pose.extend_from_slice(&env.state().pose().to_array());
        for ((t, w), (_, g)) in out.ft.iter().zip(&out.imu) {
            ft_t.push(*t);
            ft_raw.push(*w);
            imu.push(*g);
        }
    }
    let ft: Vec<f32> = compensate_stream(spec, &ft_raw, &imu)?.iter().flatten().copied().collect();
    let side = (spec_image_pixels(&cam1, cam1_t.len()) as f64).sqrt() as usize;
    let f32s = |v: Vec<[f64; 6]>| v.iter().flatten().map(|&x| x as f32).collect::<Vec<f32>>();
    let st = env.state();
    let meta = EpisodeMeta {
        index: 0,
        seed,
        frames: cam1_t.len(),
        success: st.success,
        failure: st.failure,
        spikes: st.spikes.clone(),
        streams: Vec::new(),
    };
    let image = |name: &str, times: Vec<f64>, v: Vec<f32>| StreamData {
        name: name.into(),
        shape: vec![side, side, 1],
        rate_hz: FRAME_HZ as f64,
        times,
        values: StreamValues::F32(v),
    };
    let streams = vec![
        image("cam1", cam1_t.clone(), cam1),
        image("cam2", cam2_t, cam2),
        StreamData { name: "ft".into(), shape: vec![6], rate_hz: FT_HZ as f64, times: ft_t.clone(), values: StreamValues::F32(ft) },
        StreamData { name: "ft_raw".into(), shape: vec![6], rate_hz: FT_HZ as f64, times: ft_t.clone(), values: StreamValues::F32(f32s(ft_raw)) },
        StreamData {
            name: "imu".into(),
            shape: vec![3],
            rate_hz: FT_HZ as f64,
            times: ft_t,
            values: StreamValues::F32(imu.iter().flatten().map(|&x| x as f32).collect()),
        },
        StreamData { name: "pose".into(), shape: vec![7], rate_hz: FRAME_HZ as f64, times: cam1_t, values: StreamValues::F64(pose) },
    ];
    Ok((meta, streams))
}

/// Gravity-compensated wrenches, rounded to the stored precision.
pub(crate) fn compensate_stream(spec: &TaskSpec, raw: &[[f64; 6]], imu: &[[f64; 3]]) -> Result<Vec<[f32; 6]>, HarnessError> {
    let rt = |e: crate::wrench::WrenchError| HarnessError::Runtime(e.to_string());
    let tool = ToolInertia::new(spec.tool_mass, Vector3::from(spec.r_com)).map_err(rt)?;
    let r = RigidRotation::identity();
    raw.iter()
        .zip(imu)
        .map(|(w, g)| {
            let w = Wrench::from_array(*w, FrameId::sensor()).map_err(rt)?;
            let c = compensate_with_imu(&w, &r, &Vector3::from(*g), &tool).map_err(rt)?;
            Ok(c.to_array().map(|v| v as f32))
        })
        .collect()
}

fn spec_image_pixels(images: &[f32], frames: usize) -> usize {
    images.len() / frames.max(1)
}

/// Collects `config.demos` successful expert demonstrations into `out`.
pub fn collect(config: &ExperimentConfig, out: &Path) -> Result<EpisodeStore, HarnessError> {
    config.validate()?;
    let spec = config.task_spec();
    let mut store = EpisodeStore::create(out, config.task, spec.clone())?;
    let mut i = 0usize;
    let limit = config.demos * MAX_ATTEMPTS_PER_DEMO;
    while store.len() < config.demos {
        if i >= limit {
            return Err(HarnessError::Runtime(format!("expert succeeded on only {} of {i} episodes", store.len())));
        }
        let seed = demo_seed(config.seed, i);
        i += 1;
        let (meta, streams) = record_episode(&spec, seed, config.n_exec)?;
        if !meta.success {
            log::warn!("expert failed on seed {seed} ({:?}); skipping", meta.failure);
            continue;
        }
        store.append(meta, &streams)?;
    }
    log::info!("collected {} demonstrations in {i} attempts", store.len());
    Ok(store)
}

/// Re-derives the compensated `ft` stream of every episode in `src` from its
/// raw wrench and IMU streams using `tool`, optionally rescaling the IMU
/// gravity vector to magnitude `gravity`. Writes the result to `dest`.
pub fn recompensate(src: &EpisodeStore, dest: &Path, tool: &ToolInertia<f64>, gravity: Option<f64>) -> Result<EpisodeStore, HarnessError> {
    let rt = |e: crate::wrench::WrenchError| HarnessError::Runtime(e.to_string());
    let mut out = EpisodeStore::create(dest, src.manifest().task, src.manifest().spec.clone())?;
    let r = RigidRotation::identity();
    for ep in 0..src.len() {
        let meta = src.episode(ep).clone();
        let (t, raw) = src.read_f32(ep, "ft_raw")?;
        let (_, imu) = src.read_f32(ep, "imu")?;
        let mut ft = Vec::with_capacity(raw.len());
        for (w, g) in raw.chunks_exact(6).zip(imu.chunks_exact(3)) {
            let mut g = Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64);
            if let Some(mag) = gravity {
                let n = g.norm();
                if n > 0.0 {
                    g *= mag / n;
                }
            }
            let w = Wrench::from_array(std::array::from_fn(|k| w[k] as f64), FrameId::sensor()).map_err(rt)?;
            let c = compensate_with_imu(&w, &r, &g, tool).map_err(rt)?;
            ft.extend(c.to_array().map(|v| v as f32));
        }
        let mut streams = Vec::with_capacity(meta.streams.len());
        for desc in &meta.streams {
            if desc.name == "ft" {
                streams.push(StreamData { name: "ft".into(), shape: vec![6], rate_hz: desc.rate_hz, times: t.clone(), values: StreamValues::F32(ft.clone()) });
            } else {
                streams.push(src.read(ep, &desc.name)?);
            }
        }
        out.append(meta, &streams)?;
    }
    Ok(out)
}
