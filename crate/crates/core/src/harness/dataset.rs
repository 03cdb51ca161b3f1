//! Turns time-stamped episode streams into policy observations and
//! normalized action chunks. The same builder serves training (whole
//! recorded episodes) and evaluation (growing online histories).

use crate::align::{assign_windows, decimate, pair_cameras, pose_delta, resample_block, ActionStats, Pose};
use crate::fmt::{square_pad_resize, FmtConfig, Observation, FT_DIM};

use super::store::EpisodeStore;
use super::{ExperimentConfig, HarnessError};

/// Fixed divisors mapping compensated wrenches (N, N·m) to unit scale.
pub const FT_SCALE: [f64; 6] = [5.0, 5.0, 5.0, 0.5, 0.5, 0.5];
/// Pose-delta components used as policy actions: x, z and yaw.
pub const ACTION_DIMS: [usize; 3] = [0, 2, 5];
const CAMERA_SKEW: f64 = 1.0 / 60.0;
const NOMINAL_FRAME_DT: f64 = 1.0 / 30.0;

/// Time-stamped streams of one episode, compensated wrenches at full rate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStreams {
    pub side: usize,
    pub cam1_t: Vec<f64>,
    pub cam1: Vec<f32>,
    pub cam2_t: Vec<f64>,
    pub cam2: Vec<f32>,
    pub ft_t: Vec<f64>,
    pub ft: Vec<[f64; 6]>,
    pub pose: Vec<[f64; 7]>,
}

impl EpisodeStreams {
    pub fn frames(&self) -> usize {
        self.cam1_t.len()
    }

    /// Reads episode `ep`; the wrench stream is only touched when `with_ft`.
    pub fn read(store: &EpisodeStore, ep: usize, with_ft: bool) -> Result<Self, HarnessError> {
        let meta = store.episode(ep);
        let side = meta.stream("cam1").map(|s| s.shape[0]).unwrap_or(0);
        let (cam1_t, cam1) = store.read_f32(ep, "cam1")?;
        let (cam2_t, cam2) = store.read_f32(ep, "cam2")?;
        let (_, pose) = store.read_f64(ep, "pose")?;
        let pose = pose.chunks_exact(7).map(|c| c.try_into().unwrap()).collect();
        let (ft_t, ft) = if with_ft {
            let (t, v) = store.read_f32(ep, "ft")?;
            (t, v.chunks_exact(FT_DIM).map(|c| std::array::from_fn(|k| c[k] as f64)).collect())
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self { side, cam1_t, cam1, cam2_t, cam2, ft_t, ft, pose })
    }
}

#[derive(Debug, Clone)]
pub struct ObsBuilder {
    fmt: FmtConfig,
    ft_rate: f64,
}

impl ObsBuilder {
    pub fn new(fmt: &FmtConfig, ft_rate: u32) -> Self {
        Self { fmt: fmt.clone(), ft_rate: ft_rate as f64 }
    }

    pub fn uses_ft(&self) -> bool {
        self.fmt.use_ft
    }

    fn push_image(&self, out: &mut Vec<f32>, src: &[f32], side: usize, k: usize) {
        let c = self.fmt.channels;
        let px = side * side * c;
        let img = &src[k * px..(k + 1) * px];
        if side == self.fmt.image_size {
            out.extend_from_slice(img);
        } else {
            out.extend(square_pad_resize(img, side, side, c, self.fmt.image_size));
        }
    }

    /// Observation at image frame `i`: the last `t_img` frames of both
    /// cameras and the wrench windows preceding frame `i`.
    pub fn observation(&self, ep: &EpisodeStreams, i: usize) -> Result<Observation, HarnessError> {
        let ti = self.fmt.t_img;
        if i >= ep.frames() {
            return Err(HarnessError::Runtime(format!("frame {i} beyond {} recorded frames", ep.frames())));
        }
        let frames: Vec<usize> = (0..ti).map(|j| (i + j + 1).saturating_sub(ti)).collect();
        let pairs = pair_cameras(&ep.cam1_t[..=i], &ep.cam2_t, CAMERA_SKEW).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        let partner = |k: usize| pairs.iter().find(|p| p.0 == k).map_or(k.min(ep.cam2_t.len() - 1), |p| p.1);
        let mut images = Vec::with_capacity(2 * ti * self.fmt.image_len());
        for &k in &frames {
            self.push_image(&mut images, &ep.cam1, ep.side, k);
        }
        for &k in &frames {
            self.push_image(&mut images, &ep.cam2, ep.side, partner(k));
        }
        let ft = if self.fmt.use_ft { self.ft_rows(ep, i)? } else { Vec::new() };
        Ok(Observation { images, ft })
    }

    fn ft_rows(&self, ep: &EpisodeStreams, i: usize) -> Result<Vec<f32>, HarnessError> {
        let windows = self.fmt.t_img;
        let per = self.fmt.ft_raw_len / windows;
        let t_i = ep.cam1_t[i];
        let avail = ep.ft_t.partition_point(|&t| t <= t_i);
        let rt = |e: crate::align::AlignError| HarnessError::Runtime(e.to_string());
        let picks = decimate(&ep.ft_t[..avail], self.ft_rate).map_err(rt)?;
        let times: Vec<f64> = picks.iter().map(|&k| ep.ft_t[k]).collect();
        let rows: Vec<[f64; 6]> = picks.iter().map(|&k| ep.ft[k]).collect();
        let bounds: Vec<f64> = (0..=windows)
            .map(|j| {
                let k = i as i64 - windows as i64 + j as i64;
                if k >= 0 {
                    ep.cam1_t[k as usize]
                } else {
                    ep.cam1_t[0] + k as f64 * NOMINAL_FRAME_DT
                }
            })
            .collect();
        let ranges = assign_windows(&bounds, &times).map_err(rt)?;
        let mut out = Vec::with_capacity(self.fmt.ft_raw_len * FT_DIM);
        for r in &ranges[..windows] {
            let previous = r.start.checked_sub(1).map(|k| rows[k]);
            let block = resample_block(&times[r.clone()], &rows[r.clone()], per, previous).map_err(rt)?;
            for row in &block.rows {
                out.extend(row.iter().zip(FT_SCALE).map(|(v, s)| (v / s) as f32));
            }
        }
        Ok(out)
    }
}

/// Planar action `(dx, dz, dyaw)` between consecutive recorded poses.
pub fn action_between(a: &[f64; 7], b: &[f64; 7]) -> [f64; 3] {
    let d = pose_delta(&Pose::from_array(*a), &Pose::from_array(*b));
    ACTION_DIMS.map(|k| d[k])
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub episode: usize,
    pub frame: usize,
    pub obs: Observation,
    /// Normalized chunk `[horizon × 3]`.
    pub actions: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub stats: ActionStats,
}

/// Training samples at every `n_exec`-th frame of every episode.
pub fn build_dataset(store: &EpisodeStore, cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let policy = cfg.policy_config();
    let builder = ObsBuilder::new(&policy.fmt, cfg.ft_rate);
    let h = policy.head.horizon;
    let mut episodes = Vec::with_capacity(store.len());
    let mut deltas: Vec<Vec<f64>> = vec![vec![0.0; 3]];
    for ep in 0..store.len() {
        let streams = EpisodeStreams::read(store, ep, builder.uses_ft())?;
        let acts: Vec<[f64; 3]> = streams.pose.windows(2).map(|w| action_between(&w[0], &w[1])).collect();
        deltas.extend(acts.iter().map(|a| a.to_vec()));
        episodes.push((streams, acts));
    }
    let stats = ActionStats::fit(deltas.iter().map(|v| v.as_slice())).expect("at least the zero action");
    let mut samples = Vec::new();
    for (e, (streams, acts)) in episodes.iter().enumerate() {
        for i in (0..acts.len()).step_by(cfg.n_exec) {
            let mut chunk = Vec::with_capacity(h * 3);
            for j in 0..h {
                let a = acts.get(i + j).or(acts.last()).expect("non-empty episode");
                let v = stats.normalize(a).values;
                chunk.extend(v.iter().map(|&x| x as f32));
            }
            samples.push(Sample { episode: e, frame: i, obs: builder.observation(streams, i)?, actions: chunk });
        }
    }
    if samples.is_empty() {
        return Err(HarnessError::Runtime("store holds no usable frames".into()));
    }
    Ok(Dataset { samples, stats })
}
