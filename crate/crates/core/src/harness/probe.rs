//! Detectability of the latch-release spike from the wrench stream alone.

use crate::align::{assign_windows, decimate};
use crate::fmt::FT_DIM;

use super::store::EpisodeStore;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub auc_full: f64,
    pub auc_low: f64,
    pub windows: usize,
    pub positives: usize,
}

/// Area under the ROC curve (Mann-Whitney statistic, ties count half).
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Largest backward second difference `f[j] - 2 f[j-1] + f[j-2]` over the
/// samples of `f` whose indices fall in `range`. Linear ramps score zero, so
/// only abrupt rises stand out.
fn window_score(f: &[f64], range: std::ops::Range<usize>) -> f64 {
    range.filter(|&j| j >= 2).map(|j| f[j] - 2.0 * f[j - 1] + f[j - 2]).fold(f64::NEG_INFINITY, f64::max)
}

/// Scores every image-frame window of every episode by its sharpest rise in
/// vertical force, once from the full-rate stream and once after decimation
/// to `low_rate_hz`. A window is positive when the first full-rate sample of
/// a recorded spike falls inside it.
pub fn spike_probe(store: &EpisodeStore, low_rate_hz: f64) -> Result<ProbeReport, HarnessError> {
    let rt = |e: crate::align::AlignError| HarnessError::Runtime(e.to_string());
    let (mut full, mut low, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for ep in 0..store.len() {
        let spikes = store.episode(ep).spikes.clone();
        let (cam_t, _) = store.read_f64(ep, "pose")?;
        let (ft_t, ft) = store.read_f32(ep, "ft")?;
        let fz: Vec<f64> = ft.chunks_exact(FT_DIM).map(|r| r[2] as f64).collect();
        let picks = decimate(&ft_t, low_rate_hz).map_err(rt)?;
        let low_t: Vec<f64> = picks.iter().map(|&k| ft_t[k]).collect();
        let low_f: Vec<f64> = picks.iter().map(|&k| fz[k]).collect();
        let full_w = assign_windows(&cam_t, &ft_t).map_err(rt)?;
        let low_w = assign_windows(&cam_t, &low_t).map_err(rt)?;
        for (wf, wl) in full_w.into_iter().zip(low_w) {
            let positive = spikes.iter().any(|s| {
                let onset = ft_t.partition_point(|&t| t < s[0]);
                onset < ft_t.len() && ft_t[onset] < s[1] && wf.contains(&onset)
            });
            labels.push(positive);
            full.push(window_score(&fz, wf));
            low.push(window_score(&low_f, wl));
        }
    }
    let positives = labels.iter().filter(|&&l| l).count();
    Ok(ProbeReport { auc_full: auc(&full, &labels), auc_low: auc(&low, &labels), windows: labels.len(), positives })
}
