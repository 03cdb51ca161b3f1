use std::ops::Range;

use super::AlignError;

/// Timestamps (s) paired with row-major samples of a fixed width.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedStream<T> {
    times: Vec<f64>,
    rows: Vec<T>,
}

impl<T> TimedStream<T> {
    pub fn new(name: &str, times: Vec<f64>, rows: Vec<T>) -> Result<Self, AlignError> {
        if times.len() != rows.len() {
            return Err(AlignError::LengthMismatch(format!(
                "{name}: {} timestamps for {} rows",
                times.len(),
                rows.len()
            )));
        }
        check_increasing(name, &times)?;
        Ok(Self { times, rows })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn rows(&self) -> &[T] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub(crate) fn check_increasing(name: &str, times: &[f64]) -> Result<(), AlignError> {
    for (i, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(AlignError::Unordered { stream: name.to_string(), index: i + 1 });
        }
    }
    if let Some(i) = times.iter().position(|t| !t.is_finite()) {
        return Err(AlignError::Unordered { stream: name.to_string(), index: i });
    }
    Ok(())
}

/// Index ranges of F/T samples per image frame.
///
/// Window `i` holds samples with `t ∈ [image_ts[i], image_ts[i+1])`; the last
/// window runs to the final F/T sample inclusive. Samples before the first
/// image belong to no window.
pub fn assign_windows(image_ts: &[f64], ft_ts: &[f64]) -> Result<Vec<Range<usize>>, AlignError> {
    check_increasing("image", image_ts)?;
    check_increasing("ft", ft_ts)?;
    let first_at_or_after = |t: f64| ft_ts.partition_point(|&s| s < t);
    let mut out = Vec::with_capacity(image_ts.len());
    for (i, &t) in image_ts.iter().enumerate() {
        let start = first_at_or_after(t);
        let end = match image_ts.get(i + 1) {
            Some(&next) => first_at_or_after(next),
            None => ft_ts.len(),
        };
        out.push(start..end.max(start));
    }
    Ok(out)
}

/// How a resampled block was filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockFill {
    Measured,
    /// No samples in the window; the previous window's last row is repeated.
    HeldPrevious,
    /// No samples and nothing to hold (episode start).
    ZeroFilled,
}

/// A window of wrench rows resampled to a fixed count.
#[derive(Debug, Clone, PartialEq)]
pub struct FtBlock {
    pub rows: Vec<[f64; 6]>,
    /// Normalized sample positions in `[0, 1]`.
    pub norm_times: Vec<f64>,
    pub raw_count: usize,
    pub fill: BlockFill,
}

/// Linear interpolation of a wrench window at `count` equally spaced
/// normalized times over `[0, 1]` (normalized by the first/last timestamps).
pub fn resample_block(
    times: &[f64],
    rows: &[[f64; 6]],
    count: usize,
    previous: Option<[f64; 6]>,
) -> Result<FtBlock, AlignError> {
    if count == 0 {
        return Err(AlignError::InvalidArgument("resample count must be >= 1".into()));
    }
    if times.len() != rows.len() {
        return Err(AlignError::LengthMismatch(format!(
            "{} timestamps for {} rows",
            times.len(),
            rows.len()
        )));
    }
    check_increasing("ft window", times)?;
    let norm_times: Vec<f64> = (0..count)
        .map(|j| if count == 1 { 0.0 } else { j as f64 / (count - 1) as f64 })
        .collect();
    if rows.is_empty() {
        let (row, fill) = match previous {
            Some(r) => (r, BlockFill::HeldPrevious),
            None => ([0.0; 6], BlockFill::ZeroFilled),
        };
        return Ok(FtBlock { rows: vec![row; count], norm_times, raw_count: 0, fill });
    }
    if rows.len() == 1 {
        return Ok(FtBlock {
            rows: vec![rows[0]; count],
            norm_times,
            raw_count: 1,
            fill: BlockFill::Measured,
        });
    }
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let raw_u: Vec<f64> = times.iter().map(|t| (t - t0) / span).collect();
    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for (j, &u) in norm_times.iter().enumerate() {
        if j == 0 {
            out.push(rows[0]);
            continue;
        }
        if j == count - 1 {
            out.push(rows[rows.len() - 1]);
            continue;
        }
        while seg + 2 < raw_u.len() && raw_u[seg + 1] <= u {
            seg += 1;
        }
        let (u0, u1) = (raw_u[seg], raw_u[seg + 1]);
        let w = ((u - u0) / (u1 - u0)).clamp(0.0, 1.0);
        let (a, b) = (&rows[seg], &rows[seg + 1]);
        out.push(std::array::from_fn(|c| a[c] + (b[c] - a[c]) * w));
    }
    Ok(FtBlock { rows: out, norm_times, raw_count: rows.len(), fill: BlockFill::Measured })
}

/// Indices sampled by a `rate_hz` clock starting at the first timestamp:
/// each tick takes the first sample at or after it. Whether a sample is
/// picked depends only on earlier timestamps, so decimating a prefix of
/// `times` yields a prefix of the full result.
/// Duplicates (when the target rate exceeds the source) collapse.
pub fn decimate(times: &[f64], rate_hz: f64) -> Result<Vec<usize>, AlignError> {
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(AlignError::InvalidArgument(format!("rate must be positive, got {rate_hz}")));
    }
    check_increasing("decimate", times)?;
    let Some((&t0, &t_end)) = times.first().zip(times.last()) else {
        return Ok(Vec::new());
    };
    let period = 1.0 / rate_hz;
    let tol = period * 1e-6;
    let mut picked: Vec<usize> = Vec::new();
    let mut k = 0u64;
    loop {
        let target = t0 + k as f64 * period;
        if target > t_end + tol {
            break;
        }
        let idx = times.partition_point(|&t| t < target - tol);
        if picked.last() != Some(&idx) {
            picked.push(idx);
        }
        k += 1;
    }
    Ok(picked)
}

/// Pairs each primary-camera frame with the nearest secondary frame; frames
/// whose best match is further than `max_skew` seconds are dropped.
pub fn pair_cameras(
    primary: &[f64],
    secondary: &[f64],
    max_skew: f64,
) -> Result<Vec<(usize, usize)>, AlignError> {
    check_increasing("camera 1", primary)?;
    check_increasing("camera 2", secondary)?;
    let mut out = Vec::with_capacity(primary.len());
    for (i, &t) in primary.iter().enumerate() {
        let p = secondary.partition_point(|&s| s < t);
        let best = [p.checked_sub(1), (p < secondary.len()).then_some(p)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (secondary[a] - t).abs().total_cmp(&(secondary[b] - t).abs()));
        match best {
            Some(j) if (secondary[j] - t).abs() <= max_skew => out.push((i, j)),
            _ => log::warn!("dropping camera frame {i} at t={t:.4}: no partner within {max_skew:.4} s"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: u64) -> f64 {
        v as f64 / 1000.0
    }

    #[test]
    fn first_window_holds_seven_samples() {
        let images = [0.0, 1.0 / 30.0, 2.0 / 30.0];
        let ft: Vec<f64> = (0..40).map(|i| ms(5 * i)).collect();
        let w = assign_windows(&images, &ft).unwrap();
        // brute force membership scan
        let members: Vec<usize> =
            (0..ft.len()).filter(|&i| ft[i] >= images[0] && ft[i] < images[1]).collect();
        assert_eq!(members.len(), 7);
        assert_eq!(w[0], members[0]..members[members.len() - 1] + 1);
        assert_eq!(w[2].end, ft.len());
    }

    #[test]
    fn single_frame_takes_everything_after_it() {
        let ft: Vec<f64> = (0..10).map(|i| ms(5 * i)).collect();
        let w = assign_windows(&[ms(12)], &ft).unwrap();
        assert_eq!(w, vec![3..10]);
        assert!(assign_windows(&[], &ft).unwrap().is_empty());
    }

    #[test]
    fn boundary_sample_goes_to_later_window() {
        let images = [ms(0), ms(100)];
        let ft: Vec<f64> = (0..=40).map(|i| ms(5 * i)).collect();
        let w = assign_windows(&images, &ft).unwrap();
        let boundary = ft.iter().position(|&t| t == ms(100)).unwrap();
        assert!(!w[0].contains(&boundary));
        assert_eq!(w[1].start, boundary);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        assert!(matches!(
            assign_windows(&[0.0, 0.1], &[0.0, 0.02, 0.01]),
            Err(AlignError::Unordered { .. })
        ));
        assert!(assign_windows(&[0.1, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn resample_matching_count_is_identity() {
        let times: Vec<f64> = (0..8).map(|i| ms(5 * i)).collect();
        let rows: Vec<[f64; 6]> = (0..8).map(|i| std::array::from_fn(|c| (i * 7 + c) as f64)).collect();
        let b = resample_block(&times, &rows, 8, None).unwrap();
        for (x, y) in b.rows.iter().zip(&rows) {
            for c in 0..6 {
                assert!((x[c] - y[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_two_rows_gives_midpoint() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [3.0, 2.0, 1.0, 0.0, -1.0, -2.0];
        let out = resample_block(&[0.0, 0.005], &[a, b], 3, None).unwrap();
        assert_eq!(out.rows[0], a);
        assert_eq!(out.rows[2], b);
        for c in 0..6 {
            assert!((out.rows[1][c] - 0.5 * (a[c] + b[c])).abs() < 1e-12);
        }
    }

    /// Per-coordinate piecewise-linear evaluation by linear search.
    fn interp_oracle(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        for i in 0..xs.len() - 1 {
            if x >= xs[i] && x <= xs[i + 1] {
                let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
                return ys[i] * (1.0 - w) + ys[i + 1] * w;
            }
        }
        ys[ys.len() - 1]
    }

    #[test]
    fn resample_seven_to_eight_matches_oracle() {
        let times = [0.0, 0.004, 0.011, 0.015, 0.02, 0.026, 0.031];
        let rows: Vec<[f64; 6]> = (0..7).map(|i| std::array::from_fn(|c| ((i * 3 + c) as f64).sin())).collect();
        let out = resample_block(&times, &rows, 8, None).unwrap();
        let u: Vec<f64> = times.iter().map(|t| t / 0.031).collect();
        for (j, row) in out.rows.iter().enumerate() {
            for c in 0..6 {
                let ys: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                let expect = interp_oracle(&u, &ys, j as f64 / 7.0);
                assert!((row[c] - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn empty_window_holds_or_zero_fills() {
        let held = resample_block(&[], &[], 4, Some([1.0; 6])).unwrap();
        assert_eq!(held.fill, BlockFill::HeldPrevious);
        assert_eq!(held.rows, vec![[1.0; 6]; 4]);
        let zero = resample_block(&[], &[], 4, None).unwrap();
        assert_eq!(zero.fill, BlockFill::ZeroFilled);
        assert_eq!(zero.rows, vec![[0.0; 6]; 4]);
    }

    #[test]
    fn decimation_takes_next_available_sample() {
        let t: Vec<f64> = (0..200).map(|i| ms(5 * i)).collect();
        let idx = decimate(&t, 30.0).unwrap();
        assert_eq!(&idx[..4], &[0, 7, 14, 20]);
        let t1: Vec<f64> = (1..=200).map(|i| ms(5 * i)).collect();
        assert_eq!(decimate(&t1, 200.0).unwrap().len(), 200);
        let full = decimate(&t1, 60.0).unwrap();
        for n in 1..t1.len() {
            let prefix = decimate(&t1[..n], 60.0).unwrap();
            assert_eq!(&full[..prefix.len()], &prefix[..]);
            assert_eq!(full.iter().filter(|&&i| i < n).count(), prefix.len());
        }
        assert_eq!(decimate(&t, 200.0).unwrap().len(), 200);
        let idx120 = decimate(&t, 120.0).unwrap();
        assert!(idx120.windows(2).all(|w| w[1] - w[0] <= 2));
    }

    #[test]
    fn camera_pairing_drops_large_skew() {
        let p = [0.0, 1.0 / 30.0, 2.0 / 30.0];
        let s = [0.004, 1.0 / 30.0 - 0.004, 0.2];
        let pairs = pair_cameras(&p, &s, 1.0 / 60.0).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    proptest! {
        #[test]
        fn windows_partition_samples_between_frames(
            gaps in proptest::collection::vec(1u64..60, 1..12),
            ft_gaps in proptest::collection::vec(1u64..9, 1..120),
            offset in 0u64..30,
        ) {
            let mut images = Vec::new();
            let mut t = offset;
            for g in &gaps { images.push(ms(t)); t += g; }
            let mut ft = Vec::new();
            let mut s = 0;
            for g in &ft_gaps { ft.push(ms(s)); s += g; }
            let w = assign_windows(&images, &ft).unwrap();
            let mut count = vec![0usize; ft.len()];
            for r in &w { for i in r.clone() { count[i] += 1; } }
            for (i, &c) in count.iter().enumerate() {
                let expected = usize::from(ft[i] >= images[0]);
                prop_assert_eq!(c, expected);
            }
        }

        #[test]
        fn resampled_rows_are_convex_combinations_of_neighbours(
            n in 2usize..14,
            count in 2usize..20,
            seed in 0u64..1000,
        ) {
            let mut x = seed as f64;
            let mut next = || { x = (x * 1.37 + 0.71).sin() * 10.0; x };
            let mut times = vec![0.0];
            for _ in 1..n { let g = 0.001 + next().abs() * 1e-3; times.push(times[times.len() - 1] + g); }
            let rows: Vec<[f64; 6]> = (0..n).map(|_| std::array::from_fn(|_| next())).collect();
            let out = resample_block(&times, &rows, count, None).unwrap();
            prop_assert_eq!(out.rows[0], rows[0]);
            prop_assert_eq!(out.rows[count - 1], rows[n - 1]);
            let u: Vec<f64> = times.iter().map(|t| t / times[n - 1]).collect();
            for (j, row) in out.rows.iter().enumerate() {
                let q = out.norm_times[j];
                let seg = (0..n - 1).find(|&i| q >= u[i] && q <= u[i + 1]).unwrap();
                for c in 0..6 {
                    let (lo, hi) = (rows[seg][c].min(rows[seg + 1][c]), rows[seg][c].max(rows[seg + 1][c]));
                    prop_assert!(row[c] >= lo - 1e-9 && row[c] <= hi + 1e-9);
                }
            }
        }
    }
}
