//! Traffic series, chronological splits, normalization, sliding windows and
//! batching.

mod io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use teddn_autograd::{Float, Tensor};

use crate::embeddings::time_index;
use crate::error::{Error, Result};
use crate::model::TimeSlots;

pub use io::{
    convert_archive, load, load_csv, load_flatbin, read_sidecar, sidecar_path, write_csv, write_flatbin,
    ConvertOptions, DataFormat, Sidecar,
};

pub const STD_FLOOR: Float = 1e-6;

/// Readings of shape `(T, N, C)`. `start_step` is the global row index of
/// row 0, so calendar slots stay correct inside split segments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    pub values: Tensor,
    pub steps_per_day: usize,
    pub start_weekday: usize,
    pub start_step: usize,
}

impl TrafficSeries {
    pub fn new(values: Tensor, steps_per_day: usize, start_weekday: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(Error::Format(format!("series must be (T, N, C) with every dim >= 1, got {s:?}")));
        }
        if steps_per_day == 0 {
            return Err(Error::Config("steps_per_day must be >= 1".into()));
        }
        if let Some(pos) = values.data().iter().position(|v| !v.is_finite()) {
            let (n, c) = (s[1], s[2]);
            return Err(Error::Format(format!(
                "non-finite value at row {}, node {}, channel {}",
                pos / (n * c),
                (pos / c) % n,
                pos % c
            )));
        }
        Ok(TrafficSeries {
            values,
            steps_per_day,
            start_weekday: start_weekday % 7,
            start_step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    fn row_width(&self) -> usize {
        self.num_nodes() * self.channels()
    }

    /// Rows `[start, start + len)` as a new series that remembers its offset.
    pub fn segment(&self, start: usize, len: usize) -> Result<TrafficSeries> {
        let values = self.values.narrow(0, start, len)?;
        Ok(TrafficSeries {
            values,
            steps_per_day: self.steps_per_day,
            start_weekday: self.start_weekday,
            start_step: self.start_step + start,
        })
    }

    /// `(time-of-day, day-of-week)` of local row `t`.
    pub fn slot(&self, t: usize) -> (usize, usize) {
        time_index(self.start_step + t, self.steps_per_day, self.start_weekday)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Integer-floor chronological split: `train = ⌊T·r₀/Σr⌋`, `val = ⌊T·r₁/Σr⌋`,
/// `test` takes the remainder.
pub fn split_sizes(total: usize, ratios: [usize; 3]) -> Result<SplitSizes> {
    let sum: usize = ratios.iter().sum();
    if ratios.contains(&0) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let train = total * ratios[0] / sum;
    let val = total * ratios[1] / sum;
    Ok(SplitSizes {
        train,
        val,
        test: total - train - val,
    })
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TrafficSeries,
    pub val: TrafficSeries,
    pub test: TrafficSeries,
}

/// Chronological split; each segment must hold at least one window.
pub fn split(series: &TrafficSeries, ratios: [usize; 3], min_len: usize) -> Result<Splits> {
    let s = split_sizes(series.len(), ratios)?;
    for (name, len) in [("train", s.train), ("validation", s.val), ("test", s.test)] {
        if len < min_len {
            return Err(Error::Config(format!(
                "{name} segment has {len} rows but a window needs {min_len} (series length {})",
                series.len()
            )));
        }
    }
    Ok(Splits {
        train: series.segment(0, s.train)?,
        val: series.segment(s.train, s.val)?,
        test: series.segment(s.train + s.val, s.test)?,
    })
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<Float>,
    pub std: Vec<Float>,
}

impl NormStats {
    /// Population statistics over every (row, node) of each channel, with
    /// `std` floored at [`STD_FLOOR`].
    pub fn fit(train: &TrafficSeries) -> NormStats {
        let c = train.channels();
        let count = (train.len() * train.num_nodes()) as Float;
        let mut mean = vec![0.0; c];
        for (i, v) in train.values.data().iter().enumerate() {
            mean[i % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for (i, v) in train.values.data().iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(STD_FLOOR)).collect();
        NormStats { mean, std }
    }

    /// Normalizes a tensor whose last axis is the channel axis.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        out
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        out
    }
}

/// Window start rows: `T_seg - T_h - T_out + 1` of them.
pub fn make_windows(seg_len: usize, input_len: usize, output_len: usize) -> Result<Vec<usize>> {
    let need = input_len + output_len;
    if seg_len < need {
        return Err(Error::Config(format!(
            "segment of {seg_len} rows is shorter than one window ({need})"
        )));
    }
    Ok((0..=seg_len - need).collect())
}

/// Groups window ids into batches; shuffled when a seed is given, and the
/// last partial batch is kept.
pub fn batches(windows: &[usize], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut ids = windows.to_vec();
    if let Some(seed) = shuffle_seed {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(ids.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// `(B, T_h, N, C)`, normalized.
    pub inputs: Tensor,
    /// `(B, T_out, N, C)`, raw scale.
    pub targets: Tensor,
    pub slots: TimeSlots,
    pub starts: Vec<usize>,
}

/// A segment with its normalized copy, ready for batch assembly.
#[derive(Clone, Debug)]
pub struct PreparedSegment {
    pub raw: TrafficSeries,
    pub normalized: Tensor,
    pub input_len: usize,
    pub output_len: usize,
    pub windows: Vec<usize>,
}

impl PreparedSegment {
    pub fn new(raw: TrafficSeries, stats: &NormStats, input_len: usize, output_len: usize) -> Result<Self> {
        let windows = make_windows(raw.len(), input_len, output_len)?;
        let normalized = stats.apply(&raw.values);
        Ok(PreparedSegment {
            raw,
            normalized,
            input_len,
            output_len,
            windows,
        })
    }

    pub fn batch(&self, starts: &[usize]) -> Result<WindowBatch> {
        let (th, to) = (self.input_len, self.output_len);
        let w = self.raw.row_width();
        let (n, c) = (self.raw.num_nodes(), self.raw.channels());
        let mut inputs = Vec::with_capacity(starts.len() * th * w);
        let mut targets = Vec::with_capacity(starts.len() * to * w);
        let mut slots = TimeSlots::default();
        for &s in starts {
            if s + th + to > self.raw.len() {
                return Err(Error::Config(format!("window {s} runs past the segment end")));
            }
            inputs.extend_from_slice(&self.normalized.data()[s * w..(s + th) * w]);
            targets.extend_from_slice(&self.raw.values.data()[(s + th) * w..(s + th + to) * w]);
            for t in s..s + th {
                let (tod, dow) = self.raw.slot(t);
                slots.tod.push(tod);
                slots.dow.push(dow);
            }
        }
        let b = starts.len();
        Ok(WindowBatch {
            inputs: Tensor::new([b, th, n, c], inputs)?,
            targets: Tensor::new([b, to, n, c], targets)?,
            slots,
            starts: starts.to_vec(),
        })
    }

    /// Every window in order, in batches of `batch_size`.
    pub fn eval_batches(&self, batch_size: usize) -> Result<Vec<Vec<usize>>> {
        batches(&self.windows, batch_size, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(t: usize, n: usize, c: usize) -> TrafficSeries {
        TrafficSeries::new(Tensor::from_fn([t, n, c], |i| (i / (n * c)) as Float), 288, 0).unwrap()
    }

    #[test]
    fn split_examples() {
        let s = split_sizes(100, [6, 2, 2]).unwrap();
        assert_eq!((s.train, s.val, s.test), (60, 20, 20));
        let s = split_sizes(17856, [6, 2, 2]).unwrap();
        assert_eq!((s.train, s.val, s.test), (10713, 3571, 3572));
        let err = split(&ramp(23, 1, 1), [6, 2, 2], 24).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn splits_are_chronological() {
        let sp = split(&ramp(200, 2, 1), [6, 2, 2], 24).unwrap();
        let last = |s: &TrafficSeries| s.values.data()[s.values.numel() - 1];
        let first = |s: &TrafficSeries| s.values.data()[0];
        assert!(last(&sp.train) < first(&sp.val));
        assert!(last(&sp.val) < first(&sp.test));
        assert_eq!(sp.test.start_step, 160);
        assert_eq!(sp.test.slot(0), time_index(160, 288, 0));
    }

    #[test]
    fn normalizer_examples() {
        let constant = TrafficSeries::new(Tensor::full([5, 2, 1], 4.0), 288, 0).unwrap();
        let st = NormStats::fit(&constant);
        assert_eq!(st.std, vec![STD_FLOOR]);
        assert!(st.apply(&constant.values).data().iter().all(|&v| v == 0.0));

        let st = NormStats {
            mean: vec![100.0],
            std: vec![10.0],
        };
        assert_eq!(st.apply(&Tensor::from_vec(vec![110.0])).data(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TrafficSeries::new(Tensor::from_fn([50, 3, 2], |_| rng.random_range(0.0..500.0)), 288, 0).unwrap();
        let st = NormStats::fit(&s);
        let back = st.invert(&st.apply(&s.values));
        for (a, b) in back.data().iter().zip(s.values.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn normalizer_ignores_non_training_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Tensor::from_fn([100, 2, 1], |_| rng.random_range(0.0..9.0));
        let s1 = TrafficSeries::new(base.clone(), 288, 0).unwrap();
        let mut altered = base;
        for v in &mut altered.data_mut()[130..] {
            *v *= 7.0;
        }
        let s2 = TrafficSeries::new(altered, 288, 0).unwrap();
        let a = NormStats::fit(&split(&s1, [6, 2, 2], 10).unwrap().train);
        let b = NormStats::fit(&split(&s2, [6, 2, 2], 10).unwrap().train);
        assert_eq!(a, b);
    }

    #[test]
    fn window_examples() {
        assert_eq!(make_windows(30, 12, 12).unwrap().len(), 7);
        assert_eq!(make_windows(24, 12, 12).unwrap(), vec![0]);
        assert!(make_windows(23, 12, 12).is_err());

        let r = ramp(30, 1, 1);
        let st = NormStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let seg = PreparedSegment::new(r, &st, 12, 12).unwrap();
        let b = seg.batch(&[0]).unwrap();
        assert_eq!(b.targets.data()[0], 12.0);
        assert_eq!(b.inputs.data()[11], 11.0);
    }

    #[test]
    fn windows_cover_every_row() {
        let seg_len = 41;
        let w = make_windows(seg_len, 12, 12).unwrap();
        let mut seen = vec![false; seg_len];
        for s in w {
            for r in seen.iter_mut().skip(s).take(24) {
                *r = true;
            }
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn batch_examples() {
        let w: Vec<usize> = (0..70).collect();
        let sizes: Vec<usize> = batches(&w, 32, Some(3)).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![32, 32, 6]);
        assert_eq!(batches(&w, 32, Some(3)).unwrap(), batches(&w, 32, Some(3)).unwrap());
        assert_eq!(batches(&w, 32, None).unwrap()[0], (0..32).collect::<Vec<_>>());
        assert!(batches(&w, 0, None).is_err());
    }

    proptest! {
        #[test]
        fn shuffle_is_a_permutation(n in 1usize..300, bs in 1usize..40, seed in any::<u64>()) {
            let w: Vec<usize> = (0..n).collect();
            let mut flat: Vec<usize> = batches(&w, bs, Some(seed)).unwrap().concat();
            flat.sort_unstable();
            prop_assert_eq!(flat, w);
        }
    }
}
