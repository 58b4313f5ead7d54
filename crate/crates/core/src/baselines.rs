//! Reference forecasters: persistence and historical average.

use teddn_autograd::{Float, Tensor};

use crate::data::{PreparedSegment, TrafficSeries};
use crate::error::Result;
use crate::metrics::{MetricAccumulator, MetricReport};

/// Repeats the last observed input row for every horizon step.
pub fn persistence(seg: &PreparedSegment, starts: &[usize]) -> Tensor {
    let (n, c) = (seg.raw.num_nodes(), seg.raw.channels());
    let w = n * c;
    let (th, to) = (seg.input_len, seg.output_len);
    let mut out = Vec::with_capacity(starts.len() * to * w);
    for &s in starts {
        let last = &seg.raw.values.data()[(s + th - 1) * w..(s + th) * w];
        for _ in 0..to {
            out.extend_from_slice(last);
        }
    }
    Tensor::new([starts.len(), to, n, c], out).expect("consistent shape")
}

/// Mean of the training rows for every (time-of-day, node, channel), with
/// the overall (node, channel) mean for slots never seen in training.
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    steps_per_day: usize,
    width: usize,
    table: Vec<Float>,
}

impl HistoricalAverage {
    pub fn fit(train: &TrafficSeries) -> Self {
        let w = train.num_nodes() * train.channels();
        let spd = train.steps_per_day;
        let mut sum = vec![0.0f64; spd * w];
        let mut cnt = vec![0usize; spd];
        let mut overall = vec![0.0f64; w];
        for (t, row) in train.values.data().chunks(w).enumerate() {
            let (tod, _) = train.slot(t);
            cnt[tod] += 1;
            for (k, &v) in row.iter().enumerate() {
                sum[tod * w + k] += v as f64;
                overall[k] += v as f64;
            }
        }
        let total = train.len() as f64;
        let table = (0..spd * w)
            .map(|i| {
                let (tod, k) = (i / w, i % w);
                if cnt[tod] > 0 {
                    (sum[i] / cnt[tod] as f64) as Float
                } else {
                    (overall[k] / total) as Float
                }
            })
            .collect();
        HistoricalAverage {
            steps_per_day: spd,
            width: w,
            table,
        }
    }

    pub fn predict(&self, seg: &PreparedSegment, starts: &[usize]) -> Tensor {
        let (n, c) = (seg.raw.num_nodes(), seg.raw.channels());
        let w = self.width;
        let (th, to) = (seg.input_len, seg.output_len);
        let mut out = Vec::with_capacity(starts.len() * to * w);
        for &s in starts {
            for t in s + th..s + th + to {
                let (tod, _) = seg.raw.slot(t);
                let tod = tod % self.steps_per_day;
                out.extend_from_slice(&self.table[tod * w..(tod + 1) * w]);
            }
        }
        Tensor::new([starts.len(), to, n, c], out).expect("consistent shape")
    }
}

fn score(seg: &PreparedSegment, threshold: Float, f: impl Fn(&[usize]) -> Tensor) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(seg.output_len, threshold);
    for ids in seg.eval_batches(256)? {
        let b = seg.batch(&ids)?;
        acc.add(&f(&ids), &b.targets)?;
    }
    Ok(acc.report())
}

pub fn persistence_report(seg: &PreparedSegment, threshold: Float) -> Result<MetricReport> {
    score(seg, threshold, |ids| persistence(seg, ids))
}

pub fn historical_average_report(train: &TrafficSeries, seg: &PreparedSegment, threshold: Float) -> Result<MetricReport> {
    let ha = HistoricalAverage::fit(train);
    score(seg, threshold, |ids| ha.predict(seg, ids))
}
