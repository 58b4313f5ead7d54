//! Training loss and raw-scale forecast metrics.

use serde::{Deserialize, Serialize};
use teddn_autograd::{Float, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result, StageExt};

/// MAE over the first `horizon` steps of `(B, T_out, N, C)` forecasts.
pub fn loss(tape: &mut Tape, pred: Var, target: Var, horizon: usize) -> Result<Var> {
    let ps = tape.shape(pred).to_vec();
    let ts = tape.shape(target).to_vec();
    if ps != ts || ps.len() != 4 {
        return Err(TensorError::Dimension {
            op: "loss",
            lhs: ps,
            rhs: ts,
        })
        .stage("loss");
    }
    if horizon == 0 || horizon > ps[1] {
        return Err(Error::Config(format!("loss horizon {horizon} outside 1..={}", ps[1])));
    }
    let (p, t) = if horizon == ps[1] {
        (pred, target)
    } else {
        (
            tape.narrow(pred, 1, 0, horizon).stage("loss")?,
            tape.narrow(target, 1, 0, horizon).stage("loss")?,
        )
    };
    let diff = tape.sub(p, t).stage("loss")?;
    let abs = tape.abs(diff);
    tape.mean_all(abs).stage("loss")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target was masked.
    pub mape: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Index `h` holds horizon step `h + 1`.
    pub horizons: Vec<Metrics>,
    /// Pooled over every entry of every horizon.
    pub average: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl MetricReport {
    /// Metrics at 1-based horizon `h`.
    pub fn at(&self, h: usize) -> Option<&Metrics> {
        h.checked_sub(1).and_then(|i| self.horizons.get(i))
    }

    /// CSV with one row per horizon and a final `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape\n");
        let row = |label: String, m: &Metrics| {
            format!("{label},{},{},{}\n", m.mae, m.rmse, fmt_mape(m.mape))
        };
        for (i, m) in self.horizons.iter().enumerate() {
            out.push_str(&row((i + 1).to_string(), m));
        }
        out.push_str(&row("average".into(), &self.average));
        out
    }
}

pub fn fmt_mape(m: Option<f64>) -> String {
    m.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    count: usize,
    ape: f64,
    ape_count: usize,
}

impl Sums {
    fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.ape_count > 0).then(|| 100.0 * self.ape / self.ape_count as f64),
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.count += o.count;
        self.ape += o.ape;
        self.ape_count += o.ape_count;
    }
}

/// Streaming accumulator over `(B, T_out, N, C)` batches.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    threshold: f64,
    per_h: Vec<Sums>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize, mape_threshold: Float) -> Self {
        MetricAccumulator {
            threshold: mape_threshold as f64,
            per_h: vec![Sums::default(); horizon],
        }
    }

    pub fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        let s = target.shape();
        if pred.shape() != s || s.len() != 4 || s[1] != self.per_h.len() {
            return Err(Error::Config(format!(
                "metric shapes disagree: pred {:?}, target {s:?}, horizon {}",
                pred.shape(),
                self.per_h.len()
            )));
        }
        let block = s[2] * s[3];
        for (k, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
            let h = (k / block) % s[1];
            let (p, y) = (p as f64, y as f64);
            let e = p - y;
            let acc = &mut self.per_h[h];
            acc.abs += e.abs();
            acc.sq += e * e;
            acc.count += 1;
            if y.abs() > self.threshold {
                acc.ape += e.abs() / y.abs();
                acc.ape_count += 1;
            }
        }
        Ok(())
    }

    /// Folds the sums of `other` into this accumulator.
    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (a, b) in self.per_h.iter_mut().zip(&other.per_h) {
            a.merge(b);
        }
    }

    pub fn report(&self) -> MetricReport {
        let mut all = Sums::default();
        for s in &self.per_h {
            all.merge(s);
        }
        MetricReport {
            horizons: self.per_h.iter().map(Sums::finish).collect(),
            average: all.finish(),
            epoch: None,
        }
    }
}

/// One-shot metrics over a full `(B, T_out, N, C)` forecast.
pub fn metrics(pred: &Tensor, target: &Tensor, mape_threshold: Float) -> Result<MetricReport> {
    let h = target.shape().get(1).copied().unwrap_or(0);
    let mut acc = MetricAccumulator::new(h, mape_threshold);
    acc.add(pred, target)?;
    Ok(acc.report())
}
