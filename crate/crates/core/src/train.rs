//! Training loop and evaluation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use teddn_autograd::{Adam, AdamConfig, Float, ParamStore, Tape, Tensor};

use crate::data::{self, NormStats, PreparedSegment, TrafficSeries, WindowBatch};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricAccumulator, MetricReport};
use crate::model::TeddnModel;
use crate::schedule::{curriculum_horizon, EarlyStopping, PlateauSchedule, StopDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: Float,
    pub weight_decay: Float,
    pub adam_eps: Float,
    pub batch_size: usize,
    pub lr_decay: Float,
    pub lr_patience: usize,
    pub min_lr: Float,
    pub warmup_epochs: usize,
    pub curriculum_step: usize,
    pub max_horizon: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mape_threshold: Float,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            weight_decay: 1e-5,
            adam_eps: 1e-8,
            batch_size: 32,
            lr_decay: 0.5,
            lr_patience: 10,
            min_lr: 1e-6,
            warmup_epochs: 30,
            curriculum_step: 3,
            max_horizon: 12,
            patience: 100,
            max_epochs: 200,
            seed: 0,
            mape_threshold: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, output_len: usize) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("min_lr", self.min_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("lr_patience", self.lr_patience),
            ("curriculum_step", self.curriculum_step),
            ("max_horizon", self.max_horizon),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.max_horizon != output_len {
            return Err(Error::Config(format!(
                "max_horizon ({}) must equal the model output length ({output_len})",
                self.max_horizon
            )));
        }
        if !(self.mape_threshold >= 0.0) {
            return Err(Error::Config("mape_threshold must be >= 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Normalized train/validation/test segments of one series.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: PreparedSegment,
    pub val: PreparedSegment,
    pub test: PreparedSegment,
    pub stats: NormStats,
}

impl PreparedData {
    pub fn new(series: &TrafficSeries, ratios: [usize; 3], input_len: usize, output_len: usize) -> Result<Self> {
        let sp = data::split(series, ratios, input_len + output_len)?;
        let stats = NormStats::fit(&sp.train);
        Ok(PreparedData {
            train: PreparedSegment::new(sp.train, &stats, input_len, output_len)?,
            val: PreparedSegment::new(sp.val, &stats, input_len, output_len)?,
            test: PreparedSegment::new(sp.test, &stats, input_len, output_len)?,
            stats,
        })
    }

    /// Uses the whole series for every role; for overfitting checks.
    pub fn all_in_one(series: &TrafficSeries, input_len: usize, output_len: usize) -> Result<Self> {
        let stats = NormStats::fit(series);
        let seg = PreparedSegment::new(series.clone(), &stats, input_len, output_len)?;
        Ok(PreparedData {
            train: seg.clone(),
            val: seg.clone(),
            test: seg,
            stats,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Float,
    pub horizon: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,horizon,train_loss,val_mae";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.horizon, self.train_loss, self.val_mae
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch, parallel to `log`.
    pub seconds: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(EPOCH_LOG_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for (r, t) in self.log.iter().zip(&self.seconds) {
            s.push_str(&format!("{},{t:.6}\n", r.epoch));
        }
        s
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One optimizer step on `batch` with the loss restricted to `horizon`.
/// Returns the batch loss.
pub fn train_step(model: &mut TeddnModel, adam: &mut Adam, batch: &WindowBatch, horizon: usize) -> Result<f64> {
    model.store.zero_grad();
    let mut tape = Tape::new();
    let x = tape.input(batch.inputs.clone());
    let pred = model.forward(&mut tape, x, &batch.slots)?;
    let y = tape.input(batch.targets.clone());
    let l = metrics::loss(&mut tape, pred, y, horizon)?;
    let value = tape.value(l).item()? as f64;
    if !value.is_finite() {
        let stage = model
            .first_nonfinite_stage(&batch.inputs, &batch.slots)?
            .unwrap_or("loss");
        return Err(Error::Numerical(format!(
            "loss is {value}; first non-finite tensor at stage \"{stage}\""
        )));
    }
    tape.backward(l, &mut model.store)?;
    if let Some((_, p)) = model.store.iter().find(|(_, p)| !p.grad.all_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient for parameter {}", p.name())));
    }
    adam.step(&mut model.store)?;
    Ok(value)
}

/// Metrics of `model` over every window of `seg`.
pub fn evaluate(model: &TeddnModel, seg: &PreparedSegment, batch_size: usize, mape_threshold: Float) -> Result<MetricReport> {
    let groups = seg.eval_batches(batch_size)?;
    let parts: Vec<Result<MetricAccumulator>> = groups
        .par_iter()
        .map(|ids| {
            let b = seg.batch(ids)?;
            let pred = model.predict(&b.inputs, &b.slots)?;
            let mut acc = MetricAccumulator::new(seg.output_len, mape_threshold);
            acc.add(&pred, &b.targets)?;
            Ok(acc)
        })
        .collect();
    let mut total = MetricAccumulator::new(seg.output_len, mape_threshold);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total.report())
}

/// Forecasts for every window of `seg`, concatenated along the batch axis.
pub fn predict_segment(model: &TeddnModel, seg: &PreparedSegment, batch_size: usize) -> Result<Tensor> {
    let groups = seg.eval_batches(batch_size)?;
    let preds: Vec<Result<Tensor>> = groups
        .par_iter()
        .map(|ids| {
            let b = seg.batch(ids)?;
            model.predict(&b.inputs, &b.slots)
        })
        .collect();
    let preds: Vec<Tensor> = preds.into_iter().collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = preds.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// Trains until early stopping or `max_epochs`, then restores the
/// parameters of the best validation epoch. `on_improve` runs after each
/// new best, with the model holding that epoch's parameters.
pub fn train(
    model: &mut TeddnModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    on_improve: &mut dyn FnMut(&TeddnModel, &EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate(model.config.output_len)?;
    let mut adam = Adam::new(cfg.adam(), &model.store)?;
    let mut sched = PlateauSchedule::new(cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store: Option<ParamStore> = None;
    let mut log = Vec::new();
    let mut seconds = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = sched.lr();
        adam.set_lr(lr);
        let horizon = curriculum_horizon(epoch, cfg);
        let order = data::batches(&data.train.windows, cfg.batch_size, Some(shuffle_seed(cfg.seed, epoch)))?;
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for ids in &order {
            let batch = data.train.batch(ids)?;
            let l = train_step(model, &mut adam, &batch, horizon)
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            loss_sum += l * ids.len() as f64;
            count += ids.len();
        }
        let val = evaluate(model, &data.val, cfg.batch_size, cfg.mape_threshold)?;
        let val_mae = val.average.mae;
        if !val_mae.is_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: validation MAE is {val_mae}")));
        }
        let record = EpochRecord {
            epoch,
            lr,
            horizon,
            train_loss: loss_sum / count.max(1) as f64,
            val_mae,
        };
        sched.observe(val_mae);
        let decision = stopper.observe(epoch, val_mae);
        seconds.push(started.elapsed().as_secs_f64());
        if decision == StopDecision::Improved {
            best_store = Some(model.store.clone());
            on_improve(model, &record)?;
        }
        log.push(record);
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    if let Some(best) = best_store {
        model.store = best;
    }
    let (best_epoch, best_val_mae) = stopper.best().unwrap_or((0, f64::INFINITY));
    Ok(TrainOutcome {
        log,
        seconds,
        best_epoch,
        best_val_mae,
        stopped_early,
    })
}
