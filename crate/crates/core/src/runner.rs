//! Command implementations: each reads an experiment config and writes
//! its results under the configured output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::baselines;
use crate::checkpoint;
use crate::data::TrafficSeries;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, CONFIG_ECHO};
use crate::gc;
use crate::metrics::{fmt_mape, MetricReport};
use crate::model::{variant, ModelConfig, TeddnModel, Variant};
use crate::train::{self, PreparedData, TrainOutcome};

pub const CHECKPOINT: &str = "best.ckpt";
pub const EPOCH_LOG: &str = "epoch_log.csv";
pub const TIMING_LOG: &str = "timing.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TIMING: &str = "ablation_timing.csv";
pub const ABLATION_HORIZONS: [usize; 3] = [3, 6, 12];

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Config(e.to_string()))
}

/// Model config with `num_nodes`/`channels` taken from the data (when left
/// at 0), `steps_per_day` from the data and the variant applied.
pub fn resolve_model(cfg: &ExperimentConfig, series: &TrafficSeries) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    for (name, field, actual) in [
        ("num_nodes", &mut m.num_nodes, series.num_nodes()),
        ("channels", &mut m.channels, series.channels()),
    ] {
        if *field == 0 {
            *field = actual;
        } else if *field != actual {
            return Err(Error::Config(format!("model.{name} is {field} but the dataset has {actual}")));
        }
    }
    m.steps_per_day = series.steps_per_day;
    let m = variant(&m, &cfg.variant)?;
    m.validate()?;
    cfg.train.validate(m.output_len)?;
    Ok(m)
}

/// Loaded data plus the model config it implies.
pub struct Workspace {
    pub series: TrafficSeries,
    pub data: PreparedData,
    pub model_config: ModelConfig,
}

impl Workspace {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let series = cfg.dataset.load()?;
        let model_config = resolve_model(cfg, &series)?;
        let data = PreparedData::new(
            &series,
            cfg.dataset.split,
            model_config.input_len,
            model_config.output_len,
        )?;
        Ok(Workspace {
            series,
            data,
            model_config,
        })
    }

    /// Fresh model seeded from the training config, with its output
    /// calibrated to the training statistics.
    pub fn fresh_model(&self, seed: u64) -> Result<TeddnModel> {
        let mut model = TeddnModel::build(self.model_config.clone(), seed)?;
        model.calibrate_output(&self.data.stats.mean, &self.data.stats.std)?;
        Ok(model)
    }

    /// Model rebuilt from `cfg` and loaded from `path`.
    pub fn restore(&self, path: &Path) -> Result<TeddnModel> {
        let ckpt = checkpoint::read(path)?;
        let mut model = TeddnModel::build(self.model_config.clone(), 0)?;
        ckpt.apply_to(&mut model)?;
        Ok(model)
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub output_dir: PathBuf,
    pub outcome: TrainOutcome,
    pub test: MetricReport,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    write(&dir.join(format!("{stem}.csv")), report.to_csv())?;
    write(&dir.join(format!("{stem}.json")), json(report)?)
}

/// Trains, checkpointing each improvement, then scores the best
/// parameters on the test split.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    let ws = Workspace::open(cfg)?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    write(&dir.join(CONFIG_ECHO), cfg.echo()?)?;
    let ckpt = dir.join(CHECKPOINT);

    let mut model = ws.fresh_model(cfg.train.seed)?;
    let started = Instant::now();
    let outcome = train::train(&mut model, &ws.data, &cfg.train, &mut |m, _| checkpoint::save(m, &ckpt))?;
    let train_seconds = started.elapsed().as_secs_f64();
    checkpoint::save(&model, &ckpt)?;

    let started = Instant::now();
    let mut test = train::evaluate(&model, &ws.data.test, cfg.train.batch_size, cfg.train.mape_threshold)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    test.epoch = Some(outcome.best_epoch);

    write(&dir.join(EPOCH_LOG), outcome.log_csv())?;
    let mut timing = outcome.timing_csv();
    timing.push_str(&format!("train_total,{train_seconds:.6}\ntest_inference,{eval_seconds:.6}\n"));
    write(&dir.join(TIMING_LOG), timing)?;
    write_report(&dir, "metrics", &test)?;
    for (i, a) in model.adjacencies()?.iter().enumerate() {
        gc::write_adjacency_csv(&dir.join(format!("adjacency_stream{i}.csv")), a)?;
    }
    Ok(TrainRun {
        output_dir: dir,
        outcome,
        test,
        train_seconds,
        eval_seconds,
    })
}

/// Test-split metrics of a saved checkpoint, written as
/// `evaluate_metrics.{csv,json}`.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<MetricReport> {
    let ws = Workspace::open(cfg)?;
    let model = ws.restore(checkpoint_path)?;
    let report = train::evaluate(&model, &ws.data.test, cfg.train.batch_size, cfg.train.mape_threshold)?;
    create_dir(&cfg.output_dir)?;
    write_report(&cfg.output_dir, "evaluate_metrics", &report)?;
    Ok(report)
}

pub fn parse_split(name: &str) -> Result<usize> {
    match name {
        "train" => Ok(0),
        "val" => Ok(1),
        "test" => Ok(2),
        other => Err(Error::Config(format!("unknown split {other:?}; use train, val or test"))),
    }
}

/// Writes every forecast of one split as long-format CSV:
/// `window,step,node,channel,forecast,target`, with `window` the start row
/// inside the split. Returns the output path.
pub fn run_predict(cfg: &ExperimentConfig, checkpoint_path: &Path, split: &str) -> Result<PathBuf> {
    let which = parse_split(split)?;
    let ws = Workspace::open(cfg)?;
    let model = ws.restore(checkpoint_path)?;
    let seg = [&ws.data.train, &ws.data.val, &ws.data.test][which];
    let pred = train::predict_segment(&model, seg, cfg.train.batch_size)?;
    let (to, n, c) = (seg.output_len, seg.raw.num_nodes(), seg.raw.channels());
    let w = n * c;
    let mut out = String::from("window,step,node,channel,forecast,target\n");
    for (b, &start) in seg.windows.iter().enumerate() {
        for h in 0..to {
            let row = &seg.raw.values.data()[(start + seg.input_len + h) * w..][..w];
            for (k, &target) in row.iter().enumerate() {
                let p = pred.data()[(b * to + h) * w + k];
                out.push_str(&format!("{start},{},{},{},{p},{target}\n", h + 1, k / c, k % c));
            }
        }
    }
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("predictions_{split}.csv"));
    write(&path, out)?;
    Ok(path)
}

/// File-system friendly variant name.
pub fn variant_slug(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full",
        Variant::NoTe => "wo_te",
        Variant::NoDg => "wo_dg",
        Variant::NoGru => "wo_gru",
    }
}

#[derive(Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub run: TrainRun,
}

#[derive(Debug)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Whether the full model has the lowest average test MAE.
    pub full_is_best: bool,
}

/// Table with one row per variant and MAE/RMSE/MAPE at horizons 3, 6, 12
/// (those within the output length) and on average.
pub fn ablation_csv(rows: &[(Variant, &MetricReport)]) -> String {
    let horizons: Vec<usize> = rows
        .first()
        .map(|(_, r)| ABLATION_HORIZONS.iter().copied().filter(|&h| h <= r.horizons.len()).collect())
        .unwrap_or_default();
    let mut labels: Vec<String> = horizons.iter().map(|h| format!("h{h}")).collect();
    labels.push("avg".into());
    let mut out = String::from("variant");
    for l in &labels {
        out.push_str(&format!(",mae_{l},rmse_{l},mape_{l}"));
    }
    out.push('\n');
    for (v, r) in rows {
        out.push_str(v.name());
        let cells = horizons.iter().map(|&h| r.at(h).expect("filtered")).chain([&r.average]);
        for m in cells {
            out.push_str(&format!(",{:.4},{:.4},{}", m.mae, m.rmse, fmt_mape(m.mape.map(|p| (p * 1e4).round() / 1e4))));
        }
        out.push('\n');
    }
    out
}

/// Trains all four variants with the same seed and config. Each variant
/// writes its own run under `<output_dir>/<slug>/`.
pub fn run_ablate(cfg: &ExperimentConfig) -> Result<Ablation> {
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join(CONFIG_ECHO), cfg.echo()?)?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut sub = cfg.clone();
        sub.variant = v.name().to_string();
        sub.output_dir = cfg.output_dir.join(variant_slug(v));
        let run = run_train(&sub)?;
        rows.push(AblationRow { variant: v, run });
    }
    let table: Vec<(Variant, &MetricReport)> = rows.iter().map(|r| (r.variant, &r.run.test)).collect();
    write(&cfg.output_dir.join(ABLATION_CSV), ablation_csv(&table))?;
    let mut timing = String::from("variant,train_seconds,test_inference_seconds,epochs\n");
    for r in &rows {
        timing.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.variant.name(),
            r.run.train_seconds,
            r.run.eval_seconds,
            r.run.outcome.log.len()
        ));
    }
    write(&cfg.output_dir.join(ABLATION_TIMING), timing)?;
    let full = rows[0].run.test.average.mae;
    let full_is_best = rows[1..].iter().all(|r| full < r.run.test.average.mae);
    Ok(Ablation { rows, full_is_best })
}

#[derive(Debug, Serialize)]
pub struct BaselineReports {
    pub persistence: MetricReport,
    pub historical_average: MetricReport,
}

/// Persistence and historical-average scores on the test split.
pub fn run_baseline(cfg: &ExperimentConfig) -> Result<BaselineReports> {
    let ws = Workspace::open(cfg)?;
    let thr = cfg.train.mape_threshold;
    let reports = BaselineReports {
        persistence: baselines::persistence_report(&ws.data.test, thr)?,
        historical_average: baselines::historical_average_report(&ws.data.train.raw, &ws.data.test, thr)?,
    };
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("baseline_persistence.csv"), reports.persistence.to_csv())?;
    write(
        &cfg.output_dir.join("baseline_historical_average.csv"),
        reports.historical_average.to_csv(),
    )?;
    write(&cfg.output_dir.join("baselines.json"), json(&reports)?)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Metrics;

    fn report(h: usize, mae: f64) -> MetricReport {
        let m = Metrics { mae, rmse: mae * 2.0, mape: Some(12.5) };
        MetricReport {
            horizons: vec![m; h],
            average: m,
            epoch: None,
        }
    }

    #[test]
    fn ablation_table_shape() {
        let reps: Vec<MetricReport> = (0..4).map(|i| report(12, 10.0 + i as f64)).collect();
        let rows: Vec<(Variant, &MetricReport)> = Variant::ALL.iter().copied().zip(&reps).collect();
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0].split(',').count(), 1 + 4 * 3);
        assert!(lines[0].starts_with("variant,mae_h3,rmse_h3,mape_h3,mae_h6"));
        assert!(lines[0].ends_with("mae_avg,rmse_avg,mape_avg"));
        assert!(lines[2].starts_with("w/o TE,11.0000,22.0000,12.5"));
    }

    #[test]
    fn short_horizons_keep_only_reachable_columns() {
        let r = report(4, 1.0);
        let csv = ablation_csv(&[(Variant::Full, &r)]);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 1 + 2 * 3);
    }

    #[test]
    fn model_shape_comes_from_data() {
        let series = crate::synthetic::daily_sinusoid(3, 200, 24, 1.0, 5.0).unwrap();
        let mut cfg = ExperimentConfig::default();
        let m = resolve_model(&cfg, &series).unwrap();
        assert_eq!((m.num_nodes, m.channels, m.steps_per_day), (3, 1, 24));
        cfg.model.num_nodes = 4;
        assert!(matches!(resolve_model(&cfg, &series), Err(Error::Config(_))));
        cfg.model.num_nodes = 0;
        cfg.variant = "w/o GRU".into();
        assert!(!resolve_model(&cfg, &series).unwrap().use_gru);
        cfg.variant = "nonsense".into();
        assert!(resolve_model(&cfg, &series).is_err());
    }
}
