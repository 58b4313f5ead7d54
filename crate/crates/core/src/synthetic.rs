//! Deterministic synthetic traffic series for tests, fixtures and smoke runs.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use teddn_autograd::{Float, Tensor};

use crate::data::TrafficSeries;
use crate::error::{Error, Result};

/// Pure daily sinusoid: node `i` is
/// `offset + amplitude·(1 + 0.25·i)·sin(2π·t/steps_per_day + 0.7·i)`.
pub fn daily_sinusoid(
    nodes: usize,
    steps: usize,
    steps_per_day: usize,
    amplitude: Float,
    offset: Float,
) -> Result<TrafficSeries> {
    let values = Tensor::from_fn([steps, nodes, 1], |k| {
        let (t, i) = (k / nodes, k % nodes);
        let phase = TAU * t as f64 / steps_per_day as f64 + 0.7 * i as f64;
        offset + amplitude * (1.0 + 0.25 * i as Float) * phase.sin() as Float
    });
    TrafficSeries::new(values, steps_per_day, 0)
}

/// Parameters of the PEMS-like generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub days: usize,
    pub steps_per_day: usize,
    pub start_weekday: usize,
    pub seed: u64,
    /// Innovation std of the per-node AR(1) disturbance, in flow units.
    pub noise: Float,
    /// AR(1) coefficient of the disturbance.
    pub persistence: Float,
    /// Fraction of the upstream node's lagged flow added to each node.
    pub coupling: Float,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            nodes: 8,
            days: 14,
            steps_per_day: 288,
            start_weekday: 0,
            seed: 0,
            noise: 8.0,
            persistence: 0.95,
            coupling: 0.3,
        }
    }
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let d = (hour - center) / width;
    (-0.5 * d * d).exp()
}

/// Commuter-shaped daily profile in `[0.15, ~1.2]`, damped at weekends.
fn profile(tod: usize, dow: usize, steps_per_day: usize, shift_hours: f64) -> f64 {
    let hour = 24.0 * tod as f64 / steps_per_day as f64 - shift_hours;
    let weekend = dow >= 5;
    let (am, pm) = if weekend { (0.35, 0.55) } else { (0.9, 1.0) };
    0.15 + 0.35 * bump(hour, 13.0, 4.0) + am * bump(hour, 8.0, 1.2) + pm * bump(hour, 17.5, 1.5)
}

/// Multi-node flow with daily and weekly structure, a directed upstream
/// coupling along the node chain, and persistent AR(1) disturbances.
pub fn pems_like(spec: &SyntheticSpec) -> Result<TrafficSeries> {
    if spec.nodes == 0 || spec.days == 0 || spec.steps_per_day == 0 {
        return Err(Error::Config("synthetic nodes, days and steps_per_day must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&spec.persistence) || !(spec.noise >= 0.0) {
        return Err(Error::Config("synthetic persistence must be in [0, 1) and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.nodes;
    let scale: Vec<f64> = (0..n).map(|_| rng.random_range(150.0..400.0)).collect();
    let shift: Vec<f64> = (0..n).map(|_| rng.random_range(-0.75..0.75)).collect();
    let normal = Normal::new(0.0, spec.noise as f64).map_err(|e| Error::Config(e.to_string()))?;
    let steps = spec.days * spec.steps_per_day;
    let lag = 3;
    let mut ar = vec![0.0f64; n];
    let mut data = vec![0.0 as Float; steps * n];
    for t in 0..steps {
        let tod = t % spec.steps_per_day;
        let dow = (spec.start_weekday + t / spec.steps_per_day) % 7;
        for i in 0..n {
            ar[i] = spec.persistence as f64 * ar[i] + normal.sample(&mut rng);
            let mut v = scale[i] * profile(tod, dow, spec.steps_per_day, shift[i]) + ar[i];
            if i > 0 && t >= lag {
                v += spec.coupling as f64 * data[(t - lag) * n + i - 1] as f64;
            }
            data[t * n + i] = v.max(0.0) as Float;
        }
    }
    TrafficSeries::new(Tensor::new([steps, n, 1], data)?, spec.steps_per_day, spec.start_weekday)
}
