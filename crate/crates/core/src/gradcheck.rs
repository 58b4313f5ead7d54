//! End-to-end finite-difference check of every model parameter.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teddn_autograd::{finite_difference_grad, gradcheck::DEFAULT_STEP, relative_error, Float, Tape, Tensor};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{ModelConfig, TeddnModel, TimeSlots};

pub const TOLERANCE: Float = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Size {
    /// B=1, N=3, T_h=T_out=2, C=1, every width 4.
    Tiny,
    /// B=2, N=5, T_h=T_out=3, C=2, every width 4.
    Small,
}

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Size::Tiny),
            "small" => Ok(Size::Small),
            other => Err(Error::Config(format!("unknown gradcheck size {other:?}; use tiny or small"))),
        }
    }
}

impl Size {
    fn batch(self) -> usize {
        match self {
            Size::Tiny => 1,
            Size::Small => 2,
        }
    }

    pub fn model_config(self) -> ModelConfig {
        let (n, t, c) = match self {
            Size::Tiny => (3, 2, 1),
            Size::Small => (5, 3, 2),
        };
        ModelConfig {
            num_nodes: n,
            channels: c,
            input_len: t,
            output_len: t,
            steps_per_day: 6,
            time_dim: 4,
            node_dim: 4,
            graph_dim: 4,
            hidden_dim: 4,
            hops: 2,
            reduction_ratio: 2,
            ..ModelConfig::default()
        }
    }
}

/// Module a parameter belongs to, derived from its name.
pub fn module_of(name: &str) -> &'static str {
    let tail = name.split_once('.').map_or(name, |(head, rest)| {
        if head.starts_with("stream") {
            rest
        } else {
            name
        }
    });
    match tail.split('.').next().unwrap_or("") {
        "time" | "node" => "embeddings",
        "gate" if tail.starts_with("gate.cwam") => "cwam",
        "gate" => "disentangle gate",
        "te" => "te module",
        "gru" | "dense" => "temporal backbone",
        "gc" => "gc module",
        "head" => "output head",
        _ => "other",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamResult {
    pub name: String,
    pub worst: Float,
    pub index: usize,
    pub analytic: Float,
    pub numeric: Float,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub seed: u64,
    pub params: Vec<ParamResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Float {
        self.params.iter().map(|p| p.worst).fold(0.0, Float::max)
    }

    /// Worst parameter per module, keyed by module name.
    pub fn per_module(&self) -> BTreeMap<&'static str, &ParamResult> {
        let mut out: BTreeMap<&'static str, &ParamResult> = BTreeMap::new();
        for p in &self.params {
            let e = out.entry(module_of(&p.name)).or_insert(p);
            if p.worst > e.worst {
                *e = p;
            }
        }
        out
    }

    pub fn failures(&self) -> Vec<&ParamResult> {
        self.params.iter().filter(|p| !(p.worst < TOLERANCE)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

fn mae(model: &TeddnModel, x: &Tensor, y: &Tensor, slots: &TimeSlots) -> Result<Float> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let pred = model.forward(&mut tape, xv, slots)?;
    let yv = tape.input(y.clone());
    let l = metrics::loss(&mut tape, pred, yv, model.config.output_len)?;
    Ok(tape.value(l).item()?)
}

/// Compares every analytic gradient of an MAE loss with central finite
/// differences. `corrupt` names a parameter whose analytic gradient is
/// scaled by 1.5 before comparison, as a negative control.
pub fn run(size: Size, seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    if std::mem::size_of::<Float>() != 8 {
        return Err(Error::Config("gradcheck needs the 64-bit build".into()));
    }
    let config = size.model_config();
    let mut model = TeddnModel::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9cad);
    let b = size.batch();
    let (t, n, c) = (config.input_len, config.num_nodes, config.channels);
    let x = Tensor::from_fn([b, t, n, c], |_| rng.random_range(-1.0..1.0));
    let y = Tensor::from_fn([b, config.output_len, n, c], |_| rng.random_range(-2.0..2.0));
    let mut slots = TimeSlots::default();
    for _ in 0..b {
        let start = rng.random_range(0..config.steps_per_day * 7);
        for k in 0..t {
            let (tod, dow) = crate::embeddings::time_index(start + k, config.steps_per_day, 0);
            slots.tod.push(tod);
            slots.dow.push(dow);
        }
    }

    model.store.zero_grad();
    {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let pred = model.forward(&mut tape, xv, &slots)?;
        let yv = tape.input(y.clone());
        let l = metrics::loss(&mut tape, pred, yv, config.output_len)?;
        tape.backward(l, &mut model.store)?;
    }

    let ids: Vec<_> = model.store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let name = model.store.get(id).name().to_string();
        let mut analytic = model.store.get(id).grad.clone();
        if corrupt == Some(name.as_str()) {
            analytic = analytic.scale(1.5);
        }
        let original = model.store.value(id).clone();
        let numeric = finite_difference_grad(
            |probe: &Tensor| -> Result<Float> {
                model.store.set_value(id, probe.clone())?;
                mae(&model, &x, &y, &slots)
            },
            &original,
            DEFAULT_STEP,
        )?;
        model.store.set_value(id, original)?;
        let mut worst = ParamResult {
            name,
            worst: 0.0,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, (&a, &nm)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let e = relative_error(a, nm);
            if !(e <= worst.worst) {
                worst.worst = e;
                worst.index = i;
                worst.analytic = a;
                worst.numeric = nm;
            }
        }
        params.push(worst);
    }
    Ok(GradcheckReport { seed, params })
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;

    #[test]
    fn module_names() {
        assert_eq!(module_of("time.day"), "embeddings");
        assert_eq!(module_of("gate.cwam.reduce"), "cwam");
        assert_eq!(module_of("gate.w1"), "disentangle gate");
        assert_eq!(module_of("stream1.te.gamma"), "te module");
        assert_eq!(module_of("stream0.gru.u_h"), "temporal backbone");
        assert_eq!(module_of("stream0.gc.fuse"), "gc module");
        assert_eq!(module_of("head.proj"), "output head");
    }

    #[test]
    fn tiny_passes_and_corruption_is_caught() {
        let r = run(Size::Tiny, 0, None).unwrap();
        assert!(r.passed(), "worst {}", r.worst());
        assert_eq!(r.per_module().len(), 7);
        let bad = run(Size::Tiny, 0, Some("stream0.gru.w_z")).unwrap();
        let f = bad.failures();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].name, "stream0.gru.w_z");
    }
}
