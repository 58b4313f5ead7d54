//! Full forecaster: embeddings, disentangle gate, per-stream TE/encoder/graph
//! convolution, and the output head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use teddn_autograd::{Float, ParamStore, Tape, Tensor, TensorError, Var};

use crate::backbone::{self, DenseEncoder, Encoder, GruParams, OutputHead};
use crate::embeddings::{self, NodeTable, TimeTables, DAYS_PER_WEEK};
use crate::error::{Error, Result, StageExt};
use crate::gate::{self, GateParams};
use crate::gc::{self, GraphLearnParams, PropagationParams};
use crate::te::{self, TeParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 0 means "take it from the data".
    pub num_nodes: usize,
    /// 0 means "take it from the data".
    pub channels: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub steps_per_day: usize,
    pub time_dim: usize,
    pub node_dim: usize,
    pub graph_dim: usize,
    pub hidden_dim: usize,
    pub hops: usize,
    pub alpha: Float,
    pub beta_res: Float,
    pub epsilon: Float,
    pub reduction_ratio: usize,
    pub te_groups: usize,
    pub share_graph: bool,
    pub use_te: bool,
    pub use_dg: bool,
    pub use_gru: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_nodes: 0,
            channels: 0,
            input_len: 12,
            output_len: 12,
            steps_per_day: 288,
            time_dim: 16,
            node_dim: 16,
            graph_dim: 16,
            hidden_dim: 32,
            hops: 2,
            alpha: 3.0,
            beta_res: 0.5,
            epsilon: 1e-5,
            reduction_ratio: 4,
            te_groups: 1,
            share_graph: false,
            use_te: true,
            use_dg: true,
            use_gru: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_nodes", self.num_nodes),
            ("channels", self.channels),
            ("input_len", self.input_len),
            ("output_len", self.output_len),
            ("steps_per_day", self.steps_per_day),
            ("time_dim", self.time_dim),
            ("node_dim", self.node_dim),
            ("graph_dim", self.graph_dim),
            ("hidden_dim", self.hidden_dim),
            ("hops", self.hops),
            ("reduction_ratio", self.reduction_ratio),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta_res) {
            return Err(Error::Config(format!("beta_res must be in [0, 1], got {}", self.beta_res)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.te_groups != 1 {
            return Err(Error::Config(format!(
                "te_groups = {} is not supported; only a single group is implemented",
                self.te_groups
            )));
        }
        Ok(())
    }

    pub fn num_streams(&self) -> usize {
        if self.use_dg {
            2
        } else {
            1
        }
    }

    /// Width of the per-step encoder input: flow channels plus two time embeddings.
    pub fn encoder_input(&self) -> usize {
        self.channels + 2 * self.time_dim
    }

    /// Width of the head input: every stream state plus final-step time embeddings.
    pub fn head_input(&self) -> usize {
        self.num_streams() * self.hidden_dim + 2 * self.time_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o TE")]
    NoTe,
    #[serde(rename = "w/o DG")]
    NoDg,
    #[serde(rename = "w/o GRU")]
    NoGru,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoTe, Variant::NoDg, Variant::NoGru];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTe => "w/o TE",
            Variant::NoDg => "w/o DG",
            Variant::NoGru => "w/o GRU",
        }
    }

    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::NoTe => c.use_te = false,
            Variant::NoDg => c.use_dg = false,
            Variant::NoGru => c.use_gru = false,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of \"full\", \"w/o TE\", \"w/o DG\", \"w/o GRU\""
                ))
            })
    }
}

/// `variant(config, name)`.
pub fn variant(config: &ModelConfig, name: &str) -> Result<ModelConfig> {
    Ok(name.parse::<Variant>()?.apply(config))
}

#[derive(Clone, Debug)]
struct Stream {
    te: Option<TeParams>,
    encoder: Encoder,
    graph: GraphLearnParams,
    prop: PropagationParams,
}

/// Slot indices for every (sample, input step), row-major over `(B, T_h)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TimeSlots {
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
}

impl TimeSlots {
    pub fn len(&self) -> usize {
        self.tod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tod.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TeddnModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Per-channel multiplier applied after the head (the target std when
    /// inputs are standardized).
    pub output_scale: Vec<Float>,
    time: TimeTables,
    nodes: NodeTable,
    gate: Option<GateParams>,
    streams: Vec<Stream>,
    head: OutputHead,
}

impl TeddnModel {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let time = TimeTables::new(&mut store, &mut rng, c.steps_per_day, c.time_dim)?;
        let nodes = NodeTable::new(&mut store, &mut rng, c.num_nodes, c.node_dim)?;
        let gate = if c.use_dg {
            Some(GateParams::new(
                &mut store,
                &mut rng,
                c.time_dim,
                c.node_dim,
                c.graph_dim,
                c.reduction_ratio,
            )?)
        } else {
            None
        };
        let mut streams: Vec<Stream> = Vec::new();
        for s in 0..c.num_streams() {
            let prefix = format!("stream{s}");
            let te = if c.use_te {
                Some(TeParams::new(&mut store, &mut rng, &format!("{prefix}.te"), c.epsilon)?)
            } else {
                None
            };
            let encoder = if c.use_gru {
                Encoder::Gru(GruParams::new(
                    &mut store,
                    &mut rng,
                    &format!("{prefix}.gru"),
                    c.encoder_input(),
                    c.hidden_dim,
                )?)
            } else {
                Encoder::Dense(DenseEncoder::new(
                    &mut store,
                    &mut rng,
                    &format!("{prefix}.dense"),
                    c.encoder_input(),
                    c.hidden_dim,
                )?)
            };
            let gc_prefix = format!("{prefix}.gc");
            let graph = match streams.first() {
                Some(first) if c.share_graph => {
                    GraphLearnParams::sharing_nodes(&mut store, &mut rng, &gc_prefix, &first.graph)?
                }
                _ => GraphLearnParams::new(
                    &mut store,
                    &mut rng,
                    &gc_prefix,
                    c.num_nodes,
                    c.graph_dim,
                    c.alpha,
                )?,
            };
            let prop = PropagationParams::new(
                &mut store,
                &mut rng,
                &gc_prefix,
                c.hidden_dim,
                c.hops,
                c.beta_res,
            )?;
            streams.push(Stream {
                te,
                encoder,
                graph,
                prop,
            });
        }
        let head = OutputHead::new(&mut store, &mut rng, c.head_input(), c.output_len, c.channels)?;
        Ok(TeddnModel {
            output_scale: vec![1.0; config.channels],
            config,
            store,
            time,
            nodes,
            gate,
            streams,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// FNV-1a over every parameter's bit pattern, in registration order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Sets the output multiplier to `std` and the head bias so that a
    /// zero projection forecasts `mean`.
    pub fn calibrate_output(&mut self, mean: &[Float], std: &[Float]) -> Result<()> {
        let c = self.config.channels;
        if mean.len() != c || std.len() != c {
            return Err(Error::Config(format!(
                "calibration needs {c} channel statistics, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("output scale must be positive".into()));
        }
        self.output_scale = std.to_vec();
        let bias = Tensor::from_fn([self.config.output_len * c], |i| mean[i % c] / std[i % c]);
        self.store.set_value(self.head.bias, bias)?;
        Ok(())
    }

    /// Learned adjacency of each stream.
    pub fn adjacencies(&self) -> Result<Vec<Tensor>> {
        self.streams
            .iter()
            .map(|s| gc::adjacency_matrix(&self.store, &s.graph))
            .collect()
    }

    /// `inputs: (B, T_h, N, C)` → `(B, T_out, N, C)`.
    pub fn forward(&self, tape: &mut Tape, inputs: Var, slots: &TimeSlots) -> Result<Var> {
        self.forward_traced(tape, inputs, slots, &mut Vec::new())
    }

    /// As [`forward`](Self::forward), also recording the output of each
    /// pipeline stage in order.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        inputs: Var,
        slots: &TimeSlots,
        trace: &mut Vec<(&'static str, Var)>,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(inputs).to_vec();
        if shape.len() != 4
            || shape[1] != c.input_len
            || shape[2] != c.num_nodes
            || shape[3] != c.channels
        {
            return Err(TensorError::Dimension {
                op: "model input",
                lhs: shape,
                rhs: vec![c.input_len, c.num_nodes, c.channels],
            })
            .stage("model input");
        }
        let (b, th, n) = (shape[0], shape[1], shape[2]);
        if slots.tod.len() != b * th || slots.dow.len() != b * th {
            return Err(Error::Config(format!(
                "expected {} time slots, got {} / {}",
                b * th,
                slots.tod.len(),
                slots.dow.len()
            )));
        }
        if slots.dow.iter().any(|&d| d >= DAYS_PER_WEEK) || slots.tod.iter().any(|&t| t >= c.steps_per_day) {
            return Err(Error::Config("time slot out of range".into()));
        }

        let rows = embeddings::lookup(tape, &self.store, &self.time, &self.nodes, &slots.tod, &slots.dow)?;
        let dt = c.time_dim;
        let day = tape.reshape(rows.day, &[b, th, dt]).stage("embedding lookup")?;
        let week = tape.reshape(rows.week, &[b, th, dt]).stage("embedding lookup")?;
        trace.push(("embedding lookup", day));
        trace.push(("embedding lookup", week));

        let stream_inputs = match &self.gate {
            Some(g) => {
                let omega = gate::gate_values(tape, &self.store, day, week, rows.nodes, g)?;
                trace.push(("disentangle gate", omega));
                let (x1, x2) = gate::split(tape, inputs, omega)?;
                vec![x1, x2]
            }
            None => vec![inputs],
        };

        let day_b = expand_over_nodes(tape, day, b, th, n, dt)?;
        let week_b = expand_over_nodes(tape, week, b, th, n, dt)?;

        let mut parts = Vec::with_capacity(self.streams.len() + 2);
        for (stream, x) in self.streams.iter().zip(stream_inputs) {
            let mut h = tape.concat(&[x, day_b, week_b], 3).stage("te module")?;
            if let Some(p) = &stream.te {
                h = te::forward(tape, &self.store, h, p)?;
                trace.push(("te module", h));
            }
            let enc = stream.encoder.encode(tape, &self.store, h)?;
            trace.push(("gru", enc));
            let out = gc::forward(tape, &self.store, enc, &stream.graph, &stream.prop)?;
            trace.push(("gc module", out));
            parts.push(out);
        }

        for table in [day, week] {
            let last = tape.narrow(table, 1, th - 1, 1).stage("output head")?;
            let last = tape.broadcast_to(last, &[b, n, dt]).stage("output head")?;
            parts.push(last);
        }
        let features = tape.concat(&parts, 2).stage("output head")?;
        let y = backbone::project(tape, &self.store, features, &self.head)?;
        let scale = tape.input(Tensor::from_vec(self.output_scale.clone()));
        let y = tape.mul(y, scale).stage("output head")?;
        trace.push(("output head", y));
        Ok(y)
    }

    /// Forward pass without gradient bookkeeping beyond the scratch tape.
    pub fn predict(&self, inputs: &Tensor, slots: &TimeSlots) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(inputs.clone());
        let y = self.forward(&mut tape, x, slots)?;
        Ok(tape.value(y).clone())
    }

    /// First pipeline stage whose output contains a non-finite value.
    pub fn first_nonfinite_stage(&self, inputs: &Tensor, slots: &TimeSlots) -> Result<Option<&'static str>> {
        if !inputs.all_finite() {
            return Ok(Some("model input"));
        }
        let mut tape = Tape::new();
        let x = tape.input(inputs.clone());
        let mut trace = Vec::new();
        self.forward_traced(&mut tape, x, slots, &mut trace)?;
        Ok(trace
            .into_iter()
            .find(|(_, v)| !tape.value(*v).all_finite())
            .map(|(stage, _)| stage))
    }
}

/// `(B, T, d)` → `(B, T, N, d)`.
fn expand_over_nodes(tape: &mut Tape, t: Var, b: usize, th: usize, n: usize, d: usize) -> Result<Var> {
    let r = tape.reshape(t, &[b, th, 1, d]).stage("embedding lookup")?;
    tape.broadcast_to(r, &[b, th, n, d]).stage("embedding lookup")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_nodes: 3,
            channels: 1,
            time_dim: 4,
            node_dim: 4,
            graph_dim: 4,
            hidden_dim: 4,
            hops: 2,
            reduction_ratio: 2,
            ..ModelConfig::default()
        }
    }

    fn inputs(rng: &mut ChaCha8Rng, c: &ModelConfig, b: usize) -> (Tensor, TimeSlots) {
        let x = Tensor::from_fn([b, c.input_len, c.num_nodes, c.channels], |_| rng.random_range(-1.0..1.0));
        let mut slots = TimeSlots::default();
        for s in 0..b {
            for t in 0..c.input_len {
                let (tod, dow) = embeddings::time_index(100 + 37 * s + t, c.steps_per_day, 0);
                slots.tod.push(tod);
                slots.dow.push(dow);
            }
        }
        (x, slots)
    }

    #[test]
    fn parameter_count_matches_shape_accounting() {
        let m = TeddnModel::build(tiny_config(), 0).unwrap();
        // time tables 288·4 + 7·4, node table 3·4
        let embeddings = 288 * 4 + 7 * 4 + 3 * 4;
        // gate: CWAM over 12 channels with width 6, W1 12×4, W2 4×1
        let gate = 2 * 12 * 6 + 12 * 4 + 4;
        // per stream: γ, β; GRU on 1 + 8 inputs; E1, E2, W1, W2; fuse 8×4
        let gru = 3 * 9 * 4 + 3 * 4 * 4 + 3 * 4;
        let stream = 2 + gru + 2 * 3 * 4 + 2 * 4 * 4 + 8 * 4;
        // head: (2·4 + 2·4) × 12 plus a bias of 12
        let head = 16 * 12 + 12;
        assert_eq!(embeddings + gate + 2 * stream + head, 2108);
        assert_eq!(m.param_count(), 2108);
    }

    #[test]
    fn seeds_control_initialization() {
        let a = TeddnModel::build(tiny_config(), 7).unwrap();
        let b = TeddnModel::build(tiny_config(), 7).unwrap();
        let c = TeddnModel::build(tiny_config(), 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn parameter_names_are_unique_and_flat() {
        let m = TeddnModel::build(tiny_config(), 0).unwrap();
        let names: Vec<&str> = m.store.iter().map(|(_, p)| p.name()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"stream1.gc.fuse"));
        assert!(names.contains(&"gate.cwam.reduce"));
    }

    #[test]
    fn output_shape_on_full_graph() {
        let c = ModelConfig {
            num_nodes: 170,
            channels: 1,
            time_dim: 4,
            node_dim: 4,
            graph_dim: 4,
            hidden_dim: 8,
            ..ModelConfig::default()
        };
        let m = TeddnModel::build(c.clone(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, slots) = inputs(&mut rng, &c, 2);
        let y = m.predict(&x, &slots).unwrap();
        assert_eq!(y.shape(), &[2, 12, 170, 1]);
        assert!(y.all_finite());
    }

    #[test]
    fn zero_head_gives_zero_forecast() {
        let mut m = TeddnModel::build(tiny_config(), 0).unwrap();
        let shape = m.store.value(m.head.proj).shape().to_vec();
        m.store.set_value(m.head.proj, Tensor::zeros(shape)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, slots) = inputs(&mut rng, &m.config, 3);
        let y = m.predict(&x, &slots).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        m.calibrate_output(&[5.0], &[2.0]).unwrap();
        let y = m.predict(&x, &slots).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn ablations_change_stream_structure() {
        let full = TeddnModel::build(tiny_config(), 3).unwrap();
        let no_dg = TeddnModel::build(variant(&tiny_config(), "w/o DG").unwrap(), 3).unwrap();
        assert_ne!(full.param_count(), no_dg.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, slots) = inputs(&mut rng, &full.config, 2);
        for name in ["full", "w/o TE", "w/o DG", "w/o GRU"] {
            let m = TeddnModel::build(variant(&tiny_config(), name).unwrap(), 3).unwrap();
            let y = m.predict(&x, &slots).unwrap();
            assert_eq!(y.shape(), &[2, 12, 3, 1]);
            assert!(y.all_finite(), "{name}");
        }
    }

    #[test]
    fn variant_flags() {
        let c = tiny_config();
        assert_eq!(variant(&c, "full").unwrap(), c);
        let v = variant(&c, "w/o DG").unwrap();
        assert!(!v.use_dg && v.use_te && v.use_gru);
        let v = variant(&c, "w/o TE").unwrap();
        assert!(!v.use_te && v.use_dg && v.use_gru);
        let v = variant(&c, "w/o GRU").unwrap();
        assert!(!v.use_gru && v.use_dg && v.use_te);
        assert!(matches!(variant(&c, "w/o CWAM"), Err(Error::Config(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = TeddnModel::build(tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, slots) = inputs(&mut rng, &m.config, 2);
        let a = m.predict(&x, &slots).unwrap();
        let b = m.predict(&x, &slots).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn node_permutation_permutes_forecast() {
        let m = TeddnModel::build(tiny_config(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (x, slots) = inputs(&mut rng, &m.config, 1);
        let y = m.predict(&x, &slots).unwrap();

        let perm = [2usize, 0, 1];
        let permute_rows = |t: &Tensor| t.gather_rows(&perm).unwrap();
        let mut pm = m.clone();
        let node_params: Vec<_> = pm
            .store
            .iter()
            .filter(|(_, p)| {
                let n = p.name();
                n == "node.embedding" || n.ends_with(".gc.e1") || n.ends_with(".gc.e2")
            })
            .map(|(id, _)| id)
            .collect();
        assert_eq!(node_params.len(), 5);
        for id in node_params {
            let v = permute_rows(pm.store.value(id));
            pm.store.set_value(id, v).unwrap();
        }
        let xp = x.permute(&[2, 0, 1, 3]).unwrap().gather_rows(&perm).unwrap().permute(&[1, 2, 0, 3]).unwrap();
        let yp = pm.predict(&xp, &slots).unwrap();
        for t in 0..12 {
            for (i, &src) in perm.iter().enumerate() {
                let a = yp.get(&[0, t, i, 0]).unwrap();
                let b = y.get(&[0, t, src, 0]).unwrap();
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_config();
        c.hidden_dim = 0;
        assert!(matches!(TeddnModel::build(c, 0), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.te_groups = 2;
        assert!(matches!(TeddnModel::build(c, 0), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.num_nodes = 0;
        assert!(TeddnModel::build(c, 0).is_err());
    }

    #[test]
    fn bad_input_names_the_stage() {
        let m = TeddnModel::build(tiny_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut x, slots) = inputs(&mut rng, &m.config, 1);
        assert_eq!(m.first_nonfinite_stage(&x, &slots).unwrap(), None);
        x.data_mut()[0] = Float::NAN;
        assert_eq!(m.first_nonfinite_stage(&x, &slots).unwrap(), Some("model input"));

        let mut bad = m.clone();
        let id = bad.store.id("stream0.gc.fuse").unwrap();
        let mut v = bad.store.value(id).clone();
        v.data_mut()[0] = Float::INFINITY;
        bad.store.set_value(id, v).unwrap();
        let (x, _) = inputs(&mut rng, &m.config, 1);
        assert_eq!(bad.first_nonfinite_stage(&x, &slots).unwrap(), Some("gc module"));

        let wrong = Tensor::zeros([1, 12, 4, 1]);
        let err = m.predict(&wrong, &slots).unwrap_err();
        assert!(err.to_string().contains("model input"));
    }
}
