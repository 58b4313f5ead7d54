//! Temporal encoders that reduce a `(.., T, N, D_in)` sequence to a
//! `(.., N, D_h)` state, and the linear output head.

use rand_chacha::ChaCha8Rng;
use teddn_autograd::{Float, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

use crate::error::{Result, StageExt};
use crate::init;

const GRU: &str = "gru";
const HEAD: &str = "output head";

#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as Float).sqrt();
        let mut reg = |name: &str, shape: &[usize]| {
            store.register(format!("{prefix}.{name}"), init::uniform(rng, shape, bound))
        };
        Ok(GruParams {
            w_z: reg("w_z", &[input, hidden])?,
            w_r: reg("w_r", &[input, hidden])?,
            w_h: reg("w_h", &[input, hidden])?,
            u_z: reg("u_z", &[hidden, hidden])?,
            u_r: reg("u_r", &[hidden, hidden])?,
            u_h: reg("u_h", &[hidden, hidden])?,
            b_z: reg("b_z", &[hidden])?,
            b_r: reg("b_r", &[hidden])?,
            b_h: reg("b_h", &[hidden])?,
            input,
            hidden,
        })
    }
}

/// Parameters bound to one tape, so a sequence fold copies each once.
struct BoundGru {
    u_z: Var,
    u_r: Var,
    u_h: Var,
}

fn check_width(tape: &Tape, x: Var, width: usize, op: &'static str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.last() != Some(&width) {
        return Err(TensorError::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![width],
        })
        .stage(GRU);
    }
    Ok(())
}

/// Input projections `x·W + b` for the three gates.
fn project_inputs(tape: &mut Tape, store: &ParamStore, x: Var, p: &GruParams) -> Result<[Var; 3]> {
    let mut out = [x; 3];
    for (slot, (w, b)) in out
        .iter_mut()
        .zip([(p.w_z, p.b_z), (p.w_r, p.b_r), (p.w_h, p.b_h)])
    {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let xw = tape.matmul(x, w).stage(GRU)?;
        *slot = tape.add(xw, b).stage(GRU)?;
    }
    Ok(out)
}

fn step(tape: &mut Tape, xp: [Var; 3], h: Var, u: &BoundGru) -> Result<Var> {
    let hz = tape.matmul(h, u.u_z).stage(GRU)?;
    let z = tape.add(xp[0], hz).stage(GRU)?;
    let z = tape.sigmoid(z);
    let hr = tape.matmul(h, u.u_r).stage(GRU)?;
    let r = tape.add(xp[1], hr).stage(GRU)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h).stage(GRU)?;
    let rhu = tape.matmul(rh, u.u_h).stage(GRU)?;
    let cand = tape.add(xp[2], rhu).stage(GRU)?;
    let cand = tape.tanh(cand);
    // h + z(h̃ - h) == (1 - z)h + z·h̃
    let delta = tape.sub(cand, h).stage(GRU)?;
    let delta = tape.mul(z, delta).stage(GRU)?;
    tape.add(h, delta).stage(GRU)
}

fn bind(tape: &mut Tape, store: &ParamStore, p: &GruParams) -> BoundGru {
    BoundGru {
        u_z: tape.param(store, p.u_z),
        u_r: tape.param(store, p.u_r),
        u_h: tape.param(store, p.u_h),
    }
}

/// One GRU step. `x: (.., D_in)`, `h_prev: (.., D_h)`.
pub fn gru_cell(tape: &mut Tape, store: &ParamStore, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    check_width(tape, x, p.input, "gru input")?;
    check_width(tape, h_prev, p.hidden, "gru state")?;
    let xp = project_inputs(tape, store, x, p)?;
    let u = bind(tape, store, p);
    step(tape, xp, h_prev, &u)
}

/// Folds the cell over the time axis (`rank - 3`) from a zero state and
/// returns the final state. `x: (.., T, N, D_in) -> (.., N, D_h)`.
pub fn encode_sequence(tape: &mut Tape, store: &ParamStore, x: Var, p: &GruParams) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 3 {
        return Err(TensorError::Contract(format!(
            "gru expects (.., T, N, D), got {shape:?}"
        )))
        .stage(GRU);
    }
    let t_axis = shape.len() - 3;
    let steps = shape[t_axis];
    if steps == 0 {
        return Err(TensorError::Contract("empty input sequence".into())).stage(GRU);
    }
    check_width(tape, x, p.input, "gru input")?;
    let xp = project_inputs(tape, store, x, p)?;
    let u = bind(tape, store, p);
    let mut state_shape = shape.clone();
    state_shape.remove(t_axis);
    *state_shape.last_mut().expect("rank >= 3") = p.hidden;
    let mut h = tape.input(Tensor::zeros(state_shape.clone()));
    for t in 0..steps {
        let mut xt = [h; 3];
        for (slot, &proj) in xt.iter_mut().zip(&xp) {
            let s = tape.narrow(proj, t_axis, t, 1).stage(GRU)?;
            *slot = tape.reshape(s, &state_shape).stage(GRU)?;
        }
        h = step(tape, xt, h, &u)?;
    }
    Ok(h)
}

/// Replacement encoder for the no-GRU variant: a per-step dense map
/// followed by the mean over time.
#[derive(Clone, Debug)]
pub struct DenseEncoder {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl DenseEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let w = store.register(format!("{prefix}.w"), init::fan_in(rng, &[input, hidden]))?;
        let b = store.register(format!("{prefix}.b"), Tensor::zeros([hidden]))?;
        Ok(DenseEncoder { w, b, input, hidden })
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() < 3 || shape[shape.len() - 3] == 0 {
            return Err(TensorError::Contract(format!(
                "dense encoder expects non-empty (.., T, N, D), got {shape:?}"
            )))
            .stage(GRU);
        }
        check_width(tape, x, self.input, "dense encoder input")?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w).stage(GRU)?;
        let y = tape.add(y, b).stage(GRU)?;
        let y = tape.tanh(y);
        tape.mean(y, &[shape.len() - 3]).stage(GRU)
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Gru(GruParams),
    Dense(DenseEncoder),
}

impl Encoder {
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Encoder::Gru(p) => encode_sequence(tape, store, x, p),
            Encoder::Dense(d) => d.encode(tape, store, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OutputHead {
    /// `D_cat × (T_out·C)`
    pub proj: ParamId,
    /// `T_out·C`
    pub bias: ParamId,
    pub input: usize,
    pub horizon: usize,
    pub channels: usize,
}

impl OutputHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        input: usize,
        horizon: usize,
        channels: usize,
    ) -> Result<Self> {
        let proj = store.register("head.proj", init::fan_in(rng, &[input, horizon * channels]))?;
        let bias = store.register("head.bias", Tensor::zeros([horizon * channels]))?;
        Ok(OutputHead {
            proj,
            bias,
            input,
            horizon,
            channels,
        })
    }
}

/// Per-node dense map, then `(.., N, T_out·C) -> (.., T_out, N, C)`.
pub fn project(tape: &mut Tape, store: &ParamStore, features: Var, head: &OutputHead) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() < 2 || shape[shape.len() - 1] != head.input {
        return Err(TensorError::Dimension {
            op: "output projection",
            lhs: shape,
            rhs: vec![head.input, head.horizon * head.channels],
        })
        .stage(HEAD);
    }
    let proj = tape.param(store, head.proj);
    let bias = tape.param(store, head.bias);
    let y = tape.matmul(features, proj).stage(HEAD)?;
    let y = tape.add(y, bias).stage(HEAD)?;
    let lead = shape.len() - 2;
    let n = shape[lead];
    let mut split = shape[..lead].to_vec();
    split.extend([n, head.horizon, head.channels]);
    let y = tape.reshape(y, &split).stage(HEAD)?;
    let mut perm: Vec<usize> = (0..lead).collect();
    perm.extend([lead + 1, lead, lead + 2]);
    tape.permute(y, &perm).stage(HEAD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use teddn_autograd::sigmoid;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn gru(seed: u64, input: usize, hidden: usize) -> (ParamStore, GruParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GruParams::new(&mut store, &mut rng, "gru", input, hidden).unwrap();
        (store, p)
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
    }

    /// Scalar-loop GRU step for one row.
    fn oracle_cell(store: &ParamStore, p: &GruParams, x: &[Float], h: &[Float]) -> Vec<Float> {
        let lin = |w: ParamId, u: ParamId, b: ParamId, hv: &[Float], j: usize| -> Float {
            let (w, u, b) = (store.value(w), store.value(u), store.value(b));
            let mut acc = b.data()[j];
            for (k, xk) in x.iter().enumerate() {
                acc += xk * w.get(&[k, j]).unwrap();
            }
            for (k, hk) in hv.iter().enumerate() {
                acc += hk * u.get(&[k, j]).unwrap();
            }
            acc
        };
        let d = p.hidden;
        let z: Vec<Float> = (0..d).map(|j| sigmoid(lin(p.w_z, p.u_z, p.b_z, h, j))).collect();
        let r: Vec<Float> = (0..d).map(|j| sigmoid(lin(p.w_r, p.u_r, p.b_r, h, j))).collect();
        let rh: Vec<Float> = (0..d).map(|j| r[j] * h[j]).collect();
        let c: Vec<Float> = (0..d).map(|j| lin(p.w_h, p.u_h, p.b_h, &rh, j).tanh()).collect();
        (0..d).map(|j| (1.0 - z[j]) * h[j] + z[j] * c[j]).collect()
    }

    #[test]
    fn zero_parameter_cell() {
        let (mut store, p) = gru(0, 3, 2);
        zero_all(&mut store);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones([4, 3]));
        let h0 = tape.input(Tensor::zeros([4, 2]));
        let h = gru_cell(&mut tape, &store, x, h0, &p).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));

        let v = Tensor::from_fn([4, 2], |i| i as Float - 3.0);
        let hv = tape.input(v.clone());
        let h = gru_cell(&mut tape, &store, x, hv, &p).unwrap();
        assert_eq!(tape.value(h), &v.scale(0.5));
    }

    #[test]
    fn cell_matches_scalar_loop() {
        let (store, p) = gru(1, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = rand_t(&mut rng, &[5, 3]);
        let ht = rand_t(&mut rng, &[5, 4]);
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let h0 = tape.input(ht.clone());
        let h = gru_cell(&mut tape, &store, x, h0, &p).unwrap();
        for i in 0..5 {
            let want = oracle_cell(&store, &p, &xt.data()[i * 3..i * 3 + 3], &ht.data()[i * 4..i * 4 + 4]);
            for j in 0..4 {
                assert!((tape.value(h).get(&[i, j]).unwrap() - want[j]).abs() < 1e-14);
            }
        }
        let bad = tape.input(Tensor::zeros([5, 2]));
        assert!(gru_cell(&mut tape, &store, bad, h0, &p).is_err());
    }

    #[test]
    fn sequence_equals_chained_cells() {
        let (store, p) = gru(3, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = rand_t(&mut rng, &[3, 4, 2]);
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let enc = encode_sequence(&mut tape, &store, x, &p).unwrap();
        let mut h = vec![vec![0.0; 3]; 4];
        for t in 0..3 {
            for (i, hi) in h.iter_mut().enumerate() {
                let off = (t * 4 + i) * 2;
                *hi = oracle_cell(&store, &p, &xt.data()[off..off + 2], hi);
            }
        }
        for i in 0..4 {
            for j in 0..3 {
                assert!((tape.value(enc).get(&[i, j]).unwrap() - h[i][j]).abs() < 1e-14);
            }
        }

        let mut tape = Tape::new();
        let first = tape.input(xt.narrow(0, 0, 1).unwrap());
        let enc = encode_sequence(&mut tape, &store, first, &p).unwrap();
        let x0 = tape.input(xt.narrow(0, 0, 1).unwrap().reshape([4, 2]).unwrap());
        let z = tape.input(Tensor::zeros([4, 3]));
        let cell = gru_cell(&mut tape, &store, x0, z, &p).unwrap();
        assert_eq!(tape.value(enc), tape.value(cell));

        let empty = tape.input(Tensor::zeros([0, 4, 2]));
        assert!(encode_sequence(&mut tape, &store, empty, &p).is_err());
    }

    #[test]
    fn zero_input_zero_params_stay_zero() {
        let (mut store, p) = gru(5, 2, 3);
        zero_all(&mut store);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros([4, 3, 2]));
        let enc = encode_sequence(&mut tape, &store, x, &p).unwrap();
        assert!(tape.value(enc).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..20 {
            let (store, p) = gru(seed, 3, 3);
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_fn([6, 3], |_| rng.random_range(-5.0..5.0)));
            let h0 = tape.input(rand_t(&mut rng, &[6, 3]));
            let h = gru_cell(&mut tape, &store, x, h0, &p).unwrap();
            assert!(tape.value(h).max_abs() <= 1.0);
        }
    }

    #[test]
    fn batched_sequence_matches_per_sample() {
        let (store, p) = gru(7, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xt = rand_t(&mut rng, &[2, 3, 4, 2]);
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let all = encode_sequence(&mut tape, &store, x, &p).unwrap();
        assert_eq!(tape.shape(all), &[2, 4, 3]);
        for b in 0..2 {
            let mut t2 = Tape::new();
            let xb = t2.input(xt.narrow(0, b, 1).unwrap().reshape([3, 4, 2]).unwrap());
            let e = encode_sequence(&mut t2, &store, xb, &p).unwrap();
            let want = tape.value(all).narrow(0, b, 1).unwrap();
            for (a, w) in t2.value(e).data().iter().zip(want.data()) {
                assert!((a - w).abs() < 1e-15);
            }
        }
    }

    fn head(input: usize, horizon: usize, channels: usize) -> (ParamStore, OutputHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = OutputHead::new(&mut store, &mut rng, input, horizon, channels).unwrap();
        (store, h)
    }

    #[test]
    fn projection_examples() {
        let (mut store, h) = head(6, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ft = rand_t(&mut rng, &[4, 6]);

        store.set_value(h.proj, Tensor::eye(6)).unwrap();
        let mut tape = Tape::new();
        let f = tape.input(ft.clone());
        let y = project(&mut tape, &store, f, &h).unwrap();
        assert_eq!(tape.shape(y), &[3, 4, 2]);
        for t in 0..3 {
            for i in 0..4 {
                for c in 0..2 {
                    assert_eq!(tape.value(y).get(&[t, i, c]).unwrap(), ft.get(&[i, t * 2 + c]).unwrap());
                }
            }
        }

        store.set_value(h.proj, Tensor::zeros([6, 6])).unwrap();
        let mut tape = Tape::new();
        let f = tape.input(ft.clone());
        let y = project(&mut tape, &store, f, &h).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let bad = tape.input(Tensor::zeros([4, 5]));
        assert!(project(&mut tape, &store, bad, &h).is_err());
    }

    #[test]
    fn projection_matches_loop_oracle() {
        let (store, h) = head(5, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ft = rand_t(&mut rng, &[2, 4, 5]);
        let mut tape = Tape::new();
        let f = tape.input(ft.clone());
        let y = project(&mut tape, &store, f, &h).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 4, 3]);
        let w = store.value(h.proj);
        for b in 0..2 {
            for t in 0..2 {
                for i in 0..4 {
                    for c in 0..3 {
                        let col = t * 3 + c;
                        let want: Float =
                            (0..5).map(|k| ft.get(&[b, i, k]).unwrap() * w.get(&[k, col]).unwrap()).sum();
                        let got = tape.value(y).get(&[b, t, i, c]).unwrap();
                        assert!((got - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn dense_encoder_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = DenseEncoder::new(&mut store, &mut rng, "dense", 3, 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(rand_t(&mut rng, &[2, 4, 6, 3]));
        let y = d.encode(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 6, 5]);
    }
}
