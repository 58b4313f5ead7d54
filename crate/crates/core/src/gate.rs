//! Disentangle gate: a per-(time, node) ratio Ω in (0, 1) computed from the
//! time and node embeddings, splitting raw flow into a pattern stream
//! `X1 = X ⊙ Ω` and a residual stream `X2 = X - X1`.

use rand_chacha::ChaCha8Rng;
use teddn_autograd::{ParamId, ParamStore, Tape, TensorError, Var};

use crate::cwam::{self, CwamParams};
use crate::error::{Result, StageExt};
use crate::init;

#[derive(Clone, Debug)]
pub struct GateParams {
    /// `(2·d_t + d_n) × d_g`
    pub w1: ParamId,
    /// `d_g × 1`
    pub w2: ParamId,
    pub cwam: CwamParams,
    pub in_width: usize,
    pub hidden: usize,
}

impl GateParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        time_dim: usize,
        node_dim: usize,
        hidden: usize,
        reduction_ratio: usize,
    ) -> Result<Self> {
        let in_width = 2 * time_dim + node_dim;
        let cwam = CwamParams::new(store, rng, "gate.cwam", in_width, reduction_ratio)?;
        let w1 = store.register("gate.w1", init::fan_in(rng, &[in_width, hidden]))?;
        let w2 = store.register("gate.w2", init::fan_in(rng, &[hidden, 1]))?;
        Ok(GateParams {
            w1,
            w2,
            cwam,
            in_width,
            hidden,
        })
    }
}

/// Per-(b, t, i) concatenation `[day[b,t] ‖ week[b,t] ‖ nodes[i]]`.
///
/// `day`, `week`: `(B, T, d_t)`; `nodes`: `(N, d_n)` → `(B, T, N, 2·d_t + d_n)`.
pub fn gate_features(tape: &mut Tape, day: Var, week: Var, nodes: Var) -> Result<Var> {
    let ds = tape.shape(day).to_vec();
    let ws = tape.shape(week).to_vec();
    let ns = tape.shape(nodes).to_vec();
    if ds.len() != 3 || ds != ws || ns.len() != 2 {
        return Err(TensorError::Dimension {
            op: "gate features",
            lhs: ds,
            rhs: ns,
        })
        .stage("disentangle gate");
    }
    let (b, t, dt) = (ds[0], ds[1], ds[2]);
    let (n, dn) = (ns[0], ns[1]);
    let day = tape.reshape(day, &[b, t, 1, dt]).stage("disentangle gate")?;
    let day = tape.broadcast_to(day, &[b, t, n, dt]).stage("disentangle gate")?;
    let week = tape.reshape(week, &[b, t, 1, dt]).stage("disentangle gate")?;
    let week = tape.broadcast_to(week, &[b, t, n, dt]).stage("disentangle gate")?;
    let nodes = tape.reshape(nodes, &[1, 1, n, dn]).stage("disentangle gate")?;
    let nodes = tape.broadcast_to(nodes, &[b, t, n, dn]).stage("disentangle gate")?;
    tape.concat(&[day, week, nodes], 3).stage("disentangle gate")
}

/// Ω = sigmoid(relu(CWAM(feat) · W1) · W2).
///
/// Batched form takes `day`, `week` as `(B, T, d_t)` and returns
/// `(B, T, N, 1)`; the single-sample form takes `(T, d_t)` and returns
/// `(T, N, 1)`. The CWAM squeeze pools over time and nodes per sample.
pub fn gate_values(
    tape: &mut Tape,
    store: &ParamStore,
    day: Var,
    week: Var,
    nodes: Var,
    p: &GateParams,
) -> Result<Var> {
    let single = tape.shape(day).len() == 2;
    let (day, week) = if single {
        let ds = tape.shape(day).to_vec();
        let ws = tape.shape(week).to_vec();
        let d = tape.reshape(day, &[1, ds[0], ds[1]]).stage("disentangle gate")?;
        let w = tape
            .reshape(week, &[1, ws[0], ws.get(1).copied().unwrap_or(0)])
            .stage("disentangle gate")?;
        (d, w)
    } else {
        (day, week)
    };
    let feat = gate_features(tape, day, week, nodes)?;
    if tape.shape(feat)[3] != p.in_width {
        return Err(TensorError::Dimension {
            op: "gate width",
            lhs: tape.shape(feat).to_vec(),
            rhs: vec![p.in_width, p.hidden],
        })
        .stage("disentangle gate");
    }
    let feat = cwam::attend(tape, store, feat, &p.cwam, 1)?;
    let w1 = tape.param(store, p.w1);
    let w2 = tape.param(store, p.w2);
    let hidden = tape.matmul(feat, w1).stage("disentangle gate")?;
    let hidden = tape.relu(hidden);
    let logit = tape.matmul(hidden, w2).stage("disentangle gate")?;
    let omega = tape.sigmoid(logit);
    if single {
        let s = tape.shape(omega)[1..].to_vec();
        tape.reshape(omega, &s).stage("disentangle gate")
    } else {
        Ok(omega)
    }
}

/// `X1 = X ⊙ Ω` (Ω broadcast over channels) and `X2 = X - X1`, with
/// `X1` recovered as `X - X2` so that `X1 + X2 == X` holds exactly.
pub fn split(tape: &mut Tape, x: Var, omega: Var) -> Result<(Var, Var)> {
    let xs = tape.shape(x).to_vec();
    let os = tape.shape(omega).to_vec();
    let ok = xs.len() == os.len()
        && os.last() == Some(&1)
        && xs[..xs.len() - 1] == os[..os.len() - 1];
    if !ok {
        return Err(TensorError::Dimension {
            op: "gate split",
            lhs: xs,
            rhs: os,
        })
        .stage("disentangle gate");
    }
    let scaled = tape.mul(x, omega).stage("disentangle gate")?;
    let x2 = tape.sub(x, scaled).stage("disentangle gate")?;
    // both subtractions are exact here, so x1 + x2 reproduces x bit for bit
    let x1 = tape.sub(x, x2).stage("disentangle gate")?;
    Ok((x1, x2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use teddn_autograd::{sigmoid, Float, Tensor};

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn setup(seed: u64) -> (ParamStore, GateParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GateParams::new(&mut store, &mut rng, 2, 2, 2, 2).unwrap();
        (store, p)
    }

    #[test]
    fn zero_parameters_give_half_everywhere() {
        let (mut store, p) = setup(0);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let day = tape.input(rand_t(&mut rng, &[2, 2]));
        let week = tape.input(rand_t(&mut rng, &[2, 2]));
        let nodes = tape.input(rand_t(&mut rng, &[3, 2]));
        let omega = gate_values(&mut tape, &store, day, week, nodes, &p).unwrap();
        assert_eq!(tape.shape(omega), &[2, 3, 1]);
        assert!(tape.value(omega).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_node_rows_give_node_constant_gate() {
        let (store, p) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = rand_t(&mut rng, &[1, 2]);
        let nodes_t = row.broadcast_to(&[4, 2]).unwrap();
        let mut tape = Tape::new();
        let day = tape.input(rand_t(&mut rng, &[3, 2]));
        let week = tape.input(rand_t(&mut rng, &[3, 2]));
        let nodes = tape.input(nodes_t);
        let omega = gate_values(&mut tape, &store, day, week, nodes, &p).unwrap();
        let o = tape.value(omega);
        for t in 0..3 {
            for i in 1..4 {
                assert_eq!(o.get(&[t, i, 0]).unwrap(), o.get(&[t, 0, 0]).unwrap());
            }
        }
    }

    /// Hand-rolled per-(t, i) evaluation of the gate with CWAM.
    #[test]
    fn matches_step_by_step_oracle() {
        let (store, p) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (th, n) = (2, 3);
        let day_t = rand_t(&mut rng, &[th, 2]);
        let week_t = rand_t(&mut rng, &[th, 2]);
        let nodes_t = rand_t(&mut rng, &[n, 2]);
        let mut tape = Tape::new();
        let day = tape.input(day_t.clone());
        let week = tape.input(week_t.clone());
        let nodes = tape.input(nodes_t.clone());
        let omega = gate_values(&mut tape, &store, day, week, nodes, &p).unwrap();

        let feat = |t: usize, i: usize| -> Vec<Float> {
            let mut f = Vec::new();
            f.extend_from_slice(&day_t.data()[t * 2..t * 2 + 2]);
            f.extend_from_slice(&week_t.data()[t * 2..t * 2 + 2]);
            f.extend_from_slice(&nodes_t.data()[i * 2..i * 2 + 2]);
            f
        };
        let c = 6;
        let mut z = vec![0.0; c];
        for t in 0..th {
            for i in 0..n {
                for (zc, v) in z.iter_mut().zip(feat(t, i)) {
                    *zc += v / (th * n) as Float;
                }
            }
        }
        let (r, e) = (store.value(p.cwam.reduce), store.value(p.cwam.expand));
        let hid: Vec<Float> = (0..p.cwam.hidden)
            .map(|j| (0..c).map(|k| z[k] * r.get(&[k, j]).unwrap()).sum::<Float>().max(0.0))
            .collect();
        let s: Vec<Float> = (0..c)
            .map(|k| sigmoid((0..p.cwam.hidden).map(|j| hid[j] * e.get(&[j, k]).unwrap()).sum()))
            .collect();
        let (w1, w2) = (store.value(p.w1), store.value(p.w2));
        for t in 0..th {
            for i in 0..n {
                let f: Vec<Float> = feat(t, i).iter().zip(&s).map(|(a, b)| a * b).collect();
                let mut logit = 0.0;
                for j in 0..p.hidden {
                    let h: Float = (0..c).map(|k| f[k] * w1.get(&[k, j]).unwrap()).sum();
                    logit += h.max(0.0) * w2.get(&[j, 0]).unwrap();
                }
                let want = sigmoid(logit);
                let got = tape.value(omega).get(&[t, i, 0]).unwrap();
                assert!((got - want).abs() < 1e-14, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn split_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x_t = rand_t(&mut rng, &[2, 3, 2]);
        let mut tape = Tape::new();
        let x = tape.input(x_t.clone());
        let half = tape.input(Tensor::full([2, 3, 1], 0.5));
        let (x1, x2) = split(&mut tape, x, half).unwrap();
        assert_eq!(tape.value(x1), &x_t.scale(0.5));
        assert_eq!(tape.value(x2), &x_t.scale(0.5));

        let saturated = tape.input(Tensor::full([2, 3, 1], sigmoid(40.0)));
        let (x1, x2) = split(&mut tape, x, saturated).unwrap();
        for (a, b) in tape.value(x1).data().iter().zip(x_t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(tape.value(x2).max_abs() < 1e-12);

        let wrong = tape.input(Tensor::full([3, 2, 1], 0.5));
        assert!(split(&mut tape, x, wrong).is_err());
    }
}
