//! Learned directed adjacency and residual multi-hop graph convolution.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use teddn_autograd::{Float, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result, StageExt};
use crate::init;

const STAGE: &str = "gc module";

#[derive(Clone, Debug)]
pub struct GraphLearnParams {
    /// `N × d_g`
    pub e1: ParamId,
    /// `N × d_g`
    pub e2: ParamId,
    /// `d_g × d_g`
    pub w1: ParamId,
    /// `d_g × d_g`
    pub w2: ParamId,
    pub alpha: Float,
}

impl GraphLearnParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        num_nodes: usize,
        dim: usize,
        alpha: Float,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
        }
        let bound = 1.0 / (dim as Float).sqrt();
        let e1 = store.register(format!("{prefix}.e1"), init::uniform(rng, &[num_nodes, dim], bound))?;
        let e2 = store.register(format!("{prefix}.e2"), init::uniform(rng, &[num_nodes, dim], bound))?;
        let w1 = store.register(format!("{prefix}.w1"), init::fan_in(rng, &[dim, dim]))?;
        let w2 = store.register(format!("{prefix}.w2"), init::fan_in(rng, &[dim, dim]))?;
        Ok(GraphLearnParams { e1, e2, w1, w2, alpha })
    }

    /// Reuses the node embeddings of `other` with fresh projections.
    pub fn sharing_nodes(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        other: &GraphLearnParams,
    ) -> Result<Self> {
        let dim = store.value(other.w1).shape()[0];
        let w1 = store.register(format!("{prefix}.w1"), init::fan_in(rng, &[dim, dim]))?;
        let w2 = store.register(format!("{prefix}.w2"), init::fan_in(rng, &[dim, dim]))?;
        Ok(GraphLearnParams {
            e1: other.e1,
            e2: other.e2,
            w1,
            w2,
            alpha: other.alpha,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PropagationParams {
    pub beta_res: Float,
    pub hops: usize,
    /// `(k·D) × D`
    pub fuse: ParamId,
}

impl PropagationParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        hidden: usize,
        hops: usize,
        beta_res: Float,
    ) -> Result<Self> {
        if hops == 0 {
            return Err(Error::Config("hops must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&beta_res) {
            return Err(Error::Config(format!("beta_res must be in [0, 1], got {beta_res}")));
        }
        let fuse = store.register(format!("{prefix}.fuse"), init::fan_in(rng, &[hops * hidden, hidden]))?;
        Ok(PropagationParams { beta_res, hops, fuse })
    }
}

/// `A = relu(tanh(α(DE1·DE2ᵀ - DE2·DE1ᵀ)))` with `DEi = tanh(α·Ei·Wi)`.
pub fn learn_adjacency(tape: &mut Tape, store: &ParamStore, p: &GraphLearnParams) -> Result<Var> {
    let e1 = tape.param(store, p.e1);
    let e2 = tape.param(store, p.e2);
    let w1 = tape.param(store, p.w1);
    let w2 = tape.param(store, p.w2);
    let de1 = tape.matmul(e1, w1).stage(STAGE)?;
    let de1 = tape.scale(de1, p.alpha);
    let de1 = tape.tanh(de1);
    let de2 = tape.matmul(e2, w2).stage(STAGE)?;
    let de2 = tape.scale(de2, p.alpha);
    let de2 = tape.tanh(de2);
    let de2t = tape.transpose(de2).stage(STAGE)?;
    let m = tape.matmul(de1, de2t).stage(STAGE)?;
    let mt = tape.transpose(m).stage(STAGE)?;
    let diff = tape.sub(m, mt).stage(STAGE)?;
    let diff = tape.scale(diff, p.alpha);
    let a = tape.tanh(diff);
    Ok(tape.relu(a))
}

/// `P = D̃⁻¹(A + I)`, row-stochastic.
pub fn normalize_adjacency(tape: &mut Tape, a: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(TensorError::Dimension {
            op: "normalize adjacency",
            lhs: shape.clone(),
            rhs: shape,
        })
        .stage(STAGE);
    }
    let n = shape[0];
    let eye = tape.input(Tensor::eye(n));
    let hat = tape.add(a, eye).stage(STAGE)?;
    let deg = tape.sum(hat, &[1]).stage(STAGE)?;
    let deg = tape.reshape(deg, &[n, 1]).stage(STAGE)?;
    tape.div(hat, deg).stage(STAGE)
}

/// `H⁽ʲ⁾ = β·H_in + (1-β)·P·H⁽ʲ⁻¹⁾` for `j = 1..=k`; returns `H⁽⁰⁾..H⁽ᵏ⁾`.
///
/// `h_in` is `(.., N, D)`; `p` is `(N, N)` and broadcasts over leading axes.
pub fn propagate(tape: &mut Tape, h_in: Var, p: Var, beta_res: Float, hops: usize) -> Result<Vec<Var>> {
    let hs = tape.shape(h_in).to_vec();
    let ps = tape.shape(p).to_vec();
    if hs.len() < 2 || ps.len() != 2 || ps[1] != hs[hs.len() - 2] {
        return Err(TensorError::Dimension {
            op: "propagate",
            lhs: ps,
            rhs: hs,
        })
        .stage(STAGE);
    }
    let retained = tape.scale(h_in, beta_res);
    let mut out = vec![h_in];
    for _ in 0..hops {
        let prev = *out.last().expect("non-empty");
        let mixed = tape.matmul(p, prev).stage(STAGE)?;
        let mixed = tape.scale(mixed, 1.0 - beta_res);
        out.push(tape.add(retained, mixed).stage(STAGE)?);
    }
    Ok(out)
}

/// `H_out = (H⁽⁰⁾ ‖ … ‖ H⁽ᵏ⁻¹⁾)·W`.
pub fn hop_fusion(tape: &mut Tape, store: &ParamStore, hops: &[Var], fuse: ParamId) -> Result<Var> {
    let Some(&first) = hops.first() else {
        return Err(TensorError::Contract("hop fusion needs at least one hop".into())).stage(STAGE);
    };
    let shape = tape.shape(first).to_vec();
    for &h in hops {
        if tape.shape(h) != shape.as_slice() {
            return Err(TensorError::Dimension {
                op: "hop fusion",
                lhs: shape,
                rhs: tape.shape(h).to_vec(),
            })
            .stage(STAGE);
        }
    }
    let cat = tape.concat(hops, shape.len() - 1).stage(STAGE)?;
    let w = tape.param(store, fuse);
    tape.matmul(cat, w).stage(STAGE)
}

/// Adjacency, normalization, propagation and fusion in one call.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    h_in: Var,
    graph: &GraphLearnParams,
    prop: &PropagationParams,
) -> Result<Var> {
    let a = learn_adjacency(tape, store, graph)?;
    let p = normalize_adjacency(tape, a)?;
    let hops = propagate(tape, h_in, p, prop.beta_res, prop.hops)?;
    hop_fusion(tape, store, &hops[..prop.hops], prop.fuse)
}

/// Current learned adjacency, without recording gradients.
pub fn adjacency_matrix(store: &ParamStore, p: &GraphLearnParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = learn_adjacency(&mut tape, store, p)?;
    Ok(tape.value(a).clone())
}

/// Dense CSV: a header row `0..N-1`, then N rows of N values.
pub fn write_adjacency_csv(path: &Path, a: &Tensor) -> Result<()> {
    let n = a.shape().first().copied().unwrap_or(0);
    let mut out = String::new();
    let header: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in a.data().chunks(n.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
