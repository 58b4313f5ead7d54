//! Time-enhanced module: scores each node against the node-average
//! descriptor, standardizes the scores, and gates each node's features.
//!
//! Every function treats the second-to-last axis as the node axis and the
//! last as features, so leading `(B, T)` axes pass through unchanged.

use rand_chacha::ChaCha8Rng;
use teddn_autograd::{Float, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

use crate::error::{Result, StageExt};

const STAGE: &str = "te module";

#[derive(Clone, Debug)]
pub struct TeParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub epsilon: Float,
}

impl TeParams {
    /// γ starts at 1 and β at 0.
    pub fn new(store: &mut ParamStore, _rng: &mut ChaCha8Rng, prefix: &str, epsilon: Float) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(crate::Error::Config(format!("te epsilon must be > 0, got {epsilon}")));
        }
        let gamma = store.register(format!("{prefix}.gamma"), Tensor::ones([1]))?;
        let beta = store.register(format!("{prefix}.beta"), Tensor::zeros([1]))?;
        Ok(TeParams { gamma, beta, epsilon })
    }
}

fn node_axis(tape: &Tape, x: Var) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() < 2 || shape[shape.len() - 2] == 0 {
        return Err(TensorError::Contract(format!(
            "te module needs at least one node, got shape {shape:?}"
        )))
        .stage(STAGE);
    }
    Ok(shape.len() - 2)
}

/// `g = mean_i x_i`. `(.., N, d) -> (.., d)`.
pub fn global_descriptor(tape: &mut Tape, x: Var) -> Result<Var> {
    let axis = node_axis(tape, x)?;
    tape.mean(x, &[axis]).stage(STAGE)
}

/// `c_i = g · x_i`. `g: (.., d)`, `x: (.., N, d) -> (.., N)`.
pub fn importance(tape: &mut Tape, g: Var, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let gs = tape.shape(g).to_vec();
    let rank = xs.len();
    if rank < 2 || gs.len() != rank - 1 || gs[..rank - 2] != xs[..rank - 2] || gs[rank - 2] != xs[rank - 1] {
        return Err(TensorError::Dimension {
            op: "te importance",
            lhs: gs,
            rhs: xs,
        })
        .stage(STAGE);
    }
    let mut gshape = gs.clone();
    gshape.insert(rank - 2, 1);
    let g = tape.reshape(g, &gshape).stage(STAGE)?;
    let prod = tape.mul(x, g).stage(STAGE)?;
    tape.sum(prod, &[rank - 1]).stage(STAGE)
}

/// `ĉ = (c - μ) / (σ + ε)` over the last axis, population variance.
pub fn normalize_coeffs(tape: &mut Tape, c: Var, epsilon: Float) -> Result<Var> {
    let shape = tape.shape(c).to_vec();
    let Some(&m) = shape.last() else {
        return Err(TensorError::Contract("coefficients must have rank >= 1".into())).stage(STAGE);
    };
    if m == 0 {
        return Err(TensorError::Contract("no coefficients to normalize".into())).stage(STAGE);
    }
    let last = shape.len() - 1;
    let mut keep = shape.clone();
    keep[last] = 1;
    let mu = tape.mean(c, &[last]).stage(STAGE)?;
    let mu = tape.reshape(mu, &keep).stage(STAGE)?;
    let centered = tape.sub(c, mu).stage(STAGE)?;
    let sq = tape.mul(centered, centered).stage(STAGE)?;
    let var = tape.mean(sq, &[last]).stage(STAGE)?;
    let var = tape.reshape(var, &keep).stage(STAGE)?;
    let sigma = tape.sqrt(var);
    let denom = tape.shift(sigma, epsilon);
    tape.div(centered, denom).stage(STAGE)
}

/// `x̂_i = x_i · sigmoid(γ ĉ_i + β)`.
pub fn enhance(tape: &mut Tape, store: &ParamStore, x: Var, c_hat: Var, p: &TeParams) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let cs = tape.shape(c_hat).to_vec();
    if xs.len() < 2 || cs[..] != xs[..xs.len() - 1] {
        return Err(TensorError::Dimension {
            op: "te enhance",
            lhs: xs,
            rhs: cs,
        })
        .stage(STAGE);
    }
    let gamma = tape.param(store, p.gamma);
    let beta = tape.param(store, p.beta);
    let a = tape.mul(c_hat, gamma).stage(STAGE)?;
    let a = tape.add(a, beta).stage(STAGE)?;
    let w = tape.sigmoid(a);
    let mut wshape = cs;
    wshape.push(1);
    let w = tape.reshape(w, &wshape).stage(STAGE)?;
    tape.mul(x, w).stage(STAGE)
}

/// The whole chain: descriptor, importance, normalization, gating.
pub fn forward(tape: &mut Tape, store: &ParamStore, x: Var, p: &TeParams) -> Result<Var> {
    let g = global_descriptor(tape, x)?;
    let c = importance(tape, g, x)?;
    let c_hat = normalize_coeffs(tape, c, p.epsilon)?;
    enhance(tape, store, x, c_hat, p)
}
