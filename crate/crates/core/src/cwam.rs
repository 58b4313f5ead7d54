//! Channel-wise attention: squeeze each channel to its global average,
//! excite through a bias-free bottleneck, and rescale the channels.

use rand_chacha::ChaCha8Rng;
use teddn_autograd::{ParamId, ParamStore, Tape, TensorError, Var};

use crate::error::{Error, Result, StageExt};
use crate::init;

#[derive(Clone, Debug)]
pub struct CwamParams {
    /// `C × C/r`
    pub reduce: ParamId,
    /// `C/r × C`
    pub expand: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl CwamParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        reduction_ratio: usize,
    ) -> Result<Self> {
        let hidden = bottleneck_width(channels, reduction_ratio);
        let reduce = store.register(
            format!("{prefix}.reduce"),
            init::fan_in(rng, &[channels, hidden]),
        )?;
        let expand = store.register(
            format!("{prefix}.expand"),
            init::fan_in(rng, &[hidden, channels]),
        )?;
        Ok(CwamParams {
            reduce,
            expand,
            channels,
            hidden,
        })
    }
}

/// `max(1, floor(C / r))`.
pub fn bottleneck_width(channels: usize, reduction_ratio: usize) -> usize {
    (channels / reduction_ratio.max(1)).max(1)
}

/// Channel descriptor: the mean of each channel (last axis) over every axis
/// after the first `batch_dims`. `(b.., x.., C) -> (b.., C)`.
pub fn squeeze(tape: &mut Tape, u: Var, batch_dims: usize) -> Result<Var> {
    let shape = tape.shape(u).to_vec();
    let rank = shape.len();
    if rank < batch_dims + 2 || shape.contains(&0) {
        return Err(TensorError::Contract(format!(
            "squeeze needs at least one non-channel element, got shape {shape:?}"
        ))
        .into());
    }
    let axes: Vec<usize> = (batch_dims..rank - 1).collect();
    tape.mean(u, &axes).stage("cwam squeeze")
}

/// `s = sigmoid(relu(z · reduce) · expand)` for `z` of shape `(.., C)`.
pub fn excite(tape: &mut Tape, store: &ParamStore, z: Var, p: &CwamParams) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let as_matrix = if shape.len() == 1 {
        tape.reshape(z, &[1, shape[0]]).stage("cwam excite")?
    } else {
        z
    };
    let reduce = tape.param(store, p.reduce);
    let expand = tape.param(store, p.expand);
    let hidden = tape.matmul(as_matrix, reduce).stage("cwam excite")?;
    let hidden = tape.relu(hidden);
    let logits = tape.matmul(hidden, expand).stage("cwam excite")?;
    let s = tape.sigmoid(logits);
    if shape.len() == 1 {
        tape.reshape(s, &shape).stage("cwam excite")
    } else {
        Ok(s)
    }
}

/// Multiplies channel `c` of `u` by `s_c`. `s` has shape `(b.., C)` where
/// `b..` are the first `batch_dims` axes of `u`.
pub fn scale(tape: &mut Tape, u: Var, s: Var, batch_dims: usize) -> Result<Var> {
    let ushape = tape.shape(u).to_vec();
    let sshape = tape.shape(s).to_vec();
    let channels = *ushape.last().unwrap_or(&0);
    let expected: Vec<usize> = ushape[..batch_dims.min(ushape.len())]
        .iter()
        .copied()
        .chain(std::iter::once(channels))
        .collect();
    if sshape != expected {
        return Err(Error::from(TensorError::Dimension {
            op: "cwam scale",
            lhs: ushape,
            rhs: sshape,
        }));
    }
    let mut bshape = vec![1; ushape.len()];
    bshape[..batch_dims].copy_from_slice(&ushape[..batch_dims]);
    bshape[ushape.len() - 1] = channels;
    let s = tape.reshape(s, &bshape).stage("cwam scale")?;
    tape.mul(u, s).stage("cwam scale")
}

/// `scale(u, excite(squeeze(u)))`.
pub fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    u: Var,
    p: &CwamParams,
    batch_dims: usize,
) -> Result<Var> {
    let z = squeeze(tape, u, batch_dims)?;
    let s = excite(tape, store, z, p)?;
    scale(tape, u, s, batch_dims)
}
