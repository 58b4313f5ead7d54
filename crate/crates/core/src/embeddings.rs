//! Learnable time-slot and node embeddings, and the calendar arithmetic that
//! maps row indices to slots.

use rand_chacha::ChaCha8Rng;
use teddn_autograd::{Float, ParamId, ParamStore, Tape, Var};

use crate::error::{Result, StageExt};
use crate::init;

pub const DAYS_PER_WEEK: usize = 7;

/// `(time-of-day slot, day-of-week slot)` of global row `step`.
pub fn time_index(step: usize, steps_per_day: usize, start_weekday: usize) -> (usize, usize) {
    let tod = step % steps_per_day;
    let dow = (start_weekday + step / steps_per_day) % DAYS_PER_WEEK;
    (tod, dow)
}

/// Time-of-day (`steps_per_day × dim`) and day-of-week (`7 × dim`) tables.
#[derive(Clone, Debug)]
pub struct TimeTables {
    pub day_table: ParamId,
    pub week_table: ParamId,
    pub steps_per_day: usize,
    pub dim: usize,
}

impl TimeTables {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        steps_per_day: usize,
        dim: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as Float).sqrt();
        let day_table = store.register("time.day", init::uniform(rng, &[steps_per_day, dim], bound))?;
        let week_table =
            store.register("time.week", init::uniform(rng, &[DAYS_PER_WEEK, dim], bound))?;
        Ok(TimeTables {
            day_table,
            week_table,
            steps_per_day,
            dim,
        })
    }
}

/// Per-node embedding table (`N × dim`).
#[derive(Clone, Debug)]
pub struct NodeTable {
    pub table: ParamId,
    pub num_nodes: usize,
    pub dim: usize,
}

impl NodeTable {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        num_nodes: usize,
        dim: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as Float).sqrt();
        let table = store.register("node.embedding", init::uniform(rng, &[num_nodes, dim], bound))?;
        Ok(NodeTable {
            table,
            num_nodes,
            dim,
        })
    }
}

/// Gathered embedding rows for one batch.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingRows {
    /// `(len, dim)` time-of-day rows
    pub day: Var,
    /// `(len, dim)` day-of-week rows
    pub week: Var,
    /// `(N, dim)` node table
    pub nodes: Var,
}

/// Looks up the time-of-day and day-of-week rows for each slot pair and
/// binds the full node table.
pub fn lookup(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &TimeTables,
    node_table: &NodeTable,
    tod: &[usize],
    dow: &[usize],
) -> Result<EmbeddingRows> {
    let day_table = tape.param(store, tables.day_table);
    let week_table = tape.param(store, tables.week_table);
    let day = tape.gather(day_table, tod).stage("embedding lookup")?;
    let week = tape.gather(week_table, dow).stage("embedding lookup")?;
    let nodes = tape.param(store, node_table.table);
    Ok(EmbeddingRows { day, week, nodes })
}
