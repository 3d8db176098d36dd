//! Training runs, random search, evaluation and CSV exports.

pub mod checkpoint;
pub mod config;
pub mod search;
pub mod trainer;

use std::path::Path;

use crate::error::Result;
use crate::losses::{loss_field, Grid, LossKind};

pub use checkpoint::{Checkpoint, MAGIC};
pub use config::{Objective, Precision, RunConfig, SearchSpace};
pub use search::{random_search, sample_configs, select_best, SearchOutcome, DEFAULT_RUNS};
pub use trainer::{
    evaluate, init_params, run_rng, train, train_with_checkpoint, MetricsRow, RunRecord, RunStatus,
    Trainer, CHECKPOINT_FILE, METRICS_FILE, RECORD_FILE,
};

pub const DEFAULT_FIELD_TARGET: f64 = 0.2;

/// Default field grids: means in `[-2, 2]` and variances in `[0.01, 4.01]`,
/// both with spacing 0.05.
pub fn default_field_grids() -> (Grid, Grid) {
    (
        Grid {
            min: -2.0,
            max: 2.0,
            steps: 81,
        },
        Grid {
            min: 0.01,
            max: 4.01,
            steps: 81,
        },
    )
}

/// Write the loss field of one unit as CSV `mean,var,loss,dloss_dmean,dloss_dvar`.
pub fn export_field(
    kind: LossKind,
    target: f64,
    mean_grid: &Grid,
    var_grid: &Grid,
    out: &Path,
) -> Result<usize> {
    let rows = loss_field(kind, target, mean_grid, var_grid)?;
    let mut w = csv::Writer::from_path(out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows.len())
}
