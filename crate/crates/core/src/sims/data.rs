//! Bundled benchmark data.

use std::path::Path;

use crate::design::{find_reps, read_xy, read_xy_csv, ReplicatedDesign};
use crate::error::Result;

/// Motorcycle crash-test accelerations (`times`, `accel`), 133 observations.
pub const MOTORCYCLE_CSV: &str = include_str!("../../data/mcycle.csv");

pub const MOTORCYCLE_ROWS: usize = 133;

fn collapse(x: nalgebra::DMatrix<f64>, y: nalgebra::DVector<f64>) -> Result<ReplicatedDesign> {
    if y.len() != MOTORCYCLE_ROWS {
        log::warn!(
            "motorcycle data has {} rows, expected {MOTORCYCLE_ROWS}",
            y.len()
        );
    }
    find_reps(&x, &y, 0.0)
}

/// Reads a motorcycle-format CSV (time then acceleration) and collapses replicates.
pub fn load_motorcycle(path: impl AsRef<Path>) -> Result<ReplicatedDesign> {
    let (x, y) = read_xy_csv(path)?;
    collapse(x, y)
}

/// The bundled copy of the motorcycle data.
pub fn motorcycle() -> Result<ReplicatedDesign> {
    let (x, y) = read_xy(MOTORCYCLE_CSV.as_bytes())?;
    collapse(x, y)
}

/// Raw motorcycle observations, one row each.
pub fn motorcycle_raw() -> Result<(nalgebra::DMatrix<f64>, nalgebra::DVector<f64>)> {
    read_xy(MOTORCYCLE_CSV.as_bytes())
}
