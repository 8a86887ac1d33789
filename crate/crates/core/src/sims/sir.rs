//! Stochastic SIR epidemic simulated event by event (Gillespie).
//!
//! Infection `S + I -> 2I` fires at rate `beta S I / M` and recovery
//! `I -> R` at rate `gamma I`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stream_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirParams {
    pub beta: f64,
    pub gamma: f64,
    /// Total population.
    pub m: u64,
}

impl SirParams {
    pub fn new(beta: f64, gamma: f64, m: u64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite() && gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(
                "rates must be nonnegative and finite".into(),
            ));
        }
        if m == 0 {
            return Err(Error::InvalidParameter(
                "population must be positive".into(),
            ));
        }
        Ok(Self { beta, gamma, m })
    }
}

impl Default for SirParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            gamma: 0.5,
            m: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SirState {
    pub s: u64,
    pub i: u64,
    pub r: u64,
}

impl SirState {
    pub fn new(s: u64, i: u64, r: u64) -> Self {
        Self { s, i, r }
    }

    pub fn total(&self) -> u64 {
        self.s + self.i + self.r
    }
}

/// Final state and bookkeeping of one simulated outbreak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SirOutcome {
    pub end: SirState,
    pub time: f64,
    pub events: u64,
}

impl SirOutcome {
    pub fn infected(&self, start: &SirState) -> u64 {
        start.s - self.end.s
    }
}

fn check_state(params: &SirParams, init: &SirState) -> Result<()> {
    if init.total() > params.m {
        return Err(Error::InvalidParameter(format!(
            "state total {} exceeds population {}",
            init.total(),
            params.m
        )));
    }
    Ok(())
}

/// Runs one outbreak until no infected remain (or no event can fire).
pub fn sir_simulate(params: &SirParams, init: SirState, rng: &mut impl Rng) -> Result<SirOutcome> {
    check_state(params, &init)?;
    let mut st = init;
    let mut time = 0.0;
    let mut events = 0;
    let m = params.m as f64;
    while st.i > 0 {
        let inf = params.beta * st.s as f64 * st.i as f64 / m;
        let rec = params.gamma * st.i as f64;
        let total = inf + rec;
        if total <= 0.0 {
            break;
        }
        time += Exp::new(total).expect("positive rate").sample(rng);
        if rng.random::<f64>() * total < inf {
            st.s -= 1;
            st.i += 1;
        } else {
            st.i -= 1;
            st.r += 1;
        }
        events += 1;
    }
    Ok(SirOutcome {
        end: st,
        time,
        events,
    })
}

/// Number of susceptibles infected over one outbreak, reproducible per seed.
pub fn sir_run(params: &SirParams, init: SirState, seed: u64) -> Result<u64> {
    let mut rng = stream_rng(seed, 0);
    Ok(sir_simulate(params, init, &mut rng)?.infected(&init))
}

/// Infection counts of `replicates` independent outbreaks.
///
/// Replicate `j` draws from stream `j` under `seed`, so the output does not
/// depend on the thread count.
pub fn sir_replicates(
    params: &SirParams,
    init: SirState,
    replicates: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    check_state(params, &init)?;
    (0..replicates as u64)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, j);
            sir_simulate(params, init, &mut rng).map(|o| o.infected(&init))
        })
        .collect()
}

/// Sample mean and bias-unadjusted variance of the infection count.
pub fn sir_mc(
    params: &SirParams,
    init: SirState,
    replicates: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if replicates == 0 {
        return Err(Error::InvalidParameter(
            "at least one replicate is required".into(),
        ));
    }
    let draws = sir_replicates(params, init, replicates, seed)?;
    Ok(mean_var(&draws))
}

pub(crate) fn mean_var(draws: &[u64]) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = draws
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var)
}

/// One simulated outcome, as written by [`write_sir_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SirRecord {
    pub s0: u64,
    pub i0: u64,
    pub replicate: usize,
    pub infected: u64,
}

pub fn write_sir_csv<W: Write>(out: W, records: &[SirRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
