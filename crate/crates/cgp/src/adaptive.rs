//! Online Lipschitz-constant learning by violation-triggered doubling.
//!
//! A pair of sampled locations witnesses a violation when
//! `|mu_i - mu_j| - 2(r_i + r_j) > L_hat * d(x_i, x_j)`: the observed slope
//! exceeds what the current constant plus confidence slack can explain, so
//! `L_hat` underestimates the truth with high probability and doubles.
//!
//! With noise, only pairs whose counts reach `ceil(ln(T/delta))` are scanned
//! (below that the radii drown the signal). In the noiseless case radii are
//! exactly zero and every distinct pair carries exact evidence, so all pairs
//! are scanned; without this the doubling path would be unreachable at
//! sigma = 0. An empty active set is also treated as violation evidence and
//! triggers one doubling.
//!
//! Certificates are only guaranteed valid after the final doubling; the trace
//! marks the valid suffix.

use serde::{Deserialize, Serialize};

use crate::certificate::CertificateSnapshot;
use crate::cgp::{CgpState, RunResult, StopReason};
use crate::error::{CgpError, Result};
use crate::model::{distance, Mode, NoisyObjective, Point, RunConfig, SampleStore};
use crate::sobol::sobol_init;

/// One doubling event. `pair` is absent when the trigger was an empty active
/// set rather than a violating pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DoublingEvent {
    pub t: u64,
    pub pair: Option<(usize, usize)>,
    pub before: f64,
    pub after: f64,
}

/// Time-ordered doubling history of one adaptive run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DoublingLog {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_estimate: f64,
    pub events: Vec<DoublingEvent>,
}

/// Hard cap on doublings before the run aborts as pathological.
const MAX_DOUBLINGS: usize = 64;

/// Count threshold for pair eligibility: `ceil(ln(T/delta))`.
pub fn pair_count_threshold(budget: u64, delta: f64) -> u64 {
    (budget as f64 / delta).ln().ceil() as u64
}

/// Unordered distinct-location pairs whose counts both reach the threshold.
pub fn eligible_pairs(store: &SampleStore, budget: u64, delta: f64) -> Vec<(usize, usize)> {
    let threshold = pair_count_threshold(budget, delta);
    let records = store.records();
    let mut pairs = Vec::new();
    for i in 0..records.len() {
        if records[i].count < threshold {
            continue;
        }
        for j in (i + 1)..records.len() {
            if records[j].count >= threshold {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Checks the violation condition for one record pair of the snapshot.
/// Panics on a zero-distance pair; the store forbids duplicate locations.
pub fn detect_violation(snapshot: &CertificateSnapshot, i: usize, j: usize) -> bool {
    let a = &snapshot.records()[i];
    let b = &snapshot.records()[j];
    let dist = distance(&a.location, &b.location);
    assert!(dist > 0.0, "detect_violation: coincident pair ({i},{j})");
    (a.mean - b.mean).abs() - 2.0 * (a.radius + b.radius) > snapshot.lipschitz * dist
}

/// Initial Lipschitz estimate from finite differences over `k` warm Sobol
/// samples, which are ingested into the store (they count against T).
/// Returns the floor 1e-3 with a warning flag when every value coincides.
pub fn init_lipschitz(
    objective: &NoisyObjective,
    k: usize,
    sobol_seed: u64,
    state: &mut CgpState,
) -> Result<(f64, bool)> {
    if k < 2 {
        return Err(CgpError::Config("warm-start needs k >= 2 samples".into()));
    }
    let points = sobol_init(state.config.dimension, k, sobol_seed)?;
    let mut values = Vec::with_capacity(k);
    for p in points {
        let y = state.ingest_warm(objective, p.clone())?;
        values.push((p, y));
    }
    let mut best = 0.0f64;
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            let dist = distance(&values[i].0, &values[j].0);
            if dist > 0.0 {
                best = best.max((values[i].1 - values[j].1).abs() / dist);
            }
        }
    }
    if best > 0.0 {
        Ok((best, false))
    } else {
        Ok((1e-3, true))
    }
}

/// Runs the CGP loop while learning the Lipschitz constant online.
///
/// After each iteration the pairs involving records updated in that iteration
/// are scanned (a violation must involve fresh evidence); every violation
/// doubles the estimate and the snapshot is rebuilt before the next
/// selection. Empty-active-set anomalies double once and retry.
pub fn adaptive_run(
    objective: &NoisyObjective,
    config: &RunConfig,
) -> Result<(RunResult, DoublingLog)> {
    if config.mode != Mode::Adaptive {
        return Err(CgpError::Config(format!(
            "adaptive_run requires adaptive mode, got {:?}",
            config.mode
        )));
    }
    let mut state = CgpState::new(config.clone())?;
    let initial = match config.lipschitz {
        Some(l) => {
            state.initialize(objective)?;
            l
        }
        None => {
            if config.budget < 2 {
                return Err(CgpError::Config(
                    "adaptive mode without a Lipschitz input needs budget >= 2 \
                     for warm-start estimation"
                        .into(),
                ));
            }
            // Warm-start estimation replaces the single uniform initial draw.
            let warm = (config.budget.min(10) as usize).max(2);
            let (l0, _floor_warning) =
                init_lipschitz(objective, warm, config.seed, &mut state)?;
            state.set_lipschitz(l0);
            l0
        }
    };
    let mut log = DoublingLog {
        initial,
        final_estimate: initial,
        events: Vec::new(),
    };

    while !state.finished() {
        match state.step(objective) {
            Ok(()) => {}
            Err(CgpError::Anomaly(_)) => {
                // Empty active set under the current estimate: one doubling,
                // then retry the iteration.
                if double(&mut state, &mut log, None)? {
                    continue;
                } else {
                    state.stop = Some(StopReason::Anomaly);
                    break;
                }
            }
            Err(e) => return Err(e),
        }
        scan_and_double(&mut state, &mut log)?;
    }

    log.final_estimate = state.lipschitz();
    let mut result = state.result()?;
    let valid_from = log.events.last().map(|e| e.t).unwrap_or(0);
    for row in &mut result.trace {
        row.cert_valid = Some(row.t > valid_from);
    }
    Ok((result, log))
}

/// Scans fresh pairs for violations, doubling until the scan comes back
/// clean. Returns an error once the doubling cap is exhausted.
fn scan_and_double(state: &mut CgpState, log: &mut DoublingLog) -> Result<()> {
    loop {
        let snapshot = state.snapshot()?;
        let violation = find_violation(state, &snapshot);
        match violation {
            None => return Ok(()),
            Some(pair) => {
                if !double(state, log, Some(pair))? {
                    return Err(CgpError::Anomaly(format!(
                        "more than {MAX_DOUBLINGS} doublings; data is pathological"
                    )));
                }
            }
        }
    }
}

/// First violating pair involving a record touched this iteration, if any.
/// With sigma = 0 every distinct pair is eligible (radii are exactly zero).
fn find_violation(state: &CgpState, snapshot: &CertificateSnapshot) -> Option<(usize, usize)> {
    let n = snapshot.records().len();
    let threshold = if state.config.sigma == 0.0 {
        1
    } else {
        pair_count_threshold(state.config.budget, state.config.delta)
    };
    for &i in &state.touched {
        if snapshot.records()[i].count < threshold {
            continue;
        }
        for j in 0..n {
            if j == i || snapshot.records()[j].count < threshold {
                continue;
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if detect_violation(snapshot, a, b) {
                return Some((a, b));
            }
        }
    }
    None
}

/// Applies one doubling; returns false when the cap is exhausted.
fn double(
    state: &mut CgpState,
    log: &mut DoublingLog,
    pair: Option<(usize, usize)>,
) -> Result<bool> {
    if log.events.len() >= MAX_DOUBLINGS {
        return Ok(false);
    }
    let before = state.lipschitz();
    let after = before * 2.0;
    state.set_lipschitz(after);
    log.events.push(DoublingEvent {
        t: state.observations(),
        pair,
        before,
        after,
    });
    Ok(true)
}

/// Points sampled by warm starts are ordinary store entries; this helper
/// exposes them for audits.
pub fn warm_points(store: &SampleStore, k: usize) -> Vec<Point> {
    store
        .records()
        .iter()
        .take(k)
        .map(|r| r.location.clone())
        .collect()
}
