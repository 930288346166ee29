//! CGP-Hybrid: certificate-guided phase 1, then optional Gaussian-process
//! refinement confined to the frozen active set.
//!
//! Phase 1 runs the ordinary CGP loop until the active-set volume estimate
//! drops below `vol_threshold` or a third of the budget is spent. The
//! certificate is exported and frozen at that moment; nothing phase 2 does
//! can change it. The effective smoothness ratio
//! `rho = L_local / L_global` decides phase 2: below the threshold the
//! function is markedly smoother inside the active set than globally and
//! GP-UCB refinement takes over (queries drawn from pools of the *frozen*
//! active set); otherwise CGP simply continues, bit-for-bit identical to a
//! plain run under the same seed.
//!
//! `L_local` uses noise-deflated difference quotients over active records:
//! `(|mu_i - mu_j| - (r_i + r_j))_+ / d(x_i, x_j)`, so noise cannot inflate
//! the ratio past the switch threshold.

use serde::{Deserialize, Serialize};

use crate::certificate::{export_certificate, CertificateSnapshot};
use crate::cgp::{CgpState, RunResult, TraceRow};
use crate::error::{CgpError, Result};
use crate::gp::{gp_fit, gp_ucb_select, GpParamsFixed, HyperMode, MAX_TRAINING};
use crate::model::{distance, Mode, NoisyObjective, Point, RunConfig};
use crate::rng;
use crate::volume::sample_active_pool;

/// Which optimizer ran after the switch point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase2 {
    Gp,
    Cgp,
}

/// The switch decision plus the frozen phase-1 certificate document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HybridDecision {
    /// Observation count at the switch.
    pub t_switch: u64,
    /// Smoothness ratio at the switch; absent when estimation stayed
    /// unavailable and the run defaulted to CGP.
    pub rho_hat: Option<f64>,
    pub phase2: Phase2,
    /// Set when the ratio could not be estimated after the retry.
    pub rho_unavailable: bool,
    /// Exported phase-1 certificate, byte-frozen at the switch.
    pub frozen_certificate: String,
}

/// Local Lipschitz estimate over pairs of active records: the largest
/// noise-deflated difference quotient, zero when no pair has a positive
/// deflated numerator. Needs at least two active records.
pub fn local_lipschitz(snapshot: &CertificateSnapshot) -> Result<f64> {
    let active: Vec<_> = snapshot
        .records()
        .iter()
        .filter(|r| snapshot.is_active(&r.location))
        .collect();
    if active.len() < 2 {
        return Err(CgpError::Anomaly(format!(
            "local Lipschitz estimation needs >= 2 active records, found {}",
            active.len()
        )));
    }
    let mut best = 0.0f64;
    for i in 0..active.len() {
        for j in (i + 1)..active.len() {
            let dist = distance(&active[i].location, &active[j].location);
            if dist <= 0.0 {
                continue;
            }
            let deflated = (active[i].mean - active[j].mean).abs()
                - (active[i].radius + active[j].radius);
            if deflated > 0.0 {
                best = best.max(deflated / dist);
            }
        }
    }
    Ok(best)
}

/// `rho = L_local / L_global`, clamped to be nonnegative.
pub fn smoothness_ratio(local: f64, global: f64) -> f64 {
    assert!(global > 0.0, "smoothness_ratio: global estimate must be > 0");
    (local / global).max(0.0)
}

/// Runs CGP-Hybrid. The returned result's certificate is the final full
/// snapshot; the frozen phase-1 certificate travels in the decision.
pub fn hybrid_run(
    objective: &NoisyObjective,
    config: &RunConfig,
) -> Result<(RunResult, HybridDecision)> {
    if config.mode != Mode::Hybrid {
        return Err(CgpError::Config(format!(
            "hybrid_run requires hybrid mode, got {:?}",
            config.mode
        )));
    }
    let global_l = config
        .lipschitz
        .ok_or_else(|| CgpError::Config("hybrid mode requires a Lipschitz input".into()))?;
    let mut state = CgpState::new(config.clone())?;
    state.initialize(objective)?;

    let switch_budget = (config.budget as f64 * config.hybrid.budget_fraction).floor() as u64;
    let mut retry_at: Option<u64> = None;
    let mut attempts = 0u32;
    let mut decision: Option<HybridDecision> = None;

    while !state.finished() {
        if decision.is_none() {
            let vol_trigger = state
                .latest_estimate()
                .map(|e| e.volume_fraction < config.hybrid.vol_threshold)
                .unwrap_or(false);
            let time_trigger = state.observations() > switch_budget;
            let retry_due = retry_at.map(|it| state.iteration >= it).unwrap_or(true);
            if (vol_trigger || time_trigger) && retry_due {
                let snapshot = state.snapshot()?;
                match local_lipschitz(&snapshot) {
                    Ok(local) => {
                        let rho = smoothness_ratio(local, global_l);
                        let phase2 = if rho < config.hybrid.rho_thresh {
                            Phase2::Gp
                        } else {
                            Phase2::Cgp
                        };
                        decision = Some(HybridDecision {
                            t_switch: state.observations(),
                            rho_hat: Some(rho),
                            phase2,
                            rho_unavailable: false,
                            frozen_certificate: export_certificate(&snapshot),
                        });
                    }
                    Err(_) if attempts == 0 => {
                        // Too few active records: give CGP ten more
                        // iterations, then retry once.
                        attempts = 1;
                        retry_at = Some(state.iteration + 10);
                    }
                    Err(_) => {
                        decision = Some(HybridDecision {
                            t_switch: state.observations(),
                            rho_hat: None,
                            phase2: Phase2::Cgp,
                            rho_unavailable: true,
                            frozen_certificate: export_certificate(&snapshot),
                        });
                    }
                }
                if let Some(d) = &decision {
                    if d.phase2 == Phase2::Gp {
                        break;
                    }
                }
            }
        }
        match state.step(objective) {
            Ok(()) => {}
            Err(CgpError::Anomaly(_)) => {
                state.stop = Some(crate::cgp::StopReason::Anomaly);
            }
            Err(e) => return Err(e),
        }
    }

    // A run that never triggered the switch freezes its certificate at the
    // end (degenerate switch: phase 2 had zero budget).
    let decision = match decision {
        Some(d) => d,
        None => {
            let snapshot = state.snapshot()?;
            HybridDecision {
                t_switch: state.observations(),
                rho_hat: local_lipschitz(&snapshot)
                    .ok()
                    .map(|l| smoothness_ratio(l, global_l)),
                phase2: Phase2::Cgp,
                rho_unavailable: false,
                frozen_certificate: export_certificate(&snapshot),
            }
        }
    };

    if decision.phase2 == Phase2::Gp {
        gp_refinement(objective, config, &mut state, &decision)?;
    }

    let result = state.result()?;
    Ok((result, decision))
}

/// Phase 2, GP branch: fit to all observations at frozen-active records and
/// iterate GP-UCB over pools drawn from the frozen active set.
fn gp_refinement(
    objective: &NoisyObjective,
    config: &RunConfig,
    state: &mut CgpState,
    decision: &HybridDecision,
) -> Result<()> {
    let frozen = crate::certificate::import_certificate(&decision.frozen_certificate)?;
    let mut gp_rng = rng::stream(config.seed, rng::GP);

    // Training set: every observation whose location is active under the
    // frozen certificate.
    let mut xs: Vec<Point> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for row in state.trace() {
        if frozen.is_active(&row.query) {
            xs.push(row.query.clone());
            ys.push(row.y);
        }
    }
    if xs.is_empty() {
        // Nothing active to train on; fall back to the best record.
        let (_, best) = state.store.best_mean_record().expect("non-empty store");
        xs.push(best.location.clone());
        ys.push(best.mean());
    }

    let noise_variance = config.sigma * config.sigma;
    let mut model = gp_fit(
        &tail(&xs),
        &tail_vals(&ys),
        noise_variance,
        HyperMode::Mle,
        &mut gp_rng,
    )?;
    let mut since_mle = 0usize;
    let mut since_refit = 0usize;

    let frozen_ell = frozen.ell();
    let frozen_beta = frozen
        .records()
        .iter()
        .filter(|r| frozen.is_active(&r.location))
        .map(|r| r.radius)
        .fold(0.0f64, f64::max);

    while state.observations() < config.budget {
        let pool = sample_active_pool(&frozen, config.pool_size, &mut state.vol_rng)?;
        let t = state.observations() + 1;
        let query = gp_ucb_select(&model, t, config.delta, &pool)?.clone();
        let y = objective.evaluate(&query, &mut state.noise_rng);
        state.store.ingest(query.clone(), y)?;
        state.observations += 1;
        let (_, best) = state.store.best_mean_record().expect("non-empty store");
        let regret = objective
            .metadata
            .f_star
            .map(|fs| fs - objective.true_value(&best.location));
        state.trace.push(TraceRow {
            t: state.observations,
            query: query.clone(),
            y,
            ell: frozen_ell,
            beta: frozen_beta,
            eta_hat: state.latest_gap.map(|g| g.eta_hat),
            gamma_hat: state.latest_gap.map(|g| g.gamma_hat),
            eps: state.latest_gap.map(|g| g.epsilon),
            vol_fraction: None,
            best_mean: best.mean(),
            regret,
            cert_valid: None,
        });

        xs.push(query);
        ys.push(y);
        since_mle += 1;
        since_refit += 1;
        // Refit every iteration up to 200 training points, then every 5;
        // hyperparameters re-optimized every 20 observations.
        let refit_due = xs.len() <= 200 || since_refit >= 5;
        if state.observations() < config.budget && refit_due {
            since_refit = 0;
            let mode = if since_mle >= 20 {
                since_mle = 0;
                HyperMode::Mle
            } else {
                let p = model.params();
                HyperMode::Fixed(GpParamsFixed {
                    lengthscale: p.lengthscale,
                    signal_variance: p.signal_variance,
                })
            };
            model = gp_fit(&tail(&xs), &tail_vals(&ys), noise_variance, mode, &mut gp_rng)?;
        }
    }
    state.stop = Some(crate::cgp::StopReason::Budget);
    Ok(())
}

/// Most recent `MAX_TRAINING` points (the exact-GP cap).
fn tail(xs: &[Point]) -> Vec<Point> {
    xs[xs.len().saturating_sub(MAX_TRAINING)..].to_vec()
}

fn tail_vals(ys: &[f64]) -> Vec<f64> {
    ys[ys.len().saturating_sub(MAX_TRAINING)..].to_vec()
}
