//! CGP-TR: multiple trust regions with local certificates and certified
//! restarts, for dimensions where covering the whole cube is hopeless.
//!
//! Each region is an axis-aligned cube of side `2 r_j` around its center,
//! clipped to the domain. Regions are selected by the highest estimated
//! envelope maximum `u_j = max_{x in T_j} U_t(x)`; one CGP step runs confined
//! to the selected region against its local lower certificate. A region is
//! restarted (fresh Sobol center, radius r0) only when `u_j < l_t`, i.e. when
//! it is certifiably suboptimal against the global lower certificate, so the
//! region holding the optimum is never falsely eliminated. Otherwise radii
//! expand on improvement and contract after `tau_fail` non-improving visits,
//! floored at `r_min`; centers move only through restarts.
//!
//! `u_j` is estimated by the restart maximizer plus a set of exact candidates
//! (center, local records, corners up to d = 10, a coarse lattice up to
//! d = 3); underestimating it is what could cause a false restart, so the
//! exact candidates make the estimate an over-approximation in practice.

use serde::{Deserialize, Serialize};

use crate::certificate::{beta_target, CertificateSnapshot};
use crate::cgp::{RunResult, StopReason, TraceRow};
use crate::error::{CgpError, Result};
use crate::model::{Mode, NoisyObjective, Point, RunConfig, SampleStore, TrustParams};
use crate::optimize::Maximizer;
use crate::rng::{self, Stream};
use crate::sobol::SobolStream;

/// One trust region's mutable state.
#[derive(Clone, Debug)]
pub struct TrustRegion {
    pub id: usize,
    pub center: Point,
    pub radius: f64,
    pub fail_count: u32,
    pub restart_count: u32,
    pub visits: u64,
    /// Best empirical mean among records currently inside the region;
    /// negative infinity when none.
    pub best_local_mean: f64,
    pub radius_history: Vec<f64>,
    pub restart_times: Vec<u64>,
}

/// Radius dynamics event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionEvent {
    Success,
    Failure,
    Restart,
}

impl TrustRegion {
    fn new(id: usize, center: Point, radius: f64) -> Self {
        Self {
            id,
            center,
            radius,
            fail_count: 0,
            restart_count: 0,
            visits: 0,
            best_local_mean: f64::NEG_INFINITY,
            radius_history: vec![radius],
            restart_times: Vec::new(),
        }
    }

    /// The clipped axis-aligned geometry `[center - r, center + r] ∩ [0,1]^d`.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self
            .center
            .coords()
            .iter()
            .map(|c| (c - self.radius).max(0.0))
            .collect();
        let hi = self
            .center
            .coords()
            .iter()
            .map(|c| (c + self.radius).min(1.0))
            .collect();
        (lo, hi)
    }

    pub fn contains(&self, p: &Point) -> bool {
        let (lo, hi) = self.bounds();
        p.coords()
            .iter()
            .zip(lo.iter().zip(&hi))
            .all(|(c, (a, b))| *c >= *a - 1e-12 && *c <= *b + 1e-12)
    }
}

/// Applies one radius-dynamics event. Success doubles the radius (capped at
/// D/2), the `tau_fail`-th failure halves it (floored at `r_min`), restart
/// moves to a fresh Sobol center at radius r0 with counters cleared.
pub fn update_radius(
    region: &mut TrustRegion,
    event: RegionEvent,
    params: &TrustParams,
    dimension: usize,
    sobol: &mut SobolStream,
    t: u64,
) {
    let half_diameter = (dimension as f64).sqrt() / 2.0;
    match event {
        RegionEvent::Success => {
            region.radius = (2.0 * region.radius).min(half_diameter);
            region.fail_count = 0;
        }
        RegionEvent::Failure => {
            region.fail_count += 1;
            if region.fail_count >= params.tau_fail {
                region.radius = (region.radius / 2.0).max(params.r_min);
                region.fail_count = 0;
            }
        }
        RegionEvent::Restart => {
            region.center = sobol.next_point();
            region.radius = params.r0.clamp(params.r_min, half_diameter);
            region.fail_count = 0;
            region.restart_count += 1;
            region.restart_times.push(t);
            region.best_local_mean = f64::NEG_INFINITY;
        }
    }
    region.radius = region.radius.clamp(params.r_min, half_diameter);
    if region.radius_history.last() != Some(&region.radius) {
        region.radius_history.push(region.radius);
    }
}

/// Certified restart condition: strictly below the global lower certificate.
pub fn certified_restart_check(region_upper: f64, ell: f64) -> bool {
    region_upper < ell
}

/// Local lower certificate: max LCB over records inside the region
/// (negative infinity when the region holds no records).
pub fn local_ell(snapshot: &CertificateSnapshot, region: &TrustRegion) -> f64 {
    snapshot
        .records()
        .iter()
        .filter(|r| region.contains(&r.location))
        .map(|r| r.mean - r.radius)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Approximate `max_{x in region} U_t(x)`: restart maximizer over the clipped
/// box, lower-bounded by exact evaluations at the center, the local records,
/// the box corners (d <= 10), and a coarse lattice (d <= 3).
pub fn region_upper_bound(
    snapshot: &CertificateSnapshot,
    region: &TrustRegion,
    rng: &mut Stream,
    eval_budget: usize,
) -> f64 {
    let (lo, hi) = region.bounds();
    let filter = snapshot.box_filter(&lo, &hi);
    let env = |x: &Point| snapshot.envelope_over(x, Some(&filter));

    let mut best = env(&region.center);
    for r in snapshot.records() {
        if region.contains(&r.location) {
            best = best.max(env(&r.location));
        }
    }
    let d = lo.len();
    if d <= 10 {
        // All corners of the clipped box.
        for mask in 0..(1usize << d) {
            let corner: Vec<f64> = (0..d)
                .map(|k| if mask >> k & 1 == 1 { hi[k] } else { lo[k] })
                .collect();
            best = best.max(env(&Point::from_unit_clamped(corner)));
        }
    }
    if d <= 3 {
        let m = 4usize;
        let mut idx = vec![0usize; d];
        for _ in 0..m.pow(d as u32) {
            let p: Vec<f64> = (0..d)
                .map(|k| lo[k] + (hi[k] - lo[k]) * (idx[k] as f64 + 0.5) / m as f64)
                .collect();
            best = best.max(env(&Point::from_unit_clamped(p)));
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < m {
                    break;
                }
                *slot = 0;
            }
        }
    }
    use rand::Rng;
    let starts: Vec<Point> = (0..10)
        .map(|_| {
            Point::from_unit_clamped(
                (0..d)
                    .map(|k| rng.random_range(lo[k]..=hi[k]))
                    .collect(),
            )
        })
        .collect();
    let always = |_: &Point| true;
    let zero = |_: &Point| 0.0;
    let maximizer = Maximizer {
        objective: &env,
        feasible: &always,
        tie_key: &zero,
        lower: &lo,
        upper: &hi,
    };
    if let Some((_, v)) = maximizer.run(&starts, eval_budget, rng) {
        best = best.max(v);
    }
    best
}

/// Per-region report emitted in result documents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionSummary {
    pub id: usize,
    pub center: Vec<f64>,
    pub radius: f64,
    pub radius_history: Vec<f64>,
    pub restarts: u32,
    pub restart_times: Vec<u64>,
    pub visits: u64,
    pub local_ell: f64,
    pub holds_best: bool,
}

/// Snapshot restricted to one region's records: the exportable local
/// certificate. Errors when the region holds no records.
pub fn local_certificate(
    snapshot: &CertificateSnapshot,
    region: &TrustRegion,
) -> Result<CertificateSnapshot> {
    let records: Vec<_> = snapshot
        .records()
        .iter()
        .filter(|r| region.contains(&r.location))
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(CgpError::EmptyStore);
    }
    CertificateSnapshot::from_records(
        records,
        snapshot.lipschitz,
        snapshot.sigma,
        snapshot.delta,
        snapshot.budget,
    )
}

/// Runs CGP-TR. Returns the usual result (its certificate is the winning
/// region's local certificate) plus per-region summaries and the final
/// regions for audits.
pub fn tr_run(
    objective: &NoisyObjective,
    config: &RunConfig,
) -> Result<(RunResult, Vec<RegionSummary>, Vec<TrustRegion>)> {
    if config.mode != Mode::TrustRegion {
        return Err(CgpError::Config(format!(
            "tr_run requires trust-region mode, got {:?}",
            config.mode
        )));
    }
    config.validate()?;
    let lipschitz = config
        .lipschitz
        .ok_or_else(|| CgpError::Config("trust-region mode requires a Lipschitz input".into()))?;
    let d = config.dimension;
    let params = config.trust;
    let half_diameter = (d as f64).sqrt() / 2.0;
    let r0 = params.r0.clamp(params.r_min, half_diameter);

    let mut sobol = SobolStream::new(d, rng::child_seed(config.seed, "trust-centers"));
    let mut acq_rng = rng::stream(config.seed, rng::ACQUISITION);
    let mut noise_rng = rng::stream(config.seed, rng::NOISE);

    let mut store = SampleStore::new(d);
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut regions: Vec<TrustRegion> = (0..params.n_trust.max(1))
        .map(|id| TrustRegion::new(id, sobol.next_point(), r0))
        .collect();

    let budget = config.budget;
    let mut observe = |store: &mut SampleStore,
                       trace: &mut Vec<TraceRow>,
                       noise_rng: &mut Stream,
                       x: Point,
                       ell: f64,
                       beta: f64|
     -> Result<()> {
        let y = objective.evaluate(&x, noise_rng);
        store.ingest(x.clone(), y)?;
        let (_, best) = store.best_mean_record().expect("non-empty store");
        let regret = objective
            .metadata
            .f_star
            .map(|fs| fs - objective.true_value(&best.location));
        trace.push(TraceRow {
            t: store.total_observations(),
            query: x,
            y,
            ell,
            beta,
            eta_hat: None,
            gamma_hat: None,
            eps: None,
            vol_fraction: None,
            best_mean: best.mean(),
            regret,
            cert_valid: None,
        });
        Ok(())
    };

    // One evaluation at each initial center.
    for region in &regions {
        if store.total_observations() >= budget {
            break;
        }
        let ell = if store.distinct_count() > 0 {
            snapshot_of(&store, lipschitz, config)?.ell()
        } else {
            f64::NEG_INFINITY
        };
        observe(
            &mut store,
            &mut trace,
            &mut noise_rng,
            region.center.clone(),
            ell,
            0.0,
        )?;
    }
    for region in &mut regions {
        let snapshot = snapshot_of(&store, lipschitz, config)?;
        region.best_local_mean = best_local_mean(&snapshot, region);
    }

    while store.total_observations() < budget {
        let snapshot = snapshot_of(&store, lipschitz, config)?;
        let ell = snapshot.ell();

        let uppers: Vec<f64> = regions
            .iter()
            .map(|r| region_upper_bound(&snapshot, r, &mut acq_rng, params.ub_evals))
            .collect();
        let selected = uppers
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .expect("at least one region");
        regions[selected].visits += 1;

        // One CGP step confined to the selected region.
        let region = &regions[selected];
        let ell_j = local_ell(&snapshot, region);
        let query = select_region_query(
            &snapshot,
            region,
            ell_j,
            &mut acq_rng,
            config.maximizer_evals,
        );
        let beta = local_beta(&snapshot, region, ell_j);
        observe(&mut store, &mut trace, &mut noise_rng, query, ell, beta)?;

        // Replication inside the region, capped at half the remaining budget.
        let target = beta_target(
            store.total_observations(),
            config.sigma,
            budget,
            config.delta,
        );
        if target > 0.0 && store.total_observations() < budget {
            let fresh = snapshot_of(&store, lipschitz, config)?;
            let fresh_ell_j = local_ell(&fresh, region);
            let remaining = budget - store.total_observations();
            let mut allowance = (remaining as f64 * 0.5).floor() as u64;
            let mut plan = Vec::new();
            for rec in fresh.records() {
                if allowance == 0 {
                    break;
                }
                if rec.radius > target
                    && region.contains(&rec.location)
                    && locally_active(&fresh, region, fresh_ell_j, &rec.location)
                {
                    let want = crate::cgp::replication_count(rec.radius, target);
                    let take = want.min(allowance);
                    allowance -= take;
                    plan.push((rec.location.clone(), take));
                }
            }
            for (loc, n) in plan {
                for _ in 0..n {
                    if store.total_observations() >= budget {
                        break;
                    }
                    observe(&mut store, &mut trace, &mut noise_rng, loc.clone(), ell, beta)?;
                }
            }
        }

        // Restart beats the radius dynamics (certified suboptimality).
        let region = &mut regions[selected];
        if certified_restart_check(uppers[selected], ell) {
            update_radius(
                region,
                RegionEvent::Restart,
                &params,
                d,
                &mut sobol,
                store.total_observations(),
            );
            if store.total_observations() < budget {
                let center = region.center.clone();
                observe(&mut store, &mut trace, &mut noise_rng, center, ell, beta)?;
            }
        } else {
            let fresh = snapshot_of(&store, lipschitz, config)?;
            let now_best = best_local_mean(&fresh, region);
            let improved = now_best > region.best_local_mean + 1e-9;
            region.best_local_mean = now_best.max(region.best_local_mean);
            update_radius(
                region,
                if improved {
                    RegionEvent::Success
                } else {
                    RegionEvent::Failure
                },
                &params,
                d,
                &mut sobol,
                store.total_observations(),
            );
        }
    }

    let snapshot = snapshot_of(&store, lipschitz, config)?;
    let (_, best) = store.best_mean_record().ok_or(CgpError::EmptyStore)?;
    let winner = regions.iter().find(|r| r.contains(&best.location));
    let certificate = match winner {
        Some(region) => local_certificate(&snapshot, region).unwrap_or(snapshot.clone()),
        None => snapshot.clone(),
    };
    let summaries: Vec<RegionSummary> = regions
        .iter()
        .map(|r| RegionSummary {
            id: r.id,
            center: r.center.coords().to_vec(),
            radius: r.radius,
            radius_history: r.radius_history.clone(),
            restarts: r.restart_count,
            restart_times: r.restart_times.clone(),
            visits: r.visits,
            local_ell: local_ell(&snapshot, r),
            holds_best: winner.map(|w| w.id == r.id).unwrap_or(false),
        })
        .collect();
    let result = RunResult {
        best_point: best.location.clone(),
        best_mean: best.mean(),
        certificate: Some(certificate),
        trace,
        stop_reason: StopReason::Budget,
    };
    Ok((result, summaries, regions))
}

fn snapshot_of(
    store: &SampleStore,
    lipschitz: f64,
    config: &RunConfig,
) -> Result<CertificateSnapshot> {
    CertificateSnapshot::from_store(store, lipschitz, config.sigma, config.delta, config.budget)
}

fn best_local_mean(snapshot: &CertificateSnapshot, region: &TrustRegion) -> f64 {
    snapshot
        .records()
        .iter()
        .filter(|r| region.contains(&r.location))
        .map(|r| r.mean)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn locally_active(
    snapshot: &CertificateSnapshot,
    region: &TrustRegion,
    ell_j: f64,
    x: &Point,
) -> bool {
    if !ell_j.is_finite() {
        return region.contains(x);
    }
    region.contains(x) && snapshot.envelope(x) >= ell_j - 1e-12 * (1.0 + ell_j.abs())
}

fn local_beta(snapshot: &CertificateSnapshot, region: &TrustRegion, ell_j: f64) -> f64 {
    snapshot
        .records()
        .iter()
        .filter(|r| locally_active(snapshot, region, ell_j, &r.location))
        .map(|r| r.radius)
        .fold(0.0f64, f64::max)
}

/// Score maximization confined to the region against its local certificate.
/// Falls back to the region center when the local active set defeats the
/// samplers (degenerate but possible under heavy noise).
fn select_region_query(
    snapshot: &CertificateSnapshot,
    region: &TrustRegion,
    ell_j: f64,
    rng: &mut Stream,
    eval_budget: usize,
) -> Point {
    use rand::Rng;
    let (lo, hi) = region.bounds();
    let filter = snapshot.box_filter(&lo, &hi);
    let d = lo.len();
    let membership = |x: &Point| {
        !ell_j.is_finite()
            || snapshot.envelope_over(x, Some(&filter)) >= ell_j - 1e-12 * (1.0 + ell_j.abs())
    };

    let mut starts = Vec::with_capacity(10);
    let mut draws = 0;
    while starts.len() < 10 && draws < 640 {
        let p = Point::from_unit_clamped(
            (0..d).map(|k| rng.random_range(lo[k]..=hi[k])).collect(),
        );
        draws += 1;
        if membership(&p) {
            starts.push(p);
        }
    }
    if starts.is_empty() {
        for rec in snapshot.records() {
            if region.contains(&rec.location) && membership(&rec.location) {
                starts.push(rec.location.clone());
                break;
            }
        }
    }
    if starts.is_empty() {
        return region.center.clone();
    }
    let objective = |x: &Point| {
        snapshot.envelope_over(x, Some(&filter)) - snapshot.lipschitz * snapshot.min_distance(x)
    };
    let tie = |x: &Point| snapshot.min_distance(x);
    let maximizer = Maximizer {
        objective: &objective,
        feasible: &membership,
        tie_key: &tie,
        lower: &lo,
        upper: &hi,
    };
    maximizer
        .run(&starts, eval_budget, rng)
        .map(|(p, _)| p)
        .unwrap_or_else(|| region.center.clone())
}

/// Audit row: visits against the region gap `f* - sup_{x in T_j} f(x)`.
/// Harness-only; requires optimum metadata and `d <= 3` for the grid oracle.
#[derive(Clone, Debug, Serialize)]
pub struct RegionAudit {
    pub id: usize,
    pub visits: u64,
    /// Region gap; `None` for the region containing the optimum (gap zero,
    /// excluded from allocation checks).
    pub gap: Option<f64>,
}

pub fn region_visit_audit(
    regions: &[TrustRegion],
    objective: &NoisyObjective,
    points_per_axis: usize,
) -> Result<Vec<RegionAudit>> {
    let f_star = objective
        .metadata
        .f_star
        .ok_or_else(|| CgpError::Config("region audit requires optimum metadata".into()))?;
    let mut audits = Vec::with_capacity(regions.len());
    for region in regions {
        let (lo, hi) = region.bounds();
        let d = lo.len();
        if d > 3 {
            return Err(CgpError::Config(
                "region audit grid oracle supports d <= 3".into(),
            ));
        }
        let mut sup = f64::NEG_INFINITY;
        let mut idx = vec![0usize; d];
        for _ in 0..points_per_axis.pow(d as u32) {
            let p: Vec<f64> = (0..d)
                .map(|k| {
                    lo[k] + (hi[k] - lo[k]) * (idx[k] as f64 + 0.5) / points_per_axis as f64
                })
                .collect();
            sup = sup.max(objective.true_value(&Point::from_unit_clamped(p)));
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < points_per_axis {
                    break;
                }
                *slot = 0;
            }
        }
        let contains_optimum = objective
            .metadata
            .x_star
            .as_ref()
            .map(|x| region.contains(x))
            .unwrap_or(false);
        audits.push(RegionAudit {
            id: region.id,
            visits: region.visits,
            gap: if contains_optimum {
                None
            } else {
                Some((f_star - sup).max(0.0))
            },
        });
    }
    Ok(audits)
}
