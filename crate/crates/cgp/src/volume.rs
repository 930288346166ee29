//! Active-set volume estimation and member-pool sampling.
//!
//! Low dimensions (`d <= 5`) use exact grid discretization over cell centers.
//! Higher dimensions use a nested-set ratio estimator (subset simulation):
//! the active set `{x : U_t(x) - l_t >= 0}` is reached through nested
//! superlevel sets of `g(x) = U_t(x) - l_t`, with thresholds chosen adaptively
//! as empirical quantiles targeting conditional probability `p0`, and each
//! level sampled by a hit-and-run Markov chain against the membership oracle.
//!
//! Whatever the estimator does, membership answers come from the certificate
//! alone; estimation error can only misjudge progress, never validity.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::certificate::CertificateSnapshot;
use crate::error::{CgpError, Result};
use crate::model::Point;
use crate::rng::Stream;

/// Which estimator produced an [`ActiveSetEstimate`], with the parameters
/// actually used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum VolumeMethod {
    Grid { points_per_axis: usize },
    NestedMc {
        p0: f64,
        samples_per_level: usize,
        burn_in: usize,
        repeats: usize,
    },
}

/// Volume estimate for the active set, with a member pool every point of
/// which satisfies `is_active` under the snapshot it was built from.
#[derive(Clone, Debug)]
pub struct ActiveSetEstimate {
    /// Estimated fraction of the unit cube inside the active set.
    pub volume_fraction: f64,
    /// (low, high) bounds on log volume; degenerate for the grid method,
    /// min/max over replications for nested Monte Carlo.
    pub log_volume_ci: (f64, f64),
    pub member_pool: Vec<Point>,
    pub method: VolumeMethod,
    /// Set when the estimator found no members at some stage — on consistent
    /// data this signals an underestimated Lipschitz constant.
    pub anomaly: bool,
}

/// Nested-estimator parameters. `p0` is the target conditional probability
/// per level (0.1 by default, standard in subset simulation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedMcConfig {
    pub p0: f64,
    pub samples_per_level: usize,
    pub burn_in: usize,
    pub repeats: usize,
}

impl Default for NestedMcConfig {
    fn default() -> Self {
        Self {
            p0: 0.1,
            samples_per_level: 256,
            burn_in: 32,
            repeats: 3,
        }
    }
}

/// Default grid resolution: 100 points per axis up to d=3, 32 for d in {4,5}.
pub fn default_points_per_axis(dimension: usize) -> usize {
    if dimension <= 3 {
        100
    } else {
        32
    }
}

/// Exact-fraction estimate over a cell-center lattice; `d <= 5` only.
pub fn grid_volume(
    snapshot: &CertificateSnapshot,
    points_per_axis: usize,
) -> Result<ActiveSetEstimate> {
    let d = snapshot.dimension();
    if d > 5 {
        return Err(CgpError::Config(format!(
            "grid volume supports d <= 5 (got d={d}); use the nested-mc estimator"
        )));
    }
    if points_per_axis == 0 {
        return Err(CgpError::Config("points_per_axis must be >= 1".into()));
    }
    let nodes = (points_per_axis as f64).powi(d as i32);
    if nodes > 1e7 {
        return Err(CgpError::Config(format!(
            "grid of {points_per_axis}^{d} nodes exceeds 10^7; lower points_per_axis or use nested-mc"
        )));
    }
    let n = points_per_axis;
    let total = n.pow(d as u32);
    let mut pool = Vec::new();
    let mut active = 0usize;
    let mut coords = vec![0usize; d];
    for _ in 0..total {
        let p = Point::from_unit_clamped(
            coords
                .iter()
                .map(|&i| (i as f64 + 0.5) / n as f64)
                .collect(),
        );
        if snapshot.is_active(&p) {
            active += 1;
            pool.push(p);
        }
        // odometer increment
        for axis in coords.iter_mut() {
            *axis += 1;
            if *axis < n {
                break;
            }
            *axis = 0;
        }
    }
    let fraction = active as f64 / total as f64;
    Ok(ActiveSetEstimate {
        volume_fraction: fraction,
        log_volume_ci: (fraction.ln(), fraction.ln()),
        member_pool: pool,
        method: VolumeMethod::Grid {
            points_per_axis: n,
        },
        anomaly: active == 0,
    })
}

/// Chord of the feasible region through `current` along `direction`, clipped
/// to the unit cube, located by bisection (tolerance 1e-6) on each side.
/// With a non-convex membership set only the contiguous segment around
/// `current` is found; that approximation is absorbed by CI replication.
fn chord_endpoints(
    current: &Point,
    direction: &[f64],
    membership: &dyn Fn(&Point) -> bool,
) -> (f64, f64) {
    let xc = current.coords();
    // Analytic clip to the box: t range keeping x + t*dir inside [0,1]^d.
    let (mut t_lo, mut t_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (x, dir) in xc.iter().zip(direction) {
        if dir.abs() < 1e-300 {
            continue;
        }
        let a = (0.0 - x) / dir;
        let b = (1.0 - x) / dir;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        t_lo = t_lo.max(lo);
        t_hi = t_hi.min(hi);
    }
    if !t_lo.is_finite() || !t_hi.is_finite() || t_lo > 0.0 || t_hi < 0.0 {
        return (0.0, 0.0);
    }
    let at = |t: f64| {
        Point::from_unit_clamped(
            xc.iter()
                .zip(direction)
                .map(|(x, d)| x + t * d)
                .collect(),
        )
    };
    let bisect = |mut feasible: f64, mut infeasible: f64| {
        while (feasible - infeasible).abs() > 1e-6 {
            let mid = 0.5 * (feasible + infeasible);
            if membership(&at(mid)) {
                feasible = mid;
            } else {
                infeasible = mid;
            }
        }
        feasible
    };
    let hi = if membership(&at(t_hi)) {
        t_hi
    } else {
        bisect(0.0, t_hi)
    };
    let lo = if membership(&at(t_lo)) {
        t_lo
    } else {
        bisect(0.0, t_lo)
    };
    (lo, hi)
}

/// One hit-and-run step: uniform random direction, feasible chord through the
/// current point, then a uniform draw on the chord that itself satisfies
/// membership (up to 32 retries, else the current point is returned).
/// Requires `membership(current)`.
pub fn hit_and_run_step(
    current: &Point,
    membership: &dyn Fn(&Point) -> bool,
    rng: &mut Stream,
) -> Point {
    let d = current.dimension();
    let mut dir = vec![0.0f64; d];
    let mut norm = 0.0;
    while norm < 1e-12 {
        norm = 0.0;
        for v in dir.iter_mut() {
            *v = rng.sample(StandardNormal);
            norm += *v * *v;
        }
        norm = norm.sqrt();
    }
    for v in dir.iter_mut() {
        *v /= norm;
    }
    let (t_lo, t_hi) = chord_endpoints(current, &dir, membership);
    if t_hi - t_lo < 1e-12 {
        return current.clone();
    }
    for _ in 0..32 {
        let t = rng.random_range(t_lo..=t_hi);
        let cand = Point::from_unit_clamped(
            current
                .coords()
                .iter()
                .zip(&dir)
                .map(|(x, d)| x + t * d)
                .collect(),
        );
        if membership(&cand) {
            return cand;
        }
    }
    current.clone()
}

/// Nested-set ratio estimate of `Vol({x : level(x) >= 0})` on the unit cube.
///
/// Level 0 is the full cube. Each subsequent threshold is the empirical
/// quantile of `level` leaving a `p0` fraction of the current samples above
/// it, clamped at zero; the estimate is the product of the conditional
/// level-passing fractions. Survivors seed hit-and-run chains that replenish
/// the next level's sample set.
pub fn nested_volume_fn(
    dimension: usize,
    level: &dyn Fn(&Point) -> f64,
    cfg: &NestedMcConfig,
    rng: &mut Stream,
) -> ActiveSetEstimate {
    let method = VolumeMethod::NestedMc {
        p0: cfg.p0,
        samples_per_level: cfg.samples_per_level,
        burn_in: cfg.burn_in,
        repeats: cfg.repeats,
    };
    let repeats = cfg.repeats.max(1);
    let mut log_estimates = Vec::with_capacity(repeats);
    let mut pool = Vec::new();
    let mut anomaly = false;
    for _ in 0..repeats {
        use rand::{RngCore, SeedableRng};
        let mut rep_rng = Stream::seed_from_u64(rng.next_u64());
        let (est, members, failed) = nested_single(dimension, level, cfg, &mut rep_rng);
        anomaly |= failed;
        log_estimates.push(if est > 0.0 { est.ln() } else { f64::NEG_INFINITY });
        pool.extend(members);
    }
    let lo = log_estimates.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = log_estimates
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    // Geometric mean across replications as the point estimate.
    let mean_log = log_estimates.iter().sum::<f64>() / repeats as f64;
    let estimate = if mean_log.is_finite() {
        mean_log.exp()
    } else {
        0.0
    };
    ActiveSetEstimate {
        volume_fraction: estimate,
        log_volume_ci: (lo, hi),
        member_pool: pool,
        method,
        anomaly,
    }
}

fn nested_single(
    dimension: usize,
    level: &dyn Fn(&Point) -> f64,
    cfg: &NestedMcConfig,
    rng: &mut Stream,
) -> (f64, Vec<Point>, bool) {
    let n = cfg.samples_per_level.max(8);
    let keep = ((cfg.p0 * n as f64).round() as usize).clamp(1, n - 1);
    // Level 0: uniform on the cube.
    let mut samples: Vec<(Point, f64)> = (0..n)
        .map(|_| {
            let p = Point::from_unit_clamped((0..dimension).map(|_| rng.random()).collect());
            let g = level(&p);
            (p, g)
        })
        .collect();
    let mut product = 1.0f64;
    // A stalled threshold (flat level function) cannot refine further.
    let max_levels = 64;
    for _ in 0..max_levels {
        let passing = samples.iter().filter(|(_, g)| *g >= 0.0).count();
        // Threshold leaving ~p0 of the samples above it, clamped at 0.
        let mut values: Vec<f64> = samples.iter().map(|(_, g)| *g).collect();
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tau = values[keep - 1].min(0.0);
        if tau >= 0.0 {
            // Final level: membership equals the target set.
            let fraction = passing as f64 / samples.len() as f64;
            product *= fraction;
            let members: Vec<Point> = samples
                .into_iter()
                .filter(|(_, g)| *g >= 0.0)
                .map(|(p, _)| p)
                .collect();
            let failed = members.is_empty();
            return (if failed { 0.0 } else { product }, members, failed);
        }
        let cond = samples.iter().filter(|(_, g)| *g >= tau).count() as f64
            / samples.len() as f64;
        product *= cond;
        let survivors: Vec<(Point, f64)> = samples
            .iter()
            .filter(|(_, g)| *g >= tau)
            .cloned()
            .collect();
        if survivors.is_empty() {
            return (0.0, Vec::new(), true);
        }
        // Replenish by hit-and-run chains constrained to the new level.
        let membership = |p: &Point| level(p) >= tau;
        let mut next = Vec::with_capacity(n);
        let mut chain_idx = 0usize;
        while next.len() < n {
            let (seed_pt, _) = &survivors[chain_idx % survivors.len()];
            chain_idx += 1;
            let mut x = seed_pt.clone();
            for _ in 0..cfg.burn_in {
                x = hit_and_run_step(&x, &membership, rng);
            }
            let take = ((n - next.len()).min(n / survivors.len().max(1)).max(1)).min(8);
            for _ in 0..take {
                x = hit_and_run_step(&x, &membership, rng);
                let g = level(&x);
                next.push((x.clone(), g));
                if next.len() >= n {
                    break;
                }
            }
        }
        samples = next;
    }
    // Threshold never reached zero: report what we have, flagged.
    let members: Vec<Point> = samples
        .into_iter()
        .filter(|(_, g)| *g >= 0.0)
        .map(|(p, _)| p)
        .collect();
    (0.0, members, true)
}

/// Nested-set estimate of the active-set volume for a snapshot, using
/// `g(x) = U_t(x) - l_t` as the level function.
pub fn nested_volume(
    snapshot: &CertificateSnapshot,
    cfg: &NestedMcConfig,
    rng: &mut Stream,
) -> Result<ActiveSetEstimate> {
    let level = |p: &Point| snapshot.envelope(p) - snapshot.ell();
    Ok(nested_volume_fn(snapshot.dimension(), &level, cfg, rng))
}

/// Up to `count` active points: rejection sampling from the uniform cube,
/// falling back to hit-and-run seeded at active sampled locations once the
/// rejection acceptance rate drops below 1%.
pub fn sample_active_pool(
    snapshot: &CertificateSnapshot,
    count: usize,
    rng: &mut Stream,
) -> Result<Vec<Point>> {
    let d = snapshot.dimension();
    let mut pool = Vec::with_capacity(count);
    let budget = (count * 100).max(1000);
    let mut draws = 0usize;
    while pool.len() < count && draws < budget {
        let p = Point::from_unit_clamped((0..d).map(|_| rng.random()).collect());
        draws += 1;
        if snapshot.is_active(&p) {
            pool.push(p);
        }
    }
    if pool.len() >= count {
        return Ok(pool);
    }
    // Rejection acceptance < 1%: walk the active set instead, seeding at the
    // best-LCB record (any active record will do).
    let membership = |p: &Point| snapshot.is_active(p);
    let mut seeds: Vec<Point> = pool.clone();
    let mut best_first: Vec<&crate::certificate::CertRecord> = snapshot.records().iter().collect();
    best_first.sort_by(|a, b| {
        (b.mean - b.radius)
            .partial_cmp(&(a.mean - a.radius))
            .unwrap()
    });
    for r in best_first {
        if snapshot.is_active(&r.location) {
            seeds.push(r.location.clone());
            break;
        }
    }
    if seeds.is_empty() {
        return Err(CgpError::Anomaly(
            "no active point found by rejection or at any sampled location; \
             the Lipschitz constant may be underestimated"
                .into(),
        ));
    }
    let mut x = seeds[rng.random_range(0..seeds.len())].clone();
    for _ in 0..16 * d {
        x = hit_and_run_step(&x, &membership, rng);
    }
    while pool.len() < count {
        x = hit_and_run_step(&x, &membership, rng);
        pool.push(x.clone());
    }
    Ok(pool)
}

/// Dispatches on the configured estimator; `Auto` = grid for `d <= 5`,
/// nested Monte Carlo above.
pub fn estimate_volume(
    snapshot: &CertificateSnapshot,
    spec: &crate::model::VolumeSpec,
    rng: &mut Stream,
) -> Result<ActiveSetEstimate> {
    use crate::model::VolumeSpec;
    let d = snapshot.dimension();
    match spec {
        VolumeSpec::Auto => {
            if d <= 5 {
                grid_volume(snapshot, default_points_per_axis(d))
            } else {
                nested_volume(snapshot, &NestedMcConfig::default(), rng)
            }
        }
        VolumeSpec::Grid { points_per_axis } => grid_volume(
            snapshot,
            points_per_axis.unwrap_or_else(|| default_points_per_axis(d)),
        ),
        VolumeSpec::NestedMc {
            p0,
            samples_per_level,
            burn_in,
            repeats,
        } => nested_volume(
            snapshot,
            &NestedMcConfig {
                p0: *p0,
                samples_per_level: *samples_per_level,
                burn_in: *burn_in,
                repeats: *repeats,
            },
            rng,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::CertRecord;
    use rand::SeedableRng;

    fn snap(records: Vec<(Vec<f64>, f64, f64)>, lipschitz: f64) -> CertificateSnapshot {
        let records = records
            .into_iter()
            .map(|(x, mean, radius)| CertRecord {
                location: Point::new(x).unwrap(),
                count: 1,
                mean,
                radius,
            })
            .collect();
        CertificateSnapshot::from_records(records, lipschitz, 0.1, 0.05, 100).unwrap()
    }

    #[test]
    fn grid_volume_nothing_prunable() {
        let s = snap(vec![(vec![0.4, 0.6], 0.5, 2.0)], 1.0);
        let est = grid_volume(&s, 20).unwrap();
        assert_eq!(est.volume_fraction, 1.0);
        assert!(!est.anomaly);
        assert_eq!(est.member_pool.len(), 400);
    }

    #[test]
    fn grid_volume_interval_example() {
        // Hand-solved: active iff 0.2 + |x-0.9| >= 0.8, i.e. x <= 0.3.
        let s = snap(vec![(vec![0.25], 0.8, 0.0), (vec![0.9], 0.2, 0.0)], 1.0);
        let est = grid_volume(&s, 100).unwrap();
        assert!((est.volume_fraction - 0.30).abs() <= 0.01);
        for p in &est.member_pool {
            assert!(p.coords()[0] <= 0.3 + 0.01);
        }
    }

    #[test]
    fn grid_volume_empty_set_flags_anomaly() {
        // Inconsistent snapshot: a huge mean with tiny Lipschitz constant
        // prunes everything, including the record locations themselves.
        let s = snap(vec![(vec![0.1], 5.0, 0.0), (vec![0.9], 0.0, 0.0)], 0.01);
        let est = grid_volume(&s, 50).unwrap();
        assert_eq!(est.volume_fraction, 0.0);
        assert!(est.anomaly);
    }

    #[test]
    fn grid_volume_guards() {
        let s = snap(vec![(vec![0.5; 6], 0.5, 1.0)], 1.0);
        assert!(grid_volume(&s, 10).is_err()); // d > 5
        let s2 = snap(vec![(vec![0.5; 4], 0.5, 1.0)], 1.0);
        assert!(grid_volume(&s2, 100).is_err()); // 10^8 nodes
    }

    #[test]
    fn chord_endpoints_whole_cube_and_halfspace() {
        let current = Point::new(vec![0.5, 0.5]).unwrap();
        let cube = |_: &Point| true;
        let (lo, hi) = chord_endpoints(&current, &[1.0, 0.0], &cube);
        assert!((lo + 0.5).abs() < 1e-6 && (hi - 0.5).abs() < 1e-6);

        let half = |p: &Point| p.coords()[0] <= 0.5;
        let (lo, hi) = chord_endpoints(&current, &[1.0, 0.0], &half);
        assert!((lo + 0.5).abs() < 1e-6);
        assert!(hi.abs() < 2e-6, "hi = {hi}");

        let (lo, hi) = chord_endpoints(&current, &[0.0, 1.0], &cube);
        assert!((lo + 0.5).abs() < 1e-6 && (hi - 0.5).abs() < 1e-6);
    }

    #[test]
    fn hit_and_run_stays_feasible() {
        let mut rng = Stream::seed_from_u64(21);
        let half = |p: &Point| p.coords()[0] <= 0.5;
        let mut x = Point::new(vec![0.25, 0.5]).unwrap();
        for _ in 0..500 {
            x = hit_and_run_step(&x, &half, &mut rng);
            assert!(half(&x));
            for c in x.coords() {
                assert!((0.0..=1.0).contains(c));
            }
        }
    }

    #[test]
    fn nested_everything_active_is_one() {
        let mut rng = Stream::seed_from_u64(4);
        let est = nested_volume_fn(2, &|_| 1.0, &NestedMcConfig::default(), &mut rng);
        assert_eq!(est.volume_fraction, 1.0);
        assert!(!est.anomaly);
    }

    #[test]
    fn nested_product_of_conditionals() {
        // Target set: the quarter cube x0 <= 0.5 && x1 <= 0.5 (volume 0.25),
        // reached through nested half-cube-like superlevels.
        let level = |p: &Point| -(p.coords()[0] - 0.5).max(p.coords()[1] - 0.5);
        let cfg = NestedMcConfig {
            samples_per_level: 1000,
            repeats: 3,
            ..Default::default()
        };
        let mut rng = Stream::seed_from_u64(8);
        let est = nested_volume_fn(2, &level, &cfg, &mut rng);
        assert!(
            (est.volume_fraction - 0.25).abs() <= 0.05,
            "estimate {}",
            est.volume_fraction
        );
        assert!(est.log_volume_ci.0 <= est.volume_fraction.ln() + 1e-12);
        assert!(est.log_volume_ci.1 >= est.volume_fraction.ln() - 1e-12);
        for p in &est.member_pool {
            assert!(level(p) >= 0.0);
        }
    }

    #[test]
    fn nested_matches_grid_on_disk_like_set() {
        // d=2 snapshot whose active set is approximately a disk: one sharp
        // record at the center against a distant low record.
        let s = snap(
            vec![(vec![0.5, 0.5], 1.0, 0.0), (vec![0.0, 0.0], 0.0, 0.0)],
            1.0,
        );
        let grid = grid_volume(&s, 1000).unwrap();
        let mut rng = Stream::seed_from_u64(12);
        let cfg = NestedMcConfig {
            samples_per_level: 1000,
            repeats: 3,
            ..Default::default()
        };
        let nested = nested_volume(&s, &cfg, &mut rng).unwrap();
        let rel = (nested.volume_fraction - grid.volume_fraction).abs() / grid.volume_fraction;
        assert!(rel <= 0.15, "relative error {rel}");
    }

    #[test]
    fn pool_rejection_path_and_interval_membership() {
        let mut rng = Stream::seed_from_u64(3);
        // Nothing prunable: acceptance ~ 1.
        let s = snap(vec![(vec![0.4], 0.5, 2.0)], 1.0);
        let pool = sample_active_pool(&s, 64, &mut rng).unwrap();
        assert_eq!(pool.len(), 64);

        // Active set is [0, 0.3]: every returned point lands inside.
        let s = snap(vec![(vec![0.25], 0.8, 0.0), (vec![0.9], 0.2, 0.0)], 1.0);
        let pool = sample_active_pool(&s, 64, &mut rng).unwrap();
        assert_eq!(pool.len(), 64);
        for p in &pool {
            assert!(p.coords()[0] <= 0.3 + 1e-9);
            assert!(s.is_active(p));
        }
    }

    #[test]
    fn pool_errors_on_empty_active_set() {
        let mut rng = Stream::seed_from_u64(3);
        let s = snap(vec![(vec![0.1], 5.0, 0.0), (vec![0.9], 0.0, 0.0)], 0.01);
        assert!(matches!(
            sample_active_pool(&s, 16, &mut rng),
            Err(CgpError::Anomaly(_))
        ));
    }
}
