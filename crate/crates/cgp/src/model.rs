//! Core domain types: points on the unit cube, the noisy objective interface,
//! the sample store, and run configuration.
//!
//! The optimization domain is always `[0,1]^d` under the Euclidean metric;
//! benchmarks are affinely rescaled into it before optimization. Sampled
//! locations are identified by exact coordinate equality — the acquisition
//! step never regenerates an existing location except through the replication
//! path, so no fuzzy matching is needed.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CgpError, Result};

/// A location in the unit hypercube `[0,1]^d`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point {
    coords: Vec<f64>,
}

impl Point {
    /// Validates dimension >= 1 and every coordinate in `[0,1]`.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(CgpError::Config("point dimension must be >= 1".into()));
        }
        for (i, c) in coords.iter().enumerate() {
            if !c.is_finite() || *c < 0.0 || *c > 1.0 {
                return Err(CgpError::Config(format!(
                    "coordinate {i} = {c} outside [0,1]"
                )));
            }
        }
        Ok(Self { coords })
    }

    /// Builds a point, clamping each coordinate into `[0,1]`. For internal
    /// producers (samplers, optimizers) whose arithmetic can leave dust
    /// outside the box.
    pub fn from_unit_clamped(coords: Vec<f64>) -> Self {
        Self {
            coords: coords.into_iter().map(|c| c.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dimension(&self) -> usize {
        self.coords.len()
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Point{:?}", self.coords)
    }
}

/// Euclidean distance. Panics on dimension mismatch (contract violation).
pub fn distance(a: &Point, b: &Point) -> f64 {
    assert_eq!(
        a.dimension(),
        b.dimension(),
        "distance: dimension mismatch {} vs {}",
        a.dimension(),
        b.dimension()
    );
    squared_distance_coords(a.coords(), b.coords()).sqrt()
}

pub(crate) fn squared_distance_coords(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Optional ground-truth metadata attached to synthetic objectives.
/// Immutable once constructed; used by the harness (regret, audits), never by
/// the optimizer itself.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ObjectiveMetadata {
    /// Global maximum value.
    pub f_star: Option<f64>,
    /// A global maximizer.
    pub x_star: Option<Point>,
    /// Valid upper bound on the Lipschitz constant.
    pub lipschitz: Option<f64>,
    /// Noise standard deviation used by the harness.
    pub noise_sigma: Option<f64>,
    /// Near-optimality dimension, when known analytically.
    pub alpha: Option<f64>,
}

/// A black-box objective observed through additive Gaussian noise of scale
/// `sigma` (a sub-Gaussian instance). Repeated evaluation at the same point
/// may return different values.
#[derive(Clone)]
pub struct NoisyObjective {
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub sigma: f64,
    pub metadata: ObjectiveMetadata,
}

impl NoisyObjective {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, sigma: f64) -> Self {
        Self {
            f: Arc::new(f),
            sigma,
            metadata: ObjectiveMetadata::default(),
        }
    }

    pub fn with_metadata(mut self, metadata: ObjectiveMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    /// One noisy observation, drawing from the run's noise stream.
    pub fn evaluate(&self, x: &Point, rng: &mut impl Rng) -> f64 {
        let noise: f64 = rng.sample(StandardNormal);
        (self.f)(x.coords()) + self.sigma * noise
    }

    /// Noise-free value; harness-only (regret, envelope validity oracles).
    pub fn true_value(&self, x: &Point) -> f64 {
        (self.f)(x.coords())
    }
}

impl fmt::Debug for NoisyObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoisyObjective")
            .field("sigma", &self.sigma)
            .field("metadata", &self.metadata)
            .finish_non_exhaustive()
    }
}

/// One distinct sampled location with its running statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub location: Point,
    /// Number of observations at this location.
    pub count: u64,
    /// Sum of observations; the mean is derived so it always equals sum/count
    /// to full working precision.
    pub sum: f64,
}

impl SampleRecord {
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

/// The set of distinct sampled locations with per-location counts and means.
/// Single-writer; snapshots taken from it are freely shareable.
#[derive(Clone, Debug, Default)]
pub struct SampleStore {
    dimension: usize,
    records: Vec<SampleRecord>,
    total: u64,
}

impl SampleStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            records: Vec::new(),
            total: 0,
        }
    }

    /// Folds one observation in. An exact coordinate match updates that
    /// record's count and sum; otherwise a new record is appended. Returns
    /// the index of the touched record.
    pub fn ingest(&mut self, x: Point, y: f64) -> Result<usize> {
        if !y.is_finite() {
            return Err(CgpError::Config(format!("non-finite observation {y}")));
        }
        if x.dimension() != self.dimension {
            return Err(CgpError::Config(format!(
                "observation dimension {} != store dimension {}",
                x.dimension(),
                self.dimension
            )));
        }
        self.total += 1;
        if let Some(i) = self.records.iter().position(|r| r.location == x) {
            self.records[i].count += 1;
            self.records[i].sum += y;
            Ok(i)
        } else {
            self.records.push(SampleRecord {
                location: x,
                count: 1,
                sum: y,
            });
            Ok(self.records.len() - 1)
        }
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    /// Total observations so far (t).
    pub fn total_observations(&self) -> u64 {
        self.total
    }

    /// Number of distinct locations (N_t).
    pub fn distinct_count(&self) -> usize {
        self.records.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Index and record of the best empirical mean; earliest-sampled wins ties.
    pub fn best_mean_record(&self) -> Option<(usize, &SampleRecord)> {
        let mut best: Option<(usize, &SampleRecord)> = None;
        for (i, r) in self.records.iter().enumerate() {
            match best {
                Some((_, b)) if r.mean() <= b.mean() => {}
                _ => best = Some((i, r)),
            }
        }
        best
    }
}

/// Optimizer mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "known-L")]
    KnownL,
    #[serde(rename = "adaptive")]
    Adaptive,
    #[serde(rename = "trust-region")]
    TrustRegion,
    #[serde(rename = "hybrid")]
    Hybrid,
}

impl Default for Mode {
    fn default() -> Self {
        Mode::KnownL
    }
}

/// Early-stopping rule checked against fresh volume/gap estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StoppingRule {
    FixedBudget,
    VolumeBelow { threshold: f64 },
    GapBelow { threshold: f64 },
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule::FixedBudget
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            StoppingRule::FixedBudget => Ok(()),
            StoppingRule::VolumeBelow { threshold } | StoppingRule::GapBelow { threshold } => {
                if *threshold > 0.0 && threshold.is_finite() {
                    Ok(())
                } else {
                    Err(CgpError::Config(format!(
                        "stopping threshold must be positive, got {threshold}"
                    )))
                }
            }
        }
    }
}

/// Volume estimator selection. `Auto` picks the grid for `d <= 5` and the
/// nested-set Monte Carlo estimator above that.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum VolumeSpec {
    Auto,
    Grid {
        #[serde(default)]
        points_per_axis: Option<usize>,
    },
    NestedMc {
        #[serde(default = "default_p0")]
        p0: f64,
        #[serde(default = "default_samples_per_level")]
        samples_per_level: usize,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
        #[serde(default = "default_repeats")]
        repeats: usize,
    },
}

fn default_p0() -> f64 {
    0.1
}
fn default_samples_per_level() -> usize {
    256
}
fn default_burn_in() -> usize {
    32
}
fn default_repeats() -> usize {
    3
}

impl Default for VolumeSpec {
    fn default() -> Self {
        VolumeSpec::Auto
    }
}

/// Trust-region parameters (defaults per the recommended settings:
/// 5 regions, initial radius 0.2, floor 0.01, contraction after 10 failures).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustParams {
    pub n_trust: usize,
    pub r0: f64,
    pub r_min: f64,
    pub tau_fail: u32,
    /// Score-evaluation budget for each per-region envelope-maximum estimate.
    pub ub_evals: usize,
}

impl Default for TrustParams {
    fn default() -> Self {
        Self {
            n_trust: 5,
            r0: 0.2,
            r_min: 0.01,
            tau_fail: 10,
            ub_evals: 160,
        }
    }
}

/// Hybrid-mode parameters: switch threshold on the smoothness ratio, the
/// phase-1 volume trigger, and the phase-1 budget fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridParams {
    pub rho_thresh: f64,
    pub vol_threshold: f64,
    pub budget_fraction: f64,
}

impl Default for HybridParams {
    fn default() -> Self {
        Self {
            rho_thresh: 0.5,
            vol_threshold: 0.1,
            budget_fraction: 1.0 / 3.0,
        }
    }
}

/// Full run configuration. All fields have serde defaults so partial JSON
/// documents parse; `dimension`, `budget` and `seed` are normally filled by
/// the experiment runner.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dimension: usize,
    /// Total observation budget T.
    pub budget: u64,
    /// Confidence level delta in (0,1).
    pub delta: f64,
    /// Known noise scale sigma >= 0.
    pub sigma: f64,
    /// Lipschitz input: the constant in known-L mode, the initial estimate in
    /// adaptive mode (estimated from warm samples when absent).
    pub lipschitz: Option<f64>,
    pub mode: Mode,
    pub seed: u64,
    pub stopping: StoppingRule,
    pub volume: VolumeSpec,
    pub trust: TrustParams,
    pub hybrid: HybridParams,
    /// Score-evaluation budget per query selection.
    pub maximizer_evals: usize,
    /// Volume estimate / gap report refresh cadence, in iterations.
    pub volume_every: usize,
    /// Member-pool size for gap reports and acquisition fallbacks.
    pub pool_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dimension: 1,
            budget: 100,
            delta: 0.05,
            sigma: 0.0,
            lipschitz: None,
            mode: Mode::KnownL,
            seed: 0,
            stopping: StoppingRule::FixedBudget,
            volume: VolumeSpec::Auto,
            trust: TrustParams::default(),
            hybrid: HybridParams::default(),
            maximizer_evals: 2000,
            volume_every: 10,
            pool_size: 512,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(CgpError::Config("dimension must be >= 1".into()));
        }
        if self.budget == 0 {
            return Err(CgpError::Config("budget must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CgpError::Config(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(CgpError::Config(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if let Some(l) = self.lipschitz {
            if !(l > 0.0 && l.is_finite()) {
                return Err(CgpError::Config(format!(
                    "lipschitz must be finite and > 0, got {l}"
                )));
            }
        } else if self.mode != Mode::Adaptive {
            return Err(CgpError::Config(
                "lipschitz is required outside adaptive mode".into(),
            ));
        }
        if self.maximizer_evals == 0 || self.volume_every == 0 || self.pool_size == 0 {
            return Err(CgpError::Config(
                "maximizer_evals, volume_every and pool_size must be >= 1".into(),
            ));
        }
        self.stopping.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn distance_examples() {
        let o = Point::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(distance(&o, &o), 0.0);
        let e = Point::new(vec![1.0, 1.0]).unwrap();
        assert!((distance(&o, &e) - std::f64::consts::SQRT_2).abs() < 1e-12);
        let a = Point::new(vec![0.2]).unwrap();
        let b = Point::new(vec![0.9]).unwrap();
        assert!((distance(&a, &b) - 0.7).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn distance_dimension_mismatch_panics() {
        let a = Point::new(vec![0.2]).unwrap();
        let b = Point::new(vec![0.2, 0.3]).unwrap();
        distance(&a, &b);
    }

    #[test]
    fn ingest_merges_exact_matches_and_appends_new() {
        let mut store = SampleStore::new(1);
        let x = Point::new(vec![0.5]).unwrap();
        store.ingest(x.clone(), 1.0).unwrap();
        assert_eq!(store.distinct_count(), 1);
        assert_eq!(store.records()[0].count, 1);
        assert_eq!(store.records()[0].mean(), 1.0);

        store.ingest(x, 0.0).unwrap();
        assert_eq!(store.distinct_count(), 1);
        assert_eq!(store.records()[0].count, 2);
        assert_eq!(store.records()[0].mean(), 0.5);

        store.ingest(Point::new(vec![0.25]).unwrap(), 0.3).unwrap();
        assert_eq!(store.distinct_count(), 2);
        assert_eq!(store.total_observations(), 3);
    }

    #[test]
    fn ingest_rejects_non_finite() {
        let mut store = SampleStore::new(1);
        let x = Point::new(vec![0.5]).unwrap();
        assert!(store.ingest(x.clone(), f64::NAN).is_err());
        assert!(store.ingest(x, f64::INFINITY).is_err());
        assert_eq!(store.total_observations(), 0);
    }

    #[test]
    fn running_mean_matches_direct_summation() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(1..=20);
            let mut store = SampleStore::new(1);
            let x = Point::new(vec![0.25]).unwrap();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            for &y in &ys {
                store.ingest(x.clone(), y).unwrap();
            }
            let direct: f64 = ys.iter().sum::<f64>() / n as f64;
            assert!((store.records()[0].mean() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn best_mean_ties_go_to_earliest() {
        let mut store = SampleStore::new(1);
        store.ingest(Point::new(vec![0.1]).unwrap(), 0.7).unwrap();
        store.ingest(Point::new(vec![0.2]).unwrap(), 0.7).unwrap();
        let (idx, _) = store.best_mean_record().unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err()); // lipschitz missing in known-L
        cfg.lipschitz = Some(1.0);
        assert!(cfg.validate().is_ok());
        cfg.delta = 1.5;
        assert!(cfg.validate().is_err());
    }
}
