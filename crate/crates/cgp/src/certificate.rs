//! Confidence radii, the lower certificate, the Lipschitz UCB envelope, active
//! set membership, gap reports, and the exportable certificate document.
//!
//! For sampled locations `x_i` with `n_i` observations and empirical means
//! `mu_i`, the confidence radius is
//!
//! ```text
//! r_i = sigma * sqrt(2 ln(2 N_t T / delta) / n_i)
//! ```
//!
//! (natural logarithm throughout). The lower certificate is
//! `l_t = max_i (mu_i - r_i)`, the envelope is
//! `U_t(x) = min_i (mu_i + r_i + L d(x, x_i))`, and the active set is
//! `A_t = {x : U_t(x) >= l_t}` with ties counting as active. Membership is
//! exact given the records; no volume estimator can affect it.
//!
//! Radii are recomputed every iteration with the current `N_t`, so individual
//! radii are not monotone as new locations appear; monotone pruning holds
//! under frozen radii and is tested that way.

use serde::{Deserialize, Serialize};

use crate::error::{CgpError, Result};
use crate::model::{distance, Point, SampleStore};
use crate::volume::ActiveSetEstimate;

/// Frozen per-location view used by every certificate computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertRecord {
    pub location: Point,
    pub count: u64,
    pub mean: f64,
    pub radius: f64,
}

/// Immutable certificate state at some time t: Lipschitz constant, confidence
/// parameters, the frozen records, and the lower certificate. Everything the
/// membership rule needs, and nothing else.
#[derive(Clone, Debug, PartialEq)]
pub struct CertificateSnapshot {
    pub lipschitz: f64,
    pub sigma: f64,
    pub delta: f64,
    pub budget: u64,
    records: Vec<CertRecord>,
    ell: f64,
}

/// Confidence radius `sigma * sqrt(2 ln(2 N_t T / delta) / n_i)`.
///
/// Strictly decreasing in `n_i`, linear in `sigma`, zero when `sigma` is zero.
pub fn confidence_radius(
    sigma: f64,
    count: u64,
    distinct: usize,
    budget: u64,
    delta: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CgpError::Config(format!(
            "delta must lie in (0,1), got {delta}"
        )));
    }
    debug_assert!(count >= 1 && distinct >= 1 && budget >= 1);
    let log_term = (2.0 * distinct as f64 * budget as f64 / delta).ln();
    Ok(sigma * (2.0 * log_term / count as f64).sqrt())
}

/// Replication target schedule `beta_target(t) = sigma * sqrt(2 ln(2T^2/delta) / t)`.
pub fn beta_target(t: u64, sigma: f64, budget: u64, delta: f64) -> f64 {
    debug_assert!(t >= 1);
    let log_term = (2.0 * (budget as f64) * (budget as f64) / delta).ln();
    sigma * (2.0 * log_term / t as f64).sqrt()
}

/// Lower certificate `l_t = max_i (mu_i - r_i)`; undefined on an empty store.
pub fn lower_certificate(records: &[CertRecord]) -> Result<f64> {
    records
        .iter()
        .map(|r| r.mean - r.radius)
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        })
        .ok_or(CgpError::EmptyStore)
}

impl CertificateSnapshot {
    /// Builds the snapshot from the store with freshly computed radii.
    pub fn from_store(
        store: &SampleStore,
        lipschitz: f64,
        sigma: f64,
        delta: f64,
        budget: u64,
    ) -> Result<Self> {
        if store.distinct_count() == 0 {
            return Err(CgpError::EmptyStore);
        }
        let distinct = store.distinct_count();
        let records: Vec<CertRecord> = store
            .records()
            .iter()
            .map(|r| {
                Ok(CertRecord {
                    location: r.location.clone(),
                    count: r.count,
                    mean: r.mean(),
                    radius: confidence_radius(sigma, r.count, distinct, budget, delta)?,
                })
            })
            .collect::<Result<_>>()?;
        let ell = lower_certificate(&records)?;
        Ok(Self {
            lipschitz,
            sigma,
            delta,
            budget,
            records,
            ell,
        })
    }

    /// Rebuilds a snapshot directly from records (import path, tests).
    pub fn from_records(
        records: Vec<CertRecord>,
        lipschitz: f64,
        sigma: f64,
        delta: f64,
        budget: u64,
    ) -> Result<Self> {
        let ell = lower_certificate(&records)?;
        Ok(Self {
            lipschitz,
            sigma,
            delta,
            budget,
            records,
            ell,
        })
    }

    pub fn records(&self) -> &[CertRecord] {
        &self.records
    }

    /// The lower certificate l_t.
    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn dimension(&self) -> usize {
        self.records[0].location.dimension()
    }

    /// Lipschitz UCB envelope `U_t(x) = min_i (mu_i + r_i + L d(x, x_i))`.
    pub fn envelope(&self, x: &Point) -> f64 {
        self.envelope_over(x, None)
    }

    /// Envelope slack `rho_t(x) = min_i (r_i + L d(x, x_i))`.
    pub fn slack(&self, x: &Point) -> f64 {
        let mut best = f64::INFINITY;
        for r in &self.records {
            let v = r.radius + self.lipschitz * distance(x, &r.location);
            if v < best {
                best = v;
            }
        }
        best
    }

    /// Active-set membership `U_t(x) >= l_t`; ties count as active so the
    /// optimizer stays inside at equality. The comparison absorbs last-ulp
    /// rounding (1e-12 relative): with exact noiseless data and a tight
    /// Lipschitz constant the boundary passes through float ties, and a tie
    /// broken downward would falsely prune the optimum.
    pub fn is_active(&self, x: &Point) -> bool {
        self.envelope(x) >= self.ell - 1e-12 * (1.0 + self.ell.abs())
    }

    /// Distance from `x` to the nearest sampled location.
    pub fn min_distance(&self, x: &Point) -> f64 {
        self.records
            .iter()
            .map(|r| distance(x, &r.location))
            .fold(f64::INFINITY, f64::min)
    }

    /// Envelope restricted to a subset of record indices. The subset must be
    /// produced by [`CertificateSnapshot::box_filter`] for the box containing
    /// `x`; the value then equals the full envelope.
    pub fn envelope_over(&self, x: &Point, indices: Option<&[usize]>) -> f64 {
        let xc = x.coords();
        let l = self.lipschitz;
        let mut best = f64::INFINITY;
        let mut eval = |r: &CertRecord| {
            let d2 = crate::model::squared_distance_coords(xc, r.location.coords());
            let v = r.mean + r.radius + l * d2.sqrt();
            if v < best {
                best = v;
            }
        };
        match indices {
            Some(idx) => {
                for &i in idx {
                    eval(&self.records[i]);
                }
            }
            None => {
                for r in &self.records {
                    eval(r);
                }
            }
        }
        best
    }

    /// Record indices that can attain the envelope minimum somewhere in the
    /// axis-aligned box `[lower, upper]`. A record whose best-case envelope
    /// term over the box exceeds the box-wide guaranteed minimum can never be
    /// the argmin there and is dropped. Sound for any `x` in the box.
    pub fn box_filter(&self, lower: &[f64], upper: &[f64]) -> Vec<usize> {
        let l = self.lipschitz;
        let mut lo_bound = Vec::with_capacity(self.records.len());
        let mut guaranteed = f64::INFINITY;
        for r in &self.records {
            let (mut dmin2, mut dmax2) = (0.0f64, 0.0f64);
            for ((&a, &b), &c) in lower.iter().zip(upper.iter()).zip(r.location.coords()) {
                let below = (a - c).max(0.0);
                let above = (c - b).max(0.0);
                let near = below.max(above);
                dmin2 += near * near;
                let far = (c - a).abs().max((b - c).abs());
                dmax2 += far * far;
            }
            let base = r.mean + r.radius;
            lo_bound.push(base + l * dmin2.sqrt());
            let hi = base + l * dmax2.sqrt();
            if hi < guaranteed {
                guaranteed = hi;
            }
        }
        (0..self.records.len())
            .filter(|&i| lo_bound[i] <= guaranteed)
            .collect()
    }
}

/// Certified progress quantities assembled from the latest active-set
/// estimate: the active confidence radius, the covering radius of the member
/// pool, the computable optimality-gap surrogate, and the stopping proxy
/// `eps = 2(beta + L eta) + gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Largest confidence radius among active sampled locations.
    pub beta: f64,
    /// Largest pool-point distance to the nearest sampled location.
    pub eta_hat: f64,
    /// max_x U_t(x) - l_t over the pool, clamped at zero. Upper-bounds
    /// f* - l_t on the good event since the pool maximum of U dominates f*.
    pub gamma_hat: f64,
    /// Gap proxy `2(beta + L eta) + gamma`.
    pub epsilon: f64,
}

/// Assembles a [`GapReport`] from a snapshot and a fresh active-set estimate.
pub fn gap_report(
    snapshot: &CertificateSnapshot,
    active: &ActiveSetEstimate,
) -> Result<GapReport> {
    if active.member_pool.is_empty() {
        return Err(CgpError::EmptyPool);
    }
    let beta = snapshot
        .records()
        .iter()
        .filter(|r| snapshot.is_active(&r.location))
        .map(|r| r.radius)
        .fold(0.0f64, f64::max);
    let mut eta_hat = 0.0f64;
    let mut gamma_hat = 0.0f64;
    for p in &active.member_pool {
        eta_hat = eta_hat.max(snapshot.min_distance(p));
        gamma_hat = gamma_hat.max(snapshot.envelope(p) - snapshot.ell());
    }
    gamma_hat = gamma_hat.max(0.0);
    let epsilon = 2.0 * (beta + snapshot.lipschitz * eta_hat) + gamma_hat;
    Ok(GapReport {
        beta,
        eta_hat,
        gamma_hat,
        epsilon,
    })
}

// ---------------------------------------------------------------------------
// Exportable certificate document
// ---------------------------------------------------------------------------

/// JSON schema of the exportable certificate. Self-contained: a third party
/// can recompute the envelope, l_t, and membership for arbitrary points from
/// this document alone. Volume estimates are deliberately excluded; they do
/// not affect certificate validity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateDocument {
    pub schema_version: u32,
    pub dimension: usize,
    pub lipschitz: f64,
    pub sigma: f64,
    pub delta: f64,
    pub budget: u64,
    pub ell: f64,
    pub records: Vec<DocRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DocRecord {
    pub x: Vec<f64>,
    pub n: u64,
    pub mean: f64,
    pub radius: f64,
}

pub const CERTIFICATE_SCHEMA_VERSION: u32 = 1;

/// Serializes the snapshot as a certificate document. All reals are written
/// with 17 significant digits, so export -> import -> export round-trips to
/// identical bytes.
pub fn export_certificate(snapshot: &CertificateSnapshot) -> String {
    let doc = CertificateDocument {
        schema_version: CERTIFICATE_SCHEMA_VERSION,
        dimension: snapshot.dimension(),
        lipschitz: snapshot.lipschitz,
        sigma: snapshot.sigma,
        delta: snapshot.delta,
        budget: snapshot.budget,
        ell: snapshot.ell(),
        records: snapshot
            .records()
            .iter()
            .map(|r| DocRecord {
                x: r.location.coords().to_vec(),
                n: r.count,
                mean: r.mean,
                radius: r.radius,
            })
            .collect(),
    };
    to_json_17(&doc)
}

/// Parses a certificate document back into a snapshot, revalidating the
/// stored lower certificate against the records.
pub fn import_certificate(json: &str) -> Result<CertificateSnapshot> {
    let doc: CertificateDocument = serde_json::from_str(json)?;
    if doc.schema_version != CERTIFICATE_SCHEMA_VERSION {
        return Err(CgpError::Serde(format!(
            "unsupported certificate schema version {}",
            doc.schema_version
        )));
    }
    let records: Vec<CertRecord> = doc
        .records
        .into_iter()
        .map(|r| {
            Ok(CertRecord {
                location: Point::new(r.x)
                    .map_err(|e| CgpError::Serde(format!("bad record location: {e}")))?,
                count: r.n,
                mean: r.mean,
                radius: r.radius,
            })
        })
        .collect::<Result<_>>()?;
    let snapshot = CertificateSnapshot::from_records(
        records,
        doc.lipschitz,
        doc.sigma,
        doc.delta,
        doc.budget,
    )?;
    if (snapshot.ell() - doc.ell).abs() > 1e-12 * (1.0 + doc.ell.abs()) {
        return Err(CgpError::Serde(format!(
            "stored ell {} disagrees with records (recomputed {})",
            doc.ell,
            snapshot.ell()
        )));
    }
    Ok(snapshot)
}

/// JSON serialization with every f64 rendered at 17 significant digits
/// (`{:.16e}`), which is lossless for f64 and byte-stable across round trips.
pub fn to_json_17(value: &impl Serialize) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigitFormatter);
    value
        .serialize(&mut ser)
        .expect("in-memory JSON serialization cannot fail");
    String::from_utf8(out).expect("serde_json emits UTF-8")
}

struct SigDigitFormatter;

impl serde_json::ser::Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{:.16e}", f64::from(value))
    }
}
