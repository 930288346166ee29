//! Small exact Gaussian process surrogate with a Matern-5/2 kernel, used by
//! hybrid phase 2 and by the GP-UCB baseline.
//!
//! Zero-mean prior, exact Cholesky inference, hard cap of 500 training points
//! (hybrid refinement and the baseline never exceed desk-scale budgets, so no
//! sparse approximations). Hyperparameters are either fixed or maximized over
//! the log marginal likelihood by derivative-free multi-start on the log-scale
//! box `[1e-3, 10]^2`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{CgpError, Result};
use crate::model::{distance, Point};
use crate::rng::Stream;

/// Hard cap on exact-GP training size.
pub const MAX_TRAINING: usize = 500;

/// Kernel and noise hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpParams {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

/// Hyperparameter handling during fits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HyperMode {
    /// Use the supplied parameters as-is (deterministic tests).
    Fixed(GpParamsFixed),
    /// Maximize the log marginal likelihood over (lengthscale, signal).
    Mle,
}

/// Parameters for fixed-hyperparameter fits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpParamsFixed {
    pub lengthscale: f64,
    pub signal_variance: f64,
}

/// Matern-5/2 covariance:
/// `s^2 (1 + sqrt5 r/l + 5r^2/(3l^2)) exp(-sqrt5 r/l)` with `r = d(a,b)`.
pub fn matern52(a: &Point, b: &Point, lengthscale: f64, signal_variance: f64) -> f64 {
    debug_assert!(lengthscale > 0.0);
    matern52_r(distance(a, b), lengthscale, signal_variance)
}

fn matern52_r(r: f64, lengthscale: f64, signal_variance: f64) -> f64 {
    let z = 5f64.sqrt() * r / lengthscale;
    signal_variance * (1.0 + z + z * z / 3.0) * (-z).exp()
}

/// Fitted exact GP model. Immutable after construction; posterior queries are
/// pure and freely parallel.
#[derive(Clone, Debug)]
pub struct GpModel {
    xs: Vec<Point>,
    params: GpParams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    /// Diagonal jitter that made the factorization succeed.
    pub jitter: f64,
}

/// Fits an exact GP to the data. Duplicate inputs are allowed; observation
/// noise regularizes the kernel matrix, with jitter escalated from 1e-10 to
/// 1e-6 before giving up.
pub fn gp_fit(
    points: &[Point],
    values: &[f64],
    noise_variance: f64,
    mode: HyperMode,
    rng: &mut Stream,
) -> Result<GpModel> {
    if points.is_empty() || points.len() != values.len() {
        return Err(CgpError::Config(format!(
            "gp_fit needs matching non-empty inputs, got {} points / {} values",
            points.len(),
            values.len()
        )));
    }
    if points.len() > MAX_TRAINING {
        return Err(CgpError::Config(format!(
            "gp training size {} exceeds the cap {MAX_TRAINING}",
            points.len()
        )));
    }
    let (lengthscale, signal_variance) = match mode {
        HyperMode::Fixed(p) => (p.lengthscale, p.signal_variance),
        HyperMode::Mle => mle_search(points, values, noise_variance, rng),
    };
    if lengthscale <= 0.0 || signal_variance <= 0.0 {
        return Err(CgpError::Config(
            "lengthscale and signal variance must be positive".into(),
        ));
    }
    let params = GpParams {
        lengthscale,
        signal_variance,
        noise_variance,
    };
    let (chol, jitter) = factorize(points, &params)?;
    let y = DVector::from_column_slice(values);
    let alpha = chol.solve(&y);
    Ok(GpModel {
        xs: points.to_vec(),
        params,
        chol,
        alpha,
        jitter,
    })
}

fn kernel_matrix(points: &[Point], params: &GpParams) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = matern52(
                &points[i],
                &points[j],
                params.lengthscale,
                params.signal_variance,
            );
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factorize(points: &[Point], params: &GpParams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let base = kernel_matrix(points, params);
    let n = points.len();
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += params.noise_variance + jitter;
        }
        if let Some(chol) = Cholesky::new(k) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(CgpError::Numerical(
        "kernel matrix not positive definite at maximum jitter 1e-6".into(),
    ))
}

fn log_marginal_likelihood(points: &[Point], values: &[f64], params: &GpParams) -> Option<f64> {
    let (chol, _) = factorize(points, params).ok()?;
    let y = DVector::from_column_slice(values);
    let alpha = chol.solve(&y);
    let n = points.len() as f64;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Some(-0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Multi-start coordinate search over (log lengthscale, log signal variance)
/// on the box [1e-3, 10]^2.
fn mle_search(
    points: &[Point],
    values: &[f64],
    noise_variance: f64,
    rng: &mut Stream,
) -> (f64, f64) {
    use rand::Rng;
    let (lo, hi) = ((1e-3f64).ln(), 10f64.ln());
    let nll = |ll: f64, ls: f64| -> f64 {
        let params = GpParams {
            lengthscale: ll.exp(),
            signal_variance: ls.exp(),
            noise_variance,
        };
        match log_marginal_likelihood(points, values, &params) {
            Some(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    };
    let mut starts = vec![(0.3f64.ln(), 0.0), (0.0, (0.1f64).ln())];
    for _ in 0..2 {
        starts.push((rng.random_range(lo..hi), rng.random_range(lo..hi)));
    }
    let mut best = (starts[0].0, starts[0].1, f64::INFINITY);
    for (mut a, mut b) in starts {
        let mut fv = nll(a, b);
        let mut step = 0.8;
        while step > 0.02 {
            let mut improved = false;
            for (da, db) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
                let (na, nb) = ((a + da).clamp(lo, hi), (b + db).clamp(lo, hi));
                let nv = nll(na, nb);
                if nv < fv {
                    a = na;
                    b = nb;
                    fv = nv;
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if fv < best.2 {
            best = (a, b, fv);
        }
    }
    (best.0.exp(), best.1.exp())
}

impl GpModel {
    pub fn params(&self) -> GpParams {
        self.params
    }

    pub fn training_len(&self) -> usize {
        self.xs.len()
    }

    /// Exact posterior mean and variance at `x`, variance clamped at zero
    /// after roundoff.
    pub fn posterior(&self, x: &Point) -> (f64, f64) {
        let n = self.xs.len();
        let mut kstar = DVector::zeros(n);
        for i in 0..n {
            kstar[i] = matern52(
                x,
                &self.xs[i],
                self.params.lengthscale,
                self.params.signal_variance,
            );
        }
        let mean = kstar.dot(&self.alpha);
        let v = self.chol.solve(&kstar);
        let variance = (self.params.signal_variance - kstar.dot(&v)).max(0.0);
        (mean, variance)
    }
}

/// Posterior mean by a plain (unfactored) linear solve; independent route
/// kept for tests.
pub fn posterior_mean_direct(
    points: &[Point],
    values: &[f64],
    params: &GpParams,
    jitter: f64,
    x: &Point,
) -> f64 {
    let n = points.len();
    let mut k = kernel_matrix(points, params);
    for i in 0..n {
        k[(i, i)] += params.noise_variance + jitter;
    }
    let y = DVector::from_column_slice(values);
    let alpha = k
        .lu()
        .solve(&y)
        .expect("direct solve of a regularized kernel matrix");
    let mut acc = 0.0;
    for i in 0..n {
        acc += alpha[i] * matern52(x, &points[i], params.lengthscale, params.signal_variance);
    }
    acc
}

/// GP-UCB exploration coefficient `beta_t = 2 ln(t^2 pi^2 / (6 delta))`.
pub fn gp_ucb_beta(t: u64, delta: f64) -> f64 {
    let t = t.max(1) as f64;
    2.0 * (t * t * std::f64::consts::PI.powi(2) / (6.0 * delta)).ln()
}

/// Argmax of `mean + sqrt(beta_t) * stddev` over the candidate pool; the
/// first pool entry wins ties.
pub fn gp_ucb_select<'a>(
    model: &GpModel,
    t: u64,
    delta: f64,
    pool: &'a [Point],
) -> Result<&'a Point> {
    if pool.is_empty() {
        return Err(CgpError::EmptyPool);
    }
    let beta = gp_ucb_beta(t, delta);
    let mut best: Option<(&Point, f64)> = None;
    for p in pool {
        let (mean, var) = model.posterior(p);
        let ucb = mean + beta.sqrt() * var.sqrt();
        match best {
            Some((_, b)) if ucb <= b => {}
            _ => best = Some((p, ucb)),
        }
    }
    Ok(best.expect("non-empty pool").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn pt(coords: &[f64]) -> Point {
        Point::new(coords.to_vec()).unwrap()
    }

    #[test]
    fn matern_examples() {
        // r = 0 returns the signal variance.
        assert_eq!(matern52(&pt(&[0.4]), &pt(&[0.4]), 1.0, 2.5), 2.5);
        // Direct formula arithmetic as oracle at r=1, l=1, s2=1.
        let z = 5f64.sqrt();
        let oracle = (1.0 + z + z * z / 3.0) * (-z).exp();
        let got = matern52(&pt(&[0.0]), &pt(&[1.0]), 1.0, 1.0);
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.52399).abs() < 1e-4);
        // Exponential decay far from the data.
        assert!(matern52_r(20.0, 1.0, 1.0) < 1e-6);
        assert!(matern52_r(25.0, 1.0, 1.0) < 1e-8);
    }

    #[test]
    fn interpolates_noiseless_data() {
        let mut rng = Stream::seed_from_u64(1);
        let xs: Vec<Point> = vec![pt(&[0.1]), pt(&[0.3]), pt(&[0.55]), pt(&[0.7]), pt(&[0.95])];
        let ys: Vec<f64> = xs.iter().map(|p| (3.0 * p.coords()[0]).sin()).collect();
        let fixed = HyperMode::Fixed(GpParamsFixed {
            lengthscale: 0.3,
            signal_variance: 1.0,
        });
        let model = gp_fit(&xs, &ys, 0.0, fixed, &mut rng).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (mean, var) = model.posterior(x);
            assert!((mean - y).abs() < 1e-6, "mean {mean} vs {y}");
            assert!(var <= 1e-6, "variance at a training point: {var}");
        }
        // Single point: posterior mean equals its value.
        let one = gp_fit(&xs[..1], &ys[..1], 0.0, fixed, &mut rng).unwrap();
        let (mean, _) = one.posterior(&xs[0]);
        assert!((mean - ys[0]).abs() < 1e-8);
    }

    #[test]
    fn prior_reversion_far_from_data() {
        let mut rng = Stream::seed_from_u64(2);
        // Tiny lengthscale makes every test point "far".
        let xs = vec![pt(&[0.0]), pt(&[0.02])];
        let ys = vec![0.8, 0.7];
        let model = gp_fit(
            &xs,
            &ys,
            0.0,
            HyperMode::Fixed(GpParamsFixed {
                lengthscale: 0.01,
                signal_variance: 1.7,
            }),
            &mut rng,
        )
        .unwrap();
        let (mean, var) = model.posterior(&pt(&[0.9]));
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.7).abs() < 1e-6);
    }

    #[test]
    fn one_point_posterior_formula() {
        // Find the distance r* where the unit kernel equals 1/2, then place a
        // single training point exactly that far (in kernel units) from the
        // test point: mean = 0.5 y, variance = 1 - 0.25.
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if matern52_r(mid, 1.0, 1.0) > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r_half = 0.5 * (lo + hi);
        let mut rng = Stream::seed_from_u64(3);
        let model = gp_fit(
            &[pt(&[0.0])],
            &[0.9],
            0.0,
            HyperMode::Fixed(GpParamsFixed {
                lengthscale: 0.8 / r_half,
                signal_variance: 1.0,
            }),
            &mut rng,
        )
        .unwrap();
        let (mean, var) = model.posterior(&pt(&[0.8]));
        assert!((mean - 0.45).abs() < 1e-9, "mean {mean}");
        assert!((var - 0.75).abs() < 1e-9, "var {var}");
    }

    #[test]
    fn mle_recovers_lengthscale_within_factor_of_grid_oracle() {
        let mut rng = Stream::seed_from_u64(5);
        let xs: Vec<Point> = (0..24).map(|i| pt(&[i as f64 / 23.0])).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|p| (2.0 * std::f64::consts::PI * p.coords()[0]).sin())
            .collect();
        let model = gp_fit(&xs, &ys, 1e-6, HyperMode::Mle, &mut rng).unwrap();
        let fitted = model.params().lengthscale;

        // Brute-force grid of the marginal likelihood over the same box.
        let mut best = (f64::INFINITY, 0.0f64);
        for i in 0..40 {
            for j in 0..40 {
                let ll = (1e-3f64).ln() + ((10f64).ln() - (1e-3f64).ln()) * i as f64 / 39.0;
                let ls = (1e-3f64).ln() + ((10f64).ln() - (1e-3f64).ln()) * j as f64 / 39.0;
                let params = GpParams {
                    lengthscale: ll.exp(),
                    signal_variance: ls.exp(),
                    noise_variance: 1e-6,
                };
                if let Some(v) = log_marginal_likelihood(&xs, &ys, &params) {
                    if -v < best.0 {
                        best = (-v, ll.exp());
                    }
                }
            }
        }
        let ratio = fitted / best.1;
        assert!(
            (1.0 / 3.0..=3.0).contains(&ratio),
            "fitted {fitted}, grid oracle {}",
            best.1
        );
    }

    #[test]
    fn variance_never_grows_with_more_data() {
        let mut rng = Stream::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(2..10);
            let xs: Vec<Point> = (0..n).map(|_| pt(&[rng.random()])).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fixed = HyperMode::Fixed(GpParamsFixed {
                lengthscale: rng.random_range(0.05..1.0),
                signal_variance: rng.random_range(0.2..2.0),
            });
            let small = gp_fit(&xs[..n - 1], &ys[..n - 1], 1e-4, fixed, &mut rng).unwrap();
            let big = gp_fit(&xs, &ys, 1e-4, fixed, &mut rng).unwrap();
            let test = pt(&[rng.random()]);
            let (_, v_small) = small.posterior(&test);
            let (_, v_big) = big.posterior(&test);
            assert!(v_big <= v_small + 1e-8, "{v_big} > {v_small}");
        }
    }

    #[test]
    fn mean_matches_direct_solve_oracle() {
        let mut rng = Stream::seed_from_u64(13);
        let xs: Vec<Point> = (0..12).map(|_| pt(&[rng.random(), rng.random()])).collect();
        let ys: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fixed = GpParamsFixed {
            lengthscale: 0.4,
            signal_variance: 1.0,
        };
        let model = gp_fit(&xs, &ys, 1e-4, HyperMode::Fixed(fixed), &mut rng).unwrap();
        for _ in 0..20 {
            let x = pt(&[rng.random(), rng.random()]);
            let (mean, _) = model.posterior(&x);
            let direct = posterior_mean_direct(&xs, &ys, &model.params(), model.jitter, &x);
            assert!((mean - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn ucb_selection() {
        // beta_t at t=10, delta=0.05: direct arithmetic.
        let oracle = 2.0 * (100.0 * std::f64::consts::PI.powi(2) / 0.3f64).ln();
        assert!((gp_ucb_beta(10, 0.05) - oracle).abs() < 1e-12);
        assert!((oracle - 16.20).abs() < 0.01);

        let mut rng = Stream::seed_from_u64(4);
        let xs = vec![pt(&[0.2]), pt(&[0.8])];
        let ys = vec![0.1, 0.9];
        let model = gp_fit(
            &xs,
            &ys,
            1e-6,
            HyperMode::Fixed(GpParamsFixed {
                lengthscale: 0.2,
                signal_variance: 1.0,
            }),
            &mut rng,
        )
        .unwrap();
        // Pool of one returns that point.
        let lone = vec![pt(&[0.5])];
        assert_eq!(gp_ucb_select(&model, 3, 0.05, &lone).unwrap(), &lone[0]);
        assert!(gp_ucb_select(&model, 3, 0.05, &[]).is_err());

        // Dense noiseless training: variance vanishes, so UCB selection
        // reduces to the posterior-mean argmax even at astronomical beta.
        let dense_x: Vec<Point> = (0..40).map(|i| pt(&[i as f64 / 39.0])).collect();
        let dense_y: Vec<f64> = dense_x
            .iter()
            .map(|p| -(p.coords()[0] - 0.7).abs())
            .collect();
        let dense = gp_fit(
            &dense_x,
            &dense_y,
            0.0,
            HyperMode::Fixed(GpParamsFixed {
                lengthscale: 0.5,
                signal_variance: 1.0,
            }),
            &mut rng,
        )
        .unwrap();
        let chosen = gp_ucb_select(&dense, 1_000_000, 0.05, &dense_x).unwrap();
        assert!((chosen.coords()[0] - 0.7).abs() < 0.05);
    }

    #[test]
    fn kernel_matrix_symmetric_psd() {
        let mut rng = Stream::seed_from_u64(6);
        let xs: Vec<Point> = (0..15).map(|_| pt(&[rng.random(), rng.random()])).collect();
        let params = GpParams {
            lengthscale: 0.3,
            signal_variance: 1.0,
            noise_variance: 0.0,
        };
        let k = kernel_matrix(&xs, &params);
        for i in 0..15 {
            for j in 0..15 {
                assert!((k[(i, j)] - k[(j, i)]).abs() < 1e-12);
            }
        }
        let (chol, _) = factorize(&xs, &params).unwrap();
        for d in chol.l_dirty().diagonal().iter() {
            assert!(*d > 0.0);
        }
    }
}
