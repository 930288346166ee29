//! Restart-based derivative-free maximizer used for score maximization and
//! per-region envelope bounds.
//!
//! A small evolution strategy runs from each start: Gaussian perturbations
//! scaled per axis, step growth on improvement, shrink otherwise. Candidates
//! failing the feasibility predicate are rejected (they still consume budget).
//! Near-ties on the objective fall through to a secondary key, which the
//! acquisition rule uses to prefer coverage (larger distance to the nearest
//! sample) along flat ridges of the score.
//!
//! Approximate maximization is acceptable everywhere this is used: a sloppy
//! argmax slows coverage but cannot invalidate certificates.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::Point;
use crate::rng::Stream;

/// Relative slack under which two objective values count as tied.
const TIE_EPS: f64 = 1e-9;

pub struct Maximizer<'a> {
    /// Objective to maximize.
    pub objective: &'a dyn Fn(&Point) -> f64,
    /// Feasibility predicate; infeasible candidates are rejected.
    pub feasible: &'a dyn Fn(&Point) -> bool,
    /// Secondary key maximized among near-ties of the objective.
    pub tie_key: &'a dyn Fn(&Point) -> f64,
    /// Axis-aligned search box, clipped to the unit cube by the caller.
    pub lower: &'a [f64],
    pub upper: &'a [f64],
}

fn better(candidate: (f64, f64), incumbent: (f64, f64)) -> bool {
    let eps = TIE_EPS * (1.0 + incumbent.0.abs());
    if candidate.0 > incumbent.0 + eps {
        return true;
    }
    if candidate.0 < incumbent.0 - eps {
        return false;
    }
    candidate.1 > incumbent.1
}

impl Maximizer<'_> {
    /// Runs the evolution strategy from each start, splitting `eval_budget`
    /// evenly, and returns the best feasible point seen. Starts must be
    /// feasible; returns `None` only when `starts` is empty.
    pub fn run(&self, starts: &[Point], eval_budget: usize, rng: &mut Stream) -> Option<(Point, f64)> {
        if starts.is_empty() {
            return None;
        }
        let per_start = (eval_budget / starts.len()).max(4);
        let mut global: Option<(Point, (f64, f64))> = None;
        for start in starts {
            let (pt, key) = self.run_single(start, per_start, rng);
            match &global {
                Some((_, gk)) if !better(key, *gk) => {}
                _ => global = Some((pt, key)),
            }
        }
        global.map(|(p, k)| (p, k.0))
    }

    fn run_single(&self, start: &Point, budget: usize, rng: &mut Stream) -> (Point, (f64, f64)) {
        let d = start.dimension();
        let mut x = start.clone();
        let mut key = ((self.objective)(&x), (self.tie_key)(&x));
        let mut evals = 1usize;
        let mut step = 0.25f64;
        let batch = 4usize;
        while evals < budget && step > 1e-6 {
            let mut improved = false;
            let mut best_batch: Option<(Point, (f64, f64))> = None;
            for _ in 0..batch {
                if evals >= budget {
                    break;
                }
                let coords: Vec<f64> = x
                    .coords()
                    .iter()
                    .zip(self.lower.iter().zip(self.upper))
                    .map(|(c, (lo, hi))| {
                        let scale = (hi - lo).max(1e-12);
                        let n: f64 = rng.sample(StandardNormal);
                        (c + step * scale * n).clamp(*lo, *hi)
                    })
                    .collect();
                let cand = Point::from_unit_clamped(coords);
                evals += 1;
                if !(self.feasible)(&cand) {
                    continue;
                }
                let ck = ((self.objective)(&cand), (self.tie_key)(&cand));
                match &best_batch {
                    Some((_, bk)) if !better(ck, *bk) => {}
                    _ => best_batch = Some((cand, ck)),
                }
            }
            if let Some((cand, ck)) = best_batch {
                if better(ck, key) {
                    x = cand;
                    key = ck;
                    improved = true;
                }
            }
            step *= if improved { 1.6 } else { 0.5 };
            // A few fresh kicks keep long flat stretches covered in high d.
            if !improved && step <= 1e-6 && evals + d < budget {
                step = 0.1;
            }
        }
        (x, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn finds_smooth_maximum_in_box() {
        let f = |p: &Point| {
            let c = p.coords();
            -(c[0] - 0.6).powi(2) - (c[1] - 0.2).powi(2)
        };
        let always = |_: &Point| true;
        let zero = |_: &Point| 0.0;
        let m = Maximizer {
            objective: &f,
            feasible: &always,
            tie_key: &zero,
            lower: &[0.0, 0.0],
            upper: &[1.0, 1.0],
        };
        let starts: Vec<Point> = (0..10)
            .map(|i| Point::new(vec![i as f64 / 10.0, 1.0 - i as f64 / 10.0]).unwrap())
            .collect();
        let mut rng = Stream::seed_from_u64(2);
        let (best, val) = m.run(&starts, 2000, &mut rng).unwrap();
        assert!(val > -1e-3, "val={val}");
        assert!((best.coords()[0] - 0.6).abs() < 0.05);
        assert!((best.coords()[1] - 0.2).abs() < 0.05);
    }

    #[test]
    fn respects_feasibility() {
        let f = |p: &Point| p.coords()[0];
        let feas = |p: &Point| p.coords()[0] <= 0.4;
        let zero = |_: &Point| 0.0;
        let m = Maximizer {
            objective: &f,
            feasible: &feas,
            tie_key: &zero,
            lower: &[0.0],
            upper: &[1.0],
        };
        let starts = vec![Point::new(vec![0.1]).unwrap()];
        let mut rng = Stream::seed_from_u64(5);
        let (best, _) = m.run(&starts, 500, &mut rng).unwrap();
        assert!(feas(&best));
        assert!(best.coords()[0] > 0.3);
    }

    #[test]
    fn flat_objective_maximizes_tie_key() {
        let f = |_: &Point| 1.0;
        let always = |_: &Point| true;
        let tie = |p: &Point| p.coords()[0];
        let m = Maximizer {
            objective: &f,
            feasible: &always,
            tie_key: &tie,
            lower: &[0.0],
            upper: &[1.0],
        };
        let starts = vec![Point::new(vec![0.2]).unwrap()];
        let mut rng = Stream::seed_from_u64(1);
        let (best, _) = m.run(&starts, 800, &mut rng).unwrap();
        assert!(best.coords()[0] > 0.9, "tie key ignored: {best:?}");
    }

    #[test]
    fn deterministic_under_seed() {
        let f = |p: &Point| -(p.coords()[0] - 0.3).abs();
        let always = |_: &Point| true;
        let zero = |_: &Point| 0.0;
        let m = Maximizer {
            objective: &f,
            feasible: &always,
            tie_key: &zero,
            lower: &[0.0],
            upper: &[1.0],
        };
        let starts = vec![Point::new(vec![0.9]).unwrap()];
        let a = m
            .run(&starts, 300, &mut Stream::seed_from_u64(7))
            .unwrap()
            .0;
        let b = m
            .run(&starts, 300, &mut Stream::seed_from_u64(7))
            .unwrap()
            .0;
        assert_eq!(a, b);
    }
}
