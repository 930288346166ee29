//! Low-discrepancy initialization points.
//!
//! Thin wrapper over the Owen-scrambled Sobol sequence from `sobol_burley`.
//! The scramble seed makes distinct seeds produce distinct (still
//! low-discrepancy) point sets while keeping every call fully deterministic.

use crate::error::{CgpError, Result};
use crate::model::Point;

/// Largest supported dimension of the underlying direction-number tables.
pub const MAX_DIMENSION: usize = 256;

/// First `count` points of the seeded Sobol sequence in `[0,1]^dimension`.
///
/// Identical `(dimension, count, seed)` always yields identical output.
pub fn sobol_init(dimension: usize, count: usize, seed: u64) -> Result<Vec<Point>> {
    if dimension == 0 || dimension > MAX_DIMENSION {
        return Err(CgpError::Config(format!(
            "sobol dimension must be in 1..={MAX_DIMENSION}, got {dimension}"
        )));
    }
    if count == 0 {
        return Err(CgpError::Config("sobol count must be >= 1".into()));
    }
    let mut stream = SobolStream::new(dimension, seed);
    Ok((0..count).map(|_| stream.next_point()).collect())
}

/// Cursor over the seeded Sobol sequence; used where a sequence must continue
/// across calls (trust-region centers and certified restarts).
#[derive(Debug, Clone)]
pub struct SobolStream {
    dimension: usize,
    seed: u32,
    index: u32,
}

impl SobolStream {
    pub fn new(dimension: usize, seed: u64) -> Self {
        // Fold the 64-bit root seed into the 32-bit scramble seed.
        let seed = (seed ^ (seed >> 32)) as u32;
        Self { dimension, seed, index: 0 }
    }

    pub fn next_point(&mut self) -> Point {
        let coords = (0..self.dimension)
            .map(|d| f64::from(sobol_burley::sample(self.index, d as u32, self.seed)))
            .collect();
        self.index += 1;
        Point::from_unit_clamped(coords)
    }
}
