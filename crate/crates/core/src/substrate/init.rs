use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Independent generator for a named purpose (init, data order, ...).
    pub fn stream(self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }
}

/// Deterministic parameter initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub const STREAM: u64 = 1;

    pub fn new(seed: RngSeed) -> Self {
        Self {
            rng: seed.stream(Self::STREAM),
        }
    }

    /// Uniform with standard deviation `1/√fan_in` (bound `√(3/fan_in)`),
    /// with `fan_in = rows`.
    pub fn linear<T: Real>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        let bound = (3.0 / rows.max(1) as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| {
            T::from_f64_lossy(self.rng.random_range(-bound..bound))
        })
    }

    pub fn normal<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(dist.sample(&mut self.rng)))
    }
}
