//! Seed-derived random streams.
//!
//! Every particle owns one ChaCha stream derived from the run seed, so draws
//! do not depend on evaluation order or thread count. Auxiliary streams
//! (minibatch selection, guide sampling) use stream ids above the particle
//! range.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream id reserved for minibatch index selection.
pub const MINIBATCH_STREAM: u64 = u64::MAX;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone)]
pub struct ParticleStreams {
    streams: Vec<ChaCha8Rng>,
}

impl ParticleStreams {
    pub fn new(seed: u64, particles: usize) -> Self {
        let streams = (0..particles as u64).map(|id| stream(seed, id)).collect();
        Self { streams }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn particle(&mut self, i: usize) -> &mut ChaCha8Rng {
        &mut self.streams[i]
    }

    /// Draws an L×d matrix of independent standard normals; row i comes from
    /// particle i's stream, coordinates in order.
    pub fn standard_normal(&mut self, dim: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.streams.len(), dim));
        for (mut row, rng) in out.rows_mut().into_iter().zip(self.streams.iter_mut()) {
            for x in row.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
        }
        out
    }
}
