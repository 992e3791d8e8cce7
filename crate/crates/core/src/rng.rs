//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream addressed by
//! `(seed, replica, purpose)`. Field values and edge uniforms therefore never
//! share a stream, and any replica can be regenerated on its own.
//! Edge uniforms are read at word position `2 * edge`, so a lazily explored
//! cluster sees exactly the values a fully materialized configuration sees.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Field = 1,
    Edges = 2,
    Loops = 3,
    Interlacement = 4,
    Walks = 5,
    Obstacle = 6,
    Aux = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(seed: u64, replica: u64, purpose: Purpose) -> Self {
        Self { seed, replica, purpose }
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        Self { purpose, ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replica.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.purpose as u64);
        rng
    }
}

/// Maps a raw 64-bit word to `[0, 1)` with 53 bits of precision.
#[inline]
pub fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform `[0, 1)` draw from any generator, using the same mapping as the edge streams.
#[inline]
pub fn uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    unit_f64(rng.next_u64())
}

/// Source of the persistent per-edge uniforms behind a bond configuration.
pub trait EdgeUniformSource {
    fn uniform(&mut self, edge: usize) -> f64;
}

/// Random-access edge uniforms; nothing is stored.
pub struct LazyEdgeUniforms {
    rng: ChaCha8Rng,
}

impl LazyEdgeUniforms {
    pub fn new(key: StreamKey) -> Self {
        Self { rng: key.rng() }
    }
}

impl EdgeUniformSource for LazyEdgeUniforms {
    fn uniform(&mut self, edge: usize) -> f64 {
        self.rng.set_word_pos(2 * edge as u128);
        unit_f64(self.rng.next_u64())
    }
}

/// All edge uniforms of a stream, generated in order.
pub fn materialize_edge_uniforms(key: StreamKey, edge_count: usize) -> Vec<f64> {
    let mut rng = key.rng();
    (0..edge_count).map(|_| unit_f64(rng.next_u64())).collect()
}

impl EdgeUniformSource for &[f64] {
    fn uniform(&mut self, edge: usize) -> f64 {
        self[edge]
    }
}

impl EdgeUniformSource for Vec<f64> {
    fn uniform(&mut self, edge: usize) -> f64 {
        self[edge]
    }
}
