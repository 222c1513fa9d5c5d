//! Helpers shared by integration test targets.
#![allow(dead_code)]

pub mod tql_oracle;
pub mod training_query;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorlake::storage::{MemoryProvider, SharedProvider};
use tensorlake::DynArray;

pub fn mem() -> SharedProvider {
    Arc::new(MemoryProvider::new())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, seed: u64) -> DynArray {
    let mut r = rng(seed);
    DynArray::from_vec(&[h, w, 3], (0..h * w * 3).map(|_| r.gen()).collect::<Vec<u8>>())
}

/// Image whose pixels are a cheap function of position, so it compresses well.
pub fn smooth_image(h: usize, w: usize, seed: u64) -> DynArray {
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(((x / 8 + y / 8 + c) as u64 + seed) as u8);
            }
        }
    }
    DynArray::from_vec(&[h, w, 3], data)
}
