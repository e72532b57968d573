#![allow(dead_code)]

use annealdbn::rbm::RbmParams;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RBMs with `1..=max_n` visible and `1..=max_m` hidden units and every
/// parameter in `[-spread, spread]`.
pub fn rbm(max_n: usize, max_m: usize, spread: f64) -> impl Strategy<Value = RbmParams> {
    (1..=max_n, 1..=max_m).prop_flat_map(move |(n, m)| rbm_of_size(n, m, spread))
}

pub fn rbm_of_size(n: usize, m: usize, spread: f64) -> impl Strategy<Value = RbmParams> {
    (
        prop::collection::vec(-spread..=spread, n * m),
        prop::collection::vec(-spread..=spread, n),
        prop::collection::vec(-spread..=spread, m),
    )
        .prop_map(move |(w, b, c)| {
            RbmParams::new(
                Array2::from_shape_vec((n, m), w).unwrap(),
                Array1::from(b),
                Array1::from(c),
            )
            .unwrap()
        })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// All binary vectors of length `n`, bit `k` of the index giving entry `k`.
pub fn binary_states(n: usize) -> impl Iterator<Item = Array1<f64>> {
    (0..1usize << n).map(move |s| Array1::from_shape_fn(n, |k| f64::from(((s >> k) & 1) as u8)))
}
