//! Seeded generators. Every random draw in the crate comes from a
//! [`Pcg64`] (PCG XSL-RR 128/64, multiplier 0x2360ed051fc65da44385df649fccf645)
//! built here, with a distinct stream per use so that e.g. changing the
//! shuffle order never perturbs data generation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use crate::autograd::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Split = 2,
    ModelInit = 3,
    AdapterInit = 4,
    Shuffle = 5,
    Probe = 6,
}

/// Generator for `(seed, stream)`. The stream selects the PCG increment.
pub fn rng(seed: u64, stream: Stream) -> Pcg64 {
    let state = 0xcafe_f00d_d15e_a5e5_u128 ^ ((seed as u128) << 64 | seed as u128);
    Pcg64::new(state, stream as u128 * 2 + 1)
}

pub fn normal_tensor<T: Real>(rng: &mut Pcg64, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub fn uniform_tensor<T: Real>(rng: &mut Pcg64, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Pcg64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
