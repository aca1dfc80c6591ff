//! Screening-mammography classification pipeline: manifest ingest, image
//! preprocessing, k-fold training of convolutional classifiers, evaluation,
//! and comparison reports.

pub mod config;
pub mod evaluate;
pub mod image;
pub mod manifest;
pub mod preprocess;
pub mod report;
pub mod synthetic;
pub mod training;

pub use mammo_nn as nn;

/// Combines two seeds into one well-mixed 64-bit seed (SplitMix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
