//! Reproducible random streams.
//!
//! Every repetition of an experiment owns one ChaCha stream keyed by
//! `(master_seed, cell, rep)`. Independent consumers inside a repetition
//! (for example the two servers of the distributed test) use separate lanes,
//! which map to distinct ChaCha stream ids under the same key.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Concrete generator used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Domain tags keep seeds for different purposes apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Replication = 0x5245_504c,
    Calibration = 0x4341_4c49,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a master seed and a path of indices.
///
/// Adding cells or reps never changes the seeds of existing ones.
pub fn derive_seed(master_seed: u64, domain: Domain, path: &[u64]) -> u64 {
    let mut h = splitmix64(master_seed ^ domain as u64);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

/// Opens lane `lane` of the stream keyed by `seed`.
pub fn stream(seed: u64, lane: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(lane);
    rng
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Open01)
}

/// Exponential draw with the given rate, by inverse transform.
pub fn exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    -(1.0 - open_unit(rng)).ln() / rate
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_depend_on_every_component() {
        let a = derive_seed(7, Domain::Replication, &[0, 0]);
        assert_ne!(a, derive_seed(8, Domain::Replication, &[0, 0]));
        assert_ne!(a, derive_seed(7, Domain::Calibration, &[0, 0]));
        assert_ne!(a, derive_seed(7, Domain::Replication, &[0, 1]));
        assert_ne!(a, derive_seed(7, Domain::Replication, &[1, 0]));
        assert_eq!(a, derive_seed(7, Domain::Replication, &[0, 0]));
    }

    #[test]
    fn lanes_are_distinct() {
        let mut a = stream(11, 0);
        let mut b = stream(11, 1);
        let xa: Vec<u64> = (0..4).map(|_| a.random()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.random()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn exponential_mean() {
        let mut rng = stream(3, 0);
        let n = 200_000;
        let mean = (0..n).map(|_| exponential(2.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }
}
