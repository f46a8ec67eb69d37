//! Per-replication seed derivation.
//!
//! Every random inspection order is drawn from its own generator, seeded by
//! mixing a master seed, a stream tag and the replication index. Results are
//! therefore independent of execution order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags separating the random draws used by different stages of a run.
pub mod stream {
    /// Calibration ensemble under the least-favorable H count.
    pub const CALIBRATION_H: u64 = 0x01;
    /// Calibration ensemble under the least-favorable K count.
    pub const CALIBRATION_K: u64 = 0x02;
    /// Power ensemble for the minimum-sample-size search.
    pub const POWER: u64 = 0x03;
    /// Replay over random orderings of a fixed population.
    pub const REPLAY: u64 = 0x05;
    /// A single inspection order for the `run` command.
    pub const ORDER: u64 = 0x06;

    /// Operating-characteristic evaluation at deviation count `m`.
    pub fn oc(m: u32) -> u64 {
        0x04 << 32 | u64::from(m)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replication `index` of `stream` under `master`.
pub fn replication_seed(master: u64, stream: u64, index: u64) -> u64 {
    let z = splitmix64(master);
    let z = splitmix64(z ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(z ^ index)
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
