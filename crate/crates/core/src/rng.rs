//! Seed lineage.
//!
//! Every random stream in a run is derived from the master seed plus a domain
//! tag and entity indices, so results do not depend on how work is scheduled
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Streams used by the simulator. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    Placement = 3,
    Channel = 4,
    Noise = 5,
    LocalTrain = 6,
    ModelInit = 7,
    PredictorInit = 8,
    Audit = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from a master seed, a stream tag and up to three indices.
pub fn derive_seed(master: u64, stream: Stream, a: u64, b: u64, c: u64) -> u64 {
    let mut h = splitmix(master);
    for x in [stream as u64, a, b, c] {
        h = splitmix(h ^ x);
    }
    h
}

pub fn substream(master: u64, stream: Stream, a: u64, b: u64, c: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, stream, a, b, c))
}
