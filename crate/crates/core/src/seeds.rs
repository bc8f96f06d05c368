//! Seed streams. Every episode seed is derived from the run seed, a stream
//! id and a counter, so rollouts can be replayed or split across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type EpisodeRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(run_seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(run_seed) ^ stream) ^ counter)
}

pub fn rng_from_seed(seed: u64) -> EpisodeRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named streams, so that e.g. baselines and the main method draw the same
/// queries and execution seeds.
pub mod stream {
    pub const QUERIES: u64 = 1;
    pub const EXECUTION: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const SEARCH: u64 = 6;
    pub const EVAL_EXECUTION: u64 = 7;
}

/// Monotone counter over one stream.
#[derive(Debug, Clone)]
pub struct SeedStream {
    run_seed: u64,
    stream: u64,
    counter: u64,
}

impl SeedStream {
    pub fn new(run_seed: u64, stream: u64) -> Self {
        Self {
            run_seed,
            stream,
            counter: 0,
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        let s = derive_seed(self.run_seed, self.stream, self.counter);
        self.counter += 1;
        s
    }
}
