//! Named seed streams. A single experiment seed fans out into independent
//! sub-seeds keyed by stage name (and optional indices), so perturbing one
//! stage never shifts the random numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A seed that can be split into named children.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(seed)
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn derive(self, name: &str) -> SeedStream {
        SeedStream(splitmix64(self.0 ^ splitmix64(fnv1a(name.as_bytes()))))
    }

    pub fn index(self, i: u64) -> SeedStream {
        SeedStream(splitmix64(self.0.wrapping_add(splitmix64(i ^ 0xA5A5_5A5A_0F0F_F0F0))))
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}
