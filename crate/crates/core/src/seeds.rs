//! Root-seed splitting.
//!
//! Every random draw in a run comes from `derive(root, stream, index)`,
//! where `stream` names the consumer and `index` distinguishes draws within
//! it (signal number, outer step, ...). The mix is two rounds of SplitMix64,
//! so derived seeds are stable across platforms and releases.

/// Model initialization.
pub const INIT: u64 = 1;
/// Synthetic corpus generation.
pub const SYNTH: u64 = 2;
/// Meta-batch sampling.
pub const BATCH: u64 = 3;
/// Random context scorer.
pub const SCORER: u64 = 4;
/// Fourier feature matrices.
pub const FOURIER: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ stream.rotate_left(32)) ^ index)
}
