//! Seeded random substreams.
//!
//! Every experiment has one master seed. Independent streams for channels,
//! noise, payload bits and shuffling are derived from it by fixed labels and
//! an index (slot number, epoch, ...), so any slot can be regenerated in
//! isolation and parallel workers never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Channel,
    Noise,
    Bits,
    Shuffle,
    Train,
    Validation,
    Detection,
}

impl Stream {
    fn label(self) -> u64 {
        match self {
            Stream::Channel => 0x6368_616e_6e65_6c00,
            Stream::Noise => 0x6e6f_6973_6500_0000,
            Stream::Bits => 0x6269_7473_0000_0000,
            Stream::Shuffle => 0x7368_7566_666c_6500,
            Stream::Train => 0x7472_6169_6e00_0000,
            Stream::Validation => 0x7661_6c69_6400_0000,
            Stream::Detection => 0x6465_7465_6374_0000,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from a master seed, a stream label and an index.
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ stream.label()) ^ splitmix64(index.wrapping_add(0x51)))
}

pub fn substream(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
