//! Counter-keyed random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from
//! `(seed, purpose, a, b)`, e.g. `(seed, Client, round, client_index)`. A
//! stream depends only on its key, so results do not change with the order
//! or thread on which clients execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ModelInit = 1,
    CorpusShared = 2,
    CorpusClient = 3,
    HoldoutSplit = 4,
    ClientSampling = 5,
    ClientTraining = 6,
    Quantization = 7,
    TreeNoise = 8,
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_keyed() {
        let draw = |r: &mut StreamRng| (0..4).map(|_| r.random::<u64>()).collect::<Vec<_>>();
        let a = draw(&mut stream(7, Purpose::ClientTraining, 3, 11));
        assert_eq!(a, draw(&mut stream(7, Purpose::ClientTraining, 3, 11)));
        assert_ne!(a, draw(&mut stream(7, Purpose::ClientTraining, 3, 12)));
        assert_ne!(a, draw(&mut stream(7, Purpose::Quantization, 3, 11)));
        assert_ne!(a, draw(&mut stream(8, Purpose::ClientTraining, 3, 11)));
    }
}
