//! Seeded epoch-shuffled draws for unpaired training.
//!
//! The permutation for epoch `e` of stream `s` is a pure function of
//! `(seed, s, e)`, so a sampler's entire state is a pair of
//! `(epoch, position)` cursors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageSlice, SliceEntry};
use crate::error::{Error, Result};

pub const STREAM_A: u64 = 0xA;
pub const STREAM_B: u64 = 0xB;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, epoch: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ epoch)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCursor {
    pub epoch: u64,
    pub pos: usize,
}

/// Endless index stream over `0..len`, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct EpochShuffler {
    len: usize,
    seed: u64,
    stream: u64,
    cursor: StreamCursor,
    perm: Vec<usize>,
}

impl EpochShuffler {
    pub fn new(len: usize, seed: u64, stream: u64) -> Self {
        Self::with_cursor(len, seed, stream, StreamCursor::default())
    }

    pub fn with_cursor(len: usize, seed: u64, stream: u64, cursor: StreamCursor) -> Self {
        let perm = Self::permutation(len, seed, stream, cursor.epoch);
        Self {
            len,
            seed,
            stream,
            cursor,
            perm,
        }
    }

    pub fn permutation(len: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, epoch));
        perm.shuffle(&mut rng);
        perm
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cursor(&self) -> StreamCursor {
        self.cursor
    }

    /// Order of the epoch the cursor is in.
    pub fn current_permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Next index; rolls into a freshly shuffled epoch when exhausted.
    pub fn next_index(&mut self) -> usize {
        assert!(self.len > 0, "empty stream");
        if self.cursor.pos >= self.len {
            self.cursor.epoch += 1;
            self.cursor.pos = 0;
            self.perm = Self::permutation(self.len, self.seed, self.stream, self.cursor.epoch);
        }
        let i = self.perm[self.cursor.pos];
        self.cursor.pos += 1;
        i
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub a: StreamCursor,
    pub b: StreamCursor,
}

impl SamplerState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            a: StreamCursor::default(),
            b: StreamCursor::default(),
        }
    }
}

/// Two independent shuffled streams, one per modality.
#[derive(Clone, Debug)]
pub struct UnpairedSampler {
    seed: u64,
    batch_size: usize,
    a: EpochShuffler,
    b: EpochShuffler,
}

impl UnpairedSampler {
    pub fn new(len_a: usize, len_b: usize, batch_size: usize, state: &SamplerState) -> Result<Self> {
        if len_a == 0 || len_b == 0 {
            return Err(Error::Data("unpaired sampling needs two nonempty datasets".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if batch_size > len_a || batch_size > len_b {
            return Err(Error::InvalidInput(format!(
                "batch_size {batch_size} exceeds dataset size (A: {len_a}, B: {len_b})"
            )));
        }
        Ok(Self {
            seed: state.seed,
            batch_size,
            a: EpochShuffler::with_cursor(len_a, state.seed, STREAM_A, state.a),
            b: EpochShuffler::with_cursor(len_b, state.seed, STREAM_B, state.b),
        })
    }

    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        let a = (0..self.batch_size).map(|_| self.a.next_index()).collect();
        let b = (0..self.batch_size).map(|_| self.b.next_index()).collect();
        (a, b)
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.seed,
            a: self.a.cursor(),
            b: self.b.cursor(),
        }
    }
}

/// Draws one unpaired batch straight from two manifests. Only liver-visible
/// A entries are eligible (their masks feed the segmentation loss); B
/// entries are eligible unless their mask shows no liver.
pub fn sample_unpaired_batch(
    manifest_a: &DatasetManifest,
    manifest_b: &DatasetManifest,
    batch_size: usize,
    state: &SamplerState,
) -> Result<(Vec<ImageSlice>, Vec<ImageSlice>, SamplerState)> {
    let pool_a: Vec<&SliceEntry> = manifest_a.liver_visible().collect();
    let pool_b: Vec<&SliceEntry> = manifest_b.entries.iter().filter(|e| e.is_trainable()).collect();
    let mut sampler = UnpairedSampler::new(pool_a.len(), pool_b.len(), batch_size, state)?;
    let (ia, ib) = sampler.next_batch();
    let batch_a = ia
        .into_iter()
        .map(|i| manifest_a.load_slice(pool_a[i]))
        .collect::<Result<Vec<_>>>()?;
    let batch_b = ib
        .into_iter()
        .map(|i| manifest_b.load_slice(pool_b[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((batch_a, batch_b, sampler.state()))
}
