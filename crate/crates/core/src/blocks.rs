//! Message/codeword blocks, interleaver permutations and the seeded random
//! source shared by every simulator in the crate.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// A binary message block `u = (u_1, ..., u_K)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitBlock {
    bits: Vec<u8>,
}

impl BitBlock {
    /// Builds a block, rejecting anything other than 0/1 entries.
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Parse(format!("bit value {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        Self {
            bits: bits.into_iter().map(u8::from).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.bits
    }

    /// BPSK mapping 0 -> -1, 1 -> +1.
    pub fn to_bipolar(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect()
    }

    /// Bitwise XOR of two equal-length blocks.
    pub fn xor(&self, other: &BitBlock) -> Result<BitBlock> {
        check_len(self.len(), other.len())?;
        Ok(BitBlock {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a ^ b).collect(),
        })
    }

    /// Number of positions where the blocks differ.
    pub fn hamming(&self, other: &BitBlock) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count()
    }
}

/// A real-valued codeword or received sequence. Multi-stream blocks are
/// stored position-major: `values[pos * streams + stream]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealBlock {
    values: Vec<f64>,
    streams: usize,
}

impl RealBlock {
    pub fn new(values: Vec<f64>, streams: usize) -> Result<Self> {
        if streams == 0 || !values.len().is_multiple_of(streams) {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot be split into {streams} streams",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("real block contains a non-finite value".into()));
        }
        Ok(Self { values, streams })
    }

    /// Single-stream block.
    pub fn single(values: Vec<f64>) -> Result<Self> {
        Self::new(values, 1)
    }

    /// Interleaves equal-length streams position by position.
    pub fn from_streams(streams: &[Vec<f64>]) -> Result<Self> {
        let n = streams.first().map_or(0, Vec::len);
        for s in streams {
            check_len(n, s.len())?;
        }
        let mut values = Vec::with_capacity(n * streams.len());
        for pos in 0..n {
            values.extend(streams.iter().map(|s| s[pos]));
        }
        Self::new(values, streams.len())
    }

    pub(crate) fn from_raw(values: Vec<f64>, streams: usize) -> Self {
        debug_assert!(streams > 0 && values.len().is_multiple_of(streams));
        Self { values, streams }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    /// Number of positions (block length per stream).
    pub fn positions(&self) -> usize {
        self.values.len() / self.streams
    }

    /// Total number of symbols across all streams.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copies out one stream.
    pub fn stream(&self, s: usize) -> Vec<f64> {
        self.values.iter().skip(s).step_by(self.streams).copied().collect()
    }
}

/// Block types whose position axis can be permuted.
pub trait Block: Sized {
    fn positions(&self) -> usize;

    /// Gather along positions: `out[i] = self[index[i]]` for every stream.
    fn gather_positions(&self, index: &[usize]) -> Self;
}

impl Block for BitBlock {
    fn positions(&self) -> usize {
        self.len()
    }

    fn gather_positions(&self, index: &[usize]) -> Self {
        BitBlock {
            bits: index.iter().map(|&i| self.bits[i]).collect(),
        }
    }
}

impl Block for RealBlock {
    fn positions(&self) -> usize {
        RealBlock::positions(self)
    }

    fn gather_positions(&self, index: &[usize]) -> Self {
        RealBlock {
            values: gather_rows(&self.values, self.streams, index),
            streams: self.streams,
        }
    }
}

impl Block for Vec<f64> {
    fn positions(&self) -> usize {
        self.len()
    }

    fn gather_positions(&self, index: &[usize]) -> Self {
        index.iter().map(|&i| self[i]).collect()
    }
}

/// Row gather on a position-major buffer with `width` entries per row.
pub(crate) fn gather_rows<T: Copy>(data: &[T], width: usize, index: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(index.len() * width);
    for &i in index {
        out.extend_from_slice(&data[i * width..(i + 1) * width]);
    }
    out
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// A pseudo-random interleaver `pi` together with its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
    seed: u64,
}

impl Permutation {
    /// Wraps an explicit forward array; fails unless it is a bijection on `[0, K)`.
    pub fn from_forward(forward: Vec<usize>, seed: u64) -> Result<Self> {
        let k = forward.len();
        let mut inverse = vec![usize::MAX; k];
        for (i, &f) in forward.iter().enumerate() {
            if f >= k || inverse[f] != usize::MAX {
                return Err(Error::Parse(format!("index array is not a permutation of 0..{k}")));
            }
            inverse[f] = i;
        }
        Ok(Self { forward, inverse, seed })
    }

    pub fn identity(k: usize) -> Self {
        let forward: Vec<usize> = (0..k).collect();
        Self {
            inverse: forward.clone(),
            forward,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &f)| i == f)
    }
}

/// Seeded Fisher-Yates shuffle of `0..k`.
pub fn make_permutation(k: usize, seed: u64) -> Permutation {
    let mut rng = Rng::derive(seed, 0x5045_524d); // "PERM"
    let mut forward: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        forward.swap(i, j);
    }
    let mut inverse = vec![0; k];
    for (i, &f) in forward.iter().enumerate() {
        inverse[f] = i;
    }
    Permutation { forward, inverse, seed }
}

/// `out[i] = x[forward[i]]`, applied to every stream alike.
pub fn interleave<B: Block>(x: &B, p: &Permutation) -> Result<B> {
    check_len(p.len(), x.positions())?;
    Ok(x.gather_positions(&p.forward))
}

/// Inverse of [`interleave`]: `out[i] = x[inverse[i]]`.
pub fn deinterleave<B: Block>(x: &B, p: &Permutation) -> Result<B> {
    check_len(p.len(), x.positions())?;
    Ok(x.gather_positions(&p.inverse))
}

/// Interleaves a plain sequence. Panics when the lengths differ.
pub fn interleave_slice<T: Copy>(x: &[T], p: &Permutation) -> Vec<T> {
    assert_eq!(x.len(), p.len(), "sequence and permutation lengths differ");
    p.forward.iter().map(|&i| x[i]).collect()
}

/// Counter-based deterministic random source (ChaCha12).
///
/// Workers never share an instance; they call [`Rng::child`] to split off an
/// independent stream keyed by a stream id.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
    spare_normal: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Deterministic generator for `(seed, stream)`; distinct streams are independent.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(stream)))
    }

    /// Splits off a child generator without consuming from `self`.
    pub fn child(&self, stream: u64) -> Self {
        Self::derive(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.gen_range(0..n)
    }

    pub fn bit(&mut self) -> u8 {
        (self.inner.next_u32() & 1) as u8
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via the Box-Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the logarithm finite.
        let r = (-2.0 * (1.0 - self.uniform()).ln()).sqrt();
        let theta = std::f64::consts::TAU * self.uniform();
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// I.i.d. uniform message bits.
pub fn random_bits(rng: &mut Rng, k: usize) -> BitBlock {
    BitBlock {
        bits: (0..k).map(|_| rng.bit()).collect(),
    }
}
