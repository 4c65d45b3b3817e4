//! Monte-Carlo BER/BLER measurement, probes on trained models and the KSG
//! mutual-information estimator.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::blocks::{make_permutation, random_bits, BitBlock, Permutation, RealBlock, Rng};
use crate::channels::ChannelSpec;
use crate::classic::{uncoded_decode, uncoded_encode, Repetition, TurboCode};
use crate::error::{Error, Result};
use crate::nn::{NormMode, Real};
use crate::turboae::TurboAe;

/// Anything that maps message blocks to channel symbols and back.
pub trait Coder: Sync {
    fn id(&self) -> String;
    fn block_len(&self) -> usize;
    fn encode_batch(&self, msgs: &[BitBlock]) -> Result<Vec<RealBlock>>;
    fn decode_batch(&self, y: &[RealBlock], channel: &ChannelSpec) -> Result<Vec<BitBlock>>;
}

impl Coder for TurboCode {
    fn id(&self) -> String {
        self.name().to_string()
    }

    fn block_len(&self) -> usize {
        TurboCode::block_len(self)
    }

    fn encode_batch(&self, msgs: &[BitBlock]) -> Result<Vec<RealBlock>> {
        msgs.iter().map(|u| self.encode(u)).collect()
    }

    fn decode_batch(&self, y: &[RealBlock], channel: &ChannelSpec) -> Result<Vec<BitBlock>> {
        y.iter().map(|b| self.decode(b, channel)).collect()
    }
}

impl Coder for Repetition {
    fn id(&self) -> String {
        format!("rep{}", self.r)
    }

    fn block_len(&self) -> usize {
        self.k
    }

    fn encode_batch(&self, msgs: &[BitBlock]) -> Result<Vec<RealBlock>> {
        msgs.iter().map(|u| self.encode(u)).collect()
    }

    fn decode_batch(&self, y: &[RealBlock], channel: &ChannelSpec) -> Result<Vec<BitBlock>> {
        y.iter().map(|b| self.decode(b, channel)).collect()
    }
}

/// BPSK without coding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Uncoded {
    pub k: usize,
}

impl Coder for Uncoded {
    fn id(&self) -> String {
        "uncoded".to_string()
    }

    fn block_len(&self) -> usize {
        self.k
    }

    fn encode_batch(&self, msgs: &[BitBlock]) -> Result<Vec<RealBlock>> {
        Ok(msgs.iter().map(uncoded_encode).collect())
    }

    fn decode_batch(&self, y: &[RealBlock], _: &ChannelSpec) -> Result<Vec<BitBlock>> {
        Ok(y.iter().map(uncoded_decode).collect())
    }
}

/// Uses frozen normalization statistics when the model has them.
impl<T: Real> Coder for TurboAe<T> {
    fn id(&self) -> String {
        format!("turboae-{}", self.power_mode().name())
    }

    fn block_len(&self) -> usize {
        TurboAe::block_len(self)
    }

    fn encode_batch(&self, msgs: &[BitBlock]) -> Result<Vec<RealBlock>> {
        self.encode(msgs, &self.eval_norm_mode())
    }

    fn decode_batch(&self, y: &[RealBlock], _: &ChannelSpec) -> Result<Vec<BitBlock>> {
        self.decode_bits(y)
    }
}

/// Renames a coder in the records it produces.
pub struct Named<'a> {
    pub name: String,
    pub inner: &'a dyn Coder,
}

impl Coder for Named<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn block_len(&self) -> usize {
        self.inner.block_len()
    }

    fn encode_batch(&self, msgs: &[BitBlock]) -> Result<Vec<RealBlock>> {
        self.inner.encode_batch(msgs)
    }

    fn decode_batch(&self, y: &[RealBlock], channel: &ChannelSpec) -> Result<Vec<BitBlock>> {
        self.inner.decode_batch(y, channel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BerRecord {
    pub coder: String,
    /// Channel family in the mini-grammar, without the SNR.
    pub channel: String,
    /// SNR in dB, or the flip/erasure probability for BSC/BEC.
    pub snr_db: f64,
    pub bits: u64,
    pub bit_errors: u64,
    pub blocks: u64,
    pub block_errors: u64,
    pub ber: f64,
    pub bler: f64,
    pub seed: u64,
}

impl BerRecord {
    pub fn from_counts(
        coder: String,
        channel: String,
        snr_db: f64,
        (bits, bit_errors, blocks, block_errors): (u64, u64, u64, u64),
        seed: u64,
    ) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            coder,
            channel,
            snr_db,
            bits,
            bit_errors,
            blocks,
            block_errors,
            ber: ratio(bit_errors, bits),
            bler: ratio(block_errors, blocks),
            seed,
        }
    }
}

/// When to stop simulating one point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopRule {
    pub min_errors: u64,
    pub max_bits: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            min_errors: 100,
            max_bits: 100_000_000,
        }
    }
}

/// Chunks simulated per wave. Fixed so that results do not depend on the
/// number of worker threads.
const WAVE: u64 = 8;

fn chunk_blocks(k: usize) -> u64 {
    (10_000 / k.max(1)).clamp(1, 256) as u64
}

fn simulate_chunk(coder: &dyn Coder, channel: &ChannelSpec, blocks: u64, mut rng: Rng) -> Result<(u64, u64)> {
    let k = coder.block_len();
    let msgs: Vec<BitBlock> = (0..blocks).map(|_| random_bits(&mut rng, k)).collect();
    let x = coder.encode_batch(&msgs)?;
    let y = x.iter().map(|c| channel.apply(c, &mut rng)).collect::<Result<Vec<_>>>()?;
    let est = coder.decode_batch(&y, channel)?;
    let mut bit_errors = 0;
    let mut block_errors = 0;
    for (u, v) in msgs.iter().zip(&est) {
        let e = u.hamming(v) as u64;
        bit_errors += e;
        block_errors += (e > 0) as u64;
    }
    Ok((bit_errors, block_errors))
}

/// Simulates one channel point until the stop rule fires.
pub fn measure_point(coder: &dyn Coder, channel: &ChannelSpec, stop: StopRule, seed: u64, point: u64) -> Result<BerRecord> {
    let k = coder.block_len() as u64;
    let per_chunk = chunk_blocks(coder.block_len());
    let (mut bits, mut bit_errors, mut blocks, mut block_errors) = (0u64, 0u64, 0u64, 0u64);
    let mut next_chunk = 0u64;
    while bit_errors < stop.min_errors && bits < stop.max_bits {
        let remaining_blocks = (stop.max_bits - bits).div_ceil(k);
        let chunks: Vec<(u64, u64)> = (0..WAVE)
            .map(|i| {
                let start = i * per_chunk;
                (next_chunk + i, per_chunk.min(remaining_blocks.saturating_sub(start)))
            })
            .filter(|&(_, n)| n > 0)
            .collect();
        next_chunk += WAVE;
        let results = chunks
            .par_iter()
            .map(|&(idx, n)| {
                let rng = Rng::derive(seed, (point << 40) | idx);
                simulate_chunk(coder, channel, n, rng).map(|r| (n, r))
            })
            .collect::<Result<Vec<_>>>()?;
        for (n, (be, ble)) in results {
            blocks += n;
            bits += n * k;
            bit_errors += be;
            block_errors += ble;
        }
    }
    Ok(BerRecord::from_counts(
        coder.id(),
        channel_family(channel),
        channel.sweep_value(),
        (bits, bit_errors, blocks, block_errors),
        seed,
    ))
}

/// The channel grammar string without the operating point.
pub fn channel_family(channel: &ChannelSpec) -> String {
    channel.to_string()
}

/// One record per sweep point (SNR in dB, or BSC/BEC probability).
pub fn measure(coder: &dyn Coder, channel: &ChannelSpec, points: &[f64], stop: StopRule, seed: u64) -> Result<Vec<BerRecord>> {
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| measure_point(coder, &channel.at_point(p)?, stop, seed, i as u64))
        .collect()
}

pub const CSV_HEADER: &str = "coder,channel,snr_db,bits,bit_errors,blocks,block_errors,ber,bler,seed";

pub fn records_to_csv(records: &[BerRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.5e},{:.5e},{}",
            r.coder, r.channel, r.snr_db, r.bits, r.bit_errors, r.blocks, r.block_errors, r.ber, r.bler, r.seed
        );
    }
    s
}

pub fn export_csv(records: &[BerRecord], path: &Path) -> Result<()> {
    std::fs::write(path, records_to_csv(records))?;
    Ok(())
}

/// Parses CSV text written by [`records_to_csv`]. Rates are recomputed from
/// the counts so that they are exact.
pub fn parse_csv(text: &str) -> Result<Vec<BerRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Parse("missing or unexpected CSV header".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::Parse(format!("expected 10 fields: `{line}`")));
            }
            let num = |i: usize| f[i].parse::<u64>().map_err(|_| Error::Parse(format!("bad integer `{}`", f[i])));
            let snr = f[2].parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{}`", f[2])))?;
            Ok(BerRecord::from_counts(
                f[0].to_string(),
                f[1].to_string(),
                snr,
                (num(3)?, num(4)?, num(5)?, num(6)?),
                num(9)?,
            ))
        })
        .collect()
}

/// Evaluates a model on other block lengths with a fresh interleaver per
/// length. The model's own length keeps its original permutation.
pub fn blocklength_probe<T: Real>(
    model: &TurboAe<T>,
    lengths: &[usize],
    channel: &ChannelSpec,
    stop: StopRule,
    seed: u64,
) -> Result<Vec<BerRecord>> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut m = model.clone();
            if k != model.block_len() {
                let p = make_permutation(k, model.permutation().seed() ^ k as u64);
                m.set_permutation(Permutation::from_forward(p.forward().to_vec(), p.seed())?);
            }
            let named = Named {
                name: format!("{}@K={k}", m.id()),
                inner: &m,
            };
            measure_point(&named, channel, stop, seed, i as u64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub original: BerRecord,
    /// `(interleaver seed, record, BER / original BER)`.
    pub random: Vec<(u64, BerRecord, f64)>,
    pub identity: BerRecord,
    pub identity_ratio: f64,
}

/// Swaps the model's interleaver for `n_perms` random ones and for the
/// identity, measuring each at the same seed.
pub fn interleaver_robustness<T: Real>(
    model: &TurboAe<T>,
    n_perms: usize,
    channel: &ChannelSpec,
    stop: StopRule,
    seed: u64,
) -> Result<RobustnessReport> {
    let ratio = |a: &BerRecord, b: &BerRecord| if b.ber > 0.0 { a.ber / b.ber } else { f64::INFINITY };
    let original = measure_point(model, channel, stop, seed, 0)?;
    let k = model.block_len();
    let mut random = Vec::with_capacity(n_perms);
    for i in 0..n_perms {
        let pseed = seed.wrapping_add(1 + i as u64);
        let mut m = model.clone();
        m.set_permutation(make_permutation(k, pseed));
        let named = Named {
            name: format!("{}:perm={pseed}", m.id()),
            inner: &m,
        };
        let r = measure_point(&named, channel, stop, seed, 0)?;
        let q = ratio(&r, &original);
        random.push((pseed, r, q));
    }
    let mut m = model.clone();
    m.set_permutation(Permutation::identity(k));
    let named = Named {
        name: format!("{}:identity", m.id()),
        inner: &m,
    };
    let identity = measure_point(&named, channel, stop, seed, 0)?;
    let identity_ratio = ratio(&identity, &original);
    Ok(RobustnessReport {
        original,
        random,
        identity,
        identity_ratio,
    })
}

/// `|f(u1) - f(u2)|` per position and stream for messages that differ only at
/// `flip_index`. Returns `K` rows of 3 values.
pub fn perturbation_probe<T: Real>(model: &TurboAe<T>, flip_index: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    let k = model.block_len();
    if flip_index >= k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: flip_index + 1,
        });
    }
    let u1 = random_bits(&mut Rng::derive(seed, 0x5045_5254), k);
    let mut bits = u1.bits().to_vec();
    bits[flip_index] ^= 1;
    let u2 = BitBlock::new(bits)?;
    perturbation_profile(model, &u1, &u2)
}

/// Difference profile of two arbitrary messages.
pub fn perturbation_profile<T: Real>(model: &TurboAe<T>, u1: &BitBlock, u2: &BitBlock) -> Result<Vec<[f64; 3]>> {
    let mode = match model.frozen_stats() {
        Some(s) => NormMode::Frozen(s.to_vec()),
        None => {
            return Err(Error::Config(
                "perturbation probe needs frozen normalization statistics".into(),
            ))
        }
    };
    let x = model.encode(&[u1.clone(), u2.clone()], &mode)?;
    Ok(x[0]
        .values()
        .chunks_exact(3)
        .zip(x[1].values().chunks_exact(3))
        .map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs(), (a[2] - b[2]).abs()])
        .collect())
}

pub fn profile_to_csv(profile: &[[f64; 3]]) -> String {
    let mut s = String::from("position,stream1,stream2,stream3\n");
    for (i, r) in profile.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.6e},{:.6e},{:.6e}", r[0], r[1], r[2]);
    }
    s
}

/// Digamma function for `x > 0`.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc + x.ln() - 0.5 / x
        - r * (1.0 / 12.0 - r * (1.0 / 120.0 - r * (1.0 / 252.0 - r * (1.0 / 240.0 - r / 132.0))))
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Number of points strictly closer than `eps` (max-norm), excluding `i`.
fn count_within(points: &[Vec<f64>], i: usize, eps: f64) -> usize {
    points
        .iter()
        .enumerate()
        .filter(|&(j, p)| j != i && max_dist(p, &points[i]) < eps)
        .count()
}

/// Kraskov-Stoegbauer-Grassberger estimate of `I(X; Y)` in nats (first
/// variant, max-norm). Each sample may be multi-dimensional.
pub fn ksg_mi(xs: &[Vec<f64>], ys: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = xs.len();
    const MIN: usize = 50;
    if n != ys.len() {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: ys.len(),
        });
    }
    if n < MIN || k == 0 || k >= n {
        return Err(Error::TooFewSamples { n, k, min: MIN });
    }
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| max_dist(&xs[i], &xs[j]).max(max_dist(&ys[i], &ys[j])))
                .collect();
            let (_, eps, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            let eps = *eps;
            let nx = count_within(xs, i, eps);
            let ny = count_within(ys, i, eps);
            digamma(nx as f64 + 1.0) + digamma(ny as f64 + 1.0)
        })
        .collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    Ok((digamma(k as f64) + digamma(n as f64) - mean).max(0.0))
}

/// Convenience wrapper for scalar samples.
pub fn ksg_mi_scalar(xs: &[f64], ys: &[f64], k: usize) -> Result<f64> {
    let wrap = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    ksg_mi(&wrap(xs), &wrap(ys), k)
}

/// `n` pairs from a standard bivariate Gaussian with correlation `rho`.
pub fn gaussian_pairs(n: usize, rho: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let c = (1.0 - rho * rho).sqrt();
    (0..n)
        .map(|_| {
            let (a, b) = (rng.normal(), rng.normal());
            (a, rho * a + c * b)
        })
        .unzip()
}

/// Per-symbol `(x, y)` samples of a coder's channel input and output.
pub fn channel_samples(coder: &dyn Coder, channel: &ChannelSpec, n: usize, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    while xs.len() < n {
        let msgs: Vec<BitBlock> = (0..16).map(|_| random_bits(rng, coder.block_len())).collect();
        for c in coder.encode_batch(&msgs)? {
            let y = channel.apply(&c, rng)?;
            xs.extend_from_slice(c.values());
            ys.extend_from_slice(y.values());
        }
    }
    xs.truncate(n);
    ys.truncate(n);
    Ok((xs, ys))
}
