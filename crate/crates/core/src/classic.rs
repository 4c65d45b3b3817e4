//! Classical baselines: recursive systematic convolutional codes, exact
//! log-MAP BCJR, iterative turbo decoding, repetition and uncoded BPSK.
//!
//! LLRs are `log P(b = 1) / P(b = 0)` throughout, so a positive value favours
//! bit 1, which BPSK maps to `+1`.

use crate::blocks::{interleave_slice, make_permutation, BitBlock, Permutation, RealBlock};
use crate::channels::{ChannelKind, ChannelSpec};
use crate::error::{Error, Result};

/// Magnitude used for "certain" LLRs (noiseless BEC symbols).
pub const LLR_CLAMP: f64 = 40.0;

/// RSC trellis with generator `(1, f1(x) / f2(x))`.
///
/// Register convention: with `a_t` the feedback bit,
/// `a_t = u_t ^ sum_{i>=1} f2_i a_{t-i}` and `p_t = f1_0 a_t ^ sum_{i>=1} f1_i a_{t-i}`.
/// The state holds `a_{t-1}` in bit 0, `a_{t-2}` in bit 1, and so on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trellis {
    pub memory: usize,
    /// Bit `i` is the coefficient of `x^i`.
    pub feedforward: u32,
    pub feedback: u32,
    next: Vec<[usize; 2]>,
    parity: Vec<[u8; 2]>,
}

fn parity_of(x: u32) -> u8 {
    (x.count_ones() & 1) as u8
}

impl Trellis {
    pub fn new(memory: usize, feedforward: u32, feedback: u32) -> Result<Self> {
        if memory == 0 || memory > 16 || feedback & 1 == 0 || feedforward >> (memory + 1) != 0 || feedback >> (memory + 1) != 0 {
            return Err(Error::Config(format!(
                "invalid RSC generators (memory {memory}, f1 {feedforward:#b}, f2 {feedback:#b})"
            )));
        }
        let states = 1usize << memory;
        let mask = states as u32 - 1;
        let mut next = Vec::with_capacity(states);
        let mut parity = Vec::with_capacity(states);
        for s in 0..states as u32 {
            let mut n = [0; 2];
            let mut p = [0; 2];
            for u in 0..2u32 {
                let a = u ^ parity_of(s & (feedback >> 1)) as u32;
                let reg = (s << 1) | a;
                p[u as usize] = parity_of(reg & feedforward);
                n[u as usize] = (reg & mask) as usize;
            }
            next.push(n);
            parity.push(p);
        }
        Ok(Self {
            memory,
            feedforward,
            feedback,
            next,
            parity,
        })
    }

    /// `f1 = 1 + x^2`, `f2 = 1 + x + x^2`.
    pub fn turbo757() -> Self {
        Self::new(2, 0b101, 0b111).expect("valid generators")
    }

    /// `f1 = 1 + x^2 + x^3`, `f2 = 1 + x + x^3`.
    pub fn lte() -> Self {
        Self::new(3, 0b1101, 0b1011).expect("valid generators")
    }

    pub fn states(&self) -> usize {
        self.next.len()
    }

    pub fn next_state(&self, state: usize, input: u8) -> usize {
        self.next[state][input as usize]
    }

    pub fn parity_bit(&self, state: usize, input: u8) -> u8 {
        self.parity[state][input as usize]
    }
}

/// Encodes from the zero state without termination. Returns
/// `(systematic, parity, final_state)`.
pub fn rsc_encode(trellis: &Trellis, u: &BitBlock) -> (BitBlock, BitBlock, usize) {
    let mut s = 0;
    let mut p = Vec::with_capacity(u.len());
    for &b in u.bits() {
        p.push(trellis.parity_bit(s, b));
        s = trellis.next_state(s, b);
    }
    (u.clone(), BitBlock::new(p).expect("parity bits are binary"), s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TurboVariant {
    Turbo757,
    TurboLte,
}

/// Parallel concatenation of two identical RSC codes.
#[derive(Clone, Debug, PartialEq)]
pub struct TurboCode {
    pub trellis: Trellis,
    pub permutation: Permutation,
    pub iterations: usize,
    pub variant: TurboVariant,
}

impl TurboCode {
    pub fn new(variant: TurboVariant, k: usize, interleaver_seed: u64) -> Self {
        let trellis = match variant {
            TurboVariant::Turbo757 => Trellis::turbo757(),
            TurboVariant::TurboLte => Trellis::lte(),
        };
        Self {
            trellis,
            permutation: make_permutation(k, interleaver_seed),
            iterations: 6,
            variant,
        }
    }

    pub fn block_len(&self) -> usize {
        self.permutation.len()
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            TurboVariant::Turbo757 => "turbo757",
            TurboVariant::TurboLte => "turbolte",
        }
    }

    /// Rate-1/3 BPSK codeword: `(u, parity(u), parity(pi(u)))` per position.
    pub fn encode(&self, u: &BitBlock) -> Result<RealBlock> {
        check_len(self.block_len(), u.len())?;
        let (_, p1, _) = rsc_encode(&self.trellis, u);
        let u_pi = BitBlock::new(interleave_slice(u.bits(), &self.permutation)).expect("binary");
        let (_, p2, _) = rsc_encode(&self.trellis, &u_pi);
        let bpsk = |b: u8| if b == 1 { 1.0 } else { -1.0 };
        let mut v = Vec::with_capacity(3 * u.len());
        for i in 0..u.len() {
            v.push(bpsk(u.bits()[i]));
            v.push(bpsk(p1.bits()[i]));
            v.push(bpsk(p2.bits()[i]));
        }
        RealBlock::new(v, 3)
    }

    /// Posterior LLRs after `iterations` rounds from channel LLRs
    /// `(sys, par1, par2)`.
    pub fn decode_llr(&self, sys: &[f64], par1: &[f64], par2: &[f64], iterations: usize) -> Result<Vec<f64>> {
        let k = self.block_len();
        for l in [sys.len(), par1.len(), par2.len()] {
            check_len(k, l)?;
        }
        let p = &self.permutation;
        let sys_pi = interleave_slice(sys, p);
        let mut prior1 = vec![0.0; k];
        let mut post = vec![0.0; k];
        let mut scratch = BcjrScratch::new(&self.trellis, k);
        for _ in 0..iterations.max(1) {
            let out1 = bcjr_with(&self.trellis, sys, par1, &prior1, &mut scratch)?;
            let prior2 = interleave_slice(&out1.extrinsic, p);
            let out2 = bcjr_with(&self.trellis, &sys_pi, par2, &prior2, &mut scratch)?;
            prior1 = deinterleave_slice(&out2.extrinsic, p);
            post = deinterleave_slice(&out2.posterior, p);
        }
        Ok(post)
    }

    /// Hard decisions from a received `K x 3` block.
    pub fn decode(&self, y: &RealBlock, channel: &ChannelSpec) -> Result<BitBlock> {
        if y.streams() != 3 {
            return Err(Error::ShapeMismatch(format!("turbo decoder expects 3 streams, got {}", y.streams())));
        }
        let llr = channel_llr(channel, y.values());
        let (mut s, mut p1, mut p2) = (Vec::new(), Vec::new(), Vec::new());
        for c in llr.chunks_exact(3) {
            s.push(c[0]);
            p1.push(c[1]);
            p2.push(c[2]);
        }
        let post = self.decode_llr(&s, &p1, &p2, self.iterations)?;
        Ok(BitBlock::from_bools(post.iter().map(|&l| l > 0.0)))
    }
}

fn deinterleave_slice<T: Copy>(x: &[T], p: &Permutation) -> Vec<T> {
    assert_eq!(x.len(), p.len(), "sequence and permutation lengths differ");
    p.inverse().iter().map(|&i| x[i]).collect()
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// Bit LLRs of received symbols.
///
/// Continuous channels use the Gaussian formula `2y / sigma^2` whatever the
/// true noise law; BSC uses `y ln((1-p)/p)`; BEC maps symbols to `+-40` and
/// erasures to 0.
pub fn channel_llr(channel: &ChannelSpec, y: &[f64]) -> Vec<f64> {
    match channel.kind {
        ChannelKind::Bsc { p_flip } => {
            let w = if p_flip <= 0.0 {
                LLR_CLAMP
            } else if p_flip >= 1.0 {
                -LLR_CLAMP
            } else {
                ((1.0 - p_flip) / p_flip).ln().clamp(-LLR_CLAMP, LLR_CLAMP)
            };
            y.iter().map(|v| v * w).collect()
        }
        ChannelKind::Bec { .. } => y.iter().map(|v| LLR_CLAMP * v.signum() * (v.abs() > 0.0) as u8 as f64).collect(),
        _ => {
            let s2 = channel.sigma().powi(2);
            y.iter().map(|v| 2.0 * v / s2).collect()
        }
    }
}

/// `log(exp(a) + exp(b))`.
#[inline]
fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcjrOutput {
    pub posterior: Vec<f64>,
    /// `posterior - sys - prior`.
    pub extrinsic: Vec<f64>,
}

struct BcjrScratch {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl BcjrScratch {
    fn new(t: &Trellis, k: usize) -> Self {
        Self {
            alpha: vec![0.0; (k + 1) * t.states()],
            beta: vec![0.0; (k + 1) * t.states()],
        }
    }
}

/// Exact log-MAP decoding of one RSC block. The encoder is assumed to start
/// in state 0; the final state is unknown (uniform).
pub fn bcjr(trellis: &Trellis, sys: &[f64], par: &[f64], prior: &[f64]) -> Result<BcjrOutput> {
    bcjr_with(trellis, sys, par, prior, &mut BcjrScratch::new(trellis, sys.len()))
}

fn bcjr_with(trellis: &Trellis, sys: &[f64], par: &[f64], prior: &[f64], scratch: &mut BcjrScratch) -> Result<BcjrOutput> {
    let k = sys.len();
    check_len(k, par.len())?;
    check_len(k, prior.len())?;
    let ns = trellis.states();
    if scratch.alpha.len() != (k + 1) * ns {
        *scratch = BcjrScratch::new(trellis, k);
    }
    let (alpha, beta) = (&mut scratch.alpha, &mut scratch.beta);
    // Branch metric of input u from state s at time t: u (Ls + La) + c Lp.
    let gamma = |t: usize, s: usize, u: usize| -> f64 {
        let c = trellis.parity[s][u] as f64;
        u as f64 * (sys[t] + prior[t]) + c * par[t]
    };

    alpha[..ns].fill(f64::NEG_INFINITY);
    alpha[0] = 0.0;
    for t in 0..k {
        let (cur, nxt) = alpha[t * ns..(t + 2) * ns].split_at_mut(ns);
        nxt.fill(f64::NEG_INFINITY);
        for s in 0..ns {
            if cur[s] == f64::NEG_INFINITY {
                continue;
            }
            for u in 0..2 {
                let n = trellis.next[s][u];
                nxt[n] = lse(nxt[n], cur[s] + gamma(t, s, u));
            }
        }
        let m = nxt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        nxt.iter_mut().for_each(|v| *v -= m);
    }

    beta[k * ns..].fill(0.0);
    for t in (0..k).rev() {
        let (cur, nxt) = beta[t * ns..(t + 2) * ns].split_at_mut(ns);
        for s in 0..ns {
            cur[s] = lse(
                gamma(t, s, 0) + nxt[trellis.next[s][0]],
                gamma(t, s, 1) + nxt[trellis.next[s][1]],
            );
        }
        let m = cur.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        cur.iter_mut().for_each(|v| *v -= m);
    }

    let mut posterior = Vec::with_capacity(k);
    for t in 0..k {
        let mut l = [f64::NEG_INFINITY; 2];
        for s in 0..ns {
            let a = alpha[t * ns + s];
            if a == f64::NEG_INFINITY {
                continue;
            }
            for u in 0..2 {
                let b = beta[(t + 1) * ns + trellis.next[s][u]];
                l[u] = lse(l[u], a + gamma(t, s, u) + b);
            }
        }
        posterior.push(l[1] - l[0]);
    }
    let extrinsic = posterior
        .iter()
        .zip(sys)
        .zip(prior)
        .map(|((p, s), a)| p - s - a)
        .collect();
    Ok(BcjrOutput { posterior, extrinsic })
}

/// Rate-`1/r` repetition code with soft combining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Repetition {
    pub r: usize,
    pub k: usize,
}

impl Repetition {
    pub fn encode(&self, u: &BitBlock) -> Result<RealBlock> {
        check_len(self.k, u.len())?;
        let v = u
            .to_bipolar()
            .into_iter()
            .flat_map(|x| std::iter::repeat_n(x, self.r))
            .collect();
        RealBlock::new(v, self.r)
    }

    /// Sums the `r` copies of each bit and decides by sign.
    pub fn decode(&self, y: &RealBlock, channel: &ChannelSpec) -> Result<BitBlock> {
        if y.streams() != self.r {
            return Err(Error::ShapeMismatch(format!("expected {} streams, got {}", self.r, y.streams())));
        }
        check_len(self.k, y.positions())?;
        let llr = channel_llr(channel, y.values());
        Ok(BitBlock::from_bools(llr.chunks_exact(self.r).map(|c| c.iter().sum::<f64>() > 0.0)))
    }
}

/// Plain BPSK, one symbol per bit.
pub fn uncoded_encode(u: &BitBlock) -> RealBlock {
    RealBlock::from_raw(u.to_bipolar(), 1)
}

pub fn uncoded_decode(y: &RealBlock) -> BitBlock {
    BitBlock::from_bools(y.values().iter().map(|&v| v > 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{random_bits, Rng};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    /// Exhaustive bitwise MAP over all `2^K` messages.
    fn brute_force(t: &Trellis, sys: &[f64], par: &[f64], prior: &[f64]) -> Vec<f64> {
        let k = sys.len();
        let mut l1 = vec![f64::NEG_INFINITY; k];
        let mut l0 = vec![f64::NEG_INFINITY; k];
        for m in 0..1u32 << k {
            let u = BitBlock::from_bools((0..k).map(|i| m >> i & 1 == 1));
            let (_, p, _) = rsc_encode(t, &u);
            let score: f64 = (0..k)
                .map(|i| u.bits()[i] as f64 * (sys[i] + prior[i]) + p.bits()[i] as f64 * par[i])
                .sum();
            for i in 0..k {
                let slot = if u.bits()[i] == 1 { &mut l1[i] } else { &mut l0[i] };
                *slot = lse(*slot, score);
            }
        }
        l1.iter().zip(&l0).map(|(a, b)| a - b).collect()
    }

    fn randn(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| scale * rng.normal()).collect()
    }

    #[test]
    fn impulse_response_757() {
        let u = BitBlock::new(vec![1, 0, 0, 0]).unwrap();
        let (s, p, _) = rsc_encode(&Trellis::turbo757(), &u);
        assert_eq!(s, u);
        assert_eq!(p.bits(), &[1, 1, 1, 0]);
    }

    #[test]
    fn zero_message_stays_in_zero_state() {
        for t in [Trellis::turbo757(), Trellis::lte()] {
            let (_, p, s) = rsc_encode(&t, &BitBlock::zeros(20));
            assert!(p.bits().iter().all(|&b| b == 0));
            assert_eq!(s, 0);
        }
    }

    #[test]
    fn trellis_tables_are_permutations() {
        for t in [Trellis::turbo757(), Trellis::lte()] {
            // Each state has exactly two predecessors.
            let mut indeg = vec![0; t.states()];
            for s in 0..t.states() {
                indeg[t.next_state(s, 0)] += 1;
                indeg[t.next_state(s, 1)] += 1;
                assert_ne!(t.next_state(s, 0), t.next_state(s, 1));
            }
            assert!(indeg.iter().all(|&d| d == 2));
        }
    }

    proptest! {
        #[test]
        fn rsc_is_linear(seed in any::<u64>(), k in 1usize..64, lte in any::<bool>()) {
            let t = if lte { Trellis::lte() } else { Trellis::turbo757() };
            let mut rng = Rng::new(seed);
            let (u, v) = (random_bits(&mut rng, k), random_bits(&mut rng, k));
            let pu = rsc_encode(&t, &u).1;
            let pv = rsc_encode(&t, &v).1;
            let puv = rsc_encode(&t, &u.xor(&v).unwrap()).1;
            prop_assert_eq!(puv, pu.xor(&pv).unwrap());
        }

        #[test]
        fn bcjr_matches_enumeration(seed in any::<u64>(), k in 1usize..=8, lte in any::<bool>()) {
            let t = if lte { Trellis::lte() } else { Trellis::turbo757() };
            let mut rng = Rng::new(seed);
            let (s, p, a) = (randn(k, 2.0, &mut rng), randn(k, 2.0, &mut rng), randn(k, 1.0, &mut rng));
            let fast = bcjr(&t, &s, &p, &a).unwrap();
            let slow = brute_force(&t, &s, &p, &a);
            for (x, y) in fast.posterior.iter().zip(&slow) {
                prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
            }
        }

        #[test]
        fn codeword_streams(seed in any::<u64>(), k in 1usize..50) {
            let code = TurboCode::new(TurboVariant::Turbo757, k, seed);
            let u = random_bits(&mut Rng::new(seed), k);
            let x = code.encode(&u).unwrap();
            prop_assert_eq!(x.len(), 3 * k);
            let u_pi = BitBlock::new(interleave_slice(u.bits(), &code.permutation)).unwrap();
            let p2: Vec<f64> = rsc_encode(&code.trellis, &u_pi).1.to_bipolar();
            prop_assert_eq!(x.stream(2), p2);
            prop_assert_eq!(x.stream(0), u.to_bipolar());
        }
    }

    #[test]
    fn strong_noiseless_llrs_recover_message() {
        let t = Trellis::lte();
        let u = random_bits(&mut Rng::new(2), 30);
        let (_, p, _) = rsc_encode(&t, &u);
        let s: Vec<f64> = u.to_bipolar().iter().map(|v| 30.0 * v).collect();
        let pl: Vec<f64> = p.to_bipolar().iter().map(|v| 30.0 * v).collect();
        let out = bcjr(&t, &s, &pl, &vec![0.0; 30]).unwrap();
        assert_eq!(BitBlock::from_bools(out.posterior.iter().map(|&l| l > 0.0)), u);
    }

    #[test]
    fn zero_llrs_give_zero_extrinsic() {
        let out = bcjr(&Trellis::turbo757(), &[0.0; 12], &[0.0; 12], &[0.0; 12]).unwrap();
        assert!(out.extrinsic.iter().all(|e| e.abs() < 1e-9));
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            bcjr(&Trellis::turbo757(), &[0.0; 3], &[0.0; 4], &[0.0; 3]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn clean_channel_turbo_decodes_exactly() {
        let code = TurboCode::new(TurboVariant::TurboLte, 64, 5);
        let ch = ChannelSpec::awgn(30.0);
        let mut rng = Rng::new(1);
        for _ in 0..5 {
            let u = random_bits(&mut rng, 64);
            let y = code.encode(&u).unwrap();
            assert_eq!(code.decode(&y, &ch).unwrap(), u);
        }
    }

    #[test]
    fn repetition_clean_and_shapes() {
        let rep = Repetition { r: 3, k: 10 };
        let u = random_bits(&mut Rng::new(1), 10);
        let x = rep.encode(&u).unwrap();
        assert_eq!(x.streams(), 3);
        assert_eq!(rep.decode(&x, &ChannelSpec::awgn(0.0)).unwrap(), u);
        assert_eq!(uncoded_decode(&uncoded_encode(&u)), u);
    }

    #[test]
    fn llr_conventions() {
        let bsc: ChannelSpec = "bsc:p=0.1".parse().unwrap();
        let l = channel_llr(&bsc, &[1.0, -1.0]);
        assert!((l[0] - 9f64.ln()).abs() < 1e-12 && (l[1] + 9f64.ln()).abs() < 1e-12);
        let bec: ChannelSpec = "bec:p=0.1".parse().unwrap();
        assert_eq!(channel_llr(&bec, &[1.0, 0.0, -1.0]), vec![40.0, 0.0, -40.0]);
        let awgn = ChannelSpec::awgn(0.0);
        assert!((channel_llr(&awgn, &[0.5])[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generators_are_validated() {
        assert!(Trellis::new(2, 0b101, 0b110).is_err());
        assert!(Trellis::new(2, 0b1101, 0b111).is_err());
    }
}
