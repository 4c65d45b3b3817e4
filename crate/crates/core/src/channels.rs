//! Channel simulators mapping a transmitted codeword `x` to a received `y`.
//!
//! SNR follows the convention `SNR = -10 log10(sigma^2)` for unit-power codes.
//! Every channel is expressible as `y = h * x + z` with `(h, z)` drawn
//! independently of `x`; [`ChannelSpec::realize`] exposes that draw so the
//! trainer can push gradients through the channel.

use std::fmt;
use std::str::FromStr;

use rand_distr::{ChiSquared, Distribution};

use crate::blocks::{RealBlock, Rng};
use crate::error::{Error, Result};

/// `sigma = 10^(-snr_db / 20)`.
pub fn snr_to_sigma(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

pub fn sigma_to_snr(sigma: f64) -> f64 {
    -20.0 * sigma.log10()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChannelKind {
    Awgn,
    /// Additive Student-t noise with tail parameter `nu`, rescaled to variance `sigma^2`.
    Atn { nu: f64 },
    /// Two-state good/bad chain at SNR +/- 1 dB with symmetric switching probability.
    MarkovAwgn { p_transition: f64 },
    /// Non-coherent unit-mean Rayleigh fading plus AWGN.
    Rayleigh,
    Bsc { p_flip: f64 },
    Bec { p_erase: f64 },
}

/// A channel together with its operating SNR. The SNR is ignored by BSC/BEC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub snr_db: f64,
}

/// One draw of the channel's randomness: `y = scale * x + offset`.
/// `scale == None` means unit gain.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub scale: Option<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl Realization {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match &self.scale {
            None => x.iter().zip(&self.offset).map(|(x, z)| x + z).collect(),
            Some(h) => x
                .iter()
                .zip(h)
                .zip(&self.offset)
                .map(|((x, h), z)| h * x + z)
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarkovState {
    Good,
    Bad,
}

impl ChannelSpec {
    pub fn new(kind: ChannelKind, snr_db: f64) -> Result<Self> {
        let spec = Self { kind, snr_db };
        spec.validate()?;
        Ok(spec)
    }

    pub fn awgn(snr_db: f64) -> Self {
        Self {
            kind: ChannelKind::Awgn,
            snr_db,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ChannelKind::Atn { nu } if !(nu > 2.0) => Err(Error::InvalidNu(nu)),
            ChannelKind::MarkovAwgn { p_transition } => check_prob("p_transition", p_transition),
            ChannelKind::Bsc { p_flip } => check_prob("p_flip", p_flip),
            ChannelKind::Bec { p_erase } => check_prob("p_erase", p_erase),
            _ => Ok(()),
        }
    }

    pub fn sigma(&self) -> f64 {
        snr_to_sigma(self.snr_db)
    }

    /// Short identifier used in CSV output (`awgn`, `atn`, ...).
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Atn { .. } => "atn",
            ChannelKind::MarkovAwgn { .. } => "markov",
            ChannelKind::Rayleigh => "rayleigh",
            ChannelKind::Bsc { .. } => "bsc",
            ChannelKind::Bec { .. } => "bec",
        }
    }

    /// True for channels that only accept `{-1,+1}` symbols.
    pub fn requires_binary_input(&self) -> bool {
        matches!(self.kind, ChannelKind::Bsc { .. } | ChannelKind::Bec { .. })
    }

    /// The value swept by `--snr`: SNR in dB, or the flip/erase probability for BSC/BEC.
    pub fn sweep_value(&self) -> f64 {
        match self.kind {
            ChannelKind::Bsc { p_flip } => p_flip,
            ChannelKind::Bec { p_erase } => p_erase,
            _ => self.snr_db,
        }
    }

    /// Same channel at a different sweep point (see [`ChannelSpec::sweep_value`]).
    pub fn at_point(&self, value: f64) -> Result<Self> {
        let kind = match self.kind {
            ChannelKind::Bsc { .. } => ChannelKind::Bsc { p_flip: value },
            ChannelKind::Bec { .. } => ChannelKind::Bec { p_erase: value },
            k => k,
        };
        let snr_db = if self.requires_binary_input() { self.snr_db } else { value };
        Self::new(kind, snr_db)
    }

    /// Draws `(h, z)` for `n` symbols.
    pub fn realize(&self, n: usize, rng: &mut Rng) -> Result<Realization> {
        self.validate()?;
        let sigma = self.sigma();
        Ok(match self.kind {
            ChannelKind::Awgn => Realization {
                scale: None,
                offset: gaussian(n, sigma, rng),
            },
            ChannelKind::Atn { nu } => Realization {
                scale: None,
                offset: student_t_noise(n, sigma, nu, rng)?,
            },
            ChannelKind::MarkovAwgn { p_transition } => {
                let states = markov_states(n, p_transition, None, rng);
                Realization {
                    scale: None,
                    offset: markov_noise(&states, self.snr_db, rng),
                }
            }
            ChannelKind::Rayleigh => {
                let h = rayleigh_gains(n, rng);
                Realization {
                    scale: Some(h),
                    offset: gaussian(n, sigma, rng),
                }
            }
            ChannelKind::Bsc { p_flip } => Realization {
                scale: Some(
                    (0..n)
                        .map(|_| if rng.bernoulli(p_flip) { -1.0 } else { 1.0 })
                        .collect(),
                ),
                offset: vec![0.0; n],
            },
            ChannelKind::Bec { p_erase } => Realization {
                scale: Some(
                    (0..n)
                        .map(|_| if rng.bernoulli(p_erase) { 0.0 } else { 1.0 })
                        .collect(),
                ),
                offset: vec![0.0; n],
            },
        })
    }

    /// Passes a raw symbol sequence through the channel.
    pub fn apply_slice(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        if self.requires_binary_input() {
            check_binary(x, self.kind_name())?;
        }
        Ok(self.realize(x.len(), rng)?.apply(x))
    }

    /// Passes a codeword through the channel, preserving its stream layout.
    pub fn apply(&self, x: &RealBlock, rng: &mut Rng) -> Result<RealBlock> {
        let y = self.apply_slice(x.values(), rng)?;
        Ok(RealBlock::from_raw(y, x.streams()))
    }
}

fn check_prob(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::InvalidProbability { name, value })
    }
}

fn check_binary(x: &[f64], channel: &'static str) -> Result<()> {
    if x.iter().all(|&v| v == 1.0 || v == -1.0) {
        Ok(())
    } else {
        Err(Error::NotBinaryInput(channel))
    }
}

fn gaussian(n: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| sigma * rng.normal()).collect()
}

fn student_t_noise(n: usize, sigma: f64, nu: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(nu > 2.0) {
        return Err(Error::InvalidNu(nu));
    }
    let chi2 = ChiSquared::new(nu).map_err(|_| Error::InvalidNu(nu))?;
    let scale = sigma * ((nu - 2.0) / nu).sqrt();
    Ok((0..n)
        .map(|_| {
            let z = rng.normal();
            let c: f64 = chi2.sample(rng);
            scale * z / (c / nu).sqrt()
        })
        .collect())
}

/// Fading gains `h = sqrt(U^2 + V^2) / sqrt(pi / 2)`, so `E[h] = 1`.
pub fn rayleigh_gains(n: usize, rng: &mut Rng) -> Vec<f64> {
    let norm = (std::f64::consts::PI / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let u = rng.normal();
            let v = rng.normal();
            u.hypot(v) / norm
        })
        .collect()
}

/// Samples the good/bad state sequence. Without an explicit initial state the
/// chain starts from its stationary distribution, which is uniform because
/// the switching probability is symmetric.
pub fn markov_states(
    n: usize,
    p_transition: f64,
    initial: Option<MarkovState>,
    rng: &mut Rng,
) -> Vec<MarkovState> {
    let mut state = initial.unwrap_or_else(|| {
        if rng.bernoulli(0.5) {
            MarkovState::Bad
        } else {
            MarkovState::Good
        }
    });
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.bernoulli(p_transition) {
            state = match state {
                MarkovState::Good => MarkovState::Bad,
                MarkovState::Bad => MarkovState::Good,
            };
        }
        out.push(state);
    }
    out
}

fn markov_noise(states: &[MarkovState], snr_db: f64, rng: &mut Rng) -> Vec<f64> {
    let good = snr_to_sigma(snr_db + 1.0);
    let bad = snr_to_sigma(snr_db - 1.0);
    states
        .iter()
        .map(|s| {
            let sigma = match s {
                MarkovState::Good => good,
                MarkovState::Bad => bad,
            };
            sigma * rng.normal()
        })
        .collect()
}

pub fn awgn(x: &RealBlock, sigma: f64, rng: &mut Rng) -> RealBlock {
    let y = x
        .values()
        .iter()
        .map(|v| v + sigma * rng.normal())
        .collect();
    RealBlock::from_raw(y, x.streams())
}

pub fn atn(x: &RealBlock, sigma: f64, nu: f64, rng: &mut Rng) -> Result<RealBlock> {
    let z = student_t_noise(x.len(), sigma, nu, rng)?;
    let y = x.values().iter().zip(z).map(|(v, z)| v + z).collect();
    Ok(RealBlock::from_raw(y, x.streams()))
}

/// Markov-modulated AWGN. `initial` pins the first state; `None` draws it
/// from the stationary distribution.
pub fn markov_awgn(
    x: &RealBlock,
    snr_db: f64,
    p_transition: f64,
    initial: Option<MarkovState>,
    rng: &mut Rng,
) -> Result<RealBlock> {
    check_prob("p_transition", p_transition)?;
    let states = markov_states(x.len(), p_transition, initial, rng);
    let z = markov_noise(&states, snr_db, rng);
    let y = x.values().iter().zip(z).map(|(v, z)| v + z).collect();
    Ok(RealBlock::from_raw(y, x.streams()))
}

/// Non-coherent Rayleigh fading: the gains are not returned to the caller.
pub fn rayleigh(x: &RealBlock, sigma: f64, rng: &mut Rng) -> RealBlock {
    let h = rayleigh_gains(x.len(), rng);
    let y = x
        .values()
        .iter()
        .zip(h)
        .map(|(v, h)| h * v + sigma * rng.normal())
        .collect();
    RealBlock::from_raw(y, x.streams())
}

pub fn bsc(x: &RealBlock, p_flip: f64, rng: &mut Rng) -> Result<RealBlock> {
    ChannelSpec::new(ChannelKind::Bsc { p_flip }, 0.0)?.apply(x, rng)
}

/// Erasures are reported as `0.0`.
pub fn bec(x: &RealBlock, p_erase: f64, rng: &mut Rng) -> Result<RealBlock> {
    ChannelSpec::new(ChannelKind::Bec { p_erase }, 0.0)?.apply(x, rng)
}

impl fmt::Display for ChannelSpec {
    /// Mini-grammar form without the SNR, e.g. `atn:nu=3` or `bsc:p=0.1`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ChannelKind::Awgn => write!(f, "awgn"),
            ChannelKind::Atn { nu } => write!(f, "atn:nu={nu}"),
            ChannelKind::MarkovAwgn { p_transition } => write!(f, "markov:p={p_transition}"),
            ChannelKind::Rayleigh => write!(f, "rayleigh"),
            ChannelKind::Bsc { p_flip } => write!(f, "bsc:p={p_flip}"),
            ChannelKind::Bec { p_erase } => write!(f, "bec:p={p_erase}"),
        }
    }
}

impl FromStr for ChannelSpec {
    type Err = Error;

    /// Parses `awgn`, `atn:nu=3`, `markov:p=0.8`, `rayleigh`, `bsc:p=0.1`,
    /// `bec:p=0.1`; an optional `snr=<dB>` parameter sets the operating point.
    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = s.split_once(':').unwrap_or((s, ""));
        let mut nu = None;
        let mut p = None;
        let mut snr_db = 0.0;
        for kv in params.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("channel parameter `{kv}` is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("channel parameter `{kv}` is not a number")))?;
            match k.trim() {
                "nu" => nu = Some(v),
                "p" => p = Some(v),
                "snr" => snr_db = v,
                other => return Err(Error::Parse(format!("unknown channel parameter `{other}`"))),
            }
        }
        let need_p = |p: Option<f64>| p.ok_or_else(|| Error::Parse(format!("channel `{name}` needs p=<prob>")));
        let kind = match name.trim().to_ascii_lowercase().as_str() {
            "awgn" => ChannelKind::Awgn,
            "atn" => ChannelKind::Atn { nu: nu.unwrap_or(3.0) },
            "markov" => ChannelKind::MarkovAwgn {
                p_transition: need_p(p)?,
            },
            "rayleigh" => ChannelKind::Rayleigh,
            "bsc" => ChannelKind::Bsc { p_flip: need_p(p)? },
            "bec" => ChannelKind::Bec { p_erase: need_p(p)? },
            other => return Err(Error::Parse(format!("unknown channel `{other}`"))),
        };
        let takes_nu = matches!(kind, ChannelKind::Atn { .. });
        let takes_p = matches!(
            kind,
            ChannelKind::MarkovAwgn { .. } | ChannelKind::Bsc { .. } | ChannelKind::Bec { .. }
        );
        if (nu.is_some() && !takes_nu) || (p.is_some() && !takes_p) {
            return Err(Error::Parse(format!("channel `{name}` does not take parameter(s) in `{params}`")));
        }
        ChannelSpec::new(kind, snr_db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    }

    fn zeros(n: usize) -> RealBlock {
        RealBlock::single(vec![0.0; n]).unwrap()
    }

    fn pm1(n: usize, rng: &mut Rng) -> RealBlock {
        RealBlock::single((0..n).map(|_| if rng.bit() == 1 { 1.0 } else { -1.0 }).collect()).unwrap()
    }

    #[test]
    fn snr_conversion() {
        assert_eq!(snr_to_sigma(0.0), 1.0);
        assert!((snr_to_sigma(2.0).powi(2) - 0.630_957_344_480_193).abs() < 1e-12);
        assert!((snr_to_sigma(-10.0).powi(2) - 10.0).abs() < 1e-12);
        assert!((sigma_to_snr(snr_to_sigma(1.3)) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn noiseless_channels_are_identity() {
        let mut rng = Rng::new(1);
        let x = pm1(64, &mut rng);
        assert_eq!(awgn(&x, 0.0, &mut rng), x);
        assert_eq!(atn(&x, 0.0, 3.0, &mut rng).unwrap(), x);
        assert_eq!(bsc(&x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(bec(&x, 0.0, &mut rng).unwrap(), x);
        assert!(rayleigh(&zeros(100), 0.0, &mut rng).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn awgn_variance_and_determinism() {
        let n = 1_000_000;
        let y = awgn(&zeros(n), 1.0, &mut Rng::new(5));
        let (_, var) = mean_var(y.values());
        assert!((0.995..=1.005).contains(&var), "var {var}");
        assert_eq!(y, awgn(&zeros(n), 1.0, &mut Rng::new(5)));
    }

    #[test]
    fn atn_rejects_small_nu() {
        let x = zeros(4);
        assert!(matches!(atn(&x, 1.0, 2.0, &mut Rng::new(0)), Err(Error::InvalidNu(_))));
        assert!("atn:nu=1.5".parse::<ChannelSpec>().is_err());
    }

    #[test]
    fn atn_is_heavy_tailed() {
        let n = 1_000_000;
        let y = atn(&zeros(n), 1.0, 3.0, &mut Rng::new(9)).unwrap();
        let (m, var) = mean_var(y.values());
        let m4 = y.values().iter().map(|v| (v - m).powi(4)).sum::<f64>() / n as f64;
        assert!(m4 / (var * var) - 3.0 > 0.0);
    }

    #[test]
    fn markov_absorbing_and_alternating() {
        let mut rng = Rng::new(2);
        let s = markov_states(1000, 0.0, Some(MarkovState::Good), &mut rng);
        assert!(s.iter().all(|&s| s == MarkovState::Good));
        let s = markov_states(1000, 1.0, None, &mut rng);
        assert!(s.windows(2).all(|w| w[0] != w[1]));

        // With p = 0 from the good state, the noise is exactly AWGN at snr + 1 dB.
        let x = zeros(1000);
        let y = markov_awgn(&x, 0.0, 0.0, Some(MarkovState::Good), &mut Rng::new(4)).unwrap();
        let mut r = Rng::new(4);
        let _ = markov_states(1000, 0.0, Some(MarkovState::Good), &mut r);
        let z = awgn(&x, snr_to_sigma(1.0), &mut r);
        assert_eq!(y, z);
    }

    #[test]
    fn rayleigh_gains_positive() {
        let h = rayleigh_gains(100_000, &mut Rng::new(8));
        assert!(h.iter().all(|&h| h > 0.0));
    }

    #[test]
    fn bsc_bec_extremes_and_validation() {
        let mut rng = Rng::new(3);
        let x = pm1(500, &mut rng);
        let flipped = bsc(&x, 1.0, &mut rng).unwrap();
        assert!(flipped.values().iter().zip(x.values()).all(|(a, b)| *a == -b));
        let erased = bec(&x, 1.0, &mut rng).unwrap();
        assert!(erased.values().iter().all(|&v| v == 0.0));
        let partial = bec(&x, 0.3, &mut rng).unwrap();
        assert!(partial
            .values()
            .iter()
            .zip(x.values())
            .all(|(y, x)| *y == 0.0 || y == x));
        let cont = RealBlock::single(vec![0.3, -1.0]).unwrap();
        assert!(matches!(bsc(&cont, 0.1, &mut rng), Err(Error::NotBinaryInput(_))));
        assert!(matches!(bec(&cont, 0.1, &mut rng), Err(Error::NotBinaryInput(_))));
        assert!(bsc(&x, 1.5, &mut rng).is_err());
    }

    #[test]
    fn channels_preserve_length_and_finiteness() {
        let mut rng = Rng::new(12);
        let x = pm1(3000, &mut rng);
        for spec in ["awgn", "atn:nu=3", "markov:p=0.8", "rayleigh", "bsc:p=0.1", "bec:p=0.1"] {
            let c: ChannelSpec = spec.parse().unwrap();
            let y = c.apply(&x, &mut rng).unwrap();
            assert_eq!(y.len(), x.len());
            assert!(y.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn noise_uncorrelated_with_input() {
        let n = 1_000_000;
        let mut rng = Rng::new(21);
        let x = pm1(n, &mut rng);
        for spec in ["awgn", "atn:nu=3", "markov:p=0.8"] {
            let c: ChannelSpec = spec.parse().unwrap();
            let y = c.apply(&x, &mut rng).unwrap();
            let z: Vec<f64> = y.values().iter().zip(x.values()).map(|(y, x)| y - x).collect();
            let corr = correlation(x.values(), &z);
            assert!(corr.abs() < 0.01, "{spec}: corr {corr}");
        }
        let c = ChannelSpec::new(ChannelKind::Rayleigh, 0.0).unwrap();
        let r = c.realize(n, &mut rng).unwrap();
        let z = &r.offset;
        assert!(correlation(x.values(), z).abs() < 0.01);
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let (ma, va) = mean_var(a);
        let (mb, vb) = mean_var(b);
        let cov = a.iter().zip(b).map(|(a, b)| (a - ma) * (b - mb)).sum::<f64>() / a.len() as f64;
        cov / (va * vb).sqrt()
    }

    #[test]
    fn grammar_round_trip() {
        for s in ["awgn", "atn:nu=3", "markov:p=0.8", "rayleigh", "bsc:p=0.1", "bec:p=0.25"] {
            let c: ChannelSpec = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
        }
        assert!("gsm".parse::<ChannelSpec>().is_err());
        assert!("bsc".parse::<ChannelSpec>().is_err());
        assert!("awgn:q=1".parse::<ChannelSpec>().is_err());
        assert!("awgn:nu=3".parse::<ChannelSpec>().is_err());
        assert!("atn:p=0.1".parse::<ChannelSpec>().is_err());
        let c: ChannelSpec = "awgn:snr=1.5".parse().unwrap();
        assert_eq!(c.snr_db, 1.5);
    }
}
