//! The learned turbo autoencoder.
//!
//! Encoder: three convolutional branches. Branches 1 and 2 read the message
//! directly, branch 3 reads the interleaved message. The three outputs are
//! normalized per stream (soft power constraint) and optionally hard-limited
//! to `{-1,+1}` with a straight-through sign (binary mode).
//!
//! Decoder: `iterations` rounds of two convolutional blocks. The first block
//! sees `[y1, y2, prior]` in natural order, the second sees
//! `[pi(y1), y3, pi(q)]` in interleaved order; the de-interleaved output is
//! the next prior. Intermediate blocks add their incoming prior to their
//! output. The last block emits one logit per bit.

mod checkpoint;

use std::sync::Arc;

pub use checkpoint::{load_model, save_model, CHECKPOINT_VERSION};

use crate::blocks::{make_permutation, BitBlock, Permutation, RealBlock, Rng};
use crate::channels::ChannelSpec;
use crate::error::{Error, Result};
use crate::nn::{init_uniform, NormMode, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Number of transmitted streams (rate 1/3).
pub const STREAMS: usize = 3;

/// Layer sizes of the codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub block_len: usize,
    pub filters: usize,
    pub kernel: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub iterations: usize,
    /// Prior/posterior channels exchanged between decoder blocks.
    pub feature_size: usize,
}

impl Architecture {
    /// Block length 100, 100 filters, kernel 5, 2 encoder / 5 decoder layers,
    /// 6 iterations, 5 information features.
    pub const fn canonical() -> Self {
        Self {
            block_len: 100,
            filters: 100,
            kernel: 5,
            enc_layers: 2,
            dec_layers: 5,
            iterations: 6,
            feature_size: 5,
        }
    }

    /// Canonical layout at reduced width, sized for single-core CPU training.
    pub const fn desk() -> Self {
        Self {
            filters: 16,
            ..Self::canonical()
        }
    }

    /// Very small layout used by gradient checks.
    pub const fn tiny() -> Self {
        Self {
            block_len: 8,
            filters: 4,
            kernel: 3,
            enc_layers: 2,
            dec_layers: 2,
            iterations: 2,
            feature_size: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2)
            || self.block_len == 0
            || self.filters == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
            || self.iterations == 0
            || self.feature_size == 0
        {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    fn conv_params(&self, cin: usize) -> usize {
        self.filters * cin * self.kernel + self.filters
    }

    /// Parameters of one encoder branch.
    pub fn branch_params(&self) -> usize {
        self.conv_params(1) + (self.enc_layers - 1) * self.conv_params(self.filters) + self.filters + 1
    }

    /// Parameters of one decoder block with `out` head channels.
    pub fn block_params(&self, out: usize) -> usize {
        self.conv_params(2 + self.feature_size)
            + (self.dec_layers - 1) * self.conv_params(self.filters)
            + self.filters * out
            + out
    }

    /// `(encoder, decoder)` multiply-accumulate counts for block length `k`.
    /// Bias additions and activations are not counted.
    pub fn macs(&self, k: usize) -> (u64, u64) {
        let conv = |cin: usize| (k * self.filters * cin * self.kernel) as u64;
        let branch = conv(1) + (self.enc_layers as u64 - 1) * conv(self.filters) + (k * self.filters) as u64;
        let block = |out: usize| {
            conv(2 + self.feature_size) + (self.dec_layers as u64 - 1) * conv(self.filters) + (k * self.filters * out) as u64
        };
        let blocks = 2 * self.iterations as u64;
        let decoder = (blocks - 1) * block(self.feature_size) + block(1);
        (STREAMS as u64 * branch, decoder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PowerMode {
    /// Soft constraint: zero mean, unit variance per stream.
    Continuous,
    /// Hard constraint: `sign` of the normalized output, every symbol `+-1`.
    Binary,
}

impl PowerMode {
    pub fn name(self) -> &'static str {
        match self {
            PowerMode::Continuous => "continuous",
            PowerMode::Binary => "binary",
        }
    }
}

impl std::str::FromStr for PowerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(PowerMode::Continuous),
            "binary" => Ok(PowerMode::Binary),
            _ => Err(Error::Parse(format!("unknown power mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Stack {
    convs: Vec<Layer>,
    head: Layer,
}

/// Encoder branches, decoder blocks, interleaver and frozen statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TurboAe<T> {
    arch: Architecture,
    power: PowerMode,
    params: ParamStore<T>,
    branches: Vec<Stack>,
    /// `blocks[i][phase]`
    blocks: Vec<[Stack; 2]>,
    permutation: Permutation,
    forward_index: Arc<[usize]>,
    inverse_index: Arc<[usize]>,
    frozen_stats: Option<Vec<(f64, f64)>>,
}

/// Result of a differentiable forward pass.
pub struct LossAndGrads<T> {
    pub loss: f64,
    /// Indexed by `ParamId`; `None` for frozen parameters.
    pub grads: Vec<Option<Tensor<T>>>,
}

fn stack_names(prefix: &str, layers: usize) -> (Vec<(String, String)>, (String, String)) {
    let convs = (0..layers)
        .map(|l| (format!("{prefix}.conv{l}.weight"), format!("{prefix}.conv{l}.bias")))
        .collect();
    (convs, (format!("{prefix}.head.weight"), format!("{prefix}.head.bias")))
}

impl<T: Real> TurboAe<T> {
    /// Fresh model; `seed` drives both weight initialization and the interleaver.
    pub fn new(arch: Architecture, power: PowerMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::derive(seed, 0x494e_4954); // "INIT"
        let mut params = ParamStore::new();
        let mut add_stack = |params: &mut ParamStore<T>, prefix: &str, cin: usize, layers: usize, out: usize| {
            let (conv_names, head_names) = stack_names(prefix, layers);
            let mut convs = Vec::with_capacity(layers);
            let mut c = cin;
            for (wn, bn) in conv_names {
                let fan_in = c * arch.kernel;
                let weight = params.add(wn, init_uniform(vec![arch.filters, c, arch.kernel], fan_in, &mut rng));
                let bias = params.add(bn, Tensor::zeros(vec![arch.filters]));
                convs.push(Layer { weight, bias });
                c = arch.filters;
            }
            let weight = params.add(head_names.0, init_uniform(vec![out, arch.filters], arch.filters, &mut rng));
            let bias = params.add(head_names.1, Tensor::zeros(vec![out]));
            Stack {
                convs,
                head: Layer { weight, bias },
            }
        };
        let branches = (0..STREAMS)
            .map(|i| add_stack(&mut params, &format!("enc.f{}", i + 1), 1, arch.enc_layers, 1))
            .collect();
        let mut blocks = Vec::with_capacity(arch.iterations);
        for i in 0..arch.iterations {
            let last = i + 1 == arch.iterations;
            let cin = 2 + arch.feature_size;
            let g1 = add_stack(&mut params, &format!("dec.g{}.1", i + 1), cin, arch.dec_layers, arch.feature_size);
            let out2 = if last { 1 } else { arch.feature_size };
            let g2 = add_stack(&mut params, &format!("dec.g{}.2", i + 1), cin, arch.dec_layers, out2);
            blocks.push([g1, g2]);
        }
        let permutation = make_permutation(arch.block_len, seed);
        Ok(Self::assemble(arch, power, params, branches, blocks, permutation))
    }

    fn assemble(
        arch: Architecture,
        power: PowerMode,
        params: ParamStore<T>,
        branches: Vec<Stack>,
        blocks: Vec<[Stack; 2]>,
        permutation: Permutation,
    ) -> Self {
        Self {
            forward_index: Arc::from(permutation.forward()),
            inverse_index: Arc::from(permutation.inverse()),
            arch,
            power,
            params,
            branches,
            blocks,
            permutation,
            frozen_stats: None,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn power_mode(&self) -> PowerMode {
        self.power
    }

    /// Switches the power head; all weights are kept.
    pub fn set_power_mode(&mut self, power: PowerMode) {
        self.power = power;
    }

    pub fn block_len(&self) -> usize {
        self.permutation.len()
    }

    pub fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    /// Replaces the interleaver on both encoder and decoder sides. The block
    /// length of the model follows the permutation length.
    pub fn set_permutation(&mut self, p: Permutation) {
        self.forward_index = Arc::from(p.forward());
        self.inverse_index = Arc::from(p.inverse());
        self.arch.block_len = p.len();
        self.permutation = p;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn frozen_stats(&self) -> Option<&[(f64, f64)]> {
        self.frozen_stats.as_deref()
    }

    pub fn set_frozen_stats(&mut self, stats: Option<Vec<(f64, f64)>>) {
        self.frozen_stats = stats;
    }

    /// Frozen statistics when available, otherwise batch statistics.
    pub fn eval_norm_mode(&self) -> NormMode {
        match &self.frozen_stats {
            Some(s) => NormMode::Frozen(s.clone()),
            None => NormMode::BatchStats,
        }
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.branches {
            collect_ids(s, &mut ids);
        }
        ids
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for pair in &self.blocks {
            for s in pair {
                collect_ids(s, &mut ids);
            }
        }
        ids
    }

    pub fn freeze_encoder(&mut self, frozen: bool) {
        let ids = self.encoder_ids();
        if frozen {
            self.params.freeze(&ids)
        } else {
            self.params.unfreeze(&ids)
        }
    }

    pub fn freeze_decoder(&mut self, frozen: bool) {
        let ids = self.decoder_ids();
        if frozen {
            self.params.freeze(&ids)
        } else {
            self.params.unfreeze(&ids)
        }
    }

    /// `(encoder, decoder)` parameter counts.
    pub fn count_params(&self) -> (usize, usize) {
        (self.params.count(&self.encoder_ids()), self.params.count(&self.decoder_ids()))
    }

    /// `(encoder, decoder)` multiply-accumulate counts at block length `k`.
    pub fn count_flops(&self, k: usize) -> (u64, u64) {
        self.arch.macs(k)
    }

    fn check_len(&self, k: usize) -> Result<()> {
        if k != self.block_len() {
            return Err(Error::LengthMismatch {
                expected: self.block_len(),
                actual: k,
            });
        }
        Ok(())
    }

    fn run_stack(&self, tape: &mut Tape<T>, bound: &[Var], stack: &Stack, input: Var) -> Result<Var> {
        let mut h = input;
        for layer in &stack.convs {
            let c = tape.conv1d(h, bound[layer.weight.0], bound[layer.bias.0])?;
            h = tape.elu(c);
        }
        tape.linear(h, bound[stack.head.weight.0], bound[stack.head.bias.0])
    }

    /// Bits as a `(B, K, 1)` tensor of `+-1`.
    fn bits_tensor(&self, msgs: &[BitBlock]) -> Result<Tensor<T>> {
        let k = self.block_len();
        let mut data = Vec::with_capacity(msgs.len() * k);
        for m in msgs {
            self.check_len(m.len())?;
            data.extend(m.bits().iter().map(|&b| if b == 1 { T::one() } else { -T::one() }));
        }
        Tensor::new(vec![msgs.len(), k, 1], data)
    }

    /// Records the encoder. Returns the `(B, K, 3)` codeword and the
    /// normalization statistics that were applied.
    pub fn encode_graph(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        msgs: &[BitBlock],
        mode: &NormMode,
    ) -> Result<(Var, Vec<(f64, f64)>)> {
        let u = tape.constant(self.bits_tensor(msgs)?);
        let u_pi = tape.gather(u, &self.forward_index)?;
        let b1 = self.run_stack(tape, bound, &self.branches[0], u)?;
        let b2 = self.run_stack(tape, bound, &self.branches[1], u)?;
        let b3 = self.run_stack(tape, bound, &self.branches[2], u_pi)?;
        let b = tape.concat(&[b1, b2, b3])?;
        let (x, stats) = tape.normalize(b, mode)?;
        let x = match self.power {
            PowerMode::Continuous => x,
            PowerMode::Binary => tape.ste_sign(x),
        };
        Ok((x, stats))
    }

    /// Records the iterative decoder on a `(B, K, 3)` received tensor and
    /// returns `(B, K, 1)` logits in natural order.
    pub fn decode_graph(&self, tape: &mut Tape<T>, bound: &[Var], y: Var) -> Result<Var> {
        let (batch, k, c) = tape.value(y).dims3()?;
        if c != STREAMS {
            return Err(Error::ShapeMismatch(format!("decoder expects {STREAMS} streams, got {c}")));
        }
        self.check_len(k)?;
        let y1 = tape.slice_channels(y, 0, 1)?;
        let y2 = tape.slice_channels(y, 1, 1)?;
        let y3 = tape.slice_channels(y, 2, 1)?;
        let y1_pi = tape.gather(y1, &self.forward_index)?;
        let mut prior = tape.constant(Tensor::zeros(vec![batch, k, self.arch.feature_size]));
        for (i, [g1, g2]) in self.blocks.iter().enumerate() {
            let input = tape.concat(&[y1, y2, prior])?;
            let q = self.run_stack(tape, bound, g1, input)?;
            let q = tape.add(q, prior)?;
            let q_pi = tape.gather(q, &self.forward_index)?;
            let input = tape.concat(&[y1_pi, y3, q_pi])?;
            let out = self.run_stack(tape, bound, g2, input)?;
            if i + 1 == self.blocks.len() {
                return tape.gather(out, &self.inverse_index);
            }
            let out = tape.add(out, q_pi)?;
            prior = tape.gather(out, &self.inverse_index)?;
        }
        unreachable!("architecture has at least one iteration")
    }

    /// Codewords, one `K x 3` block per message.
    pub fn encode(&self, msgs: &[BitBlock], mode: &NormMode) -> Result<Vec<RealBlock>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let (x, _) = self.encode_graph(&mut tape, &bound, msgs, mode)?;
        Ok(split_blocks(tape.value(x)))
    }

    /// Raw `(B, K, 3)` branch outputs before the power constraint.
    pub fn encode_stats(&self, msgs: &[BitBlock]) -> Result<Vec<(f64, f64)>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let (_, stats) = self.encode_graph(&mut tape, &bound, msgs, &NormMode::BatchStats)?;
        Ok(stats)
    }

    fn received_tensor(&self, y: &[RealBlock]) -> Result<Tensor<T>> {
        let k = self.block_len();
        let mut data = Vec::with_capacity(y.len() * k * STREAMS);
        for r in y {
            if r.streams() != STREAMS {
                return Err(Error::ShapeMismatch(format!("expected {STREAMS} streams, got {}", r.streams())));
            }
            self.check_len(r.positions())?;
            data.extend(r.values().iter().map(|&v| T::of(v)));
        }
        Tensor::new(vec![y.len(), k, STREAMS], data)
    }

    /// Decoder logits per bit.
    pub fn decode_logits(&self, y: &[RealBlock]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let yv = tape.constant(self.received_tensor(y)?);
        let logits = self.decode_graph(&mut tape, &bound, yv)?;
        let k = self.block_len();
        Ok(tape.value(logits).to_f64_vec().chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// Bit posteriors `P(u_i = 1 | y)`.
    pub fn decode(&self, y: &[RealBlock]) -> Result<Vec<Vec<f64>>> {
        let logits = self.decode_logits(y)?;
        Ok(logits
            .into_iter()
            .map(|l| l.into_iter().map(|q| 1.0 / (1.0 + (-q).exp())).collect())
            .collect())
    }

    /// Hard decisions from the decoder logits.
    pub fn decode_bits(&self, y: &[RealBlock]) -> Result<Vec<BitBlock>> {
        Ok(self
            .decode_logits(y)?
            .into_iter()
            .map(|l| BitBlock::from_bools(l.into_iter().map(|q| q > 0.0)))
            .collect())
    }

    fn targets(msgs: &[BitBlock]) -> Vec<T> {
        msgs.iter()
            .flat_map(|m| m.bits().iter().map(|&b| if b == 1 { T::one() } else { T::zero() }))
            .collect()
    }

    fn record_loss(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        msgs: &[BitBlock],
        channel: &ChannelSpec,
        mode: &NormMode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let (x, _) = self.encode_graph(tape, bound, msgs, mode)?;
        if channel.requires_binary_input() && self.power != PowerMode::Binary {
            return Err(Error::NotBinaryInput(channel.kind_name()));
        }
        let real = channel.realize(tape.value(x).numel(), rng)?;
        let offset: Vec<T> = real.offset.iter().map(|&v| T::of(v)).collect();
        let scale: Option<Vec<T>> = real.scale.map(|h| h.iter().map(|&v| T::of(v)).collect());
        let y = tape.affine_const(x, scale.as_deref(), &offset)?;
        let logits = self.decode_graph(tape, bound, y)?;
        tape.bce_with_logits(logits, &Self::targets(msgs))
    }

    /// Mean BCE of `encode -> channel -> decode` on one batch (no gradients).
    pub fn forward_loss(&self, msgs: &[BitBlock], channel: &ChannelSpec, mode: &NormMode, rng: &mut Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let loss = self.record_loss(&mut tape, &bound, msgs, channel, mode, rng)?;
        Ok(tape.value(loss).data()[0].as_f64())
    }

    /// Loss and gradients for every non-frozen parameter. Normalization uses
    /// batch statistics.
    pub fn loss_and_grads(&self, msgs: &[BitBlock], channel: &ChannelSpec, rng: &mut Rng) -> Result<LossAndGrads<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let loss = self.record_loss(&mut tape, &bound, msgs, channel, &NormMode::BatchStats, rng)?;
        let mut grads = tape.backward(loss)?;
        Ok(LossAndGrads {
            loss: tape.value(loss).data()[0].as_f64(),
            grads: self.params.collect_grads(&bound, &mut grads),
        })
    }

    /// Estimates test-time normalization statistics by pooling the branch
    /// outputs of `batches` random batches.
    pub fn compute_frozen_stats(&mut self, batches: usize, batch_size: usize, rng: &mut Rng) -> Result<()> {
        let mut mean = [0.0; STREAMS];
        let mut second = vec![0.0; STREAMS];
        for _ in 0..batches {
            let msgs: Vec<BitBlock> = (0..batch_size)
                .map(|_| crate::blocks::random_bits(rng, self.block_len()))
                .collect();
            let stats = self.encode_stats(&msgs)?;
            for (s, (m, sd)) in stats.iter().enumerate() {
                mean[s] += m / batches as f64;
                second[s] += (sd * sd + m * m) / batches as f64;
            }
        }
        let stats = mean
            .iter()
            .zip(&second)
            .map(|(&m, &s2)| (m, (s2 - m * m).max(0.0).sqrt()))
            .collect::<Vec<_>>();
        if let Some(&(_, sd)) = stats.iter().find(|(_, sd)| !(*sd > crate::nn::MIN_POOL_STD)) {
            return Err(Error::DegenerateBlock(sd));
        }
        self.frozen_stats = Some(stats);
        Ok(())
    }
}

fn collect_ids(s: &Stack, ids: &mut Vec<ParamId>) {
    for l in &s.convs {
        ids.push(l.weight);
        ids.push(l.bias);
    }
    ids.push(s.head.weight);
    ids.push(s.head.bias);
}

impl TurboAe<f64> {
    /// Worst relative error, over all trainable parameters, between the
    /// backward pass of the training loss and central differences. The
    /// channel realization is fixed by `noise_seed`.
    pub fn gradcheck(&self, msgs: &[BitBlock], channel: &ChannelSpec, noise_seed: u64, step: f64) -> Result<f64> {
        let analytic = self.loss_and_grads(msgs, channel, &mut Rng::new(noise_seed))?.grads;
        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for (i, g) in analytic.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let orig = self.params.get(id).value.clone();
            let numeric = crate::nn::gradcheck::numeric_grad(
                |x| {
                    probe.params.get_mut(id).value = Tensor::new(orig.shape().to_vec(), x.to_vec())?;
                    probe.forward_loss(msgs, channel, &NormMode::BatchStats, &mut Rng::new(noise_seed))
                },
                orig.data(),
                step,
            )?;
            probe.params.get_mut(id).value = orig;
            worst = worst.max(crate::nn::gradcheck::relative_error(g.data(), &numeric));
        }
        Ok(worst)
    }
}

fn split_blocks<T: Real>(x: &Tensor<T>) -> Vec<RealBlock> {
    let (batch, k, c) = x.dims3().expect("rank-3 codeword");
    let data = x.to_f64_vec();
    (0..batch)
        .map(|b| RealBlock::from_raw(data[b * k * c..(b + 1) * k * c].to_vec(), c))
        .collect()
}
