//! Alternating encoder/decoder training with batch-size and learning-rate
//! schedules.

use std::fmt::Write as _;
use std::path::Path;

use crate::blocks::{random_bits, BitBlock, Rng};
use crate::channels::ChannelSpec;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, NormMode, Real};
use crate::turboae::{Architecture, PowerMode, TurboAe};

const EPOCH_STREAM: u64 = 0x4550_4f43_0000_0000;
const TEST_STREAM: u64 = 0x5445_5354;
const STATS_STREAM: u64 = 0x5354_4154;

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: Architecture,
    /// Initial batch size.
    pub batch: usize,
    pub batch_max: usize,
    pub t_enc: usize,
    pub t_dec: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub enc_snr_db: f64,
    pub dec_snr_range_db: (f64, f64),
    /// Epochs without sufficient relative improvement before the schedule acts.
    pub patience: usize,
    pub rel_tol: f64,
    pub test_snr_db: f64,
    pub test_batches: usize,
    /// Batches pooled for the frozen normalization statistics.
    pub stats_batches: usize,
    /// Channel family used in training; its SNR is overridden per phase.
    pub channel: ChannelSpec,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale hyper-parameters.
    pub fn paper() -> Self {
        Self {
            arch: Architecture::canonical(),
            batch: 500,
            batch_max: 2000,
            t_enc: 100,
            t_dec: 500,
            epochs: 800,
            lr: 1e-4,
            lr_min: 1e-6,
            enc_snr_db: 1.0,
            dec_snr_range_db: (-1.5, 2.0),
            patience: 20,
            rel_tol: 1e-3,
            test_snr_db: 0.0,
            test_batches: 10,
            stats_batches: 100,
            channel: ChannelSpec::awgn(0.0),
            seed: 0,
        }
    }

    /// Reduced budget that trains on a single CPU core in about an hour.
    pub fn desk() -> Self {
        Self {
            arch: Architecture::desk(),
            batch: 256,
            batch_max: 256,
            t_enc: 25,
            t_dec: 125,
            epochs: 40,
            lr: 1e-3,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected paper or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 || self.t_enc == 0 || self.t_dec == 0 || self.epochs == 0 {
            return bad("batch, t_enc, t_dec and epochs must be positive");
        }
        if self.batch_max < self.batch {
            return bad("batch_max must be at least batch");
        }
        if self.dec_snr_range_db.0 > self.dec_snr_range_db.1 {
            return bad("dec_snr_low must not exceed dec_snr_high");
        }
        if !(self.lr > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.lr {
            return bad("need 0 < lr_min <= lr");
        }
        if self.test_batches == 0 || self.stats_batches == 0 || self.patience == 0 {
            return bad("test_batches, stats_batches and patience must be positive");
        }
        self.channel.validate()
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "batch" => self.batch = num(key, v)?,
            "batch_max" => self.batch_max = num(key, v)?,
            "t_enc" => self.t_enc = num(key, v)?,
            "t_dec" => self.t_dec = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_min" => self.lr_min = num(key, v)?,
            "enc_snr_db" => self.enc_snr_db = num(key, v)?,
            "dec_snr_low" => self.dec_snr_range_db.0 = num(key, v)?,
            "dec_snr_high" => self.dec_snr_range_db.1 = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "rel_tol" => self.rel_tol = num(key, v)?,
            "test_snr_db" => self.test_snr_db = num(key, v)?,
            "test_batches" => self.test_batches = num(key, v)?,
            "stats_batches" => self.stats_batches = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "channel" => self.channel = v.parse().map_err(|e| Error::Config(format!("channel: {e}")))?,
            "block_len" => self.arch.block_len = num(key, v)?,
            "filters" => self.arch.filters = num(key, v)?,
            "kernel" => self.arch.kernel = num(key, v)?,
            "enc_layers" => self.arch.enc_layers = num(key, v)?,
            "dec_layers" => self.arch.dec_layers = num(key, v)?,
            "iterations" => self.arch.iterations = num(key, v)?,
            "feature_size" => self.arch.feature_size = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of a config text. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => e.into(),
        })?;
        self.apply_text(&text)
    }

    /// `key=value` lines that reproduce this configuration.
    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let mut s = String::new();
        let rows: [(&str, String); 24] = [
            ("batch", self.batch.to_string()),
            ("batch_max", self.batch_max.to_string()),
            ("t_enc", self.t_enc.to_string()),
            ("t_dec", self.t_dec.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{:e}", self.lr)),
            ("lr_min", format!("{:e}", self.lr_min)),
            ("enc_snr_db", self.enc_snr_db.to_string()),
            ("dec_snr_low", self.dec_snr_range_db.0.to_string()),
            ("dec_snr_high", self.dec_snr_range_db.1.to_string()),
            ("patience", self.patience.to_string()),
            ("rel_tol", format!("{:e}", self.rel_tol)),
            ("test_snr_db", self.test_snr_db.to_string()),
            ("test_batches", self.test_batches.to_string()),
            ("stats_batches", self.stats_batches.to_string()),
            ("channel", self.channel.to_string()),
            ("seed", self.seed.to_string()),
            ("block_len", a.block_len.to_string()),
            ("filters", a.filters.to_string()),
            ("kernel", a.kernel.to_string()),
            ("enc_layers", a.enc_layers.to_string()),
            ("dec_layers", a.dec_layers.to_string()),
            ("iterations", a.iterations.to_string()),
            ("feature_size", a.feature_size.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// What the schedule did after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleEvent {
    None,
    BatchDoubled(usize),
    LrDecayed(f64),
}

/// Batch-size doubling followed by learning-rate decay, driven only by the
/// sequence of test losses.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub batch: usize,
    pub batch_max: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub patience: usize,
    pub rel_tol: f64,
    best: f64,
    stale: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            batch: cfg.batch,
            batch_max: cfg.batch_max,
            lr: cfg.lr,
            lr_min: cfg.lr_min,
            patience: cfg.patience,
            rel_tol: cfg.rel_tol,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, test_loss: f64) -> ScheduleEvent {
        if test_loss < self.best * (1.0 - self.rel_tol) || !self.best.is_finite() {
            self.best = self.best.min(test_loss);
            self.stale = 0;
            return ScheduleEvent::None;
        }
        self.best = self.best.min(test_loss);
        self.stale += 1;
        if self.stale < self.patience {
            return ScheduleEvent::None;
        }
        self.stale = 0;
        if self.batch < self.batch_max {
            self.batch = (self.batch * 2).min(self.batch_max);
            ScheduleEvent::BatchDoubled(self.batch)
        } else if self.lr > self.lr_min {
            self.lr = (self.lr / 10.0).max(self.lr_min);
            ScheduleEvent::LrDecayed(self.lr)
        } else {
            ScheduleEvent::None
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub enc_loss: f64,
    pub dec_loss: f64,
    pub test_loss: f64,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,enc_loss,dec_loss,test_loss,batch,lr";

    pub fn push(&mut self, r: EpochRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.epoch < r.epoch));
        self.records.push(r);
    }

    pub fn csv_row(r: &EpochRecord) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{},{:e}",
            r.epoch, r.enc_loss, r.dec_loss, r.test_loss, r.batch, r.lr
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&Self::csv_row(r));
            s.push('\n');
        }
        s
    }

    /// Appends to `path`, writing the header when the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", Self::HEADER)?;
        }
        for r in &self.records {
            writeln!(f, "{}", Self::csv_row(r))?;
        }
        Ok(())
    }
}

/// Parameter fingerprints of the frozen half taken around each phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseChecksums {
    pub decoder_before_enc_phase: u64,
    pub decoder_after_enc_phase: u64,
    pub encoder_before_dec_phase: u64,
    pub encoder_after_dec_phase: u64,
}

impl PhaseChecksums {
    pub fn isolated(&self) -> bool {
        self.decoder_before_enc_phase == self.decoder_after_enc_phase
            && self.encoder_before_dec_phase == self.encoder_after_dec_phase
    }
}

/// Model plus the optimizer and schedule state that persists across epochs.
pub struct Trainer<T> {
    pub model: TurboAe<T>,
    pub cfg: TrainConfig,
    pub schedule: Schedule,
    pub log: TrainLog,
    enc_opt: Adam<T>,
    dec_opt: Adam<T>,
    epoch: usize,
}

fn batch_of(rng: &mut Rng, n: usize, k: usize) -> Vec<BitBlock> {
    (0..n).map(|_| random_bits(rng, k)).collect()
}

/// Mean BCE over `cfg.test_batches` held-out batches at `cfg.test_snr_db`.
/// The same seed always yields the same messages and noise.
pub fn test_loss<T: Real>(model: &TurboAe<T>, cfg: &TrainConfig) -> Result<f64> {
    let mut rng = Rng::derive(cfg.seed, TEST_STREAM);
    let channel = ChannelSpec {
        snr_db: cfg.test_snr_db,
        ..cfg.channel
    };
    let mut total = 0.0;
    for _ in 0..cfg.test_batches {
        let msgs = batch_of(&mut rng, cfg.batch, model.block_len());
        total += model.forward_loss(&msgs, &channel, &NormMode::BatchStats, &mut rng)?;
    }
    Ok(total / cfg.test_batches as f64)
}

impl<T: Real> Trainer<T> {
    pub fn new(model: TurboAe<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.block_len() != cfg.arch.block_len {
            return Err(Error::LengthMismatch {
                expected: cfg.arch.block_len,
                actual: model.block_len(),
            });
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let enc_opt = Adam::new(adam, model.params(), model.encoder_ids());
        let dec_opt = Adam::new(adam, model.params(), model.decoder_ids());
        Ok(Self {
            schedule: Schedule::new(&cfg),
            model,
            cfg,
            log: TrainLog::default(),
            enc_opt,
            dec_opt,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn channel_at(&self, snr_db: f64) -> ChannelSpec {
        ChannelSpec {
            snr_db,
            ..self.cfg.channel
        }
    }

    /// One epoch: `t_enc` encoder steps with the decoder frozen, then `t_dec`
    /// decoder steps with the encoder frozen. Returns the mean phase losses.
    pub fn train_epoch(&mut self) -> Result<(f64, f64, PhaseChecksums)> {
        let mut rng = Rng::derive(self.cfg.seed, EPOCH_STREAM + self.epoch as u64);
        let (k, batch) = (self.model.block_len(), self.schedule.batch);
        let enc_ids = self.model.encoder_ids();
        let dec_ids = self.model.decoder_ids();

        self.model.freeze_decoder(true);
        self.model.freeze_encoder(false);
        let dec_before = self.model.params().checksum(&dec_ids);
        let enc_channel = self.channel_at(self.cfg.enc_snr_db);
        let mut enc_loss = 0.0;
        for _ in 0..self.cfg.t_enc {
            let msgs = batch_of(&mut rng, batch, k);
            let out = self.model.loss_and_grads(&msgs, &enc_channel, &mut rng)?;
            self.enc_opt.step(self.model.params_mut(), &out.grads)?;
            enc_loss += out.loss;
        }
        let dec_after = self.model.params().checksum(&dec_ids);

        self.model.freeze_encoder(true);
        self.model.freeze_decoder(false);
        let enc_before = self.model.params().checksum(&enc_ids);
        let (lo, hi) = self.cfg.dec_snr_range_db;
        let mut dec_loss = 0.0;
        for _ in 0..self.cfg.t_dec {
            let snr = rng.uniform_range(lo, hi);
            let msgs = batch_of(&mut rng, batch, k);
            let out = self.model.loss_and_grads(&msgs, &self.channel_at(snr), &mut rng)?;
            self.dec_opt.step(self.model.params_mut(), &out.grads)?;
            dec_loss += out.loss;
        }
        let enc_after = self.model.params().checksum(&enc_ids);
        self.model.freeze_encoder(false);
        self.model.freeze_decoder(false);
        self.epoch += 1;
        Ok((
            enc_loss / self.cfg.t_enc as f64,
            dec_loss / self.cfg.t_dec as f64,
            PhaseChecksums {
                decoder_before_enc_phase: dec_before,
                decoder_after_enc_phase: dec_after,
                encoder_before_dec_phase: enc_before,
                encoder_after_dec_phase: enc_after,
            },
        ))
    }

    /// Runs the remaining epochs, updating the schedule after each one.
    /// `hook` sees every log row and the phase checksums as they are produced.
    pub fn run(&mut self, hook: &mut dyn FnMut(&EpochRecord, &PhaseChecksums)) -> Result<()> {
        retain_freed_memory();
        while self.epoch < self.cfg.epochs {
            let (enc_loss, dec_loss, sums) = self.train_epoch()?;
            let test = test_loss(&self.model, &self.cfg)?;
            let record = EpochRecord {
                epoch: self.epoch,
                enc_loss,
                dec_loss,
                test_loss: test,
                batch: self.schedule.batch,
                lr: self.schedule.lr,
            };
            hook(&record, &sums);
            self.log.push(record);
            if let ScheduleEvent::LrDecayed(lr) = self.schedule.observe(test) {
                self.enc_opt.set_lr(lr);
                self.dec_opt.set_lr(lr);
            }
        }
        let mut rng = Rng::derive(self.cfg.seed, STATS_STREAM);
        self.model
            .compute_frozen_stats(self.cfg.stats_batches, self.cfg.batch, &mut rng)
    }

    /// One step updating encoder and decoder together on the same batch.
    pub fn joint_train_step(&mut self, rng: &mut Rng) -> Result<f64> {
        self.model.freeze_encoder(false);
        self.model.freeze_decoder(false);
        let msgs = batch_of(rng, self.schedule.batch, self.model.block_len());
        let out = self.model.loss_and_grads(&msgs, &self.channel_at(self.cfg.enc_snr_db), rng)?;
        self.enc_opt.step(self.model.params_mut(), &out.grads)?;
        self.dec_opt.step(self.model.params_mut(), &out.grads)?;
        Ok(out.loss)
    }

    pub fn into_parts(self) -> (TurboAe<T>, TrainLog) {
        (self.model, self.log)
    }
}

/// Trains `model` for `cfg.epochs` epochs and computes its frozen statistics.
pub fn run_training<T: Real>(
    model: TurboAe<T>,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(&EpochRecord, &PhaseChecksums),
) -> Result<(TurboAe<T>, TrainLog)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run(hook)?;
    Ok(t.into_parts())
}

/// Switches a trained continuous model to the binary power head and
/// fine-tunes it for `cfg.epochs` epochs.
pub fn pretrain_then_binarize<T: Real>(
    continuous: &TurboAe<T>,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(&EpochRecord, &PhaseChecksums),
) -> Result<(TurboAe<T>, TrainLog)> {
    let mut model = continuous.clone();
    model.set_power_mode(PowerMode::Binary);
    model.set_frozen_stats(None);
    run_training(model, cfg, hook)
}

/// Keeps freed activation buffers inside the process heap so that every
/// training step does not pay for fresh page faults.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub fn retain_freed_memory() {
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub fn retain_freed_memory() {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            arch: Architecture::tiny(),
            batch: 16,
            batch_max: 16,
            t_enc: 2,
            t_dec: 3,
            epochs: 2,
            test_batches: 2,
            stats_batches: 2,
            seed: 5,
            ..TrainConfig::paper()
        }
    }

    fn stagnant(cfg: &TrainConfig, epochs: usize) -> Vec<(usize, f64)> {
        let mut s = Schedule::new(cfg);
        (0..epochs)
            .map(|_| {
                s.observe(1.0);
                (s.batch, s.lr)
            })
            .collect()
    }

    #[test]
    fn stagnant_loss_doubles_batch_then_decays_lr() {
        let cfg = TrainConfig::paper();
        let trace = stagnant(&cfg, 200);
        // The first observation sets the baseline; 20 stale epochs follow.
        assert_eq!(trace[19], (500, 1e-4));
        assert_eq!(trace[20], (1000, 1e-4));
        assert_eq!(trace[40], (2000, 1e-4));
        assert_eq!(trace[60].0, 2000);
        assert!((trace[60].1 - 1e-5).abs() < 1e-18);
        assert!((trace[80].1 - 1e-6).abs() < 1e-18);
        assert!((trace[199].1 - 1e-6).abs() < 1e-18);
        let batches: Vec<usize> = trace.iter().map(|t| t.0).collect();
        let mut distinct = batches.clone();
        distinct.dedup();
        assert_eq!(distinct, vec![500, 1000, 2000]);
    }

    #[test]
    fn improving_loss_keeps_batch() {
        let cfg = TrainConfig::paper();
        let mut s = Schedule::new(&cfg);
        for e in 0..100 {
            assert_eq!(s.observe(1.0 - 0.005 * e as f64), ScheduleEvent::None);
        }
        assert_eq!((s.batch, s.lr), (500, 1e-4));
    }

    proptest! {
        #[test]
        fn schedule_is_a_function_of_the_loss_sequence(losses in prop::collection::vec(0.01f64..1.0, 0..120)) {
            let cfg = TrainConfig::paper();
            let (mut a, mut b) = (Schedule::new(&cfg), Schedule::new(&cfg));
            for &l in &losses {
                prop_assert_eq!(a.observe(l), b.observe(l));
            }
            prop_assert_eq!(&a, &b);
            prop_assert!(a.batch >= 500 && a.batch <= 2000 && a.lr >= 1e-6 && a.lr <= 1e-4);
        }
    }

    #[test]
    fn decoder_snr_samples_stay_in_range() {
        let cfg = TrainConfig::paper();
        let mut rng = Rng::new(4);
        let (lo, hi) = cfg.dec_snr_range_db;
        let xs: Vec<f64> = (0..10_000).map(|_| rng.uniform_range(lo, hi)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(xs.iter().all(|&x| (lo..=hi).contains(&x)));
        assert!((mean - 0.25).abs() < 0.05);
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let cfg = TrainConfig::desk();
        let mut back = TrainConfig::paper();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let mut c = TrainConfig::paper();
        assert!(matches!(c.set("nonsense", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("batch", "many"), Err(Error::Config(_))));
        c.apply_text("# comment\nbatch = 64  # trailing\n\nchannel=atn:nu=3\n").unwrap();
        assert_eq!(c.batch, 64);
        assert_eq!(c.channel.kind_name(), "atn");
        c.dec_snr_range_db = (3.0, 1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn phases_are_isolated() {
        let cfg = tiny_cfg();
        let model = TurboAe::<f64>::new(cfg.arch, PowerMode::Continuous, 1).unwrap();
        let mut t = Trainer::new(model, cfg).unwrap();
        let enc = t.model.encoder_ids();
        let dec = t.model.decoder_ids();
        let (e0, d0) = (t.model.params().checksum(&enc), t.model.params().checksum(&dec));
        let (_, _, sums) = t.train_epoch().unwrap();
        assert!(sums.isolated());
        assert_eq!(sums.decoder_before_enc_phase, d0);
        assert_ne!(sums.encoder_before_dec_phase, e0, "encoder phase moved the encoder");
        assert_ne!(t.model.params().checksum(&dec), d0, "decoder phase moved the decoder");
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_cfg();
        let run = || {
            let m = TurboAe::<f64>::new(cfg.arch, PowerMode::Continuous, 1).unwrap();
            run_training(m, &cfg, &mut |_, _| {}).unwrap()
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert_eq!(l1.records.len(), 2);
        assert!(m1.frozen_stats().is_some());
        assert!(l1.to_csv().starts_with("epoch,enc_loss,dec_loss,test_loss,batch,lr\n1,"));
    }

    #[test]
    fn binarize_preserves_weights_and_emits_signs() {
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        let m = TurboAe::<f64>::new(cfg.arch, PowerMode::Continuous, 1).unwrap();
        let mut switched = m.clone();
        switched.set_power_mode(PowerMode::Binary);
        let all: Vec<_> = m.params().ids().collect();
        assert_eq!(switched.params().checksum(&all), m.params().checksum(&all));
        let (b, _) = pretrain_then_binarize(&m, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(b.power_mode(), PowerMode::Binary);
        let mut rng = Rng::new(3);
        let x = b.encode(&batch_of(&mut rng, 4, 8), &b.eval_norm_mode()).unwrap();
        assert!(x.iter().all(|c| c.values().iter().all(|v| v.abs() == 1.0)));
    }

    #[test]
    fn joint_step_moves_both_halves() {
        let cfg = tiny_cfg();
        let m = TurboAe::<f64>::new(cfg.arch, PowerMode::Continuous, 1).unwrap();
        let mut t = Trainer::new(m, cfg).unwrap();
        let enc = t.model.encoder_ids();
        let dec = t.model.decoder_ids();
        let (e0, d0) = (t.model.params().checksum(&enc), t.model.params().checksum(&dec));
        let mut rng = Rng::new(9);
        t.joint_train_step(&mut rng).unwrap();
        assert_ne!(t.model.params().checksum(&enc), e0);
        assert_ne!(t.model.params().checksum(&dec), d0);
        for _ in 0..99 {
            assert!(t.joint_train_step(&mut rng).unwrap().is_finite());
        }
    }
}
