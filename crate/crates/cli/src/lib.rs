//! Command-line frontend: training, evaluation, sweeps, probes, mutual
//! information and checkpoint inspection.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use turbolab::classic::{Repetition, TurboCode, TurboVariant};
use turbolab::eval::{self, Coder, StopRule, Uncoded};
use turbolab::train::{self, TrainConfig, TrainLog};
use turbolab::turboae::{load_model, save_model, PowerMode, TurboAe};
use turbolab::{ChannelSpec, Error, Rng};

/// Learned turbo-style codes, classical baselines and BER tooling.
#[derive(Parser, Debug)]
#[command(name = "turbolab", version)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a TurboAE model.
    Train(TrainArgs),
    /// Measure BER/BLER of one coder over an SNR list.
    Evaluate(EvaluateArgs),
    /// Measure several coders over an SNR range.
    Sweep(SweepArgs),
    /// Probes on a trained model.
    Probe(ProbeArgs),
    /// KSG mutual-information estimate.
    Mi(MiArgs),
    /// Architecture, parameter counts and FLOP estimate of a checkpoint.
    Info(InfoArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Power {
    Continuous,
    Binary,
}

impl From<Power> for PowerMode {
    fn from(p: Power) -> Self {
        match p {
            Power::Continuous => PowerMode::Continuous,
            Power::Binary => PowerMode::Binary,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, value_enum, default_value = "continuous")]
    power: Power,
    /// Plain-text key=value file applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (default: <out>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the configuration and exit.
    #[arg(long)]
    dry_run: bool,
    /// Overrides such as epochs=5 or lr=1e-3.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long, default_value = "awgn", value_parser = parse_channel)]
    channel: ChannelSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Message length for classical coders.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Interleaver seed for the turbo baselines.
    #[arg(long, default_value_t = 0)]
    interleaver_seed: u64,
    #[arg(long, default_value_t = 100)]
    min_errors: u64,
    #[arg(long, default_value_t = 100_000_000)]
    max_bits: u64,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SimArgs {
    fn stop(&self) -> StopRule {
        StopRule {
            min_errors: self.min_errors,
            max_bits: self.max_bits,
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// turboae:<ckpt>, turbo757, turbolte, rep<r> or uncoded.
    #[arg(long)]
    coder: CoderSpec,
    /// SNR points in dB (flip/erasure probability for bsc/bec).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    snr: Vec<f64>,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "uncoded,rep3,turbo757,turbolte")]
    coders: Vec<CoderSpec>,
    /// start:stop:step, inclusive.
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true, default_value = "-1.5:2:0.5")]
    snr_range: SnrRange,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeKind {
    Blocklength,
    Interleaver,
    Perturb,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long, value_enum)]
    kind: ProbeKind,
    #[arg(long)]
    ckpt: PathBuf,
    /// Operating point for blocklength and interleaver probes.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    snr: f64,
    /// Block lengths for the blocklength probe.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    klist: Vec<usize>,
    /// Random interleavers for the interleaver probe.
    #[arg(long, default_value_t = 3)]
    perms: usize,
    /// Flipped message position for the perturbation probe.
    #[arg(long, default_value_t = 20)]
    flip_index: usize,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dist {
    Gauss,
    Channel,
}

#[derive(Args, Debug)]
struct MiArgs {
    #[arg(long, value_enum, default_value = "gauss")]
    dist: Dist,
    /// Correlation of the Gaussian pair.
    #[arg(long, default_value_t = 0.9, allow_negative_numbers = true)]
    rho: f64,
    /// Channel SNR in dB for --dist channel.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    snr: f64,
    #[arg(long, default_value = "awgn", value_parser = parse_channel)]
    channel: ChannelSpec,
    /// Channel input source for --dist channel.
    #[arg(long, default_value = "uncoded")]
    coder: CoderSpec,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Clone, Debug)]
enum CoderSpec {
    TurboAe(PathBuf),
    Turbo(TurboVariant),
    Rep(usize),
    Uncoded,
}

impl FromStr for CoderSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "turbo757" => Ok(Self::Turbo(TurboVariant::Turbo757)),
            "turbolte" => Ok(Self::Turbo(TurboVariant::TurboLte)),
            "uncoded" => Ok(Self::Uncoded),
            _ => {
                if let Some(path) = s.strip_prefix("turboae:") {
                    return Ok(Self::TurboAe(PathBuf::from(path)));
                }
                match s.strip_prefix("rep").map(str::parse::<usize>) {
                    Some(Ok(r)) if r >= 1 => Ok(Self::Rep(r)),
                    _ => Err(format!(
                        "unknown coder `{s}` (expected turboae:<ckpt>, turbo757, turbolte, rep<r> or uncoded)"
                    )),
                }
            }
        }
    }
}

impl CoderSpec {
    fn build(&self, sim: &SimArgs) -> Result<Box<dyn Coder>> {
        Ok(match self {
            Self::TurboAe(path) => Box::new(load_checkpoint(path)?),
            Self::Turbo(v) => Box::new(TurboCode::new(*v, sim.k, sim.interleaver_seed)),
            Self::Rep(r) => Box::new(Repetition { r: *r, k: sim.k }),
            Self::Uncoded => Box::new(Uncoded { k: sim.k }),
        })
    }
}

#[derive(Clone, Debug)]
struct SnrRange(Vec<f64>);

fn parse_range(s: &str) -> std::result::Result<SnrRange, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.parse::<f64>().map_err(|_| format!("bad number `{p}` in `{s}`")))
        .collect::<std::result::Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(format!("expected start:stop:step, got `{s}`"));
    };
    if !(step > 0.0) || stop < start {
        return Err(format!("empty or unbounded range `{s}`"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok(SnrRange((0..=n).map(|i| start + i as f64 * step).collect()))
}

fn parse_channel(s: &str) -> std::result::Result<ChannelSpec, String> {
    s.parse::<ChannelSpec>().map_err(|e| e.to_string())
}

/// Errors caused by bad invocations; they exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: Error) -> anyhow::Error {
    match e {
        Error::Config(msg) | Error::Parse(msg) => Usage(msg).into(),
        other => other.into(),
    }
}

fn load_checkpoint(path: &Path) -> Result<TurboAe<f32>> {
    let (model, _) = load_model::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

/// Destinations for results and progress messages.
pub struct Io<'a> {
    pub out: &'a mut (dyn Write + Send),
    pub err: &'a mut (dyn Write + Send),
}

fn write_output(io: &mut Io<'_>, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            io.out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn banner(preset: &str, cfg: &TrainConfig, power: PowerMode) -> String {
    let a = &cfg.arch;
    format!(
        "preset={preset} power={} K={} B={}->{} T_enc={} T_dec={} M={} lr={:e} lr_min={:e} filters={} kernel={} \
         enc_layers={} dec_layers={} iterations={} F={} enc_snr={} dec_snr={}..{} channel={} seed={}",
        power.name(),
        a.block_len,
        cfg.batch,
        cfg.batch_max,
        cfg.t_enc,
        cfg.t_dec,
        cfg.epochs,
        cfg.lr,
        cfg.lr_min,
        a.filters,
        a.kernel,
        a.enc_layers,
        a.dec_layers,
        a.iterations,
        a.feature_size,
        cfg.enc_snr_db,
        cfg.dec_snr_range_db.0,
        cfg.dec_snr_range_db.1,
        cfg.channel,
        cfg.seed,
    )
}

fn cmd_train(args: TrainArgs, io: &mut Io<'_>) -> Result<()> {
    let preset = match args.preset {
        Preset::Paper => "paper",
        Preset::Desk => "desk",
    };
    let mut cfg = TrainConfig::preset(preset).map_err(usage)?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).map_err(usage)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    let power = PowerMode::from(args.power);
    writeln!(io.out, "{}", banner(preset, &cfg, power))?;
    if args.dry_run {
        return Ok(());
    }

    let mut hook = |r: &train::EpochRecord, _: &train::PhaseChecksums| {
        let _ = writeln!(io.err, "{}", TrainLog::csv_row(r));
    };
    let (model, log) = match &args.resume {
        Some(path) => {
            let start = load_checkpoint(path)?;
            if start.architecture() != cfg.arch {
                return Err(Usage(format!("{} does not match the configured architecture", path.display())).into());
            }
            if power == PowerMode::Binary && start.power_mode() == PowerMode::Continuous {
                train::pretrain_then_binarize(&start, &cfg, &mut hook)?
            } else {
                let mut start = start;
                start.set_power_mode(power);
                train::run_training(start, &cfg, &mut hook)?
            }
        }
        None => train::run_training(TurboAe::<f32>::new(cfg.arch, power, cfg.seed)?, &cfg, &mut hook)?,
    };

    let meta: BTreeMap<String, String> = [
        ("preset".to_string(), preset.to_string()),
        ("epochs".to_string(), log.records.len().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]
    .into();
    save_model(&model, &args.out, &meta).with_context(|| format!("writing {}", args.out.display()))?;
    let log_path = args.log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    std::fs::write(&log_path, log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
    writeln!(io.out, "checkpoint={} log={}", args.out.display(), log_path.display())?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, io: &mut Io<'_>) -> Result<()> {
    let coder = args.coder.build(&args.sim)?;
    let records = eval::measure(coder.as_ref(), &args.sim.channel, &args.snr, args.sim.stop(), args.sim.seed)?;
    write_output(io, args.sim.out.as_deref(), &eval::records_to_csv(&records))
}

fn cmd_sweep(args: SweepArgs, io: &mut Io<'_>) -> Result<()> {
    let mut records = Vec::new();
    for spec in &args.coders {
        let coder = spec.build(&args.sim)?;
        let stop = args.sim.stop();
        records.extend(eval::measure(coder.as_ref(), &args.sim.channel, &args.snr_range.0, stop, args.sim.seed)?);
    }
    write_output(io, args.sim.out.as_deref(), &eval::records_to_csv(&records))
}

fn cmd_probe(args: ProbeArgs, io: &mut Io<'_>) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    let channel = args.sim.channel.at_point(args.snr).map_err(usage)?;
    let (stop, seed) = (args.sim.stop(), args.sim.seed);
    let text = match args.kind {
        ProbeKind::Blocklength => {
            let records = eval::blocklength_probe(&model, &args.klist, &channel, stop, seed)?;
            eval::records_to_csv(&records)
        }
        ProbeKind::Interleaver => {
            let rep = eval::interleaver_robustness(&model, args.perms, &channel, stop, seed)?;
            for (pseed, _, ratio) in &rep.random {
                writeln!(io.err, "perm_seed={pseed} ber_ratio={ratio:.4}")?;
            }
            writeln!(io.err, "identity ber_ratio={:.4}", rep.identity_ratio)?;
            let mut records = vec![rep.original];
            records.extend(rep.random.into_iter().map(|(_, r, _)| r));
            records.push(rep.identity);
            eval::records_to_csv(&records)
        }
        ProbeKind::Perturb => eval::profile_to_csv(&eval::perturbation_probe(&model, args.flip_index, seed)?),
    };
    write_output(io, args.sim.out.as_deref(), &text)
}

fn cmd_mi(args: MiArgs, io: &mut Io<'_>) -> Result<()> {
    let mut rng = Rng::new(args.seed);
    let (x, y) = match args.dist {
        Dist::Gauss => {
            if !(args.rho.abs() < 1.0) {
                return Err(Usage(format!("--rho must lie in (-1, 1), got {}", args.rho)).into());
            }
            eval::gaussian_pairs(args.n, args.rho, &mut rng)
        }
        Dist::Channel => {
            let sim = SimArgs {
                channel: args.channel,
                seed: args.seed,
                k: 100,
                interleaver_seed: 0,
                min_errors: 0,
                max_bits: 0,
                out: None,
            };
            let coder = args.coder.build(&sim)?;
            let channel = args.channel.at_point(args.snr).map_err(usage)?;
            eval::channel_samples(coder.as_ref(), &channel, args.n, &mut rng)?
        }
    };
    let mi = eval::ksg_mi_scalar(&x, &y, args.k)?;
    writeln!(io.out, "mi_nats={mi:.6} k={} n={}", args.k, args.n)?;
    Ok(())
}

fn cmd_info(args: InfoArgs, io: &mut Io<'_>) -> Result<()> {
    let (model, meta) = load_model::<f32>(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let a = model.architecture();
    writeln!(
        io.out,
        "architecture: K={} filters={} kernel={} enc_layers={} dec_layers={} iterations={} F={} power={}",
        a.block_len,
        a.filters,
        a.kernel,
        a.enc_layers,
        a.dec_layers,
        a.iterations,
        a.feature_size,
        model.power_mode().name()
    )?;
    let (enc, dec) = model.count_params();
    writeln!(io.out, "encoder_params={enc} decoder_params={dec}")?;
    let (fe, fd) = model.count_flops(a.block_len);
    writeln!(io.out, "encoder_flops={fe} decoder_flops={fd} convention=mac")?;
    writeln!(io.out, "interleaver_seed={} frozen_stats={}", model.permutation().seed(), model.frozen_stats().is_some())?;
    for (k, v) in meta {
        writeln!(io.out, "meta.{k}={v}")?;
    }
    Ok(())
}

fn dispatch(cli: Cli, io: &mut Io<'_>) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, io),
        Command::Evaluate(a) => cmd_evaluate(a, io),
        Command::Sweep(a) => cmd_sweep(a, io),
        Command::Probe(a) => cmd_probe(a, io),
        Command::Mi(a) => cmd_mi(a, io),
        Command::Info(a) => cmd_info(a, io),
    }
}

fn execute(cli: Cli, io: &mut Io<'_>) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Usage("--threads must be positive".into()).into()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(cli, io))
        }
        None => dispatch(cli, io),
    }
}

/// Exit status for a failed command: 2 for usage errors, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, S>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = err.write_all(text.as_bytes());
                2
            } else {
                let _ = out.write_all(text.as_bytes());
                0
            };
        }
    };
    let mut io = Io { out, err };
    match execute(cli, &mut io) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e:#}");
            exit_code(&e)
        }
    }
}
