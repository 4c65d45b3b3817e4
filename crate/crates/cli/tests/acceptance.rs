//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. `ACCEPTANCE_ONLY=1,4,9` restricts the run.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use turbolab::channels::{markov_states, rayleigh_gains, MarkovState};
use turbolab::classic::{bcjr, rsc_encode, Repetition, Trellis, TurboCode, TurboVariant};
use turbolab::eval::{self, StopRule, Uncoded};
use turbolab::nn::gradcheck::{self, DEFAULT_STEP};
use turbolab::nn::{NormMode, Tensor};
use turbolab::train::{self, TrainConfig};
use turbolab::turboae::{load_model, save_model, Architecture, PowerMode, TurboAe};
use turbolab::{random_bits, BitBlock, ChannelSpec, RealBlock, Rng};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Posterior LLRs by enumerating every message.
fn brute_force_posterior(t: &Trellis, sys: &[f64], par: &[f64], prior: &[f64]) -> Vec<f64> {
    let k = sys.len();
    let mut one = vec![f64::NEG_INFINITY; k];
    let mut zero = vec![f64::NEG_INFINITY; k];
    for m in 0u32..(1 << k) {
        let u = BitBlock::new((0..k).map(|i| ((m >> i) & 1) as u8).collect()).unwrap();
        let (_, p, _) = rsc_encode(t, &u);
        let metric: f64 = (0..k)
            .map(|i| u.bits()[i] as f64 * (sys[i] + prior[i]) + p.bits()[i] as f64 * par[i])
            .sum();
        for i in 0..k {
            let slot = if u.bits()[i] == 1 { &mut one[i] } else { &mut zero[i] };
            *slot = lse(*slot, metric);
        }
    }
    one.iter().zip(&zero).map(|(a, b)| a - b).collect()
}

fn c1_bcjr_brute_force() -> Verdict {
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    for n in 0..200 {
        let t = if n % 2 == 0 { Trellis::turbo757() } else { Trellis::lte() };
        let k = 1 + rng.below(10) as usize;
        let mut draw = |s: f64| (0..k).map(|_| s * rng.normal()).collect::<Vec<f64>>();
        let (sys, par, prior) = (draw(2.0), draw(2.0), draw(1.0));
        let fast = bcjr(&t, &sys, &par, &prior).unwrap().posterior;
        let slow = brute_force_posterior(&t, &sys, &par, &prior);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst <= 1e-9, format!("200 instances, K<=10, both trellises, max |dLLR|={worst:.2e} (tol 1e-9)"))
}

fn c2_rsc_structure() -> Verdict {
    let t = Trellis::turbo757();
    let (_, impulse, _) = rsc_encode(&t, &BitBlock::new(vec![1, 0, 0, 0]).unwrap());
    let impulse_ok = impulse.bits() == [1, 1, 1, 0];
    let mut rng = Rng::new(2);
    let mut violations = 0;
    for _ in 0..1000 {
        let a = random_bits(&mut rng, 64);
        let b = random_bits(&mut rng, 64);
        let (_, pa, _) = rsc_encode(&t, &a);
        let (_, pb, _) = rsc_encode(&t, &b);
        let (_, pab, _) = rsc_encode(&t, &a.xor(&b).unwrap());
        violations += (pab != pa.xor(&pb).unwrap()) as usize;
    }
    verdict(
        impulse_ok && violations == 0,
        format!("impulse parity {:?} (want [1, 1, 1, 0]); GF(2) linearity violations {violations}/1000", impulse.bits()),
    )
}

fn c3_turbo_baselines() -> Verdict {
    let stop = StopRule::default();
    let awgn = ChannelSpec::awgn(0.0);
    let code = TurboCode::new(TurboVariant::Turbo757, 100, 0);
    let recs = eval::measure(&code, &awgn, &[0.0, 1.0, 2.0], stop, 3).unwrap();
    let bers: Vec<f64> = recs.iter().map(|r| r.ber).collect();
    let decreasing = bers.windows(2).all(|w| w[1] < w[0]);
    let enough = recs.iter().all(|r| r.bit_errors >= 100);

    let one_iter = TurboCode { iterations: 1, ..code.clone() };
    let b1 = eval::measure_point(&one_iter, &ChannelSpec::awgn(1.0), stop, 3, 1).unwrap().ber;
    let b6 = bers[1];

    let fixed = StopRule { min_errors: u64::MAX, max_bits: 4_000_000 };
    let unc = eval::measure_point(&Uncoded { k: 100 }, &awgn, fixed, 3, 0).unwrap().ber;
    let rep = eval::measure_point(&Repetition { r: 3, k: 100 }, &awgn, fixed, 3, 0).unwrap().ber;

    let pass = decreasing && enough && b6 <= 0.5 * b1 && (unc - 0.1587).abs() <= 0.002 && (rep - 0.0416).abs() <= 0.002;
    verdict(
        pass,
        format!(
            "turbo757 K=100 BER@0/1/2dB={:.3e}/{:.3e}/{:.3e} errors={:?}; 6-iter {b6:.3e} vs 1-iter {b1:.3e}; \
             uncoded@0dB={unc:.4} (0.1587+-0.002); rep3@0dB={rep:.4} (0.0416+-0.002)",
            bers[0],
            bers[1],
            bers[2],
            recs.iter().map(|r| r.bit_errors).collect::<Vec<_>>()
        ),
    )
}

fn rand_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

fn c4_gradchecks() -> Verdict {
    let h = DEFAULT_STEP;
    let target: Vec<f64> = (0..24).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    let mut results: Vec<(&str, f64)> = Vec::new();
    let conv = [
        rand_tensor(vec![2, 9, 3], 1, -1.0, 1.0),
        rand_tensor(vec![4, 3, 5], 2, -0.5, 0.5),
        rand_tensor(vec![4], 3, -0.5, 0.5),
    ];
    results.push(("conv1d", gradcheck::check(|t, v| t.conv1d(v[0], v[1], v[2]), &conv, h).unwrap()));
    let lin = [
        rand_tensor(vec![2, 6, 4], 4, -1.0, 1.0),
        rand_tensor(vec![3, 4], 5, -1.0, 1.0),
        rand_tensor(vec![3], 6, -1.0, 1.0),
    ];
    results.push(("linear", gradcheck::check(|t, v| t.linear(v[0], v[1], v[2]), &lin, h).unwrap()));
    let act = [rand_tensor(vec![2, 12, 2], 7, -3.0, 3.0)];
    results.push(("elu", gradcheck::check(|t, v| Ok(t.elu(v[0])), &act, h).unwrap()));
    results.push(("sigmoid", gradcheck::check(|t, v| Ok(t.sigmoid(v[0])), &act, h).unwrap()));
    let p = [rand_tensor(vec![2, 12, 1], 8, 0.05, 0.95)];
    results.push(("bce", gradcheck::check(|t, v| t.bce(v[0], &target), &p, h).unwrap()));
    let q = [rand_tensor(vec![2, 12, 1], 9, -4.0, 4.0)];
    results.push(("bce_logits", gradcheck::check(|t, v| t.bce_with_logits(v[0], &target), &q, h).unwrap()));
    let x = [rand_tensor(vec![3, 8, 3], 10, -2.0, 2.0)];
    results.push((
        "block_normalize",
        gradcheck::check(|t, v| Ok(t.normalize(v[0], &NormMode::BatchStats)?.0), &x, h).unwrap(),
    ));
    let s = [rand_tensor(vec![2, 20, 1], 11, -2.0, 2.0)];
    let clamp = |t: &[Tensor<f64>]| Ok(t[0].data().iter().map(|x| x.clamp(-1.0, 1.0)).collect());
    results.push(("ste_sign", gradcheck::check_against(|t, v| Ok(t.ste_sign(v[0])), clamp, &s, h).unwrap()));
    let tiny = TurboAe::<f64>::new(Architecture::tiny(), PowerMode::Continuous, 5).unwrap();
    let mut rng = Rng::new(12);
    let msgs: Vec<BitBlock> = (0..4).map(|_| random_bits(&mut rng, 8)).collect();
    results.push(("turboae_tiny", tiny.gradcheck(&msgs, &ChannelSpec::awgn(0.0), 3, h).unwrap()));
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let listing: Vec<String> = results.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    verdict(worst < 1e-6, format!("relative errors (tol 1e-6): {}", listing.join(" ")))
}

fn c5_counts_and_flops() -> Verdict {
    let m = TurboAe::<f32>::new(Architecture::canonical(), PowerMode::Continuous, 0).unwrap();
    let (enc, dec) = m.count_params();
    let (fe, fd) = m.count_flops(100);
    let within = |v: u64, t: f64| (v as f64) >= t / 2.0 && (v as f64) <= 2.0 * t;
    let pass = enc == 152_403 && dec == 2_453_656 && within(fe, 1.8e6) && within(fd, 294.15e6);
    verdict(
        pass,
        format!(
            "params enc={enc} (152403) dec={dec} (2453656); MACs enc={fe} (target 1.8M, x{:.2}) dec={fd} (target 294.15M, x{:.2})",
            fe as f64 / 1.8e6,
            fd as f64 / 294.15e6
        ),
    )
}

fn c6_desk_training() -> Verdict {
    let start = Instant::now();
    let cfg = TrainConfig::desk();
    let mut progress = |r: &train::EpochRecord, _: &train::PhaseChecksums| {
        eprintln!("  desk epoch {} test_loss={:.4} ({:.0}s)", r.epoch, r.test_loss, start.elapsed().as_secs_f64());
    };
    let cont = TurboAe::<f32>::new(cfg.arch, PowerMode::Continuous, cfg.seed).unwrap();
    let (cont, _) = train::run_training(cont, &cfg, &mut progress).unwrap();
    let stop = StopRule { min_errors: 1000, max_bits: 2_000_000 };
    let ber = eval::measure_point(&cont, &ChannelSpec::awgn(1.0), stop, 6, 0).unwrap().ber;

    let short = TrainConfig { epochs: 10, ..cfg.clone() };
    let (_, ft_log) = train::pretrain_then_binarize(&cont, &short, &mut progress).unwrap();
    let scratch = TurboAe::<f32>::new(cfg.arch, PowerMode::Binary, cfg.seed).unwrap();
    let (_, sc_log) = train::run_training(scratch, &short, &mut progress).unwrap();
    let ft = ft_log.records.last().unwrap().test_loss;
    let sc = sc_log.records.last().unwrap().test_loss;
    let elapsed = start.elapsed();
    let pass = ber <= 0.05 && ft < sc && elapsed < Duration::from_secs(7200);
    verdict(
        pass,
        format!(
            "continuous BER@1dB={ber:.4} (<=0.05); binary test loss fine-tune={ft:.4} vs scratch={sc:.4}; {:.0}s (<7200s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

fn c7_channel_statistics() -> Verdict {
    const N: usize = 2_000_000;
    let zeros = RealBlock::single(vec![0.0; N]).unwrap();
    let mut rng = Rng::new(7);
    let noise = |spec: &str, rng: &mut Rng| {
        let c: ChannelSpec = spec.parse().unwrap();
        c.apply(&zeros, rng).unwrap().into_values()
    };
    let (_, v_awgn) = mean_var(&noise("awgn:snr=0", &mut rng));
    let (_, v_atn) = mean_var(&noise("atn:nu=3,snr=0", &mut rng));
    let states = markov_states(N, 0.8, Some(MarkovState::Good), &mut rng);
    let switches = states.windows(2).filter(|w| w[0] != w[1]).count() as f64 / (N - 1) as f64;
    let (h_mean, _) = mean_var(&rayleigh_gains(N, &mut rng));
    let ones = RealBlock::single(vec![1.0; N]).unwrap();
    let bsc: ChannelSpec = "bsc:p=0.1".parse().unwrap();
    let flips = bsc.apply(&ones, &mut rng).unwrap().values().iter().filter(|&&v| v < 0.0).count() as f64 / N as f64;
    let pass = (v_awgn - 1.0).abs() <= 0.005
        && (v_atn - 1.0).abs() <= 0.1
        && (switches - 0.8).abs() <= 0.002
        && (h_mean - 1.0).abs() <= 0.003
        && (flips - 0.1).abs() <= 0.001;
    verdict(
        pass,
        format!(
            "n={N}: awgn var={v_awgn:.4} (1+-0.5%); atn(3) var={v_atn:.4} (1+-10%); markov switch={switches:.4} \
             (0.800+-0.002); rayleigh E[h]={h_mean:.4} (1+-0.003); bsc flips={flips:.4} (0.1+-0.001)"
        ),
    )
}

fn c8_ksg() -> Verdict {
    let n = 10_000;
    let mut rng = Rng::new(8);
    let (x, y) = eval::gaussian_pairs(n, 0.0, &mut rng);
    let indep = eval::ksg_mi_scalar(&x, &y, 4).unwrap();
    let (x, y) = eval::gaussian_pairs(n, 0.9, &mut rng);
    let corr = eval::ksg_mi_scalar(&x, &y, 4).unwrap();
    verdict(
        indep.abs() <= 0.03 && (corr - 0.830).abs() <= 0.05,
        format!("n={n} k=4: independent MI={indep:.4} (|.|<=0.03); rho=0.9 MI={corr:.4} (0.830+-0.05)"),
    )
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_turbolab")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn c9_reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let tiny = [
        "block_len=20", "filters=4", "dec_layers=2", "iterations=2", "feature_size=2", "batch=16", "batch_max=16",
        "t_enc=1", "t_dec=2", "epochs=2", "test_batches=1", "stats_batches=2",
    ];
    let mut same = Vec::new();
    for run in ["a", "b"] {
        let ckpt = p(&format!("{run}.ckpt"));
        let mut args = vec!["train".to_string(), "--out".into(), ckpt.clone()];
        args.extend(tiny.iter().map(|s| s.to_string()));
        cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
        let coder = format!("turboae:{ckpt}");
        cli(&["evaluate", "--coder", "turbo757", "--snr", "0,1", "--seed", "9", "--out", &p(&format!("{run}_turbo.csv"))]);
        cli(&["evaluate", "--coder", &coder, "--snr", "0,2", "--channel", "atn:nu=3", "--max-bits", "20000", "--out", &p(&format!("{run}_ae.csv"))]);
        cli(&["sweep", "--coders", "uncoded,rep3", "--snr-range", "-1:1:1", "--max-bits", "50000", "--out", &p(&format!("{run}_sweep.csv"))]);
        cli(&["probe", "--kind", "interleaver", "--ckpt", &ckpt, "--max-bits", "10000", "--out", &p(&format!("{run}_il.csv"))]);
        cli(&["probe", "--kind", "perturb", "--ckpt", &ckpt, "--flip-index", "3", "--out", &p(&format!("{run}_pt.csv"))]);
    }
    for f in [".ckpt", "_turbo.csv", "_ae.csv", "_sweep.csv", "_il.csv", "_pt.csv"] {
        let a = std::fs::read(d.join(format!("a{f}"))).unwrap();
        let b = std::fs::read(d.join(format!("b{f}"))).unwrap();
        same.push((f, a == b));
    }

    let mut model = TurboAe::<f32>::new(Architecture::desk(), PowerMode::Continuous, 3).unwrap();
    model.compute_frozen_stats(2, 16, &mut Rng::new(1)).unwrap();
    let meta = BTreeMap::from([("note".to_string(), "round-trip".to_string())]);
    let first = d.join("rt1.ckpt");
    let second = d.join("rt2.ckpt");
    save_model(&model, &first, &meta).unwrap();
    let (back, meta_back) = load_model::<f32>(&first).unwrap();
    save_model(&back, &second, &meta_back).unwrap();
    let round_trip = read(&first) == read(&second) && back == model;

    let pass = same.iter().all(|s| s.1) && round_trip;
    verdict(pass, format!("repeat-run byte equality {same:?}; checkpoint round trip identical={round_trip}"))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn c10_phase_isolation() -> Verdict {
    let cfg = TrainConfig {
        arch: Architecture { block_len: 40, ..Architecture::tiny() },
        batch: 32,
        batch_max: 64,
        t_enc: 3,
        t_dec: 5,
        epochs: 5,
        test_batches: 2,
        stats_batches: 2,
        patience: 1,
        ..TrainConfig::desk()
    };
    let mut sums = Vec::new();
    let model = TurboAe::<f64>::new(cfg.arch, PowerMode::Continuous, 4).unwrap();
    train::run_training(model, &cfg, &mut |_, s| sums.push(*s)).unwrap();
    let ok = sums.len() == 5 && sums.iter().all(|s| s.isolated());
    verdict(ok, format!("{} epochs, frozen-half checksums unchanged in every phase: {ok}", sums.len()))
}

type Criterion = (&'static str, fn() -> Verdict, u64);

fn main() {
    turbolab::train::retain_freed_memory();
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        ("bcjr_matches_brute_force", c1_bcjr_brute_force, 60),
        ("rsc_impulse_and_linearity", c2_rsc_structure, 60),
        ("turbo_and_uncoded_baselines", c3_turbo_baselines, 600),
        ("gradchecks", c4_gradchecks, 120),
        ("parameter_and_flop_counts", c5_counts_and_flops, 60),
        ("desk_training", c6_desk_training, 7200),
        ("channel_statistics", c7_channel_statistics, 60),
        ("ksg_estimator", c8_ksg, 60),
        ("reproducibility", c9_reproducibility, 600),
        ("phase_isolation", c10_phase_isolation, 60),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("SKIP [{id:2}] {name}");
            continue;
        }
        let t = Instant::now();
        let v = run();
        let secs = t.elapsed().as_secs_f64();
        let pass = v.pass && secs < *budget as f64;
        failed += (!pass) as usize;
        println!(
            "{} [{id:2}] {name}: {} [{secs:.1}s, budget {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!("acceptance: {} of 10 criteria failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
