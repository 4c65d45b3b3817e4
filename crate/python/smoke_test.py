"""Smoke test for the pyturbolab extension.

Build and run:
    cargo build --release -p pyturbolab --features extension-module --offline
    ln -sf ../target/release/libpyturbolab.so python/pyturbolab.so
    python3 python/smoke_test.py
"""

import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pyturbolab as tl


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok   {msg}")


def main():
    rng = random.Random(0)

    # Classical turbo code: noiseless round trip.
    code = tl.TurboCode("757", k=40)
    u = [rng.randint(0, 1) for _ in range(40)]
    x = code.encode(u)
    check(len(x) == 40 and all(abs(v) == 1.0 for row in x for v in row), "turbo757 codeword is BPSK")
    y = [[4.0 * v for v in row] for row in x]
    check(code.decode(y, "awgn:snr=10") == u, "turbo757 decodes a clean codeword")

    post, ext = tl.bcjr("757", [2.0, -1.0, 0.5], [1.0, 1.0, -1.0], [0.0, 0.0, 0.0])
    check(len(post) == 3 and len(ext) == 3, "bcjr returns posterior and extrinsic")

    noisy = tl.channel_apply("bsc:p=0.5", [1.0] * 2000, seed=3)
    frac = sum(v < 0 for v in noisy) / len(noisy)
    check(abs(frac - 0.5) < 0.05, f"bsc flips about half the symbols ({frac:.3f})")

    csv = tl.measure("uncoded", "awgn", [0.0], seed=1, min_errors=500)
    lines = csv.strip().splitlines()
    check(lines[0] == tl.CSV_HEADER, "measure emits the CSV header")
    ber = float(lines[1].split(",")[7])
    check(abs(ber - 0.1587) < 0.02, f"uncoded BER at 0 dB ({ber:.4f})")
    check(csv == tl.measure("uncoded", "awgn", [0.0], seed=1, min_errors=500), "measure is deterministic")

    xs = [rng.gauss(0, 1) for _ in range(2000)]
    ys = [0.9 * a + math.sqrt(1 - 0.81) * rng.gauss(0, 1) for a in xs]
    mi = tl.ksg_mi(xs, ys, 4)
    check(abs(mi - 0.8304) < 0.08, f"KSG MI of a rho=0.9 Gaussian ({mi:.3f})")

    # Learned codec: counts, a short training run, encode/decode, checkpoint.
    check(tl.TurboAE("canonical").param_counts() == (152403, 2453656), "canonical parameter counts")
    model = tl.TurboAE("tiny", seed=1, block_len=16)
    log = model.train({"batch": "32", "batch_max": "32", "t_enc": "2", "t_dec": "4",
                       "epochs": "2", "test_batches": "1", "stats_batches": "2"})
    check(len(log) == 2 and all(math.isfinite(r["test_loss"]) for r in log), "training produces a log")
    msgs = [[rng.randint(0, 1) for _ in range(16)] for _ in range(4)]
    cw = model.encode(msgs)
    check(len(cw) == 4 and len(cw[0]) == 16 and len(cw[0][0]) == 3, "encode shape")
    probs = model.decode(cw)
    check(all(0.0 <= p <= 1.0 for row in probs for p in row), "decode returns probabilities")
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = tl.TurboAE.load(path)
        check(again.encode(msgs) == cw, "checkpoint round trip preserves the encoder")
        try:
            tl.TurboAE.load(os.path.join(d, "missing.ckpt"))
            check(False, "missing checkpoint raises")
        except FileNotFoundError:
            check(True, "missing checkpoint raises")
    prof = model.perturbation(flip_index=5)
    check(len(prof) == 16, "perturbation profile has K rows")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
