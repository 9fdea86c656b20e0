"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--step]

Kernel timings compare both paths inside one process.  ``--step`` also times
a full pointer-generator training step in two subprocesses, one of them with
PGNER_DISABLE_NUMBA=1.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pgner import kernels
from pgner._accel import USE_NUMBA

STEP_SNIPPET = """
import time, numpy as np
from pgner import autodiff as ad
from pgner.model import PointerGenConfig, PointerGenerator, make_batch
from pgner.textproc import SeqGenExample
rng = np.random.default_rng(0)
V = 2000
exs = [SeqGenExample(str(i), s, s, [], rng.integers(4, V, size=16), 100)
       for i, s in enumerate(rng.integers(4, V, size=(16, 100)))]
m = PointerGenerator(PointerGenConfig.desk(V))
b = make_batch(exs)
def step():
    m.zero_grad(); ad.backward(m.nll(b))
step()
t = time.perf_counter()
for _ in range(REPEAT):
    step()
print((time.perf_counter() - t) / REPEAT)
"""


def lstm_case(rng, L=100, B=16, D=32, H=64):
    f32 = np.float32
    x = rng.normal(size=(L, B, D)).astype(f32)
    Wx = rng.normal(scale=0.1, size=(D, 4 * H)).astype(f32)
    Wh = rng.normal(scale=0.1, size=(H, 4 * H)).astype(f32)
    b = np.zeros(4 * H, f32)
    h0 = np.zeros((B, H), f32)
    mask = np.ones((L, B, 1), f32)
    return x, Wx, Wh, b, h0, h0.copy(), mask


def cases(rng):
    x, Wx, Wh, b, h0, c0, mask = lstm_case(rng)
    one = np.float32(1)
    hs, cs, gates = kernels.lstm_forward_py(x, Wx, Wh, b, h0, c0, mask, False, one)
    dhs = rng.normal(size=hs.shape).astype(np.float32)
    a = rng.integers(0, 30, size=40)
    c = rng.integers(0, 30, size=45)
    text = rng.integers(0, 4, size=5000)
    pat = np.array([1, 2, 1, 3])
    ids = rng.integers(0, 2100, size=(10, 100))
    vals = rng.random((10, 100))
    return {
        "lstm_forward": (lambda: kernels.lstm_forward_nb(x, Wx, Wh, b, h0, c0, mask, False, one),
                         lambda: kernels.lstm_forward_py(x, Wx, Wh, b, h0, c0, mask, False, one)),
        "lstm_backward": (lambda: kernels.lstm_backward_nb(dhs, x, Wx, Wh, hs, cs, gates, h0, c0, mask, False, one),
                          lambda: kernels.lstm_backward_py(dhs, x, Wx, Wh, hs, cs, gates, h0, c0, mask, False, one)),
        "levenshtein": (lambda: kernels.levenshtein_codes(a, c), lambda: kernels.levenshtein_py(a, c)),
        "kmp_search": (lambda: kernels.kmp_search(pat, text), lambda: kernels.kmp_search_py(pat, text)),
        "scatter_add_rows": (lambda: kernels.scatter_add_rows(np.zeros((10, 2100)), ids, vals),
                             lambda: kernels._scatter_add_rows_np(np.zeros((10, 2100)), ids, vals)),
    }


def best_of(fn, repeat):
    fn()  # warm-up, includes compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def step_time(disable: bool, repeat: int) -> float:
    env = dict(os.environ, PGNER_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.replace("REPEAT", str(repeat))],
                         env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = ap.parse_args(argv)
    if not USE_NUMBA:
        print("numba is disabled or missing; both columns run the numpy path")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, (fast, slow) in cases(rng).items():
        tf, ts = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<18}{tf * 1e3:>12.3f}{ts * 1e3:>12.3f}{ts / tf:>9.1f}x")
    if args.step:
        tf, ts = step_time(False, 5), step_time(True, 5)
        print(f"{'train step':<18}{tf * 1e3:>12.1f}{ts * 1e3:>12.1f}{ts / tf:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
