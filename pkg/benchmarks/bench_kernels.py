"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py [--sizes 500 5000 50000] [--repeat 5]

The first table times each kernel directly (numba compilation is warmed
up beforehand).  The second runs one HMM fit end to end in a subprocess,
once as is and once with ``ICPH_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from icph import _kernels as k

FIT_SNIPPET = """
import time
import numpy as np
from icph.estimation import FitOptions, fit
rng = np.random.default_rng(0)
m = {m}
h = np.zeros(m, dtype=int)
for t in range(1, m):
    h[t] = h[t - 1] if rng.random() < 0.9 else 1 - h[t - 1]
x = rng.normal(size=m)
y = np.where(h == 0, x, -x) + 0.5 * rng.normal(size=m)
fit(y[:50], x[:50], FitOptions(model="HMM", num_restarts=1))
t0 = time.perf_counter()
fit(y, x, FitOptions(model="HMM", num_restarts=2))
print(time.perf_counter() - t0)
"""


def inputs(m, nst, rng):
    logdens = rng.normal(-1.0, 1.0, size=(m, nst))
    gamma = rng.dirichlet(np.full(nst, 4.0), size=nst)
    lam = np.full(nst, 1.0 / nst)
    return logdens, gamma, lam


def best_of(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def kernel_table(sizes, repeat):
    if not k.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(1)
    print(f"{'kernel':<22}{'m':>8}{'l':>3}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for m in sizes:
        for nst in (2, 3):
            logdens, gamma, lam = inputs(m, nst, rng)
            loglam = np.log(lam)
            cases = {
                "iid_posteriors": (k.iid_posteriors_numpy, k.iid_posteriors_numba, (logdens, loglam)),
                "hmm_forward": (k.hmm_forward_numpy, k.hmm_forward_numba, (logdens, gamma, lam)),
                "hmm_forward_backward": (k.hmm_forward_backward_numpy, k.hmm_forward_backward_numba,
                                         (logdens, gamma, lam)),
            }
            for name, (slow, fast, args) in cases.items():
                fast(*args)
                t_np = best_of(lambda: slow(*args), repeat)
                t_nb = best_of(lambda: fast(*args), repeat)
                print(f"{name:<22}{m:>8}{nst:>3}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


def fit_table(m):
    print(f"\nHMM fit, m={m}, 2 restarts")
    for label, flag in (("numba", ""), ("numpy", "1")):
        env = dict(os.environ, ICPH_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET.format(m=m)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  {label:<6}{float(out.stdout):8.2f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[500, 5000, 50000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--fit-m", type=int, default=2000)
    args = ap.parse_args()
    kernel_table(args.sizes, args.repeat)
    fit_table(args.fit_m)


if __name__ == "__main__":
    main()
