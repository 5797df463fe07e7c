"""Time the mixture posterior kernel: numba against the numpy fallback.

    python benchmarks/bench_posterior.py [--chains 512] [--repeat 5]

Levels differ per chain (the adaptive and sequential case), which is where the
two backends diverge most. Results of both backends are checked to agree.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sre import _accel
from sre.paradigm import Paradigm, coefficients
from sre.tasks import correlated_gaussian, latin_square_mixture, sequence_task


def _case(name, gmm, n, dim, chains, rng):
    levels = rng.uniform(0.05, 0.95, (chains, n))
    c = coefficients(Paradigm("cosine-flow"), levels)
    a = np.repeat(c.a, dim, axis=-1)
    b = np.repeat(c.b, dim, axis=-1)
    x0 = gmm.means[rng.integers(gmm.k, size=chains)]
    x = a * x0 + b * rng.standard_normal(x0.shape)
    return name, (x, a, b, gmm.weights, gmm.means, gmm.covs)


def _best(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--chains", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)

    cases = [
        _case("gaussian-2d", correlated_gaussian([0.0, 0.0], 0.8)[0], 2, 1, args.chains, rng),
        _case("latin-3x3 (k=12)", latin_square_mixture(3, 0.1)[0], 9, 1, args.chains, rng),
        _case("ar1-len8", sequence_task(8, 0.9)[0], 8, 1, args.chains, rng),
    ]
    print(f"{'case':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  max|diff|")
    for name, inputs in cases:
        t_np = _best(lambda: _accel.component_posteriors(*inputs, backend="numpy"), args.repeat)
        if not _accel.HAVE_NUMBA:
            print(f"{name:<18}{t_np * 1e3:>10.2f}{'n/a':>10}{'':>9}  (numba disabled)")
            continue
        t_nb = _best(lambda: _accel.component_posteriors(*inputs, backend="numba"), args.repeat)
        ref = _accel.component_posteriors(*inputs, backend="numpy")
        got = _accel.component_posteriors(*inputs, backend="numba")
        diff = max(float(np.max(np.abs(r - g))) for r, g in zip(ref, got))
        print(f"{name:<18}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
