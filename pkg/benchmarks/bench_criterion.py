"""Time the criterion kernel on both backends.

The per-candidate evaluation dominates a run (the optimizer calls it
dozens of times per step), so this is the number that decides whether
the compiled path is worth keeping.  Usage:

    python3 benchmarks/bench_criterion.py [--draws 100 500] [--repeat 200]
"""
import argparse
import time

import numpy as np

from oed import kernels
from oed.design import PriorSpec, draw_prior, measurement_update, _prepare
from oed.models import builtin_msd
from oed.simulate import simulate_step


def build_data(n_draws, steps, seed=0):
    defn = builtin_msd()
    rng = np.random.default_rng(seed)
    ens = draw_prior(defn, PriorSpec([1.4, 4.0], [0.2, 2.0]), n_draws, rng)
    model = defn.builder(np.array([1.0, 2.0]))
    x = np.zeros(2)
    # a few closed-loop measurements so the prepared state is generic
    for _ in range(5):
        u = rng.uniform(-1.0, 1.0, size=1)
        x, y = simulate_step(model, x, u, rng)
        measurement_update(ens, u, y)
    return _prepare(ens, steps)


def timeit(fn, repeat):
    fn()  # warm (JIT compile, caches)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--draws", type=int, nargs="+", default=[50, 100, 500])
    ap.add_argument("--steps", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()

    rng = np.random.default_rng(1)
    print(f"{'N':>6} {'steps':>5} {'numpy':>12} {'numba':>12} {'speedup':>8}")
    for n in args.draws:
        data = build_data(n, args.steps)
        z = rng.uniform(-1.0, 1.0, size=data.n_controls)
        v_np, g_np = kernels.criterion_and_grad(data, z, backend="numpy")
        v_nb, g_nb = kernels.criterion_and_grad(data, z, backend="numba")
        assert abs(v_np - v_nb) < 1e-9 * max(1.0, abs(v_np))
        assert np.allclose(g_np, g_nb, atol=1e-9)
        t_np = timeit(lambda: kernels.criterion_and_grad(data, z, backend="numpy"),
                      args.repeat)
        t_nb = timeit(lambda: kernels.criterion_and_grad(data, z, backend="numba"),
                      args.repeat)
        print(f"{n:>6} {args.steps:>5} {t_np * 1e6:>10.1f}us {t_nb * 1e6:>10.1f}us "
              f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
