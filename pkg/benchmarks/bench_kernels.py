"""Compare the numba and numpy kernel paths at flow-sized inputs.

Run ``python benchmarks/bench_kernels.py [--n 12000] [--grid 60] [--repeat 20]``.
The sizes default to one 1.5 s band at 8 kHz against the 60-point decay grid,
which is what the denoiser evaluates once per band and flow step.
"""

import argparse
import time

import numpy as np

from rirflow import kernels


def best_of(func, args, repeat):
    func(*args)  # warm-up (numba compiles here)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        func(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=12000)
    parser.add_argument("--grid", type=int, default=60)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    n, L = args.n, args.grid
    x = rng.standard_normal(n) * np.exp(-1e-3 * np.arange(n))
    lam = np.geomspace(6.9 / (3.0 * 8000), 6.9 / (0.1 * 8000), L)
    decay = np.exp(-2 * np.outer(lam, np.arange(n)))
    psi = np.stack([kernels.reverse_cumsum_numpy(r) for r in decay])
    pss = np.einsum("ij,ij->i", psi, psi)
    edc = kernels.reverse_cumsum_sq_numpy(x)
    alpha = rng.uniform(0.1, 1.0, L)
    w = rng.dirichlet(np.ones(L))

    cases = {
        "reverse_cumsum_sq": ((x,), kernels.reverse_cumsum_sq_numpy, kernels.reverse_cumsum_sq_numba),
        "grid_profile": ((x * x, edc, decay, psi, pss, 0.9, 0.01, 1e-12, 1.0),
                         kernels.grid_profile_numpy, kernels.grid_profile_numba),
        "posterior_gain": ((decay, alpha, w, 0.9, 0.01), kernels.posterior_gain_numpy,
                           kernels.posterior_gain_numba),
    }
    print(f"n={n} grid={L} repeat={args.repeat} numba={'yes' if kernels.HAVE_NUMBA else 'no'}")
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, (inputs, f_np, f_nb) in cases.items():
        t_np = best_of(f_np, inputs, args.repeat)
        t_nb = best_of(f_nb, inputs, args.repeat)
        print(f"{name:<20}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()
