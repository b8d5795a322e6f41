#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs the annealed-importance chain kernels and the sequential visible
sweep under both backends and prints a timing table.  Backend selection
goes through the same DBNKIT_BACKEND environment flag the library uses.
"""

import os
import time

import numpy as np

os.environ.setdefault("DBNKIT_BACKEND", "numba")

from dbnkit import estimation, kernels, models
from dbnkit.numerics import RngStream


def _random_model(variant, m, n, rng):
    w = 0.3 * rng.standard_normal((m, n))
    b = 0.3 * rng.standard_normal(m)
    c = 0.3 * rng.standard_normal(n)
    if variant == "rbm":
        return models.Rbm(w, b, c)
    if variant == "grbm":
        return models.Grbm(w, b, c, 0.7)
    lat = 0.2 * rng.standard_normal((m, m))
    lat = 0.5 * (lat + lat.T)
    np.fill_diagonal(lat, 0.0)
    return models.Srbm(w, b, c, lat)


def time_ais(variant, m, n, chains, betas, repeats=3):
    rng = RngStream(0).generator()
    model = _random_model(variant, m, n, rng)
    base = estimation.fit_base_model(model)
    schedule = estimation.AisSchedule(estimation.linear_betas(betas), chains, base)
    timings = {}
    for backend in ("numba", "numpy"):
        os.environ["DBNKIT_BACKEND"] = backend
        estimation.run_ais(model, schedule, RngStream(1))  # warm-up / jit compile
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            estimation.run_ais(model, schedule, RngStream(1))
            best = min(best, time.perf_counter() - t0)
        timings[backend] = best
    return timings


def time_sweep(m, chains, sweeps, repeats=3):
    rng = RngStream(2).generator()
    lat = 0.2 * rng.standard_normal((m, m))
    lat = 0.5 * (lat + lat.T)
    np.fill_diagonal(lat, 0.0)
    drive = rng.standard_normal((chains, m))
    timings = {}
    for backend in ("numba", "numpy"):
        os.environ["DBNKIT_BACKEND"] = backend
        x = (rng.random((chains, m)) < 0.5).astype(np.float64)
        u = rng.random((chains, m))
        kernels.srbm_sweep(x.copy(), lat, drive, u)  # warm-up
        best = float("inf")
        for _ in range(repeats):
            state = x.copy()
            t0 = time.perf_counter()
            for _ in range(sweeps):
                kernels.srbm_sweep(state, lat, drive, u)
            best = min(best, time.perf_counter() - t0)
        timings[backend] = best
    return timings


def main():
    rows = []
    for variant, m, n, chains, betas in (
        ("rbm", 12, 10, 100, 1000),
        ("rbm", 12, 10, 2, 1000),
        ("grbm", 16, 12, 100, 1000),
        ("srbm", 10, 8, 100, 500),
        ("srbm", 10, 8, 4096, 100),
    ):
        t = time_ais(variant, m, n, chains, betas)
        rows.append((f"ais {variant} {m}x{n} chains={chains} K={betas}", t))
    t = time_sweep(16, 4096, 200)
    rows.append(("srbm sweep m=16 chains=4096 x200", t))

    print(f"{'kernel':<44} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for name, t in rows:
        print(
            f"{name:<44} {t['numba'] * 1e3:>8.1f}ms {t['numpy'] * 1e3:>8.1f}ms "
            f"{t['numpy'] / t['numba']:>7.1f}x"
        )


if __name__ == "__main__":
    main()
