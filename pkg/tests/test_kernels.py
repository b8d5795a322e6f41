"""Backend equivalence: the numba and numpy paths consume the same draws,
so sampled states must match exactly and accumulated weights to rounding."""

import numpy as np
import pytest

from dbnkit import kernels
from dbnkit.numerics import RngStream


def _with_backend(monkeypatch, backend):
    monkeypatch.setenv("DBNKIT_BACKEND", backend)


def _rbm_args(rng):
    m, n = 7, 5
    return (
        0.3 * rng.standard_normal(m),
        np.zeros(n),
        0.5 * rng.standard_normal((m, n)),
        0.3 * rng.standard_normal(m),
        0.3 * rng.standard_normal(n),
        np.linspace(0.0, 1.0, 41),
        64,
    )


def _grbm_args(rng):
    m, n = 6, 4
    return (
        0.2 * rng.standard_normal(m),
        np.zeros(n),
        0.9,
        0.5 * rng.standard_normal((m, n)),
        0.3 * rng.standard_normal(m),
        0.3 * rng.standard_normal(n),
        0.7,
        np.linspace(0.0, 1.0, 41),
        64,
    )


def _srbm_args(rng):
    m, n = 6, 4
    lat = 0.3 * rng.standard_normal((m, m))
    lat = 0.5 * (lat + lat.T)
    np.fill_diagonal(lat, 0.0)
    return (
        0.3 * rng.standard_normal(m),
        np.zeros(n),
        0.5 * rng.standard_normal((m, n)),
        0.3 * rng.standard_normal(m),
        0.3 * rng.standard_normal(n),
        lat,
        np.linspace(0.0, 1.0, 41),
        64,
    )


@pytest.mark.parametrize(
    "maker,fn",
    [
        (_rbm_args, kernels.ais_rbm),
        (_grbm_args, kernels.ais_grbm),
        (_srbm_args, kernels.ais_srbm),
    ],
)
def test_ais_backend_equivalence(monkeypatch, maker, fn):
    args = maker(np.random.default_rng(0))
    _with_backend(monkeypatch, "numba")
    w_nb, x_nb = fn(*args, RngStream(11).generator())
    _with_backend(monkeypatch, "numpy")
    w_np, x_np = fn(*args, RngStream(11).generator())
    assert np.array_equal(x_nb, x_np)
    assert np.allclose(w_nb, w_np, rtol=1e-12, atol=1e-12)


def test_srbm_sweep_backend_equivalence(monkeypatch):
    rng = np.random.default_rng(3)
    m, chains = 9, 128
    lat = 0.4 * rng.standard_normal((m, m))
    lat = 0.5 * (lat + lat.T)
    np.fill_diagonal(lat, 0.0)
    drive = rng.standard_normal((chains, m))
    x0 = (rng.random((chains, m)) < 0.5).astype(np.float64)
    u = rng.random((chains, m))
    _with_backend(monkeypatch, "numba")
    a = kernels.srbm_sweep(x0.copy(), lat, drive, u)
    _with_backend(monkeypatch, "numpy")
    b = kernels.srbm_sweep(x0.copy(), lat, drive, u)
    assert np.array_equal(a, b)


def test_srbm_sweep_is_sequential():
    # unit i's update must see unit j<i's fresh value within the same sweep
    lat = np.array([[0.0, 50.0], [50.0, 0.0]])
    drive = np.array([[100.0, -25.0]])  # unit 0 switches on, unit 1 follows
    x = np.zeros((1, 2))
    u = np.full((1, 2), 0.5)
    out = kernels.srbm_sweep(x, lat, drive, u)
    assert out[0, 0] == 1.0
    assert out[0, 1] == 1.0  # lateral drive from the fresh unit 0 dominates


def test_backend_flag(monkeypatch):
    _with_backend(monkeypatch, "numpy")
    assert kernels.backend_name() == "numpy"
    _with_backend(monkeypatch, "numba")
    assert kernels.backend_name() == "numba"
