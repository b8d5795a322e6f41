"""Hot sampling kernels with a numba fast path and a pure-numpy fallback.

The backend is read from the environment variable ``DBNKIT_BACKEND``
("numba" or "numpy"; default is numba when importable).  Both paths
execute the same source, so they consume random draws in the same order:
sampled states are identical across backends and accumulated log weights
agree to floating-point rounding.

Annealed-importance chains run against a zero-weight base model of the
same variant, so kernels only receive the base biases (and scale).  The
intermediate distribution at inverse temperature ``beta`` is the visible
marginal of the augmented machine whose two hidden-unit groups carry the
base and target energies scaled by ``1 - beta`` and ``beta``; because the
base has no weights, its hidden group decouples and is never sampled.
"""

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency normally
    numba = None
    _HAVE_NUMBA = False

_ENV_VAR = "DBNKIT_BACKEND"


def backend_name() -> str:
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("DBNKIT_BACKEND=numba but numba is not installed")
        return "numba"
    return "numba" if _HAVE_NUMBA else "numpy"


def _sigmoid(z):
    # tanh form: stable for large |z| without branching
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _softplus_rows(z):
    # sum_j log(1 + exp(z_ij)) for a (n, j) matrix
    return np.sum(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))), axis=1)


def _softplus_vec(z):
    return np.sum(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))))


def _srbm_sweep_impl(x, lateral, drive, u):
    """One sequential Gibbs sweep over visible units, batched over rows of x.

    ``lateral`` must be symmetric with zero diagonal (rows usable as
    columns) and C-contiguous; ``drive`` carries all non-lateral logit
    terms.  Updates x in place and returns it.
    """
    m = x.shape[1]
    for i in range(m):
        logits = np.dot(x, lateral[i]) + drive[:, i]
        x[:, i] = (u[:, i] < _sigmoid(logits)).astype(np.float64)
    return x


def _ais_rbm_impl(base_b, base_c, wt, bt, ct, betas, n_chains, rng):
    """AIS chains for a binary RBM target from a zero-weight base.

    Weight increments are accumulated in delta form,
    log f_k(x) - log f_{k-1}(x) factored so that shared subexpressions
    cancel exactly; for target == base every weight is exactly zero.
    Returns per-chain log importance weights (base partition function not
    included) and the final visible states, distributed near the target.
    """
    n_steps = betas.shape[0] - 1
    m = base_b.shape[0]

    x = (rng.random((n_chains, m)) < _sigmoid(base_b)).astype(np.float64)
    log_w = np.zeros(n_chains)

    for k in range(1, n_steps + 1):
        b0 = betas[k - 1]
        b1 = betas[k]
        act = np.dot(x, wt) + ct
        log_w += (
            (b1 - b0) * (np.dot(x, bt) - np.dot(x, base_b))
            + (_softplus_vec((1.0 - b1) * base_c) - _softplus_vec((1.0 - b0) * base_c))
            + (_softplus_rows(b1 * act) - _softplus_rows(b0 * act))
        )
        if k < n_steps:
            u_h = rng.random((n_chains, ct.shape[0]))
            y = (u_h < _sigmoid(b1 * act)).astype(np.float64)
            u_v = rng.random((n_chains, m))
            vis_logits = (1.0 - b1) * base_b + b1 * (np.dot(y, wt.T) + bt)
            x = (u_v < _sigmoid(vis_logits)).astype(np.float64)
    return log_w, x


def _ais_grbm_impl(base_b, base_c, base_sigma, wt, bt, ct, sigma_t, betas, n_chains, rng):
    """AIS chains for a Gaussian-visible target from a zero-weight base."""
    n_steps = betas.shape[0] - 1
    m = base_b.shape[0]

    x = base_b + base_sigma * rng.standard_normal((n_chains, m))
    log_w = np.zeros(n_chains)

    for k in range(1, n_steps + 1):
        b0 = betas[k - 1]
        b1 = betas[k]
        act = np.dot(x, wt) / sigma_t + ct
        d0 = x - base_b
        dt = x - bt
        quad_base = np.sum(d0 * d0, axis=1) / (2.0 * base_sigma * base_sigma)
        quad_target = np.sum(dt * dt, axis=1) / (2.0 * sigma_t * sigma_t)
        log_w += (
            (b1 - b0) * (quad_base - quad_target)
            + (_softplus_vec((1.0 - b1) * base_c) - _softplus_vec((1.0 - b0) * base_c))
            + (_softplus_rows(b1 * act) - _softplus_rows(b0 * act))
        )
        if k < n_steps:
            u_h = rng.random((n_chains, ct.shape[0]))
            y = (u_h < _sigmoid(b1 * act)).astype(np.float64)
            # gaussian visible conditional of the augmented machine
            lam = (1.0 - b1) / (base_sigma * base_sigma) + b1 / (sigma_t * sigma_t)
            mean = (
                (1.0 - b1) * base_b / (base_sigma * base_sigma)
                + b1 * bt / (sigma_t * sigma_t)
                + b1 * np.dot(y, wt.T) / sigma_t
            ) / lam
            x = mean + rng.standard_normal((n_chains, m)) / np.sqrt(lam)
    return log_w, x


def _ais_srbm_impl(base_b, base_c, wt, bt, ct, lt, betas, n_chains, rng):
    """AIS chains for a lateral-connected binary target from a zero-weight base.

    The visible update is one full sequential Gibbs sweep per annealing
    step, with the lateral matrix scaled by beta.
    """
    n_steps = betas.shape[0] - 1
    m = base_b.shape[0]

    x = (rng.random((n_chains, m)) < _sigmoid(base_b)).astype(np.float64)
    log_w = np.zeros(n_chains)

    for k in range(1, n_steps + 1):
        b0 = betas[k - 1]
        b1 = betas[k]
        act = np.dot(x, wt) + ct
        target_lin = np.dot(x, bt) + 0.5 * np.sum(np.dot(x, lt) * x, axis=1)
        log_w += (
            (b1 - b0) * (target_lin - np.dot(x, base_b))
            + (_softplus_vec((1.0 - b1) * base_c) - _softplus_vec((1.0 - b0) * base_c))
            + (_softplus_rows(b1 * act) - _softplus_rows(b0 * act))
        )
        if k < n_steps:
            u_h = rng.random((n_chains, ct.shape[0]))
            y = (u_h < _sigmoid(b1 * act)).astype(np.float64)
            drive = (1.0 - b1) * base_b + b1 * (np.dot(y, wt.T) + bt)
            u_v = rng.random((n_chains, m))
            x = _srbm_sweep_impl(x, b1 * lt, drive, u_v)
    return log_w, x


if _HAVE_NUMBA:
    import types

    _jit = numba.njit(cache=True, nogil=True)
    _jitted_helpers = {}

    def _jit_with_helpers(impl):
        # clone the function with jitted helpers bound in its globals, so
        # the same source serves both backends
        glb = dict(impl.__globals__)
        glb.update(_jitted_helpers)
        clone = types.FunctionType(impl.__code__, glb, impl.__name__ + "_numba")
        return _jit(clone)

    _jitted_helpers["_sigmoid"] = _jit(_sigmoid)
    _jitted_helpers["_softplus_rows"] = _jit(_softplus_rows)
    _jitted_helpers["_softplus_vec"] = _jit(_softplus_vec)
    _srbm_sweep_numba = _jit_with_helpers(_srbm_sweep_impl)
    _jitted_helpers["_srbm_sweep_impl"] = _srbm_sweep_numba

    _ais_rbm_numba = _jit_with_helpers(_ais_rbm_impl)
    _ais_grbm_numba = _jit_with_helpers(_ais_grbm_impl)
    _ais_srbm_numba = _jit_with_helpers(_ais_srbm_impl)


def srbm_sweep(x, lateral, drive, u):
    if backend_name() == "numba":
        return _srbm_sweep_numba(x, lateral, drive, u)
    return _srbm_sweep_impl(x, lateral, drive, u)


def ais_rbm(base_b, base_c, wt, bt, ct, betas, n_chains, rng):
    if backend_name() == "numba":
        return _ais_rbm_numba(base_b, base_c, wt, bt, ct, betas, n_chains, rng)
    return _ais_rbm_impl(base_b, base_c, wt, bt, ct, betas, n_chains, rng)


def ais_grbm(base_b, base_c, base_sigma, wt, bt, ct, sigma_t, betas, n_chains, rng):
    if backend_name() == "numba":
        return _ais_grbm_numba(
            base_b, base_c, base_sigma, wt, bt, ct, sigma_t, betas, n_chains, rng
        )
    return _ais_grbm_impl(
        base_b, base_c, base_sigma, wt, bt, ct, sigma_t, betas, n_chains, rng
    )


def ais_srbm(base_b, base_c, wt, bt, ct, lt, betas, n_chains, rng):
    if backend_name() == "numba":
        return _ais_srbm_numba(base_b, base_c, wt, bt, ct, lt, betas, n_chains, rng)
    return _ais_srbm_impl(base_b, base_c, wt, bt, ct, lt, betas, n_chains, rng)
