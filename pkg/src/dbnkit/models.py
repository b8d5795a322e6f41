"""Latent-variable energy models: binary RBM, Gaussian-visible RBM, and a
lateral-connected variant with visible-visible couplings.

Each model holds a weight matrix ``weights`` (n_visible x n_hidden), a
``visible_bias`` and a ``hidden_bias``.  The Gaussian variant adds a scale
``sigma`` shared across visible units; the lateral variant adds a symmetric
zero-diagonal coupling matrix ``lateral``.  States are represented as
float arrays with entries in {0, 1} (or reals for Gaussian visibles);
all state-level operations accept either a single state vector or a
(batch, dim) matrix and return matching shapes.
"""

from functools import lru_cache

import numpy as np

from . import kernels
from .numerics import log_sum_exp, logistic, softplus_log

RBM = "rbm"
GRBM = "grbm"
SRBM = "srbm"

DEFAULT_ENUM_BUDGET = 2 ** 25
_ENUM_CHUNK = 2 ** 16


class ModelError(ValueError):
    pass


class EnumerationBudgetError(ModelError):
    """Raised when an exact computation would enumerate too many states."""


def binary_states(k):
    """All 2^k binary states as a (2^k, k) float64 matrix, low bit first."""
    if k > 22:
        raise EnumerationBudgetError(f"2^{k} states is too many to materialize")
    return _binary_states_cached(k).copy()


@lru_cache(maxsize=16)
def _binary_states_cached(k):
    idx = np.arange(2 ** k, dtype=np.int64)
    return ((idx[:, None] >> np.arange(k)) & 1).astype(np.float64)


def binary_chunk(start, stop, k):
    """States start..stop-1 of the 2^k enumeration, for chunked scans."""
    idx = np.arange(start, stop, dtype=np.int64)
    return ((idx[:, None] >> np.arange(k)) & 1).astype(np.float64)


def state_index(x):
    """Bit-pack binary state rows into integer indices (inverse of binary_states)."""
    x = np.atleast_2d(np.asarray(x))
    powers = (1 << np.arange(x.shape[1], dtype=np.int64)).astype(np.float64)
    return np.rint(x @ powers).astype(np.int64)


def _check_budget(k, budget, what):
    if 2 ** k > budget:
        raise EnumerationBudgetError(
            f"{what} needs 2^{k} states, above the budget of {budget}; "
            "use annealed importance sampling instead"
        )


def _rows(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dim:
        raise ModelError(f"{what} has dimension {x.shape[1]}, expected {dim}")
    return x, single


def _ret(values, single):
    return float(values[0]) if single and values.ndim == 1 else (
        values[0] if single else values
    )


class LayerModel:
    """Shared structure and behaviour of the three model variants."""

    variant = None

    def __init__(self, weights, visible_bias, hidden_bias):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.visible_bias = np.ascontiguousarray(visible_bias, dtype=np.float64)
        self.hidden_bias = np.ascontiguousarray(hidden_bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ModelError("weights must be a matrix")
        m, n = self.weights.shape
        if m < 1 or n < 1:
            raise ModelError("need at least one visible and one hidden unit")
        if self.visible_bias.shape != (m,) or self.hidden_bias.shape != (n,):
            raise ModelError("bias shapes do not match the weight matrix")
        for arr in (self.weights, self.visible_bias, self.hidden_bias):
            if not np.isfinite(arr).all():
                raise ModelError("model parameters must be finite")

    @property
    def n_visible(self):
        return self.weights.shape[0]

    @property
    def n_hidden(self):
        return self.weights.shape[1]

    # -- conditionals ---------------------------------------------------

    def _hidden_activation_rows(self, x):
        return x @ self.weights + self.hidden_bias

    def hidden_activation(self, x):
        """Pre-sigmoid input to each hidden unit given visible states."""
        x, single = _rows(x, self.n_visible, "visible state")
        return _ret(self._hidden_activation_rows(x), single)

    def hidden_conditional(self, x):
        """Bernoulli means of the hidden units given visible states (factorial)."""
        return logistic(self.hidden_activation(x))

    def sample_hidden(self, x, rng):
        x, single = _rows(x, self.n_visible, "visible state")
        p = logistic(self._hidden_activation_rows(x))
        h = (rng.random(p.shape) < p).astype(np.float64)
        return _ret(h, single)

    # -- energies and marginals -----------------------------------------

    def energy(self, x, y):
        x, sx = _rows(x, self.n_visible, "visible state")
        y, sy = _rows(y, self.n_hidden, "hidden state")
        if x.shape[0] != y.shape[0]:
            if x.shape[0] == 1:
                x = np.broadcast_to(x, (y.shape[0], x.shape[1]))
            elif y.shape[0] == 1:
                y = np.broadcast_to(y, (x.shape[0], y.shape[1]))
            else:
                raise ModelError("mismatched batch sizes")
        e = self._energy_rows(x, y)
        return _ret(e, sx and sy)

    def log_unnorm_visible(self, x):
        """log q*(x): the hidden units summed (or integrated) out analytically."""
        x, single = _rows(x, self.n_visible, "visible state")
        return _ret(self._log_unnorm_visible_rows(x), single)

    def log_unnorm_hidden(self, y):
        """log q*(y): the visible units summed (or integrated) out analytically."""
        y, single = _rows(y, self.n_hidden, "hidden state")
        return _ret(self._log_unnorm_hidden_rows(y), single)

    def copy(self):
        raise NotImplementedError

    def parameter_arrays(self):
        """Names and arrays of all trainable parameters, in a fixed order."""
        return {
            "weights": self.weights,
            "visible_bias": self.visible_bias,
            "hidden_bias": self.hidden_bias,
        }


class Rbm(LayerModel):
    """Bipartite binary model: E(x, y) = -x'Wy - b'x - c'y."""

    variant = RBM

    def _energy_rows(self, x, y):
        return -np.sum((x @ self.weights) * y, axis=1) - x @ self.visible_bias - y @ self.hidden_bias

    def _log_unnorm_visible_rows(self, x):
        return x @ self.visible_bias + softplus_log(x @ self.weights + self.hidden_bias).sum(axis=1)

    def _log_unnorm_hidden_rows(self, y):
        return y @ self.hidden_bias + softplus_log(y @ self.weights.T + self.visible_bias).sum(axis=1)

    def visible_conditional(self, y):
        """Bernoulli means of the visible units given hidden states."""
        y, single = _rows(y, self.n_hidden, "hidden state")
        return _ret(logistic(y @ self.weights.T + self.visible_bias), single)

    def sample_visible(self, y, rng, x0=None):
        y, single = _rows(y, self.n_hidden, "hidden state")
        p = logistic(y @ self.weights.T + self.visible_bias)
        x = (rng.random(p.shape) < p).astype(np.float64)
        return _ret(x, single)

    def log_visible_conditional(self, x, y):
        """log q(x | y), factorial Bernoulli."""
        x, sx = _rows(x, self.n_visible, "visible state")
        y, sy = _rows(y, self.n_hidden, "hidden state")
        act = y @ self.weights.T + self.visible_bias
        ll = -(softplus_log(-act) * x + softplus_log(act) * (1.0 - x)).sum(axis=1)
        return _ret(ll, sx and sy)

    def copy(self):
        return Rbm(self.weights.copy(), self.visible_bias.copy(), self.hidden_bias.copy())


class Grbm(LayerModel):
    """Gaussian-visible model: E(x, y) = |x-b|^2/(2 s^2) - x'Wy/s - c'y.

    Completing the square in the energy gives the visible conditional
    q(x | y) = Normal(b + s W y, s^2 I); the text-book mean "Wy + b"
    without the scale factor is inconsistent with this energy, and the
    energy is what every estimator in this package evaluates, so the
    scaled mean is used throughout.
    """

    variant = GRBM

    def __init__(self, weights, visible_bias, hidden_bias, sigma):
        super().__init__(weights, visible_bias, hidden_bias)
        self.sigma = float(sigma)
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ModelError("sigma must be positive and finite")

    def _hidden_activation_rows(self, x):
        return x @ self.weights / self.sigma + self.hidden_bias

    def _energy_rows(self, x, y):
        d = x - self.visible_bias
        return (
            np.sum(d * d, axis=1) / (2.0 * self.sigma ** 2)
            - np.sum((x @ self.weights) * y, axis=1) / self.sigma
            - y @ self.hidden_bias
        )

    def _log_unnorm_visible_rows(self, x):
        d = x - self.visible_bias
        return (
            -np.sum(d * d, axis=1) / (2.0 * self.sigma ** 2)
            + softplus_log(x @ self.weights / self.sigma + self.hidden_bias).sum(axis=1)
        )

    def _log_unnorm_hidden_rows(self, y):
        # Integrating exp(-E(x, y)) over x in closed form: complete the
        # square with u = Wy,
        #   -|x-b|^2/(2 s^2) + x'u/s
        #     = -|x - (b + s u)|^2/(2 s^2) + b'u/s + |u|^2/2,
        # and the Gaussian integral contributes (2 pi s^2)^(m/2).  Hence
        #   log q*(y) = (m/2) log(2 pi s^2) + c'y + b'Wy/s + |Wy|^2/2.
        wy = y @ self.weights.T
        return (
            0.5 * self.n_visible * np.log(2.0 * np.pi * self.sigma ** 2)
            + y @ self.hidden_bias
            + wy @ self.visible_bias / self.sigma
            + 0.5 * np.sum(wy * wy, axis=1)
        )

    def visible_mean(self, y):
        """Mean of the Gaussian visible conditional, b + s W y."""
        y, single = _rows(y, self.n_hidden, "hidden state")
        return _ret(self.visible_bias + self.sigma * (y @ self.weights.T), single)

    def sample_visible(self, y, rng, x0=None):
        y, single = _rows(y, self.n_hidden, "hidden state")
        mean = self.visible_bias + self.sigma * (y @ self.weights.T)
        x = mean + self.sigma * rng.standard_normal(mean.shape)
        return _ret(x, single)

    def log_visible_conditional(self, x, y):
        """log density of q(x | y) = Normal(b + s W y, s^2 I)."""
        x, sx = _rows(x, self.n_visible, "visible state")
        y, sy = _rows(y, self.n_hidden, "hidden state")
        d = x - (self.visible_bias + self.sigma * (y @ self.weights.T))
        ll = (
            -np.sum(d * d, axis=1) / (2.0 * self.sigma ** 2)
            - 0.5 * self.n_visible * np.log(2.0 * np.pi * self.sigma ** 2)
        )
        return _ret(ll, sx and sy)

    def copy(self):
        return Grbm(
            self.weights.copy(),
            self.visible_bias.copy(),
            self.hidden_bias.copy(),
            self.sigma,
        )


class Srbm(LayerModel):
    """Binary model with lateral visible-visible couplings.

    E(x, y) = -x'Wy - b'x - c'y - x'Lx/2 with L symmetric, zero diagonal.
    The hidden conditional stays factorial; the visible conditional does
    not, so visible sampling is done by sequential Gibbs sweeps during
    evaluation and by damped parallel mean-field during training.
    """

    variant = SRBM

    def __init__(self, weights, visible_bias, hidden_bias, lateral):
        super().__init__(weights, visible_bias, hidden_bias)
        self.lateral = np.ascontiguousarray(lateral, dtype=np.float64)
        m = self.n_visible
        if self.lateral.shape != (m, m):
            raise ModelError("lateral matrix shape does not match visible units")
        if not np.isfinite(self.lateral).all():
            raise ModelError("lateral matrix must be finite")
        if not np.array_equal(self.lateral, self.lateral.T):
            raise ModelError("lateral matrix must be symmetric")
        if np.any(np.diag(self.lateral) != 0.0):
            raise ModelError("lateral matrix must have a zero diagonal")

    def _energy_rows(self, x, y):
        return (
            -np.sum((x @ self.weights) * y, axis=1)
            - x @ self.visible_bias
            - y @ self.hidden_bias
            - 0.5 * np.sum((x @ self.lateral) * x, axis=1)
        )

    def _log_unnorm_visible_rows(self, x):
        return (
            x @ self.visible_bias
            + 0.5 * np.sum((x @ self.lateral) * x, axis=1)
            + softplus_log(x @ self.weights + self.hidden_bias).sum(axis=1)
        )

    def _log_unnorm_hidden_rows(self, y):
        raise ModelError(
            "hidden marginal of a lateral-connected model is not analytic; "
            "use brute_force_hidden_marginal_srbm or an AIS-based estimate"
        )

    def sample_visible(self, y, rng, x0=None):
        """One full sequential Gibbs sweep over the visible units.

        Needs the current visible state ``x0`` as the sweep's starting
        point; the sweep leaves q(x | y) invariant.
        """
        y, single = _rows(y, self.n_hidden, "hidden state")
        if x0 is None:
            raise ModelError("lateral-connected visible sampling needs a start state")
        x0, _ = _rows(x0, self.n_visible, "visible state")
        if x0.shape[0] != y.shape[0]:
            raise ModelError("mismatched batch sizes")
        drive = y @ self.weights.T + self.visible_bias
        u = rng.random(x0.shape)
        x = kernels.srbm_sweep(np.ascontiguousarray(x0.copy()), self.lateral, drive, u)
        return _ret(x, single)

    def mean_field_visible(self, y, steps=20, damping=0.2):
        """Damped parallel mean-field estimate of the visible conditional.

        Starts at 0.5 per unit and iterates
        mu <- (1 - damping) * g(L mu + W y + b) + damping * mu,
        where damping is the retained fraction of the old value.
        """
        if not (0.0 <= damping < 1.0):
            raise ModelError("damping must lie in [0, 1)")
        if steps < 1:
            raise ModelError("need at least one mean-field step")
        y, single = _rows(y, self.n_hidden, "hidden state")
        drive = y @ self.weights.T + self.visible_bias
        mu = np.full((y.shape[0], self.n_visible), 0.5)
        for _ in range(steps):
            mu = (1.0 - damping) * logistic(mu @ self.lateral + drive) + damping * mu
        return _ret(mu, single)

    def copy(self):
        return Srbm(
            self.weights.copy(),
            self.visible_bias.copy(),
            self.hidden_bias.copy(),
            self.lateral.copy(),
        )

    def parameter_arrays(self):
        d = super().parameter_arrays()
        d["lateral"] = self.lateral
        return d


def initialize_layer(variant, n_visible, n_hidden, rng, sigma=None, weight_scale=0.01):
    """Fresh layer with small random weights, zero visible biases and
    hidden biases at -1 (a rough sparseness encouragement)."""
    w = weight_scale * rng.standard_normal((n_visible, n_hidden))
    b = np.zeros(n_visible)
    c = np.full(n_hidden, -1.0)
    if variant == RBM:
        return Rbm(w, b, c)
    if variant == GRBM:
        if sigma is None:
            raise ModelError("gaussian layer needs a sigma")
        return Grbm(w, b, c, sigma)
    if variant == SRBM:
        return Srbm(w, b, c, np.zeros((n_visible, n_visible)))
    raise ModelError(f"unknown variant {variant!r}")


def brute_force_log_partition(model, budget=DEFAULT_ENUM_BUDGET):
    """Exact log Z by enumerating the cheaper analytic marginal.

    Gaussian-visible models always enumerate the hidden side;
    lateral-connected models always enumerate the visible side.
    """
    if model.variant == GRBM:
        side, k = "hidden", model.n_hidden
    elif model.variant == SRBM:
        side, k = "visible", model.n_visible
    else:
        side, k = (
            ("hidden", model.n_hidden)
            if model.n_hidden <= model.n_visible
            else ("visible", model.n_visible)
        )
    _check_budget(k, budget, "partition function")
    chunks = []
    fn = model.log_unnorm_hidden if side == "hidden" else model.log_unnorm_visible
    for start in range(0, 2 ** k, _ENUM_CHUNK):
        states = binary_chunk(start, min(start + _ENUM_CHUNK, 2 ** k), k)
        chunks.append(log_sum_exp(fn(states)))
    return log_sum_exp(chunks)


def brute_force_hidden_marginal_srbm(model, y, budget=DEFAULT_ENUM_BUDGET):
    """log q*(y) = log sum_x exp(-E(x, y)) by visible enumeration."""
    if model.variant != SRBM:
        raise ModelError("visible enumeration of the hidden marginal is for "
                         "lateral-connected models; others have it analytically")
    y, single = _rows(y, model.n_hidden, "hidden state")
    m = model.n_visible
    _check_budget(m, budget, "hidden marginal")
    wy = y @ model.weights.T  # (ny, m)
    pieces = []
    for start in range(0, 2 ** m, _ENUM_CHUNK):
        x = binary_chunk(start, min(start + _ENUM_CHUNK, 2 ** m), m)
        quad = x @ model.visible_bias + 0.5 * np.sum((x @ model.lateral) * x, axis=1)
        # (chunk, ny) log terms: x'(Wy) + b'x + x'Lx/2
        logs = quad[:, None] + x @ wy.T
        vmax = logs.max(axis=0)
        pieces.append((vmax, np.exp(logs - vmax).sum(axis=0)))
    vmax = np.max([p[0] for p in pieces], axis=0)
    total = np.zeros(y.shape[0])
    for pm, ps in pieces:
        total += np.exp(pm - vmax) * ps
    out = y @ model.hidden_bias + vmax + np.log(total)
    return _ret(out, single)
