"""Layer stacks: composition, ancestral sampling and exact likelihood.

A stack of L layers defines the directed-on-top-of-undirected density

    p(x0) = sum_{x1..x_{L-1}} q_L(x_{L-1}) prod_l q_l(x_{l-1} | x_l),

where q_l are the layer models, layer l's hidden units are layer l+1's
visible units, and q_L is the top layer's (normalized) visible marginal.
"""

import json
from pathlib import Path

import numpy as np

from .models import (
    DEFAULT_ENUM_BUDGET,
    GRBM,
    SRBM,
    EnumerationBudgetError,
    binary_states,
)
from .numerics import LOG2, log_sum_exp
from .storage import canonical_json, load_model, save_model
from . import models as _models


class DbnError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


class DbnModel:
    """An ordered, dimension-compatible stack of layer models."""

    def __init__(self, layers):
        layers = tuple(layers)
        if not layers:
            raise DbnError("a stack needs at least one layer")
        for lower, upper in zip(layers, layers[1:]):
            if lower.n_hidden != upper.n_visible:
                raise DbnError(
                    f"layer with {lower.n_hidden} hidden units cannot feed a "
                    f"layer with {upper.n_visible} visible units"
                )
            if upper.variant == GRBM:
                raise DbnError("gaussian-visible layers are only valid at the bottom")
        self.layers = layers

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def n_visible(self):
        return self.layers[0].n_visible

    @property
    def top(self):
        return self.layers[-1]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def feed_forward_sample(dbn, x0, rng):
    """Hidden states x1..x_{L-1}, drawn layer by layer from q_l(x_l | x_{l-1}).

    ``x0`` may be a single state or a batch; returns a list with one entry
    per interior interface (empty for a single layer).
    """
    states = []
    current = x0
    for layer in dbn.layers[:-1]:
        current = layer.sample_hidden(current, rng)
        states.append(current)
    return states


def ancestral_sample(dbn, gibbs_steps=100, rng=None, n_samples=1, lateral_sweeps=10):
    """Draw visible samples: equilibrate the top layer, then map down.

    The top layer runs ``gibbs_steps`` alternating Gibbs sweeps (default
    burn-in 100, no thinning) from a uniform random start.  Downward
    conditionals are factorial except for lateral-connected layers, which
    get ``lateral_sweeps`` sequential sweeps as an approximation.
    """
    if rng is None:
        raise DbnError("ancestral sampling needs a random generator")
    if gibbs_steps < 1:
        raise DbnError("need at least one Gibbs sweep in the top layer")
    top = dbn.top
    x = (rng.random((n_samples, top.n_visible)) < 0.5).astype(np.float64)
    for _ in range(gibbs_steps):
        y = top.sample_hidden(x, rng)
        x = top.sample_visible(y, rng, x0=x)
    for layer in reversed(dbn.layers[:-1]):
        if layer.variant == SRBM:
            down = (rng.random((n_samples, layer.n_visible)) < 0.5).astype(np.float64)
            for _ in range(lateral_sweeps):
                down = layer.sample_visible(x, rng, x0=down)
            x = down
        else:
            x = layer.sample_visible(x, rng)
    return x[0] if n_samples == 1 else x


def _log_downward_conditional_table(layer, budget):
    """Matrix of log q(x | y) over all (visible state, hidden state) pairs."""
    m, n = layer.n_visible, layer.n_hidden
    if 2 ** m * 2 ** n > budget or max(m, n) > 22:
        raise EnumerationBudgetError(
            f"conditional table needs 2^{m + n} entries, above the budget"
        )
    xs = binary_states(m)
    ys = binary_states(n)
    if layer.variant == SRBM:
        # normalize exp(-E) column-wise over the visible states
        neg_e = -(layer.energy(np.repeat(xs, len(ys), axis=0), np.tile(ys, (len(xs), 1))))
        neg_e = neg_e.reshape(len(xs), len(ys))
        return neg_e - log_sum_exp(neg_e, axis=0)
    return layer.log_visible_conditional(
        np.repeat(xs, len(ys), axis=0), np.tile(ys, (len(xs), 1))
    ).reshape(len(xs), len(ys))


def brute_force_log_likelihood(dbn, x, budget=DEFAULT_ENUM_BUDGET):
    """Exact log p(x) in nats by enumerating every interface.

    Tables are built top-down: the top layer's normalized visible marginal
    over all of its 2^d states, then each interface in turn absorbs the
    layer's downward conditional, so the nesting order is fixed as
    top-to-bottom regardless of layer widths.  Accepts a single state or a
    batch of rows.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dbn.n_visible:
        raise DbnError("data dimension does not match the stack")
    first = dbn.layers[0]
    log_z = _models.brute_force_log_partition(dbn.top, budget=budget)
    if dbn.n_layers == 1:
        out = first.log_unnorm_visible(x) - log_z
        return float(out[0]) if single else out

    top_states = binary_states(dbn.top.n_visible)
    table = dbn.top.log_unnorm_visible(top_states) - log_z
    for layer in reversed(dbn.layers[1:-1]):
        cond = _log_downward_conditional_table(layer, budget)
        table = log_sum_exp(cond + table[None, :], axis=1)

    # bottom layer: evaluate q_1(x | x1) at the requested points
    hidden1 = binary_states(first.n_hidden)
    if first.variant == SRBM:
        neg_e = -first.energy(
            np.repeat(x, len(hidden1), axis=0), np.tile(hidden1, (len(x), 1))
        ).reshape(len(x), len(hidden1))
        norms = _models.brute_force_hidden_marginal_srbm(first, hidden1, budget)
        log_cond = neg_e - norms[None, :]
    else:
        log_cond = first.log_visible_conditional(
            np.repeat(x, len(hidden1), axis=0), np.tile(hidden1, (len(x), 1))
        ).reshape(len(x), len(hidden1))
    out = log_sum_exp(log_cond + table[None, :], axis=1)
    return float(out[0]) if single else out


def average_log_loss(dataset, evaluator):
    """Average log-loss in bits per data component.

    ``evaluator`` maps a batch of rows to per-row log densities in nats.
    A failing batch is retried sample by sample so the error can name the
    offending index.
    """
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if data.shape[0] == 0:
        raise DbnError("empty dataset")
    try:
        log_p = np.asarray(evaluator(data), dtype=np.float64)
    except Exception:
        for i in range(data.shape[0]):
            try:
                evaluator(data[i : i + 1])
            except Exception as exc:
                raise EvaluationError(f"evaluation failed at sample {i}: {exc}") from exc
        raise
    if log_p.shape != (data.shape[0],):
        raise EvaluationError("evaluator returned a malformed result")
    return float(np.mean(-log_p / LOG2) / data.shape[1])


def save_dbn(dbn, directory, provenance=None):
    """Write one container per layer plus a manifest with stack metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layer_files = []
    for i, layer in enumerate(dbn.layers):
        name = f"layer_{i:02d}.dbk"
        save_model(layer, directory / name)
        layer_files.append(name)
    manifest = {
        "format_version": 1,
        "kind": "dbn",
        "layers": layer_files,
        "provenance": provenance or {},
    }
    (directory / "manifest.json").write_text(canonical_json(manifest) + "\n")


def load_dbn(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DbnError(f"no stack manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    layers = [load_model(directory / name) for name in manifest["layers"]]
    return DbnModel(layers)


def read_manifest(directory):
    return json.loads((Path(directory) / "manifest.json").read_text())
