"""Annealed importance sampling and Monte Carlo likelihood estimation.

The estimators here combine three ingredients:

* AIS runs against a zero-weight base model give partition-function
  estimates, and their retained samples and weights are reused to
  estimate unnormalized hidden marginals where no analytic form exists.
* The stack likelihood estimator draws hidden states feed-forward through
  the conditional distributions and averages the resulting density
  ratios: log p(x0) is estimated as
  log q1*(x0) - log Z_top + logmeanexp_n sum_l [log q_{l+1}*(x_l) - log q_l*(x_l)].
* A variational lower bound and the reconstruction-based potential
  log-loss complete the evaluation toolbox.

Reported standard errors cover only the path-sampling variance; the
uncertainty of partition-function and marginal estimates is tracked
separately by the callers and never folded in silently.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dbn import average_log_loss
from .models import (
    DEFAULT_ENUM_BUDGET,
    GRBM,
    RBM,
    SRBM,
    Grbm,
    ModelError,
    Rbm,
    Srbm,
    binary_states,
    brute_force_hidden_marginal_srbm,
    state_index,
)
from .numerics import (
    LogEstimate,
    RngStream,
    bernoulli_entropy,
    log_mean_exp,
    monte_carlo_se,
    softplus_log,
)

AIS_CHUNK = 4096


class EstimationError(RuntimeError):
    pass


def linear_betas(n_steps):
    """Equally spaced annealing weights 0 = beta_0 < ... < beta_K = 1."""
    if n_steps < 1:
        raise EstimationError("need at least one annealing step")
    return np.linspace(0.0, 1.0, n_steps + 1)


def fit_base_model(target, data=None):
    """Zero-weight model of the target's variant for use as an AIS base.

    Visible biases are fitted to the data base rates (binary) or mean and
    scale (gaussian) when data is given, improving the proposal overlap;
    hidden biases are zero so the base hidden units contribute an exact
    constant at every annealing weight.
    """
    m, n = target.n_visible, target.n_hidden
    w = np.zeros((m, n))
    c = np.zeros(n)
    if target.variant == GRBM:
        if data is None:
            b, sigma = np.zeros(m), target.sigma
        else:
            data = np.atleast_2d(np.asarray(data, dtype=np.float64))
            b = data.mean(axis=0)
            sigma = float(np.std(data)) or target.sigma
        return Grbm(w, b, c, sigma)
    if data is None:
        b = np.zeros(m)
    else:
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        rate = np.clip(data.mean(axis=0), 1e-3, 1.0 - 1e-3)
        b = np.log(rate) - np.log1p(-rate)
    if target.variant == SRBM:
        return Srbm(w, b, c, np.zeros((m, m)))
    return Rbm(w, b, c)


def log_partition_zero_weight(model):
    """Exact log Z of a zero-weight (and zero-lateral) model."""
    if np.any(model.weights != 0.0):
        raise EstimationError("base model must have zero weights")
    if model.variant == SRBM and np.any(model.lateral != 0.0):
        raise EstimationError("base model must have zero lateral couplings")
    hidden = softplus_log(model.hidden_bias).sum()
    if model.variant == GRBM:
        return (
            0.5 * model.n_visible * np.log(2.0 * np.pi * model.sigma ** 2) + hidden
        )
    return softplus_log(model.visible_bias).sum() + hidden


@dataclass
class AisSchedule:
    """Annealing schedule: weights, chain count and the base distribution."""

    betas: np.ndarray
    n_chains: int
    base_model: object

    def __post_init__(self):
        self.betas = np.ascontiguousarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 2:
            raise EstimationError("schedule needs at least the two endpoints")
        if self.betas[0] != 0.0 or self.betas[-1] != 1.0:
            raise EstimationError("annealing weights must start at 0 and end at 1")
        if np.any(np.diff(self.betas) < 0):
            raise EstimationError("annealing weights must be nondecreasing")
        if np.any((self.betas < 0) | (self.betas > 1)):
            raise EstimationError("annealing weights must lie in [0, 1]")
        if self.n_chains < 1:
            raise EstimationError("need at least one chain")


@dataclass
class AisRun:
    """Result of one AIS pass: weights, near-target samples, log Z estimate."""

    log_weights: np.ndarray
    final_samples: np.ndarray
    log_z_base: float
    log_z_estimate: LogEstimate
    n_betas: int

    def __post_init__(self):
        if self.log_weights.shape[0] != self.final_samples.shape[0]:
            raise EstimationError("weight and sample counts disagree")


def _chain_chunk(target, base, betas, n_chains, rng):
    if target.variant == RBM:
        return kernels.ais_rbm(
            base.visible_bias,
            base.hidden_bias,
            target.weights,
            target.visible_bias,
            target.hidden_bias,
            betas,
            n_chains,
            rng,
        )
    if target.variant == GRBM:
        return kernels.ais_grbm(
            base.visible_bias,
            base.hidden_bias,
            base.sigma,
            target.weights,
            target.visible_bias,
            target.hidden_bias,
            target.sigma,
            betas,
            n_chains,
            rng,
        )
    return kernels.ais_srbm(
        base.visible_bias,
        base.hidden_bias,
        target.weights,
        target.visible_bias,
        target.hidden_bias,
        target.lateral,
        betas,
        n_chains,
        rng,
    )


def run_ais(target, schedule, rng, threads=1):
    """Annealed importance sampling toward ``target``.

    Chains start as exact samples of the zero-weight base and pass through
    the Gibbs transition of each intermediate augmented machine.  Chains
    are processed in fixed-size chunks with dedicated substreams, so the
    result is byte-stable for a given stream whatever the thread count.
    Returns the weights, the final near-target samples, and the log
    partition function estimate (weights plus the base's analytic log Z).
    """
    base = schedule.base_model
    if base.variant != target.variant:
        raise EstimationError(
            f"base variant {base.variant!r} does not match target {target.variant!r}"
        )
    if base.n_visible != target.n_visible:
        raise EstimationError("base and target visible dimensions differ")
    log_z_base = log_partition_zero_weight(base)

    n = schedule.n_chains
    if isinstance(rng, RngStream):
        bounds = [(lo, min(lo + AIS_CHUNK, n)) for lo in range(0, n, AIS_CHUNK)]
        rngs = [rng.substream(9, i) for i in range(len(bounds))]
    else:
        bounds = [(0, n)]
        rngs = [rng]

    def one(i):
        lo, hi = bounds[i]
        return _chain_chunk(target, base, schedule.betas, hi - lo, rngs[i])

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(len(bounds))))
    else:
        parts = [one(i) for i in range(len(bounds))]

    log_w = np.concatenate([p[0] for p in parts])
    samples = np.concatenate([p[1] for p in parts], axis=0)
    if n >= 2:
        est = monte_carlo_se(log_w)
        log_z = LogEstimate(est.log_value + log_z_base, est.standard_error, n)
    else:
        log_z = LogEstimate(float(log_w[0]) + log_z_base, 0.0, 1)
    return AisRun(log_w, samples, log_z_base, log_z, schedule.betas.size)


def _log_hidden_conditional_terms(target, samples):
    """log q(y_j = 1 | x) and log q(y_j = 0 | x) at the AIS samples."""
    act = target.hidden_activation(samples)
    return -softplus_log(-act), -softplus_log(act)


def estimate_unnorm_marginal_batch(run, target, states):
    """Importance-reweighted estimates of log q*(y) for rows of ``states``.

    Reuses the AIS samples and weights: q*(y) is the weighted average of
    q(y | x) over the retained samples, times the base partition function.
    Returns (values, relative standard errors).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[1] != target.n_hidden:
        raise ModelError("state dimension does not match the hidden units")
    log_on, log_off = _log_hidden_conditional_terms(target, run.final_samples)
    values = np.empty(states.shape[0])
    errors = np.empty(states.shape[0])
    n = run.log_weights.size
    chunk = max(1, int(2 ** 22 // max(n, 1)))
    for lo in range(0, states.shape[0], chunk):
        y = states[lo : lo + chunk]
        log_cond = y @ log_on.T + (1.0 - y) @ log_off.T  # (rows, n_samples)
        combined = log_cond + run.log_weights[None, :]
        for i in range(y.shape[0]):
            if n >= 2:
                est = monte_carlo_se(combined[i])
                values[lo + i] = est.log_value + run.log_z_base
                errors[lo + i] = est.standard_error
            else:
                values[lo + i] = combined[i, 0] + run.log_z_base
                errors[lo + i] = 0.0
    return values, errors


def estimate_unnorm_marginal(run, target, y):
    """Single-state convenience form of the marginal estimator."""
    y = np.asarray(y, dtype=np.float64)
    values, errors = estimate_unnorm_marginal_batch(run, target, y)
    return LogEstimate(float(values[0]), float(errors[0]), run.log_weights.size)


class AnalyticMarginals:
    """Hidden marginals straight from the closed forms; refuses lateral layers."""

    def __init__(self, dbn):
        self.dbn = dbn

    def __call__(self, layer_index, states):
        layer = self.dbn.layers[layer_index]
        if layer.variant == SRBM:
            raise EstimationError(
                f"no marginal provider for the hidden side of layer "
                f"{layer_index} (lateral-connected); supply an enumeration or "
                f"AIS-backed provider"
            )
        return layer.log_unnorm_hidden(states)


class _TableMarginals:
    """Shared memoization: values are cached per packed binary state."""

    def __init__(self, dbn):
        self.dbn = dbn
        self._tables = {}

    def _compute(self, layer_index, states):
        raise NotImplementedError

    def __call__(self, layer_index, states):
        layer = self.dbn.layers[layer_index]
        if layer.variant != SRBM:
            return layer.log_unnorm_hidden(states)
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        table = self._tables.setdefault(layer_index, {})
        idx = state_index(states)
        missing = np.array(sorted({int(i) for i in idx if int(i) not in table}), dtype=np.int64)
        if missing.size:
            k = layer.n_hidden
            rows = ((missing[:, None] >> np.arange(k)) & 1).astype(np.float64)
            vals = self._compute(layer_index, rows)
            for key, val in zip(missing, vals):
                table[int(key)] = float(val)
        return np.array([table[int(i)] for i in idx])


class ExactMarginals(_TableMarginals):
    """Brute-force hidden marginals by visible enumeration, memoized."""

    def __init__(self, dbn, budget=DEFAULT_ENUM_BUDGET):
        super().__init__(dbn)
        self.budget = budget

    def _compute(self, layer_index, rows):
        return brute_force_hidden_marginal_srbm(
            self.dbn.layers[layer_index], rows, budget=self.budget
        )


class AisMarginals(_TableMarginals):
    """AIS-backed hidden marginals, one retained run per lateral layer.

    Tracks the relative standard error of every marginal it estimates so
    callers can report the marginal-estimation uncertainty alongside the
    path-sampling error instead of folding it in.
    """

    def __init__(self, dbn, runs):
        super().__init__(dbn)
        self.runs = dict(runs)
        self.standard_errors = []

    def _compute(self, layer_index, rows):
        if layer_index not in self.runs:
            raise EstimationError(
                f"no marginal provider for the hidden side of layer "
                f"{layer_index} (lateral-connected); supply an AIS run for it"
            )
        values, errors = estimate_unnorm_marginal_batch(
            self.runs[layer_index], self.dbn.layers[layer_index], rows
        )
        self.standard_errors.extend(float(e) for e in errors)
        return values

    def mean_standard_error(self):
        """Average relative SE over the distinct states estimated so far."""
        if not self.standard_errors:
            return 0.0
        return float(np.mean(self.standard_errors))


def estimate_dbn_log_likelihood(dbn, x0, n_is, marginal_provider, log_z_top, rng):
    """Consistent Monte Carlo estimate of log p(x0) for a layer stack.

    Hidden states are drawn feed-forward through the layer conditionals;
    each path accumulates the log ratio of the next layer's visible
    marginal to the current layer's hidden marginal, and the paths are
    averaged in the linear domain.  The returned standard error covers
    the path-sampling variance only.
    """
    if n_is < 1:
        raise EstimationError("need at least one importance sample")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise EstimationError("x0 must be a single state vector")
    first = dbn.layers[0]
    base_term = float(first.log_unnorm_visible(x0)) - log_z_top.log_value
    if dbn.n_layers == 1:
        return LogEstimate(base_term, 0.0, n_is)

    current = np.broadcast_to(x0, (n_is, x0.size))
    log_w = np.zeros(n_is)
    for l in range(dbn.n_layers - 1):
        layer = dbn.layers[l]
        upper = dbn.layers[l + 1]
        current = np.atleast_2d(layer.sample_hidden(current, rng))
        log_w += upper.log_unnorm_visible(current) - marginal_provider(l, current)
    if n_is >= 2:
        est = monte_carlo_se(log_w)
        return LogEstimate(base_term + est.log_value, est.standard_error, n_is)
    return LogEstimate(base_term + float(log_w[0]), 0.0, 1)


def estimate_dataset_log_likelihood(dbn, data, n_is, marginal_provider, log_z_top, stream):
    """Per-sample estimates over a dataset, one RNG substream per sample."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    out = []
    for i in range(data.shape[0]):
        rng = stream.substream(13, i) if isinstance(stream, RngStream) else stream
        out.append(
            estimate_dbn_log_likelihood(
                dbn, data[i], n_is, marginal_provider, log_z_top, rng
            )
        )
    return out


def estimate_lower_bound(dbn, x, n_samples, log_z_top, rng, exact=False):
    """Variational lower bound on log p(x) for a two-layer stack.

    Averages log r*(y) q(x | y) over y drawn from the factorial posterior
    of the first layer, adds the analytic Bernoulli entropy, and subtracts
    the top log partition function.  With ``exact=True`` the expectation
    is enumerated over all hidden states instead of sampled.
    """
    if dbn.n_layers != 2:
        raise EstimationError("the bound is defined for a two-layer view")
    first, top = dbn.layers
    if not hasattr(first, "log_visible_conditional"):
        raise EstimationError(
            "layer 1 must have an analytic visible conditional for the bound"
        )
    x = np.asarray(x, dtype=np.float64)
    p = np.atleast_1d(first.hidden_conditional(x))
    entropy = float(bernoulli_entropy(p))

    if exact:
        ys = binary_states(first.n_hidden)
        # floor keeps 0 * log(0) out of the dot products; such states get
        # weight exp(-736) == 0 anyway
        log_p = np.log(np.maximum(p, 1e-320))
        log_q = np.log(np.maximum(1.0 - p, 1e-320))
        weights = np.exp(ys @ log_p + (1.0 - ys) @ log_q)
        vals = top.log_unnorm_visible(ys) + first.log_visible_conditional(
            np.broadcast_to(x, (len(ys), x.size)), ys
        )
        keep = weights > 0
        expect = float(np.sum(weights[keep] * vals[keep]))
        se = 0.0
        n_used = int(keep.sum())
    else:
        if n_samples < 1:
            raise EstimationError("need at least one posterior sample")
        ys = (rng.random((n_samples, p.size)) < p).astype(np.float64)
        vals = top.log_unnorm_visible(ys) + first.log_visible_conditional(
            np.broadcast_to(x, (n_samples, x.size)), ys
        )
        expect = float(vals.mean())
        se = float(vals.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
        n_used = n_samples
    return LogEstimate(expect + entropy - log_z_top.log_value, se, max(n_used, 1))


def _component_log_density(layer, components, x_chunk):
    """log q(x | y) for every eval row against every sampled component."""
    if layer.variant == GRBM:
        means = layer.visible_bias + layer.sigma * (components @ layer.weights.T)
        sq = (
            np.sum(x_chunk ** 2, axis=1)[:, None]
            - 2.0 * x_chunk @ means.T
            + np.sum(means ** 2, axis=1)[None, :]
        )
        return -sq / (2.0 * layer.sigma ** 2) - 0.5 * layer.n_visible * np.log(
            2.0 * np.pi * layer.sigma ** 2
        )
    act = components @ layer.weights.T + layer.visible_bias
    log_on, log_off = -softplus_log(-act), -softplus_log(act)
    return x_chunk @ log_on.T + (1.0 - x_chunk) @ log_off.T


def estimate_potential_log_loss(layer1, eval_set, recon_set=None, k_recon=1, rng=None):
    """Reconstruction-mixture estimate of the best-case log-loss, in bits
    per component.

    Each reconstruction-set point contributes ``k_recon`` sampled hidden
    states; the model density is replaced by the uniform mixture of the
    visible conditionals at those states.  By default the evaluation set
    doubles as the reconstruction set, which deliberately encourages
    optimistic estimates.
    """
    if layer1.variant == SRBM:
        raise EstimationError("potential log-loss needs an analytic visible conditional")
    if k_recon < 1:
        raise EstimationError("need at least one reconstruction per point")
    eval_set = np.atleast_2d(np.asarray(eval_set, dtype=np.float64))
    recon = eval_set if recon_set is None else np.atleast_2d(
        np.asarray(recon_set, dtype=np.float64)
    )
    if eval_set.shape[0] == 0 or recon.shape[0] == 0:
        raise EstimationError("empty evaluation or reconstruction set")
    if rng is None:
        rng = RngStream(0).generator()

    probs = np.atleast_2d(layer1.hidden_conditional(recon))
    parts = []
    for _ in range(k_recon):
        parts.append((rng.random(probs.shape) < probs).astype(np.float64))
    components = np.concatenate(parts, axis=0)
    n_comp = components.shape[0]

    def evaluator(rows):
        out = np.empty(rows.shape[0])
        chunk = max(1, int(2 ** 22 // max(n_comp, 1)))
        for lo in range(0, rows.shape[0], chunk):
            dens = _component_log_density(layer1, components, rows[lo : lo + chunk])
            out[lo : lo + chunk] = log_mean_exp(dens, axis=1)
        return out

    return average_log_loss(eval_set, evaluator)
